"""Partitioned parameter store and the versioned checkpoint file.

Checkpoint layout: a UTF-8 header of ``key = value`` lines and one
``tensor <partition>/<name> <shape> <offset> <count>`` line per array, closed
by a line ``end``; then the arrays as little-endian float64 in manifest order
(offsets and counts are in elements).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .auxiliary import init_predictor, init_projector
from .backbone import init_adaptor, init_encoder
from .config import TrainConfig, parse_kv_text, render_kv
from .heads import init_heads
from .tensor import Tensor
from .user_rep import init_user_rep

FORMAT_VERSION = 1
MAGIC = "cascade-ttt checkpoint"

PARTITIONS = ("user_rep", "encoder", "adaptor", "projector", "predictor", "heads",
              "target_adaptor", "target_projector")
PHASES = ("init", "joint", "meta", "test")
# the meta-model that is adapted and updated after joint training
META_PARTITIONS = ("adaptor", "projector", "predictor", "heads")
ADAPTED_PARTITIONS = ("adaptor", "projector", "predictor")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelState:
    config: TrainConfig
    num_users: int
    params: dict[str, dict[str, np.ndarray]]
    phase: str = "init"
    frozen: frozenset = field(default_factory=frozenset)

    def checksum(self, *partitions: str) -> str:
        h = hashlib.sha256()
        for part in partitions or PARTITIONS:
            for name, arr in self.params[part].items():
                h.update(f"{part}/{name}{arr.shape}".encode())
                h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelState":
        return ModelState(
            config=self.config,
            num_users=self.num_users,
            params={p: {k: v.copy() for k, v in d.items()} for p, d in self.params.items()},
            phase=self.phase,
            frozen=frozenset(self.frozen),
        )

    def tensors(self, partition: str, trainable: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=trainable) for k, v in self.params[partition].items()}


def init_state(num_users: int, cfg: TrainConfig) -> ModelState:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim
    params = {
        "user_rep": init_user_rep(num_users, d, rng, cfg.gcn_layers, cfg.hgnn_layers,
                                  cfg.shared_embedding, cfg.init_std),
        "encoder": init_encoder(d, rng),
        "adaptor": init_adaptor(d, rng),
        "projector": init_projector(d, rng),
        "predictor": init_predictor(d, rng),
        "heads": init_heads(d, num_users, rng),
    }
    params["target_adaptor"] = {k: v.copy() for k, v in params["adaptor"].items()}
    params["target_projector"] = {k: v.copy() for k, v in params["projector"].items()}
    return ModelState(config=cfg, num_users=num_users, params=params)


def expected_shapes(num_users: int, cfg: TrainConfig) -> dict[str, dict[str, tuple]]:
    skeleton = init_state(num_users, cfg.replace(seed=0))
    return {p: {k: v.shape for k, v in d.items()} for p, d in skeleton.params.items()}


def save_checkpoint(state: ModelState, path) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "phase": state.phase,
        "num_users": state.num_users,
        "frozen": ",".join(sorted(state.frozen)),
    }
    for k, v in state.config.to_mapping().items():
        header[f"config.{k}"] = v
    lines = [MAGIC + "\n", render_kv(header)]
    chunks = []
    offset = 0
    for part in PARTITIONS:
        for name, arr in state.params[part].items():
            shape = ",".join(str(s) for s in arr.shape) or "scalar"
            lines.append(f"tensor {part}/{name} {shape} {offset} {arr.size}\n")
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            offset += arr.size
    lines.append("end\n")
    with open(path, "wb") as fh:
        fh.write("".join(lines).encode("utf-8"))
        for c in chunks:
            fh.write(c)


def load_checkpoint(path, expect_dim: int | None = None) -> ModelState:
    blob = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = blob.find(marker)
    if not blob.startswith(MAGIC.encode()) or cut < 0:
        raise CheckpointError(f"{path}: not a checkpoint or header truncated")
    header_text = blob[len(MAGIC) + 1:cut + 1].decode("utf-8")
    body = blob[cut + len(marker):]

    kv_lines, manifest = [], []
    for line in header_text.splitlines():
        if line.startswith("tensor "):
            _, key, shape, offset, count = line.split()
            dims = () if shape == "scalar" else tuple(int(s) for s in shape.split(","))
            manifest.append((key, dims, int(offset), int(count)))
        else:
            kv_lines.append(line)
    meta = parse_kv_text("\n".join(kv_lines), str(path))
    version = int(meta.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    cfg = TrainConfig.from_mapping({k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")})
    if expect_dim is not None and cfg.dim != expect_dim:
        raise CheckpointError(f"{path}: shape mismatch, checkpoint dim {cfg.dim} but {expect_dim} expected")
    num_users = int(meta["num_users"])

    total = sum(m[3] for m in manifest)
    if len(body) != 8 * total:
        raise CheckpointError(f"{path}: payload has {len(body)} bytes, manifest needs {8 * total} (truncated?)")
    values = np.frombuffer(body, dtype="<f8")
    params: dict[str, dict[str, np.ndarray]] = {p: {} for p in PARTITIONS}
    for key, dims, offset, count in manifest:
        part, name = key.split("/", 1)
        if part not in params:
            raise CheckpointError(f"{path}: unknown partition {part!r}")
        params[part][name] = values[offset:offset + count].astype(np.float64).reshape(dims)

    shapes = expected_shapes(num_users, cfg)
    for part in PARTITIONS:
        got = {k: v.shape for k, v in params[part].items()}
        if got != shapes[part]:
            raise CheckpointError(f"{path}: shape mismatch in partition {part!r}: {got} vs expected {shapes[part]}")
    frozen = frozenset(x for x in meta.get("frozen", "").split(",") if x)
    return ModelState(config=cfg, num_users=num_users, params=params, phase=meta["phase"], frozen=frozen)
