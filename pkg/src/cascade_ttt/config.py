"""``key = value`` config files and the training configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields


class ConfigError(ValueError):
    pass


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def render_kv(values: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class TrainConfig:
    # model
    dim: int = 64
    intervals: int = 8
    gcn_layers: int = 2
    hgnn_layers: int = 1
    shared_embedding: bool = True
    init_std: float = 0.1
    directed: bool = False
    max_cascade_length: int = 200
    # data protocol
    obs_fraction: float = 0.5
    split: tuple = (0.8, 0.1, 0.1)
    # augmentation
    mask_prob: float = 0.2
    shuffle_fraction: float = 0.2
    # losses
    lam: float = 0.3
    gamma: float = 0.1
    seen_mask: bool = True
    macro_summary: str = "last"
    # joint phase
    batch_size: int = 64
    lr: float = 0.001
    tau: float = 0.99
    joint_epochs: int = 20
    # meta phase
    meta_batch: int = 5
    inner_steps: int = 2
    inner_lr: float = 0.0005
    meta_lr: float = 0.0002
    meta_iterations: int = 200
    meta_eval_every: int = 20
    meta_order: int = 1
    # evaluation
    eval_all_positions: bool = False
    hits_average: str = "position"
    seed: int = 0

    def __post_init__(self):
        self.split = tuple(float(x) for x in self.split)
        self.validate()

    def validate(self) -> None:
        positive = ["dim", "intervals", "gcn_layers", "hgnn_layers", "batch_size", "lr",
                    "meta_batch", "max_cascade_length", "meta_eval_every"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("joint_epochs", "meta_iterations", "inner_steps", "inner_lr", "meta_lr",
                     "gamma", "init_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("lam", "tau", "mask_prob", "shuffle_fraction", "obs_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.macro_summary not in ("last", "mean"):
            raise ConfigError("macro_summary must be 'last' or 'mean'")
        if self.hits_average not in ("position", "cascade"):
            raise ConfigError("hits_average must be 'position' or 'cascade'")
        if self.meta_order != 1:
            raise ConfigError("only first-order meta-gradients are implemented (meta_order = 1)")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError("split must be three fractions summing to 1")

    @classmethod
    def from_mapping(cls, values: dict[str, str], base: "TrainConfig | None" = None) -> "TrainConfig":
        current = asdict(base) if base is not None else asdict(cls())
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(kinds))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for key, text in values.items():
            kind = kinds[key]
            try:
                if kind == "bool":
                    current[key] = _parse_bool(text)
                elif kind == "int":
                    current[key] = int(text)
                elif kind == "float":
                    current[key] = float(text)
                elif kind == "tuple":
                    current[key] = tuple(float(x) for x in text.split(","))
                else:
                    current[key] = text.strip()
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None
        return cls(**current)

    def to_mapping(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return render_kv(self.to_mapping())

    def replace(self, **changes) -> "TrainConfig":
        values = asdict(self)
        values.update(changes)
        return TrainConfig(**values)
