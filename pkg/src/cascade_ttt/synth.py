"""Synthetic social graphs and independent-cascade diffusion with an optional shift.

The last ``shift_fraction`` of cascades (by release order) are drawn from a
shifted process: activation probability is scaled by ``shift_factor`` and the
``hub_dropout_k`` highest-degree users never adopt.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import networkx as nx
import numpy as np

from .config import parse_kv_text, render_kv
from .data import MAX_CASCADE_LENGTH, Cascade, Dataset, SocialGraph

MAX_RETRIES = 50


@dataclass
class SynthConfig:
    n_users: int = 200
    pa_edges_per_node: int = 2
    n_cascades: int = 300
    activation_p: float = 0.15
    shift_fraction: float = 0.1
    shift_factor: float = 0.5
    hub_dropout_k: int = 5
    seed: int = 7

    def __post_init__(self):
        if self.n_users < 2 or self.pa_edges_per_node < 1 or self.n_cascades < 1:
            raise ValueError("n_users >= 2, pa_edges_per_node >= 1 and n_cascades >= 1 required")
        if self.pa_edges_per_node >= self.n_users:
            raise ValueError("pa_edges_per_node must be smaller than n_users")
        if not 0.0 <= self.activation_p <= 1.0:
            raise ValueError("activation_p must lie in [0, 1]")
        if not 0.0 <= self.shift_fraction <= 1.0:
            raise ValueError("shift_fraction must lie in [0, 1]")
        if self.shift_factor < 0 or self.hub_dropout_k < 0:
            raise ValueError("shift_factor and hub_dropout_k must be non-negative")

    @classmethod
    def from_file(cls, path) -> "SynthConfig":
        return cls.from_mapping(parse_kv_text(Path(path).read_text(encoding="utf-8"), str(path)))

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "SynthConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ValueError(f"unknown synth config key(s): {', '.join(unknown)}")
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = float(values[f.name]) if f.type == "float" else int(values[f.name])
        return cls(**kwargs)

    def to_text(self) -> str:
        return render_kv({f.name: getattr(self, f.name) for f in fields(self)})


def _simulate(adj: list[list[int]], seed_user: int, p: float, blocked: set[int],
              rng: np.random.Generator) -> list[tuple[int, int]]:
    """Breadth-first independent cascade; returns (user, depth) in adoption order."""
    active = {seed_user}
    order = [(seed_user, 0)]
    frontier = [seed_user]
    depth = 0
    while frontier:
        depth += 1
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if v in active or v in blocked:
                    continue
                if rng.random() < p:
                    active.add(v)
                    nxt.append(v)
                    order.append((v, depth))
        frontier = nxt
    return order


def generate_synthetic(cfg: SynthConfig, seed: int | None = None) -> Dataset:
    seed = cfg.seed if seed is None else seed
    g = nx.barabasi_albert_graph(cfg.n_users, cfg.pa_edges_per_node, seed=seed % (2 ** 32))
    edges = sorted((min(u, v), max(u, v)) for u, v in g.edges())
    adj: list[list[int]] = [[] for _ in range(cfg.n_users)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    degree = np.array([len(a) for a in adj])
    # stable: ties by lower id
    hubs = set(np.argsort(-degree, kind="stable")[:cfg.hub_dropout_k].tolist())

    rng = np.random.default_rng(seed)
    n_shift = int(round(cfg.shift_fraction * cfg.n_cascades))
    first_shifted = cfg.n_cascades - n_shift
    all_users = np.arange(cfg.n_users)
    cascades = []
    for i in range(cfg.n_cascades):
        shifted = i >= first_shifted
        p = min(1.0, cfg.activation_p * cfg.shift_factor) if shifted else cfg.activation_p
        blocked = hubs if shifted else set()
        candidates = all_users[[u not in blocked for u in all_users]] if blocked else all_users
        order = []
        for _ in range(MAX_RETRIES):
            order = _simulate(adj, int(rng.choice(candidates)), p, blocked, rng)
            if len(order) > 1:
                break
        final_size = len(order)
        order = order[:MAX_CASCADE_LENGTH]
        # release time i; seed at the release instant, later adopters jittered
        jitter = rng.uniform(0.0, 0.5, size=len(order))
        jitter[0] = 0.0
        stamped = sorted(((float(i + d + j), u) for (u, d), j in zip(order, jitter)),
                         key=lambda x: x[0])
        cascades.append(Cascade(
            id=f"c{i}",
            users=tuple(u for _, u in stamped),
            timestamps=tuple(t for t, _ in stamped),
            final_size=final_size,
        ))
    graph = SocialGraph(num_users=cfg.n_users, edges=edges)
    return Dataset(graph=graph, cascades=cascades, user_ids=list(range(cfg.n_users)))
