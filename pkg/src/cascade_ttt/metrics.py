"""Ranking and popularity metrics, evaluation reports and the ΔMSLE diagnostic.

Ranks are 1-based among eligible users (not yet adopted), with ties broken
by ascending user id.  MAP@k uses the single-relevant-item form, so each
position contributes ``1 / rank`` when ``rank <= k`` and 0 otherwise.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import parse_kv_text, render_kv

log = logging.getLogger(__name__)

KS = (10, 50, 100)


def rank_of(scores: np.ndarray, true_user: int, excluded: np.ndarray | None = None) -> int:
    """1-based rank of ``true_user``; raises if the user itself is excluded."""
    scores = np.asarray(scores, dtype=np.float64)
    eligible = np.ones(scores.shape[0], dtype=bool) if excluded is None else ~np.asarray(excluded, dtype=bool)
    if not eligible[true_user]:
        raise ValueError(f"true user {true_user} is excluded from ranking")
    s = scores[true_user]
    ids = np.arange(scores.shape[0])
    better = eligible & ((scores > s) | ((scores == s) & (ids < true_user)))
    return int(better.sum()) + 1


def _ranks(score_rows, true_users, excluded_rows=None) -> list[int]:
    ranks = []
    for r, (scores, u) in enumerate(zip(score_rows, true_users)):
        ex = None if excluded_rows is None else excluded_rows[r]
        if ex is not None and ex[u]:
            log.warning("position %d skipped: true user %d already adopted", r, u)
            continue
        ranks.append(rank_of(scores, u, ex))
    return ranks


def hits_from_ranks(ranks: Sequence[int], k: int) -> float:
    if not ranks:
        return float("nan")
    return float(np.mean([r <= k for r in ranks]))


def map_from_ranks(ranks: Sequence[int], k: int) -> float:
    if not ranks:
        return float("nan")
    return float(np.mean([1.0 / r if r <= k else 0.0 for r in ranks]))


def hits_at_k(score_rows, true_users, k: int, excluded_rows=None) -> float:
    """Fraction of positions whose true next user ranks within the top ``k``."""
    return hits_from_ranks(_ranks(score_rows, true_users, excluded_rows), k)


def map_at_k(score_rows, true_users, k: int, excluded_rows=None) -> float:
    return map_from_ranks(_ranks(score_rows, true_users, excluded_rows), k)


def msle_term(pred: float, true: float) -> float:
    if pred < 0 or true < 0:
        raise ValueError("MSLE needs non-negative values")
    return (math.log1p(pred) - math.log1p(true)) ** 2


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MacroRow:
    cascade_id: str
    true_popularity: float
    predicted_popularity: float
    msle: float


@dataclass
class MicroRow:
    cascade_id: str
    position: int
    true_user: int
    rank: int


def _f(x: float) -> str:
    return repr(float(x))


@dataclass
class EvalReport:
    macro_rows: list[MacroRow]
    micro_rows: list[MicroRow]
    hits_average: str = "position"
    ks: tuple[int, ...] = KS
    extra: dict = field(default_factory=dict)

    def aggregates(self) -> dict[str, float]:
        out: dict[str, float] = {
            "n_cascades": len(self.macro_rows),
            "n_positions": len(self.micro_rows),
            "msle": float(np.mean([r.msle for r in self.macro_rows])) if self.macro_rows else float("nan"),
        }
        for k in self.ks:
            out[f"hits@{k}"] = self._ranking(hits_from_ranks, k)
            out[f"map@{k}"] = self._ranking(map_from_ranks, k)
        out.update(self.extra)
        return out

    def _ranking(self, fn, k: int) -> float:
        if self.hits_average == "position":
            return fn([r.rank for r in self.micro_rows], k)
        per: dict[str, list[int]] = {}
        for r in self.micro_rows:
            per.setdefault(r.cascade_id, []).append(r.rank)
        if not per:
            return float("nan")
        return float(np.mean([fn(v, k) for v in per.values()]))

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "macro.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cascade_id", "true_popularity", "predicted_popularity", "msle"])
            for r in self.macro_rows:
                w.writerow([r.cascade_id, _f(r.true_popularity), _f(r.predicted_popularity), _f(r.msle)])
        with open(out / "micro.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cascade_id", "position", "true_user", "rank"]
                       + [f"hit@{k}" for k in self.ks] + [f"ap@{k}" for k in self.ks])
            for r in self.micro_rows:
                w.writerow([r.cascade_id, r.position, r.true_user, r.rank]
                           + [int(r.rank <= k) for k in self.ks]
                           + [_f(1.0 / r.rank if r.rank <= k else 0.0) for k in self.ks])
        agg = {k: (_f(v) if isinstance(v, float) else v) for k, v in self.aggregates().items()}
        agg["hits_average"] = self.hits_average
        (out / "summary.txt").write_text(render_kv(agg), encoding="utf-8")

    @classmethod
    def read(cls, out_dir) -> "EvalReport":
        out = Path(out_dir)
        with open(out / "macro.csv", encoding="utf-8") as fh:
            macro = [MacroRow(r["cascade_id"], float(r["true_popularity"]), float(r["predicted_popularity"]),
                              float(r["msle"])) for r in csv.DictReader(fh)]
        with open(out / "micro.csv", encoding="utf-8") as fh:
            micro = [MicroRow(r["cascade_id"], int(r["position"]), int(r["true_user"]), int(r["rank"]))
                     for r in csv.DictReader(fh)]
        summary = parse_kv_text((out / "summary.txt").read_text(encoding="utf-8"))
        return cls(macro_rows=macro, micro_rows=micro, hits_average=summary.get("hits_average", "position"))


# ---------------------------------------------------------------------------
# paired diagnostic
# ---------------------------------------------------------------------------

@dataclass
class DeltaRow:
    cascade_id: str
    msle_without: float
    msle_with: float

    @property
    def delta(self) -> float:
        return self.msle_with - self.msle_without


def delta_msle(without: EvalReport, with_ttt: EvalReport) -> list[DeltaRow]:
    """Per-cascade MSLE(with TTT) - MSLE(without TTT), paired by cascade id."""
    base = {r.cascade_id: r.msle for r in without.macro_rows}
    adapted = {r.cascade_id: r.msle for r in with_ttt.macro_rows}
    if set(base) != set(adapted):
        raise ValueError("reports cover different cascades")
    return [DeltaRow(r.cascade_id, base[r.cascade_id], adapted[r.cascade_id]) for r in without.macro_rows]


def delta_summary(rows: Sequence[DeltaRow]) -> dict[str, float]:
    deltas = np.array([r.delta for r in rows])
    n = len(rows)
    return {
        "n_cascades": n,
        "degradation_ratio": float((deltas > 0).mean()) if n else float("nan"),
        "improvement_ratio": float((deltas < 0).mean()) if n else float("nan"),
        "delta_sum": float(deltas.sum()),
        "delta_mean": float(deltas.mean()) if n else float("nan"),
        "msle_without": float(np.mean([r.msle_without for r in rows])) if n else float("nan"),
        "msle_with": float(np.mean([r.msle_with for r in rows])) if n else float("nan"),
    }


def write_delta(rows: Sequence[DeltaRow], out_dir) -> dict[str, float]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "delta_msle.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cascade_id", "msle_without_ttt", "msle_with_ttt", "delta_msle"])
        for r in rows:
            w.writerow([r.cascade_id, _f(r.msle_without), _f(r.msle_with), _f(r.delta)])
    summary = delta_summary(rows)
    (out / "delta_summary.txt").write_text(
        render_kv({k: (_f(v) if isinstance(v, float) else v) for k, v in summary.items()}), encoding="utf-8")
    return summary
