"""Operation-count sweeps over token count B and variant count T.

Counts are exact multiply-accumulates from the tensor engine; wall time is
recorded alongside but never asserted on.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .global_pyramid import SCORE_TAG as GLOBAL_TAG, GlobalBlock
from .local_attn import SCORE_TAG as LOCAL_TAG, LocalBlock
from .shift_embed import VariantEmbedding
from .tensor import Tensor, counting, no_grad


@dataclass(frozen=True)
class BenchRow:
    B: int
    T: int
    D: int
    local_muladds: int
    global_muladds: int
    local_score_muladds: int
    global_score_muladds: int
    wall_ns: int


@dataclass
class BenchResult:
    rows: list[BenchRow]

    def to_csv(self, include_wall: bool = True) -> str:
        names = [f.name for f in fields(BenchRow) if include_wall or f.name != "wall_ns"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.rows:
            w.writerow([getattr(r, n) for n in names])
        return buf.getvalue()

    def slope(self, x: str, y: str, fixed: dict) -> float:
        """Least-squares log-log slope of column ``y`` against ``x`` among rows matching ``fixed``."""
        sel = [r for r in self.rows if all(getattr(r, k) == v for k, v in fixed.items())]
        xs = np.log([getattr(r, x) for r in sel])
        ys = np.log([getattr(r, y) for r in sel])
        if len(set(xs)) < 2:
            raise ValueError(f"need at least two distinct {x} values, got {len(set(xs))}")
        return float(np.polyfit(xs, ys, 1)[0])


def bench_scaling(B_list: Sequence[int], T_list: Sequence[int], D: int = 64, heads: int = 4,
                  seed: int = 0) -> BenchResult:
    """Forward one local and one global block at each (B, T) and record their counts."""
    if not B_list or not T_list:
        raise ValueError("B_list and T_list must be non-empty")
    rng = np.random.default_rng(seed)
    local = LocalBlock(D, heads, rng)
    glob = GlobalBlock(D, heads, rng)
    rows = []
    for B in sorted(B_list):
        x = Tensor(rng.standard_normal((1, B, D)).astype(np.float32))
        with no_grad(), counting() as gc:
            t0 = time.perf_counter_ns()
            glob(x)
            g_ns = time.perf_counter_ns() - t0
        for T_ in sorted(T_list):
            v = VariantEmbedding(Tensor(rng.standard_normal((1, T_, B, D)).astype(np.float32)), (B, 1))
            with no_grad(), counting() as lc:
                t0 = time.perf_counter_ns()
                local(v)
                l_ns = time.perf_counter_ns() - t0
            rows.append(BenchRow(B, T_, D, lc.mul_adds, gc.mul_adds, lc.by_tag[LOCAL_TAG],
                                 gc.by_tag[GLOBAL_TAG], l_ns + g_ns))
    return BenchResult(rows)


@dataclass
class ScalingReport:
    global_vs_B: float
    local_vs_B: float
    local_vs_T: float
    dominance_ok: bool          # local scores <= global scores wherever T <= sqrt(B)

    def lines(self) -> list[str]:
        return [f"global score mul-adds vs B: slope {self.global_vs_B:.3f}",
                f"local score mul-adds vs B:  slope {self.local_vs_B:.3f}",
                f"local score mul-adds vs T:  slope {self.local_vs_T:.3f}",
                f"local <= global whenever T <= sqrt(B): {self.dominance_ok}"]


def analyze(result: BenchResult) -> ScalingReport:
    """Fit slopes on the attention-score counts (the part the asymptotics describe).

    Slopes vs B are taken at the largest T in the sweep; vs T at the largest B.
    """
    Ts = sorted({r.T for r in result.rows})
    Bs = sorted({r.B for r in result.rows})
    g = result.slope("B", "global_score_muladds", {"T": Ts[-1]})
    lb = result.slope("B", "local_score_muladds", {"T": Ts[-1]})
    lt = result.slope("T", "local_score_muladds", {"B": Bs[-1]}) if len(Ts) > 1 else 0.0
    ok = all(r.local_score_muladds <= r.global_score_muladds
             for r in result.rows if r.T <= np.sqrt(r.B))
    return ScalingReport(g, lb, lt, ok)
