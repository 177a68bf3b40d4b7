"""Scaling sweeps: wall time and per-role traffic as the column count grows."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .data import synth_powerlaw
from .protocol import TA, SessionConfig, run_fedsvd
from .transport import ShaperConfig


@dataclass
class BenchPoint:
    n: int
    wall_time: float
    bytes_sent: dict[str, int]
    error: str | None = None


def even_widths(n: int, k: int) -> tuple[int, ...]:
    base, extra = divmod(n, k)
    return tuple(base + (1 if i < extra else 0) for i in range(k))


def bench_sweep(m: int, sizes, *, k: int = 2, b: int = 32, seed: int = 0, transport: str = "mem",
                shaper: ShaperConfig | None = None, repeats: int = 1,
                recover_V: bool = True) -> list[BenchPoint]:
    """One session per size; the reported time is the fastest of ``repeats`` runs.

    Thin factorizations are used so that no ``n x n`` matrix is ever formed.
    A point that fails (e.g. out of memory) is kept with its error message.
    """
    points = []
    for n in sizes:
        x = synth_powerlaw(m, n, seed=seed)
        widths = even_widths(n, k)
        bounds = np.cumsum((0,) + widths)
        blocks = [x[:, bounds[i]:bounds[i + 1]] for i in range(k)]
        cfg = SessionConfig(m=m, n=n, widths=widths, b=b, master_seed=seed,
                            full_matrices=False, recover_V=recover_V)
        best, sent = float("inf"), {}
        try:
            for _ in range(repeats):
                t0 = time.perf_counter()
                out = run_fedsvd(cfg, blocks, transport=transport, shaper=shaper)
                best = min(best, time.perf_counter() - t0)
                sent = dict(out.bytes_sent)
            points.append(BenchPoint(n, best, sent))
        except (MemoryError, OSError) as exc:
            points.append(BenchPoint(n, float("nan"), {}, f"{type(exc).__name__}: {exc}"))
    return points


def linear_r2(xs, ys) -> float:
    """Coefficient of determination of the least-squares line ``y = a + c x``."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    design = np.column_stack([np.ones_like(xs), xs])
    coef, *_ = np.linalg.lstsq(design, ys, rcond=None)
    resid = ys - design @ coef
    total = np.sum((ys - ys.mean()) ** 2)
    return 1.0 - float(resid @ resid) / float(total) if total > 0 else 1.0


def write_bench_csv(path, points: list[BenchPoint]) -> None:
    roles = sorted({r for p in points for r in p.bytes_sent}, key=lambda r: (r != TA, r))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n", "wall_time"] + [f"bytes_{r}" for r in roles] + ["error"])
        for p in points:
            w.writerow([p.n, f"{p.wall_time:.6f}"] + [p.bytes_sent.get(r, "") for r in roles]
                       + [p.error or ""])
