"""h- and p-version convergence studies, rate fits, CSV and SVG output."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .mesh import refined, unit_square_initial
from .pstokes import (
    NewtonConfig,
    NewtonDivergenceError,
    PowerLaw,
    build_problem,
    error_metrics,
    manufactured,
    newton_solve,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "p", "N", "level", "M", "e_u_w1p", "e_S", "e_F", "e_q", "wall_time_s", "flag")
METRICS = ("e_u_w1p", "e_S", "e_F", "e_q")


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class ConvergenceRecord:
    method: str
    p: float
    N: int
    level: int
    M: int
    e_u_w1p: float
    e_S: float
    e_F: float
    e_q: float
    wall_time_s: float = 0.0
    flag: str = ""

    def __post_init__(self):
        if self.method not in ("h_version", "p_version"):
            raise ValueError(f"unknown method {self.method!r}")
        for name in METRICS:
            v = getattr(self, name)
            if not (math.isnan(v) or v >= 0):
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class RateFit:
    gamma: float
    points_used: int
    residual: float


@dataclass(frozen=True)
class StudyConfig:
    method: str = "h"
    solution: str = "smooth"
    p: float = 2.0
    nu: float = 1.0
    N: int = 4
    N_max: int = 12
    levels: int = 4
    base_refinements: int = 0
    seed: int = 42
    level_min: int = 0
    record_timing: bool = True
    max_newton_iters: int = 50

    def __post_init__(self):
        if self.method not in ("h", "p"):
            raise ValueError("method must be 'h' or 'p'")
        if self.solution not in ("smooth", "rough"):
            raise ValueError("solution must be 'smooth' or 'rough'")

    @classmethod
    def from_dict(cls, data: dict) -> "StudyConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "StudyConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def total_dofs(N: int, mesh) -> int:
    """dim V^N (no boundary elimination) + dim Q^{N-1}."""
    from .femspace import build_pressure_space, build_velocity_space

    return build_velocity_space(mesh, N, with_bc=False).full_dim + build_pressure_space(mesh, N - 1).dim


def _run_one(cfg: StudyConfig, N: int, level: int, mesh, method: str) -> ConvergenceRecord:
    t0 = time.perf_counter()
    law = PowerLaw(cfg.p, cfg.nu)
    sol = manufactured(cfg.solution, cfg.p)
    M = total_dofs(N, mesh)
    try:
        prob = build_problem(mesh, N, sol, law)
        res = newton_solve(problem=prob, cfg=NewtonConfig(max_iters=cfg.max_newton_iters))
        em = error_metrics(res, sol, law)
        vals = (em["e_u_w1p"], em["e_S_lpprime"], em["e_F_l2"], em["e_q_lpprime"])
        flag = em["flags"]
    except NewtonDivergenceError as exc:
        log.warning("p=%g N=%d level=%d diverged: %s", cfg.p, N, level, exc)
        vals, flag = (math.nan,) * 4, "diverged"
    wall = time.perf_counter() - t0 if cfg.record_timing else 0.0
    return ConvergenceRecord(method, float(cfg.p), N, level, M, *vals, wall_time_s=wall, flag=flag)


def run_convergence_study(cfg: StudyConfig) -> list:
    base = refined(unit_square_initial(), cfg.base_refinements)
    out = []
    if cfg.method == "h":
        mesh = refined(base, cfg.level_min)
        for level in range(cfg.level_min, cfg.levels + 1):
            out.append(_run_one(cfg, cfg.N, level, mesh, "h_version"))
            log.info("%s", out[-1])
            if level < cfg.levels:
                mesh = refined(mesh, 1)
    else:
        for N in range(cfg.N, cfg.N_max + 1):
            out.append(_run_one(cfg, N, cfg.base_refinements, base, "p_version"))
            log.info("%s", out[-1])
    return out


def _usable(records, metric):
    return [r for r in records if not r.flag and np.isfinite(getattr(r, metric)) and getattr(r, metric) > 0]


def fit_rate(records, metric: str, window: int | None = None) -> RateFit:
    """gamma with error ~ M^{-gamma/2}, least squares over the last `window` usable rows."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    rows = _usable(records, metric)
    if window is not None:
        rows = rows[-window:]
    if len(rows) < 3:
        raise FitError(f"need at least 3 usable rows, have {len(rows)}")
    x = np.log([r.M for r in rows])
    y = np.log([getattr(r, metric) for r in rows])
    (slope, icpt), res, *_ = np.polyfit(x, y, 1, full=True)
    resid = float(np.sqrt(np.sum((y - (slope * x + icpt)) ** 2)))
    return RateFit(float(-2 * slope), len(rows), resid)


def fit_h_rate(records, metric: str, window: int | None = None) -> float:
    """Slope of -log(error) against level, in powers of two (error ~ h^rate)."""
    rows = _usable(records, metric)
    if window is not None:
        rows = rows[-window:]
    if len(rows) < 2:
        raise FitError("need at least 2 usable rows")
    x = np.array([r.level for r in rows], float) * math.log(2)
    y = np.log([getattr(r, metric) for r in rows])
    return float(-np.polyfit(x, y, 1)[0])


def fit_exponential(records, metric: str) -> tuple:
    """Linear fit of log(error) against N: (slope, R^2)."""
    rows = _usable(records, metric)
    if len(rows) < 3:
        raise FitError("need at least 3 usable rows")
    x = np.array([r.N for r in rows], float)
    y = np.log([getattr(r, metric) for r in rows])
    slope, icpt = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (slope * x + icpt)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return float(slope), 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def emit_csv(records, path) -> None:
    records = list(records)
    if not records:
        raise ValueError("no records to write")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            d = asdict(r)
            w.writerow([repr(d[c]) if isinstance(d[c], float) else d[c] for c in CSV_COLUMNS])


def read_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(ConvergenceRecord(
                row["method"], float(row["p"]), int(row["N"]), int(row["level"]), int(row["M"]),
                *(float(row[k]) for k in METRICS), wall_time_s=float(row["wall_time_s"]), flag=row["flag"]))
    return out


def emit_svg_plot(records, path, metric: str = "e_F", width: int = 640, height: int = 480,
                  guide_slopes=(1.0, 2.0)) -> None:
    """Log-log plot of `metric` against M: one polyline per (method, p) series,
    plus black reference lines of the given gamma values."""
    rows = _usable(list(records), metric)
    if not rows:
        raise ValueError("no records to plot")
    series: dict = {}
    for r in rows:
        series.setdefault((r.method, r.p), []).append((r.M, getattr(r, metric)))
    lx = np.log10([r.M for r in rows])
    ly = np.log10([getattr(r, metric) for r in rows])
    x0, x1 = lx.min() - 0.1, lx.max() + 0.1
    y0, y1 = ly.min() - 0.3, ly.max() + 0.3
    pad = 50

    def px(x, y):
        return (pad + (x - x0) / (x1 - x0) * (width - 2 * pad),
                height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad))

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
             'fill="none" stroke="#888"/>',
             f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">log10 M</text>',
             f'<text x="14" y="{height / 2}" font-size="12" transform="rotate(-90 14 {height / 2})" '
             f'text-anchor="middle">log10 {metric}</text>']
    for k, ((method, p), pts) in enumerate(sorted(series.items())):
        pts.sort()
        coords = " ".join("%.2f,%.2f" % px(math.log10(M), math.log10(e)) for M, e in pts)
        color = palette[k % len(palette)]
        parts.append(f'<polyline class="series" data-method="{method}" data-p="{p!r}" points="{coords}" '
                     f'fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{width - pad - 110}" y="{pad + 16 + 14 * k}" font-size="11" fill="{color}">'
                     f'{method} p={p:g}</text>')
    # reference lines anchored at the first point of the first series
    M_ref, e_ref = sorted(next(iter(sorted(series.items())))[1])[0]
    for g in guide_slopes:
        xa, xb = math.log10(M_ref), x1
        ya = math.log10(e_ref) + 0.2
        yb = ya - g / 2 * (xb - xa)
        (ax, ay), (bx, by) = px(xa, ya), px(xb, yb)
        parts.append(f'<line class="guide" x1="{ax:.2f}" y1="{ay:.2f}" x2="{bx:.2f}" y2="{by:.2f}" '
                     f'stroke="black" stroke-width="0.8"><title>gamma={g:g}</title></line>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
