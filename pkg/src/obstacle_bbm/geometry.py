"""Trap-free balls: membership, largest-ball search in cubes, covering certificates."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from .env import _as_env
from .rng import PURPOSE_SUBSAMPLE, derive
from .theory import ModelConstants, clearing_radius, covering_scale, moderate_clearing_radius

__all__ = [
    "Clearing",
    "CoveringCertificate",
    "Witness",
    "is_clearing",
    "largest_clearing_in_cube",
    "is_good_point",
    "certify_covering",
    "write_witness_csv",
]


@dataclass(frozen=True)
class Clearing:
    center: np.ndarray
    radius: float


def is_clearing(env, center, radius: float) -> bool:
    """True iff no atom lies strictly closer than ``radius + a`` to ``center``."""
    if not radius >= 0:
        raise ValueError("radius must be >= 0")
    env = _as_env(env)
    c = np.asarray(center, dtype=float).reshape(env.d)
    reach = radius + env.spec.a
    cand = env.atoms_in_box(c - reach, c + reach)
    if len(cand) == 0:
        return True
    dist = np.sqrt(((cand - c) ** 2).sum(axis=1))
    return not bool((dist < reach).any())


class _Field:
    """Nearest-atom distances through a k-d tree over a fixed atom set."""

    def __init__(self, atoms: np.ndarray, a: float):
        self.a = a
        self.tree = cKDTree(atoms) if len(atoms) else None

    def clearance(self, y: np.ndarray) -> np.ndarray:
        """``distance(y, atoms) - a`` row-wise (``inf`` without atoms)."""
        y = np.atleast_2d(y)
        if self.tree is None:
            return np.full(len(y), math.inf)
        return self.tree.query(y)[0] - self.a


def _cube_value(fld: _Field, y: np.ndarray, ell: float) -> np.ndarray:
    y = np.atleast_2d(y)
    return np.minimum(fld.clearance(y), ell - np.abs(y).max(axis=1))


def largest_clearing_in_cube(env, ell: float, *, grid: int = 64, refine: int = 16,
                             chunk: int = 1 << 18) -> Clearing:
    """Largest trap-free ball found inside ``[-ell, ell]^d``.

    Baseline: centers on a grid of pitch ``ell / grid``, radius
    ``min(distance to nearest atom - a, distance to cube boundary)``. The best
    ``refine`` well-separated grid candidates are then polished by
    Nelder-Mead, and the winner is shrunk until it passes ``is_clearing``.
    """
    if not ell > 0:
        raise ValueError("ell must be > 0")
    env = _as_env(env)
    d, a = env.d, env.spec.a
    atoms = env.atoms_in_box(np.full(d, -ell - a), np.full(d, ell + a))
    if len(atoms) == 0:
        return Clearing(np.zeros(d), float(ell))
    fld = _Field(atoms, a)
    axis = np.linspace(-ell, ell, 2 * grid + 1)
    n_side = axis.size
    total = n_side ** d
    pitch = ell / grid

    # streaming top-k over the grid
    keep = max(refine * 8, 64)
    best_idx = np.empty(0, dtype=np.int64)
    best_val = np.empty(0)
    for lo in range(0, total, chunk):
        idx = np.arange(lo, min(total, lo + chunk), dtype=np.int64)
        pts = axis[np.stack(np.unravel_index(idx, (n_side,) * d), axis=1)]
        val = _cube_value(fld, pts, ell)
        cat_i = np.concatenate([best_idx, idx])
        cat_v = np.concatenate([best_val, val])
        if cat_v.size > keep:
            sel = np.argpartition(-cat_v, keep - 1)[:keep]
            cat_i, cat_v = cat_i[sel], cat_v[sel]
        best_idx, best_val = cat_i, cat_v
    order = np.lexsort((best_idx, -best_val))
    best_idx, best_val = best_idx[order], best_val[order]
    pts = axis[np.stack(np.unravel_index(best_idx, (n_side,) * d), axis=1)]

    starts: list[np.ndarray] = []
    for p in pts:
        if all(np.abs(p - q).max() > 2 * pitch for q in starts):
            starts.append(p)
        if len(starts) == refine:
            break

    def neg(y):
        return -float(_cube_value(fld, y, ell)[0])

    best_y, best_r = pts[0].copy(), float(best_val[0])
    for y0 in starts:
        simplex = np.vstack([y0] + [y0 + 0.5 * pitch * e for e in np.eye(d)])
        res = minimize(neg, y0, method="Nelder-Mead",
                       options={"initial_simplex": simplex, "xatol": 1e-12, "fatol": 1e-14,
                                "maxiter": 4000 * d, "maxfev": 8000 * d})
        r = -neg(res.x)
        if r > best_r:
            best_y, best_r = np.asarray(res.x, dtype=float), r
    if best_r < 0:
        return Clearing(best_y, 0.0)
    r = best_r
    for _ in range(200):
        if r <= 0:
            r = 0.0
            break
        if np.abs(best_y).max() + r <= ell and is_clearing(env, best_y, r):
            break
        r = r * (1.0 - 1e-13) - 1e-15
    return Clearing(best_y, float(r))


def is_good_point(env, x, t: float, mc: ModelConstants, k: float | None = None) -> bool:
    """Center of a clearing of the moderate radius at time ``t``; with ``k``, also inside ``[-kt, kt]^d``."""
    if not t > math.e:
        raise ValueError("good points need t > e")
    x = np.asarray(x, dtype=float)
    if k is not None and np.abs(x).max() > k * t:
        return False
    return is_clearing(env, x, moderate_clearing_radius(t, mc))


@dataclass(frozen=True)
class Witness:
    center: tuple[float, ...]
    required: float
    found: float
    passed: bool
    # center of the best clearing found (empty when nothing was searched)
    clearing_center: tuple[float, ...] = ()


@dataclass
class CoveringCertificate:
    fraction: float
    n_centers: int
    total_grid: int
    required_radius: float
    witnesses: list[Witness] = field(repr=False, default_factory=list)

    @property
    def failures(self) -> list[Witness]:
        return [w for w in self.witnesses if not w.passed]


def _ball_offsets(radius: float, pitch: float, d: int) -> np.ndarray:
    m = int(math.floor(radius / pitch))
    ax = np.arange(-m, m + 1) * pitch
    g = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    keep = (g ** 2).sum(axis=1) <= radius * radius + 1e-12
    g = g[keep]
    return g[np.argsort((g ** 2).sum(axis=1), kind="stable")]


def certify_covering(env, t: float, k: float, b: float = 0.0, *, max_centers: int = 10_000,
                     seed: int = 0, rounds: int = 5, block: int = 1 << 20) -> CoveringCertificate:
    """Check that balls ``B(x, rho(t))`` over a grid in ``[-kt, kt]^d`` each contain a clearing.

    The required radius is ``clearing_radius(lemma1, rho, 1) + b``; the clearing
    ball itself must fit inside ``B(x, rho)``. Candidate centers are tried on
    successively finer grids, so a failure means none was found at the finest
    pitch tried.
    """
    env = _as_env(env)
    d, a = env.d, env.spec.a
    rho = covering_scale(t)
    if not rho > 1:
        raise ValueError("covering certification needs rho(t) > 1")
    required = clearing_radius("lemma1", rho, 1.0, d=d, nu=env.spec.nu) + b
    half = k * t
    pitch = rho / 2.0
    m = int(math.floor(half / pitch))
    n_side = 2 * m + 1
    total = n_side ** d
    if total > max_centers:
        rng = np.random.default_rng(derive(seed, PURPOSE_SUBSAMPLE))
        flat = np.sort(rng.choice(total, size=max_centers, replace=False))
    else:
        flat = np.arange(total)
    centers = (np.stack(np.unravel_index(flat, (n_side,) * d), axis=1) - m) * pitch
    n = len(centers)

    if required <= 0:
        wit = [Witness(tuple(map(float, c)), required, math.nan, True) for c in centers]
        return CoveringCertificate(1.0, n, total, required, wit)

    span = rho - required
    found = np.full(n, -math.inf)
    where = centers.copy()
    if span >= 0:
        reach = half + rho + a
        atoms = env.atoms_in_box(np.full(d, -reach), np.full(d, reach))
        fld = _Field(atoms, a)
        pending = np.arange(n)
        step = max(span, 1e-12) / 2.0
        for _ in range(rounds):
            if pending.size == 0:
                break
            offs = _ball_offsets(span, step, d)
            if offs.size == 0:
                offs = np.zeros((1, d))
            slack = rho - np.sqrt((offs ** 2).sum(axis=1))
            per = max(1, block // len(offs))
            for lo in range(0, pending.size, per):
                ids = pending[lo:lo + per]
                y = (centers[ids, None, :] + offs[None, :, :]).reshape(-1, d)
                val = np.minimum(fld.clearance(y).reshape(len(ids), -1), slack[None, :])
                arg = val.argmax(axis=1)
                best = val[np.arange(len(ids)), arg]
                better = best > found[ids]
                found[ids[better]] = best[better]
                where[ids[better]] = centers[ids[better]] + offs[arg[better]]
            pending = pending[found[pending] < required]
            step /= 2.0
    passed = found >= required
    wit = [Witness(tuple(map(float, c)), float(required), float(f) if np.isfinite(f) else 0.0, bool(p),
                   tuple(map(float, y)) if np.isfinite(f) else ())
           for c, f, p, y in zip(centers, found, passed, where)]
    return CoveringCertificate(float(passed.sum() / n), n, total, float(required), wit)


def write_witness_csv(cert: CoveringCertificate, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        d = len(cert.witnesses[0].center) if cert.witnesses else 0
        w.writerow([f"x{i}" for i in range(d)] + ["required", "found", "pass"])
        for wt in cert.witnesses:
            w.writerow([format(v, ".17g") for v in wt.center]
                       + [format(wt.required, ".17g"), format(wt.found, ".17g"), int(wt.passed)])
    return path
