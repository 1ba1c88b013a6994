"""Monte Carlo estimators with normal-approximation confidence intervals.

Every replicate or path is seeded by its index, so estimates do not depend on
how work is split across processes. Quenched estimates always refer to one
frozen environment; callers that sweep several environments keep the
per-environment reports separate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .bbm import (
    ConfigError,
    SimConfig,
    hit_and_survival,
    range_hits_good_point,
    run_deactivated,
    run_replicate,
    survival_horizon,
)
from .env import Environment, count_within, inside_region, neighbor_offsets
from .parallel import chunks, flatten, pmap
from .rng import PURPOSE_PATHS, as_u64, derive, draw_key, normal_pair
from .theory import ModelConstants, lln_statistic, moderate_clearing_radius, principal_eigenvalue

__all__ = [
    "EstimateReport",
    "ConditionalMassReport",
    "report_from_samples",
    "estimate_survival",
    "estimate_mean_mass",
    "run_replicates",
    "estimate_conditional_mass",
    "feynman_kac_mass",
    "estimate_confinement",
    "confinement_curve",
    "estimate_tube",
    "lemma2_hitting",
    "estimate_deactivated_shortfall",
]

Z95 = 1.96
_CHUNK = 64


@dataclass
class EstimateReport:
    estimate: float
    std_error: float
    n: int
    ci95: tuple[float, float]
    excluded_censored: int = 0
    t: float | None = None
    status: str = "ok"
    extra: dict = field(default_factory=dict)


def report_from_samples(values, *, t=None, excluded=0, extra=None) -> EstimateReport:
    x = np.asarray(values, dtype=float)
    n = int(x.size)
    if n == 0:
        return EstimateReport(math.nan, math.nan, 0, (math.nan, math.nan), excluded, t, "empty", extra or {})
    est = float(np.sum(x) / n)
    sd = float(np.std(x, ddof=1)) if n > 1 else 0.0
    se = sd / math.sqrt(n)
    half = Z95 * se
    return EstimateReport(est, se, n, (est - half, est + half), excluded, t, "ok", extra or {})


def _no_survivors(t, excluded, n) -> EstimateReport:
    return EstimateReport(math.nan, math.nan, 0, (math.nan, math.nan), excluded, t, "no_survivors",
                          {"replicates": n})


# --------------------------------------------------------------------------
# replicate-based estimators


def _survival_task(args):
    env, cfg, start, idx = args
    return [survival_horizon(env, cfg.for_replicate(i), start) for i in idx]


def estimate_survival(env, cfg: SimConfig, t_grid: Sequence[float], n_replicates: int, start=None,
                      workers: int | None = None) -> list[EstimateReport]:
    """``P(N_t >= 1)`` at every grid time from one set of trajectories."""
    if not len(t_grid):
        raise ValueError("t_grid is empty")
    run_cfg = replace(cfg, t_end=max(t_grid))
    tasks = [(env, run_cfg, start, r) for r in chunks(n_replicates, _CHUNK)]
    res = flatten(pmap(_survival_task, tasks, workers))
    last = np.array([r[0] for r in res], dtype=np.int64)
    cens = np.array([r[1] for r in res], dtype=bool)
    keep = last[~cens]
    out = []
    for t in t_grid:
        n_t = int(round(t / cfg.dt))
        s = (keep >= n_t).astype(float)
        out.append(report_from_samples(s, t=float(t), excluded=int(cens.sum())))
    return out


def _replicate_task(args):
    env, cfg, start, idx, hit = args
    out = []
    for i in idx:
        if hit is None:
            s = run_replicate(env, cfg.for_replicate(i), start)
        else:
            s = range_hits_good_point(env, cfg.for_replicate(i), hit[0], hit[1], start)
        out.append((s.N_t, s.censored, s.M_t, s.kills, s.hit_good_point_time))
    return out


def run_replicates(env, cfg: SimConfig, n_replicates: int, start=None, workers=None, *,
                   track_hits: tuple[ModelConstants, float] | None = None):
    """Per-replicate tuples ``(N_t, censored, M_t, kills, hit_time)`` in index order.

    ``track_hits=(mc, k)`` also records the first good-point hitting time.
    """
    tasks = [(env, cfg, start, r, track_hits) for r in chunks(n_replicates, _CHUNK)]
    return flatten(pmap(_replicate_task, tasks, workers))


def estimate_mean_mass(env, cfg: SimConfig, n_replicates: int, start=None, workers=None) -> EstimateReport:
    """Direct estimate of ``E[N_t]`` over non-censored replicates."""
    res = run_replicates(env, cfg, n_replicates, start, workers)
    N = np.array([r[0] for r in res], dtype=float)
    cens = np.array([r[1] for r in res], dtype=bool)
    return report_from_samples(N[~cens], t=cfg.n_steps * cfg.dt, excluded=int(cens.sum()))


@dataclass
class ConditionalMassReport:
    log_mass: EstimateReport
    lln: EstimateReport
    lln_median: float
    mean_mass: EstimateReport
    survivors: int
    excluded_censored: int
    status: str = "ok"


def estimate_conditional_mass(env: Environment, cfg: SimConfig, n_replicates: int, start=None,
                              workers=None, *, replicates=None) -> ConditionalMassReport:
    """Mean of ``log N_t`` and of the LLN statistic over surviving, non-censored replicates."""
    t = cfg.n_steps * cfg.dt
    if not t > 1:
        raise ValueError("conditional mass needs t > 1")
    mc = ModelConstants(env.d, env.spec.nu, cfg.beta)
    res = replicates if replicates is not None else run_replicates(env, cfg, n_replicates, start, workers)
    N = np.array([r[0] for r in res], dtype=float)
    cens = np.array([r[1] for r in res], dtype=bool)
    n_cens = int(cens.sum())
    mean_mass = report_from_samples(N[~cens], t=t, excluded=n_cens)
    surv = N[(~cens) & (N >= 1)]
    if surv.size == 0:
        nos = _no_survivors(t, n_cens, len(res))
        return ConditionalMassReport(nos, nos, math.nan, mean_mass, 0, n_cens, "no_survivors")
    logs = np.log(surv)
    stats = np.array([lln_statistic(v, t, mc) for v in logs])
    return ConditionalMassReport(
        log_mass=report_from_samples(logs, t=t, excluded=n_cens),
        lln=report_from_samples(stats, t=t, excluded=n_cens),
        lln_median=float(np.median(stats)),
        mean_mass=mean_mass,
        survivors=int(surv.size),
        excluded_censored=n_cens,
    )


def _hit_task(args):
    env, cfg, start, r, half, idx = args
    return [hit_and_survival(env, cfg.for_replicate(i), r, half, start) for i in idx]


def lemma2_hitting(env: Environment, cfg: SimConfig, mc: ModelConstants, k: float | None,
                   t_grid: Sequence[float], *, n_replicates: int | None = None,
                   target_survivors: int | None = None, max_replicates: int = 100_000,
                   start=None, workers=None) -> list[EstimateReport]:
    """``P(range misses the good points in [-kt, kt]^d | N_t >= 1)`` for each grid time.

    Either a fixed number of replicates or a target number of surviving,
    non-censored ones; in the latter case replicates are consumed in index
    order until the target is met.
    """
    if cfg.mode != "soft":
        raise ConfigError("good-point hitting is defined for soft mode")
    if k is None:
        k = math.sqrt(3.0 * cfg.beta)
    if not k > math.sqrt(2.0 * cfg.beta):
        raise ConfigError("k must exceed sqrt(2 beta)")
    if (n_replicates is None) == (target_survivors is None):
        raise ValueError("give exactly one of n_replicates, target_survivors")
    out = []
    for t in t_grid:
        if not t > math.e:
            raise ConfigError("good-point hitting needs t > e")
        cfg_t = replace(cfg, t_end=float(t))
        r = moderate_clearing_radius(float(t), mc)
        half = k * float(t)
        results = []
        survivors = 0
        i0 = 0
        limit = n_replicates if n_replicates is not None else max_replicates
        batch = _CHUNK * 4
        while i0 < limit:
            if target_survivors is not None:
                need = target_survivors - survivors
                batch = max(_CHUNK, min(4 * need, 4096))
            hi = min(limit, i0 + batch)
            tasks = [(env, cfg_t, start, r, half, rg) for rg in chunks(hi - i0, _CHUNK)]
            tasks = [(e, c, s, rr, h, range(i0 + g.start, i0 + g.stop)) for e, c, s, rr, h, g in tasks]
            part = flatten(pmap(_hit_task, tasks, workers))
            for res in part:
                results.append(res)
                if res[1] and not res[2]:
                    survivors += 1
                    if target_survivors is not None and survivors == target_survivors:
                        break
            i0 = hi
            if target_survivors is not None and survivors >= target_survivors:
                break
        hit = np.array([h >= 0 for h, _, _ in results], dtype=bool)
        surv = np.array([s for _, s, _ in results], dtype=bool)
        cens = np.array([c for _, _, c in results], dtype=bool)
        cond = surv & ~cens
        n_cens = int(cens.sum())
        if not cond.any():
            out.append(_no_survivors(float(t), n_cens, len(results)))
            continue
        rep = report_from_samples((~hit[cond]).astype(float), t=float(t), excluded=n_cens,
                                  extra={"replicates": len(results), "good_radius": r, "box_half": half})
        out.append(rep)
    return out


def _deact_task(args):
    cfg, radius_fn_r, kappa, p_hat, d, idx = args
    out = []
    for i in idx:
        res = run_deactivated(cfg.for_replicate(i), lambda _t: radius_fn_r, kappa, p_hat, d=d)
        out.append((res.n_t, res.threshold, res.censored))
    return out


def estimate_deactivated_shortfall(beta: float, d: int, t: float, radius_fn: Callable[[float], float],
                                   kappa: float, n_replicates: int, *, dt: float = 1e-2,
                                   p_hat: float | None = None, n_paths: int = 200_000, seed: int = 0,
                                   max_particles: int = 2_000_000, workers=None) -> EstimateReport:
    """``P(n_t < exp(-kappa r(t)) p_t exp(beta t))`` for BBM deactivated outside ``B(0, r(t))``.

    ``p_t`` defaults to a confinement estimate with the same step size, so
    both sides share the same discrete monitoring of the boundary.
    """
    r = float(radius_fn(t))
    if p_hat is None:
        p_hat = estimate_confinement(d, r, t, n_paths, dt, seed=derive(seed, 0x20)).estimate
    cfg = SimConfig(mode="free", beta=beta, t_end=t, dt=dt, max_particles=max_particles,
                    seeds=(derive(seed, 1), derive(seed, 2), derive(seed, 3)))
    tasks = [(cfg, r, kappa, p_hat, d, rg) for rg in chunks(n_replicates, _CHUNK)]
    res = flatten(pmap(_deact_task, tasks, workers))
    n_t = np.array([x[0] for x in res], dtype=float)
    thr = res[0][1] if res else 0
    cens = np.array([x[2] for x in res], dtype=bool)
    short = (n_t[~cens] < thr).astype(float)
    return report_from_samples(short, t=t, excluded=int(cens.sum()),
                               extra={"p_hat": p_hat, "threshold": thr, "radius": r,
                                      "mean_n_t": float(n_t[~cens].mean()) if (~cens).any() else math.nan})


# --------------------------------------------------------------------------
# single-path estimators


@njit(cache=True)
def _fk_kernel(start, n_steps, dt, beta, alpha, a2, lo, shape, strides, side, offsets, atoms, nbr,
               margin, seed, i0, i1, out):
    """Fill ``out[p - i0] = exp(-sum (beta 1_K + V) dt)`` for paths ``i0 <= p < i1``.

    Returns the index of a path that left the materialized region (``-1`` if none).
    """
    d = start.shape[0]
    sq = math.sqrt(dt)
    x = np.empty(d)
    for p in range(i0, i1):
        for i in range(d):
            x[i] = start[i]
        integral = 0.0
        ident = np.uint64(p)
        for n in range(1, n_steps + 1):
            key = draw_key(seed, ident, n)
            j = 0
            for i in range(0, d, 2):
                z0, z1, j = normal_pair(key, j)
                x[i] += sq * z0
                if i + 1 < d:
                    x[i + 1] += sq * z1
            if not inside_region(x, lo, shape, side, margin):
                return p
            cnt = count_within(x, lo, shape, strides, side, offsets, atoms, nbr, a2)
            if cnt > 0:
                integral += (beta + alpha * cnt) * dt
        out[p - i0] = math.exp(-integral)
    return -1


def feynman_kac_mass(env: Environment, beta: float, t: float, n_paths: int, dt: float, start=None,
                     seed: int = 0) -> EstimateReport:
    """``exp(beta t) E[exp(-int_0^t (beta 1_K + V)(X_s) ds)]`` by rectangle rule at step ends."""
    if not t > 0:
        raise ValueError("t must be > 0")
    d = env.d
    x0 = np.zeros(d) if start is None else np.asarray(start, dtype=float)
    n_steps = int(round(t / dt))
    a = env.spec.a
    side = env.spec.cell_side
    nbr = neighbor_offsets(d, int(math.ceil(a / side)))
    key = as_u64(derive(seed, PURPOSE_PATHS))
    out = np.empty(n_paths)
    half = 6.0 * math.sqrt(t) + a + 2.0
    lo_pt, hi_pt = x0 - half, x0 + half
    i = 0
    while i < n_paths:
        reg = env.region(np.floor(lo_pt / side).astype(np.int64), np.floor(hi_pt / side).astype(np.int64))
        lo, shape, strides, rside, offsets, atoms = reg.args()
        bad = _fk_kernel(x0, n_steps, dt, beta, env.spec.alpha, a * a, lo, shape, strides, rside, offsets,
                         atoms, nbr, a, key, i, n_paths, out[i:])
        if bad < 0:
            break
        i = bad
        lo_pt = lo_pt - 0.5 * (hi_pt - lo_pt)
        hi_pt = hi_pt + 0.5 * (hi_pt - lo_pt)
    scale = math.exp(beta * n_steps * dt)
    rep = report_from_samples(out * scale, t=n_steps * dt)
    return rep


@njit(cache=True)
def _exit_kernel(d, n_steps, dt, r2, seed, n_paths):
    """First step at which a path from the origin is at distance >= r (``n_steps + 1`` if never)."""
    sq = math.sqrt(dt)
    out = np.empty(n_paths, dtype=np.int64)
    x = np.empty(d)
    for p in range(n_paths):
        for i in range(d):
            x[i] = 0.0
        ident = np.uint64(p)
        out[p] = n_steps + 1
        for n in range(1, n_steps + 1):
            key = draw_key(seed, ident, n)
            j = 0
            s = 0.0
            for i in range(0, d, 2):
                z0, z1, j = normal_pair(key, j)
                x[i] += sq * z0
                s += x[i] * x[i]
                if i + 1 < d:
                    x[i + 1] += sq * z1
                    s += x[i + 1] * x[i + 1]
            if s >= r2:
                out[p] = n
                break
    return out


def confinement_curve(d: int, r: float, t_grid: Sequence[float], n_paths: int, dt: float,
                      seed: int = 0) -> list[EstimateReport]:
    """``P_0(path stays in B(0, r) at every step end up to t)`` for each grid time, one path set."""
    if not r > 0:
        raise ValueError("r must be > 0")
    if any(t < 0 for t in t_grid):
        raise ValueError("times must be >= 0")
    n_max = int(round(max(t_grid) / dt))
    exits = _exit_kernel(d, n_max, dt, r * r, as_u64(derive(seed, PURPOSE_PATHS)), n_paths)
    out = []
    for t in t_grid:
        n_t = int(round(t / dt))
        out.append(report_from_samples((exits > n_t).astype(float), t=float(t),
                                       extra={"log_asymptote": -principal_eigenvalue(d, r) * t}))
    return out


def estimate_confinement(d: int, r: float, t: float, n_paths: int, dt: float, seed: int = 0) -> EstimateReport:
    return confinement_curve(d, r, [t], n_paths, dt, seed)[0]


@njit(cache=True)
def _tube_kernel(x0, y0, n_steps, dt, b2, seed, n_paths):
    d = x0.shape[0]
    sq = math.sqrt(dt)
    inside = np.zeros(n_paths, dtype=np.bool_)
    x = np.empty(d)
    for p in range(n_paths):
        for i in range(d):
            x[i] = x0[i]
        ident = np.uint64(p)
        ok = True
        for n in range(1, n_steps + 1):
            key = draw_key(seed, ident, n)
            j = 0
            for i in range(0, d, 2):
                z0, z1, j = normal_pair(key, j)
                x[i] += sq * z0
                if i + 1 < d:
                    x[i + 1] += sq * z1
            frac = n / n_steps
            s = 0.0
            for i in range(d):
                c = x0[i] + frac * (y0[i] - x0[i])
                s += (x[i] - c) ** 2
            if s >= b2:
                ok = False
                break
        inside[p] = ok
    return inside


def estimate_tube(d: int, x, y, t: float, b: float, n_paths: int, dt: float, seed: int = 0) -> EstimateReport:
    """Fraction of paths from ``x`` staying within ``b`` of the segment ``x -> y`` (moving linearly)."""
    if not b > 0 or not t > 0:
        raise ValueError("tube estimate needs b > 0 and t > 0")
    x0 = np.asarray(x, dtype=float).reshape(d)
    y0 = np.asarray(y, dtype=float).reshape(d)
    n_steps = max(1, int(round(t / dt)))
    inside = _tube_kernel(x0, y0, n_steps, dt, b * b, as_u64(derive(seed, PURPOSE_PATHS)), n_paths)
    dist2 = float(((y0 - x0) ** 2).sum())
    bound = math.exp(-principal_eigenvalue(d, 1.0) * t / b**2 - dist2 / (2 * t))
    rep = report_from_samples(inside.astype(float), t=t, extra={"bound": bound})
    return rep
