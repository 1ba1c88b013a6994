"""Discrete-time branching Brownian motion among Poissonian traps.

Each step of length ``dt`` a particle with id ``u`` moves by a Gaussian
increment, is tested for killing at its new position and then consults its
branching clock. All three draws are functions of ``(seed, u, step)`` only,
so the process can be explored in any order. The kernel walks the genealogy
depth first, which lets survival queries stop at the first lineage that
reaches the horizon.

Ids follow the breadth-first convention ``u -> 2u+1, 2u+2`` (modulo 2**64).
The branching clock fires with probability ``1 - exp(-beta dt)`` in every
mode; the mode then decides whether the particle actually splits (``U <
1 - exp(-beta_eff dt)``). A particle whose clock fired but which did not
split carries on under id ``2u+1``. Because every mode walks the same id tree
with the same draws, a harsher mode's population is always a subset of a
more lenient one's, particle for particle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .env import Environment, any_closer, count_within, inside_region, neighbor_offsets
from .rng import (
    PURPOSE_BRANCH,
    PURPOSE_KILL,
    PURPOSE_MOTION,
    as_u64,
    derive,
    draw_key,
    normal_pair,
    uniform_at,
)
from .theory import ModelConstants, moderate_clearing_radius

__all__ = [
    "ConfigError",
    "CouplingViolation",
    "SimConfig",
    "Particle",
    "ReplicateSummary",
    "DeactivatedResult",
    "run_replicate",
    "run_coupled",
    "run_deactivated",
    "range_hits_good_point",
    "dominates",
]

FREE, MILD, SOFT, HARD = 0, 1, 2, 3
MODES = {"free": FREE, "mild": MILD, "soft": SOFT, "hard": HARD}

ST_OK, ST_CENSORED, ST_NEED_ENV = 0, 1, 2


class ConfigError(ValueError):
    pass


class CouplingViolation(AssertionError):
    pass


@dataclass(frozen=True)
class SimConfig:
    mode: str = "soft"
    beta: float = 1.0
    beta_inside: float = 0.0
    t_end: float = 1.0
    dt: float = 1e-3
    max_particles: int = 2_000_000
    seeds: tuple[int, int, int] = (1, 2, 3)
    deactivation_radius: float | None = None
    center: tuple[float, ...] | None = None
    # off only for deliberately stiff kill rates (alpha * dt >> 1)
    strict_rates: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not self.dt > 0:
            raise ConfigError("dt must be > 0")
        if not self.beta >= 0:
            raise ConfigError("beta must be >= 0")
        if not self.t_end >= 0:
            raise ConfigError("t_end must be >= 0")
        if self.dt * self.beta > 0.1:
            raise ConfigError("dt * beta must be <= 0.1")
        if self.mode == "mild":
            if not 0 <= self.beta_inside < self.beta:
                raise ConfigError("mild mode needs 0 <= beta_inside < beta")
        if int(self.max_particles) < 1:
            raise ConfigError("max_particles must be >= 1")
        if len(self.seeds) != 3:
            raise ConfigError("seeds must be (motion, branching, kill)")
        object.__setattr__(self, "seeds", tuple(int(s) & ((1 << 64) - 1) for s in self.seeds))
        if self.deactivation_radius is not None and not self.deactivation_radius >= 0:
            raise ConfigError("deactivation_radius must be >= 0")
        if self.center is not None:
            object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def check_rates(self, alpha: float) -> None:
        if self.strict_rates and self.mode in ("soft",) and self.dt * (self.beta + alpha) > 0.1:
            raise ConfigError(f"dt * (beta + alpha) = {self.dt * (self.beta + alpha):g} exceeds 0.1")

    def for_replicate(self, index: int) -> "SimConfig":
        """Config whose seeds are derived from this one's for replicate ``index``."""
        return replace(self, seeds=tuple(derive(s, 0x10, index) for s in self.seeds))


@dataclass
class Particle:
    id: int
    position: np.ndarray
    lineage_max_dist: float
    alive: bool = True


@dataclass
class ReplicateSummary:
    N_t: int
    survived: bool
    M_t: float
    kills: int
    censored: bool
    hit_good_point_time: float | None = None
    extinction_time: float | None = None
    particles: list[Particle] | None = field(default=None, repr=False)


@dataclass(frozen=True)
class DeactivatedResult:
    n_t: int
    threshold: int
    censored: bool = False


# --------------------------------------------------------------------------
# kernel


@njit(cache=True, inline="always")
def _dist2(x, c):
    s = 0.0
    for i in range(x.shape[0]):
        v = x[i] - c[i]
        s += v * v
    return s


@njit(cache=True, inline="always")
def _in_box(x, half):
    for i in range(x.shape[0]):
        if abs(x[i]) > half:
            return False
    return True


@njit(cache=True)
def _grow2(a, n):
    out = np.empty((n, a.shape[1]), dtype=a.dtype)
    out[: a.shape[0]] = a
    return out


@njit(cache=True)
def _grow1(a, n):
    out = np.empty(n, dtype=a.dtype)
    out[: a.shape[0]] = a
    return out


@njit(cache=True)
def _run_tree(
    start, center, n_end, dt, mode, beta, beta_in, alpha, a2,
    use_env, lo, shape, strides, side, offsets, atoms, nbr_pot, margin,
    s_motion, s_branch, s_kill, cap, deact_r2,
    hit_enabled, good_r2, box_half, nbr_good,
    early_stop, order, collect,
):
    d = start.shape[0]
    sq = math.sqrt(dt)
    p_clock = -math.expm1(-beta * dt)
    alive = np.zeros(n_end + 1, dtype=np.int64)
    kills = 0
    hit_step = -1
    last_alive = -1
    survivor = False
    escape = np.zeros(d)

    cap_stack = 256
    st_id = np.empty(cap_stack, dtype=np.uint64)
    st_step = np.empty(cap_stack, dtype=np.int64)
    st_pos = np.empty((cap_stack, d), dtype=np.float64)
    st_l2 = np.empty(cap_stack, dtype=np.float64)

    n_fin = 0
    f_id = np.empty(16 if collect else 0, dtype=np.uint64)
    f_pos = np.empty((16 if collect else 0, d), dtype=np.float64)
    f_l2 = np.empty(16 if collect else 0, dtype=np.float64)

    pos = start.copy()
    l2 = _dist2(pos, center)
    max_r2 = l2
    alive[0] = 1
    if alive[0] > cap:
        return (ST_CENSORED, alive, kills, max_r2, hit_step, last_alive, survivor,
                f_id[:0], f_pos[:0], f_l2[:0], escape)
    if hit_enabled and _in_box(pos, box_half):
        if not any_closer(pos, lo, shape, strides, side, offsets, atoms, nbr_good, good_r2):
            hit_step = 0
    if n_end == 0:
        last_alive = 0

    st_id[0] = np.uint64(0)
    st_step[0] = 0
    st_pos[0] = pos
    st_l2[0] = l2
    sp = 1
    one = np.uint64(1)
    two = np.uint64(2)
    while sp > 0:
        sp -= 1
        ident = st_id[sp]
        step = st_step[sp]
        for i in range(d):
            pos[i] = st_pos[sp, i]
        l2 = st_l2[sp]
        while True:
            if step >= n_end:
                survivor = True
                last_alive = n_end
                if collect:
                    if n_fin == f_id.shape[0]:
                        f_id = _grow1(f_id, 2 * n_fin)
                        f_pos = _grow2(f_pos, 2 * n_fin)
                        f_l2 = _grow1(f_l2, 2 * n_fin)
                    f_id[n_fin] = ident
                    f_pos[n_fin] = pos
                    f_l2[n_fin] = l2
                    n_fin += 1
                break
            n = step + 1
            key = draw_key(s_motion, ident, n)
            j = 0
            for i in range(0, d, 2):
                z0, z1, j = normal_pair(key, j)
                pos[i] += sq * z0
                if i + 1 < d:
                    pos[i + 1] += sq * z1
            r2 = _dist2(pos, center)
            if r2 > l2:
                l2 = r2
                if r2 > max_r2:
                    max_r2 = r2
            if use_env and not inside_region(pos, lo, shape, side, margin):
                for i in range(d):
                    escape[i] = pos[i]
                return (ST_NEED_ENV, alive, kills, max_r2, hit_step, last_alive, survivor,
                        f_id[:0], f_pos[:0], f_l2[:0], escape)
            if l2 > deact_r2:
                break
            if hit_enabled and (hit_step < 0 or n < hit_step) and _in_box(pos, box_half):
                if not any_closer(pos, lo, shape, strides, side, offsets, atoms, nbr_good, good_r2):
                    hit_step = n
            in_k = False
            cnt = 0
            if mode != 0:
                cnt = count_within(pos, lo, shape, strides, side, offsets, atoms, nbr_pot, a2)
                in_k = cnt > 0
            if in_k:
                killed = False
                if mode == 2:
                    u = uniform_at(draw_key(s_kill, ident, n), 0)
                    killed = u < -math.expm1(-alpha * cnt * dt)
                elif mode == 3:
                    killed = True
                if killed:
                    kills += 1
                    if step > last_alive:
                        last_alive = step
                    break
            alive[n] += 1
            if alive[n] > cap:
                return (ST_CENSORED, alive, kills, max_r2, hit_step, last_alive, survivor,
                        f_id[:n_fin], f_pos[:n_fin], f_l2[:n_fin], escape)
            u = uniform_at(draw_key(s_branch, ident, n), 0)
            if u < p_clock:
                if mode == 0 or not in_k:
                    p_eff = p_clock
                elif mode == 1:
                    p_eff = -math.expm1(-beta_in * dt)
                else:
                    p_eff = 0.0
                c1 = two * ident + one
                c2 = two * ident + two
                if u < p_eff:
                    if sp == st_id.shape[0]:
                        st_id = _grow1(st_id, 2 * sp)
                        st_step = _grow1(st_step, 2 * sp)
                        st_pos = _grow2(st_pos, 2 * sp)
                        st_l2 = _grow1(st_l2, 2 * sp)
                    st_id[sp] = c2 if order == 0 else c1
                    st_step[sp] = n
                    for i in range(d):
                        st_pos[sp, i] = pos[i]
                    st_l2[sp] = l2
                    sp += 1
                    ident = c1 if order == 0 else c2
                else:
                    ident = c1
            step = n
        if early_stop and survivor and (not hit_enabled or hit_step >= 0):
            break
    return (ST_OK, alive, kills, max_r2, hit_step, last_alive, survivor,
            f_id[:n_fin], f_pos[:n_fin], f_l2[:n_fin], escape)


# --------------------------------------------------------------------------
# python driver


@dataclass
class _Raw:
    status: int
    alive: np.ndarray
    kills: int
    max_r2: float
    hit_step: int
    last_alive: int
    survivor: bool
    ids: np.ndarray
    pos: np.ndarray
    l2: np.ndarray




def _start_vector(env, cfg: SimConfig, start, d: int | None = None) -> np.ndarray:
    if start is None:
        if env is not None:
            d = env.d
        if d is None:
            raise ConfigError("free runs without an environment need a start point or dimension")
        return np.zeros(d)
    x = np.asarray(start, dtype=float).reshape(-1)
    if env is not None and x.shape[0] != env.d:
        raise ConfigError("start point has wrong dimension")
    return x


def _initial_half_width(cfg: SimConfig, margin: float) -> float:
    t = cfg.n_steps * cfg.dt
    return (math.sqrt(2.0 * cfg.beta) + 0.5) * t + 4.0 * math.sqrt(t) + margin + 2.0


def _simulate(env: Environment | None, cfg: SimConfig, start, *, hit=None, early_stop=False,
              order=0, collect=False, d=None) -> _Raw:
    x0 = _start_vector(env, cfg, start, d)
    d = x0.shape[0]
    center = np.asarray(cfg.center, dtype=float) if cfg.center is not None else x0.copy()
    if center.shape[0] != d:
        raise ConfigError("center has wrong dimension")
    mode = MODES[cfg.mode]
    need_env = mode != FREE or hit is not None
    if need_env and env is None:
        raise ConfigError(f"mode {cfg.mode!r} needs an environment")
    if env is not None:
        cfg.check_rates(env.spec.alpha)
    deact_r2 = math.inf if cfg.deactivation_radius is None else cfg.deactivation_radius ** 2
    s_m = as_u64(derive(cfg.seeds[0], PURPOSE_MOTION))
    s_b = as_u64(derive(cfg.seeds[1], PURPOSE_BRANCH))
    s_k = as_u64(derive(cfg.seeds[2], PURPOSE_KILL))
    if hit is not None:
        good_r, box_half = hit
    else:
        good_r, box_half = 0.0, 0.0
    if need_env:
        side = env.spec.cell_side
        a = env.spec.a
        margin = max(a, good_r + a)
        nbr_pot = neighbor_offsets(d, int(math.ceil(a / side)))
        nbr_good = neighbor_offsets(d, int(math.ceil((good_r + a) / side)))
        half = _initial_half_width(cfg, margin)
        lo_pt = x0 - half
        hi_pt = x0 + half
        alpha = env.spec.alpha
    else:
        a = 0.0
        alpha = 0.0
        margin = 0.0
    while True:
        if need_env:
            reg = env.region(np.floor(lo_pt / side).astype(np.int64), np.floor(hi_pt / side).astype(np.int64))
            lo, shape, strides, rside, offsets, atoms = reg.args()
        else:
            lo = shape = strides = np.zeros(d, dtype=np.int64)
            rside = 1.0
            offsets = np.zeros(1, dtype=np.int64)
            atoms = np.zeros((0, d))
            nbr_pot = nbr_good = np.zeros((1, d), dtype=np.int64)
        out = _run_tree(
            x0, center, cfg.n_steps, cfg.dt, mode, cfg.beta, cfg.beta_inside, alpha, a * a,
            need_env, lo, shape, strides, rside, offsets, atoms, nbr_pot, margin,
            s_m, s_b, s_k, int(cfg.max_particles), deact_r2,
            hit is not None, (good_r + a) ** 2, box_half, nbr_good,
            early_stop, order, collect,
        )
        status = out[0]
        if status != ST_NEED_ENV:
            break
        esc = out[-1]
        lo_pt = np.minimum(lo_pt, esc - 0.5 * (hi_pt - lo_pt))
        hi_pt = np.maximum(hi_pt, esc + 0.5 * (hi_pt - lo_pt))
    return _Raw(status, out[1], int(out[2]), float(out[3]), int(out[4]), int(out[5]),
                bool(out[6]), out[7], out[8], out[9])


def _summary(raw: _Raw, cfg: SimConfig, collect: bool) -> ReplicateSummary:
    n = cfg.n_steps
    censored = raw.status == ST_CENSORED
    N_t = int(raw.alive[n])
    parts = None
    if collect:
        parts = [Particle(int(i), p.copy(), math.sqrt(l2)) for i, p, l2 in zip(raw.ids, raw.pos, raw.l2)]
    ext = None
    if not censored and N_t == 0:
        ext = (raw.last_alive + 1) * cfg.dt
    return ReplicateSummary(
        N_t=N_t,
        survived=N_t >= 1,
        M_t=math.sqrt(raw.max_r2),
        kills=raw.kills,
        censored=censored,
        hit_good_point_time=None if raw.hit_step < 0 else raw.hit_step * cfg.dt,
        extinction_time=ext,
        particles=parts,
    )


def run_replicate(env: Environment | None, cfg: SimConfig, start=None, *, collect_particles=False,
                  order: int = 0, d: int | None = None) -> ReplicateSummary:
    """Simulate one replicate to ``cfg.t_end``; ``env`` may be ``None`` in free mode."""
    raw = _simulate(env, cfg, start, order=order, collect=collect_particles, d=d)
    return _summary(raw, cfg, collect_particles)


def survival_horizon(env, cfg: SimConfig, start=None) -> tuple[int, bool]:
    """Last step with ``N >= 1`` (``n_steps`` if the run survives) and the censoring flag.

    Stops as soon as one lineage reaches the horizon.
    """
    raw = _simulate(env, cfg, start, early_stop=True)
    return raw.last_alive, raw.status == ST_CENSORED


def hit_and_survival(env, cfg: SimConfig, good_radius: float, box_half: float, start=None):
    """(hit step or -1, survived, censored), stopping once both questions are settled."""
    raw = _simulate(env, cfg, start, hit=(good_radius, box_half), early_stop=True)
    return raw.hit_step, raw.survivor, raw.status == ST_CENSORED


_RANK = {"free": 3, "mild": 2, "soft": 1, "hard": 1}


def dominates(lenient: SimConfig, harsh: SimConfig) -> bool:
    """True if the coupling guarantees ``harsh``'s population is a subset of ``lenient``'s."""
    a, b = lenient.mode, harsh.mode
    if a == b:
        return a != "mild" or lenient.beta_inside >= harsh.beta_inside
    if a == "free":
        return True
    if a == "mild":
        return b in ("soft", "hard")
    return False


def _comparable_fields(cfg: SimConfig) -> SimConfig:
    return replace(cfg, mode="free", beta_inside=0.0)


def run_coupled(env: Environment, cfg_pair: Sequence[SimConfig], start=None):
    """Run two modes on identical streams and check pathwise domination where it applies."""
    ca, cb = cfg_pair
    if _comparable_fields(ca) != _comparable_fields(cb):
        raise ConfigError("coupled configs may differ only in mode (and beta_inside)")
    sa = run_replicate(env, ca, start, collect_particles=True)
    sb = run_replicate(env, cb, start, collect_particles=True)
    for lenient, harsh, sl, sh in ((ca, cb, sa, sb), (cb, ca, sb, sa)):
        if sl.censored or sh.censored or not dominates(lenient, harsh):
            continue
        _check_subset(sl, sh, lenient.mode, harsh.mode)
    return sa, sb


def _check_subset(sl: ReplicateSummary, sh: ReplicateSummary, ml: str, mh: str) -> None:
    if sh.N_t > sl.N_t:
        raise CouplingViolation(f"N_t({mh})={sh.N_t} > N_t({ml})={sl.N_t}")
    lookup = {p.id: p.position for p in sl.particles}
    for p in sh.particles:
        q = lookup.get(p.id)
        if q is None or not np.array_equal(q, p.position):
            raise CouplingViolation(f"particle {p.id} of {mh} run has no twin in {ml} run")


def run_deactivated(cfg: SimConfig, radius_fn: Callable[[float], float], kappa: float, p_hat: float,
                    *, d: int, start=None) -> DeactivatedResult:
    """Free BBM keeping only particles whose ancestral line stayed in ``B(start, r(t_end))``.

    Returns the surviving count and ``ceil(exp(-kappa r) * p_hat * exp(beta t))``.
    """
    beta = cfg.beta
    if not 0 < kappa <= math.sqrt(beta / 2) * (1 + 1e-12):
        raise ConfigError(f"kappa must lie in (0, sqrt(beta/2)] = (0, {math.sqrt(beta / 2):g}]")
    t = cfg.n_steps * cfg.dt
    r = float(radius_fn(t))
    if not r >= 0:
        raise ConfigError("radius function must be nonnegative")
    run_cfg = replace(cfg, mode="free", deactivation_radius=r, center=None)
    raw = _simulate(None, run_cfg, start, d=d)
    n_t = int(raw.alive[cfg.n_steps])
    threshold = math.ceil(math.exp(-kappa * r) * p_hat * math.exp(beta * t))
    return DeactivatedResult(n_t=n_t, threshold=int(threshold), censored=raw.status == ST_CENSORED)


def range_hits_good_point(env: Environment, cfg: SimConfig, mc: ModelConstants, k: float | None = None,
                          start=None) -> ReplicateSummary:
    """Full replicate that also records the first time the range meets a good point."""
    if cfg.mode != "soft":
        raise ConfigError("good-point hitting is defined for soft mode")
    t = cfg.n_steps * cfg.dt
    if not t > math.e:
        raise ConfigError("good-point hitting needs t_end > e")
    if k is None:
        k = math.sqrt(3.0 * cfg.beta)
    r = moderate_clearing_radius(t, mc)
    raw = _simulate(env, cfg, start, hit=(r, k * t))
    return _summary(raw, cfg, False)
