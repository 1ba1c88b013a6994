"""Step-synchronous pure-Python engine used as an oracle for the numba kernel.

It walks the population breadth first, one time step at a time, in a
caller-chosen (shuffled) order, and draws every random number from the same
counter-based streams as the package. Any disagreement with the depth-first
kernel therefore points at an order dependence or a rule mismatch.
"""

import math
import random

import numpy as np

from obstacle_bbm.bbm import SimConfig
from obstacle_bbm.rng import PURPOSE_BRANCH, PURPOSE_KILL, PURPOSE_MOTION, as_u64, derive, draw_key, normal_pair, uniform_at

MASK = (1 << 64) - 1


def _count(env, x, a):
    if env is None:
        return 0
    cand = env.atoms_in_box(x - a - 1.0, x + a + 1.0)
    total = 0
    for atom in cand:
        s = 0.0
        for i in range(len(x)):
            dx = atom[i] - x[i]
            s += dx * dx
        if s <= a * a:
            total += 1
    return total


def reference_run(env, cfg: SimConfig, start, shuffle_seed=None):
    """Return ``(alive_counts, final {id: position}, kills)``."""
    d = len(start)
    s_m = as_u64(derive(cfg.seeds[0], PURPOSE_MOTION))
    s_b = as_u64(derive(cfg.seeds[1], PURPOSE_BRANCH))
    s_k = as_u64(derive(cfg.seeds[2], PURPOSE_KILL))
    sq = math.sqrt(cfg.dt)
    p_clock = -math.expm1(-cfg.beta * cfg.dt)
    a = env.spec.a if env is not None else 0.0
    alpha = env.spec.alpha if env is not None else 0.0
    rng = random.Random(shuffle_seed)
    pop = [(0, np.asarray(start, dtype=float).copy())]
    counts = [1]
    kills = 0
    for n in range(1, cfg.n_steps + 1):
        if shuffle_seed is not None:
            rng.shuffle(pop)
        nxt = []
        for ident, pos in pop:
            pos = pos.copy()
            key = as_u64(draw_key(s_m, as_u64(ident), n))
            j = 0
            for i in range(0, d, 2):
                z0, z1, j = normal_pair(key, j)
                pos[i] += sq * z0
                if i + 1 < d:
                    pos[i + 1] += sq * z1
            cnt = _count(env, pos, a) if cfg.mode != "free" else 0
            in_k = cnt > 0
            if in_k and cfg.mode == "hard":
                kills += 1
                continue
            if in_k and cfg.mode == "soft":
                u = uniform_at(as_u64(draw_key(s_k, as_u64(ident), n)), 0)
                if u < -math.expm1(-alpha * cnt * cfg.dt):
                    kills += 1
                    continue
            u = uniform_at(as_u64(draw_key(s_b, as_u64(ident), n)), 0)
            c1, c2 = (2 * ident + 1) & MASK, (2 * ident + 2) & MASK
            if u < p_clock:
                if cfg.mode == "free" or not in_k:
                    p_eff = p_clock
                elif cfg.mode == "mild":
                    p_eff = -math.expm1(-cfg.beta_inside * cfg.dt)
                else:
                    p_eff = 0.0
                if u < p_eff:
                    nxt.append((c1, pos))
                    nxt.append((c2, pos.copy()))
                else:
                    nxt.append((c1, pos))
            else:
                nxt.append((ident, pos))
        pop = nxt
        counts.append(len(pop))
    return counts, {i: p for i, p in pop}, kills
