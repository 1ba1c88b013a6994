"""Experiment runners behind the command line.

Each runner turns a resolved :class:`ExperimentConfig` into report rows,
optional per-item tables and the environments it touched. Nothing here
writes files; :mod:`obstacle_bbm.cli` owns the artifact directory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bbm import SimConfig
from .config import ExperimentConfig
from .env import Environment, EnvironmentSpec, KillingFunction, restore
from .estimators import (
    EstimateReport,
    confinement_curve,
    estimate_conditional_mass,
    estimate_deactivated_shortfall,
    estimate_mean_mass,
    estimate_survival,
    estimate_tube,
    feynman_kac_mass,
    lemma2_hitting,
    report_from_samples,
    run_replicates,
)
from .geometry import CoveringCertificate, certify_covering, largest_clearing_in_cube
from .theory import ModelConstants, clearing_radius, covering_scale, principal_eigenvalue

REPORT_COLUMNS = ["op", "env_seed", "params_hash", "t", "estimate", "std_error", "n",
                  "ci_lo", "ci_hi", "excluded_censored", "status", "pass"]
REPLICATE_COLUMNS = ["replicate", "seed", "mode", "t_end", "dt", "N_t", "survived", "M_t",
                     "kills", "censored", "hit_time"]

_SNAPSHOT_ATOMS = 200_000


@dataclass
class Outcome:
    rows: list[dict] = field(default_factory=list)
    tables: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)
    environments: list[tuple[str, Environment, float]] = field(default_factory=list)
    certificates: dict[str, CoveringCertificate] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.get("pass") is not False for r in self.rows)

    def add(self, op: str, rep: EstimateReport, *, env_seed=None, t=None, passed=None):
        self.rows.append({
            "op": op,
            "env_seed": env_seed,
            "t": rep.t if t is None else t,
            "estimate": rep.estimate,
            "std_error": rep.std_error,
            "n": rep.n,
            "ci_lo": rep.ci95[0],
            "ci_hi": rep.ci95[1],
            "excluded_censored": rep.excluded_censored,
            "status": rep.status,
            "pass": passed,
        })

    def add_value(self, op: str, value: float, *, env_seed=None, t=None, n=None, passed=None):
        self.rows.append({"op": op, "env_seed": env_seed, "t": t, "estimate": value, "std_error": None,
                          "n": n, "ci_lo": None, "ci_hi": None, "excluded_censored": None,
                          "status": "ok", "pass": passed})


# --------------------------------------------------------------------------
# builders


def env_seeds(cfg: ExperimentConfig) -> list[int]:
    base = cfg.environment.master_seed
    return [(base + i) % 2**64 for i in range(cfg.estimator.n_env_seeds)]


def build_environment(cfg: ExperimentConfig, master_seed: int | None = None) -> Environment:
    e = cfg.environment
    if e.snapshot is not None:
        env = restore(e.snapshot)
    else:
        spec = EnvironmentSpec(d=e.d, nu=e.nu, killing=KillingFunction(e.alpha, e.a),
                               master_seed=e.master_seed if master_seed is None else master_seed,
                               cell_side=e.cell_side)
        env = Environment(spec)
    if e.clear_radius is not None:
        center = e.clear_center if e.clear_center is not None else [0.0] * env.d
        env = env.without_atoms_in_ball(center, e.clear_radius)
    return env


def sim_config(cfg: ExperimentConfig, t_end: float | None = None) -> SimConfig:
    s = cfg.sim
    return SimConfig(mode=s.mode, beta=s.beta, beta_inside=s.beta_inside,
                     t_end=s.t_end if t_end is None else t_end, dt=s.dt,
                     max_particles=s.max_particles, seeds=tuple(s.seeds),
                     strict_rates=s.strict_rates)


def model_constants(cfg: ExperimentConfig) -> ModelConstants:
    return ModelConstants(cfg.environment.d, cfg.environment.nu, cfg.sim.beta)


def _times(cfg: ExperimentConfig) -> list[float]:
    return list(cfg.estimator.t_grid) or [cfg.sim.t_end]


def _snapshot_half(env: Environment, want: float) -> float:
    cap = 0.5 * (_SNAPSHOT_ATOMS / env.spec.nu) ** (1.0 / env.d)
    return float(min(want, cap))


def _sim_half(cfg: ExperimentConfig, t: float) -> float:
    beta = cfg.sim.beta
    return (math.sqrt(2 * beta) + 0.5) * t + 4 * math.sqrt(t) + cfg.environment.a + 2.0


def _start(cfg: ExperimentConfig):
    return None if cfg.sim.start is None else np.asarray(cfg.sim.start, dtype=float)


# --------------------------------------------------------------------------
# runners


def run_env_stats(cfg, workers):
    out = Outcome()
    ell = cfg.estimator.ell
    table = []
    vals = []
    for s in env_seeds(cfg):
        env = build_environment(cfg, s)
        d = env.d
        atoms = env.atoms_in_box(np.full(d, -ell), np.full(d, ell))
        inside = atoms[np.all(np.abs(atoms) <= ell, axis=1)] if len(atoms) else atoms
        rate = len(inside) / (2 * ell) ** d
        vals.append(rate)
        table.append([s, len(inside), rate])
        out.environments.append((f"env_{s}", env, _snapshot_half(env, ell)))
    out.tables["env_stats"] = (["env_seed", "atoms", "intensity"], table)
    out.add("env-stats:intensity", report_from_samples(vals))
    return out


def run_clearings(cfg, workers):
    out = Outcome()
    ell = cfg.estimator.ell
    e = cfg.environment
    need = clearing_radius("lemma1", ell, 1.0, d=e.d, nu=e.nu)
    table = []
    hits = []
    for s in env_seeds(cfg):
        env = build_environment(cfg, s)
        c = largest_clearing_in_cube(env, ell)
        ok = c.radius >= need
        hits.append(float(ok))
        table.append([s, *c.center.tolist(), c.radius, need, int(ok)])
        out.environments.append((f"env_{s}", env, _snapshot_half(env, ell + e.a)))
    out.tables["clearings"] = (["env_seed", *[f"x{i}" for i in range(e.d)], "radius", "required", "contains"],
                               table)
    out.add("clearings:fraction", report_from_samples(hits))
    out.add_value("clearings:required", need)
    return out


def run_covering(cfg, workers):
    out = Outcome()
    est = cfg.estimator
    for s in env_seeds(cfg):
        env = build_environment(cfg, s)
        for t in _times(cfg):
            cert = certify_covering(env, t, cfg.sim.k, est.slack, max_centers=est.max_centers, seed=est.seed)
            out.certificates[f"witness_env{s}_t{t:g}"] = cert
            out.add_value("covering:fraction", cert.fraction, env_seed=s, t=t, n=cert.n_centers)
            half = cfg.sim.k * t + covering_scale(t) + env.spec.a
        out.environments.append((f"env_{s}", env, _snapshot_half(env, half)))
    return out


def run_simulate(cfg, workers):
    out = Outcome()
    sim = sim_config(cfg)
    seeds = env_seeds(cfg)
    table = []
    for s in seeds:
        env = build_environment(cfg, s)
        hits = (model_constants(cfg), cfg.sim.k) if cfg.estimator.track_hits else None
        res = run_replicates(env, sim, cfg.estimator.n_replicates, _start(cfg), workers, track_hits=hits)
        N = np.array([r[0] for r in res], dtype=float)
        cens = np.array([r[1] for r in res], dtype=bool)
        for i, (n_t, c, m_t, kills, hit) in enumerate(res):
            row = [i, sim.for_replicate(i).seeds[0], sim.mode, sim.t_end, sim.dt, n_t, int(n_t >= 1),
                   m_t, kills, int(c), hit]
            table.append(row if len(seeds) == 1 else [s, *row])
        t = sim.n_steps * sim.dt
        out.add("simulate:mean_N", report_from_samples(N[~cens], t=t, excluded=int(cens.sum())), env_seed=s)
        out.add("simulate:survival", report_from_samples((N[~cens] >= 1).astype(float), t=t,
                                                         excluded=int(cens.sum())), env_seed=s)
        out.environments.append((f"env_{s}", env, _snapshot_half(env, _sim_half(cfg, t))))
    cols = REPLICATE_COLUMNS if len(seeds) == 1 else ["env_seed", *REPLICATE_COLUMNS]
    out.tables["replicates"] = (cols, table)
    return out


def run_survival(cfg, workers):
    out = Outcome()
    times = _times(cfg)
    sim = sim_config(cfg, max(times))
    for s in env_seeds(cfg):
        env = build_environment(cfg, s)
        for rep in estimate_survival(env, sim, times, cfg.estimator.n_replicates, _start(cfg), workers):
            out.add("survival", rep, env_seed=s)
        out.environments.append((f"env_{s}", env, _snapshot_half(env, _sim_half(cfg, max(times)))))
    return out


def run_fk_check(cfg, workers):
    out = Outcome()
    sim = sim_config(cfg)
    est = cfg.estimator
    for s in env_seeds(cfg):
        env = build_environment(cfg, s)
        direct = estimate_mean_mass(env, sim, est.n_replicates, _start(cfg), workers)
        fk = feynman_kac_mass(env, sim.beta, sim.t_end, est.n_paths, sim.dt, _start(cfg), seed=est.seed)
        diff = direct.estimate - fk.estimate
        se = math.hypot(direct.std_error, fk.std_error)
        ok = abs(diff) <= est.sigmas * se
        out.add("fk-check:direct", direct, env_seed=s)
        out.add("fk-check:feynman_kac", fk, env_seed=s)
        out.add("fk-check:difference",
                EstimateReport(diff, se, direct.n + fk.n, (diff - 1.96 * se, diff + 1.96 * se),
                               direct.excluded_censored, direct.t),
                env_seed=s, passed=ok)
        out.environments.append((f"env_{s}", env, _snapshot_half(env, _sim_half(cfg, sim.t_end))))
    return out


def run_confinement(cfg, workers):
    out = Outcome()
    est = cfg.estimator
    d, r = cfg.environment.d, est.radius
    reps = confinement_curve(d, r, _times(cfg), est.n_paths, cfg.sim.dt, seed=est.seed)
    for rep in reps:
        out.add("confinement", rep)
    lam = principal_eigenvalue(d, r)
    for a, b in zip(reps, reps[1:]):
        if a.estimate > 0 and b.estimate > 0 and b.t > a.t:
            slope = (math.log(b.estimate) - math.log(a.estimate)) / (b.t - a.t)
            out.add_value("confinement:slope_over_eigenvalue", -slope / lam, t=b.t, n=b.n)
    return out


def run_tube(cfg, workers):
    out = Outcome()
    est = cfg.estimator
    d = cfg.environment.d
    x = np.zeros(d) if est.x is None else np.asarray(est.x, dtype=float)
    y = np.eye(d)[0] if est.y is None else np.asarray(est.y, dtype=float)
    rep = estimate_tube(d, x, y, cfg.sim.t_end, est.radius, est.n_paths, cfg.sim.dt, seed=est.seed)
    out.add("tube", rep)
    out.add_value("tube:lower_bound", rep.extra["bound"], t=rep.t)
    return out


def run_lemma2(cfg, workers):
    out = Outcome()
    est = cfg.estimator
    sim = sim_config(cfg)
    mc = model_constants(cfg)
    times = _times(cfg)
    target = est.target_survivors
    for s in env_seeds(cfg):
        env = build_environment(cfg, s)
        reps = lemma2_hitting(env, sim, mc, cfg.sim.k, times,
                              n_replicates=None if target else est.n_replicates,
                              target_survivors=target, max_replicates=est.max_replicates,
                              start=_start(cfg), workers=workers)
        for rep in reps:
            out.add("lemma2:no_hit", rep, env_seed=s)
        out.environments.append((f"env_{s}", env, _snapshot_half(env, cfg.sim.k * max(times) + 2.0)))
    return out


def run_lln(cfg, workers):
    out = Outcome()
    sim = sim_config(cfg)
    for s in env_seeds(cfg):
        env = build_environment(cfg, s)
        rep = estimate_conditional_mass(env, sim, cfg.estimator.n_replicates, _start(cfg), workers)
        out.add("lln:log_mass", rep.log_mass, env_seed=s)
        out.add("lln:statistic", rep.lln, env_seed=s)
        out.add_value("lln:statistic_median", rep.lln_median, env_seed=s, t=rep.lln.t, n=rep.survivors)
        out.add("lln:mean_N", rep.mean_mass, env_seed=s)
        out.environments.append((f"env_{s}", env, _snapshot_half(env, _sim_half(cfg, sim.t_end))))
    return out


def run_theorem_c(cfg, workers):
    out = Outcome()
    est = cfg.estimator
    p = est.radius_exponent
    if est.kappa is None:
        raise ValueError("theoremC needs beta > 0 or an explicit estimator.kappa")
    for t in _times(cfg):
        rep = estimate_deactivated_shortfall(
            cfg.sim.beta, cfg.environment.d, t, lambda u: u ** p, est.kappa, est.n_replicates,
            dt=cfg.sim.dt, n_paths=est.n_paths, seed=est.seed, max_particles=cfg.sim.max_particles,
            workers=workers)
        out.add("theoremC:shortfall", rep)
        out.add_value("theoremC:threshold", float(rep.extra["threshold"]), t=t)
    return out


RUNNERS: dict[str, Callable[[ExperimentConfig, int | None], Outcome]] = {
    "env-stats": run_env_stats,
    "clearings": run_clearings,
    "covering": run_covering,
    "simulate": run_simulate,
    "survival": run_survival,
    "fk-check": run_fk_check,
    "confinement": run_confinement,
    "tube": run_tube,
    "lemma2": run_lemma2,
    "lln": run_lln,
    "theoremC": run_theorem_c,
}


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> Outcome:
    return RUNNERS[cfg.experiment](cfg, workers)
