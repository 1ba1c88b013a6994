import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from obstacle_bbm.env import (
    Environment,
    EnvironmentSpec,
    KillingFunction,
    SnapshotError,
    atoms_in_cell,
    atoms_near,
    empty_environment,
    in_trap,
    potential,
    restore,
    snapshot,
)

from conftest import single_atom_env


def spec(seed=0, nu=1.0, a=0.5, alpha=1.0, d=2, side=None):
    return EnvironmentSpec(d, nu, KillingFunction(alpha, a), master_seed=seed, cell_side=side)


class TestSpec:
    def test_cell_side_default(self):
        assert spec(a=0.2).cell_side == 1.0
        assert spec(a=0.8).cell_side == 1.6

    @pytest.mark.parametrize("kw", [dict(a=0.5, side=0.9), dict(nu=0.0), dict(alpha=0.0), dict(a=-1.0), dict(d=0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            spec(**kw)

    def test_killing_kind(self):
        with pytest.raises(ValueError):
            KillingFunction(1.0, 0.5, kind="gaussian")


class TestCells:
    def test_deterministic(self):
        a = atoms_in_cell(spec(3), (4, -2))
        b = atoms_in_cell(spec(3), (4, -2))
        assert a.atoms.tobytes() == b.atoms.tobytes()
        assert a.cell_index == (4, -2)

    def test_atoms_inside_half_open_cell(self):
        s = spec(5, nu=6.0, side=1.5)
        for cell in [(0, 0), (-3, 7), (2**40, -(2**40))]:
            atoms = atoms_in_cell(s, cell).atoms
            lo = np.asarray(cell, dtype=float) * 1.5
            assert np.all(atoms >= lo) and np.all(atoms < lo + 1.5)

    def test_batch_matches_single(self):
        env = Environment(spec(9, nu=3.0))
        reg = env.region(np.array([-2, -2]), np.array([2, 2]))
        fresh = Environment(spec(9, nu=3.0))
        cells = np.indices((5, 5)).reshape(2, -1).T - 2
        joined = np.concatenate([fresh.cell_atoms(tuple(c)) for c in cells])
        assert np.array_equal(reg.atoms, joined)

    def test_poisson_mean_four(self):
        # nu * side^d = 4 over 1e4 cells; Poisson(4) has variance 4
        env = Environment(spec(11, nu=4.0))
        reg = env.region(np.array([0, 0]), np.array([99, 99]))
        counts = np.diff(reg.offsets)
        se = math.sqrt(4.0 / counts.size)
        assert abs(counts.mean() - 4.0) <= 3 * se
        # variance-to-mean ratio of a Poisson law is 1
        assert abs(counts.var(ddof=1) / counts.mean() - 1.0) < 0.06

    def test_poisson_pmf(self):
        from scipy.stats import chisquare, poisson

        env = Environment(spec(12, nu=4.0))
        counts = np.diff(env.region(np.array([0, 0]), np.array([99, 99])).offsets)
        k = np.arange(0, 12)
        obs = np.array([(counts == i).sum() for i in k[:-1]] + [(counts >= 11).sum()])
        exp = np.array([poisson.pmf(i, 4.0) for i in k[:-1]] + [poisson.sf(10, 4.0)]) * counts.size
        assert chisquare(obs, exp).pvalue > 1e-3

    def test_large_mean_cells(self):
        env = Environment(spec(13, nu=100.0))
        counts = np.diff(env.region(np.array([0, 0]), np.array([49, 49])).offsets)
        assert abs(counts.mean() - 100.0) <= 3 * math.sqrt(100.0 / counts.size)

    def test_tiny_intensity_mostly_empty(self):
        env = Environment(spec(1, nu=1e-12))
        assert len(env.region(np.array([0, 0]), np.array([49, 49])).atoms) == 0

    def test_adjacent_cells_uncorrelated(self):
        x, y = [], []
        for s in range(10_000):
            env = Environment(spec(s, nu=2.0))
            x.append(len(env.cell_atoms((0, 0))))
            y.append(len(env.cell_atoms((1, 0))))
        x, y = np.asarray(x, float), np.asarray(y, float)
        prod = (x - x.mean()) * (y - y.mean())
        assert abs(prod.mean()) <= 3 * prod.std(ddof=1) / math.sqrt(len(x))


class TestQueries:
    def test_atoms_near_zero_radius_empty(self, env7):
        assert len(atoms_near(env7, [0.3, 0.1], 0.0)) == 0

    def test_atoms_near_sorted_and_exact(self, env7):
        x = np.array([0.4, -1.3])
        got = atoms_near(env7, x, 5.0)
        dist = np.sqrt(((got - x) ** 2).sum(axis=1))
        assert np.all(np.diff(dist) >= 0) and np.all(dist <= 5.0)
        box = env7.atoms_in_box(x - 6, x + 6)
        brute = box[np.sqrt(((box - x) ** 2).sum(axis=1)) <= 5.0]
        assert len(brute) == len(got)

    def test_cell_union_equals_ball(self, env7):
        x = np.zeros(2)
        ball = atoms_near(env7, x, 4.0)
        parts = []
        for i in range(-5, 5):
            for j in range(-5, 5):
                c = env7.cell_atoms((i, j))
                if len(c):
                    parts.append(c[np.sqrt((c ** 2).sum(axis=1)) <= 4.0])
        union = np.concatenate(parts)
        key = lambda arr: sorted(map(tuple, arr))
        assert key(union) == key(ball)

    def test_ball_counts_poisson(self):
        counts = np.array([len(atoms_near(spec(s), [0.0, 0.0], 5.0)) for s in range(400)])
        mean = math.pi * 25
        assert abs(counts.mean() - mean) <= 3 * math.sqrt(mean / counts.size)

    def test_potential_counts(self):
        env = empty_environment(2, alpha=1.5, a=0.5).with_atoms([[0.1, 0.0], [0.0, 0.2], [3.0, 3.0]])
        assert potential(env, [5.0, 5.0]) == 0.0
        assert potential(env, [0.5, 0.0]) == 1.5
        assert potential(env, [0.05, 0.1]) == 3.0

    def test_in_trap_boundary(self):
        env = single_atom_env([0.0, 0.0], a=0.5)
        eps = 1e-9
        assert in_trap(env, [0.5 - eps, 0.0])
        assert not in_trap(env, [0.5 + eps, 0.0])
        assert not in_trap(env, [2.0, 0.0])

    @given(st.floats(-20, 20), st.floats(-20, 20))
    def test_in_trap_iff_nearest_within_a(self, x, y):
        env = Environment(spec(21, nu=0.7, a=0.4))
        p = np.array([x, y])
        assert in_trap(env, p) == (env.nearest_distance(p) <= 0.4)
        assert potential(env, p) == 1.0 * len(atoms_near(env, p, 0.4))

    def test_query_order_independent(self):
        pts = np.random.default_rng(0).uniform(-30, 30, size=(200, 2))
        e1, e2 = Environment(spec(4)), Environment(spec(4))
        v1 = [potential(e1, p) for p in pts]
        v2 = [potential(e2, p) for p in pts[::-1]][::-1]
        assert v1 == v2

    def test_without_atoms_in_ball(self, env7):
        cleared = env7.without_atoms_in_ball([1.0, 1.0], 3.0)
        assert len(cleared.atoms_near([1.0, 1.0], 2.999)) == 0
        far = np.array([10.0, -8.0])
        assert np.array_equal(cleared.atoms_near(far, 2.0), env7.atoms_near(far, 2.0))


class TestSnapshots:
    def test_round_trip(self, env7, tmp_path):
        path = snapshot(env7, ([-10, -10], [10, 10]), tmp_path / "e.jsonl")
        back = restore(path)
        pts = np.random.default_rng(1).uniform(-10, 10, size=(1000, 2))
        assert [potential(env7, p) for p in pts] == [potential(back, p) for p in pts]

    def test_format(self, env7, tmp_path):
        path = snapshot(env7, ([-2, -2], [2, 2]), tmp_path / "e.jsonl")
        lines = path.read_text().splitlines()
        head = json.loads(lines[0])
        assert {"d", "nu", "alpha", "a", "master_seed", "cell_side"} <= set(head)
        for line in lines[1:]:
            rec = json.loads(line)
            assert set(rec) == {"cell", "atoms"} and rec["atoms"]
            cell_atoms = env7.cell_atoms(tuple(rec["cell"]))
            assert np.array_equal(np.asarray(rec["atoms"]), cell_atoms)

    def test_header_only_is_empty_inside_box(self, tmp_path):
        p = tmp_path / "h.jsonl"
        p.write_text('{"d":2,"nu":1,"alpha":1,"a":0.5,"master_seed":3,"cell_side":1,"box":[[-5,-5],[5,5]]}\n')
        env = restore(p)
        pts = np.random.default_rng(2).uniform(-4.4, 4.4, size=(200, 2))
        assert all(potential(env, q) == 0.0 for q in pts)

    def test_blank_round_trip(self, tmp_path):
        env = empty_environment(2).with_atoms([[0.0, 0.0]])
        back = restore(snapshot(env, ([-1, -1], [1, 1]), tmp_path / "b.jsonl"))
        assert potential(back, [0.1, 0.0]) == 1.0
        assert potential(back, [30.0, 30.0]) == 0.0

    @pytest.mark.parametrize("body,line", [
        ('{"d":2,"nu":1,"alpha":1,"a":0.5,"master_seed":3,"cell_side":1,"box":[[0,0],[1,1]]}\n{"cell":[0,0],"atoms":[[0.1,', 2),
        ('{"d":2,"nu":1}\n', 1),
        ('{"d":2,"nu":1,"alpha":1,"a":0.5,"master_seed":3,"cell_side":1,"box":[[0,0],[1,1]]}\n{"cell":[0],"atoms":[]}\n', 2),
        ('', 1),
    ])
    def test_parse_errors_name_line(self, tmp_path, body, line):
        p = tmp_path / "bad.jsonl"
        p.write_text(body)
        with pytest.raises(SnapshotError, match=f"line {line}"):
            restore(p)
