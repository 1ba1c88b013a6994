"""Poissonian trap fields, generated lazily cell by cell.

The atoms of cell ``c`` are a pure function of ``(master_seed, c)``: the cell
key is a SplitMix64 chain over the master seed, the environment purpose tag
and the cell coordinates, and a SplitMix64 sequence seeded with that key
yields first the Poisson count and then the atom coordinates. Any region of
space can therefore be materialized in any order with identical results.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numba import njit

from .rng import GOLDEN, PURPOSE_ENV, as_u64, chain, mix64, to_unit

__all__ = [
    "KillingFunction",
    "EnvironmentSpec",
    "CellAtoms",
    "Environment",
    "Region",
    "SnapshotError",
    "atoms_in_cell",
    "atoms_near",
    "potential",
    "in_trap",
    "snapshot",
    "restore",
]

_POISSON_PIECE = 30.0


@dataclass(frozen=True)
class KillingFunction:
    """``W = alpha`` on the closed ball of radius ``a``, zero elsewhere."""

    alpha: float
    a: float
    kind: str = "indicator"

    def __post_init__(self):
        if self.kind != "indicator":
            raise ValueError(f"unsupported killing function kind {self.kind!r}")
        if not self.alpha > 0:
            raise ValueError(f"killing amplitude must be > 0, got {self.alpha!r}")
        if not self.a > 0:
            raise ValueError(f"support radius must be > 0, got {self.a!r}")


@dataclass(frozen=True)
class EnvironmentSpec:
    d: int
    nu: float
    killing: KillingFunction
    master_seed: int = 0
    cell_side: float | None = None

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"dimension must be an integer >= 1, got {self.d!r}")
        if not self.nu > 0:
            raise ValueError(f"intensity must be > 0, got {self.nu!r}")
        if self.cell_side is None:
            object.__setattr__(self, "cell_side", max(1.0, 2.0 * self.killing.a))
        if not self.cell_side >= 2.0 * self.killing.a:
            raise ValueError("cell_side must be at least twice the trap support radius")
        object.__setattr__(self, "master_seed", int(self.master_seed) & ((1 << 64) - 1))

    @property
    def alpha(self) -> float:
        return self.killing.alpha

    @property
    def a(self) -> float:
        return self.killing.a

    @property
    def cell_mean(self) -> float:
        return self.nu * self.cell_side**self.d


@dataclass(frozen=True)
class CellAtoms:
    cell_index: tuple[int, ...]
    atoms: np.ndarray


# --------------------------------------------------------------------------
# generation kernels


@njit(cache=True)
def _poisson(key, start, mean):
    """Poisson(mean) by inversion, summed over pieces of mean <= 30; returns (count, draws used)."""
    pieces = max(1, int(math.ceil(mean / _POISSON_PIECE)))
    m = mean / pieces
    total = 0
    j = start
    for _ in range(pieces):
        u = to_unit(mix64(key + np.uint64(j) * GOLDEN))
        j += 1
        k = 0
        p = math.exp(-m)
        F = p
        while u > F and k < 10000:
            k += 1
            p *= m / k
            F += p
        total += k
    return total, j


@njit(cache=True)
def _cell_key(master, cell):
    h = chain(mix64(master), np.uint64(PURPOSE_ENV))
    for i in range(cell.shape[0]):
        h = chain(h, np.uint64(cell[i]))
    return h


@njit(cache=True)
def _generate(master, cells, mean, side):
    n = cells.shape[0]
    d = cells.shape[1]
    counts = np.empty(n, dtype=np.int64)
    keys = np.empty(n, dtype=np.uint64)
    nexts = np.empty(n, dtype=np.int64)
    for c in range(n):
        key = _cell_key(master, cells[c])
        keys[c] = key
        cnt, j = _poisson(key, 0, mean)
        counts[c] = cnt
        nexts[c] = j
    offsets = np.zeros(n + 1, dtype=np.int64)
    for c in range(n):
        offsets[c + 1] = offsets[c] + counts[c]
    atoms = np.empty((offsets[n], d), dtype=np.float64)
    for c in range(n):
        key = keys[c]
        j = nexts[c]
        for m in range(offsets[c], offsets[c + 1]):
            for i in range(d):
                u = to_unit(mix64(key + np.uint64(j) * GOLDEN))
                j += 1
                lo = cells[c, i] * side
                x = lo + u * side
                if x >= lo + side:
                    x = lo
                atoms[m, i] = x
    return offsets, atoms


# kernels used by the particle engine ---------------------------------------


@njit(cache=True, inline="always")
def region_flat(x, lo, shape, strides, side, off):
    """Flat index of the cell holding ``x`` shifted by cell offset ``off``; -1 if outside."""
    flat = 0
    for i in range(x.shape[0]):
        c = int(math.floor(x[i] / side)) + off[i] - lo[i]
        if c < 0 or c >= shape[i]:
            return -1
        flat += c * strides[i]
    return flat


@njit(cache=True)
def count_within(x, lo, shape, strides, side, offsets, atoms, nbr, r2):
    """Number of atoms with squared distance ``<= r2`` from ``x``."""
    d = x.shape[0]
    total = 0
    for q in range(nbr.shape[0]):
        f = region_flat(x, lo, shape, strides, side, nbr[q])
        if f < 0:
            continue
        for m in range(offsets[f], offsets[f + 1]):
            s = 0.0
            for i in range(d):
                dx = atoms[m, i] - x[i]
                s += dx * dx
            if s <= r2:
                total += 1
    return total


@njit(cache=True)
def any_closer(x, lo, shape, strides, side, offsets, atoms, nbr, r2):
    """True if some atom has squared distance ``< r2`` from ``x``."""
    d = x.shape[0]
    for q in range(nbr.shape[0]):
        f = region_flat(x, lo, shape, strides, side, nbr[q])
        if f < 0:
            continue
        for m in range(offsets[f], offsets[f + 1]):
            s = 0.0
            for i in range(d):
                dx = atoms[m, i] - x[i]
                s += dx * dx
            if s < r2:
                return True
    return False


@njit(cache=True, inline="always")
def inside_region(x, lo, shape, side, margin):
    for i in range(x.shape[0]):
        if x[i] - margin < lo[i] * side or x[i] + margin >= (lo[i] + shape[i]) * side:
            return False
    return True


def neighbor_offsets(d: int, reach: int) -> np.ndarray:
    """All integer offsets in ``[-reach, reach]^d`` as an ``(M, d)`` int64 array."""
    axes = [np.arange(-reach, reach + 1, dtype=np.int64)] * d
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


@dataclass
class Region:
    """Dense CSR view of all atoms in a box of cells, consumed by numba kernels."""

    lo: np.ndarray
    shape: np.ndarray
    side: float
    offsets: np.ndarray
    atoms: np.ndarray
    strides: np.ndarray = field(init=False)

    def __post_init__(self):
        d = len(self.shape)
        strides = np.ones(d, dtype=np.int64)
        for i in range(d - 2, -1, -1):
            strides[i] = strides[i + 1] * self.shape[i + 1]
        self.strides = strides

    def covers(self, lo_cell: np.ndarray, hi_cell: np.ndarray) -> bool:
        return bool(np.all(self.lo <= lo_cell) and np.all(self.lo + self.shape > hi_cell))

    def args(self):
        return self.lo, self.shape, self.strides, self.side, self.offsets, self.atoms


# --------------------------------------------------------------------------


class Environment:
    """A Poissonian trap field with optional frozen (overridden) cells.

    Cells listed in ``overrides`` take their atoms from there instead of the
    seeded generator; this is how restored snapshots and engineered
    environments are represented. All queries are read-only.
    """

    def __init__(self, spec: EnvironmentSpec, overrides: dict | None = None, frozen_box=None,
                 blank: bool = False):
        self.spec = spec
        # blank: cells outside ``overrides`` hold no atoms instead of Poisson draws
        self.blank = blank
        self.overrides: dict[tuple[int, ...], np.ndarray] = dict(overrides or {})
        self.frozen_box = frozen_box
        self._cache: dict[tuple[int, ...], np.ndarray] = {}
        self._region: Region | None = None

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        state["_region"] = None
        return state

    @property
    def d(self) -> int:
        return self.spec.d

    def cell_of(self, x) -> tuple[int, ...]:
        side = self.spec.cell_side
        return tuple(int(math.floor(v / side)) for v in np.asarray(x, dtype=float))

    def _generate(self, cells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        spec = self.spec
        if self.blank:
            return np.zeros(len(cells) + 1, dtype=np.int64), np.empty((0, self.d))
        return _generate(as_u64(spec.master_seed), cells.astype(np.int64), spec.cell_mean, float(spec.cell_side))

    def cell_atoms(self, cell: Sequence[int]) -> np.ndarray:
        cell = tuple(int(c) for c in cell)
        if len(cell) != self.d:
            raise ValueError("cell index has wrong dimension")
        if cell in self.overrides:
            return self.overrides[cell]
        hit = self._cache.get(cell)
        if hit is None:
            _, atoms = self._generate(np.array([cell], dtype=np.int64))
            hit = atoms
            hit.setflags(write=False)
            self._cache[cell] = hit
        return hit

    def region(self, lo_cell, hi_cell) -> Region:
        """Materialize all cells with indices in ``[lo_cell, hi_cell]`` (inclusive)."""
        lo = np.asarray(lo_cell, dtype=np.int64)
        hi = np.asarray(hi_cell, dtype=np.int64)
        old = self._region
        if old is not None:
            if old.covers(lo, hi):
                return old
            ulo = np.minimum(lo, old.lo)
            uhi = np.maximum(hi, old.lo + old.shape - 1)
            if np.prod(uhi - ulo + 1) <= 4 * (np.prod(hi - lo + 1) + np.prod(old.shape)):
                lo, hi = ulo, uhi
        shape = hi - lo + 1
        cells = np.indices(tuple(shape)).reshape(self.d, -1).T + lo
        offsets, atoms = self._generate(cells)
        if self.overrides:
            chunks = []
            for c in range(cells.shape[0]):
                key = tuple(int(v) for v in cells[c])
                if key in self.overrides:
                    chunks.append(np.asarray(self.overrides[key], dtype=float).reshape(-1, self.d))
                else:
                    chunks.append(atoms[offsets[c]:offsets[c + 1]])
            counts = np.array([len(ch) for ch in chunks], dtype=np.int64)
            offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
            atoms = np.concatenate(chunks, axis=0) if len(chunks) else np.empty((0, self.d))
        reg = Region(lo=lo, shape=shape, side=float(self.spec.cell_side), offsets=offsets,
                     atoms=np.ascontiguousarray(atoms, dtype=np.float64))
        self._region = reg
        return reg

    def region_around(self, center, half_width: float) -> Region:
        side = self.spec.cell_side
        c = np.asarray(center, dtype=float)
        lo = np.floor((c - half_width) / side).astype(np.int64)
        hi = np.floor((c + half_width) / side).astype(np.int64)
        return self.region(lo, hi)

    def atoms_in_box(self, lo, hi) -> np.ndarray:
        """All atoms of the cells meeting the box ``[lo, hi]`` (not clipped to the box)."""
        side = self.spec.cell_side
        lo_c = np.floor(np.asarray(lo, dtype=float) / side).astype(np.int64)
        hi_c = np.floor(np.asarray(hi, dtype=float) / side).astype(np.int64)
        reg = self.region(lo_c, hi_c)
        if np.array_equal(reg.lo, lo_c) and np.array_equal(reg.shape, hi_c - lo_c + 1):
            return reg.atoms
        # slice the relevant cells out of a larger cached region
        cells = np.indices(tuple(hi_c - lo_c + 1)).reshape(self.d, -1).T + lo_c
        flat = ((cells - reg.lo) * reg.strides).sum(axis=1)
        parts = [reg.atoms[reg.offsets[f]:reg.offsets[f + 1]] for f in flat]
        return np.concatenate(parts, axis=0) if parts else np.empty((0, self.d))

    def atoms_near(self, x, r: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if r < 0:
            raise ValueError("radius must be >= 0")
        cand = self.atoms_in_box(x - r, x + r)
        if len(cand) == 0:
            return cand.reshape(0, self.d)
        dist = np.sqrt(((cand - x) ** 2).sum(axis=1))
        keep = dist <= r
        order = np.argsort(dist[keep], kind="stable")
        return cand[keep][order]

    def nearest_distance(self, x, search: float | None = None) -> float:
        """Distance to the nearest atom, or ``inf`` if none within ``search``."""
        x = np.asarray(x, dtype=float)
        side = self.spec.cell_side
        reach = side if search is None else search
        while True:
            cand = self.atoms_in_box(x - reach, x + reach)
            if len(cand):
                dmin = float(np.sqrt(((cand - x) ** 2).sum(axis=1)).min())
                if dmin <= reach:
                    return dmin
            if search is not None:
                return math.inf
            reach *= 2.0
            if reach > 1e6 * side:
                return math.inf

    def potential(self, x) -> float:
        return self.spec.alpha * len(self.atoms_near(x, self.spec.a))

    def in_trap(self, x) -> bool:
        return len(self.atoms_near(x, self.spec.a)) > 0

    def without_atoms_in_ball(self, center, radius: float) -> "Environment":
        """Copy of this environment with every atom inside ``B(center, radius)`` deleted."""
        center = np.asarray(center, dtype=float)
        side = self.spec.cell_side
        lo = np.floor((center - radius) / side).astype(np.int64)
        hi = np.floor((center + radius) / side).astype(np.int64)
        overrides = dict(self.overrides)
        for cell in np.indices(tuple(hi - lo + 1)).reshape(self.d, -1).T + lo:
            key = tuple(int(v) for v in cell)
            atoms = self.cell_atoms(key)
            if len(atoms):
                keep = np.sqrt(((atoms - center) ** 2).sum(axis=1)) >= radius
                atoms = atoms[keep]
            overrides[key] = np.array(atoms, dtype=float).reshape(-1, self.d)
        return Environment(self.spec, overrides, self.frozen_box, self.blank)

    def with_atoms(self, points) -> "Environment":
        """Copy of this environment with extra atoms inserted."""
        overrides = dict(self.overrides)
        pts = np.asarray(points, dtype=float).reshape(-1, self.d)
        for p in pts:
            key = self.cell_of(p)
            cur = overrides.get(key, self.cell_atoms(key))
            overrides[key] = np.vstack([np.asarray(cur, dtype=float).reshape(-1, self.d), p])
        return Environment(self.spec, overrides, self.frozen_box, self.blank)


def _as_env(env) -> Environment:
    if isinstance(env, Environment):
        return env
    if isinstance(env, EnvironmentSpec):
        return Environment(env)
    raise TypeError(f"expected Environment or EnvironmentSpec, got {type(env).__name__}")


def empty_environment(d: int, alpha: float = 1.0, a: float = 0.5, nu: float = 1.0) -> Environment:
    """An environment with no atoms; ``nu`` only feeds the derived constants."""
    spec = EnvironmentSpec(d=d, nu=nu, killing=KillingFunction(alpha, a), master_seed=0)
    return Environment(spec, blank=True)


def atoms_in_cell(spec, cell: Sequence[int]) -> CellAtoms:
    env = _as_env(spec)
    cell = tuple(int(c) for c in cell)
    return CellAtoms(cell, np.array(env.cell_atoms(cell)))


def atoms_near(env, x, r: float) -> np.ndarray:
    return _as_env(env).atoms_near(x, r)


def potential(env, x) -> float:
    return _as_env(env).potential(x)


def in_trap(env, x) -> bool:
    return _as_env(env).in_trap(x)


# --------------------------------------------------------------------------
# snapshots


class SnapshotError(ValueError):
    pass


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _fmt_list(vals: Iterable[float]) -> str:
    return "[" + ",".join(_fmt(v) for v in vals) + "]"


def snapshot(env, box: tuple[Sequence[float], Sequence[float]], path) -> Path:
    """Write every nonempty cell meeting ``box = (lo, hi)`` as JSONL."""
    env = _as_env(env)
    spec = env.spec
    lo = np.asarray(box[0], dtype=float)
    hi = np.asarray(box[1], dtype=float)
    if lo.shape != (spec.d,) or hi.shape != (spec.d,) or not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
        raise ValueError("box must be a pair of finite d-vectors")
    side = spec.cell_side
    lo_c = np.floor(lo / side).astype(np.int64)
    hi_c = np.floor(hi / side).astype(np.int64)
    lines = [
        "{"
        f'"d":{spec.d},"nu":{_fmt(spec.nu)},"alpha":{_fmt(spec.alpha)},"a":{_fmt(spec.a)},'
        f'"master_seed":{spec.master_seed},"cell_side":{_fmt(side)},'
        f'"box":[{_fmt_list(lo)},{_fmt_list(hi)}]'
        + (',"blank":true' if env.blank else "")
        + "}"
    ]
    for cell in np.indices(tuple(hi_c - lo_c + 1)).reshape(spec.d, -1).T + lo_c:
        key = tuple(int(v) for v in cell)
        atoms = env.cell_atoms(key)
        if len(atoms) == 0:
            continue
        body = ",".join(_fmt_list(p) for p in atoms)
        lines.append('{"cell":[' + ",".join(str(c) for c in key) + '],"atoms":[' + body + "]}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


_HEADER_KEYS = {"d", "nu", "alpha", "a", "master_seed", "cell_side", "box"}


def restore(path) -> Environment:
    """Read a snapshot; cells inside its box are frozen to the recorded atoms."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise SnapshotError("line 1: empty snapshot file")
    records = []
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SnapshotError(f"line {no}: malformed JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise SnapshotError(f"line {no}: expected a JSON object")
        records.append((no, rec))
    no, head = records[0]
    missing = _HEADER_KEYS - set(head)
    if missing:
        raise SnapshotError(f"line {no}: header missing {sorted(missing)}")
    try:
        spec = EnvironmentSpec(
            d=int(head["d"]), nu=float(head["nu"]),
            killing=KillingFunction(float(head["alpha"]), float(head["a"])),
            master_seed=int(head["master_seed"]), cell_side=float(head["cell_side"]),
        )
        box_lo = np.asarray(head["box"][0], dtype=float)
        box_hi = np.asarray(head["box"][1], dtype=float)
        if box_lo.shape != (spec.d,) or box_hi.shape != (spec.d,):
            raise ValueError("box has wrong dimension")
    except (ValueError, TypeError, IndexError) as exc:
        raise SnapshotError(f"line {no}: bad header ({exc})") from None
    side = spec.cell_side
    lo_c = np.floor(box_lo / side).astype(np.int64)
    hi_c = np.floor(box_hi / side).astype(np.int64)
    overrides: dict[tuple[int, ...], np.ndarray] = {}
    for cell in np.indices(tuple(hi_c - lo_c + 1)).reshape(spec.d, -1).T + lo_c:
        overrides[tuple(int(v) for v in cell)] = np.empty((0, spec.d))
    for no, rec in records[1:]:
        if set(rec) != {"cell", "atoms"}:
            raise SnapshotError(f"line {no}: cell record needs exactly 'cell' and 'atoms'")
        try:
            key = tuple(int(v) for v in rec["cell"])
            atoms = np.asarray(rec["atoms"], dtype=float).reshape(-1, spec.d)
            if len(key) != spec.d:
                raise ValueError("cell index has wrong dimension")
            if any(len(p) != spec.d for p in rec["atoms"]):
                raise ValueError("atom has wrong dimension")
        except (ValueError, TypeError) as exc:
            raise SnapshotError(f"line {no}: bad cell record ({exc})") from None
        overrides[key] = atoms
    return Environment(spec, overrides, frozen_box=(box_lo, box_hi), blank=bool(head.get("blank", False)))
