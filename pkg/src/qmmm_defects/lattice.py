"""Reference configurations, finite-difference stencils and stencil norms.

All lengths are in lattice units with nearest-neighbour spacing r0 = 1.
A configuration stores the integer lattice coordinates of every site so that
homogeneous offsets can be mapped back to site indices without floating-point
searches.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

_TOL = 1e-9


@dataclass(frozen=True)
class LatticeSpec:
    """Bravais lattice A.Z^d given by the columns of ``cell``."""

    cell: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        cell = np.array(self.cell, dtype=float)
        if cell.ndim != 2 or cell.shape[0] != cell.shape[1] or cell.shape[0] not in (2, 3):
            raise ValueError("cell must be a square 2x2 or 3x3 matrix")
        if abs(np.linalg.det(cell)) < 1e-12:
            raise ValueError("cell matrix is singular")
        cell.setflags(write=False)
        object.__setattr__(self, "cell", cell)

    @property
    def dim(self) -> int:
        return self.cell.shape[0]

    def __hash__(self):
        return hash((self.name, self.cell.tobytes()))

    def __eq__(self, other):
        return isinstance(other, LatticeSpec) and np.array_equal(self.cell, other.cell)

    @classmethod
    def triangular(cls, r0: float = 1.0) -> "LatticeSpec":
        return cls(r0 * np.array([[1.0, 0.5], [0.0, np.sqrt(3.0) / 2]]), "triangular")

    @classmethod
    def square(cls, r0: float = 1.0) -> "LatticeSpec":
        return cls(r0 * np.eye(2), "square")

    @classmethod
    def from_name(cls, name: str, r0: float = 1.0) -> "LatticeSpec":
        if name == "triangular":
            return cls.triangular(r0)
        if name == "square":
            return cls.square(r0)
        raise ValueError(f"unknown lattice type {name!r}")


def _integer_ball(spec: LatticeSpec, radius: float) -> np.ndarray:
    """Integer coordinates n with |A n| <= radius, ordered by radius then lexicographically."""
    inv = np.linalg.inv(spec.cell)
    nmax = int(np.ceil(radius * np.linalg.norm(inv, 2))) + 1
    rng = np.arange(-nmax, nmax + 1)
    grid = np.array(np.meshgrid(*([rng] * spec.dim), indexing="ij")).reshape(spec.dim, -1).T
    x = grid @ spec.cell.T
    r = np.linalg.norm(x, axis=1)
    keep = r <= radius + _TOL
    grid, r = grid[keep], r[keep]
    keys = [grid[:, k] for k in range(spec.dim - 1, -1, -1)] + [np.round(r, 9)]
    return grid[np.lexsort(keys)]


def lattice_offsets(spec: LatticeSpec, radius: float) -> np.ndarray:
    """Nonzero lattice vectors with |rho| <= radius in deterministic order."""
    ints = _integer_ball(spec, radius)
    ints = ints[np.any(ints != 0, axis=1)]
    return ints @ spec.cell.T


class ReferenceConfig:
    """Finite (possibly defective) reference configuration.

    ``ints`` holds integer lattice coordinates of the sites; ``positions`` are
    ``A @ ints`` for every site of the shipped defects.
    """

    def __init__(self, spec: LatticeSpec, ints: np.ndarray, R_DOM: float,
                 homogeneous: bool = True, R_DEF: float = 0.0,
                 removed: list | None = None, center=None, defect: dict | None = None):
        self.spec = spec
        self.ints = np.asarray(ints, dtype=np.int64).reshape(-1, spec.dim)
        self.positions = self.ints @ spec.cell.T
        self.positions.setflags(write=False)
        self.ints.setflags(write=False)
        self.R_DOM = float(R_DOM)
        self.homogeneous = homogeneous
        self.R_DEF = float(R_DEF)
        self.removed = [tuple(int(v) for v in r) for r in (removed or [])]
        self.center = np.zeros(spec.dim) if center is None else np.asarray(center, float)
        self.defect = dict(defect or {"type": "none"})
        self._lo = self.ints.min(axis=0) if len(self.ints) else np.zeros(spec.dim, np.int64)
        hi = self.ints.max(axis=0) if len(self.ints) else np.zeros(spec.dim, np.int64)
        self._grid = -np.ones(tuple(hi - self._lo + 1), dtype=np.int64)
        self._grid[tuple((self.ints - self._lo).T)] = np.arange(len(self.ints))

    @property
    def n_sites(self) -> int:
        return len(self.ints)

    @property
    def dim(self) -> int:
        return self.spec.dim

    def __len__(self):
        return self.n_sites

    def lookup(self, ints: np.ndarray) -> np.ndarray:
        """Site indices for integer coordinates (any leading shape); -1 when absent."""
        ints = np.asarray(ints, dtype=np.int64)
        shp = ints.shape[:-1]
        flat = ints.reshape(-1, self.dim) - self._lo
        out = -np.ones(len(flat), dtype=np.int64)
        ok = np.all((flat >= 0) & (flat < np.array(self._grid.shape)), axis=1)
        out[ok] = self._grid[tuple(flat[ok].T)]
        return out.reshape(shp)

    def index_of(self, point, tol: float = 1e-8):
        """Index of the site located at ``point`` or None."""
        n = np.linalg.solve(self.spec.cell, np.asarray(point, float))
        nr = np.round(n)
        if np.max(np.abs(nr - n)) > tol:
            return None
        idx = int(self.lookup(nr.astype(np.int64)))
        return None if idx < 0 else idx

    def radii(self) -> np.ndarray:
        return np.linalg.norm(self.positions - self.center, axis=1)


def build_lattice(spec: LatticeSpec, R_DOM: float) -> ReferenceConfig:
    """All sites of A.Z^d inside the closed ball of radius R_DOM."""
    if not R_DOM >= 0:
        raise ValueError("R_DOM must be nonnegative")
    return ReferenceConfig(spec, _integer_ball(spec, R_DOM), R_DOM)


def apply_vacancy(config: ReferenceConfig, center) -> ReferenceConfig:
    """Remove the site at ``center``; the defect core radius becomes r0."""
    idx = config.index_of(center)
    if idx is None:
        raise ValueError(f"vacancy centre {center} is not a lattice site")
    keep = np.ones(config.n_sites, bool)
    keep[idx] = False
    r0 = float(np.min(np.linalg.norm(lattice_offsets(config.spec, 2.0), axis=1)))
    return ReferenceConfig(
        config.spec, config.ints[keep], config.R_DOM, homogeneous=False,
        R_DEF=r0, removed=config.removed + [tuple(config.ints[idx])],
        center=config.positions[idx].copy(),
        defect={"type": "vacancy", "site": tuple(int(v) for v in config.ints[idx])},
    )


def check_rc(config: ReferenceConfig) -> bool:
    """Sites outside B_{R_DEF} coincide with the homogeneous enumeration."""
    hom = build_lattice(config.spec, config.R_DOM)
    outside = lambda c: {tuple(v) for v, x in zip(c.ints, c.positions)
                         if np.linalg.norm(x - config.center) > config.R_DEF + _TOL}
    if outside(hom) != outside(config):
        return False
    return len({tuple(v) for v in config.ints}) == config.n_sites


@dataclass
class DisplacementField:
    """Per-site displacement vectors with the frozen far-field mask."""

    u: np.ndarray
    frozen: np.ndarray = field(default=None)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        if self.frozen is None:
            self.frozen = np.zeros(len(self.u), bool)
        self.frozen = np.asarray(self.frozen, bool)
        if self.frozen.shape != (len(self.u),):
            raise ValueError("frozen mask has wrong length")
        if not np.all(np.isfinite(self.u)):
            raise ValueError("displacements must be finite")
        if np.any(self.u[self.frozen] != 0):
            raise ValueError("frozen sites must carry zero displacement")

    @classmethod
    def zeros(cls, config: ReferenceConfig, frozen=None):
        return cls(np.zeros((config.n_sites, config.dim)), frozen)


@dataclass(frozen=True)
class NeighborTable:
    R_cut: float
    neighbors: tuple  # per site: array of neighbour indices
    offsets: tuple  # per site: array of offset vectors m - l

    def is_symmetric(self) -> bool:
        sets = [set(n.tolist()) for n in self.neighbors]
        return all(i in sets[j] for i, s in enumerate(sets) for j in s)


def build_neighbor_table(config: ReferenceConfig, R_cut: float) -> NeighborTable:
    x = config.positions
    pairs = cKDTree(x).query_pairs(R_cut + _TOL, output_type="ndarray")
    i = np.concatenate([pairs[:, 0], pairs[:, 1]]) if len(pairs) else np.zeros(0, int)
    j = np.concatenate([pairs[:, 1], pairs[:, 0]]) if len(pairs) else np.zeros(0, int)
    order = np.lexsort((j, i))
    i, j = i[order], j[order]
    split = np.searchsorted(i, np.arange(config.n_sites + 1))
    nbrs = tuple(j[split[k]:split[k + 1]] for k in range(config.n_sites))
    offs = tuple(x[n] - x[k] for k, n in enumerate(nbrs))
    return NeighborTable(float(R_cut), nbrs, offs)


@dataclass(frozen=True)
class StencilView:
    center: int
    rho: np.ndarray  # (n, d) offsets
    Du: np.ndarray  # (n, d) finite differences u(l + rho) - u(l)


def stencil_view(config: ReferenceConfig, u: np.ndarray, site: int, R_cut: float) -> StencilView:
    """Finite-difference stencil of ``u`` at ``site`` over present neighbours within R_cut."""
    rho = lattice_offsets(config.spec, R_cut)
    idx = config.lookup(config.ints[site] + np.rint(np.linalg.solve(config.spec.cell, rho.T).T).astype(np.int64))
    ok = idx >= 0
    u = np.asarray(u, float)
    return StencilView(site, rho[ok], u[idx[ok]] - u[site])


@lru_cache(maxsize=None)
def _minimal_generators_cached(cell_bytes: bytes, dim: int) -> np.ndarray:
    cell = np.frombuffer(cell_bytes).reshape(dim, dim)
    best, best_key = None, None
    for entries in itertools.product(range(-2, 3), repeat=dim * dim):
        B = np.array(entries, dtype=float).reshape(dim, dim)
        if abs(abs(np.linalg.det(B)) - 1) > 1e-9:
            continue
        key = (round(float(np.abs(cell @ B).sum()), 9), entries)
        if best_key is None or key < best_key:
            best, best_key = B, key
    return best.astype(np.int64)


def minimal_generators(spec: LatticeSpec) -> np.ndarray:
    """Unimodular B (entries in [-2, 2]) minimising the l1 norm of A B."""
    return _minimal_generators_cached(spec.cell.tobytes(), spec.dim)


def nn_offsets_int(spec: LatticeSpec) -> np.ndarray:
    """Integer offsets +-B e_i spanning the nearest-neighbour stencil N(l) - l."""
    B = minimal_generators(spec)
    return np.concatenate([B.T, -B.T])


def nn_table(config: ReferenceConfig) -> np.ndarray:
    """(N, 2d) indices of N(l); -1 marks neighbours missing from the domain."""
    return config.lookup(config.ints[:, None, :] + nn_offsets_int(config.spec)[None])


def nearest_neighbor_set(config: ReferenceConfig, site: int):
    """Return (present neighbour indices, missing flag)."""
    row = nn_table(config)[site]
    return row[row >= 0], bool(np.any(row < 0))


def site_norms_nn(config: ReferenceConfig, u: np.ndarray) -> np.ndarray:
    """|Du(l)|_N for every site; missing neighbours are skipped."""
    u = np.asarray(u, float)
    tab = nn_table(config)
    diff = u[np.where(tab >= 0, tab, 0)] - u[:, None, :]
    diff[tab < 0] = 0.0
    return np.sqrt(np.einsum("nkd,nkd->n", diff, diff))


def stencil_norm_nn(config: ReferenceConfig, u: np.ndarray, site: int) -> float:
    return float(site_norms_nn(config, u)[site])


def norm_nn(config: ReferenceConfig, u: np.ndarray, mask=None) -> float:
    """Global norm ||Du||_{l2_N}, optionally summed over a site mask only."""
    s = site_norms_nn(config, u)
    if mask is not None:
        s = s[np.asarray(mask, bool)]
    return float(np.sqrt(np.sum(s * s)))


def weighted_radius(gamma: float, cutoff_weight: float = 1e-16) -> float:
    return -np.log(cutoff_weight) / (2.0 * gamma)


def stencil_norm_weighted(config: ReferenceConfig, u: np.ndarray, site: int, gamma: float) -> float:
    """(sum_rho exp(-2 gamma |rho|) |D_rho u(l)|^2)^(1/2) over all other sites."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    u = np.asarray(u, float)
    rho = config.positions - config.positions[site]
    r = np.linalg.norm(rho, axis=1)
    w = np.exp(-2.0 * gamma * r)
    keep = (r > 0) & (w >= 1e-16)
    d = u[keep] - u[site]
    return float(np.sqrt(np.sum(w[keep] * np.einsum("nd,nd->n", d, d))))


def norm_weighted(config: ReferenceConfig, u: np.ndarray, gamma: float) -> float:
    vals = [stencil_norm_weighted(config, u, i, gamma) for i in range(config.n_sites)]
    return float(np.sqrt(np.sum(np.square(vals))))


def error_norm(config: ReferenceConfig, u_ref: np.ndarray, u_h: np.ndarray, mask=None) -> float:
    """||D(u_ref - u_h)||_{l2_N}."""
    u_ref, u_h = np.asarray(u_ref, float), np.asarray(u_h, float)
    if u_ref.shape != u_h.shape or len(u_ref) != config.n_sites:
        raise ValueError("displacement fields do not live on the same configuration")
    return norm_nn(config, u_ref - u_h, mask)


def check_admissible(x: np.ndarray, y: np.ndarray, m: float) -> bool:
    """True iff |y(l) - y(k)| > m |x(l) - x(k)| for all pairs of sites."""
    if m <= 0:
        raise ValueError("m must be positive")
    x, y = np.asarray(x, float), np.asarray(y, float)
    n = len(x)
    if n < 2:
        return True
    if m < 1:
        # pairs further apart than 2 max|u| / (1 - m) satisfy the bound automatically
        umax = float(np.max(np.linalg.norm(y - x, axis=1)))
        reach = 2.0 * umax / (1.0 - m) + 1.0
        pairs = cKDTree(x).query_pairs(reach, output_type="ndarray")
        if len(pairs) == 0:
            return True
        i, j = pairs[:, 0], pairs[:, 1]
        return bool(np.all(np.linalg.norm(y[i] - y[j], axis=1) > m * np.linalg.norm(x[i] - x[j], axis=1)))
    for start in range(0, n, 512):
        dy = np.linalg.norm(y[start:start + 512, None] - y[None], axis=2)
        dx = np.linalg.norm(x[start:start + 512, None] - x[None], axis=2)
        off = dx > 0
        if np.any(dy[off] <= m * dx[off]):
            return False
    return True
