"""Matching observations, weighted matching errors and least-squares fitting of the MLIP.

Observations are derivatives at the homogeneous lattice:

* ``E`` order j: d^j V^h_{,rho_1..rho_j}(0) over stencil components,
* ``F`` order j: d^j F^h_{0; l_1..l_j}(0), force on the centre site,
* ``V`` order j: d^j_F W_cb(I) components.

Each observation is stored once per permutation class (sorted index tuple)
together with its multiplicity, so weighted sums over all tuples are exact.
"""
from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .cb_taylor import (VIRIAL_STEPS, cb_derivative, force_site_offsets, lift_force_tables,
                        multiplicity, site_tables)
from .lattice import LatticeSpec, lattice_offsets
from .mlip import BasisSpec, BasisStencil, MLIPPotential, observation_hash

DEFAULT_GAMMA = 0.5
RRQR_TOL = 1e-5

ENERGY_WEIGHTS = {
    "K_E=2": {("E", 0): 1.0, ("E", 1): 10.0, ("E", 2): 500.0},
    "K_E=3": {("E", 0): 1.0, ("E", 1): 10.0, ("E", 2): 1000.0, ("E", 3): 100.0},
    "K_E=2&virial": {("E", 0): 1.0, ("E", 1): 10.0, ("E", 2): 1000.0, ("V", 3): 100.0},
}
FORCE_WEIGHTS = {
    "K_F=1": {("F", 0): 1.0, ("F", 1): 100.0},
    "K_F=2": {("F", 0): 1.0, ("F", 1): 1000.0, ("F", 2): 100.0},
    "K_F=1&virial": {("F", 0): 1.0, ("F", 1): 1000.0, ("V", 3): 100.0},
    "K_F=2&virial": {("F", 0): 1.0, ("F", 1): 1000.0, ("F", 2): 200.0, ("V", 4): 500.0},
}


def scheme_weights(K_E=None, K_F=None, virial=False) -> dict:
    """Default loss weights W_j keyed by (kind, derivative order)."""
    if (K_E is None) == (K_F is None):
        raise ValueError("give exactly one of K_E, K_F")
    name = f"K_E={K_E}" if K_E is not None else f"K_F={K_F}"
    table = ENERGY_WEIGHTS if K_E is not None else FORCE_WEIGHTS
    key = name + ("&virial" if virial else "")
    if key not in table:
        raise ValueError(f"no default weights for scheme {key}")
    return dict(table[key])


def scheme_blocks(K_E=None, K_F=None, virial=False):
    """(kind, order) blocks of a training set."""
    if K_E is not None:
        blocks = [("E", j) for j in range(K_E + 1)]
        if virial:
            blocks.append(("V", K_E + 1))
    else:
        blocks = [("F", j) for j in range(K_F + 1)]
        if virial:
            blocks.append(("V", K_F + 2))
    return blocks


def locality_weight(vectors: np.ndarray, gamma: float) -> np.ndarray:
    """w(rho_1..rho_j) = prod_i exp(-2 gamma |rho_i|) for rows of stacked vectors (m, j, d)."""
    return np.exp(-2.0 * gamma * np.linalg.norm(vectors, axis=-1).sum(-1))


# ------------------------------------------------------------------ containers


@dataclass
class ObservationBlock:
    kind: str
    order: int
    keys: np.ndarray  # (m, arity) integer index tuples
    target: np.ndarray  # (m,)
    w_inv: np.ndarray  # (m,)
    mult: np.ndarray  # (m,)
    W: float = 1.0

    def __len__(self):
        return len(self.target)


@dataclass
class ObservationSet:
    lattice: LatticeSpec
    offsets: np.ndarray
    gamma: float
    blocks: list = field(default_factory=list)

    @property
    def force_sites(self):
        return force_site_offsets(self.offsets, self.lattice)

    def block(self, kind, order):
        for b in self.blocks:
            if (b.kind, b.order) == (kind, order):
                return b
        raise KeyError((kind, order))

    def __len__(self):
        return sum(len(b) for b in self.blocks)

    def with_weights(self, weights: dict) -> "ObservationSet":
        blocks = [ObservationBlock(b.kind, b.order, b.keys, b.target, b.w_inv, b.mult,
                                   float(weights.get((b.kind, b.order), b.W))) for b in self.blocks]
        return ObservationSet(self.lattice, self.offsets, self.gamma, blocks)

    def fingerprint(self) -> str:
        return observation_hash([[b.kind, b.order, np.round(b.target, 12).tolist()] for b in self.blocks])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "order", "indices", "target", "w_inv", "W"])
            for b in self.blocks:
                for key, t, wi in zip(b.keys, b.target, b.w_inv):
                    w.writerow([b.kind, b.order, " ".join(map(str, key)), repr(float(t)), repr(float(wi)), b.W])


# --------------------------------------------------------------- site models


def site_potential_for(model, offsets: np.ndarray):
    """Site potential of ``model`` on ``offsets``; fixed-stencil potentials must match."""
    if hasattr(model, "site_potential"):
        return model.site_potential(offsets)
    if model.offsets.shape == offsets.shape and np.allclose(model.offsets, offsets):
        return model
    if hasattr(model, "with_offsets"):
        try:
            return model.with_offsets(offsets)
        except NotImplementedError:
            pass
    raise ValueError("model stencil does not match the observation stencil")


def _cb_function(model, lattice: LatticeSpec, R: float):
    """F -> W_cb(F) for scalar models or F -> B(F rho) for basis stencils."""
    offsets = lattice_offsets(lattice, R * 1.01)
    V = site_potential_for(model, offsets)
    rho = V.offsets

    def W(F):
        return V.site_energy(rho @ (F - np.eye(len(F))).T)

    return W


# ------------------------------------------------------------------- tables


def _sorted_keys(m: int, j: int) -> np.ndarray:
    if j == 0:
        return np.zeros((1, 0), np.int64)
    return np.array(list(itertools.combinations_with_replacement(range(m), j)), np.int64)


def energy_tables(sitepot, K: int) -> dict:
    """{0: V(0), j: table of shape (n*d,)*j + tail} for a (vector) site potential."""
    n, d = sitepot.offsets.shape
    out = {0: np.asarray(sitepot.site_energy(np.zeros((n, d))), float)}
    if K >= 1:
        for j, t in site_tables(sitepot, K).items():
            out[j] = t.reshape((n * d,) * j + t.shape[2 * j:])
    return out


def _energy_block(tables, j, offsets, gamma):
    n, d = offsets.shape
    keys = _sorted_keys(n * d, j)
    T = tables[j]
    vals = T[tuple(keys.T)] if j else T[None]
    rho = offsets[keys // d] if j else np.zeros((1, 0, d))
    return keys, vals, locality_weight(rho, gamma), multiplicity(keys) if j else np.ones(1, np.int64)


def _force_keys(M: int, d: int, j: int):
    comp = np.arange(d)
    if j == 0:
        return np.stack([comp], 1)
    tup = _sorted_keys(M * d, j)
    return np.array([[c, *t] for c in comp for t in tup], np.int64)


def force_tables(sitepot, lattice: LatticeSpec, K: int) -> dict:
    """{j: table (d, (M*d,)*j) + tail} of force derivatives of the centre site, j = 0..K."""
    n, d = sitepot.offsets.shape
    tabs = site_tables(sitepot, K + 1)
    sites, ft = lift_force_tables(tabs, sitepot.offsets, lattice, K)
    M = len(sites)
    tail = tabs[1].shape[2:]
    out = {0: np.zeros((d,) + tail)}
    for j in range(1, K + 1):
        out[j] = ft[j].reshape((d,) + (M * d,) * j + tail)
    return out


def _force_block(tables, j, sites, gamma):
    M, d = sites.shape
    keys = _force_keys(M, d, j)
    T = tables[j]
    vals = T[tuple(keys.T)]
    if j == 0:
        return keys, vals, np.ones(len(keys)), np.ones(len(keys), np.int64)
    vec = sites[keys[:, 1:] // d]
    return keys, vals, locality_weight(vec, gamma), multiplicity(keys[:, 1:])


def virial_tables(model, lattice: LatticeSpec, orders, R: float, steps=None) -> dict:
    steps = dict(VIRIAL_STEPS, **(steps or {}))
    W = _cb_function(model, lattice, R)
    d = lattice.dim
    out = {}
    for j in orders:
        T = cb_derivative(W, d, j, steps[j])
        out[j] = T.reshape((d * d,) * j + T.shape[2 * j:])
    return out


def _virial_block(tables, j, d):
    keys = _sorted_keys(d * d, j)
    vals = tables[j][tuple(keys.T)]
    return keys, vals, np.ones(len(keys)), multiplicity(keys)


# ------------------------------------------------------------- generation


def _generate(model, lattice, blocks, R_cut, gamma, weights=None):
    """Value tables (targets, or basis rows when model is a BasisStencil) for the given blocks."""
    offsets = lattice_offsets(lattice, R_cut)
    V = site_potential_for(model, offsets)
    d = lattice.dim
    kinds = {k for k, _ in blocks}
    out = []
    E = F = Vt = None
    if "E" in kinds:
        E = energy_tables(V, max(j for k, j in blocks if k == "E"))
    if "F" in kinds:
        F = force_tables(V, lattice, max(j for k, j in blocks if k == "F"))
    if "V" in kinds:
        Vt = virial_tables(model, lattice, [j for k, j in blocks if k == "V"], R_cut)
    sites = force_site_offsets(offsets, lattice)
    for kind, j in blocks:
        if kind == "E":
            keys, vals, w, mult = _energy_block(E, j, offsets, gamma)
        elif kind == "F":
            keys, vals, w, mult = _force_block(F, j, sites, gamma)
        elif kind == "V":
            keys, vals, w, mult = _virial_block(Vt, j, d)
        else:
            raise ValueError(kind)
        W = 1.0 if weights is None else float(weights.get((kind, j), 1.0))
        out.append(ObservationBlock(kind, j, keys, vals, 1.0 / w, mult, W))
    return ObservationSet(lattice, offsets, gamma, out)


def gen_energy_obs(model, lattice: LatticeSpec, K_E: int, R_cut: float = 2.5, gamma: float = DEFAULT_GAMMA,
                   weights=None) -> ObservationSet:
    if K_E > 3:
        raise ValueError("energy observations are supported for K_E <= 3")
    return _generate(model, lattice, [("E", j) for j in range(K_E + 1)], R_cut, gamma, weights)


def gen_force_obs(model, lattice: LatticeSpec, K_F: int, R_cut: float = 2.5, gamma: float = DEFAULT_GAMMA,
                  weights=None) -> ObservationSet:
    if K_F > 2:
        raise ValueError("force observations are supported for K_F <= 2")
    return _generate(model, lattice, [("F", j) for j in range(K_F + 1)], R_cut, gamma, weights)


def gen_virial_obs(model, lattice: LatticeSpec, K: int, R_cut: float = 2.5, weight: float = 1.0) -> ObservationSet:
    """Components of d^{K+1}_F W_cb(I) (unit locality weight)."""
    if K + 1 > 4:
        raise ValueError("virial observations are supported up to d^4_F W_cb")
    return _generate(model, lattice, [("V", K + 1)], R_cut, DEFAULT_GAMMA, {("V", K + 1): weight})


def gen_training_set(model, lattice: LatticeSpec, K_E=None, K_F=None, virial=False, R_cut=2.5,
                     gamma=DEFAULT_GAMMA, weights=None) -> ObservationSet:
    blocks = scheme_blocks(K_E, K_F, virial)
    w = scheme_weights(K_E, K_F, virial) if weights is None else weights
    return _generate(model, lattice, blocks, R_cut, gamma, w)


def merge(*sets: ObservationSet) -> ObservationSet:
    base = sets[0]
    return ObservationSet(base.lattice, base.offsets, base.gamma, [b for s in sets for b in s.blocks])


# ----------------------------------------------------------------- errors


@dataclass
class MatchErrors:
    eps: dict  # (kind, order) -> epsilon
    rrmse: dict  # (kind, order) -> relative error

    def __getitem__(self, key):
        return self.eps[key]

    def as_rows(self):
        return [{"kind": k, "order": j, "eps": self.eps[(k, j)], "rrmse": self.rrmse[(k, j)]}
                for k, j in sorted(self.eps)]


def _block_errors(ref: ObservationBlock, values: np.ndarray):
    diff = ref.target - values
    eps = math.sqrt(float(np.sum(ref.mult * ref.w_inv * diff * diff)))
    norm = math.sqrt(float(np.sum(ref.mult * ref.w_inv * ref.target * ref.target)))
    return eps, (eps / norm if norm > 0 else (0.0 if eps == 0 else math.inf))


def match_errors(model_ref, model_mm, lattice: LatticeSpec, blocks, R_cut: float = 2.5,
                 gamma: float = DEFAULT_GAMMA) -> MatchErrors:
    """eps_j = (sum |target_ref - target_mm|^2 w_j^{-1})^{1/2} and its relative version."""
    if not blocks:
        raise ValueError("empty observation set")
    ref = _generate(model_ref, lattice, blocks, R_cut, gamma)
    mm = _generate(model_mm, lattice, blocks, R_cut, gamma)
    eps, rel = {}, {}
    for a, b in zip(ref.blocks, mm.blocks):
        eps[(a.kind, a.order)], rel[(a.kind, a.order)] = _block_errors(a, b.target)
    return MatchErrors(eps, rel)


def errors_from_rows(obs: ObservationSet, rows: dict, c: np.ndarray) -> MatchErrors:
    eps, rel = {}, {}
    for b in obs.blocks:
        eps[(b.kind, b.order)], rel[(b.kind, b.order)] = _block_errors(b, rows[(b.kind, b.order)] @ c)
    return MatchErrors(eps, rel)


# ------------------------------------------------------------------ fitting


def design_rows(obs: ObservationSet, spec: BasisSpec) -> dict:
    """Per-block design matrices: the same derivative functionals applied to every basis function."""
    basis = BasisStencil(spec, obs.offsets)
    blocks = [(b.kind, b.order) for b in obs.blocks]
    R_cut = float(np.max(np.linalg.norm(obs.offsets, axis=1)))
    gen = _generate(basis, obs.lattice, blocks, R_cut, obs.gamma)
    return {(b.kind, b.order): b.target for b in gen.blocks}


def observation_row(spec: BasisSpec, obs: ObservationSet, kind: str, order: int, key) -> np.ndarray:
    """Row over the basis for a single observation of ``obs``."""
    if (kind == "E" and order > 3) or (kind == "F" and order > 2) or (kind == "V" and order > 4):
        raise ValueError("unsupported derivative order")
    b = obs.block(kind, order)
    rows = design_rows(ObservationSet(obs.lattice, obs.offsets, obs.gamma, [b]), spec)[(kind, order)]
    match = np.flatnonzero(np.all(b.keys == np.asarray(key, np.int64), axis=1))
    if len(match) != 1:
        raise KeyError(key)
    return rows[match[0]]


def rrqr_solve(A: np.ndarray, b: np.ndarray, tol: float = RRQR_TOL):
    """Least squares by column-pivoted QR, dropping pivots below tol * largest pivot.

    Returns (c, rank); rank 0 (all pivots truncated) gives c = 0.
    """
    m, n = A.shape
    if n == 0:
        raise ValueError("no columns")
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        return np.zeros(n), 0
    # pivots not strictly above tol * largest are dropped; tol >= 1 truncates everything
    rank = int(np.sum(diag > tol * diag[0]))
    c = np.zeros(n)
    if rank > 0:
        z = scipy.linalg.solve_triangular(R[:rank, :rank], Q[:, :rank].T @ b)
        c[piv[:rank]] = z
    return c, rank


@dataclass
class FitResult:
    coefficients: np.ndarray
    errors: MatchErrors
    rank: int
    loss: float
    zero_columns: list
    n_obs: int
    n_basis: int
    seconds: float
    tol: float

    def report(self) -> dict:
        return {
            "rrmse": {f"{k}{j}": v for (k, j), v in self.errors.rrmse.items()},
            "eps": {f"{k}{j}": v for (k, j), v in self.errors.eps.items()},
            "rank": self.rank, "loss": self.loss, "zero_columns": self.zero_columns,
            "n_obs": self.n_obs, "n_basis": self.n_basis, "seconds": self.seconds, "tol": self.tol,
        }


def weighted_system(obs: ObservationSet, rows: dict):
    A, b = [], []
    for blk in obs.blocks:
        s = np.sqrt(blk.W * blk.w_inv * blk.mult)
        A.append(rows[(blk.kind, blk.order)] * s[:, None])
        b.append(blk.target * s)
    return np.vstack(A), np.concatenate(b)


def loss(obs: ObservationSet, rows: dict, c: np.ndarray) -> float:
    A, b = weighted_system(obs, rows)
    r = A @ c - b
    return float(r @ r)


def assemble_and_fit(obs: ObservationSet, spec: BasisSpec, tol: float = RRQR_TOL, rows=None) -> FitResult:
    """Minimise sum_j W_j sum |target - row . c|^2 w_j^{-1} by truncated rank-revealing QR."""
    t0 = time.perf_counter()
    rows = design_rows(obs, spec) if rows is None else rows
    A, b = weighted_system(obs, rows)
    zero = [int(k) for k in np.flatnonzero(np.all(A == 0, axis=0))]
    c, rank = rrqr_solve(A, b, tol)
    r = A @ c - b
    return FitResult(c, errors_from_rows(obs, rows, c), rank, float(r @ r), zero, len(b), spec.size,
                     time.perf_counter() - t0, tol)


def fit_mlip(obs: ObservationSet, spec: BasisSpec, tol: float = RRQR_TOL, provenance=None):
    res = assemble_and_fit(obs, spec, tol)
    prov = {"observations": obs.fingerprint(), "tol": tol, **(provenance or {})}
    return MLIPPotential(spec, res.coefficients, obs.offsets, obs.lattice, prov), res
