"""Cauchy-Born energy density, virial derivatives and Taylor-expanded MM models."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeSpec, lattice_offsets
from .refmodel import SitePotential

VIRIAL_STEPS = {1: 1e-5, 2: 1e-4, 3: 3e-4, 4: 1e-3}
TABLE_STEPS = {2: 1e-4, 3: 3e-4}
PRUNE = 1e-14


# ------------------------------------------------------------- Cauchy-Born


def cauchy_born_density(model, F: np.ndarray, spec: LatticeSpec) -> float:
    """W_cb(F) = V^h((F - I) . Lambda_*) on the stencil within R_cut / sigma_min(F)."""
    F = np.asarray(F, float)
    if np.linalg.det(F) <= 0:
        raise ValueError("det F must be positive")
    smin = np.linalg.svd(F, compute_uv=False).min()
    rho = lattice_offsets(spec, model.R_cut / smin + 1e-9)
    V = model.site_potential(rho)
    return float(V.site_energy(rho @ (F - np.eye(len(F))).T))


@dataclass
class CauchyBornTensor:
    """Derivatives d^j_F W_cb(I) for j = 1..j_max, each of shape (d, d) * j."""

    tensors: dict

    def __getitem__(self, j):
        return self.tensors[j]

    @property
    def orders(self):
        return sorted(self.tensors)


def _symmetrize_slots(T: np.ndarray, d: int, j: int) -> np.ndarray:
    T = T.reshape((d * d,) * j)
    out = np.zeros_like(T)
    perms = list(itertools.permutations(range(j)))
    for p in perms:
        out += np.transpose(T, p)
    return (out / len(perms)).reshape((d, d) * j)


def fd_mixed(fun, x0: np.ndarray, index: tuple, h: float):
    """Nested central difference d^j f / dx_{i1} ... dx_{ij} at x0."""
    j = len(index)
    acc = 0.0
    for signs in itertools.product((1.0, -1.0), repeat=j):
        x = x0.copy()
        for s, a in zip(signs, index):
            x[a] += s * h
        acc = acc + np.prod(signs) * fun(x)
    return acc / (2.0 * h) ** j


def cb_derivative(fun, d: int, j: int, h: float) -> np.ndarray:
    """Symmetric tensor of j-th derivatives of fun(F) at F = I by nested central differences.

    ``fun`` may return a scalar or an array; the derivative axes come first.
    """
    n = d * d
    x0 = np.eye(d).ravel()
    f = lambda x: np.asarray(fun(x.reshape(d, d)), float)
    sample = f(x0)
    out = np.zeros((n,) * j + sample.shape)
    for idx in itertools.combinations_with_replacement(range(n), j):
        val = fd_mixed(f, x0, idx, h)
        for p in set(itertools.permutations(idx)):
            out[p] = val
    return out.reshape((d, d) * j + sample.shape)


def virial_derivatives(model, spec: LatticeSpec, j_max: int = 2, steps=None) -> CauchyBornTensor:
    """d^j_F W_cb(I), j = 1..j_max, by nested central differences with order-dependent steps."""
    if j_max > 4:
        raise ValueError("virial derivatives are supported up to order 4")
    steps = dict(VIRIAL_STEPS, **(steps or {}))
    d = spec.dim
    out = {}
    for j in range(1, j_max + 1):
        if steps[j] < 1e-12:
            raise ValueError("finite-difference step underflow")
        out[j] = cb_derivative(lambda F: cauchy_born_density(model, F, spec), d, j, steps[j])
    return CauchyBornTensor(out)


def virial_from_tables(tables: dict, offsets: np.ndarray, j: int) -> np.ndarray:
    """Lattice sum sum_rho V_{,rho_1..rho_j}(0) (x) rho_1 (x) ... (x) rho_j as a (d,d)*j tensor.

    ``tables[j]`` is the dense derivative table of shape (n, d) * j.
    """
    T = tables[j]
    d = offsets.shape[1]
    for _ in range(j):
        # contract the leading (rho, i) pair with rho_m, appending (i, m) at the end
        T = np.einsum("ri...,rm->...im", T, offsets)
    return T.reshape((d, d) * j)


def lattice_constant_relax(model, spec: LatticeSpec) -> float:
    from scipy.optimize import minimize_scalar

    W = lambda a: cauchy_born_density(model, a * np.eye(spec.dim), spec)
    return float(minimize_scalar(W, bracket=(0.95, 1.0, 1.05), tol=1e-12).x)


# ----------------------------------------------------------- derivative tables


def derivative_tables(grad_fn, n: int, K: int, steps=None) -> dict:
    """Dense derivative tables of a function of n variables at 0.

    ``grad_fn`` maps a batch (m, n) of points to gradients (m, n, ...).  The first
    derivative is taken analytically, order 2 by central differences of the
    gradient and order 3 by mixed second differences of the gradient.  Every
    table is symmetrized over its slots.
    """
    steps = dict(TABLE_STEPS, **(steps or {}))
    zero = np.zeros((1, n))
    g0 = np.asarray(grad_fn(zero))[0]
    tail = g0.shape[1:]
    out = {1: g0}
    if K >= 2:
        h = steps[2]
        E = np.eye(n)
        gp = np.asarray(grad_fn(h * E))
        gm = np.asarray(grad_fn(-h * E))
        H = (gp - gm) / (2 * h)  # H[b, a] = d_b d_a
        out[2] = 0.5 * (H + np.swapaxes(H, 0, 1))
    if K >= 3:
        h = steps[3]
        bs, cs = np.triu_indices(n)
        T = np.zeros((n, n, n) + tail)
        chunk = 2048
        for s in range(0, len(bs), chunk):
            b, c = bs[s:s + chunk], cs[s:s + chunk]
            eb, ec = np.eye(n)[b], np.eye(n)[c]
            val = (np.asarray(grad_fn(h * (eb + ec))) - np.asarray(grad_fn(h * (eb - ec)))
                   - np.asarray(grad_fn(h * (ec - eb))) + np.asarray(grad_fn(-h * (eb + ec)))) / (4 * h * h)
            # val[k, a] = d_a d_b d_c
            T[b, c] = val
            T[c, b] = val
        # T[b, c, a]; symmetrize over all slots
        out[3] = sum(np.transpose(T, p + tuple(range(3, 3 + len(tail))))
                     for p in itertools.permutations(range(3))) / 6.0
    if K >= 4:
        raise ValueError("Taylor tables are shipped up to order 3")
    return out


def site_tables(sitepot: SitePotential, K: int, steps=None) -> dict:
    """Derivative tables of a site potential at g = 0, each of shape (n, d) * j."""
    n, d = sitepot.offsets.shape

    def grad(G):
        out = np.asarray(sitepot.site_gradient(G.reshape(len(G), n, d)))
        return out.reshape((len(G), n * d) + out.shape[3:])

    flat = derivative_tables(grad, n * d, K, steps)
    return {j: t.reshape((n, d) * j + t.shape[j:]) for j, t in flat.items()}


# ------------------------------------------------------------ sparse storage


def multiplicity(keys: np.ndarray) -> np.ndarray:
    """Number of distinct permutations of each sorted tuple."""
    out = np.empty(len(keys), np.int64)
    for k, key in enumerate(keys):
        _, counts = np.unique(key, return_counts=True)
        out[k] = math.factorial(len(key)) // int(np.prod([math.factorial(c) for c in counts]))
    return out


def to_sparse(dense: np.ndarray, j: int, prune: float = PRUNE):
    """Sorted index tuples over flattened components, values and multiplicities."""
    m = int(round(dense.size ** (1.0 / j)))
    flat = dense.reshape((m,) * j)
    keys = np.array(list(itertools.combinations_with_replacement(range(m), j)), dtype=np.int64)
    vals = flat[tuple(keys.T)]
    keep = np.abs(vals) >= prune
    keys, vals = keys[keep], vals[keep]
    return keys, vals, multiplicity(keys)


def to_dense(keys: np.ndarray, vals: np.ndarray, m: int, j: int) -> np.ndarray:
    out = np.zeros((m,) * j)
    for key, v in zip(keys, vals):
        for p in set(itertools.permutations(tuple(key))):
            out[p] = v
    return out


@dataclass
class TaylorPotential(SitePotential):
    """T_K V^h(g) = V^h(0) + sum_{j<=K} 1/j! d^j V^h(0)[g^j] on a fixed stencil."""

    order: int
    offsets: np.ndarray
    V0: float
    keys: dict
    values: dict
    mult: dict = field(default_factory=dict)
    R_cut: float = 2.5

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, float)
        self._dense = {}
        for j in self.keys:
            if j not in self.mult:
                self.mult[j] = multiplicity(self.keys[j])

    @property
    def n_vars(self):
        return self.offsets.size

    def dense(self, j):
        if j not in self._dense:
            if j in self.keys:
                self._dense[j] = to_dense(self.keys[j], self.values[j], self.n_vars, j)
            else:
                self._dense[j] = np.zeros((self.n_vars,) * j)
        return self._dense[j]

    def scaled(self, j: int, factor: float) -> "TaylorPotential":
        vals = dict(self.values)
        vals[j] = vals[j] * factor
        return TaylorPotential(self.order, self.offsets, self.V0, dict(self.keys), vals, dict(self.mult), self.R_cut)

    def site_energy(self, g):
        g = np.asarray(g, float)
        x = g.reshape(g.shape[:-2] + (self.n_vars,))
        out = np.full(x.shape[:-1], float(self.V0))
        if self.order >= 1:
            out = out + x @ self.dense(1)
        if self.order >= 2:
            out = out + 0.5 * np.einsum("...a,...a->...", x @ self.dense(2), x)
        if self.order >= 3:
            q = (x @ self.dense(3).reshape(self.n_vars, -1)).reshape(x.shape + (self.n_vars,))
            out = out + np.einsum("...ab,...a,...b->...", q, x, x) / 6.0
        return out

    def site_gradient(self, g):
        g = np.asarray(g, float)
        x = g.reshape(g.shape[:-2] + (self.n_vars,))
        out = np.zeros_like(x)
        if self.order >= 1:
            out = out + self.dense(1)
        if self.order >= 2:
            out = out + x @ self.dense(2)
        if self.order >= 3:
            q = (x @ self.dense(3).reshape(self.n_vars, -1)).reshape(x.shape + (self.n_vars,))
            out = out + 0.5 * np.einsum("...ab,...a->...b", q, x)
        return out.reshape(g.shape)

    def to_json(self) -> str:
        return json.dumps({
            "order": self.order, "offsets": self.offsets.tolist(), "V0": self.V0, "R_cut": self.R_cut,
            "tables": {str(j): {"keys": self.keys[j].tolist(), "values": self.values[j].tolist()} for j in self.keys},
        })

    @classmethod
    def from_json(cls, text: str) -> "TaylorPotential":
        data = json.loads(text)
        keys = {int(j): np.array(t["keys"], np.int64).reshape(-1, int(j)) for j, t in data["tables"].items()}
        vals = {int(j): np.array(t["values"], float) for j, t in data["tables"].items()}
        return cls(data["order"], np.array(data["offsets"]), data["V0"], keys, vals, R_cut=data["R_cut"])


def taylor_coefficients(model, spec: LatticeSpec, K: int, R_cut: float = 2.5, steps=None) -> TaylorPotential:
    """Taylor tables of the homogeneous site potential of ``model`` up to order K."""
    if K > 3:
        raise ValueError("Taylor order K <= 3 is supported")
    offsets = lattice_offsets(spec, R_cut)
    V = model.site_potential(offsets)
    n = offsets.size
    V0 = float(V.site_energy(np.zeros_like(offsets)))
    tables = site_tables(V, K, steps) if K >= 1 else {}
    keys, vals, mult = {}, {}, {}
    for j, t in tables.items():
        keys[j], vals[j], mult[j] = to_sparse(t.reshape((n,) * j), j)
    return TaylorPotential(K, offsets, V0, keys, vals, mult, R_cut)


# -------------------------------------------------------------- Taylor force


def extended_tables(tables: dict, n: int, d: int) -> dict:
    """Append the centre site (index n) to site-potential tables.

    V depends on u(l + rho) - u(l), so derivatives with respect to u(l) equal
    minus the sum over rho in that slot.
    """
    out = {}
    for j, T in tables.items():
        T = T.reshape((n, d) * j + T.shape[2 * j:])
        for s in range(j):
            ax = 2 * s
            centre = -T.sum(axis=ax, keepdims=True)
            T = np.concatenate([T, centre], axis=ax)
        out[j] = T
    return out


def force_site_offsets(offsets: np.ndarray, spec: LatticeSpec) -> np.ndarray:
    """All sites k (as vectors) reachable as tau_1 - tau_0 with tau in {0} u offsets."""
    R = 2 * np.max(np.linalg.norm(offsets, axis=1))
    return np.vstack([np.zeros(spec.dim), lattice_offsets(spec, R + 1e-9)])


def lift_force_tables(tables: dict, offsets: np.ndarray, spec: LatticeSpec, K: int):
    """d^j F^h_{0; k_1..k_j}(0) for j = 1..K from site tables of order j + 1.

    Returns (site vectors, {j: array (M, d) + ((M, d) * j) + tail}), where the
    leading (d,) is the force component on the centre site.
    """
    n, d = offsets.shape
    sites = force_site_offsets(offsets, spec)
    M = len(sites)
    ext = extended_tables(tables, n, d)
    tau = np.vstack([offsets, np.zeros(d)])
    lookup = {tuple(np.round(v, 8)): k for k, v in enumerate(sites)}
    # position of tau_b - tau_a among the force sites
    rel = np.array([[lookup.get(tuple(np.round(tb - ta, 8)), -1) for tb in tau] for ta in tau])
    out = {}
    for j in range(1, K + 1):
        T = ext[j + 1]
        tail = T.shape[2 * (j + 1):]
        res = np.zeros((d,) + (M, d) * j + tail)
        for a in range(n + 1):
            # force on site 0 from the site m = -tau_a; slot 0 is tau_a, others tau_b -> k = tau_b - tau_a
            sub = T[a]  # (d, n+1, d, ...)
            target = rel[a]
            for combo in itertools.product(range(n + 1), repeat=j):
                ks = [target[b] for b in combo]
                idx = [slice(None)]
                sl = [slice(None)]
                for b, k in zip(combo, ks):
                    idx += [k, slice(None)]
                    sl += [b, slice(None)]
                res[tuple(idx)] -= sub[tuple(sl)]
        out[j] = res
    return sites, out


@dataclass
class TaylorForce:
    """T_K F^h(w) = sum_{j<=K} 1/j! d^j F^h(0)[w^j] for the force on the centre site."""

    order: int
    sites: np.ndarray
    tables: dict

    def evaluate(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, float).reshape(-1)
        out = np.zeros(self.sites.shape[1])
        for j in range(1, self.order + 1):
            T = self.tables[j].reshape(self.sites.shape[1], -1)
            t = T
            for _ in range(j - 1):
                t = (t.reshape(-1, w.size) @ w)
            out += (t.reshape(self.sites.shape[1], -1) @ w) / math.factorial(j)
        return out


def taylor_force(model, spec: LatticeSpec, K: int, R_cut: float = 2.5, steps=None) -> TaylorForce:
    offsets = lattice_offsets(spec, R_cut)
    tables = site_tables(model.site_potential(offsets), K + 1, steps)
    sites, ftab = lift_force_tables(tables, offsets, spec, K)
    return TaylorForce(K, sites, ftab)


def taylor_eval(T, g):
    """Evaluate a TaylorPotential on stencil values or a TaylorForce on site values."""
    if isinstance(T, TaylorForce):
        return T.evaluate(g)
    return T.site_energy(g)


# ---------------------------------------------------------- virial correction


class VirialCorrection(SitePotential):
    """Cubic site potential 1/6 C3[G(g)^3] with G a least-squares stencil gradient.

    For homogeneous deformations g = (F - I) rho, G(g) = F - I exactly, so adding this
    term to T_2 V^h reproduces the reference third Cauchy-Born derivative while
    leaving the first two site-potential derivatives unchanged.
    """

    def __init__(self, offsets: np.ndarray, C3: np.ndarray, grad_offsets: np.ndarray | None = None):
        self.offsets = np.asarray(offsets, float)
        d = self.offsets.shape[1]
        self.R_cut = float(np.max(np.linalg.norm(self.offsets, axis=1)))
        r = np.linalg.norm(self.offsets, axis=1)
        use = np.isclose(r, r.min()) if grad_offsets is None else grad_offsets
        P = np.zeros_like(self.offsets)
        P[use] = self.offsets[use]
        M = P.T @ P
        self.L = P @ np.linalg.inv(M)  # G_ij = sum_rho g_rho,i L_rho,j
        self.C3 = np.asarray(C3, float).reshape((d * d,) * 3)

    def with_offsets(self, offsets):
        raise NotImplementedError

    def _G(self, g):
        return np.einsum("...ri,rj->...ij", g, self.L).reshape(g.shape[:-2] + (-1,))

    def site_energy(self, g):
        G = self._G(np.asarray(g, float))
        return np.einsum("abc,...a,...b,...c->...", self.C3, G, G, G) / 6.0

    def site_gradient(self, g):
        g = np.asarray(g, float)
        d = g.shape[-1]
        G = self._G(g)
        dG = 0.5 * np.einsum("abc,...b,...c->...a", self.C3, G, G).reshape(g.shape[:-2] + (d, d))
        return np.einsum("...ij,rj->...ri", dG, self.L)


class SumPotential(SitePotential):
    def __init__(self, *parts: SitePotential):
        self.parts = parts
        self.offsets = parts[0].offsets
        self.R_cut = max(p.R_cut for p in parts)
        for p in parts:
            if p.offsets.shape != self.offsets.shape or not np.allclose(p.offsets, self.offsets):
                raise ValueError("summed potentials must share a stencil")

    def site_energy(self, g):
        return sum(p.site_energy(g) for p in self.parts)

    def site_gradient(self, g):
        return sum(p.site_gradient(g) for p in self.parts)


def virial_matched_taylor(model, spec: LatticeSpec, R_cut: float = 2.5, steps=None) -> SumPotential:
    """T_2 V^h plus the cubic Cauchy-Born correction matching d^3_F W_cb(I)."""
    T2 = taylor_coefficients(model, spec, 2, R_cut, steps)
    C3 = virial_derivatives(model, spec, 3, steps)[3]
    return SumPotential(T2, VirialCorrection(T2.offsets, C3))
