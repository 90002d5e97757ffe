"""Reference interaction models: a toy EAM and a single-orbital tight-binding model.

Both are exposed in two forms:

* as a *site potential* ``V(g)`` acting on a homogeneous stencil ``g_rho``
  (used for Taylor expansions, Cauchy-Born virials and matching), and
* as a *position model* acting on deformed positions ``y`` of a finite
  configuration (used for equilibration and QM regions).
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.spatial import cKDTree

from .lattice import ReferenceConfig, check_admissible


class CollisionError(ValueError):
    pass


class SitePotential:
    """Site potential V(g) over a fixed list of homogeneous offsets.

    Subclasses implement ``site_energy`` and ``site_gradient`` for batches of
    stencils ``g`` of shape ``(..., n_offsets, d)``.
    """

    offsets: np.ndarray
    R_cut: float

    def site_energy(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def site_gradient(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def energy_and_gradient(self, g):
        return self.site_energy(g), self.site_gradient(g)

    def with_offsets(self, offsets: np.ndarray) -> "SitePotential":
        raise NotImplementedError(f"{type(self).__name__} has a fixed stencil")


# ---------------------------------------------------------------- cutoffs


def smooth_cutoff(r, r_in, r_out):
    """C^2 envelope: 1 below r_in, quintic smoothstep down to 0 at r_out."""
    t = np.clip((np.asarray(r, float) - r_in) / (r_out - r_in), 0.0, 1.0)
    s = 1.0 - t**3 * (10.0 - 15.0 * t + 6.0 * t * t)
    ds = -30.0 * t * t * (1.0 - t) ** 2 / (r_out - r_in)
    return s, ds


# ---------------------------------------------------------------- EAM


@dataclass(frozen=True)
class EAMParams:
    """phi = A_p exp(-p(r-1)) s(r), psi = exp(-q(r-1)) s(r), F(rho) = -C_e sqrt(rho).

    The default pair amplitude makes the triangular lattice with r0 = 1 stress free.
    """

    A_p: float = 0.3470889925376461
    p: float = 4.0
    q: float = 3.0
    C_e: float = 1.0
    R_cut: float = 2.2
    width: float = 0.6

    def __post_init__(self):
        vals = (self.A_p, self.p, self.q, self.C_e, self.R_cut, self.width)
        if min(vals) <= 0:
            raise ValueError("EAM parameters must be positive")
        if self.R_cut < 2:
            raise ValueError("EAM cutoff must be at least 2 lattice units")
        if self.width > self.R_cut:
            raise ValueError("cutoff width exceeds cutoff")

    def envelope(self, r):
        return smooth_cutoff(r, self.R_cut - self.width, self.R_cut)

    def pair(self, r):
        s, ds = self.envelope(r)
        e = self.A_p * np.exp(-self.p * (r - 1.0))
        return e * s, e * (ds - self.p * s)

    def density(self, r):
        s, ds = self.envelope(r)
        e = np.exp(-self.q * (r - 1.0))
        return e * s, e * (ds - self.q * s)

    def embed(self, rho):
        rho = np.asarray(rho, float)
        root = np.sqrt(np.maximum(rho, 0.0))
        with np.errstate(divide="ignore"):
            dF = np.where(root > 0, -0.5 * self.C_e / np.where(root > 0, root, 1.0), 0.0)
        return -self.C_e * root, dF


def _distances(vecs):
    r = np.linalg.norm(vecs, axis=-1)
    if np.any(r < 1e-8):
        raise CollisionError("atom collision (distance < 1e-8)")
    return r


class EAMSitePotential(SitePotential):
    def __init__(self, params: EAMParams, offsets: np.ndarray):
        self.params = params
        self.offsets = np.asarray(offsets, float)
        self.R_cut = params.R_cut

    def with_offsets(self, offsets):
        return EAMSitePotential(self.params, offsets)

    def site_energy(self, g):
        r = _distances(self.offsets + np.asarray(g, float))
        phi, _ = self.params.pair(r)
        psi, _ = self.params.density(r)
        F, _ = self.params.embed(psi.sum(-1))
        return 0.5 * phi.sum(-1) + F

    def site_gradient(self, g):
        x = self.offsets + np.asarray(g, float)
        r = _distances(x)
        _, dphi = self.params.pair(r)
        psi, dpsi = self.params.density(r)
        _, dF = self.params.embed(psi.sum(-1))
        coef = 0.5 * dphi + dF[..., None] * dpsi
        return (coef / r)[..., None] * x


def eam_site_energy(params: EAMParams, stencil) -> float:
    """Site energy of a StencilView (offsets ``rho`` and differences ``Du``)."""
    return float(EAMSitePotential(params, stencil.rho).site_energy(stencil.Du))


# ------------------------------------------------- position-based evaluation


def pair_list(y: np.ndarray, cutoff: float, active=None):
    """Directed pairs (i, j), i != j, with |y_i - y_j| <= cutoff among active sites."""
    idx = np.arange(len(y)) if active is None else np.flatnonzero(active)
    if len(idx) < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    pairs = cKDTree(y[idx]).query_pairs(cutoff, output_type="ndarray")
    i = idx[np.concatenate([pairs[:, 0], pairs[:, 1]])]
    j = idx[np.concatenate([pairs[:, 1], pairs[:, 0]])]
    return i, j


class EAM:
    """Toy EAM acting on positions of a finite cluster."""

    kind = "eam"

    def __init__(self, params: EAMParams | None = None):
        self.params = params or EAMParams()
        self.R_cut = self.params.R_cut

    def site_potential(self, offsets) -> EAMSitePotential:
        return EAMSitePotential(self.params, offsets)

    def to_dict(self):
        return {"type": "eam", **asdict(self.params)}

    def evaluate(self, y, weights=None, active=None, pairs=None):
        """Site energies and gradient of sum_i weights_i V_i with respect to y.

        ``active`` restricts the system to a subset of atoms (the finite-system
        restriction V^Omega); inactive atoms carry zero energy and gradient.
        """
        y = np.asarray(y, float)
        n = len(y)
        if pairs is None:
            pairs = pair_list(y, self.params.R_cut, active)
        i, j = pairs
        vec = y[j] - y[i]
        r = _distances(vec) if len(i) else np.zeros(0)
        phi, dphi = self.params.pair(r)
        psi, dpsi = self.params.density(r)
        rho = np.bincount(i, psi, minlength=n)
        F, dF = self.params.embed(rho)
        E = 0.5 * np.bincount(i, phi, minlength=n) + F
        if active is not None:
            E = np.where(active, E, 0.0)
        w = np.ones(n) if weights is None else np.asarray(weights, float)
        coef = w[i] * (0.5 * dphi + dF[i] * dpsi)
        fvec = (coef / np.where(r > 0, r, 1.0))[:, None] * vec
        grad = np.zeros_like(y)
        for k in range(y.shape[1]):
            grad[:, k] = np.bincount(j, fvec[:, k], minlength=n) - np.bincount(i, fvec[:, k], minlength=n)
        return E, grad

    def site_energies(self, y, active=None):
        return self.evaluate(y, active=active)[0]


# ---------------------------------------------------------------- tight binding


@dataclass(frozen=True)
class TBParams:
    """Single s-orbital NRL-style tight binding (identity overlap)."""

    a: float = -0.5
    b: float = 0.4
    c: float = 0.3
    d: float = 0.0
    lam: float = 1.1
    e_h: float = -1.2
    f_h: float = 0.1
    g_h: float = 0.0
    h_h: float = 1.0
    R_c: float = 2.5
    l_c: float = 0.5
    L_c: float = 5.0
    electrons_per_atom: float = 0.5

    def __post_init__(self):
        if self.R_c <= 1.0:
            raise ValueError("TB cutoff must exceed the nearest-neighbour distance")

    def cutoff(self, r):
        r = np.asarray(r, float)
        return np.where(r < self.R_c, 1.0 / (1.0 + np.exp((r - self.R_c) / self.l_c + self.L_c)), 0.0)


def tb_hamiltonian(params: TBParams, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, float)
    diff = y[:, None, :] - y[None, :, :]
    r = np.linalg.norm(diff, axis=-1)
    off = ~np.eye(len(y), dtype=bool)
    if np.any(r[off] < 1e-8):
        raise CollisionError("atom collision (distance < 1e-8)")
    fc = np.where(off, params.cutoff(r), 0.0)
    rho = np.sum(np.exp(-params.lam**2 * r) * fc, axis=1)
    onsite = params.a + params.b * rho ** (2 / 3) + params.c * rho ** (4 / 3) + params.d * rho**2
    H = (params.e_h + params.f_h * r + params.g_h * r * r) * np.exp(-params.h_h * r) * fc
    H[np.diag_indices_from(H)] = onsite
    return H


def tb_site_energies(params: TBParams, y: np.ndarray) -> np.ndarray:
    """E_l = sum over occupied states of lambda_s psi_s(l)^2."""
    H = tb_hamiltonian(params, y)
    if not np.allclose(H, H.T, atol=1e-14):
        raise ValueError("non-symmetric Hamiltonian")
    lam, psi = np.linalg.eigh(H)
    n_occ = int(round(params.electrons_per_atom * len(y)))
    return (psi[:, :n_occ] ** 2) @ lam[:n_occ]


def tb_site_energy(params: TBParams, config: ReferenceConfig, u: np.ndarray, site: int) -> float:
    return float(tb_site_energies(params, config.positions + np.asarray(u, float))[site])


class TightBinding:
    """Tight-binding position model; gradients by central differences (step 1e-5)."""

    kind = "tb_s"
    fd_step = 1e-5

    def __init__(self, params: TBParams | None = None, cluster_radius: float = 5.0):
        self.params = params or TBParams()
        self.R_cut = self.params.R_c
        self.cluster_radius = cluster_radius

    def to_dict(self):
        return {"type": "tb_s", **asdict(self.params)}

    def _energies(self, y, active):
        E = np.zeros(len(y))
        idx = np.arange(len(y)) if active is None else np.flatnonzero(active)
        E[idx] = tb_site_energies(self.params, y[idx])
        return E

    def evaluate(self, y, weights=None, active=None, pairs=None):
        y = np.asarray(y, float)
        w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
        E = self._energies(y, active)
        grad = np.zeros_like(y)
        idx = np.arange(len(y)) if active is None else np.flatnonzero(active)
        h = self.fd_step
        for a in idx:
            for k in range(y.shape[1]):
                yp, ym = y.copy(), y.copy()
                yp[a, k] += h
                ym[a, k] -= h
                grad[a, k] = (w @ self._energies(yp, active) - w @ self._energies(ym, active)) / (2 * h)
        return E, grad

    def site_energies(self, y, active=None):
        return self._energies(np.asarray(y, float), active)

    def site_potential(self, offsets) -> "TBSitePotential":
        return TBSitePotential(self, offsets)


class TBSitePotential(SitePotential):
    """V^h(g) of the TB model: energy of the centre atom of a homogeneous cluster."""

    def __init__(self, model: TightBinding, offsets: np.ndarray, spec=None):
        from .lattice import LatticeSpec, lattice_offsets

        self.model = model
        self.offsets = np.asarray(offsets, float)
        self.R_cut = model.R_cut
        spec = spec or (LatticeSpec.triangular() if self.offsets.shape[1] == 2 else None)
        if spec is None:
            raise ValueError("a lattice spec is needed for 3d TB clusters")
        self.spec = spec
        cl = lattice_offsets(spec, max(model.cluster_radius, np.max(np.linalg.norm(self.offsets, axis=1))))
        self.cluster = np.vstack([np.zeros(cl.shape[1]), cl])
        lookup = {tuple(np.round(v, 8)): k for k, v in enumerate(self.cluster)}
        self.slot = np.array([lookup[tuple(np.round(v, 8))] for v in self.offsets])

    def with_offsets(self, offsets):
        return TBSitePotential(self.model, offsets, self.spec)

    def site_energy(self, g):
        g = np.asarray(g, float)
        flat = g.reshape(-1, *self.offsets.shape)
        out = np.empty(len(flat))
        for k, gk in enumerate(flat):
            y = self.cluster.copy()
            y[self.slot] += gk
            out[k] = tb_site_energies(self.model.params, y)[0]
        return out.reshape(g.shape[:-2])

    def site_gradient(self, g):
        g = np.asarray(g, float)
        flat = g.reshape(-1, self.offsets.size)
        h = self.model.fd_step
        out = np.empty_like(flat)
        for a in range(flat.shape[1]):
            gp, gm = flat.copy(), flat.copy()
            gp[:, a] += h
            gm[:, a] -= h
            shp = (-1,) + self.offsets.shape
            out[:, a] = (self.site_energy(gp.reshape(shp)) - self.site_energy(gm.reshape(shp))) / (2 * h)
        return out.reshape(g.shape)


# ------------------------------------------------------- energy differences


def energy_difference(model, config: ReferenceConfig, u0, u, check: bool = True) -> float:
    """sum_l V_l(Du0 + Du) - V_l(Du0) for a position model."""
    y0 = config.positions + np.asarray(u0, float)
    y = y0 + np.asarray(u, float)
    if check and not check_admissible(config.positions, y, 0.1):
        raise ValueError("deformation is not admissible")
    return float(np.sum(model.site_energies(y) - model.site_energies(y0)))


def forces(model, config: ReferenceConfig, u0, u) -> np.ndarray:
    """Negative gradient of ``energy_difference`` with respect to u."""
    y = config.positions + np.asarray(u0, float) + np.asarray(u, float)
    return -model.evaluate(y)[1]


def model_from_dict(block: dict):
    block = dict(block or {"type": "eam"})
    kind = block.pop("type", "eam")
    if kind == "eam":
        return EAM(EAMParams(**block))
    if kind == "tb_s":
        radius = block.pop("cluster_radius", 5.0)
        return TightBinding(TBParams(**block), radius)
    raise ValueError(f"unknown reference model {kind!r}")


# ------------------------------------------------ site potentials on configs


class StencilSystem:
    """Site potential evaluated at every site of a configuration.

    ``table[l, a]`` is the index of the site playing the role of l + offsets[a]
    (-1 when it lies outside the domain).  Stencils are g = y[table] - y[l] - rho,
    which also covers slip-remapped neighbours across a dislocation cut.
    """

    def __init__(self, table: np.ndarray, offsets: np.ndarray):
        self.table = np.asarray(table, np.int64)
        self.offsets = np.asarray(offsets, float)
        self.present = self.table >= 0
        self.safe = np.where(self.present, self.table, 0)

    @classmethod
    def from_config(cls, config: ReferenceConfig, offsets: np.ndarray) -> "StencilSystem":
        ints = np.rint(np.linalg.solve(config.spec.cell, np.asarray(offsets, float).T).T).astype(np.int64)
        return cls(config.lookup(config.ints[:, None, :] + ints[None]), offsets)

    def stencils(self, y: np.ndarray, sites=None) -> np.ndarray:
        idx = np.arange(len(self.table)) if sites is None else np.asarray(sites)
        g = y[self.safe[idx]] - y[idx, None, :] - self.offsets
        g[~self.present[idx]] = 0.0
        return g

    def evaluate(self, sitepot: SitePotential, y: np.ndarray, weights=None, sites=None):
        """Site energies on ``sites`` and gradient of sum weights * V with respect to y."""
        y = np.asarray(y, float)
        idx = np.arange(len(self.table)) if sites is None else np.asarray(sites)
        g = self.stencils(y, idx)
        E = np.asarray(sitepot.site_energy(g), float)
        dV = np.asarray(sitepot.site_gradient(g), float)
        if weights is not None:
            dV = dV * np.asarray(weights, float)[idx, None, None]
        dV[~self.present[idx]] = 0.0
        grad = np.zeros_like(y)
        nb = self.safe[idx].ravel()
        for k in range(y.shape[1]):
            comp = dV[..., k]
            grad[:, k] = np.bincount(nb, comp.ravel(), minlength=len(y)) - np.bincount(idx, comp.sum(1), minlength=len(y))
        return E, grad
