"""Linear body-order <= 3 invariant site potential (ACE-style) for d = 2.

Features of a stencil with neighbour positions r_j = rho_j + g_j:

* pair:    A_k = sum_j P_k(|r_j|)
* triplet: T_{k1 k2 l} = sum_{j1<j2} sym_k[P_k1(r_j1) P_k2(r_j2)] L_l(cos theta_j1j2)

Triplets are evaluated with the density trick: L_l(cos t) is expanded in
cos(m t), which factorises over neighbours through the channel sums
A_km = sum_j P_k(r_j) exp(i m theta_j).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field

import numpy as np
from numpy.polynomial import chebyshev, legendre

from .lattice import LatticeSpec, lattice_offsets
from .refmodel import SitePotential, StencilSystem


@dataclass(frozen=True)
class BasisSpec:
    k_pair: int = 8
    k_trip: int = 4
    l_max: int = 4
    R_cut: float = 2.5
    r_in: float = 0.6

    def __post_init__(self):
        if self.R_cut <= self.r_in:
            raise ValueError("R_cut must exceed r_in")
        if min(self.k_pair, self.k_trip, self.l_max) < 0:
            raise ValueError("degrees must be nonnegative")

    @property
    def pair_index(self):
        return [("pair", k) for k in range(self.k_pair + 1)]

    @property
    def trip_index(self):
        return [("trip", k1, k2, l) for k1 in range(self.k_trip + 1)
                for k2 in range(k1, self.k_trip + 1) for l in range(self.l_max + 1)]

    @property
    def index(self):
        return self.pair_index + self.trip_index

    @property
    def size(self):
        return len(self.index)

    def contains(self, other: "BasisSpec") -> bool:
        return (self.k_pair >= other.k_pair and self.k_trip >= other.k_trip and self.l_max >= other.l_max
                and self.R_cut == other.R_cut and self.r_in == other.r_in)

    def embed_from(self, other: "BasisSpec") -> np.ndarray:
        """Positions of ``other``'s basis functions inside this basis."""
        pos = {b: i for i, b in enumerate(self.index)}
        return np.array([pos[b] for b in other.index])


def radial_basis(spec: BasisSpec, r, kmax: int | None = None, deriv: bool = False):
    """P_k(r) = Leg_k(x(r)) (R_cut - r)^2 for r < R_cut, else 0; k = 0..kmax."""
    kmax = spec.k_pair if kmax is None else kmax
    r = np.asarray(r, float)
    scale = 2.0 / (spec.R_cut - spec.r_in)
    x = scale * (r - spec.r_in) - 1.0
    V = legendre.legvander(x, kmax)
    inside = r < spec.R_cut
    env = np.where(inside, (spec.R_cut - r) ** 2, 0.0)
    P = V * env[..., None]
    if not deriv:
        return P
    # P'_{k+1} = P'_{k-1} + (2k + 1) P_k
    dV = np.zeros_like(V)
    for k in range(1, kmax + 1):
        dV[..., k] = (dV[..., k - 2] if k >= 2 else 0.0) + (2 * k - 1) * V[..., k - 1]
    dV *= scale
    denv = np.where(inside, -2.0 * (spec.R_cut - r), 0.0)
    return P, dV * env[..., None] + V * denv[..., None]


def _leg_to_cos(l_max: int) -> np.ndarray:
    """a[l, m] with L_l(cos t) = sum_m a[l, m] cos(m t)."""
    a = np.zeros((l_max + 1, l_max + 1))
    for l in range(l_max + 1):
        c = np.zeros(l + 1)
        c[l] = 1.0
        ch = chebyshev.poly2cheb(legendre.leg2poly(c))
        a[l, :len(ch)] = ch
    return a


class _Channels:
    """Radial values, angles and channel sums for a batch of 2d stencils."""

    def __init__(self, spec: BasisSpec, R: np.ndarray, present=None):
        if R.shape[-1] != 2:
            raise NotImplementedError("the invariant basis is implemented for d = 2")
        r = np.linalg.norm(R, axis=-1)
        if np.any(r < 1e-8):
            raise ValueError("coincident atoms in stencil")
        mask = np.ones(r.shape, bool) if present is None else np.broadcast_to(present, r.shape)
        self.R, self.r, self.mask = R, r, mask
        K = max(spec.k_pair, spec.k_trip)
        P, dP = radial_basis(spec, r, K, deriv=True)
        P = P * mask[..., None]
        dP = dP * mask[..., None]
        self.P, self.dP = P, dP
        self.Pt, self.dPt = P[..., :spec.k_trip + 1], dP[..., :spec.k_trip + 1]
        m = np.arange(spec.l_max + 1)
        z = (R[..., 0] + 1j * R[..., 1]) / r
        E = np.empty(r.shape + (len(m),), complex)
        E[..., 0] = 1.0
        for k in range(1, len(m)):
            E[..., k] = E[..., k - 1] * z
        self.E = E  # e^{i m theta}, (..., n, M)
        self.m = m
        self.A = np.einsum("...jk,...jm->...km", self.Pt, self.E)
        self.rhat = R / r[..., None]
        self.dtheta = np.stack([-R[..., 1], R[..., 0]], -1) / (r * r)[..., None]


def _sym_pairs(spec: BasisSpec):
    kt = spec.k_trip + 1
    k1, k2 = np.triu_indices(kt)
    return k1, k2


def descriptors(spec: BasisSpec, R: np.ndarray, present=None) -> np.ndarray:
    """Feature vectors B for stencils of neighbour positions R (..., n, 2)."""
    R = np.asarray(R, float)
    if R.shape[-2] == 0:
        return np.zeros(R.shape[:-2] + (spec.size,))
    ch = _Channels(spec, R, present)
    pair = ch.P[..., :spec.k_pair + 1].sum(-2)
    a = _leg_to_cos(spec.l_max)
    k1, k2 = _sym_pairs(spec)
    full = np.einsum("...km,...qm->...kqm", ch.A, ch.A.conj()).real  # (..., K, K, M)
    full = np.einsum("...kqm,lm->...kql", full, a)
    diag = np.einsum("...jk,...jq->...kq", ch.Pt, ch.Pt)
    trip = 0.5 * (full - diag[..., None])[..., k1, k2, :]
    return np.concatenate([pair, trip.reshape(trip.shape[:-2] + (-1,))], -1)


def descriptor_jacobian(spec: BasisSpec, R: np.ndarray, present=None):
    """Features (..., nB) and their derivatives (..., n, 2, nB) with respect to R."""
    R = np.asarray(R, float)
    ch = _Channels(spec, R, present)
    kp = spec.k_pair + 1
    pair = ch.P[..., :kp].sum(-2)
    dpair = ch.dP[..., None, :kp] * ch.rhat[..., :, None]  # (..., n, 2, kp)
    a = _leg_to_cos(spec.l_max)
    k1, k2 = _sym_pairs(spec)
    # dA_km / dR_j = (P'_k rhat + i m P_k dtheta) e^{i m theta}
    dA = (ch.dPt[..., :, None, :, None] * ch.rhat[..., :, :, None, None]
          + 1j * ch.m * ch.Pt[..., :, None, :, None] * ch.dtheta[..., :, :, None, None]) * ch.E[..., :, None, None, :]
    # (..., n, 2, K, M)
    full = np.einsum("...km,...qm->...kqm", ch.A, ch.A.conj()).real
    dfull = 2.0 * np.einsum("...jdkm,...qm->...jdkqm", dA, ch.A.conj()).real
    dfull = 0.5 * (dfull + np.swapaxes(dfull, -3, -2))
    full = np.einsum("...kqm,lm->...kql", full, a)
    dfull = np.einsum("...kqm,lm->...kql", dfull, a)
    diag = np.einsum("...jk,...jq->...kq", ch.Pt, ch.Pt)
    ddiag = (ch.dPt[..., :, :, None] * ch.Pt[..., :, None, :])
    ddiag = (ddiag + np.swapaxes(ddiag, -1, -2))[..., :, None, :, :] * ch.rhat[..., :, :, None, None]
    trip = 0.5 * (full - diag[..., None])[..., k1, k2, :]
    dtrip = 0.5 * (dfull - ddiag[..., None])[..., k1, k2, :]
    B = np.concatenate([pair, trip.reshape(trip.shape[:-2] + (-1,))], -1)
    dB = np.concatenate([dpair, dtrip.reshape(dtrip.shape[:-2] + (-1,))], -1)
    return B, dB


class BasisStencil(SitePotential):
    """Vector-valued site potential g -> B(rho + g) over a fixed stencil (rows of design matrices)."""

    chunk = 256

    def __init__(self, spec: BasisSpec, offsets: np.ndarray):
        self.spec = spec
        self.offsets = np.asarray(offsets, float)
        self.R_cut = spec.R_cut

    def with_offsets(self, offsets):
        return BasisStencil(self.spec, offsets)

    def site_energy(self, g):
        return descriptors(self.spec, self.offsets + np.asarray(g, float))

    def site_gradient(self, g):
        g = np.asarray(g, float)
        flat = g.reshape((-1,) + self.offsets.shape)
        out = np.empty(flat.shape + (self.spec.size,))
        for s in range(0, len(flat), self.chunk):
            out[s:s + self.chunk] = descriptor_jacobian(self.spec, self.offsets + flat[s:s + self.chunk])[1]
        return out.reshape(g.shape + (self.spec.size,))


class MLIPPotential(SitePotential):
    """V(g; c) = sum_B c_B B(rho + g)."""

    def __init__(self, spec: BasisSpec, coefficients, offsets: np.ndarray | None = None,
                 lattice: LatticeSpec | None = None, provenance: dict | None = None):
        self.spec = spec
        self.c = np.asarray(coefficients, float)
        if self.c.shape != (spec.size,):
            raise ValueError(f"coefficient vector has length {self.c.size}, basis has {spec.size}")
        if not np.all(np.isfinite(self.c)):
            raise ValueError("coefficients must be finite")
        self.lattice = lattice or LatticeSpec.triangular()
        self.offsets = lattice_offsets(self.lattice, spec.R_cut) if offsets is None else np.asarray(offsets, float)
        self.R_cut = spec.R_cut
        self.provenance = dict(provenance or {})
        kp = spec.k_pair + 1
        self._cp = self.c[:kp]
        kt = spec.k_trip + 1
        S = np.zeros((kt, kt, spec.l_max + 1))
        k1, k2 = _sym_pairs(spec)
        ct = self.c[kp:].reshape(len(k1), spec.l_max + 1)
        S[k1, k2] += np.where((k1 == k2)[:, None], ct, 0.5 * ct)
        S[k2, k1] += np.where((k1 == k2)[:, None], 0.0, 0.5 * ct)
        a = _leg_to_cos(spec.l_max)
        self._C = 0.5 * np.einsum("kql,lm->mkq", S, a)  # per m: symmetric K x K
        self._D = 0.5 * S.sum(-1)

    def with_offsets(self, offsets):
        return MLIPPotential(self.spec, self.c, offsets, self.lattice, self.provenance)

    def with_coefficients(self, c) -> "MLIPPotential":
        return MLIPPotential(self.spec, c, self.offsets, self.lattice, self.provenance)

    def site_energy(self, g):
        return descriptors(self.spec, self.offsets + np.asarray(g, float)) @ self.c

    def site_gradient(self, g):
        R = self.offsets + np.asarray(g, float)
        ch = _Channels(self.spec, R)
        kp = self.spec.k_pair + 1
        out = (ch.dP[..., :kp] @ self._cp)[..., None] * ch.rhat
        Z = np.einsum("mkq,...qm->...km", self._C, ch.A)  # (..., K, M)
        dA_r = ch.dPt[..., :, :, None] * ch.E[..., :, None, :]  # radial part, (..., n, K, M)
        dA_t = 1j * ch.m * ch.Pt[..., :, :, None] * ch.E[..., :, None, :]  # angular part
        Zc = Z.conj()[..., None, :, :]
        out = out + 2.0 * np.einsum("...jkm,...jkm->...j", Zc, dA_r).real[..., None] * ch.rhat
        out = out + 2.0 * np.einsum("...jkm,...jkm->...j", Zc, dA_t).real[..., None] * ch.dtheta
        DP = np.einsum("kq,...jq->...jk", self._D, ch.Pt)
        out = out - 2.0 * np.einsum("...jk,...jk->...j", DP, ch.dPt)[..., None] * ch.rhat
        return out

    def to_json(self) -> str:
        return json.dumps({"basis": asdict(self.spec), "coefficients": self.c.tolist(),
                           "lattice": {"name": self.lattice.name, "cell": self.lattice.cell.tolist()},
                           "provenance": self.provenance}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MLIPPotential":
        data = json.loads(text)
        lat = LatticeSpec(np.array(data["lattice"]["cell"]), data["lattice"]["name"])
        return cls(BasisSpec(**data["basis"]), np.array(data["coefficients"]), lattice=lat,
                   provenance=data.get("provenance"))


def mlip_site_energy(spec: BasisSpec, c, stencil) -> float:
    c = np.asarray(c, float)
    if c.shape != (spec.size,):
        raise ValueError("coefficients not aligned with basis")
    return float(descriptors(spec, stencil.rho + stencil.Du) @ c)


def mlip_forces(spec: BasisSpec, c, config, u) -> np.ndarray:
    """-grad of sum_l V(Du(l); c) over all sites of ``config``."""
    pot = MLIPPotential(spec, c, lattice=config.spec)
    system = StencilSystem.from_config(config, pot.offsets)
    y = config.positions + np.asarray(u, float)
    return -system.evaluate(pot, y)[1]


def observation_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
