"""Far-field predictor for a straight edge dislocation and its slip-corrected strains."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import LatticeSpec, ReferenceConfig, build_lattice, lattice_offsets

FIXED_POINT_TOL = 1e-12
FIXED_POINT_MAXITER = 500


class FixedPointError(RuntimeError):
    pass


@dataclass(frozen=True)
class DislocationSpec:
    """Edge dislocation with Burgers vector (b1, 0) and branch cut {x2 = core2, x1 >= core1}."""

    b: tuple = (1.0, 0.0)
    core: tuple = (0.25, 0.35)
    r_hat: float = 2.0
    nu: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.nu < 0.5:
            raise ValueError("Poisson ratio must lie in (0, 0.5)")
        if abs(self.b[1]) > 0:
            raise ValueError("only edge dislocations with b = (b1, 0) are supported")
        if self.r_hat <= 0:
            raise ValueError("core radius must be positive")

    @property
    def b1(self) -> float:
        return float(self.b[0])

    def with_nu(self, nu: float) -> "DislocationSpec":
        return DislocationSpec(self.b, self.core, self.r_hat, float(nu))

    def on_cut(self, x, tol: float = 1e-12) -> np.ndarray:
        x = np.atleast_2d(x)
        return (np.abs(x[:, 1] - self.core[1]) <= tol) & (x[:, 0] >= self.core[0] - tol)

    def to_dict(self) -> dict:
        return {"type": "edge_dislocation", "b": list(self.b), "core": list(self.core), "r_hat": self.r_hat,
                "nu": self.nu}


def _angle(rel: np.ndarray) -> np.ndarray:
    """Angle in [0, 2 pi), discontinuous across the positive x1 axis."""
    return np.mod(np.arctan2(rel[..., 1], rel[..., 0]), 2 * np.pi)


def _volterra(spec: DislocationSpec, rel: np.ndarray, r2: np.ndarray) -> np.ndarray:
    nu, b = spec.nu, spec.b1
    th = _angle(rel)
    x1, x2 = rel[..., 0], rel[..., 1]
    u1 = b / (2 * np.pi) * (th + x1 * x2 / (2 * (1 - nu) * r2))
    u2 = -b / (2 * np.pi) * ((1 - 2 * nu) / (4 * (1 - nu)) * np.log(r2) + (x1 * x1 - x2 * x2) / (4 * (1 - nu) * r2))
    return np.stack([u1, u2], axis=-1)


def cle_edge_solution(spec: DislocationSpec, x) -> np.ndarray:
    """Isotropic Volterra edge-dislocation displacement; jump -b across the cut."""
    x = np.asarray(x, float)
    rel = x - np.asarray(spec.core)
    if np.any(spec.on_cut(x.reshape(-1, 2))):
        raise ValueError("evaluation point on the branch cut")
    r2 = np.sum(rel * rel, axis=-1)
    if np.any(r2 == 0):
        raise ValueError("evaluation at the dislocation core")
    return _volterra(spec, rel, r2)


def smooth_step(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def core_shift(spec: DislocationSpec, x) -> np.ndarray:
    """x - xi(x): the angular shift b/(2 pi) eta(|x - core| / r_hat) arg(x - core)."""
    rel = np.asarray(x, float) - np.asarray(spec.core)
    r = np.linalg.norm(rel, axis=-1)
    s = spec.b1 / (2 * np.pi) * smooth_step(r / spec.r_hat) * _angle(rel)
    return np.stack([s, np.zeros_like(s)], axis=-1)


def xi(spec: DislocationSpec, x) -> np.ndarray:
    return np.asarray(x, float) - core_shift(spec, x)


def xi_inverse(spec: DislocationSpec, y, tol: float = FIXED_POINT_TOL, maxiter: int = FIXED_POINT_MAXITER):
    """Solve xi(x) = y by the fixed point x <- y + shift(x)."""
    y = np.asarray(y, float)
    x = y.copy()
    for _ in range(maxiter):
        nxt = y + core_shift(spec, x)
        if np.max(np.abs(nxt - x), initial=0.0) < tol:
            return nxt
        x = nxt
    raise FixedPointError("xi inverse did not converge")


def core_regularized_u0(spec: DislocationSpec, x) -> np.ndarray:
    """u0(x) = u_lin(xi^{-1}(x)); finite everywhere including the core.

    Points mapped onto the cut take the upper-side (zero angle) value.
    """
    z = xi_inverse(spec, np.asarray(x, float))
    rel = z - np.asarray(spec.core)
    r2 = np.sum(rel * rel, axis=-1)
    at_core = r2 == 0
    out = _volterra(spec, rel, np.where(at_core, 1.0, r2))
    out[at_core] = 0.0
    return out


def poisson_from_cb(C: np.ndarray) -> float:
    """Poisson ratio of the isotropic projection of a d=2 elasticity tensor C[i,j,k,l]."""
    C = np.asarray(C, float)
    if C.shape != (2, 2, 2, 2):
        raise ValueError("expected a 2x2x2x2 tensor")
    I = np.eye(2)
    P1 = np.einsum("ij,kl->ijkl", I, I)
    P2 = np.einsum("ik,jl->ijkl", I, I) + np.einsum("il,jk->ijkl", I, I)
    G = np.array([[np.sum(P1 * P1), np.sum(P1 * P2)], [np.sum(P2 * P1), np.sum(P2 * P2)]])
    lam, mu = np.linalg.solve(G, [np.sum(C * P1), np.sum(C * P2)])
    if mu <= 0 or lam + mu <= 0:
        raise ValueError(f"non-elliptic elasticity tensor (lambda={lam:.4g}, mu={mu:.4g})")
    return float(lam / (2 * (lam + mu)))


# ----------------------------------------------------------------- lattice side


def dislocation_config(lattice: LatticeSpec, R_DOM: float, spec: DislocationSpec) -> ReferenceConfig:
    cfg = build_lattice(lattice, R_DOM)
    if np.any(spec.on_cut(cfg.positions, 1e-9)):
        raise ValueError("branch cut intersects the lattice; move the core")
    return ReferenceConfig(lattice, cfg.ints, R_DOM, homogeneous=False, R_DEF=spec.r_hat,
                           center=np.asarray(spec.core, float), defect=spec.to_dict())


@dataclass
class PredictorField:
    u0: np.ndarray
    table: np.ndarray  # slip-remapped neighbour table
    offsets: np.ndarray

    def strains(self, config: ReferenceConfig) -> np.ndarray:
        return slip_strain_from_table(config, self.u0, self.table, self.offsets)


def slip_table(config: ReferenceConfig, u0: np.ndarray, offsets: np.ndarray, b) -> np.ndarray:
    """Neighbour table where l + rho is replaced by l + rho -/+ b when that matches rho better.

    Across the cut the predictor jumps by -b, so the neighbour that continues
    the deformed crystal is the slipped one; elsewhere the plain neighbour wins.
    """
    spec = config.spec
    cell_inv = np.linalg.inv(spec.cell)
    oi = np.rint(offsets @ cell_inv.T).astype(np.int64)
    bi = np.rint(cell_inv @ np.asarray(b, float)).astype(np.int64)
    y0 = config.positions + u0
    best = config.lookup(config.ints[:, None, :] + oi[None])
    def mismatch(idx):
        d = y0[np.where(idx >= 0, idx, 0)] - y0[:, None, :] - offsets[None]
        return np.where(idx >= 0, np.linalg.norm(d, axis=-1), np.inf)
    err = mismatch(best)
    plain = best >= 0
    for shift in (bi, -bi):
        cand = config.lookup(config.ints[:, None, :] + oi[None] + shift)
        e = mismatch(cand)
        # a neighbour missing at the domain edge stays missing
        better = plain & (e < err)
        best = np.where(better, cand, best)
        err = np.where(better, e, err)
    return best


def slip_strain_from_table(config, u0, table, offsets) -> np.ndarray:
    present = table >= 0
    y0 = config.positions + u0
    e = y0[np.where(present, table, 0)] - y0[:, None, :] - offsets[None]
    e[~present] = 0.0
    return e


def slip_strain(config: ReferenceConfig, u0: np.ndarray, spec: DislocationSpec, offsets=None) -> np.ndarray:
    """Elastic strains e_rho(l) with slip-corrected differences (nearest-neighbour offsets by default)."""
    if offsets is None:
        offsets = lattice_offsets(config.spec, 1.0 + 1e-9)
    table = slip_table(config, u0, offsets, spec.b)
    return slip_strain_from_table(config, u0, table, offsets)


def naive_strain(config: ReferenceConfig, u0: np.ndarray, offsets=None) -> np.ndarray:
    if offsets is None:
        offsets = lattice_offsets(config.spec, 1.0 + 1e-9)
    oi = np.rint(offsets @ np.linalg.inv(config.spec.cell).T).astype(np.int64)
    table = config.lookup(config.ints[:, None, :] + oi[None])
    present = table >= 0
    d = u0[np.where(present, table, 0)] - u0[:, None, :]
    d[~present] = 0.0
    return d


def predictor_field(config: ReferenceConfig, spec: DislocationSpec, offsets: np.ndarray) -> PredictorField:
    u0 = core_regularized_u0(spec, config.positions)
    return PredictorField(u0, slip_table(config, u0, offsets, spec.b), np.asarray(offsets, float))
