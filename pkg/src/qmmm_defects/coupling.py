"""QM/MM decomposition, interpolation onto the homogeneous lattice, hybrid energies and forces."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .lattice import ReferenceConfig, build_lattice, lattice_offsets, nn_table
from .refmodel import StencilSystem, pair_list

QM, MM, FF = 0, 1, 2


@dataclass(frozen=True)
class Decomposition:
    labels: np.ndarray  # QM / MM / FF per site
    buffer: np.ndarray  # bool, subset of MM
    R_QM: float
    width: float
    R_MM: float

    @property
    def qm(self):
        return self.labels == QM

    @property
    def mm(self):
        return self.labels == MM

    @property
    def ff(self):
        return self.labels == FF

    @property
    def free(self):
        return self.labels != FF

    def counts(self) -> dict:
        return {"QM": int(self.qm.sum()), "MM": int(self.mm.sum()), "FF": int(self.ff.sum()),
                "BUF": int(self.buffer.sum())}


def decompose(config: ReferenceConfig, R_QM: float, width: float, R_MM: float) -> Decomposition:
    """Label sites by distance from the defect centre: QM (r <= R_QM), MM (r <= R_MM), FF."""
    if not config.R_DEF < R_QM:
        raise ValueError("QM region must contain the defect core")
    if not (R_QM + width <= R_MM <= config.R_DOM):
        raise ValueError("need R_QM + width <= R_MM <= R_DOM")
    r = config.radii()
    labels = np.full(config.n_sites, FF, np.int8)
    labels[r <= R_MM] = MM
    labels[r <= R_QM] = QM
    buffer = (labels == MM) & (r - R_QM <= width)
    return Decomposition(labels, buffer, float(R_QM), float(width), float(R_MM))


def write_regions(path, config: ReferenceConfig, dec: Decomposition):
    names = {QM: "QM", MM: "MM", FF: "FF"}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y", "region", "buffer"])
        for i, (x, lab, b) in enumerate(zip(config.positions, dec.labels, dec.buffer)):
            w.writerow([i, x[0], x[1], names[int(lab)], int(b)])


# -------------------------------------------------------------- interpolation


@dataclass
class Interpolator:
    """Linear map from fields on a defective configuration to the homogeneous lattice."""

    config: ReferenceConfig
    hom: ReferenceConfig
    matrix: sp.csr_matrix  # (n_hom, n_def)
    common: np.ndarray  # hom index -> defective index or -1

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(u, float)

    def transpose(self, g: np.ndarray) -> np.ndarray:
        return self.matrix.T @ np.asarray(g, float)


def build_interpolator(config: ReferenceConfig) -> Interpolator:
    hom = build_lattice(config.spec, config.R_DOM)
    hom = ReferenceConfig(hom.spec, hom.ints, hom.R_DOM, center=config.center)
    common = config.lookup(hom.ints)
    rows, cols, vals = [], [], []
    have = np.flatnonzero(common >= 0)
    rows.append(have)
    cols.append(common[have])
    vals.append(np.ones(len(have)))
    nbrs = nn_table(hom)
    for h in np.flatnonzero(common < 0):
        nb = nbrs[h]
        nb = nb[nb >= 0]
        src = common[nb]
        src = src[src >= 0]
        if len(src) == 0:
            raise ValueError("missing site without neighbours in the defective configuration")
        rows.append(np.full(len(src), h))
        cols.append(src)
        vals.append(np.full(len(src), 1.0 / len(src)))
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(hom.n_sites, config.n_sites))
    return Interpolator(config, hom, M, common)


def interpolate_Ih(config: ReferenceConfig, u: np.ndarray) -> np.ndarray:
    return build_interpolator(config)(u)


# ----------------------------------------------------------------- hybrid model


@dataclass
class HybridSpec:
    """Everything needed to evaluate E^H, E^GFC and F^H on one decomposition.

    ``mm_table`` optionally replaces the homogeneous neighbour table of the MM
    stencils (slip-remapped tables for dislocations).
    """

    config: ReferenceConfig
    decomposition: Decomposition
    reference: object
    mm: object  # site potential on mm offsets
    u0: np.ndarray | None = None
    mm_table: np.ndarray | None = None
    interp: Interpolator | None = None
    dead_load_source: str = "homogeneous"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        cfg = self.config
        dec = self.decomposition
        if self.u0 is None:
            self.u0 = np.zeros((cfg.n_sites, cfg.dim))
        if self.interp is None:
            self.interp = build_interpolator(cfg)
        R_ref = self.reference.params.R_cut if hasattr(self.reference, "params") else self.reference.R_cut
        if dec.width < R_ref:
            raise ValueError("buffer narrower than the reference interaction range")
        hom = self.interp.hom
        self.u0_hom = self.interp(self.u0)
        table = StencilSystem.from_config(hom, self.mm.offsets).table if self.mm_table is None else self.mm_table
        self.stencils = StencilSystem(table, self.mm.offsets)
        r_h = hom.radii()
        # remapped tables can reach further than the nominal stencil radius
        pres = self.stencils.present
        span = np.linalg.norm(hom.positions[self.stencils.safe] - hom.positions[:, None, :], axis=-1)
        reach = float(np.max(span[pres], initial=0.0))
        self.mm_sites = np.flatnonzero((r_h > dec.R_QM) & (r_h <= dec.R_MM + reach + 1e-9))
        # forces on MM sites only involve stencils centred within reach of them
        self.force_sites = np.flatnonzero((r_h > dec.R_QM - reach - 1e-9) & (r_h <= dec.R_MM + reach + 1e-9))
        self.active = dec.qm | dec.buffer
        self.x = cfg.positions + self.u0
        self.x_hom = hom.positions + self.u0_hom
        self.qm_weights = dec.qm.astype(float)
        self.beta = (cfg.radii() >= dec.R_QM / 2).astype(float)
        # per-site reference energies; differences are formed before summing
        self._E0_qm = self._qm(self.x)[0]
        self._E0_mm = self._mm(self.x_hom)[0]

    # pair list of the QM subsystem is rebuilt per call; it is cheap at these sizes
    def _qm(self, y, weights=None):
        w = self.qm_weights if weights is None else weights
        pairs = pair_list(y, self.reference.params.R_cut, self.active)
        return self.reference.evaluate(y, w, self.active, pairs)

    def _mm(self, yh, sites=None):
        sites = self.mm_sites if sites is None else sites
        return self.stencils.evaluate(self.mm, yh, None, sites)

    def check(self, u):
        u = np.asarray(u, float)
        if np.any(u[self.decomposition.ff] != 0):
            raise ValueError("displacement must vanish on the far field")
        return u

    def energy_and_gradient(self, u):
        u = self.check(u)
        Eq, gq = self._qm(self.x + u)
        Em, gm = self._mm(self.x_hom + self.interp(u))
        E = float(self.qm_weights @ (Eq - self._E0_qm)) + float(np.sum(Em - self._E0_mm))
        grad = gq + self.interp.transpose(gm)
        grad[self.decomposition.ff] = 0.0
        return E, grad

    def companion(self) -> "HybridSpec":
        """Same decomposition and models on the defect-free lattice without predictor."""
        hom = self.interp.hom
        dec = self.decomposition
        return HybridSpec(hom, decompose(hom, dec.R_QM, dec.width, dec.R_MM), self.reference, self.mm,
                          dead_load_source="self")

    @property
    def dead_load(self) -> np.ndarray:
        """g = dE^H(0), taken on the defect-free companion by default and mapped onto this configuration."""
        if "g" not in self._cache:
            zero = np.zeros_like(self.u0)
            if self.dead_load_source == "homogeneous" and not self.config.homogeneous:
                comp = self.companion()
                gh = comp.energy_and_gradient(np.zeros_like(comp.u0))[1]
                g = zero.copy()
                have = self.interp.common >= 0
                g[self.interp.common[have]] = gh[have]
                g[self.decomposition.ff] = 0.0
            elif self.dead_load_source in ("homogeneous", "self", "defective"):
                g = self.energy_and_gradient(zero)[1]
            else:
                raise ValueError(f"unknown dead load source {self.dead_load_source}")
            self._cache["g"] = g
        return self._cache["g"]

    @property
    def residual_at_zero(self) -> np.ndarray:
        """dE^H(0) on this configuration itself (defect forces plus ghost forces)."""
        if "r0" not in self._cache:
            self._cache["r0"] = self.energy_and_gradient(np.zeros_like(self.u0))[1]
        return self._cache["r0"]

    def forces(self, u):
        u = self.check(u)
        dec = self.decomposition
        qm_sys = self.active.astype(float)
        gq = self._qm(self.x + u, qm_sys)[1]
        gm = self._mm(self.x_hom + self.interp(u), self.force_sites)[1]
        F = np.zeros_like(u)
        F[dec.qm] = -gq[dec.qm]
        mm_idx = np.flatnonzero(dec.mm)
        hom_idx = self.interp.hom.lookup(self.config.ints[mm_idx])
        F[mm_idx] = -gm[hom_idx]
        return F


def hybrid_energy(spec: HybridSpec, u) -> float:
    return spec.energy_and_gradient(u)[0]


def hybrid_gradient(spec: HybridSpec, u) -> np.ndarray:
    return spec.energy_and_gradient(u)[1]


def ghost_force_field(spec: HybridSpec) -> np.ndarray:
    """-dE^H(0): residual forces of the uncorrected hybrid energy at u = 0."""
    return -spec.residual_at_zero


def hybrid_energy_gfc(spec: HybridSpec, u, with_gradient: bool = False):
    """E^GFC(u) = E^H(u) - sum_l g(l) beta(l) u(l) with the cached dead load g."""
    E, grad = spec.energy_and_gradient(u)
    load = spec.dead_load * spec.beta[:, None]
    E -= float(np.sum(load * u))
    if with_gradient:
        grad = grad - load
        grad[spec.decomposition.ff] = 0.0
        return E, grad
    return E


def hybrid_forces(spec: HybridSpec, u) -> np.ndarray:
    return spec.forces(u)


def write_ghost_forces(path, config: ReferenceConfig, f: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y", "fx", "fy"])
        for i, (x, v) in enumerate(zip(config.positions, f)):
            w.writerow([i, repr(float(x[0])), repr(float(x[1])), repr(float(v[0])), repr(float(v[1]))])


def interface_distance(config: ReferenceConfig, dec: Decomposition) -> np.ndarray:
    """Signed distance of each site to the QM/MM interface sphere."""
    return config.radii() - dec.R_QM


def mm_offsets(R_cut: float, config: ReferenceConfig):
    return lattice_offsets(config.spec, R_cut)
