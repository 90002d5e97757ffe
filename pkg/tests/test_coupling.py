import numpy as np
import pytest
import scipy.sparse as sp

from qmmm_defects.cb_taylor import taylor_coefficients
from qmmm_defects.coupling import (FF, MM, QM, HybridSpec, build_interpolator, decompose, ghost_force_field,
                                   hybrid_energy, hybrid_energy_gfc, hybrid_gradient)
from qmmm_defects.lattice import apply_vacancy, build_lattice, lattice_offsets, norm_nn
from qmmm_defects.matching import fit_mlip, gen_energy_obs, scheme_weights
from qmmm_defects.mlip import BasisSpec
from qmmm_defects.refmodel import EAM, EAMParams, StencilSystem, energy_difference


@pytest.fixture(scope="module")
def vac(tri):
    return apply_vacancy(build_lattice(tri, 16.0), [0.0, 0.0])


@pytest.fixture(scope="module")
def hom(tri):
    return build_lattice(tri, 16.0)


@pytest.fixture(scope="module")
def T2(eam, tri):
    return taylor_coefficients(eam, tri, 2)


@pytest.fixture(scope="module")
def mlip(eam, tri):
    pot, _ = fit_mlip(gen_energy_obs(eam, tri, 2, weights=scheme_weights(K_E=2)), BasisSpec())
    return pot


def core_field(config, radius, scale, seed):
    rng = np.random.default_rng(seed)
    u = np.zeros((config.n_sites, 2))
    m = config.radii() < radius
    u[m] = rng.uniform(-scale, scale, (m.sum(), 2))
    return u


def fd_components(fun, u, idx, h=1e-6):
    out = []
    for i, a in idx:
        v = u.copy()
        v[i, a] += h
        ep = fun(v)
        v[i, a] -= 2 * h
        out.append((ep - fun(v)) / (2 * h))
    return np.array(out)


class TestDecompose:
    def test_counts_brute_force(self, vac):
        dec = decompose(vac, 4.0, 2.0, 12.0)
        r = [float(np.hypot(*x)) for x in vac.positions]
        assert dec.counts()["QM"] == sum(1 for s in r if s <= 4.0)
        assert dec.counts()["MM"] == sum(1 for s in r if 4.0 < s <= 12.0)
        assert dec.counts()["FF"] == sum(1 for s in r if s > 12.0)
        assert dec.counts()["BUF"] == sum(1 for s in r if 4.0 < s <= 6.0)

    def test_buffer_inside_mm(self, vac):
        dec = decompose(vac, 4.0, 4.0, 12.0)
        assert np.all(dec.labels[dec.buffer] == MM)
        assert set(np.unique(dec.labels)) == {QM, MM, FF}

    def test_invalid(self, vac):
        with pytest.raises(ValueError):
            decompose(vac, 0.5, 2.0, 12.0)  # QM must contain the vacancy
        with pytest.raises(ValueError):
            decompose(vac, 4.0, 2.0, 20.0)
        with pytest.raises(ValueError):
            decompose(vac, 4.0, 9.0, 12.0)


class TestInterpolation:
    def test_identity_on_homogeneous(self, hom):
        I = build_interpolator(hom)
        assert (I.matrix != sp.eye(hom.n_sites)).nnz == 0

    def test_constant_preserved(self, vac):
        I = build_interpolator(vac)
        u = np.tile([0.3, -0.7], (vac.n_sites, 1))
        assert np.allclose(I(u), np.tile([0.3, -0.7], (I.hom.n_sites, 1)), atol=1e-15)
        # the vacancy site takes the mean of its neighbours
        assert I.matrix.shape == (vac.n_sites + 1, vac.n_sites)

    def test_gradient_norm_bounded(self, vac):
        I = build_interpolator(vac)
        rng = np.random.default_rng(0)
        ratios = []
        for _ in range(100):
            u = rng.normal(size=(vac.n_sites, 2))
            ratios.append(norm_nn(I.hom, I(u)) / norm_nn(vac, u))
        assert max(ratios) < 2.0

    def test_transpose(self, vac):
        I = build_interpolator(vac)
        rng = np.random.default_rng(1)
        u, g = rng.normal(size=(vac.n_sites, 2)), rng.normal(size=(I.hom.n_sites, 2))
        assert np.sum(I(u) * g) == pytest.approx(np.sum(u * I.transpose(g)), rel=1e-12)


class TestHybridEnergy:
    def test_zero_at_zero(self, eam, vac, T2):
        spec = HybridSpec(vac, decompose(vac, 5.0, 4.0, 14.0), eam, T2)
        assert hybrid_energy(spec, np.zeros((vac.n_sites, 2))) == 0.0

    def test_reference_as_mm_recovers_reference(self, eam, hom, tri):
        """With the reference itself on the MM side the hybrid energy is the reference energy."""
        offs = lattice_offsets(tri, eam.params.R_cut)
        spec = HybridSpec(hom, decompose(hom, 4.0, 4.0, 14.0), eam, eam.site_potential(offs))
        u = core_field(hom, 9.0, 0.08, 2)
        assert hybrid_energy(spec, u) == pytest.approx(energy_difference(eam, hom, 0 * u, u), abs=1e-10)

    def test_far_field_must_vanish(self, eam, vac, T2):
        spec = HybridSpec(vac, decompose(vac, 5.0, 4.0, 10.0), eam, T2)
        u = np.zeros((vac.n_sites, 2))
        u[np.argmax(vac.radii())] = 0.1
        with pytest.raises(ValueError):
            hybrid_energy(spec, u)

    def test_narrow_buffer_rejected(self, eam, vac, T2):
        with pytest.raises(ValueError):
            HybridSpec(vac, decompose(vac, 5.0, 1.0, 14.0), eam, T2)

    @pytest.mark.parametrize("which", ["taylor", "mlip"])
    def test_gradient_fd(self, eam, vac, T2, mlip, which):
        mm = T2 if which == "taylor" else mlip
        spec = HybridSpec(vac, decompose(vac, 5.0, 4.0, 12.0), eam, mm)
        u = core_field(vac, 11.0, 0.05, 3)
        g = hybrid_gradient(spec, u)
        r = vac.radii()
        rng = np.random.default_rng(4)
        # sample QM, buffer and deep-MM components
        sites = np.concatenate([rng.choice(np.flatnonzero(m), 4, replace=False)
                                for m in (r < 5, (r > 5) & (r < 9), (r > 9) & (r < 12))])
        idx = [(i, a) for i in sites for a in (0, 1)]
        fd = fd_components(lambda v: hybrid_energy(spec, v), u, idx)
        got = np.array([g[i, a] for i, a in idx])
        assert np.max(np.abs(got - fd)) / np.max(np.abs(got)) < 1e-6

    def test_gfc_gradient_fd(self, eam, vac, mlip):
        spec = HybridSpec(vac, decompose(vac, 5.0, 4.0, 12.0), eam, mlip)
        u = core_field(vac, 11.0, 0.05, 5)
        _, g = hybrid_energy_gfc(spec, u, with_gradient=True)
        idx = [(i, a) for i in np.random.default_rng(6).choice(np.flatnonzero(vac.radii() < 11), 10, False)
               for a in (0, 1)]
        fd = fd_components(lambda v: hybrid_energy_gfc(spec, v), u, idx)
        got = np.array([g[i, a] for i, a in idx])
        assert np.max(np.abs(got - fd)) / np.max(np.abs(got)) < 1e-6


class TestGhostForces:
    def test_exact_taylor_small(self, eam, hom, T2):
        spec = HybridSpec(hom, decompose(hom, 6.0, 4.0, 14.0), eam, T2)
        assert np.max(np.abs(ghost_force_field(spec))) < 1e-4

    def test_mlip_ghost_force_at_interface(self, eam, hom, mlip):
        spec = HybridSpec(hom, decompose(hom, 6.0, 4.0, 14.0), eam, mlip)
        f = np.linalg.norm(ghost_force_field(spec), axis=1)
        r = hom.radii()
        assert np.max(f[r < 2.0]) < 1e-12
        assert np.max(f[np.abs(r - 6.0) < 2.5]) > 0

    def test_gfc_patch(self, eam, hom, mlip):
        spec = HybridSpec(hom, decompose(hom, 8.0, 4.0, 14.0), eam, mlip)
        _, g = hybrid_energy_gfc(spec, np.zeros((hom.n_sites, 2)), with_gradient=True)
        assert np.max(np.abs(g)) < 1e-8


class TestForceMixing:
    def test_deep_mm_is_pure_mm(self, eam, vac, mlip):
        dec = decompose(vac, 5.0, 4.0, 14.0)
        spec = HybridSpec(vac, dec, eam, mlip)
        u = core_field(vac, 12.0, 0.05, 7)
        F = spec.forces(u)
        I = build_interpolator(vac)
        system = StencilSystem.from_config(I.hom, mlip.offsets)
        g = system.evaluate(mlip, I.hom.positions + I(u))[1]
        r = vac.radii()
        deep = np.flatnonzero((r > 8.0) & (r < 10.0))
        assert np.allclose(F[deep], -g[I.hom.lookup(vac.ints[deep])], atol=1e-12)

    def test_qm_forces_are_reference(self, eam, vac, T2):
        dec = decompose(vac, 6.0, 4.0, 14.0)
        spec = HybridSpec(vac, dec, eam, T2)
        u = core_field(vac, 8.0, 0.05, 8)
        F = spec.forces(u)
        full = -eam.evaluate(vac.positions + u)[1]
        inner = vac.radii() < 6.0
        assert np.allclose(F[inner], full[inner], atol=1e-12)

    def test_not_conservative(self, eam, hom):
        """Force mixing with a different MM model has an asymmetric Jacobian across the interface."""
        offs = lattice_offsets(hom.spec, 2.2)
        other = EAM(EAMParams(p=4.6)).site_potential(offs)
        dec = decompose(hom, 5.0, 4.0, 12.0)
        spec = HybridSpec(hom, dec, eam, other)
        r = hom.radii()
        i = int(np.flatnonzero((r > 4.0) & (r <= 5.0))[0])
        u0 = np.zeros((hom.n_sites, 2))
        h = 1e-6
        asym = 0.0
        for j in np.flatnonzero((r > 5.0) & (r < 6.5))[:8]:
            if np.linalg.norm(hom.positions[i] - hom.positions[j]) > 2.2:
                continue
            dij = fd_components(lambda v: spec.forces(v)[i, 0], u0, [(j, 0)], h)[0]
            dji = fd_components(lambda v: spec.forces(v)[j, 0], u0, [(i, 0)], h)[0]
            asym = max(asym, abs(dij - dji))
        assert asym > 1e-3
