import math

import numpy as np
import pytest

from qmmm_defects.cb_taylor import virial_derivatives
from qmmm_defects.predictor import (DislocationSpec, cle_edge_solution, core_regularized_u0, dislocation_config,
                                    naive_strain, poisson_from_cb, slip_strain, xi, xi_inverse)
from qmmm_defects.solve import decay_profile

SPEC = DislocationSpec()


def iso_tensor(lam, mu):
    I = np.eye(2)
    return (lam * np.einsum("ij,kl->ijkl", I, I)
            + mu * (np.einsum("ik,jl->ijkl", I, I) + np.einsum("il,jk->ijkl", I, I)))


@pytest.fixture(scope="module")
def disl(tri):
    cfg = dislocation_config(tri, 40.0, SPEC)
    return cfg, core_regularized_u0(SPEC, cfg.positions)


class TestContinuumSolution:
    def test_jump_across_cut(self):
        c = np.array(SPEC.core)
        for x1 in (1.0, 5.0, 30.0):
            above = cle_edge_solution(SPEC, c + [x1, 1e-10])
            below = cle_edge_solution(SPEC, c + [x1, -1e-10])
            assert np.allclose(above - below, [-SPEC.b1, 0.0], atol=1e-8)

    def test_continuous_off_cut(self):
        c = np.array(SPEC.core)
        a = cle_edge_solution(SPEC, c + [-5.0, 1e-10])
        b = cle_edge_solution(SPEC, c + [-5.0, -1e-10])
        assert np.allclose(a, b, atol=1e-8)

    def test_on_cut_rejected(self):
        with pytest.raises(ValueError):
            cle_edge_solution(SPEC, np.array(SPEC.core) + [3.0, 0.0])

    def test_gradient_decays_like_inverse_radius(self):
        h = 1e-5
        vals = []
        for r in (3.0, 10.0, 30.0, 100.0):
            for th in np.linspace(0.3, 6.0, 7):
                x = np.array(SPEC.core) + r * np.array([math.cos(th), math.sin(th)])
                g = np.array([(cle_edge_solution(SPEC, x + e) - cle_edge_solution(SPEC, x - e)) / (2 * h)
                              for e in (np.array([h, 0]), np.array([0, h]))])
                vals.append(np.linalg.norm(g) * r)
        assert max(vals) < 1.0 and min(vals) > 1e-3

    def test_navier_equation(self):
        """Mu Lap u + (lam + mu) grad div u = 0, i.e. Lap u + grad div u / (1 - 2 nu) = 0."""
        h = 0.05
        u = lambda p: cle_edge_solution(SPEC, p)
        for th in (0.7, 2.0, 4.1):
            x = np.array(SPEC.core) + 20.0 * np.array([math.cos(th), math.sin(th)])
            e1, e2 = np.array([h, 0.0]), np.array([0.0, h])
            d11 = (u(x + e1) - 2 * u(x) + u(x - e1)) / h**2
            d22 = (u(x + e2) - 2 * u(x) + u(x - e2)) / h**2
            d12 = (u(x + e1 + e2) - u(x + e1 - e2) - u(x - e1 + e2) + u(x - e1 - e2)) / (4 * h * h)
            lap = d11 + d22
            grad_div = np.array([d11[0] + d12[1], d12[0] + d22[1]])
            assert np.max(np.abs(lap + grad_div / (1 - 2 * SPEC.nu))) < 1e-6
            # the check has teeth: the wrong Poisson ratio leaves an O(r^-2) residual
            assert np.max(np.abs(lap + grad_div / (1 - 2 * 0.4))) > 1e-4

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            DislocationSpec(nu=0.5)
        with pytest.raises(ValueError):
            DislocationSpec(b=(1.0, 0.5))


class TestCoreRegularisation:
    def test_xi_roundtrip(self):
        rng = np.random.default_rng(0)
        y = np.array(SPEC.core) + rng.uniform(-3, 3, (200, 2))
        assert np.max(np.abs(xi(SPEC, xi_inverse(SPEC, y)) - y)) < 1e-10

    def test_full_angular_shift_outside_core(self):
        x = np.array(SPEC.core) + np.array([[3.0, 0.5], [-2.5, -1.0]])
        ang = np.mod(np.arctan2(x[:, 1] - SPEC.core[1], x[:, 0] - SPEC.core[0]), 2 * np.pi)
        assert np.allclose(xi(SPEC, x), x - np.outer(SPEC.b1 * ang / (2 * np.pi), [1.0, 0.0]), atol=1e-15)

    def test_bounded_near_core(self):
        th = np.linspace(0, 2 * np.pi, 64, endpoint=False)
        ring = np.array(SPEC.core) + 0.1 * np.stack([np.cos(th), np.sin(th)], 1)
        u = core_regularized_u0(SPEC, ring)
        assert np.all(np.isfinite(u)) and np.max(np.abs(u)) < 2.0
        assert np.array_equal(core_regularized_u0(SPEC, np.array([SPEC.core])), [[0.0, 0.0]])

    def test_slipped_jump_outside_core(self):
        # the regularised field jumps by -b between x above the cut and x - b below it
        c = np.array(SPEC.core)
        for x1 in (3.0, 10.0, 25.0):
            above = core_regularized_u0(SPEC, c + [[x1, 1e-12]])
            below = core_regularized_u0(SPEC, c + [[x1 - SPEC.b1, -1e-12]])
            assert np.allclose(above - below, [[-SPEC.b1, 0.0]], atol=1e-8)


class TestPoisson:
    @pytest.mark.parametrize("lam,mu", [(1.0, 1.0), (2.0, 0.5), (0.3, 1.7)])
    def test_isotropic(self, lam, mu):
        assert poisson_from_cb(iso_tensor(lam, mu)) == pytest.approx(lam / (2 * (lam + mu)), rel=1e-13)

    def test_scale_invariant(self):
        C = iso_tensor(1.3, 0.8)
        assert poisson_from_cb(7.5 * C) == pytest.approx(poisson_from_cb(C), rel=1e-13)

    def test_non_elliptic(self):
        with pytest.raises(ValueError):
            poisson_from_cb(iso_tensor(1.0, -1.0))

    def test_eam_in_range(self, eam, tri):
        C = virial_derivatives(eam, tri, 2)[2].reshape(2, 2, 2, 2)
        assert 0.0 < poisson_from_cb(C) < 0.5


class TestLatticeStrains:
    def test_cut_avoids_sites(self, disl):
        cfg, _ = disl
        assert not np.any(SPEC.on_cut(cfg.positions, 1e-9))

    def test_slip_strain_decays(self, disl):
        cfg, u0 = disl
        e = np.max(np.linalg.norm(slip_strain(cfg, u0, SPEC), axis=-1), axis=1)
        prof = decay_profile(cfg, u0, 5.0, 30.0, values=e)
        assert prof.slope == pytest.approx(-1.0, abs=0.2)

    def test_naive_strain_carries_jump(self, disl):
        cfg, u0 = disl
        e = np.max(np.linalg.norm(naive_strain(cfg, u0), axis=-1), axis=1)
        r = cfg.radii()
        # away from the domain edge, where slipped neighbours are missing
        far = (r > 15.0) & (r < 35.0)
        # differences across the cut see the unit Burgers jump at any distance
        assert np.max(e[far]) > 0.5
        assert np.max(np.linalg.norm(slip_strain(cfg, u0, SPEC), axis=-1)[far]) < 0.1
