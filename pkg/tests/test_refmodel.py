import math

import numpy as np
import pytest

from qmmm_defects.lattice import apply_vacancy, build_lattice, lattice_offsets, stencil_view
from qmmm_defects.refmodel import (EAM, CollisionError, EAMParams, StencilSystem, TBParams, TightBinding,
                                   eam_site_energy, energy_difference, forces, model_from_dict,
                                   tb_hamiltonian, tb_site_energies)

from .conftest import fd_gradient

# V^h(0) of the default EAM on the triangular lattice, from the independent formula below
EAM_V0 = -1.4878174663997654


def ref_site_energy(p: EAMParams, vecs):
    """Straight transcription of the EAM formula, one neighbour at a time."""
    pair = dens = 0.0
    for v in vecs:
        r = math.hypot(*v)
        t = min(max((r - (p.R_cut - p.width)) / p.width, 0.0), 1.0)
        s = 1 - 10 * t**3 + 15 * t**4 - 6 * t**5
        pair += p.A_p * math.exp(-p.p * (r - 1)) * s
        dens += math.exp(-p.q * (r - 1)) * s
    return 0.5 * pair - p.C_e * math.sqrt(dens)


def rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


class TestEAMSiteEnergy:
    def test_homogeneous_value(self, tri):
        p = EAMParams()
        offs = lattice_offsets(tri, 3.0)
        assert ref_site_energy(p, offs) == pytest.approx(EAM_V0, rel=1e-14)
        cfg = build_lattice(tri, 4.0)
        sv = stencil_view(cfg, np.zeros((cfg.n_sites, 2)), cfg.index_of([0, 0]), 3.0)
        assert eam_site_energy(p, sv) == pytest.approx(EAM_V0, rel=1e-14)

    def test_random_stencil_matches_formula(self, eam, tri, rng):
        offs = lattice_offsets(tri, 2.5)
        for _ in range(5):
            g = rng.uniform(-0.15, 0.15, offs.shape)
            V = eam.site_potential(offs).site_energy(g)
            assert V == pytest.approx(ref_site_energy(eam.params, offs + g), rel=1e-13)

    def test_beyond_cutoff_contributes_nothing(self, eam):
        vecs = np.array([[1.0, 0.0], [0.0, 1.1]])
        base = eam.site_potential(vecs).site_energy(np.zeros_like(vecs))
        far = np.vstack([vecs, [[eam.params.R_cut + 1e-9, 0.0]], [[0.0, -3.0]]])
        assert eam.site_potential(far).site_energy(np.zeros_like(far)) == base

    def test_rotation_invariance(self, eam, tri, rng):
        offs = lattice_offsets(tri, 2.5)
        V = eam.site_potential(offs)
        g = rng.uniform(-0.1, 0.1, offs.shape)
        x = offs + g
        for theta in rng.uniform(0, 2 * np.pi, 5):
            xr = x @ rotation(theta).T
            assert V.site_energy(xr - offs) == pytest.approx(V.site_energy(g), abs=1e-12)

    def test_collision(self, eam):
        with pytest.raises(CollisionError):
            eam.site_potential(np.array([[1.0, 0.0]])).site_energy(np.array([[-1.0, 0.0]]))

    def test_gradient_fd(self, eam, tri, rng):
        offs = lattice_offsets(tri, 2.5)
        V = eam.site_potential(offs)
        g = rng.uniform(-0.1, 0.1, offs.shape)
        fd = fd_gradient(lambda x: float(V.site_energy(x)), g)
        assert np.allclose(V.site_gradient(g), fd, rtol=0, atol=1e-8)

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            EAMParams(R_cut=1.5)
        with pytest.raises(ValueError):
            EAMParams(p=-1.0)


def brute_total(p, y):
    n = len(y)
    E = 0.0
    for i in range(n):
        vecs = [y[j] - y[i] for j in range(n) if j != i and np.linalg.norm(y[j] - y[i]) <= p.R_cut]
        E += ref_site_energy(p, vecs)
    return E


class TestEnergyDifference:
    def test_zero_and_constant(self, eam, small_tri, rng):
        u0 = np.zeros((small_tri.n_sites, 2))
        assert energy_difference(eam, small_tri, u0, u0) == 0.0
        shift = np.tile([0.4, -0.3], (small_tri.n_sites, 1))
        assert energy_difference(eam, small_tri, u0, shift) == pytest.approx(0.0, abs=1e-12)

    def test_matches_direct_subtraction(self, eam, tri, rng):
        cfg = build_lattice(tri, 3.7)
        assert 40 <= cfg.n_sites <= 60
        u = np.zeros((cfg.n_sites, 2))
        core = cfg.radii() < 2.0
        u[core] = rng.uniform(-0.1, 0.1, (core.sum(), 2))
        dE = energy_difference(eam, cfg, np.zeros_like(u), u)
        direct = brute_total(eam.params, cfg.positions + u) - brute_total(eam.params, cfg.positions)
        assert dE == pytest.approx(direct, abs=1e-10)

    def test_inadmissible(self, eam, small_tri):
        u = np.zeros((small_tri.n_sites, 2))
        u[1] = small_tri.positions[0] - small_tri.positions[1] + 1e-3
        with pytest.raises(ValueError):
            energy_difference(eam, small_tri, np.zeros_like(u), u)


class TestForces:
    def test_interior_vanish_on_homogeneous(self, eam, tri):
        cfg = build_lattice(tri, 10.0)
        f = forces(eam, cfg, np.zeros((cfg.n_sites, 2)), np.zeros((cfg.n_sites, 2)))
        interior = cfg.radii() < 10.0 - 2 * eam.params.R_cut
        assert np.max(np.abs(f[interior])) < 1e-12

    def test_fd(self, eam, small_tri, rng):
        u = rng.uniform(-0.08, 0.08, (small_tri.n_sites, 2))
        u0 = np.zeros_like(u)
        f = forces(eam, small_tri, u0, u)
        fd = -fd_gradient(lambda v: energy_difference(eam, small_tri, u0, v, check=False), u)
        assert np.max(np.abs(f - fd)) / np.max(np.abs(f)) < 1e-6

    def test_vacancy_force_support(self, eam, tri):
        cfg = apply_vacancy(build_lattice(tri, 10.0), [0.0, 0.0])
        f = np.linalg.norm(forces(eam, cfg, np.zeros((cfg.n_sites, 2)), np.zeros((cfg.n_sites, 2))), axis=1)
        r = cfg.radii()
        interior = r < 10.0 - 2 * eam.params.R_cut
        # embedding couples neighbours of neighbours: support is 2 R_cut
        assert np.max(f[interior & (r > 2 * eam.params.R_cut)]) < 1e-12
        assert np.max(f[r <= eam.params.R_cut]) > 1e-2


class TestStencilSystem:
    def test_matches_position_model(self, eam, tri, rng):
        # interior sites only: stencils of boundary sites see virtual neighbours
        cfg = build_lattice(tri, 8.0)
        offs = lattice_offsets(tri, 2.5)
        system = StencilSystem.from_config(cfg, offs)
        u = np.zeros((cfg.n_sites, 2))
        core = cfg.radii() < 2.5
        u[core] = rng.uniform(-0.05, 0.05, (core.sum(), 2))
        y = cfg.positions + u
        Es, _ = system.evaluate(eam.site_potential(offs), y)
        Ep, _ = eam.evaluate(y)
        inner = cfg.radii() < 8.0 - 2.5
        assert np.allclose(Es[inner], Ep[inner], atol=1e-13)


class TestTightBinding:
    def test_sum_rule(self, tri, rng):
        p = TBParams()
        cfg = build_lattice(tri, 3.0)
        y = cfg.positions + rng.uniform(-0.05, 0.05, (cfg.n_sites, 2))
        E = tb_site_energies(p, y)
        lam = np.linalg.eigvalsh(tb_hamiltonian(p, y))
        n_occ = int(round(p.electrons_per_atom * cfg.n_sites))
        assert E.sum() == pytest.approx(lam[:n_occ].sum(), abs=1e-12)

    def test_hamiltonian_symmetric_and_cut(self, tri):
        p = TBParams()
        cfg = build_lattice(tri, 4.0)
        H = tb_hamiltonian(p, cfg.positions)
        assert np.array_equal(H, H.T)
        r = np.linalg.norm(cfg.positions[:, None] - cfg.positions[None], axis=-1)
        assert np.all(H[(r >= p.R_c)] == 0)

    def test_full_band_is_onsite(self, tri):
        # with every state occupied the partition reduces to the diagonal of H
        p = TBParams(electrons_per_atom=1.0)
        cfg = build_lattice(tri, 3.0)
        assert np.allclose(tb_site_energies(p, cfg.positions), np.diag(tb_hamiltonian(p, cfg.positions)),
                           atol=1e-12)

    def test_site_potential_gradient(self, tri, rng):
        tb = TightBinding(cluster_radius=3.0)
        offs = lattice_offsets(tri, 1.0)
        V = tb.site_potential(offs)
        g = rng.uniform(-0.05, 0.05, offs.shape)
        fd = fd_gradient(lambda x: float(V.site_energy(x)), g, h=1e-4)
        assert np.allclose(V.site_gradient(g), fd, atol=1e-6)

    @pytest.mark.xfail(strict=True, reason="single s-band at partial filling is metallic; no locality")
    def test_interior_equal(self, tri):
        cfg = build_lattice(tri, 12.0)
        E = tb_site_energies(TBParams(), cfg.positions)
        assert np.ptp(E[cfg.radii() < 2.0]) < 1e-8

    @pytest.mark.xfail(strict=True, reason="single s-band at partial filling is metallic; no locality")
    def test_far_perturbation(self, tri):
        p = TBParams()
        cfg = build_lattice(tri, 12.0)
        far = int(np.argmax(cfg.radii()))
        y = cfg.positions.copy()
        E0 = tb_site_energies(p, y)[cfg.index_of([0, 0])]
        y[far] += [0.05, 0.03]
        assert abs(tb_site_energies(p, y)[cfg.index_of([0, 0])] - E0) < 1e-6


def test_model_from_dict():
    assert isinstance(model_from_dict({"type": "eam", "p": 4.5}), EAM)
    assert isinstance(model_from_dict({"type": "tb_s"}), TightBinding)
    with pytest.raises(ValueError):
        model_from_dict({"type": "lj"})
