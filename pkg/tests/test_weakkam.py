from __future__ import annotations

import numpy as np
import pytest

from oracles import CircleDP, standard_S, standard_stilde
from twistkam.action import action_sum
from twistkam.dynamics import shift
from twistkam.errors import NotInAubry
from twistkam.genfun import make_family
from twistkam.grids import TorusGrid
from twistkam.weakkam import (CohomologyClass, alpha, alpha_profile, aubry_partner, dual_aubry_graph,
                              lattice_box, mane, mane_matrix, potential_audits, stilde, subaction_violation,
                              twist_by_cocycle)

def test_cohomology_class_rejects_nonfinite():
    with pytest.raises(ValueError):
        CohomologyClass([np.nan])
    assert CohomologyClass(0.5).c.shape == (1,)


def test_lattice_box():
    assert lattice_box(1, 2).ravel().tolist() == [-2, -1, 0, 1, 2]
    assert lattice_box(2, 1).shape == (9, 2)


# ---------------------------------------------------------------------------
# twisting


def test_twist_by_cocycle_examples(quad1, standard):
    assert float(twist_by_cocycle(quad1, 0.5)(0.0, 1.0)) == pytest.approx(0.0, abs=1e-15)
    S0 = twist_by_cocycle(standard, 0.0)
    x, y = np.random.default_rng(0).uniform(-1, 2, (2, 20, 1))
    np.testing.assert_array_equal(S0(x, y), standard(x, y))


def test_twist_preserves_extremals(standard):
    Sc = twist_by_cocycle(standard, 0.3)
    x0, x1 = np.random.default_rng(1).uniform(-1, 2, (2, 30, 1))
    np.testing.assert_allclose(shift(Sc, x0, x1), shift(standard, x0, x1), atol=1e-10)


# ---------------------------------------------------------------------------
# stilde and alpha


def test_stilde_quadratic_examples(quad1, quad2):
    est = stilde(quad1, 0.5, 2, 1)
    assert est.value == pytest.approx(-0.125, abs=1e-12)
    assert est.witness.N == 2 and est.witness.r.tolist() == [1.0]
    zero = stilde(quad1, 0.0, 3, 2)
    assert zero.value == pytest.approx(0.0, abs=1e-14)
    assert zero.witness.N == 1 and zero.witness.r.tolist() == [0.0]
    assert stilde(quad2, [0, 1], 2, 1).value == pytest.approx(-0.25, abs=1e-12)


def test_stilde_witness_reproduces_value(standard, coupled):
    for S, c in ((standard, [0.0]), (standard, [0.4]), (coupled, [0.5, 0.0])):
        est = stilde(S, c, 3, 1)
        w = est.witness
        Sc = twist_by_cocycle(S, c)
        assert float(action_sum(Sc, w.segment.points)) / w.N == pytest.approx(est.value, abs=1e-10)
        np.testing.assert_allclose(w.segment.points[-1] - w.segment.points[0], w.r, atol=1e-12)


def test_stilde_standard_closed_form(standard):
    assert stilde(standard, 0.0, 6, 2).value == pytest.approx(standard_stilde(1.0), abs=1e-12)


@pytest.mark.parametrize("c", [0.0, 0.3, 0.5])
def test_stilde_monotone_in_truncation(standard, c):
    vals = [stilde(standard, c, N, R).value for N, R in ((1, 0), (2, 1), (3, 1), (4, 2))]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


def test_stilde_rejects_bad_truncation(quad1):
    with pytest.raises(ValueError):
        stilde(quad1, 0.0, 0, 1)


def test_alpha_profile_quadratic(quad1):
    prof = alpha_profile(quad1, [[-1], [-0.5], [0], [0.5], [1]], 4, 4)
    np.testing.assert_allclose(prof.alpha, 0.5 * prof.classes[:, 0] ** 2, atol=1e-9)
    assert prof.convexity_violation <= 1e-8
    ratios = [r for _, r in prof.superlinearity]
    assert all(b > a for a, b in zip(ratios, ratios[1:]))
    rows = list(prof.rows())
    assert rows[3][:2] == (0.5, pytest.approx(0.125, abs=1e-9))


def test_alpha_anisotropic(quad2):
    assert alpha(quad2, [0, 1], 2, 1).value == pytest.approx(0.25, abs=1e-9)


def test_alpha_standard_against_dp(standard):
    a = alpha(standard, 0.0, 6, 2).value
    dp = CircleDP(standard_S(1.0), res=256, N_max=6, R_max=2)
    cycle_min = dp.cycle_mean(np.arange(16) / 16)
    assert a == pytest.approx(1 / (4 * np.pi**2), abs=1e-12)
    assert -a == pytest.approx(cycle_min, abs=1e-9)


def test_alpha_convex_standard(standard):
    prof = alpha_profile(standard, [[-0.5], [-0.25], [0], [0.25], [0.5]], 4, 2)
    assert prof.convexity_violation <= 1e-8 + 2 / 4


# ---------------------------------------------------------------------------
# Mane potential


def test_mane_quadratic_examples(quad1):
    est = mane(quad1, 0.5, 0.0, 0.5, 3, 1, -0.125)
    assert est.value == pytest.approx(0.0, abs=1e-14)
    assert est.witness.N == 1 and est.witness.r.tolist() == [0.0]
    assert mane(quad1, 0.0, 0.0, 0.0, 3, 1, 0.0).value == pytest.approx(0.0, abs=1e-14)
    assert est.allowance == pytest.approx(1 / 3)


def test_mane_witness_reproduces_value(standard):
    s = stilde(standard, 0.0, 4, 1).value
    est = mane(standard, 0.0, 0.1, 0.7, 4, 1, s)
    w = est.witness
    assert float(action_sum(standard, w.segment.points)) - w.N * s == pytest.approx(est.value, abs=1e-10)
    np.testing.assert_allclose(w.segment.points[-1], 0.7 + w.r, atol=1e-12)


def test_mane_matches_dp_sample(standard):
    s = standard_stilde(1.0)
    pts = np.array([0.0, 0.25, 0.625])
    pi = mane_matrix(standard, 0.0, pts, 6, 2, s)
    dp = CircleDP(standard_S(1.0), res=256, N_max=6, R_max=2)
    for i, x in enumerate(pts):
        np.testing.assert_allclose(pi[i], dp.mane(x, pts, s), atol=1e-9)


def test_normalized_cycle_nonnegative(standard):
    s = stilde(standard, 0.0, 4, 1).value
    pts = np.linspace(0, 1, 9, endpoint=False)
    diag = np.diag(mane_matrix(standard, 0.0, pts, 4, 1, s))
    assert diag.min() >= -1e-9


def test_subaction_audit(standard):
    s = stilde(standard, 0.0, 4, 1).value
    pts = np.linspace(0, 1, 8, endpoint=False)
    assert subaction_violation(standard, 0.0, 0.5, pts, 4, 1, s) <= 1e-9


# ---------------------------------------------------------------------------
# Aubry set


def test_aubry_partner_quadratic(quad1):
    smp = aubry_partner(quad1, 0.5, 0.2, 4, 2)
    assert smp.y[0] == pytest.approx(0.7, abs=1e-9)
    assert smp.p[0] == pytest.approx(0.5, abs=1e-9)
    zero = aubry_partner(quad1, 0.0, 0.37, 3, 1)
    assert zero.y[0] == pytest.approx(0.37, abs=1e-12)
    assert zero.p[0] == pytest.approx(0.0, abs=1e-12)


def test_aubry_partner_standard_fixed_point(standard):
    smp = aubry_partner(standard, 0.0, 0.5, 6, 2)
    assert smp.y[0] == pytest.approx(0.5, abs=1e-8)
    assert smp.p[0] == pytest.approx(0.0, abs=1e-8)
    assert smp.action_identity_res <= 1e-8 and smp.antisymmetry_res <= 1e-8
    dp = CircleDP(standard_S(1.0), res=256, N_max=6, R_max=2)
    assert dp.mane(0.5, [0.5], standard_stilde(1.0))[0] == pytest.approx(0.0, abs=1e-12)


def test_aubry_partner_dual_point_exact(quad1):
    smp = aubry_partner(quad1, 0.5, 0.1, 4, 2)
    np.testing.assert_array_equal(smp.p, -quad1.d1(smp.x, smp.y))


def test_not_in_aubry(standard):
    # the unstable fixed point x = 0 is far from the Aubry set at c = 0
    with pytest.raises(NotInAubry):
        aubry_partner(standard, 0.0, 0.0, 4, 1, indicator_tol=1e-3)


@pytest.mark.parametrize("c, x", [(0.5, 0.2), (0.25, 0.6), (0.0, 0.1)])
def test_aubry_invariance_integrable(quad1, c, x):
    smp = aubry_partner(quad1, c, x, 4, 2)
    nxt = aubry_partner(quad1, c, smp.y, 4, 2)
    assert nxt.y[0] == pytest.approx(float(shift(quad1, smp.x, smp.y)[0]), abs=1e-6)
    assert nxt.action_identity_res <= 1e-6 and nxt.antisymmetry_res <= 1e-6


def test_dual_aubry_graph_quadratic(quad1, quad2):
    g = dual_aubry_graph(quad1, 0.5, TorusGrid.make(1, 64), 4, 2)
    assert g.present.all()
    np.testing.assert_allclose(g.p, 0.5, atol=1e-9)
    assert g.audits["invariance_residual"] <= 1e-9
    g2 = dual_aubry_graph(quad2, [0, 1], TorusGrid.make(2, 16), 2, 2)
    assert g2.present.all()
    np.testing.assert_allclose(g2.p, np.tile([0.0, 1.0], (256, 1)), atol=1e-9)


def test_dual_aubry_graph_standard(standard):
    g = dual_aubry_graph(standard, 0.0, TorusGrid.make(1, 16), 6, 2)
    assert g.present.any()
    # the minimizing fixed point carries p = 0
    i = int(np.argmin(np.abs(g.grid.points[:, 0] - 0.5)))
    assert g.status[i] == "ok" and abs(g.p[i, 0]) <= 1e-8
    assert 0 < g.audits["present_fraction"] <= 1


# ---------------------------------------------------------------------------
# potential audits


def test_potential_audits_quadratic_truncation_allowance(quad1):
    rng = np.random.default_rng(5)
    triples = rng.uniform(0, 1, (6, 3))
    rep = potential_audits(quad1, 0.5, triples, 16, 8, stilde_est=-0.125)
    assert rep.additivity_residual <= 2 / 16
    assert rep.antisymmetry_residual <= 2 / 16
    assert rep.triangle_violation >= -1e-9


def test_potential_audits_quadratic_commensurate(quad1):
    # every difference lies in Z / 2, reachable as n c + r with n <= N_max
    triples = np.array([[0.0, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.0, 0.5]])
    rep = potential_audits(quad1, 0.5, triples, 4, 2, stilde_est=-0.125)
    assert rep.additivity_residual <= 1e-9
    assert rep.antisymmetry_residual <= 1e-9


def test_potential_audits_standard_conjugate_points(standard):
    rng = np.random.default_rng(0)
    grid = np.arange(16) / 16
    triples = grid[rng.integers(0, 16, (40, 3))]
    smp = aubry_partner(standard, 0.0, 0.5, 6, 2)
    rep = potential_audits(standard, 0.0, triples, 6, 2, stilde_est=standard_stilde(1.0), aubry_samples=[smp])
    assert rep.triangle_violation >= -1e-9
    assert rep.additivity_residual > 0.01
    assert rep.stilde_lower_violation >= -1e-9
    assert rep.displacement_bound <= 1e-8
    assert np.isfinite(rep.lipschitz) and rep.lipschitz > 0
    assert set(rep.as_dict()) >= {"triangle_violation", "triangle_same_truncation", "lipschitz"}


def test_mane_semicontinuity_in_class(quad1):
    # pi_{c_n}(x, y) along c_n -> c stays below pi_c(x, y) + o(1)
    x, y = 0.1, 0.6
    target = mane(quad1, 0.5, x, y, 4, 2, -0.125).value
    for c in (0.5 + 1e-2, 0.5 + 1e-3, 0.5 + 1e-4):
        s = stilde(quad1, c, 4, 2).value
        assert mane(quad1, c, x, y, 4, 2, s).value <= target + 10 * abs(c - 0.5) + 1e-9


def test_stilde_coupled_bounded_by_integrable(coupled):
    # the coupling only lowers the potential minimum; stilde is finite and below the kinetic part
    s = stilde(coupled, [0.0, 0.0], 2, 1).value
    assert np.isfinite(s) and s < 0


def test_stilde_single_step_truncation():
    S = make_family({"family": "standard", "K": 1.0})
    assert stilde(S, [0.0], 1, 0).witness.N == 1
