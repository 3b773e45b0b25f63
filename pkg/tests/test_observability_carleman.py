import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastic_bcm.mesh_materials import Bounds, ConfigurationError, build_grid, make_material
from elastic_bcm.observability_carleman import (
    ThresholdError,
    carleman_decomposition,
    check_rho_condition,
    constants,
    empirical_observability,
    gamma_faces,
    gamma_region,
    manufactured_field,
    max_grad_l,
    observation_ratio,
    random_initial_data,
)
from helpers import bump_density

UNIT = Bounds(rho1=1.0, mu0=1.0, mu1=1.0, lambda0=0.0, lambda1=0.0)


def test_unit_square_constants():
    g = build_grid(2, 16)
    c = constants(UNIT, g, 1.0, 1.0, 1.0)
    assert (c.C0, c.C1, c.C2, c.C3) == (1.0, 4.0, 16.0, 2.0)
    assert c.Tmin == 64.0
    assert c.script_C == 1
    assert np.isclose(c.max_grad_l, 2 * math.sqrt(2))
    assert np.isclose(max_grad_l(g, [-1, -1]), 2 * math.sqrt(2))


def test_prefactor_threshold():
    c = constants(UNIT, build_grid(2, 8), 1.0, 1.0, 1.0)
    with pytest.raises(ThresholdError):
        c.prefactor(64.0)
    assert np.isclose(c.prefactor(128.0), 4 * 2 / (128 - 64))


def test_rho2_saturation():
    g = build_grid(2, 8)
    # C0 = min(rho2, c1) stops growing once rho2 passes c1
    assert constants(UNIT, g, 1.0, 0.5, 0.25).C0 == 0.25
    assert constants(UNIT, g, 1.0, 0.5, 4.0).C0 == 0.5


def test_bad_constants_rejected():
    g = build_grid(2, 8)
    with pytest.raises(ConfigurationError):
        constants(UNIT, g, 0.0, 1.0, 1.0)
    with pytest.raises(ConfigurationError):
        constants(UNIT, g, 1.0, 1.0, 1.0, tau=0.0)


def test_gamma_faces_follow_x0():
    g = build_grid(2, 9)
    assert gamma_faces(g, [-1, -1]) == [1, 3]
    assert gamma_faces(g, [0.5, -3]) == [0, 1, 3]
    assert gamma_faces(g, [2, 2]) == [0, 2]


def test_gamma_region_reflects_with_x0():
    g = build_grid(2, 9)
    a = gamma_region(g, [-1, -1])
    b = gamma_region(g, [2, 2])
    pts = g.boundary_coords()
    ref = {tuple(np.round(1 - p, 12)) for p in pts[a]}
    assert ref == {tuple(np.round(p, 12)) for p in pts[b]}
    # the two illuminated faces share only the corners (1,0) and (0,1) with the other side
    assert a.sum() == 2 * 9 - 1


@given(st.floats(0.1, 10.0))
@settings(max_examples=20, deadline=None)
def test_rho_condition_scale_invariant(s):
    g = build_grid(2, 17)
    rho = bump_density(g)
    c = constants(UNIT, g, 1.0, 1.0, 1.0)
    a = check_rho_condition(make_material(rho, 1.0, 0.0, g), c, g).min_value
    b = check_rho_condition(make_material(s * rho, 1.0, 0.0, g), c, g).min_value
    assert np.isclose(a, b, rtol=1e-12)


def test_rho_condition_constant_and_steep():
    g = build_grid(2, 33)
    c = constants(UNIT, g, 1.0, 1.0, 0.5)
    rep = check_rho_condition(make_material(1.0, 1.0, 0.0, g), c, g)
    assert np.isclose(rep.min_value, 1.0) and rep.ok
    X = g.coords()
    steep = np.exp(-4 * (X[0] + X[1]))  # ∇ρ/ρ = -(4, 4), opposing ∇l
    rep = check_rho_condition(make_material(steep, 1.0, 0.0, g), c, g)
    assert not rep.ok


def test_zero_field_decomposition():
    g = build_grid(2, 17)
    m = make_material(bump_density(g), 1.0, 1.0, g)
    c = constants(m.bounds, g, 1.0, 1.0, 1.0, tau=0.5)
    z = np.zeros((2,) + g.shape)
    dec = carleman_decomposition(z, z, m, c, g)
    assert dec.defect == 0.0
    assert np.all(dec.S1 == 0) and np.all(dec.S2 == 0)


def test_decomposition_converges_second_order():
    defects = []
    for n in (64, 128):
        g = build_grid(2, n)
        X = g.coords()
        m = make_material(bump_density(g), 1 + 0.1 * np.sin(np.pi * X[0]) * np.cos(np.pi * X[1]), 1.0, g)
        c = constants(m.bounds, g, 1.0, 1.0, 1.0, tau=0.5)
        w, wtt = manufactured_field(g)
        dec = carleman_decomposition(w, wtt, m, c, g)
        assert dec.sos_holds
        defects.append(dec.defect)
    order = math.log(defects[0] / defects[1]) / math.log(127 / 63)
    assert 1.7 <= order <= 2.3


def test_random_data_vanishes_on_boundary():
    g = build_grid(2, 12)
    u = random_initial_data(g, np.random.default_rng(3))
    assert np.all(u[:, ~g.interior_mask()] == 0)
    assert np.abs(u).max() > 0


def test_observation_ratio_scale_invariant():
    g = build_grid(2, 12)
    m = make_material(1.0, 1.0, 1.0, g)
    rng = np.random.default_rng(0)
    u0 = random_initial_data(g, rng)
    u1 = random_initial_data(g, rng)
    mask = gamma_region(g, [-1, -1])
    a = observation_ratio(m, g, u0, u1, 1.5, mask)
    b = observation_ratio(m, g, 3.0 * u0, 3.0 * u1, 1.5, mask)
    assert np.isclose(a, b, rtol=1e-10)


def test_zero_data_unobservable_and_ensemble_stabilizes():
    g = build_grid(2, 12)
    m = make_material(1.0, 1.0, 1.0, g)
    z = np.zeros((2,) + g.shape)
    assert observation_ratio(m, g, z, z, 1.0, gamma_region(g, [-1, -1])) == math.inf
    c = constants(m.bounds, g, 1.0, 1.0, 1.0)
    stats = empirical_observability(m, g, c, 2.0, 16, seed=1)
    assert stats.unobservable == 0
    assert np.all(stats.ratios > 0)
    assert stats.stabilization < 0.2
    again = empirical_observability(m, g, c, 2.0, 16, seed=1)
    assert np.array_equal(stats.ratios, again.ratios)
    with pytest.raises(ConfigurationError):
        empirical_observability(m, g, c, 0.0, 4, seed=1)
