import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastic_bcm.cgo import (
    NumericalError,
    UnsupportedCaseError,
    analytic_traction,
    certify_condition,
    discrete_lift,
    elastostatic_residual,
    make_probe,
    null_amplitude,
    perpendicular,
)
from elastic_bcm.elastic_forward import ElasticOperator, fd_traction_field
from elastic_bcm.mesh_materials import build_grid, make_material, preset_field

xi_2d = st.tuples(st.floats(-20, 20), st.floats(-20, 20)).filter(lambda v: np.hypot(*v) > 1e-3)
xi_3d = st.tuples(st.floats(-20, 20), st.floats(-20, 20), st.floats(-20, 20)).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


def test_axis_frequency_probe():
    g = build_grid(2, 6)
    m = make_material(1.0, 1.0, 1.0, g)
    k = 3.0
    p = make_probe([k, 0.0], g, m)
    assert np.allclose(p.eta, [0, k])
    assert np.allclose(p.theta, [k / 2, 1j * k / 2])
    # ι ∝ (1, i) up to a unit-modulus factor
    ratio = p.iota[1] / p.iota[0]
    assert np.isclose(ratio, 1j)
    assert np.isclose(p.iota @ p.theta, 0)
    assert np.isclose(p.iota_sq, 1.0)


@given(xi_2d)
@settings(max_examples=50, deadline=None)
def test_null_space_2d(xi):
    xi = np.array(xi)
    eta = perpendicular(xi)
    assert np.isclose(np.linalg.norm(eta), np.linalg.norm(xi))
    assert abs(eta @ xi) <= 1e-12 * (xi @ xi)
    theta = 0.5 * (xi + 1j * eta)
    assert abs(theta @ theta) <= 1e-12 * (xi @ xi)
    iota = null_amplitude(theta)
    assert abs(iota @ theta) <= 1e-14 * np.linalg.norm(theta) + 1e-300


@given(xi_3d)
@settings(max_examples=50, deadline=None)
def test_null_space_3d(xi):
    xi = np.array(xi)
    theta = 0.5 * (xi + 1j * perpendicular(xi))
    iota = null_amplitude(theta)
    assert abs(iota @ theta) <= 1e-14 * np.linalg.norm(theta)
    assert np.isclose(np.linalg.norm(iota), 1.0)


def test_zero_frequency_probe_is_constant():
    g = build_grid(2, 6)
    m = make_material(1.0, 1.0, 1.0, g)
    p = make_probe([0.0, 0.0], g, m)
    assert np.allclose(p.phi, p.iota[:, None, None])
    assert np.all(p.trace1_phi == 0)
    assert elastostatic_residual(p, m, g) == 0.0


@given(xi_2d)
@settings(max_examples=20, deadline=None)
def test_phi_psi_product(xi):
    g = build_grid(2, 7)
    m = make_material(1.0, 1.0, 1.0, g)
    p = make_probe(xi, g, m)
    prod = np.einsum("c...,c...->...", p.phi, p.psi)
    phase = np.exp(1j * np.tensordot(np.array(xi), g.coords(), axes=(0, 0)))
    assert np.abs(prod - p.iota_sq * phase).max() <= 1e-12 * max(1.0, np.abs(prod).max())
    assert np.abs(np.imag(prod * np.conj(phase))).max() <= 1e-12 * max(1.0, np.abs(prod).max())


def test_condition_vanishes_for_constant_mu():
    g = build_grid(2, 16)
    lam = preset_field("linear_x", g, base=1.0, slope=2.0)
    m = make_material(1.0, 1.0, lam, g)
    p = make_probe([2 * np.pi, 1.0], g, m)
    assert certify_condition(p, m, g) <= 1e-12


def test_condition_positive_for_variable_mu():
    g = build_grid(2, 16)
    mu = preset_field("linear_x", g, base=1.0, slope=0.5)
    m = make_material(1.0, mu, 1.0, g)
    with pytest.raises(UnsupportedCaseError):
        make_probe([2 * np.pi, 0], g, m)
    p = make_probe([2 * np.pi, 0], g, m, require_constant_mu=False)
    assert certify_condition(p, m, g) > 0.1
    p0 = make_probe([0, 0], g, m, require_constant_mu=False)
    assert certify_condition(p0, m, g) == 0.0


def test_elastostatic_residual_second_order():
    res = []
    for n in (32, 64, 128):
        g = build_grid(2, n)
        m = make_material(1.0, 1.0, 1.0, g)
        res.append(elastostatic_residual(make_probe([2 * np.pi, 0], g, m), m, g))
    orders = np.log2(np.array(res[:-1]) / np.array(res[1:]))
    assert np.all((orders > 1.7) & (orders < 2.3))


def test_corrupted_amplitude_residual_persists():
    # ι = e₁, θ = (π, iπ): the operator leaves -(λ+μ)(ι·θ)θ e^{iθ·x}, of size
    # 2·π·π√2·e^{-πy}; normalised by |ξ|²|ι| = 4π² this is e^{-πy}/√2, largest at
    # the lowest evaluated row y = 2h
    for n in (32, 64):
        g = build_grid(2, n)
        m = make_material(1.0, 1.0, 1.0, g)
        p = make_probe([2 * np.pi, 0], g, m, iota=np.array([1.0, 0.0]))
        exact = np.exp(-np.pi * 2 * g.h[1]) / np.sqrt(2)
        assert abs(elastostatic_residual(p, m, g) - exact) < 0.01 * exact


def test_analytic_traction_matches_fd():
    errs = []
    for n in (17, 33):
        g = build_grid(2, n)
        m = make_material(1.0, 1.0, 0.5, g)
        p = make_probe([2.0, 1.0], g, m)
        fd = fd_traction_field(p.phi.real, m, g) + 1j * fd_traction_field(p.phi.imag, m, g)
        errs.append(np.abs(fd - p.trace1_phi).max())
    assert errs[0] / errs[1] > 3.0


def test_discrete_lift_preserves_boundary_values():
    g = build_grid(2, 12)
    m = make_material(1.0, 1.0, 1.0, g)
    op = ElasticOperator(g, m)
    p = make_probe([2 * np.pi, 0], g, m)
    q = discrete_lift(p, op)
    assert np.array_equal(q.trace0_phi, p.trace0_phi)
    assert np.allclose(op.boundary_values(q.phi), p.trace0_phi)
    # interior discrete equilibrium
    r = op.K @ q.phi.reshape(-1)
    assert np.abs(r[op.idofs]).max() <= 1e-10 * np.abs(r).max()
    # O(h²) close to the analytic field
    assert np.abs(q.phi - p.phi).max() < 0.05


def test_probe_json(tmp_path):
    g = build_grid(2, 6)
    m = make_material(1.0, 1.0, 1.0, g)
    p = make_probe([1.0, 2.0], g, m)
    p.save(tmp_path / "p.json")
    import json

    data = json.loads((tmp_path / "p.json").read_text())
    assert data["xi"] == [1.0, 2.0] and len(data["iota"]) == 2


def test_bad_xi_shape():
    g = build_grid(2, 6)
    m = make_material(1.0, 1.0, 1.0, g)
    with pytest.raises(UnsupportedCaseError):
        make_probe([1.0, 2.0, 3.0], g, m)
    with pytest.raises(NumericalError):
        make_probe([1.0, 0.0], g, m, iota=np.zeros(2))


def test_analytic_traction_formula():
    g = build_grid(2, 5)
    m = make_material(1.0, 2.0, 0.5, g)
    amp = np.array([1.0, 1j])
    theta = np.array([1.0, 1j])
    tr = analytic_traction(amp, theta, g, m)
    assert tr.shape == (g.n_boundary, 2)
