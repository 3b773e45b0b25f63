import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastic_bcm.mesh_materials import (
    ConfigurationError,
    StructuralError,
    build_grid,
    check_admissible_H,
    collar_bump,
    lame_form_matrix,
    load_field_csv,
    make_material,
    preset_field,
    save_field_csv,
    validate_material,
)


def test_square_boundary_count_and_left_normal():
    g = build_grid(2, 4, [(0, 1), (0, 1)], (-1, -1))
    assert g.n_boundary == 12
    pure_left = g.face_mask(0) & ((g.face_weights > 0).sum(axis=1) == 1)
    assert pure_left.sum() == 2
    assert np.allclose(g.normals[pure_left], [-1, 0])
    assert np.array_equal(g.face_normal(0), [-1, 0])


def test_cube_boundary_count():
    g = build_grid(3, 4, [(0, 1)] * 3, (-1, -1, -1))
    assert g.n_boundary == 4**3 - 2**3


def test_x0_inside_box_rejected():
    with pytest.raises(ConfigurationError):
        build_grid(2, 8, [(0, 1), (0, 1)], (0.5, 0.5))


def test_too_few_nodes_rejected():
    with pytest.raises(ConfigurationError):
        build_grid(2, 2)


@given(st.integers(3, 20), st.integers(3, 20), st.floats(0.3, 3.0), st.floats(0.3, 3.0))
@settings(max_examples=30, deadline=None)
def test_quadrature_weights_sum_to_volume_and_perimeter(nx, ny, a, b):
    g = build_grid(2, (nx, ny), [(0, a), (0, b)])
    assert np.isclose(g.node_weights.sum(), a * b)
    assert np.isclose(g.boundary_weights.sum(), 2 * (a + b))


def test_valid_constant_material():
    g = build_grid(2, 6)
    assert validate_material(make_material(1.0, 1.0, 0.0, g)).ok


def test_invalid_lame_in_3d():
    g = build_grid(3, 4)
    rep = validate_material(make_material(1.0, 1.0, -1.0, g))
    assert not rep.ok
    assert any(v.constraint == "d*lambda + 2*mu > 0" and v.value == -1.0 for v in rep.violations)


def test_zero_density_node_reported():
    g = build_grid(2, 6)
    rho = np.ones(g.shape)
    rho[2, 3] = 0.0
    rep = validate_material(make_material(rho, 1.0, 0.0, g))
    assert [(v.constraint, v.node) for v in rep.violations] == [("rho > 0", (2, 3))]


def test_validate_is_idempotent():
    g = build_grid(2, 6)
    m = make_material(np.linspace(-1, 1, 36).reshape(6, 6), 1.0, 0.0, g)
    r1, r2 = validate_material(m), validate_material(m)
    assert r1.violations == r2.violations


def test_shape_mismatch():
    g = build_grid(2, 6)
    with pytest.raises(StructuralError):
        make_material(np.ones((5, 5)), 1.0, 1.0, g)


def _literal_oracle(d, mu, lam):
    """Independent evaluation of the form on each elementary matrix pair."""
    Q = np.zeros((d * d, d * d))
    E = np.eye(d * d).reshape(d * d, d, d)
    for a in range(d * d):
        for b in range(d * d):
            A, B = E[a], E[b]
            # polarisation of q(A) = μ(|A|² + A:Aᵀ) + λ tr(A)²
            Q[a, b] = mu * (np.sum(A * B) + np.sum(A * B.T)) + lam * np.trace(A) * np.trace(B)
    return Q


@pytest.mark.parametrize("d", [2, 3])
def test_lame_form_matches_polarisation_oracle(d):
    Q = lame_form_matrix(d, np.array(1.3), np.array(0.4))
    assert np.allclose(Q, _literal_oracle(d, 1.3, 0.4))
    assert np.abs(Q - Q.T).max() == 0.0


def test_H_literal_minimum_zero_at_antisymmetric():
    g = build_grid(2, 6)
    m = make_material(1.0, 1.0, 0.0, g)
    rep = check_admissible_H(m, np.zeros(g.shape), g, 1.0, 1.0, mode="literal")
    assert abs(rep.first_min) < 1e-12
    assert rep.symmetry_defect == 0.0
    assert not rep.passes_first


def test_H_symmetric_restricted_minimum_two():
    g = build_grid(2, 6)
    m = make_material(1.0, 1.0, 0.0, g)
    rep = check_admissible_H(m, np.zeros(g.shape), g, 1.0, 1.0, mode="symmetric-restricted")
    assert np.isclose(rep.first_min, 2.0)
    assert rep.ok


def test_H_constant_coefficients_forms_coincide():
    g = build_grid(2, 8)
    m = make_material(1.0, 2.0, 0.5, g)
    X = g.coords()
    l_field = 0.5 * ((X[0] + 1) ** 2 + (X[1] + 1) ** 2)
    rep = check_admissible_H(m, l_field, g, 0.1, 0.1, mode="symmetric-restricted")
    assert np.array_equal(rep.min_eig_first, rep.min_eig_second)


def test_collar_bump_compact_support():
    g = build_grid(2, 33)
    f = collar_bump(g, center=(0.5, 0.5), radius=0.3)
    X = g.coords()
    r = np.hypot(X[0] - 0.5, X[1] - 0.5)
    assert np.all(f[r >= 0.3] == 0)
    assert f.max() <= 1.0


def test_unknown_preset():
    with pytest.raises(ConfigurationError):
        preset_field("nope", build_grid(2, 4))


def test_field_csv_roundtrip(tmp_path):
    g = build_grid(2, 5)
    f = preset_field("linear_x", g, base=2.0, slope=0.5)
    save_field_csv(tmp_path / "f.csv", f, g)
    assert np.array_equal(load_field_csv(tmp_path / "f.csv", g), f)
    with pytest.raises(StructuralError):
        load_field_csv(tmp_path / "f.csv", build_grid(2, 6))


def test_bounding_radius_origin_ball():
    assert np.isclose(build_grid(2, 4).bounding_radius(), np.sqrt(2))
