import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastic_bcm.boundary_ops import BoundaryOperator, assemble_dtn_pair, connecting_operator, k_form, make_basis
from elastic_bcm.cgo import discrete_lift, make_probe
from elastic_bcm.elastic_forward import ElasticOperator
from elastic_bcm.mesh_materials import build_grid, make_material
from elastic_bcm.reconstruction import (
    AssemblyQualityError,
    band_limited,
    fourier_sample,
    max_representable_xi,
    oracle_fourier,
    pseudo_inverse,
    reconstruct_density,
    xi_lattice,
)
from helpers import bump_density


def gram_operator(form, gram=None):
    gram = np.eye(len(form)) if gram is None else gram
    return BoundaryOperator(np.linalg.solve(gram, form), gram, gram, 1.0, {"form": form})


def test_identity_inverse():
    for method in ("truncate", "tikhonov"):
        inv = pseudo_inverse(gram_operator(np.eye(5)), method, 1e-12)
        assert np.allclose(inv.matrix(), np.eye(5))


def test_truncation_threshold():
    inv = pseudo_inverse(gram_operator(np.diag([1.0, 1e-12])), "truncate", 1e-6)
    assert inv.rank == 1
    assert np.allclose(inv.matrix(), np.diag([1.0, 0.0]))


@given(st.integers(0, 2**31 - 1), st.integers(2, 12))
@settings(max_examples=25, deadline=None)
def test_moore_penrose_identity(seed, n):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n - 1))
    form = A @ A.T  # rank n-1
    B = rng.standard_normal((n, n))
    gram = B @ B.T + n * np.eye(n)
    op = gram_operator(form, gram)
    inv = pseudo_inverse(op, "truncate", 1e-10)
    J = op.matrix
    Jp = inv.matrix()
    assert np.linalg.norm(J @ Jp @ J - J) <= 1e-8 * np.linalg.norm(J)


def test_rejects_asymmetric_and_indefinite():
    with pytest.raises(AssemblyQualityError):
        pseudo_inverse(gram_operator(np.array([[1.0, 0.5], [0.0, 1.0]])))
    with pytest.raises(AssemblyQualityError):
        pseudo_inverse(gram_operator(np.diag([1.0, -0.1])))
    with pytest.raises(ValueError):
        pseudo_inverse(gram_operator(np.eye(2)), "nope")


def test_tikhonov_filter():
    inv = pseudo_inverse(gram_operator(np.diag([2.0, 1e-3])), "tikhonov", 1e-3)
    assert np.allclose(np.sort(inv.filtered), np.sort([1 / 2.001, 1 / 2e-3]))


@given(st.complex_numbers(min_magnitude=1e-3, max_magnitude=1e3, allow_nan=False, allow_infinity=False))
@settings(max_examples=30, deadline=None)
def test_fourier_sample_scale_invariant(c):
    rng = np.random.default_rng(0)
    A = rng.standard_normal((6, 6))
    inv = pseudo_inverse(gram_operator(A @ A.T + np.eye(6)))
    kp = rng.standard_normal(6) + 1j * rng.standard_normal(6)
    ks = rng.standard_normal(6) + 1j * rng.standard_normal(6)
    iota = np.array([1.0, 1j]) / np.sqrt(2)
    base = fourier_sample(inv, kp, ks, iota)
    # the 𝒦 vectors are linear in φ ∝ ι and ψ ∝ ῑ
    scaled = fourier_sample(inv, c * kp, np.conj(c) * ks, c * iota)
    assert abs(scaled - base) <= 1e-12 * abs(base)


def test_oracle_fourier_constant_density():
    g = build_grid(2, 17)
    assert np.isclose(oracle_fourier(np.ones(g.shape), [0, 0], g), 1.0)
    assert abs(oracle_fourier(np.ones(g.shape), [2 * np.pi, 0], g)) < 1e-14


def test_oracle_fourier_separable():
    g = build_grid(2, 21, [(0, 1), (0, 2)])
    x, y = g.axes()
    gx = 1 + x**2
    gy = np.cos(y)
    rho = np.outer(gx, gy)
    xi = np.array([1.3, -0.7])
    ref = np.trapezoid(gx * np.exp(1j * xi[0] * x), x) * np.trapezoid(gy * np.exp(1j * xi[1] * y), y)
    assert np.isclose(oracle_fourier(rho, xi, g), ref, rtol=1e-13)


def test_lattice_and_nyquist():
    g = build_grid(2, 9)
    lat = xi_lattice(g, 2 * np.pi)
    assert len(lat) == 5
    assert np.isclose(max_representable_xi(g), np.hypot(8 * np.pi, 8 * np.pi))


def test_dc_only_synthesis():
    g = build_grid(2, 9, [(0, 2), (0, 1)])
    res = reconstruct_density([(np.zeros(2), 2.0 * 1.7)], 1.0, g)
    assert np.allclose(res.rho_rec, 1.7)


def test_round_trip_against_fft_partial_sum():
    n = 49
    g = build_grid(2, n)
    rho = bump_density(g)
    gamma = 3 * 2 * np.pi
    samples = [(xi, oracle_fourier(rho, xi, g)) for xi in xi_lattice(g, gamma)]
    res = reconstruct_density(samples, gamma, g, truth=rho)
    # independent partial sum from the FFT of the periodic part
    per = rho[:-1, :-1]
    F = np.fft.fft2(per)
    k = np.fft.fftfreq(n - 1, 1 / (n - 1))
    KX, KY = np.meshgrid(k, k, indexing="ij")
    F[np.hypot(KX, KY) > 3 + 1e-9] = 0
    ref = np.real(np.fft.ifft2(F))
    err = np.linalg.norm(res.rho_rec[:-1, :-1] - ref) / np.linalg.norm(ref)
    assert err <= 0.02
    assert res.metrics["max_imag_relative"] <= 1e-10
    bl = band_limited(rho, g, gamma)
    assert np.allclose(bl, res.rho_rec)


def test_asymmetric_sample_set_warns_and_off_lattice_rejected():
    g = build_grid(2, 9)
    with pytest.warns(UserWarning):
        reconstruct_density([(np.array([2 * np.pi, 0]), 0.1 + 0.2j)], 2 * np.pi, g)
    with pytest.raises(ValueError):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            reconstruct_density([(np.array([1.0, 0]), 0.1)], 2 * np.pi, g)


def test_small_pipeline_constant_density():
    g = build_grid(2, 14)
    m = make_material(1.0, 1.0, 1.0, g)
    basis = make_basis(g, m, 2.0, 6)
    op = ElasticOperator(g, m)
    lam_T, lam_2T = assemble_dtn_pair(m, g, basis, op)
    inv = pseudo_inverse(connecting_operator(lam_T, lam_2T))
    for xi, expect in (([0.0, 0.0], 1.0), ([2 * np.pi, 0.0], 0.0)):
        p = discrete_lift(make_probe(np.array(xi), g, m), op)
        F = fourier_sample(inv, k_form(lam_T, p.trace0_phi, p.trace1_phi),
                           k_form(lam_T, p.trace0_psi, p.trace1_psi), p.iota)
        assert abs(F - expect) <= 0.1
