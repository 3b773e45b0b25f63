import math

import numpy as np
import pytest

from elastic_bcm.boundary_ops import make_basis
from elastic_bcm.cgo import discrete_lift, make_probe
from elastic_bcm.elastic_forward import ElasticOperator
from elastic_bcm.mesh_materials import ConfigurationError, build_grid, collar_bump, make_material
from elastic_bcm.reconstruction import xi_lattice
from elastic_bcm.stability_harness import (
    BasisMismatchError,
    PerturbationExperiment,
    build_operator_set,
    dtn_distance,
    gamma_cutoff,
    gaussian_sobolev_norm,
    lipschitz_experiment,
    log_stability_experiment,
    regime_threshold,
    run_experiment,
    sobolev_class_check,
    sobolev_norm,
    weighted_norm,
    xi_label,
)
from helpers import bump_density


def test_gamma_cutoff_and_threshold():
    assert np.isclose(gamma_cutoff(math.exp(-10), 1.0), 2.0)
    R = math.sqrt(2)
    assert np.isclose(regime_threshold(R), math.exp(-8 * R - 2))
    assert np.isclose(regime_threshold(R), 1.6517e-6, rtol=1e-4)


def test_weighted_norm_matches_dense():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((5, 4))
    B = rng.standard_normal((4, 4))
    G = B @ B.T + np.eye(4)
    L = np.linalg.cholesky(G)
    ref = np.linalg.norm(A @ np.linalg.inv(L.T), 2)
    assert np.isclose(weighted_norm(A, G, tol=1e-12, iters=500), ref, rtol=1e-6)


def test_xi_label():
    assert xi_label(np.array([2 * np.pi, -0.0])) == "6.28319,0"


@pytest.fixture(scope="module")
def experiment():
    g = build_grid(2, 10)
    m = make_material(bump_density(g), 1.0, 1.0, g)
    basis = make_basis(g, m, 1.0, 4)
    op = ElasticOperator(g, m)
    probes = [discrete_lift(make_probe(x, g, m), op) for x in xi_lattice(g, 2 * np.pi)]
    delta = collar_bump(g, radius=0.25)
    exp = PerturbationExperiment(g, m, delta, [1e-4, 1e-3, 2e-3], basis, probes)
    return run_experiment(exp)


def test_distance_properties(experiment):
    exp = experiment
    base = exp.base_set
    assert dtn_distance(base, base).total == 0.0
    sets = [build_operator_set(exp.base.with_rho(exp.base.rho + e * exp.delta), exp.grid, exp.basis, exp.probes)
            for e in (1e-3, 3e-3)]
    d01 = dtn_distance(base, sets[0]).total
    d12 = dtn_distance(sets[0], sets[1]).total
    d02 = dtn_distance(base, sets[1]).total
    assert d02 <= (d01 + d12) * (1 + 1e-6)


def test_distance_linear_in_epsilon(experiment):
    recs = {r.epsilon: r for r in experiment.records}
    assert [r.epsilon for r in experiment.records] == [2e-3, 1e-3, 1e-4]
    assert recs[2e-3].E > recs[1e-3].E > recs[1e-4].E > 0
    assert abs(recs[2e-3].E / recs[1e-3].E - 2) < 0.02


def test_lipschitz_slopes(experiment):
    res = lipschitz_experiment(experiment)
    assert abs(res["E_slope_vs_eps"] - 1) < 0.01
    for row in res["xi"].values():
        assert abs(row["slope"] - 1) < 0.05
    assert set(res["xi"]) >= {"0,0", "6.28319,0"}


def test_log_stability_rows(experiment):
    res = log_stability_experiment(experiment)
    assert res["n_compared"] == 3 and res["co_decrease"]
    for row in res["rows"]:
        assert np.isclose(row["gamma"], gamma_cutoff(row["E"], res["R"]))
        assert row["out_of_regime"] == (row["E"] >= res["threshold"] or not row["gamma"] > 2)


def test_basis_mismatch(experiment):
    exp = experiment
    other_basis = make_basis(exp.grid, exp.base, 1.0, 3)
    other = build_operator_set(exp.base, exp.grid, other_basis, [])
    with pytest.raises(BasisMismatchError):
        dtn_distance(exp.base_set, other)


def test_perturbation_must_vanish_near_boundary():
    g = build_grid(2, 10)
    m = make_material(1.0, 1.0, 1.0, g)
    with pytest.raises(ConfigurationError):
        PerturbationExperiment(g, m, np.ones(g.shape), [1e-3], None, [])


def test_gaussian_sobolev_norm():
    g = build_grid(2, 129, [(-1, 1), (-1, 1)])
    X = g.coords()
    w = 0.15
    f = np.exp(-(X**2).sum(axis=0) / w**2)
    for s in (0.0, 1.0):
        assert np.isclose(sobolev_norm(f, g, s), gaussian_sobolev_norm(w, 2, s + 2), rtol=0.05)
    assert sobolev_norm(f, g, 1.0) > sobolev_norm(f, g, 0.0)
    assert sobolev_norm(np.zeros(g.shape), g, 0.0) == 0.0
    rep = sobolev_class_check(f, g, 0.0, 1e6)
    assert rep.ok
