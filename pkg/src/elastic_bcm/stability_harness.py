"""Density perturbation experiments: DtN distance, Lipschitz and logarithmic trends."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate

from .boundary_ops import BoundaryBasis, BoundaryOperator, DtnOperator, assemble_dtn_pair, connecting_operator, k_form
from .cgo import CgoProbe
from .elastic_forward import ElasticOperator
from .mesh_materials import ConfigurationError, Grid, MaterialModel, validate_material
from .reconstruction import RegularizedInverse, fourier_sample, oracle_fourier, pseudo_inverse, reconstruct_density

log = logging.getLogger(__name__)


class DegenerateMeasurementError(ValueError):
    """Zero DtN distance for a nonzero density perturbation."""


class BasisMismatchError(ValueError):
    pass


# norms


def power_norm(apply, apply_t, n: int, iters: int = 50, tol: float = 1e-8, seed: int = 0) -> float:
    """Largest singular value of a linear map by power iteration on AᵀA."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(iters):
        y = apply_t(apply(x))
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        new = math.sqrt(ny)
        x = y / ny
        if sigma > 0 and abs(new - sigma) <= tol * new:
            sigma = new
            break
        sigma = new
    return sigma


def weighted_norm(matrix: np.ndarray, gram_in: np.ndarray, gram_out: np.ndarray | None = None, **kw) -> float:
    """sup ‖A c‖_{G_out} / ‖c‖_{G_in} (G_out = I when omitted)."""
    L_in = np.linalg.cholesky(gram_in)
    L_out = None if gram_out is None else np.linalg.cholesky(gram_out)

    def solve_t(v):
        return np.linalg.solve(L_in.T, v)

    def apply(x):
        y = matrix @ solve_t(x)
        return y if L_out is None else L_out.T @ y

    def apply_t(y):
        z = y if L_out is None else L_out @ y
        return np.linalg.solve(L_in, matrix.T @ z)

    return power_norm(apply, apply_t, matrix.shape[1], **kw)


def _boundary_edges(grid: Grid) -> list[tuple[int, int, float]]:
    """Grid edges lying in ∂Ω as (boundary index, boundary index, weight = dual area / length)."""
    pos = -np.ones(grid.n_nodes, dtype=int)
    pos[grid.boundary_index] = np.arange(grid.n_boundary)
    shape = grid.shape
    idx = np.array(np.unravel_index(grid.boundary_index, shape)).T
    out = []
    for b, ijk in enumerate(idx):
        for ax in range(grid.d):
            if ijk[ax] + 1 >= shape[ax]:
                continue
            nb = ijk.copy()
            nb[ax] += 1
            j = pos[np.ravel_multi_index(tuple(nb), shape)]
            if j < 0:
                continue
            # the edge lies in a face whose fixed axis differs from ax
            faces = [a for a in range(grid.d) if a != ax and ijk[a] in (0, shape[a] - 1)]
            if not faces:
                continue
            other = [grid.h[a] for a in range(grid.d) if a != ax and a != faces[0]]
            out.append((b, int(j), float(np.prod(other)) / grid.h[ax]))
    return out


def h1_source_gram(basis: BoundaryBasis) -> np.ndarray:
    """Gram of the discrete H¹((0,T)×∂Ω) norm on basis coefficients.

    L² Gram + time first differences + first differences along boundary
    edges, each with the quadrature weights of the L² pairing.
    """
    g = basis.grid
    dt, d = basis.dt, g.d
    a = basis.waveforms() / basis.atom_norms[:, None]
    da = np.diff(a, axis=1) / dt  # (na, N): forward differences, weight dt each
    G_t = da @ da.T * dt
    G_a = basis.atom_gram
    sw = np.sqrt(g.boundary_weights)
    lap = np.zeros((g.n_boundary, g.n_boundary))
    for i, j, w in _boundary_edges(g):
        # node values are c / √w_b
        ci, cj = 1 / sw[i], 1 / sw[j]
        lap[i, i] += w * ci * ci
        lap[j, j] += w * cj * cj
        lap[i, j] -= w * ci * cj
        lap[j, i] -= w * ci * cj
    ns = basis.n_spatial
    spatial = np.kron(lap, np.eye(d))
    return np.kron(np.eye(ns), G_a + G_t) + np.kron(spatial, G_a)


# operator sets


@dataclass
class OperatorSet:
    material: MaterialModel
    lam_T: DtnOperator
    lam_2T: DtnOperator
    J: BoundaryOperator
    Jinv: RegularizedInverse
    samples: dict = field(default_factory=dict)


def build_operator_set(material: MaterialModel, grid: Grid, basis: BoundaryBasis, probes: list[CgoProbe],
                       method: str = "truncate", param: float | None = None) -> OperatorSet:
    op = ElasticOperator(grid, material)
    lam_T, lam_2T = assemble_dtn_pair(material, grid, basis, op)
    J = connecting_operator(lam_T, lam_2T)
    Jinv = pseudo_inverse(J, method, param)
    samples = {}
    for p in probes:
        kp = k_form(lam_T, p.trace0_phi, p.trace1_phi)
        ks = k_form(lam_T, p.trace0_psi, p.trace1_psi)
        samples[tuple(np.round(p.xi, 12))] = fourier_sample(Jinv, kp, ks, p.iota)
    return OperatorSet(material, lam_T, lam_2T, J, Jinv, samples)


@dataclass
class DtnDistance:
    total: float
    connecting: float
    dtn: float


def dtn_distance(base: OperatorSet, pert: OperatorSet, h1_gram: np.ndarray | None = None,
                 iters: int = 50, tol: float = 1e-8) -> DtnDistance:
    """ℰ = ‖𝒥̃ − 𝒥‖ (L² coefficients) + ‖Λ̃_T − Λ_T‖ (H¹ sources, L² outputs)."""
    b1, b2 = base.lam_T.basis, pert.lam_T.basis
    if b1.describe() != b2.describe():
        raise BasisMismatchError("operator sets use different bases, grids or time steps")
    G = np.asarray(base.J.gram_in)
    dJ = pert.J.meta["form"] - base.J.meta["form"]
    # 𝒥 difference as an operator G⁻¹ΔJ in the G inner product: norm of L⁻¹ ΔJ L⁻ᵀ
    L = np.linalg.cholesky(G)
    white = np.linalg.solve(L, np.linalg.solve(L, dJ.T).T)
    nJ = power_norm(lambda x: white @ x, lambda y: white.T @ y, white.shape[1], iters, tol)
    H = h1_source_gram(b1) if h1_gram is None else h1_gram
    nL = weighted_norm(pert.lam_T.matrix - base.lam_T.matrix, H, None, iters=iters, tol=tol)
    return DtnDistance(nJ + nL, nJ, nL)


def gamma_cutoff(E: float, R: float) -> float:
    """γ = −ln ℰ / (4R + 1)."""
    return -math.log(E) / (4 * R + 1)


def regime_threshold(R: float) -> float:
    """ℰ must lie below e^{−8R−2}."""
    return math.exp(-8 * R - 2)


# experiments


@dataclass
class EpsilonRecord:
    epsilon: float
    E: float
    E_connecting: float
    E_dtn: float
    dF: dict
    dF_oracle: dict
    l2diff: float


@dataclass
class PerturbationExperiment:
    grid: Grid
    base: MaterialModel
    delta: np.ndarray
    epsilons: list[float]
    basis: BoundaryBasis
    probes: list[CgoProbe]
    method: str = "truncate"
    param: float | None = None
    records: list[EpsilonRecord] = field(default_factory=list)
    base_set: OperatorSet | None = None

    def __post_init__(self):
        self.epsilons = sorted(self.epsilons, reverse=True)
        collar = ~_inner_core(self.grid, 2)
        if np.abs(self.delta[collar]).max() > 0:
            raise ConfigurationError("density perturbation must vanish on a 2-cell collar inside the boundary")

    @property
    def R(self) -> float:
        return self.grid.bounding_radius()


def _inner_core(grid: Grid, cells: int) -> np.ndarray:
    core = np.ones(grid.shape, dtype=bool)
    for ax in range(grid.d):
        sl = [slice(None)] * grid.d
        sl[ax] = slice(0, cells + 1)
        core[tuple(sl)] = False
        sl[ax] = slice(grid.shape[ax] - cells - 1, None)
        core[tuple(sl)] = False
    return core


def run_experiment(exp: PerturbationExperiment) -> PerturbationExperiment:
    """Assemble base and perturbed operators and fill ``exp.records`` (largest ε first)."""
    g = exp.grid
    if exp.base_set is None:
        exp.base_set = build_operator_set(exp.base, g, exp.basis, exp.probes, exp.method, exp.param)
    H = h1_source_gram(exp.basis)
    w = g.node_weights
    exp.records = []
    for eps in exp.epsilons:
        pert = exp.base.with_rho(exp.base.rho + eps * exp.delta)
        report = validate_material(pert)
        if not report.ok:
            raise ConfigurationError(f"perturbed density at eps={eps} is inadmissible: {report.violations[:3]}")
        pset = build_operator_set(pert, g, exp.basis, exp.probes, exp.method, exp.param)
        dist = dtn_distance(exp.base_set, pset, H)
        dF = {k: pset.samples[k] - exp.base_set.samples[k] for k in pset.samples}
        dF_or = {k: oracle_fourier(eps * exp.delta, np.array(k), g) for k in pset.samples}
        l2 = float(np.sqrt(np.sum(w * (eps * exp.delta) ** 2)))
        exp.records.append(EpsilonRecord(eps, dist.total, dist.connecting, dist.dtn, dF, dF_or, l2))
        log.info("eps=%.3g E=%.4e", eps, dist.total)
    return exp


def loglog_slope(x, y) -> float:
    x = np.log(np.asarray(x, float))
    y = np.log(np.asarray(y, float))
    return float(np.polyfit(x, y, 1)[0])


def xi_label(xi) -> str:
    """Stable text key for a frequency vector, e.g. ``"6.28319,0"``."""
    return ",".join(f"{float(v) + 0.0:.6g}" for v in xi)


def lipschitz_experiment(exp: PerturbationExperiment, xi_set=None, source: str = "reconstructed") -> dict:
    """Per ξ: log–log slope of |F̂(ρ̃−ρ)(ξ)| against ℰ and the ratio |F̂|/(e^{2R|ξ|}ℰ).

    ``source`` picks the reconstructed sample differences or the quadrature
    of the true perturbation.
    """
    if not exp.records:
        run_experiment(exp)
    E = np.array([r.E for r in exp.records])
    eps = np.array([r.epsilon for r in exp.records])
    if np.any(E == 0):
        raise DegenerateMeasurementError("DtN distance vanished for a nonzero perturbation")
    keys = list(exp.records[0].dF) if xi_set is None else [tuple(np.round(np.asarray(x, float), 12)) for x in xi_set]
    out = {"R": exp.R, "epsilon": eps.tolist(), "E": E.tolist(), "E_slope_vs_eps": loglog_slope(eps, E), "xi": {}}
    for k in keys:
        table = [r.dF if source == "reconstructed" else r.dF_oracle for r in exp.records]
        mag = np.array([abs(t[k]) for t in table])
        oracle = np.array([abs(r.dF_oracle[k]) for r in exp.records])
        xi_norm = float(np.linalg.norm(k))
        ratio = mag / (np.exp(2 * exp.R * xi_norm) * E)
        out["xi"][xi_label(k)] = {
            "abs_dF": mag.tolist(),
            "abs_dF_oracle": oracle.tolist(),
            "slope": loglog_slope(E, mag) if np.all(mag > 0) else float("nan"),
            "slope_oracle": loglog_slope(E, oracle) if np.all(oracle > 0) else float("nan"),
            "ratio": ratio.tolist(),
            "ratio_spread": float(ratio.max() / ratio.min()) if np.all(ratio > 0) else float("inf"),
        }
    return out


def log_stability_experiment(exp: PerturbationExperiment) -> dict:
    """Per ε: γ, regime flag, band-limited reconstruction of ρ̃−ρ, and (−ln ℰ)⁻²."""
    if not exp.records:
        run_experiment(exp)
    R = exp.R
    thr = regime_threshold(R)
    rows = []
    g = exp.grid
    w = g.node_weights
    xis = [np.array(k) for k in exp.records[0].dF]
    top = max(np.linalg.norm(x) for x in xis)
    for r in exp.records:
        gamma = gamma_cutoff(r.E, R) if 0 < r.E < 1 else float("nan")
        out = bool(r.E >= thr or not gamma > 2)
        cut = min(gamma, top) if np.isfinite(gamma) else 0.0
        rec = reconstruct_density([(x, r.dF[tuple(x)]) for x in xis], max(cut, 0.0), g)
        diff = r.epsilon * exp.delta
        rec_err = float(np.sqrt(np.sum(w * (rec.rho_rec - diff) ** 2)))
        rows.append({
            "epsilon": r.epsilon,
            "E": r.E,
            "L2diff": r.l2diff,
            "gamma": gamma,
            "bound_term": math.log(r.E) ** -2 if 0 < r.E < 1 else float("nan"),
            "out_of_regime": out,
            "reconstruction_error": rec_err,
        })
    # (−ln ℰ)⁻² is undefined for ℰ ≥ 1; those rows are reported but not compared
    valid = [row for row in rows if np.isfinite(row["bound_term"])]
    l2 = [row["L2diff"] for row in valid]
    bt = [row["bound_term"] for row in valid]
    co = len(valid) >= 2 and all(a > b for a, b in zip(l2, l2[1:])) and all(a > b for a, b in zip(bt, bt[1:]))
    return {"R": R, "threshold": thr, "rows": rows, "n_compared": len(valid), "co_decrease": bool(co)}


def g_operator_norm(A: np.ndarray, G: np.ndarray) -> float:
    """Operator norm of ``A`` on coefficients with the inner product cᵀGc."""
    L = np.linalg.cholesky(G)
    return float(np.linalg.norm(L.T @ A @ np.linalg.inv(L.T), 2))


def pinv_perturbation_report(base: OperatorSet, pert: OperatorSet, c_obs: float) -> dict:
    """‖𝒥̃†−𝒥†‖ against 3·Ĉ_obs⁴·‖𝒥̃−𝒥‖ (report only)."""
    G = np.asarray(base.J.gram_in)
    lhs = g_operator_norm(pert.Jinv.matrix() - base.Jinv.matrix(), G)
    rhs = 3 * c_obs**4 * g_operator_norm(pert.J.matrix - base.J.matrix, G)
    return {"pinv_difference": lhs, "bound": rhs, "holds": bool(lhs <= rhs)}


# Sobolev class


def sobolev_norm(field_: np.ndarray, grid: Grid, s: float, pad: int = 4) -> float:
    """‖f‖_{H^{s+2}(ℝ^d)} of the zero-extended field via a padded FFT."""
    shape = tuple(pad * k for k in grid.shape)
    h = grid.h
    fhat = np.fft.fftn(field_, s=shape, axes=tuple(range(grid.d))) * float(np.prod(h))
    freqs = np.meshgrid(*[2 * np.pi * np.fft.fftfreq(m, d=hh) for m, hh in zip(shape, h)], indexing="ij")
    xi2 = sum(f**2 for f in freqs)
    dxi = np.prod([2 * np.pi / (m * hh) for m, hh in zip(shape, h)])
    val = np.sum((1 + xi2) ** (s + 2) * np.abs(fhat) ** 2) * dxi / (2 * np.pi) ** grid.d
    return float(math.sqrt(val))


def gaussian_sobolev_norm(width: float, d: int, order: float) -> float:
    """Analytic ‖exp(−|x|²/w²)‖_{H^order(ℝ^d)} by radial quadrature of the transform."""
    surf = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    # |f̂(ξ)|² = π^d w^{2d} e^{−w²|ξ|²/2}

    def f(r):
        return (1 + r * r) ** order * math.pi**d * width ** (2 * d) * math.exp(-(width**2) * r * r / 2) * r ** (d - 1)

    val, _ = scipy.integrate.quad(f, 0, np.inf, limit=200)
    return math.sqrt(surf * val / (2 * math.pi) ** d)


@dataclass
class SobolevReport:
    norm: float
    bound: float
    s: float

    @property
    def ok(self) -> bool:
        return self.norm <= self.bound


def sobolev_class_check(field_: np.ndarray, grid: Grid, s: float, bound: float, pad: int = 4) -> SobolevReport:
    core = _inner_core(grid, 0)
    if np.abs(field_[~core]).max(initial=0.0) > 1e-12 * max(np.abs(field_).max(initial=0.0), 1e-300):
        log.warning("field does not vanish on the boundary; zero extension is discontinuous")
    return SobolevReport(sobolev_norm(field_, grid, s, pad), bound, s)
