"""Carleman weight, illuminated boundary, observability constants and checks.

The weight is l(x) = |x - x0|²/2 for a point x0 outside the box, so
∇l = x - x0, ∇∇l = I and Δl = d.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .elastic_forward import DEFAULT_CFL, ElasticOperator, solve_homogeneous, traction
from .mesh_materials import Bounds, ConfigurationError, Grid, MaterialModel, grid_gradient


class ThresholdError(ValueError):
    """Requested horizon does not exceed the observability threshold."""


@dataclass(frozen=True)
class CarlemanConfig:
    x0: np.ndarray
    d: int
    tau: float
    rho2: float
    c0: float
    c1: float
    C0: float
    C1: float
    C2: float
    C3: float
    max_grad_l: float
    gamma_mask: np.ndarray | None = None

    @property
    def script_C(self) -> int:
        return self.d - 1

    @property
    def Tmin(self) -> float:
        return 2 * self.C2 * self.C3 / self.C0

    def prefactor(self, T: float) -> float:
        """C1 C3 / (T C0 - 2 C2 C3) for T above the threshold."""
        if T <= self.Tmin:
            raise ThresholdError(f"T={T} must exceed Tmin={self.Tmin}")
        return self.C1 * self.C3 / (T * self.C0 - 2 * self.C2 * self.C3)

    def l(self, grid: Grid) -> np.ndarray:
        X = grid.coords() - self.x0.reshape((-1,) + (1,) * grid.d)
        return 0.5 * (X**2).sum(axis=0)

    def grad_l(self, grid: Grid) -> np.ndarray:
        return grid.coords() - self.x0.reshape((-1,) + (1,) * grid.d)

    def laplacian_l(self) -> float:
        return float(self.d)

    def to_json(self) -> str:
        out = {
            "x0": [float(v) for v in self.x0],
            "d": self.d,
            "tau": self.tau,
            "script_C": self.script_C,
            "rho2": self.rho2,
            "c0": self.c0,
            "c1": self.c1,
            "C0": self.C0,
            "C1": self.C1,
            "C2": self.C2,
            "C3": self.C3,
            "Tmin": self.Tmin,
            "max_grad_l": self.max_grad_l,
        }
        if self.gamma_mask is not None:
            out["gamma_nodes"] = int(self.gamma_mask.sum())
        return json.dumps(out, indent=2, sort_keys=True)


def max_grad_l_sq(grid: Grid, x0) -> float:
    """max over the closed box of |x - x0|², attained at a corner."""
    x0 = np.asarray(x0, float)
    lo = np.array([e[0] for e in grid.extents])
    hi = np.array([e[1] for e in grid.extents])
    far = np.where(np.abs(lo - x0) > np.abs(hi - x0), lo, hi)
    return float(((far - x0) ** 2).sum())


def max_grad_l(grid: Grid, x0) -> float:
    return math.sqrt(max_grad_l_sq(grid, x0))


def constants(bounds: Bounds, grid: Grid, c0: float, c1: float, rho2: float, x0=None,
              tau: float = 1.0) -> CarlemanConfig:
    """Observability constants from the pointwise bounds and the geometry."""
    if min(c0, c1, rho2) <= 0:
        raise ConfigurationError("c0, c1 and rho2 must be positive")
    if tau <= 0:
        raise ConfigurationError("tau must be positive")
    x0 = np.asarray(grid.x0 if x0 is None else x0, float)
    g2 = max_grad_l_sq(grid, x0)
    mu0, mu1 = bounds.mu0, bounds.mu1
    C0 = min(rho2, c1)
    # max{√2, √(1+μ0)/(2μ0), √(5/(4μ0))}·max|∇l|, taken under one square root
    C1 = math.sqrt(max(2.0, (1 + mu0) / (4 * mu0**2), 5 / (4 * mu0)) * g2)
    C2 = max(bounds.rho1 / 2, 2 / c0 * g2)
    C3 = max(1.0, 2 * mu1 + max(abs(bounds.lambda0), abs(bounds.lambda1)))
    return CarlemanConfig(x0, grid.d, tau, rho2, c0, c1, C0, C1, C2, C3, math.sqrt(g2), gamma_region(grid, x0))


def gamma_region(grid: Grid, x0=None) -> np.ndarray:
    """Boundary nodes where ∇l·ν > 0, using every face a node belongs to.

    A corner or edge node is in Γ when any of its faces is; faces with
    ∇l·ν ≡ 0 cannot occur since x0 lies outside the closed box.
    """
    x0 = np.asarray(grid.x0 if x0 is None else x0, float)
    pts = grid.boundary_coords()
    mask = np.zeros(grid.n_boundary, dtype=bool)
    for face in range(2 * grid.d):
        on = grid.face_weights[:, face] > 0
        s = (pts - x0) @ grid.face_normal(face)
        mask |= on & (s > 0)
    return mask


def gamma_faces(grid: Grid, x0=None) -> list[int]:
    """Faces (2·axis + side) on which ∇l·ν > 0."""
    x0 = np.asarray(grid.x0 if x0 is None else x0, float)
    out = []
    for face in range(2 * grid.d):
        ax, side = divmod(face, 2)
        plane = grid.extents[ax][side]
        if (plane - x0[ax]) * (1 if side else -1) > 0:
            out.append(face)
    return out


@dataclass
class RhoConditionReport:
    min_value: float
    rho2: float

    @property
    def ok(self) -> bool:
        return self.min_value > self.rho2


def check_rho_condition(m: MaterialModel, cfg: CarlemanConfig, grid: Grid) -> RhoConditionReport:
    """min over nodes of 1 + (∇ρ·∇l)/ρ against ρ₂."""
    grad_rho = grid_gradient(m.rho, grid)
    val = 1 + (grad_rho * cfg.grad_l(grid)).sum(axis=0) / m.rho
    return RhoConditionReport(float(val.min()), cfg.rho2)


def _grad(u: np.ndarray, grid: Grid) -> np.ndarray:
    """[i, j] = ∂_j u_i by centred differences."""
    return np.stack([grid_gradient(u[i], grid) for i in range(grid.d)])


def _div_matrix(A: np.ndarray, grid: Grid) -> np.ndarray:
    """(∇·A)_i = Σ_j ∂_j A_ij."""
    return np.stack([sum(grid_gradient(A[i, j], grid)[j] for j in range(grid.d)) for i in range(grid.d)])


def lame_operator(u: np.ndarray, m: MaterialModel, grid: Grid) -> np.ndarray:
    """∇·(μ(∇u+∇uᵀ)) + ∇(λ∇·u) by centred differences."""
    G = _grad(u, grid)
    div = np.trace(G)
    return _div_matrix(m.mu * (G + G.transpose(1, 0, *range(2, G.ndim))), grid) + grid_gradient(m.lam * div, grid)


@dataclass
class CarlemanDecomposition:
    S1: np.ndarray
    S2: np.ndarray
    defect: float
    sos_margin: float
    scale: float
    mask: np.ndarray = field(repr=False)

    @property
    def sos_holds(self) -> bool:
        """½|S1+S2|² − S1·S2 ≥ 0 at every node up to 1e-12 relative representation error."""
        return self.sos_margin >= -1e-12 * max(self.scale, 1e-300)


def carleman_decomposition(w: np.ndarray, w_tt: np.ndarray, m: MaterialModel, cfg: CarlemanConfig,
                           grid: Grid, layers: int = 2) -> CarlemanDecomposition:
    """S1, S2 for v = e^{τl} w at one time, and the defect against e^{τl}Pw.

    ``w`` and ``w_tt`` are ``(d, *shape)`` samples of the field and its
    second time derivative.  Space derivatives are centred differences;
    the defect is measured on nodes at least ``layers`` away from ∂Ω.
    """
    tau = cfg.tau
    if tau <= 0:
        raise ConfigurationError("tau must be positive")
    d = grid.d
    l = cfg.l(grid)
    gl = cfg.grad_l(grid)
    e = np.exp(tau * l)
    v = e * w
    v_tt = e * w_tt
    rho, mu, lam = m.rho, m.mu, m.lam
    Gv = _grad(v, grid)
    div_v = np.trace(Gv)
    gmu = grid_gradient(mu, grid)
    glam = grid_gradient(lam, grid)
    gl_gl = (gl * gl).sum(axis=0)
    gl_v = (gl * v).sum(axis=0)
    Gv_gl = np.einsum("ij...,j...->i...", Gv, gl)
    GvT_gl = np.einsum("ji...,j...->i...", Gv, gl)
    hess_v = v  # ∇∇l = I
    S2 = tau * (2 * Gv_gl + cfg.script_C * v)
    S1 = (
        rho * v_tt
        - lame_operator(v, m, grid)
        + mu * tau * cfg.laplacian_l() * v
        - mu * tau**2 * gl_gl * v
        + (lam + mu) * tau * hess_v
        - (lam + mu) * tau**2 * gl * gl_v
        + tau * (gl * (v * gmu).sum(axis=0) + v * (gl * gmu).sum(axis=0))
        + tau * gl_v * glam
        + 2 * (mu - 1) * tau * Gv_gl
        + (lam + mu) * tau * GvT_gl
        + (lam + mu) * tau * div_v * gl
        - tau * cfg.script_C * v
    )
    Pw = rho * w_tt - lame_operator(w, m, grid)
    target = e * Pw
    mask = np.ones(grid.shape, dtype=bool)
    for ax in range(d):
        sl = [slice(None)] * d
        sl[ax] = slice(0, layers)
        mask[tuple(sl)] = False
        sl[ax] = slice(grid.shape[ax] - layers, None)
        mask[tuple(sl)] = False
    diff = np.sqrt(((S1 + S2 - target) ** 2).sum(axis=0))
    total = S1 + S2
    margin = 0.5 * (total**2).sum(axis=0) - (S1 * S2).sum(axis=0)
    scale = float(max(np.abs(S1).max(), np.abs(S2).max()) ** 2)
    return CarlemanDecomposition(S1, S2, float(diff[mask].max()), float(margin.min()), scale, mask)


def manufactured_field(grid: Grid, t: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """w = sin(t) sin(πx₁) e₁ and its second time derivative."""
    X = grid.coords()
    w = np.zeros_like(X)
    w[0] = math.sin(t) * np.sin(np.pi * X[0])
    return w, -w


def random_initial_data(grid: Grid, rng: np.random.Generator, modes: int = 4) -> np.ndarray:
    """Smooth field vanishing on ∂Ω: random combination of low sine modes."""
    X = grid.coords()
    lo = np.array([e[0] for e in grid.extents]).reshape((-1,) + (1,) * grid.d)
    L = grid.side_lengths.reshape((-1,) + (1,) * grid.d)
    Y = (X - lo) / L
    out = np.zeros_like(X)
    idx = np.stack(np.meshgrid(*[np.arange(1, modes + 1)] * grid.d, indexing="ij"), -1).reshape(-1, grid.d)
    for c in range(grid.d):
        coef = rng.standard_normal(len(idx)) / (idx**2).sum(axis=1)
        for a, k in zip(coef, idx):
            out[c] += a * np.prod(np.sin(np.pi * k.reshape((-1,) + (1,) * grid.d) * Y), axis=0)
    out[:, ~grid.interior_mask()] = 0.0  # sin(kπ) is only zero to round-off
    return out


def h10_norm(u: np.ndarray, grid: Grid) -> float:
    """‖∇u‖_{L²} by centred differences and node quadrature."""
    G = _grad(u, grid)
    return float(np.sqrt(np.sum(G**2 * grid.node_weights)))


def l2_norm(u: np.ndarray, grid: Grid) -> float:
    return float(np.sqrt(np.sum(u**2 * grid.node_weights)))


@dataclass
class ObservabilityStats:
    ratios: np.ndarray
    unobservable: int
    max_ratio: float
    median_ratio: float
    half_ensemble_max: float

    @property
    def stabilization(self) -> float:
        """Relative change of the max ratio from half to full ensemble."""
        if self.half_ensemble_max == 0:
            return float("inf")
        return abs(self.max_ratio - self.half_ensemble_max) / self.half_ensemble_max


def observation_ratio(m: MaterialModel, grid: Grid, u0: np.ndarray, u1: np.ndarray, T: float,
                      gamma_mask: np.ndarray, cfl: float = DEFAULT_CFL, op=None) -> float:
    """(‖∂t u(T)‖ + ‖u(T)‖_{H¹₀}) / ‖traction‖_{L²((0,T)×Γ)} for one solution."""
    op = op or ElasticOperator(grid, m)
    steps = max(int(math.ceil(T / op.stable_dt(cfl))), 2)
    dt = T / steps
    traj = solve_homogeneous(m, grid, u0, u1, T, dt, storage="boundary", cfl=cfl, op=op)
    tr = traction(traj, m, grid, method="fd")
    w = np.where(gamma_mask, grid.boundary_weights, 0.0)
    tw = np.full(steps + 1, dt)
    tw[[0, -1]] = dt / 2
    den = math.sqrt(float(np.einsum("k,b,kbc->", tw, w, tr.values**2)))
    num = l2_norm(traj.final_velocity(), grid) + h10_norm(traj.final, grid)
    return num / den if den > 0 else float("inf")


def empirical_observability(m: MaterialModel, grid: Grid, cfg: CarlemanConfig | None, T: float,
                            ensemble_size: int, seed: int, gamma_mask: np.ndarray | None = None,
                            cfl: float = DEFAULT_CFL) -> ObservabilityStats:
    """Empirical lower bound on the observability constant from random initial data."""
    if T <= 0:
        raise ConfigurationError("T must be positive")
    mask = gamma_mask
    if mask is None:
        mask = cfg.gamma_mask if cfg is not None and cfg.gamma_mask is not None else np.ones(grid.n_boundary, bool)
    rng = np.random.default_rng(seed)
    op = ElasticOperator(grid, m)
    ratios = []
    for _ in range(ensemble_size):
        u0 = random_initial_data(grid, rng)
        u1 = random_initial_data(grid, rng)
        ratios.append(observation_ratio(m, grid, u0, u1, T, mask, cfl, op))
    r = np.array(ratios)
    finite = r[np.isfinite(r)]
    half = r[: max(1, len(r) // 2)]
    half = half[np.isfinite(half)]
    return ObservabilityStats(
        ratios=r,
        unobservable=int((~np.isfinite(r)).sum()),
        max_ratio=float(finite.max()) if finite.size else float("inf"),
        median_ratio=float(np.median(finite)) if finite.size else float("inf"),
        half_ensemble_max=float(half.max()) if half.size else float("inf"),
    )
