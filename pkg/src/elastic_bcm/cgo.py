"""Complex geometric optics probes φ = ι e^{iθ·x}, ψ = ῑ e^{iθ̄·x} for constant μ.

With θ = (ξ + iη)/2, |η| = |ξ|, η ⟂ ξ one has θ·θ = 0, and ι·θ = 0 makes
φ divergence free, so φ solves the constant-coefficient elastostatic
system exactly.  All dot products with complex vectors are bilinear
(no conjugation).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .elastic_forward import _stress_traction
from .mesh_materials import Grid, MaterialModel, grid_gradient


class UnsupportedCaseError(ValueError):
    """Probe construction requested for a case the construction does not cover."""


class NumericalError(RuntimeError):
    pass


def perpendicular(xi: np.ndarray) -> np.ndarray:
    """Deterministic η with |η| = |ξ| and η·ξ = 0."""
    xi = np.asarray(xi, float)
    d = len(xi)
    r = np.linalg.norm(xi)
    if r == 0:
        return np.zeros(d)
    if d == 2:
        return np.array([-xi[1], xi[0]])
    u = xi / r
    for e in np.eye(d):
        if abs(e @ u) < 1 - 1e-8:
            v = e - (e @ u) * u
            return r * v / np.linalg.norm(v)
    raise NumericalError("no axis independent of xi")


def null_amplitude(theta: np.ndarray) -> np.ndarray:
    """Unit ι with ι·θ = 0 (bilinear): pivot on the largest |θ_p|, pair with the first other index."""
    theta = np.asarray(theta, complex)
    d = len(theta)
    iota = np.zeros(d, complex)
    if np.all(theta == 0):
        iota[0] = 1.0
        return iota
    p = int(np.argmax(np.abs(theta)))
    j = 0 if p != 0 else 1
    iota[j] = theta[p]
    iota[p] = -theta[j]
    nrm = np.linalg.norm(iota)
    if nrm < 1e-300:
        raise NumericalError("degenerate null space")
    return iota / nrm


@dataclass(frozen=True)
class CgoProbe:
    xi: np.ndarray
    eta: np.ndarray
    theta: np.ndarray
    iota: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    trace0_phi: np.ndarray
    trace1_phi: np.ndarray
    trace0_psi: np.ndarray
    trace1_psi: np.ndarray

    @property
    def iota_sq(self) -> float:
        return float(np.real(self.iota @ np.conj(self.iota)))

    def to_json(self) -> dict:
        pair = lambda v: [[float(np.real(z)), float(np.imag(z))] for z in np.atleast_1d(v)]
        return {"xi": [float(x) for x in self.xi], "eta": [float(x) for x in self.eta], "iota": pair(self.iota)}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


def _exp_field(amp: np.ndarray, theta: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """amp e^{iθ·x} at points ``(n, d)`` -> ``(n, d)``."""
    return amp[None, :] * np.exp(1j * (pts @ theta))[:, None]


def analytic_traction(amp, theta, grid: Grid, material: MaterialModel) -> np.ndarray:
    """Traction of amp e^{iθ·x} at boundary nodes from its closed-form gradient."""
    pts = grid.boundary_coords()
    phase = np.exp(1j * (pts @ theta))
    # ∂_j u_i = i θ_j amp_i e^{iθ·x}
    grad = 1j * np.einsum("i,j,b->ijb", amp, theta, phase)
    bnd = grid.boundary_index
    return _stress_traction(grad, material.mu.reshape(-1)[bnd], material.lam.reshape(-1)[bnd], grid)


def make_probe(xi, grid: Grid, material: MaterialModel, iota: np.ndarray | None = None,
               require_constant_mu: bool = True) -> CgoProbe:
    """CGO probe for frequency ``xi``; ``iota`` overrides the null-space amplitude."""
    xi = np.asarray(xi, float)
    if xi.shape != (grid.d,):
        raise UnsupportedCaseError(f"xi must have {grid.d} components")
    if require_constant_mu and not material.is_constant_mu():
        raise UnsupportedCaseError(
            "probe construction needs constant mu; use certify_condition to test a given (theta, iota)"
        )
    eta = perpendicular(xi)
    theta = 0.5 * (xi + 1j * eta)
    iota = null_amplitude(theta) if iota is None else np.asarray(iota, complex)
    if np.linalg.norm(iota) == 0:
        raise NumericalError("iota must be nonzero")
    X = grid.coords().reshape(grid.d, -1).T
    phi = _exp_field(iota, theta, X).T.reshape(grid.d, *grid.shape)
    psi = _exp_field(np.conj(iota), np.conj(theta), X).T.reshape(grid.d, *grid.shape)
    pts = grid.boundary_coords()
    return CgoProbe(
        xi=xi,
        eta=eta,
        theta=theta,
        iota=iota,
        phi=phi,
        psi=psi,
        trace0_phi=_exp_field(iota, theta, pts),
        trace1_phi=analytic_traction(iota, theta, grid, material),
        trace0_psi=_exp_field(np.conj(iota), np.conj(theta), pts),
        trace1_psi=analytic_traction(np.conj(iota), np.conj(theta), grid, material),
    )


def certify_condition(probe: CgoProbe, material: MaterialModel, grid: Grid) -> float:
    """max_x |i(θιᵀ+ιθᵀ)∇μ + i(ι·θ)∇λ − μ(θ·θ)ι − (λ+μ)(ι·θ)θ|."""
    th, io = probe.theta, probe.iota
    gmu = grid_gradient(material.mu, grid).reshape(grid.d, -1)
    glam = grid_gradient(material.lam, grid).reshape(grid.d, -1)
    mu = material.mu.reshape(-1)
    lam = material.lam.reshape(-1)
    it = io @ th
    tt = th @ th
    res = (
        1j * (np.outer(th, io) + np.outer(io, th)) @ gmu
        + 1j * it * glam
        - mu[None] * tt * io[:, None]
        - (lam + mu)[None] * it * th[:, None]
    )
    return float(np.abs(np.linalg.norm(res, axis=0)).max())


def elastostatic_residual(probe: CgoProbe, material: MaterialModel, grid: Grid) -> float:
    """Max over interior nodes of |∇·(μ(∇φ+∇φᵀ)) + ∇(λ∇·φ)| / (|ξ|²|ι|), centred differences."""
    xi_sq = float(probe.xi @ probe.xi)
    if xi_sq == 0:
        return 0.0
    d = grid.d
    phi = probe.phi
    grads = np.stack([grid_gradient(phi[i], grid) for i in range(d)])  # [i, j] = ∂_j φ_i
    div = np.trace(grads)
    mu, lam = material.mu, material.lam
    out = np.zeros_like(phi)
    for i in range(d):
        for j in range(d):
            flux = mu * (grads[i, j] + grads[j, i])
            if i == j:
                flux = flux + lam * div
            out[i] += grid_gradient(flux, grid)[j]
    inner = grid.interior_mask()
    # two-layer stencil: exclude the first interior layer touched by one-sided differences
    core = inner.copy()
    for ax in range(d):
        sl = [slice(None)] * d
        sl[ax] = slice(0, 2)
        core[tuple(sl)] = False
        sl[ax] = slice(-2, None)
        core[tuple(sl)] = False
    mag = np.sqrt((np.abs(out) ** 2).sum(axis=0))[core]
    return float(mag.max() / (xi_sq * np.linalg.norm(probe.iota)))


def discrete_lift(probe: CgoProbe, op) -> CgoProbe:
    """Replace φ, ψ by discrete elastostatic fields with the same boundary values.

    Solves K_II φ_I = -K_IB φ_B with the solver's stiffness (μ and λ only, no
    ρ), and takes T₁ as the discrete boundary reaction divided by the
    surface weights.  The 𝒦 identity then holds for the discrete scheme
    exactly; the lifted fields differ from the analytic ones by O(h²).
    """
    import scipy.sparse.linalg as spla

    grid = op.grid
    K = op.K.tocsc()
    I, B = op.idofs, op.bdofs
    solve = spla.factorized(K[I][:, I].tocsc())
    K_IB = K[I][:, B]
    w = grid.boundary_weights[:, None]
    out = {}
    for name, tr0 in (("phi", probe.trace0_phi), ("psi", probe.trace0_psi)):
        vb = tr0.reshape(-1)
        rhs = -(K_IB @ vb)
        full = np.zeros(op.n_dofs, complex)
        full[B] = vb
        full[I] = solve(rhs.real) + 1j * solve(rhs.imag)
        out[name] = full.reshape(grid.d, *grid.shape)
        out["t1_" + name] = (op.K @ full)[B].reshape(-1, grid.d) / w
    return CgoProbe(
        xi=probe.xi, eta=probe.eta, theta=probe.theta, iota=probe.iota,
        phi=out["phi"], psi=out["psi"],
        trace0_phi=probe.trace0_phi, trace1_phi=out["t1_phi"],
        trace0_psi=probe.trace0_psi, trace1_psi=out["t1_psi"],
    )
