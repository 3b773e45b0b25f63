"""Regularized pseudo-inverse of 𝒥, Fourier samples of ρ and band-limited synthesis."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .boundary_ops import BoundaryOperator
from .mesh_materials import Grid

log = logging.getLogger(__name__)


class AssemblyQualityError(RuntimeError):
    """𝒥 has eigenvalues too negative to be a discretized Gram operator."""


@dataclass
class RegularizedInverse:
    """𝒥† from the generalized eigenproblem J v = σ G v (vᵀ G v = 1).

    ``form`` is the symmetric matrix ⟨Φ_i, 𝒥Φ_j⟩ and ``gram`` the basis Gram,
    so 𝒥 = G⁻¹J is self-adjoint in the G inner product.
    """

    values: np.ndarray
    vectors: np.ndarray
    gram: np.ndarray
    method: str
    param: float
    filtered: np.ndarray
    rank: int

    def matrix(self) -> np.ndarray:
        """𝒥† as an operator on coefficients: V Σ† Vᵀ G."""
        return (self.vectors * self.filtered) @ (self.vectors.T @ self.gram)

    def apply(self, c: np.ndarray) -> np.ndarray:
        return self.vectors @ (self.filtered * (self.vectors.T @ (self.gram @ c)))

    def form(self, kf: np.ndarray, kg: np.ndarray):
        """⟨𝒥† f, g⟩_G for Gram-weighted vectors ``kf = G c_f``, ``kg = G c_g`` (bilinear)."""
        return (kf @ self.vectors) @ (self.filtered * (self.vectors.T @ kg))

    def retained(self) -> np.ndarray:
        return self.filtered != 0


def pseudo_inverse(Jop: BoundaryOperator, method: str = "truncate", param: float | None = None,
                   negative_tol: float = 1e-6) -> RegularizedInverse:
    """Truncated (threshold ``param``·σ_max, default 1e-6) or Tikhonov (shift ``param``) inverse."""
    gram = np.asarray(Jop.gram_in)
    if gram.ndim == 1:
        gram = np.diag(gram)
    form = Jop.meta.get("form")
    if form is None:
        form = gram @ Jop.matrix
    asym = np.linalg.norm(form - form.T) / max(np.linalg.norm(form), 1e-300)
    if asym > 1e-6:
        raise AssemblyQualityError(f"operator asymmetry {asym:.2e} exceeds 1e-6")
    form = 0.5 * (form + form.T)
    values, vectors = scipy.linalg.eigh(form, gram)
    smax = float(np.abs(values).max()) if values.size else 0.0
    if smax > 0 and values.min() < -negative_tol * smax:
        raise AssemblyQualityError(f"eigenvalue {values.min():.3e} below -{negative_tol}·σ_max")
    if method == "truncate":
        eps = 1e-6 if param is None else float(param)
        keep = values > eps * smax
        filtered = np.where(keep, 1.0 / np.where(keep, values, 1.0), 0.0)
    elif method == "tikhonov":
        alpha = float(param) if param is not None else 1e-6 * smax
        if alpha <= 0:
            raise ValueError("Tikhonov shift must be positive")
        eps = alpha
        pos = np.clip(values, 0.0, None)
        filtered = 1.0 / (pos + alpha)
        keep = pos > 0
    else:
        raise ValueError(f"unknown regularization {method!r}")
    rank = int(keep.sum())
    log.info("pseudo-inverse: %s param=%.3g rank %d/%d", method, eps, rank, len(values))
    return RegularizedInverse(values, vectors, gram, method, eps, filtered, rank)


def fourier_sample(Jinv: RegularizedInverse, k_phi: np.ndarray, k_psi: np.ndarray, iota: np.ndarray) -> complex:
    """|ι|⁻² ⟨𝒥†𝒦φ, 𝒦ψ⟩ from the Gram-weighted 𝒦 vectors (see :func:`boundary_ops.k_form`)."""
    iota = np.asarray(iota)
    nrm = float(np.real(iota @ np.conj(iota)))
    if nrm == 0:
        raise ValueError("iota must be nonzero")
    return complex(Jinv.form(k_phi, k_psi) / nrm)


def oracle_fourier(rho: np.ndarray, xi, grid: Grid) -> complex:
    """Trapezoid quadrature of ∫_Ω e^{iξ·x} ρ(x) dx."""
    xi = np.asarray(xi, float)
    X = grid.coords()
    phase = np.exp(1j * np.tensordot(xi, X, axes=(0, 0)))
    return complex(np.sum(phase * rho * grid.node_weights))


def xi_lattice(grid: Grid, gamma: float) -> np.ndarray:
    """{2πk/L : |2πk/L| ≤ γ} with L the box side per axis, lexicographic order."""
    L = grid.side_lengths
    kmax = [int(np.floor(gamma * L[i] / (2 * np.pi) + 1e-12)) for i in range(grid.d)]
    axes = [np.arange(-k, k + 1) for k in kmax]
    ks = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, grid.d)
    xis = 2 * np.pi * ks / L
    keep = np.linalg.norm(xis, axis=1) <= gamma * (1 + 1e-12)
    return xis[keep]


def max_representable_xi(grid: Grid) -> float:
    """Largest |ξ| the node grid resolves (Nyquist per axis)."""
    return float(np.linalg.norm(np.pi / grid.h))


@dataclass
class ReconstructionResult:
    samples: list[tuple[np.ndarray, complex]]
    gamma: float
    rho_rec: np.ndarray
    metrics: dict = field(default_factory=dict)


def _symmetrize(samples):
    table = {tuple(np.round(np.asarray(x, float), 12)): complex(v) for x, v in samples}
    out = []
    missing = False
    for key, v in table.items():
        mirror = tuple(-k + 0.0 for k in key)
        if mirror in table:
            out.append((np.array(key), 0.5 * (v + np.conj(table[mirror]))))
        else:
            missing = True
            out.append((np.array(key), v))
            out.append((np.array(mirror), np.conj(v)))
    if missing:
        warnings.warn("sample set not symmetric under ξ -> -ξ; mirrored samples added", stacklevel=3)
    return out


def band_limited(rho: np.ndarray, grid: Grid, gamma: float) -> np.ndarray:
    """Band-limited truth: synthesis from its own quadrature samples on the γ-lattice."""
    samples = [(xi, oracle_fourier(rho, xi, grid)) for xi in xi_lattice(grid, gamma)]
    return _synthesize(samples, grid).real


def _synthesize(samples, grid: Grid) -> np.ndarray:
    X = grid.coords()
    vol = float(np.prod(grid.side_lengths))
    acc = np.zeros(grid.shape, complex)
    for xi, v in samples:
        acc += v * np.exp(-1j * np.tensordot(np.asarray(xi, float), X, axes=(0, 0)))
    return acc / vol


def reconstruct_density(samples, gamma: float, grid: Grid, truth: np.ndarray | None = None,
                        oracle: dict | None = None) -> ReconstructionResult:
    """Real field Σ F̂(ξ) e^{-iξ·x}/|Ω| over the lattice samples with |ξ| ≤ γ."""
    L = grid.side_lengths
    lattice = [tuple(np.round(x, 12)) for x in xi_lattice(grid, gamma)]
    sym = _symmetrize([(x, v) for x, v in samples if np.linalg.norm(x) <= gamma * (1 + 1e-12)])
    keys = {tuple(np.round(x, 12)) for x, _ in sym}
    off = [k for k in keys if not np.allclose(np.asarray(k) * L / (2 * np.pi), np.round(np.asarray(k) * L / (2 * np.pi)))]
    if off:
        raise ValueError(f"samples off the 2π/L lattice: {off[:3]}")
    field_c = _synthesize(sym, grid)
    peak = max(float(np.abs(field_c).max()), 1e-300)
    imag = float(np.abs(field_c.imag).max())
    rho_rec = field_c.real.copy()
    metrics: dict = {"max_imag_relative": imag / peak, "n_samples": len(sym), "lattice_complete": set(lattice) <= keys}
    if truth is not None:
        bl = band_limited(truth, grid, gamma)
        w = grid.node_weights
        metrics["l2_error_vs_bandlimited"] = float(
            np.sqrt(np.sum(w * (rho_rec - bl) ** 2) / np.sum(w * bl**2))
        )
        metrics["l2_error_vs_truth"] = float(np.sqrt(np.sum(w * (rho_rec - truth) ** 2) / np.sum(w * truth**2)))
        f0 = abs(oracle_fourier(truth, np.zeros(grid.d), grid))
        errs = [abs(v - oracle_fourier(truth, x, grid)) / f0 for x, v in samples]
        metrics["max_sample_error_rel_f0"] = float(max(errs)) if errs else 0.0
    return ReconstructionResult(list(samples), gamma, rho_rec, metrics)
