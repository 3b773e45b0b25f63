"""Boundary operators: DtN maps, time-integral operators, 𝒥, 𝒦 and volume oracles.

Time samples live on ``t_k = k dt``; the interval (0, T) has ``N`` steps
and the pairing uses the left rule (weight ``dt`` at ``k < N``, 0 at
``t_N``), which is the pairing under which leapfrog satisfies a discrete
Green identity.  The half-window operator ℬ is the lattice midpoint rule

    (ℬg)_k = dt Σ_{l = k+1, k+3, ..., 2N-1-k} g_l,

exact on constants and linear functions, and 𝓘 is the trapezoid rule.
With these choices ⟨f, 𝒥h⟩ reproduces the discrete volume pairing
(u_f(T), u_h(T))_ρ to round-off.

Sources are expanded in ``Φ_{b,c,m} = e_c χ_b a_m(t) / (√w_b ‖a_m‖)``
(unit norm).  DtN outputs are represented by their moments against an
orthonormal temporal test space that contains every function the
operators are paired with, so all pairings below are exact.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .elastic_forward import DEFAULT_CFL, ElasticOperator, left_time_weights, leapfrog, solve_ibvp
from .mesh_materials import ConfigurationError, Grid, MaterialModel, StructuralError

log = logging.getLogger(__name__)


class HorizonError(ValueError):
    """Operators defined on incompatible time horizons or bases."""


# time operators on sampled fields; axis 0 is time


def theta_extend(values: np.ndarray) -> np.ndarray:
    """Zero extension from samples ``0..N`` to ``0..2N``."""
    values = np.asarray(values)
    n = values.shape[0] - 1
    out = np.zeros((2 * n + 1,) + values.shape[1:], dtype=values.dtype)
    out[: n + 1] = values
    return out


def _lattice_matrix(n: int, dt: float) -> np.ndarray:
    """Matrix of ℬ: samples 0..2N -> samples 0..N."""
    B = np.zeros((n + 1, 2 * n + 1))
    for k in range(n):
        B[k, k + 1 : 2 * n - k : 2] = dt
    return B


def _trapezoid_tail_matrix(n: int, dt: float) -> np.ndarray:
    """Matrix of 𝓘: (𝓘g)_k = trapezoid rule of g over [t_k, T]."""
    I = np.zeros((n + 1, n + 1))
    for k in range(n):
        I[k, k : n + 1] = dt
        I[k, k] = I[k, n] = 0.5 * dt
    return I


def _trapezoid_window_matrix(n: int, dt: float) -> np.ndarray:
    """ℬ by the trapezoid rule on [t_k, t_{2N-k}] (not exact for the identity)."""
    B = np.zeros((n + 1, 2 * n + 1))
    for k in range(n):
        B[k, k : 2 * n - k + 1] = 0.5 * dt
        B[k, k] = B[k, 2 * n - k] = 0.25 * dt
    return B


def op_B(values: np.ndarray, dt: float, rule: str = "lattice") -> np.ndarray:
    """(ℬg)(t) = ½ ∫_t^{2T-t} g(s) ds for samples ``0..2N``; returns samples ``0..N``."""
    values = np.asarray(values)
    if (values.shape[0] - 1) % 2:
        raise HorizonError("ℬ needs an even number of steps on (0, 2T)")
    n = (values.shape[0] - 1) // 2
    if rule == "lattice":
        B = _lattice_matrix(n, dt)
    elif rule == "trapezoid":
        B = _trapezoid_window_matrix(n, dt)
    else:
        raise ConfigurationError(f"unknown quadrature rule {rule!r}")
    return np.tensordot(B, values, axes=(1, 0))


def op_B_adjoint(values: np.ndarray, dt: float) -> np.ndarray:
    """Adjoint of the lattice ℬ under the left-rule pairings on (0,T) and (0,2T)."""
    values = np.asarray(values)
    n = values.shape[0] - 1
    B = _lattice_matrix(n, dt)
    w_t = left_time_weights(n, dt)
    w_2t = left_time_weights(2 * n, dt)
    out = np.tensordot(B.T, w_t[:, None] * values.reshape(n + 1, -1), axes=(1, 0))
    safe = np.where(w_2t > 0, w_2t, 1.0)
    out = out / safe[:, None]
    out[w_2t == 0] = 0.0
    return out.reshape((2 * n + 1,) + values.shape[1:])


def op_I(values: np.ndarray, dt: float) -> np.ndarray:
    """(𝓘g)(t) = ∫_t^T g(s) ds by the trapezoid rule, samples ``0..N``."""
    values = np.asarray(values)
    n = values.shape[0] - 1
    return np.tensordot(_trapezoid_tail_matrix(n, dt), values, axes=(1, 0))


def bump(s: np.ndarray) -> np.ndarray:
    """C² bump (1-s²)³ on [-1, 1], zero outside."""
    s = np.asarray(s, float)
    return np.where(np.abs(s) < 1, (1 - s * s) ** 3, 0.0)


# basis


@dataclass(frozen=True)
class BoundaryBasis:
    """Tensor basis: boundary node × component × temporal C² bump.

    Atoms are centred at ``(m+1) T / n_atoms`` with half-width
    ``width · T / n_atoms`` (``0 < width ≤ 1``), so every atom vanishes
    with two derivatives at t = 0 and all but the last are integer-step
    shifts of the first.  The last atom is cut at T.
    """

    grid: Grid
    n_atoms: int
    dt: float
    steps_per_atom: int
    width: float = 1.0

    def __post_init__(self):
        if self.n_atoms < 1 or self.steps_per_atom < 2:
            raise ConfigurationError("need at least one atom and two steps per atom")
        if not 0 < self.width <= 1:
            raise ConfigurationError("atom width must lie in (0, 1]")

    @property
    def n_steps(self) -> int:
        return self.n_atoms * self.steps_per_atom

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @property
    def n_spatial(self) -> int:
        return self.grid.n_boundary * self.grid.d

    @property
    def size(self) -> int:
        return self.n_spatial * self.n_atoms

    def times(self, double: bool = False) -> np.ndarray:
        n = 2 * self.n_steps if double else self.n_steps
        return np.arange(n + 1) * self.dt

    def atom(self, m: int, t: np.ndarray) -> np.ndarray:
        spacing = self.steps_per_atom * self.dt
        return bump((np.asarray(t) - (m + 1) * spacing) / (self.width * spacing))

    def waveforms(self, double: bool = False) -> np.ndarray:
        """Atom samples, shape ``(n_atoms, N+1)`` or, zero-extended past T, ``(n_atoms, 2N+1)``."""
        t = self.times(double)
        a = np.array([self.atom(m, t) for m in range(self.n_atoms)])
        a[:, self.n_steps + 1 :] = 0.0
        return a

    @cached_property
    def atom_norms(self) -> np.ndarray:
        w = left_time_weights(self.n_steps, self.dt)
        return np.sqrt(self.waveforms() ** 2 @ w)

    @cached_property
    def atom_gram(self) -> np.ndarray:
        """Gram matrix of the normalized atoms in the left-rule pairing."""
        a = self.waveforms() / self.atom_norms[:, None]
        w = left_time_weights(self.n_steps, self.dt)
        return (a * w) @ a.T

    @property
    def gram(self) -> np.ndarray:
        """Gram matrix of the full basis (spatial part is orthonormal)."""
        return np.kron(np.eye(self.n_spatial), self.atom_gram)

    def index(self, b: int, c: int, m: int) -> int:
        return (b * self.grid.d + c) * self.n_atoms + m

    def synthesize(self, coeffs: np.ndarray, double: bool = False) -> np.ndarray:
        """Boundary samples ``(n_t, n_bnd, d)`` of Σ coeffs·Φ."""
        g = self.grid
        c = np.asarray(coeffs).reshape(g.n_boundary, g.d, self.n_atoms)
        c = c / (np.sqrt(g.boundary_weights)[:, None, None] * self.atom_norms)
        return np.einsum("bcm,mk->kbc", c, self.waveforms(double))

    def project(self, values: np.ndarray) -> np.ndarray:
        """Least-squares coefficients of a boundary field ``(N+1, n_bnd, d)``."""
        g = self.grid
        w = left_time_weights(self.n_steps, self.dt)
        a = self.waveforms() / self.atom_norms[:, None]
        rhs = np.einsum("k,mk,kbc->bcm", w, a, values) * np.sqrt(g.boundary_weights)[:, None, None]
        sol = np.linalg.solve(self.atom_gram, rhs.reshape(-1, self.n_atoms).T).T
        return sol.reshape(-1)

    def describe(self) -> dict:
        return {
            "n_boundary": self.grid.n_boundary,
            "d": self.grid.d,
            "n": list(self.grid.n),
            "n_atoms": self.n_atoms,
            "steps_per_atom": self.steps_per_atom,
            "width": self.width,
            "dt": self.dt,
            "T": self.horizon,
        }


def make_basis(
    grid: Grid,
    material: MaterialModel,
    horizon: float,
    n_atoms: int = 8,
    width: float = 1.0,
    cfl: float = DEFAULT_CFL,
) -> BoundaryBasis:
    """Basis with the largest stable dt such that T/dt is a multiple of ``n_atoms``."""
    limit = cfl * float(grid.h.min()) / material.c_max()
    per_atom = int(np.ceil(horizon / (n_atoms * limit) - 1e-12))
    per_atom = max(per_atom, 2)
    dt = horizon / (n_atoms * per_atom)
    return BoundaryBasis(grid, n_atoms, dt, per_atom, width)


# operators


@dataclass
class BoundaryOperator:
    """Dense matrix between coefficient spaces with Gram matrices defining the inner products.

    A Gram given as a 1-D array is a diagonal weight vector.  The adjoint is
    ``G_in⁻¹ Aᵀ G_out`` so that ``⟨A f, h⟩_out = ⟨f, A* h⟩_in``.
    """

    matrix: np.ndarray
    gram_in: np.ndarray
    gram_out: np.ndarray
    horizon: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("gram_in", "gram_out"):
            g = np.asarray(getattr(self, name))
            diag = g if g.ndim == 1 else np.diag(g)
            if np.any(diag <= 0):
                raise ConfigurationError(f"{name} has non-positive weights")

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def __matmul__(self, x):
        return self.matrix @ x

    @staticmethod
    def _mul(gram, x):
        g = np.asarray(gram)
        return g[:, None] * x if g.ndim == 1 else g @ x

    @staticmethod
    def _solve(gram, x):
        g = np.asarray(gram)
        return x / g[:, None] if g.ndim == 1 else np.linalg.solve(g, x)

    def inner_in(self, f, h):
        return np.asarray(f) @ self._mul(self.gram_in, np.asarray(h).reshape(len(h), -1)).ravel()

    def inner_out(self, f, h):
        return np.asarray(f) @ self._mul(self.gram_out, np.asarray(h).reshape(len(h), -1)).ravel()

    def adjoint(self) -> "BoundaryOperator":
        mat = self._solve(self.gram_in, self.matrix.T @ self._mul(self.gram_out, np.eye(self.shape[0])))
        meta = dict(self.meta)
        meta["adjoint_of"] = meta.get("name", "operator")
        meta["name"] = meta.get("name", "operator") + "*"
        return BoundaryOperator(mat, self.gram_out, self.gram_in, self.horizon, meta)

    def dump(self, path: str | Path) -> None:
        """JSON header + little-endian float64 (complex as re/im interleaved) matrix."""
        path = Path(path)
        mat = np.ascontiguousarray(self.matrix)
        digest = hashlib.sha256(
            np.ascontiguousarray(self.gram_in, "<f8").tobytes() + np.ascontiguousarray(self.gram_out, "<f8").tobytes()
        ).hexdigest()
        header = {
            "horizon": self.horizon,
            "shape": list(mat.shape),
            "complex": bool(np.iscomplexobj(mat)),
            "weights_digest": digest,
            "meta": {k: v for k, v in self.meta.items() if _jsonable(v)},
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(header, indent=2, sort_keys=True))
        data = mat.view("<f8") if np.iscomplexobj(mat) else mat.astype("<f8")
        path.write_bytes(np.ascontiguousarray(data).tobytes())


def _jsonable(v) -> bool:
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def _orthonormal_time_basis(vectors: np.ndarray, weights: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Rows orthonormal in Σ w_k q_k r_k spanning the rows of ``vectors``."""
    sw = np.sqrt(weights)
    u, s, vt = np.linalg.svd(vectors * sw, full_matrices=False)
    keep = s > rtol * s[0]
    q = vt[keep]
    out = np.zeros_like(q)
    nz = sw > 0
    out[:, nz] = q[:, nz] / sw[nz]
    return out


@dataclass
class DtnOperator(BoundaryOperator):
    """Λ at one horizon: rows are ``(boundary dof, test function)``, columns basis elements.

    ``test`` holds the orthonormal temporal test functions sampled on the
    horizon's time grid; row ``(s, q)`` is the coefficient of the traction
    against ``e_c χ_b test[q] / √w_b``.
    """

    basis: BoundaryBasis | None = None
    test: np.ndarray | None = None

    def adjoint(self) -> BoundaryOperator:
        return BoundaryOperator.adjoint(self)


class _MomentAccumulator:
    """Σ_j R^j ⊗ kernel[j] for reaction blocks arriving one step at a time."""

    def __init__(self, kernel: np.ndarray, nb: int, chunk: int = 48):
        self.kernel = kernel
        self.nb = nb
        self.chunk = chunk
        self.buf = np.empty((chunk, nb * nb))
        self.rows: list[int] = []
        self.total = np.zeros((nb * nb, kernel.shape[1]))

    def __call__(self, j: int, r: np.ndarray) -> None:
        if j >= self.kernel.shape[0]:
            return
        self.buf[len(self.rows)] = r.reshape(-1)
        self.rows.append(j)
        if len(self.rows) == self.chunk:
            self.flush()

    def flush(self) -> None:
        if self.rows:
            c = len(self.rows)
            self.total += self.buf[:c].T @ self.kernel[self.rows]
            self.rows = []

    def result(self) -> np.ndarray:
        self.flush()
        return self.total.reshape(self.nb, self.nb, -1)


def _run_source(op: ElasticOperator, basis: BoundaryBasis, wave: np.ndarray, kernel: np.ndarray,
                offset: int = 0) -> np.ndarray:
    """Drive every boundary dof with ``wave`` (samples from step ``offset``) and return moments.

    Result ``[s_out, s_in, col] = Σ_j R^j[s_out, s_in] kernel[j + offset, col]``.
    """
    nb = op.n_bdofs
    n_run = kernel.shape[0] - offset
    eye = np.eye(nb)
    # output rows in (b, c) order, inputs likewise
    perm = np.arange(nb)
    acc = _MomentAccumulator(kernel[offset:], nb)

    def bdata(k):
        v = wave[k] if k < len(wave) else 0.0
        return eye * v if v != 0.0 else None

    def on_reaction(k, r):
        acc(k, r[perm])

    leapfrog(op, basis.dt, n_run, nb, bdata, on_reaction=on_reaction)
    return acc.result()


def _dof_permutation(grid: Grid) -> np.ndarray:
    """ElasticOperator boundary dofs are ordered (b, c) already; identity."""
    return np.arange(grid.n_boundary * grid.d)


def assemble_dtn_pair(
    material: MaterialModel,
    grid: Grid,
    basis: BoundaryBasis,
    op: ElasticOperator | None = None,
    include_double: bool = True,
) -> tuple[DtnOperator, DtnOperator | None]:
    """Λ_T and Λ_2T for every basis element with two batched forward runs.

    Atoms ``0..n_atoms-2`` are step shifts of atom 0, so one run driven by
    atom 0 on all boundary dofs at once yields every such column; a second
    run covers the last atom, whose zero extension is cut at T.
    """
    op = op or ElasticOperator(grid, material)
    op.check_cfl(basis.dt)
    t0 = time.perf_counter()
    n, na, ws, dt = basis.n_steps, basis.n_atoms, basis.steps_per_atom, basis.dt
    wT = left_time_weights(n, dt)
    w2T = left_time_weights(2 * n, dt)
    a = basis.waveforms()
    a2 = basis.waveforms(double=True)
    BTa = np.array([op_B(theta_extend(a[m]), dt) for m in range(na)])
    ones = np.ones(n + 1)
    test_T = _orthonormal_time_basis(np.vstack([a, BTa, op_I(ones, dt)[None]]), wT)
    nqT = len(test_T)
    if include_double:
        Bsa = np.array([op_B_adjoint(a[m], dt) for m in range(na)])
        test_2T = _orthonormal_time_basis(np.vstack([a2, Bsa]), w2T)
        nq2 = len(test_2T)
    n_run = 2 * n if include_double else n

    # kernel columns: Λ_T for atoms 0..na-1 (shifted), Λ_2T for atoms 0..na-2 (shifted)
    cols = []
    kern = np.zeros((n_run, na * nqT + (na - 1) * (nq2 if include_double else 0)))
    j = np.arange(n_run)
    col = 0
    for m in range(na):
        idx = j + m * ws
        ok = idx < n
        kern[ok, col : col + nqT] = (dt * test_T[:, idx[ok]]).T
        cols.append(("T", m, col))
        col += nqT
    if include_double:
        for m in range(na - 1):
            idx = j + m * ws
            ok = idx < 2 * n
            kern[ok, col : col + nq2] = (dt * test_2T[:, idx[ok]]).T
            cols.append(("2T", m, col))
            col += nq2
    base = _run_source(op, basis, a2[0] if include_double else a[0], kern)
    log.info("base run: %.1fs", time.perf_counter() - t0)

    nb = op.n_bdofs
    sw = np.sqrt(grid.boundary_weights).repeat(grid.d)
    norms = basis.atom_norms
    AT = np.zeros((nb, nqT, nb, na))
    for kind, m, c in cols:
        if kind == "T":
            AT[:, :, :, m] = base[:, :, c : c + nqT].transpose(0, 2, 1)
    AT /= sw[:, None, None, None] * sw[None, None, :, None] * norms[None, None, None, :]
    lam_T = DtnOperator(
        AT.reshape(nb * nqT, nb * na), basis.gram, np.ones(nb * nqT), basis.horizon,
        {"name": "Lambda_T", "n_test": nqT}, basis=basis, test=test_T,
    )
    if not include_double:
        return lam_T, None

    A2 = np.zeros((nb, nq2, nb, na))
    for kind, m, c in cols:
        if kind == "2T":
            A2[:, :, :, m] = base[:, :, c : c + nq2].transpose(0, 2, 1)
    # last atom: its own run, started where the atom switches on
    last = a2[na - 1]
    start = int(np.argmax(last != 0)) - 1
    start = max(start, 0)
    kern2 = np.zeros((2 * n, nq2))
    kern2[:] = (dt * test_2T[:, : 2 * n]).T
    moments = _run_source(op, basis, last[start:], kern2, offset=start)
    A2[:, :, :, na - 1] = moments.transpose(0, 2, 1)
    A2 /= sw[:, None, None, None] * sw[None, None, :, None] * norms[None, None, None, :]
    lam_2T = DtnOperator(
        A2.reshape(nb * nq2, nb * na), basis.gram, np.ones(nb * nq2), 2 * basis.horizon,
        {"name": "Lambda_2T", "n_test": nq2}, basis=basis, test=test_2T,
    )
    log.info("DtN assembly (%d sources): %.1fs", basis.size, time.perf_counter() - t0)
    return lam_T, lam_2T


def assemble_dtn(material: MaterialModel, grid: Grid, basis: BoundaryBasis, horizon: str = "T",
                 op: ElasticOperator | None = None) -> DtnOperator:
    """Λ at horizon ``"T"`` or ``"2T"``."""
    if horizon not in ("T", "2T"):
        raise HorizonError("horizon must be 'T' or '2T'")
    lam_T, lam_2T = assemble_dtn_pair(material, grid, basis, op, include_double=horizon == "2T")
    return lam_T if horizon == "T" else lam_2T


def _check_pair(lam_T: DtnOperator, lam_2T: DtnOperator) -> BoundaryBasis:
    if lam_T.basis is None or lam_2T.basis is None or lam_T.basis.describe() != lam_2T.basis.describe():
        raise HorizonError("operators were assembled on different bases")
    if not np.isclose(lam_2T.horizon, 2 * lam_T.horizon):
        raise HorizonError(f"horizons {lam_T.horizon} and {lam_2T.horizon} are not T and 2T")
    return lam_T.basis


def _test_coefficients(test: np.ndarray, weights: np.ndarray, fns: np.ndarray) -> np.ndarray:
    """⟨test_q, fn_m⟩ under ``weights``: shape (n_test, n_fns)."""
    return (test * weights) @ fns.T


def connecting_operator(lam_T: DtnOperator, lam_2T: DtnOperator, symmetrize: bool = True) -> BoundaryOperator:
    """𝒥 = Λ_T* ℬΘ − ℬ Λ_2T Θ on the basis coefficient space.

    Returned as the Gram-weighted operator ``G⁻¹ J`` where ``J[i, j] = ⟨Φ_i, 𝒥Φ_j⟩``
    is kept in ``meta["form"]``; the relative asymmetry of ``J`` before
    symmetrization is in ``meta["asymmetry"]``.
    """
    basis = _check_pair(lam_T, lam_2T)
    n, dt, na = basis.n_steps, basis.dt, basis.n_atoms
    a = basis.waveforms() / basis.atom_norms[:, None]
    BTa = np.array([op_B(theta_extend(a[m]), dt) for m in range(na)])
    Bsa = np.array([op_B_adjoint(a[m], dt) for m in range(na)])
    BQ = _test_coefficients(lam_T.test, left_time_weights(n, dt), BTa)
    B2Q = _test_coefficients(lam_2T.test, left_time_weights(2 * n, dt), Bsa)
    ns = basis.n_spatial
    AT = lam_T.matrix.reshape(ns, -1, ns * na)
    A2 = lam_2T.matrix.reshape(ns, -1, ns * na)
    # ⟨Λ_T f, ℬΘh⟩ with f the column, h = (s, m)
    first = np.einsum("sqf,qm->fsm", AT, BQ).reshape(ns * na, ns * na)
    # ⟨ℬ* f, Λ_2T Θh⟩ with f = (s, m), h the column
    second = np.einsum("sqh,qm->smh", A2, B2Q).reshape(ns * na, ns * na)
    J = first - second
    scale = np.linalg.norm(J)
    asym = float(np.linalg.norm(J - J.T) / scale) if scale > 0 else 0.0
    log.info("connecting operator asymmetry %.3e", asym)
    if symmetrize:
        J = 0.5 * (J + J.T)
    G = basis.gram
    meta = {"name": "J", "asymmetry": asym, "form": J}
    return BoundaryOperator(np.linalg.solve(G, J), G, G, 2 * basis.horizon, meta)


def op_K(lam_T: DtnOperator, trace0: np.ndarray, trace1: np.ndarray) -> np.ndarray:
    """Coefficients of 𝒦φ = Λ_T*(𝓘T₀φ) − 𝓘(T₁φ) in the source basis.

    ``trace0``, ``trace1`` are the time-independent traces of φ and of its
    traction, shape ``(n_bnd, d)`` (complex allowed).  Returned ``c`` has
    ``⟨f, 𝒦φ⟩ = c_fᵀ G c`` for the basis Gram ``G``; pairings are bilinear.
    """
    basis = lam_T.basis
    g = basis.grid
    t0 = np.asarray(trace0)
    t1 = np.asarray(trace1)
    if t0.shape != (g.n_boundary, g.d) or t1.shape != (g.n_boundary, g.d):
        raise StructuralError(f"traces must have shape {(g.n_boundary, g.d)}")
    return np.linalg.solve(basis.gram, k_form(lam_T, t0, t1))


def k_form(lam_T: DtnOperator, trace0: np.ndarray, trace1: np.ndarray) -> np.ndarray:
    """``⟨Φ_i, 𝒦φ⟩`` for every basis element (the Gram-weighted form of :func:`op_K`)."""
    basis = lam_T.basis
    g = basis.grid
    n, dt = basis.n_steps, basis.dt
    wT = left_time_weights(n, dt)
    tail = op_I(np.ones(n + 1), dt)
    sw = np.sqrt(g.boundary_weights)
    dtype = np.result_type(trace0, trace1, float)
    y = np.outer((sw[:, None] * trace0).reshape(-1), lam_T.test @ (wT * tail)).astype(dtype)
    a = basis.waveforms() / basis.atom_norms[:, None]
    z = np.outer((sw[:, None] * trace1).reshape(-1), a @ (wT * tail))
    return lam_T.matrix.T @ y.reshape(-1) - z.reshape(-1)


# volume oracles


def volume_pairing(u: np.ndarray, v: np.ndarray, material: MaterialModel, grid: Grid):
    """∫_Ω u·v ρ dx by the node quadrature (bilinear, no conjugation)."""
    return np.sum(u * v * (material.rho * grid.node_weights)[None])


def final_state(material: MaterialModel, grid: Grid, basis: BoundaryBasis, coeffs: np.ndarray,
                op: ElasticOperator | None = None) -> np.ndarray:
    """u_f(T) for the source Σ coeffs·Φ (real coefficients)."""
    f = basis.synthesize(coeffs)
    traj = solve_ibvp(material, grid, f, basis.horizon, basis.dt, storage="final", op=op)
    return traj.final


def blagoveshchenskii_oracle(material, grid, basis, cf, ch, op=None) -> float:
    """(u_f(T), u_h(T))_ρ from two volume forward solves."""
    op = op or ElasticOperator(grid, material)
    return float(volume_pairing(final_state(material, grid, basis, cf, op),
                                final_state(material, grid, basis, ch, op), material, grid))


def k_identity_oracle(material, grid, basis, cf, phi, op=None):
    """(u_f(T), φ)_ρ for a vector field ``phi`` of shape ``(d, *shape)``."""
    return volume_pairing(final_state(material, grid, basis, cf, op), phi, material, grid)
