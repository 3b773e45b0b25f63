"""Box grids, Lamé/density fields and the pointwise admissibility checks.

Nodes are ordered lexicographically with ``indexing="ij"``: a scalar grid
field has shape ``grid.shape`` and a vector field ``(d, *grid.shape)``.
Boundary nodes are enumerated in increasing flat index.  Faces are numbered
``2 * axis + side`` (side 0 is the low face), so in 2-D the order is
left, right, bottom, top.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class ConfigurationError(ValueError):
    """Invalid geometry or solver configuration."""


class StructuralError(ValueError):
    """Arrays that do not fit together (shapes, bases, grids)."""


@dataclass(frozen=True)
class Grid:
    d: int
    n: tuple[int, ...]
    extents: tuple[tuple[float, float], ...]
    h: np.ndarray
    x0: np.ndarray
    boundary_index: np.ndarray  # flat node indices, increasing
    boundary_multi: np.ndarray  # (n_bnd, d) multi-indices
    normals: np.ndarray  # (n_bnd, d), one outward normal per node
    face_weights: np.ndarray  # (n_bnd, 2d) trapezoid weight of the node in each face
    node_weights: np.ndarray = field(repr=False)  # trapezoid volume weights, grid.shape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.n))

    @property
    def n_boundary(self) -> int:
        return len(self.boundary_index)

    @property
    def boundary_weights(self) -> np.ndarray:
        """Surface quadrature weight per boundary node (sum over incident faces)."""
        return self.face_weights.sum(axis=1)

    @property
    def side_lengths(self) -> np.ndarray:
        return np.array([b - a for a, b in self.extents])

    @property
    def volume(self) -> float:
        return float(np.prod(self.side_lengths))

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, k) for (a, b), k in zip(self.extents, self.n)]

    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(d, *shape)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"))

    def boundary_coords(self) -> np.ndarray:
        """Coordinates of the boundary nodes, shape ``(n_bnd, d)``."""
        return self.coords().reshape(self.d, -1)[:, self.boundary_index].T

    def face_normal(self, face: int) -> np.ndarray:
        nu = np.zeros(self.d)
        nu[face // 2] = -1.0 if face % 2 == 0 else 1.0
        return nu

    def face_mask(self, face: int) -> np.ndarray:
        """Boolean mask over boundary nodes lying on ``face``."""
        return self.face_weights[:, face] > 0

    def interior_mask(self) -> np.ndarray:
        mask = np.ones(self.shape, dtype=bool)
        mask.reshape(-1)[self.boundary_index] = False
        return mask

    def bounding_radius(self, origin: Sequence[float] | None = None) -> float:
        """Radius of the smallest origin-centred ball containing the box."""
        c = np.zeros(self.d) if origin is None else np.asarray(origin, float)
        far = [max(abs(a - ci), abs(b - ci)) for (a, b), ci in zip(self.extents, c)]
        return float(np.linalg.norm(far))


def build_grid(
    d: int,
    n: int | Sequence[int],
    extents: Sequence[Sequence[float]] | None = None,
    x0: Sequence[float] | None = None,
) -> Grid:
    """Uniform node grid on an axis-aligned box.

    ``x0`` is the exterior reference point of the Carleman weight and must
    lie strictly outside the closed box.
    """
    if d not in (2, 3):
        raise ConfigurationError(f"dimension must be 2 or 3, got {d}")
    n_axes = (int(n),) * d if np.isscalar(n) else tuple(int(k) for k in n)
    if len(n_axes) != d or min(n_axes) < 3:
        raise ConfigurationError(f"need at least 3 nodes on each of {d} axes, got {n_axes}")
    if extents is None:
        extents = [(0.0, 1.0)] * d
    ext = tuple((float(a), float(b)) for a, b in extents)
    if len(ext) != d or any(b <= a for a, b in ext):
        raise ConfigurationError(f"bad extents {extents!r}")
    if x0 is None:
        x0 = [a - 1.0 for a, _ in ext]
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (d,):
        raise ConfigurationError(f"x0 must have {d} components")
    if all(a <= xi <= b for xi, (a, b) in zip(x0, ext)):
        raise ConfigurationError(f"x0={x0.tolist()} lies in the closed box {ext}")

    h = np.array([(b - a) / (k - 1) for (a, b), k in zip(ext, n_axes)])

    # 1-D trapezoid factors; products give node volumes and face areas
    eta = []
    for k in n_axes:
        e = np.ones(k)
        e[[0, -1]] = 0.5
        eta.append(e)

    multi = np.stack(np.meshgrid(*[np.arange(k) for k in n_axes], indexing="ij")).reshape(d, -1).T
    on_face = np.zeros((len(multi), 2 * d), dtype=bool)
    for ax in range(d):
        on_face[:, 2 * ax] = multi[:, ax] == 0
        on_face[:, 2 * ax + 1] = multi[:, ax] == n_axes[ax] - 1
    bnd = np.flatnonzero(on_face.any(axis=1))
    bmulti = multi[bnd]

    face_w = np.zeros((len(bnd), 2 * d))
    for face in range(2 * d):
        ax = face // 2
        w = np.ones(len(bnd))
        for other in range(d):
            if other != ax:
                w *= h[other] * eta[other][bmulti[:, other]]
        face_w[:, face] = np.where(on_face[bnd, face], w, 0.0)

    normals = np.zeros((len(bnd), d))
    first_face = np.argmax(on_face[bnd], axis=1)
    normals[np.arange(len(bnd)), first_face // 2] = np.where(first_face % 2 == 0, -1.0, 1.0)

    node_w = np.ones(n_axes)
    for ax in range(d):
        shp = [1] * d
        shp[ax] = n_axes[ax]
        node_w = node_w * (h[ax] * eta[ax]).reshape(shp)

    return Grid(
        d=d,
        n=n_axes,
        extents=ext,
        h=h,
        x0=x0,
        boundary_index=bnd,
        boundary_multi=bmulti,
        normals=normals,
        face_weights=face_w,
        node_weights=node_w,
    )


def grid_gradient(field_: np.ndarray, grid: Grid) -> np.ndarray:
    """Second-order centred gradient (one-sided second order at the edges)."""
    return np.stack(
        [np.gradient(field_, grid.h[ax], axis=ax, edge_order=2) for ax in range(grid.d)]
    )


@dataclass(frozen=True)
class Bounds:
    rho1: float
    mu0: float
    mu1: float
    lambda0: float
    lambda1: float


@dataclass(frozen=True)
class MaterialModel:
    rho: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    bounds: Bounds

    @property
    def shape(self) -> tuple[int, ...]:
        return self.rho.shape

    def with_rho(self, rho: np.ndarray) -> "MaterialModel":
        """Same Lamé fields, new density; the declared ρ₁ grows if needed."""
        b = self.bounds
        rho1 = max(b.rho1, float(np.max(rho)))
        return MaterialModel(np.asarray(rho, float), self.mu, self.lam,
                             Bounds(rho1, b.mu0, b.mu1, b.lambda0, b.lambda1))

    def c_max(self) -> float:
        """Largest pressure-wave speed sqrt((λ+2μ)/ρ)."""
        return float(np.sqrt(np.max((self.lam + 2 * self.mu) / self.rho)))

    def is_constant_mu(self, rtol: float = 1e-12) -> bool:
        return bool(np.ptp(self.mu) <= rtol * max(1.0, float(np.max(np.abs(self.mu)))))


def make_material(
    rho: np.ndarray | float,
    mu: np.ndarray | float,
    lam: np.ndarray | float,
    grid: Grid | None = None,
    bounds: Bounds | None = None,
) -> MaterialModel:
    """Material from fields or scalars; bounds default to the field extrema."""
    shape = grid.shape if grid is not None else None
    arrs = []
    for v in (rho, mu, lam):
        a = np.asarray(v, dtype=float)
        if a.ndim == 0:
            if shape is None:
                raise StructuralError("scalar material values need a grid")
            a = np.full(shape, float(a))
        arrs.append(a)
    rho_, mu_, lam_ = arrs
    if not (rho_.shape == mu_.shape == lam_.shape):
        raise StructuralError(
            f"material fields differ in shape: {rho_.shape}, {mu_.shape}, {lam_.shape}"
        )
    if shape is not None and rho_.shape != tuple(shape):
        raise StructuralError(f"fields have shape {rho_.shape}, grid has {shape}")
    if bounds is None:
        bounds = Bounds(
            rho1=float(rho_.max()),
            mu0=float(mu_.min()),
            mu1=float(mu_.max()),
            lambda0=float(lam_.min()),
            lambda1=float(lam_.max()),
        )
    return MaterialModel(rho_, mu_, lam_, bounds)


@dataclass
class Violation:
    constraint: str
    node: tuple[int, ...]
    value: float


@dataclass
class ValidationReport:
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_material(m: MaterialModel) -> ValidationReport:
    """Every node that breaks a pointwise bound, with the offending value."""
    if not (m.rho.shape == m.mu.shape == m.lam.shape):
        raise StructuralError("material fields differ in shape")
    d = m.rho.ndim
    b = m.bounds
    checks: list[tuple[str, np.ndarray, np.ndarray]] = [
        ("rho > 0", m.rho > 0, m.rho),
        ("rho <= rho1", m.rho <= b.rho1, m.rho),
        ("mu >= mu0 > 0", (m.mu >= b.mu0) & (b.mu0 > 0), m.mu),
        ("mu <= mu1", m.mu <= b.mu1, m.mu),
        ("lambda >= lambda0", m.lam >= b.lambda0, m.lam),
        ("lambda <= lambda1", m.lam <= b.lambda1, m.lam),
        ("d*lambda + 2*mu > 0", d * m.lam + 2 * m.mu > 0, d * m.lam + 2 * m.mu),
    ]
    out = []
    for name, ok, val in checks:
        for idx in zip(*np.nonzero(~ok)):
            idx = tuple(int(i) for i in idx)
            out.append(Violation(name, idx, float(val[idx])))
    return ValidationReport(out)


def _sym_basis(d: int) -> np.ndarray:
    """Frobenius-orthonormal basis of symmetric d×d matrices, as rows of vec(A)."""
    rows = []
    for i in range(d):
        for j in range(i, d):
            a = np.zeros((d, d))
            if i == j:
                a[i, i] = 1.0
            else:
                a[i, j] = a[j, i] = 1.0 / np.sqrt(2.0)
            rows.append(a.reshape(-1))
    return np.array(rows)


def lame_form_matrix(d: int, mu: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Matrices of A ↦ (μ(A+Aᵀ) + λ tr(A) I):A on vec(A), shape ``(*mu.shape, d², d²)``.

    The form is ``μ(I + Π) + λ vec(I) vec(I)ᵀ`` with Π the transpose
    permutation; it is symmetric by construction.
    """
    eye = np.eye(d * d)
    perm = np.eye(d * d).reshape(d, d, d, d).transpose(0, 1, 3, 2).reshape(d * d, d * d)
    vi = np.eye(d).reshape(-1)
    mu = np.asarray(mu, float)[..., None, None]
    lam = np.asarray(lam, float)[..., None, None]
    return mu * (eye + perm) + lam * np.outer(vi, vi)


@dataclass
class AdmissibilityReport:
    mode: str
    min_eig_first: np.ndarray
    min_eig_second: np.ndarray
    c0: float
    c1: float
    symmetry_defect: float

    @property
    def first_min(self) -> float:
        return float(self.min_eig_first.min())

    @property
    def second_min(self) -> float:
        return float(self.min_eig_second.min())

    @property
    def passes_first(self) -> bool:
        return self.first_min >= self.c0

    @property
    def passes_second(self) -> bool:
        return self.second_min >= self.c1

    @property
    def ok(self) -> bool:
        return self.passes_first and self.passes_second


def check_admissible_H(
    m: MaterialModel,
    l_field: np.ndarray,
    grid: Grid,
    c0: float,
    c1: float,
    mode: str = "literal",
) -> AdmissibilityReport:
    """Pointwise minimum eigenvalues of the two Lamé quadratic forms.

    ``mode="literal"`` minimises over all unit-Frobenius d×d matrices;
    ``"symmetric-restricted"`` over symmetric ones only.  For isotropic
    tensors the literal minimum is 0, attained at antisymmetric gradients.
    """
    if mode not in ("literal", "symmetric-restricted"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    if l_field.shape != m.shape or m.shape != grid.shape:
        raise StructuralError("l, material and grid shapes differ")
    d = grid.d
    gl = grid_gradient(l_field, grid)
    gmu = grid_gradient(m.mu, grid)
    glam = grid_gradient(m.lam, grid)
    mu_eff = m.mu - np.einsum("i...,i...->...", gmu, gl)
    lam_eff = m.lam - np.einsum("i...,i...->...", glam, gl)

    q1 = lame_form_matrix(d, m.mu, m.lam)
    q2 = lame_form_matrix(d, mu_eff, lam_eff)
    defect = float(max(np.abs(q1 - np.swapaxes(q1, -1, -2)).max(),
                       np.abs(q2 - np.swapaxes(q2, -1, -2)).max()))
    if mode == "symmetric-restricted":
        e = _sym_basis(d)
        q1 = e @ q1 @ e.T
        q2 = e @ q2 @ e.T
    return AdmissibilityReport(
        mode=mode,
        min_eig_first=np.linalg.eigvalsh(q1)[..., 0],
        min_eig_second=np.linalg.eigvalsh(q2)[..., 0],
        c0=c0,
        c1=c1,
        symmetry_defect=defect,
    )


def smoothness_diagnostic(field_: np.ndarray, grid: Grid) -> float:
    """Max second difference scaled by h², a cheap roughness indicator."""
    worst = 0.0
    for ax in range(grid.d):
        dd = np.diff(field_, n=2, axis=ax)
        worst = max(worst, float(np.abs(dd).max()) if dd.size else 0.0)
    return worst


# --- presets -------------------------------------------------------------


def bump(grid: Grid, center: Sequence[float] | None = None, width: float = 0.15) -> np.ndarray:
    """exp(-|x-c|²/w²) sampled on the grid."""
    x = grid.coords()
    if center is None:
        center = [(a + b) / 2 for a, b in grid.extents]
    c = np.asarray(center, float).reshape((grid.d,) + (1,) * grid.d)
    return np.exp(-np.sum((x - c) ** 2, axis=0) / width**2)


def collar_bump(grid: Grid, center: Sequence[float] | None = None, radius: float = 0.3) -> np.ndarray:
    """C² compactly supported bump (1-r²/R²)³ that vanishes outside radius R."""
    x = grid.coords()
    if center is None:
        center = [(a + b) / 2 for a, b in grid.extents]
    c = np.asarray(center, float).reshape((grid.d,) + (1,) * grid.d)
    r2 = np.sum((x - c) ** 2, axis=0) / radius**2
    return np.where(r2 < 1.0, (1.0 - np.minimum(r2, 1.0)) ** 3, 0.0)


PRESETS: dict[str, Callable[..., np.ndarray]] = {
    "constant": lambda grid, value=1.0: np.full(grid.shape, float(value)),
    "bump": lambda grid, base=1.0, amplitude=0.2, width=0.15: base + amplitude * bump(grid, width=width),
    "collar_bump": lambda grid, base=1.0, amplitude=0.2, radius=0.3: base
    + amplitude * collar_bump(grid, radius=radius),
    "linear_x": lambda grid, base=1.0, slope=0.1: base + slope * grid.coords()[0],
}


def preset_field(name: str, grid: Grid, **params: float) -> np.ndarray:
    try:
        fn = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown material preset {name!r}; known: {sorted(PRESETS)}") from None
    return fn(grid, **params)


def load_field_csv(path: str | Path, grid: Grid) -> np.ndarray:
    """Read a node-ordered CSV with header ``x1,...,xd,value``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = [f"x{i + 1}" for i in range(grid.d)] + ["value"]
        if [h.strip() for h in header] != expected:
            raise StructuralError(f"{path}: header {header} != {expected}")
        rows = np.array([[float(v) for v in row] for row in reader if row])
    if rows.shape != (grid.n_nodes, grid.d + 1):
        raise StructuralError(f"{path}: expected {grid.n_nodes} rows, got {rows.shape[0]}")
    coords = grid.coords().reshape(grid.d, -1).T
    if not np.allclose(rows[:, : grid.d], coords, atol=1e-9 * max(1.0, float(np.max(np.abs(coords))))):
        raise StructuralError(f"{path}: node coordinates do not match the grid ordering")
    return rows[:, grid.d].reshape(grid.shape)


def save_field_csv(path: str | Path, field_: np.ndarray, grid: Grid) -> None:
    coords = grid.coords().reshape(grid.d, -1).T
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(grid.d)] + ["value"])
        for xyz, v in zip(coords, np.asarray(field_).reshape(-1)):
            w.writerow([repr(float(c)) for c in xyz] + [repr(float(v))])
