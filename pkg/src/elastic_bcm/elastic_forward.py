"""Explicit leapfrog solver for the isotropic elastic wave system on a box.

The spatial operator is the gradient of a discrete energy

    a(u, v) = Σ_edges W k (Δu)(Δv) + Σ_nodes w [μ D_c u_j D_j v_c + λ D_j u_j D_c v_c]

where the first sum carries the compact diagonal terms (k = λ+2μ for the
aligned component, μ otherwise, arithmetic edge averages) and the second the
mixed terms with the summation-by-parts first derivative (centred inside,
one-sided at the ends).  The stiffness is therefore exactly symmetric over
all nodes, leapfrog conserves a discrete energy, and the boundary reaction

    R = M ü + K u   (boundary rows)

obeys a discrete Green identity.  ``R / w_∂`` is the variational traction;
:func:`traction` also offers the finite-difference traction.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh_materials import ConfigurationError, Grid, MaterialModel, StructuralError, grid_gradient

log = logging.getLogger(__name__)

DEFAULT_CFL = 0.5


class StorageError(RuntimeError):
    """The trajectory does not hold the snapshots an operation needs."""


class CompatibilityError(ValueError):
    """Boundary data that does not vanish at t = 0."""


def _sbp_d1(n: int, h: float) -> sp.csr_matrix:
    """First derivative: centred inside, first-order one-sided at both ends."""
    main = np.zeros(n)
    upper = np.full(n - 1, 0.5)
    lower = np.full(n - 1, -0.5)
    main[0], upper[0] = -1.0, 1.0
    main[-1], lower[-1] = 1.0, -1.0
    return sp.diags([lower, main, upper], [-1, 0, 1], format="csr") / h


def _diff(n: int, h: float) -> sp.csr_matrix:
    """Edge differences, shape (n-1, n)."""
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr") / h


def _avg(n: int) -> sp.csr_matrix:
    return sp.diags([np.full(n - 1, 0.5), np.full(n - 1, 0.5)], [0, 1], shape=(n - 1, n), format="csr")


def _along(ax: int, mat: sp.spmatrix, ns: tuple[int, ...]) -> sp.csr_matrix:
    """Apply a 1-D operator along axis ``ax`` of a C-ordered grid."""
    out = None
    for i, k in enumerate(ns):
        m = mat if i == ax else sp.identity(k, format="csr")
        out = m if out is None else sp.kron(out, m, format="csr")
    return out


class ElasticOperator:
    """Stiffness, lumped mass and dof bookkeeping for one grid + material.

    Dofs are component-major: dof ``c * n_nodes + node``.  Boundary dofs are
    ordered ``(boundary node, component)``, matching ``(n_bnd, d)`` arrays.
    """

    def __init__(self, grid: Grid, material: MaterialModel):
        if material.shape != grid.shape:
            raise StructuralError(f"material shape {material.shape} != grid shape {grid.shape}")
        self.grid = grid
        self.material = material
        d, ns, nn = grid.d, grid.shape, grid.n_nodes
        h = grid.h
        rho = material.rho.reshape(-1)
        mu = material.mu.reshape(-1)
        lam = material.lam.reshape(-1)
        w = grid.node_weights.reshape(-1)

        eta = []
        for k in ns:
            e = np.ones(k)
            e[[0, -1]] = 0.5
            eta.append(e)

        blocks = [[None] * d for _ in range(d)]
        D = [_along(ax, _sbp_d1(ns[ax], h[ax]), ns) for ax in range(d)]
        for j in range(d):
            E = _along(j, _diff(ns[j], h[j]), ns)
            A = _along(j, _avg(ns[j]), ns)
            # dual volume of each edge: h_j times trapezoid factors across
            wshape = list(ns)
            wshape[j] -= 1
            we = np.ones(wshape)
            for i in range(d):
                if i != j:
                    shp = [1] * d
                    shp[i] = ns[i]
                    we = we * (h[i] * eta[i]).reshape(shp)
            we = we.reshape(-1) * h[j]
            mu_e = A @ mu
            lam_e = A @ lam
            for c in range(d):
                k_e = (lam_e + 2 * mu_e) if c == j else mu_e
                term = E.T @ sp.diags(we * k_e) @ E
                blocks[c][c] = term if blocks[c][c] is None else blocks[c][c] + term
        Wmu = sp.diags(w * mu)
        Wlam = sp.diags(w * lam)
        for c in range(d):
            for j in range(d):
                if c == j:
                    continue
                term = D[j].T @ Wmu @ D[c] + D[c].T @ Wlam @ D[j]
                blocks[c][j] = term if blocks[c][j] is None else blocks[c][j] + term
        K = sp.bmat(blocks, format="csr")
        K = 0.5 * (K + K.T)  # removes the last-bit asymmetry of the products
        self.K = K.tocsr()
        self.mass = np.tile(rho * w, d)

        bnd = grid.boundary_index
        self.bdofs = (np.arange(d)[None, :] * nn + bnd[:, None]).reshape(-1)
        is_b = np.zeros(d * nn, dtype=bool)
        is_b[self.bdofs] = True
        self.idofs = np.flatnonzero(~is_b)
        self.K_I = self.K[self.idofs]
        self.K_B = self.K[self.bdofs]
        self.minv_I = 1.0 / self.mass[self.idofs]
        self.mass_B = self.mass[self.bdofs]

    @property
    def n_dofs(self) -> int:
        return self.K.shape[0]

    @property
    def n_bdofs(self) -> int:
        return len(self.bdofs)

    def stable_dt(self, cfl: float = DEFAULT_CFL) -> float:
        return cfl * float(self.grid.h.min()) / self.material.c_max()

    def check_cfl(self, dt: float, cfl: float = DEFAULT_CFL) -> None:
        limit = self.stable_dt(cfl)
        if dt > limit * (1 + 1e-12):
            raise ConfigurationError(
                f"dt={dt:.6g} exceeds the CFL bound {limit:.6g} (cfl={cfl}); use dt <= {limit:.6g}"
            )

    def apply(self, u: np.ndarray) -> np.ndarray:
        """K u for a field of shape ``(d, *shape)``; returns the same shape."""
        return (self.K @ u.reshape(-1)).reshape(u.shape)

    def energy_form(self, u: np.ndarray, v: np.ndarray | None = None) -> float:
        a = u.reshape(-1)
        b = a if v is None else v.reshape(-1)
        return float(a @ (self.K @ b))

    def to_dofs(self, u: np.ndarray) -> np.ndarray:
        return u.reshape(self.n_dofs, *u.shape[1 + self.grid.d :])

    def boundary_values(self, u: np.ndarray) -> np.ndarray:
        """Values of a ``(d, *shape)`` field at the boundary nodes as ``(n_bnd, d)``."""
        return u.reshape(self.grid.d, -1)[:, self.grid.boundary_index].T


BoundaryData = Callable[[int], "np.ndarray | None"]


def leapfrog(
    op: ElasticOperator,
    dt: float,
    n_steps: int,
    batch: int = 1,
    bdata: BoundaryData | None = None,
    u0: np.ndarray | None = None,
    um1: np.ndarray | None = None,
    on_reaction: Callable[[int, np.ndarray], None] | None = None,
    on_state: Callable[[int, np.ndarray], None] | None = None,
    dtype: type = np.float64,
) -> np.ndarray:
    """March ``n_steps`` leapfrog steps for ``batch`` independent sources.

    States are ``(n_dofs, batch)`` arrays.  ``bdata(k)`` returns the
    Dirichlet values ``(n_bdofs, batch)`` at step ``k`` (``None`` = zero);
    it is queried for ``k = 0 .. n_steps``.  ``on_reaction(k, R)`` receives
    the boundary reaction at steps ``k = 0 .. n_steps-1`` and ``on_state``
    every state ``k = 0 .. n_steps``.  Returns the final state.
    """
    nd = op.n_dofs
    shape = (nd, batch)
    u = np.zeros(shape, dtype) if u0 is None else np.array(u0, dtype).reshape(shape)
    u_prev = np.zeros(shape, dtype) if um1 is None else np.array(um1, dtype).reshape(shape)

    def data(k):
        g = bdata(k) if bdata is not None else None
        return np.zeros((op.n_bdofs, batch), dtype) if g is None else np.asarray(g, dtype).reshape(op.n_bdofs, batch)

    if bdata is not None:
        u[op.bdofs] = data(0)
    if on_state is not None:
        on_state(0, u)
    dt2 = dt * dt
    minv = op.minv_I[:, None]
    mB = op.mass_B[:, None]
    u_next = np.empty_like(u)
    for k in range(n_steps):
        Ku_I = op.K_I @ u
        u_next[op.idofs] = 2.0 * u[op.idofs] - u_prev[op.idofs] - dt2 * minv * Ku_I
        u_next[op.bdofs] = data(k + 1)
        if on_reaction is not None:
            accel = (u_next[op.bdofs] - 2.0 * u[op.bdofs] + u_prev[op.bdofs]) / dt2
            on_reaction(k, mB * accel + op.K_B @ u)
        u_prev, u, u_next = u, u_next, u_prev
        if on_state is not None:
            on_state(k + 1, u)
    return u


STORAGE_POLICIES = ("all", "boundary", "final")


@dataclass
class DisplacementTrajectory:
    """Stored leapfrog states of one run.

    ``snapshots`` has shape ``(n_stored, d, *shape)``; ``steps`` lists the
    step index of each stored snapshot.  Under the ``boundary`` policy
    snapshots are zero away from the three node layers next to ∂Ω.
    ``reaction`` holds the integrated boundary reaction for steps
    ``0 .. n_steps-1`` as ``(n_steps, n_bnd, d)``.
    """

    grid: Grid
    dt: float
    horizon: float
    n_steps: int
    storage: str
    snapshots: np.ndarray
    steps: np.ndarray
    reaction: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.snapshots[-1]

    def final_velocity(self) -> np.ndarray:
        """∂t u(T) from the last two stored states (backward difference)."""
        if len(self.steps) < 2 or self.steps[-1] - self.steps[-2] != 1:
            raise StorageError("need the last two consecutive steps")
        return (self.snapshots[-1] - self.snapshots[-2]) / self.dt

    def centered_velocity(self) -> np.ndarray:
        """∂t u at steps 1..n-1 by centred differences (policy ``all``)."""
        self._need_all()
        return (self.snapshots[2:] - self.snapshots[:-2]) / (2 * self.dt)

    def _need_all(self) -> None:
        if self.storage != "all":
            raise StorageError(f"operation needs storage='all', trajectory has {self.storage!r}")

    def dump(self, path: str | Path) -> None:
        """Little-endian float64 snapshots after a 16-byte header, plus a JSON sidecar."""
        n = set(self.grid.n)
        if len(n) != 1:
            raise StructuralError("snapshot dump needs the same node count on every axis")
        path = Path(path)
        header = np.array([self.grid.d, n.pop()], dtype="<i4").tobytes() + np.array(
            [len(self.steps)], dtype="<i8"
        ).tobytes()
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.snapshots, dtype="<f8").tobytes())
        sidecar = {
            "dt": self.dt,
            "T": self.horizon,
            "storage": self.storage,
            "n_steps": self.n_steps,
            "steps": [int(s) for s in self.steps],
            "shape": [len(self.steps), self.grid.d, *self.grid.n],
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_snapshots(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    raw = path.read_bytes()
    d, n = np.frombuffer(raw[:8], dtype="<i4")
    count = int(np.frombuffer(raw[8:16], dtype="<i8")[0])
    data = np.frombuffer(raw[16:], dtype="<f8").reshape(count, d, *([n] * d))
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return data, meta


def choose_dt(op: ElasticOperator, horizon: float, cfl: float = DEFAULT_CFL, multiple: int = 1) -> tuple[float, int]:
    """Largest dt under the CFL bound with ``horizon/dt`` an integer multiple of ``multiple``."""
    limit = op.stable_dt(cfl)
    steps = multiple * math.ceil(horizon / (limit * multiple) - 1e-12)
    return horizon / steps, steps


def _band_mask(grid: Grid, layers: int = 3) -> np.ndarray:
    mask = np.zeros(grid.shape, dtype=bool)
    for ax in range(grid.d):
        sl = [slice(None)] * grid.d
        sl[ax] = slice(0, layers)
        mask[tuple(sl)] = True
        sl[ax] = slice(grid.shape[ax] - layers, None)
        mask[tuple(sl)] = True
    return mask


def _run_single(
    op: ElasticOperator,
    dt: float,
    n_steps: int,
    horizon: float,
    bdata: BoundaryData | None,
    u0=None,
    um1=None,
    storage: str = "all",
) -> DisplacementTrajectory:
    if storage not in STORAGE_POLICIES:
        raise ConfigurationError(f"storage must be one of {STORAGE_POLICIES}")
    g = op.grid
    shape = (g.d, *g.shape)
    snaps: list[np.ndarray] = []
    steps: list[int] = []
    band = _band_mask(g) if storage == "boundary" else None
    last: list = []

    def on_state(k, u):
        arr = u[:, 0].reshape(shape)
        if storage == "all":
            snaps.append(arr.copy())
            steps.append(k)
        elif storage == "boundary":
            snaps.append(np.where(band, arr, 0.0))
            steps.append(k)
        last.append((k, arr.copy()))
        if len(last) > 2:
            last.pop(0)

    reactions = np.zeros((n_steps, g.n_boundary, g.d))

    def on_reaction(k, r):
        reactions[k] = r[:, 0].reshape(g.n_boundary, g.d)

    leapfrog(op, dt, n_steps, 1, bdata, u0, um1, on_reaction=on_reaction, on_state=on_state)
    if storage == "final":
        steps = [k for k, _ in last]
        snaps = [a for _, a in last]
    elif storage == "boundary":
        # the final two full states are kept for u(T) and ∂t u(T)
        snaps[-2:] = [a for _, a in last]
    return DisplacementTrajectory(
        grid=g,
        dt=dt,
        horizon=horizon,
        n_steps=n_steps,
        storage=storage,
        snapshots=np.array(snaps),
        steps=np.array(steps),
        reaction=reactions,
    )


def solve_ibvp(
    material: MaterialModel,
    grid: Grid,
    f: np.ndarray | Callable[[float], np.ndarray],
    horizon: float,
    dt: float,
    storage: str = "all",
    cfl: float = DEFAULT_CFL,
    op: ElasticOperator | None = None,
) -> DisplacementTrajectory:
    """Zero initial state, Dirichlet data ``f`` on ∂Ω, run to ``horizon``.

    ``f`` is either an array ``(n_steps+1, n_bnd, d)`` of samples at
    ``t_k = k dt`` or a callable ``t -> (n_bnd, d)``.
    """
    op = op or ElasticOperator(grid, material)
    op.check_cfl(dt, cfl)
    n_steps = int(round(horizon / dt))
    if abs(n_steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ConfigurationError(f"horizon {horizon} is not a multiple of dt {dt}")
    if callable(f):
        samples = np.array([np.asarray(f(k * dt), float) for k in range(n_steps + 1)])
    else:
        samples = np.asarray(f, float)
    if samples.shape != (n_steps + 1, grid.n_boundary, grid.d):
        raise StructuralError(f"boundary data shape {samples.shape} != {(n_steps + 1, grid.n_boundary, grid.d)}")
    scale = max(1.0, float(np.abs(samples).max()))
    if np.abs(samples[0]).max() > 1e-12 * scale:
        raise CompatibilityError("boundary data must vanish at t=0 (f(0,x)=0)")
    traj = _run_single(op, dt, n_steps, horizon, lambda k: samples[k].reshape(-1, 1), storage=storage)
    traj.meta["kind"] = "ibvp"
    return traj


def solve_homogeneous(
    material: MaterialModel,
    grid: Grid,
    u0: np.ndarray,
    v0: np.ndarray,
    horizon: float,
    dt: float,
    storage: str = "all",
    cfl: float = DEFAULT_CFL,
    op: ElasticOperator | None = None,
) -> DisplacementTrajectory:
    """Homogeneous-Dirichlet evolution from displacement ``u0`` and velocity ``v0``."""
    op = op or ElasticOperator(grid, material)
    op.check_cfl(dt, cfl)
    n_steps = int(round(horizon / dt))
    for name, arr in (("u0", u0), ("v0", v0)):
        if np.abs(op.boundary_values(arr)).max() > 0:
            raise CompatibilityError(f"{name} must vanish on the boundary")
    u0 = np.asarray(u0, float)
    v0 = np.asarray(v0, float)
    acc = np.zeros(op.n_dofs)
    acc[op.idofs] = -op.minv_I * (op.K_I @ u0.reshape(-1))
    accel = acc.reshape(u0.shape)
    # Taylor start, third order in dt
    kv = np.zeros(op.n_dofs)
    kv[op.idofs] = -op.minv_I * (op.K_I @ v0.reshape(-1))
    um1 = u0 - dt * v0 + 0.5 * dt**2 * accel - dt**3 / 6.0 * kv.reshape(u0.shape)
    traj = _run_single(op, dt, n_steps, horizon, None, u0=u0.reshape(-1, 1), um1=um1.reshape(-1, 1), storage=storage)
    traj.meta["kind"] = "homogeneous"
    return traj


def solve_dual(
    material: MaterialModel,
    grid: Grid,
    terminal_velocity: np.ndarray,
    horizon: float,
    dt: float,
    storage: str = "all",
    cfl: float = DEFAULT_CFL,
    op: ElasticOperator | None = None,
) -> DisplacementTrajectory:
    """p with p(T)=0, ∂t p(T)=φ and p=0 on ∂Ω.

    Marched forward in reversed time s = T - t, so ``snapshots[j]`` is
    p(T - j dt); ``meta["reversed"]`` flags this.
    """
    phi = np.asarray(terminal_velocity, float)
    traj = solve_homogeneous(material, grid, np.zeros_like(phi), -phi, horizon, dt, storage, cfl, op)
    traj.meta["kind"] = "dual"
    traj.meta["reversed"] = True
    return traj


def _stress_traction(grad_u: np.ndarray, mu: np.ndarray, lam: np.ndarray, grid: Grid) -> np.ndarray:
    """Face-weighted traction σ(u)·ν at boundary nodes from gradients ``(d, d, n_bnd)``.

    ``grad_u[i, j]`` is ∂_j u_i.  Corner and edge nodes average the
    tractions of their incident faces with the face quadrature weights.
    """
    d = grid.d
    div = np.trace(grad_u)
    sigma = mu * (grad_u + grad_u.transpose(1, 0, 2)) + lam * div * np.eye(d)[:, :, None]
    out = np.zeros((grad_u.shape[-1], d), dtype=grad_u.dtype)
    fw = grid.face_weights
    tot = fw.sum(axis=1)
    for face in range(2 * d):
        nu = grid.face_normal(face)
        out += (fw[:, face] / tot)[:, None] * np.einsum("ijb,j->bi", sigma, nu)
    return out


def fd_traction_field(u: np.ndarray, material: MaterialModel, grid: Grid) -> np.ndarray:
    """Traction of a single field ``(d, *shape)`` by second-order differences.

    Normal derivatives are one-sided (three points), tangential ones
    centred; exact for linear displacement fields.
    """
    d = grid.d
    bnd = grid.boundary_index
    grads = np.stack([grid_gradient(u[i], grid) for i in range(d)])  # (i, j, *shape)
    g = grads.reshape(d, d, -1)[:, :, bnd]
    mu = material.mu.reshape(-1)[bnd]
    lam = material.lam.reshape(-1)[bnd]
    return _stress_traction(g, mu, lam, grid)


@dataclass
class SpaceTimeBoundaryField:
    """Samples ``values[k, b, c]`` at times ``t_k`` on boundary node ``b``.

    ``time_weights`` and the grid's surface weights define the
    L²((0,T)×∂Ω) pairing.
    """

    values: np.ndarray
    times: np.ndarray
    time_weights: np.ndarray
    boundary_weights: np.ndarray

    def inner(self, other: "SpaceTimeBoundaryField | np.ndarray") -> complex | float:
        """Unconjugated bilinear pairing."""
        ov = other.values if isinstance(other, SpaceTimeBoundaryField) else np.asarray(other)
        return np.einsum("k,b,kbc,kbc->", self.time_weights, self.boundary_weights, self.values, ov)

    def norm(self) -> float:
        return float(np.sqrt(np.einsum("k,b,kbc->", self.time_weights, self.boundary_weights,
                                       np.abs(self.values) ** 2)))


def left_time_weights(n_steps: int, dt: float) -> np.ndarray:
    """Weights dt at t_0..t_{N-1} and 0 at t_N: the pairing leapfrog's Green identity uses."""
    w = np.full(n_steps + 1, dt)
    w[-1] = 0.0
    return w


def traction(
    traj: DisplacementTrajectory,
    material: MaterialModel,
    grid: Grid,
    method: str = "fd",
) -> SpaceTimeBoundaryField:
    """Surface traction μ∂_ν u + μ(∇u)ᵀν + λ(∇·u)ν along a trajectory.

    ``method="fd"`` differentiates the stored snapshots (needs ``all`` or
    ``boundary`` storage).  ``method="reaction"`` divides the recorded
    variational boundary reaction by the surface weights; it is defined at
    steps ``0 .. N-1`` and set to zero at ``t_N`` where its time weight is 0.
    """
    n = traj.n_steps
    times = np.arange(n + 1) * traj.dt
    tw = left_time_weights(n, traj.dt)
    bw = grid.boundary_weights
    if method == "reaction":
        if traj.reaction is None:
            raise StorageError("trajectory has no recorded reaction")
        vals = np.zeros((n + 1, grid.n_boundary, grid.d))
        vals[:n] = traj.reaction / bw[:, None]
    elif method == "fd":
        if traj.storage not in ("all", "boundary"):
            raise StorageError(f"fd traction needs boundary stencils, storage is {traj.storage!r}")
        vals = np.array([fd_traction_field(u, material, grid) for u in traj.snapshots])
    else:
        raise ConfigurationError(f"unknown traction method {method!r}")
    return SpaceTimeBoundaryField(vals, times, tw, bw)


@dataclass
class EnergySeries:
    times: np.ndarray
    values: np.ndarray

    @property
    def max_relative_drift(self) -> float:
        e0 = self.values[0]
        if e0 == 0:
            return float(np.abs(self.values).max())
        return float(np.abs(self.values - e0).max() / abs(e0))


def energy(traj: DisplacementTrajectory, material: MaterialModel, grid: Grid,
           op: ElasticOperator | None = None) -> EnergySeries:
    """E(t_k) = ∫ ρ|∂t u|² + (μ(∇u+∇uᵀ)+λ(∇·u)I):∇u at steps 1..N-1.

    ∂t u is the centred difference; the strain term is the discrete
    energy form of the solver, i.e. the same quadrature the scheme conserves.
    """
    traj._need_all()
    if len(traj.snapshots) < 3:
        raise StorageError("energy needs at least 3 snapshots")
    op = op or ElasticOperator(grid, material)
    vel = traj.centered_velocity()
    wrho = material.rho * grid.node_weights
    kin = (vel**2 * wrho).reshape(len(vel), -1).sum(axis=1)
    pot = np.array([op.energy_form(u) for u in traj.snapshots[1:-1]])
    # for a dual run in reversed time the series is listed forward in s
    return EnergySeries(traj.steps[1:-1] * traj.dt, kin + pot)
