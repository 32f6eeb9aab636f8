"""Explicit MPM time integration with quadratic B-spline transfers.

One step runs three stages: Kirchhoff stress from the elastic law, the
particle-to-grid / grid-solve / grid-to-particle / advection integrator, and
the plastic return mapping of the trial deformation gradient.

The grid has ``n + 1`` nodes per axis at ``x = i / n``. Transfers are PIC by
default (no affine velocity term); ``SceneConfig.transfer = "apic"`` adds the
affine momentum term.
"""

from dataclasses import dataclass
import functools
import itertools
import logging
import warnings

import numpy as np
from scipy import sparse

from . import _kernels
from .errors import MatgroundError, OutOfDomainError
from .utils import read_array, read_magic, read_struct, write_array, write_magic, write_struct

log = logging.getLogger(__name__)

OFFSETS = np.array(list(itertools.product(range(3), repeat=3)))  # (27, 3)
RUNTIME_MARGIN_CELLS = 1
WALL_CELLS = 2
MASS_EPSILON_FACTOR = 1e-12


class CFLWarning(RuntimeWarning):
    pass


# --------------------------------------------------------------------------
# B-spline stencil

@dataclass
class Stencil:
    """Interpolation weights of N particles over their 3x3x3 node blocks.

    ``W`` and ``D[c]`` are sparse (N, nodes) matrices holding the weights and
    their gradient components, so transfers are sparse products.
    """

    nodes: np.ndarray   # (N, 27) flat node index
    w: np.ndarray       # (N, 27)
    dwc: np.ndarray     # (3, N, 27) weight gradient components w.r.t. particle position
    size: int
    hess: np.ndarray = None  # (N, 27, 3, 3)

    def __post_init__(self):
        N = len(self.w)
        idx = self.nodes.ravel()
        self.W = sparse.csr_matrix((self.w.ravel(), idx, np.arange(0, 27 * N + 1, 27)),
                                   shape=(N, self.size))
        # the three gradient components stacked as row blocks
        self.D = sparse.csr_matrix(
            (self.dwc.ravel(), np.tile(idx, 3),
             np.arange(0, 81 * N + 1, 27)), shape=(3 * N, self.size))

    @property
    def dw(self):
        """(N, 27, 3) view of the weight gradients."""
        return np.moveaxis(self.dwc, 0, -1)

    def gather(self, values):
        """Sum_b w_ib values_b."""
        return self.W @ values

    def spread(self, values):
        """Sum_i w_ib values_i."""
        return self.W.T @ values

    def grad(self, vg):
        """Sum_b vg_b (outer) grad w_ib, shape (N, 3, 3)."""
        N = len(self.w)
        return np.moveaxis((self.D @ vg).reshape(3, N, -1), 0, -1)

    def spread_grad(self, T):
        """Sum_i T_i grad w_ib, the transpose of :meth:`grad`."""
        return self.D.T @ np.moveaxis(T, -1, 0).reshape(-1, T.shape[1])


def bspline(fx):
    """Quadratic B-spline values and derivatives for the three stencil nodes.

    ``fx`` is the particle coordinate relative to the base node in cell units,
    in [0.5, 1.5). Returns arrays of shape fx.shape + (3,).
    """
    w = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2], -1)
    dw = np.stack([fx - 1.5, -2.0 * (fx - 1.0), fx - 0.5], -1)
    ddw = np.broadcast_to(np.array([1.0, -2.0, 1.0]), w.shape)
    return w, dw, ddw


def check_positions(positions, n, margin_cells=RUNTIME_MARGIN_CELLS):
    lo, hi = margin_cells / n, 1.0 - margin_cells / n
    bad = np.flatnonzero(np.any((positions < lo) | (positions > hi) | ~np.isfinite(positions),
                                axis=1))
    if bad.size:
        i = int(bad[0])
        raise OutOfDomainError(
            f"particle {i} at {np.round(positions[i], 5).tolist()} left the grid "
            f"interior [{lo:.4f}, {hi:.4f}] ({bad.size} particles outside)", index=i)


def stencil(positions, n, hessian=False):
    check_positions(positions, n)
    x = positions * n
    base = np.floor(x - 0.5).astype(np.int64)
    fx = x - base
    wx, dwx, ddwx = bspline(fx)  # (N, 3 axes, 3 nodes)
    dwx = dwx * n
    wa, wb, wc = wx[:, 0, :, None, None], wx[:, 1, None, :, None], wx[:, 2, None, None, :]
    da, db, dc = dwx[:, 0, :, None, None], dwx[:, 1, None, :, None], dwx[:, 2, None, None, :]
    N = len(positions)
    wab = wa * wb
    w = (wab * wc).reshape(N, 27)
    dwc = np.empty((3, N, 3, 3, 3))
    dwc[0] = da * wb * wc
    dwc[1] = wa * db * wc
    dwc[2] = wab * dc
    m = n + 1
    flat = ((base[:, 0] * m + base[:, 1]) * m + base[:, 2])[:, None] + _FLAT_OFFSETS(m)
    hess = None
    if hessian:
        n2 = n * n
        ea, eb, ec = (ddwx[:, 0, :, None, None] * n2, ddwx[:, 1, None, :, None] * n2,
                      ddwx[:, 2, None, None, :] * n2)
        H = np.empty((N, 3, 3, 3, 3, 3))
        H[..., 0, 0] = ea * wb * wc
        H[..., 1, 1] = wa * eb * wc
        H[..., 2, 2] = wab * ec
        H[..., 0, 1] = H[..., 1, 0] = da * db * wc
        H[..., 0, 2] = H[..., 2, 0] = da * wb * dc
        H[..., 1, 2] = H[..., 2, 1] = wa * db * dc
        hess = H.reshape(N, 27, 3, 3)
    return Stencil(flat, w, dwc.reshape(3, N, 27), m ** 3, hess)


def _FLAT_OFFSETS(m):
    return (OFFSETS[:, 0] * m + OFFSETS[:, 1]) * m + OFFSETS[:, 2]


# --------------------------------------------------------------------------
# grid and boundaries

@dataclass
class Grid:
    n: int
    mass: np.ndarray            # ((n+1)^3,)
    momentum: np.ndarray        # ((n+1)^3, 3)
    force_internal: np.ndarray  # ((n+1)^3, 3)
    force_external: np.ndarray  # ((n+1)^3, 3)
    mass_epsilon: float
    velocity: np.ndarray = None
    velocity_free: np.ndarray = None

    @property
    def size(self):
        return (self.n + 1) ** 3

    @property
    def active(self):
        return self.mass >= self.mass_epsilon


@functools.lru_cache(maxsize=8)
def node_positions(n):
    i = np.arange(n + 1) / n
    x = np.stack(np.meshgrid(i, i, i, indexing="ij"), -1).reshape(-1, 3)
    x.flags.writeable = False
    return x


@dataclass(frozen=True)
class Plane:
    mask: np.ndarray  # nodes in the band
    axis: int
    sign: float       # inward normal = sign * e_axis
    sticky: bool
    friction: float


_PLANE_CACHE = {}


def boundary_planes(cfg):
    key = (cfg.n, cfg.floor_height, cfg.boundary)
    if key in _PLANE_CACHE:
        return _PLANE_CACHE[key]
    x = node_positions(cfg.n)
    band = WALL_CELLS / cfg.n + 1e-12
    planes = []
    for axis in range(3):
        if axis != 1:
            planes.append(Plane(x[:, axis] <= band, axis, 1.0, False, 0.0))
        planes.append(Plane(x[:, axis] >= 1.0 - band, axis, -1.0, False, 0.0))
    b = cfg.boundary
    floor = x[:, 1] <= max(cfg.floor_height, band) + 1e-12
    planes.append(Plane(floor, 1, 1.0, b.mode == "sticky", b.friction))
    _PLANE_CACHE[key] = planes
    return planes


def apply_boundary(v, planes, record=None):
    """Project outward-moving band velocities in place; optionally record rows."""
    for pl in planes:
        vn = pl.sign * v[:, pl.axis]
        sel = np.flatnonzero(pl.mask & (vn < 0))
        if record is not None:
            record.append((sel, v[sel].copy()))
        if not sel.size:
            continue
        if pl.sticky:
            v[sel] = 0.0
            continue
        vs = v[sel]
        vs[:, pl.axis] = 0.0
        if pl.friction > 0:
            q = np.linalg.norm(vs, axis=1)
            scale = np.maximum(0.0, 1.0 + pl.friction * vn[sel] / np.where(q > 0, q, 1.0))
            vs *= np.where(q > 0, scale, 0.0)[:, None]
        v[sel] = vs


def apply_boundary_vjp(vbar, planes, record):
    """Reverse of :func:`apply_boundary` (in place on ``vbar``)."""
    for pl, (sel, vin) in zip(reversed(planes), reversed(record)):
        if not sel.size:
            continue
        g = vbar[sel]
        if pl.sticky:
            vbar[sel] = 0.0
            continue
        if pl.friction > 0:
            vt = vin.copy()
            vt[:, pl.axis] = 0.0
            vn = pl.sign * vin[:, pl.axis]
            q = np.linalg.norm(vt, axis=1)
            live = (q > 0) & (1.0 + pl.friction * vn / np.where(q > 0, q, 1.0) > 0)
            qs = np.where(live, q, 1.0)
            u = vt / qs[:, None]
            ug = np.einsum("ij,ij->i", u, g)
            gt = g + (pl.friction * vn / qs)[:, None] * (g - u * ug[:, None])
            gn = pl.friction * ug
            out = gt.copy()
            out[:, pl.axis] = pl.sign * gn
            out[~live] = 0.0
            vbar[sel] = out
        else:
            g[:, pl.axis] = 0.0
            vbar[sel] = g


# --------------------------------------------------------------------------
# transfer operators

_NO_AFFINE = np.zeros((1, 3, 3))


def p2g(particles, stresses, cfg):
    """Particle-to-grid transfer of mass, momentum and forces."""
    n = cfg.n
    check_positions(particles.positions, n)
    size = (n + 1) ** 3
    dtype = particles.positions.dtype
    mass = np.zeros(size, dtype)
    momentum = np.zeros((size, 3), dtype)
    force_internal = np.zeros((size, 3), dtype)
    apic = cfg.transfer == "apic"
    affine = particles.affine.astype(dtype) if apic else _NO_AFFINE.astype(dtype)
    _kernels.p2g(particles.positions, particles.velocities, particles.mass, particles.volume,
                 np.ascontiguousarray(stresses, dtype), affine, apic, n,
                 mass, momentum, force_internal)
    force_external = mass[:, None] * np.asarray(cfg.gravity, dtype)
    eps = MASS_EPSILON_FACTOR * float(np.mean(particles.mass))
    return Grid(n, mass, momentum, force_internal, force_external, eps)


def grid_update(grid, dt, cfg, record=None):
    """Explicit grid momentum update followed by the boundary projection.

    ``grid.velocity_free`` keeps the pre-boundary velocities; ``record``
    (a list) collects the boundary rows for the reverse pass.
    """
    active = grid.active
    m = np.where(active, grid.mass, 1.0)[:, None]
    v = (grid.momentum + dt * (grid.force_internal + grid.force_external)) / m
    v[~active] = 0.0
    if record is not None:
        grid.velocity_free = v.copy()
    apply_boundary(v, boundary_planes(cfg), record)
    grid.velocity = v
    return grid


def g2p(particles, grid, dt, apic=False, with_gradient=False):
    """Grid-to-particle transfer.

    Returns (velocities, trial F), followed by the APIC affine matrix when
    ``apic`` and by the velocity gradient when ``with_gradient``.
    """
    N = len(particles)
    dtype = particles.positions.dtype
    v = np.empty((N, 3), dtype)
    G = np.empty((N, 3, 3), dtype)
    C = np.empty((N, 3, 3), dtype) if apic else _NO_AFFINE.astype(dtype)
    _kernels.g2p(particles.positions, grid.velocity.astype(dtype, copy=False), grid.n, apic,
                 v, G, C)
    F_trial = particles.F + dt * G @ particles.F
    out = (v, F_trial) + ((C,) if apic else ())
    return out + (G,) if with_gradient else out


# --------------------------------------------------------------------------
# material dispatch (multi-material scenes carry material_id per particle)

def _groups(material, material_id):
    if not isinstance(material, (list, tuple)):
        return [(material, None)]
    groups = {}
    for k, m in enumerate(material):
        groups.setdefault(id(m), [m, []])[1].append(k)
    out = []
    for m, ids in groups.values():
        idx = np.flatnonzero(np.isin(material_id, ids))
        if idx.size == len(material_id):
            idx = None
        if idx is None or idx.size:
            out.append((m, idx))
    return out


def _apply(material, material_id, method, X):
    groups = _groups(material, material_id)
    if len(groups) == 1 and groups[0][1] is None:
        return getattr(groups[0][0], method)(X)
    out = np.empty_like(X)
    for m, idx in groups:
        out[idx] = getattr(m, method)(X[idx])
    return out


def compute_stresses(material, particles):
    return _apply(material, particles.material_id, "stress", particles.F)


def project_plastic(material, particles, F_trial):
    return _apply(material, particles.material_id, "project", F_trial)


# --------------------------------------------------------------------------
# stepping

@dataclass
class StepDiagnostics:
    total_mass: float
    total_momentum: np.ndarray
    min_det: float
    max_speed: float
    cfl: float


def diagnose(particles, grid, cfg):
    speed = float(np.max(np.linalg.norm(particles.velocities, axis=1))) if len(particles) else 0.0
    return StepDiagnostics(float(grid.mass.sum()), grid.momentum.sum(axis=0),
                           float(np.min(np.linalg.det(particles.F))), speed,
                           speed * cfg.dt * cfg.n)


def step(particles, material, cfg, return_grid=False):
    """Advance the particle state by one ``cfg.dt``."""
    apic = cfg.transfer == "apic"
    tau = compute_stresses(material, particles)
    grid = grid_update(p2g(particles, tau, cfg), cfg.dt, cfg)
    out = g2p(particles, grid, cfg.dt, apic)
    v, F_trial = out[0], out[1]
    positions = particles.positions + cfg.dt * v
    F_new = project_plastic(material, particles, F_trial)
    new = particles.with_state(positions, v, F_new, out[2] if apic else None)
    cfl = float(np.sqrt(np.max(np.einsum("ij,ij->i", v, v)))) * cfg.dt * cfg.n if len(v) else 0.0
    if cfl > 0.5:
        warnings.warn(f"CFL number {cfl:.3f} exceeds 0.5", CFLWarning, stacklevel=2)
    if cfg.verbose:
        log.debug("%s", diagnose(new, grid, cfg))
    return (new, grid) if return_grid else new


@dataclass
class Trajectory:
    positions: np.ndarray   # (frames, N, 3)
    velocities: np.ndarray  # (frames, N, 3)
    F: np.ndarray           # (frames, N, 3, 3)
    dt: float
    save_every: int

    def __len__(self):
        return len(self.positions)

    @property
    def times(self):
        return np.arange(len(self)) * self.dt * self.save_every

    def frame(self, k, template):
        return template.with_state(self.positions[k].copy(), self.velocities[k].copy(),
                                   self.F[k].copy())

    def save(self, path):
        with open(path, "wb") as fh:
            write_magic(fh, TRAJ_MAGIC)
            frames, count = self.positions.shape[:2]
            write_struct(fh, "QQdQ", frames, count, float(self.dt), int(self.save_every))
            for k in range(frames):
                write_array(fh, self.positions[k], np.float32)
                write_array(fh, self.velocities[k], np.float32)
                write_array(fh, self.F[k], np.float32)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            read_magic(fh, TRAJ_MAGIC)
            frames, count, dt, save_every = read_struct(fh, "QQdQ")
            P = np.empty((frames, count, 3))
            V = np.empty((frames, count, 3))
            F = np.empty((frames, count, 3, 3))
            for k in range(frames):
                P[k] = read_array(fh, 3 * count, np.float32, (count, 3))
                V[k] = read_array(fh, 3 * count, np.float32, (count, 3))
                F[k] = read_array(fh, 9 * count, np.float32, (count, 3, 3))
        return cls(P, V, F, dt, int(save_every))


TRAJ_MAGIC = "NMTRAJ1"


def simulate(initial, material, cfg, steps, save_every=None):
    """Roll out ``steps`` steps, saving every ``save_every``-th state (and s0)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    save_every = cfg.substeps if save_every is None else int(save_every)
    state = initial.astype(cfg.dtype) if initial.positions.dtype != cfg.dtype else initial
    P, V, F = [state.positions.copy()], [state.velocities.copy()], [state.F.copy()]
    for k in range(1, steps + 1):
        try:
            state = step(state, material, cfg)
        except MatgroundError as err:
            err.step = k
            err.args = (f"step {k}: {err.args[0] if err.args else err}",) + err.args[1:]
            raise
        if k % save_every == 0:
            P.append(state.positions.copy())
            V.append(state.velocities.copy())
            F.append(state.F.copy())
    return Trajectory(np.array(P), np.array(V), np.array(F), cfg.dt, save_every)
