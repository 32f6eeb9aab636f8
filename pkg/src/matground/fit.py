"""Fitting and evaluation: adapters, initial velocity, metrics, transfer."""

from dataclasses import dataclass, field, replace
import json
import logging
import math

import numpy as np

from . import diff, mpm
from .constitutive.material import MaterialAdapter, compose_material
from .errors import GeometryError, MatgroundError, TrainingError
from .scene import ParticleSet

log = logging.getLogger(__name__)

PSNR_CAP = 99.0


# --------------------------------------------------------------------------
# metrics


def _nearest_sq(Q, P, cell):
    """Squared distance from each row of Q to its nearest row of P.

    Points of P are hashed into cubic cells of width ``cell``; each query
    scans its 27 neighbouring cells, which is exact whenever the distance
    found is at most ``cell``. Other queries fall back to a brute-force scan.
    """
    lo = P.min(axis=0)
    key_p = np.floor((P - lo) / cell).astype(np.int64)
    dims = key_p.max(axis=0) + 3
    flat = lambda k: ((k[:, 0] + 1) * dims[1] + k[:, 1] + 1) * dims[2] + k[:, 2] + 1
    kp = flat(key_p)
    order = np.argsort(kp, kind="stable")
    kp_sorted = kp[order]
    P_sorted = P[order]
    key_q = np.floor((Q - lo) / cell).astype(np.int64)
    inside = np.all((key_q >= -1) & (key_q <= dims - 2), axis=1)
    best = np.full(len(Q), np.inf)
    kq = np.clip(key_q, -1, dims - 2)
    for off in np.ndindex(3, 3, 3):
        k = flat(kq + np.array(off) - 1)
        start = np.searchsorted(kp_sorted, k, "left")
        stop = np.searchsorted(kp_sorted, k, "right")
        count = stop - start
        for j in range(int(count.max(initial=0))):
            live = np.flatnonzero(count > j)
            d = Q[live] - P_sorted[start[live] + j]
            best[live] = np.minimum(best[live], np.einsum("ij,ij->i", d, d))
    redo = np.flatnonzero(~inside | (best > cell * cell))
    for chunk in np.array_split(redo, max(1, len(redo) // 256)):
        if chunk.size:
            d = Q[chunk, None, :] - P[None, :, :]
            best[chunk] = np.einsum("ijk,ijk->ij", d, d).min(axis=1)
    return best


def chamfer(X, Y, scale=1.0):
    """Symmetric mean of squared nearest-neighbour distances, times ``scale``.

    Reported tables use ``scale=1e4``.
    """
    X = np.asarray(X, float).reshape(-1, 3)
    Y = np.asarray(Y, float).reshape(-1, 3)
    if not len(X) or not len(Y):
        raise ValueError("chamfer distance needs two nonempty point sets")
    both = np.concatenate([X, Y])
    extent = np.ptp(both, axis=0)
    volume = float(np.prod(np.maximum(extent, 1e-9)))
    cell = max(2.0 * (volume / len(both)) ** (1 / 3), 1e-9)
    return scale * (_nearest_sq(X, Y, cell).mean() + _nearest_sq(Y, X, cell).mean())


def chamfer_curve(pred, gt, scale=1.0):
    """Per-frame Chamfer between two trajectories (or position stacks)."""
    P = pred.positions if isinstance(pred, mpm.Trajectory) else pred
    G = gt.positions if isinstance(gt, mpm.Trajectory) else gt
    if len(P) != len(G):
        raise ValueError(f"frame counts differ: {len(P)} vs {len(G)}")
    return np.array([chamfer(a, b, scale) for a, b in zip(P, G)])


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for unit-range images, capped at 99."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


@dataclass
class MetricsLog:
    """Per-iteration records plus a per-frame evaluation table."""

    records: list = field(default_factory=list)
    frames: list = field(default_factory=list)

    def log_iteration(self, iteration, loss, lr, norms):
        if self.records and iteration <= self.records[-1]["iteration"]:
            raise ValueError("iteration indices must increase")
        rec = {"iteration": int(iteration), "loss": float(loss), "lr": float(lr)}
        rec.update({f"grad_norm.{k}": float(v) for k, v in sorted(norms.items())})
        self.records.append(rec)

    def log_frames(self, chamfers, psnrs=None):
        self.frames = []
        for k, c in enumerate(chamfers):
            row = {"frame": k, "chamfer": float(c)}
            row["psnr"] = None if psnrs is None else float(psnrs[k])
            self.frames.append(row)

    @property
    def losses(self):
        return np.array([r["loss"] for r in self.records])

    def iterations_text(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def frames_text(self):
        lines = ["frame\tchamfer\tpsnr"]
        for r in self.frames:
            p = "nan" if r["psnr"] is None else repr(r["psnr"])
            lines.append(f"{r['frame']}\t{r['chamfer']!r}\t{p}")
        return "\n".join(lines) + "\n"

    def save(self, iterations_path, frames_path=None):
        with open(iterations_path, "w") as fh:
            fh.write(self.iterations_text())
        if frames_path is not None:
            with open(frames_path, "w") as fh:
                fh.write(self.frames_text())

    @classmethod
    def load(cls, iterations_path):
        with open(iterations_path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


# --------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam with bias correction, updating arrays in place.

    Keys in ``shared`` keep one second moment per array instead of one per
    entry, so the step follows the gradient direction. Small vectors whose
    components differ in scale (a velocity) need this; per-entry scaling
    turns a component with a near-zero gradient into full-size noise steps.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, shared=()):
        self.params = params
        self.shared = frozenset(shared)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            g2 = np.full_like(g, np.mean(g * g)) if k in self.shared else g * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g2
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def cosine_lr(base, iteration, total, floor=0.0):
    """Cosine decay from ``base`` at iteration 0 towards ``floor`` at ``total``."""
    if total <= 1:
        return base
    return floor + (base - floor) * 0.5 * (1 + math.cos(math.pi * iteration / total))


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 1000
    lr: float = 1e-3
    lr_floor: float = 0.0
    supervision: str = "particles"  # particles | pixels
    horizon: int = None             # supervised frames (None: all)
    checkpoint_every: int = diff.DEFAULT_CHECKPOINT_EVERY
    seed: int = 0
    trainable: str = "adapter"      # adapter | base (train the prior directly)
    rank: int = 16
    alpha: float = 16.0
    keep_best: bool = True          # end on the lowest-loss parameters seen

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.supervision not in ("particles", "pixels"):
            raise ValueError("supervision must be 'particles' or 'pixels'")
        if self.trainable not in ("adapter", "base"):
            raise ValueError("trainable must be 'adapter' or 'base'")

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class FitResult:
    adapter: MaterialAdapter  # None when the base weights were trained
    material: object          # material used for the final rollout
    log: MetricsLog
    trajectory: mpm.Trajectory = None


def particle_loss(reference, horizon=None):
    frames = range(1, len(reference) if horizon is None else min(len(reference), horizon + 1))
    return diff.ParticleMSE(reference, frames=list(frames))


def _optimise(loss_spec, initial, material, scene_cfg, steps, fit_cfg, trainable, lr,
              metrics, velocity_param=None):
    """Shared gradient loop; returns the final loss."""
    params = diff.material_parameters(material, trainable) if trainable else {}
    if velocity_param is not None:
        params = dict(params, v0=velocity_param)
    opt = Adam(params, shared=("v0",))
    loss = float("nan")
    best_loss, best = math.inf, None
    for it in range(fit_cfg.iterations):
        state = initial
        if velocity_param is not None:
            state = initial.with_state(velocities=np.broadcast_to(
                velocity_param, initial.velocities.shape).copy())
        try:
            loss, report = diff.grad_rollout(loss_spec, state, material, scene_cfg, steps,
                                             fit_cfg.checkpoint_every, trainable)
        except MatgroundError as err:
            raise TrainingError(f"iteration {it}: {err}") from err
        if not math.isfinite(loss) or not report.is_finite():
            raise TrainingError(f"iteration {it}: non-finite loss or gradient ({loss})")
        if fit_cfg.keep_best and loss < best_loss:
            best_loss, best = loss, {k: p.copy() for k, p in params.items()}
        grads = dict(report.params)
        if velocity_param is not None:
            grads["v0"] = report.v0
        rate = cosine_lr(lr, it, fit_cfg.iterations, fit_cfg.lr_floor)
        metrics.log_iteration(it, loss, rate, report.norms)
        log.info("iteration %d loss %.6g", it, loss)
        opt.step(grads, rate)
    if best is None:
        return loss
    # the last update was never scored, so the best scored state wins
    for k, p in params.items():
        p[...] = best[k]
    return best_loss


def fit_initial_velocity(initial, material, scene_cfg, reference, frames_used=5,
                         fit_cfg=None, guess=(0.0, 0.0, 0.0), lr=0.1):
    """Fit one rigid initial velocity shared by all particles, material frozen.

    ``reference`` is a Trajectory; the first ``frames_used`` frames after the
    initial one supervise the fit. Returns (v0, final loss, MetricsLog).
    """
    fit_cfg = fit_cfg or FitConfig(iterations=200)
    if len(reference) <= frames_used:
        raise ValueError(f"reference has {len(reference)} frames, need > {frames_used}")
    loss_spec = diff.ParticleMSE(reference, frames=list(range(1, frames_used + 1)))
    steps = frames_used * reference.save_every
    v0 = np.array(guess, float)
    metrics = MetricsLog()
    loss = _optimise(loss_spec, initial, material, scene_cfg, steps, fit_cfg, None, lr,
                     metrics, velocity_param=v0)
    if fit_cfg.iterations == 0:
        loss = diff.evaluate_loss(loss_spec, initial.with_state(
            velocities=np.broadcast_to(v0, initial.velocities.shape).copy()),
            material, scene_cfg, steps)
    return v0, loss, metrics


def fit_adapter(initial, base, scene_cfg, reference, fit_cfg=None, loss_spec=None,
                adapter=None, steps=None):
    """Fit a low-rank adapter (or, with ``trainable="base"``, the prior itself).

    ``reference`` is the target Trajectory; particle supervision builds a
    mean-squared position loss from it unless ``loss_spec`` is given (pixel
    supervision must pass its :class:`~matground.diff.PixelLoss`). The rollout
    length defaults to the reference length.
    """
    fit_cfg = fit_cfg or FitConfig()
    if loss_spec is None:
        if fit_cfg.supervision == "pixels":
            raise ValueError("pixel supervision needs an explicit PixelLoss")
        loss_spec = particle_loss(reference, fit_cfg.horizon)
    if steps is None:
        frames = (len(reference) - 1) if fit_cfg.horizon is None else fit_cfg.horizon
        steps = frames * reference.save_every
    metrics = MetricsLog()
    if fit_cfg.trainable == "base":
        material = base.copy()
        adapter = None
    else:
        if adapter is None:
            adapter = MaterialAdapter.init(base, fit_cfg.rank, fit_cfg.alpha, fit_cfg.seed)
        material = compose_material(base, adapter)
    _optimise(loss_spec, initial, material, scene_cfg, steps, fit_cfg, fit_cfg.trainable,
              fit_cfg.lr, metrics)
    traj = mpm.simulate(initial, material, scene_cfg, steps, reference.save_every)
    metrics.log_frames(chamfer_curve(traj, reference.positions[:len(traj)]))
    return FitResult(adapter, material, metrics, traj)


def interpolate_dynamics(base, adapter, weights, initial, scene_cfg, steps, save_every=None):
    """One rollout per composition weight."""
    return [mpm.simulate(initial, compose_material(base, adapter, w), scene_cfg, steps,
                         save_every) for w in weights]


@dataclass
class StabilityReport:
    steps: int
    finite: bool
    min_det: float

    @property
    def ok(self):
        return self.finite and self.min_det > 0


def transfer(material, initial, scene_cfg, steps, save_every=None):
    """Roll out a frozen (fitted) material on a new initial condition."""
    traj = mpm.simulate(initial, material, scene_cfg, steps, save_every)
    finite = bool(np.all(np.isfinite(traj.positions)) and np.all(np.isfinite(traj.F)))
    min_det = float(np.min(np.linalg.det(traj.F))) if finite else float("nan")
    return traj, StabilityReport(steps, finite, min_det)


def compose_scene(objects, min_gap=0.5):
    """Merge (ParticleSet, material) pairs into one multi-material scene.

    Returns (particles with material tags, list of materials). Objects whose
    particles come closer than ``min_gap`` times the particle spacing are
    rejected as overlapping.
    """
    from scipy.spatial import cKDTree

    if not objects:
        raise ValueError("need at least one object")
    parts, materials = [], []
    for k, (ps, mat) in enumerate(objects):
        tagged = ps.copy()
        tagged.material_id[:] = k
        parts.append(tagged)
        materials.append(mat)
    for i in range(len(parts)):
        for j in range(i + 1, len(parts)):
            a, b = parts[i], parts[j]
            spacing = min(float(np.mean(a.volume)), float(np.mean(b.volume))) ** (1 / 3)
            dist, _ = cKDTree(a.positions).query(b.positions, k=1)
            if dist.min() < min_gap * spacing:
                raise GeometryError(
                    f"objects {i} and {j} overlap (closest particles {dist.min():.3g} apart, "
                    f"spacing {spacing:.3g})")
    return ParticleSet.concatenate(parts), materials
