"""Reverse-mode derivatives of whole rollouts, plus a finite-difference oracle.

The adjoint is written by hand per primitive (stress, transfers, grid solve,
boundary projection, return mapping). Memory is bounded by segment
checkpointing: every ``checkpoint_every`` steps a full particle state is kept,
and the states inside a segment are recomputed during the reverse sweep.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels, mpm
from .constitutive.material import Material
from .errors import DifferentiationError, MatgroundError

DEFAULT_CHECKPOINT_EVERY = 20


# --------------------------------------------------------------------------
# loss specifications
#
# A loss spec exposes ``loss_steps(steps)`` -> {step: frame} and
# ``evaluate(frame, state, grad)`` -> value, or (value, (p_bar, v_bar, F_bar))
# when ``grad`` is set; unused cotangents may be None.


def _frame_steps(frames, save_every, steps):
    out = {}
    for f in frames:
        s = int(f) * save_every
        if 0 <= s <= steps:
            out[s] = int(f)
    return out


class ParticleMSE:
    """Mean squared particle position error against reference frames.

    ``reference`` is a :class:`~matground.mpm.Trajectory` or an array of
    positions (frames, N, 3). The value averages over particles and over the
    selected frames (default: every saved frame after the first).
    """

    def __init__(self, reference, frames=None, save_every=None):
        if isinstance(reference, mpm.Trajectory):
            save_every = reference.save_every if save_every is None else save_every
            reference = reference.positions
        if save_every is None:
            raise ValueError("save_every is required with a bare position array")
        self.reference = np.asarray(reference, float)
        self.save_every = int(save_every)
        self.frames = list(range(1, len(self.reference))) if frames is None else list(frames)
        if not self.frames:
            raise ValueError("need at least one supervised frame")

    def loss_steps(self, steps):
        return _frame_steps(self.frames, self.save_every, steps)

    def evaluate(self, frame, state, grad=False):
        d = state.positions - self.reference[frame]
        scale = 1.0 / (len(d) * len(self.frames))
        value = scale * float(np.sum(d * d))
        if not grad:
            return value
        return value, (2.0 * scale * d, None, None)


class VelocityLoss:
    """mean_i |v_i - target|^2 on the initial state."""

    def __init__(self, target):
        self.target = np.asarray(target, float)

    def loss_steps(self, steps):
        return {0: 0}

    def evaluate(self, frame, state, grad=False):
        d = state.velocities - self.target
        value = float(np.sum(d * d)) / len(d)
        if not grad:
            return value
        return value, (None, 2.0 * d / len(d), None)


class ConstantLoss:
    """A loss that ignores the state (its gradients are all zero)."""

    def __init__(self, value=1.0):
        self.value = float(value)

    def loss_steps(self, steps):
        return {steps: 0}

    def evaluate(self, frame, state, grad=False):
        return (self.value, (None, None, None)) if grad else self.value


# --------------------------------------------------------------------------
# material dispatch for the reverse rules


def material_parameters(material, trainable="adapter"):
    """Trainable arrays, keyed like the gradients :func:`grad_rollout` returns.

    A list of materials prefixes keys with the index of each distinct model.
    """
    if not isinstance(material, (list, tuple)):
        return material.parameters(trainable)
    out, seen = {}, set()
    for k, m in enumerate(material):
        if id(m) not in seen:
            seen.add(id(m))
            out.update({f"{k}.{key}": v for key, v in m.parameters(trainable).items()})
    return out


def _prefix(material, model):
    if not isinstance(material, (list, tuple)):
        return ""
    return f"{next(k for k, m in enumerate(material) if m is model)}."


def _accumulate(into, grads):
    for k, g in grads.items():
        into[k] = into[k] + g if k in into else g


def _keep(model, method, X):
    if isinstance(model, Material):
        return getattr(model, method)(X, keep=True)
    return getattr(model, method)(X), None


def _material_forward(material, material_id, method, X):
    """``mpm._apply`` that also keeps one reverse-pass context per material group."""
    groups = mpm._groups(material, material_id)
    if len(groups) == 1 and groups[0][1] is None:
        out, ctx = _keep(groups[0][0], method, X)
        return out, [ctx]
    out, ctxs = np.empty_like(X), []
    for m, idx in groups:
        out[idx], ctx = _keep(m, method, X[idx])
        ctxs.append(ctx)
    return out, ctxs


def _material_vjp(material, material_id, method, X, Xbar, trainable, ctxs=None):
    grads = {}
    groups = mpm._groups(material, material_id)
    out = np.empty_like(Xbar)
    for k, (m, idx) in enumerate(groups):
        sel = slice(None) if idx is None else idx
        ctx = None if ctxs is None else ctxs[k]
        if ctx is None:
            out[sel], g = getattr(m, method)(X[sel], Xbar[sel], trainable)
        else:
            out[sel], g = getattr(m, method)(X[sel], Xbar[sel], trainable, ctx=ctx)
        pre = _prefix(material, m)
        _accumulate(grads, {pre + k: v for k, v in g.items()})
    return out, grads


# --------------------------------------------------------------------------
# single-step adjoint


@dataclass
class StepTape:
    """Forward intermediates of one step that its reverse pass reuses."""

    tau: np.ndarray
    grid: mpm.Grid
    record: list
    F_trial: np.ndarray
    G: np.ndarray
    stress_ctx: list
    project_ctx: list


def taped_step(state, material, cfg):
    """One PIC step (identical to :func:`mpm.step`) plus its :class:`StepTape`."""
    if cfg.transfer != "pic":
        raise DifferentiationError("only the PIC transfer is differentiable")
    tau, stress_ctx = _material_forward(material, state.material_id, "stress", state.F)
    grid = mpm.p2g(state, tau, cfg)
    record = []
    mpm.grid_update(grid, cfg.dt, cfg, record)
    v, F_trial, G = mpm.g2p(state, grid, cfg.dt, with_gradient=True)
    F_new, project_ctx = _material_forward(material, state.material_id, "project", F_trial)
    new = state.with_state(state.positions + cfg.dt * v, v, F_new)
    return new, StepTape(tau, grid, record, F_trial, G, stress_ctx, project_ctx)


def step_vjp(state, cot, material, cfg, trainable="adapter", tape=None):
    """Pull the cotangent of the next state back through one step.

    ``cot`` is (p_bar, v_bar, F_bar) on the state after the step. Returns
    the cotangent on ``state`` and the parameter gradients of this step.
    Without a ``tape`` the forward step is replayed first.
    """
    if cfg.transfer != "pic":
        raise DifferentiationError("only the PIC transfer is differentiable")
    dt, n = cfg.dt, cfg.n
    p, v, F = state.positions, state.velocities, state.F
    p1_bar, v1_bar, F1_bar = cot
    if tape is None:
        tape = taped_step(state, material, cfg)[1]
    tau, grid, record, F_trial, G = tape.tau, tape.grid, tape.record, tape.F_trial, tape.G

    Ft_bar, grads = _material_vjp(material, state.material_id, "project_vjp",
                                  F_trial, F1_bar, trainable, tape.project_ctx)
    # F_trial = F + dt G F;  p1 = p + dt v1
    F_bar = Ft_bar + dt * np.swapaxes(G, -1, -2) @ Ft_bar
    G_bar = dt * Ft_bar @ np.swapaxes(F, -1, -2)
    p_bar = p1_bar.copy()
    vg_bar = np.zeros_like(grid.velocity)
    _kernels.g2p_vjp(p, grid.velocity, n, np.ascontiguousarray(v1_bar + dt * p1_bar),
                     np.ascontiguousarray(G_bar), vg_bar, p_bar)

    mpm.apply_boundary_vjp(vg_bar, mpm.boundary_planes(cfg), record)
    # v = (P + dt (f_int + m g)) / m on active nodes
    active = grid.active
    m = np.where(active, grid.mass, 1.0)
    vg_bar[~active] = 0.0
    P_bar = vg_bar / m[:, None]
    f_bar = dt * P_bar
    m_bar = f_bar @ np.asarray(cfg.gravity, float)
    m_bar -= np.einsum("ij,ij->i", grid.velocity_free, vg_bar) / m

    v_bar = np.zeros_like(v)
    tau_bar = np.zeros_like(tau)
    _kernels.p2g_vjp(p, v, state.mass, state.volume, np.ascontiguousarray(tau), n,
                     m_bar, P_bar, f_bar, p_bar, v_bar, tau_bar)

    Fs_bar, g = _material_vjp(material, state.material_id, "stress_vjp", F, tau_bar,
                              trainable, tape.stress_ctx)
    _accumulate(grads, g)
    return (p_bar, v_bar, F_bar + Fs_bar), grads


# --------------------------------------------------------------------------
# rollouts


@dataclass
class GradientReport:
    loss: float
    params: dict               # parameter name -> gradient array
    positions: np.ndarray      # d loss / d initial positions
    velocities: np.ndarray     # d loss / d initial per-particle velocities
    F: np.ndarray              # d loss / d initial F
    peak_states: int = 0
    norms: dict = field(default_factory=dict)

    @property
    def v0(self):
        """Gradient with respect to a rigid velocity shared by all particles."""
        return self.velocities.sum(axis=0)

    def is_finite(self):
        arrays = [self.velocities, self.positions, self.F, *self.params.values()]
        return all(np.all(np.isfinite(a)) for a in arrays)


def gradient_norms(params, v0=None):
    """Per-model L2 norms: ``elastic``, ``plastic`` (and ``v0`` when given)."""
    out = {}
    for key, g in params.items():
        part = "elastic" if "elastic." in key else "plastic" if "plastic." in key else "other"
        out[part] = out.get(part, 0.0) + float(np.sum(g * g))
    out = {k: float(np.sqrt(v)) for k, v in out.items()}
    if v0 is not None:
        out["v0"] = float(np.linalg.norm(v0))
    return out


def _advance(state, material, cfg, t, taped=False):
    try:
        return taped_step(state, material, cfg) if taped else mpm.step(state, material, cfg)
    except MatgroundError as err:
        err.step = t + 1
        raise


def _add(total, extra):
    return tuple(a if b is None else a + b for a, b in zip(total, extra))


def evaluate_loss(loss_spec, initial, material, cfg, steps):
    """Forward-only loss, computed by the same step sequence as the gradient."""
    loss_steps = loss_spec.loss_steps(steps)
    state = initial
    loss = 0.0
    for t in range(steps + 1):
        if t in loss_steps:
            loss += loss_spec.evaluate(loss_steps[t], state)
        if t < steps:
            state = _advance(state, material, cfg, t)
    return loss


def grad_rollout(loss_spec, initial, material, cfg, steps,
                 checkpoint_every=DEFAULT_CHECKPOINT_EVERY, trainable="adapter"):
    """Loss of a ``steps``-step rollout and its exact reverse-mode gradient.

    Gradients cover the trainable material parameters (``trainable`` is
    "adapter", "base" or None) and the initial particle state.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    k = max(1, int(checkpoint_every))
    loss_steps = loss_spec.loss_steps(steps)

    checkpoints = {0: initial}
    state = initial
    loss = 0.0
    for t in range(steps + 1):
        if t in loss_steps:
            loss += loss_spec.evaluate(loss_steps[t], state)
        if t < steps:
            state = _advance(state, material, cfg, t)
            if (t + 1) % k == 0 and t + 1 < steps:
                checkpoints[t + 1] = state
    if not np.isfinite(loss):
        raise DifferentiationError(f"loss is {loss}", )

    N = len(initial)
    cot = (np.zeros((N, 3)), np.zeros((N, 3)), np.zeros((N, 3, 3)))
    if steps in loss_steps:
        cot = _add(cot, loss_spec.evaluate(loss_steps[steps], state, grad=True)[1])
    state = None
    grads = {}
    peak = 0
    for start in sorted(checkpoints, reverse=True):
        end = min(start + k, steps)
        segment, tapes = [checkpoints[start]], []
        for t in range(start, end):
            nxt, tape = _advance(segment[-1], material, cfg, t, taped=True)
            tapes.append(tape)
            if t + 1 < end:
                segment.append(nxt)
        peak = max(peak, len(checkpoints) + len(segment) - 1)
        for t in range(end - 1, start - 1, -1):
            cot, g = step_vjp(segment[t - start], cot, material, cfg, trainable,
                              tapes.pop())
            _accumulate(grads, g)
            if t in loss_steps:
                cot = _add(cot, loss_spec.evaluate(loss_steps[t], segment[t - start], True)[1])
            if not all(np.all(np.isfinite(c)) for c in cot):
                err = DifferentiationError(f"non-finite adjoint at step {t}")
                err.step = t
                raise err
        del checkpoints[start]

    params = {key: grads.get(key, np.zeros_like(v))
              for key, v in material_parameters(material, trainable).items()}
    report = GradientReport(loss, params, cot[0], cot[1], cot[2], peak)
    report.norms = gradient_norms(params, report.v0)
    return loss, report


# --------------------------------------------------------------------------
# finite-difference oracle


def sample_coordinates(material, rng, count, trainable="adapter", v0=True):
    """Random coordinates for :func:`finite_diff_oracle`.

    Returns tuples ("param", key, flat_index) and, when ``v0`` is set,
    ("v0", axis) entries.
    """
    params = material_parameters(material, trainable)
    keys = sorted(params)
    coords = []
    if v0:
        coords += [("v0", a) for a in range(3)]
    while len(coords) < count:
        key = keys[rng.integers(len(keys))]
        coords.append(("param", key, int(rng.integers(params[key].size))))
    return coords


def finite_diff_oracle(loss_spec, state, material, cfg, steps, coordinates, h=1e-5,
                       trainable="adapter"):
    """Central differences (L(x+h) - L(x-h)) / 2h for each coordinate.

    Coordinates are ("param", key, flat_index), ("v0", axis) for a shift of
    every particle velocity, or ("velocity", particle, axis).
    """
    params = material_parameters(material, trainable)

    def loss_at(s):
        return evaluate_loss(loss_spec, s, material, cfg, steps)

    out = []
    for c in coordinates:
        if c[0] == "param":
            arr = params[c[1]].reshape(-1)
            x0 = arr[c[2]]
            arr[c[2]] = x0 + h
            lp = loss_at(state)
            arr[c[2]] = x0 - h
            lm = loss_at(state)
            arr[c[2]] = x0
        else:
            vel = state.velocities
            sel = (slice(None), c[1]) if c[0] == "v0" else (c[1], c[2])
            vp, vm = vel.copy(), vel.copy()
            vp[sel] += h
            vm[sel] -= h
            lp = loss_at(state.with_state(velocities=vp))
            lm = loss_at(state.with_state(velocities=vm))
        out.append((lp - lm) / (2 * h))
    return np.array(out)


def adjoint_at(report, coordinates):
    """Pick the adjoint values matching oracle coordinates."""
    out = []
    for c in coordinates:
        if c[0] == "param":
            out.append(report.params[c[1]].reshape(-1)[c[2]])
        elif c[0] == "v0":
            out.append(report.v0[c[1]])
        else:
            out.append(report.velocities[c[1], c[2]])
    return np.array(out)


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


class PixelLoss:
    """Mean image error of kernels driven by the particles, over frames and cameras.

    Kernel state at a frame is recomputed from the rest kernels:
    centres x0 + B (p - p0) and covariances (B F) A0 (B F)^T.
    ``references[f][c]`` is the target image of frame ``f`` seen by camera
    ``c``. With ``stop_covariance_grad`` the covariance path contributes no
    gradient to F.
    """

    def __init__(self, kernels, binding, positions0, cameras, references, frames,
                 save_every, background=(1.0, 1.0, 1.0), stop_covariance_grad=False):
        from . import particle_gs
        self._gs = particle_gs
        self.kernels = kernels
        self.binding = binding
        self.positions0 = np.asarray(positions0, float)
        self.A0 = kernels.covariances
        self.cameras = list(cameras)
        self.references = references
        self.frames = list(frames)
        self.save_every = int(save_every)
        self.background = background
        self.stop_covariance_grad = stop_covariance_grad
        if binding.shape != (len(kernels), len(self.positions0)):
            raise ValueError(f"binding shape {binding.shape} does not match "
                             f"{len(kernels)} kernels x {len(self.positions0)} particles")

    def loss_steps(self, steps):
        return _frame_steps(self.frames, self.save_every, steps)

    def kernels_at(self, state):
        return self._gs.deform_kernels(self.kernels, self.binding, self.positions0,
                                       state.positions, state.F, self.A0)

    def render(self, state):
        ks = self.kernels_at(state)
        return [self._gs.splat(ks, cam, self.background) for cam in self.cameras]

    def evaluate(self, frame, state, grad=False):
        gs = self._gs
        ks = self.kernels_at(state)
        weight = 1.0 / (len(self.frames) * len(self.cameras))
        value = 0.0
        center_bar = np.zeros_like(ks.centers)
        cov_bar = np.zeros_like(ks.covariances)
        for cam, ref in zip(self.cameras, self.references[frame]):
            if not grad:
                value += weight * gs.image_loss(gs.splat(ks, cam, self.background), ref)
                continue
            img, cache = gs.splat(ks, cam, self.background, cache=True)
            value += weight * gs.image_loss(img, ref)
            cb, Ab = gs.splat_vjp(cache, weight * gs.image_loss_grad(img, ref))
            center_bar += cb
            cov_bar += Ab
        if not grad:
            return value
        p_bar = self.binding.apply_transpose(center_bar)
        F_bar = None
        if not self.stop_covariance_grad:
            Fbar = self.binding.apply(state.F)
            Fbar_bar = (cov_bar + np.swapaxes(cov_bar, -1, -2)) @ Fbar @ self.A0
            F_bar = self.binding.apply_transpose(Fbar_bar)
        return value, (p_bar, None, F_bar)
