"""Return mappings acting on log principal stretches.

Each model maps a trial elastic deformation gradient to an admissible one via
``project(F)``; ``project_vjp(F, Fbar, trainable)`` is its reverse-mode rule.
"""

from dataclasses import dataclass
import math

import numpy as np

from .spectral import assemble, check_det, spectral_vjp, svd3


@dataclass(frozen=True)
class Identity:
    """Purely elastic: no projection."""

    def project(self, F):
        check_det(F, "trial deformation gradient")
        return F

    def project_vjp(self, F, Fbar, trainable=None):
        return Fbar, {}

    def parameters(self, trainable="adapter"):
        return {}


class _LogStretchReturn:
    """Shared SVD plumbing; subclasses implement ``_map(eps)``.

    ``_map`` returns (eps_new, d eps_new / d eps, active mask); inactive rows
    are returned untouched so the elastic region is an exact identity.
    """

    def project(self, F):
        check_det(F, "trial deformation gradient")
        U, s, Vt = svd3(F)
        eps = np.log(s)
        eps_new, _, active = self._map(eps)
        out = F.copy()
        if active.any():
            out[active] = assemble(U[active], np.exp(eps_new[active]), Vt[active])
        return out

    def project_vjp(self, F, Fbar, trainable=None):
        check_det(F, "trial deformation gradient")
        U, s, Vt = svd3(F)
        eps = np.log(s)
        eps_new, jac, active = self._map(eps)
        out = Fbar.copy()
        if active.any():
            a = active
            f = np.exp(eps_new[a])
            J = f[:, :, None] * jac[a] / s[a][:, None, :]
            out[a] = spectral_vjp(U[a], s[a], Vt[a], f, J, Fbar[a])
        return out, {}

    def parameters(self, trainable="adapter"):
        return {}


def _deviator(eps):
    tr = eps.sum(axis=1)
    dev = eps - tr[:, None] / 3.0
    return tr, dev, np.linalg.norm(dev, axis=1)


_P_VOL = np.full((3, 3), 1.0 / 3.0)
_P_DEV = np.eye(3) - _P_VOL


@dataclass(frozen=True)
class VonMises(_LogStretchReturn):
    """Radial return: clamp |2 mu dev(eps)| to ``yield_stress``."""

    yield_stress: float
    mu: float

    def __post_init__(self):
        if not self.yield_stress > 0 or not self.mu > 0:
            raise ValueError("need yield_stress > 0 and mu > 0")

    def _map(self, eps):
        tr, dev, nd = _deviator(eps)
        active = 2 * self.mu * nd > self.yield_stress
        r = self.yield_stress / (2 * self.mu)
        safe = np.where(active, nd, 1.0)
        n = dev / safe[:, None]
        eps_new = np.where(active[:, None], tr[:, None] / 3.0 + r * n, eps)
        proj = np.eye(3) - n[:, :, None] * n[:, None, :]
        jac_plastic = _P_VOL + (r / safe)[:, None, None] * proj @ _P_DEV
        jac = np.where(active[:, None, None], jac_plastic, np.eye(3))
        return eps_new, jac, active

    def violation(self, F):
        """max(0, |2 mu dev(ln s)| - yield) per particle."""
        s = np.linalg.svd(F, compute_uv=False)
        _, _, nd = _deviator(np.log(s))
        return np.maximum(0.0, 2 * self.mu * nd - self.yield_stress)


@dataclass(frozen=True)
class DruckerPrager(_LogStretchReturn):
    """Cohesionless cone in log-stretch space; expansion maps to the tip."""

    friction_angle: float  # degrees
    mu: float
    lam: float

    def __post_init__(self):
        if not 0.0 < self.friction_angle < 90.0:
            raise ValueError("friction angle must lie in (0, 90) degrees")
        if not self.mu > 0 or self.lam < 0:
            raise ValueError("need mu > 0 and lambda >= 0")

    @property
    def alpha(self):
        sin_phi = math.sin(math.radians(self.friction_angle))
        return math.sqrt(2.0 / 3.0) * 2.0 * sin_phi / (3.0 - sin_phi)

    @property
    def _k(self):
        return (3 * self.lam + 2 * self.mu) / (2 * self.mu) * self.alpha

    def _map(self, eps):
        tr, dev, nd = _deviator(eps)
        k = self._k
        gamma = nd + k * tr
        tip = tr >= 0
        cone = ~tip & (gamma > 0)
        safe = np.where(nd > 0, nd, 1.0)
        n = dev / safe[:, None]
        eps_cone = tr[:, None] / 3.0 - k * tr[:, None] * n
        eps_new = np.where(tip[:, None], 0.0, np.where(cone[:, None], eps_cone, eps))
        proj = np.eye(3) - n[:, :, None] * n[:, None, :]
        jac_cone = (_P_VOL - k * n[:, :, None] * np.ones(3)
                    - (k * tr / safe)[:, None, None] * proj @ _P_DEV)
        jac = np.where(tip[:, None, None], 0.0,
                       np.where(cone[:, None, None], jac_cone, np.eye(3)))
        return eps_new, jac, tip | cone

    def cone_violation(self, F):
        s = np.linalg.svd(F, compute_uv=False)
        tr, _, nd = _deviator(np.log(s))
        return np.maximum(np.maximum(0.0, tr), nd + self._k * tr)


@dataclass(eq=False)
class NeuralPlastic:
    """Learned correction of log stretches: eps' = eps + out*(N(eps/in) - N(0))."""

    net: object
    adapter: object = None
    weight: float = 0.0
    input_scale: float = 0.1
    output_scale: float = 0.1

    def _w(self):
        return self.weight if self.adapter is not None else 0.0

    def _delta(self, eps, cache=False):
        w = self._w()
        y, c1 = self.net.forward(eps / self.input_scale, self.adapter, w, cache=True)
        y0, c0 = self.net.forward(np.zeros((1, 3)), self.adapter, w, cache=True)
        d = self.output_scale * (y - y0)
        return (d, c1, c0) if cache else d

    def _forward(self, F):
        check_det(F, "trial deformation gradient")
        U, s, Vt = svd3(F)
        eps = np.log(s)
        delta, c1, c0 = self._delta(eps, cache=True)
        return U, s, Vt, eps, np.exp(eps + delta), c1, c0

    def project(self, F, keep=False):
        """Projected F; ``keep`` also returns a context for :meth:`project_vjp`."""
        ctx = self._forward(F)
        out = assemble(ctx[0], ctx[4], ctx[2])
        return (out, ctx) if keep else out

    def log_map(self, eps):
        return eps + self._delta(eps)

    def project_vjp(self, F, Fbar, trainable="adapter", ctx=None):
        U, s, Vt, eps, f, c1, c0 = self._forward(F) if ctx is None else ctx
        w = self._w()
        jac = np.eye(3) + (self.output_scale / self.input_scale) * self.net.jacobian(
            eps / self.input_scale, self.adapter, w, cache=c1)
        J = f[:, :, None] * jac / s[:, None, :]
        Fbar_out = spectral_vjp(U, s, Vt, f, J, Fbar)
        # parameters only move f, not the singular vectors
        M_diag = np.einsum("nii->ni", np.swapaxes(U, -1, -2) @ Fbar @ np.swapaxes(Vt, -1, -2))
        gy = self.output_scale * f * M_diag
        _, grads = self.net.backward(c1, gy, self.adapter, w, trainable)
        _, grads0 = self.net.backward(c0, -gy.sum(axis=0, keepdims=True),
                                      self.adapter, w, trainable)
        for key, g in grads0.items():
            grads[key] = grads[key] + g
        return Fbar_out, grads

    def parameters(self, trainable="adapter"):
        if trainable == "base":
            return self.net.parameters()
        if trainable == "adapter" and self.adapter is not None:
            return self.adapter.parameters()
        return {}
