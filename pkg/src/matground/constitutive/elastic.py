"""Elastic stress laws returning Kirchhoff stress tau = P F^T.

Every model offers ``stress(F)`` and ``stress_vjp(F, tau_bar, trainable)``;
the latter returns the cotangent on F and a dict of parameter gradients.
"""

from dataclasses import dataclass

import numpy as np

from .spectral import check_det, polar_rotation, polar_vjp

IDENTITY = np.eye(3)
# upper-triangular feature layout of a symmetric 3x3 matrix
TRI_ROWS = np.array([0, 0, 0, 1, 1, 2])
TRI_COLS = np.array([0, 1, 2, 1, 2, 2])


def _inv_T(F):
    return np.swapaxes(np.linalg.inv(F), -1, -2)


def _tr(X):
    return np.einsum("nii->n", X)


def green_strain(F):
    return 0.5 * (np.swapaxes(F, -1, -2) @ F - IDENTITY)


def green_strain_vjp(F, Ebar):
    return 0.5 * F @ (Ebar + np.swapaxes(Ebar, -1, -2))


@dataclass(frozen=True)
class NeoHookean:
    mu: float
    lam: float

    def __post_init__(self):
        if not self.mu > 0 or self.lam < 0:
            raise ValueError("need mu > 0 and lambda >= 0")

    def stress(self, F):
        J = check_det(F)
        B = F @ np.swapaxes(F, -1, -2)
        return self.mu * (B - IDENTITY) + (self.lam * np.log(J))[:, None, None] * IDENTITY

    def stress_vjp(self, F, tau_bar, trainable=None):
        check_det(F)
        sym = tau_bar + np.swapaxes(tau_bar, -1, -2)
        Fbar = self.mu * sym @ F + (self.lam * _tr(tau_bar))[:, None, None] * _inv_T(F)
        return Fbar, {}


@dataclass(frozen=True)
class StVK:
    mu: float
    lam: float

    def __post_init__(self):
        if not self.mu > 0 or self.lam < 0:
            raise ValueError("need mu > 0 and lambda >= 0")

    def _second_pk(self, F):
        E = green_strain(F)
        return 2 * self.mu * E + (self.lam * _tr(E))[:, None, None] * IDENTITY

    def stress(self, F):
        check_det(F)
        S = self._second_pk(F)
        return F @ S @ np.swapaxes(F, -1, -2)

    def stress_vjp(self, F, tau_bar, trainable=None):
        check_det(F)
        S = self._second_pk(F)
        sym = tau_bar + np.swapaxes(tau_bar, -1, -2)
        Fbar = sym @ F @ S
        Sbar = np.swapaxes(F, -1, -2) @ tau_bar @ F
        Ebar = 2 * self.mu * Sbar + (self.lam * _tr(Sbar))[:, None, None] * IDENTITY
        return Fbar + green_strain_vjp(F, Ebar), {}


@dataclass(frozen=True)
class FixedCorotated:
    mu: float
    lam: float

    def __post_init__(self):
        if not self.mu > 0 or self.lam < 0:
            raise ValueError("need mu > 0 and lambda >= 0")

    def stress(self, F):
        J = check_det(F)
        R, _ = polar_rotation(F)
        Ft = np.swapaxes(F, -1, -2)
        return (2 * self.mu * (F - R) @ Ft
                + (self.lam * (J - 1) * J)[:, None, None] * IDENTITY)

    def stress_vjp(self, F, tau_bar, trainable=None):
        J = check_det(F)
        R, svd = polar_rotation(F)
        tau_bar_T = np.swapaxes(tau_bar, -1, -2)
        Fbar = 2 * self.mu * (tau_bar @ F + tau_bar_T @ (F - R))
        Fbar += (self.lam * (2 * J - 1) * J * _tr(tau_bar))[:, None, None] * _inv_T(F)
        Fbar += polar_vjp(svd, -2 * self.mu * tau_bar @ F)
        return Fbar, {}


@dataclass(eq=False)
class NeuralElastic:
    """Learned second Piola-Kirchhoff stress of the Green strain.

    S = out_scale * (N(E/in_scale) - N(0)) reassembled symmetric, tau = F S F^T.
    Depending on F only through C = F^T F makes the model frame indifferent,
    and the N(0) subtraction pins tau(I) = 0.
    """

    net: object
    adapter: object = None
    weight: float = 0.0
    input_scale: float = 1.0
    output_scale: float = 1.0

    def _w(self):
        return self.weight if self.adapter is not None else 0.0

    def _second_pk(self, F, cache=False):
        E = green_strain(F)
        x = E[:, TRI_ROWS, TRI_COLS] / self.input_scale
        w = self._w()
        y, c1 = self.net.forward(x, self.adapter, w, cache=True)
        y0, c0 = self.net.forward(np.zeros((1, 6)), self.adapter, w, cache=True)
        s6 = self.output_scale * (y - y0)
        S = np.empty((len(F), 3, 3))
        S[:, TRI_ROWS, TRI_COLS] = s6
        S[:, TRI_COLS, TRI_ROWS] = s6
        return (S, c1, c0) if cache else S

    def stress(self, F, keep=False):
        """Kirchhoff stress; ``keep`` also returns a context for :meth:`stress_vjp`."""
        check_det(F)
        S, c1, c0 = self._second_pk(F, cache=True)
        tau = F @ S @ np.swapaxes(F, -1, -2)
        return (tau, (S, c1, c0)) if keep else tau

    def stress_vjp(self, F, tau_bar, trainable="adapter", ctx=None):
        if ctx is None:
            check_det(F)
            ctx = self._second_pk(F, cache=True)
        S, c1, c0 = ctx
        sym = tau_bar + np.swapaxes(tau_bar, -1, -2)
        Fbar = sym @ F @ S
        Sbar = np.swapaxes(F, -1, -2) @ tau_bar @ F
        Sbar = Sbar + np.swapaxes(Sbar, -1, -2)
        Sbar[:, [0, 1, 2], [0, 1, 2]] *= 0.5
        gy = self.output_scale * Sbar[:, TRI_ROWS, TRI_COLS]
        w = self._w()
        gx, grads = self.net.backward(c1, gy, self.adapter, w, trainable)
        _, grads0 = self.net.backward(c0, -gy.sum(axis=0, keepdims=True),
                                      self.adapter, w, trainable)
        for k, g in grads0.items():
            grads[k] = grads[k] + g
        Ebar = np.zeros_like(F)
        Ebar[:, TRI_ROWS, TRI_COLS] = gx / self.input_scale
        return Fbar + green_strain_vjp(F, Ebar), grads

    def parameters(self, trainable="adapter"):
        if trainable == "base":
            return self.net.parameters()
        if trainable == "adapter" and self.adapter is not None:
            return self.adapter.parameters()
        return {}
