"""Dense SiLU networks with an optional low-rank residual on every layer.

Weights follow the (out, in) convention; a layer computes ``h @ W.T + b``.
With an adapter attached at weight ``w`` the effective weight of layer ``l``
is ``W[l] + w * B[l] @ A[l]``.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import CompositionError
from ..utils import (read_array, read_magic, read_struct, write_array, write_magic,
                     write_struct)


def sigmoid(z):
    # 1 / (1 + exp(-z)) is several times faster than scipy's expit here
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def silu(z):
    return z * sigmoid(z)


def silu_grad(z, sig=None):
    s = sigmoid(z) if sig is None else sig
    return s * (1.0 + z * (1.0 - s))


class Mlp:
    """Stack of linear layers with SiLU between them (none after the last)."""

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for l, (W, b) in enumerate(zip(weights, biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {l}: bad shapes {W.shape}, {b.shape}")
            if l and W.shape[1] != weights[l - 1].shape[0]:
                raise ValueError(f"layer {l} does not chain onto layer {l - 1}")
        self.weights = [np.asarray(W, float) for W in weights]
        self.biases = [np.asarray(b, float) for b in biases]

    @classmethod
    def init(cls, sizes, rng, zero_last=False):
        weights, biases = [], []
        for l, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            W = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_out, fan_in))
            if zero_last and l == len(sizes) - 2:
                W[:] = 0.0
            weights.append(W)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def shapes(self):
        return [W.shape for W in self.weights]

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    def copy(self):
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def effective_weights(self, adapter=None, w=0.0):
        if adapter is None or w == 0.0:
            return self.weights
        return [W + w * (B @ A) for W, A, B in zip(self.weights, adapter.A, adapter.B)]

    def forward(self, x, adapter=None, w=0.0, cache=False):
        Ws = self.effective_weights(adapter, w)
        h = x
        trace = []
        last = len(Ws) - 1
        for l, (W, b) in enumerate(zip(Ws, self.biases)):
            z = h @ W.T + b
            sig = None if l == last else sigmoid(z)
            trace.append((h, z, sig))
            h = z if l == last else z * sig
        return (h, (Ws, trace)) if cache else h

    def backward(self, cache, gy, adapter=None, w=0.0, trainable="adapter"):
        """Return (d/dx, parameter gradients) for cotangent ``gy`` on the output.

        ``trainable`` selects which gradients are reported: "adapter" gives
        ``A{l}``/``B{l}``, "base" gives ``W{l}``/``b{l}``, None gives neither.
        """
        Ws, trace = cache
        grads = {}
        g = gy
        last = len(Ws) - 1
        for l in range(last, -1, -1):
            h, z, sig = trace[l]
            if l != last:
                g = g * silu_grad(z, sig)
            if trainable == "base":
                grads[f"W{l}"] = g.T @ h
                grads[f"b{l}"] = g.sum(axis=0)
            elif trainable == "adapter" and adapter is not None:
                GW = g.T @ h
                grads[f"A{l}"] = w * (adapter.B[l].T @ GW)
                grads[f"B{l}"] = w * (GW @ adapter.A[l].T)
            g = g @ Ws[l]
        return g, grads

    def jacobian(self, x, adapter=None, w=0.0, cache=None):
        """Per-sample Jacobian d out / d in, shape (N, out, in), by forward mode.

        ``cache`` from ``forward(x, ..., cache=True)`` skips recomputing activations.
        """
        if cache is None:
            cache = self.forward(x, adapter, w, cache=True)[1]
        Ws, trace = cache
        # tangents kept as (N, in, hidden) so each layer is one matmul
        n, d = x.shape
        dh = np.broadcast_to(np.eye(d), (n, d, d))
        last = len(Ws) - 1
        for l, W in enumerate(Ws):
            dz = (dh.reshape(n * d, -1) @ W.T).reshape(n, d, -1)
            if l == last:
                return np.swapaxes(dz, 1, 2)
            _, z, sig = trace[l]
            dh = silu_grad(z, sig)[:, None, :] * dz

    def parameters(self):
        out = {}
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{l}"] = W
            out[f"b{l}"] = b
        return out


@dataclass(eq=False)
class LowRankAdapter:
    """Per-layer factors A (r x in) and B (out x r)."""

    A: list
    B: list
    rank: int = 16
    alpha: float = 16.0

    @classmethod
    def init(cls, net, rank=16, alpha=16.0, rng=None, std=None):
        """A ~ N(0, std^2) (default 1/sqrt(fan_in)), B = 0, so the residual starts at zero."""
        rng = np.random.default_rng(0) if rng is None else rng
        A = [rng.normal(0.0, std or 1.0 / np.sqrt(W.shape[1]), (rank, W.shape[1]))
             for W in net.weights]
        B = [np.zeros((W.shape[0], rank)) for W in net.weights]
        return cls(A, B, int(rank), float(alpha))

    @property
    def default_weight(self):
        return self.alpha / self.rank

    def check(self, net):
        if len(self.A) != len(net.weights) or len(self.B) != len(net.weights):
            raise CompositionError(
                f"adapter has {len(self.A)} layers, network has {len(net.weights)}")
        for l, (W, A, B) in enumerate(zip(net.weights, self.A, self.B)):
            if A.shape != (self.rank, W.shape[1]) or B.shape != (W.shape[0], self.rank):
                raise CompositionError(
                    f"layer {l}: adapter {A.shape}/{B.shape} does not fit weight {W.shape}")

    def delta(self, layer):
        return self.default_weight * self.B[layer] @ self.A[layer]

    def copy(self):
        return LowRankAdapter([a.copy() for a in self.A], [b.copy() for b in self.B],
                              self.rank, self.alpha)

    def parameters(self):
        out = {}
        for l, (A, B) in enumerate(zip(self.A, self.B)):
            out[f"A{l}"] = A
            out[f"B{l}"] = B
        return out


# --------------------------------------------------------------------------
# binary formats

MLP_MAGIC = "NMMAT01"
ADAPTER_MAGIC = "NMLORA1"


def _write_matrix(fh, M):
    write_struct(fh, "II", *M.shape)
    write_array(fh, M, np.float64)


def _read_matrix(fh):
    rows, cols = read_struct(fh, "II")
    return read_array(fh, rows * cols, np.float64, (rows, cols))


def save_mlp(path, net):
    with open(path, "wb") as fh:
        write_magic(fh, MLP_MAGIC)
        write_struct(fh, "I", len(net.weights))
        for W, b in zip(net.weights, net.biases):
            _write_matrix(fh, W)
            write_array(fh, b, np.float64)


def load_mlp(path):
    with open(path, "rb") as fh:
        read_magic(fh, MLP_MAGIC)
        (layers,) = read_struct(fh, "I")
        weights, biases = [], []
        for _ in range(layers):
            W = _read_matrix(fh)
            weights.append(W)
            biases.append(read_array(fh, W.shape[0], np.float64))
    return Mlp(weights, biases)


def save_adapter(path, adapter):
    with open(path, "wb") as fh:
        write_magic(fh, ADAPTER_MAGIC)
        write_struct(fh, "dd", float(adapter.rank), float(adapter.alpha))
        write_struct(fh, "I", len(adapter.A))
        for A, B in zip(adapter.A, adapter.B):
            _write_matrix(fh, A)
            _write_matrix(fh, B)


def load_adapter(path):
    with open(path, "rb") as fh:
        read_magic(fh, ADAPTER_MAGIC)
        rank, alpha = read_struct(fh, "dd")
        (layers,) = read_struct(fh, "I")
        A, B = [], []
        for _ in range(layers):
            A.append(_read_matrix(fh))
            B.append(_read_matrix(fh))
    return LowRankAdapter(A, B, int(rank), alpha)
