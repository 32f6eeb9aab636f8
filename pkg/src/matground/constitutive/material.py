"""Material = elastic law + return mapping, residual composition and pretraining."""

from dataclasses import dataclass, replace
import json
import logging
import math
import os

import numpy as np

from ..errors import CompositionError, TrainingError
from ..utils import rng_for
from .elastic import (TRI_COLS, TRI_ROWS, FixedCorotated, NeoHookean, NeuralElastic,
                      StVK, green_strain)
from .mlp import LowRankAdapter, Mlp, load_adapter, load_mlp, save_adapter, save_mlp
from .plastic import DruckerPrager, Identity, NeuralPlastic, VonMises

log = logging.getLogger(__name__)

ELASTIC_SIZES = (6, 64, 64, 6)
PLASTIC_SIZES = (3, 64, 64, 3)
NEURAL = (NeuralElastic, NeuralPlastic)


@dataclass(eq=False)
class Material:
    elastic: object
    plastic: object = Identity()

    def stress(self, F, keep=False):
        """Kirchhoff stress; with ``keep`` returns (tau, context for stress_vjp)."""
        if isinstance(self.elastic, NeuralElastic):
            return self.elastic.stress(F, keep)
        tau = self.elastic.stress(F)
        return (tau, None) if keep else tau

    def stress_vjp(self, F, tau_bar, trainable="adapter", ctx=None):
        """(F cotangent, gradients keyed like :meth:`parameters`)."""
        if ctx is not None:
            Fbar, grads = self.elastic.stress_vjp(F, tau_bar, trainable, ctx)
        else:
            Fbar, grads = self.elastic.stress_vjp(F, tau_bar, trainable)
        return Fbar, {f"elastic.{k}": g for k, g in grads.items()}

    def project(self, F, keep=False):
        if isinstance(self.plastic, NeuralPlastic):
            return self.plastic.project(F, keep)
        out = self.plastic.project(F)
        return (out, None) if keep else out

    def project_vjp(self, F, Fbar, trainable="adapter", ctx=None):
        if ctx is not None:
            Fbar, grads = self.plastic.project_vjp(F, Fbar, trainable, ctx)
        else:
            Fbar, grads = self.plastic.project_vjp(F, Fbar, trainable)
        return Fbar, {f"plastic.{k}": g for k, g in grads.items()}

    def parameters(self, trainable="adapter"):
        """Live parameter arrays keyed ``elastic.<name>`` / ``plastic.<name>``."""
        out = {}
        for part in ("elastic", "plastic"):
            model = getattr(self, part)
            if isinstance(model, NEURAL):
                for k, v in model.parameters(trainable).items():
                    out[f"{part}.{k}"] = v
        return out

    def copy(self):
        """Deep copy of every learnable array (analytic models are immutable)."""
        def dup(m):
            if isinstance(m, NEURAL):
                return replace(m, net=m.net.copy(),
                               adapter=None if m.adapter is None else m.adapter.copy())
            return m
        return Material(dup(self.elastic), dup(self.plastic))

    @property
    def is_neural(self):
        return isinstance(self.elastic, NEURAL) or isinstance(self.plastic, NEURAL)


@dataclass(eq=False)
class MaterialAdapter:
    """Low-rank residuals for the elastic and/or plastic network."""

    elastic: LowRankAdapter = None
    plastic: LowRankAdapter = None

    @classmethod
    def init(cls, base, rank=16, alpha=16.0, seed=0):
        el = pl = None
        if isinstance(base.elastic, NeuralElastic):
            el = LowRankAdapter.init(base.elastic.net, rank, alpha,
                                     rng_for(seed, "adapter.elastic"))
        if isinstance(base.plastic, NeuralPlastic):
            pl = LowRankAdapter.init(base.plastic.net, rank, alpha,
                                     rng_for(seed, "adapter.plastic"))
        if el is None and pl is None:
            raise CompositionError("base material has no neural part to adapt")
        return cls(el, pl)

    @property
    def default_weight(self):
        a = self.elastic or self.plastic
        return a.default_weight

    def copy(self):
        return MaterialAdapter(self.elastic and self.elastic.copy(),
                               self.plastic and self.plastic.copy())

    def parameters(self):
        out = {}
        for part in ("elastic", "plastic"):
            a = getattr(self, part)
            if a is not None:
                for k, v in a.parameters().items():
                    out[f"{part}.{k}"] = v
        return out


def compose_material(base, adapter, w=None):
    """Base networks with the adapter attached at composition weight ``w``.

    The base networks are shared (not copied); ``w`` defaults to alpha/r.
    """
    if w is None:
        w = adapter.default_weight

    def attach(model, a, part):
        if a is None:
            return model
        if not isinstance(model, NEURAL):
            raise CompositionError(f"{part} model {type(model).__name__} is not neural")
        a.check(model.net)
        return replace(model, adapter=a, weight=float(w))

    return Material(attach(base.elastic, adapter.elastic, "elastic"),
                    attach(base.plastic, adapter.plastic, "plastic"))


# --------------------------------------------------------------------------
# pretraining

def random_rotations(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], 1)


def random_deformations(rng, n, max_log_stretch=0.3):
    """R1 diag(exp(eps)) R2^T with eps uniform in [-max, max]^3."""
    eps = rng.uniform(-max_log_stretch, max_log_stretch, (n, 3))
    R1, R2 = random_rotations(rng, n), random_rotations(rng, n)
    return np.einsum("nij,nj,nkj->nik", R1, np.exp(eps), R2)


def _target_second_pk(model, F):
    tau = model.stress(F)
    Finv = np.linalg.inv(F)
    return Finv @ tau @ np.swapaxes(Finv, -1, -2)


@dataclass
class PretrainReport:
    elastic_rmse: float  # relative Kirchhoff-stress RMSE on held-out F
    plastic_rmse: float  # relative log-stretch RMSE on held-out eps
    elastic_loss: list
    plastic_loss: list


def _fit_anchored(net, x, y, epochs, batch, lr, rng, label):
    """Adam + cosine decay on mean((N(x) - N(0) - y)^2)."""
    params = net.parameters()
    m = {k: np.zeros_like(p) for k, p in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    zero = np.zeros((1, x.shape[1]))
    n = len(x)
    per_epoch = max(1, n // batch)
    total = epochs * per_epoch
    history = []
    t = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        running = 0.0
        for s in range(per_epoch):
            idx = order[s * batch:(s + 1) * batch]
            pred, c1 = net.forward(x[idx], cache=True)
            anchor, c0 = net.forward(zero, cache=True)
            diff = pred - anchor - y[idx]
            loss = float(np.mean(diff ** 2))
            if not math.isfinite(loss):
                raise TrainingError(
                    f"{label} pretraining diverged at epoch {epoch} (loss {loss})")
            running += loss
            g = 2 * diff / diff.size
            _, grads = net.backward(c1, g, trainable="base")
            _, grads0 = net.backward(c0, -g.sum(axis=0, keepdims=True), trainable="base")
            t += 1
            rate = lr * 0.5 * (1 + math.cos(math.pi * (t - 1) / total))
            for k in grads:
                gk = grads[k] + grads0[k]
                m[k] = 0.9 * m[k] + 0.1 * gk
                v[k] = 0.999 * v[k] + 0.001 * gk * gk
                mh = m[k] / (1 - 0.9 ** t)
                vh = v[k] / (1 - 0.999 ** t)
                params[k] -= rate * mh / (np.sqrt(vh) + 1e-12)
        history.append(running / per_epoch)
    return history


def pretrain_base(elastic_target, plastic_target=Identity(), sample_count=50_000,
                  seed=0, epochs=40, batch=256, lr=3e-3, init=None,
                  max_log_stretch=0.3):
    """Fit neural elastic and plastic networks to analytic targets.

    Returns (Material, PretrainReport). ``init`` optionally supplies a neural
    Material whose networks (and scales) are copied as the starting point. The
    plastic network's output layer starts at zero, so an Identity target is
    matched exactly.
    """
    rng = rng_for(seed, "pretrain")
    if init is not None:
        el = replace(init.elastic, net=init.elastic.net.copy(), adapter=None, weight=0.0)
        pl = replace(init.plastic, net=init.plastic.net.copy(), adapter=None, weight=0.0)
    else:
        el = NeuralElastic(Mlp.init(ELASTIC_SIZES, rng_for(seed, "init.elastic")),
                           input_scale=0.1)
        pl = NeuralPlastic(Mlp.init(PLASTIC_SIZES, rng_for(seed, "init.plastic"),
                                    zero_last=True))

    F = random_deformations(rng, sample_count, max_log_stretch)
    F_test = random_deformations(rng, max(1000, sample_count // 10), max_log_stretch)
    S = _target_second_pk(elastic_target, F)
    if init is None:
        el.output_scale = float(np.sqrt(np.mean(S ** 2))) or 1.0
    x = green_strain(F)[:, TRI_ROWS, TRI_COLS] / el.input_scale
    y = S[:, TRI_ROWS, TRI_COLS] / el.output_scale
    el_hist = _fit_anchored(el.net, x, y, epochs, batch, lr, rng, "elastic")
    tau_pred = el.stress(F_test)
    tau_true = elastic_target.stress(F_test)
    el_rmse = float(np.sqrt(np.mean((tau_pred - tau_true) ** 2) / np.mean(tau_true ** 2)))

    eps = -np.sort(-rng.uniform(-max_log_stretch, max_log_stretch, (sample_count, 3)), axis=1)
    eps_test = -np.sort(-rng.uniform(-max_log_stretch, max_log_stretch, (1000, 3)), axis=1)
    target = (_plastic_log_map(plastic_target, eps) - eps) / pl.output_scale
    pl_hist = _fit_anchored(pl.net, eps / pl.input_scale, target, epochs, batch, lr,
                            rng, "plastic")
    true_test = _plastic_log_map(plastic_target, eps_test)
    err = float(np.mean((pl.log_map(eps_test) - true_test) ** 2))
    denom = float(np.mean((true_test - eps_test) ** 2))
    pl_rmse = float(np.sqrt(err / denom)) if denom > 0 else float(np.sqrt(err))
    log.info("pretraining: elastic rel. RMSE %.4f, plastic RMSE %.4g", el_rmse, pl_rmse)
    return Material(el, pl), PretrainReport(el_rmse, pl_rmse, el_hist, pl_hist)


def _plastic_log_map(model, eps):
    if isinstance(model, Identity):
        return eps.copy()
    if isinstance(model, NeuralPlastic):
        return model.log_map(eps)
    return model._map(eps)[0]


# --------------------------------------------------------------------------
# material description files (JSON with sibling NMMAT01 weight files)

_ANALYTIC_ELASTIC = {"neo_hookean": NeoHookean, "stvk": StVK,
                     "fixed_corotated": FixedCorotated}
_ANALYTIC_NAMES = {v: k for k, v in _ANALYTIC_ELASTIC.items()}


def material_to_dict(material, directory=None, stem="material"):
    out = {}
    e = material.elastic
    if isinstance(e, NeuralElastic):
        fname = f"{stem}.elastic.nmmat"
        if directory is not None:
            save_mlp(os.path.join(directory, fname), e.net)
        out["elastic"] = {"type": "neural", "weights": fname,
                          "input_scale": e.input_scale, "output_scale": e.output_scale}
    else:
        out["elastic"] = {"type": _ANALYTIC_NAMES[type(e)], "mu": e.mu, "lam": e.lam}
    p = material.plastic
    if isinstance(p, NeuralPlastic):
        fname = f"{stem}.plastic.nmmat"
        if directory is not None:
            save_mlp(os.path.join(directory, fname), p.net)
        out["plastic"] = {"type": "neural", "weights": fname,
                          "input_scale": p.input_scale, "output_scale": p.output_scale}
    elif isinstance(p, Identity):
        out["plastic"] = {"type": "identity"}
    elif isinstance(p, VonMises):
        out["plastic"] = {"type": "von_mises", "yield_stress": p.yield_stress, "mu": p.mu}
    elif isinstance(p, DruckerPrager):
        out["plastic"] = {"type": "drucker_prager", "friction_angle": p.friction_angle,
                          "mu": p.mu, "lam": p.lam}
    return out


def material_from_dict(d, directory="."):
    e = d["elastic"]
    if e["type"] == "neural":
        elastic = NeuralElastic(load_mlp(os.path.join(directory, e["weights"])),
                                input_scale=e["input_scale"], output_scale=e["output_scale"])
    elif e["type"] in _ANALYTIC_ELASTIC:
        elastic = _ANALYTIC_ELASTIC[e["type"]](float(e["mu"]), float(e["lam"]))
    else:
        raise ValueError(f"unknown elastic model {e['type']!r}")
    p = d.get("plastic", {"type": "identity"})
    kind = p["type"]
    if kind == "neural":
        plastic = NeuralPlastic(load_mlp(os.path.join(directory, p["weights"])),
                                input_scale=p["input_scale"], output_scale=p["output_scale"])
    elif kind == "identity":
        plastic = Identity()
    elif kind == "von_mises":
        plastic = VonMises(float(p["yield_stress"]), float(p["mu"]))
    elif kind == "drucker_prager":
        plastic = DruckerPrager(float(p["friction_angle"]), float(p["mu"]), float(p["lam"]))
    else:
        raise ValueError(f"unknown plastic model {kind!r}")
    return Material(elastic, plastic)


def save_material(path, material):
    directory = os.path.dirname(os.path.abspath(path))
    stem = os.path.splitext(os.path.basename(path))[0]
    with open(path, "w") as fh:
        json.dump(material_to_dict(material, directory, stem), fh, indent=2)


def load_material(path):
    with open(path) as fh:
        return material_from_dict(json.load(fh), os.path.dirname(os.path.abspath(path)))


def save_material_adapter(directory, adapter, stem="adapter"):
    paths = {}
    for part in ("elastic", "plastic"):
        a = getattr(adapter, part)
        if a is not None:
            paths[part] = os.path.join(directory, f"{stem}.{part}.nmlora")
            save_adapter(paths[part], a)
    return paths


def load_material_adapter(directory, stem="adapter"):
    parts = {}
    for part in ("elastic", "plastic"):
        path = os.path.join(directory, f"{stem}.{part}.nmlora")
        parts[part] = load_adapter(path) if os.path.exists(path) else None
    if not any(parts.values()):
        raise FileNotFoundError(f"no adapter files '{stem}.*.nmlora' in {directory}")
    return MaterialAdapter(**parts)
