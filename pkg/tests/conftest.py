import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from matground import scene
from matground.constitutive import (Material, MaterialAdapter, NeuralElastic, NeuralPlastic,
                                    compose_material)
from matground.constitutive.material import ELASTIC_SIZES, PLASTIC_SIZES
from matground.constitutive.mlp import Mlp

settings.register_profile("matground", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("matground")


def random_F(rng, n, scale=0.15):
    """Random deformation gradients with positive determinant."""
    F = np.eye(3) + rng.normal(0.0, scale, (n, 3, 3))
    flip = np.linalg.det(F) <= 0
    F[flip, :, 0] *= -1
    return F


def random_rotations(rng, n):
    Q, R = np.linalg.qr(rng.normal(size=(n, 3, 3)))
    Q = Q * np.sign(np.einsum("nii->ni", R))[:, None, :]
    Q[np.linalg.det(Q) < 0, :, 0] *= -1
    return Q


def neural_material(seed=0, adapter=True, sensitive=False):
    """Untrained neural material; ``sensitive`` scales outputs so tiny scenes respond."""
    rng = np.random.default_rng(seed)
    el = NeuralElastic(Mlp.init(ELASTIC_SIZES, rng), input_scale=0.1,
                       output_scale=2e4 if sensitive else 1.0)
    pl = NeuralPlastic(Mlp.init(PLASTIC_SIZES, rng), input_scale=0.1,
                       output_scale=0.05 if sensitive else 0.1)
    base = Material(el, pl)
    if not adapter:
        return base
    ad = MaterialAdapter.init(base, seed=seed + 1)
    for part in (ad.elastic, ad.plastic):
        for B in part.B:
            B[:] = rng.normal(0.0, 0.1, B.shape)
    return compose_material(base, ad)


def cluster(rng, count=16, center=(0.5, 0.6, 0.5), size=0.12, velocity_scale=0.3,
            strain=0.05):
    pos = np.asarray(center) + (rng.random((count, 3)) - 0.5) * size
    ps = scene.init_rest_state(pos, 1000.0, size ** 3)
    ps.velocities[:] = rng.normal(0.0, velocity_scale, (count, 3))
    ps.F[:] = np.eye(3) + rng.normal(0.0, strain, (count, 3, 3))
    return ps


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gradient_scene(seed=1, steps=10):
    """The 16-particle, 16^3-grid gradient-check scene with a noisy self-reference."""
    from matground import diff, mpm
    rng = np.random.default_rng(seed)
    ps = cluster(rng, 16, center=(0.5, 0.6, 0.5))
    el = NeuralElastic(Mlp.init(ELASTIC_SIZES, rng), input_scale=0.1, output_scale=2e4)
    pl = NeuralPlastic(Mlp.init(PLASTIC_SIZES, rng), input_scale=0.1, output_scale=0.05)
    base = Material(el, pl)
    ad = MaterialAdapter.init(base, seed=3)
    for part in (ad.elastic, ad.plastic):
        for B in part.B:
            B[:] = rng.normal(0.0, 0.1, B.shape)
    mat = compose_material(base, ad)
    cfg = scene.SceneConfig(n=16)
    ref = mpm.simulate(ps, mat, cfg, steps, save_every=5)
    ref.positions[1:] += rng.normal(0.0, 0.01, ref.positions[1:].shape)
    return ps, cfg, mat, diff.ParticleMSE(ref), rng


# --------------------------------------------------------------------------
# acceptance reporting

ACCEPTANCE_LINES = []


class Criterion:
    """Collects the checks of one acceptance criterion and reports a single line.

    Used as a context manager; an exception inside the block or any failed
    check (including the runtime limit) marks the criterion FAIL.
    """

    def __init__(self, number, title, limit_s, earlier_s=0.0):
        # earlier_s: time already spent in fixtures that belong to this criterion
        self.number, self.title, self.limit_s = number, title, limit_s
        self.earlier_s = earlier_s
        self.notes, self.failed = [], []
        self.start = time.perf_counter()

    def check(self, ok, what):
        ok = bool(ok)
        self.notes.append(what if ok else f"{what} [FAILED]")
        if not ok:
            self.failed.append(what)
        return ok

    def __enter__(self):
        return self

    def __exit__(self, kind, err, tb):
        elapsed = time.perf_counter() - self.start + self.earlier_s
        if kind is not None:
            self.notes.append(f"{kind.__name__}: {err} [FAILED]")
            self.failed.append(kind.__name__)
        else:
            self.check(elapsed <= self.limit_s, f"runtime {elapsed:.1f} s <= {self.limit_s:g} s")
        status = "PASS" if not self.failed else "FAIL"
        line = f"criterion {self.number:2d} {status}  {self.title}: " + "; ".join(self.notes)
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
        if kind is None and self.failed:
            raise AssertionError(line)
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
