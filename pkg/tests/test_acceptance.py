"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N PASS|FAIL`` line (collected again in
the terminal summary). The recovery fit is shared by the recovery,
generalization and interpolation checks through module-scoped fixtures.
"""

import time

import numpy as np
import pytest

from matground import diff, fit, mpm, particle_gs as gs, scene
from matground.constitutive import (DruckerPrager, FixedCorotated, Identity, Material,
                                    MaterialAdapter, NeoHookean, StVK, VonMises,
                                    compose_material, pretrain_base)

from conftest import Criterion, gradient_scene, neural_material, random_F, random_rotations

# recovery fit settings; see the fixture below
RECOVERY_ITERATIONS = 20
RECOVERY_LR = 3e-3
YIELD_STRESS = 3e3
E, NU = 1e5, 0.3


def _momentum(ps, v=None):
    return (ps.mass[:, None] * (ps.velocities if v is None else v)).sum(axis=0)


# --------------------------------------------------------------------------
# shared ground truth, prior and fit


@pytest.fixture(scope="module")
def ground_truth():
    t0 = time.perf_counter()
    bench = scene.make_benchmark("bouncy-ball")
    mu, lam = scene.lame(E, NU)
    material = Material(StVK(mu, lam), VonMises(YIELD_STRESS, mu))
    traj = mpm.simulate(bench.particles, material, bench.config, 200, 10)
    return {"bench": bench, "material": material, "traj": traj,
            "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def prior():
    t0 = time.perf_counter()
    mu, lam = scene.lame(E, NU)
    base, report = pretrain_base(NeoHookean(mu, lam), Identity())
    return {"material": base, "report": report, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def recovery(ground_truth, prior):
    t0 = time.perf_counter()
    bench, gt = ground_truth["bench"], ground_truth["traj"]
    base = prior["material"]
    prior_traj = mpm.simulate(bench.particles, base, bench.config, 200, 10)
    result = fit.fit_adapter(bench.particles, base, bench.config, gt,
                             fit.FitConfig(iterations=RECOVERY_ITERATIONS, lr=RECOVERY_LR))
    seconds = time.perf_counter() - t0 + ground_truth["seconds"] + prior["seconds"]
    return {"prior_traj": prior_traj, "result": result, "seconds": seconds}


# --------------------------------------------------------------------------
# 1


def test_conservation_suite():
    with Criterion(1, "conservation", 60) as c:
        rng = np.random.default_rng(101)
        cfg = scene.SceneConfig(n=32, gravity=(0.0, 0.0, 0.0))
        worst_m = worst_p = 0.0
        for _ in range(100):
            count = int(rng.integers(1, 400))
            lo = 0.04
            ps = scene.init_rest_state(lo + rng.random((count, 3)) * (1 - 2 * lo),
                                       rng.uniform(100, 3000, count), 1e-3)
            ps.velocities[:] = rng.normal(size=(count, 3))
            grid = mpm.p2g(ps, rng.normal(size=(count, 3, 3)), cfg)
            worst_m = max(worst_m, abs(grid.mass.sum() - ps.mass.sum()) / ps.mass.sum())
            p = _momentum(ps)
            worst_p = max(worst_p, np.abs(grid.momentum.sum(axis=0) - p).max() / np.abs(p).max())
        c.check(worst_m <= 1e-12, f"P2G mass rel. err {worst_m:.1e} <= 1e-12")
        c.check(worst_p <= 1e-12, f"P2G momentum rel. err {worst_p:.1e} <= 1e-12")

        worst_roll = 0.0
        for seed, mat in enumerate([Material(NeoHookean(2e3, 2e3)),
                                    Material(StVK(2e3, 2e3), VonMises(50.0, 2e3)),
                                    # an untrained plastic network can crush F, so elastic only
                                    Material(neural_material(2, sensitive=True).elastic)]):
            shape = scene.Sphere((0.5, 0.5, 0.5), 0.08)
            ps = scene.init_rest_state(scene.sample_volume(shape, 500, seed), 1000.0,
                                       shape.volume())
            # translation plus a random spin keeps the body intact
            spin = rng.normal(0, 1.0, 3)
            ps.velocities[:] = [0.2, -0.1, 0.05] + np.cross(spin, ps.positions - 0.5)
            traj = mpm.simulate(ps, mat, scene.SceneConfig(n=16, gravity=(0, 0, 0)), 100, 100)
            p0 = _momentum(ps)
            drift = np.linalg.norm(_momentum(ps, traj.velocities[-1]) - p0) / np.linalg.norm(p0)
            worst_roll = max(worst_roll, drift)
        c.check(worst_roll <= 1e-10, f"100-step momentum drift {worst_roll:.1e} <= 1e-10")


# --------------------------------------------------------------------------
# 2


def test_constitutive_suite():
    with Criterion(2, "constitutive", 60) as c:
        rng = np.random.default_rng(202)
        models = {"neo-hookean": NeoHookean(1.3, 0.7), "stvk": StVK(1.3, 0.7),
                  "fixed-corotated": FixedCorotated(1.3, 0.7),
                  "neural": neural_material(5, adapter=False).elastic,
                  "neural+adapter": neural_material(5).elastic}
        worst_obj = worst_rest = 0.0
        for model in models.values():
            for _ in range(20):
                F = random_F(rng, 50, 0.2)
                R = random_rotations(rng, 50)
                lhs = model.stress(R @ F)
                rhs = R @ model.stress(F) @ np.swapaxes(R, 1, 2)
                worst_obj = max(worst_obj, np.abs(lhs - rhs).max() / np.abs(rhs).max())
            worst_rest = max(worst_rest, np.abs(model.stress(np.eye(3)[None])).max())
        c.check(worst_obj <= 1e-6, f"objectivity rel. err {worst_obj:.1e} <= 1e-6")
        c.check(worst_rest <= 1e-8, f"|tau(I)| {worst_rest:.1e} <= 1e-8")

        vm, dp = VonMises(0.05, 1.0), DruckerPrager(30.0, 1.0, 1.0)
        F = random_F(rng, 2000, 0.25)
        vm1, dp1 = vm.project(F), dp.project(F)
        v_vm, v_dp = vm.violation(vm1).max(), dp.cone_violation(dp1).max()
        i_vm = np.abs(vm.project(vm1) - vm1).max()
        i_dp = np.abs(dp.project(dp1) - dp1).max()
        c.check(v_vm <= 1e-8, f"von Mises violation {v_vm:.1e} <= 1e-8")
        c.check(v_dp <= 1e-8, f"Drucker-Prager violation {v_dp:.1e} <= 1e-8")
        c.check(max(i_vm, i_dp) <= 1e-10, f"idempotence {max(i_vm, i_dp):.1e} <= 1e-10")


# --------------------------------------------------------------------------
# 3


def test_adapter_neutrality(ground_truth, prior):
    with Criterion(3, "adapter neutrality", 60) as c:
        bench = ground_truth["bench"]
        base = prior["material"]
        ps = bench.particles.subset(np.arange(0, len(bench.particles), 4))
        ref = mpm.simulate(ps, base, bench.config, 200, 10)
        zero = compose_material(base, MaterialAdapter.init(base, seed=1))
        trained = MaterialAdapter.init(base, seed=2)
        rng = np.random.default_rng(3)
        for part in (trained.elastic, trained.plastic):
            for B in part.B:
                B[:] = rng.normal(0, 0.05, B.shape)
        off = compose_material(base, trained, 0.0)
        for name, mat in (("zero adapter", zero), ("w = 0", off)):
            t = mpm.simulate(ps, mat, bench.config, 200, 10)
            err = max(np.abs(t.positions - ref.positions).max(), np.abs(t.F - ref.F).max(),
                      np.abs(t.velocities - ref.velocities).max())
            c.check(err <= 1e-12, f"{name} max deviation {err:.1e} <= 1e-12")


# --------------------------------------------------------------------------
# 4


def test_gradient_correctness():
    with Criterion(4, "gradient correctness", 300) as c:
        ps, cfg, mat, loss, rng = gradient_scene()
        _, k20 = diff.grad_rollout(loss, ps, mat, cfg, 10, checkpoint_every=20)
        _, k1 = diff.grad_rollout(loss, ps, mat, cfg, 10, checkpoint_every=1)
        coords = diff.sample_coordinates(mat, rng, 30)
        fd = diff.finite_diff_oracle(loss, ps, mat, cfg, 10, coords, h=1e-5)
        err = diff.relative_error(diff.adjoint_at(k20, coords), fd).max()
        n_theta = sum(1 for x in coords if x[0] == "param")
        c.check(n_theta >= 20 and len(coords) - n_theta == 3,
                f"{n_theta} adapter + {len(coords) - n_theta} v0 coordinates")
        c.check(err <= 1e-4, f"adjoint vs central FD max rel. err {err:.1e} <= 1e-4")
        ck = max(max(np.abs(k20.params[k] - k1.params[k]).max() for k in k20.params),
                 np.abs(k20.velocities - k1.velocities).max())
        c.check(ck <= 1e-12, f"k=1 vs k=20 {ck:.1e} <= 1e-12")


# --------------------------------------------------------------------------
# 5


def test_binding_suite():
    with Criterion(5, "binding", 10) as c:
        q = gs.chi2_quantile(0.95, 3)
        c.check(abs(q - 7.8147) <= 1e-3, f"chi2 quantile {q:.6f} vs 7.8147")
        bench = scene.make_benchmark("rubber-pawn-analog", count=2000)
        rng = np.random.default_rng(5)
        # kernels near the surface plus a few stray ones to force the second pass
        centers = bench.particles.positions[rng.choice(2000, 300, replace=False)]
        centers = np.concatenate([centers + rng.normal(0, 0.004, centers.shape),
                                  [[0.2, 0.6, 0.2], [0.8, 0.5, 0.7]]])
        ks = scene.synth_kernels(centers, 0.006)
        ks.covariances[:] = ks.covariances * rng.uniform(0.5, 2.0, (len(ks), 1, 1))
        merged, b, spawned = gs.ensure_coverage(ks, bench.particles)
        c.check(len(spawned) >= 2, f"{len(spawned)} particles spawned")
        c.check(np.all(b.row_counts >= 1), "every row nonempty")
        dense = b.matrix.toarray()
        sums = np.abs(dense.sum(axis=1) - 1).max()
        c.check(sums <= 1e-12, f"row sums off by {sums:.1e}")
        rows, cols = np.nonzero(np.ones_like(dense, bool))
        d = gs.mahalanobis(ks, merged.positions, rows, cols).reshape(dense.shape)
        c.check(np.all(d[dense > 0] <= q), "bound pairs pass the chi2 test")
        c.check(np.all(d[dense == 0] > q), "unbound pairs fail it")


# --------------------------------------------------------------------------
# 6


def test_renderer_suite():
    with Criterion(6, "renderer", 60) as c:
        cam = gs.Orthographic((0.5, 0.5, 0.5), 1.0, 32, 32)
        c1, c2 = np.array([0.9, 0.1, 0.2]), np.array([0.1, 0.7, 0.3])
        px = [0.5 + 0.5 / 32, 0.5 - 0.5 / 32]
        ks = scene.synth_kernels([px + [0.6], px + [0.4]], 0.03)
        ks.opacities[:] = [1.0, 0.5]
        ks.colors[:] = [c2, c1]
        img = gs.splat(ks, cam, (0.3, 0.3, 0.3))
        e = np.abs(img[16, 16] - (0.5 * c1 + 0.5 * c2)).max()
        c.check(e <= 1e-12, f"two-kernel compositing err {e:.1e} <= 1e-12")

        rng = np.random.default_rng(11)
        ks = scene.synth_kernels(0.4 + 0.2 * rng.random((5, 3)), 0.06)
        ks.colors[:] = rng.random((5, 3))
        ks.covariances[:] = ks.covariances * (0.5 + rng.random((5, 1, 1)))
        ks.opacities[:] = 0.4 + 0.5 * rng.random(5)
        target = gs.splat(scene.synth_kernels(0.45 + 0.1 * rng.random((4, 3)), 0.08), cam)
        image, cache = gs.splat(ks, cam, cache=True)
        cb, _ = gs.splat_vjp(cache, gs.image_loss_grad(image, target))
        h, worst = 1e-6, 0.0
        for k in range(len(ks)):
            for a in range(3):
                kp, km = ks.copy(), ks.copy()
                kp.centers[k, a] += h
                km.centers[k, a] -= h
                fd = (gs.image_loss(gs.splat(kp, cam), target)
                      - gs.image_loss(gs.splat(km, cam), target)) / (2 * h)
                worst = max(worst, abs(fd - cb[k, a]) / max(abs(fd), abs(cb[k, a]), 1e-8))
        c.check(worst <= 1e-3, f"centre gradient vs FD max rel. err {worst:.1e} <= 1e-3")
        lo, hi = 1.0, 0.0
        for _ in range(20):
            ks = scene.synth_kernels(0.3 + 0.4 * rng.random((30, 3)), 0.05)
            ks.colors[:] = rng.random((30, 3))
            ks.opacities[:] = rng.random(30)
            im = gs.splat(ks, cam, rng.random(3))
            lo, hi = min(lo, im.min()), max(hi, im.max())
        c.check(lo >= 0.0 and hi <= 1.0, f"pixels within [{lo:.3f}, {hi:.3f}]")


# --------------------------------------------------------------------------
# 7


def test_recovery_experiment(ground_truth, prior, recovery):
    with Criterion(7, "recovery", 30 * 60, earlier_s=recovery["seconds"]) as c:
        rmse = prior["report"].elastic_rmse
        c.check(rmse <= 0.02, f"pretraining RMSE {100 * rmse:.2f}% <= 2%")
        gt = ground_truth["traj"]
        res = recovery["result"]
        c.check(len(res.log.records) <= 300, f"{len(res.log.records)} iterations <= 300")
        c_prior = fit.chamfer_curve(recovery["prior_traj"], gt, 1e4).mean()
        c_fit = fit.chamfer_curve(res.trajectory, gt, 1e4).mean()
        c.check(c_fit <= 0.5 * c_prior,
                f"Chamfer x1e4 fitted {c_fit:.3f} vs prior {c_prior:.3f} "
                f"(ratio {c_fit / c_prior:.3f} <= 0.5)")


# --------------------------------------------------------------------------
# 8


def test_initial_velocity_recovery(ground_truth):
    with Criterion(8, "initial velocity", 5 * 60) as c:
        bench = ground_truth["bench"]
        truth = np.array([0.0, -1.92, 0.0])
        start = bench.particles.with_state(velocities=np.zeros_like(bench.particles.velocities))
        v0, _, log = fit.fit_initial_velocity(start, ground_truth["material"], bench.config,
                                              ground_truth["traj"], 5,
                                              fit.FitConfig(iterations=V0_ITERATIONS),
                                              guess=(0.0, 0.0, 0.0), lr=V0_LR)
        err = np.abs(v0 - truth)
        c.check(np.all(err <= 0.01 * np.abs(truth).max()),
                f"v0 {np.round(v0, 5).tolist()}, per-component error {err.max():.2e} "
                f"<= 1% of |v0| ({len(log.records)} iterations)")


V0_ITERATIONS = 40
V0_LR = 0.2


# --------------------------------------------------------------------------
# 9


def test_generalization(ground_truth, prior, recovery):
    with Criterion(9, "generalization", 15 * 60) as c:
        bench = ground_truth["bench"]
        shape = scene.Box((0.42, 0.2, 0.42), (0.58, 0.36, 0.58))
        pts = scene.sample_volume(shape, len(bench.particles), seed=9)
        ps = scene.init_rest_state(pts, 1000.0, shape.volume())
        ps.velocities[:] = [0.0, -1.92, 0.0]
        gt = mpm.simulate(ps, ground_truth["material"], bench.config, 400, 10)
        base_traj, base_ok = fit.transfer(prior["material"], ps, bench.config, 400, 10)
        fitted, ok = fit.transfer(recovery["result"].material, ps, bench.config, 400, 10)
        c.check(ok.ok, f"400 steps, min det F {ok.min_det:.3f}")
        c_prior = fit.chamfer_curve(base_traj, gt, 1e4).mean()
        c_fit = fit.chamfer_curve(fitted, gt, 1e4).mean()
        c.check(c_fit <= 0.8 * c_prior,
                f"Chamfer x1e4 transferred {c_fit:.3f} vs prior {c_prior:.3f} "
                f"({100 * (1 - c_fit / c_prior):.1f}% lower, need >= 20%)")


# --------------------------------------------------------------------------
# 10


def test_interpolation_endpoints(ground_truth, prior, recovery):
    with Criterion(10, "interpolation endpoints", 5 * 60) as c:
        bench = ground_truth["bench"]
        adapter = recovery["result"].adapter
        full = adapter.default_weight
        weights = [0.0, 0.25 * full, 0.5 * full, 0.75 * full, full]
        trajs = fit.interpolate_dynamics(prior["material"], adapter, weights, bench.particles,
                                         bench.config, 200, 10)
        c.check(len(trajs) == 5 and all(np.all(np.isfinite(t.positions)) for t in trajs),
                "5-point sweep completed")
        c.check(np.array_equal(trajs[0].positions, recovery["prior_traj"].positions),
                "w = 0 equals the prior")
        c.check(np.array_equal(trajs[-1].positions, recovery["result"].trajectory.positions),
                "w = alpha/r equals the fitted rollout")
        heights = [float(t.positions[-1][:, 1].mean()) for t in trajs]
        c.check(True, "final heights " + ", ".join(f"{h:.3f}" for h in heights))


# --------------------------------------------------------------------------
# 11


def test_bounce():
    with Criterion(11, "bounce", 2 * 60) as c:
        bench = scene.make_benchmark("bouncy-ball")
        traj = mpm.simulate(bench.particles, bench.material, bench.config, 400, 5)
        h = traj.positions[:, :, 1].mean(axis=1)
        lowest = int(np.argmin(h[: len(h) // 2 + 1]))
        drop = h[0] - h[lowest]
        later = h[lowest:]
        peaks = [i for i in range(1, len(later) - 1) if later[i] >= later[i - 1] and later[i] > later[i + 1]]
        rebound = max((later[i] - h[lowest] for i in peaks), default=0.0)
        c.check(0 < lowest < len(h) - 1, f"floor contact minimum at frame {lowest}")
        c.check(bool(peaks), "later local maximum exists")
        c.check(rebound >= 0.3 * drop,
                f"rebound {rebound:.4f} >= 30% of drop {drop:.4f} ({100 * rebound / drop:.0f}%)")
