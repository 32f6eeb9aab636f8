"""Recover a plastic material from observed particle motion.

The observed ball is elastic-plastic (StVK plus a von Mises yield surface),
so it flattens on impact and stays down. The prior is a neural material
pretrained on a purely elastic Neo-Hookean law, so on its own it bounces
back. A low-rank adapter on the prior is fitted to the observed positions;
afterwards the adapter weight is swept from 0 (prior) to alpha/r (fitted)
to show the behaviour blending between the two.

    python demos/recover_material.py [--quick]

The full run takes about 10 minutes on one core.
"""

import argparse

import numpy as np

from matground import fit, mpm, scene
from matground.constitutive import Identity, Material, NeoHookean, StVK, VonMises, pretrain_base


def heights(traj):
    return np.round(traj.positions[:, :, 1].mean(axis=1), 3)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true", help="small scene, few iterations")
    args = ap.parse_args()
    count, steps, iterations = (600, 100, 3) if args.quick else (None, 200, 20)

    bench = scene.make_benchmark("bouncy-ball", count=count)
    mu, lam = scene.lame(1e5, 0.3)
    truth = Material(StVK(mu, lam), VonMises(3e3, mu))
    observed = mpm.simulate(bench.particles, truth, bench.config, steps, 10)
    print("observed heights", heights(observed))

    prior, report = pretrain_base(NeoHookean(mu, lam), Identity(),
                                  sample_count=5000 if args.quick else 50_000,
                                  epochs=5 if args.quick else 40)
    print(f"prior pretrained, elastic relative RMSE {report.elastic_rmse:.4f}")
    prior_traj = mpm.simulate(bench.particles, prior, bench.config, steps, 10)
    print("prior heights   ", heights(prior_traj))

    result = fit.fit_adapter(bench.particles, prior, bench.config, observed,
                             fit.FitConfig(iterations=iterations, lr=3e-3))
    print("fitted heights  ", heights(result.trajectory))
    before = fit.chamfer_curve(prior_traj, observed, 1e4).mean()
    after = fit.chamfer_curve(result.trajectory, observed, 1e4).mean()
    print(f"mean Chamfer x1e4: prior {before:.3f} -> fitted {after:.3f}")

    full = result.adapter.default_weight
    weights = np.linspace(0.0, full, 5)
    sweep = fit.interpolate_dynamics(prior, result.adapter, weights, bench.particles,
                                     bench.config, steps, 10)
    for w, traj in zip(weights, sweep):
        print(f"w={w:.2f}  final height {traj.positions[-1][:, 1].mean():.3f}")


if __name__ == "__main__":
    main()
