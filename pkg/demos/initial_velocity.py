"""Estimate a throw velocity from the first few observed frames.

The material is known here; only the rigid initial velocity is unknown.
Starting from rest, gradient descent through the simulator recovers it from
five frames (50 steps), which include the first floor contact.

    python demos/initial_velocity.py [--quick]
"""

import argparse

import numpy as np

from matground import fit, mpm, scene
from matground.constitutive import Material, StVK, VonMises


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true", help="small scene, few iterations")
    args = ap.parse_args()
    count, iterations = (600, 10) if args.quick else (None, 40)

    bench = scene.make_benchmark("bouncy-ball", count=count)
    mu, lam = scene.lame(1e5, 0.3)
    material = Material(StVK(mu, lam), VonMises(3e3, mu))
    observed = mpm.simulate(bench.particles, material, bench.config, 50, 10)

    v0, loss, log = fit.fit_initial_velocity(bench.particles, material, bench.config, observed,
                                             5, fit.FitConfig(iterations=iterations),
                                             guess=(0.0, 0.0, 0.0), lr=0.2)
    for rec in log.records[::5]:
        print(f"iteration {rec['iteration']:3d}  loss {rec['loss']:.3e}")
    truth = bench.particles.velocities[0]
    print("true v0     ", truth)
    print("recovered v0", np.round(v0, 4), f"(loss {loss:.2e})")


if __name__ == "__main__":
    main()
