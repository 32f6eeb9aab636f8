"""Drop the bouncy ball and watch it come back up.

Prints the mean particle height every few frames and renders the first,
lowest and last frames to PPM images next to this script (``out/``).

    python demos/bounce.py [--quick]
"""

import argparse
from pathlib import Path

import numpy as np

from matground import mpm, particle_gs as gs, scene


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true", help="fewer particles and steps")
    args = ap.parse_args()
    count, steps = (800, 200) if args.quick else (None, 400)

    bench = scene.make_benchmark("bouncy-ball", count=count)
    print(f"{len(bench.particles)} particles, grid {bench.config.n}^3, dt {bench.config.dt}")
    traj = mpm.simulate(bench.particles, bench.material, bench.config, steps, 10)

    heights = traj.positions[:, :, 1].mean(axis=1)
    for k in range(0, len(traj), 4):
        bar = "#" * int(heights[k] * 100)
        print(f"frame {k:3d}  h={heights[k]:.3f}  {bar}")
    low = int(np.argmin(heights))
    print(f"lowest at frame {low}; rebound peak {heights[low:].max():.3f}")

    out = Path(__file__).with_name("out")
    out.mkdir(exist_ok=True)
    cam = gs.default_camera(96)
    kernels = gs.kernels_from_positions(traj.positions[0])
    frames = gs.render_trajectory(traj.positions[[0, low, -1]], traj.F[[0, low, -1]], [cam],
                                  kernels=kernels)
    for name, views in zip(("start", "lowest", "end"), frames):
        gs.write_ppm(out / f"bounce_{name}.ppm", views[0])
    print(f"images in {out}")


if __name__ == "__main__":
    main()
