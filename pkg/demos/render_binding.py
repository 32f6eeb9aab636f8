"""Bind Gaussian kernels to particles and carry them through a squash.

A block of particles is squashed by a prescribed deformation. Kernels are
bound to nearby particles with a chi-square test on the Mahalanobis
distance. A kernel that catches no particle (one stray kernel is added on
purpose) gets a particle spawned at its centre. The kernels then follow the particles' motion and local deformation. Before and
after images are written as PPM files to ``out/``.

    python demos/render_binding.py
"""

from pathlib import Path

import numpy as np

from matground import particle_gs as gs, scene


def main():
    shape = scene.Box((0.4, 0.4, 0.4), (0.6, 0.6, 0.6))
    ps = scene.build_object(shape, 2000, seed=3)
    centres = np.vstack([ps.positions[::6], [[0.65, 0.5, 0.5]]])
    kernels = scene.synth_kernels(centres, 0.012)
    ps, binding, spawned = gs.ensure_coverage(kernels, ps)
    print(f"{len(kernels)} kernels, {len(spawned)} particle(s) spawned, "
          f"{binding.matrix.nnz} kernel-particle bonds")

    # squash vertically about the block centre, bulge sideways
    F = np.diag([1.2, 0.7, 1.2])
    centre = np.array([0.5, 0.5, 0.5])
    moved = centre + (ps.positions - centre) @ F.T
    deformed = gs.deform_kernels(kernels, binding, ps.positions, moved,
                                 np.broadcast_to(F, (len(ps), 3, 3)), kernels.covariances)

    out = Path(__file__).with_name("out")
    out.mkdir(exist_ok=True)
    cam = gs.Orthographic((0.5, 0.5, 0.5), 0.6, 96, 96)
    gs.write_ppm(out / "binding_before.ppm", gs.splat(kernels, cam))
    gs.write_ppm(out / "binding_after.ppm", gs.splat(deformed, cam))
    print(f"images in {out}")


if __name__ == "__main__":
    main()
