import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from matground import scene
from matground.errors import CatalogError, DomainError


def test_sphere_sampling_stays_inside():
    pts = scene.sample_volume(scene.Sphere((0.5, 0.5, 0.5), 0.1), 1000, seed=0)
    assert pts.shape == (1000, 3)
    assert np.all(np.linalg.norm(pts - 0.5, axis=1) <= 0.1)


def test_box_sampling_is_uniform_per_octant():
    pts = scene.sample_volume(scene.Box((0.4, 0.4, 0.4), (0.6, 0.6, 0.6)), 8000, seed=3)
    octant = ((pts > 0.5) * [4, 2, 1]).sum(axis=1)
    counts = np.bincount(octant, minlength=8)
    assert np.all(np.abs(counts - 1000) <= 50), counts


@given(st.integers(1, 400), st.integers(0, 2**31 - 1))
def test_sampling_is_deterministic(count, seed):
    shape = scene.Sphere((0.5, 0.4, 0.5), 0.08)
    a = scene.sample_volume(shape, count, seed)
    b = scene.sample_volume(shape, count, seed)
    assert np.array_equal(a, b) and len(a) == count


def test_sampling_rejects_shapes_outside_the_safe_margin():
    with pytest.raises(DomainError):
        scene.sample_volume(scene.Sphere((0.5, 0.05, 0.5), 0.1), 100)


def test_rest_state_volume_and_mass():
    shape = scene.Sphere((0.5, 0.5, 0.5), 0.1)
    ps = scene.init_rest_state(scene.sample_volume(shape, 1000), 1000.0, shape.volume())
    assert ps.volume[0] == pytest.approx(4.18879e-6, rel=1e-5)
    assert ps.mass[0] == pytest.approx(4.18879e-3, rel=1e-5)
    assert np.array_equal(ps.F, np.tile(np.eye(3), (1000, 1, 1)))
    assert not ps.velocities.any()


def test_rest_state_per_particle_density():
    rho = np.r_[np.full(50, 500.0), np.full(50, 2000.0)]
    ps = scene.init_rest_state(np.random.default_rng(0).random((100, 3)), rho, 1e-3)
    assert ps.mass[60] / ps.mass[10] == pytest.approx(4.0)


@given(st.lists(st.floats(100.0, 5000.0), min_size=1, max_size=50))
def test_mass_bookkeeping(rhos):
    n = len(rhos)
    ps = scene.init_rest_state(np.full((n, 3), 0.5), np.array(rhos), 1e-3)
    assert np.array_equal(ps.mass, ps.density * ps.volume)


def test_synth_kernels():
    ks = scene.synth_kernels([[0.5, 0.5, 0.5]], 0.01)
    np.testing.assert_allclose(ks.covariances[0], 1e-4 * np.eye(3))
    with pytest.raises(ValueError):
        scene.synth_kernels([[0.5, 0.5, 0.5]], 0.0)


def test_bouncy_ball_preset():
    b = scene.make_benchmark("bouncy-ball", count=500)
    assert b.config.dt == 1e-3
    np.testing.assert_array_equal(b.particles.velocities, np.tile([0, -1.92, 0], (500, 1)))
    lo, hi = b.shape.bounds()
    assert 0.5 * (lo + hi)[1] == pytest.approx(0.28)


def test_clay_cat_preset():
    preset = scene.get_preset("clay-cat-analog")
    assert preset.dt == 5e-4 and preset.velocity == (0, -2.11, 0)


@pytest.mark.parametrize("name", scene.PRESET_NAMES)
def test_every_preset_starts_at_rest_inside_the_margin(name):
    b = scene.make_benchmark(name, count=300)
    lo, hi = b.shape.bounds()
    scene.check_safe_margin(lo, hi, b.config.n)
    assert np.array_equal(b.particles.F, np.tile(np.eye(3), (300, 1, 1)))


def test_unknown_preset():
    with pytest.raises(CatalogError):
        scene.make_benchmark("nope")


def test_scene_file_round_trip(tmp_path):
    cfg = scene.SceneConfig(n=24, dt=5e-4, boundary=scene.Boundary(0.1, "sticky", 0.3))
    objects = [{"shape": scene.Sphere((0.5, 0.3, 0.5), 0.08), "count": 200,
                "velocity": (0.1, -1.0, 0.0), "seed": 4}]
    path = tmp_path / "scene.json"
    scene.save_scene(path, cfg, objects, {"elastic": {"type": "stvk", "mu": 1, "lam": 1}})
    cfg2, ps, objs = scene.load_scene(path)
    assert cfg2 == cfg
    assert len(ps) == 200 and np.allclose(ps.velocities, [0.1, -1.0, 0.0])
    assert json.loads(path.read_text())["material"]["elastic"]["type"] == "stvk"


def test_points_round_trip(tmp_path):
    pts = np.random.default_rng(0).random((17, 3))
    scene.save_points(tmp_path / "p.bin", pts)
    np.testing.assert_allclose(scene.load_points(tmp_path / "p.bin"), pts, atol=1e-7)


def test_config_validation():
    with pytest.raises(ValueError):
        scene.SceneConfig(n=4)
    with pytest.raises(ValueError):
        scene.SceneConfig(transfer="flip")
    with pytest.raises(ValueError):
        scene.Boundary(mode="bouncy")
