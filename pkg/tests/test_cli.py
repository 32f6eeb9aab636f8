import json

import numpy as np
import pytest

from matground import cli, mpm, particle_gs
from matground.constitutive.material import load_material_adapter


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    gt = root / "gt"
    assert run("gen", "--preset", "bouncy-ball", "--count", 150, "--steps", 60,
               "--save-every", 10, "--out", gt) == 0
    prior = root / "prior"
    assert run("pretrain", "--preset", "bouncy-ball", "--samples", 2000, "--epochs", 3,
               "--out", prior) == 0
    return root


def test_gen_writes_its_artifacts(workspace):
    gt = workspace / "gt"
    for name in ("scene.json", "gt.nmtraj", "material.json", "cameras.json",
                 "resolved_config.json", "frames/frame_0000.ppm", "frames/frame_0006.ppm"):
        assert (gt / name).exists(), name
    traj = mpm.Trajectory.load(gt / "gt.nmtraj")
    assert len(traj) == 7 and traj.positions.shape[1] == 150
    assert "material" in json.loads((gt / "scene.json").read_text())


def test_gen_is_deterministic(workspace, tmp_path):
    assert run("gen", "--preset", "bouncy-ball", "--count", 150, "--steps", 60,
               "--save-every", 10, "--no-render", "--out", tmp_path) == 0
    assert (tmp_path / "gt.nmtraj").read_bytes() == (workspace / "gt" / "gt.nmtraj").read_bytes()


def test_snapshot_reruns_identically(workspace, tmp_path):
    snap = workspace / "gt" / "resolved_config.json"
    assert run("gen", "--config", snap, "--out", tmp_path) == 0
    assert (tmp_path / "gt.nmtraj").read_bytes() == (workspace / "gt" / "gt.nmtraj").read_bytes()
    assert (tmp_path / "frames" / "frame_0001.ppm").read_bytes() == \
        (workspace / "gt" / "frames" / "frame_0001.ppm").read_bytes()


def test_pretrain_outputs(workspace):
    report = json.loads((workspace / "prior" / "pretrain_report.json").read_text())
    assert np.isfinite(report["elastic_rmse"])
    assert (workspace / "prior" / "prior.json").exists()


def test_fit_sim_eval_pipeline(workspace, tmp_path, capsys):
    gt, prior = workspace / "gt", workspace / "prior" / "prior.json"
    out = tmp_path / "fit"
    assert run("fit", "--scene", gt / "scene.json", "--prior", prior, "--gt", gt / "gt.nmtraj",
               "--iterations", 2, "--lr", 1e-3, "--out", out) == 0
    for name in ("metrics.jsonl", "frames.tsv", "fitted.nmtraj", "resolved_config.json"):
        assert (out / name).exists(), name
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 2
    assert (out / "frames.tsv").read_text().startswith("frame\tchamfer")

    sim = tmp_path / "sim" / "t.nmtraj"
    assert run("sim", "--scene", gt / "scene.json", "--material", prior, "--adapter", out,
               "--steps", 60, "--save-every", 10, "--out", sim) == 0
    # sim with the fitted adapter reproduces the fit's final rollout
    assert np.array_equal(mpm.Trajectory.load(sim).positions,
                          mpm.Trajectory.load(out / "fitted.nmtraj").positions)

    capsys.readouterr()
    table = tmp_path / "eval.tsv"
    assert run("eval", "--pred", sim, "--gt", gt / "gt.nmtraj", "--out", table) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "frame\tchamfer_x1e4" and lines[-1].startswith("mean\t")
    assert len(lines) == 1 + 7 + 1
    assert table.read_text().splitlines() == lines


def test_zero_iterations_save_a_zero_adapter(workspace, tmp_path):
    gt, prior = workspace / "gt", workspace / "prior" / "prior.json"
    assert run("fit", "--scene", gt / "scene.json", "--prior", prior, "--gt", gt / "gt.nmtraj",
               "--iterations", 0, "--out", tmp_path) == 0
    ad = load_material_adapter(tmp_path)
    assert all(not B.any() for part in (ad.elastic, ad.plastic) for B in part.B)


def test_no_adapter_ablation_trains_the_base(workspace, tmp_path):
    gt, prior = workspace / "gt", workspace / "prior" / "prior.json"
    assert run("fit", "--scene", gt / "scene.json", "--prior", prior, "--gt", gt / "gt.nmtraj",
               "--iterations", 1, "--ablation", "no-adapter", "--out", tmp_path) == 0
    assert (tmp_path / "fitted_base.json").exists()
    assert not list(tmp_path.glob("adapter.*"))


def test_pixel_supervision(workspace, tmp_path):
    gt, prior = workspace / "gt", workspace / "prior" / "prior.json"
    assert run("fit", "--scene", gt / "scene.json", "--prior", prior, "--gt", gt / "gt.nmtraj",
               "--supervision", "pixels", "--camera", gt / "cameras.json",
               "--iterations", 1, "--out", tmp_path) == 0
    rec = json.loads((tmp_path / "metrics.jsonl").read_text().splitlines()[0])
    assert rec["loss"] > 0


def test_render_and_interp(workspace, tmp_path):
    gt, prior = workspace / "gt", workspace / "prior" / "prior.json"
    cam = tmp_path / "cam.json"
    particle_gs.save_cameras(cam, [particle_gs.default_camera(24)])
    assert run("render", "--traj", gt / "gt.nmtraj", "--camera", cam, "--out", tmp_path / "r") == 0
    frames = sorted((tmp_path / "r").glob("frame_*.ppm"))
    assert len(frames) == 7 and particle_gs.read_ppm(frames[0]).shape == (24, 24, 3)

    ad_dir = tmp_path / "ad"
    assert run("fit", "--scene", gt / "scene.json", "--prior", prior, "--gt", gt / "gt.nmtraj",
               "--iterations", 0, "--out", ad_dir) == 0
    assert run("interp", "--scene", gt / "scene.json", "--prior", prior, "--adapter", ad_dir,
               "--weights", "0,0.5,1", "--steps", 10, "--out", tmp_path / "i") == 0
    assert sorted(p.name for p in (tmp_path / "i").glob("*.nmtraj")) == \
        ["interp_w0.5.nmtraj", "interp_w0.nmtraj", "interp_w1.nmtraj"]


def test_bad_input_exit_codes(workspace, tmp_path, capsys):
    assert run("gen", "--preset", "nope", "--out", tmp_path) == 2
    assert "nope" in capsys.readouterr().err
    assert run("eval", "--pred", tmp_path / "missing.nmtraj", "--gt", tmp_path / "x") == 2
    bad = tmp_path / "bad.nmtraj"
    bad.write_bytes(b"not a trajectory")
    assert run("eval", "--pred", bad, "--gt", bad) == 2
    with pytest.raises(SystemExit) as exc:
        run("fit", "--scene", workspace / "gt" / "scene.json")
    assert exc.value.code == 2


def test_numerical_failure_exit_code(workspace, tmp_path):
    gt, prior = workspace / "gt", workspace / "prior" / "prior.json"
    assert run("fit", "--scene", gt / "scene.json", "--prior", prior, "--gt", gt / "gt.nmtraj",
               "--iterations", 3, "--lr", 1e6, "--out", tmp_path) == 3


def test_flags_override_the_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"steps": 7, "count": 9, "unrelated": 1}))
    args = cli.parse_args(["gen", "--config", str(cfg), "--steps", "3", "--out", "x"])
    assert (args.steps, args.count) == (3, 9)
