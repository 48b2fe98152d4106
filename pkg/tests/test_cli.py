import csv
import json
import os

import numpy as np
import pytest

from decompnerf.cli import main
from decompnerf.dataio import read_dataset, read_pfm


CONFIG = """
steps = 12
warmup_steps = 4
n_rand = 16
n_p = 6
precision = float64
latent_dim = 8
n_s = 8
n_tokens = 2
m_loc = 3
m_dir = 2
m_time = 2
hidden = 12
depth = 2
color_hidden = 8
occ_hidden = 8
occ_depth = 2
log_every = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset + short training run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    spec = {
        "name": "cli-toy",
        "width": 16,
        "height": 12,
        "fov_deg": 50.0,
        "near": 1.5,
        "far": 9.0,
        "camera_path": [
            {"eye": [0.0, -4.0, 1.6], "target": [0.0, 0.0, 0.3]} for _ in range(3)
        ],
        "actors": [
            {
                "kind": "sphere",
                "size": [0.5],
                "albedo": [0.9, 0.2, 0.2],
                "start": [-0.4, 0.0, 0.5],
                "velocity": [0.25, 0.0, 0.0],
            }
        ],
    }
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(spec))
    data = root / "data"
    assert main(["gen-scene", "--spec", str(spec_path), "--out", str(data)]) == 0
    cfg_path = root / "train.cfg"
    cfg_path.write_text(CONFIG)
    run = root / "run"
    assert main([
        "train", "--data", str(data), "--config", str(cfg_path), "--out", str(run)
    ]) == 0
    return {"root": root, "data": data, "cfg": cfg_path, "run": run,
            "ckpt": run / "checkpoint.npz"}


def test_gen_scene_builtin(tmp_path):
    out = tmp_path / "orbit"
    assert main(["gen-scene", "--spec", "orbit-sphere", "--out", str(out)]) == 0
    frames, near, far = read_dataset(out)
    assert len(frames) == 10 and near == 2.0


def test_gen_scene_unknown_spec(tmp_path):
    assert main(["gen-scene", "--spec", "nope", "--out", str(tmp_path / "x")]) == 2


def test_train_produces_artifacts(workspace):
    assert (workspace["run"] / "metrics.csv").exists()
    assert workspace["ckpt"].exists()
    rows = list(csv.reader(open(workspace["run"] / "metrics.csv")))
    assert rows[0][:3] == ["step", "phase", "rec"]
    assert len(rows) > 5


def test_train_missing_data(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_train_bad_config(workspace, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("bogus = 1\n")
    code = main([
        "train", "--data", str(workspace["data"]), "--config", str(bad),
        "--out", str(tmp_path / "o"),
    ])
    assert code == 2


def test_render_layers(workspace, tmp_path):
    out = tmp_path / "render"
    code = main([
        "render", "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"]),
        "--frame", "1", "--out", str(out),
        "--layers", "composite,static,dynamic,depth,tee",
    ])
    assert code == 0
    comp = read_pfm(out / "frame0001_composite.pfm")
    assert comp.shape == (12, 16, 3)
    assert (out / "frame0001_composite.png").exists()
    depth = read_pfm(out / "frame0001_depth.pfm")
    assert depth.shape == (12, 16)
    assert not (out / "frame0001_depth.png").exists()  # scalar layers skip PNG


def test_render_static_layer_time_invariant(workspace, tmp_path):
    # render the static layer at two time indices through the same camera
    outs = []
    for i in ("0", "2"):
        out = tmp_path / f"r{i}"
        code = main([
            "render", "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"]),
            "--frame", i, "--camera", "0", "--out", str(out), "--layers", "static",
        ])
        assert code == 0
        outs.append(read_pfm(out / f"frame{int(i):04d}_static.pfm"))
    assert np.array_equal(outs[0], outs[1])


def test_render_rejects_bad_inputs(workspace, tmp_path):
    base = ["render", "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"])]
    assert main(base + ["--frame", "99", "--out", str(tmp_path / "a")]) == 2
    assert main(base + ["--frame", "0", "--out", str(tmp_path / "b"),
                        "--layers", "bogus"]) == 2


def test_render_repeat_byte_identical(workspace, tmp_path):
    blobs = []
    for sub in ("x", "y"):
        out = tmp_path / sub
        assert main([
            "render", "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"]),
            "--frame", "1", "--out", str(out),
        ]) == 0
        blobs.append((out / "frame0001_composite.pfm").read_bytes())
    assert blobs[0] == blobs[1]


def test_eval_with_checkpoint(workspace, tmp_path):
    report = tmp_path / "report.csv"
    code = main([
        "eval", "--ckpt", str(workspace["ckpt"]), "--data", str(workspace["data"]),
        "--report", str(report),
    ])
    assert code == 0
    rows = list(csv.reader(open(report)))
    assert rows[0] == ["frame", "psnr", "ssim"]
    assert rows[-1][0] == "mean"
    assert len(rows) == 5  # header + 3 frames + mean


def test_eval_images_against_themselves(workspace, tmp_path):
    frames, _, _ = read_dataset(workspace["data"])
    imgdir = tmp_path / "imgs"
    os.makedirs(imgdir)
    from decompnerf.dataio import write_pfm

    for f in frames:
        write_pfm(imgdir / f"{f.index:04d}.pfm", f.image)
    report = tmp_path / "self.csv"
    code = main([
        "eval", "--images", str(imgdir), "--data", str(workspace["data"]),
        "--report", str(report),
    ])
    assert code == 0
    rows = list(csv.reader(open(report)))
    mean = rows[-1]
    assert float(mean[1]) == np.inf
    assert abs(float(mean[2]) - 1.0) < 1e-12


def test_eval_requires_exactly_one_source(workspace, tmp_path):
    assert main([
        "eval", "--data", str(workspace["data"]), "--report", str(tmp_path / "r.csv"),
    ]) == 2
    assert main([
        "eval", "--ckpt", str(workspace["ckpt"]), "--images", "x",
        "--data", str(workspace["data"]), "--report", str(tmp_path / "r.csv"),
    ]) == 2


def test_resume_training(workspace, tmp_path):
    longer = tmp_path / "longer.cfg"
    longer.write_text(CONFIG + "steps = 16\n")
    out = tmp_path / "resumed"
    code = main([
        "train", "--data", str(workspace["data"]), "--config", str(longer),
        "--out", str(out), "--resume", str(workspace["ckpt"]),
    ])
    assert code == 0
    assert (out / "checkpoint.npz").exists()
    rows = list(csv.reader(open(out / "metrics.csv")))
    assert int(rows[1][0]) == 12  # picks up at the recorded step

    # resuming with nothing left to do still exits cleanly
    code = main([
        "train", "--data", str(workspace["data"]), "--config", str(workspace["cfg"]),
        "--out", str(tmp_path / "noop"), "--resume", str(workspace["ckpt"]),
    ])
    assert code == 0


def test_ablate_two_variants(workspace, tmp_path):
    report = tmp_path / "ablate.csv"
    code = main([
        "ablate", "--data", str(workspace["data"]), "--config", str(workspace["cfg"]),
        "--variants", "base,dt", "--report", str(report),
    ])
    assert code == 0
    rows = list(csv.reader(open(report)))
    assert rows[0] == ["variant", "mean_psnr", "mean_ssim"]
    assert [r[0] for r in rows[1:]] == ["base", "dt"]


def test_ablate_unknown_variant(workspace, tmp_path):
    code = main([
        "ablate", "--data", str(workspace["data"]), "--variants", "bogus",
        "--report", str(tmp_path / "r.csv"),
    ])
    assert code == 2


def test_check_suites_exit_zero():
    assert main(["check", "--suite", "algebra"]) == 0
    assert main(["check", "--suite", "oracle"]) == 0
