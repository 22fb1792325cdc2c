import json
import os

import numpy as np
import pytest

from microscale_id.cli import main, read_measurements, read_table, verify_manifest
from microscale_id.config import ConfigError, ExperimentConfig, load_config, write_config

SMALL = """
[beam]
nx = 15
ny = 5
[reference]
raster_n = 60
[stage1]
max_iter = 4
[stage2]
max_iter = 2
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return str(p)


def test_defaults_and_roundtrip(tmp_path):
    cfg = load_config()
    assert cfg.beam.nx == 75 and cfg.stage1.lam == 40.38 and cfg.stage2.vf == 0.05
    p = tmp_path / "c.cfg"
    write_config(cfg, p)
    assert load_config(str(p)).as_dict() == cfg.as_dict()


@pytest.mark.parametrize("text", ["[beam]\nnx = -3\n", "[beam]\nwidth = 3\n", "[bogus]\na = 1\n",
                                  "[beam]\nnx = ten\n", "[beam]\nload_location = middle\n",
                                  "[noise]\ngamma = -0.1\n"])
def test_bad_config_rejected(tmp_path, text):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(str(p))


def test_repository_config_matches_defaults():
    here = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    cfg = load_config(os.path.join(here, "paper.cfg"))
    expected = ExperimentConfig().as_dict()
    assert cfg.as_dict() == expected


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["rve", "--vf", "0.1", "--out", str(tmp_path)])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert main(["rve", "--phi", "0.3", "--vf", "0.7", "--out", str(tmp_path)]) == 2
    assert main(["synthesize", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["identify-micro", "--out", str(tmp_path / "empty")]) == 2


def test_rve_and_homogenize_commands(tmp_path):
    out = str(tmp_path)
    assert main(["rve", "--phi", "0.3", "--vf", "0.15", "--raster-n", "60", "--out", out]) == 0
    _, cols, arr = read_table(os.path.join(out, "circles.csv"))
    assert cols == ["cx", "cy", "r"] and arr.shape == (19, 3)
    assert open(os.path.join(out, "rve.pgm"), "rb").read().startswith(b"P5\n60 60\n255\n")
    assert main(["homogenize", "--phi", "0.3", "--vf", "0.15", "--raster-n", "60",
                 "--threads", "1", "--out", out]) == 0
    text = open(os.path.join(out, "tangents.csv")).read()
    assert "n_circles=19" in text and "l_fit=" in text


def test_seed_override_changes_packing(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    main(["rve", "--phi", "0.3", "--vf", "0.15", "--raster-n", "60", "--out", a])
    main(["rve", "--phi", "0.3", "--vf", "0.15", "--raster-n", "60", "--out", b,
          "--seed-override", "99"])
    assert read_table(os.path.join(a, "circles.csv"))[2].tolist() != \
        read_table(os.path.join(b, "circles.csv"))[2].tolist()


def test_staged_commands_and_manifest(tmp_path, small_cfg):
    out = str(tmp_path / "run")
    assert main(["synthesize", "--config", small_cfg, "--out", out]) == 0
    m = read_measurements(os.path.join(out, "measurements.csv"))
    assert len(m) == 16 and m.gamma == 0.05 and m.seed == 1
    assert np.all(np.abs(m.values - m.clean) <= 0.05 * np.abs(m.clean) + 1e-15)
    assert verify_manifest(os.path.join(out, "manifest.json"))

    assert main(["identify-macro", "--config", small_cfg, "--out", out]) == 0
    meta, cols, arr = read_table(os.path.join(out, "alpha.csv"))
    assert cols == ["lambda", "mu", "l"] and arr.shape == (1, 3) and "termination" in meta
    _, ccols, conv = read_table(os.path.join(out, "convergence_stage1.csv"))
    assert ccols[0] == "iteration" and np.all(np.diff(conv[:, ccols.index("objective")]) <= 0)

    assert main(["identify-micro", "--config", small_cfg, "--out", out]) == 0
    _, bcols, beta = read_table(os.path.join(out, "beta.csv"))
    assert bcols == ["phi", "vf"] and beta[0, 0] > 0
    assert os.path.exists(os.path.join(out, "iter_0.pgm"))
    manifest = json.load(open(os.path.join(out, "manifest.json")))
    assert "beta.csv" in manifest["files"]
    assert verify_manifest(os.path.join(out, "manifest.json"))
    with open(os.path.join(out, "beta.csv"), "a") as fh:
        fh.write("0,0\n")
    assert not verify_manifest(os.path.join(out, "manifest.json"))


def test_numerical_failure_exit_1(tmp_path, small_cfg, monkeypatch):
    from microscale_id import cli
    from microscale_id.errors import SolveError

    def boom(*a, **k):
        raise SolveError("singular")
    monkeypatch.setattr(cli, "homogenize", boom)
    assert main(["homogenize", "--phi", "0.3", "--vf", "0.1", "--out", str(tmp_path)]) == 1


def test_synthesize_default_grid_without_noise(tmp_path):
    cfg = tmp_path / "quiet.cfg"
    cfg.write_text("[noise]\ngamma = 0\n[reference]\nraster_n = 60\n")
    outs = [str(tmp_path / d) for d in "ab"]
    for out in outs:
        assert main(["synthesize", "--config", str(cfg), "--out", out]) == 0
    m = read_measurements(os.path.join(outs[0], "measurements.csv"))
    assert len(m) == 76 and np.array_equal(m.values, m.clean)
    for name in ("measurements.csv", "reference_tangents.csv"):
        assert open(os.path.join(outs[0], name), "rb").read() == \
            open(os.path.join(outs[1], name), "rb").read()
