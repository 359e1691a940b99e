import csv
import json

import numpy as np
import pytest
import yaml

from newtonfly import kernels
from newtonfly.cli import main
from newtonfly.config import load_config
from newtonfly.dynamics import DragParams, LatencyParams
from newtonfly.geometry import load_scene
from newtonfly.sysid import synthetic_speed_log

from conftest import SMALL, merge


def write_cfg(path, **sections):
    data = merge(SMALL, sections)
    path.write_text(yaml.safe_dump(data))
    return str(path)


@pytest.fixture
def cfg_path(tmp_path):
    return write_cfg(tmp_path / "small.yaml", train={"iterations": 3, "checkpoint_every": 0},
                     eval={"every": 0, "episodes": 2, "steps": 30})


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_outputs_and_determinism(tmp_path, cfg_path, capsys):
    assert main(["train", cfg_path, "--out", str(tmp_path / "a")]) == 0
    assert main(["train", cfg_path, "--out", str(tmp_path / "b")]) == 0
    a = tmp_path / "a"
    rows = read_rows(a / "metrics.csv")
    assert len(rows) == 3 and [r["iteration"] for r in rows] == ["0", "1", "2"]
    assert (a / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert {"seed", "config_sha256", "revision", "kernel_backend"} <= set(manifest)
    assert load_config(a / "config.yaml").digest() == manifest["config_sha256"]
    assert (a / "final.nwt").exists()
    assert "trained 3 iterations" in capsys.readouterr().out


def test_run_directory_reproduces_itself(tmp_path, cfg_path):
    assert main(["train", cfg_path, "--out", str(tmp_path / "a")]) == 0
    assert main(["train", str(tmp_path / "a" / "config.yaml"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_seed_override(tmp_path, cfg_path):
    main(["train", cfg_path, "--out", str(tmp_path / "a")])
    main(["--seed", "5", "train", cfg_path, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 5


def test_missing_field_exits_2_naming_it(tmp_path, capsys):
    data = merge(SMALL, {})
    del data["seed"]
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump(data))
    assert main(["train", str(tmp_path / "bad.yaml")]) == 2
    assert "seed" in capsys.readouterr().err
    assert main(["--threads", "0", "train", str(tmp_path / "bad.yaml")]) == 2


def test_thread_count_gives_identical_metrics(tmp_path, cfg_path):
    for n in (1, 8):
        assert main(["--threads", str(n), "train", cfg_path, "--out", str(tmp_path / f"t{n}")]) == 0
    kernels.set_num_threads(1)
    assert (tmp_path / "t1" / "metrics.csv").read_bytes() == (tmp_path / "t8" / "metrics.csv").read_bytes()


# ----------------------------------------------------------------------------- eval

def test_eval_speed_rows(tmp_path, cfg_path):
    out = tmp_path / "ev"
    assert main(["eval", cfg_path, "--controller", "straight", "--speeds", "4,7,10", "--out", str(out)]) == 0
    rows = read_rows(out / "eval.csv")
    assert [float(r["speed"]) for r in rows] == [4.0, 7.0, 10.0]
    assert (out / "eval.txt").read_text().count("\n") == 4


def test_eval_scripted_controllers(tmp_path, cfg_path):
    assert main(["eval", cfg_path, "--controller", "hover", "--speeds", "3,5", "--out", str(tmp_path / "h")]) == 0
    assert all(float(r["success_rate"]) == 0.0 for r in read_rows(tmp_path / "h" / "eval.csv"))
    empty = write_cfg(tmp_path / "empty.yaml", eval={"steps": 150, "episodes": 3})
    assert main(["eval", empty, "--scenario", "empty", "--controller", "straight", "--speeds", "3,5",
                 "--out", str(tmp_path / "s")]) == 0
    assert all(float(r["success_rate"]) == 1.0 for r in read_rows(tmp_path / "s" / "eval.csv"))


def test_eval_checkpoint(tmp_path, cfg_path):
    main(["train", cfg_path, "--out", str(tmp_path / "run")])
    ck = str(tmp_path / "run" / "final.nwt")
    assert main(["eval", cfg_path, "--checkpoint", ck, "--speeds", "3"]) == 0
    assert main(["eval", cfg_path, "--speeds", "3"]) == 2  # no checkpoint given
    other = write_cfg(tmp_path / "other.yaml", policy={"preset": "desk"})
    assert main(["eval", other, "--checkpoint", ck, "--speeds", "3"]) == 1  # shape mismatch
    assert main(["eval", cfg_path, "--controller", "hover", "--speeds", "x"]) == 2


# ----------------------------------------------------------------------------- plot

def _metrics(tmp_path, name, rows, manifest=None):
    d = tmp_path / name
    d.mkdir()
    with open(d / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["env_steps", "loss", "eval_reward"])
        w.writerows(rows)
    if manifest:
        (d / "manifest.json").write_text(json.dumps(manifest))
    return str(d / "metrics.csv")


def test_plot_series_and_determinism(tmp_path, caplog):
    a = _metrics(tmp_path, "a", [[10, 1.0, ""], [20, 0.5, -3.0], [30, 0.4, -2.0]], {"name": "dp", "command": "train"})
    b = _metrics(tmp_path, "b", [[10, 2.0, -9.0], ["oops", 1, 1], [40, 1.0, -4.0]], {"name": "rl", "command": "ppo"})
    assert main(["plot", a, "--out", str(tmp_path / "one.svg")]) == 0
    one = (tmp_path / "one.svg").read_text()
    assert one.count("<polyline") == 1
    assert main(["plot", a, b, "--out", str(tmp_path / "two.svg")]) == 0
    two = (tmp_path / "two.svg").read_text()
    assert two.count("<polyline") == 2 and "dp (train)" in two and "rl (ppo)" in two
    assert "malformed row" in caplog.text
    main(["plot", a, b, "--out", str(tmp_path / "again.svg")])
    assert (tmp_path / "again.svg").read_bytes() == (tmp_path / "two.svg").read_bytes()


def test_plot_empty_csv_fails_without_output(tmp_path):
    e = _metrics(tmp_path, "e", [])
    assert main(["plot", e, "--out", str(tmp_path / "e.svg")]) == 1
    assert not (tmp_path / "e.svg").exists()
    assert main(["plot", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "m.svg")]) == 1


# ----------------------------------------------------------------------------- other subcommands

def test_calibrate_drag(tmp_path, capsys):
    synthetic_speed_log(DragParams(0.05, 0.1), LatencyParams()).save(tmp_path / "log.csv")
    rc = main(["calibrate", "--log", str(tmp_path / "log.csv"), "--kind", "drag", "--first", "0.03:0.07:0.01",
               "--second", "0.05:0.15:0.05", "--out", str(tmp_path / "frag.yaml")])
    assert rc == 0
    assert "drag_quadratic=0.05" in capsys.readouterr().out
    frag = yaml.safe_load((tmp_path / "frag.yaml").read_text())
    assert frag["dynamics"]["drag_quadratic"] == pytest.approx(0.05)
    assert frag["dynamics"]["drag_linear"] == pytest.approx(0.1)
    assert main(["calibrate", "--log", str(tmp_path / "log.csv"), "--kind", "drag", "--first", "1:0:1",
                 "--second", "0:1:1"]) == 2
    assert main(["calibrate", "--log", str(tmp_path / "nope.csv"), "--kind", "latency", "--first", "1:2:1",
                 "--second", "0:1:1"]) == 2


def test_render_demo_and_scene_gen(tmp_path, cfg_path):
    assert main(["scene-gen", cfg_path, "--count", "3", "--out", str(tmp_path / "scenes")]) == 0
    files = sorted((tmp_path / "scenes").glob("*.json"))
    assert len(files) == 3
    world = load_scene(files[0])
    assert len(world.primitives) >= 1
    assert main(["render-demo", "--scene", str(files[0]), "--frames", "2", "--out", str(tmp_path / "img")]) == 0
    pgms = sorted((tmp_path / "img").glob("*.pgm"))
    assert len(pgms) == 4 and pgms[0].read_bytes().startswith(b"P5")
    assert main(["render-demo", "--out", str(tmp_path / "x")]) == 2
    # same seed, same scenes
    main(["scene-gen", cfg_path, "--count", "3", "--out", str(tmp_path / "again")])
    assert files[1].read_bytes() == (tmp_path / "again" / files[1].name).read_bytes()


def test_ppo_command(tmp_path, cfg_path):
    assert main(["ppo", cfg_path, "--iterations", "1", "--out", str(tmp_path / "p")]) == 0
    rows = read_rows(tmp_path / "p" / "metrics.csv")
    assert len(rows) == 1 and np.isfinite(float(rows[0]["reward_mean"]))
