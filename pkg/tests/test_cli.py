import json
import subprocess
import sys

import pytest
import yaml

from semloc.cli import default_config, main

SMALL = {
    "world": {"n_objects": 6},
    "trajectory": {"map_every": 20, "obs_every": 10},
    "mcl": {"n_particles": 300},
}


def pipeline(root, seed=0):
    """Run every command once; returns the output directory."""
    cfg = root / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(SMALL))
    c = ["--config", str(cfg), "--seed", str(seed)]
    sim, w = root / "sim", root / "sim" / "world"
    steps = [
        ["simulate", *c, "--out", str(sim)],
        ["annotate", *c, "--gt-objects", str(w / "gt_objects.json"),
         "--frames", str(sim / "frames.jsonl"), "--det2d", str(sim / "det2d.jsonl"),
         "--floorplan", str(w / "floorplan.yaml"), "--out", str(root / "ann")],
        ["fit-noise", *c, "--stream", str(sim / "mapping_stream.jsonl"),
         "--gt-objects", str(w / "gt_objects.json"), "--out", str(root / "fit")],
        ["build-map", *c, "--stream", str(sim / "mapping_stream.jsonl"),
         "--floorplan", str(w / "floorplan.yaml"), "--models", str(root / "fit" / "class_models.json"),
         "--out", str(root / "map")],
        ["localize", *c, "--events", str(sim / "localization_events.jsonl"),
         "--floorplan", str(w / "floorplan.yaml"), "--map", str(w / "gt_objects.json"),
         "--models", str(w / "class_noise.json"), "--gt-trajectory", str(sim / "localization_gt.jsonl"),
         "--runs", "2", "--out", str(root / "loc")],
        ["eval", *c, "--map", str(root / "map" / "map.json"),
         "--gt-objects", str(w / "gt_objects.json"),
         "--estimates", str(root / "loc" / "estimates_object_000.jsonl"),
         "--gt-trajectory", str(sim / "localization_gt.jsonl"), "--out", str(root / "eval")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv[0]
    return root


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "cfg.yaml"}


@pytest.fixture(scope="module")
def run_a(tmp_path_factory):
    return pipeline(tmp_path_factory.mktemp("a"))


def test_pipeline_outputs(run_a):
    files = tree(run_a)
    for name in ("sim/world/gt_objects.json", "sim/world/floorplan.pgm", "sim/mapping_stream.jsonl",
                 "ann/labels.jsonl", "fit/class_models.json", "fit/prob_map.json", "map/map.json",
                 "map/map_events.jsonl", "loc/estimates_object_001.jsonl", "loc/localization.csv",
                 "eval/map_quality.txt", "eval/localization.json"):
        assert name in files, name
    q = json.loads(files["eval/map_quality.json"])
    assert 0.0 <= q["avg"]["iou"] <= 1.0
    rep = json.loads(files["loc/localization.json"])
    assert rep["methods"][0]["method"] == "object" and len(rep["methods"][0]["runs"]) == 2


def test_pipeline_is_byte_identical(run_a, tmp_path):
    b = pipeline(tmp_path)
    ta, tb = tree(run_a), tree(b)
    assert ta.keys() == tb.keys()
    different = [k for k in ta if ta[k] != tb[k]]
    assert different == []


def test_parallel_runs_match_serial(run_a, tmp_path):
    sim = run_a / "sim"
    argv = ["localize", "--config", str(run_a / "cfg.yaml"), "--events",
            str(sim / "localization_events.jsonl"), "--floorplan", str(sim / "world/floorplan.yaml"),
            "--map", str(sim / "world/gt_objects.json"), "--models",
            str(sim / "world/class_noise.json"), "--runs", "2", "--jobs", "2", "--out", str(tmp_path)]
    assert main(argv) == 0
    for k in range(2):
        name = f"estimates_object_{k:03d}.jsonl"
        assert (tmp_path / name).read_bytes() == (run_a / "loc" / name).read_bytes()


def test_resume_map(run_a, tmp_path):
    sim = run_a / "sim"
    argv = ["build-map", "--config", str(run_a / "cfg.yaml"), "--stream",
            str(sim / "mapping_stream.jsonl"), "--floorplan", str(sim / "world/floorplan.yaml"),
            "--resume-map", str(run_a / "map" / "map.json"), "--out", str(tmp_path)]
    assert main(argv) == 0
    assert json.loads((tmp_path / "map.json").read_text())


def test_print_config_includes_defaults(capsys, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"mcl": {"eta": 0.25}}))
    assert main(["localize", "--config", str(cfg), "--sensor-model", "edt", "--print-config"]) == 0
    out = yaml.safe_load(capsys.readouterr().out)
    assert out["mcl"]["eta"] == 0.25 and out["mcl"]["sensor_model"] == "edt"
    assert out["mapper"]["tau_purge"] == default_config()["mapper"]["tau_purge"]


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["build-map", "--out", str(tmp_path)]) == 2
    assert "floorplan" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"mcl": {"nope": 1}}))
    assert main(["simulate", "--config", str(bad)]) == 2
    assert "mcl.nope" in capsys.readouterr().err
    assert main(["eval", "--out", str(tmp_path)]) == 2
    broken = tmp_path / "s.jsonl"
    broken.write_text('{"frame_id": 1}\nnot json\n')
    plan = tmp_path / "p.yaml"
    assert main(["build-map", "--stream", str(broken), "--floorplan", str(plan),
                 "--out", str(tmp_path)]) == 2


def test_console_script_entry():
    out = subprocess.run([sys.executable, "-m", "semloc.cli", "--version"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and "semloc" in out.stdout
