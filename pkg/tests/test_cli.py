import json

import numpy as np
import pytest

from shapefuse.cli import main
from shapefuse.evaluation import read_curve_csv
from shapefuse.io import load_mesh, load_mesh_dir
from shapefuse.registry import ModelRegistry


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, reg = root / "data", root / "reg"
    assert main(["synth", "--out", str(data), "--n-heads", "12", "--n-faces", "20", "--n-scans", "4",
                 "--n-test", "4", "--seed", "5"]) == 0
    assert main(["build-pdm", "--registry", str(reg), "--meshes", str(data / "heads"), "--id", "head"]) == 0
    assert main(["build-pdm", "--registry", str(reg), "--meshes", str(data / "faces"), "--id", "face",
                 "--n-components", "4"]) == 0
    return root, data, reg


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "synth" in capsys.readouterr().out


def test_bad_usage_exits_one(pipeline, tmp_path):
    _, _, reg = pipeline
    assert main(["no-such-command"]) == 1
    assert main(["build-pdm", "--registry", str(reg)]) == 1
    assert main(["evaluate", "--registry", str(reg), "--metric", "compactness", "--model", "missing",
                 "--out", str(tmp_path / "x.csv")]) == 1


def test_synth_layout(pipeline):
    _, data, _ = pipeline
    assert len(load_mesh_dir(data / "heads")) == 12
    assert len(load_mesh_dir(data / "faces")) == 20
    scan = load_mesh(data / "scans" / "scan_0000.ply")
    assert "nose_tip" in scan.landmarks
    truth = json.loads((data / "ground_truth.json").read_text())
    assert "coupling_map" in truth
    assert (data / "report.json").exists()


def test_compactness_csv_and_report(pipeline, tmp_path):
    _, _, reg = pipeline
    out = tmp_path / "c.csv"
    assert main(["evaluate", "--registry", str(reg), "--metric", "compactness", "--model", "head",
                 "--out", str(out)]) == 0
    curve = read_curve_csv(out)
    assert curve.y[-1] == 1.0 and np.all(np.diff(curve.y) >= 0)
    rep = json.loads((tmp_path / "c.csv.report.json").read_text())
    assert rep["command"] == "evaluate" and rep["seed"] == 0
    assert set(rep["outputs"]) == {"csv"}


def test_config_precedence(pipeline, tmp_path):
    _, data, reg = pipeline
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_samples": 30, "components": [1, 2]}))
    out = tmp_path / "s.csv"
    assert main(["evaluate", "--registry", str(reg), "--metric", "specificity", "--model", "head",
                 "--test", str(data / "test"), "--out", str(out), "--config", str(cfg),
                 "--components", "1,3"]) == 0
    s = json.loads((tmp_path / "s.csv.report.json").read_text())["settings"]
    assert s["components"] == {"value": [1, 3], "source": "flag"}
    assert s["n_samples"] == {"value": 30, "source": "file"}
    assert s["threshold"]["source"] == "default"
    assert read_curve_csv(out).x.tolist() == [1.0, 3.0]
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["evaluate", "--registry", str(reg), "--metric", "compactness", "--model", "head",
                 "--out", str(out), "--config", str(cfg)]) == 1


def test_combine_gp_sample_and_tamper(pipeline, tmp_path):
    _, data, reg = pipeline
    assert main(["combine-gp", "--registry", str(reg), "--head-model", "head", "--face-model", "face",
                 "--template", str(data / "template_head.ply"), "--id", "gp",
                 "--config", str(_fast_cfg(tmp_path))]) == 0
    r = ModelRegistry(reg)
    assert r.kind_of("gp") == "covariance"
    assert (reg / "reports" / "combine-gp-gp.json").exists()
    assert main(["sample", "--registry", str(reg), "--model", "gp", "--out", str(tmp_path / "smp"),
                 "--n", "2", "--rank", "3"]) == 0
    assert len(load_mesh_dir(tmp_path / "smp")) == 2
    # flipping one byte of a stored blob is detected
    blob = next(p for p in (reg / "gp").iterdir() if p.suffix == ".f8")
    raw = bytearray(blob.read_bytes())
    raw[100] ^= 1
    blob.write_bytes(bytes(raw))
    assert main(["sample", "--registry", str(reg), "--model", "gp", "--out", str(tmp_path / "smp2")]) == 1


def _fast_cfg(tmp_path):
    p = tmp_path / "fast.json"
    p.write_text(json.dumps({"nicp": {"stiffness_schedule": [20.0, 2.0], "max_inner_iterations": 3}}))
    return p


def test_register_command(pipeline, tmp_path):
    _, data, _ = pipeline
    out = tmp_path / "r.ply"
    assert main(["register", "--template", str(data / "template_head.ply"),
                 "--target", str(data / "heads" / "head_0000.ply"), "--out", str(out),
                 "--stiffness", "20,2", "--max-inner-iterations", "3"]) == 0
    reg_mesh = load_mesh(out)
    tmpl = load_mesh(data / "template_head.ply")
    np.testing.assert_array_equal(reg_mesh.faces, tmpl.faces)
    rep = json.loads((tmp_path / "r.ply.report.json").read_text())
    assert rep["settings"]["stiffness"]["source"] == "flag"
