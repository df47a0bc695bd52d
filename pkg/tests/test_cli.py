import csv
import json

import numpy as np
import pytest
import yaml

from sourcefree import checkpoint as ck
from sourcefree.cli import main
from sourcefree.data import access_log, reset_access_log
from sourcefree.models import module_checksum

CHAIN = ["gen-synthetic", "synth-negatives", "procure", "adapt", "eval"]


def _write(cfg, path):
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def _run_chain(cfg_path, *extra):
    for cmd in CHAIN:
        assert main([cmd, "-c", cfg_path, *extra]) == 0, cmd


@pytest.fixture
def chain(tiny_config, tmp_path):
    path = _write(tiny_config, tmp_path / "cfg.yaml")
    _run_chain(path)
    return path, tmp_path / "run"


def _rows(p):
    with open(p, newline="") as fh:
        return list(csv.DictReader(fh))


def test_chain_outputs(chain, tiny_config):
    _, out = chain
    ev = out / "eval"
    for name in ("metrics.json", "metrics.csv", "metrics_unadapted.json", "confusion.csv", "ssm_hist.csv",
                 "ssm_hist.png", "predictions.csv"):
        assert (ev / name).exists(), name
    rows = _rows(ev / "metrics.csv")
    # 2 shared classes plus the pooled unknown row
    assert [r["class"] for r in rows] == ["1", "2", "unknown"]
    assert len(_rows(out / "procurement_trace.csv")) == tiny_config["procurement"]["max_iter"]
    assert len(_rows(out / "adaptation_trace.csv")) == tiny_config["adaptation"]["iterations"]
    assert "frozen: OK" in (out / "adapt.log").read_text()
    log = (out / "procure.log").read_text().splitlines()
    step_lines = [l for l in log if l.startswith("procure step=")]
    assert len(step_lines) == 5 + 8 and all("loss=" in l and "wall=" in l for l in step_lines)
    assert (out / "procurement_trace.png").exists() and (out / "adaptation_trace.png").exists()


def test_t_unk_matches_recount(chain):
    _, out = chain
    report = json.loads((out / "eval" / "metrics.json").read_text())
    preds = _rows(out / "eval" / "predictions.csv")
    private = [p for p in preds if p["true"] in ("class_03", "class_04")]
    recount = sum(p["predicted"] == "unknown" for p in private) / len(private)
    assert report["t_unk"] == recount


def test_negatives_and_manifest(chain, tiny_config):
    path, out = chain
    dirs = [p for p in (out / "negatives").iterdir() if p.is_dir()]
    assert len(dirs) == 3  # C(3, 2)
    first = (out / "negatives" / "manifest.csv").read_bytes()
    assert main(["synth-negatives", "-c", path]) == 0
    assert (out / "negatives" / "manifest.csv").read_bytes() == first


def test_checkpoint_reserialises(chain, tmp_path):
    _, out = chain
    for name in ("procurement.ckpt", "adapted.ckpt"):
        data = (out / name).read_bytes()
        assert ck.to_bytes(ck.load_checkpoint(out / name)) == data


def test_adapt_reads_only_target_images(chain):
    path, _ = chain
    reset_access_log()
    assert main(["adapt", "-c", path]) == 0
    assert access_log() == [("target", "images")]


def test_only_eval_reads_target_labels(tiny_config, tmp_path):
    path = _write(tiny_config, tmp_path / "cfg.yaml")
    for cmd in CHAIN:
        reset_access_log()
        assert main([cmd, "-c", path]) == 0
        if cmd != "eval":
            assert ("target", "labels") not in access_log(), cmd
    assert ("target", "labels") in access_log()


def test_zero_iteration_adapt(chain):
    path, out = chain
    assert main(["adapt", "-c", path, "--iterations", "0", "-o", str(out / "zero.ckpt")]) == 0
    dm = ck.deployment_model(ck.load_checkpoint(out / "zero.ckpt"))
    assert module_checksum(dm.Ft) == module_checksum(dm.source.Fs)


def test_beta_flag_changes_trace(chain):
    path, out = chain
    base = _rows(out / "adaptation_trace.csv")
    assert main(["adapt", "-c", path, "--beta", "0.7"]) == 0
    new = _rows(out / "adaptation_trace.csv")
    r = new[0]
    assert float(r["d"]) == pytest.approx(float(r["d1"]) + 0.7 * float(r["d2"]), rel=1e-5)
    assert base[0]["d"] != r["d"]


def test_end_to_end_determinism(tiny_config, tmp_path):
    reports = []
    for k in range(2):
        cfg = dict(tiny_config, output_dir=str(tmp_path / f"run{k}"))
        _run_chain(_write(cfg, tmp_path / f"c{k}.yaml"))
        reports.append((tmp_path / f"run{k}" / "eval" / "metrics.json").read_bytes())
    assert reports[0] == reports[1]


def test_config_error_exit_code(tiny_config, tmp_path, capsys):
    path = _write(tiny_config, tmp_path / "cfg.yaml")
    assert main(["procure", "-c", path, "--set", "procurement.alpha=5"]) == 2
    rec = json.loads(capsys.readouterr().err.splitlines()[0])
    assert rec["error"] == "config" and rec["exit_code"] == 2
    assert json.loads((tmp_path / "run" / "error.json").read_text())["exit_code"] == 2


def test_missing_corpus_is_config_error(tiny_config, tmp_path):
    path = _write(tiny_config, tmp_path / "cfg.yaml")
    assert main(["synth-negatives", "-c", path]) == 2


def test_eval_label_outside_target_set(chain, capsys):
    path, _ = chain
    code = main(["eval", "-c", path, "--set", "labels.target=[1, 2, 3]"])
    assert code == 3
    rec = json.loads(capsys.readouterr().err.splitlines()[0])
    assert "class_04/" in rec["message"]


def test_divergence_exit_code(tiny_config, tmp_path, capsys):
    path = _write(tiny_config, tmp_path / "cfg.yaml")
    main(["gen-synthetic", "-c", path])
    main(["synth-negatives", "-c", path])
    assert main(["procure", "-c", path, "--set", "procurement.pretrain_lr=1e30",
                 "--set", "procurement.pretrain_steps=50"]) == 4
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["error"] == "diverged" and "step" in rec


def test_grid_resume(tiny_config, tmp_path):
    cfg = dict(tiny_config, grid={"universe": 5, "source_private": [0, 1], "target_private": [0, 1]})
    path = _write(cfg, tmp_path / "cfg.yaml")
    assert main(["grid", "-c", path]) == 0
    out = tmp_path / "run" / "grid"
    rows = list(csv.reader(open(out / "grid.csv")))
    assert len(rows) == 3 and len(rows[0]) == 3
    assert (out / "heatmap.png").exists()
    first = (out / "grid.csv").read_bytes()
    (out / "cell_1_1.json").unlink()
    stamp = {p.name: p.stat().st_mtime_ns for p in out.glob("cell_*.json")}
    assert main(["grid", "-c", path]) == 0
    assert (out / "grid.csv").read_bytes() == first
    for name, t in stamp.items():
        assert (out / name).stat().st_mtime_ns == t
    assert (out / "cell_1_1.json").exists()
    log = (tmp_path / "run" / "grid.log").read_text()
    assert log.count("grid cell:") == 1
