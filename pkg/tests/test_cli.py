import hashlib
import json

import numpy as np
import pytest

from mbfsurrogate import formats
from mbfsurrogate.cli import ConfigError, load_config, main

TINY = """
seed: 3
suite: {n_patients: 3, n_diseased: 1, size: 5, defect_radius: [1, 1]}
mcmc: {n_iter: 4000, burn_in: 2000, thin: 10}
network: {convs: [[3, 2]], pool: 4, dense: [4]}
train: {max_epochs: 3, batch_size: 8}
splits: {sizes: [1, 1, 1], n_splits: 3}
render: {scale: 2}
"""


def _run(cfg, out, *args):
    return main([args[0], "--config", str(cfg), "--out-dir", str(out), *args[1:]])


def _workflow(tmp_path, name):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(TINY)
    out = tmp_path / name
    for stage in (["simulate"], ["label"], ["train", "--split", "2"], ["predict"], ["render"]):
        assert _run(cfg, out, *stage) == 0, stage
    return cfg, out


@pytest.fixture(scope="module")
def workflow(tmp_path_factory):
    return _workflow(tmp_path_factory.mktemp("cli"), "run")


def _tree(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "timing.txt"}


def test_end_to_end_artifacts(workflow):
    cfg, out = workflow
    ds = formats.read_dataset(out / "dataset")
    assert len(ds.patients) == 3
    targets = formats.read_maps(out / "targets", ds.ids)
    assert all(np.array_equal(np.isfinite(targets[p.id]), p.mask) for p in ds.patients)
    summary = json.loads((out / "targets" / "summary.json").read_text())
    assert summary["method"] == "mcmc"
    hist = json.loads((out / "model" / "history.json").read_text())
    test_ids = hist["split"]["test"]
    assert len(test_ids) == 1
    assert sorted(p.name for p in (out / "predictions").glob("*.map")) == [f"{test_ids[0]}.map"]
    img = formats.read_ppm(out / "render" / f"{test_ids[0]}.ppm")
    assert img.shape == (2 * 5, 2 * (5 + 2 + 5), 3)


def test_determinism(workflow, tmp_path):
    _, first = workflow
    _, second = _workflow(tmp_path, "again")
    assert _tree(first) == _tree(second)


def test_stage_isolation(workflow, tmp_path):
    cfg, out = workflow
    before = _tree(out / "dataset")
    assert _run(cfg, out, "predict") == 0
    assert _tree(out / "dataset") == before


def test_crossval_reports_mean_std(workflow, capsys):
    cfg, out = workflow
    capsys.readouterr()
    assert _run(cfg, out, "crossval") == 0
    printed = capsys.readouterr().out
    assert printed.startswith("MSE mean (std): ")
    rep = formats.read_report(out / "crossval" / "report.txt")
    assert len(rep.splits) == 3
    assert f"MSE mean (std): {rep.mse_line()}" in printed


def test_fit_and_nlls_label(workflow, tmp_path):
    cfg, out = workflow
    assert _run(cfg, out, "fit") == 0
    assert len(list((out / "fits").glob("*.map"))) == 3
    other = tmp_path / "nlls"
    assert _run(cfg, other, "simulate") == 0
    assert _run(cfg, other, "label", "--method", "nlls") == 0
    assert json.loads((other / "targets" / "summary.json").read_text())["method"] == "nlls"


def test_benchmark_writes_timing(workflow):
    cfg, out = workflow
    assert _run(cfg, out, "benchmark", "--max-voxels", "2") == 0
    rep = formats.read_report(out / "benchmark" / "timing.txt")
    assert rep.timing.n_voxels == 2 and rep.timing.identical_voxels


def test_invalid_key_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("mcmc: {n_iters: 10}\n")
    assert main(["simulate", "--config", str(bad), "--out-dir", str(tmp_path)]) == 1
    assert "mcmc.n_iters" in capsys.readouterr().err
    assert main(["simulate", "--out-dir", str(tmp_path), "--train.lr", "1"]) == 1
    assert "train.lr" in capsys.readouterr().err


def test_missing_artifact_names_path(tmp_path, capsys):
    assert main(["train", "--out-dir", str(tmp_path / "empty")]) == 1
    err = capsys.readouterr().err
    assert "missing prerequisite artifact" in err
    assert str(tmp_path / "empty" / "dataset") in err


def test_usage_error_is_validation_error(tmp_path):
    assert main(["label", "--method", "magic", "--out-dir", str(tmp_path)]) == 1
    assert main(["nosuchcommand"]) == 1


def test_runtime_failure_exits_two(workflow, tmp_path):
    cfg, out = workflow
    assert _run(cfg, out, "train", "--train.learning_rate", "1e300", "--train.delay_augment", "0",
                "--out-dir", str(out)) == 2


def test_bad_split_index(workflow):
    cfg, out = workflow
    for idx in ("0", "-1", "4"):
        assert _run(cfg, out, "train", "--split", idx) == 1


def test_dotted_overrides():
    cfg = load_config(overrides=[("mcmc.n_iter", "5000"), ("network.dense", "[8, 4]"), ("seed", "7")])
    assert cfg["mcmc"]["n_iter"] == 5000
    assert cfg["network"]["dense"] == [8, 4]
    assert cfg["seed"] == 7
    with pytest.raises(ConfigError, match="'mcmc'"):
        load_config(overrides=[("mcmc", "1")])


def test_exponent_notation_is_numeric(tmp_path):
    cfg = load_config(overrides=[("train.learning_rate", "5e-4"), ("mcmc.n_iter", "2e4")])
    assert cfg["train"]["learning_rate"] == 5e-4
    assert cfg["mcmc"]["n_iter"] == 20000
    path = tmp_path / "c.yaml"
    path.write_text("train: {learning_rate: 1e-3}\n")
    assert load_config(path)["train"]["learning_rate"] == 1e-3
    with pytest.raises(ConfigError, match="train.batch_size"):
        load_config(overrides=[("train.batch_size", "many")])
