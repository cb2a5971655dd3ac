import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from lacpanet import cli
from lacpanet import model as M
from lacpanet import phantom as P
from lacpanet import tensor as T
from lacpanet.checkpoint import load_checkpoint, save_checkpoint

TINY_CFG = """\
seed = 3
data.volume_shape = 8,8,4
data.lesion_fraction_max = 0.3
data.cases_per_class = 3
model.base_channels = 2
train.epochs = 2
train.lr = 0.001
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.cfg").write_text(TINY_CFG)
    assert cli.main(["generate", "--config", str(root / "run.cfg"), "--out", str(root / "ds")]) == 0
    assert cli.main(["train", "--config", str(root / "run.cfg"), "--dataset", str(root / "ds"),
                     "--out", str(root / "run")]) == 0
    return root


def tree_bytes(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_generate_prints_split_summary(tmp_path, capsys):
    assert cli.main(["generate", "--set", "data.cases_per_class=5", "--set", "data.volume_shape=8,8,4",
                     "--set", "data.lesion_fraction_max=0.3", "--out", str(tmp_path / "d")]) == 0
    out = capsys.readouterr().out
    assert "train   15 cases  per class [3, 3, 3, 3, 3]" in out
    assert "val      5 cases" in out and "test     5 cases" in out
    assert (tmp_path / "d" / "generator.cfg").is_file()


def test_generate_is_byte_identical(workspace, tmp_path):
    assert cli.main(["generate", "--config", str(workspace / "run.cfg"), "--out", str(tmp_path / "again")]) == 0
    assert tree_bytes(tmp_path / "again") == tree_bytes(workspace / "ds")


def test_generate_seed_flag_changes_data(workspace, tmp_path):
    assert cli.main(["generate", "--config", str(workspace / "run.cfg"), "--seed", "4", "--out", str(tmp_path / "s")]) == 0
    assert tree_bytes(tmp_path / "s") != tree_bytes(workspace / "ds")


def test_generate_unwritable_target_fails(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["generate", "--out", str(blocker / "sub")]) != 0
    assert "error" in capsys.readouterr().err


def test_generate_bad_config_fails(tmp_path):
    assert cli.main(["generate", "--set", "model.nonsense=1", "--out", str(tmp_path / "x")]) != 0
    assert cli.main(["generate", "--set", "data.cases_per_class=2", "--out", str(tmp_path / "y")]) != 0


def test_train_writes_report_and_is_reproducible(workspace, tmp_path):
    report = json.loads((workspace / "run" / "run_report.json").read_text())
    assert report["config"]["train.epochs"] == "2" and report["config"]["seed"] == "3"
    assert len(report["epoch_losses"]) == 2 and report["lr_trace"] == [0.001, 0.001]
    assert report["checkpoint"] == "checkpoint.bin" and "val" in report["metrics"]
    assert cli.main(["train", "--config", str(workspace / "run.cfg"), "--dataset", str(workspace / "ds"),
                     "--out", str(tmp_path / "run2")]) == 0
    assert (tmp_path / "run2" / "checkpoint.bin").read_bytes() == (workspace / "run" / "checkpoint.bin").read_bytes()
    assert (tmp_path / "run2" / "run_report.json").read_bytes() == (workspace / "run" / "run_report.json").read_bytes()


def test_train_best_val_checkpoint(workspace, tmp_path):
    assert cli.main(["train", "--config", str(workspace / "run.cfg"), "--set", "train.select_best_val=true",
                     "--dataset", str(workspace / "ds"), "--out", str(tmp_path / "r")]) == 0
    report = json.loads((tmp_path / "r" / "run_report.json").read_text())
    assert report["best_val"]["checkpoint"] == "checkpoint_best_val.bin"
    _, _, extra = load_checkpoint(tmp_path / "r" / "checkpoint_best_val.bin")
    assert extra["epoch"] == report["best_val"]["epoch"]


def test_train_missing_dataset_fails(tmp_path):
    assert cli.main(["train", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path / "r")]) != 0


def test_eval_writes_metrics(workspace, capsys):
    assert cli.main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
                     "--dataset", str(workspace / "ds"), "--split", "val"]) == 0
    assert "weighted AUC" in capsys.readouterr().out
    metrics = json.loads((workspace / "run" / "metrics_val.json").read_text())
    assert metrics["n_cases"] == 5 and 0.0 <= metrics["weighted_auc"] <= 1.0


def test_eval_empty_split_fails(workspace, tmp_path):
    manifest = P.read_manifest(workspace / "ds" / "manifest.json")
    manifest.entries = [e for e in manifest.entries if e.split != "test"]
    ds = tmp_path / "ds"
    ds.mkdir()
    for e in manifest.entries:
        for name in (e.path, e.mask_path):
            (ds / name).write_bytes((workspace / "ds" / name).read_bytes())
    P.write_manifest(ds / "manifest.json", manifest)
    assert cli.main(["eval", "--checkpoint", str(workspace / "run" / "checkpoint.bin"), "--dataset", str(ds)]) != 0


def test_eval_corrupt_checkpoint_fails(workspace, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes((workspace / "run" / "checkpoint.bin").read_bytes()[:-16])
    assert cli.main(["eval", "--checkpoint", str(bad), "--dataset", str(workspace / "ds")]) != 0


def read_matrix(path):
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["query\\key", *M.PHASE_NAMES, "row_sum"]
    assert [r[0] for r in rows[1:]] == list(M.PHASE_NAMES)
    return np.array([[float(v) for v in r[1:5]] for r in rows[1:]])


def test_inspect_attention_matches_fresh_forward(workspace, tmp_path):
    out = tmp_path / "att"
    assert cli.main(["inspect-attention", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
                     "--dataset", str(workspace / "ds"), "--case", "case_0004", "--out", str(out)]) == 0
    params, config, _ = load_checkpoint(workspace / "run" / "checkpoint.bin")
    manifest = P.read_manifest(workspace / "ds" / "manifest.json")
    case = P.load_case(workspace / "ds", next(e for e in manifest.entries if e.case_id == "case_0004"))
    _, record = M.forward(case.volumes, case.mask, params, config)
    payload = json.loads((out / "attention.json").read_text())
    for scale, expected in (("low", record.a_low), ("high", record.a_high)):
        np.testing.assert_array_equal(np.array(payload[f"a_{scale}"]), expected)
        np.testing.assert_allclose(payload[f"row_sums_{scale}"], 1.0, atol=1e-9)
        np.testing.assert_allclose(read_matrix(out / f"attention_{scale}.csv"), expected, rtol=1e-5, atol=1e-9)


def test_inspect_attention_uniform_for_identical_phases(workspace, tmp_path):
    params, config, _ = load_checkpoint(workspace / "run" / "checkpoint.bin")
    arrays = params.arrays()
    arrays["phase_low"] = np.zeros_like(arrays["phase_low"])
    arrays["phase_high"] = np.zeros_like(arrays["phase_high"])
    save_checkpoint(tmp_path / "zp.bin", M.ModelParams.from_arrays(arrays), config)
    case = P.generate_case(0, P.PhantomConfig(volume_shape=(8, 8, 4), lesion_fraction_max=0.3), 1, "dup")
    ds = tmp_path / "ds"
    ds.mkdir()
    P.save_volume(ds / "dup.phv", np.stack([case.volumes[1]] * 4))
    P.save_volume(ds / "dup_mask.phv", case.mask)
    P.write_manifest(ds / "manifest.json",
                     P.DatasetManifest([P.ManifestEntry("dup", 0, "dup.phv", "dup_mask.phv", "test")], "x", 0))
    assert cli.main(["inspect-attention", "--checkpoint", str(tmp_path / "zp.bin"), "--dataset", str(ds),
                     "--case", "dup", "--out", str(tmp_path / "o")]) == 0
    payload = json.loads((tmp_path / "o" / "attention.json").read_text())
    np.testing.assert_allclose(payload["a_low"], 0.25, atol=1e-12)
    np.testing.assert_allclose(payload["a_high"], 0.25, atol=1e-12)


def test_inspect_attention_unknown_case_fails(workspace, capsys):
    assert cli.main(["inspect-attention", "--checkpoint", str(workspace / "run" / "checkpoint.bin"),
                     "--dataset", str(workspace / "ds"), "--case", "case_9999"]) != 0
    assert "unknown case" in capsys.readouterr().err


GRADCHECK_FAST = ["gradcheck", "--instances", "1", "--shape", "4,4,4", "--channels", "2"]


def test_gradcheck_reports_every_op(capsys):
    assert cli.main(GRADCHECK_FAST) == 0
    out = capsys.readouterr().out
    for name in [*cli.gradsuite.OP_CASES, "lacpanet_loss"]:
        assert any(line.startswith(name + " ") and "PASS" in line for line in out.splitlines()), name


def test_gradcheck_fails_on_injected_conv_error(monkeypatch, capsys):
    real = T.conv3d

    def broken(x, kernel, bias, stride=1, channels_last=False):
        out = real(x, kernel, bias, stride, channels_last)
        if out._backward is None:
            return out

        def backward(g):
            dx, dk, db = out._backward(g)
            return dx, -dk, db
        return T._make(out.data, out._parents, backward, "conv3d")

    monkeypatch.setattr(T, "conv3d", broken)
    assert cli.main(GRADCHECK_FAST) == 1
    out = capsys.readouterr().out
    failed = out.strip().splitlines()[-1]
    assert failed.startswith("FAILED") and "conv3d_stride1" in failed and "conv3d_stride2" in failed
    assert "matmul" not in failed


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "lacpanet", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for command in ("generate", "train", "eval", "inspect-attention", "gradcheck"):
        assert command in proc.stdout
