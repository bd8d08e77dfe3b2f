"""End-to-end pipeline through the command-line entry points, plus the exit
code contract: 0 ok, 2 usage/config, 3 data/compatibility, 4 numeric."""

import re
import subprocess
import sys

import pytest

from sahc.cli import main

SPEC_TEXT = """\
c=3
d_in=10
mean_duration=20
std_duration=4
boundary_width=3
noise_sigma=0.4
backward_prob=0.05
n_train=6
n_val=2
n_test=2
"""

CFG_TEXT = """\
# tiny run for pipeline checks
model.d_in=10
model.c=3
model.d=8
model.m=1
model.k=3
model.l_frame=1
model.l_seg=1
model.n_head=2
model.dropout_rate=0.0
model.t_max=300
train.epochs=3
train.seed=1
train.base_lr=0.001
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "synth.txt"
    spec.write_text(SPEC_TEXT)
    cfg = root / "run.cfg"
    cfg.write_text(CFG_TEXT)
    data = root / "data"
    run = root / "run"
    assert main(["synth", "--spec", str(spec), "--out", str(data), "--seed", "7"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data),
                 "--out", str(run), "--quiet"]) == 0
    return {"root": root, "spec": spec, "cfg": cfg, "data": data, "run": run,
            "best": run / (run / "best").read_text().strip()}


def test_synth_layout(pipeline):
    data = pipeline["data"]
    assert (data / "manifest.txt").exists()
    assert len(list(data.glob("*.sfb"))) == 10
    header = (data / "manifest.txt").read_text().splitlines()[:2]
    assert header == ["C=3", "D=10"]


def test_train_outputs(pipeline):
    run = pipeline["run"]
    csv = (run / "epochs.csv").read_text().splitlines()
    assert csv[0].startswith("epoch,lr,")
    assert len(csv) == 4
    assert (run / "epoch_002.ckpt").exists()
    assert pipeline["best"].exists()


def test_eval_offline_report(pipeline, capsys, tmp_path):
    rc = main(["eval", "--checkpoint", str(pipeline["best"]),
               "--data", str(pipeline["data"]), "--split", "test",
               "--report", str(tmp_path / "rep")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "metric" in out and "±" in out
    assert (tmp_path / "rep/report.txt").exists()
    kv = (tmp_path / "rep/report.kv").read_text()
    assert re.search(r"^mean\.accuracy=0\.\d+", kv, re.M) or "mean.accuracy=1.0" in kv


def test_eval_online_prints_certificates(pipeline, capsys):
    rc = main(["eval", "--checkpoint", str(pipeline["best"]),
               "--data", str(pipeline["data"]), "--split", "val",
               "--online", "--probes", "5"])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.count("CERTIFICATE PASS (probed 5 timesteps)") == 2


def test_predict_line_format(pipeline, capsys, tmp_path):
    manifest = (pipeline["data"] / "manifest.txt").read_text().splitlines()
    test_ids = manifest[manifest.index("[test]") + 1:]
    sfb = pipeline["data"] / f"{test_ids[0]}.sfb"
    rc = main(["predict", "--checkpoint", str(pipeline["best"]),
               "--input", str(sfb), "--ribbon", str(tmp_path / "rib")])
    assert rc == 0
    lines = capsys.readouterr().out.splitlines()
    assert all(re.fullmatch(r"\d+,\d+,0\.\d{6}|\d+,\d+,1\.000000", ln)
               for ln in lines)
    assert [int(ln.split(",")[0]) for ln in lines] == list(range(len(lines)))
    assert (tmp_path / "rib.csv").exists() and (tmp_path / "rib.svg").exists()


def test_set_override_wins(pipeline, tmp_path, capsys):
    rc = main(["train", "--config", str(pipeline["cfg"]), "--data",
               str(pipeline["data"]), "--out", str(tmp_path / "r1"),
               "--quiet", "--set", "train.epochs=1"])
    assert rc == 0
    assert len((tmp_path / "r1/epochs.csv").read_text().splitlines()) == 2


def test_resume_continues(pipeline, tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["train", "--config", str(pipeline["cfg"]), "--data",
                 str(pipeline["data"]), "--out", str(out), "--quiet",
                 "--set", "train.epochs=2"]) == 0
    assert main(["train", "--config", str(pipeline["cfg"]), "--data",
                 str(pipeline["data"]), "--out", str(out), "--quiet",
                 "--set", "train.epochs=4",
                 "--resume", str(out / "epoch_001.ckpt")]) == 0
    assert (out / "epoch_003.ckpt").exists()
    assert len((out / "epochs.csv").read_text().splitlines()) == 5


# ---------------------------------------------------------------------------
# exit codes


def test_unknown_config_key_is_usage_error(pipeline, tmp_path, capsys):
    rc = main(["train", "--config", str(pipeline["cfg"]), "--data",
               str(pipeline["data"]), "--out", str(tmp_path / "x"),
               "--set", "model.bogus=1"])
    assert rc == 2
    assert "model.bogus" in capsys.readouterr().err


def test_single_class_spec_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text(SPEC_TEXT.replace("c=3", "c=1"))
    assert main(["synth", "--spec", str(bad), "--out", str(tmp_path / "d")]) == 2


def test_unknown_split_is_usage_error(pipeline, capsys):
    rc = main(["eval", "--checkpoint", str(pipeline["best"]),
               "--data", str(pipeline["data"]), "--split", "holdout"])
    assert rc == 2


def test_missing_checkpoint_is_data_error(pipeline, capsys):
    rc = main(["eval", "--checkpoint", str(pipeline["root"] / "nope.ckpt"),
               "--data", str(pipeline["data"])])
    assert rc == 3


def test_missing_data_dir_is_data_error(pipeline, tmp_path, capsys):
    rc = main(["eval", "--checkpoint", str(pipeline["best"]),
               "--data", str(tmp_path / "empty")])
    assert rc == 3


def test_corrupt_checkpoint_is_data_error(pipeline, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"\x00" * 100)
    rc = main(["eval", "--checkpoint", str(bad), "--data", str(pipeline["data"])])
    assert rc == 3
    assert "data error" in capsys.readouterr().err


def test_truncated_checkpoint_is_data_error(pipeline, tmp_path, capsys):
    raw = pipeline["best"].read_bytes()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(raw[:len(raw) - 200])
    rc = main(["eval", "--checkpoint", str(cut), "--data", str(pipeline["data"])])
    assert rc == 3


def test_mismatched_data_is_data_error(pipeline, tmp_path, capsys):
    other = tmp_path / "wide.txt"
    other.write_text(SPEC_TEXT.replace("d_in=10", "d_in=12"))
    assert main(["synth", "--spec", str(other), "--out", str(tmp_path / "d")]) == 0
    rc = main(["eval", "--checkpoint", str(pipeline["best"]),
               "--data", str(tmp_path / "d")])
    assert rc == 3
    assert "incompatible" in capsys.readouterr().err


def test_thread_cap_respected(pipeline, capsys, monkeypatch):
    monkeypatch.setenv("SAHC_THREADS", "1")
    assert main(["eval", "--checkpoint", str(pipeline["best"]),
                 "--data", str(pipeline["data"])]) == 0
    monkeypatch.setenv("SAHC_THREADS", "lots")
    assert main(["eval", "--checkpoint", str(pipeline["best"]),
                 "--data", str(pipeline["data"])]) == 2


def test_module_invocation_smoke(tmp_path):
    spec = tmp_path / "s.txt"
    spec.write_text(SPEC_TEXT)
    proc = subprocess.run([sys.executable, "-m", "sahc.cli", "synth",
                           "--spec", str(spec), "--out", str(tmp_path / "d")],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "wrote 10 videos" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "sahc.cli"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
