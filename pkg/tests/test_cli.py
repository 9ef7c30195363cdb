import csv
import subprocess
import sys

import pytest

from reprosim import cli, data, models, reprogram as rp
from reprosim.encoder import load_encoder

TINY_FLAGS = [
    "--image_size", "12", "--target_size", "6", "--source_classes", "4",
    "--group_size", "2", "--source_per_class", "20", "--benign_per_class", "40",
    "--target_train", "40", "--target_test", "20", "--hidden", "24",
    "--model_epochs", "5", "--encoder_hidden", "24", "--embed_dim", "6",
    "--encoder_epochs", "3", "--pair_count", "200", "--k", "4",
    "--attack_epochs", "2", "--attack_batch", "10", "--directions", "4",
    "--q_grid", "2,4", "--finetune_q_grid", "2,3", "--finetune_epochs", "1",
    "--table3_directions", "3", "--table3_epochs", "2", "--tr_sizes", "20,40",
    "--surrogate_hidden", "28",
]


def run_cli(*args):
    return cli.main(list(args))


def test_selftest_exit_code(capsys):
    assert run_cli("selftest") == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


def test_gen_data_roundtrip(tmp_path, capsys):
    out = tmp_path / "src.rpgd"
    code = run_cli("gen-data", "--kind", "source", "--seed", "3", "--out", str(out), *TINY_FLAGS)
    assert code == 0
    ds = data.load_dataset(out)
    assert len(ds) == 80 and ds.domain == "source"


def test_train_source_and_reuse(tmp_path):
    clf_path = tmp_path / "clf.rpgw"
    log_path = tmp_path / "train.csv"
    code = run_cli("train-source", "--seed", "3", "--out", str(clf_path), "--log", str(log_path), *TINY_FLAGS)
    assert code == 0
    clf = models.load_classifier(clf_path)
    assert clf.num_classes == 4
    with open(log_path) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 5
    assert {"epoch", "loss", "accuracy"} == set(rows[0])


def test_train_encoder_and_calibrate(tmp_path, capsys):
    enc_path = tmp_path / "enc.rpgw"
    assert run_cli("train-encoder", "--seed", "3", "--out", str(enc_path), *TINY_FLAGS) == 0
    enc = load_encoder(enc_path)
    assert enc.embed_dim == 6

    report = tmp_path / "calib.csv"
    code = run_cli("calibrate", "--seed", "3", "--encoder", str(enc_path), "--out", str(report), *TINY_FLAGS)
    assert code == 0
    with open(report) as f:
        row = next(csv.DictReader(f))
    assert float(row["threshold"]) > 0
    assert float(row["achieved_fpr"]) <= 0.2


def test_attack_whitebox_writes_program(tmp_path, capsys):
    prog_path = tmp_path / "prog.rpgw"
    curve_path = tmp_path / "curve.csv"
    mapping_path = tmp_path / "mapping.csv"
    code = run_cli(
        "attack-whitebox", "--seed", "4", "--out", str(prog_path),
        "--curve", str(curve_path), "--mapping-out", str(mapping_path), *TINY_FLAGS,
    )
    assert code == 0
    prog = rp.load_program(prog_path)
    assert prog.weights.shape == (12, 12, 3)
    mapping = rp.LabelMapping.load_csv(mapping_path)
    assert mapping.groups == ((0, 1), (2, 3))
    with open(curve_path) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 3  # initial + 2 epochs


def test_attack_blackbox_with_trace_and_log(tmp_path, capsys):
    prog_path = tmp_path / "prog.rpgw"
    trace_path = tmp_path / "trace.csv"
    det_log = tmp_path / "det.csv"
    code = run_cli(
        "attack-blackbox", "--seed", "5", "--out", str(prog_path),
        "--trace", str(trace_path), "--detection-log", str(det_log), *TINY_FLAGS,
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "norm_detection_rate" in out
    with open(trace_path) as f:
        trace = list(csv.DictReader(f))
    assert trace[0]["purpose"] == "baseline"
    purposes = {r["purpose"] for r in trace}
    assert purposes == {"baseline", "direction", "eval"}
    with open(det_log) as f:
        log = list(csv.DictReader(f))
    assert log[0]["mean_knn_distance"] == "warmup"
    assert {r["verdict"] for r in log} <= {"pass", "flagged"}
    # trace indices are sequential and account for every answered query
    assert [int(r["query_index"]) for r in trace] == list(range(len(trace)))
    assert len(log) == len(trace)


def test_attack_surrogate(tmp_path, capsys):
    prog_path = tmp_path / "prog.rpgw"
    code = run_cli("attack-surrogate", "--seed", "6", "--out", str(prog_path), *TINY_FLAGS)
    assert code == 0
    out = capsys.readouterr().out
    assert "surrogate_whitebox_acc" in out
    assert prog_path.exists()


def test_report_csv_deterministic(tmp_path):
    out1, out2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    for out in (out1, out2):
        code = run_cli(
            "report", "--seed", "7", "--scenario", "table4-analog",
            "--out", str(out), "--format", "csv", *TINY_FLAGS,
        )
        assert code == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_config_error_exit_code(tmp_path, capsys):
    code = run_cli("report", "--seed", "1", "--scenario", "bogus")
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_numeric_failure_exit_code(tmp_path, capsys):
    # banning with an unreachable threshold exhausts the single account and
    # aborts the attack: numeric-failure exit, partial program still saved
    prog_path = tmp_path / "prog.rpgw"
    code = run_cli(
        "attack-blackbox", "--seed", "9", "--out", str(prog_path),
        "--ban_on_detect", "true", "--threshold", "1e9", "--accounts", "1",
        *TINY_FLAGS,
    )
    assert code == 3
    assert "numeric failure" in capsys.readouterr().err
    assert prog_path.exists()


def test_missing_file_exit_code(capsys):
    code = run_cli("train-source", "--seed", "1", "--data", "/nonexistent.rpgd", "--out", "/tmp/x.rpgw")
    assert code == 2


def test_config_file_flag(tmp_path):
    ini = tmp_path / "cfg.ini"
    ini.write_text("[data]\nimage_size = 12\ntarget_size = 6\nsource_classes = 4\nsource_per_class = 20\n\n[attack]\ngroup_size = 2\n")
    out = tmp_path / "src.rpgd"
    code = run_cli("gen-data", "--kind", "source", "--seed", "1", "--config", str(ini), "--out", str(out))
    assert code == 0
    assert data.load_dataset(out).sample_dims == (12, 12, 3)


def test_seed_required():
    with pytest.raises(SystemExit) as err:
        cli.build_parser().parse_args(["gen-data", "--kind", "source", "--out", "/tmp/x"])
    assert err.value.code == 2


def test_console_script_entrypoint():
    result = subprocess.run(
        [sys.executable, "-m", "reprosim.cli", "selftest"], capture_output=True, text=True
    )
    assert result.returncode == 0
    assert "all 6 checks passed" in result.stdout
