import json

import numpy as np
import pytest

from plsp.evalcli import (MetricsRecord, beta_sup_errors, build_train_config,
                          check_lambda_zero, cli_main, macro_micro_f1,
                          parse_config_file)


def brute_force_f1(preds, truths, l):
    """Confusion-matrix reference, computed pair by pair."""
    conf = np.zeros((l, l), dtype=int)
    for p, t in zip(preds, truths):
        conf[t, p] += 1
    f1s = []
    for j in range(l):
        tp = conf[j, j]
        fp = conf[:, j].sum() - tp
        fn = conf[j, :].sum() - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    tp_all = np.trace(conf)
    fp_all = conf.sum() - tp_all
    micro = 2 * tp_all / (2 * tp_all + fp_all + fp_all) if conf.sum() else 0.0
    return float(np.mean(f1s)), float(micro)


def test_perfect_predictions():
    assert macro_micro_f1([0, 1, 2, 1], [0, 1, 2, 1], 3) == (1.0, 1.0)


def test_micro_equals_accuracy():
    rng = np.random.default_rng(0)
    for _ in range(20):
        l = int(rng.integers(3, 6))
        n = int(rng.integers(5, 40))
        preds = rng.integers(0, l, size=n)
        truths = rng.integers(0, l, size=n)
        _, micro = macro_micro_f1(preds, truths, l)
        assert abs(micro - (preds == truths).mean()) < 1e-12


def test_hand_counted_confusion_matrix():
    # truths [0,0,1,2], preds [0,1,1,1]:
    # class 0: tp=1 fp=0 fn=1 -> f1 = 2/3
    # class 1: tp=1 fp=2 fn=0 -> f1 = 1/2
    # class 2: tp=0 fp=0 fn=1 -> f1 = 0
    macro, micro = macro_micro_f1([0, 1, 1, 1], [0, 0, 1, 2], 3)
    assert abs(macro - (2 / 3 + 1 / 2 + 0) / 3) < 1e-12
    assert abs(micro - 0.5) < 1e-12


def test_absent_class_counts_as_zero():
    macro, micro = macro_micro_f1([0, 0], [0, 0], 3)
    assert abs(macro - 1 / 3) < 1e-12
    assert micro == 1.0


def test_matches_brute_force_reference():
    rng = np.random.default_rng(1)
    for _ in range(50):
        l = int(rng.integers(3, 7))
        n = int(rng.integers(1, 60))
        preds = rng.integers(0, l, size=n)
        truths = rng.integers(0, l, size=n)
        got = macro_micro_f1(preds, truths, l)
        ref = brute_force_f1(preds, truths, l)
        # the reference computes 2PR/(P+R); identical counts, so the values
        # agree to float association error
        assert abs(got[0] - ref[0]) < 1e-12
        assert abs(got[1] - ref[1]) < 1e-12


def test_length_mismatch_raises():
    with pytest.raises(ValueError):
        macro_micro_f1([0, 1], [0], 3)


def test_metrics_record_roundtrip():
    rec = MetricsRecord(epoch=3, loss_sup=0.5, reg_u=0.01, loss_cl=0.2,
                        loss_total=0.71, macro_f1=0.9, micro_f1=0.91,
                        train_macro_f1=0.95, train_micro_f1=0.96,
                        h_pass_rate=0.4, tau=[0.75, 0.5], n_labeled=20,
                        n_unlabeled=80, wall_clock_s=1.25)
    line = rec.to_json_line()
    assert MetricsRecord.from_json_line(line) == rec
    assert json.loads(line)["epoch"] == 3


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# comment line\n"
        "gamma0 = 0.5\n"
        "k = 25\n"
        "hidden_dims = 32,16\n"
        "deterministic = true\n"
        "learning_rate = 0.02  # trailing comment\n",
        encoding="utf-8")
    values = parse_config_file(cfg)
    assert values == {"gamma0": 0.5, "k": 25, "hidden_dims": (32, 16),
                      "deterministic": True, "learning_rate": 0.02}


def test_config_file_unknown_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus = 1\n", encoding="utf-8")
    with pytest.raises(ValueError):
        parse_config_file(cfg)


def test_cli_flags_override_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("gamma0 = 0.5\nk = 25\n", encoding="utf-8")

    class Args:
        config = str(cfg)
        gamma0 = 0.9
    for f in ("lambda0", "tau0", "k", "pretrain_epochs", "ss_epochs",
              "inner_iters", "batch_labeled", "batch_unlabeled",
              "learning_rate", "momentum", "weight_decay", "beta",
              "tau_floor", "seed", "deterministic", "hidden_dims",
              "eig_floor"):
        setattr(Args, f, None)
    config = build_train_config(Args)
    assert config.gamma0 == 0.9  # flag wins
    assert config.k == 25        # file value kept


def test_beta_report_contains_candidates():
    rows = beta_sup_errors(grid=4001)
    names = [r[0] for r in rows]
    assert "default" in names and "pi^2/8" in names
    default_err = [e for n, _, e in rows if n == "default"][0]
    assert default_err < 0.0095 + 1e-3


def test_lambda_zero_check_passes():
    res = check_lambda_zero(seed=1)
    assert res.passed, res.detail


def test_worker_cap_env(monkeypatch):
    from plsp.evalcli import worker_cap
    assert worker_cap() == 1
    monkeypatch.setenv("PLSP_THREADS", "4")
    assert worker_cap() == 1  # sequential implementation, cap satisfied
    monkeypatch.setenv("PLSP_THREADS", "0")
    with pytest.raises(ValueError):
        worker_cap()


# -- CLI integration -----------------------------------------------------------

def _run(args):
    return cli_main(args)


def test_cli_generate_train_eval_chain(tmp_path, capsys):
    data = tmp_path / "train.plsp"
    test = tmp_path / "test.plsp"
    ckpt = tmp_path / "model.plsw"
    metrics = tmp_path / "metrics.jsonl"
    assert _run(["generate", "--out", str(data), "--test-out", str(test),
                 "--n", "120", "--n-test", "30", "--classes", "3",
                 "--separation", "6.0", "--strategy", "fps", "--q", "0.4",
                 "--seed", "1"]) == 0
    assert _run(["train", "--data", str(data), "--test", str(test),
                 "--out", str(ckpt), "--metrics", str(metrics),
                 "--pretrain-epochs", "2", "--ss-epochs", "2",
                 "--inner-iters", "4", "--batch-labeled", "8",
                 "--batch-unlabeled", "16", "--k", "10",
                 "--hidden-dims", "12,6", "--seed", "1"]) == 0
    lines = metrics.read_text().strip().splitlines()
    assert len(lines) == 3  # 2 epochs + summary
    records = [MetricsRecord.from_json_line(ln) for ln in lines]
    assert records[-1].is_summary
    assert not records[0].is_summary
    capsys.readouterr()
    assert _run(["eval", "--checkpoint", str(ckpt), "--data", str(test)]) == 0
    out = capsys.readouterr().out.strip()
    rec = MetricsRecord.from_json_line(out)
    assert 0.0 <= rec.micro_f1 <= 1.0


def test_cli_deterministic_metrics_bytes(tmp_path):
    data = tmp_path / "train.plsp"
    assert _run(["generate", "--out", str(data), "--n", "80", "--classes", "3",
                 "--strategy", "uss", "--seed", "7"]) == 0
    payloads = []
    for run in range(2):
        metrics = tmp_path / f"m{run}.jsonl"
        ckpt = tmp_path / f"c{run}.plsw"
        assert _run(["train", "--data", str(data), "--out", str(ckpt),
                     "--metrics", str(metrics), "--seed", "7", "--deterministic",
                     "--pretrain-epochs", "1", "--ss-epochs", "2",
                     "--inner-iters", "3", "--batch-labeled", "8",
                     "--batch-unlabeled", "16", "--k", "5",
                     "--hidden-dims", "10,5"]) == 0
        payloads.append(metrics.read_bytes())
    assert payloads[0] == payloads[1]


def test_cli_exit_code_2_on_unknown_flag():
    assert _run(["generate", "--does-not-exist", "x"]) == 2
    assert _run(["no-such-command"]) == 2


def test_cli_exit_code_3_on_unreadable_file(tmp_path):
    assert _run(["eval", "--checkpoint", str(tmp_path / "nope.plsw"),
                 "--data", str(tmp_path / "nope.plsp")]) == 3
    bad = tmp_path / "bad.plsp"
    bad.write_bytes(b"XXXXgarbage")
    assert _run(["pretrain", "--data", str(bad),
                 "--out", str(tmp_path / "o.plsw")]) == 3


def test_cli_exit_code_4_on_bad_parameter(tmp_path):
    assert _run(["generate", "--out", str(tmp_path / "d.plsp"),
                 "--strategy", "fps", "--q", "1.0"]) == 4


def test_cli_df_baseline_runs(tmp_path):
    data = tmp_path / "train.plsp"
    metrics = tmp_path / "df.jsonl"
    assert _run(["generate", "--out", str(data), "--n", "60", "--classes", "3",
                 "--strategy", "fps", "--q", "0.3", "--seed", "2"]) == 0
    assert _run(["df-baseline", "--data", str(data), "--metrics", str(metrics),
                 "--epochs", "2", "--inner-iters", "3",
                 "--batch-unlabeled", "16", "--hidden-dims", "10,5",
                 "--seed", "2"]) == 0
    lines = metrics.read_text().strip().splitlines()
    assert len(lines) == 3
    assert all(MetricsRecord.from_json_line(ln) is not None for ln in lines)


def test_cli_sweep_k_reports_each_k(tmp_path, capsys):
    data = tmp_path / "train.plsp"
    out = tmp_path / "sweep.jsonl"
    assert _run(["generate", "--out", str(data), "--n", "60", "--classes", "3",
                 "--strategy", "uss", "--seed", "3"]) == 0
    assert _run(["sweep-k", "--data", str(data), "--test", str(data),
                 "--ks", "0,5,60", "--out", str(out),
                 "--pretrain-epochs", "1", "--ss-epochs", "1",
                 "--inner-iters", "2", "--batch-labeled", "4",
                 "--batch-unlabeled", "8", "--hidden-dims", "8,4",
                 "--seed", "3"]) == 0
    lines = [json.loads(ln) for ln in out.read_text().strip().splitlines()]
    assert [ln["k"] for ln in lines] == [0, 5, 60]
    capsys.readouterr()


def test_cli_verify_small_run(capsys):
    code = _run(["verify", "--seed", "0", "--instances", "6",
                 "--mc-samples", "200000", "--bound-samples", "500"])
    out = capsys.readouterr().out
    assert code == 0, out
    assert out.count("PASS") == 3
    assert "beta-sup-error" in out
