import itertools
import json
import math

import jsonschema
import numpy as np
import pytest

import intapt


def tiny_overrides():
    return {
        "seed": 7,
        "regime_seeds": [1, 2],
        "corpus": {"n_l2_transcripts": 20, "n_l1_pretrain": 40, "n_l1_dev": 8,
                   "n_l1_test": 8, "max_tokens": 4},
        "backbone": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32, "tap_layer": 0},
        "pretrain": {"min_epochs": 1, "max_epochs": 1, "target_wer": 1.01},
        "accent": {"d_acc": 8, "hidden": 16, "regressor_hidden": 8, "epochs": 2},
        "mine": {"hidden": 8},
        "prompt": {"length": 2, "d_ff": 16, "n_heads": 2, "param_cap": 2.0},
        "train": {"batch_size": 8, "epochs": 1},
    }


def log_softmax(x):
    x = x - x.max(axis=1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


def brute_force_ctc(log_probs, target):
    """-log of the summed probability of every path collapsing to target."""
    frames, classes = log_probs.shape
    total = 0.0
    for path in itertools.product(range(classes), repeat=frames):
        collapsed = [k for i, k in enumerate(path) if k != 0 and (i == 0 or path[i - 1] != k)]
        if collapsed == list(target):
            total += math.exp(sum(log_probs[t, k] for t, k in enumerate(path)))
    return -math.log(total)


def test_ctc_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(10):
        lp = log_softmax(rng.normal(size=(4, 3)))
        target = [1, 2]
        assert intapt.ctc_loss(lp, target) == pytest.approx(brute_force_ctc(lp, target), abs=1e-9)
        assert intapt.ctc_loss_oracle(lp, target) == pytest.approx(intapt.ctc_loss(lp, target))
    loss, grad = intapt.ctc_loss_and_grad(lp, target)
    assert grad.shape == lp.shape
    assert np.all(np.isfinite(grad))


def test_decoding_and_wer():
    lp = np.zeros((4, 3))
    lp[0, 1] = lp[1, 1] = lp[2, 0] = lp[3, 2] = 1.0
    assert intapt.greedy_decode(lp) == [1, 2]
    assert intapt.wer([1, 2, 3], [1, 3]) == pytest.approx(1 / 3)
    with pytest.raises(intapt.ConfigError):
        intapt.wer([], [1])


def test_config_validation():
    cfg = intapt.default_config()
    assert intapt.validate_config(cfg) == cfg
    with pytest.raises(intapt.ConfigError):
        intapt.merge_config({"train": {"lambda_mi": -1}})
    with pytest.raises(intapt.ConfigError, match="unknown key"):
        intapt.merge_config({"train": {"lamda": 1}})
    assert issubclass(intapt.ConfigError, intapt.Error)
    assert intapt.config_hash(cfg) == intapt.config_hash(intapt.default_config())


def test_corpus_is_deterministic(tmp_path):
    cfg = intapt.merge_config(tiny_overrides())
    a = intapt.build_corpus(cfg)
    b = intapt.build_corpus(cfg)
    a.save(tmp_path / "a.bin")
    b.save(tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    back = intapt.load_corpus(tmp_path / "a.bin")
    assert back.config_hash == a.config_hash
    test_ids = back.split("l2_test")
    assert test_ids and set(test_ids).isdisjoint(back.split("l2_train"))
    u = back.get(test_ids[0])
    assert u.features.shape[1] == back.d_feat
    assert back.group(u.accent_id) in {"MFA", "LFA", "UA"}
    (tmp_path / "bad.bin").write_bytes((tmp_path / "a.bin").read_bytes()[:-7])
    with pytest.raises(intapt.StageError):
        intapt.load_corpus(tmp_path / "bad.bin")


def test_pipeline_report_matches_schema(tmp_path):
    cfg = intapt.merge_config(tiny_overrides())
    report = intapt.run_experiment(cfg, tmp_path / "exp")
    jsonschema.validate(report, intapt.report_schema())
    intapt.validate_report(report)
    assert set(report["methods"]) == {"backbone", "finetune", "prompt_ctc", "intapt"}
    assert all(r["backbone_unchanged"] and r["am_unchanged"] for r in report["runs"])
    on_disk = json.loads((tmp_path / "exp" / "report" / "report.json").read_text())
    assert on_disk == report
    assert intapt.build_report(tmp_path / "exp") == report
    assert "L2 test WER" in intapt.format_tables(report)

    broken = json.loads(json.dumps(report))
    broken["methods"]["intapt"]["l2_group"]["ALL"]["values"][0] += 0.25
    with pytest.raises(intapt.InvariantViolation):
        intapt.validate_report(broken)


def test_output_root(monkeypatch):
    monkeypatch.setenv(intapt.OUTPUT_ROOT_ENV, "/tmp/somewhere")
    assert str(intapt.output_root()) == "/tmp/somewhere"
    assert str(intapt.output_root("given")) == "given"
