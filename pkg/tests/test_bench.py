import json

import numpy as np
import pytest

from dualtta.bench import metrics
from dualtta.bench.experiment import (CSV_COLUMNS, ExperimentConfig, PretrainConfig, compare_methods,
                                      csv_text, emit_reports, run_experiment, run_stream, score,
                                      source_model)
from dualtta.bench.metrics import macro_f1, per_group_accuracy
from dualtta.bench.stats import wilcoxon_signed_rank
from dualtta.cli import main
from dualtta.data import SpuriousDatasetConfig, gen_spurious_dataset, make_stream
from dualtta.errors import ConfigurationError, InsufficientDataError
from dualtta.tta import AdapterConfig

from oracles import wilcoxon_enumeration_p, wilcoxon_permutation_p

SMALL = {
    "dataset": {"n_train": 160, "n_val": 32, "n_test": 128},
    "pretrain": {"epochs": 1},
    "seeds": [0],
    "methods": ["noadapt", "dualtta"],
}


# -- metrics ------------------------------------------------------------------

def test_all_correct():
    y = np.array([0, 1, 0, 1])
    m = metrics(y, y, np.array([0, 1, 2, 3]))
    assert m["accuracy"] == m["worst_group"] == m["macro_f1"] == 1.0


def test_constant_prediction_macro_f1():
    y = np.array([0, 0, 1, 1])
    m = metrics(np.zeros(4, int), y, np.array([0, 1, 2, 3]), num_classes=2)
    assert m["accuracy"] == 0.5
    assert m["macro_f1"] == pytest.approx(1 / 3)
    assert m["per_group"] == [1.0, 1.0, 0.0, 0.0] and m["worst_group"] == 0.0


def test_empty_group_is_rejected():
    with pytest.raises(ConfigurationError):
        per_group_accuracy([0, 1], [0, 1], [0, 2], n_groups=3)
    with pytest.raises(ConfigurationError):
        per_group_accuracy([0, 1], [0], [0, 1])


def test_macro_f1_matches_confusion_counts():
    rng = np.random.default_rng(0)
    y, p = rng.integers(0, 3, 200), rng.integers(0, 3, 200)
    f1 = []
    for c in range(3):
        tp = np.sum((p == c) & (y == c))
        f1.append(2 * tp / (np.sum(p == c) + np.sum(y == c)))
    assert macro_f1(p, y, 3) == pytest.approx(np.mean(f1), abs=1e-12)


# -- wilcoxon -----------------------------------------------------------------

def test_wilcoxon_all_positive_six():
    out = wilcoxon_signed_rank([1.1, 2.2, 3.3, 4.4, 5.5, 6.6], [1, 2, 3, 4, 5, 6])
    assert out["W_minus"] == 0 and out["W"] == 0
    assert out["p_two_sided"] == 0.03125
    assert out["method_used"] == "exact"


def test_wilcoxon_needs_nonzero_differences():
    with pytest.raises(InsufficientDataError):
        wilcoxon_signed_rank([1, 2, 3, 4, 5], [1, 2, 3, 4, 5])
    with pytest.raises(InsufficientDataError):
        wilcoxon_signed_rank([1, 2, 3, 4, 5], [0, 0, 0, 0, 5])


@pytest.mark.parametrize("seed", range(6))
def test_wilcoxon_exact_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = 6 + seed
    a = np.round(rng.normal(0.3, 1, n), 1)  # rounding forces tied |d|
    b = np.zeros(n)
    out = wilcoxon_signed_rank(a, b)
    assert out["p_two_sided"] == pytest.approx(wilcoxon_enumeration_p(a, b), abs=1e-12)


def test_wilcoxon_normal_approx_matches_permutation_oracle():
    rng = np.random.default_rng(9)
    a, b = rng.normal(0.35, 1, 25), np.zeros(25)
    out = wilcoxon_signed_rank(a, b)
    assert out["method_used"] == "normal-approx" and out["n"] == 25
    assert abs(out["p_two_sided"] - wilcoxon_permutation_p(a, b, 100_000)) < 0.02


def test_wilcoxon_is_symmetric():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=12), rng.normal(size=12)
    x, y = wilcoxon_signed_rank(a, b), wilcoxon_signed_rank(b, a)
    assert x["p_two_sided"] == y["p_two_sided"] and x["W_plus"] == y["W_minus"]


# -- experiment ---------------------------------------------------------------

@pytest.fixture(scope="module")
def small_cfg():
    return ExperimentConfig.from_dict(SMALL)


@pytest.fixture(scope="module")
def small_doc(small_cfg):
    return run_experiment(small_cfg)


def test_config_roundtrip_and_validation(small_cfg):
    again = ExperimentConfig.from_dict(json.loads(json.dumps(small_cfg.to_dict())))
    assert again.to_dict() == small_cfg.to_dict()
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"methods": ["sar"]})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"seeds": [0, 0]})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"optimizer": "adam"})


def test_report_rows_and_csv(small_doc, tmp_path):
    assert len(small_doc["results"]) == 2
    text = csv_text(small_doc)
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 1 + 2
    assert all(line.endswith(",") for line in lines[1:])  # wall clock left blank
    j1, c1 = emit_reports(small_doc, tmp_path / "a")
    j2, c2 = emit_reports(small_doc, tmp_path / "b")
    assert c1.read_bytes() == c2.read_bytes() and j1.read_bytes() == j2.read_bytes()
    assert json.loads(j1.read_text())["config"]["seeds"] == [0]


def test_metrics_recompute_from_logs(small_doc, small_cfg):
    for r in small_doc["results"]:
        again = score(r["method"], r["seed"], r["scenario"], r["batches"], small_cfg.dataset.num_classes)
        assert again.avg_acc == r["avg_acc"] and again.worst_group_acc == r["worst_group_acc"]
        assert again.pct_adapt == r["pct_adapt"] and again.pct_corr_adapt == r["pct_corr_adapt"]
        assert 0 <= r["pct_corr_adapt"] <= r["pct_adapt"] <= 100
        assert sum(len(l["labels"]) for l in r["batches"]) == small_cfg.dataset.n_test


def test_noadapt_is_bitwise_deterministic_and_never_adapts(small_cfg):
    splits = gen_spurious_dataset(SpuriousDatasetConfig(n_train=160, n_val=32, n_test=128, seed=0))
    model, _ = source_model(small_cfg, 0, splits)
    batches = make_stream(splits["target_test"], small_cfg.scenarios[0], 0)
    a = run_stream(model, "noadapt", AdapterConfig(), batches, 0, 2)
    b = run_stream(model, "noadapt", AdapterConfig(), batches, 0, 2)
    assert a.avg_acc == b.avg_acc and a.macro_f1 == b.macro_f1 and a.per_group == b.per_group
    assert a.pct_adapt == 0 and a.pct_corr_adapt == 0
    assert not any(l["updated"] for l in a.batches)


def test_compare_methods_reports_insufficient_data(small_doc):
    w = small_doc["wilcoxon"]
    assert set(w) == {"noadapt"} and w["noadapt"]["status"] == "insufficient-data"


def test_compare_methods_pairs_conditions():
    from dualtta.bench.experiment import ExperimentResult

    def fake(method, accs):
        logs = [{"corruption": f"c{i}", "predictions": [1] * int(10 * a) + [0] * (10 - int(10 * a)),
                 "labels": [1] * 10} for i, a in enumerate(accs)]
        return ExperimentResult(method, 0, "mixed_shift", 0, 0, 0, [], 0, 0, 0, logs)

    out = compare_methods([fake("dualtta", [0.9] * 6), fake("tent", [0.5, 0.4, 0.3, 0.6, 0.2, 0.1])])
    assert out["tent"]["n_conditions"] == 6 and out["tent"]["p_two_sided"] == 0.03125


# -- cli ----------------------------------------------------------------------

def test_cli_unknown_flag(capsys):
    assert main(["bench", "--frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_cli_theory_t2(tmp_path):
    assert main(["theory", "--check", "t2", "--configs", "20", "--trials", "2000", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "theory_t2.json").read_text())
    assert doc["n_passed"] == 20 and len(doc["reports"]) == 20


def test_cli_bench_single_cell(tmp_path):
    cfg = dict(SMALL, methods=["tent"])
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["bench", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "out")]) == 0
    rows = (tmp_path / "out" / "results.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("tent,0,mild,")


def test_cli_pretrain_then_adapt(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps(SMALL))
    ckpt = tmp_path / "m.json"
    assert main(["pretrain", "--config", str(tmp_path / "cfg.json"), "--out", str(ckpt)]) == 0
    assert main(["adapt", "--model", str(ckpt), "--method", "dualtta", "--scenario", "mixed_shift",
                 "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "run")]) == 0
    doc = json.loads((tmp_path / "run" / "results.json").read_text())
    assert doc["results"][0]["scenario"] == "mixed_shift"


def test_cli_bad_config_is_contract_error(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"methods": ["sar"]}))
    assert main(["bench", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path)]) == 1
    assert main(["adapt", "--model", str(tmp_path / "missing.json"), "--method", "tent",
                 "--out", str(tmp_path)]) == 1
