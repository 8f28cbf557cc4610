import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualtta.bench.checks import dual_gradcheck
from dualtta.errors import ConfigurationError
from dualtta.model import build_reference_net, forward, predict_proba
from dualtta.ndgrad import Tape, Tensor, backward
from dualtta.tta import (D_MINUS, D_PLUS, METHODS, NEITHER, AdapterConfig, BaselineConfig,
                         DualTtaConfig, PartitionRecord, alpha_weight, beta_weight, diff, dual_loss,
                         entropy, make_adapter, make_triple, partition, weights)


def test_entropy_examples():
    assert entropy([0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)
    assert entropy([1.0, 0.0]) < 3e-11
    oracle = -sum(p * math.log(p) for p in (0.7, 0.2, 0.1))
    assert entropy([0.7, 0.2, 0.1]) == pytest.approx(oracle, abs=1e-12)
    assert oracle == pytest.approx(0.801819, abs=1e-6)


def test_diff_examples():
    assert diff([0.9, 0.1], [0.3, 0.7]) == pytest.approx(0.6)
    assert diff([0.3, 0.7], [0.3, 0.7]) == 0
    assert diff([0.4, 0.6], [0.6, 0.4]) == pytest.approx(0.2)
    assert diff([0.5, 0.5], [0.2, 0.8]) == pytest.approx(0.3)  # tie -> lowest index


def test_partition_predicates():
    cfg = DualTtaConfig()
    m = partition(np.array([0.6, 0.1, 0.6, 0.4, 0.5, 0.1]), np.array([0.05, 0.8, 0.8, 0.1, 0.7, 0.7]), cfg)
    assert m.tolist() == [D_PLUS, D_MINUS, NEITHER, NEITHER, NEITHER, NEITHER]


@settings(max_examples=200, deadline=None)
@given(sa=st.floats(-1, 1), sp=st.floats(-1, 1))
def test_partition_is_exclusive_and_exhaustive(sa, sp):
    cfg = DualTtaConfig()
    m = partition(np.array([sa]), np.array([sp]), cfg)[0]
    plus = sa > cfg.tau_sa and sp < cfg.tau_sp
    minus = sa < cfg.tau_sa and sp > cfg.tau_sp
    assert not (plus and minus)
    assert m == (D_PLUS if plus else D_MINUS if minus else NEITHER)


def test_weight_examples():
    cfg = DualTtaConfig()
    assert alpha_weight(0.4, 0.0, 0.7, cfg) == pytest.approx(3.0)
    assert beta_weight(0.4, cfg) == pytest.approx(1.0)
    oracle = math.exp(0.0) + math.exp(0.6) + math.exp(0.65)
    assert alpha_weight(0.4, 0.6, 0.05, cfg) == pytest.approx(oracle, abs=1e-12)
    assert oracle == pytest.approx(4.73766, abs=1e-5)


def test_weights_follow_membership():
    probs = np.array([[0.9, 0.1], [0.6, 0.4], [0.5, 0.5]])
    tr = make_triple(probs, probs[:, ::-1], probs)
    w = weights(tr, np.array([D_PLUS, D_MINUS, NEITHER]), DualTtaConfig())
    assert w[0] == pytest.approx(alpha_weight(tr.ent[0], tr.diff_sa[0], tr.diff_sp[0], DualTtaConfig()))
    assert w[1] == pytest.approx(math.exp(0.4 - tr.ent[1]))
    assert w[2] == 0


def test_triple_invariants():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(3), size=20)
    q = rng.dirichlet(np.ones(3), size=20)
    tr = make_triple(p, q, p)
    assert ((tr.diff_sa >= -1) & (tr.diff_sa <= 1)).all()
    assert ((tr.ent >= 0) & (tr.ent <= math.log(3) + 1e-9)).all()
    assert np.array_equal(tr.diff_sp, np.zeros(20))


def _probs_tensor(p):
    tape = Tape()
    return tape, tape.parameter("p", p)


def test_dual_loss_arithmetic():
    p = np.array([[0.5, 0.5], [0.9, 0.1]])
    _, t = _probs_tensor(p)
    empty = dual_loss(t, PartitionRecord(np.zeros(2, int), np.zeros(2)), 0.5)
    assert empty.value == 0.0
    # one D+ sample with alpha = 2 and Ent = 0.5 -> 1.0
    ent1 = entropy(p[1])
    rec = PartitionRecord(np.array([0, D_PLUS]), np.array([0.0, 2 * 0.5 / ent1]))
    assert dual_loss(t, rec, lam=7.0).value == pytest.approx(1.0)
    rec = PartitionRecord(np.array([D_MINUS, D_PLUS]), np.array([1.5, 2.0]))
    terms = dual_loss(t, rec, lam=0.5)
    assert terms.value == pytest.approx(2.0 * ent1 - 0.5 * 1.5 * math.log(2))
    assert terms.plus == pytest.approx(2.0 * ent1) and terms.minus == pytest.approx(1.5 * math.log(2))


def test_alpha_scaling_scales_gradient():
    p = np.array([[0.7, 0.3], [0.2, 0.8], [0.6, 0.4]])
    mem = np.array([D_PLUS, D_PLUS, NEITHER])
    grads = []
    for c in (1.0, 3.5):
        tape, t = _probs_tensor(p)
        loss = dual_loss(t, PartitionRecord(mem, c * np.array([2.0, 1.5, 0.0])), 0.5).total
        grads.append(backward(tape, loss, ["p"])["p"])
    np.testing.assert_allclose(grads[1], 3.5 * grads[0], rtol=1e-12)


def test_dual_loss_gradient_on_reference_net():
    assert dual_gradcheck(seed=1)["max_rel_error"] < 1e-4


# -- adapters ---------------------------------------------------------------------

def test_unknown_method():
    with pytest.raises(ConfigurationError):
        make_adapter("sar")


def test_config_roundtrip_and_validation():
    cfg = AdapterConfig.from_dict({"lr": 1e-3, "dual": {"lam": 0.25}, "baseline": {"tau_plpd": 0.2}})
    assert AdapterConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        AdapterConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ConfigurationError):
        DualTtaConfig(tau_sa=1.0)
    assert BaselineConfig().resolved_tau_ent(2) == pytest.approx(0.4 * math.log(2))


def _batches(splits, n=4, size=32):
    x = splits["target_test"]
    return [x.subset(range(i * size, (i + 1) * size)) for i in range(n)]


def test_noadapt_leaves_model_untouched(small_splits):
    model = build_reference_net(2, 3, 0)
    before = {k: v.copy() for k, v in model.params.items()}
    ad = make_adapter("noadapt")
    for b in _batches(small_splits):
        out = ad.adapt_step(model, b)
        assert out.n_plus == out.n_minus == 0 and not out.updated
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_tent_uniform_predictions_are_stationary(small_splits):
    model = build_reference_net(2, 3, 0)
    model.params["fc.weight"][:] = 0.0
    model.params["fc.bias"][:] = 0.0
    before = {k: v.copy() for k, v in model.params.items()}
    make_adapter("tent").adapt_step(model, _batches(small_splits)[0])
    for k in before:
        np.testing.assert_allclose(model.params[k], before[k], rtol=0, atol=1e-12)


@pytest.mark.parametrize("method", METHODS)
def test_adapt_step_contract(small_splits, method):
    model = build_reference_net(2, 3, 3)
    ad = make_adapter(method, AdapterConfig(), seed=1)
    b = _batches(small_splits)[0]
    before = predict_proba(model, b.images, norm_mode="batch")
    out = ad.adapt_step(model, b)
    # evaluation uses the pre-update forward
    np.testing.assert_allclose(out.probs, before, atol=1e-12)
    n_neither = int((out.record.membership == NEITHER).sum())
    assert out.n_plus + out.n_minus + n_neither == len(b.labels)
    assert (out.record.weights[out.record.membership != NEITHER] > 0).all()
    after = predict_proba(model, b.images, norm_mode="batch")
    assert out.updated == (not np.array_equal(after, before))


def test_second_identical_batch_sees_update(small_splits):
    model = build_reference_net(2, 3, 0)
    ad = make_adapter("tent", AdapterConfig(lr=1e-2))
    b = _batches(small_splits)[0]
    first = ad.adapt_step(model, b)
    second = ad.adapt_step(model, b)
    assert first.updated and not np.array_equal(first.probs, second.probs)


def test_no_update_without_sets(small_splits):
    model = build_reference_net(2, 3, 0)
    before = {k: v.copy() for k, v in model.params.items()}
    cfg = AdapterConfig(dual=DualTtaConfig(tau_sa=0.999999, tau_sp=1e-9, lam=0.0))
    for b in _batches(small_splits):
        out = make_adapter("dualtta", cfg).adapt_step(model, b)
        assert out.n_plus == 0 and not out.updated
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_degenerate_thresholds_equal_noadapt(small_splits):
    """tau_sa -> 1, tau_sp -> 0 empties both sets; predictions match noadapt exactly."""
    cfg = AdapterConfig(dual=DualTtaConfig(tau_sa=1 - 1e-12, tau_sp=1e-12))
    m1, m2 = build_reference_net(2, 3, 0), build_reference_net(2, 3, 0)
    a1, a2 = make_adapter("dualtta", cfg), make_adapter("noadapt")
    for b in _batches(small_splits):
        o1, o2 = a1.adapt_step(m1, b), a2.adapt_step(m2, b)
        if o1.n_plus == o1.n_minus == 0:
            np.testing.assert_array_equal(o1.probs, o2.probs)


def test_deyo_open_gates_select_everything(small_splits):
    cfg = AdapterConfig(baseline=BaselineConfig(tau_ent=math.inf, tau_plpd=-1.0))
    out = make_adapter("deyo_lite", cfg).adapt_step(build_reference_net(2, 3, 0), _batches(small_splits)[0])
    assert (out.record.membership == D_PLUS).all()
    np.testing.assert_allclose(out.record.weights, np.exp(0.4 - out.triple.ent))


def test_eata_moving_average(small_splits):
    ad = make_adapter("eata_lite")
    model = build_reference_net(2, 3, 0)
    bs = _batches(small_splits)
    o1 = ad.adapt_step(model, bs[0])
    np.testing.assert_allclose(ad.moving_avg, o1.probs.mean(axis=0))
    o2 = ad.adapt_step(model, bs[1])
    np.testing.assert_allclose(ad.moving_avg, 0.1 * o2.probs.mean(axis=0) + 0.9 * o1.probs.mean(axis=0))
    assert ad.moving_avg.sum() == pytest.approx(1.0, abs=1e-9)


def _set_entropy(model, x, idx):
    p = predict_proba(model, x, norm_mode="batch")
    return float(entropy(p)[idx].sum())


@pytest.mark.parametrize("direction", ["maximize", "minimize"])
def test_entropy_moves_in_the_requested_direction(small_splits, direction):
    test = small_splits["target_test"]
    if direction == "maximize":  # D+ impossible, D- = anything that moves under the style noise
        dual = DualTtaConfig(tau_sa=1 - 1e-9, tau_sp=1e-9, lam=0.5)
    else:  # D- impossible
        dual = DualTtaConfig(tau_sa=1e-9, tau_sp=1 - 1e-9, lam=0.5)
    checked = 0
    for seed in range(24):
        model = build_reference_net(2, 3, seed)
        x = test.images[(seed * 8) % 160:(seed * 8) % 160 + 32]
        out = make_adapter("dualtta", AdapterConfig(dual=dual), seed).adapt_step(model, x)
        idx = out.record.d_minus if direction == "maximize" else out.record.d_plus
        if idx.size == 0:
            continue
        checked += 1
        before = float(out.triple.ent[idx].sum())
        after = _set_entropy(model, x, idx)
        if direction == "maximize":
            assert after >= before - 1e-12
        else:
            assert after <= before + 1e-12
    assert checked >= 20


def test_episodic_mode_resets(small_splits):
    model = build_reference_net(2, 3, 0)
    init = {k: v.copy() for k, v in model.params.items()}
    ad = make_adapter("tent", AdapterConfig(lr=1e-2, episodic=True))
    b1, b2 = _batches(small_splits)[:2]
    ad.adapt_step(model, b1)
    out = ad.adapt_step(model, b2)
    np.testing.assert_array_equal(out.probs, predict_proba(build_reference_net(2, 3, 0), b2.images, norm_mode="batch"))
    assert any(not np.array_equal(init[k], model.params[k]) for k in init)
