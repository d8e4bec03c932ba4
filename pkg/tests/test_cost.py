import numpy as np
import pytest

from dropbp.cost import (
    TERMS,
    activation_budget,
    block_reduction_ratio,
    cost_report,
    expected_block_bytes,
    expected_flops,
    layer_costs,
    offblock_cost,
    reduction_ratio,
)
from dropbp.mechanism import sample_decisions, uniform_rates
from dropbp.model import Model, ModelConfig, forward_backward
from dropbp.tensor import FlopsMeter, Rng

FULL = ModelConfig(n_units=2, d_model=16, d_ff=32, n_heads=2, vocab_size=11, seq_len=8)
PEFT = FULL.replace(mode="peft", adapter_rank=2)


def live(cfg, dropped, B=3, seed=0):
    m = Model.init(cfg, Rng(seed))
    r = np.random.default_rng(seed)
    tokens = r.integers(0, cfg.vocab_size, (B, cfg.seq_len))
    meter = FlopsMeter()
    _, _, cache, probs = forward_backward(m, tokens, tokens, decisions=dropped, meter=meter)
    return meter, cache, probs


@pytest.mark.parametrize("cfg", [FULL, PEFT], ids=["full", "peft"])
@pytest.mark.parametrize("dropped", [[0, 0, 0, 0], [0, 1, 1, 0], [1, 1, 1, 1]])
def test_cost_model_matches_meter_and_cache_exactly(cfg, dropped):
    dropped = np.array(dropped, bool)
    meter, cache, probs = live(cfg, dropped)
    costs = layer_costs(cfg, 3)
    fw_cats = TERMS["all"][0]
    for i, c in enumerate(costs):
        got = {cat: v for (s, cat), v in meter.detail.items() if s == f"L{i}"}
        want = {k: v for k, v in c.by_category().items() if v and (not dropped[i] or k in fw_cats)}
        assert got == want, i
        assert cache.layer_bytes(i) == (0 if dropped[i] else c.activation_bytes)
    off = offblock_cost(cfg, 3)
    got = {cat: v for (s, cat), v in meter.detail.items() if s == "offblock"}
    assert got == {k: v for k, v in off.by_category().items() if v}
    assert cache.offblock_bytes + probs.nbytes == off.activation_bytes


def test_f_out_equals_f_grad_and_peft_has_no_base_param_flops():
    for c in layer_costs(FULL) + [offblock_cost(FULL)]:
        assert c.f_out == c.f_grad == c.f_param
    for c in layer_costs(PEFT):
        assert c.f_out == c.f_grad and c.f_param == 0 and c.adapter_param > 0
    assert offblock_cost(PEFT).f_param == 0


def test_doubling_seq_len_doubles_linear_terms():
    a, b = layer_costs(FULL, 1, 8), layer_costs(FULL, 1, 16)
    for x, y in zip(a, b):
        assert (y.f_out, y.f_grad, y.f_param) == (2 * x.f_out, 2 * x.f_grad, 2 * x.f_param)
    assert b[0].score_fw == 4 * a[0].score_fw


def test_linear_mode_not_modelled():
    with pytest.raises(ValueError):
        layer_costs(FULL.replace(linear=True))


def test_expected_flops_endpoints():
    costs, off = layer_costs(FULL, 2), offblock_cost(FULL, 2)
    n = FULL.n_layers
    total = sum(c.total() for c in costs) + off.total()
    assert expected_flops(costs, np.zeros(n), off) == total
    fw = sum(c.forward() for c in costs)
    assert expected_flops(costs, np.ones(n), off) == fw + off.total()


@pytest.mark.parametrize("p, full, peft", [(0.5, 1 / 3, 0.25), (0.75, 0.5, 0.375), (0.875, 7 / 12, 0.4375)])
def test_closed_form_ratios(p, full, peft):
    assert reduction_ratio(p, "full") == pytest.approx(full, abs=1e-15)
    assert reduction_ratio(p, "peft") == pytest.approx(peft, abs=1e-15)
    assert block_reduction_ratio(layer_costs(FULL), uniform_rates(4, p, None)) == pytest.approx(full, abs=1e-12)
    assert reduction_ratio(0.0, "full") == 0.0


def test_ratio_rounds_to_stated_percentages():
    assert [round(100 * reduction_ratio(p, "full")) for p in (0.5, 0.75, 0.875)] == [33, 50, 58]
    assert [round(100 * reduction_ratio(p, "peft")) for p in (0.5, 0.75, 0.875)] == [25, 38, 44]
    with pytest.raises(ValueError):
        reduction_ratio(0.5, "other")


def test_monotone_in_each_rate():
    costs = layer_costs(FULL, 2)
    base = np.full(4, 0.3)
    for i in range(4):
        up = base.copy()
        up[i] += 0.1
        assert expected_flops(costs, up) < expected_flops(costs, base)
        assert expected_block_bytes(costs, up) < expected_block_bytes(costs, base)


def test_memory_linear_and_zero_at_full_drop():
    costs = layer_costs(FULL)
    assert expected_block_bytes(costs, np.ones(4)) == 0
    full = expected_block_bytes(costs, np.zeros(4))
    for p in (0.1, 0.5, 0.875):
        assert expected_block_bytes(costs, np.full(4, p)) == pytest.approx((1 - p) * full, rel=1e-14)


def test_activation_budget_search():
    cfg = ModelConfig(n_units=4, d_model=64, d_ff=256, n_heads=4, vocab_size=16, seq_len=64)
    budget = 8 * 2**20
    lens = [activation_budget(cfg, np.full(8, p), budget).max_seq_len for p in (0.0, 0.5, 0.875)]
    assert lens[0] < lens[1] < lens[2]
    assert lens[2] / lens[0] > 2
    est = activation_budget(cfg, np.zeros(8), budget)
    from dropbp.cost import _bytes_at

    assert _bytes_at(cfg, np.zeros(8), 1, est.max_seq_len) <= budget < _bytes_at(cfg, np.zeros(8), 1, est.max_seq_len + 1)
    tiny = activation_budget(cfg, np.zeros(8), 10)
    assert not tiny.feasible and tiny.max_seq_len is None


def test_meter_reconciliation_over_sampled_run():
    cfg = ModelConfig(n_units=8, d_model=4, d_ff=4, n_heads=1, vocab_size=5, seq_len=2)
    rates = uniform_rates(16, 0.5)
    m = Model.init(cfg, Rng(0))
    tokens = np.array([[1, 2]])
    base = FlopsMeter()
    forward_backward(m, tokens, tokens, meter=base)
    meter, rng, iters = FlopsMeter(), Rng(0), 400
    for it in range(iters):
        forward_backward(m, tokens, tokens, decisions=sample_decisions(rates, it, rng).dropped, meter=meter)
    bw_cats = TERMS["all"][1]
    measured = meter.block_total(bw_cats) / (iters * base.block_total(bw_cats))
    F = [c.backward() for c in layer_costs(cfg)]
    predicted = 1 - np.dot(rates.as_array(), F) / sum(F)
    assert abs(measured - predicted) / predicted < 0.02


def test_cost_report_table():
    rep = cost_report(FULL, uniform_rates(4, 0.5), 1, measured_ratio=0.33)
    assert rep.theoretical_ratio == pytest.approx(1 / 3)
    assert rep.block_ratio_linear == pytest.approx(1 / 3)
    assert 0 < rep.whole_model_ratio < rep.block_ratio_linear
    text = rep.table()
    assert "reduction theoretical" in text and "0.3300" in text
