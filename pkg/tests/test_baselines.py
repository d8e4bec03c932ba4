import math

import numpy as np
import pytest

from dropbp.baselines import (
    BaselineSpec,
    LinearResidualNet,
    PLDParams,
    binomial_weight,
    freeze_mask,
    layerdrop_decisions,
    path_gradient_analysis,
    pld_average_keep,
    pld_keep_prob,
    pld_params_for_budget,
    pld_rates,
    submodule_count,
)
from dropbp.mechanism import uniform_rates
from dropbp.model import ActivationCache, Model, ModelConfig, forward
from dropbp.tensor import Rng

TOY = ModelConfig(n_units=2, d_model=8, d_ff=16, n_heads=2, vocab_size=11, seq_len=5, init_std=0.5)


def test_freeze_mask_floor_rule():
    assert freeze_mask(8, 0.0).all()
    assert not freeze_mask(8, 1.0).any()
    np.testing.assert_array_equal(freeze_mask(8, 0.5), [0, 0, 0, 0, 1, 1, 1, 1])
    assert freeze_mask(8, 0.3).sum() == 6  # floor(2.4) = 2 frozen


def test_baseline_spec_validation():
    with pytest.raises(ValueError):
        BaselineSpec(kind="nope")
    with pytest.raises(ValueError):
        BaselineSpec(kind="freeze", p=2.0)


# ----------------------------------------------------------------- layerdrop


def test_layerdrop_changes_forward_dropbp_does_not():
    m = Model.init(TOY, Rng(0))
    tokens = np.random.default_rng(0).integers(0, 11, (2, 5))
    base = forward(m, tokens)
    d = np.array([0, 1, 0, 1], bool)
    np.testing.assert_array_equal(forward(m, tokens, d, ActivationCache(4)), base)
    assert not np.array_equal(forward(m, tokens, None, ActivationCache(4), skip_forward=d), base)


def test_layerdrop_all_dropped_is_embedding_to_head():
    m = Model.init(TOY, Rng(0))
    tokens = np.random.default_rng(0).integers(0, 11, (2, 5))
    empty = m.copy()
    for k in empty.params:
        if k.startswith("u"):
            empty.params[k][:] = 0.0
    np.testing.assert_array_equal(forward(m, tokens, skip_forward=np.ones(4, bool)), forward(empty, tokens))


def test_layerdrop_zero_rate_is_baseline():
    rng = Rng(1)
    for it in range(20):
        assert not layerdrop_decisions(uniform_rates(4, 0.0), it, rng).dropped.any()


# ----------------------------------------------------------------------- pld


def test_pld_schedule_shape():
    p = PLDParams(0.5, 5.0)
    assert all(pld_keep_prob(d, 0.0, p) == 1.0 for d in (0.0, 0.5, 1.0))
    for t in (0.1, 0.5, 1.0):
        assert pld_keep_prob(0.25, t, p) >= pld_keep_prob(0.75, t, p)
    for d in (0.25, 1.0):
        assert pld_keep_prob(d, 0.2, p) >= pld_keep_prob(d, 0.8, p)
    assert pld_keep_prob(1.0, 1.0, PLDParams(0.5, 1e6)) == pytest.approx(0.5)


@pytest.mark.parametrize("n_layers", [4, 8])
def test_pld_budget_continuous(n_layers):
    params = pld_params_for_budget(n_layers, 0.75)
    depth = (np.arange(1, n_layers + 1)) / n_layers
    t = np.linspace(0, 1, 200001)
    keep = np.mean([np.trapezoid([pld_keep_prob(d, x, params) for x in t[::100]], t[::100]) for d in depth])
    assert keep == pytest.approx(0.75, abs=1e-4)
    assert pld_average_keep(n_layers, params) == pytest.approx(0.75, abs=1e-12)


def test_pld_budget_discrete_run():
    T, n = 200, 4
    params = pld_params_for_budget(n, 0.75, total_iters=T)
    keep = np.mean([1 - pld_rates(n, it, T, params).as_array() for it in range(T)])
    assert keep == pytest.approx(0.75, abs=1e-12)


def test_pld_unreachable_budget():
    with pytest.raises(ValueError):
        pld_params_for_budget(4, 0.1, gamma=5.0)


# -------------------------------------------------------------- path analysis


def test_binomial_weights_sum_to_one():
    for n in range(1, 10):
        assert sum(binomial_weight(n, k) for k in range(n + 1)) == 1


def test_linear_net_paths_sum_exactly():
    for n in (1, 2, 3, 4):
        net = LinearResidualNet.random(n, 5, Rng(n), rows=3)
        total = sum(net.path_grads().values())
        np.testing.assert_allclose(total, net.input_grad(), rtol=1e-12, atol=1e-12)


def test_linear_net_gradient_matches_finite_differences():
    net = LinearResidualNet.random(3, 4, Rng(0), rows=2)
    x = np.random.default_rng(0).normal(size=(2, 4))
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = 1e-6
        g[idx] = (net.loss(x + e) - net.loss(x - e)) / 2e-6
    np.testing.assert_allclose(net.input_grad(), g, rtol=1e-7)


def test_path_analysis_k0_is_residual_only():
    m = Model.init(TOY, Rng(0))
    r = np.random.default_rng(0)
    tokens, targets = r.integers(0, 11, (2, 5)), r.integers(0, 11, (2, 5))
    rep = path_gradient_analysis(m, tokens, targets, [0, 1, 4], reps=5, rng=Rng(1))
    assert {s.k for s in rep.samples} == {0, 1, 4}
    k0 = [s.norm for s in rep.samples if s.k == 0]
    assert max(k0) == min(k0)  # no randomness with an empty subset
    rows = rep.rows()
    assert rows[0]["weight"] == 1 / 16 and rows[-1]["weight"] == 1 / 16
    with pytest.raises(ValueError):
        path_gradient_analysis(m, tokens, targets, [5], reps=1)
    with pytest.raises(ValueError):
        path_gradient_analysis(m, tokens, targets, [1], reps=0)


def test_path_analysis_linear_net_decays_with_k():
    """Small branch weights make longer paths carry geometrically less gradient."""
    net = LinearResidualNet.random(6, 8, Rng(3), rows=4, scale=0.05)
    paths = net.path_grads()
    means = [np.mean([np.linalg.norm(g) for s, g in paths.items() if len(s) == k]) for k in range(7)]
    assert all(a > b for a, b in zip(means, means[1:]))


# ---------------------------------------------------------------- submodules


def test_submodule_counts():
    assert submodule_count(64, 0.875, "freeze") == 2**8 == 256
    assert submodule_count(64, 0.875, "dropbp") == sum(math.comb(64, i) for i in range(9))
    assert submodule_count(2, 0.5, "dropbp") == 3
    assert submodule_count(2, 0.5, "freeze") == 2
    for n in (2, 8, 64):
        assert submodule_count(n, 0.0, "dropbp") == submodule_count(n, 0.0, "freeze") == 2**n
    with pytest.raises(ValueError):
        submodule_count(4, 0.5, "other")


def test_submodule_count_floor():
    # 10 * (1 - 0.25) = 7.5 -> 7
    assert submodule_count(10, 0.25, "freeze") == 2**7
    assert submodule_count(64, 0.875, "dropbp") == 5_130_659_561
