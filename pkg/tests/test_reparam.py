import numpy as np
import pytest

from rpk import reparam
from rpk.errors import InfeasibleWidthsError, RankDeficientError, ShapeError
from rpk.netgraph import (Conv2d, Flatten, Linear, MaxPool2d, Network, ReLU, init_weights,
                          model_stats, predict)
from rpk.reparam import (ExpandedUnit, ExpansionPlan, compose_filter, contract_network,
                         contract_unit, expand_conv, expand_depthwise, expand_linear,
                         expand_network, solve_middle_filter)


def chain_net(unit, input_shape):
    return Network(unit.factor_specs, input_shape)


def chain_weights(factors):
    w = {}
    for i, (fw, fb) in enumerate(factors):
        w[f"layer{i}.weight"] = fw
        if fb is not None:
            w[f"layer{i}.bias"] = fb
    return w


def single(layer, weight, bias):
    w = {"layer0.weight": weight}
    if bias is not None:
        w["layer0.bias"] = bias
    return w


def max_rel(a, b):
    return np.abs(a - b).max() / (1 + np.abs(b).max())


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-10)])
def test_pointwise_scalar_conv(dtype, tol):
    rng = np.random.default_rng(0)
    f = rng.standard_normal((1, 1, 1, 1)).astype(dtype)
    b = rng.standard_normal(1).astype(dtype)
    unit, factors = expand_conv(f, b, rate=1, seed=3)
    x = rng.standard_normal((10, 1, 4, 4)).astype(dtype)
    ref = predict(Network([unit.original], (1, 4, 4)), single(None, f, b), x)
    got = predict(chain_net(unit, (1, 4, 4)), chain_weights(factors), x)
    assert max_rel(got, ref) <= tol


def test_strided_padded_conv_equivalence():
    rng = np.random.default_rng(1)
    f = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    unit, factors = expand_conv(f, b, rate=2, stride=2, padding=1, seed=0)
    assert [s.padding for s in unit.factor_specs] == [1, 0, 0]
    assert [s.stride for s in unit.factor_specs] == [1, 2, 1]
    assert [s.bias for s in unit.factor_specs] == [False, False, True]
    assert unit.factor_specs[0].out_channels == 4 and unit.factor_specs[1].out_channels == 8
    x = rng.standard_normal((50, 2, 7, 7)).astype(np.float32)
    ref = predict(Network([unit.original], (2, 7, 7)), single(None, f, b), x)
    got = predict(chain_net(unit, (2, 7, 7)), chain_weights(factors), x)
    assert got.shape == ref.shape
    assert max_rel(got, ref) <= 1e-6


def test_zero_filter_gives_zero_middle_factor():
    unit, factors = expand_conv(np.zeros((3, 2, 3, 3)), None, rate=2, seed=5)
    assert np.all(factors[1][0] == 0)
    assert np.any(factors[0][0] != 0) and np.any(factors[2][0] != 0)


def test_middle_factor_matches_per_tap_formula():
    # locks the reshape ordering: W2[:, :, a, b] = R3 @ F[:, :, a, b] @ L1
    rng = np.random.default_rng(2)
    f = rng.standard_normal((3, 2, 3, 3))
    w1 = rng.standard_normal((4, 2))
    w3 = rng.standard_normal((3, 6))
    w2 = solve_middle_filter(f, w1, w3)
    l1, r3 = np.linalg.pinv(w1), np.linalg.pinv(w3)
    for a in range(3):
        for b in range(3):
            np.testing.assert_allclose(w2[:, :, a, b], r3 @ f[:, :, a, b] @ l1, atol=1e-12)
    np.testing.assert_allclose(compose_filter(w1, w2, w3), f, atol=1e-12)
    np.testing.assert_allclose(compose_filter(w1, w2, w3),
                               np.einsum("oj,jiab,ic->ocab", w3, w2, w1), atol=1e-12)


def test_depthwise_single_group_is_plain_expansion():
    rng = np.random.default_rng(3)
    f = rng.standard_normal((1, 1, 3, 3))
    u1, f1 = expand_depthwise(f, None, rate=2, seed=4)
    u2, f2 = expand_conv(f, None, rate=2, seed=4)
    assert u1.factor_specs == u2.factor_specs
    for (a, _), (b, _) in zip(f1, f2):
        np.testing.assert_array_equal(a, b)


def test_depthwise_equivalence():
    rng = np.random.default_rng(4)
    f = rng.standard_normal((3, 1, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    unit, factors = expand_depthwise(f, b, rate=2, padding=1, seed=1)
    assert all(s.groups == 3 for s in unit.factor_specs)
    x = rng.standard_normal((20, 3, 6, 6)).astype(np.float32)
    ref = predict(Network([unit.original], (3, 6, 6)), single(None, f, b), x)
    got = predict(chain_net(unit, (3, 6, 6)), chain_weights(factors), x)
    assert max_rel(got, ref) <= 1e-6


def test_depthwise_zero_group():
    rng = np.random.default_rng(5)
    f = rng.standard_normal((3, 1, 3, 3))
    f[1] = 0
    unit, factors = expand_depthwise(f, None, rate=2, seed=0)
    x = rng.standard_normal((4, 3, 5, 5))
    out = predict(chain_net(unit, (3, 5, 5)), chain_weights(factors), x)
    assert np.abs(out[:, 1]).max() == 0.0
    assert np.abs(out[:, 0]).max() > 0


def test_depthwise_requires_depthwise_shape():
    with pytest.raises(ShapeError):
        expand_depthwise(np.ones((3, 2, 3, 3)))


def test_rate_below_one_rejected():
    with pytest.raises(ShapeError):
        expand_conv(np.ones((4, 4, 3, 3)), rate=0.5)


def test_non_integer_rate_rounds_up():
    unit, _ = expand_conv(np.random.default_rng(0).standard_normal((3, 3, 1, 1)), rate=1.5)
    assert unit.factor_specs[0].out_channels == 5  # ceil(4.5)
    assert reparam.expanded_width(1.1, 10) == 11


def test_linear_identity_chain():
    unit, factors = expand_linear(np.eye(2), None, widths=[2], seed=0)
    np.testing.assert_allclose(factors[1][0] @ factors[0][0], np.eye(2), atol=1e-10)


def test_linear_three_factors():
    rng = np.random.default_rng(6)
    w = rng.standard_normal((3, 4))
    b = rng.standard_normal(3)
    unit, factors = expand_linear(w, b, widths=[8, 8], theta=2, seed=1)
    assert unit.solved_factor == 1
    assert [s.weight_shape for s in unit.factor_specs] == [(8, 4), (8, 8), (3, 8)]
    x = rng.standard_normal((50, 4))
    got = predict(chain_net(unit, (4,)), chain_weights(factors), x)
    np.testing.assert_allclose(got, x @ w.T + b, atol=1e-6)


@pytest.mark.parametrize("theta", [1, 2, 3])
def test_linear_any_solved_index(theta):
    rng = np.random.default_rng(theta)
    w = rng.standard_normal((3, 4))
    widths = [4, 5] if theta == 3 else ([5, 5] if theta == 2 else [3, 6])
    unit, factors = expand_linear(w, None, widths=widths, theta=theta, seed=0)
    prod = np.eye(4)
    for fw, _ in factors:
        prod = fw @ prod
    np.testing.assert_allclose(prod, w, atol=1e-10)


def test_linear_infeasible_widths():
    with pytest.raises(InfeasibleWidthsError, match="infeasible widths"):
        expand_linear(np.ones((3, 4)), None, widths=[2], theta=1)
    with pytest.raises(InfeasibleWidthsError, match="infeasible widths"):
        expand_linear(np.ones((3, 4)), None, widths=[3, 8], theta=2)


def test_resampling_retries_then_fails(monkeypatch):
    calls = []

    def draw(rng):
        calls.append(1)
        if len(calls) < 3:
            raise RankDeficientError("forced")
        return "ok", 1.0

    assert reparam._with_resampling(10, draw) == ("ok", 12)

    def never(rng):
        raise RankDeficientError("forced")

    with pytest.raises(RankDeficientError):
        reparam._with_resampling(0, never)


def test_resampling_keeps_best_conditioned():
    kappas = iter([900.0, 500.0, 700.0, 1e4, 800.0, 600.0, 650.0, 10000.0])
    result = reparam._with_resampling(0, lambda rng: ("x", next(kappas)))
    assert result == ("x", 1)


def cnn():
    return Network([Conv2d(3, 4, 3, padding=1), ReLU(), MaxPool2d(2), Conv2d(4, 6, 3, stride=2),
                    ReLU(), Flatten(), Linear(6, 5)], (3, 8, 8), "cnn")


def test_expand_network_rate_one():
    rng = np.random.default_rng(7)
    net = Network([Conv2d(2, 3, 3, padding=1), ReLU(), Conv2d(3, 2, 1)], (2, 6, 6))
    w = init_weights(net, rng, np.float64)
    net_exp, w_exp, units = expand_network(net, w, ExpansionPlan(rate=1))
    assert len(net_exp.layers) == 7 and len(units) == 2
    assert units[0].factor_specs[0].out_channels == 2 and units[0].factor_specs[1].out_channels == 3
    x = rng.standard_normal((8, 2, 6, 6))
    assert max_rel(predict(net_exp, w_exp, x), predict(net, w, x)) <= 1e-10


def test_expand_network_full_pipeline_float32():
    rng = np.random.default_rng(8)
    net = cnn()
    w = init_weights(net, rng, np.float32)
    net_exp, w_exp, units = expand_network(net, w, ExpansionPlan(rate=3, expand_fc=True, seed=2))
    assert [u.kind for u in units] == ["Conv3Factor", "Conv3Factor", "LinearChain"]
    x = rng.standard_normal((100, 3, 8, 8)).astype(np.float32)
    assert max_rel(predict(net_exp, w_exp, x), predict(net, w, x)) <= 1e-5


def test_parameterless_network_unchanged():
    net = Network([ReLU(), Flatten()], (2, 3, 3))
    net_exp, w_exp, units = expand_network(net, {}, ExpansionPlan())
    assert net_exp.layers == net.layers and w_exp == {} and units == []


def test_contract_after_expand_recovers_weights():
    rng = np.random.default_rng(9)
    net = cnn()
    w = init_weights(net, rng, np.float64)
    w["layer0.bias"] = rng.standard_normal(4)
    net_exp, w_exp, units = expand_network(net, w, ExpansionPlan(rate=2, expand_fc=True))
    back, w_back = contract_network(net_exp, w_exp, units)
    assert back.layers == net.layers
    for k in w:
        assert np.abs(w_back[k] - w[k]).max() <= 1e-10 * max(1, np.abs(w[k]).max())


def test_contract_perturbed_factors_matches_chain():
    rng = np.random.default_rng(10)
    net = cnn()
    w = init_weights(net, rng, np.float64)
    net_exp, w_exp, units = expand_network(net, w, ExpansionPlan(rate=2, expand_fc=True))
    w_exp = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in w_exp.items()}
    slim, w_slim = contract_network(net_exp, w_exp, units)
    x = rng.standard_normal((50, 3, 8, 8))
    assert max_rel(predict(slim, w_slim, x), predict(net_exp, w_exp, x)) <= 1e-6


def test_contract_identity_chain():
    spec = Conv2d(2, 2, 1, bias=False)
    unit = ExpandedUnit(0, "Conv3Factor", spec, [Conv2d(2, 2, 1, bias=False)] * 3, [0, 1, 2])
    eye = np.eye(2).reshape(2, 2, 1, 1)
    layer, w, b = contract_unit(unit, [(eye, None)] * 3)
    assert layer == spec and b is None
    np.testing.assert_array_equal(w, eye)


def test_contract_unit_shape_mismatch():
    unit, factors = expand_conv(np.ones((2, 2, 3, 3)), None, rate=2)
    with pytest.raises(ShapeError):
        contract_unit(unit, factors[:2])
    with pytest.raises(ShapeError):
        contract_unit(unit, [(np.ones((1, 1, 1, 1)), None)] + factors[1:])


def test_contract_folds_inner_biases():
    rng = np.random.default_rng(11)
    unit, factors = expand_conv(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3),
                                rate=2, stride=2)
    specs = [Conv2d(2, 4, 1, bias=True), Conv2d(4, 6, 3, stride=2, bias=True), unit.factor_specs[2]]
    unit.factor_specs = specs
    factors = [(factors[0][0], rng.standard_normal(4)), (factors[1][0], rng.standard_normal(6)),
               factors[2]]
    layer, w, b = contract_unit(unit, factors)
    x = rng.standard_normal((5, 2, 7, 7))
    got = predict(Network([layer], (2, 7, 7)), single(None, w, b), x)
    ref = predict(Network(specs, (2, 7, 7)), chain_weights(factors), x)
    assert max_rel(got, ref) <= 1e-10


def test_parameter_growth_closed_form():
    rng = np.random.default_rng(12)
    for m, n, k, r in [(3, 4, 3, 2), (2, 5, 5, 3), (4, 4, 1, 1)]:
        f = rng.standard_normal((n, m, k, k))
        unit, _ = expand_conv(f, np.zeros(n), rate=r)
        p, q = r * m, r * n
        got = model_stats(Network(unit.factor_specs, (m, 9, 9))).param_count
        assert got == p * m + q * p * k * k + n * q + n
        if r > 1:
            assert got > n * m * k * k + n


def test_unit_metadata_roundtrip():
    unit, _ = expand_linear(np.ones((2, 3)), np.ones(2), widths=[4], seed=3)
    assert ExpandedUnit.from_dict(unit.to_dict()) == unit


def test_expand_network_deterministic():
    net = cnn()
    w = init_weights(net, np.random.default_rng(13))
    a = expand_network(net, w, ExpansionPlan(seed=4))[1]
    b = expand_network(net, w, ExpansionPlan(seed=4))[1]
    assert all(np.array_equal(a[k], b[k]) for k in a)
