import numpy as np
import pytest

from eunets import tensor as T
from eunets.exceptions import ContractViolation
from eunets.mhex import deep_supervision_loss
from eunets.models import ModelConfig, build_model, forward, param_count, predict
from eunets.tensor import Tensor


def conv_params(cin, cout, k, bias=True):
    return cout * cin * k * k + (cout if bias else 0)


def unet_count_by_hand(in_ch, base, depth, k):
    total = 0
    cin = in_ch
    for i in range(depth + 1):
        w = base * 2**i
        total += conv_params(cin, w, 3) + conv_params(w, w, 3)
        cin = w
    for l in range(1, depth + 1):
        w = base * 2 ** (depth - l)
        c = w + 2 * w
        total += conv_params(c, w, 3) + conv_params(w, w, 3) + conv_params(c, w, 1)
    return total + conv_params(base, k, 1)


def test_param_count_toy_unet_by_hand():
    model = build_model(ModelConfig(backbone="unet", with_mhex=False, base_width=8, depth=3, class_count=2))
    # enc 664 + 3488 + 13888, bottleneck 55424, dec 40032 + 10032 + 2520, head 18
    assert param_count(model) == {"total": 126066, "mhex_only": 0}
    assert unet_count_by_hand(1, 8, 3, 2) == 126066


@pytest.mark.parametrize("backbone", ["unet", "unetpp"])
@pytest.mark.parametrize("base,depth,hidden,k", [(8, 3, 16, 2), (4, 2, 4, 3), (6, 4, 8, 2)])
def test_mhex_delta_formula(backbone, base, depth, hidden, k):
    plain = build_model(ModelConfig(backbone=backbone, with_mhex=False, base_width=base, depth=depth, class_count=k, mhex_hidden=hidden))
    eu = build_model(ModelConfig(backbone=backbone, with_mhex=True, base_width=base, depth=depth, class_count=k, mhex_hidden=hidden))
    widths = [base * 2 ** (depth - l) for l in range(1, depth + 1)]
    formula = sum(hidden * c + k * hidden for c in widths)
    assert param_count(eu)["mhex_only"] == formula
    assert param_count(eu)["total"] - param_count(plain)["total"] == formula


def test_wide_model_side_blocks_under_100k():
    model = build_model(ModelConfig(base_width=64, depth=4, mhex_hidden=16, class_count=2))
    counts = param_count(model)
    assert counts["mhex_only"] == 16 * (512 + 256 + 128 + 64) + 4 * 2 * 16
    assert counts["mhex_only"] < 100_000


def test_seed_determinism():
    a = build_model(ModelConfig(seed=3))
    b = build_model(ModelConfig(seed=3))
    c = build_model(ModelConfig(seed=4))
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert not np.array_equal(a.params["enc0.conv1.w"].data, c.params["enc0.conv1.w"].data)


def test_backbone_weights_shared_with_and_without_mhex():
    a = build_model(ModelConfig(with_mhex=True, seed=5))
    b = build_model(ModelConfig(with_mhex=False, seed=5))
    for k, v in b.params.items():
        assert np.array_equal(a.params[k].data, v.data)


@pytest.mark.parametrize("kwargs", [dict(depth=1), dict(base_width=2), dict(class_count=1), dict(backbone="resnet")])
def test_config_invariants(kwargs):
    with pytest.raises(ContractViolation):
        ModelConfig(**kwargs)


def test_unetpp_wiring():
    model = build_model(ModelConfig(backbone="unetpp", depth=3))
    assert model.skip_table == {
        "dec1": ["enc2"],
        "dec2": ["enc1", "node1_1"],
        "dec3": ["enc0", "node0_1", "node0_2"],
    }
    assert [n for n, *_ in model.nested] == ["node0_1", "node1_1", "node0_2"]
    unet = build_model(ModelConfig(backbone="unet", depth=3))
    assert unet.skip_table == {"dec1": ["enc2"], "dec2": ["enc1"], "dec3": ["enc0"]}


@pytest.mark.parametrize("backbone", ["unet", "unetpp"])
def test_shapes_depth3(backbone, rng):
    model = build_model(ModelConfig(backbone=backbone, base_width=4, mhex_hidden=4))
    trace = forward(model, rng.random((1, 1, 16, 16)))
    assert trace.final_logits.shape == (1, 2, 16, 16)
    assert [p.shape[2] for p in trace.deep_preds] == [4, 8, 16]
    assert len(model.mhex_blocks) == 3


def test_no_mhex_trace_has_no_deep_preds(rng):
    model = build_model(ModelConfig(with_mhex=False, base_width=4))
    assert forward(model, rng.random((1, 1, 16, 16))).deep_preds == []


def test_indivisible_input_rejected():
    model = build_model(ModelConfig(base_width=4))
    with pytest.raises(ContractViolation):
        forward(model, np.zeros((1, 1, 12, 12)))


def test_zero_params_give_zero_logits():
    model = build_model(ModelConfig(base_width=4, mhex_hidden=4))
    model.set_state({k: np.zeros(v.shape) for k, v in model.params.items()})
    assert np.all(forward(model, np.zeros((1, 1, 16, 16))).final_logits.data == 0)


def test_zero_image_gives_bias_pattern():
    model = build_model(ModelConfig(base_width=4, mhex_hidden=4))
    state = {k: np.zeros(v.shape) for k, v in model.params.items()}
    state["head.b"] = np.array([0.3, -0.2])
    model.set_state(state)
    logits = forward(model, np.zeros((1, 1, 16, 16))).final_logits.data
    np.testing.assert_array_equal(logits[0, 0], np.full((16, 16), 0.3))
    np.testing.assert_array_equal(logits[0, 1], np.full((16, 16), -0.2))


@pytest.mark.parametrize("backbone", ["unet", "unetpp"])
def test_branch_ablation_matches_baseline(backbone, rng):
    eu = build_model(ModelConfig(backbone=backbone, with_mhex=True, base_width=4, mhex_hidden=4, seed=2))
    base = build_model(ModelConfig(backbone=backbone, with_mhex=False, base_width=4, seed=2))
    x = rng.random((2, 1, 16, 16))
    ablated = forward(eu, x, mhex_residual=False).final_logits.data
    np.testing.assert_allclose(ablated, forward(base, x).final_logits.data, atol=1e-12)
    assert not np.allclose(forward(eu, x).final_logits.data, ablated)


def test_zeroed_mhex_blocks_reproduce_baseline_mask(rng):
    eu = build_model(ModelConfig(with_mhex=True, base_width=4, mhex_hidden=4, seed=8))
    base = build_model(ModelConfig(with_mhex=False, base_width=4, seed=8))
    state = eu.state()
    for k in state:
        if ".mhex." in k:
            state[k] = np.zeros_like(state[k])
    eu.set_state(state)
    x = rng.random((2, 1, 16, 16))
    trace = forward(eu, x)
    assert all(np.all(mo.gate.data == 0.5) for mo in trace.mhex_outputs)
    np.testing.assert_array_equal(predict(eu, x).mask, predict(base, x).mask)


def test_forward_is_pure(rng):
    model = build_model(ModelConfig(backbone="unetpp", base_width=4, mhex_hidden=4))
    x = rng.random((1, 1, 16, 16))
    a, b = forward(model, x), forward(model, x)
    assert np.array_equal(a.final_logits.data, b.final_logits.data)
    for p, q in zip(a.deep_preds, b.deep_preds):
        assert np.array_equal(p.data, q.data)


def _model_with_head(bias):
    model = build_model(ModelConfig(base_width=4, mhex_hidden=4))
    state = {k: np.zeros(v.shape) for k, v in model.params.items()}
    state["head.b"] = np.asarray(bias, dtype=float)
    model.set_state(state)
    return model


def test_predict_uniform_logits():
    pred = predict(_model_with_head([0.0, 0.0]), np.zeros((1, 1, 16, 16)))
    assert np.all(pred.confidence == 0.5)
    assert np.all(pred.mask == 0)


def test_predict_confident_class_one():
    pred = predict(_model_with_head([0.0, 10.0]), np.zeros((1, 1, 16, 16)))
    assert np.all(pred.confidence > 0.9999)
    assert np.all(pred.mask == 1)
    assert pred.confidence_map().kind == "confidence"


def test_predict_shift_invariance(rng):
    model = build_model(ModelConfig(base_width=4, mhex_hidden=4, seed=1))
    x = rng.random((1, 1, 16, 16))
    base = predict(model, x).mask
    state = model.state()
    state["head.b"] = state["head.b"] + 4.0
    model.set_state(state)
    np.testing.assert_array_equal(predict(model, x).mask, base)


@pytest.mark.parametrize("backbone", ["unet", "unetpp"])
def test_full_model_gradient_wrt_input(backbone):
    rng = np.random.default_rng(11)
    model = build_model(ModelConfig(backbone=backbone, base_width=4, mhex_hidden=4, seed=11))
    target = rng.integers(0, 2, size=(1, 16, 16))

    def loss(x):
        tr = forward(model, x)
        return deep_supervision_loss(tr.deep_preds, target, tr.final_logits)

    assert T.finite_diff_check(loss, rng.random((1, 1, 16, 16))) < 1e-4


@pytest.mark.parametrize("name", ["enc0.conv1.w", "bottleneck.conv2.b", "dec1.proj.w", "dec2.mhex.c1", "dec3.mhex.c2", "head.w"])
def test_full_model_gradient_wrt_parameters(name):
    rng = np.random.default_rng(5)
    model = build_model(ModelConfig(base_width=4, mhex_hidden=4, seed=5))
    x = rng.random((1, 1, 16, 16))
    target = rng.integers(0, 2, size=(1, 16, 16))
    start = model.params[name].data
    if not start.any():
        start = rng.normal(scale=0.1, size=start.shape)

    def loss(p):
        tr = forward(model, x, overrides={name: p})
        return deep_supervision_loss(tr.deep_preds, target, tr.final_logits)

    assert T.finite_diff_check(loss, start) < 1e-4
