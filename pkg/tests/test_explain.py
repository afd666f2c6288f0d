import numpy as np
import pytest

from eunets import tensor as T
from eunets.exceptions import ContractViolation
from eunets.explain import cam_benchmark, composite_cam, equivalent_kernel, grad_cam, mhex_cam, stage_cams
from eunets.mhex import MhexBlock, mhex_forward
from eunets.models import ModelConfig, build_model, forward
from eunets.tensor import Tensor


def block_from(w1, w2):
    w1, w2 = np.asarray(w1, float), np.asarray(w2, float)
    return MhexBlock(Tensor(w1[:, :, None, None]), Tensor(w2[:, :, None, None]))


def test_hand_matrix_product():
    kernel = equivalent_kernel(block_from([[1, 2], [3, 4]], [[1, 0], [0, 1], [1, 1]]))
    assert kernel.matrix().tolist() == [[1, 2], [3, 4], [4, 6]]


def test_identity_second_conv(rng):
    w1 = rng.normal(size=(3, 5))
    kernel = equivalent_kernel(block_from(w1, np.eye(3)))
    np.testing.assert_array_equal(kernel.matrix(), w1)


def test_rejects_non_1x1():
    block = MhexBlock.__new__(MhexBlock)
    block.conv1_weight = Tensor(np.zeros((2, 2, 3, 3)))
    block.conv2_weight = Tensor(np.zeros((2, 2, 1, 1)))
    with pytest.raises(ContractViolation):
        equivalent_kernel(block)


@pytest.mark.parametrize("seed", range(100))
def test_merge_composition_without_relu(seed):
    rng = np.random.default_rng(seed)
    block = MhexBlock.init(6, 5, 3, rng)
    x = Tensor(rng.normal(size=(1, 6, 4, 4)))
    stacked = T.conv2d(T.conv2d(x, block.conv1_weight), block.conv2_weight).data
    merged = T.conv2d(x, Tensor(equivalent_kernel(block).weight)).data
    np.testing.assert_allclose(merged, stacked, atol=1e-10)
    via_block = mhex_forward(block, x, apply_relu=False).deep_pred.data
    np.testing.assert_allclose(via_block, merged, atol=1e-10)


def test_bilinear_scaling(rng):
    block = MhexBlock.init(4, 3, 2, rng)
    base = equivalent_kernel(block).matrix()
    scaled = MhexBlock(Tensor(4.0 * block.conv1_weight.data), block.conv2_weight)
    np.testing.assert_array_equal(equivalent_kernel(scaled).matrix(), 4.0 * base)


def test_cam_equals_deep_pred_when_preactivations_nonnegative(rng):
    w1 = np.abs(rng.normal(size=(4, 3)))
    w2 = rng.normal(size=(2, 4))
    block = block_from(w1, w2)
    a = np.abs(rng.normal(size=(3, 6, 6)))
    out = mhex_forward(block, Tensor(a[None]))
    assert np.all(out.pre_activation.data >= 0)
    kernel = equivalent_kernel(block)
    for c in range(2):
        np.testing.assert_allclose(mhex_cam(kernel, a, c).values, out.deep_pred.data[0, c], atol=1e-10)


def test_cam_differs_from_deep_pred_when_relu_clips(rng):
    block = block_from([[1.0], [-1.0]], [[1.0, 1.0]])
    a = np.array([[[2.0, -3.0]]])
    kernel = equivalent_kernel(block)
    assert mhex_cam(kernel, a, 0).values.tolist() == [[0.0, 0.0]]
    assert mhex_forward(block, Tensor(a[None])).deep_pred.data[0, 0].tolist() == [[2.0, 3.0]]


def test_cam_one_hot_row_selects_channel(rng):
    a = rng.normal(size=(3, 4, 4))
    kernel = equivalent_kernel(block_from(np.eye(3), [[0, 1, 0]]))
    np.testing.assert_array_equal(mhex_cam(kernel, a, 0).values, a[1])


def test_cam_constant_for_ones():
    kernel = equivalent_kernel(block_from([[1, 2, 3]], [[0.5]]))
    np.testing.assert_array_equal(mhex_cam(kernel, np.ones((3, 2, 2)), 0).values, np.full((2, 2), 3.0))


def test_cam_linear_in_activation(rng):
    kernel = equivalent_kernel(MhexBlock.init(4, 3, 2, rng))
    a, b = rng.normal(size=(2, 4, 5, 5))
    lam = 0.3
    mixed = mhex_cam(kernel, lam * a + (1 - lam) * b, 1).values
    expected = lam * mhex_cam(kernel, a, 1).values + (1 - lam) * mhex_cam(kernel, b, 1).values
    np.testing.assert_allclose(mixed, expected, atol=1e-12)


def test_cam_contracts(rng):
    kernel = equivalent_kernel(MhexBlock.init(4, 3, 2, rng))
    with pytest.raises(ContractViolation):
        mhex_cam(kernel, np.zeros((4, 3, 3)), 2)
    with pytest.raises(ContractViolation):
        mhex_cam(kernel, np.zeros((5, 3, 3)), 0)


def test_normalized_map_range_and_argmax(rng):
    kernel = equivalent_kernel(MhexBlock.init(4, 3, 2, rng))
    cam = mhex_cam(kernel, rng.normal(size=(4, 8, 8)), 1)
    norm = cam.normalized()
    assert norm.values.min() == 0.0 and norm.values.max() == 1.0
    assert np.argmax(norm.values) == np.argmax(cam.values)


def test_stage_cams_and_composite(rng):
    model = build_model(ModelConfig(base_width=4, mhex_hidden=4))
    image = rng.random((1, 1, 16, 16))
    cams = stage_cams(model, image, 1)
    assert [c.shape for c in cams] == [(4, 4), (8, 8), (16, 16)]
    comp = composite_cam(cams, 16)
    expected = sum(np.kron(c.values, np.ones((16 // c.height,) * 2)) for c in cams) / 3
    np.testing.assert_allclose(comp.values, expected, atol=1e-12)


def _zero_mhex(model):
    state = model.state()
    for k in state:
        if ".mhex." in k:
            state[k] = np.zeros_like(state[k])
    model.set_state(state)
    return model


@pytest.mark.parametrize("c", [0, 1])
def test_grad_cam_last_stage_hand_oracle(c):
    for seed in range(50):
        model = _zero_mhex(build_model(ModelConfig(base_width=4, mhex_hidden=4, seed=seed)))
        image = np.random.default_rng(seed).random((1, 1, 16, 16))
        trace = forward(model, image)
        pred = trace.final_logits.data[0].argmax(axis=0)
        if np.any(pred == c):
            break
    a = trace.stage_inputs[-1].data[0]
    head = model.params["head.w"].data[:, :, 0, 0]
    weights = head[c] * np.mean(pred == c)
    expected = np.maximum(np.einsum("j,jhw->hw", weights, a), 0.0)
    gc = grad_cam(model, image, c, 3)
    np.testing.assert_allclose(gc.values, expected, atol=1e-12)
    assert gc.normalized().values.max() == 1.0


def test_grad_cam_single_channel_is_relu_of_activation():
    weights = np.array([0.5])
    a = np.array([[[1.0, -2.0], [0.0, 3.0]]])
    np.testing.assert_array_equal(np.maximum(np.einsum("j,jhw->hw", weights, a), 0), 0.5 * np.maximum(a[0], 0))


def test_grad_cam_degenerate_class_warns():
    model = build_model(ModelConfig(base_width=4, mhex_hidden=4))
    state = {k: np.zeros(v.shape) for k, v in model.params.items()}
    state["head.b"] = np.array([1.0, 0.0])
    model.set_state(state)
    with pytest.warns(RuntimeWarning):
        gc = grad_cam(model, np.zeros((1, 1, 16, 16)), 1, 2)
    assert gc.meta["degenerate"] and not gc.values.any()


def test_grad_cam_contracts():
    model = build_model(ModelConfig(base_width=4, mhex_hidden=4))
    with pytest.raises(ContractViolation):
        grad_cam(model, np.zeros((1, 1, 16, 16)), 5, 1)
    with pytest.raises(ContractViolation):
        grad_cam(model, np.zeros((1, 1, 16, 16)), 1, 4)


def test_benchmark_rows():
    model = build_model(ModelConfig(base_width=4, mhex_hidden=4))
    rows = cam_benchmark(model, [8, 16, 24])
    assert [r["size"] for r in rows] == [8, 16, 24]
    assert all(r["mhex_prep_s"] > 0 and r["gradcam_s"] > 0 and r["mhex_loops"] >= 1 for r in rows)
    with pytest.raises(ContractViolation):
        cam_benchmark(model, [8, 16])
    with pytest.raises(ContractViolation):
        cam_benchmark(model, [8, 16, 20])
