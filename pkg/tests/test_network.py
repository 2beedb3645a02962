import numpy as np
import pytest
from oracles import finite_difference_check, random_batch

from adherence_forecast.model import network
from adherence_forecast.model.network import (
    HyperParams,
    IncompatibleHeads,
    MissingTrace,
    ShapeMismatch,
    forward,
    init_model,
    parameter_shapes,
    predict_proba,
    sample_dropout,
)

HP = HyperParams()


def test_parameter_count():
    params = init_model(HP, 0)
    assert params.n_params == 1186
    sizes = {k: v.size for k, v in params.arrays.items()}
    assert sizes["embed.weight"] + sizes["embed.bias"] == 12
    per_layer = sum(v for k, v in sizes.items() if k.startswith("layers.0."))
    assert per_layer == 388
    assert sizes["head.weight"] + sizes["head.bias"] == 10


@pytest.mark.parametrize("hp", [HyperParams(8, 2, 16, 0.0, 1), HyperParams(16, 8, 64, 0.2, 2),
                                HyperParams(2, 1, 4, 0.0, 3)])
def test_parameter_count_formula(hp):
    d, f = hp.d_model, hp.ffn_hidden
    layer = 4 * (d * d + d) + 2 * (d * f) + f + d + 4 * d
    expected = 2 * d + d + hp.n_layers * layer + d * 2 + 2
    assert init_model(hp, 0).n_params == expected
    assert list(init_model(hp, 0).arrays) == list(parameter_shapes(hp))


def test_init_deterministic_and_bounded():
    a, b = init_model(HP, 5), init_model(HP, 5)
    for name in a.arrays:
        assert np.array_equal(a[name], b[name])
        shape = a[name].shape
        if name.endswith(".weight"):
            assert np.all(np.abs(a[name]) <= np.sqrt(1 / shape[0]))
        elif name.endswith(".scale"):
            assert np.all(a[name] == 1)
        else:
            assert np.all(a[name] == 0)
    assert not np.array_equal(a["embed.weight"], init_model(HP, 6)["embed.weight"])


def test_incompatible_heads():
    with pytest.raises(IncompatibleHeads):
        init_model(HyperParams(d_model=4, n_heads=3), 0)


def test_shape_errors():
    params = init_model(HP, 0)
    with pytest.raises(ShapeMismatch):
        forward(params, np.zeros((2, 3, 7)), np.ones((2, 7), bool))
    with pytest.raises(ShapeMismatch):
        forward(params, np.zeros((2, 2, 7)), np.ones((2, 6), bool))
    with pytest.raises(MissingTrace):
        network.backward(params, None, np.zeros((2, 2)))


def test_masking_invariance_single(backend):
    rng = np.random.default_rng(0)
    params = init_model(HP, 1)
    x = rng.normal(size=(1, 2, 7))
    padded = np.zeros((1, 2, 42))
    padded[:, :, :7] = x
    mask = np.zeros((1, 42), bool)
    mask[:, :7] = True
    a, _ = forward(params, x, np.ones((1, 7), bool), backend=backend)
    b, _ = forward(params, padded, mask, backend=backend)
    assert np.max(np.abs(a - b)) <= 1e-6


def test_eval_deterministic_and_batch_independent(backend, rng):
    params = init_model(HP, 2)
    values, mask = random_batch(rng, 6, 15)
    a, trace = forward(params, values, mask, backend=backend)
    assert trace is None
    b, _ = forward(params, values, mask, backend=backend)
    assert np.array_equal(a, b)
    perm = rng.permutation(6)
    c, _ = forward(params, values[perm], mask[perm], backend=backend)
    np.testing.assert_allclose(c, a[perm], atol=1e-12)


def test_edge_inputs_finite(backend):
    params = init_model(HP, 3)
    for t in (1, 42):
        logits, _ = forward(params, np.zeros((2, 2, t)), np.ones((2, t), bool), backend=backend)
        assert np.all(np.isfinite(logits))
    p = predict_proba(params, np.zeros((1, 2, 1)), np.ones((1, 1), bool), backend=backend)
    assert 0 <= p[0] <= 1


def test_train_mode_uses_dropout(rng):
    params = init_model(HP, 0)
    values, mask = random_batch(rng, 3, 10)
    a, _ = forward(params, values, mask, train=True, rng=np.random.default_rng(1))
    b, _ = forward(params, values, mask, train=True, rng=np.random.default_rng(2))
    assert not np.allclose(a, b)
    no_drop = init_model(HyperParams(dropout_rate=0.0), 0)
    c, _ = forward(no_drop, values, mask, train=True, rng=np.random.default_rng(1))
    d, _ = forward(no_drop, values, mask)
    np.testing.assert_allclose(c, d, atol=1e-12)


def test_dropout_keep_rate():
    masks = sample_dropout(HP, 64, 42, np.random.default_rng(0))
    assert abs(masks.ffn[0].mean() - 0.9) < 0.005
    assert abs(1 / masks.inv_keep - 0.9) < 1e-4


def test_zero_upstream_gives_zero_grads(backend, rng):
    params = init_model(HP, 4)
    values, mask = random_batch(rng, 3, 8)
    _, trace = forward(params, values, mask, train=True, rng=rng, backend=backend)
    grads = network.backward(params, trace, np.zeros((3, 2)), backend=backend)
    assert set(grads) == set(params.arrays)
    assert all(np.all(g == 0) for g in grads.values())


def test_padded_input_grads_exactly_zero(backend, rng):
    params = init_model(HP, 5)
    values, mask = random_batch(rng, 4, 9)
    _, trace = forward(params, values, mask, train=True, rng=rng, backend=backend)
    _, dx = network.backward(params, trace, rng.normal(size=(4, 2)), backend=backend,
                             return_input_grad=True)
    assert dx.shape == values.shape
    assert np.all(dx.transpose(0, 2, 1)[~mask] == 0)
    assert np.any(dx.transpose(0, 2, 1)[mask] != 0)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(backend, seed):
    rng = np.random.default_rng(100 + seed)
    params = init_model(HP, seed)
    values, mask = random_batch(rng, 3, 6)
    masks = sample_dropout(HP, 3, 6, rng)
    worst, checked, skipped, groups = finite_difference_check(
        params, values, mask, rng.normal(size=(3, 2)), masks, backend=backend)
    assert groups == set(params.arrays)
    assert skipped <= 0.02 * (checked + skipped)
    assert worst <= 1e-4


def test_input_gradient_finite_differences(rng):
    params = init_model(HyperParams(dropout_rate=0.0), 7)
    values, mask = random_batch(rng, 2, 5)
    dl = rng.normal(size=(2, 2))
    _, trace = forward(params, values, mask, train=True, rng=rng)
    _, dx = network.backward(params, trace, dl, return_input_grad=True)
    h = 1e-5
    for idx in [(0, 0, 0), (0, 1, 4), (1, 0, 0), (1, 1, int(mask[1].sum()) - 1)]:
        vp, vm = values.copy(), values.copy()
        vp[idx] += h
        vm[idx] -= h
        num = ((forward(params, vp, mask)[0] - forward(params, vm, mask)[0]) * dl).sum() / (2 * h)
        assert abs(num - dx[idx]) <= 1e-6 * max(1, abs(num))
