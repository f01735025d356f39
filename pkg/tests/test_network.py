import numpy as np
import pytest
from hypothesis import given, strategies as st

from d2s import diffcore as dc
from d2s.exceptions import BadConfig, DimensionMismatch
from d2s.frames import DescriptorSet
from d2s.network import Architecture, ModelParams, forward, forward_tensor, head, reliability


def make_params(D=16, L=2, widths=(12, 10), seed=0, dtype=np.float64):
    with dc.precision(dtype):
        return ModelParams.initialize(Architecture(D, L, 4, widths), np.random.default_rng(seed))


def descriptors(K, D=16, seed=0):
    return np.random.default_rng(seed).normal(size=(K, D))


@pytest.mark.parametrize("K", [1, 7, 2048])
def test_output_shape(K):
    params = make_params(L=1, dtype=np.float32)
    out = forward(DescriptorSet(descriptors(K).astype(np.float32), np.zeros((K, 2))), params)
    assert out.coords.shape == (K, 3)
    assert out.raw_p.shape == (K,)
    assert out.reliability.shape == (K,)


def test_dimension_mismatch():
    params = make_params()
    with pytest.raises(DimensionMismatch):
        forward(descriptors(5, D=12), params)


def test_heads_must_divide_dim():
    with pytest.raises(BadConfig):
        Architecture(18, num_heads=4)


@given(st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_permutation_equivariance_exact(K, seed):
    params = make_params(dtype=np.float32)
    x = descriptors(K, seed=seed).astype(np.float32)
    perm = np.random.default_rng(seed + 1).permutation(K)
    a = forward(x, params)
    b = forward(x[perm], params)
    assert np.array_equal(b.coords, a.coords[perm])
    assert np.array_equal(b.raw_p, a.raw_p[perm])


def test_no_attention_layers_is_rowwise_head():
    params = make_params(L=0)
    x = descriptors(9)
    out = forward(x, params)
    for i in range(9):
        row = head(dc.tensor(x[i:i + 1], dtype=np.float64), params).value[0]
        assert np.allclose(out.coords[i], row[:3], rtol=1e-12, atol=1e-14)
        assert out.raw_p[i] == pytest.approx(row[3], rel=1e-12, abs=1e-14)


def test_single_descriptor_attention_is_one():
    params = make_params()
    attn = []
    forward(descriptors(1), params, attention_out=attn)
    assert len(attn) == 2
    assert all(a.shape == (1, 4, 1, 1) and np.all(a == 1.0) for a in attn)


def test_identical_descriptors_uniform_attention():
    params = make_params()
    K = 5
    x = np.tile(descriptors(1), (K, 1))
    attn = []
    out = forward(x, params, attention_out=attn)
    for a in attn:
        assert np.allclose(a, 1.0 / K, atol=1e-12)
    assert np.allclose(out.coords, out.coords[0], atol=1e-12)


def test_attention_rows_sum_to_one():
    params = make_params(dtype=np.float32)
    attn = []
    forward(descriptors(6).astype(np.float32), params, attention_out=attn)
    for a in attn:
        assert np.all(a >= 0)
        assert np.allclose(a.sum(-1), 1.0, atol=1e-6)


def test_padding_mask_does_not_change_valid_rows():
    params = make_params()
    x = descriptors(5)
    padded = np.zeros((1, 8, 16))
    padded[0, :5] = x
    valid = np.zeros((1, 8), bool)
    valid[0, :5] = True
    ref = forward_tensor(dc.tensor(x[None], dtype=np.float64), params).value[0]
    got = forward_tensor(dc.tensor(padded, dtype=np.float64), params, valid=valid).value[0, :5]
    assert np.allclose(ref, got, atol=1e-12)


def test_reliability_values():
    assert reliability(0.0) == 1.0
    assert reliability(0.01, 100) == 0.5
    assert reliability(-0.01, 100) == 0.5
    assert reliability(1.0, 100) == pytest.approx(1 / 101)
    with pytest.raises(ValueError):
        reliability(0.1, 0)


@given(st.floats(0, 1e6), st.floats(0, 1e6))
def test_reliability_monotone_and_in_range(a, b):
    ra, rb = reliability(a), reliability(b)
    assert 0 < ra <= 1 and 0 < rb <= 1
    if a < b:
        assert ra >= rb
    assert reliability(-a) == ra


def test_reliability_strictly_decreasing_on_grid():
    r = reliability(np.linspace(0, 5, 1001))
    assert np.all(np.diff(r) < 0)


def _group_params(params, group):
    return [t for name, t in params.tensors.items() if name.startswith(group)]


@pytest.mark.parametrize("group", ["attn0.w", "attn0.b", "attn0.mlp", "attn1.", "head"])
def test_forward_gradients_per_group(group):
    params = make_params()
    x = dc.tensor(descriptors(8)[None], dtype=np.float64)
    w = dc.tensor(np.random.default_rng(5).normal(size=(1, 8, 4)), dtype=np.float64)
    f = lambda: dc.sum(dc.mul(forward_tensor(x, params), w))
    group_params = _group_params(params, group)
    assert group_params
    assert dc.gradient_check(f, group_params, n_samples=50) < 1e-6


def test_initialization_fan_in_bounds():
    params = make_params(D=16, L=1, widths=(32,), dtype=np.float64)
    for name, t in params.tensors.items():
        if t.ndim == 1:
            assert np.all(t.value == 0)
        else:
            assert np.max(np.abs(t.value)) <= 1 / np.sqrt(t.shape[0])


def test_parameter_shapes_follow_architecture():
    arch = Architecture(64, 2, 4, (128, 256, 256, 128))
    shapes = arch.tensor_shapes()
    assert shapes["attn0.mlp0.w"] == (128, 128)
    assert shapes["attn0.mlp1.w"] == (128, 64)
    assert "attn0.mlp1.b" not in shapes
    assert shapes["head0.w"] == (64, 128)
    assert shapes["head4.w"] == (128, 4)
    # independent weights per layer
    params = ModelParams.initialize(arch, np.random.default_rng(0))
    assert not np.array_equal(params["attn0.wq"].value, params["attn1.wq"].value)
