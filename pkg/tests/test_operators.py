import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsnas import autodiff as ad
from wsnas.operators import (SearchSpace, apply_operator, conv, desk_operators, ffn, init_params, mha,
                             param_count, sublayer, table6_operators)
from gradcases import operator_case, operator_specs

# exact counts by direct summation of weight and bias sizes at d = 768
TABLE6_COUNTS = {"MHA6": 1_181_568, "MHA8": 1_181_568, "FFN": 1_181_184, "FFN'": 1_279_552,
                 "CONV3": 1_184_256, "CONV5": 1_185_792}
TABLE6_ROUNDED = {"MHA6": 1.18, "MHA8": 1.18, "FFN": 1.18, "FFN'": 1.28, "CONV3": 1.18, "CONV5": 1.19}


def test_table6_exact_counts():
    assert {s.name: param_count(s) for s in table6_operators(768)} == TABLE6_COUNTS


def test_table6_rounded_counts():
    for s in table6_operators(768):
        assert round(param_count(s) / 1e6, 2) == TABLE6_ROUNDED[s.name]


def test_mha_count_formula():
    d, q = 768, 384
    assert param_count(mha(d, 6, q)) == 3 * (d * q + q) + (q * d + d)


def test_parity_within_ten_percent():
    counts = [param_count(s) for s in table6_operators(768)]
    assert max(counts) <= 1.1 * min(counts)


@pytest.mark.parametrize("d", [8, 64, 768])
def test_conv_kernel_changes_count_by_d_per_tap(d):
    assert param_count(conv(d, 5)) - param_count(conv(d, 3)) == 2 * d
    assert param_count(conv(d, 7)) - param_count(conv(d, 3)) == 4 * d


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        mha(8, 3, 8)
    with pytest.raises(ValueError):
        conv(8, 4)
    with pytest.raises(ValueError):
        ffn(8, 0)


def test_desk_sets():
    assert [s.name for s in desk_operators(64, 4)] == ["MHA4", "FFN", "CONV3", "CONV5"]
    assert [s.name for s in desk_operators(64, 6)] == ["MHA4", "MHA8", "FFN", "FFN'", "CONV3", "CONV5"]
    assert [s.name for s in desk_operators(64, 3)] == ["MHA4", "FFN", "CONV3"]
    with pytest.raises(ValueError):
        desk_operators(64, 5)


def test_space_validation_and_roundtrip():
    space = SearchSpace(3, tuple(desk_operators(16, 4)), 16, 16, 8)
    assert space.size == 64
    assert SearchSpace.from_dict(space.to_dict()) == space
    with pytest.raises(ValueError):
        SearchSpace(3, (ffn(16, 16), ffn(16, 32)), 16, 16, 8)


def test_init_is_deterministic_and_seeded():
    spec = conv(8, 3)
    a, b, c = init_params(spec, 1), init_params(spec, 1), init_params(spec, 2)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    assert any(not np.array_equal(a[k], c[k]) for k in a if a[k].ndim >= 2)
    np.testing.assert_array_equal(a["ln_g"], 1.0)
    assert np.abs(a["pw1"]).max() <= 0.04


@pytest.mark.parametrize("spec", operator_specs(), ids=lambda s: s.name)
def test_zero_weights_leave_layer_norm_of_input(spec):
    rng = np.random.default_rng(0)
    h = rng.standard_normal((2, 5, spec.hidden))
    p = {k: (v if k.startswith("ln_") else np.zeros_like(v)) for k, v in init_params(spec, 0).items()}
    out = apply_operator(spec, p, h).data
    want = ad.layer_norm(ad.constant(h), ad.constant(p["ln_g"]), ad.constant(p["ln_b"])).data
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_mha_ignores_padded_token():
    spec = mha(8, 2, 8)
    p = init_params(spec, 3)
    rng = np.random.default_rng(1)
    h = rng.standard_normal((1, 5, 8))
    pad = np.array([[True, True, False, True, True]])
    h2 = h.copy()
    h2[0, 2] += 10 * rng.standard_normal(8)
    a, b = apply_operator(spec, p, h, pad).data, apply_operator(spec, p, h2, pad).data
    keep = [0, 1, 3, 4]
    np.testing.assert_allclose(a[0, keep], b[0, keep], atol=1e-12)


@pytest.mark.parametrize("k", [3, 5])
def test_conv_receptive_field(k):
    spec = conv(6, k)
    p = {n: v + 0.1 for n, v in init_params(spec, 0).items()}
    rng = np.random.default_rng(2)
    h = rng.standard_normal((1, 11, 6))
    base = sublayer(spec, {n: ad.constant(v) for n, v in p.items()}, ad.constant(h)).data
    r = k // 2
    for j in range(11):
        h2 = h.copy()
        h2[0, j] += 1.0
        moved = sublayer(spec, {n: ad.constant(v) for n, v in p.items()}, ad.constant(h2)).data
        changed = np.flatnonzero(np.abs(moved - base).max(axis=-1)[0] > 1e-12)
        assert set(changed) == set(range(max(0, j - r), min(11, j + r + 1)))


def test_dense_conv_matches_separable_structure_count():
    assert param_count(conv(8, 3, separable=False)) == 3 * 64 + 8 + 64 + 8


@pytest.mark.parametrize("spec", operator_specs(), ids=lambda s: s.name)
def test_operator_gradients(spec):
    for seed in range(3):
        assert ad.grad_check(*operator_case(spec, seed)) <= 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 7), st.sampled_from(range(len(operator_specs(8)))))
def test_shape_preserved(b, n, idx):
    spec = operator_specs(8)[idx]
    h = np.random.default_rng(b * 10 + n).standard_normal((b, n, 8))
    assert apply_operator(spec, init_params(spec, 0), h).shape == (b, n, 8)


def test_wrong_hidden_rejected():
    spec = ffn(8, 8)
    with pytest.raises(ad.ShapeError):
        apply_operator(spec, init_params(spec, 0), np.ones((1, 3, 4)))
