import numpy as np
import pytest

from sggkit import autodiff as ad
from sggkit.blocks import AttentionBlock, DecoderLayer, MultiHeadAttention, layer_norm
from sggkit.errors import ConfigError, ShapeError
from sggkit.gradcheck import check_gradients, gradcheck_suite
from sggkit.params import ParamStore, named_rng


def _block(width=16, heads=2, dtype=np.float64, seed=0):
    store = ParamStore(dtype=dtype)
    rng = named_rng(seed, "blocks")
    return store, AttentionBlock(store, "b", width, heads, 24, rng), rng


def test_heads_must_divide_width():
    store = ParamStore(dtype=np.float64)
    with pytest.raises(ConfigError):
        MultiHeadAttention(store, "m", 10, 3, named_rng(0, "x"))


def test_width_mismatch_raises():
    store, block, rng = _block()
    q = ad.constant(rng.standard_normal((3, 16)))
    k = ad.constant(rng.standard_normal((4, 8)))
    with pytest.raises(ShapeError):
        block(q, k, k)


def test_single_key_gives_all_ones_attention_weights():
    store, block, rng = _block()
    q = rng.standard_normal((5, 16))
    k = rng.standard_normal((1, 16))
    w = block.attn.mha.attention_weights(q, k)
    assert w.shape == (2, 5, 1)
    assert np.all(w == 1.0)


def test_identical_keys_give_uniform_weights():
    store, block, rng = _block()
    q = rng.standard_normal((4, 16))
    k = np.tile(rng.standard_normal((1, 16)), (6, 1))
    w = block.attn.mha.attention_weights(q, k)
    assert np.allclose(w, 1.0 / 6.0)


def test_key_permutation_is_bitwise_invariant_in_float64():
    store, block, rng = _block()
    q = ad.constant(rng.standard_normal((5, 16)))
    kv = rng.standard_normal((9, 16))
    out1 = block(q, ad.constant(kv), ad.constant(kv)).data
    perm = rng.permutation(9)
    kvp = ad.constant(kv[perm])
    store.begin_step()
    out2 = block(q, kvp, kvp).data
    assert np.array_equal(out1, out2)


def test_output_shape_is_query_shape():
    store, block, rng = _block()
    for n in (1, 3, 17):
        q = ad.constant(rng.standard_normal((4, 16)))
        kv = ad.constant(rng.standard_normal((n, 16)))
        store.begin_step()
        assert block(q, kv, kv).shape == (4, 16)


def test_determinism_same_inputs_same_bits():
    store1, block1, rng = _block(seed=3)
    q = rng.standard_normal((4, 16))
    kv = rng.standard_normal((6, 16))
    out1 = block1(ad.constant(q), ad.constant(kv), ad.constant(kv)).data
    store2, block2, _ = _block(seed=3)
    out2 = block2(ad.constant(q), ad.constant(kv), ad.constant(kv)).data
    assert np.array_equal(out1, out2)


# -- layer_norm -----------------------------------------------------------

def _ln_params(c, dtype=np.float64, gain=1.0, bias=0.0):
    g = ad.constant(np.full((1, c), gain, dtype=dtype))
    b = ad.constant(np.full((1, c), bias, dtype=dtype))
    return g, b


def test_layer_norm_constant_row_is_zero():
    g, b = _ln_params(5)
    x = ad.constant(np.full((3, 5), 4.2))
    assert np.allclose(layer_norm(x, g, b).data, 0.0)


def test_layer_norm_plus_minus_one():
    g, b = _ln_params(2)
    x = ad.constant(np.array([[1.0, -1.0]]))
    y = layer_norm(x, g, b).data
    assert np.allclose(y, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_zero_gain_broadcasts_bias():
    g, b = _ln_params(4, gain=0.0, bias=2.5)
    x = ad.constant(np.random.default_rng(0).standard_normal((3, 4)))
    assert np.allclose(layer_norm(x, g, b).data, 2.5)


def test_attention_block_gradcheck():
    store, block, rng = _block()
    q = ad.constant(rng.standard_normal((4, 16)))
    kv = ad.constant(rng.standard_normal((6, 16)))
    r = rng.standard_normal((4, 16))

    def forward():
        return ad.sum_all(block(q, kv, kv) * ad.constant(r))

    res = check_gradients(store, forward, named_rng(0, "gc"), n_coords=20)
    assert res.passed, res.failures


def test_decoder_layer_gradcheck():
    store = ParamStore(dtype=np.float64)
    rng = named_rng(1, "dec")
    layer = DecoderLayer(store, "d", 16, 2, 24, rng)
    x = ad.constant(rng.standard_normal((3, 16)))
    mem = ad.constant(rng.standard_normal((7, 16)))
    r = rng.standard_normal((3, 16))

    def forward():
        return ad.sum_all(layer(x, mem) * ad.constant(r))

    res = check_gradients(store, forward, named_rng(1, "gc"), n_coords=20)
    assert res.passed, res.failures


def test_gradcheck_suite_smoke():
    results = gradcheck_suite(seed=1, instances=2, n_coords=3)
    for res in results:
        assert res.passed, (res.name, res.failures)
