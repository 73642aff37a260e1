"""Residual MLP backbone: forward shapes, adapters, exact reverse pass."""

import numpy as np
import pytest

from duala import optim
from duala.backbone import (LORA_SCALE, N_BLOCKS, BackboneDims,
                            backbone_backward, backbone_forward,
                            init_backbone, init_lora, lora_effective_weight)
from duala.errors import (DimensionMismatchError, NonFiniteError,
                          ValidationError)

DIMS = BackboneDims(latent=12, tokens=3, token_dim=5, retrieval=5)


def make(dtype=np.float32, seed=0, rank=2, with_lora=False):
    rng = np.random.default_rng(seed)
    params = init_backbone(DIMS, rng, dtype=dtype)
    lora = init_lora(DIMS, rank, rng, dtype=dtype) if with_lora else None
    z = rng.standard_normal((6, DIMS.latent)).astype(dtype)
    return params, lora, z


def test_init_shapes():
    params, _, _ = make()
    assert len(params) == N_BLOCKS * 6 + 4
    h = DIMS.latent
    for i in range(N_BLOCKS):
        assert params[f"block{i}/fc1/w"].shape == (h, h)
        np.testing.assert_array_equal(params[f"block{i}/ln/gamma"], 1.0)
        np.testing.assert_array_equal(params[f"block{i}/fc1/b"], 0.0)
    assert params["tokens/w"].shape == (DIMS.tokens * DIMS.token_dim, h)
    assert params["retr/w"].shape == (DIMS.retrieval, h)


def test_forward_shapes_and_unit_retrieval():
    params, _, z = make()
    tokens, retr, cache = backbone_forward(params, None, z)
    assert tokens.shape == (6, DIMS.tokens, DIMS.token_dim)
    assert retr.shape == (6, DIMS.retrieval)
    np.testing.assert_allclose(np.linalg.norm(retr, axis=1), 1.0, atol=1e-6)
    assert cache["used"] is False


def test_forward_deterministic():
    params, _, z = make()
    a = backbone_forward(params, None, z)
    b = backbone_forward(params, None, z)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_zeroed_second_linear_makes_blocks_identity():
    params, _, z = make()
    for i in range(N_BLOCKS):
        params[f"block{i}/fc2/w"][:] = 0.0
    _, _, cache = backbone_forward(params, None, z)
    np.testing.assert_array_equal(cache["x_final"], z)


def test_fresh_lora_is_bitwise_noop():
    params, lora, z = make(with_lora=True)
    base_tokens, base_retr, _ = backbone_forward(params, None, z)
    tokens, retr, _ = backbone_forward(params, lora, z)
    np.testing.assert_array_equal(tokens, base_tokens)
    np.testing.assert_array_equal(retr, base_retr)


def test_lora_matches_dense_materialization():
    params, lora, z = make(dtype=np.float64, with_lora=True)
    rng = np.random.default_rng(99)
    for key, arr in lora.items():
        arr += 0.3 * rng.standard_normal(arr.shape)
    dense = dict(params)
    for i in range(N_BLOCKS):
        for name in ("fc1", "fc2"):
            dense[f"block{i}/{name}/w"] = lora_effective_weight(
                params[f"block{i}/{name}/w"],
                lora[f"lora/block{i}/{name}/a"],
                lora[f"lora/block{i}/{name}/b"], LORA_SCALE)
    tokens_a, retr_a, _ = backbone_forward(params, lora, z)
    tokens_b, retr_b, _ = backbone_forward(dense, None, z)
    np.testing.assert_allclose(tokens_a, tokens_b, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(retr_a, retr_b, rtol=1e-10, atol=1e-12)


def test_token_grid_explicit_and_invalid():
    params, _, z = make()
    tokens, _, _ = backbone_forward(params, None, z,
                                    token_grid=(DIMS.tokens, DIMS.token_dim))
    assert tokens.shape[1:] == (DIMS.tokens, DIMS.token_dim)
    tokens, _, _ = backbone_forward(params, None, z, token_grid=(5, 3))
    assert tokens.shape[1:] == (5, 3)
    with pytest.raises(DimensionMismatchError, match="token grid"):
        backbone_forward(params, None, z, token_grid=(4, 5))


def test_input_validation():
    params, _, z = make()
    with pytest.raises(DimensionMismatchError):
        backbone_forward(params, None, z[:, :-1])
    bad = z.copy()
    bad[0, 0] = np.inf
    with pytest.raises(NonFiniteError):
        backbone_forward(params, None, bad)


def test_backward_cache_is_single_use():
    params, _, z = make()
    tokens, retr, cache = backbone_forward(params, None, z)
    backbone_backward(cache, np.ones_like(tokens), np.ones_like(retr))
    with pytest.raises(ValidationError, match="stale"):
        backbone_backward(cache, np.ones_like(tokens), np.ones_like(retr))


def test_backward_none_head_equals_zero_head():
    params, lora, z = make(dtype=np.float64, with_lora=True)
    tokens, retr, cache_a = backbone_forward(params, lora, z)
    d_retr = np.random.default_rng(3).standard_normal(retr.shape)
    grads_a, dz_a = backbone_backward(cache_a, None, d_retr)
    _, _, cache_b = backbone_forward(params, lora, z)
    grads_b, dz_b = backbone_backward(cache_b, np.zeros_like(tokens), d_retr)
    np.testing.assert_allclose(dz_a, dz_b, atol=1e-14)
    assert "tokens/w" not in grads_a
    for key in grads_a:
        np.testing.assert_allclose(grads_a[key], grads_b[key], atol=1e-14)


def test_backward_freeze_selects_gradient_sets():
    params, lora, z = make(with_lora=True)
    tokens, retr, cache = backbone_forward(params, lora, z)
    d_tok = np.ones_like(tokens)
    d_retr = np.ones_like(retr)
    grads, _ = backbone_backward(cache, d_tok, d_retr, base_grads=False)
    assert grads and all(k.startswith("lora/") for k in grads)
    _, _, cache = backbone_forward(params, lora, z)
    grads, _ = backbone_backward(cache, d_tok, d_retr, lora_grads=False)
    assert grads and not any(k.startswith("lora/") for k in grads)
    assert "block0/fc1/w" in grads and "tokens/w" in grads


def test_backward_matches_finite_differences_wrt_input():
    params, lora, z32 = make(dtype=np.float64, with_lora=True)
    rng = np.random.default_rng(7)
    for arr in lora.values():
        arr += 0.2 * rng.standard_normal(arr.shape)
    z = z32[:3]
    c_tok = rng.standard_normal((3, DIMS.tokens, DIMS.token_dim))
    c_retr = rng.standard_normal((3, DIMS.retrieval))

    def fn(z_flat):
        zz = z_flat.reshape(z.shape)
        tokens, retr, cache = backbone_forward(params, lora, zz)
        value = float(np.sum(tokens * c_tok) + np.sum(retr * c_retr))
        _, dz = backbone_backward(cache, c_tok, c_retr)
        return value, dz.ravel()

    assert optim.grad_check(fn, z.ravel()) < 1e-6


def test_backward_param_gradient_oracle():
    # gradient of sum(retr * C) wrt the retrieval bias, checked by FD
    params, _, z = make(dtype=np.float64)
    rng = np.random.default_rng(11)
    c_retr = rng.standard_normal((6, DIMS.retrieval))

    def fn(bias):
        p = dict(params)
        p["retr/b"] = bias
        tokens, retr, cache = backbone_forward(p, None, z)
        value = float(np.sum(retr * c_retr))
        grads, _ = backbone_backward(cache, None, c_retr)
        return value, grads["retr/b"]

    assert optim.grad_check(fn, params["retr/b"].copy()) < 1e-6
