"""Shared decoder backbone: residual MLP with token and retrieval heads.

Four pre-norm residual blocks (layernorm -> linear -> gelu -> linear -> add)
on the shared latent, a token head reshaped to (n, tokens, token_dim), and a
retrieval head followed by row L2 normalization. Low-rank adapters can be
attached to the block linears; with their B factors at zero the forward is
bitwise identical to the adapter-free path.

Parameters live in flat name->array dicts (the same names the checkpoint
format stores). Linear weights use the (out, in) convention, applied as
x @ w.T + b, so the effective adapted weight is w + scale * (b_factor @
a_factor). Forward returns a cache sufficient for an exact reverse pass;
backward can skip gradients for the frozen base set.
"""

from dataclasses import dataclass

import numpy as np

from duala import kernels
from duala.errors import DimensionMismatchError, NonFiniteError, ValidationError

N_BLOCKS = 4
LN_EPS = 1e-5
LORA_SCALE = 1.0  # alpha = rank


@dataclass
class BackboneDims:
    latent: int = 256
    tokens: int = 16
    token_dim: int = 64
    retrieval: int = 64


def init_backbone(dims: BackboneDims, rng, dtype=np.float32):
    """Fresh backbone parameter dict; linears get 1/sqrt(fan_in) Gaussian init."""
    h = dims.latent
    params = {}
    for i in range(N_BLOCKS):
        params[f"block{i}/ln/gamma"] = np.ones(h, dtype=dtype)
        params[f"block{i}/ln/beta"] = np.zeros(h, dtype=dtype)
        for name in ("fc1", "fc2"):
            params[f"block{i}/{name}/w"] = (
                rng.standard_normal((h, h)) / np.sqrt(h)).astype(dtype)
            params[f"block{i}/{name}/b"] = np.zeros(h, dtype=dtype)
    out_tokens = dims.tokens * dims.token_dim
    params["tokens/w"] = (rng.standard_normal((out_tokens, h))
                          / np.sqrt(h)).astype(dtype)
    params["tokens/b"] = np.zeros(out_tokens, dtype=dtype)
    params["retr/w"] = (rng.standard_normal((dims.retrieval, h))
                        / np.sqrt(h)).astype(dtype)
    params["retr/b"] = np.zeros(dims.retrieval, dtype=dtype)
    return params


def init_lora(dims: BackboneDims, rank, rng, dtype=np.float32):
    """Low-rank adapter dict for the block linears; B starts at zero."""
    if rank < 1:
        raise ValidationError("lora rank must be >= 1")
    h = dims.latent
    lora = {}
    for i in range(N_BLOCKS):
        for name in ("fc1", "fc2"):
            lora[f"lora/block{i}/{name}/a"] = (
                rng.standard_normal((rank, h)) / np.sqrt(h)).astype(dtype)
            lora[f"lora/block{i}/{name}/b"] = np.zeros((h, rank), dtype=dtype)
    return lora


def lora_effective_weight(w, a, b, scale=LORA_SCALE):
    return w + scale * (b @ a)


def _linear(x, w, b, lora, key):
    """x @ w.T + b with optional low-rank delta; returns output and the
    rank-space activation needed for backward."""
    y = x @ w.T + b
    proj = None
    if lora is not None:
        proj = x @ lora[f"lora/{key}/a"].T
        y = y + LORA_SCALE * (proj @ lora[f"lora/{key}/b"].T)
    return y, proj


def backbone_forward(params, lora, z, token_grid=None):
    """Run the backbone; returns (tokens, retrieval, cache).

    tokens has shape (n, T, E); retrieval rows are unit-norm. token_grid
    fixes the (T, E) split of the token head output; without it the head
    width is split by the retrieval width. The cache captures every
    intermediate needed for backbone_backward.
    """
    z = np.asarray(z)
    h = params["tokens/w"].shape[1]
    if z.ndim != 2 or z.shape[1] != h:
        raise DimensionMismatchError(
            f"latent batch {z.shape} does not match backbone width {h}")
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("non-finite latent input to backbone")
    x = z
    blocks = []
    for i in range(N_BLOCKS):
        gamma = params[f"block{i}/ln/gamma"]
        beta = params[f"block{i}/ln/beta"]
        u, mean, rstd = kernels.layernorm_fwd(x, gamma, beta, LN_EPS)
        a1, p1 = _linear(u, params[f"block{i}/fc1/w"], params[f"block{i}/fc1/b"],
                         lora, f"block{i}/fc1")
        g = kernels.gelu_fwd(a1)
        a2, p2 = _linear(g, params[f"block{i}/fc2/w"], params[f"block{i}/fc2/b"],
                         lora, f"block{i}/fc2")
        blocks.append({"x": x, "u": u, "mean": mean, "rstd": rstd,
                       "a1": a1, "g": g, "p1": p1, "p2": p2})
        x = x + a2
    tok_flat = x @ params["tokens/w"].T + params["tokens/b"]
    n = z.shape[0]
    t_count, t_dim = token_grid if token_grid is not None else _token_shape(params)
    if t_count * t_dim != tok_flat.shape[1]:
        raise DimensionMismatchError(
            f"token grid {t_count}x{t_dim} does not tile head width "
            f"{tok_flat.shape[1]}")
    tokens = tok_flat.reshape(n, t_count, t_dim)
    retr_raw = x @ params["retr/w"].T + params["retr/b"]
    retr, norms = kernels.normalize_rows_fwd(retr_raw)
    if not np.all(norms > 0):
        raise NonFiniteError("zero-norm retrieval embedding")
    cache = {"z": z, "blocks": blocks, "x_final": x, "retr": retr,
             "norms": norms, "params": params, "lora": lora, "used": False}
    return tokens, retr, cache


def _token_shape(params):
    # default split: token_dim = retrieval width (the desk configuration);
    # callers with a different grid must pass token_grid explicitly
    out = params["tokens/w"].shape[0]
    e = params["retr/w"].shape[0]
    if out % e == 0:
        return out // e, e
    return out, 1


def backbone_backward(cache, d_tokens, d_retr, base_grads=True, lora_grads=True):
    """Exact reverse pass. Returns (grads dict, d_z).

    Either head gradient may be None (identically zero; that head is then
    skipped entirely). Set base_grads=False when the base backbone is
    frozen; only the low-rank adapter gradients (and d_z) are produced.
    """
    if cache.get("used"):
        raise ValidationError("stale cache: backward already consumed it")
    cache["used"] = True
    params, lora = cache["params"], cache["lora"]
    x_final = cache["x_final"]
    n = x_final.shape[0]
    grads = {}

    dx = np.zeros_like(x_final)
    if d_tokens is not None:
        d_tok_flat = np.asarray(d_tokens).reshape(n, -1)
        if d_tok_flat.shape[1] != params["tokens/w"].shape[0]:
            raise DimensionMismatchError("d_tokens shape mismatch")
        dx += d_tok_flat @ params["tokens/w"]
        if base_grads:
            grads["tokens/w"] = d_tok_flat.T @ x_final
            grads["tokens/b"] = d_tok_flat.sum(axis=0)
    if d_retr is not None:
        d_retr_raw = kernels.normalize_rows_bwd(cache["retr"], cache["norms"],
                                                np.asarray(d_retr))
        dx += d_retr_raw @ params["retr/w"]
        if base_grads:
            grads["retr/w"] = d_retr_raw.T @ x_final
            grads["retr/b"] = d_retr_raw.sum(axis=0)

    for i in reversed(range(N_BLOCKS)):
        blk = cache["blocks"][i]
        da2 = dx  # residual add passes dx through to both branches
        dg = da2 @ params[f"block{i}/fc2/w"]
        if lora is not None:
            a_mat = lora[f"lora/block{i}/fc2/a"]
            b_mat = lora[f"lora/block{i}/fc2/b"]
            dp2 = LORA_SCALE * (da2 @ b_mat)
            dg = dg + dp2 @ a_mat
            if lora_grads:
                grads[f"lora/block{i}/fc2/b"] = LORA_SCALE * (da2.T @ blk["p2"])
                grads[f"lora/block{i}/fc2/a"] = dp2.T @ blk["g"]
        if base_grads:
            grads[f"block{i}/fc2/w"] = da2.T @ blk["g"]
            grads[f"block{i}/fc2/b"] = da2.sum(axis=0)
        da1 = kernels.gelu_bwd(blk["a1"], dg)
        du = da1 @ params[f"block{i}/fc1/w"]
        if lora is not None:
            a_mat = lora[f"lora/block{i}/fc1/a"]
            b_mat = lora[f"lora/block{i}/fc1/b"]
            dp1 = LORA_SCALE * (da1 @ b_mat)
            du = du + dp1 @ a_mat
            if lora_grads:
                grads[f"lora/block{i}/fc1/b"] = LORA_SCALE * (da1.T @ blk["p1"])
                grads[f"lora/block{i}/fc1/a"] = dp1.T @ blk["u"]
        if base_grads:
            grads[f"block{i}/fc1/w"] = da1.T @ blk["u"]
            grads[f"block{i}/fc1/b"] = da1.sum(axis=0)
        dx_ln, dgamma, dbeta = kernels.layernorm_bwd(
            blk["x"], params[f"block{i}/ln/gamma"], blk["mean"], blk["rstd"], du)
        if base_grads:
            grads[f"block{i}/ln/gamma"] = dgamma
            grads[f"block{i}/ln/beta"] = dbeta
        dx = dx + dx_ln
    return grads, dx
