"""Finite-difference verification suite for every differentiable piece.

Each entry builds a small 64-bit problem, wraps value+gradient as a flat
function of one vector, and compares against central differences. Used by
the self-check command and the acceptance tests; keep problem sizes tiny
(batch at most 16) so the full sweep stays fast on one core.
"""

import numpy as np

from duala.backbone import (
    BackboneDims,
    backbone_backward,
    backbone_forward,
    init_backbone,
    init_lora,
)
from duala.losses import (
    ReferenceMatrix,
    bidirectional_contrastive_loss,
    mine_triplets,
    relational_consistency_from_embeddings,
    semantic_alignment_loss,
)
from duala.optim import flatten_tensors, grad_check, unflatten_tensors
from duala.perturb import fit_category_stats, perturb, perturb_backward
from duala.ridge import RidgeAdapter, adapter_backward

THRESHOLD = 1e-4


def _check_triplet(seed, bug=False):
    rng = np.random.default_rng([seed, 11])
    z0 = rng.standard_normal((6, 5))
    labels = np.array([0, 0, 0, 1, 1, 1])
    trips = mine_triplets(labels, "all")

    def fn(theta):
        out = semantic_alignment_loss(theta.reshape(6, 5), trips, 0.2)
        grad = out.grads["Z"]
        if bug:
            grad = grad * 1.05
        return out.value, grad.ravel()

    return grad_check(fn, z0.ravel())


def _check_relational(seed, bug=False):
    rng = np.random.default_rng([seed, 12])
    z0 = rng.standard_normal((9, 5))
    labels = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
    s_ref = rng.uniform(-0.5, 0.5, size=(3, 3))
    s_ref = (s_ref + s_ref.T) / 2
    np.fill_diagonal(s_ref, 1.0)
    ref = ReferenceMatrix(s_ref, np.ones((3, 3), dtype=bool))

    def fn(theta):
        out = relational_consistency_from_embeddings(
            theta.reshape(9, 5), labels, 3, ref)
        return out.value, out.grads["Z"].ravel()

    return grad_check(fn, z0.ravel())


def _check_contrastive(seed, bug=False, soft=False):
    rng = np.random.default_rng([seed, 13])
    n, e = 5, 4
    brain0 = rng.standard_normal((n, e))
    image = rng.standard_normal((n, e))
    image /= np.linalg.norm(image, axis=1, keepdims=True)
    if soft:
        targets = rng.uniform(0.1, 1.0, size=(n, n))
        targets /= targets.sum(axis=1, keepdims=True)
    else:
        targets = np.eye(n)

    def fn(theta):
        both = unflatten_tensors(theta, [("brain", (n, e)), ("image", (n, e))])
        out = bidirectional_contrastive_loss(both["brain"], both["image"],
                                             0.2, targets)
        vec, _ = flatten_tensors(out.grads, order=["brain", "image"])
        return out.value, vec

    theta0, _ = flatten_tensors({"brain": brain0, "image": image},
                                order=["brain", "image"])
    return grad_check(fn, theta0)


def _check_backbone(seed, bug=False):
    rng = np.random.default_rng([seed, 14])
    dims = BackboneDims(latent=10, tokens=3, token_dim=5, retrieval=4)
    params = init_backbone(dims, rng, dtype=np.float64)
    lora = init_lora(dims, 2, rng, dtype=np.float64)
    for name in lora:  # zero B gives zero gradients for A; jitter both
        lora[name] = lora[name] + 0.1 * rng.standard_normal(lora[name].shape)
    n = 4
    z0 = rng.standard_normal((n, dims.latent))
    probe_tok = rng.standard_normal((n, dims.tokens, dims.token_dim))
    probe_retr = rng.standard_normal((n, dims.retrieval))
    names = sorted(params) + sorted(lora) + ["z"]
    layout = [(k, (params | lora)[k].shape) if k != "z" else ("z", z0.shape)
              for k in names]

    def fn(theta):
        tensors = unflatten_tensors(theta, layout)
        z = tensors.pop("z")
        p = {k: v for k, v in tensors.items() if not k.startswith("lora/")}
        lo = {k: v for k, v in tensors.items() if k.startswith("lora/")}
        tokens, retr, cache = backbone_forward(
            p, lo, z, (dims.tokens, dims.token_dim))
        value = float(np.sum(tokens * probe_tok) + np.sum(retr * probe_retr))
        grads, dz = backbone_backward(cache, probe_tok, probe_retr)
        if bug:
            grads["block1/fc1/w"] = grads["block1/fc1/w"] * 1.05
        grads["z"] = dz
        vec, _ = flatten_tensors(grads, order=names)
        return value, vec

    theta0, _ = flatten_tensors(params | lora | {"z": z0}, order=names)
    return grad_check(fn, theta0)


def _check_adapter(seed, bug=False):
    rng = np.random.default_rng([seed, 15])
    d, h, n = 7, 5, 6
    x = rng.standard_normal((n, d))
    probe = rng.standard_normal((n, h))
    lam = 0.3
    w0 = rng.standard_normal((d, h))

    def fn(theta):
        w = theta.reshape(d, h)
        value = float(np.sum((x @ w) * probe) + 0.5 * lam * np.sum(w * w))
        grad = adapter_backward(RidgeAdapter(w, ridge_lambda=lam), x, probe)
        return value, grad.ravel()

    return grad_check(fn, w0.ravel())


def _check_latent_map(seed, bug=False):
    from duala.train import _latent_backward, _latent_forward

    rng = np.random.default_rng([seed, 17])
    d, h, n = 7, 5, 6
    x = rng.standard_normal((n, d))
    probe = rng.standard_normal((n, h))
    w0 = rng.standard_normal((d, h))

    def fn(theta):
        w = theta.reshape(d, h)
        z, cache = _latent_forward(x, w)
        value = float(np.sum(z * probe))
        dx = _latent_backward(cache, probe)
        grad = adapter_backward(RidgeAdapter(w, ridge_lambda=0.0), x, dx)
        return value, grad.ravel()

    return grad_check(fn, w0.ravel())


def _check_perturb(seed, bug=False):
    rng = np.random.default_rng([seed, 16])
    h, c = 6, 3
    labels = np.array([0, 0, 1, 1, 2, 2, 0, 1])
    source = [(0, rng.standard_normal((12, h)),
               rng.integers(0, c, size=12)),
              (1, rng.standard_normal((12, h)),
               rng.integers(0, c, size=12))]
    stats = fit_category_stats(source, c, dtype=np.float64)
    probe = rng.standard_normal((8, h))
    z0 = rng.standard_normal((8, h))

    def fn(theta):
        z_t = perturb(theta.reshape(8, h), labels, stats)
        value = float(np.sum(z_t * probe))
        return value, perturb_backward(labels, stats, probe).ravel()

    return grad_check(fn, z0.ravel())


SUITE = (
    ("triplet_alignment", _check_triplet),
    ("relational_consistency", _check_relational),
    ("contrastive_identity", lambda s, bug=False: _check_contrastive(s, bug)),
    ("contrastive_soft", lambda s, bug=False: _check_contrastive(s, bug,
                                                                 soft=True)),
    ("backbone", _check_backbone),
    ("adapter", _check_adapter),
    ("latent_map", _check_latent_map),
    ("perturb", _check_perturb),
)


def run_suite(seeds=(0, 1, 2, 3, 4), inject_bug=False):
    """[(op name, worst error over seeds, passed)] for the whole suite.

    inject_bug deliberately corrupts two gradients (negative control: the
    run must then fail).
    """
    results = []
    for name, check in SUITE:
        worst = 0.0
        for seed in seeds:
            bug = inject_bug and name in ("triplet_alignment", "backbone")
            worst = max(worst, check(seed, bug=bug))
        results.append((name, worst, worst <= THRESHOLD))
    return results
