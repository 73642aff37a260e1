"""Loss functions for alignment training, each returning value and gradients.

Three families:
  - triplet alignment on shared latents (cosine hinge over mined triplets),
  - relational consistency between a new subject's class-similarity matrix
    and a reference aggregated over source subjects,
  - bidirectional contrastive retrieval with mixed or soft targets.

Gradients are exact reverse-mode, including through every row/prototype
normalization, so the whole stack can be finite-difference checked.
"""

from dataclasses import dataclass, field

import numpy as np

from duala import kernels
from duala.errors import (
    DegenerateEmbeddingError,
    DegeneratePrototypeError,
    DimensionMismatchError,
    EmptyOverlapError,
    NonFiniteError,
    ValidationError,
)


@dataclass
class LossOutput:
    value: float
    grads: dict

    def __post_init__(self):
        self.value = float(self.value)
        if not np.isfinite(self.value):
            raise NonFiniteError("loss value is not finite")


def _normalize_rows_checked(z, what):
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0):
        raise DegenerateEmbeddingError(f"zero-norm row in {what}")
    return z / norms[:, None], norms


# ---------------------------------------------------------------------------
# triplet alignment

def mine_triplets(labels, policy="all", rng=None):
    """Triplet index array (m, 3) of (anchor, positive, negative).

    `all` enumerates every valid combination in (a, p, n) lexicographic
    order; `random_per_anchor` draws one positive and one negative per
    anchor that has both available. Anchors without a same-class partner
    are skipped; the result may be empty.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n < 2:
        raise ValidationError("triplet mining needs at least 2 rows")
    same = labels[:, None] == labels[None, :]
    if policy == "all":
        pairs = np.argwhere(same & ~np.eye(n, dtype=bool))
        chunks = []
        for a, p in pairs:
            negs = np.flatnonzero(~same[a])
            if negs.size:
                block = np.empty((negs.size, 3), dtype=np.int64)
                block[:, 0] = a
                block[:, 1] = p
                block[:, 2] = negs
                chunks.append(block)
        if not chunks:
            return np.zeros((0, 3), dtype=np.int64)
        return np.concatenate(chunks, axis=0)
    if policy == "random_per_anchor":
        if rng is None:
            raise ValidationError("random_per_anchor policy requires an rng")
        rows = []
        for a in range(n):
            pos = np.flatnonzero(same[a])
            pos = pos[pos != a]
            neg = np.flatnonzero(~same[a])
            if pos.size and neg.size:
                rows.append((a, int(rng.choice(pos)), int(rng.choice(neg))))
        return np.array(rows, dtype=np.int64).reshape(-1, 3)
    raise ValidationError(f"unknown triplet policy {policy!r}")


def semantic_alignment_loss(z, triplets, margin):
    """Hinge loss sum(max(0, margin - cos(a,p) + cos(a,n))) over triplets.

    Inputs need not be normalized; cosine is taken inside and the gradient
    flows through the normalization. Inactive triplets contribute nothing
    to value or gradient.
    """
    if margin <= 0:
        raise ValidationError("margin must be positive")
    z = np.asarray(z)
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    dz = np.zeros_like(z)
    if triplets.shape[0] == 0:
        return LossOutput(0.0, {"Z": dz})
    zhat, norms = _normalize_rows_checked(z, "alignment latents")
    a, p, nn = triplets[:, 0], triplets[:, 1], triplets[:, 2]
    s_ap = np.sum(zhat[a] * zhat[p], axis=1)
    s_an = np.sum(zhat[a] * zhat[nn], axis=1)
    terms = margin - s_ap + s_an
    active = terms > 0
    value = float(terms[active].sum())

    aa, pp, nnn = a[active], p[active], nn[active]
    sap, san = s_ap[active], s_an[active]
    # d cos(u, v) / du = (v_hat - cos * u_hat) / |u|
    dz_a = (-(zhat[pp] - sap[:, None] * zhat[aa])
            + (zhat[nnn] - san[:, None] * zhat[aa])) / norms[aa, None]
    dz_p = -(zhat[aa] - sap[:, None] * zhat[pp]) / norms[pp, None]
    dz_n = (zhat[aa] - san[:, None] * zhat[nnn]) / norms[nnn, None]
    np.add.at(dz, aa, dz_a.astype(z.dtype, copy=False))
    np.add.at(dz, pp, dz_p.astype(z.dtype, copy=False))
    np.add.at(dz, nnn, dz_n.astype(z.dtype, copy=False))
    return LossOutput(value, {"Z": dz})


# ---------------------------------------------------------------------------
# class prototypes and relational consistency

@dataclass
class Prototypes:
    matrix: np.ndarray          # (C, h), unit rows where present, zero rows otherwise
    counts: np.ndarray          # (C,) int64 support per class
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def present(self):
        return self.counts > 0


def class_prototypes(z, labels, class_count):
    """Per-class prototypes: normalize rows, average per class, renormalize.

    Classes without samples get a zero row and count 0. A class whose
    normalized samples cancel to a zero mean is a hard error.
    """
    z = np.asarray(z)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != z.shape[0]:
        raise DimensionMismatchError("labels do not match latent batch")
    if np.any(labels < 0) or np.any(labels >= class_count):
        raise ValidationError("label outside [0, class_count)")
    zhat, znorms = _normalize_rows_checked(z, "prototype inputs")
    counts = np.bincount(labels, minlength=class_count).astype(np.int64)
    sums = np.zeros((class_count, z.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, zhat.astype(np.float64, copy=False))
    means = np.zeros_like(sums)
    present = counts > 0
    means[present] = sums[present] / counts[present, None]
    mean_norms = np.linalg.norm(means, axis=1)
    if np.any(present & (mean_norms < 1e-12)):
        raise DegeneratePrototypeError(
            "class mean collapsed to zero; prototype undefined")
    proto = np.zeros_like(means)
    proto[present] = means[present] / mean_norms[present, None]
    proto = proto.astype(z.dtype, copy=False)
    cache = {"zhat": zhat, "znorms": znorms, "labels": labels,
             "mean_norms": mean_norms, "proto64": np.where(
                 present[:, None], proto.astype(np.float64), 0.0)}
    return Prototypes(proto, counts, cache)


def class_prototypes_backward(prototypes, d_proto):
    """Gradient of a prototype-valued loss back to the raw latents."""
    cache = prototypes._cache
    zhat, znorms = cache["zhat"], cache["znorms"]
    labels = cache["labels"]
    present = prototypes.present
    proto = cache["proto64"]
    d_proto = np.asarray(d_proto, dtype=np.float64)
    # through the mean renormalization
    d_mean = np.zeros_like(proto)
    dot = np.sum(d_proto[present] * proto[present], axis=1, keepdims=True)
    d_mean[present] = ((d_proto[present] - dot * proto[present])
                       / cache["mean_norms"][present, None])
    # through the per-class average
    d_zhat = d_mean[labels] / prototypes.counts[labels, None]
    # through the row normalization
    zh64 = zhat.astype(np.float64, copy=False)
    dot_rows = np.sum(d_zhat * zh64, axis=1, keepdims=True)
    dz = (d_zhat - dot_rows * zh64) / znorms[:, None]
    return dz.astype(zhat.dtype, copy=False)


@dataclass
class SimilarityMatrix:
    s: np.ndarray       # (C, C) cosine similarities, zero where invalid
    valid: np.ndarray   # (C, C) bool


def class_similarity_matrix(prototypes):
    """Pairwise prototype cosines; validity is the outer product of presence."""
    p = prototypes.matrix
    present = prototypes.present
    s = p @ p.T
    valid = np.outer(present, present)
    s = np.where(valid, s, 0.0).astype(p.dtype, copy=False)
    return SimilarityMatrix(s, valid)


def class_similarity_backward(prototypes, d_s):
    """d(similarity matrix) -> d(prototype matrix); invalid entries ignored."""
    valid = np.outer(prototypes.present, prototypes.present)
    d_s = np.where(valid, np.asarray(d_s, dtype=np.float64), 0.0)
    p = prototypes.matrix.astype(np.float64, copy=False)
    return ((d_s + d_s.T) @ p).astype(prototypes.matrix.dtype, copy=False)


@dataclass
class ReferenceMatrix:
    s_ref: np.ndarray   # (C, C)
    omega: np.ndarray   # (C, C) bool


def reference_matrix(per_subject, mode="union"):
    """Aggregate source-subject similarity matrices into a reference.

    union: entrywise mean over subjects where the entry is valid, omega =
    valid anywhere. intersection: omega = valid everywhere, mean over all.
    """
    if not per_subject:
        raise ValidationError("need at least one source similarity matrix")
    c = per_subject[0].s.shape[0]
    for m in per_subject:
        if m.s.shape != (c, c):
            raise DimensionMismatchError("class count differs across subjects")
    valid_stack = np.stack([m.valid for m in per_subject])
    s_stack = np.stack([np.where(m.valid, m.s, 0.0) for m in per_subject])
    if mode == "union":
        omega = valid_stack.any(axis=0)
    elif mode == "intersection":
        omega = valid_stack.all(axis=0)
    else:
        raise ValidationError(f"unknown aggregation mode {mode!r}")
    counts = valid_stack.sum(axis=0)
    s_ref = np.zeros((c, c), dtype=np.float64)
    np.divide(s_stack.sum(axis=0), counts, out=s_ref, where=counts > 0)
    s_ref = np.where(omega, s_ref, 0.0)
    return ReferenceMatrix(s_ref, omega)


def relational_consistency_loss(sim_new, ref):
    """Mean squared gap to the reference over jointly valid class pairs."""
    if sim_new.s.shape != ref.s_ref.shape:
        raise DimensionMismatchError("similarity and reference sizes differ")
    omega = ref.omega & sim_new.valid
    count = int(omega.sum())
    if count == 0:
        raise EmptyOverlapError("no class pair is valid in both matrices")
    diff = np.where(omega, sim_new.s - ref.s_ref, 0.0)
    value = float(np.sum(diff * diff) / count)
    d_s = (2.0 / count) * diff
    return LossOutput(value, {"S_new": d_s})


def relational_consistency_from_embeddings(z, labels, class_count, ref):
    """Full chain: embeddings -> prototypes -> similarities -> consistency.

    Returns the loss with its gradient already propagated to the raw
    embeddings (key "Z").
    """
    prot = class_prototypes(z, labels, class_count)
    sim = class_similarity_matrix(prot)
    loss = relational_consistency_loss(sim, ref)
    d_proto = class_similarity_backward(prot, loss.grads["S_new"])
    dz = class_prototypes_backward(prot, d_proto)
    return LossOutput(loss.value, {"Z": dz})


# ---------------------------------------------------------------------------
# contrastive retrieval

def _row_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits, targets):
    """Mean over rows of sum_j targets_ij * (logsumexp_i - logits_ij)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(np.mean(np.sum(targets * (lse - shifted), axis=1)))


def bidirectional_contrastive_loss(brain, image, temperature, targets):
    """Symmetrized cross-entropy between scaled cosine logits and targets.

    brain and image are row-aligned unit-norm embedding sets; targets is a
    row-stochastic matrix (identity for plain pairs, mixed or softened
    otherwise). The transposed direction uses transposed targets.
    """
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    brain = np.asarray(brain)
    image = np.asarray(image)
    if brain.shape != image.shape:
        raise DimensionMismatchError("embedding sets differ in shape")
    n = brain.shape[0]
    targets = np.asarray(targets)
    if targets.shape != (n, n):
        raise DimensionMismatchError("targets must be n x n")
    row_sums = targets.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ValidationError("targets are not row-stochastic")

    logits = (brain @ image.T) / temperature
    value = 0.5 * (_cross_entropy(logits, targets)
                   + _cross_entropy(logits.T, targets.T))

    probs_f = _row_softmax(logits)
    probs_b = _row_softmax(logits.T)
    d_fwd = (row_sums[:, None] * probs_f - targets) / n
    col_sums = targets.sum(axis=0)
    d_bwd = ((col_sums[:, None] * probs_b - targets.T) / n).T
    d_logits = 0.5 * (d_fwd + d_bwd)
    d_brain = (d_logits @ image) / temperature
    d_image = (d_logits.T @ brain) / temperature
    return LossOutput(value, {"brain": d_brain.astype(brain.dtype, copy=False),
                              "image": d_image.astype(image.dtype, copy=False)})


@dataclass
class MixResult:
    mixed: np.ndarray     # (n, d) convex-mixed rows
    targets: np.ndarray   # (n, n) row-stochastic targets
    partner: np.ndarray   # (n,) partner index per row
    lam: np.ndarray       # (n,) mixing weight per row


def _mix_targets(partner, lam, n, dtype):
    targets = np.zeros((n, n), dtype=dtype)
    idx = np.arange(n)
    np.add.at(targets, (idx, idx), lam)
    np.add.at(targets, (idx, partner), 1.0 - lam)
    return targets


def mixco_targets(x, rng, beta):
    """Mix each row with a permuted partner; targets carry the two weights.

    lam ~ Beta(beta, beta) per row. Row i of the target matrix puts lam on
    column i and 1-lam on the partner column (summed if they coincide).
    """
    x = np.asarray(x)
    n = x.shape[0]
    if n < 2:
        raise ValidationError("mixing needs at least 2 rows")
    if beta <= 0:
        raise ValidationError("beta must be positive")
    partner = rng.permutation(n)
    lam = rng.beta(beta, beta, size=n).astype(x.dtype)
    mixed = lam[:, None] * x + (1.0 - lam[:, None]) * x[partner]
    return MixResult(mixed, _mix_targets(partner, lam, n, x.dtype),
                     partner, lam)


def mixco_backward(mix, d_mixed):
    """Route gradients on mixed rows back to the unmixed rows."""
    d_mixed = np.asarray(d_mixed)
    dx = mix.lam[:, None] * d_mixed
    np.add.at(dx, mix.partner, (1.0 - mix.lam[:, None]) * d_mixed)
    return dx


def softclip_targets(image, temp_targets):
    """Soft targets from image self-similarity at its own temperature."""
    if temp_targets <= 0:
        raise ValidationError("target temperature must be positive")
    image = np.asarray(image)
    return _row_softmax((image @ image.T) / temp_targets)


# ---------------------------------------------------------------------------
# combination

def combined_objective(parts, lambda_sa, lambda_rc, alpha=1.0):
    """Weighted sum of loss parts; gradients on shared keys accumulate.

    parts maps {"contrastive", "sa", "rc"} to LossOutput or None. A zero
    coefficient (or missing part) contributes nothing, so disabling a term
    reduces bitwise to the remaining sum.
    """
    weights = {"contrastive": alpha, "sa": lambda_sa, "rc": lambda_rc}
    unknown = set(parts) - set(weights)
    if unknown:
        raise ValidationError(f"unknown objective parts {sorted(unknown)}")
    value = 0.0
    grads = {}
    for name in ("contrastive", "sa", "rc"):
        part = parts.get(name)
        w = weights[name]
        if part is None or w == 0.0:
            continue
        value += w * part.value
        for key, g in part.grads.items():
            scaled = w * g if w != 1.0 else g
            if key in grads:
                grads[key] = grads[key] + scaled
            else:
                grads[key] = np.array(scaled, copy=True)
    return LossOutput(value, grads)
