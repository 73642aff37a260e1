"""Evaluation: paired retrieval accuracy, class-structure metrics, reports.

Retrieval follows the pooled top-1 protocol: candidates are drawn into
fixed-size pools, each query must rank its own pair first by cosine.
Structure metrics quantify class separability of an embedding set (mean
within/between-class cosine and a cosine-distance silhouette), replacing
qualitative scatter plots with numbers a test can compare.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

from duala.errors import DegenerateEmbeddingError, ValidationError


@dataclass
class RetrievalReport:
    image_acc: float    # brain query -> paired image ranked first
    brain_acc: float    # image query -> paired brain ranked first
    pool_size: int
    n_pools: int
    seed: int


@dataclass
class StructureReport:
    intra_mean: float
    inter_mean: float
    ratio: float        # (intra - inter)/2 + 0.5, bounded in [0, 1]
    silhouette: float


def _unit_rows(x, what):
    x = np.asarray(x)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise DegenerateEmbeddingError(f"zero-norm row in {what}")
    return x / norms[:, None]


def retrieval_accuracy(brain, image, pool_size, n_pools, rng=0):
    """Top-1 retrieval both ways over randomly drawn candidate pools.

    Pools are carved from fresh permutations of the row index, so pools
    within one pass over the data are disjoint. rng may be an integer seed
    (recorded in the report) or a Generator (seed recorded as -1). Ties
    rank the lowest index first.
    """
    brain = np.asarray(brain)
    image = np.asarray(image)
    if brain.shape != image.shape:
        raise ValidationError("embedding sets must be row-aligned")
    n = brain.shape[0]
    if n < 2:
        raise ValidationError("need at least 2 rows")
    if pool_size < 2:
        raise ValidationError("pool_size must be at least 2")
    if pool_size > n:
        raise ValidationError("pool_size exceeds available rows")
    if n_pools < 1:
        raise ValidationError("need at least one pool")
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
        gen = np.random.default_rng([seed, 202])
    else:
        seed = -1
        gen = rng
    bhat = _unit_rows(brain, "brain embeddings")
    ihat = _unit_rows(image, "image embeddings")

    image_hits = 0
    brain_hits = 0
    perm = None
    pos = n
    for _ in range(n_pools):
        if pos + pool_size > n:
            perm = gen.permutation(n)
            pos = 0
        idx = perm[pos:pos + pool_size]
        pos += pool_size
        sims = bhat[idx] @ ihat[idx].T
        image_hits += int(np.sum(np.argmax(sims, axis=1)
                                 == np.arange(pool_size)))
        brain_hits += int(np.sum(np.argmax(sims, axis=0)
                                 == np.arange(pool_size)))
    total = n_pools * pool_size
    return RetrievalReport(image_acc=image_hits / total,
                           brain_acc=brain_hits / total,
                           pool_size=pool_size, n_pools=n_pools, seed=seed)


def class_structure_metrics(z, labels):
    """Within/between-class cosine means and cosine-distance silhouette.

    Exact all-pairs computation. Requires at least two classes with at
    least two samples each. A point whose distances are all zero scores a
    silhouette of 0 (identical-embedding convention).
    """
    labels = np.asarray(labels, dtype=np.int64)
    z = np.asarray(z)
    if z.shape[0] != labels.shape[0]:
        raise ValidationError("labels do not match embeddings")
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2 or np.any(counts < 2):
        raise ValidationError(
            "need >= 2 classes with >= 2 samples each")
    zhat = _unit_rows(z, "structure embeddings")
    gram = zhat @ zhat.T
    n = z.shape[0]
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    intra = float(gram[same & upper].mean())
    inter = float(gram[~same & upper].mean())

    dist = 1.0 - gram
    sil_sum = 0.0
    for i in range(n):
        own = same[i].copy()
        own[i] = False
        a = float(dist[i, own].mean())
        b = min(float(dist[i, labels == c].mean())
                for c in classes if c != labels[i])
        denom = max(a, b)
        sil_sum += (b - a) / denom if denom > 0 else 0.0
    return StructureReport(intra_mean=intra, inter_mean=inter,
                           ratio=(intra - inter) / 2.0 + 0.5,
                           silhouette=sil_sum / n)


def pca_components(z, k=2):
    """(coords, components, explained_variance) for the top-k directions.

    Deterministic sign: each direction's largest-magnitude entry is made
    positive. Directions beyond the data rank come back as zero columns.
    """
    z = np.asarray(z, dtype=np.float64)
    n, h = z.shape
    if n <= k:
        raise ValidationError("need more rows than components")
    centered = z - z.mean(axis=0)
    cov = (centered.T @ centered) / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:k]
    comps = np.zeros((h, k))
    explained = np.zeros(k)
    cutoff = max(eigvals.max(initial=0.0), 0.0) * 1e-12
    for j, col in enumerate(order):
        if eigvals[col] <= cutoff:
            continue
        v = eigvecs[:, col]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps[:, j] = v
        explained[j] = eigvals[col]
    return centered @ comps, comps, explained


def pca_project(z, k=2):
    coords, _, _ = pca_components(z, k)
    return coords


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(f"{float(value):.6g}")
    return value


def emit_report(records, path, fmt="csv", fieldnames=None):
    """Write records (list of dicts) as CSV or JSON lines.

    Field order follows fieldnames, or the first record's insertion order.
    Floats are printed with 6 significant digits.
    """
    if fmt not in ("csv", "jsonl"):
        raise ValidationError(f"unknown report format {fmt!r}")
    if fieldnames is None:
        fieldnames = list(records[0]) if records else []
    for rec in records:
        if list(rec) != list(fieldnames):
            raise ValidationError("report records have inconsistent fields")
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(fieldnames)
            for rec in records:
                writer.writerow(
                    [f"{v:.6g}" if isinstance(v, (float, np.floating))
                     else v for v in rec.values()])
    else:
        with open(path, "w") as fh:
            for rec in records:
                fh.write(json.dumps({k: _fmt(v) for k, v in rec.items()}))
                fh.write("\n")
    return path
