"""Category-level latent statistics and distribution-scaling augmentation.

Source subjects provide per-class means and per-dimension standard
deviations in the shared latent space. A new subject's latents are pulled
toward the cross-subject class mean and rescaled by the averaged deviation:

    perturbed = mu_c + sigma_bar_c * (z - mu_c)

computed as z + (sigma_bar_c - 1) * (z - mu_c) so that sigma_bar = 1 is a
bitwise no-op and z = mu_c is an exact fixed point. Applied on the training
path only; a stochastic variant jitters the scaling behind a flag.
"""

from dataclasses import dataclass, field

import numpy as np

from duala.errors import (
    DimensionMismatchError,
    NonFiniteError,
    ValidationError,
)


@dataclass
class CategoryStats:
    mu: np.ndarray                 # (C, h) cross-subject class means
    sigma_per_subject: np.ndarray  # (K, C, h) per-subject class stds
    sigma_bar: np.ndarray          # (C, h) mean std over subjects with support
    present: np.ndarray            # (C, K) bool support per class and subject
    subject_ids: np.ndarray = field(default=None)

    @property
    def class_count(self):
        return self.mu.shape[0]

    @property
    def latent_dim(self):
        return self.mu.shape[1]

    @property
    def class_available(self):
        """Classes with at least one source sample anywhere."""
        return self.present.any(axis=1)

    def missing_mask(self, labels):
        """Rows whose class has no source support (they pass through)."""
        return ~self.class_available[np.asarray(labels, dtype=np.int64)]


def fit_category_stats(per_subject, class_count, dtype=np.float32):
    """Fit CategoryStats from [(subject_id, latents, labels), ...].

    Per subject and class: per-dimension mean and unbiased standard
    deviation (zero when only one sample). The cross-subject mean and the
    averaged deviation are taken over subjects that have the class; a class
    no subject has is marked absent and later passes through unperturbed.
    """
    if not per_subject:
        raise ValidationError("need at least one source subject")
    h = np.asarray(per_subject[0][1]).shape[1]
    k = len(per_subject)
    zbar = np.zeros((k, class_count, h))
    sigma = np.zeros((k, class_count, h))
    present = np.zeros((class_count, k), dtype=bool)
    subject_ids = np.empty(k, dtype=np.int64)
    for s, (sid, z, labels) in enumerate(per_subject):
        z = np.asarray(z, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if z.shape[1] != h:
            raise DimensionMismatchError("latent width differs across subjects")
        if z.shape[0] != labels.shape[0]:
            raise DimensionMismatchError("labels do not match latents")
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(f"non-finite latents for subject {sid}")
        if np.any(labels < 0) or np.any(labels >= class_count):
            raise ValidationError("label outside [0, class_count)")
        subject_ids[s] = sid
        for c in np.unique(labels):
            rows = z[labels == c]
            present[c, s] = True
            zbar[s, c] = rows.mean(axis=0)
            if rows.shape[0] >= 2:
                sigma[s, c] = rows.std(axis=0, ddof=1)
    support = present.sum(axis=1)
    mu = np.zeros((class_count, h))
    sigma_bar = np.zeros((class_count, h))
    has = support > 0
    mu[has] = (zbar.sum(axis=0)[has] / support[has, None])
    sigma_bar[has] = (sigma.sum(axis=0)[has] / support[has, None])
    return CategoryStats(mu.astype(dtype), sigma.astype(dtype),
                         sigma_bar.astype(dtype), present, subject_ids)


def _check_rows(z, labels, stats):
    z = np.asarray(z)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[1] != stats.latent_dim:
        raise DimensionMismatchError(
            f"latents {z.shape} do not match stats width {stats.latent_dim}")
    if labels.shape[0] != z.shape[0]:
        raise DimensionMismatchError("labels do not match latent batch")
    if np.any(labels < 0) or np.any(labels >= stats.class_count):
        raise ValidationError("label outside fitted class range")
    return z, labels


def perturb(z, labels, stats):
    """Deterministic scaling toward the class mean; absent classes pass through."""
    z, labels = _check_rows(z, labels, stats)
    avail = stats.class_available[labels]
    mu = stats.mu[labels]
    scale = stats.sigma_bar[labels] - 1.0
    out = z + scale * (z - mu)
    return np.where(avail[:, None], out, z).astype(z.dtype, copy=False)


def perturb_backward(labels, stats, d_out):
    """Gradient through perturb: scaled rows pass sigma_bar, others identity."""
    d_out = np.asarray(d_out)
    labels = np.asarray(labels, dtype=np.int64)
    avail = stats.class_available[labels]
    scaled = stats.sigma_bar[labels] * d_out
    return np.where(avail[:, None], scaled, d_out).astype(
        d_out.dtype, copy=False)


def perturb_stochastic(z, labels, stats, tau_noise, rng):
    """Scaling jittered per entry: (1 + eps) * sigma_bar, eps ~ N(0, tau^2).

    tau_noise = 0 reproduces the deterministic op bitwise (the generator is
    still consumed for the noise draw).
    """
    if tau_noise < 0:
        raise ValidationError("tau_noise must be >= 0")
    z, labels = _check_rows(z, labels, stats)
    eps = (tau_noise * rng.standard_normal(z.shape)).astype(z.dtype)
    avail = stats.class_available[labels]
    scale = (1.0 + eps) * stats.sigma_bar[labels] - 1.0
    out = z + scale * (z - stats.mu[labels])
    return np.where(avail[:, None], out, z).astype(z.dtype, copy=False)


def stats_to_tensors(stats):
    """Flatten CategoryStats into checkpoint-style named f32 tensors."""
    tensors = {
        "stats/mu": stats.mu.astype(np.float32),
        "stats/sigma_bar": stats.sigma_bar.astype(np.float32),
        "stats/present": stats.present.astype(np.float32),
    }
    for s, sid in enumerate(stats.subject_ids):
        tensors[f"stats/sigma/{int(sid)}"] = (
            stats.sigma_per_subject[s].astype(np.float32))
    return tensors


def stats_from_tensors(tensors):
    """Rebuild CategoryStats from checkpoint tensors; None if absent."""
    if "stats/mu" not in tensors:
        return None
    prefix = "stats/sigma/"
    subject_ids = sorted(int(name[len(prefix):]) for name in tensors
                         if name.startswith(prefix))
    sigma = np.stack([tensors[f"{prefix}{sid}"] for sid in subject_ids]) \
        if subject_ids else np.zeros((0,) + tensors["stats/mu"].shape,
                                     dtype=np.float32)
    return CategoryStats(
        mu=tensors["stats/mu"],
        sigma_per_subject=sigma,
        sigma_bar=tensors["stats/sigma_bar"],
        present=tensors["stats/present"] > 0.5,
        subject_ids=np.array(subject_ids, dtype=np.int64),
    )
