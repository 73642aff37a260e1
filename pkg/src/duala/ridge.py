"""Per-subject linear projections into the shared latent space.

The closed-form ridge solve is the oracle and optional initializer; during
training the same weight matrix is treated as a plain linear layer whose
L2 penalty is realized as decoupled weight decay in the optimizer (the
adapter_backward form with an explicit penalty term is kept for direct
gradient use and for tests).
"""

from dataclasses import dataclass

import numpy as np

from duala.errors import (
    DimensionMismatchError,
    NonFiniteError,
    SingularSystemError,
    ValidationError,
)


@dataclass
class RidgeAdapter:
    """Linear voxel-to-latent map; weight is (voxel_dim, latent_dim)."""

    weight: np.ndarray
    subject_id: int = -1
    ridge_lambda: float = 0.0


def ridge_fit_closed(X, Y, ridge_lambda, subject_id=-1):
    """Solve weight = (X'X + lambda I)^-1 X'Y. Inputs must be pre-centered."""
    X = np.asarray(X)
    Y = np.asarray(Y)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise DimensionMismatchError(
            f"incompatible design/target shapes {X.shape} vs {Y.shape}")
    if ridge_lambda < 0:
        raise ValidationError("ridge_lambda must be >= 0")
    d = X.shape[1]
    gram = X.T @ X + ridge_lambda * np.eye(d, dtype=X.dtype)
    if ridge_lambda == 0 and np.linalg.matrix_rank(gram) < d:
        raise SingularSystemError(
            "X'X is singular and ridge_lambda is 0; no unique solution")
    try:
        weight = np.linalg.solve(gram, X.T @ Y)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from None
    if not np.all(np.isfinite(weight)):
        raise NonFiniteError("ridge solution contains non-finite entries")
    return RidgeAdapter(weight, subject_id, float(ridge_lambda))


def random_adapter(voxel_dim, latent_dim, rng, subject_id=-1, ridge_lambda=0.0,
                   dtype=np.float32):
    """Scaled random init (gain 1/sqrt(voxel_dim)) for gradient training."""
    weight = rng.standard_normal((voxel_dim, latent_dim)) / np.sqrt(voxel_dim)
    return RidgeAdapter(weight.astype(dtype), subject_id, float(ridge_lambda))


def adapter_apply(adapter: RidgeAdapter, X):
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != adapter.weight.shape[0]:
        raise DimensionMismatchError(
            f"X has {X.shape[1] if X.ndim == 2 else '?'} columns; adapter "
            f"expects {adapter.weight.shape[0]}")
    return X @ adapter.weight


def adapter_backward(adapter: RidgeAdapter, X, dZ):
    """dWeight = X' dZ + lambda * weight (gradient of the penalized objective)."""
    X = np.asarray(X)
    dZ = np.asarray(dZ)
    if X.shape[0] != dZ.shape[0] or X.shape[1] != adapter.weight.shape[0] \
            or dZ.shape[1] != adapter.weight.shape[1]:
        raise DimensionMismatchError(
            f"shapes {X.shape}, {dZ.shape} do not match adapter "
            f"{adapter.weight.shape}")
    grad = X.T @ dZ
    if adapter.ridge_lambda != 0.0:
        grad = grad + adapter.ridge_lambda * adapter.weight
    return grad
