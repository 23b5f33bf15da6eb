"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
import torch

from ._exceptions import ContractError, NotFittedError


def check_images(X, size=None, divisible_by=None) -> np.ndarray:
    """Return ``X`` as a float32 ``(N, 3, H, W)`` array in [-1, 1]."""
    X = np.asarray(X.detach().cpu().numpy() if isinstance(X, torch.Tensor) else X, dtype=np.float32)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ContractError(f"images must be (N, 3, H, W), got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ContractError("images contain non-finite values")
    if size is not None and X.shape[2:] != (size, size):
        raise ContractError(f"images must be {size}x{size}, got {X.shape[2]}x{X.shape[3]}")
    if divisible_by and (X.shape[2] % divisible_by or X.shape[3] % divisible_by):
        raise ContractError(f"image sides must be divisible by {divisible_by}, got {X.shape[2:]}")
    return X


def check_attributes(a, n_attributes=None) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 1:
        a = a[None]
    if a.ndim != 2:
        raise ContractError(f"attributes must be (N, A), got shape {a.shape}")
    if n_attributes is not None and a.shape[1] != n_attributes:
        raise ContractError(f"expected {n_attributes} attributes, got {a.shape[1]}")
    if not np.isin(a, (0, 1)).all():
        raise ContractError("attributes must contain only 0/1 entries")
    return a.astype(np.float32)


def check_masks(m, n_parts=None, size=None, strict=True) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim == 3:
        m = m[None]
    if m.ndim != 4:
        raise ContractError(f"masks must be (N, M, H, W), got shape {m.shape}")
    if n_parts is not None and m.shape[1] != n_parts:
        raise ContractError(f"expected {n_parts} mask channels, got {m.shape[1]}")
    if size is not None and m.shape[2:] != (size, size):
        raise ContractError(f"masks must be {size}x{size}, got {m.shape[2]}x{m.shape[3]}")
    if not np.isin(m, (0, 1)).all():
        raise ContractError("mask entries must be 0 or 1")
    if strict and (m.sum(axis=1) > 1).any():
        raise ContractError("mask has pixels assigned to more than one part")
    return m.astype(np.float32)


def check_is_fitted(estimator, attribute: str = "module_"):
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(f"{type(estimator).__name__} is not fitted; call fit first")


def batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))
