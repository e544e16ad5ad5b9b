"""Input validation helpers for the estimator API.

Multi-modal inputs are passed as a mapping ``{modality name: array}``; these
helpers turn such mappings into aligned, dtype-checked numpy arrays and give
errors that name the offending modality.
"""
from __future__ import annotations

from collections.abc import Mapping
from typing import Dict, Optional, Sequence

import numpy as np
from sklearn.utils.validation import check_array

__all__ = [
    "check_image_stack",
    "check_token_matrix",
    "check_modality_inputs",
    "check_present",
    "check_class_labels",
    "check_label_masks",
]


def check_image_stack(arr, name: str, image_size: Optional[int] = None) -> np.ndarray:
    """Validate ``[N, H, W]`` float images with values in ``[0, 1]``."""
    arr = check_array(arr, allow_nd=True, dtype=np.float32, ensure_all_finite=True, input_name=name)
    if arr.ndim == 4 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 3:
        raise ValueError(f"{name}: expected images of shape [N, H, W], got {arr.shape}")
    if image_size is not None and arr.shape[1:] != (image_size, image_size):
        raise ValueError(f"{name}: expected {image_size}x{image_size} images, got {arr.shape[1]}x{arr.shape[2]}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name}: pixel values must lie in [0, 1]")
    return np.ascontiguousarray(arr)


def check_token_matrix(arr, name: str, vocab_size: int, max_len: Optional[int] = None) -> np.ndarray:
    """Validate ``[N, L]`` integer token ids (0 is padding)."""
    raw = np.asarray(arr)
    if raw.dtype.kind not in "iu":
        raise ValueError(f"{name}: token ids must be integers, got dtype {raw.dtype}")
    tokens = check_array(raw, dtype=np.int64, input_name=name)
    if max_len is not None and tokens.shape[1] > max_len:
        raise ValueError(f"{name}: sequences longer than {max_len} tokens")
    if tokens.min() < 0 or tokens.max() >= vocab_size:
        raise ValueError(f"{name}: token id out of vocabulary [0, {vocab_size})")
    return tokens


def check_modality_inputs(X, modalities: Sequence[str], validators: Dict[str, callable]) -> Dict[str, np.ndarray]:
    """Validate a ``{modality: array}`` mapping against the expected names.

    Every expected modality must be given (fill absent ones with any
    placeholder of the right shape and flag them with ``present``). All
    arrays must share their first dimension.
    """
    if not isinstance(X, Mapping):
        raise TypeError(f"X must be a mapping of modality name to array, got {type(X).__name__}")
    missing = [m for m in modalities if m not in X]
    extra = sorted(set(X) - set(modalities))
    if missing or extra:
        raise ValueError(f"X modalities mismatch: missing {missing}, unexpected {extra}")
    out = {m: validators[m](X[m], m) for m in modalities}
    lengths = {m: a.shape[0] for m, a in out.items()}
    if len(set(lengths.values())) != 1:
        raise ValueError(f"modalities have different numbers of samples: {lengths}")
    if next(iter(lengths.values())) == 0:
        raise ValueError("X contains no samples")
    return out


def check_present(present, modalities: Sequence[str], n_samples: int) -> np.ndarray:
    """Normalise ``present`` to a ``[N, M]`` boolean mask.

    Accepts ``None`` (all present), a collection of modality names applied to
    every sample, or an explicit boolean array.
    """
    if present is None:
        return np.ones((n_samples, len(modalities)), dtype=bool)
    if isinstance(present, str):
        present = [present]
    arr = np.asarray(present)
    if arr.dtype.kind in "US" or (arr.dtype == object and arr.ndim == 1):
        names = [str(p) for p in arr.ravel()]
        unknown = sorted(set(names) - set(modalities))
        if unknown:
            raise ValueError(f"unknown modalities: {unknown}")
        if not names:
            raise ValueError("modality subset must be non-empty")
        row = np.array([m in names for m in modalities])
        return np.repeat(row[None, :], n_samples, axis=0)
    if arr.dtype != bool or arr.shape != (n_samples, len(modalities)):
        raise ValueError(f"present must be a boolean array of shape ({n_samples}, {len(modalities)})")
    if not arr.any(axis=1).all():
        raise ValueError("every sample needs at least one modality present")
    return arr


def check_class_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"y must be a 1-D array with {n_samples} labels, got shape {y.shape}")
    return y


def check_label_masks(y, n_samples: int, image_size: int, num_labels: int) -> np.ndarray:
    """Validate ``[N, H, W]`` integer label masks with values in ``[0, num_labels)``."""
    y = np.asarray(y)
    if y.dtype.kind not in "iub":
        raise ValueError(f"masks must hold integer labels, got dtype {y.dtype}")
    if y.shape != (n_samples, image_size, image_size):
        raise ValueError(f"masks must have shape ({n_samples}, {image_size}, {image_size}), got {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= num_labels):
        raise ValueError(f"mask labels must lie in [0, {num_labels})")
    return y.astype(np.int64)
