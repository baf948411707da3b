"""Entropy-filtered pseudo-labels."""

from __future__ import annotations

import numpy as np

from .raster import IGNORE, LabelRaster

NORM_TOL = 1e-4


def _as_scores(scores) -> np.ndarray:
    if hasattr(scores, "detach"):
        scores = scores.detach().cpu().numpy()
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim < 1 or s.shape[-1] < 2:
        raise ValueError("scores need a trailing class axis with C >= 2")
    if s.size and (s.min() < -NORM_TOL or np.abs(s.sum(axis=-1) - 1).max() > NORM_TOL):
        raise ValueError("scores are not normalized over the class axis")
    return np.clip(s, 0.0, 1.0)


def entropy_map(scores) -> np.ndarray:
    """Normalized entropy ``-sum(s log s) / log C`` over the last axis.

    Returns values in [0, 1]: 0 for one-hot vectors, 1 for uniform ones.
    """
    s = _as_scores(scores)
    c = s.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(s > 0, s * np.log(s), 0.0)
    u = np.clip(-plogp.sum(axis=-1) / np.log(c), 0.0, 1.0)
    # the uniform vector is the unique maximizer; pin it against rounding
    return np.where(s.max(axis=-1) == s.min(axis=-1), 1.0, u)


def generate_pseudo_labels(scores, epsilon: float, year: int = 0, patch_id: str = "") -> LabelRaster:
    """Argmax labels where normalized entropy is below ``epsilon``, else -1."""
    if not 0.0 < epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in (0, 1], got {epsilon}")
    s = _as_scores(scores)
    if s.ndim != 3:
        raise ValueError("expected an H x W x C score volume")
    u = entropy_map(s)
    # np.argmax returns the first maximum, i.e. the lowest class id on ties
    labels = np.where(u < epsilon, np.argmax(s, axis=-1), IGNORE)
    return LabelRaster(labels, year, patch_id)


def coverage(labels) -> float:
    lab = labels.labels if isinstance(labels, LabelRaster) else np.asarray(labels)
    if lab.size == 0:
        return 0.0
    return float(np.count_nonzero(lab != IGNORE)) / lab.size
