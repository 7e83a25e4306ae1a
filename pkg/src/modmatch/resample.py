"""Length regulation of text embeddings to frame rate."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import sinusoid
from .transducer import AlignmentPath


class DurationError(ValueError):
    pass


class InfeasibleAlignment(DurationError):
    pass


def _check_durations(durations) -> np.ndarray:
    d = np.asarray(durations)
    if d.ndim != 1:
        raise DurationError(f"durations must be a vector, got shape {d.shape}")
    if d.dtype.kind not in "iu":
        if not np.all(d == np.round(d)):
            raise DurationError("durations must be integers")
        d = d.astype(np.int64)
    if np.any(d < 1):
        raise DurationError(f"every duration must be >= 1, got {d.tolist()}")
    return d.astype(np.int64)


def expansion_indices(durations: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Source row and within-token offset for every output frame."""
    d = _check_durations(durations)
    rows = np.repeat(np.arange(len(d)), d)
    starts = np.repeat(np.cumsum(d) - d, d)
    return rows, np.arange(int(d.sum())) - starts


def resample(e_t, durations: Sequence[int]) -> Tensor:
    """Repeat row u of ``e_t`` (U x d) ``durations[u]`` times, adding a
    sinusoidal embedding of the offset inside the token."""
    e_t = ad.as_tensor(e_t)
    d = _check_durations(durations)
    if len(d) != e_t.shape[0]:
        raise DurationError(f"{len(d)} durations for {e_t.shape[0]} embeddings")
    rows, offsets = expansion_indices(d)
    return ad.gather(e_t, rows) + sinusoid(offsets, e_t.shape[1]).astype(e_t.dtype)


def resample_batch(e_t: Tensor, durations: Sequence[Sequence[int]]) -> tuple[Tensor, np.ndarray]:
    """Batched :func:`resample` on a padded (B, U_max, d) input.

    Returns the padded (B, L_max, d) output and the per-item lengths.
    """
    bsz, u_max, dim = e_t.shape
    lengths = np.array([int(np.sum(_check_durations(d))) for d in durations], dtype=np.int64)
    l_max = int(lengths.max())
    flat_idx = np.zeros((bsz, l_max), dtype=np.int64)
    offsets = np.zeros((bsz, l_max), dtype=np.int64)
    for i, d in enumerate(durations):
        if len(d) > u_max:
            raise DurationError(f"item {i}: {len(d)} durations for {u_max} embedding rows")
        rows, off = expansion_indices(d)
        flat_idx[i, : len(rows)] = i * u_max + rows
        offsets[i, : len(rows)] = off
    mask = np.arange(l_max)[None, :] < lengths[:, None]
    flat = e_t.reshape(bsz * u_max, dim)
    pos = sinusoid(offsets, dim) * mask[:, :, None]
    out = ad.gather(flat, flat_idx) + pos.astype(e_t.dtype)
    return out * mask[:, :, None].astype(e_t.dtype), lengths


def round_durations(raw: Sequence[float]) -> np.ndarray:
    """Round half up, then clamp to at least one frame."""
    r = np.asarray(raw, dtype=np.float64)
    if np.any(~np.isfinite(r)) or np.any(r <= 0):
        raise DurationError("raw durations must be finite and positive")
    return np.maximum(np.floor(r + 0.5), 1).astype(np.int64)


CONVENTIONS = ("onset", "offset")


def durations_from_alignment(path: AlignmentPath, n_frames: int | None = None, convention: str = "onset") -> np.ndarray:
    """Per-token durations from an alignment path.

    ``offset``: token u owns frames (emit[u-1], emit[u]] and the first token owns
    [0, emit[0]]; frames after the last emission belong to nobody.
    ``onset``: token u owns [emit[u], emit[u+1]), the first token also takes any
    frames before its emission and the last token runs to the end of the utterance.

    A trained transducer with full-context encoders tends to fire on the first
    frame of each token, which only the onset rule turns back into span lengths.
    Same-frame emissions are clamped to one frame; if that pushes the total past
    the utterance length, trailing tokens give frames back (never below one).
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown duration convention {convention!r}")
    t_n = path.n_frames if n_frames is None else n_frames
    u_n = len(path.emit_frame)
    if u_n > t_n:
        raise InfeasibleAlignment(f"{u_n} tokens cannot each own a frame of a {t_n}-frame utterance")
    if convention == "offset":
        raw = np.asarray(path.durations, dtype=np.int64)
    else:
        bounds = np.array([0, *path.emit_frame[1:], t_n], dtype=np.int64)
        raw = np.diff(bounds)
    d = np.maximum(raw, 1)
    excess = int(d.sum()) - t_n
    for u in range(u_n - 1, -1, -1):
        if excess <= 0:
            break
        give = min(excess, int(d[u]) - 1)
        d[u] -= give
        excess -= give
    return d
