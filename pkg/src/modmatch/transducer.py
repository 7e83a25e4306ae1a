"""Transducer (RNN-T) loss, forced alignment, greedy decoding and a brute-force oracle.

Lattice conventions: ``logits[t, u, k]`` scores symbol ``k`` (0 = blank) at
frame ``t`` after ``u`` tokens have been emitted. Blank advances ``t``; the
label ``tokens[u]`` advances ``u``. A path starts at (0, 0) and ends with the
final blank out of (T-1, U), so it has T blanks and U labels, and there are
C(T+U-1, U) paths.

The dynamic programs are vectorised over the batch and over time: for a fixed
``u`` the recursion ``a[t] = logaddexp(a[t-1] + b[t-1], c[t])`` is a linear
recurrence in log space, solved with a cumulative sum plus a cumulative
``logaddexp`` (or ``maximum`` for Viterbi).
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

BLANK = 0
MAX_ORACLE_PATHS = 10**6


class TransducerError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentPath:
    emit_frame: tuple[int, ...]
    n_frames: int

    @property
    def durations(self) -> tuple[int, ...]:
        """Frames owned by each token: (emit[u-1], emit[u]], the first token owning [0, emit[0]]."""
        out = []
        prev = -1
        for f in self.emit_frame:
            out.append(f - prev)
            prev = f
        return tuple(out)


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def _validate(logits: np.ndarray, tokens: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    logits = np.asarray(logits)
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if logits.ndim != 3:
        raise TransducerError(f"joint logits must be T x (U+1) x (V+1), got shape {logits.shape}")
    t, u1, v1 = logits.shape
    if u1 != len(tokens) + 1:
        raise TransducerError(f"lattice has {u1} label states but {len(tokens)} tokens")
    if t == 0 and len(tokens) > 0:
        raise TransducerError("cannot emit tokens from zero frames")
    if t == 0:
        raise TransducerError("lattice has zero frames")
    if v1 < 2:
        raise TransducerError("vocabulary must contain at least one real token")
    if np.any(tokens == BLANK):
        raise TransducerError("blank id 0 cannot appear inside the target tokens")
    if np.any((tokens < 0) | (tokens >= v1)):
        raise TransducerError(f"token ids must lie in [1, {v1 - 1}]")
    return logits, tokens


def _transition_scores(lp, tokens, u_lens):
    """Blank (B, T, U+1) and label (B, T, U) log-probabilities."""
    b, t, u1, _ = lp.shape
    blank = lp[..., BLANK]
    safe = np.where(np.arange(u1 - 1)[None, :] < u_lens[:, None], tokens, 1) if u1 > 1 else tokens
    label = np.take_along_axis(lp[:, :, :-1, :], safe[:, None, :, None].repeat(t, axis=1), axis=3)[..., 0]
    return blank, label, safe


def _forward(blank, label, semiring="log"):
    """alpha[b, t, u]: score of reaching node (t, u)."""
    bsz, t, u1 = blank.shape
    acc = np.logaddexp.accumulate if semiring == "log" else np.maximum.accumulate
    alpha = np.empty((bsz, t, u1))
    # column 0: only blanks
    alpha[:, 0, 0] = 0.0
    alpha[:, 1:, 0] = np.cumsum(blank[:, :-1, 0], axis=1)
    for u in range(1, u1):
        c = alpha[:, :, u - 1] + label[:, :, u - 1]
        cum = np.zeros((bsz, t))
        cum[:, 1:] = np.cumsum(blank[:, :-1, u], axis=1)
        alpha[:, :, u] = cum + acc(c - cum, axis=1)
    return alpha


def _flip(arr, t_lens, u_lens, u_offset=0):
    """Reverse time and label axes per item so that node (T_b-1, U_b) becomes (0, 0)."""
    bsz, t, u = arr.shape
    ti = t_lens[:, None] - 1 - np.arange(t)[None, :]
    ui = u_lens[:, None] - u_offset - np.arange(u)[None, :]
    ti = np.clip(ti, 0, t - 1)
    ui = np.clip(ui, 0, u - 1)
    return arr[np.arange(bsz)[:, None, None], ti[:, :, None], ui[:, None, :]]


def _backward(blank, label, t_lens, u_lens, semiring="log"):
    """beta[b, t, u]: score from node (t, u) to the end, final blank included."""
    bsz, t, u1 = blank.shape
    acc = np.logaddexp.accumulate if semiring == "log" else np.maximum.accumulate
    fb = _flip(blank, t_lens, u_lens)                       # fb[i, j] = blank[T-1-i, U-j]
    lab_pad = np.concatenate([label, np.zeros((bsz, t, 1))], axis=2)
    fl = _flip(lab_pad, t_lens, u_lens)                     # fl[i, j] = label[T-1-i, U-j]
    beta_f = np.empty((bsz, t, u1))
    beta_f[:, :, 0] = np.cumsum(fb[:, :, 0], axis=1)
    for j in range(1, u1):
        c = fl[:, :, j] + beta_f[:, :, j - 1]
        cum = np.cumsum(fb[:, :, j], axis=1)
        beta_f[:, :, j] = cum + acc(c - cum, axis=1)
    # unflip; entries outside (t < T_b, u <= U_b) are meaningless
    return _flip(beta_f, t_lens, u_lens)


def _prepare(logits, tokens, t_lens, u_lens):
    logits = np.asarray(logits, dtype=np.float64)
    bsz, t, u1, _ = logits.shape
    tokens = np.asarray(tokens, dtype=np.int64).reshape(bsz, u1 - 1)
    t_lens = np.asarray(t_lens, dtype=np.int64)
    u_lens = np.asarray(u_lens, dtype=np.int64)
    lp = log_softmax(logits)
    blank, label, safe = _transition_scores(lp, tokens, u_lens)
    return lp, blank, label, safe, t_lens, u_lens


def batch_loss_and_grad(logits, tokens, t_lens, u_lens, need_grad=True, wrt="logits"):
    """Per-item negative log-likelihoods and their gradients.

    logits: (B, T_max, U_max+1, V+1); tokens: (B, U_max), padded with any id.
    ``wrt="log_probs"`` returns the gradient w.r.t. the normalised
    log-probabilities instead (minus the transition posteriors).
    """
    lp, blank, label, safe, t_lens, u_lens = _prepare(logits, tokens, t_lens, u_lens)
    bsz, t, u1, v1 = lp.shape
    alpha = _forward(blank, label)
    ar = np.arange(bsz)
    log_z = alpha[ar, t_lens - 1, u_lens] + blank[ar, t_lens - 1, u_lens]
    losses = -log_z
    if not need_grad:
        return losses, None
    beta = _backward(blank, label, t_lens, u_lens)
    valid = (np.arange(t)[None, :, None] < t_lens[:, None, None]) & (
        np.arange(u1)[None, None, :] <= u_lens[:, None, None]
    )
    lz = log_z[:, None, None]
    occ = np.where(valid, np.exp(np.where(valid, alpha + beta - lz, -np.inf)), 0.0)
    # blank transitions out of (t, u) land on (t+1, u); the final one ends the path
    beta_next_t = np.full((bsz, t, u1), -np.inf)
    beta_next_t[:, :-1, :] = beta[:, 1:, :]
    is_last_t = np.arange(t)[None, :, None] == (t_lens[:, None, None] - 1)
    at_final_u = np.arange(u1)[None, None, :] == u_lens[:, None, None]
    beta_next_t = np.where(is_last_t, np.where(at_final_u, 0.0, -np.inf), beta_next_t)
    g_blank = np.where(valid, -np.exp(np.where(valid, alpha + blank + beta_next_t - lz, -np.inf)), 0.0)
    label_valid = valid[:, :, :-1] & (np.arange(u1 - 1)[None, None, :] < u_lens[:, None, None])
    g_label = np.where(
        label_valid,
        -np.exp(np.where(label_valid, alpha[:, :, :-1] + label + beta[:, :, 1:] - lz, -np.inf)),
        0.0,
    )
    grad = np.exp(lp) * occ[..., None] if wrt == "logits" else np.zeros_like(lp)
    grad[..., BLANK] += g_blank
    bi, ti, ui = np.meshgrid(ar, np.arange(t), np.arange(u1 - 1), indexing="ij")
    np.add.at(grad, (bi, ti, ui, safe[:, None, :].repeat(t, axis=1)), g_label)
    return losses, grad


def _rnnt_op(logits, tokens=None, t_lens=None, u_lens=None):
    losses, grad = batch_loss_and_grad(logits, tokens, t_lens, u_lens)
    out = losses.astype(logits.dtype)
    return out, lambda g: ((g[:, None, None, None] * grad).astype(logits.dtype),)


ad.register_op("rnnt_loss", _rnnt_op)


def rnnt_loss_batch(logits: ad.Tensor, tokens, t_lens, u_lens) -> ad.Tensor:
    """Differentiable per-item transducer losses, shape (B,)."""
    return ad.forward_op("rnnt_loss", logits, tokens=tokens, t_lens=t_lens, u_lens=u_lens)


def rnnt_loss(joint: np.ndarray, tokens: Sequence[int]) -> float:
    """Negative log-likelihood of ``tokens`` under one T x (U+1) x (V+1) lattice."""
    joint, tokens = _validate(joint, tokens)
    losses, _ = batch_loss_and_grad(joint[None], tokens[None], [joint.shape[0]], [len(tokens)], need_grad=False)
    return float(losses[0])


def rnnt_grad(joint: np.ndarray, tokens: Sequence[int], wrt: str = "logits") -> np.ndarray:
    """Gradient of :func:`rnnt_loss` w.r.t. the logits, or w.r.t. the
    normalised log-probabilities with ``wrt="log_probs"``."""
    if wrt not in ("logits", "log_probs"):
        raise ValueError("wrt must be 'logits' or 'log_probs'")
    joint, tokens = _validate(joint, tokens)
    _, grad = batch_loss_and_grad(joint[None], tokens[None], [joint.shape[0]], [len(tokens)], wrt=wrt)
    return grad[0]


def lattice_log_score(scores: np.ndarray, tokens: Sequence[int]) -> float:
    """Log of the summed path score over a lattice of already-normalised
    log-probabilities, without renormalising. Entries may be -inf (removed
    transitions). Plain O(T*U) recursion."""
    scores, tokens = _validate(scores, tokens)
    t_n, u_n = scores.shape[0], len(tokens)
    alpha = np.full((t_n, u_n + 1), -np.inf)
    alpha[0, 0] = 0.0
    for t in range(t_n):
        for u in range(u_n + 1):
            if t > 0:
                alpha[t, u] = np.logaddexp(alpha[t, u], alpha[t - 1, u] + scores[t - 1, u, BLANK])
            if u > 0:
                alpha[t, u] = np.logaddexp(alpha[t, u], alpha[t, u - 1] + scores[t, u - 1, tokens[u - 1]])
    return float(alpha[-1, -1] + scores[-1, -1, BLANK])


def node_occupancy(joint: np.ndarray, tokens: Sequence[int]) -> np.ndarray:
    """Posterior probability that a path visits each lattice node, (T, U+1)."""
    joint, tokens = _validate(joint, tokens)
    lp, blank, label, _, t_lens, u_lens = _prepare(joint[None], tokens[None], [joint.shape[0]], [len(tokens)])
    alpha = _forward(blank, label)
    beta = _backward(blank, label, t_lens, u_lens)
    log_z = alpha[0, -1, -1] + blank[0, -1, -1]
    return np.exp(alpha[0] + beta[0] - log_z)


def forced_align_batch(logits, tokens, t_lens, u_lens, tie_tol: float = 1e-9) -> list[AlignmentPath]:
    """Viterbi alignments for a padded batch.

    Best suffix scores are computed with the max-plus scan; the path is then
    traced forward from (0, 0), taking the label whenever its best completion
    is at least as good as the blank's (within ``tie_tol`` of rounding), which
    yields the earliest emission among equally probable paths.
    """
    _, blank, label, _, t_lens, u_lens = _prepare(logits, tokens, t_lens, u_lens)
    vbeta = _backward(blank, label, t_lens, u_lens, semiring="max")
    paths = []
    for i in range(len(t_lens)):
        t_n, u_n = int(t_lens[i]), int(u_lens[i])
        bt, lb, vb = blank[i], label[i], vbeta[i]
        emit = []
        t = u = 0
        while u < u_n:
            lab = lb[t, u] + vb[t, u + 1]
            blk = bt[t, u] + vb[t + 1, u] if t < t_n - 1 else -np.inf
            if lab >= blk - tie_tol * max(1.0, abs(blk)):
                emit.append(t)
                u += 1
            else:
                t += 1
        paths.append(AlignmentPath(tuple(emit), t_n))
    return paths


def forced_align(joint: np.ndarray, tokens: Sequence[int]) -> AlignmentPath:
    joint, tokens = _validate(joint, tokens)
    if len(tokens) == 0:
        raise TransducerError("forced alignment needs at least one token")
    return forced_align_batch(joint[None], tokens[None], [joint.shape[0]], [len(tokens)])[0]


def path_log_prob(joint: np.ndarray, tokens: Sequence[int], emit_frame: Sequence[int]) -> float:
    joint, tokens = _validate(joint, tokens)
    lp = log_softmax(np.asarray(joint, dtype=np.float64))
    total = 0.0
    u = 0
    for t in range(joint.shape[0]):
        while u < len(tokens) and emit_frame[u] == t:
            total += lp[t, u, tokens[u]]
            u += 1
        total += lp[t, u, BLANK]
    return total


def enumerate_paths_oracle(joint: np.ndarray, tokens: Sequence[int]) -> tuple[float, AlignmentPath, int]:
    """Exact loss and best path by explicit enumeration of every lattice path.

    Returns (loss, best path, number of paths). Ties go to the lexicographically
    smallest emission-frame vector.
    """
    joint, tokens = _validate(joint, tokens)
    t_n, u_n = joint.shape[0], len(tokens)
    n_paths = math.comb(t_n + u_n - 1, u_n)
    if n_paths > MAX_ORACLE_PATHS:
        raise TransducerError(f"{n_paths} paths exceed the enumeration limit of {MAX_ORACLE_PATHS}")
    lp = log_softmax(np.asarray(joint, dtype=np.float64))
    scores = []
    best, best_emit = -np.inf, None
    # a path is an ordering of T-1 inner blanks and U labels, then the final blank
    for label_slots in itertools.combinations(range(t_n + u_n - 1), u_n):
        slots = set(label_slots)
        t = u = 0
        score = 0.0
        emit = []
        for pos in range(t_n + u_n - 1):
            if pos in slots:
                score += lp[t, u, tokens[u]]
                emit.append(t)
                u += 1
            else:
                score += lp[t, u, BLANK]
                t += 1
        score += lp[t, u, BLANK]
        scores.append(score)
        if score > best or (score == best and tuple(emit) < best_emit):
            best, best_emit = score, tuple(emit)
    total = np.logaddexp.reduce(np.array(scores))
    return float(-total), AlignmentPath(best_emit, t_n), n_paths


def greedy_decode(
    joint_fn: Callable,
    frames: Sequence,
    init_state,
    update_fn: Callable,
    max_symbols: int = 4,
) -> tuple[list[int], list[str]]:
    """Greedy transducer decoding.

    ``joint_fn(frame, state)`` returns logits over V+1 symbols; ``update_fn(state,
    token)`` advances the prediction state after an emission. On blank the
    decoder moves to the next frame; after ``max_symbols`` emissions at one frame
    it is forced forward and a warning is recorded.
    """
    if len(frames) == 0:
        raise TransducerError("greedy decoding needs at least one frame")
    out: list[int] = []
    warnings: list[str] = []
    state = init_state
    for t, frame in enumerate(frames):
        emitted = 0
        while True:
            k = int(np.argmax(joint_fn(frame, state)))
            if k == BLANK:
                break
            if emitted == max_symbols:
                warnings.append(f"frame {t}: symbol cap {max_symbols} reached, forcing advance")
                log.debug(warnings[-1])
                break
            out.append(k)
            state = update_fn(state, k)
            emitted += 1
    return out, warnings
