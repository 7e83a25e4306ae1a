"""Training losses and the SpecAugment-style masker.

* modality matching: MSE between speech-encoder outputs and refined, resampled
  text embeddings over the aligned span, plus the transducer loss on speech;
* aligned MLM: transducer loss on masked, resampled text embeddings passed
  through the shared encoder;
* speech-only: InfoNCE on masked speech-encoder outputs against the pre-mask
  latents, and cross-entropy on frozen random-projection codebook ids predicted
  from the shared encoder;
* duration: squared error of log-durations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import make_rng
from .encoders import Model, length_mask
from .resample import (
    InfeasibleAlignment,
    CONVENTIONS,
    durations_from_alignment,
    resample_batch,
    round_durations,
)
from .transducer import forced_align_batch, rnnt_loss_batch

LOSS_NAMES = ("mm_mse", "rnnt_paired", "a_mlm", "contrastive", "speech_mlm", "duration")


@dataclass
class MaskSpec:
    n_time_masks: int = 2
    max_time_width: int = 4
    n_feature_masks: int = 2
    max_feature_width: int = 4
    mask_value: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for k in ("n_time_masks", "max_time_width", "n_feature_masks", "max_feature_width"):
            if getattr(self, k) < 0:
                raise ValueError(f"mask.{k} must be non-negative")


@dataclass
class ObjectiveConfig:
    weights: dict = field(default_factory=lambda: {k: 1.0 for k in LOSS_NAMES})
    text_mask: MaskSpec = field(default_factory=MaskSpec)
    speech_mask: MaskSpec = field(
        default_factory=lambda: MaskSpec(n_time_masks=3, max_time_width=6, n_feature_masks=0, max_feature_width=0)
    )
    temperature: float = 0.1
    n_negatives: int = 7
    codebook_dim: int = 16
    quantizer_seed: int = 1234
    duration_convention: str = "onset"  # how alignment paths become per-token durations

    def __post_init__(self):
        unknown = set(self.weights) - set(LOSS_NAMES)
        if unknown:
            raise ValueError(f"unknown loss weights {sorted(unknown)}")
        self.weights = {k: float(self.weights.get(k, 1.0)) for k in LOSS_NAMES}
        if self.temperature <= 0 or self.n_negatives < 1:
            raise ValueError("temperature must be positive and n_negatives >= 1")
        if self.duration_convention not in CONVENTIONS:
            raise ValueError(f"duration_convention must be one of {CONVENTIONS}")


# ---------------------------------------------------------------------------
# masking


def _spans(n: int, count: int, max_width: int, rng) -> np.ndarray:
    """Boolean span mask over ``n`` positions; total width never exceeds n // 2."""
    m = np.zeros(n, dtype=bool)
    budget = n // 2
    for _ in range(count):
        w = int(rng.integers(0, min(max_width, budget) + 1))
        budget -= w
        if w:
            start = int(rng.integers(0, n - w + 1))
            m[start:start + w] = True
    return m


def sample_mask(n_frames: int, n_features: int, spec: MaskSpec, rng) -> np.ndarray:
    """(T, F) map of masked cells: union of time spans and feature spans."""
    time = _spans(n_frames, spec.n_time_masks, spec.max_time_width, rng)
    feat = _spans(n_features, spec.n_feature_masks, spec.max_feature_width, rng)
    return time[:, None] | feat[None, :]


def mask(x, spec: MaskSpec, rng=None):
    """Mask one (T, F) matrix. Returns (masked, boolean map)."""
    rng = make_rng(spec.seed) if rng is None else rng
    x = ad.as_tensor(x)
    m = sample_mask(x.shape[0], x.shape[1], spec, rng)
    return _apply(x, m), m


def _apply(x: Tensor, m: np.ndarray, value: float = 0.0) -> Tensor:
    keep = (~m).astype(x.dtype)
    out = x * keep
    if value != 0.0:
        out = out + (m * value).astype(x.dtype)
    return out


def mask_batch(x: Tensor, lengths, spec: MaskSpec, rng) -> tuple[Tensor, np.ndarray]:
    """Mask each item of a padded (B, L, F) batch within its own length."""
    bsz, l_max, f = x.shape
    m = np.zeros((bsz, l_max, f), dtype=bool)
    for i, n in enumerate(lengths):
        m[i, :n] = sample_mask(int(n), f, spec, rng)
    return _apply(x, m, spec.mask_value), m


# ---------------------------------------------------------------------------
# elementary losses


def mm_mse(e_s: Tensor, e_hat: Tensor, lengths, offsets=None, n_frames=None) -> Tensor:
    """Mean over items of the mean squared difference on each item's aligned span.

    Item b compares ``e_hat[b, :L_b]`` with ``e_s[b, o_b:o_b+L_b]`` (o_b = 0 by default).
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    bsz, t_max, dim = e_s.shape
    offsets = np.zeros_like(lengths) if offsets is None else np.asarray(offsets, dtype=np.int64)
    if n_frames is not None and np.any(offsets + lengths > np.asarray(n_frames)):
        raise ValueError("aligned span longer than the speech utterance")
    l_max = e_hat.shape[1]
    if np.any(offsets + lengths > t_max):
        raise ValueError("aligned span longer than the speech utterance")
    idx = np.arange(bsz)[:, None] * t_max + np.minimum(offsets[:, None] + np.arange(l_max)[None, :], t_max - 1)
    aligned = ad.gather(e_s.reshape(bsz * t_max, dim), idx)
    valid = length_mask(lengths, l_max)
    diff = (aligned - e_hat) * valid[:, :, None].astype(e_s.dtype)
    per_item = ad.square(diff).sum(axis=(1, 2)) * (1.0 / (lengths * dim)).astype(e_s.dtype)
    return per_item.mean()


def duration_loss(pred_log: Tensor, targets: Sequence[Sequence[int]], lengths) -> Tensor:
    """Mean over valid tokens of (predicted log-duration - ln target)^2."""
    bsz, u_max = pred_log.shape
    tgt = np.ones((bsz, u_max))
    for i, d in enumerate(targets):
        tgt[i, : len(d)] = d
    valid = length_mask(lengths, u_max)
    diff = (pred_log - np.log(tgt).astype(pred_log.dtype)) * valid.astype(pred_log.dtype)
    return ad.square(diff).sum() * (1.0 / valid.sum())


def info_nce(anchors: Tensor, candidates: Tensor, temperature: float) -> Tensor:
    """Mean cross-entropy of picking candidate 0 by cosine similarity.

    anchors (N, d); candidates (N, K+1, d) with the positive first.
    """
    def unit(x):
        return x / ad.sqrt(ad.square(x).sum(axis=-1, keepdims=True) + 1e-8)

    a = unit(anchors)
    c = unit(candidates)
    n, _, d = candidates.shape
    sims = (a.reshape(n, 1, d) * c).sum(axis=-1) * (1.0 / temperature)
    return -(ad.log_softmax(sims, axis=-1)[:, 0]).mean()


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    lp = ad.log_softmax(logits, axis=-1)
    return -(lp[np.arange(len(targets)), targets]).mean()


class RandomProjectionQuantizer:
    """Frozen random projection + codebook; targets are nearest-code ids by cosine."""

    def __init__(self, feature_dim: int, codebook_size: int, dim: int, seed: int):
        rng = make_rng(seed, 7)
        self.projection = rng.standard_normal((feature_dim, dim)) / np.sqrt(feature_dim)
        cb = rng.standard_normal((codebook_size, dim))
        self.codebook = cb / np.linalg.norm(cb, axis=1, keepdims=True)

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        z = np.asarray(frames, dtype=np.float64) @ self.projection
        z = z / (np.linalg.norm(z, axis=-1, keepdims=True) + 1e-8)
        return np.argmax(z @ self.codebook.T, axis=-1)


# ---------------------------------------------------------------------------
# bundles


@dataclass
class LossBundle:
    components: dict[str, Tensor | None]
    weights: dict[str, float]
    counters: dict[str, int] = field(default_factory=dict)

    def total(self) -> Tensor:
        out = None
        for name, loss in self.components.items():
            if loss is None:
                continue
            term = loss * self.weights[name]
            out = term if out is None else out + term
        return out

    def values(self) -> dict[str, float]:
        return {k: (0.0 if self.components.get(k) is None else float(self.components[k].data)) for k in LOSS_NAMES}


@dataclass
class PairedBatch:
    frames: np.ndarray  # (B, T, D)
    t_lens: np.ndarray
    tokens: np.ndarray  # (B, U)
    u_lens: np.ndarray


@dataclass
class TextBatch:
    tokens: np.ndarray
    u_lens: np.ndarray


@dataclass
class SpeechBatch:
    frames: np.ndarray
    t_lens: np.ndarray


def _pad_tokens(a: np.ndarray, length: int) -> np.ndarray:
    out = np.ones((a.shape[0], length), dtype=np.int64)
    out[:, : a.shape[1]] = a
    return out


class Objectives:
    """Computes a :class:`LossBundle` for the active streams of one training step."""

    def __init__(self, model: Model, cfg: ObjectiveConfig):
        self.model = model
        self.cfg = cfg
        self.quantizer = RandomProjectionQuantizer(
            model.cfg.feature_dim, model.cfg.codebook_size, cfg.codebook_dim, cfg.quantizer_seed
        )

    # -- teacher side (no gradients) ---------------------------------------

    def teacher_alignments(self, teacher, batch: PairedBatch):
        m = self.model
        with ad.no_grad():
            enc = m.shared_encode(teacher, m.speech_encode(teacher, batch.frames, batch.t_lens), batch.t_lens)
            lat = m.lattice(teacher, enc, batch.tokens, batch.u_lens)
        return forced_align_batch(lat.data, batch.tokens, batch.t_lens, batch.u_lens)

    def teacher_durations(self, teacher, batch: TextBatch) -> list[np.ndarray]:
        m = self.model
        with ad.no_grad():
            e_t = m.text_embed(teacher, batch.tokens, batch.u_lens)
            raw = m.predict_durations(teacher, e_t, batch.u_lens)
        return [round_durations(raw[i, :n]) for i, n in enumerate(batch.u_lens)]

    # -- streams -------------------------------------------------------------

    def speech_only(self, params, batch: SpeechBatch, rng) -> tuple[Tensor | None, Tensor | None, int]:
        m = self.model
        cfg = self.cfg
        z = m.speech_latents(params, batch.frames, batch.t_lens)
        bsz, t_max, dim = z.shape
        masked, mmap = mask_batch(z, batch.t_lens, cfg.speech_mask, rng)
        time_mask = mmap[:, :, 0]
        c = m.speech_encode(params, batch.frames, batch.t_lens, latents=masked)
        h = m.shared_encode(params, c, batch.t_lens)

        anchors, cands, skipped = [], [], 0
        for b in range(bsz):
            pos = np.flatnonzero(time_mask[b])
            if len(pos) < 2:
                skipped += 1
                continue
            for j, p in enumerate(pos):
                others = np.delete(pos, j)
                negs = rng.choice(others, size=cfg.n_negatives, replace=len(others) < cfg.n_negatives)
                anchors.append(b * t_max + p)
                cands.append(b * t_max + np.concatenate([[p], negs]))
        if not anchors:
            return None, None, skipped
        anchors = np.array(anchors)
        contrastive = info_nce(
            ad.gather(c.reshape(bsz * t_max, dim), anchors),
            ad.gather(z.reshape(bsz * t_max, dim), np.array(cands)),
            cfg.temperature,
        )
        targets = self.quantizer(batch.frames.reshape(bsz * t_max, -1)[anchors])
        logits = ad.gather(h.reshape(bsz * t_max, dim), anchors) @ params["speech_mlm.w"] + params["speech_mlm.b"]
        return contrastive, cross_entropy(logits, targets), skipped

    def text_paths(self, params, tokens, u_lens, durations, rng, masked=True):
        """Student text path: e_t, refined resampled ê_t, lengths, shared-encoder output."""
        m = self.model
        e_t = m.text_embed(params, tokens, u_lens)
        up, lengths = resample_batch(e_t, durations)
        e_hat = m.refine(params, up, lengths)
        x = mask_batch(e_hat, lengths, self.cfg.text_mask, rng)[0] if masked else e_hat
        return e_t, e_hat, lengths, m.shared_encode(params, x, lengths)

    def step_losses(self, params, teacher, rng, speech=None, paired=None, text=None) -> LossBundle:
        m = self.model
        comps: dict[str, Tensor | None] = {k: None for k in LOSS_NAMES}
        counters = {"skipped_speech": 0, "skipped_paired": 0}

        if speech is not None:
            comps["contrastive"], comps["speech_mlm"], counters["skipped_speech"] = self.speech_only(
                params, speech, rng
            )

        durations, groups = [], []
        if paired is not None:
            paths = self.teacher_alignments(teacher, paired)
            keep, d_paired = [], []
            for i, p in enumerate(paths):
                try:
                    d_paired.append(durations_from_alignment(p, convention=self.cfg.duration_convention))
                    keep.append(i)
                except InfeasibleAlignment:
                    counters["skipped_paired"] += 1
            keep = np.array(keep, dtype=np.int64)
            if len(keep):
                paired = PairedBatch(
                    paired.frames[keep], paired.t_lens[keep], paired.tokens[keep], paired.u_lens[keep]
                )
                groups.append(("paired", paired.tokens, paired.u_lens))
                durations += d_paired
            else:
                paired = None
        if text is not None:
            groups.append(("text", text.tokens, text.u_lens))
            durations += self.teacher_durations(teacher, text)

        if paired is not None:
            e_s = m.speech_encode(params, paired.frames, paired.t_lens)
            h_s = m.shared_encode(params, e_s, paired.t_lens)
            lat = m.lattice(params, h_s, paired.tokens, paired.u_lens)
            comps["rnnt_paired"] = rnnt_loss_batch(lat, paired.tokens, paired.t_lens, paired.u_lens).mean()

        counters["a_mlm_paired_items"] = 0 if paired is None else len(paired.u_lens)
        counters["a_mlm_text_items"] = 0 if text is None else len(text.u_lens)
        if groups:
            u_max = max(g[1].shape[1] for g in groups)
            tokens = np.concatenate([_pad_tokens(g[1], u_max) for g in groups])
            u_lens = np.concatenate([g[2] for g in groups])
            e_t, e_hat, lengths, h_t = self.text_paths(params, tokens, u_lens, durations, rng)
            lat_t = m.lattice(params, h_t, tokens, u_lens)
            comps["a_mlm"] = rnnt_loss_batch(lat_t, tokens, lengths, u_lens).mean()
            if paired is not None:
                n_p = len(paired.u_lens)
                comps["mm_mse"] = mm_mse(
                    e_s, e_hat[:n_p, : int(lengths[:n_p].max())], lengths[:n_p], n_frames=paired.t_lens
                )
                pred = m.duration_log(params, e_t[:n_p, : int(paired.u_lens.max())], paired.u_lens)
                comps["duration"] = duration_loss(pred, durations[:n_p], paired.u_lens)
        return LossBundle(comps, self.cfg.weights, counters)
