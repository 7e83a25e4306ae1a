"""Scoring: token error rate, speech-path and cross-modal decoding, alignment
recovery, duration error and held-out modality-matching distance."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import CorpusItem
from .encoders import Model, Parameters, pad_batch
from .objectives import LOSS_NAMES, mm_mse
from .resample import DurationError, InfeasibleAlignment, durations_from_alignment, resample_batch, round_durations
from .transducer import forced_align_batch, greedy_decode

EVAL_BATCH = 32


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    a, b = list(a), list(b)
    prev = np.arange(len(b) + 1)
    for i, x in enumerate(a, 1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return int(prev[-1])


def token_error_rate(hyp: Sequence[int], ref: Sequence[int]) -> float:
    if len(ref) == 0:
        raise ValueError("token error rate needs a non-empty reference")
    return edit_distance(hyp, ref) / len(ref)


def corpus_ter(hyps, refs) -> float:
    """Total edits over total reference tokens."""
    n = sum(len(r) for r in refs)
    if n == 0:
        raise ValueError("token error rate needs a non-empty reference")
    return sum(edit_distance(h, r) for h, r in zip(hyps, refs)) / n


@dataclass
class EvalReport:
    ter_speech: float
    ter_crossmodal: float
    duration_mae: float
    duration_mae_raw: float
    alignment_within_1: float
    mm_mse_eval: float
    n_speech_items: int
    n_text_items: int
    excluded_crossmodal: int = 0
    excluded_alignment: int = 0
    decode_warnings: int = 0
    loss_finals: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _chunks(items, n=EVAL_BATCH):
    for i in range(0, len(items), n):
        yield items[i : i + n]


def _decode_encoded(model: Model, p: Parameters, enc: np.ndarray, lengths) -> tuple[list[list[int]], int]:
    """Greedy-decode each row of a padded (B, T, d) shared-encoder output."""
    enc_proj = (ad.as_tensor(enc) @ p["joint.enc.w"] + p["joint.enc.b"]).data
    w_pred = p["joint.pred.w"].data
    w_out, b_out = p["joint.out.w"].data, p["joint.out.b"].data
    start, _ = model.decode_step(p, 0, None)
    start = start.data

    def update(state, token):
        h, _ = model.decode_step(p, token, state)
        return h.data

    def joint(frame, state):
        return (np.tanh(frame + state @ w_pred) @ w_out + b_out)[0]

    hyps, warnings = [], 0
    for b, n in enumerate(lengths):
        out, warn = greedy_decode(joint, enc_proj[b, :n], start, update)
        hyps.append(out)
        warnings += len(warn)
    return hyps, warnings


def decode_speech(model: Model, p: Parameters, items: Sequence[CorpusItem]) -> tuple[list[list[int]], int]:
    hyps, warnings = [], 0
    dtype = p["speech.proj.w"].dtype
    with ad.no_grad():
        for chunk in _chunks(list(items)):
            frames, t_lens = pad_batch([it.frames for it in chunk], dtype=dtype)
            enc = model.shared_encode(p, model.speech_encode(p, frames, t_lens), t_lens)
            h, w = _decode_encoded(model, p, enc.data, t_lens)
            hyps += h
            warnings += w
    return hyps, warnings


def predicted_durations(model: Model, p: Parameters, tokens: np.ndarray, u_lens) -> tuple[list[np.ndarray], np.ndarray]:
    """Rounded and raw duration predictions for a padded token batch."""
    with ad.no_grad():
        e_t = model.text_embed(p, tokens, u_lens)
        raw = model.predict_durations(p, e_t, u_lens)
    return [round_durations(raw[i, :n]) for i, n in enumerate(u_lens)], raw


def text_representations(model: Model, p: Parameters, tokens, u_lens, durations):
    """Unmasked text path: embed, resample, refine, shared encoder."""
    e_t = model.text_embed(p, tokens, u_lens)
    up, lengths = resample_batch(e_t, durations)
    e_hat = model.refine(p, up, lengths)
    return e_t, e_hat, lengths, model.shared_encode(p, e_hat, lengths)


def eval_crossmodal(model: Model, p: Parameters, items: Sequence[CorpusItem]) -> tuple[float, int, int]:
    """Self-reconstruction TER through the text path and the speech-trained decoder.

    Returns (ter, excluded items, decoder warnings). Items whose predicted
    durations are unusable are excluded and counted.
    """
    hyps, refs, excluded, warnings = [], [], 0, 0
    with ad.no_grad():
        for chunk in _chunks(list(items)):
            tokens, u_lens = pad_batch([it.tokens for it in chunk])
            tokens = np.where(tokens > 0, tokens, 1)
            raw = model.predict_durations(p, model.text_embed(p, tokens, u_lens), u_lens)
            keep, durations = [], []
            for i, n in enumerate(u_lens):
                try:
                    durations.append(round_durations(raw[i, :n]))
                    keep.append(i)
                except DurationError:
                    excluded += 1
            if not keep:
                continue
            tokens, u_lens, chunk = tokens[keep], u_lens[keep], [chunk[i] for i in keep]
            _, _, lengths, h = text_representations(model, p, tokens, u_lens, durations)
            out, w = _decode_encoded(model, p, h.data, lengths)
            hyps += out
            refs += [it.tokens.tolist() for it in chunk]
            warnings += w
    if not refs:
        return float("nan"), excluded, warnings
    return corpus_ter(hyps, refs), excluded, warnings


def align_items(model: Model, p: Parameters, items: Sequence[CorpusItem]):
    """Forced alignments of paired items under ``p``."""
    paths = []
    dtype = p["speech.proj.w"].dtype
    with ad.no_grad():
        for chunk in _chunks(list(items)):
            frames, t_lens = pad_batch([it.frames for it in chunk], dtype=dtype)
            tokens, u_lens = pad_batch([it.tokens for it in chunk])
            tokens = np.where(tokens > 0, tokens, 1)
            enc = model.shared_encode(p, model.speech_encode(p, frames, t_lens), t_lens)
            lat = model.lattice(p, enc, tokens, u_lens)
            paths += forced_align_batch(lat.data, tokens, t_lens, u_lens)
    return paths


def alignment_recovery(
    model: Model, p: Parameters, items: Sequence[CorpusItem], convention: str = "onset"
) -> tuple[float, int, list]:
    """Fraction of tokens whose alignment-derived duration is within one frame of gold."""
    hits = total = excluded = 0
    durs = []
    for it, path in zip(items, align_items(model, p, items)):
        try:
            d = durations_from_alignment(path, convention=convention)
        except InfeasibleAlignment:
            excluded += 1
            durs.append(None)
            continue
        durs.append(d)
        hits += int(np.sum(np.abs(d - it.durations) <= 1))
        total += len(d)
    return (hits / total if total else float("nan")), excluded, durs


def duration_errors(model: Model, p: Parameters, items: Sequence[CorpusItem]) -> tuple[float, float]:
    """Mean absolute error of (rounded, raw) predicted durations against gold."""
    err_r, err_raw, n = 0.0, 0.0, 0
    for chunk in _chunks(list(items)):
        tokens, u_lens = pad_batch([it.tokens for it in chunk])
        tokens = np.where(tokens > 0, tokens, 1)
        rounded, raw = predicted_durations(model, p, tokens, u_lens)
        for i, it in enumerate(chunk):
            err_r += float(np.abs(rounded[i] - it.durations).sum())
            err_raw += float(np.abs(raw[i, : u_lens[i]] - it.durations).sum())
            n += len(it.durations)
    return err_r / n, err_raw / n


def mm_mse_eval(
    model: Model, p: Parameters, items: Sequence[CorpusItem], durations=None, convention: str = "onset"
) -> float:
    """Held-out modality-matching distance, with spans from forced alignment."""
    if durations is None:
        durations = [durations_from_alignment(path, convention=convention) for path in align_items(model, p, items)]
    total, n = 0.0, 0
    dtype = p["speech.proj.w"].dtype
    with ad.no_grad():
        for lo in range(0, len(items), EVAL_BATCH):
            chunk = [(it, d) for it, d in zip(items[lo : lo + EVAL_BATCH], durations[lo : lo + EVAL_BATCH]) if d is not None]
            if not chunk:
                continue
            frames, t_lens = pad_batch([it.frames for it, _ in chunk], dtype=dtype)
            tokens, u_lens = pad_batch([it.tokens for it, _ in chunk])
            tokens = np.where(tokens > 0, tokens, 1)
            e_s = model.speech_encode(p, frames, t_lens)
            _, e_hat, lengths, _ = text_representations(model, p, tokens, u_lens, [d for _, d in chunk])
            total += float(mm_mse(e_s, e_hat, lengths, n_frames=t_lens).data) * len(chunk)
            n += len(chunk)
    return total / n if n else float("nan")


def evaluate(
    model: Model,
    p: Parameters,
    paired: Sequence[CorpusItem],
    text: Sequence[CorpusItem],
    loss_finals: dict | None = None,
    convention: str = "onset",
) -> EvalReport:
    """Full report. ``p`` should be the EMA parameters; nothing is modified."""
    hyps, warn = decode_speech(model, p, paired)
    ter_s = corpus_ter(hyps, [it.tokens.tolist() for it in paired])
    ter_x, excl_x, warn_x = eval_crossmodal(model, p, text)
    recov, excl_a, durs = alignment_recovery(model, p, paired, convention)
    mae, mae_raw = duration_errors(model, p, paired)
    mm = mm_mse_eval(model, p, paired, durs)
    return EvalReport(
        ter_speech=ter_s,
        ter_crossmodal=ter_x,
        duration_mae=mae,
        duration_mae_raw=mae_raw,
        alignment_within_1=recov,
        mm_mse_eval=mm,
        n_speech_items=len(paired),
        n_text_items=len(text),
        excluded_crossmodal=excl_x,
        excluded_alignment=excl_a,
        decode_warnings=warn + warn_x,
        loss_finals=dict(loss_finals or {}),
    )


def loss_finals(records: Sequence[dict], window: int = 200) -> dict:
    """Mean of the total and of each loss component over the last ``window`` steps."""
    tail = list(records)[-window:]
    keys = [k for k in ("total", *LOSS_NAMES) if tail and all(k in r for r in tail)]
    return {k: float(np.mean([r[k] for r in tail])) for k in keys}


def write_plot_data(records: Sequence[dict], path, columns: Sequence[str] | None = None) -> None:
    """Tab-separated columns, one row per step, header line first; missing values are nan."""
    columns = list(columns or ["step", "stage", "total", *LOSS_NAMES, "grad_norm", "lr", "mm_mse_eval"])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for r in records:
            fh.write("\t".join(f"{r.get(c, float('nan')):.6g}" if isinstance(r.get(c), float) else str(r.get(c, "nan")) for c in columns) + "\n")
