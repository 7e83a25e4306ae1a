"""Three-stream curriculum trainer.

Stage 1 trains on untranscribed speech only, stage 2 adds paired data
(transducer, modality matching, duration and paired aligned-MLM losses),
stage 3 adds unspoken text. Alignment, duration prediction and resampling of
unspoken text use an EMA copy of the parameters that is never differentiated.

All per-step randomness is derived from ``(seed, step)`` and stream order from
``(seed, stream, epoch)``, so a resumed run replays the uninterrupted one.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import CorpusItem, make_rng
from .encoders import (
    Model,
    ModelConfig,
    Parameters,
    arrays_to_params,
    init_params,
    load_checkpoint,
    pad_batch,
    params_to_arrays,
    save_checkpoint,
)
from .objectives import LOSS_NAMES, ObjectiveConfig, Objectives, PairedBatch, SpeechBatch, TextBatch

log = logging.getLogger(__name__)

STREAM_NAMES = ("speech", "text", "paired")
# loss components owned by each stream; a component is zero-weighted while its stream is inactive
STREAM_LOSSES = {
    "speech": ("contrastive", "speech_mlm"),
    "paired": ("mm_mse", "rnnt_paired", "duration"),
    "text": (),
}


class TrainingAborted(RuntimeError):
    pass


@dataclass
class CurriculumConfig:
    stage1_steps: int = 5000  # untranscribed speech only
    stage2_delay: int = 150  # paired data before unspoken text joins
    stage3_steps: int = 3000  # all three streams
    batch_sizes: dict = field(default_factory=lambda: {"speech": 8, "text": 16, "paired": 8})
    ema_decay: float = 0.99  # 0.9999 at full scale never settles within desk-scale step counts
    peak_lr: float = 2e-3
    warmup_fraction: float = 0.1
    decay: str = "inverse_sqrt"
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    precision: str = "float32"
    checkpoint_every: int = 1000
    stage_override: int | None = None

    def __post_init__(self):
        if min(self.stage1_steps, self.stage2_delay, self.stage3_steps) < 0:
            raise ValueError("stage lengths must be non-negative")
        if not self.stage1_steps < self.stage1_steps + self.stage2_delay < self.total_steps:
            raise ValueError("stage boundaries must be strictly increasing")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        unknown = set(self.batch_sizes) - set(STREAM_NAMES)
        if unknown:
            raise ValueError(f"unknown batch streams {sorted(unknown)}")
        self.batch_sizes = {k: int(self.batch_sizes.get(k, 0)) for k in STREAM_NAMES}
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.decay not in ("inverse_sqrt", "constant"):
            raise ValueError("decay must be inverse_sqrt or constant")
        if self.stage_override not in (None, 1, 2, 3):
            raise ValueError("stage_override must be 1, 2 or 3")

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_delay + self.stage3_steps

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_fraction * self.total_steps)))

    def stream_start(self, stream: str) -> int:
        """First step at which a stream is active."""
        if self.stage_override is not None:
            needed = {"speech": 1, "paired": 2, "text": 3}[stream]
            return 0 if self.stage_override >= needed else self.total_steps
        return {"speech": 0, "paired": self.stage1_steps, "text": self.stage1_steps + self.stage2_delay}[stream]

    def stage(self, step: int) -> int:
        if self.stage_override is not None:
            return self.stage_override
        if step < self.stage1_steps:
            return 1
        return 2 if step < self.stage1_steps + self.stage2_delay else 3

    def active_streams(self, step: int) -> tuple[str, ...]:
        return tuple(s for s in STREAM_NAMES if step >= self.stream_start(s) and self.batch_sizes[s] > 0)


def learning_rate(cfg: CurriculumConfig, n: int) -> float:
    """Learning rate for the n-th update (1-based): linear warmup, then 1/sqrt decay."""
    w = cfg.warmup_steps
    if n <= w:
        return cfg.peak_lr * n / w
    return cfg.peak_lr if cfg.decay == "constant" else cfg.peak_lr * math.sqrt(w / n)


# ---------------------------------------------------------------------------
# EMA


class EmaShadow:
    def __init__(self, params: Parameters, decay: float):
        self.decay = decay
        self.arrays = {k: v.data.copy() for k, v in params.items()}

    def update(self, params: Parameters) -> None:
        if params.keys() != self.arrays.keys():
            raise ValueError("EMA update: parameter set changed")
        d = self.decay
        for k, p in params.items():
            s = self.arrays[k]
            if s.shape != p.data.shape:
                raise ValueError(f"EMA update: shape drift for {k}: {s.shape} vs {p.data.shape}")
            s *= d
            s += (1.0 - d) * p.data

    def read(self) -> Parameters:
        """Teacher parameters; they do not require gradients and never join a tape."""
        return {k: Tensor(v, requires_grad=False, name=k) for k, v in self.arrays.items()}


def ema_update(shadow: EmaShadow, params: Parameters) -> None:
    shadow.update(params)


def ema_read(shadow: EmaShadow) -> Parameters:
    return shadow.read()


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    def __init__(self, params: Parameters, cfg: CurriculumConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0
        self.skipped = 0

    def step(self, params: Parameters, grads: dict[str, np.ndarray]) -> dict:
        """Clip by global norm and apply one adaptive-moment update.

        Returns diagnostics; a non-finite gradient skips the update entirely.
        """
        cfg = self.cfg
        sq = sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())
        norm = math.sqrt(sq)
        if not math.isfinite(norm):
            self.skipped += 1
            return {"grad_norm": norm, "clipped": False, "skipped": True, "lr": 0.0}
        scale = 1.0
        if cfg.clip_norm > 0 and norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
        self.t += 1
        lr = learning_rate(cfg, self.t)
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in params.items():
            g = grads[k] * np.asarray(scale, dtype=p.data.dtype)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
            if cfg.weight_decay:
                upd = upd + cfg.weight_decay * p.data
            p.data -= (lr * upd).astype(p.data.dtype)
        return {"grad_norm": norm, "clipped": scale < 1.0, "skipped": False, "lr": lr}


def optimizer_step(opt: Adam, params: Parameters, grads: dict[str, np.ndarray]) -> dict:
    return opt.step(params, grads)


def clip_by_global_norm(grads: dict[str, np.ndarray], threshold: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm <= threshold:
        return grads, norm
    return {k: g * (threshold / norm) for k, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# batch mixing

_STREAM_ID = {"speech": 0, "text": 1, "paired": 2}


class BatchMixer:
    """Fixed per-stream counts every step; each stream cycles through its own
    seeded permutation, one epoch at a time."""

    def __init__(self, streams: dict[str, list[CorpusItem]], cfg: CurriculumConfig, seed: int):
        self.streams = streams
        self.cfg = cfg
        self.seed = seed
        self._perms: dict[tuple[str, int], np.ndarray] = {}
        for s in STREAM_NAMES:
            if cfg.batch_sizes[s] > 0 and cfg.stream_start(s) < cfg.total_steps and not streams.get(s):
                raise ValueError(f"stream {s!r} is scheduled but empty")

    def _perm(self, stream: str, epoch: int) -> np.ndarray:
        key = (stream, epoch)
        if key not in self._perms:
            rng = make_rng(self.seed, 3, _STREAM_ID[stream], epoch)
            self._perms[key] = rng.permutation(len(self.streams[stream]))
        return self._perms[key]

    def indices(self, stream: str, step: int) -> list[int]:
        size = self.cfg.batch_sizes[stream]
        first = (step - self.cfg.stream_start(stream)) * size
        n = len(self.streams[stream])
        return [int(self._perm(stream, k // n)[k % n]) for k in range(first, first + size)]

    def batch(self, step: int) -> dict[str, list[CorpusItem]]:
        return {s: [self.streams[s][i] for i in self.indices(s, step)] for s in self.cfg.active_streams(step)}


def mix_batches(mixer: BatchMixer, step: int) -> dict[str, list[CorpusItem]]:
    return mixer.batch(step)


def to_batches(items: dict[str, list[CorpusItem]], dtype) -> dict:
    """Array batches for the loss code. Gold durations are deliberately dropped."""
    out = {}
    if "speech" in items:
        f, t = pad_batch([it.frames for it in items["speech"]], dtype=dtype)
        out["speech"] = SpeechBatch(f, t)
    if "paired" in items:
        f, t = pad_batch([it.frames for it in items["paired"]], dtype=dtype)
        tok, u = pad_batch([it.tokens for it in items["paired"]])
        out["paired"] = PairedBatch(f, t, np.where(tok > 0, tok, 1), u)
    if "text" in items:
        tok, u = pad_batch([it.tokens for it in items["text"]])
        out["text"] = TextBatch(np.where(tok > 0, tok, 1), u)
    return out


# ---------------------------------------------------------------------------
# trainer


@dataclass
class TrainState:
    step: int
    params: Parameters
    ema: EmaShadow
    opt: Adam


class Trainer:
    def __init__(
        self,
        model_cfg: ModelConfig,
        curriculum: CurriculumConfig,
        objectives: ObjectiveConfig,
        streams: dict[str, list[CorpusItem]],
        seed: int = 0,
        run_config: dict | None = None,
    ):
        self.model_cfg = model_cfg
        self.cfg = curriculum
        self.obj_cfg = objectives
        self.seed = seed
        self.dtype = np.dtype(curriculum.precision)
        self.model = Model(model_cfg)
        self.objectives = Objectives(self.model, objectives)
        self.mixer = BatchMixer(streams, curriculum, seed)
        self.run_config = run_config or {}
        self.state = self.fresh_state()

    def fresh_state(self) -> TrainState:
        params = init_params(self.model_cfg, seed=self.seed, dtype=self.dtype)
        return TrainState(0, params, EmaShadow(params, self.cfg.ema_decay), Adam(params, self.cfg))

    def compute_losses(self, step: int, items: dict[str, list[CorpusItem]]):
        batches = to_batches(items, self.dtype)
        rng = make_rng(self.seed, 2, step)
        teacher = self.state.ema.read()
        bundle = self.objectives.step_losses(
            self.state.params,
            teacher,
            rng,
            speech=batches.get("speech"),
            paired=batches.get("paired"),
            text=batches.get("text"),
        )
        return bundle

    def train_step(self) -> dict:
        st = self.state
        step = st.step
        items = self.mixer.batch(step)
        try:
            with ad.Tape() as tape:
                bundle = self.compute_losses(step, items)
                total = bundle.total()
        except ad.NonFiniteError as exc:
            self._abort(step, f"op {exc.op}", items, {})
        values = bundle.values()
        for name, v in values.items():
            if not math.isfinite(v):
                self._abort(step, name, items, values)
        if total is None:  # every item of every active stream was skipped
            info = {"grad_norm": 0.0, "clipped": False, "skipped": True, "lr": 0.0}
            st.opt.skipped += 1
        else:
            g = ad.backward(tape, total)
            grads = {k: g[p] for k, p in st.params.items()}
            info = st.opt.step(st.params, grads)
            st.ema.update(st.params)
        st.step += 1
        record = {
            "step": step,
            "stage": self.cfg.stage(step),
            "active": list(items),
            "batch_counts": {k: len(v) for k, v in items.items()},
            "total": 0.0 if total is None else float(total.data),
            **values,
            "grad_norm": info["grad_norm"],
            "clipped": info["clipped"],
            "skipped_update": info["skipped"],
            "lr": info["lr"],
            **bundle.counters,
        }
        return record

    def _abort(self, step, component, items, values):
        dump = {
            "step": step,
            "component": component,
            "losses": values,
            "items": {s: [it.item_id for it in v] for s, v in items.items()},
        }
        path = Path(self.run_config.get("out_dir", ".")) / "nan_dump.json"
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(dump, indent=2))
        except OSError:
            pass
        raise TrainingAborted(f"non-finite {component} loss at step {step}; diagnostics in {path}")

    def train(
        self,
        until: int | None = None,
        metrics_path=None,
        checkpoint_dir=None,
        callback: Callable[[dict], dict | None] | None = None,
    ) -> list[dict]:
        until = self.cfg.total_steps if until is None else until
        records = []
        fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
        if checkpoint_dir:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        t0 = time.time()
        try:
            while self.state.step < until:
                rec = self.train_step()
                if callback:
                    # the callback may attach extra fields (e.g. held-out probes) to the record
                    rec.update(callback(rec) or {})
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                step = self.state.step
                if step % 500 == 0:
                    log.info(
                        "step %d stage %d total %.4f (%.1fs)", step, rec["stage"], rec["total"], time.time() - t0
                    )
                if checkpoint_dir and self.cfg.checkpoint_every and step % self.cfg.checkpoint_every == 0:
                    self.save(Path(checkpoint_dir) / f"step{step:06d}.ckpt")
        finally:
            if fh:
                fh.close()
        return records

    # -- checkpoints ---------------------------------------------------------

    def save(self, path) -> None:
        st = self.state
        header = {
            "kind": "train",
            "step": st.step,
            "adam_t": st.opt.t,
            "adam_skipped": st.opt.skipped,
            "seed": self.seed,
            "model": asdict(self.model_cfg),
            "config": self.run_config,
        }
        save_checkpoint(
            path,
            header,
            {
                "params": params_to_arrays(st.params),
                "ema": dict(st.ema.arrays),
                "adam.m": st.opt.m,
                "adam.v": st.opt.v,
            },
        )

    def load(self, path) -> None:
        header, sections = load_checkpoint(path)
        if header.get("model") != asdict(self.model_cfg):
            raise ValueError("checkpoint was written for a different model configuration")
        params = arrays_to_params(sections["params"])
        for k, v in params.items():
            if v.data.dtype != self.dtype:
                raise ValueError(f"checkpoint precision {v.data.dtype} does not match training precision {self.dtype}")
        ema = EmaShadow(params, self.cfg.ema_decay)
        ema.arrays = {k: np.array(v) for k, v in sections["ema"].items()}
        opt = Adam(params, self.cfg)
        opt.m = {k: np.array(v) for k, v in sections["adam.m"].items()}
        opt.v = {k: np.array(v) for k, v in sections["adam.v"].items()}
        opt.t = header["adam_t"]
        opt.skipped = header.get("adam_skipped", 0)
        self.state = TrainState(header["step"], params, ema, opt)


def load_model(path) -> tuple[ModelConfig, Parameters, Parameters, dict]:
    """(config, trained params, EMA params, header) from a training checkpoint."""
    header, sections = load_checkpoint(path)
    cfg = ModelConfig(**header["model"])
    params = arrays_to_params(sections["params"], requires_grad=False)
    ema = arrays_to_params(sections.get("ema", sections["params"]), requires_grad=False)
    return cfg, params, ema, header
