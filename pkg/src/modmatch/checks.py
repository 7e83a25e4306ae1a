"""Self-checks shared by the command line and the test-suite: finite-difference
gradient checks of every loss component and the transducer DP-vs-enumeration
comparison."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import make_rng
from .encoders import Model, ModelConfig, init_params, pad_batch
from .objectives import (
    MaskSpec,
    ObjectiveConfig,
    Objectives,
    SpeechBatch,
    duration_loss,
    mm_mse,
)
from .resample import resample_batch
from .transducer import enumerate_paths_oracle, rnnt_loss, rnnt_loss_batch

COMPONENTS = ("rnnt", "mm_mse", "a_mlm", "contrastive", "speech_mlm", "duration")


def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        feature_dim=4,
        vocab_size=4,
        d_model=8,
        n_heads=2,
        ff_dim=8,
        n_speech_layers=1,
        n_shared_layers=1,
        n_text_conv_layers=1,
        n_text_transformer_layers=1,
        text_conv_kernel=3,
        n_refiner_layers=1,
        refiner_kernel=3,
        n_duration_blocks=1,
        duration_kernel=3,
        decoder_hidden=8,
        joint_dim=8,
        codebook_size=8,
    )


@dataclass
class TinyProblem:
    model: Model
    objectives: Objectives
    params: dict
    frames: np.ndarray
    t_lens: np.ndarray
    tokens: np.ndarray
    u_lens: np.ndarray
    durations: list

    def component(self, name: str):
        """Closure evaluating one loss component from scratch (fixed masks)."""
        m, p = self.model, self.params

        def speech_only():
            batch = SpeechBatch(self.frames, self.t_lens)
            return self.objectives.speech_only(p, batch, make_rng(5, 1))

        def text_shared(masked):
            return self.objectives.text_paths(p, self.tokens, self.u_lens, self.durations, make_rng(5, 2), masked)

        def rnnt():
            enc = m.shared_encode(p, m.speech_encode(p, self.frames, self.t_lens), self.t_lens)
            lat = m.lattice(p, enc, self.tokens, self.u_lens)
            return rnnt_loss_batch(lat, self.tokens, self.t_lens, self.u_lens).mean()

        def mm():
            e_s = m.speech_encode(p, self.frames, self.t_lens)
            _, e_hat, lengths, _ = text_shared(False)
            return mm_mse(e_s, e_hat, lengths, n_frames=self.t_lens)

        def a_mlm():
            _, _, lengths, h = text_shared(True)
            lat = m.lattice(p, h, self.tokens, self.u_lens)
            return rnnt_loss_batch(lat, self.tokens, lengths, self.u_lens).mean()

        def duration():
            e_t = m.text_embed(p, self.tokens, self.u_lens)
            return duration_loss(m.duration_log(p, e_t, self.u_lens), self.durations, self.u_lens)

        return {
            "rnnt": rnnt,
            "mm_mse": mm,
            "a_mlm": a_mlm,
            "contrastive": lambda: speech_only()[0],
            "speech_mlm": lambda: speech_only()[1],
            "duration": duration,
        }[name]


def tiny_problem(seed: int = 0, dtype=np.float64) -> TinyProblem:
    cfg = tiny_model_config()
    rng = make_rng(seed, 11)
    durations = [np.array([2, 3, 1]), np.array([3, 2])]
    t_lens = np.array([int(d.sum()) for d in durations])
    frames = [rng.standard_normal((n, cfg.feature_dim)) for n in t_lens]
    tokens = [np.array([1, 3, 2]), np.array([4, 1])]
    f, t = pad_batch(frames, dtype=dtype)
    tok, u = pad_batch(tokens)
    tok = np.where(tok > 0, tok, 1)
    obj_cfg = ObjectiveConfig(
        text_mask=MaskSpec(n_time_masks=1, max_time_width=1, n_feature_masks=1, max_feature_width=2),
        speech_mask=MaskSpec(n_time_masks=1, max_time_width=2, n_feature_masks=0, max_feature_width=0),
        n_negatives=2,
        codebook_dim=4,
    )
    model = Model(cfg)
    return TinyProblem(model, Objectives(model, obj_cfg), init_params(cfg, seed, dtype, zero_joint_out=False), f, t, tok, u, durations)


def gradcheck_components(tol: float = 1e-4, max_coords: int | None = 4, seed: int = 0) -> dict[str, ad.GradCheckReport]:
    """Finite-difference check of every loss component on a tiny 64-bit model."""
    prob = tiny_problem(seed)
    return {name: ad.grad_check(prob.component(name), prob.params, eps=1e-6, tol=tol, max_coords=max_coords, seed=seed) for name in COMPONENTS}


def random_instance(rng, t_max=4, u_max=3, v_max=5):
    t = int(rng.integers(1, t_max + 1))
    u = int(rng.integers(0, u_max + 1))
    v = int(rng.integers(1, v_max + 1))
    logits = rng.standard_normal((t, u + 1, v + 1)) * 2.0
    tokens = rng.integers(1, v + 1, size=u)
    return logits, tokens


def oracle_check(n: int = 100, seed: int = 0, tol: float = 1e-10) -> tuple[int, float, float]:
    """Compare the DP loss with path enumeration on ``n`` random small lattices.

    Returns (agreements, worst absolute difference, seconds).
    """
    rng = make_rng(seed, 13)
    agree, worst = 0, 0.0
    t0 = time.perf_counter()
    for _ in range(n):
        logits, tokens = random_instance(rng)
        dp = rnnt_loss(logits, tokens)
        ref, _, _ = enumerate_paths_oracle(logits, tokens)
        diff = abs(dp - ref)
        worst = max(worst, diff)
        agree += diff <= tol
    return agree, worst, time.perf_counter() - t0
