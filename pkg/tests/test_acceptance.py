"""Acceptance criteria 1-8.

Criteria 3-8 share one full desk-scale curriculum (5000/150/3000 steps) and one
run with the modality-matching weight at zero, both driven through the same
code path as ``modmatch train``. Expect roughly half an hour on one core.
Each criterion prints a PASS/FAIL line in the terminal summary.
"""
import copy
import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from modmatch.checks import gradcheck_components, oracle_check
from modmatch.cli import run_training
from modmatch.config import load_config
from modmatch.encoders import load_checkpoint
from modmatch.training import EmaShadow, STREAM_LOSSES

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
WINDOW = 200


def report(n, ok, detail):
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[n])
    assert ok, ACCEPTANCE[n]


def _train(name, out):
    cfg = load_config(CONFIGS / name, environ={})
    cfg.paths.out = str(out)
    t0 = time.perf_counter()
    rep = run_training(cfg)
    secs = time.perf_counter() - t0
    records = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    return {"cfg": cfg, "report": rep, "records": records, "secs": secs, "out": out}


@pytest.fixture(scope="module")
def full(tmp_path_factory):
    return _train("desk.yaml", tmp_path_factory.mktemp("desk"))


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    return _train("ablation_no_mm.yaml", tmp_path_factory.mktemp("ablation"))


def window_means(records, start):
    """Mean held-out matching distance over consecutive complete 200-step windows from ``start``."""
    buckets = {}
    last = max(r["step"] for r in records) + 1
    for r in records:
        if "mm_mse_eval" in r and r["step"] >= start:
            k = (r["step"] - start) // WINDOW
            if start + (k + 1) * WINDOW <= last:
                buckets.setdefault(k, []).append(r["mm_mse_eval"])
    return [float(np.mean(buckets[k])) for k in sorted(buckets)]


# ---------------------------------------------------------------------------


def test_criterion_1_transducer_oracle():
    agree, worst, secs = oracle_check(100, seed=0, tol=1e-10)
    report(1, agree == 100 and secs < 10, f"{agree}/100 within 1e-10 (max |diff| {worst:.1e}), {secs:.2f}s")


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    reps = gradcheck_components(tol=1e-4)
    secs = time.perf_counter() - t0
    worst = max(r.max_error for r in reps.values())
    ok = all(r.passed for r in reps.values()) and worst <= 1e-4 and secs < 120
    report(2, ok, f"{len(reps)} components, max rel err {worst:.1e}, {secs:.1f}s")


def test_criterion_3_alignment_recovery(full):
    frac = full["report"]["alignment_within_1"]
    ok = frac >= 0.9 and full["secs"] <= 30 * 60
    report(3, ok, f"{frac:.3f} of held-out tokens within 1 frame (need 0.9); run took {full['secs'] / 60:.1f} min")


def test_criterion_4_duration_predictor(full):
    mae = full["report"]["duration_mae"]
    report(4, mae <= 1.0, f"held-out duration MAE {mae:.3f} frames (need <= 1.0)")


def test_criterion_5_speech_recognition(full):
    ter = full["report"]["ter_speech"]
    report(5, ter <= 0.05, f"ter_speech {ter:.4f} (need <= 0.05)")


def test_criterion_6_unified_representation(full, ablation):
    ts, tx = full["report"]["ter_speech"], full["report"]["ter_crossmodal"]
    tx_abl = ablation["report"]["ter_crossmodal"]
    means = window_means(full["records"], full["cfg"].curriculum.stream_start("paired"))
    monotone = len(means) >= 2 and all(b <= a for a, b in zip(means, means[1:]))
    ok_ratio = tx <= 2 * ts
    ok_ablation = tx < tx_abl
    detail = (
        f"ter_crossmodal {tx:.4f} vs 2*ter_speech {2 * ts:.4f} ({'ok' if ok_ratio else 'no'}); "
        f"ablation ter_crossmodal {tx_abl:.4f} ({'ok' if ok_ablation else 'no'}; held-out mm_mse "
        f"{full['report']['mm_mse_eval']:.4f} full vs {ablation['report']['mm_mse_eval']:.4f} ablation); "
        f"mm_mse_eval over {len(means)} windows {means[0]:.4f} -> {means[-1]:.4f} "
        f"({'monotone' if monotone else 'not monotone'})"
    )
    report(6, ok_ratio and ok_ablation and monotone, detail)


def test_criterion_7_ema_schedule_resume(full, tmp_path):
    # closed-form EMA identity in 64-bit
    from modmatch import autodiff as ad

    rng = np.random.default_rng(0)
    s0, p = rng.standard_normal(50), rng.standard_normal(50)
    shadow = EmaShadow({"w": ad.parameter(s0.copy())}, 0.99)
    params = {"w": ad.parameter(p)}
    for _ in range(137):
        shadow.update(params)
    ema_err = float(np.max(np.abs(shadow.arrays["w"] - (p + 0.99**137 * (s0 - p)))))

    # stage activation: a component is exactly zero outside its streams' window and live inside it
    cur = full["cfg"].curriculum
    bad = 0
    for r in full["records"]:
        active = set(cur.active_streams(r["step"]))
        bad += set(r["active"]) != active
        for stream, names in STREAM_LOSSES.items():
            for name in names:
                bad += (stream in active) != (r[name] != 0.0)
        bad += bool(active & {"paired", "text"}) != (r["a_mlm"] != 0.0)
        bad += ("text" in active) != (r["a_mlm_text_items"] > 0)

    # resuming from the last periodic checkpoint reproduces the tail of the run bitwise
    cfg = full["cfg"]
    every = cfg.curriculum.checkpoint_every
    at = (cfg.curriculum.total_steps - 1) // every * every
    resumed_out = tmp_path / "resumed"
    cfg_resumed = copy.deepcopy(cfg)
    cfg_resumed.paths.out = str(resumed_out)
    shutil.copy(full["out"] / "checkpoints" / f"step{at:06d}.ckpt", tmp_path / "resume.ckpt")
    run_training(cfg_resumed, resume=tmp_path / "resume.ckpt")
    orig = [line for line in (full["out"] / "metrics.jsonl").read_text().splitlines() if json.loads(line)["step"] >= at]
    again = (resumed_out / "metrics.jsonl").read_text().splitlines()
    same_metrics = orig == again and len(again) == cfg.curriculum.total_steps - at
    _, a = load_checkpoint(resumed_out / "final.ckpt")
    _, b = load_checkpoint(full["out"] / "final.ckpt")
    same_params = all(
        a[sec].keys() == b[sec].keys() and all(a[sec][k].tobytes() == b[sec][k].tobytes() for k in a[sec])
        for sec in ("params", "ema", "adam.m", "adam.v")
    )

    ok = ema_err <= 1e-12 and bad == 0 and same_metrics and same_params
    report(
        7,
        ok,
        f"EMA err {ema_err:.1e}; {bad} stage-activation violations over {len(full['records'])} steps; "
        f"resume at {at}: metrics {'identical' if same_metrics else 'differ'}, "
        f"final weights {'identical' if same_params else 'differ'}",
    )


def test_criterion_8_batch_mixing_ratio(full):
    cur = full["cfg"].curriculum
    stage3 = [r for r in full["records"] if r["stage"] == 3]
    wrong = sum(r["batch_counts"] != cur.batch_sizes for r in stage3)
    sizes = cur.batch_sizes
    ratio_ok = sizes["speech"] * 2 == sizes["text"] == sizes["paired"] * 2
    report(
        8,
        wrong == 0 and len(stage3) == cur.stage3_steps and ratio_ok,
        f"{len(stage3) - wrong}/{len(stage3)} stage-3 steps drew exactly "
        f"{sizes['speech']} speech + {sizes['text']} text + {sizes['paired']} paired items",
    )


# -- further checks on the trained model ------------------------------------------------


def test_crossmodal_tracks_speech_path(full):
    # a unified representation decodes text about as well as speech
    rep = full["report"]
    assert abs(rep["ter_crossmodal"] - rep["ter_speech"]) <= 0.05
    assert rep["excluded_crossmodal"] == 0 and rep["excluded_alignment"] == 0


def test_losses_fall_after_each_stage_entry(full):
    recs = full["records"]
    by_step = {r["step"]: r for r in recs}

    def mean(name, lo, hi):
        return float(np.mean([by_step[s][name] for s in range(lo, hi)]))

    assert mean("contrastive", 4800, 5000) < mean("contrastive", 0, 200)
    assert mean("rnnt_paired", 7950, 8150) < 0.2 * mean("rnnt_paired", 5000, 5050)
    assert mean("mm_mse", 7950, 8150) < mean("mm_mse", 5000, 5050)
    assert mean("duration", 7950, 8150) < mean("duration", 5000, 5050)


def test_capped_full_width_time_mask_raises_a_mlm(full):
    # blanking half of each resampled text sequence must make the aligned-MLM task harder
    from modmatch import autodiff as ad
    from modmatch.corpus import generate
    from modmatch.encoders import Model, pad_batch
    from modmatch.resample import resample_batch
    from modmatch.training import load_model
    from modmatch.transducer import rnnt_loss_batch

    cfg, params, _, _ = load_model(full["out"] / "final.ckpt")
    model = Model(cfg)
    items = generate(full["cfg"].corpus)["eval_paired"][:64]
    tokens, u_lens = pad_batch([it.tokens for it in items])
    tokens = np.where(tokens > 0, tokens, 1)
    with ad.no_grad():
        e_hat_up, lengths = resample_batch(model.text_embed(params, tokens, u_lens), [it.durations for it in items])
        e_hat = model.refine(params, e_hat_up, lengths)
        keep = np.ones(e_hat.shape[:2] + (1,), dtype=e_hat.dtype)
        for i, n in enumerate(lengths):
            keep[i, : n // 2] = 0.0  # capped: at most half the frames
        losses = []
        for x in (e_hat, e_hat * keep):
            h = model.shared_encode(params, x, lengths)
            losses.append(rnnt_loss_batch(model.lattice(params, h, tokens, u_lens), tokens, lengths, u_lens).data)
    plain, masked = losses
    assert np.all(masked > plain), f"{int(np.sum(masked <= plain))} of {len(items)} items did not get harder"
