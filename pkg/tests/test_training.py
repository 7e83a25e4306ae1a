import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modmatch import autodiff as ad
from modmatch.checks import tiny_model_config
from modmatch.corpus import CorpusSpec, generate
from modmatch.objectives import ObjectiveConfig
from modmatch.training import (
    Adam,
    BatchMixer,
    CurriculumConfig,
    EmaShadow,
    Trainer,
    TrainingAborted,
    clip_by_global_norm,
    ema_read,
    ema_update,
    learning_rate,
    load_model,
    mix_batches,
)

TINY_CORPUS = CorpusSpec(
    vocab_size=4,
    feature_dim=4,
    utt_len=(2, 4),
    counts={"speech": 12, "text": 20, "paired": 12, "eval_paired": 4, "eval_text": 4},
)
SHORT = dict(stage1_steps=3, stage2_delay=2, stage3_steps=2, batch_sizes={"speech": 2, "text": 4, "paired": 2})


@pytest.fixture(scope="module")
def corpus():
    return generate(TINY_CORPUS)


def make_trainer(corpus, precision="float64", **kw):
    cfg = CurriculumConfig(**{**SHORT, "precision": precision, **kw})
    return Trainer(tiny_model_config(), cfg, ObjectiveConfig(), corpus, seed=0)


def param(x):
    return {"w": ad.parameter(np.asarray(x, dtype=np.float64), name="w")}


# -- EMA ------------------------------------------------------------------------


def test_ema_closed_form_example():
    p = param([1.0])
    shadow = EmaShadow(param([0.0]), 0.5)
    for _ in range(3):
        ema_update(shadow, p)
    assert ema_read(shadow)["w"].data[0] == 0.875


@settings(max_examples=30, deadline=None)
@given(decay=st.floats(0.01, 0.999), k=st.integers(1, 60), s0=st.floats(-5, 5), p=st.floats(-5, 5))
def test_ema_geometric_tracking(decay, k, s0, p):
    shadow = EmaShadow(param([s0]), decay)
    params = param([p])
    for _ in range(k):
        shadow.update(params)
    assert abs(shadow.arrays["w"][0] - (p + decay**k * (s0 - p))) <= 1e-12


def test_ema_bound_after_1000_updates():
    shadow = EmaShadow(param([3.0, -2.0]), 0.99)
    p = param([1.0, 1.0])
    for _ in range(1000):
        shadow.update(p)
    assert np.all(np.abs(shadow.arrays["w"] - 1.0) <= 0.99**1000 * np.array([2.0, 3.0]) + 1e-15)


def test_ema_shape_drift_and_key_change():
    shadow = EmaShadow(param([1.0, 2.0]), 0.9)
    with pytest.raises(ValueError, match="shape"):
        shadow.update(param([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError):
        shadow.update({"v": ad.parameter(np.zeros(2))})


def test_teacher_tensors_do_not_require_grad():
    teacher = EmaShadow(param([1.0]), 0.9).read()
    assert not teacher["w"].requires_grad


# -- schedule -------------------------------------------------------------------------


def test_default_curriculum_ratios():
    cfg = CurriculumConfig()
    assert (cfg.stage1_steps, cfg.stage2_delay, cfg.stage3_steps) == (5000, 150, 3000)
    assert cfg.batch_sizes == {"speech": 8, "text": 16, "paired": 8}
    assert cfg.ema_decay == 0.99


@pytest.mark.parametrize(
    "step,active",
    [
        (0, ("speech",)),
        (4999, ("speech",)),
        (5000, ("speech", "paired")),
        (5149, ("speech", "paired")),
        (5150, ("speech", "text", "paired")),
        (8149, ("speech", "text", "paired")),
    ],
)
def test_default_stage_boundaries(step, active):
    cfg = CurriculumConfig()
    assert cfg.active_streams(step) == active
    assert cfg.stage(step) == 1 + (step >= 5000) + (step >= 5150)


def test_boundaries_must_increase():
    with pytest.raises(ValueError):
        CurriculumConfig(stage2_delay=0)
    with pytest.raises(ValueError):
        CurriculumConfig(ema_decay=1.0)


def test_stage_override_activates_streams_from_step_zero():
    cfg = CurriculumConfig(stage_override=2)
    assert cfg.active_streams(0) == ("speech", "paired")
    assert CurriculumConfig(stage_override=3).active_streams(0) == ("speech", "text", "paired")


def test_warmup_midpoint_is_half_peak():
    cfg = CurriculumConfig()
    w = cfg.warmup_steps
    assert w == 815
    assert learning_rate(cfg, w) == cfg.peak_lr
    cfg2 = CurriculumConfig(stage1_steps=900, stage2_delay=50, stage3_steps=1050)  # warmup 200
    assert learning_rate(cfg2, 100) == cfg2.peak_lr / 2
    assert abs(learning_rate(cfg2, 800) - cfg2.peak_lr / 2) < 1e-15  # sqrt(200/800)


# -- optimiser ------------------------------------------------------------------------


def test_zero_grads_leave_params_unchanged():
    p = param(np.random.default_rng(0).standard_normal(5))
    before = p["w"].data.copy()
    opt = Adam(p, CurriculumConfig())
    for _ in range(5):
        opt.step(p, {"w": np.zeros(5)})
    assert np.array_equal(p["w"].data, before)


def test_convex_quadratic_decreases_monotonically():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((6, 6))
    h = a @ a.T + np.eye(6)
    target = rng.standard_normal(6)
    p = param(np.zeros(6))
    opt = Adam(p, CurriculumConfig(stage1_steps=10, stage2_delay=10, stage3_steps=80, peak_lr=0.05, clip_norm=0.0))

    def loss():
        d = p["w"].data - target
        return 0.5 * d @ h @ d

    values = [loss()]
    for _ in range(100):
        opt.step(p, {"w": h @ (p["w"].data - target)})
        values.append(loss())
    assert all(b < a for a, b in zip(values, values[1:]))
    assert values[-1] < 0.05 * values[0]


def test_non_finite_gradient_skips_step():
    p = param([1.0, 2.0])
    opt = Adam(p, CurriculumConfig())
    info = opt.step(p, {"w": np.array([np.nan, 1.0])})
    assert info["skipped"] and opt.skipped == 1 and opt.t == 0
    assert p["w"].data.tolist() == [1.0, 2.0]
    assert not opt.step(p, {"w": np.array([0.5, 1.0])})["skipped"]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e4), thr=st.floats(0.1, 10))
def test_clip_bound(seed, scale, thr):
    rng = np.random.default_rng(seed)
    grads = {"a": scale * rng.standard_normal((3, 4)), "b": scale * rng.standard_normal(7)}
    clipped, norm = clip_by_global_norm(grads, thr)
    post = np.sqrt(sum(np.sum(g**2) for g in clipped.values()))
    if norm > thr:
        assert post <= thr + 1e-6
    else:
        assert clipped is grads


# -- mixing -------------------------------------------------------------------------


def test_mixer_counts_per_stage():
    c = generate(CorpusSpec(counts={"speech": 30, "text": 40, "paired": 20, "eval_paired": 0, "eval_text": 0}))
    mixer = BatchMixer(c, CurriculumConfig(), seed=0)
    assert {k: len(v) for k, v in mix_batches(mixer, 0).items()} == {"speech": 8}
    assert {k: len(v) for k, v in mixer.batch(5000).items()} == {"speech": 8, "paired": 8}
    assert {k: len(v) for k, v in mixer.batch(6000).items()} == {"speech": 8, "text": 16, "paired": 8}
    assert all(it.kind == "text" for it in mixer.batch(6000)["text"])


def test_mixer_cycles_through_every_item_each_epoch(corpus):
    cfg = CurriculumConfig(**SHORT)
    mixer = BatchMixer(corpus, cfg, seed=3)
    seen = [i for step in range(6) for i in mixer.indices("speech", step)]  # 12 items, 2 per step
    assert sorted(seen) == list(range(12))


def test_mixer_is_deterministic(corpus):
    cfg = CurriculumConfig(**SHORT)
    a = [BatchMixer(corpus, cfg, seed=5).indices("text", s) for s in range(5, 7)]
    b = [BatchMixer(corpus, cfg, seed=5).indices("text", s) for s in range(5, 7)]
    c = [BatchMixer(corpus, cfg, seed=6).indices("text", s) for s in range(5, 7)]
    assert a == b and a != c


def test_empty_scheduled_stream_is_an_error(corpus):
    with pytest.raises(ValueError, match="text"):
        BatchMixer({**corpus, "text": []}, CurriculumConfig(**SHORT), seed=0)


# -- trainer --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def short_run(corpus):
    tr = make_trainer(corpus)
    return tr, tr.train()


def test_stage_activation_in_metrics(short_run):
    _, recs = short_run
    speech_only = ("rnnt_paired", "mm_mse", "a_mlm", "duration")
    for r in recs[:3]:
        assert r["active"] == ["speech"] and all(r[k] == 0.0 for k in speech_only)
    for r in recs[3:5]:
        assert r["active"] == ["speech", "paired"]
        assert r["rnnt_paired"] > 0 and r["duration"] > 0
        assert r["a_mlm_text_items"] == 0 and r["a_mlm_paired_items"] > 0
    for r in recs[5:]:
        assert r["active"] == ["speech", "text", "paired"] and r["a_mlm_text_items"] == 4


def test_metrics_record_schema(short_run, corpus, tmp_path):
    tr = make_trainer(corpus)
    tr.train(until=2, metrics_path=tmp_path / "m.jsonl")
    lines = (tmp_path / "m.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    for key in ("step", "active", "rnnt_paired", "mm_mse", "a_mlm", "contrastive", "speech_mlm", "duration",
                "grad_norm", "lr", "total"):
        assert key in rec
    assert lines[0] == json.dumps(short_run[1][0], sort_keys=True)  # deterministic given seed


def test_resume_is_bitwise_identical(corpus, tmp_path):
    ref = make_trainer(corpus, precision="float32")
    ref_recs = ref.train()
    part = make_trainer(corpus, precision="float32")
    part.train(until=4)
    part.save(tmp_path / "mid.ckpt")
    resumed = make_trainer(corpus, precision="float32")
    resumed.load(tmp_path / "mid.ckpt")
    rest = resumed.train()
    assert [json.dumps(r, sort_keys=True) for r in rest] == [json.dumps(r, sort_keys=True) for r in ref_recs[4:]]
    for k, v in ref.state.params.items():
        assert v.data.tobytes() == resumed.state.params[k].data.tobytes()


def test_checkpoints_at_cadence_and_load_model(corpus, tmp_path):
    tr = make_trainer(corpus, checkpoint_every=3)
    tr.train(checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["step000003.ckpt", "step000006.ckpt"]
    cfg, params, ema, header = load_model(tmp_path / "step000006.ckpt")
    assert cfg == tiny_model_config() and header["step"] == 6
    assert not np.array_equal(params["speech.proj.w"].data, ema["speech.proj.w"].data)


def test_load_rejects_precision_mismatch(corpus, tmp_path):
    a = make_trainer(corpus, precision="float32")
    a.save(tmp_path / "a.ckpt")
    with pytest.raises(ValueError, match="precision"):
        make_trainer(corpus, precision="float64").load(tmp_path / "a.ckpt")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts_with_dump(corpus, tmp_path):
    tr = make_trainer(corpus)
    tr.run_config = {"out_dir": str(tmp_path)}
    tr.state.params["speech.proj.w"].data[:] = np.inf
    with pytest.raises(TrainingAborted, match="step 0"):
        tr.train_step()
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["step"] == 0 and dump["component"]
    assert len(dump["items"]["speech"]) == 2
