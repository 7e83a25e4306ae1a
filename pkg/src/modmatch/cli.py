"""Command line: gen-corpus | train | eval | align | gradcheck | oracle-check."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from .checks import COMPONENTS, gradcheck_components, oracle_check
from .config import RunConfig, echo_config, load_config
from .corpus import generate, load_corpus, write_corpus
from .encoders import Model
from .evaluation import align_items, evaluate, loss_finals, mm_mse_eval, write_plot_data
from .resample import InfeasibleAlignment, durations_from_alignment
from .training import Trainer, load_model

log = logging.getLogger("modmatch")

ERROR_FILE = "error_detail.txt"


class CliError(RuntimeError):
    pass


def _config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["paths.out"] = args.out
    if getattr(args, "stage_override", None) is not None:
        overrides["curriculum.stage_override"] = args.stage_override
    if args.config is not None and not Path(args.config).exists():
        raise CliError(f"config file not found: {args.config}")
    cfg = load_config(args.config, overrides=overrides)
    args.resolved_out = cfg.paths.out  # where error details go when --out is absent
    return cfg


def _streams(cfg: RunConfig) -> dict:
    if cfg.paths.corpus:
        path = Path(cfg.paths.corpus)
        if not path.exists():
            raise CliError(f"corpus not found: {path}")
        _, streams = load_corpus(path)
        return streams
    return generate(cfg.corpus)


def _require_checkpoint(args) -> Path:
    if not args.checkpoint:
        raise CliError("--checkpoint is required")
    path = Path(args.checkpoint)
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}")
    return path


def run_training(cfg: RunConfig, resume=None, streams=None) -> dict:
    """Train per ``cfg`` into ``cfg.paths.out``; returns the final eval report as a dict."""
    out = Path(cfg.paths.out)
    echo_config(cfg, out)
    streams = _streams(cfg) if streams is None else streams
    trainer = Trainer(cfg.model, cfg.curriculum, cfg.objectives, streams, seed=cfg.seed, run_config=cfg.to_dict())
    metrics = out / "metrics.jsonl"
    if resume is not None:
        trainer.load(resume)
        _truncate_metrics(metrics, trainer.state.step)
    elif metrics.exists():
        metrics.unlink()
    probe_items = streams.get("eval_paired", [])[: cfg.eval.probe_items]
    paired_start = cfg.curriculum.stream_start("paired")
    convention = cfg.objectives.duration_convention

    def probe(rec):
        n = rec["step"] + 1
        if cfg.eval.probe_every and probe_items and n > paired_start and n % cfg.eval.probe_every == 0:
            ema = trainer.state.ema.read()
            return {"mm_mse_eval": mm_mse_eval(trainer.model, ema, probe_items, convention=convention)}
        return None

    trainer.train(metrics_path=metrics, checkpoint_dir=out / "checkpoints", callback=probe)
    trainer.save(out / "final.ckpt")
    records = [json.loads(line) for line in metrics.read_text().splitlines() if line]
    write_plot_data(records, out / "plot_data.tsv")
    report = evaluate(
        trainer.model,
        trainer.state.ema.read(),
        streams.get("eval_paired", []),
        streams.get("eval_text", []),
        loss_finals(records),
        convention,
    )
    (out / "report.json").write_text(report.to_json() + "\n")
    return report.to_dict()


def _truncate_metrics(path: Path, step: int) -> None:
    """Drop records at or after ``step`` so a resumed run appends cleanly."""
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] < step]
    path.write_text("".join(line + "\n" for line in keep))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args) -> int:
    cfg = _config(args)
    spec = cfg.corpus
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(cfg.paths.out)
    echo_config(cfg, out)
    manifest = write_corpus(out, spec)
    counts = json.loads(manifest.read_text())["streams"]
    print("wrote " + ", ".join(f"{k}={v['count']}" for k, v in counts.items()) + f" to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    resume = _require_checkpoint(args) if args.checkpoint else None
    report = run_training(cfg, resume=resume)
    print(_summary(report))
    print(f"outputs in {cfg.paths.out}")
    return 0


def _load_for_eval(args):
    ckpt = _require_checkpoint(args)
    model_cfg, _, ema, header = load_model(ckpt)
    if args.config is None and header.get("config"):
        from .config import from_dict

        cfg = from_dict(header["config"])
        if args.out is not None:
            cfg.paths.out = args.out
    else:
        cfg = _config(args)
    return cfg, Model(model_cfg), ema


def cmd_eval(args) -> int:
    cfg, model, ema = _load_for_eval(args)
    streams = _streams(cfg)
    report = evaluate(
        model, ema, streams["eval_paired"], streams["eval_text"], convention=cfg.objectives.duration_convention
    )
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    print(_summary(report.to_dict()))
    return 0


def cmd_align(args) -> int:
    cfg, model, ema = _load_for_eval(args)
    items = _streams(cfg)["eval_paired"]
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    hits = total = 0
    with open(out / "alignments.tsv", "w", encoding="utf-8") as fh:
        fh.write("item_id\ttokens\temit_frames\tdurations\tgold_durations\n")
        for it, path in zip(items, align_items(model, ema, items)):
            try:
                d = durations_from_alignment(path, convention=cfg.objectives.duration_convention)
            except InfeasibleAlignment:
                d = None
            fmt = lambda xs: ",".join(str(int(x)) for x in xs)  # noqa: E731
            fh.write(f"{it.item_id}\t{fmt(it.tokens)}\t{fmt(path.emit_frame)}\t{fmt(d) if d is not None else '-'}\t{fmt(it.durations)}\n")
            if d is not None:
                hits += int(np.sum(np.abs(d - it.durations) <= 1))
            total += len(it.tokens)
    print(f"aligned {len(items)} items; {hits}/{total} token durations within 1 frame of gold")
    return 0


def cmd_gradcheck(args) -> int:
    tol = 1e-4
    reports = gradcheck_components(tol=tol)
    worst = max(r.max_error for r in reports.values())
    lines = [f"{name}: max rel err {reports[name].max_error:.2e} ({'PASS' if reports[name].passed else 'FAIL'})" for name in COMPONENTS]
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    if all(r.passed for r in reports.values()):
        print(f"PASS all components, max rel err {worst:.2e} <= {tol:g}")
        return 0
    failed = [n for n in COMPONENTS if not reports[n].passed]
    raise CliError(f"gradient check failed for {', '.join(failed)} (max rel err {worst:.2e})")


def cmd_oracle_check(args) -> int:
    n = 100
    agree, worst, secs = oracle_check(n, seed=args.seed or 0)
    msg = f"{agree}/{n} DP-vs-enumeration agreements (max |diff| {worst:.2e}, {secs:.2f}s)"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "oracle_check.txt").write_text(msg + "\n")
    if agree != n:
        raise CliError(msg)
    print(msg)
    return 0


def _summary(report: dict) -> str:
    keys = ("ter_speech", "ter_crossmodal", "duration_mae", "alignment_within_1", "mm_mse_eval")
    return "  ".join(f"{k}={report[k]:.4f}" for k in keys)


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "eval": cmd_eval,
    "align": cmd_align,
    "gradcheck": cmd_gradcheck,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modmatch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", help="checkpoint to evaluate, or to resume training from")
        p.add_argument("--stage-override", type=int, choices=(1, 2, 3), help="force a curriculum stage for every step")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # one-line cause on stderr, full detail in a file
        out = Path(args.out or getattr(args, "resolved_out", None) or Path.cwd())
        detail = out / ERROR_FILE
        try:
            out.mkdir(parents=True, exist_ok=True)
            detail.write_text(traceback.format_exc())
        except OSError:
            detail = None
        cause = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {cause}" + (f" (details: {detail})" if detail else ""), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
