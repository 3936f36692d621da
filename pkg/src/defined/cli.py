"""Command-line entry point: ``defined train | eval | repro``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from .checkpoint import ConfigMismatch, CorruptCheckpoint, VersionMismatch, file_digest, load_checkpoint
from .config import ConfigError, ExperimentConfig, config_hash, load_experiment, parse_experiment
from .evaluation import EvalReport, emit_report, gain, run_arms
from .training import TrainingAborted, train

log = logging.getLogger("defined")

PANELS = ("fig4a", "fig4b", "fig4c", "fig4d", "fig4e", "fig4f")
ARMS = ("icl", "df", "mmse", "mmse_df", "csi")

# CI-scale overrides applied by ``repro --smoke``
SMOKE = {
    "train": {"batch_size": 32, "pretrain_steps": 300, "finetune_steps": 50, "warmup_steps": 30, "lr": 1e-3},
    "eval": {"n_prompts": 2000},
}


class UsageError(Exception):
    pass


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    if getattr(args, "out_dir", None):
        return Path(args.out_dir)
    if os.environ.get("DEFINED_OUT_DIR"):
        return Path(os.environ["DEFINED_OUT_DIR"]) / cfg.experiment_id
    if cfg.out_dir:
        return Path(cfg.out_dir)
    return Path("runs") / cfg.experiment_id


def _apply_overrides(cfg: ExperimentConfig, args, extra: dict | None = None) -> ExperimentConfig:
    data = cfg.model_dump(mode="json")
    for section, values in (extra or {}).items():
        data[section].update(values)
    seed = getattr(args, "seed_override", None)
    if seed is not None:
        data["sim"]["seed"] = seed
        data["train"]["seed"] = seed
        data["eval"]["seed"] = seed + 1
    return parse_experiment(data)


def bundled_config(panel: str) -> ExperimentConfig:
    if panel not in PANELS:
        raise UsageError(f"unknown panel {panel!r}; choose from {', '.join(PANELS)}")
    text = resources.files("defined.configs").joinpath(f"{panel}.json").read_text()
    return parse_experiment(json.loads(text))


def _train(cfg: ExperimentConfig, out: Path):
    tr = cfg.train
    if tr.checkpoint_dir is None:
        tr = tr.model_copy(update={"checkpoint_dir": str(out / "checkpoints")})
    ckpt = train(cfg.sim, cfg.model, tr, loss_log=out / "loss.csv")
    return ckpt, Path(tr.checkpoint_dir)


def _loss_summary(path: Path) -> str:
    rows = path.read_text().splitlines()[1:]
    if not rows:
        return "no training steps run"
    first, last = rows[0].split(","), rows[-1].split(",")
    return f"{len(rows)} steps, loss {float(first[2]):.4f} -> {float(last[2]):.4f}"


def cmd_train(args) -> Path:
    cfg = _apply_overrides(load_experiment(args.config), args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    _, ckpt_dir = _train(cfg, out)
    print(f"[{cfg.experiment_id}] {_loss_summary(out / 'loss.csv')}")
    print(f"checkpoint: {ckpt_dir / 'final.ckpt'}")
    return ckpt_dir / "final.ckpt"


def _parse_arms(text: str) -> list[str]:
    arms = [a.strip() for a in text.split(",") if a.strip()]
    bad = [a for a in arms if a not in ARMS]
    if bad or not arms:
        raise UsageError(f"unknown arm(s) {bad}; choose from {', '.join(ARMS)}")
    return arms


def _gains(curves, k: int) -> dict[str, float]:
    out = {}
    for c in curves:
        if c.arm.startswith(("mmse_p", "csi")):
            continue
        try:
            out[c.arm] = gain(c, k)
        except (ZeroDivisionError, KeyError):
            out[c.arm] = None
    return out


def _report(cfg, curves, k, meta) -> EvalReport:
    visible = [c.visible() for c in curves]
    meta = {
        "config_hash": config_hash(cfg.sim, cfg.model, cfg.train, cfg.eval),
        "n_prompts": cfg.eval.n_prompts,
        "eval_seed": cfg.eval.seed,
        "k_pilots": k,
        "frame_digest": curves[0].frame_digest,
        **meta,
    }
    return EvalReport(cfg.experiment_id, cfg.eval_sim().model_dump(mode="json"), visible, _gains(visible, k), meta)


def cmd_eval(args) -> tuple[Path, Path]:
    cfg = _apply_overrides(load_experiment(args.config), args)
    arms = _parse_arms(args.arms) if args.arms else list(cfg.eval.arms)
    needs_model = any(a in ("icl", "df") for a in arms)
    model, meta = None, {"workers": args.workers}
    if needs_model:
        if not args.checkpoint:
            raise UsageError("arms icl/df need --checkpoint")
        model = load_checkpoint(args.checkpoint, expect_model=cfg.model).transformer()
        meta["checkpoint"] = str(args.checkpoint)
        meta["checkpoint_hash"] = file_digest(args.checkpoint)
    k = cfg.eval.k_pilots
    tasks, labels = [], []
    for a in arms:
        tasks.append((a, model, k))
        labels.append({"icl": "icl", "df": f"df_p{k}", "mmse": f"mmse_p{k}", "mmse_df": f"mmse_df_p{k}", "csi": "csi"}[a])
    ev = cfg.eval
    curves = run_arms(tasks, cfg.eval_sim(), ev.n_prompts, ev.chunk_size, args.workers, ev.vector_errors, labels)
    paths = emit_report(_report(cfg, curves, k, meta), _out_dir(args, cfg))
    print(f"report: {paths[0]} {paths[1]}")
    return paths


def cmd_repro(args) -> tuple[Path, Path]:
    cfg = _apply_overrides(bundled_config(args.panel), args, SMOKE if args.smoke else None)
    if args.smoke:
        cfg = parse_experiment({**cfg.model_dump(mode="json"), "experiment_id": cfg.experiment_id + "_smoke"})
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    defined_ckpt, ckpt_dir = _train(cfg, out)
    print(f"[{cfg.experiment_id}] {_loss_summary(out / 'loss.csv')}")
    pre = ckpt_dir / "pretrained.ckpt"
    icl_model = load_checkpoint(pre).transformer() if pre.exists() else defined_ckpt.transformer()
    model = defined_ckpt.transformer()
    k, T = cfg.eval.k_pilots, cfg.sim.T
    tasks = [
        ("icl", icl_model, k),
        ("df", icl_model, k),
        ("icl", model, k),
        ("df", model, k),
        ("mmse", None, k),
        ("mmse", None, T - 1),
        ("mmse_df", None, k),
        ("csi", None, k),
    ]
    labels = ["icl_icl", f"icl_df_p{k}", "defined_icl", f"defined_df_p{k}", f"mmse_p{k}", f"mmse_p{T - 1}", f"mmse_df_p{k}", "csi"]
    ev = cfg.eval
    curves = run_arms(tasks, cfg.eval_sim(), ev.n_prompts, ev.chunk_size, args.workers, ev.vector_errors, labels)
    meta = {"workers": args.workers, "panel": args.panel, "smoke": bool(args.smoke), "checkpoint_hash": file_digest(ckpt_dir / "final.ckpt")}
    report = _report(cfg, curves, k, meta)
    report.gains["gain_DF"] = report.gains.get(f"defined_df_p{k}")
    report.gains["gain_ICL"] = report.gains.get("icl_icl")
    paths = emit_report(report, out)
    print(f"gain_DF={report.gains['gain_DF']} gain_ICL={report.gains['gain_ICL']}")
    print(f"report: {paths[0]} {paths[1]}")
    return paths


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="defined", description="Decision-feedback in-context symbol detection workbench")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out-dir", help="output directory (fallback: $DEFINED_OUT_DIR/<id>, then config)")
        sp.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        sp.add_argument("--seed-override", type=int)

    t = sub.add_parser("train", help="train a model from an experiment config")
    t.add_argument("--config", required=True)
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate arms on paired frames and write a report")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--arms", help="comma-separated subset of " + ",".join(ARMS) + " (default: eval.arms from the config)")
    common(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("repro", help="train and evaluate one bundled reproduction panel")
    r.add_argument("panel", choices=PANELS)
    r.add_argument("--smoke", action="store_true", help="CI-scale run")
    common(r)
    r.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, UsageError, ConfigMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAborted, CorruptCheckpoint, VersionMismatch, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
