"""Command-line entry point: ``scenediff <subcommand> ...``.

Exit codes: 0 on success, 1 on bad input (flags, files, configs), 2 on
runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import config_hash, load_config, parse_kv, to_plain
from .errors import NonFiniteError, SceneDiffError, ValidationError

log = logging.getLogger("scenediff")

ABLATION_AXES = {
    "diffusion": [
        ("random-noise", {"denoiser": "random-noise"}),
        ("unet-like-mlp", {"denoiser": "unet-like-mlp"}),
        ("dit", {"denoiser": "dit"}),
    ],
    "encoder": [
        ("full", {}),
        ("no-other-agent-former", {"n_other_agent_blocks": 0}),
        ("no-map-former", {"n_map_blocks": 0}),
        ("no-light-former", {"n_light_blocks": 0}),
    ],
    "decoder": [
        ("gru+mlp", {}),
        ("mlp-only", {"use_gru": False}),
        ("gru-only", {"use_mlp": False}),
    ],
    "modality": [
        ("M=1", {"n_modes": 1}),
        ("M=10", {"n_modes": 10}),
        ("M=30", {"n_modes": 30}),
    ],
    "width": [
        ("D=64", {"model_dim": 64}),
        ("D=128", {"model_dim": 128}),
    ],
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def version_string() -> str:
    """``v<version>`` plus ``-g<sha>[-dirty]`` when run from a git checkout."""
    base = f"v{__version__}"
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--abbrev=7"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return base
    desc = res.stdout.strip()
    if res.returncode != 0 or not desc:
        return base
    return desc if desc.startswith("v") else f"{base}-g{desc}"


def write_manifest(out_dir, command, config=None, seed=None, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": version_string(),
        "seed": seed,
        "config_hash": config_hash(config) if config is not None else None,
        "config": to_plain(config) if config is not None else None,
    }
    manifest.update(extra or {})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _existing(path, what="file"):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        out.update(parse_kv(item))
    return out


def _load_train_config(args):
    from .training import TrainConfig

    values = {}
    if args.config:
        values = parse_kv(_existing(args.config, "config").read_text(encoding="utf-8"))
    values.update(_overrides(args.set))
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return TrainConfig.from_dict(values)


def _load_data(path):
    from .scenario_io import load_scenarios

    return load_scenarios(_existing(path, "data"))


def _train_val(scenarios, val_path=None):
    from .scenario_io import split_scenarios

    if val_path:
        return scenarios, _load_data(val_path)
    parts = split_scenarios(scenarios)
    train = parts["train"] or scenarios
    return train, parts["val"] or parts["test"]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    from .scenario_io import CorpusSpec, generate_corpus, save_scenarios

    spec = load_config(CorpusSpec, _existing(args.spec, "spec")) if args.spec else CorpusSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.n is not None:
        spec = replace(spec, n_scenarios=args.n)
    spec.validate()
    corpus = generate_corpus(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scenarios(corpus, out)
    write_manifest(args.out_dir or out.parent, "gen-data", spec, spec.seed, {"output": str(out), "n": len(corpus)})
    print(f"wrote {len(corpus)} scenarios to {out}")


def cmd_train(args):
    from .training import train

    cfg = _load_train_config(args)
    scenarios = _load_data(args.data)
    train_set, val_set = _train_val(scenarios, args.val)
    if args.resume:
        _existing(args.resume, "checkpoint")
    out_dir = Path(args.out_dir)

    def progress(row):
        val = "" if row["val_ade"] is None else f" val_ade={row['val_ade']:.4f}"
        print(f"epoch {row['epoch']} step {row['step']} loss={row['l_total']:.4f}{val}", flush=True)

    write_manifest(out_dir, "train", cfg, cfg.seed, {"data": str(args.data), "n_train": len(train_set), "n_val": len(val_set)})
    result = train(cfg, train_set, val_set, out_dir=out_dir, resume=args.resume, progress=progress)
    print(f"checkpoints in {out_dir} (best val ADE {result.best_val_ade:.4f})")


def _load_checkpoint_model(path):
    from .training import load_model

    model, cfg, _, _ = load_model(_existing(path, "checkpoint"))
    return model, cfg


def cmd_sample(args):
    from .evaluation import write_rollouts
    from .training import predict

    model, cfg = _load_checkpoint_model(args.ckpt)
    scenarios = _load_data(args.data)
    preds = predict(model, scenarios, seed=args.seed)
    out_dir = Path(args.out_dir)
    out = Path(args.out) if args.out else out_dir / "rollouts.ndjson"
    write_rollouts(out, scenarios, preds)
    write_manifest(out_dir, "sample", cfg, args.seed, {"checkpoint": str(args.ckpt), "data": str(args.data), "output": str(out)})
    print(f"wrote rollouts for {len(scenarios)} scenarios to {out}")


def cmd_eval(args):
    from .evaluation import evaluate, write_report

    model, cfg = _load_checkpoint_model(args.ckpt)
    scenarios = _load_data(args.data)
    report = evaluate(model, scenarios, seed=args.seed, n_samples=args.n_samples)
    csv_path, json_path = write_report(report, args.out_dir)
    write_manifest(args.out_dir, "eval", cfg, args.seed, {"checkpoint": str(args.ckpt), "data": str(args.data)})
    agg = report.aggregate
    print(" ".join(f"{k}={agg[k]:.4f}" for k in ("ade", "min_ade", "baseline_ade") if agg[k] is not None))
    print(f"wrote {csv_path} and {json_path}")


def cmd_plot(args):
    import numpy as np

    from .evaluation import read_rollouts
    from .plotting import plot_many

    scenarios = _load_data(args.data)
    preds = None
    if args.rollouts:
        recs = read_rollouts(_existing(args.rollouts, "rollouts"))
        preds = []
        for s in scenarios:
            per_agent = recs.get(s.id, {})
            if not per_agent:
                preds.append(None)
                continue
            trajs, probs = [], []
            for ag in s.predicted_agents:
                entries = sorted(per_agent.get(ag.id, []), key=lambda e: e[0])
                trajs.append(np.stack([e[2] for e in entries]))
                probs.append(np.array([e[1] for e in entries]))
            preds.append((np.stack(trajs), np.stack(probs)))
    paths = plot_many(scenarios, preds, args.out_dir, limit=args.limit)
    write_manifest(args.out_dir, "plot", None, None, {"data": str(args.data), "n_plots": len(paths)})
    print(f"wrote {len(paths)} SVG files to {args.out_dir}")


def run_ablation(axis, base_cfg, train_set, val_set, seeds=(0,), n_samples=0, progress=None):
    """Train and evaluate every arm of ``axis`` for each seed; returns table rows."""
    from .evaluation import evaluate
    from .training import train

    if axis not in ABLATION_AXES:
        raise ValidationError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    if not val_set:
        raise ValidationError("ablation needs a non-empty held-out split")
    rows = []
    for label, overrides in ABLATION_AXES[axis]:
        for seed in seeds:
            cfg = replace(base_cfg, seed=seed, **overrides).validate()
            result = train(cfg, train_set)
            agg = evaluate(result.model, val_set, seed=seed, n_samples=n_samples).aggregate
            row = {"axis": axis, "arm": label, "seed": seed, "ade": agg["ade"], "min_ade": agg["min_ade"],
                   "baseline_ade": agg["baseline_ade"], "nll": agg["nll"]}
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


def format_table(rows):
    cols = ["arm", "seed", "ade", "min_ade", "baseline_ade", "nll"]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        cells = [r[c] if not isinstance(r[c], float) else f"{r[c]:.4f}" for c in cols]
        lines.append("| " + " | ".join("" if c is None else str(c) for c in cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    import csv

    cfg = _load_train_config(args)
    scenarios = _load_data(args.data)
    train_set, val_set = _train_val(scenarios, args.val)
    seeds = [int(s) for s in args.seeds.split(",")]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(args.axis, cfg, train_set, val_set, seeds, args.n_samples,
                        progress=lambda r: print(f"{r['arm']} seed={r['seed']} ade={r['ade']:.4f}", flush=True))
    with open(out_dir / f"ablation_{args.axis}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    table = format_table(rows)
    (out_dir / f"ablation_{args.axis}.md").write_text(table)
    write_manifest(out_dir, "ablate", cfg, cfg.seed, {"axis": args.axis, "seeds": seeds, "data": str(args.data)})
    print(table, end="")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scenediff", description="Diffusion-based multi-agent scene generation.")
    p.add_argument("--version", action="version", version=f"scenediff {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic scenario corpus")
    g.add_argument("--spec", help="corpus spec file (key = value)")
    g.add_argument("--out", required=True, help="output .ndjson path")
    g.add_argument("--seed", type=int)
    g.add_argument("--n", type=int, help="override n_scenarios")
    g.add_argument("--out-dir", help="where manifest.json goes (default: next to --out)")
    g.set_defaults(func=cmd_gen_data)

    def train_flags(q):
        q.add_argument("--config", help="training config file (key = value)")
        q.add_argument("--data", required=True, help="scenario .ndjson")
        q.add_argument("--val", help="held-out scenario .ndjson (default: hash split of --data)")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        q.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train a model")
    train_flags(t)
    t.add_argument("--out-dir", default="runs/train")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="write rollouts for a scenario file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="rollout .ndjson (default: <out-dir>/rollouts.ndjson)")
    s.add_argument("--out-dir", default="runs/sample")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--n-samples", type=int, default=32, help="sampled rollouts per agent for the NLL")
    e.add_argument("--out-dir", default="runs/eval")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="render scenarios (and rollouts) to SVG")
    pl.add_argument("--data", required=True)
    pl.add_argument("--rollouts")
    pl.add_argument("--limit", type=int)
    pl.add_argument("--out-dir", default="runs/plots")
    pl.set_defaults(func=cmd_plot)

    a = sub.add_parser("ablate", help="train and compare the arms of one ablation axis")
    train_flags(a)
    a.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    a.add_argument("--seeds", default="0", help="comma-separated seeds")
    a.add_argument("--n-samples", type=int, default=0)
    a.add_argument("--out-dir", default="runs/ablate")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        import torch

        torch.set_num_threads(1)
        args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except (SceneDiffError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
