"""Command-line entry points: extract, train, eval, rollout-nmse, probe, ablate."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, morphfeat, robodesc
from . import tensor as T
from .arn import UnknownId
from .env import make_cohort
from .train import ABLATIONS, RunConfig, Trainer
from .wm import NaNLoss

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.qwm"
ABLATION_COLUMNS = ("ablation", "seed", "env_steps", "mean_normalized_return",
                    "interpolated_length", "extrapolated_length", "max_reward_loss_share",
                    "max_reward_loss_id")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _materialize(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "ablation", None):
        cfg = cfg.with_ablation(args.ablation)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, out=args.out)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    return out


def _trainer(cfg: RunConfig, checkpoint) -> Trainer:
    tr = Trainer(cfg)
    if checkpoint:
        tr.load(checkpoint)
    return tr


# commands ---------------------------------------------------------------------------


def cmd_extract(args) -> int:
    descs = [robodesc.load_robot_description(p) for p in args.paths]
    names = [d.name for d in descs]
    vectors = [morphfeat.extract_morphology(d) for d in descs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    morphfeat.write_features_csv(out / "features.csv", names, [v.as_array() for v in vectors])
    if len(descs) < 2:
        return EXIT_OK
    held = set(args.held_out or [])
    unknown = held - set(names)
    if unknown:
        raise UnknownId(f"held-out robots not among inputs: {sorted(unknown)}")
    fit = [v for n, v in zip(names, vectors) if n not in held]
    stats = morphfeat.fit_cohort(fit)
    morphfeat.write_features_csv(out / "normalized.csv", names,
                                 [morphfeat.normalize(v, stats).mu for v in vectors])
    morphfeat.write_distance_csv(out / "distances.csv", names,
                                 morphfeat.zscore_distance_matrix(vectors, stats))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _materialize(args)
    out = _out_dir(cfg)
    tr = _trainer(cfg, args.checkpoint)
    resumed = bool(args.checkpoint)
    tr.run()
    tr.save(out / CHECKPOINT_NAME)
    tr.write_logs(out, append=resumed and (out / "wm_loss.csv").exists())
    if tr.eval_rows:
        print(json.dumps(tr.eval_rows[-1], sort_keys=True))
    return EXIT_OK


def _require_checkpoint(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(args.checkpoint)


def cmd_eval(args) -> int:
    _require_checkpoint(args)
    cfg = _materialize(args)
    out = _out_dir(cfg)
    tr = _trainer(cfg, args.checkpoint)
    if args.morphology_id is None:
        result = tr.evaluate_training()
    else:
        result = {"morphology_id": args.morphology_id,
                  **tr.evaluate_morphology(args.morphology_id)}
    (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def _analysis_env(tr: Trainer, slots: int, include_held_out: bool, seed_offset: int):
    spec = list(tr.cohort.training)
    ids = list(tr.ids)
    if include_held_out:
        for role in tr.config.held_out:
            if role in tr.cohort.held_out:
                spec.append(tr.cohort.held_out[role])
                ids.append(tr.cohort.index(role))
    return make_cohort(spec, slots, tr.env_cfg, tr.stats, ids=ids,
                       seed=tr.eval_seed + seed_offset)


def cmd_rollout_nmse(args) -> int:
    _require_checkpoint(args)
    cfg = _materialize(args)
    out = _out_dir(cfg)
    tr = _trainer(cfg, args.checkpoint)
    env = _analysis_env(tr, cfg.nmse_trajectories, args.include_held_out, 11)
    curves = analysis.rollout_nmse(tr.wm, tr.agent.actor, env, cfg.nmse_context,
                                   cfg.nmse_horizon, cfg.nmse_trajectories,
                                   np.random.default_rng(tr.eval_seed + 12))
    analysis.write_nmse_csv(out / "nmse_curve.csv", curves)
    print(json.dumps({str(k): v for k, v in analysis.summarize(curves).items()}))
    return EXIT_OK


def cmd_probe(args) -> int:
    _require_checkpoint(args)
    cfg = _materialize(args)
    out = _out_dir(cfg)
    tr = _trainer(cfg, args.checkpoint)
    env = _analysis_env(tr, cfg.probe_trajectories, False, 21)
    ds = analysis.collect_latents(tr.wm, tr.agent.actor, env, cfg.probe_trajectories,
                                  cfg.probe_steps, np.random.default_rng(tr.eval_seed + 22))
    report = analysis.probe_report(ds)
    analysis.write_probe_outputs(out, ds, report)
    print(json.dumps({k: v for k, v in report.items() if not k.startswith("_")},
                     sort_keys=True))
    return EXIT_OK


def ablation_row(name: str, tr: Trainer) -> dict:
    train_eval = tr.evaluate_training()
    row = {"ablation": name, "seed": tr.config.seed, "env_steps": tr.env_steps,
           "mean_normalized_return": train_eval["mean_normalized_return"]}
    for role in ("interpolated", "extrapolated"):
        if role in tr.cohort.held_out:
            row[f"{role}_length"] = tr.evaluate_morphology(tr.cohort.index(role))["length"]
        else:
            row[f"{role}_length"] = float("nan")
    shares = tr.reward_loss_shares()
    top = max(shares, key=shares.get)
    row["max_reward_loss_share"] = shares[top]
    row["max_reward_loss_id"] = top
    return row


def cmd_ablate(args) -> int:
    base = _materialize(argparse.Namespace(config=args.config, seed=args.seed, out=args.out,
                                           ablation=None))
    names = args.ablation.split(",") if args.ablation else list(ABLATIONS)
    bad = [n for n in names if n not in ABLATIONS]
    if bad:
        raise UsageError(f"unknown ablation(s) {bad}; choose from {sorted(ABLATIONS)}")
    out = _out_dir(base)
    rows = []
    for name in names:
        cfg = replace(base.with_ablation(name), out=str(out / name))
        run_out = _out_dir(cfg)
        tr = Trainer(cfg)
        tr.run()
        tr.save(run_out / CHECKPOINT_NAME)
        tr.write_logs(run_out)
        rows.append(ablation_row(name, tr))
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return EXIT_OK


# parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qwm", description=__doc__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    ex = sub.add_parser("extract", help="morphology features from robot description files")
    ex.add_argument("paths", nargs="+")
    ex.add_argument("--out", default=".")
    ex.add_argument("--held-out", action="append",
                    help="robot name excluded from the normalization statistics")
    ex.set_defaults(func=cmd_extract)

    def run_args(sp, checkpoint=True, morph=False):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--ablation", choices=sorted(ABLATIONS))
        if checkpoint:
            sp.add_argument("--checkpoint")
        if morph:
            sp.add_argument("--morphology-id", type=int)

    tr = sub.add_parser("train", help="train world model and agent")
    run_args(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a frozen checkpoint")
    run_args(ev, morph=True)
    ev.set_defaults(func=cmd_eval)

    nm = sub.add_parser("rollout-nmse", help="open-loop prediction error curves")
    run_args(nm)
    nm.add_argument("--include-held-out", action="store_true")
    nm.set_defaults(func=cmd_rollout_nmse)

    pr = sub.add_parser("probe", help="latent separation metrics for h and z")
    run_args(pr)
    pr.set_defaults(func=cmd_probe)

    ab = sub.add_parser("ablate", help="train each ablation and compare")
    ab.add_argument("--config")
    ab.add_argument("--seed", type=int)
    ab.add_argument("--out")
    ab.add_argument("--ablation", help="comma-separated subset of ablation names")
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("a command is required: " + ", ".join(
                ["extract", "train", "eval", "rollout-nmse", "probe", "ablate"]))
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NaNLoss, T.NonFiniteValue, FloatingPointError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError, KeyError, T.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
