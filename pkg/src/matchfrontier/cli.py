"""Experiment runner CLI: data generation, training, evaluation, lambda
sweeps, baselines, audits, and decomposition.

Subcommands: gen, train, eval, sweep, baseline, audit, decompose.
Config files are flat ``key = value`` text with ``#`` comments; unknown
keys are hard errors.  The MATCH_SEED environment variable overrides the
config seed.  Exit codes: 0 success, 1 validation, 2 numeric failure,
3 I/O.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import metrics, oracle
from .autodiff import NumericError
from .mechanisms import (MechanismKind, bvn_decompose, format_matching,
                         lift_mechanism)
from .net import (CheckpointError, NetworkDims, NetworkMechanism,
                  NumericOverflowError, load_checkpoint)
from .prefs import (DistributionConfig, DistributionKind, read_profiles,
                    sample_profiles, write_profiles)
from .train import HELDOUT_LANE, TrainConfig, train

EVAL_HEADER = ["label", "lambda", "stv", "rgt", "irv", "welfare", "sim",
               "entropy", "profiles"]

BASELINE_LABELS = ("wda", "fda", "rsd")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config files

_CONFIG_KEYS = {
    "n": int, "m": int, "kind": str, "p_corr": float, "p_trunc": float,
    "seed": int, "lambda": float, "batch_size": int, "iterations": int,
    "base_lr": float, "lr_milestones": str, "weight_decay": float,
    "eval_every": int, "test_size": int, "hidden_layers": int,
    "hidden_units": int, "misreport_cap": int,
}

PRESETS = {
    "paper-uncorrelated": {
        "n": 4, "m": 4, "kind": "uncorrelated", "p_trunc": 0.2,
        "lambda": 0.5, "batch_size": 1024, "iterations": 50_000,
        "base_lr": 0.005, "lr_milestones": "10000,25000",
        "hidden_layers": 4, "hidden_units": 256, "test_size": 204_800,
        "eval_every": 2000,
    },
    "paper-correlated": {
        "n": 4, "m": 4, "kind": "correlated", "p_corr": 0.25, "p_trunc": 0.2,
        "lambda": 0.5, "batch_size": 1024, "iterations": 50_000,
        "base_lr": 0.002, "lr_milestones": "10000,25000",
        "hidden_layers": 4, "hidden_units": 256, "test_size": 204_800,
        "eval_every": 2000,
    },
    "desk": {
        "n": 3, "m": 3, "kind": "uncorrelated", "p_trunc": 0.2,
        "lambda": 0.5, "batch_size": 128, "iterations": 2_000,
        "base_lr": 0.005, "lr_milestones": "10000,25000",
        "hidden_layers": 4, "hidden_units": 64, "test_size": 2_048,
        "eval_every": 500,
    },
}

_DEFAULTS = {
    "n": 4, "m": 4, "kind": "uncorrelated", "p_corr": 0.0, "p_trunc": 0.2,
    "seed": 0, "lambda": 0.5, "batch_size": 1024, "iterations": 50_000,
    "base_lr": 0.005, "lr_milestones": "10000,25000", "weight_decay": 0.01,
    "eval_every": 2000, "test_size": 2048, "hidden_layers": 4,
    "hidden_units": 256, "misreport_cap": 6,
}


def parse_config_file(path) -> dict:
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = key.strip(), value.strip()
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _CONFIG_KEYS[key](value)
            except ValueError as err:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {err}")
    return values


def resolve_settings(args) -> dict:
    settings = dict(_DEFAULTS)
    preset = getattr(args, "preset", None)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        settings.update(PRESETS[preset])
    if getattr(args, "config", None):
        settings.update(parse_config_file(args.config))
    if getattr(args, "lam", None) is not None:
        settings["lambda"] = args.lam
    if getattr(args, "seed", None) is not None:
        settings["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        settings["iterations"] = args.iterations
    if "MATCH_SEED" in os.environ:
        settings["seed"] = int(os.environ["MATCH_SEED"])
    return settings


def dist_from_settings(settings) -> DistributionConfig:
    kind_text = settings["kind"].lower()
    try:
        kind = DistributionKind(kind_text)
    except ValueError:
        raise ConfigError(f"kind must be uncorrelated or correlated, got {kind_text!r}")
    p_corr = settings["p_corr"] if kind is DistributionKind.CORRELATED else 0.0
    return DistributionConfig(kind=kind, n=settings["n"], m=settings["m"],
                              p_corr=p_corr, p_trunc=settings["p_trunc"],
                              seed=settings["seed"])


def train_config_from_settings(settings, checkpoint_path, log_path="") -> TrainConfig:
    dims = NetworkDims(n=settings["n"], m=settings["m"],
                       R=settings["hidden_layers"], J=settings["hidden_units"])
    milestones = tuple(int(x) for x in str(settings["lr_milestones"]).split(",") if x)
    return TrainConfig(lam=settings["lambda"], dims=dims,
                       dist=dist_from_settings(settings),
                       batch_size=settings["batch_size"],
                       iterations=settings["iterations"],
                       base_lr=settings["base_lr"], lr_milestones=milestones,
                       weight_decay=settings["weight_decay"],
                       eval_every=settings["eval_every"],
                       test_size=settings["test_size"],
                       misreport_cap=settings["misreport_cap"],
                       checkpoint_path=checkpoint_path, log_path=log_path)


def load_mechanism(args):
    """Mechanism plus its lambda (None for baselines) from --mechanism or
    --checkpoint."""
    if getattr(args, "mechanism", None):
        label = args.mechanism.lower()
        if label not in BASELINE_LABELS:
            raise ConfigError(f"mechanism must be one of {BASELINE_LABELS}")
        return lift_mechanism(MechanismKind(label)), None
    if getattr(args, "checkpoint", None):
        params, dims, lam, _seed = load_checkpoint(args.checkpoint)
        return NetworkMechanism(params, dims), lam
    raise ConfigError("need --mechanism or --checkpoint")


def fmt(x) -> str:
    return f"{x:.12g}"


def eval_row(label, lam, report) -> list:
    return [label, "" if lam is None else fmt(lam), fmt(report.stv),
            fmt(report.rgt), fmt(report.irv), fmt(report.welfare_per_agent),
            fmt(report.sim), fmt(report.entropy), str(report.profiles_evaluated)]


# ---------------------------------------------------------------------------
# Subcommands

def cmd_gen(args) -> int:
    settings = resolve_settings(args)
    dist = dist_from_settings(settings)
    profiles = sample_profiles(dist, args.count)
    header = (f"profiles kind={dist.kind.value} n={dist.n} m={dist.m} "
              f"p_corr={dist.p_corr} p_trunc={dist.p_trunc} seed={dist.seed} "
              f"count={args.count}")
    write_profiles(args.out, profiles, header=header)

    agents = [(o, dist.m) for p in profiles for o in p.workers] \
        + [(o, dist.n) for p in profiles for o in p.firms]
    if agents:
        truncated = sum(1 for o, _ in agents if o.unacceptable())
        print(f"wrote {len(profiles)} profiles to {args.out}")
        print(f"truncation fraction: {truncated / len(agents):.4f}")
        for side_name, orders in (("worker", [p.workers for p in profiles]),
                                  ("firm", [p.firms for p in profiles])):
            flat = [o for group in orders for o in group]
            counts = {}
            for o in flat:
                counts[o.ranking] = counts.get(o.ranking, 0) + 1
            modal = max(counts.values())
            print(f"{side_name} modal-order fraction: {modal / len(flat):.4f}")
    else:
        print(f"wrote 0 profiles to {args.out}")
    return 0


def cmd_train(args) -> int:
    settings = resolve_settings(args)
    config = train_config_from_settings(settings, args.checkpoint, args.log or "")

    def progress(iteration, loss, stv, rgt):
        print(f"iter {iteration}: loss={loss:.6f} heldout stv={stv:.6f} rgt={rgt:.6f}",
              flush=True)

    result = train(config, progress=progress)
    print(f"done: heldout stv={result.heldout_stv:.6f} rgt={result.heldout_rgt:.6f}")
    print(f"checkpoint: {config.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    mech, lam = load_mechanism(args)
    profiles = read_profiles(args.profiles)
    if not profiles:
        raise ConfigError(f"no profiles in {args.profiles}")
    report = metrics.evaluate(mech, profiles, cap=args.misreport_cap)
    label = args.label or getattr(mech, "label", "mechanism")
    row = eval_row(label, lam, report)
    print(",".join(EVAL_HEADER))
    print(",".join(row))
    if args.out:
        new_file = not os.path.exists(args.out)
        with open(args.out, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new_file:
                writer.writerow(EVAL_HEADER)
            writer.writerow(row)
    return 0


def _sweep_train_one(task):
    lam, settings, ckpt_path = task
    settings = dict(settings, **{"lambda": lam})
    config = train_config_from_settings(settings, ckpt_path)
    # the sweep reports on a shared held-out set afterwards; skip per-run eval
    config = replace(config, test_size=0)
    train(config)
    return ckpt_path


def cmd_sweep(args) -> int:
    settings = resolve_settings(args)
    lambdas = [float(x) for x in args.lambdas.split(",") if x.strip() != ""]
    if any(not 0.0 <= lam <= 1.0 for lam in lambdas):
        raise ConfigError("every lambda must lie in [0, 1]")
    os.makedirs(args.out_dir, exist_ok=True)

    tasks = []
    for lam in lambdas:
        ckpt = os.path.join(args.out_dir, f"lambda_{fmt(lam)}.ckpt")
        if not os.path.exists(ckpt):
            tasks.append((lam, settings, ckpt))
    if tasks:
        if args.parallel > 1:
            with ProcessPoolExecutor(max_workers=args.parallel) as pool:
                list(pool.map(_sweep_train_one, tasks))
        else:
            for task in tasks:
                _sweep_train_one(task)

    dist = dist_from_settings(settings)
    heldout = sample_profiles(dist, settings["test_size"], lane=HELDOUT_LANE)
    cap = settings["misreport_cap"]

    rows = []
    failures = []
    for lam in lambdas:
        ckpt = os.path.join(args.out_dir, f"lambda_{fmt(lam)}.ckpt")
        try:
            params, dims, _, _ = load_checkpoint(ckpt)
            report = metrics.evaluate(NetworkMechanism(params, dims), heldout, cap=cap)
            rows.append(("learned", lam, report))
        except Exception as err:  # keep sweeping; record the failure
            failures.append((lam, err))
            print(f"lambda={lam}: FAILED ({err})", file=sys.stderr)

    baseline_reports = {}
    for label in BASELINE_LABELS:
        report = metrics.evaluate(lift_mechanism(MechanismKind(label)), heldout, cap=cap)
        baseline_reports[label] = report
        rows.append((label, None, report))
    da_best_label = min(("wda", "fda"), key=lambda l: baseline_reports[l].rgt)
    rows.append(("da-best", None, baseline_reports[da_best_label]))

    frontier_csv = os.path.join(args.out_dir, "frontier.csv")
    with open(frontier_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_HEADER)
        for label, lam, report in rows:
            # RSD's reported stability violation includes its IR violation
            if label == "rsd":
                report = replace(report, stv=report.stv + report.irv)
            writer.writerow(eval_row(label, lam, report))
    write_frontier_svg(os.path.join(args.out_dir, "frontier.svg"), rows)
    print(f"wrote {frontier_csv}")
    if failures:
        print(f"{len(failures)} lambda runs failed", file=sys.stderr)
    return 0


def cmd_baseline(args) -> int:
    label = args.mechanism.lower()
    if label not in BASELINE_LABELS:
        raise ConfigError(f"mechanism must be one of {BASELINE_LABELS}")
    mech = lift_mechanism(MechanismKind(label))
    profiles = read_profiles(args.profiles)
    if not profiles:
        raise ConfigError(f"no profiles in {args.profiles}")
    report = metrics.evaluate(mech, profiles, cap=args.misreport_cap)
    print(",".join(EVAL_HEADER))
    print(",".join(eval_row(label, None, report)))
    if args.matchings_out:
        rng = np.random.Generator(np.random.Philox(key=[args.seed or 0, 0xB45E]))
        with open(args.matchings_out, "w") as fh:
            for profile in profiles:
                decomposition = bvn_decompose(mech.evaluate(profile))
                weights = np.array([w for w, _ in decomposition.components])
                pick = rng.choice(len(weights), p=weights / weights.sum())
                fh.write(format_matching(decomposition.components[pick][1]) + "\n")
    return 0


def cmd_audit(args) -> int:
    mech, _ = load_mechanism(args)
    profiles = read_profiles(args.profiles)
    if not profiles:
        raise ConfigError(f"no profiles in {args.profiles}")
    worst = 0.0
    for idx, profile in enumerate(profiles):
        gains = oracle.fosd_audit(mech, profile, cap=args.misreport_cap)
        for agent, gain in gains.items():
            if gain > args.tolerance:
                print(f"profile {idx}: {agent.side.value} {agent.index + 1} "
                      f"FOSD gain {gain:.6g}")
            worst = max(worst, gain)
        decomposition = bvn_decompose(mech.evaluate(profile))
        for weight, matching in decomposition.components:
            for bp in oracle.find_blocking_pairs(matching, profile):
                print(f"profile {idx}: component weight {weight:.4g} "
                      f"{bp.kind.value} (w{bp.worker + 1}, f{bp.firm + 1})")
    print(f"worst FOSD gain: {worst:.6g}")
    return 0 if worst <= args.tolerance else 1


def cmd_decompose(args) -> int:
    mech, _ = load_mechanism(args)
    profiles = read_profiles(args.profiles)
    if not profiles:
        raise ConfigError(f"no profiles in {args.profiles}")
    for profile in profiles:
        decomposition = bvn_decompose(mech.evaluate(profile))
        parts = [f"{fmt(weight)} {format_matching(matching)}"
                 for weight, matching in decomposition.components]
        print(" | ".join(parts))
    return 0


# ---------------------------------------------------------------------------
# SVG frontier plot (self-contained, no external assets)

def write_frontier_svg(path, rows, width=640, height=480) -> None:
    pad = 60
    points = []
    for label, lam, report in rows:
        stv = report.stv + report.irv if label == "rsd" else report.stv
        points.append((label, lam, stv, report.rgt))
    xmax = max(max((p[2] for p in points), default=0.0), 1e-9) * 1.1
    ymax = max(max((p[3] for p in points), default=0.0), 1e-9) * 1.1

    def sx(x):
        return pad + (width - 2 * pad) * x / xmax

    def sy(y):
        return height - pad - (height - 2 * pad) * y / ymax

    buf = io.StringIO()
    buf.write('<?xml version="1.0" encoding="UTF-8"?>\n')
    buf.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
              f'height="{height}" viewBox="0 0 {width} {height}">\n')
    buf.write(f'<rect width="{width}" height="{height}" fill="white"/>\n')
    buf.write(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
              f'y2="{height - pad}" stroke="black"/>\n')
    buf.write(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" '
              f'stroke="black"/>\n')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        x_val, y_val = frac * xmax, frac * ymax
        buf.write(f'<text x="{sx(x_val):.1f}" y="{height - pad + 18}" '
                  f'font-size="10" text-anchor="middle">{x_val:.3g}</text>\n')
        buf.write(f'<text x="{pad - 8}" y="{sy(y_val):.1f}" font-size="10" '
                  f'text-anchor="end">{y_val:.3g}</text>\n')
    buf.write(f'<text x="{width / 2}" y="{height - 14}" font-size="12" '
              f'text-anchor="middle">stability violation</text>\n')
    buf.write(f'<text x="16" y="{height / 2}" font-size="12" text-anchor="middle" '
              f'transform="rotate(-90 16 {height / 2})">regret</text>\n')
    colors = {"learned": "crimson", "wda": "royalblue", "fda": "seagreen",
              "rsd": "darkorange", "da-best": "purple"}
    for label, lam, stv, rgt in points:
        color = colors.get(label, "gray")
        x, y = sx(stv), sy(rgt)
        if label == "learned":
            buf.write(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="4" fill="{color}"/>\n')
            buf.write(f'<text x="{x + 6:.1f}" y="{y - 4:.1f}" font-size="9">'
                      f'&#955;={lam:g}</text>\n')
        else:
            buf.write(f'<rect x="{x - 4:.1f}" y="{y - 4:.1f}" width="8" height="8" '
                      f'fill="{color}"/>\n')
            buf.write(f'<text x="{x + 6:.1f}" y="{y - 4:.1f}" font-size="9">'
                      f'{label}</text>\n')
    buf.write('</svg>\n')
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matchfrontier",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", help="flat key = value config file")
            p.add_argument("--preset", choices=sorted(PRESETS),
                           help="named defaults; config file overrides")
            p.add_argument("--seed", type=int)

    p = sub.add_parser("gen", help="sample preference profiles to a file")
    add_common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one matching network")
    add_common(p)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--checkpoint", default="matching.ckpt")
    p.add_argument("--log", default="")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a mechanism on a profile file")
    p.add_argument("--checkpoint")
    p.add_argument("--mechanism", help="wda | fda | rsd")
    p.add_argument("--profiles", required=True)
    p.add_argument("--out", help="CSV to append the row to")
    p.add_argument("--label")
    p.add_argument("--misreport-cap", type=int, default=6)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/evaluate a lambda sweep + baselines")
    add_common(p)
    p.add_argument("--lambdas", required=True, help="comma-separated lambda list")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("baseline", help="run a classical mechanism")
    p.add_argument("--mechanism", required=True, help="wda | fda | rsd")
    p.add_argument("--profiles", required=True)
    p.add_argument("--matchings-out", help="write realized matchings here")
    p.add_argument("--seed", type=int)
    p.add_argument("--misreport-cap", type=int, default=6)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("audit", help="brute-force FOSD and stability audit")
    p.add_argument("--checkpoint")
    p.add_argument("--mechanism")
    p.add_argument("--profiles", required=True)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--misreport-cap", type=int, default=6)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("decompose", help="BvN-decompose mechanism outputs")
    p.add_argument("--checkpoint")
    p.add_argument("--mechanism")
    p.add_argument("--profiles", required=True)
    p.set_defaults(func=cmd_decompose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (NumericError, NumericOverflowError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
