"""Command-line surface: reproducible runs from flat key=value configs.

Subcommands: train, eval, gradcheck, approx-verify, lambda-search,
make-synth.  Every subcommand honors --seed (omitted = 0; wall-clock
entropy is never used).  MA3_RUN_DIR sets the output root for runs.

Exit codes: 0 success, 1 check failed (approx-verify ratios), 2 bad
configuration or usage, 3 training aborted on a non-finite loss, 4
incompatible checkpoint, 5 gradient check over tolerance.

Config files are flat `key = value` lines ('#' comments); CLI flags
override file values; unknown keys are hard errors because silent
typo-tolerance destroys reproducibility.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    ClassDataset,
    SplitSpec,
    export_image_tree,
    load_image_directory,
    make_splits,
    make_synthetic,
)
from .errors import CheckpointVersionError, ConfigError, NonFiniteLossError
from .geometry import REGIME_LIMIT, affine_approx_report
from .gradcheck import TOLERANCE, run_suite
from .nn import load_checkpoint, save_checkpoint
from .trainer import (
    MODES,
    TrainConfig,
    evaluate,
    lambda_search,
    metrics_json_line,
    run_training,
    sample_eval_episodes,
)

CONFIG_SPEC = {
    # dataset
    "dataset": (str, "synthetic"),
    "image_size": (int, 16),
    "invert": (bool, True),
    "rotate_classes": (bool, False),
    "synth_classes": (int, 85),
    "synth_per_class": (int, 20),
    "train_classes": (int, 50),
    "val_classes": (int, 15),
    "test_classes": (int, 20),
    "data_seed": (int, 0),
    "run_name": (str, ""),
    # training
    "n_way": (int, 5),
    "k_shot": (int, 1),
    "q_query": (int, 5),
    "episodes": (int, 1000),
    "eval_every": (int, 0),
    "val_episodes": (int, 200),
    "lambda": (float, 1.0),
    "dropout_rate": (float, 0.5),
    "theta0": (float, math.pi),
    "eps_s": (float, 0.1),
    "trans_frac": (float, 0.1),
    "lr_cls": (float, 1e-3),
    "lr_adv": (float, 1e-3),
    "lr_halflife": (int, 2000),
    "blocks": (int, 2),
    "filters": (int, 32),
    "h_dim": (int, 64),
    "adv_filters": (int, 16),
    "adversary_form": (str, "pose"),
    "delta_max": (float, 0.2),
    "head": (str, "euclid"),
    "cosine_tau": (float, 10.0),
    "seed": (int, 0),
    "precision": (str, "float64"),
}

_BOOL_WORDS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _parse_value(key: str, raw: str):
    typ, _ = CONFIG_SPEC[key]
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(raw)
            return _BOOL_WORDS[raw.lower()]
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for config key {key!r}: {raw!r}") from exc


def load_config(path=None, sets=(), flag_overrides=None) -> dict:
    """Resolve defaults <- file <- --set pairs <- dedicated flags."""
    cfg = {k: d for k, (_, d) in CONFIG_SPEC.items()}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        for lineno, line in enumerate(p.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{p}:{lineno}: expected `key = value`, got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_SPEC:
                raise ConfigError(f"{p}:{lineno}: unknown config key: {key}")
            cfg[key] = _parse_value(key, raw)
    for item in sets or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in CONFIG_SPEC:
            raise ConfigError(f"unknown config key: {key}")
        cfg[key] = _parse_value(key, raw)
    for key, value in (flag_overrides or {}).items():
        if value is not None:
            cfg[key] = value
    return cfg


def to_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        n_way=cfg["n_way"],
        k_shot=cfg["k_shot"],
        q_query=cfg["q_query"],
        episodes=cfg["episodes"],
        eval_every=cfg["eval_every"],
        val_episodes=cfg["val_episodes"],
        lam=cfg["lambda"],
        dropout_rate=cfg["dropout_rate"],
        theta0=cfg["theta0"],
        eps_s=cfg["eps_s"],
        trans_frac=cfg["trans_frac"],
        lr_cls=cfg["lr_cls"],
        lr_adv=cfg["lr_adv"],
        lr_halflife=cfg["lr_halflife"],
        blocks=cfg["blocks"],
        filters=cfg["filters"],
        h_dim=cfg["h_dim"],
        adv_filters=cfg["adv_filters"],
        adversary_form=cfg["adversary_form"],
        delta_max=cfg["delta_max"],
        head=cfg["head"],
        cosine_tau=cfg["cosine_tau"],
        seed=cfg["seed"],
        precision=cfg["precision"],
    )


def resolve_dataset(cfg: dict):
    """Build (dataset, splits, descriptor) from the dataset config keys."""
    size = cfg["image_size"]
    if cfg["dataset"] == "synthetic":
        ds = make_synthetic(cfg["synth_classes"], cfg["synth_per_class"], size, seed=cfg["data_seed"])
        splits = make_splits(
            ds.n_classes, cfg["train_classes"], cfg["val_classes"], cfg["test_classes"],
            seed=cfg["data_seed"],
        )
        desc = {"kind": "synthetic", "source": ds.source}
        return ds, splits, desc

    root = Path(cfg["dataset"])
    bg_dir, ev_dir = root / "images_background", root / "images_evaluation"
    if bg_dir.is_dir() and ev_dir.is_dir():
        bg = load_image_directory(bg_dir, (size, size), invert=cfg["invert"],
                                  rotate_classes=cfg["rotate_classes"])
        ev = load_image_directory(ev_dir, (size, size), invert=cfg["invert"],
                                  rotate_classes=cfg["rotate_classes"])
        classes = tuple(
            [(f"background/{cid}", imgs) for cid, imgs in bg.classes]
            + [(f"evaluation/{cid}", imgs) for cid, imgs in ev.classes]
        )
        ds = ClassDataset(classes=classes, source=str(root), image_hw=(size, size))
        n_bg = len(bg.classes)
        perm = np.random.default_rng(np.random.SeedSequence([cfg["data_seed"], 0xB6])).permutation(n_bg)
        n_val = min(cfg["val_classes"], n_bg - 1)
        val = tuple(int(i) for i in perm[:n_val])
        train = tuple(int(i) for i in perm[n_val:])
        test = tuple(range(n_bg, n_bg + len(ev.classes)))
        splits = SplitSpec(train=train, val=val, test=test, seed=cfg["data_seed"])
        desc = {"kind": "background+evaluation", "source": str(root),
                "train": len(train), "val": len(val), "test": len(test)}
        return ds, splits, desc

    ds = load_image_directory(root, (size, size), invert=cfg["invert"],
                              rotate_classes=cfg["rotate_classes"])
    splits = make_splits(
        ds.n_classes, cfg["train_classes"], cfg["val_classes"], cfg["test_classes"],
        seed=cfg["data_seed"],
    )
    desc = {"kind": "directory", "source": str(root)}
    return ds, splits, desc


def run_root(args) -> Path:
    if getattr(args, "run_dir", None):
        return Path(args.run_dir)
    return Path(os.environ.get("MA3_RUN_DIR", "runs"))


def config_hash(cfg: dict, mode: str) -> str:
    blob = json.dumps({"config": cfg, "mode": mode}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set, {"lambda": args.lam, "seed": args.seed,
                                              "episodes": args.episodes})
    mode = args.mode
    tc = to_train_config(cfg)
    dataset, splits, desc = resolve_dataset(cfg)
    run_name = cfg["run_name"] or f"{mode}-seed{tc.seed}"
    out = run_root(args) / run_name
    out.mkdir(parents=True, exist_ok=True)

    manifest = {
        "run_name": run_name,
        "mode": mode,
        "config": cfg,
        "dataset": desc,
        "content_hash": config_hash(cfg, mode),
        "tool_version": __version__,
        "started_at": datetime.now(timezone.utc).isoformat(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    metrics_path = out / "metrics.jsonl"
    timing_path = out / "timings.txt"
    ckpt_extra = {"head": tc.head, "cosine_tau": tc.cosine_tau, "mode": mode,
                  "n_way": tc.n_way, "k_shot": tc.k_shot, "q_query": tc.q_query}

    with open(metrics_path, "w") as mfh, open(timing_path, "w") as tfh:

        def on_record(rec):
            mfh.write(metrics_json_line(rec) + "\n")
            tfh.write(f"{rec.episode} {rec.wall_ms:.3f}\n")

        def on_checkpoint(trainer, episode):
            nets = {"classifier": trainer.cls_net}
            if trainer.adv_net is not None:
                nets["adversary"] = trainer.adv_net
            save_checkpoint(out / f"{run_name}-{episode}.ckpt", nets, extra=ckpt_extra)

        try:
            trainer, records = run_training(
                tc, dataset, splits, mode, on_checkpoint=on_checkpoint, on_record=on_record
            )
        except NonFiniteLossError as exc:
            mfh.write(json.dumps({"episode": exc.episode, "error": "non_finite_loss"},
                                 sort_keys=True, separators=(",", ":")) + "\n")
            print(f"aborted: {exc}", file=sys.stderr)
            return 3

    last_val = next((r.val_acc for r in reversed(records) if r.val_acc is not None), None)
    print(f"run {run_name}: {tc.episodes} episodes, final loss {records[-1].loss:.4f}"
          + (f", val acc {last_val:.4f}" if last_val is not None else ""))
    print(f"metrics: {metrics_path}")
    return 0


# ----------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    if args.episodes <= 0:
        raise ConfigError(f"episodes must be > 0, got {args.episodes}")
    cfg = load_config(args.config, args.set, {"seed": args.seed})
    meta, nets = load_checkpoint(args.checkpoint)
    if "classifier" not in nets:
        raise CheckpointVersionError(f"{args.checkpoint}: no classifier net in container")
    cls_net = nets["classifier"]
    dataset, splits, _ = resolve_dataset(cfg)
    if tuple(dataset.image_hw) != tuple(cls_net.in_hw):
        raise ConfigError(
            f"dataset images {dataset.image_hw} do not match checkpoint input {cls_net.in_hw}"
        )
    extra = meta.get("extra", {})
    tc = to_train_config(cfg)
    episodes = sample_eval_episodes(dataset, splits.test, tc, args.episodes, seed=cfg["seed"])
    mean, half = evaluate(cls_net, episodes,
                          head=extra.get("head", tc.head),
                          tau=extra.get("cosine_tau", tc.cosine_tau))
    print(f"accuracy {mean:.4f}±{half:.4f} {args.episodes} {cfg['seed']}")
    return 0


# ------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    if not args.preset:
        raise ConfigError("empty gradcheck preset")
    results = run_suite(args.preset, seed=args.seed)
    worst_component = max(results, key=lambda k: results[k])
    for component, err in results.items():
        status = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{component:8s} max_rel_err {err:.3e}  [{status}]")
    if results[worst_component] > TOLERANCE:
        print(f"gradient check failed: {worst_component} "
              f"({results[worst_component]:.3e} > {TOLERANCE:g})", file=sys.stderr)
        return 5
    return 0


# ---------------------------------------------------------- approx-verify


def cmd_approx_verify(args) -> int:
    try:
        magnitudes = [float(s) for s in args.magnitudes.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad magnitudes list: {args.magnitudes!r}") from exc
    if not magnitudes:
        raise ConfigError("need at least one magnitude")
    for m in magnitudes:
        if m < 0 or m > REGIME_LIMIT:
            raise ConfigError(f"magnitude {m} outside validity regime [0, {REGIME_LIMIT}]")
    rows = affine_approx_report(magnitudes, args.points, args.z0, args.seed)
    print(f"{'magnitude':>10s} {'max_residual':>14s} {'ratio':>8s}")
    ok = True
    for row in rows:
        ratio = f"{row['ratio']:.3f}" if row["ratio"] is not None else "-"
        print(f"{row['magnitude']:>10.4f} {row['residual']:>14.6e} {ratio:>8s}")
        if row["doubling"] and row["ratio"] is not None and not 2.5 <= row["ratio"] <= 6.0:
            ok = False
    if not ok:
        print("residual ratios outside [2.5, 6] for doubling steps", file=sys.stderr)
    return 0 if ok else 1


# ---------------------------------------------------------- lambda-search


def cmd_lambda_search(args) -> int:
    cfg = load_config(args.config, args.set, {"seed": args.seed})
    grid = [float(s) for s in args.grid.split(",")] if args.grid else (1e-3, 1e-2, 1e-1, 1.0, 10.0)
    dataset, splits, _ = resolve_dataset(cfg)
    tc = to_train_config(cfg)
    best, rows = lambda_search(tc, dataset, splits, coarse_grid=tuple(grid))
    print(f"{'stage':>5s} {'lambda':>12s} {'val_acc':>8s}")
    for row in rows:
        print(f"{row['stage']:>5d} {row['lam']:>12.6g} {row['val_acc']:>8.4f}")
    print(f"best lambda: {best:g}")
    return 0


# ------------------------------------------------------------- make-synth


def cmd_make_synth(args) -> int:
    ds = make_synthetic(args.classes, args.per_class, args.size, seed=args.seed)
    n = export_image_tree(ds, args.out)
    print(f"wrote {n} images ({args.classes} classes) to {args.out}")
    return 0


# ----------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ma3", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_opts(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")

    p = sub.add_parser("train", help="run one training mode")
    p.add_argument("--mode", required=True, choices=MODES)
    add_config_opts(p)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--run-dir", help="output root (default $MA3_RUN_DIR or ./runs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("checkpoint")
    add_config_opts(p)
    p.add_argument("--episodes", type=int, default=600)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--preset", default="default")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("approx-verify", help="second-order residual scaling check")
    p.add_argument("--magnitudes", default="0.01,0.02,0.04")
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--z0", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_approx_verify)

    p = sub.add_parser("lambda-search", help="two-stage grid search for lambda")
    add_config_opts(p)
    p.add_argument("--grid", help="comma-separated coarse grid")
    p.set_defaults(func=cmd_lambda_search)

    p = sub.add_parser("make-synth", help="export a synthetic dataset as PNG tree")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CheckpointVersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except NonFiniteLossError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    raise SystemExit(main())
