"""Command-line driver: ``ultra <command> [--config FILE] [--set KEY=VALUE ...]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ckpt_io
from . import experiments as ex
from .config import RunConfig, load_config
from .errors import CheckpointError, ConfigError, ContractError, NonFiniteError, SceneError, UltraError
from .policies import HierarchyConfig

EXIT_CODES = {ConfigError: 2, SceneError: 3, CheckpointError: 4, NonFiniteError: 5, ContractError: 6}
EXIT_IO = 7


def _pairs(items: list[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _config(args) -> RunConfig:
    overrides = _pairs(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.scenes is not None:
        overrides["scene_dir"] = args.scenes
    for key in ("iterations", "transfer_episodes"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    return load_config(args.config, overrides)


def _out(cfg: RunConfig) -> Path:
    ex.echo_config(cfg, cfg.out_dir)
    return Path(cfg.out_dir)


# -- commands ----------------------------------------------------------------------------


def cmd_gen_scenes(cfg: RunConfig, args) -> None:
    splits = ex.generate_splits(cfg)
    manifest = ex.write_splits(splits, cfg.scene_dir)
    ex.echo_config(cfg, cfg.scene_dir)
    total = sum(len(v) for v in splits.values())
    print(f"wrote {total} scenes and {manifest}")


def cmd_meta_train(cfg: RunConfig, args) -> None:
    splits = ex.load_splits(cfg.scene_dir)
    out = _out(cfg)
    state = ex.meta_train(cfg, splits["metatrain"], cfg.seed, out_dir=out)
    print(f"meta-trained {state.iteration} iterations -> {out / 'ultra.ckpt.json'}")


def cmd_transfer(cfg: RunConfig, args) -> None:
    splits = ex.load_splits(cfg.scene_dir)
    out = _out(cfg)
    if args.baseline == "random":
        print("random baseline: nothing to train")
        return
    obs_width = splits["train"][0].obs_width if splits["train"] else 0
    if not splits["train"]:
        raise SceneError("transfer needs training scenes")
    if args.scratch or args.baseline == "scratch":
        method = "scratch"
        result = ex.transfer(cfg, ex.scratch_theta(cfg, obs_width, cfg.seed), splits, cfg.seed, finetune_subs=True)
    elif args.baseline:
        method = args.baseline
        result = ex.run_method(method, cfg, splits, cfg.seed).transfer
        if method == "no_hierarchy":
            cfg = replace(cfg, K=1, N=1)
    else:
        method = "ultra"
        path = args.checkpoint or out / "ultra.ckpt.json"
        theta = ex.load_theta(path, cfg.hierarchy(), obs_width)
        result = ex.transfer(cfg, theta, splits, cfg.seed)
    ckpt_io.save(ex.transfer_checkpoint(result, cfg, cfg.seed, method), out / "transfer.ckpt.json")
    ex.write_csv(out / "curve.csv", ex.CURVE_FIELDS, result.curve)
    print(f"{method}: {cfg.transfer_episodes} episodes -> {out / 'transfer.ckpt.json'}")


def _checkpoint_agent(path):
    ck = ckpt_io.load(path)
    if "master.pi.w" not in ck.params:
        raise CheckpointError(f"{path}: field 'params' has no master network (not a transfer checkpoint)")
    try:
        saved = RunConfig.from_dict({k: v for k, v in ck.config.items() if k != "method"})
    except ConfigError as exc:
        raise CheckpointError(f"{path}: field 'config' {exc}") from exc
    hierarchy = HierarchyConfig(K=saved.K, N=saved.N, hidden=(saved.hidden,))
    return ck.config.get("method", Path(path).stem), ck.group("master"), ck.subpolicies(), hierarchy


def cmd_eval(cfg: RunConfig, args) -> None:
    splits = ex.load_splits(cfg.scene_dir)
    scenes = splits[args.split]
    if not scenes or cfg.eval_episodes < 1:
        raise ContractError(f"empty evaluation roster for split {args.split!r}")
    out = _out(cfg)
    agents = [_checkpoint_agent(p) for p in args.checkpoint]
    methods = args.method or ([] if agents else ["random"])
    seeds = [cfg.seed + i for i in range(args.seeds)]
    reports = []
    for name, master, theta, hierarchy in agents:
        per_seed = [ex.evaluate_hierarchy(cfg, master, theta, scenes, s, name, hierarchy) for s in seeds]
        reports += _with_mean(name, per_seed, seeds)
    for method in methods:
        per_seed = [ex.run_method(method, cfg, splits, s, args.split).report for s in seeds]
        reports += _with_mean(method, per_seed, seeds)
    ex.write_csv(out / f"report_{args.split}.csv", ex.REPORT_FIELDS, ex.report_rows(reports))
    print(ex.format_table(reports))


def _with_mean(name, per_seed, seeds):
    if len(per_seed) == 1:
        return per_seed
    for rep, s in zip(per_seed, seeds):
        rep.method = f"{name}/seed{s}"
    return per_seed + [ex.mean_report(per_seed, f"{name}/mean")]


def cmd_sweep_k(cfg: RunConfig, args) -> None:
    splits = ex.load_splits(cfg.scene_dir)
    out = _out(cfg)
    reports = ex.subpolicy_count_sweep(cfg.k_values(), cfg, splits, cfg.seed, args.split)
    ex.write_csv(out / "sweep_k.csv", ex.REPORT_FIELDS, ex.report_rows(reports))
    print(ex.format_table(reports))


def cmd_trace(cfg: RunConfig, args) -> None:
    splits = ex.load_splits(cfg.scene_dir)
    scenes = splits[args.split]
    if not scenes:
        raise SceneError(f"split {args.split!r} is empty")
    out = _out(cfg)
    ck = ckpt_io.load(args.checkpoint or out / "ultra.ckpt.json")
    theta = ck.subpolicies()
    if not theta:
        raise CheckpointError(f"{args.checkpoint}: field 'params' holds no sub-policies")
    starts = ex.trace_starts(scenes, cfg.seed)
    hierarchy = HierarchyConfig(K=len(theta), N=cfg.N, hidden=(cfg.hidden,))
    rows = []
    for k, params in enumerate(theta):
        rows += ex.visualize_subpolicy(params, k, scenes, starts, cfg.trace_horizon, hierarchy)
    ex.write_csv(out / "traces.csv", ex.TRACE_FIELDS, rows)
    print(f"{len(rows)} trace rows -> {out / 'traces.csv'}")


# -- parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or key=value file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (config key out_dir)")
    common.add_argument("--scenes", help="scene directory (config key scene_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ultra", description="Meta-learned hierarchical navigation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", parents=[common], help="write the scene splits and manifest")
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("meta-train", parents=[common], help="adversarial meta-training of the sub-policies")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("transfer", parents=[common], help="train a semantic master")
    p.add_argument("--checkpoint", help="meta-training checkpoint (default OUT/ultra.ckpt.json)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--scratch", action="store_true", help="train master and sub-policies from random init")
    group.add_argument("--baseline", choices=ex.BASELINES)
    p.add_argument("--transfer-episodes", dest="transfer_episodes", type=int)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", parents=[common], help="success and SPL on a split")
    p.add_argument("--checkpoint", action="append", default=[], help="transfer checkpoint (repeatable)")
    p.add_argument("--method", action="append", choices=("ultra",) + ex.BASELINES,
                   help="train and evaluate a method per seed (repeatable)")
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--seeds", type=int, default=1, help="evaluate seeds SEED .. SEED+n-1")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-k", parents=[common], help="vary the number of sub-policies")
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("trace-subpolicies", parents=[common], help="greedy traces of every sub-policy")
    p.add_argument("--checkpoint", help="meta-training checkpoint (default OUT/ultra.ckpt.json)")
    p.add_argument("--split", choices=("metatrain", "train", "val", "test"), default="test")
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "seeds", 1) < 1:
            raise ConfigError("--seeds must be at least 1")
        cfg = _config(args)
        args.func(cfg, args)
    except UltraError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return next((code for kind, code in EXIT_CODES.items() if isinstance(exc, kind)), 1)
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
