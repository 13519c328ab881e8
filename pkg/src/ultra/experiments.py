"""End-to-end drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .autodiff import ParamStore, forward_mlp
from .config import RunConfig
from .errors import ConfigError, SceneError
from .gridworld import Action, AgentState, Scene, env_step, generate_scene, parse_scene, render_scene
from .meta import LOG_FIELDS, UltraState, initial_state, run_ultra
from .policies import HierarchyConfig, init_subpolicies, select_action
from .seeding import derive_seed, make_rng
from .transfer import (
    HierarchicalAgent,
    MetricsReport,
    RandomAgent,
    TransferResult,
    evaluate,
    train_transfer_master,
)

log = logging.getLogger(__name__)

SPLITS = ("metatrain", "train", "val", "test")
MANIFEST = "manifest.json"
REPORT_FIELDS = ("method", "split", "success", "spl", "episodes")
CURVE_FIELDS = ("episode", "avg_eval_reward")
TRACE_FIELDS = ("subpolicy", "scene", "step", "x", "y", "heading", "action")
BASELINES = ("random", "scratch", "random_generator", "handcrafted_generator",
             "no_hierarchy", "no_meta_update", "no_adversarial")

Splits = dict[str, list[Scene]]


# -- scenes on disk ------------------------------------------------------------------


def split_sizes(cfg: RunConfig) -> dict[str, int]:
    return {"metatrain": cfg.n_metatrain, "train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}


def generate_splits(cfg: RunConfig) -> Splits:
    scfg = cfg.scene_config()
    out = {}
    for split, count in split_sizes(cfg).items():
        out[split] = [generate_scene(derive_seed(cfg.seed, "scene", split, i), scfg, f"{split}{i:02d}")
                      for i in range(count)]
    return out


def write_splits(splits: Splits, root: str | os.PathLike) -> Path:
    root = Path(root)
    entries = []
    for split in SPLITS:
        folder = root / split
        folder.mkdir(parents=True, exist_ok=True)
        for scene in splits.get(split, []):
            name = f"scene_{scene.id}.txt"
            _write_text(folder / name, render_scene(scene))
            entries.append({"id": scene.id, "split": split, "file": f"{split}/{name}"})
    n_classes = next((s.n_classes for ss in splits.values() for s in ss), 0)
    manifest = {"n_classes": n_classes, "scenes": entries}
    _write_text(root / MANIFEST, json.dumps(manifest, indent=2) + "\n")
    return root / MANIFEST


def load_splits(root: str | os.PathLike) -> Splits:
    root = Path(root)
    try:
        manifest = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
    except OSError as exc:
        raise SceneError(f"cannot read {root / MANIFEST}: {exc.strerror}; run gen-scenes first") from exc
    except json.JSONDecodeError as exc:
        raise SceneError(f"{root / MANIFEST}: invalid JSON ({exc})") from exc
    splits: Splits = {s: [] for s in SPLITS}
    for entry in manifest["scenes"]:
        path = root / entry["file"]
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise SceneError(f"cannot read scene {path}: {exc.strerror}") from exc
        try:
            scene = parse_scene(text, manifest["n_classes"], entry["id"])
        except SceneError as exc:
            raise SceneError(f"{path}: {exc}") from exc
        splits[entry["split"]].append(scene)
    return splits


# -- CSV ------------------------------------------------------------------------------------


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_csv(path: str | os.PathLike, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(row[h]) for h in header] if isinstance(row, dict) else row)


def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def report_rows(reports: list[MetricsReport]) -> list[dict]:
    rows = []
    for rep in reports:
        for row in rep.rows():
            rows.append({**row, "success": round(row["success"], 6), "spl": round(row["spl"], 6)})
    return rows


def log_rows(log_rows_: list[dict], timing: bool) -> list[dict]:
    return [{**row, "seconds": row["seconds"] if timing else ""} for row in log_rows_]


def echo_config(cfg: RunConfig, out_dir: str | os.PathLike) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "config.json", cfg.to_json())


# -- meta-training ------------------------------------------------------------------------


def meta_train(cfg: RunConfig, scenes: list[Scene], seed: int, *, out_dir: str | os.PathLike | None = None,
               variant: dict | None = None) -> UltraState:
    """Run meta-training; with ``out_dir`` write the periodic and final checkpoints and the log."""
    ucfg = cfg.ultra()
    if variant:
        ucfg = replace(ucfg, **variant)
    if not scenes:
        raise SceneError("no meta-training scenes")
    state = initial_state(scenes[0].obs_width, ucfg, seed)
    every = cfg.checkpoint_every
    target = ucfg.schedule.iterations
    while state.iteration < target:
        stop = min(target, state.iteration + every) if every > 0 else target
        state = run_ultra(scenes, replace(ucfg, schedule=replace(ucfg.schedule, iterations=stop)), seed,
                          state=state)
        if out_dir is not None and every > 0 and state.iteration % every == 0 and state.iteration < target:
            ckpt_io.save(meta_checkpoint(state, cfg, seed), Path(out_dir) / f"ultra.iter{state.iteration:06d}.ckpt.json")
    if out_dir is not None:
        out = Path(out_dir)
        ckpt_io.save(meta_checkpoint(state, cfg, seed), out / "ultra.ckpt.json")
        write_csv(out / "meta_train.csv", LOG_FIELDS, log_rows(state.log, cfg.log_timing))
    return state


def meta_checkpoint(state: UltraState, cfg: RunConfig, seed: int) -> ckpt_io.Checkpoint:
    params = ckpt_io.pack(gen=state.mu, master=state.master, subs=state.theta)
    return ckpt_io.Checkpoint(params, seed, state.iteration, cfg.to_dict())


def load_theta(path: str | os.PathLike, hierarchy: HierarchyConfig, obs_width: int) -> list[ParamStore]:
    ck = ckpt_io.load(path)
    theta = ck.subpolicies()
    if len(theta) != hierarchy.K:
        raise ckpt_io.CheckpointError(f"{path}: field 'params' holds {len(theta)} sub-policies, config says K={hierarchy.K}")
    spec = hierarchy.sub_spec(obs_width)
    for k, store in enumerate(theta):
        try:
            ad.check_compatible(store, spec.zeros())
        except ConfigError as exc:
            raise ckpt_io.CheckpointError(f"{path}: field 'params.sub{k}' {exc}") from exc
    return theta


# -- transfer and evaluation --------------------------------------------------------------------


def transfer(cfg: RunConfig, theta: list[ParamStore], splits: Splits, seed: int, *,
             hierarchy: HierarchyConfig | None = None, finetune_subs: bool = False) -> TransferResult:
    return train_transfer_master(
        theta, splits["train"], hierarchy or cfg.hierarchy(), cfg.transfer_a2c(), cfg.transfer(), seed,
        curve_scenes=splits["val"] or splits["train"], finetune_subs=finetune_subs, rewards=cfg.rewards(),
    )


def scratch_theta(cfg: RunConfig, obs_width: int, seed: int, hierarchy: HierarchyConfig | None = None):
    return init_subpolicies(hierarchy or cfg.hierarchy(), obs_width, derive_seed(seed, "scratch-theta"))


def evaluate_hierarchy(cfg: RunConfig, master: ParamStore, theta: list[ParamStore], scenes: list[Scene],
                       seed: int, method: str, hierarchy: HierarchyConfig | None = None) -> MetricsReport:
    agent = HierarchicalAgent(master, theta, hierarchy or cfg.hierarchy(), greedy=cfg.eval_greedy,
                              rewards=cfg.rewards(), sub_greedy=cfg.eval_greedy_subs)
    return evaluate(agent, scenes, cfg.eval_episodes, seed, cfg.T_max, method)


def evaluate_random(cfg: RunConfig, scenes: list[Scene], seed: int) -> MetricsReport:
    return evaluate(RandomAgent(cfg.rewards()), scenes, cfg.eval_episodes, seed, cfg.T_max, "random")


def transfer_checkpoint(result: TransferResult, cfg: RunConfig, seed: int, method: str) -> ckpt_io.Checkpoint:
    config = {**cfg.to_dict(), "method": method}
    return ckpt_io.Checkpoint(ckpt_io.pack(master=result.master, subs=result.theta), seed, 0, config)


@dataclass
class PipelineResult:
    method: str
    report: MetricsReport
    transfer: TransferResult | None = None
    meta: UltraState | None = None


def _variant(kind: str) -> tuple[dict, HierarchyConfig | None, bool]:
    """(UltraConfig overrides, hierarchy override, fine-tune subs in transfer)."""
    if kind == "ultra":
        return {}, None, False
    if kind in ("random_generator", "no_adversarial"):
        return {"generator": "random"}, None, False
    if kind == "handcrafted_generator":
        return {"generator": "handcrafted"}, None, False
    if kind == "no_meta_update":
        return {"meta_update": "joint"}, None, False
    if kind == "no_hierarchy":
        return {}, HierarchyConfig(K=1, N=1), True
    raise ConfigError(f"unknown method {kind!r}; choose ultra or one of {', '.join(BASELINES)}")


def run_method(kind: str, cfg: RunConfig, splits: Splits, seed: int, split: str = "test") -> PipelineResult:
    """Train (if needed) and evaluate one method on ``split``."""
    scenes = splits[split]
    if not scenes:
        raise SceneError(f"split {split!r} is empty")
    if kind == "random":
        return PipelineResult(kind, evaluate_random(cfg, scenes, seed))
    obs_width = scenes[0].obs_width
    if kind == "scratch":
        result = transfer(cfg, scratch_theta(cfg, obs_width, seed), splits, seed, finetune_subs=True)
        return PipelineResult(kind, evaluate_hierarchy(cfg, result.master, result.theta, scenes, seed, kind),
                              result)
    overrides, hierarchy, finetune = _variant(kind)
    if hierarchy is not None:
        cfg = replace(cfg, K=hierarchy.K, N=hierarchy.N)
    state = meta_train(cfg, splits["metatrain"], seed, variant=overrides)
    result = transfer(cfg, state.theta, splits, seed, finetune_subs=finetune)
    report = evaluate_hierarchy(cfg, result.master, result.theta, scenes, seed, kind)
    return PipelineResult(kind, report, result, state)


def run_baseline(kind: str, cfg: RunConfig, splits: Splits, seed: int, split: str = "test") -> MetricsReport:
    if kind not in BASELINES:
        raise ConfigError(f"unknown baseline {kind!r}; choose one of {', '.join(BASELINES)}")
    return run_method(kind, cfg, splits, seed, split).report


def subpolicy_count_sweep(k_values: list[int], cfg: RunConfig, splits: Splits, seed: int,
                          split: str = "test") -> list[MetricsReport]:
    reports = []
    for K in k_values:
        rep = run_method("ultra", replace(cfg, K=K), splits, seed, split).report
        rep.method = f"K={K}"
        reports.append(rep)
    return reports


def mean_report(reports: list[MetricsReport], method: str) -> MetricsReport:
    """Per-field average over seeds; episode counts are averaged too."""
    def avg(name):
        return float(np.mean([getattr(r, name) for r in reports]))

    return MetricsReport(method, avg("success_all"), avg("spl_all"), int(round(avg("episodes_all"))),
                         avg("success_L5"), avg("spl_L5"), int(round(avg("episodes_L5"))))


def format_table(reports: list[MetricsReport]) -> str:
    lines = [f"{'method':<24}{'Success':>9}{'SPL':>9}{'Success L>=5':>14}{'SPL L>=5':>10}"]
    for r in reports:
        lines.append(f"{r.method:<24}{r.success_all:>9.2f}{r.spl_all:>9.2f}{r.success_L5:>14.2f}{r.spl_L5:>10.2f}")
    return "\n".join(lines)


# -- sub-policy traces ----------------------------------------------------------------------


def visualize_subpolicy(params: ParamStore, k: int, scenes: list[Scene], start_poses, horizon: int,
                        hierarchy: HierarchyConfig) -> list[dict]:
    """Greedy rollouts of one sub-policy; a trace ends early once a move is blocked.

    ``start_poses`` maps scene id to a list of poses.  Each row is the pose
    before the action and the action taken.
    """
    rows = []
    for scene in scenes:
        spec = hierarchy.sub_spec(scene.obs_width)
        for start in start_poses[scene.id]:
            state = AgentState(*start)
            for step in range(horizon):
                logits, _ = forward_mlp(params, scene.observations[state.y, state.x, state.heading], spec)
                a, _ = select_action(logits, True, None)
                rows.append({"subpolicy": k, "scene": scene.id, "step": step, "x": state.x, "y": state.y,
                             "heading": state.heading, "action": Action(a).name})
                nxt, _ = env_step(scene, state, a)
                if nxt == state:
                    break  # greedy and blocked: every later step would repeat this one
                state = nxt
    return rows


def trace_starts(scenes: list[Scene], seed: int, per_scene: int = 2) -> dict[str, list[AgentState]]:
    out = {}
    for scene in scenes:
        rng = make_rng(seed, "trace", scene.id)
        poses = scene.free_poses()
        out[scene.id] = [poses[int(i)] for i in rng.choice(len(poses), size=min(per_scene, len(poses)),
                                                             replace=False)]
    return out
