"""Semantic navigation: train a fresh master over frozen skills, evaluate success and SPL."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .errors import ContractError
from .gridworld import Action, AgentState, Scene, distances_to_set, env_step, success_poses
from .policies import HierarchyConfig, RewardConfig, hierarchical_rollout, init_master
from .rl import A2CConfig, update_policy
from .seeding import derive_seed, make_rng

log = logging.getLogger(__name__)


@lru_cache(maxsize=256)
def _success_field(scene: Scene, target_class: int) -> tuple[np.ndarray, np.ndarray]:
    mask = success_poses(scene, target_class)
    mask.setflags(write=False)
    dist = distances_to_set(scene, mask)
    dist.setflags(write=False)
    return mask, dist


def success_mask(scene: Scene, target_class: int) -> np.ndarray:
    return _success_field(scene, target_class)[0]


def optimal_length(scene: Scene, target_class: int, start: AgentState) -> int | None:
    """Fewest moves and rotations from ``start`` to any pose where Done succeeds."""
    d = int(_success_field(scene, target_class)[1][start.y, start.x, start.heading])
    return None if d < 0 else d


@dataclass(frozen=True, eq=False)
class SemanticTask:
    """Find an instance of ``target_class`` and declare Done near it."""

    scene_id: str
    target_class: int
    start: AgentState
    embed: np.ndarray
    mask: np.ndarray = field(repr=False)

    def reached(self, state: AgentState) -> bool:
        return False

    def done_succeeds(self, state: AgentState) -> bool:
        return bool(self.mask[state.y, state.x, state.heading])

    def key(self) -> tuple:
        return (self.scene_id, self.target_class, tuple(self.start))


def make_semantic_task(scene: Scene, target_class: int, start: AgentState) -> SemanticTask:
    embed = np.zeros(scene.n_classes)
    embed[target_class] = 1.0
    embed.setflags(write=False)
    return SemanticTask(scene.id, target_class, start, embed, success_mask(scene, target_class))


def sample_semantic_task(scene: Scene, rng: np.random.Generator) -> SemanticTask:
    """Random present class; start uniform over poses that can reach success but are not there yet."""
    classes = scene.classes_present()
    if not classes:
        raise ContractError(f"scene {scene.id!r} contains no objects")
    cls = classes[int(rng.integers(len(classes)))]
    dist = _success_field(scene, cls)[1]
    ys, xs, hs = np.nonzero(dist >= 1)
    if len(xs) == 0:
        raise ContractError(f"scene {scene.id!r}: no valid start for class {cls}")
    i = int(rng.integers(len(xs)))
    return make_semantic_task(scene, cls, AgentState(int(xs[i]), int(ys[i]), int(hs[i])))


# -- agents ---------------------------------------------------------------------


@dataclass
class EpisodeRecord:
    scene_id: str
    target_class: int
    start: AgentState
    success: bool
    optimal: int
    path_length: int
    reward: float


@dataclass
class HierarchicalAgent:
    master: ParamStore
    theta: list[ParamStore]
    hierarchy: HierarchyConfig
    greedy: bool = True
    rewards: RewardConfig = RewardConfig()
    sub_greedy: bool = False

    def run(self, scene: Scene, task: SemanticTask, t_max: int, rng: np.random.Generator):
        result = hierarchical_rollout(scene, task, self.master, self.theta, self.hierarchy, t_max,
                                      rng, greedy=self.greedy, rewards=self.rewards,
                                      sub_greedy=self.sub_greedy)
        return result.success, result.path_length, result.reward


@dataclass
class RandomAgent:
    """Uniform over MoveAhead, RotateLeft, RotateRight and Done at every step."""

    rewards: RewardConfig = RewardConfig()

    def run(self, scene: Scene, task: SemanticTask, t_max: int, rng: np.random.Generator):
        state = task.start
        path = 0
        reward = 0.0
        for _ in range(t_max):
            a = int(rng.integers(4))
            reward += self.rewards.step
            if a == Action.DONE:
                if task.done_succeeds(state):
                    return True, path, reward + self.rewards.success
                return False, path, reward
            state, _ = env_step(scene, state, a)
            path += 1
        return False, path, reward


# -- evaluation ----------------------------------------------------------------------


def build_roster(scenes: list[Scene], per_scene: int, seed: int) -> list[tuple[Scene, SemanticTask]]:
    """Fixed (scene, class, start) episodes derived from ``seed``."""
    roster = []
    for scene in scenes:
        rng = make_rng(seed, "roster", scene.id)
        for _ in range(per_scene):
            roster.append((scene, sample_semantic_task(scene, rng)))
    return roster


def roster_hash(roster) -> str:
    h = hashlib.sha256()
    for _, task in roster:
        h.update(repr(task.key()).encode())
    return h.hexdigest()


def spl(records: list[EpisodeRecord]) -> float:
    """Success weighted by path length, as a fraction in [0, 1]."""
    if not records:
        return 0.0
    total = 0.0
    for rec in records:
        if rec.success:
            total += rec.optimal / max(rec.path_length, rec.optimal)
    return total / len(records)


@dataclass
class MetricsReport:
    method: str
    success_all: float
    spl_all: float
    episodes_all: int
    success_L5: float
    spl_L5: float
    episodes_L5: int
    records: list[EpisodeRecord] = field(default_factory=list, repr=False)

    @classmethod
    def from_records(cls, method: str, records: list[EpisodeRecord]) -> "MetricsReport":
        long = [r for r in records if r.optimal >= 5]

        def rate(rs):
            return 100.0 * sum(r.success for r in rs) / len(rs) if rs else 0.0

        return cls(method, rate(records), 100.0 * spl(records), len(records),
                   rate(long), 100.0 * spl(long), len(long), records)

    def rows(self) -> list[dict]:
        return [
            {"method": self.method, "split": "all", "success": self.success_all,
             "spl": self.spl_all, "episodes": self.episodes_all},
            {"method": self.method, "split": "L>=5", "success": self.success_L5,
             "spl": self.spl_L5, "episodes": self.episodes_L5},
        ]


def evaluate(agent, scenes: list[Scene], episodes_per_scene: int, seed: int, t_max: int = 100,
             method: str = "ultra", roster=None) -> MetricsReport:
    """Run ``agent`` over the seeded roster and aggregate success and SPL."""
    if roster is None:
        roster = build_roster(scenes, episodes_per_scene, seed)
    records = []
    for i, (scene, task) in enumerate(roster):
        optimal = optimal_length(scene, task.target_class, task.start)
        if optimal is None:
            log.warning("skipping unreachable roster episode %s", task.key())
            continue
        success, path, reward = agent.run(scene, task, t_max, make_rng(seed, "eval", i))
        records.append(EpisodeRecord(scene.id, task.target_class, task.start, success, optimal, path, reward))
    return MetricsReport.from_records(method, records)


# -- transfer training ------------------------------------------------------------------


@dataclass(frozen=True)
class TransferConfig:
    episodes: int = 5000
    t_max: int = 100
    curve_every: int = 50
    curve_tasks: int = 10
    batch: int = 16


@dataclass
class TransferResult:
    master: ParamStore
    theta: list[ParamStore]
    curve: list[dict]


def train_transfer_master(
    theta: list[ParamStore],
    train_scenes: list[Scene],
    hierarchy: HierarchyConfig,
    a2c: A2CConfig,
    cfg: TransferConfig,
    seed: int,
    *,
    curve_scenes: list[Scene] | None = None,
    finetune_subs: bool = False,
    rewards: RewardConfig = RewardConfig(),
) -> TransferResult:
    """A2C on a fresh semantic master.

    With ``finetune_subs`` the sub-policies are trained jointly with the master
    on their own segments; otherwise they are never written.
    """
    if not train_scenes:
        raise ContractError("transfer needs at least one training scene")
    n_classes = train_scenes[0].n_classes
    obs_width = train_scenes[0].obs_width
    master = init_master(hierarchy, obs_width, n_classes, derive_seed(seed, "transfer-master"))
    mspec = hierarchy.master_spec(obs_width, n_classes)
    sspec = hierarchy.sub_spec(obs_width)
    theta = [ad.copy_store(t) for t in theta] if finetune_subs else theta
    curve_roster = None
    if curve_scenes and cfg.curve_every > 0:
        rng = make_rng(seed, "curve-roster")
        curve_roster = [(s, sample_semantic_task(s, rng))
                        for s in (curve_scenes[int(rng.integers(len(curve_scenes)))]
                                  for _ in range(cfg.curve_tasks))]
    curve = []
    pending = []
    for ep in range(cfg.episodes):
        rng = make_rng(seed, "transfer", ep)
        scene = train_scenes[int(rng.integers(len(train_scenes)))]
        task = sample_semantic_task(scene, rng)
        pending.append(hierarchical_rollout(scene, task, master, theta, hierarchy, cfg.t_max, rng,
                                            rewards=rewards, gamma=a2c.gamma, index=ep))
        if len(pending) == cfg.batch or ep == cfg.episodes - 1:
            master = update_policy(master, [r.master for r in pending], mspec, a2c)
            if finetune_subs:
                for k in range(hierarchy.K):
                    segs = [r.segments[k] for r in pending if k in r.segments]
                    if segs:
                        theta[k] = update_policy(theta[k], segs, sspec, a2c)
            pending = []
        if curve_roster is not None and (ep + 1) % cfg.curve_every == 0:
            agent = HierarchicalAgent(master, theta, hierarchy, rewards=rewards)
            report = evaluate(agent, [], 0, seed, cfg.t_max, roster=curve_roster)
            rewards_avg = float(np.mean([r.reward for r in report.records])) if report.records else 0.0
            curve.append({"episode": ep + 1, "avg_eval_reward": rewards_avg,
                          "success": report.success_all})
    return TransferResult(master, theta, curve)
