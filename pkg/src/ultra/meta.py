"""Unsupervised meta-training: adversarial task proposal plus Reptile over sub-policies.

One iteration:

1. the generator walks from a random start pose and stops; its final pose
   and the observation there define the task;
2. a freshly initialised master adapts to the task for ``W`` episodes while
   the sub-policies stay frozen (warm-up);
3. master and a working copy of the sub-policies are updated together for
   ``J`` episodes (joint phase), which also yields the success rate ``r``;
4. the shared sub-policies move toward the working copy (Reptile);
5. the generator is rewarded ``k(1-r) - lambda*n + eta*D`` and updated by
   REINFORCE, then pushed onto the four-slot policy archive.
"""
from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import NetSpec, ParamStore
from .errors import ConfigError, ContractError, NonFiniteError
from .gridworld import AgentState, Scene, distances_to_set, pose_distances, render_observation
from .policies import (
    HierarchyConfig,
    RewardConfig,
    generator_rollout,
    hierarchical_rollout,
    init_generator,
    init_master,
    init_subpolicies,
)
from .rl import A2CConfig, Trajectory, reinforce_update, update_policy
from .seeding import derive_seed, make_rng

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
ARCHIVE_SIZE = 4


@dataclass(frozen=True, eq=False)
class TaskSpec:
    """Image-driven navigation task: reach pose ``s_star`` shown by ``o_star``."""

    scene_id: str
    s0: AgentState
    s_star: AgentState
    o_star: np.ndarray

    @property
    def start(self) -> AgentState:
        return self.s0

    @property
    def embed(self) -> np.ndarray:
        return self.o_star

    def reached(self, state: AgentState) -> bool:
        return state == self.s_star

    def done_succeeds(self, state: AgentState) -> bool:
        return False


def make_task(scene: Scene, s0: AgentState, s_star: AgentState) -> TaskSpec:
    return TaskSpec(scene.id, s0, s_star, render_observation(scene, s_star))


@dataclass(frozen=True)
class GeneratorRewardConfig:
    k: float = 5.0
    lam: float = 0.1
    eta: float = 0.1

    def __post_init__(self):
        if self.k <= 0 or self.lam < 0 or self.eta < 0:
            raise ConfigError("generator reward needs k > 0, lambda >= 0, eta >= 0")


@dataclass(frozen=True)
class TaskOutcome:
    r: float
    n: int
    episodes: int = 0


@dataclass(frozen=True)
class MetaSchedule:
    W: int = 10
    J: int = 10
    beta: float = 0.5
    t_max: int = 50
    g_max: int = 30
    iterations: int = 2000

    def __post_init__(self):
        if self.W < 1 or self.J < 1:
            raise ConfigError("W and J must be at least 1")
        if not 0 <= self.beta <= 1:
            raise ConfigError("beta must lie in [0, 1]")


class PolicyArchive:
    """FIFO of the most recent generator snapshots."""

    def __init__(self, capacity: int = ARCHIVE_SIZE):
        self._items: deque[ParamStore] = deque(maxlen=capacity)

    def push(self, params: ParamStore) -> None:
        self._items.append(ad.copy_store(params))

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[ParamStore]:
        return iter(self._items)

    def __getitem__(self, i: int) -> ParamStore:
        return self._items[i]


# -- generator reward -----------------------------------------------------------


def final_reward(k: float, r: float) -> float:
    if not 0 <= r <= 1:
        raise ContractError(f"success rate {r} outside [0, 1]")
    return k * (1 - r)


def kl_diversity(archive, params: ParamStore, traj: Trajectory, spec: NetSpec) -> float:
    """Sum over visited states and archived policies of KL(archived || current)."""
    if len(archive) == 0 or len(traj) == 0:
        return 0.0
    x = traj.inputs()
    p = _batch_probs(params, x, spec)
    total = 0.0
    for old in archive:
        ad.check_compatible(old, params)
        q = _batch_probs(old, x, spec)
        total += float(kl_rows(q, p).sum())
    return total


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) with both sides floored at ``PROB_FLOOR``."""
    p = np.maximum(p, PROB_FLOOR)
    q = np.maximum(q, PROB_FLOOR)
    return np.sum(p * np.log(p / q), axis=-1)


def _batch_probs(params: ParamStore, x: np.ndarray, spec: NetSpec) -> np.ndarray:
    logits, _ = ad.forward_graph(ad.leaves(params), x, spec)
    return ad.softmax(logits.value)


def generator_reward(cfg: GeneratorRewardConfig, outcome: TaskOutcome, diversity: float) -> float:
    return final_reward(cfg.k, outcome.r) - cfg.lam * outcome.n + cfg.eta * diversity


# -- Reptile ---------------------------------------------------------------------


def reptile_merge(theta: list[ParamStore], theta_tilde: list[ParamStore], beta: float) -> list[ParamStore]:
    """``theta + beta * (theta_tilde - theta)`` for every sub-policy store."""
    if len(theta) != len(theta_tilde):
        raise ConfigError("sub-policy counts differ")
    merged = []
    for a, b in zip(theta, theta_tilde):
        ad.check_compatible(a, b)
        # convex form: exact at both beta = 0 and beta = 1
        merged.append({k: (1.0 - beta) * a[k] + beta * b[k] for k in a})
    return merged


# -- learner phases ----------------------------------------------------------------


@dataclass(frozen=True)
class UltraConfig:
    hierarchy: HierarchyConfig = HierarchyConfig()
    a2c: A2CConfig = A2CConfig()
    schedule: MetaSchedule = MetaSchedule()
    generator_reward: GeneratorRewardConfig = GeneratorRewardConfig()
    rewards: RewardConfig = RewardConfig()
    gen_lr: float = 1e-2
    gen_clip: float | None = None
    generator: str = "adversarial"  # adversarial | random | handcrafted
    meta_update: str = "reptile"  # reptile | joint
    curriculum: tuple[int, int] = (2, 20)

    def __post_init__(self):
        if self.generator not in ("adversarial", "random", "handcrafted"):
            raise ConfigError(f"unknown generator kind {self.generator!r}")
        if self.meta_update not in ("reptile", "joint"):
            raise ConfigError(f"unknown meta update {self.meta_update!r}")


def _episode(scene, task, master, theta, cfg: UltraConfig, seed, it, ep):
    return hierarchical_rollout(
        scene, task, master, theta, cfg.hierarchy, cfg.schedule.t_max,
        make_rng(seed, "episode", it, ep),
        rewards=cfg.rewards, gamma=cfg.a2c.gamma, index=ep,
    )


def _update_master(master, result, spec, cfg: UltraConfig):
    if len(result.master) == 0:
        return master
    return update_policy(master, [result.master], spec, cfg.a2c)


def _update_subs(theta, result, spec, cfg: UltraConfig):
    out = list(theta)
    for k, seg in result.segments.items():
        out[k] = update_policy(theta[k], [seg], spec, cfg.a2c)
    return out


def warmup_phase(scene, task: TaskSpec, master: ParamStore, theta: list[ParamStore],
                 cfg: UltraConfig, seed: int, it: int = 0) -> ParamStore:
    """Adapt only the master for ``W`` episodes; ``theta`` is read, never written."""
    spec = cfg.hierarchy.master_spec(scene.obs_width, len(task.embed))
    for w in range(cfg.schedule.W):
        result = _episode(scene, task, master, theta, cfg, seed, it, w)
        master = _update_master(master, result, spec, cfg)
    return master


def joint_phase(scene, task: TaskSpec, master: ParamStore, theta: list[ParamStore],
                cfg: UltraConfig, seed: int, it: int = 0, first_episode: int | None = None
                ) -> tuple[ParamStore, list[ParamStore], int]:
    """Update master and a working copy of the sub-policies for ``J`` episodes.

    Returns the master, the adapted copy and the number of successful episodes.
    """
    mspec = cfg.hierarchy.master_spec(scene.obs_width, len(task.embed))
    sspec = cfg.hierarchy.sub_spec(scene.obs_width)
    tilde = [ad.copy_store(t) for t in theta]
    successes = 0
    start = cfg.schedule.W if first_episode is None else first_episode
    for j in range(cfg.schedule.J):
        result = _episode(scene, task, master, tilde, cfg, seed, it, start + j)
        successes += int(result.success)
        master = _update_master(master, result, mspec, cfg)
        tilde = _update_subs(tilde, result, sspec, cfg)
    return master, tilde, successes


# -- task proposal -------------------------------------------------------------------


def random_pose(scene: Scene, rng: np.random.Generator) -> AgentState:
    cells = scene.free_cells()
    x, y = cells[int(rng.integers(len(cells)))]
    return AgentState(x, y, int(rng.integers(4)))


def propose_task(scene: Scene, mu: ParamStore, spec: NetSpec, g_max: int,
                 rng: np.random.Generator, start: AgentState | None = None):
    """Run the generator and turn its final pose into a task.

    Returns ``(task, generator rollout, n)``.
    """
    s0 = random_pose(scene, rng) if start is None else start
    rollout = generator_rollout(scene, s0, mu, spec, g_max, rng)
    return make_task(scene, s0, rollout.final_state), rollout, rollout.n


def propose_random_task(scene: Scene, rng: np.random.Generator) -> tuple[TaskSpec, int]:
    """Uniform start and uniform target pose; ``n`` is the optimal path length."""
    s0 = random_pose(scene, rng)
    s_star = random_pose(scene, rng)
    n = int(pose_distances(scene, s0)[s_star.y, s_star.x, s_star.heading])
    return make_task(scene, s0, s_star), n


def propose_curriculum_task(scene: Scene, rng: np.random.Generator, max_dist: int) -> tuple[TaskSpec, int]:
    """Uniform target, start drawn among poses at most ``max_dist`` actions away."""
    s_star = random_pose(scene, rng)
    target = np.zeros((scene.height, scene.width, 4), dtype=bool)
    target[s_star.y, s_star.x, s_star.heading] = True
    dist = distances_to_set(scene, target)
    ys, xs, hs = np.nonzero((dist >= 1) & (dist <= max_dist))
    i = int(rng.integers(len(xs)))
    s0 = AgentState(int(xs[i]), int(ys[i]), int(hs[i]))
    return make_task(scene, s0, s_star), int(dist[s0.y, s0.x, s0.heading])


def curriculum_distance(cfg: UltraConfig, it: int) -> int:
    lo, hi = cfg.curriculum
    total = max(1, cfg.schedule.iterations - 1)
    return int(round(lo + (hi - lo) * min(1.0, it / total)))


# -- full loop -------------------------------------------------------------------------


LOG_FIELDS = ("iter", "scene_id", "n", "r", "R_G", "D", "seconds")


@dataclass
class UltraState:
    theta: list[ParamStore]
    mu: ParamStore
    master: ParamStore | None = None  # persistent master, joint meta-update only
    baseline: float = 0.0
    archive: PolicyArchive = field(default_factory=PolicyArchive)
    iteration: int = 0
    log: list[dict] = field(default_factory=list)


def master_seed(seed: int, it: int) -> int:
    return derive_seed(seed, "master", it)


def initial_state(obs_width: int, cfg: UltraConfig, seed: int) -> UltraState:
    theta = init_subpolicies(cfg.hierarchy, obs_width, derive_seed(seed, "theta"))
    mu = init_generator(cfg.hierarchy, obs_width, derive_seed(seed, "mu"))
    state = UltraState(theta, mu)
    if cfg.meta_update == "joint":
        state.master = init_master(cfg.hierarchy, obs_width, obs_width, master_seed(seed, 0))
    return state


Observer = Callable[[str, dict], None]


def ultra_iteration(scenes: list[Scene], state: UltraState, cfg: UltraConfig, seed: int,
                    observer: Observer | None = None) -> dict:
    """Advance ``state`` by one meta-training iteration and return its log row."""
    it = state.iteration
    t0 = time.perf_counter()
    scene = scenes[it % len(scenes)]
    obs_width = scene.obs_width
    hier = cfg.hierarchy
    gspec = hier.generator_spec(obs_width)
    rng = make_rng(seed, "task", it)

    gen_traj = None
    if cfg.generator == "adversarial":
        task, rollout, n = propose_task(scene, state.mu, gspec, cfg.schedule.g_max, rng)
        gen_traj = rollout.trajectory
    elif cfg.generator == "random":
        task, n = propose_random_task(scene, rng)
    else:
        task, n = propose_curriculum_task(scene, rng, curriculum_distance(cfg, it))

    if cfg.meta_update == "reptile":
        master = init_master(hier, obs_width, len(task.embed), master_seed(seed, it))
        if observer:
            observer("task_start", {"iteration": it, "master": master, "theta": state.theta, "task": task})
        master = warmup_phase(scene, task, master, state.theta, cfg, seed, it)
        if observer:
            observer("warmup_end", {"iteration": it, "master": master, "theta": state.theta})
        master, tilde, successes = joint_phase(scene, task, master, state.theta, cfg, seed, it)
        if observer:
            observer("joint_end", {"iteration": it, "theta": state.theta, "theta_tilde": tilde})
        state.theta = reptile_merge(state.theta, tilde, cfg.schedule.beta)
    else:
        # targets are episodes of one task: no re-initialisation, no Reptile
        master = state.master
        if observer:
            observer("task_start", {"iteration": it, "master": master, "theta": state.theta, "task": task})
        for w in range(cfg.schedule.W):
            result = _episode(scene, task, master, state.theta, cfg, seed, it, w)
            master = _update_master(master, result, hier.master_spec(obs_width, len(task.embed)), cfg)
            state.theta = _update_subs(state.theta, result, hier.sub_spec(obs_width), cfg)
        master, state.theta, successes = joint_phase(scene, task, master, state.theta, cfg, seed, it)
        state.master = master

    for store in state.theta:
        ad.ensure_finite(store, f"iteration {it}")

    outcome = TaskOutcome(successes / cfg.schedule.J, max(n, 1), cfg.schedule.J)
    diversity = 0.0
    if gen_traj is not None:
        diversity = kl_diversity(state.archive, state.mu, gen_traj, gspec)
    reward = generator_reward(cfg.generator_reward, outcome, diversity)
    if not np.isfinite(reward):
        raise NonFiniteError(f"non-finite generator reward at iteration {it}")
    if gen_traj is not None:
        state.mu, state.baseline = reinforce_update(
            state.mu, gen_traj, reward, state.baseline, cfg.gen_lr, gspec,
            max_grad_norm=cfg.gen_clip)
        ad.ensure_finite(state.mu, f"iteration {it}")
        state.archive.push(state.mu)

    row = {
        "iter": it,
        "scene_id": scene.id,
        "n": outcome.n,
        "r": outcome.r,
        "R_G": reward,
        "D": diversity,
        "seconds": time.perf_counter() - t0,
    }
    state.log.append(row)
    state.iteration += 1
    if observer:
        observer("iteration_end", {"iteration": it, "row": row, "archive": state.archive, "state": state})
    return row


def run_ultra(scenes: list[Scene], cfg: UltraConfig, seed: int, observer: Observer | None = None,
              state: UltraState | None = None) -> UltraState:
    """Meta-train for ``cfg.schedule.iterations`` iterations (round-robin over scenes)."""
    if not scenes:
        raise ContractError("run_ultra needs at least one meta-training scene")
    if state is None:
        state = initial_state(scenes[0].obs_width, cfg, seed)
    while state.iteration < cfg.schedule.iterations:
        row = ultra_iteration(scenes, state, cfg, seed, observer)
        if row["iter"] % 100 == 0:
            log.info("iter %d scene %s n=%d r=%.2f R_G=%.3f", row["iter"], row["scene_id"],
                     row["n"], row["r"], row["R_G"])
    return state
