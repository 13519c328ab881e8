"""Generator, master and sub-policy networks and their rollouts.

Sub-policies see only the egocentric observation.  The master sees the
observation, a task embedding and a one-hot of the sub-policy it picked last;
its extra final choice (index ``K``) terminates the episode with Done.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .autodiff import NetSpec, ParamStore, forward_mlp, softmax
from .errors import ConfigError
from .gridworld import STOP, Action, AgentState, Scene, env_step
from .rl import Trajectory, Transition, discounted_returns
from .seeding import make_rng

N_PRIMITIVES = 3  # MoveAhead, RotateLeft, RotateRight
N_GENERATOR_ACTIONS = 4  # primitives + Stop


@dataclass(frozen=True)
class HierarchyConfig:
    K: int = 7
    N: int = 3
    hidden: tuple[int, ...] = (64,)

    def __post_init__(self):
        if self.K < 1 or self.N < 1:
            raise ConfigError("K and N must be at least 1")

    def sub_spec(self, obs_width: int) -> NetSpec:
        return NetSpec(obs_width, N_PRIMITIVES, self.hidden)

    def master_spec(self, obs_width: int, embed_width: int) -> NetSpec:
        return NetSpec(obs_width + embed_width + self.K, self.K + 1, self.hidden)

    def generator_spec(self, obs_width: int) -> NetSpec:
        return NetSpec(obs_width, N_GENERATOR_ACTIONS, self.hidden)


def init_subpolicies(cfg: HierarchyConfig, obs_width: int, seed: int) -> list[ParamStore]:
    spec = cfg.sub_spec(obs_width)
    return [spec.init(make_rng(seed, "sub", k)) for k in range(cfg.K)]


def init_master(cfg: HierarchyConfig, obs_width: int, embed_width: int, seed: int) -> ParamStore:
    return cfg.master_spec(obs_width, embed_width).init(make_rng(seed, "master"))


def init_generator(cfg: HierarchyConfig, obs_width: int, seed: int) -> ParamStore:
    return cfg.generator_spec(obs_width).init(make_rng(seed, "gen"))


def policy_dist(params: ParamStore, x: np.ndarray, spec: NetSpec) -> np.ndarray:
    logits, _ = forward_mlp(params, x, spec)
    return softmax(logits)


def select_action(logits: np.ndarray, greedy: bool, rng: np.random.Generator | None) -> tuple[int, float]:
    """Pick an action and return it with its log-probability."""
    z = logits - logits.max()
    logp = z - np.log(np.exp(z).sum())
    if greedy:
        a = int(np.argmax(logits))  # first maximum wins ties
    else:
        cdf = np.cumsum(np.exp(logp))
        a = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(cdf) - 1)
    return a, float(logp[a])


# -- tasks -------------------------------------------------------------------


class NavTask(Protocol):
    start: AgentState
    embed: np.ndarray

    def reached(self, state: AgentState) -> bool:
        """Episode succeeds automatically on entering ``state``."""

    def done_succeeds(self, state: AgentState) -> bool:
        """Issuing Done in ``state`` counts as success."""


@dataclass(frozen=True)
class RewardConfig:
    step: float = -0.01
    success: float = 5.0


@dataclass
class RolloutResult:
    master: Trajectory
    segments: dict[int, Trajectory]
    actions: list[int]
    states: list[AgentState]
    choices: list[int]
    success: bool
    reward: float

    @property
    def steps(self) -> int:
        return len(self.actions)

    @property
    def path_length(self) -> int:
        """Executed moves and rotations; Done is not counted."""
        return sum(1 for a in self.actions if a != Action.DONE)


def hierarchical_rollout(
    scene: Scene,
    task: NavTask,
    master: ParamStore,
    subs: list[ParamStore],
    cfg: HierarchyConfig,
    t_max: int,
    rng: np.random.Generator | None,
    *,
    greedy: bool = False,
    rewards: RewardConfig = RewardConfig(),
    gamma: float = 0.99,
    index: int = 0,
    sub_greedy: bool | None = None,
) -> RolloutResult:
    """Run one episode of the two-level policy.

    The master acts every ``N`` primitive steps; its reward for a decision is
    the sum of primitive rewards earned during the segment it launched.
    ``sub_greedy`` defaults to ``greedy``.
    """
    if sub_greedy is None:
        sub_greedy = greedy
    obs_width = scene.obs_width
    mspec = cfg.master_spec(obs_width, len(task.embed))
    sspec = cfg.sub_spec(obs_width)
    if len(subs) != cfg.K:
        raise ConfigError(f"expected {cfg.K} sub-policies, got {len(subs)}")
    table = scene.observations
    state = task.start
    states = [state]
    master_traj = Trajectory(index=index)
    prim: list[tuple[int, Transition]] = []  # (sub-policy, transition); -1 for master-issued Done
    actions: list[int] = []
    choices: list[int] = []
    prev = np.zeros(cfg.K)
    success = task.reached(state)
    done = success
    while not done and len(actions) < t_max:
        obs = table[state.y, state.x, state.heading]
        x = np.concatenate([obs, task.embed, prev])
        logits, value = forward_mlp(master, x, mspec)
        choice, logp = select_action(logits, greedy, rng)
        choices.append(choice)
        seg_reward = 0.0
        if choice == cfg.K:
            r = rewards.step
            if task.done_succeeds(state):
                r += rewards.success
                success = True
            actions.append(Action.DONE)
            prim.append((-1, Transition(obs, obs, Action.DONE, r, 0.0, 0.0)))
            seg_reward += r
            done = True
        else:
            params = subs[choice]
            for _ in range(cfg.N):
                if len(actions) >= t_max:
                    break
                sobs = table[state.y, state.x, state.heading]
                slogits, svalue = forward_mlp(params, sobs, sspec)
                a, slogp = select_action(slogits, sub_greedy, rng)
                state, _ = env_step(scene, state, a)
                states.append(state)
                actions.append(a)
                r = rewards.step
                if task.reached(state):
                    r += rewards.success
                    success = done = True
                prim.append((choice, Transition(sobs, sobs, a, r, slogp, svalue)))
                seg_reward += r
                if done:
                    break
            prev = np.zeros(cfg.K)
            prev[choice] = 1.0
        master_traj.transitions.append(Transition(obs, x, choice, seg_reward, logp, value))
    master_traj.terminal = done

    segments: dict[int, Trajectory] = {}
    if prim:
        prim_returns = discounted_returns([t.reward for _, t in prim], gamma)
        grouped: dict[int, tuple[list[Transition], list[float]]] = {}
        for (k, t), g in zip(prim, prim_returns):
            if k < 0:
                continue
            ts, gs = grouped.setdefault(k, ([], []))
            ts.append(t)
            gs.append(g)
        for k in sorted(grouped):
            ts, gs = grouped[k]
            segments[k] = Trajectory(ts, terminal=done, index=index, returns=np.array(gs))
    total = float(sum(t.reward for _, t in prim))
    return RolloutResult(master_traj, segments, actions, states, choices, success, total)


@dataclass
class GeneratorRollout:
    trajectory: Trajectory
    states: list[AgentState] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.trajectory)

    @property
    def final_state(self) -> AgentState:
        return self.states[-1]


def generator_rollout(
    scene: Scene,
    start: AgentState,
    params: ParamStore,
    spec: NetSpec,
    g_max: int,
    rng: np.random.Generator | None,
    greedy: bool = False,
) -> GeneratorRollout:
    """Walk with the generator until it emits Stop or exhausts ``g_max`` actions."""
    table = scene.observations
    state = start
    traj = Trajectory()
    states = [state]
    for _ in range(g_max):
        obs = table[state.y, state.x, state.heading]
        logits, value = forward_mlp(params, obs, spec)
        a, logp = select_action(logits, greedy, rng)
        traj.transitions.append(Transition(obs, obs, a, 0.0, logp, value))
        if a == STOP:
            break
        state, _ = env_step(scene, state, a)
        states.append(state)
    traj.terminal = True
    return GeneratorRollout(traj, states)
