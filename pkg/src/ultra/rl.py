"""Synchronous advantage actor-critic and episodic REINFORCE."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NetSpec, ParamStore, Tensor
from .errors import ContractError


@dataclass
class Transition:
    observation: np.ndarray
    input_vector: np.ndarray
    action: int
    reward: float
    log_prob: float
    value: float


@dataclass
class Trajectory:
    """Transitions at one timescale.

    ``returns`` may be preset by the producer, e.g. when a sub-policy's
    segments are cut out of a longer episode and their returns must include
    the reward earned after control left that sub-policy.
    """

    transitions: list[Transition] = field(default_factory=list)
    terminal: bool = False
    index: int = 0
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def total_steps(self) -> int:
        return len(self.transitions)

    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions], dtype=np.float64)

    def actions(self) -> np.ndarray:
        return np.array([t.action for t in self.transitions], dtype=np.intp)

    def inputs(self) -> np.ndarray:
        return np.stack([t.input_vector for t in self.transitions])

    def returns_for(self, gamma: float) -> np.ndarray:
        if self.returns is not None:
            return np.asarray(self.returns, dtype=np.float64)
        return discounted_returns(self.rewards(), gamma)


@dataclass(frozen=True)
class A2CConfig:
    gamma: float = 0.99
    lr: float = 1e-3
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float | None = None

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ContractError("gamma must lie in [0, 1]")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ContractError("loss coefficients must be non-negative")


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def a2c_loss(traj: Trajectory, nodes: dict[str, Tensor], spec: NetSpec, cfg: A2CConfig) -> Tensor:
    """Summed actor-critic loss over one trajectory.

    The advantage ``G_t - V(s_t)`` enters the policy term as a constant.
    """
    if len(traj) == 0:
        raise ContractError("a2c_loss needs a non-empty trajectory")
    returns = traj.returns_for(cfg.gamma)
    logits, values = ad.forward_graph(nodes, traj.inputs(), spec)
    logp = ad.log_softmax(logits)
    advantage = returns - values.value
    loss = -ad.total(ad.pick(logp, traj.actions()) * advantage)
    if cfg.value_coef:
        loss = loss + cfg.value_coef * ad.total(ad.square(values - returns))
    if cfg.entropy_coef:
        entropy = -ad.total(ad.exp(logp) * logp)
        loss = loss - cfg.entropy_coef * entropy
    return loss


def batch_loss(trajs: list[Trajectory], nodes: dict[str, Tensor], spec: NetSpec, cfg: A2CConfig) -> Tensor:
    # fixed summation order (episode index) keeps the mean permutation-invariant
    ordered = sorted(trajs, key=lambda t: t.index)
    loss = a2c_loss(ordered[0], nodes, spec, cfg)
    for traj in ordered[1:]:
        loss = loss + a2c_loss(traj, nodes, spec, cfg)
    return loss * (1.0 / len(ordered))


def update_policy(params: ParamStore, trajs: list[Trajectory], spec: NetSpec, cfg: A2CConfig) -> ParamStore:
    """One SGD step on the mean actor-critic loss of ``trajs``."""
    if not trajs:
        raise ContractError("update_policy needs at least one trajectory")
    nodes = ad.leaves(params)
    grads = ad.backward(batch_loss(trajs, nodes, spec, cfg), nodes)
    if cfg.max_grad_norm is not None:
        grads = ad.clip_grad_norm(grads, cfg.max_grad_norm)
    return ad.sgd_step(params, grads, cfg.lr)


def reinforce_loss(traj: Trajectory, nodes: dict[str, Tensor], spec: NetSpec, advantage: float) -> Tensor:
    logits, _ = ad.forward_graph(nodes, traj.inputs(), spec)
    return -advantage * ad.total(ad.pick(ad.log_softmax(logits), traj.actions()))


def reinforce_update(
    params: ParamStore,
    traj: Trajectory,
    reward: float,
    baseline: float,
    lr: float,
    spec: NetSpec,
    momentum: float = 0.9,
    max_grad_norm: float | None = None,
) -> tuple[ParamStore, float]:
    """Episodic REINFORCE on a terminal scalar with a moving-average baseline.

    Returns the new parameters and the updated baseline.
    """
    if not np.isfinite(reward):
        raise ContractError(f"non-finite generator reward {reward}")
    new_baseline = momentum * baseline + (1.0 - momentum) * reward
    advantage = reward - baseline
    if advantage == 0 or lr == 0 or len(traj) == 0:
        return ad.copy_store(params), new_baseline
    nodes = ad.leaves(params)
    grads = ad.backward(reinforce_loss(traj, nodes, spec, advantage), nodes)
    if max_grad_norm is not None:
        grads = ad.clip_grad_norm(grads, max_grad_norm)
    return ad.sgd_step(params, grads, lr), new_baseline
