"""Trajectories, reward models and reward-to-go."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EOS = 0
REWARD_BOUND = 10.0

TERMINAL_TARGET = "terminal_target"
TERMINAL_PATTERN = "terminal_pattern"
DENSE = "dense"
REWARD_KINDS = (TERMINAL_TARGET, TERMINAL_PATTERN, DENSE)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One rollout for one prompt.

    Either ``step_dists`` (full next-token distributions) or the pair
    ``sampled_probs`` / ``dist_sq_norms`` must be given; the latter is all
    the proxy energy needs, which is what a replay log may carry.
    """

    prompt_id: int
    tokens: tuple
    rewards: np.ndarray
    step_dists: np.ndarray | None = None
    sampled_probs: np.ndarray | None = None
    dist_sq_norms: np.ndarray | None = None
    behavior_logprobs: np.ndarray | None = None

    def __post_init__(self):
        tokens = tuple(int(v) for v in self.tokens)
        T = len(tokens)
        if T == 0:
            raise ValueError("trajectory must have at least one token")
        if EOS in tokens[:-1]:
            raise ValueError("EOS may only appear as the last token")
        object.__setattr__(self, "tokens", tokens)
        rewards = _frozen(self.rewards)
        if rewards.shape != (T,):
            raise ValueError(f"rewards length {rewards.shape} does not match {T} tokens")
        object.__setattr__(self, "rewards", rewards)

        if self.step_dists is not None:
            dists = _frozen(self.step_dists)
            if dists.ndim != 2 or dists.shape[0] != T:
                raise ValueError("step_dists must have one row per token")
            if np.any(np.abs(dists.sum(axis=1) - 1.0) > 1e-12) or np.any(dists < 0):
                raise ValueError("each step distribution must be nonnegative and sum to 1")
            object.__setattr__(self, "step_dists", dists)
            object.__setattr__(self, "sampled_probs", _frozen(dists[np.arange(T), tokens]))
            object.__setattr__(self, "dist_sq_norms", _frozen(np.einsum("tv,tv->t", dists, dists)))
        elif self.sampled_probs is None or self.dist_sq_norms is None:
            raise ValueError("need step_dists or both sampled_probs and dist_sq_norms")
        else:
            object.__setattr__(self, "sampled_probs", _frozen(self.sampled_probs))
            object.__setattr__(self, "dist_sq_norms", _frozen(self.dist_sq_norms))
            if self.sampled_probs.shape != (T,) or self.dist_sq_norms.shape != (T,):
                raise ValueError("per-step probability arrays must match token length")

        if self.behavior_logprobs is not None:
            blp = _frozen(self.behavior_logprobs)
            if blp.shape != (T,):
                raise ValueError("behavior_logprobs must match token length")
            object.__setattr__(self, "behavior_logprobs", blp)

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    @property
    def returns(self) -> np.ndarray:
        return reward_to_go(self.rewards)

    @property
    def proxy_weights(self) -> np.ndarray:
        """Per-step logit-gradient proxy ``1 - 2 pi(y_t) + ||pi_t||^2``."""
        w = 1.0 - 2.0 * self.sampled_probs + self.dist_sq_norms
        return np.maximum(w, 0.0)

    def with_rewards(self, rewards) -> "Trajectory":
        return Trajectory(
            self.prompt_id,
            self.tokens,
            rewards,
            step_dists=self.step_dists,
            sampled_probs=None if self.step_dists is not None else self.sampled_probs,
            dist_sq_norms=None if self.step_dists is not None else self.dist_sq_norms,
            behavior_logprobs=self.behavior_logprobs,
        )

    def with_behavior(self, behavior_logprobs) -> "Trajectory":
        return Trajectory(
            self.prompt_id,
            self.tokens,
            self.rewards,
            step_dists=self.step_dists,
            sampled_probs=None if self.step_dists is not None else self.sampled_probs,
            dist_sq_norms=None if self.step_dists is not None else self.dist_sq_norms,
            behavior_logprobs=behavior_logprobs,
        )


@dataclass(frozen=True)
class RewardModel:
    """Deterministic reward rule.

    ``terminal_target``: ``value`` on the last step if ``target`` occurs.
    ``terminal_pattern``: ``value`` on the last step if ``pattern`` occurs
    as a contiguous run of tokens.
    ``dense``: ``table[token]`` at every step.
    """

    kind: str
    target: int | None = None
    pattern: tuple = ()
    table: tuple = ()
    value: float = 1.0
    _table: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if self.kind == TERMINAL_TARGET and self.target is None:
            raise ValueError("terminal_target needs a target token")
        if self.kind == TERMINAL_PATTERN and not self.pattern:
            raise ValueError("terminal_pattern needs a nonempty pattern")
        if self.kind == DENSE and not self.table:
            raise ValueError("dense reward needs a per-token table")
        object.__setattr__(self, "pattern", tuple(int(v) for v in self.pattern))
        object.__setattr__(self, "table", tuple(float(v) for v in self.table))
        bound_values = self.table if self.kind == DENSE else (self.value,)
        if any(abs(v) > REWARD_BOUND for v in bound_values):
            raise ValueError(f"rewards must lie in [-{REWARD_BOUND}, {REWARD_BOUND}]")
        object.__setattr__(self, "_table", np.array(self.table, dtype=np.float64))

    @classmethod
    def terminal_target(cls, target: int, value: float = 1.0) -> "RewardModel":
        return cls(TERMINAL_TARGET, target=target, value=value)

    @classmethod
    def terminal_pattern(cls, pattern: Sequence[int], value: float = 1.0) -> "RewardModel":
        return cls(TERMINAL_PATTERN, pattern=tuple(pattern), value=value)

    @classmethod
    def dense(cls, table: Sequence[float]) -> "RewardModel":
        return cls(DENSE, table=tuple(table))

    @classmethod
    def zero(cls) -> "RewardModel":
        return cls(TERMINAL_TARGET, target=-1, value=0.0)

    @property
    def is_terminal(self) -> bool:
        return self.kind != DENSE


def _contains_run(tokens: Sequence[int], pattern: Sequence[int]) -> bool:
    n, m = len(tokens), len(pattern)
    return any(tuple(tokens[i:i + m]) == tuple(pattern) for i in range(n - m + 1))


def score_rewards(model: RewardModel, tokens: Sequence[int]) -> np.ndarray:
    tokens = [int(v) for v in tokens]
    if not tokens:
        raise ValueError("cannot score an empty token sequence")
    if model.kind == DENSE:
        if max(tokens) >= len(model._table):
            raise ValueError("dense reward table does not cover every token")
        return model._table[tokens].copy()
    r = np.zeros(len(tokens))
    if model.kind == TERMINAL_TARGET:
        hit = model.target in tokens
    else:
        hit = _contains_run(tokens, model.pattern)
    if hit:
        r[-1] = model.value
    return r


def reward_to_go(rewards) -> np.ndarray:
    """Suffix sums ``G_t = sum_{k >= t} r_k``."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("reward sequence must be nonempty")
    return np.cumsum(r[::-1])[::-1].copy()


def realized_energy_profile(traj: Trajectory) -> np.ndarray:
    """Cumulative proxy energy ``W_t = sum_{j <= t} w_j``."""
    return np.cumsum(traj.proxy_weights)
