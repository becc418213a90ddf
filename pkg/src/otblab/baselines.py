"""Group-statistics baselines and per-token advantages.

All weighted baselines share one fallback: when the weights of the
surviving members sum to at most ``ZERO_WEIGHT`` (a fully confident
group has zero proxy energy), the plain survivor mean is used instead.
Steps ``t`` are 1-based; only members whose length is at least ``t``
enter a step-``t`` statistic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from otblab.rewards import Trajectory

ZERO_WEIGHT = 1e-12
LOGPROB_FLOOR = -50.0
DEFAULT_CLIP = 2.0

TRAJECTORY_KINDS = ("none", "grpo", "rloo", "opo", "ogb")
TOKEN_KINDS = ("otb", "otb_isolated", "otb_tis", "value_oracle")
BASELINE_KINDS = TRAJECTORY_KINDS + TOKEN_KINDS


@dataclass(frozen=True)
class GroupBatch:
    prompt_id: int
    members: tuple

    def __post_init__(self):
        members = tuple(self.members)
        if len(members) < 2:
            raise ValueError("a group needs at least two members")
        if any(m.prompt_id != self.prompt_id for m in members):
            raise ValueError("all group members must share the prompt id")
        object.__setattr__(self, "members", members)

    @classmethod
    def of(cls, members: Sequence[Trajectory]) -> "GroupBatch":
        members = tuple(members)
        return cls(members[0].prompt_id, members)

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def max_length(self) -> int:
        return max(m.length for m in self.members)

    def total_rewards(self) -> np.ndarray:
        return np.array([m.total_reward for m in self.members])


def weighted_centroid(values, weights) -> float:
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no values to average")
    den = weights.sum()
    if den <= ZERO_WEIGHT:
        return float(values.mean())
    return float(weights @ values / den)


def grpo_baseline(group: GroupBatch) -> float:
    return float(group.total_rewards().mean())


def rloo_baseline(group: GroupBatch, index: int) -> float:
    R = group.total_rewards()
    return float((R.sum() - R[index]) / (group.size - 1))


def opo_length_baseline(group: GroupBatch) -> float:
    """Length-weighted reward centroid."""
    lengths = np.array([m.length for m in group.members], dtype=np.float64)
    return weighted_centroid(group.total_rewards(), lengths)


def ogb_hat(group: GroupBatch) -> float:
    """Reward centroid weighted by total proxy energy."""
    energy = np.array([m.proxy_weights.sum() for m in group.members])
    return weighted_centroid(group.total_rewards(), energy)


def _alive(group: GroupBatch, t: int, exclude: int | None):
    if t < 1:
        raise ValueError("steps are 1-based")
    return [(i, m) for i, m in enumerate(group.members) if m.length >= t and i != exclude]


def _step_centroid(group, t, exclude, weight_fn) -> float:
    alive = _alive(group, t, exclude)
    if not alive:
        return 0.0
    G = [m.returns[t - 1] for _, m in alive]
    W = [weight_fn(m)[t - 1] for _, m in alive]
    return weighted_centroid(G, W)


def otb_hat(group: GroupBatch, t: int, exclude: int | None = None) -> float:
    """Reward-to-go centroid weighted by cumulative proxy energy at step ``t``."""
    return _step_centroid(group, t, exclude, lambda m: np.cumsum(m.proxy_weights))


def otb_isolated_hat(group: GroupBatch, t: int, exclude: int | None = None) -> float:
    return _step_centroid(group, t, exclude, lambda m: m.proxy_weights)


def clipped_ratios(traj: Trajectory, clip: float, target_logprobs=None) -> np.ndarray:
    """``min(clip, pi_theta / pi_beta)`` per step, computed in log space."""
    if traj.behavior_logprobs is None:
        raise ValueError("off-policy baseline needs behavior log-probabilities")
    if clip <= 0.0:
        raise ValueError("clip must be positive")
    if target_logprobs is None:
        with np.errstate(divide="ignore"):
            target_logprobs = np.log(traj.sampled_probs)
    log_rho = np.asarray(target_logprobs) - np.maximum(traj.behavior_logprobs, LOGPROB_FLOOR)
    return np.minimum(clip, np.exp(np.minimum(log_rho, np.log(clip))))


def tis_energy(traj: Trajectory, clip: float) -> np.ndarray:
    """Cumulative ``sum_j rho_bar_j^2 w_j``."""
    return np.cumsum(clipped_ratios(traj, clip) ** 2 * traj.proxy_weights)


def otb_tis_hat(group: GroupBatch, t: int, clip: float = DEFAULT_CLIP, exclude: int | None = None) -> float:
    for m in group.members:
        if m.behavior_logprobs is None:
            raise ValueError("off-policy baseline needs behavior log-probabilities on every member")
    return _step_centroid(group, t, exclude, lambda m: tis_energy(m, clip))


@dataclass(frozen=True)
class AdvantageTable:
    """``values[i, t-1]`` is member ``i``'s advantage at step ``t``; masked entries are 0."""

    kind: str
    values: np.ndarray
    mask: np.ndarray

    def row(self, i: int) -> np.ndarray:
        return self.values[i, self.mask[i]]

    def trajectory_advantages(self) -> np.ndarray:
        """First-step advantage of every member (``R - B`` for trajectory-level kinds)."""
        return self.values[:, 0].copy()


def advantages(
    group: GroupBatch,
    kind: str,
    *,
    clip: float = DEFAULT_CLIP,
    exclude_self: bool = False,
    value_fn: Callable[[tuple], float] | None = None,
) -> AdvantageTable:
    """Per-member, per-step advantages for a baseline kind.

    Trajectory-level kinds broadcast ``R - B`` over valid steps;
    token-level kinds use ``G_t - B_t``. ``exclude_self`` removes the
    member from its own token-level baseline. ``value_oracle`` needs
    ``value_fn(prefix) -> E[G_t | prefix]``.
    """
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}")
    N, T = group.size, group.max_length
    values = np.zeros((N, T))
    mask = np.zeros((N, T), dtype=bool)
    R = group.total_rewards()

    if kind in TRAJECTORY_KINDS:
        if kind == "none":
            b = np.zeros(N)
        elif kind == "grpo":
            b = np.full(N, grpo_baseline(group))
        elif kind == "rloo":
            b = np.array([rloo_baseline(group, i) for i in range(N)])
        elif kind == "opo":
            b = np.full(N, opo_length_baseline(group))
        else:
            b = np.full(N, ogb_hat(group))
        for i, m in enumerate(group.members):
            values[i, :m.length] = R[i] - b[i]
            mask[i, :m.length] = True
        return AdvantageTable(kind, values, mask)

    if kind == "value_oracle":
        if value_fn is None:
            raise ValueError("value_oracle needs a value function")
        for i, m in enumerate(group.members):
            G = m.returns
            for k in range(m.length):
                values[i, k] = G[k] - value_fn(m.tokens[:k])
            mask[i, :m.length] = True
        return AdvantageTable(kind, values, mask)

    step_fn = {
        "otb": otb_hat,
        "otb_isolated": otb_isolated_hat,
        "otb_tis": lambda g, t, exclude=None: otb_tis_hat(g, t, clip, exclude),
    }[kind]
    if exclude_self:
        for i, m in enumerate(group.members):
            G = m.returns
            for k in range(m.length):
                values[i, k] = G[k] - step_fn(group, k + 1, exclude=i)
            mask[i, :m.length] = True
    else:
        schedule = [step_fn(group, t) for t in range(1, T + 1)]
        for i, m in enumerate(group.members):
            values[i, :m.length] = m.returns - schedule[:m.length]
            mask[i, :m.length] = True
    return AdvantageTable(kind, values, mask)
