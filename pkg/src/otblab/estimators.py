"""Policy-gradient estimators and batch variance diagnostics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from otblab import baselines as bl
from otblab.baselines import AdvantageTable, GroupBatch
from otblab.oracle import EnumeratedSpace, true_gradient
from otblab.policy import Policy
from otblab.rewards import RewardModel, Trajectory

NONCAUSAL = "noncausal"
CAUSAL = "causal"
CAUSAL_TIS = "causal_tis"
ESTIMATOR_FORMS = (NONCAUSAL, CAUSAL, CAUSAL_TIS)

TUPLE_CAP = 2_000_000


@dataclass(frozen=True)
class EstimatorSpec:
    """How a group of trajectories becomes gradient estimates.

    ``schedule`` (a fixed per-step baseline) overrides ``baseline`` when
    given; it makes the estimator group-independent.
    """

    form: str = CAUSAL
    baseline: str = "none"
    clip: float = bl.DEFAULT_CLIP
    exclude_self: bool = False
    schedule: tuple | None = None
    value_fn: Callable | None = None

    def __post_init__(self):
        if self.form not in ESTIMATOR_FORMS:
            raise ValueError(f"unknown estimator form {self.form!r}")
        if self.baseline not in bl.BASELINE_KINDS:
            raise ValueError(f"unknown baseline kind {self.baseline!r}")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.schedule is not None:
            object.__setattr__(self, "schedule", tuple(float(b) for b in self.schedule))


def grad_noncausal(policy: Policy, traj: Trajectory, baseline: float) -> np.ndarray:
    """``(R - B) * sum_t s_t``."""
    return (traj.total_reward - baseline) * policy.trajectory_scores(traj.tokens).sum(axis=0)


def grad_from_advantages(policy: Policy, traj: Trajectory, adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)[:traj.length]
    return adv @ policy.trajectory_scores(traj.tokens)


def grad_causal(policy: Policy, traj: Trajectory, schedule) -> np.ndarray:
    """``sum_t s_t (G_t - B_t)``."""
    schedule = np.asarray(schedule, dtype=np.float64)
    if schedule.shape[0] < traj.length:
        raise ValueError(f"schedule has {schedule.shape[0]} steps, trajectory has {traj.length}")
    return grad_from_advantages(policy, traj, traj.returns - schedule[:traj.length])


def target_logprobs(policy: Policy, traj: Trajectory) -> np.ndarray:
    return np.array([policy.log_prob(traj.tokens[:t], y) for t, y in enumerate(traj.tokens)])


def grad_tis(policy: Policy, traj: Trajectory, schedule, clip: float) -> np.ndarray:
    """``sum_t min(c, rho_t) s_t (G_t - B_t)`` for a trajectory drawn from the behavior policy."""
    if traj.behavior_logprobs is None:
        raise ValueError("TIS estimator needs behavior log-probabilities")
    schedule = np.asarray(schedule, dtype=np.float64)
    if schedule.shape[0] < traj.length:
        raise ValueError(f"schedule has {schedule.shape[0]} steps, trajectory has {traj.length}")
    rho = bl.clipped_ratios(traj, clip, target_logprobs(policy, traj))
    return grad_from_advantages(policy, traj, rho * (traj.returns - schedule[:traj.length]))


def group_gradients(policy: Policy, group: GroupBatch, spec: EstimatorSpec) -> tuple[AdvantageTable, np.ndarray]:
    """Advantage table and per-member gradient estimates ``(N, P)``."""
    if spec.schedule is not None:
        N, T = group.size, group.max_length
        sched = np.asarray(spec.schedule)
        values = np.zeros((N, T))
        mask = np.zeros((N, T), dtype=bool)
        for i, m in enumerate(group.members):
            if spec.form == NONCAUSAL:
                values[i, :m.length] = m.total_reward - sched[0]
            else:
                values[i, :m.length] = m.returns - sched[:m.length]
            mask[i, :m.length] = True
        table = AdvantageTable("schedule", values, mask)
    else:
        table = bl.advantages(group, spec.baseline, clip=spec.clip,
                              exclude_self=spec.exclude_self, value_fn=spec.value_fn)
    grads = []
    for i, m in enumerate(group.members):
        adv = table.row(i)
        if spec.form == NONCAUSAL:
            grads.append(adv[0] * policy.trajectory_scores(m.tokens).sum(axis=0))
            continue
        if spec.form == CAUSAL_TIS:
            adv = bl.clipped_ratios(m, spec.clip, target_logprobs(policy, m)) * adv
        grads.append(grad_from_advantages(policy, m, adv))
    return table, np.stack(grads)


@dataclass(frozen=True)
class BatchDiagnostics:
    """Batch second-moment statistics.

    ``var_of_mean`` may come out slightly negative from sampling noise; it
    is stored as computed. ``*_tok`` fields use token-resolved energies.
    """

    total_power: float
    signal: float
    var_of_mean: float
    grad_norm: float
    total_power_tok: float
    var_of_mean_tok: float
    n: int


def diagnostics_from_arrays(energies, adv, grads, energies_tok=None, adv_tok=None):
    """Vectorised diagnostics over any leading batch axes.

    ``energies``/``adv`` have shape ``(..., N)``, ``grads`` ``(..., N, P)``;
    token-resolved inputs are ``(..., N, T)``. Returns a dict of arrays.
    """
    energies = np.asarray(energies, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    N = energies.shape[-1]
    if N < 2:
        raise ValueError("diagnostics need N >= 2")
    p_total = (energies * adv ** 2).mean(axis=-1)
    mean_g = grads.mean(axis=-2)
    signal = np.einsum("...p,...p->...", mean_g, mean_g)
    out = {
        "total_power": p_total,
        "signal": signal,
        "var_of_mean": (p_total - signal) / (N - 1),
        "grad_norm": np.sqrt(signal),
    }
    if energies_tok is not None:
        p_tok = (np.asarray(energies_tok) * np.asarray(adv_tok) ** 2).sum(axis=-1).mean(axis=-1)
        out["total_power_tok"] = p_tok
        out["var_of_mean_tok"] = (p_tok - signal) / (N - 1)
    return out


def batch_diagnostics(group: GroupBatch, table: AdvantageTable, grads) -> BatchDiagnostics:
    """Total power, signal and variance-of-mean for one group.

    The trajectory-level advantage entering ``total_power`` is each
    member's first-step advantage (``R - B`` for trajectory-level kinds).
    """
    energies = np.array([m.proxy_weights.sum() for m in group.members])
    w_tok = np.zeros(table.values.shape)
    for i, m in enumerate(group.members):
        w_tok[i, :m.length] = m.proxy_weights
    d = diagnostics_from_arrays(energies, table.trajectory_advantages(), grads,
                                w_tok, table.values * table.mask)
    return BatchDiagnostics(
        float(d["total_power"]),
        float(d["signal"]),
        float(d["var_of_mean"]),
        float(d["grad_norm"]),
        float(d["total_power_tok"]),
        float(d["var_of_mean_tok"]),
        group.size,
    )


def group_expectation_bias(spec: EstimatorSpec, space: EnumeratedSpace, reward_model: RewardModel,
                           n: int, cap: int = TUPLE_CAP) -> float:
    """Max-norm of ``E[batch-mean gradient] - true gradient`` over all ordered ``n``-tuples."""
    if n < 2:
        raise ValueError("group size must be >= 2")
    if space.size ** n > cap:
        raise ValueError(f"tuple space too large: {space.size}^{n} exceeds cap {cap}")
    trajs = space.trajectories(reward_model)
    policy = space.policy
    mean = np.zeros(policy.num_params)
    for combo in itertools.product(range(space.size), repeat=n):
        p = float(np.prod(space.probs[list(combo)]))
        if p == 0.0:
            continue
        group = GroupBatch(space.prompt_id, tuple(trajs[i] for i in combo))
        _, grads = group_gradients(policy, group, spec)
        mean += p * grads.mean(axis=0)
    return float(np.max(np.abs(mean - true_gradient(space, reward_model))))
