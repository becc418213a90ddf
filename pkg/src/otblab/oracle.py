"""Exact expectations by exhaustive trajectory enumeration.

Every quantity here is computed with the true parameter-space score
functions of the policy, never with the logit proxy, so the proxy can be
checked against it. Per-step expectations only count trajectories still
alive at that step (length >= t); ratios are therefore unaffected by
renormalising over survivors.

Baselines can be passed as a scalar, a per-step schedule of length
``t_max`` or a full ``(n_trajectories, t_max)`` table (for prefix-dependent
baselines such as the value function).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, NamedTuple, Sequence

import numpy as np

from otblab.baselines import GroupBatch, weighted_centroid
from otblab.policy import EOS, TABULAR, Policy
from otblab.rewards import RewardModel, Trajectory, score_rewards

ENUMERATION_CAP = 2_000_000


def trajectory_count(vocab_size: int, t_max: int) -> int:
    """Leaves of the EOS-pruned generation tree."""
    b = vocab_size - 1
    return sum(b ** (k - 1) for k in range(1, t_max)) + vocab_size * b ** (t_max - 1)


@dataclass(eq=False)
class EnumeratedSpace:
    """All trajectories of one prompt with their exact probabilities.

    Arrays are padded to ``t_max`` steps; ``mask[i, t-1]`` marks step ``t``
    of trajectory ``i`` as valid.
    """

    policy: Policy
    prompt_id: int
    tokens: list
    probs: np.ndarray
    lengths: np.ndarray
    dists: np.ndarray
    token_array: np.ndarray
    mask: np.ndarray

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def t_max(self) -> int:
        return self.mask.shape[1]

    @cached_property
    def scores(self) -> np.ndarray:
        """Exact per-step score functions, shape ``(n, t_max, P)``."""
        pol = self.policy
        n, T = self.mask.shape
        V = pol.vocab_size
        deltas = -self.dists.copy()
        idx_n, idx_t = np.nonzero(self.mask)
        deltas[idx_n, idx_t, self.token_array[idx_n, idx_t]] += 1.0
        deltas[~self.mask] = 0.0
        if pol.kind == TABULAR:
            out = np.zeros((n, T, pol.num_params))
            for i, t in zip(idx_n, idx_t):
                row = pol.context_row(self.tokens[i][:t])
                out[i, t, row * V:(row + 1) * V] = deltas[i, t]
            return out
        feats = np.zeros((n, T, pol.feature_dim))
        for i, t in zip(idx_n, idx_t):
            feats[i, t] = pol.feature(self.tokens[i][:t])
        return np.einsum("ntv,ntd->ntvd", deltas, feats).reshape(n, T, -1)

    @cached_property
    def step_energy(self) -> np.ndarray:
        """Exact ``||s_t||^2``, zero past the end."""
        return np.einsum("ntp,ntp->nt", self.scores, self.scores)

    @cached_property
    def realized_energy(self) -> np.ndarray:
        """Exact cumulative ``W_t``, zero past the end."""
        return np.cumsum(self.step_energy, axis=1) * self.mask

    @cached_property
    def total_score(self) -> np.ndarray:
        return self.scores.sum(axis=1)

    @cached_property
    def total_energy(self) -> np.ndarray:
        """Exact ``||S(tau)||^2``."""
        S = self.total_score
        return np.einsum("np,np->n", S, S)

    @cached_property
    def proxy_energy(self) -> np.ndarray:
        """Logit-proxy ``w_t``, zero past the end."""
        p = np.take_along_axis(self.dists, np.maximum(self.token_array, 0)[..., None], axis=2)[..., 0]
        sq = np.einsum("ntv,ntv->nt", self.dists, self.dists)
        return np.maximum(1.0 - 2.0 * p + sq, 0.0) * self.mask

    def rewards(self, reward_model: RewardModel) -> np.ndarray:
        out = np.zeros(self.mask.shape)
        for i, toks in enumerate(self.tokens):
            out[i, :len(toks)] = score_rewards(reward_model, toks)
        return out

    def returns(self, reward_model: RewardModel) -> np.ndarray:
        r = self.rewards(reward_model)
        return np.cumsum(r[:, ::-1], axis=1)[:, ::-1] * self.mask

    def total_rewards(self, reward_model: RewardModel) -> np.ndarray:
        return self.rewards(reward_model).sum(axis=1)

    def trajectories(self, reward_model: RewardModel | None = None) -> list[Trajectory]:
        rewards = self.rewards(reward_model) if reward_model is not None else np.zeros(self.mask.shape)
        return [
            Trajectory(self.prompt_id, toks, rewards[i, :len(toks)], step_dists=self.dists[i, :len(toks)])
            for i, toks in enumerate(self.tokens)
        ]

    def sample_indices(self, rng: np.random.Generator, size) -> np.ndarray:
        """Draw trajectory indices from the exact trajectory distribution."""
        cdf = np.cumsum(self.probs)
        u = rng.random(size) * cdf[-1]
        return np.minimum(np.searchsorted(cdf, u, side="right"), self.size - 1)


def enumerate_space(policy: Policy, prompt_id: int = 0, t_max: int | None = None,
                    cap: int = ENUMERATION_CAP) -> EnumeratedSpace:
    t_max = policy.t_max if t_max is None else t_max
    if not 1 <= t_max <= policy.t_max:
        raise ValueError(f"t_max must be in [1, {policy.t_max}]")
    count = trajectory_count(policy.vocab_size, t_max)
    if count > cap:
        raise ValueError(f"state space too large: {count} trajectories exceeds cap {cap}")

    V = policy.vocab_size
    dist_cache: dict = {}
    leaves: list = []

    def walk(prefix: tuple, prob: float) -> None:
        dist = dist_cache.get(prefix)
        if dist is None:
            dist = dist_cache[prefix] = policy.next_token_dist(prefix)
        for v in range(V):
            seq = prefix + (v,)
            p = prob * dist[v]
            if v == EOS or len(seq) == t_max:
                leaves.append((seq, p))
            else:
                walk(seq, p)

    walk((), 1.0)
    n = len(leaves)
    tokens = [seq for seq, _ in leaves]
    probs = np.array([p for _, p in leaves])
    lengths = np.array([len(s) for s in tokens])
    mask = np.arange(t_max)[None, :] < lengths[:, None]
    token_array = np.full((n, t_max), -1, dtype=np.int64)
    dists = np.zeros((n, t_max, V))
    for i, seq in enumerate(tokens):
        token_array[i, :len(seq)] = seq
        for t in range(len(seq)):
            dists[i, t] = dist_cache[seq[:t]]
    return EnumeratedSpace(policy, prompt_id, tokens, probs, lengths, dists, token_array, mask)


# -- helpers ---------------------------------------------------------------


def _step_index(space: EnumeratedSpace, t: int) -> int:
    if not 1 <= t <= space.t_max:
        raise ValueError(f"step t={t} outside 1..{space.t_max}")
    return t - 1


def baseline_table(space: EnumeratedSpace, baselines) -> np.ndarray:
    """Broadcast a scalar, schedule or table to ``(n, t_max)``."""
    b = np.asarray(baselines, dtype=np.float64)
    n, T = space.mask.shape
    if b.ndim == 0:
        return np.full((n, T), float(b))
    if b.ndim == 1:
        if b.shape[0] < T:
            raise ValueError(f"schedule has {b.shape[0]} steps, need {T}")
        return np.broadcast_to(b[:T], (n, T)).copy()
    if b.shape != (n, T):
        raise ValueError(f"baseline table shape {b.shape} != {(n, T)}")
    return b


def _centroid_at(space, weights: np.ndarray, values: np.ndarray, t: int, what: str) -> float:
    k = _step_index(space, t)
    alive = space.mask[:, k]
    if not alive.any():
        raise ValueError(f"no surviving trajectory at step {t}")
    w = space.probs * weights[:, k] * alive
    den = w.sum()
    if den <= 0.0:
        raise ValueError(f"zero {what} at step {t}")
    return float(w @ values[:, k] / den)


def _schedule(space, weights, values) -> np.ndarray:
    """Per-step centroids; steps with no weight fall back to the survivor mean."""
    out = np.zeros(space.t_max)
    for k in range(space.t_max):
        alive = space.mask[:, k]
        pa = space.probs * alive
        w = pa * weights[:, k]
        if w.sum() > 0.0:
            out[k] = w @ values[:, k] / w.sum()
        elif pa.sum() > 0.0:
            out[k] = pa @ values[:, k] / pa.sum()
    return out


# -- exact quantities ------------------------------------------------------


def expected_reward(space: EnumeratedSpace, reward_model: RewardModel) -> float:
    return float(space.probs @ space.total_rewards(reward_model))


def true_gradient(space: EnumeratedSpace, reward_model: RewardModel, causal: bool = True) -> np.ndarray:
    """``E[sum_t s_t G_t]`` (causal) or ``E[R S]`` (non-causal)."""
    if causal:
        G = space.returns(reward_model)
        per_traj = np.einsum("nt,ntp->np", G, space.scores)
    else:
        per_traj = space.total_rewards(reward_model)[:, None] * space.total_score
    return space.probs @ per_traj


def exact_ogb(space: EnumeratedSpace, reward_model: RewardModel) -> float:
    """Total-energy-weighted reward centroid ``E[R ||S||^2] / E[||S||^2]``."""
    w = space.probs * space.total_energy
    den = w.sum()
    if den <= 0.0:
        raise ValueError("zero-energy space: optimal global baseline undefined")
    return float(w @ space.total_rewards(reward_model) / den)


def exact_otb(space: EnumeratedSpace, reward_model: RewardModel, t: int) -> float:
    """Realized-energy-weighted centroid of reward-to-go at step ``t``."""
    return _centroid_at(space, space.realized_energy, space.returns(reward_model), t, "realized energy")


def exact_isolated_baseline(space: EnumeratedSpace, reward_model: RewardModel, t: int) -> float:
    return _centroid_at(space, space.step_energy, space.returns(reward_model), t, "step energy")


def otb_schedule(space: EnumeratedSpace, reward_model: RewardModel) -> np.ndarray:
    return _schedule(space, space.realized_energy, space.returns(reward_model))


def isolated_schedule(space: EnumeratedSpace, reward_model: RewardModel) -> np.ndarray:
    return _schedule(space, space.step_energy, space.returns(reward_model))


def mean_schedule(space: EnumeratedSpace, reward_model: RewardModel) -> np.ndarray:
    """Survivor mean of ``G_t`` per step."""
    return _schedule(space, np.zeros(space.mask.shape), space.returns(reward_model))


def value_schedule(space: EnumeratedSpace, reward_model: RewardModel) -> np.ndarray:
    """Per-step projection of the value function: ``E[V(y_<t) | alive at t]``."""
    V = value_table(space, reward_model)
    out = np.zeros(space.t_max)
    for k in range(space.t_max):
        pa = space.probs * space.mask[:, k]
        if pa.sum() > 0.0:
            out[k] = pa @ V[:, k] / pa.sum()
    return out


def exact_value_baseline(space: EnumeratedSpace, reward_model: RewardModel, prefix: Sequence[int]) -> float:
    """``E[G_t | y_<t = prefix]`` with ``t = len(prefix) + 1``."""
    prefix = tuple(int(v) for v in prefix)
    k = len(prefix)
    if k >= space.t_max or EOS in prefix:
        raise ValueError(f"unreachable prefix {prefix}")
    sel = np.array([len(s) > k and s[:k] == prefix for s in space.tokens])
    p = space.probs * sel
    if p.sum() <= 0.0:
        raise ValueError(f"unreachable prefix {prefix}")
    return float(p @ space.returns(reward_model)[:, k] / p.sum())


def value_table(space: EnumeratedSpace, reward_model: RewardModel) -> np.ndarray:
    """``V(y_<t)`` at every valid step of every trajectory."""
    G = space.returns(reward_model)
    num: dict = {}
    den: dict = {}
    for i, seq in enumerate(space.tokens):
        for k in range(len(seq)):
            key = seq[:k]
            num[key] = num.get(key, 0.0) + space.probs[i] * G[i, k]
            den[key] = den.get(key, 0.0) + space.probs[i]
    out = np.zeros(space.mask.shape)
    for i, seq in enumerate(space.tokens):
        for k in range(len(seq)):
            d = den[seq[:k]]
            out[i, k] = num[seq[:k]] / d if d > 0.0 else 0.0
    return out


def objective_J(space: EnumeratedSpace, reward_model: RewardModel, baselines) -> float:
    """``sum_t E[W_t (G_t - B_t)^2]`` over surviving steps."""
    B = baseline_table(space, baselines)
    G = space.returns(reward_model)
    per_traj = (space.realized_energy * (G - B) ** 2 * space.mask).sum(axis=1)
    return float(space.probs @ per_traj)


def stationarity_residuals(space: EnumeratedSpace, reward_model: RewardModel, baselines) -> np.ndarray:
    """``E[W_t (G_t - B_t)]`` per step; zero at the optimal token baseline."""
    B = baseline_table(space, baselines)
    G = space.returns(reward_model)
    return space.probs @ (space.realized_energy * (G - B) * space.mask)


def variance_gap_terms(space: EnumeratedSpace, reward_model: RewardModel) -> dict:
    """Decompose ``J(B_global) = J(B*) + term_a + term_b``."""
    b_star = otb_schedule(space, reward_model)
    b_global = exact_ogb(space, reward_model)
    G = space.returns(reward_model)
    W = space.realized_energy * space.mask
    diff = b_star[None, :] - b_global
    term_a = 2.0 * float(space.probs @ (W * (G - b_star[None, :]) * diff).sum(axis=1))
    term_b = float(space.probs @ (W * diff ** 2).sum(axis=1))
    j_otb = objective_J(space, reward_model, b_star)
    j_ogb = objective_J(space, reward_model, b_global)
    return {
        "b_global": b_global,
        "j_otb": j_otb,
        "j_ogb": j_ogb,
        "gap": j_ogb - j_otb,
        "term_a": term_a,
        "term_b": term_b,
    }


def causal_grads(space: EnumeratedSpace, reward_model: RewardModel, baselines) -> np.ndarray:
    """Per-trajectory ``sum_t s_t (G_t - B_t)``, shape ``(n, P)``."""
    A = (space.returns(reward_model) - baseline_table(space, baselines)) * space.mask
    return np.einsum("nt,ntp->np", A, space.scores)


def advantage_grads(space: EnumeratedSpace, advantages: np.ndarray) -> np.ndarray:
    return np.einsum("nt,ntp->np", advantages * space.mask, space.scores)


def noncausal_grads(space: EnumeratedSpace, reward_model: RewardModel, baseline: float) -> np.ndarray:
    return (space.total_rewards(reward_model) - baseline)[:, None] * space.total_score


def exact_estimator_variance(space: EnumeratedSpace, reward_model: RewardModel,
                             estimator: Callable[[Trajectory], np.ndarray] | np.ndarray) -> float:
    """``E||g - E g||^2`` for a deterministic map trajectory -> gradient.

    ``estimator`` is either that map, or the ``(n, P)`` matrix of its
    values on ``space`` in enumeration order.
    """
    if callable(estimator):
        grads = np.stack([np.asarray(estimator(tr), dtype=np.float64)
                          for tr in space.trajectories(reward_model)])
    else:
        grads = np.asarray(estimator, dtype=np.float64)
    mean = space.probs @ grads
    dev = grads - mean
    return float(space.probs @ np.einsum("np,np->n", dev, dev))


def cross_term_optimal_baseline(space: EnumeratedSpace, reward_model: RewardModel, t: int) -> float:
    """Optimal step-``t`` baseline including cross-step correlations.

    Uses the simplified form in which ``E[B_k <s_k, s_t>]`` vanishes for
    ``k != t``: ``E[<sum_k G_k s_k, s_t>] / E[||s_t||^2]``.
    """
    k = _step_index(space, t)
    G = space.returns(reward_model)
    s_t = space.scores[:, k, :]
    g0 = np.einsum("nt,ntp->np", G * space.mask, space.scores)
    num = float(space.probs @ np.einsum("np,np->n", g0, s_t))
    den = float(space.probs @ space.step_energy[:, k])
    if den <= 0.0:
        raise ValueError(f"zero step energy at step {t}")
    return num / den


def variance_first_order_residual(space: EnumeratedSpace, reward_model: RewardModel, baselines, t: int) -> float:
    """First-order condition ``E[<g_c, s_t>]`` of the full variance objective."""
    k = _step_index(space, t)
    g = causal_grads(space, reward_model, baselines)
    return float(space.probs @ np.einsum("np,np->n", g, space.scores[:, k, :]))


def optimal_expected_reward(policy: Policy, reward_model: RewardModel) -> float:
    """Best achievable expected reward: the best single trajectory."""
    space = enumerate_space(policy)
    return float(space.total_rewards(reward_model).max())


# -- convex decomposition --------------------------------------------------


class ConvexCheck(NamedTuple):
    lhs: float
    rhs: float
    alpha: float
    homogeneity_gap: float
    homogeneous: bool


def convex_decomposition_check(group: GroupBatch, t: int, tol: float = 1e-10) -> ConvexCheck:
    """Compare the full-trajectory-energy baseline with its convex split.

    ``lhs`` weights ``G_t`` by total energy ``W_T``; ``rhs`` is
    ``alpha * B^{W_t} + (1 - alpha) * mean(G_t)`` with
    ``alpha = mean(W_t) / (mean(W_t) + mean(W_{>t}))``. Only members alive
    past step ``t`` take part. A group whose future energies differ by more
    than ``tol`` is flagged through ``homogeneous``.
    """
    k = t - 1
    members = [m for m in group.members if m.length > k]
    if not members:
        raise ValueError(f"no member alive at step {t}")
    G = np.array([m.returns[k] for m in members])
    profiles = [np.cumsum(m.proxy_weights) for m in members]
    W_t = np.array([p[k] for p in profiles])
    W_T = np.array([p[-1] for p in profiles])
    W_future = W_T - W_t
    lhs = weighted_centroid(G, W_T)
    wt_bar, wf_bar = W_t.mean(), W_future.mean()
    alpha = wt_bar / (wt_bar + wf_bar) if wt_bar + wf_bar > 0.0 else 0.0
    rhs = alpha * weighted_centroid(G, W_t) + (1.0 - alpha) * G.mean()
    gap = float(W_future.max() - W_future.min())
    return ConvexCheck(float(lhs), float(rhs), float(alpha), gap, gap <= tol)


def homogeneous_group(policy: Policy, reward_model: RewardModel, t: int, size: int,
                      rng: np.random.Generator, suffix_len: int = 2,
                      deterministic_suffix: bool = False) -> GroupBatch:
    """Group whose members share every step after ``t``.

    The first ``t`` tokens are drawn from ``policy`` conditioned on not
    emitting EOS; the remaining ``suffix_len`` steps use one shared token
    sequence (ending in EOS) with shared distributions, so the future
    energy ``W_{>t}`` is identical across members. With
    ``deterministic_suffix`` the shared distributions are one-hot and the
    future energy is zero.
    """
    V = policy.vocab_size
    if t >= policy.t_max:
        raise ValueError("need t < t_max so the prefix is sampled from the policy")
    suffix_tokens = [int(v) for v in rng.integers(1, V, size=suffix_len - 1)] + [EOS]
    if deterministic_suffix:
        suffix_dists = np.eye(V)[suffix_tokens]
    else:
        suffix_dists = rng.dirichlet(np.ones(V), size=suffix_len)
    members = []
    for _ in range(size):
        tokens: list[int] = []
        dists = []
        for _ in range(t):
            dist = policy.next_token_dist(tokens)
            cond = dist.copy()
            cond[EOS] = 0.0
            tokens.append(int(rng.choice(V, p=cond / cond.sum())))
            dists.append(dist)
        full = tokens + suffix_tokens
        rewards = score_rewards(reward_model, full)
        members.append(Trajectory(0, tuple(full), rewards,
                                  step_dists=np.vstack([np.array(dists), suffix_dists])))
    return GroupBatch(0, tuple(members))
