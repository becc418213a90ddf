"""Tiny autoregressive softmax policies with exact score functions.

Two families are supported:

* ``tabular``: one logit row per full prefix (every prefix of length
  ``< t_max`` that does not contain EOS). Score functions of different
  steps live on disjoint rows, so they are exactly orthogonal.
* ``linear``: a shared unembedding matrix ``W`` (vocab x feature_dim)
  applied to a hashed, unit-norm feature of the prefix. Step gradients
  share parameters and are correlated.

Token id 0 is EOS. Steps are 1-based wherever an API takes ``t``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from otblab.rewards import RewardModel, Trajectory, score_rewards

EOS = 0
TABULAR = "tabular"
LINEAR = "linear"
POLICY_KINDS = (TABULAR, LINEAR)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def prefix_contexts(vocab_size: int, t_max: int) -> list[tuple[int, ...]]:
    """All EOS-free prefixes of length < t_max, shortest first."""
    contexts: list[tuple[int, ...]] = [()]
    frontier: list[tuple[int, ...]] = [()]
    for _ in range(t_max - 1):
        frontier = [p + (v,) for p in frontier for v in range(1, vocab_size)]
        contexts.extend(frontier)
    return contexts


def hashed_feature(prefix: Sequence[int], dim: int, salt: int = 0) -> np.ndarray:
    """Deterministic unit-norm embedding of a prefix."""
    key = f"{salt}|{','.join(str(int(v)) for v in prefix)}".encode()
    digest = hashlib.blake2b(key, digest_size=16).digest()
    gen = np.random.Generator(np.random.Philox(int.from_bytes(digest, "little")))
    h = gen.standard_normal(dim)
    return h / np.linalg.norm(h)


def logit_delta_from_dist(dist: np.ndarray, token: int) -> np.ndarray:
    delta = -np.asarray(dist, dtype=np.float64)
    delta[token] += 1.0
    return delta


def proxy_weight(dist: np.ndarray, token: int) -> float:
    """Squared logit-gradient norm ``1 - 2 pi(token) + ||pi||^2``."""
    dist = np.asarray(dist, dtype=np.float64)
    return max(0.0, 1.0 - 2.0 * float(dist[token]) + float(dist @ dist))


def logit_cross_term(dist_k, token_k: int, dist_t, token_t: int) -> float:
    """Closed-form inner product of two logit deltas."""
    dist_k = np.asarray(dist_k, dtype=np.float64)
    dist_t = np.asarray(dist_t, dtype=np.float64)
    if dist_k.shape != dist_t.shape:
        raise ValueError(
            f"vocabulary size mismatch: {dist_k.shape[0]} vs {dist_t.shape[0]}"
        )
    same = 1.0 if token_k == token_t else 0.0
    return same - float(dist_t[token_k]) - float(dist_k[token_t]) + float(dist_k @ dist_t)


@dataclass(frozen=True, eq=False)
class Policy:
    """Immutable policy; ``params`` is the flat parameter vector."""

    kind: str
    vocab_size: int
    t_max: int
    params: np.ndarray
    feature_dim: int = 0
    feature_salt: int = 0
    contexts: dict = field(init=False, repr=False)
    _features: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        params = np.array(self.params, dtype=np.float64).ravel()
        if not np.all(np.isfinite(params)):
            raise ValueError("policy parameters must be finite")
        params.flags.writeable = False
        object.__setattr__(self, "params", params)
        contexts = {}
        if self.kind == TABULAR:
            contexts = {p: i for i, p in enumerate(prefix_contexts(self.vocab_size, self.t_max))}
            expected = len(contexts) * self.vocab_size
        else:
            if self.feature_dim < 1:
                raise ValueError("linear policy needs feature_dim >= 1")
            expected = self.vocab_size * self.feature_dim
        if params.size != expected:
            raise ValueError(f"expected {expected} parameters, got {params.size}")
        object.__setattr__(self, "contexts", contexts)
        object.__setattr__(self, "_features", {})

    # -- construction -------------------------------------------------

    @classmethod
    def create(
        cls,
        kind: str,
        vocab_size: int,
        t_max: int,
        *,
        feature_dim: int = 4,
        init: str = "zeros",
        sigma: float = 1.0,
        seed: int = 0,
    ) -> "Policy":
        if kind == TABULAR:
            n = len(prefix_contexts(vocab_size, t_max)) * vocab_size
            feature_dim = 0
        elif kind == LINEAR:
            n = vocab_size * feature_dim
        else:
            raise ValueError(f"unknown policy kind {kind!r}")
        if init == "zeros":
            params = np.zeros(n)
        elif init == "gaussian":
            params = sigma * np.random.Generator(np.random.Philox(seed)).standard_normal(n)
        else:
            raise ValueError(f"unknown init scheme {init!r}")
        return cls(kind, vocab_size, t_max, params, feature_dim=feature_dim, feature_salt=seed)

    @classmethod
    def tabular(cls, vocab_size: int, t_max: int, logits: dict | None = None) -> "Policy":
        """Tabular policy from an explicit ``{prefix: logit row}`` map (missing rows are zero)."""
        contexts = prefix_contexts(vocab_size, t_max)
        table = np.zeros((len(contexts), vocab_size))
        index = {p: i for i, p in enumerate(contexts)}
        for prefix, row in (logits or {}).items():
            if tuple(prefix) not in index:
                raise ValueError(f"uninitialized context: {tuple(prefix)}")
            table[index[tuple(prefix)]] = row
        return cls(TABULAR, vocab_size, t_max, table.ravel())

    def with_params(self, params: np.ndarray) -> "Policy":
        return Policy(
            self.kind,
            self.vocab_size,
            self.t_max,
            params,
            feature_dim=self.feature_dim,
            feature_salt=self.feature_salt,
        )

    @property
    def num_params(self) -> int:
        return self.params.size

    # -- forward quantities -------------------------------------------

    def feature(self, prefix: Sequence[int]) -> np.ndarray:
        key = tuple(prefix)
        h = self._features.get(key)
        if h is None:
            h = hashed_feature(key, self.feature_dim, self.feature_salt)
            self._features[key] = h
        return h

    def context_row(self, prefix: Sequence[int]) -> int:
        try:
            return self.contexts[tuple(prefix)]
        except KeyError:
            raise ValueError(f"uninitialized context: {tuple(prefix)}") from None

    def logits(self, prefix: Sequence[int]) -> np.ndarray:
        if len(prefix) >= self.t_max:
            raise ValueError(f"prefix length {len(prefix)} must be < t_max={self.t_max}")
        V = self.vocab_size
        if self.kind == TABULAR:
            row = self.context_row(prefix)
            return self.params[row * V:(row + 1) * V]
        W = self.params.reshape(V, self.feature_dim)
        return W @ self.feature(prefix)

    def next_token_dist(self, prefix: Sequence[int]) -> np.ndarray:
        return softmax(self.logits(prefix))

    def log_prob(self, prefix: Sequence[int], token: int) -> float:
        z = np.asarray(self.logits(prefix), dtype=np.float64)
        m = z.max()
        return float(z[token] - m - np.log(np.exp(z - m).sum()))

    def logit_delta(self, prefix: Sequence[int], token: int) -> np.ndarray:
        return logit_delta_from_dist(self.next_token_dist(prefix), token)

    def proxy_norm(self, prefix: Sequence[int], token: int) -> float:
        return proxy_weight(self.next_token_dist(prefix), token)

    def score_function(self, prefix: Sequence[int], token: int) -> np.ndarray:
        """Gradient of ``log pi(token | prefix)`` w.r.t. the flat parameters."""
        self._check_token(token)
        delta = self.logit_delta(prefix, token)
        if self.kind == TABULAR:
            g = np.zeros(self.num_params)
            row = self.context_row(prefix)
            V = self.vocab_size
            g[row * V:(row + 1) * V] = delta
            return g
        return np.outer(delta, self.feature(prefix)).ravel()

    def trajectory_scores(self, tokens: Sequence[int]) -> np.ndarray:
        """Per-step score functions, shape ``(T, num_params)``."""
        tokens = list(tokens)
        return np.stack([self.score_function(tokens[:t], y) for t, y in enumerate(tokens)])

    def _check_token(self, token: int) -> None:
        if not 0 <= token < self.vocab_size:
            raise ValueError(f"token {token} outside vocabulary of size {self.vocab_size}")

    # -- rollouts -----------------------------------------------------

    def sample_trajectory(
        self,
        prompt_id: int,
        rng: np.random.Generator,
        reward_model: RewardModel | None = None,
        t_max: int | None = None,
    ) -> Trajectory:
        """Roll out until EOS or ``t_max`` tokens (inverse-CDF sampling)."""
        t_max = self.t_max if t_max is None else t_max
        if not 1 <= t_max <= self.t_max:
            raise ValueError(f"t_max must be in [1, {self.t_max}]")
        tokens: list[int] = []
        dists = []
        for _ in range(t_max):
            dist = self.next_token_dist(tokens)
            cdf = np.cumsum(dist)
            y = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            y = min(y, self.vocab_size - 1)
            tokens.append(y)
            dists.append(dist)
            if y == EOS:
                break
        rewards = score_rewards(reward_model, tokens) if reward_model is not None else np.zeros(len(tokens))
        return Trajectory(prompt_id, tuple(tokens), rewards, step_dists=np.array(dists))
