"""The four harness commands.

Each command is a plain function returning a result object and writing
its files under ``cfg.output.dir``. Work is split per run seed; seeds
may run on a thread pool capped by ``OTBLAB_THREADS`` and results are
always reassembled in seed order, so outputs do not depend on it.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from otblab import baselines as bl
from otblab import oracle as orc
from otblab.estimators import (
    EstimatorSpec,
    batch_diagnostics,
    diagnostics_from_arrays,
    grad_causal,
    grad_tis,
    group_gradients,
)
from otblab.harness import records
from otblab.harness.config import ExperimentConfig, instance_policy, reward_model
from otblab.harness.rng import EVAL, INSTANCE, MONTE_CARLO, ROLLOUT, make_rng
from otblab.harness.svg import bar_chart, line_chart
from otblab.policy import TABULAR, Policy
from otblab.rewards import Trajectory

log = logging.getLogger(__name__)

THREADS_ENV = "OTBLAB_THREADS"
EPSILONS = (1e-3, 1e-1, 1.0)
N_RANDOM_SCHEDULES = 50


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _per_seed(fn, seeds):
    seeds = list(seeds)
    workers = min(_threads(), len(seeds))
    if workers <= 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, seeds))


def _svg_enabled(cfg: ExperimentConfig) -> bool:
    return cfg.output.format == "csv+svg"


def with_onpolicy_behavior(traj: Trajectory) -> Trajectory:
    with np.errstate(divide="ignore"):
        return traj.with_behavior(np.log(traj.sampled_probs))


# -- verify ----------------------------------------------------------------

VERIFY_COLUMNS = ("seed", "check", "passed", "residual", "tolerance")


@dataclass(frozen=True)
class Check:
    name: str
    residual: float
    tolerance: float
    passed: bool


def _check(name: str, residual: float, tol: float, passed: bool | None = None) -> Check:
    residual = float(residual)
    if passed is None:
        passed = bool(np.isfinite(residual) and residual <= tol)
    return Check(name, residual, tol, bool(passed))


def _prefixes(space: orc.EnumeratedSpace) -> list[tuple]:
    seen = {}
    for seq in space.tokens:
        for k in range(len(seq)):
            seen.setdefault(seq[:k], None)
    return list(seen)


def verify_instance(cfg: ExperimentConfig, seed: int) -> list[Check]:
    policy = instance_policy(cfg, seed)
    rm = reward_model(cfg)
    space = orc.enumerate_space(policy)
    rng = make_rng(seed, INSTANCE)
    checks: list[Check] = []
    V = policy.vocab_size

    prefixes = _prefixes(space)
    zero_mean = 0.0
    for pre in prefixes:
        dist = policy.next_token_dist(pre)
        acc = sum(dist[v] * policy.score_function(pre, v) for v in range(V))
        zero_mean = max(zero_mean, float(np.abs(acc).max()))
    checks.append(_check("score_zero_mean", zero_mean, 1e-12))

    if policy.kind == TABULAR:
        checks.append(_check("proxy_exactness",
                             np.abs(space.step_energy - space.proxy_energy).max(), 1e-12))
    else:
        gap = np.abs(np.sqrt(space.step_energy) - np.sqrt(space.proxy_energy)).max()
        checks.append(_check("rank1_norm_proportionality", gap, 1e-12))

    fd_err = 0.0
    eps = 1e-5
    for _ in range(20):
        pre = prefixes[int(rng.integers(len(prefixes)))]
        y = int(rng.integers(V))
        d = rng.standard_normal(policy.num_params)
        plus = policy.with_params(policy.params + eps * d).log_prob(pre, y)
        minus = policy.with_params(policy.params - eps * d).log_prob(pre, y)
        fd_err = max(fd_err, abs((plus - minus) / (2 * eps) - policy.score_function(pre, y) @ d))
    checks.append(_check("finite_difference_score", fd_err, 1e-6))

    grad = orc.true_gradient(space, rm)
    checks.append(_check("causal_equals_noncausal_gradient",
                         np.abs(grad - orc.true_gradient(space, rm, causal=False)).max(), 1e-10))
    checks.append(_check("baseline_term_zero_mean",
                         np.abs(space.probs @ space.total_score).max(), 1e-10))

    otb = orc.otb_schedule(space, rm)
    iso = orc.isolated_schedule(space, rm)
    ogb = orc.exact_ogb(space, rm)
    values = orc.value_table(space, rm)
    for name, b in (("otb", otb), ("ogb", ogb), ("value", values), ("isolated", iso)):
        mean = space.probs @ orc.causal_grads(space, rm, b)
        checks.append(_check(f"unbiased_{name}", np.abs(mean - grad).max(), 1e-10))
    checks.append(_check("value_root_equals_expected_reward",
                         abs(orc.exact_value_baseline(space, rm, ()) - orc.expected_reward(space, rm)), 1e-12))

    plug = -otb if cfg.debug.negate_otb else otb
    checks.append(_check("stationarity",
                         np.abs(orc.stationarity_residuals(space, rm, plug)).max(), 1e-10))

    j_star = orc.objective_J(space, rm, otb)
    ew = space.probs @ space.realized_energy
    increases = []
    for k in range(space.t_max):
        if ew[k] <= 0.0:
            continue
        for e in EPSILONS:
            for sign in (1.0, -1.0):
                b = otb.copy()
                b[k] += sign * e
                increases.append(orc.objective_J(space, rm, b) - j_star)
    min_inc = min(increases) if increases else 0.0
    checks.append(Check("perturbation_increases_J", float(min_inc), 0.0, bool(increases) and min_inc > 0.0))

    gap = orc.variance_gap_terms(space, rm)
    checks.append(_check("term_a_zero", abs(gap["term_a"]), 1e-10))
    checks.append(_check("gap_equals_term_b", abs(gap["gap"] - gap["term_b"]), 1e-10))
    checks.append(_check("otb_J_le_ogb_J", gap["j_otb"] - gap["j_ogb"], 1e-12))

    iso_var = orc.exact_estimator_variance(space, rm, orc.causal_grads(space, rm, iso))
    # per-step schedules only; the prefix-dependent value table is outside this class
    others = [otb, orc.value_schedule(space, rm), orc.expected_reward(space, rm)]
    others += [iso + 0.5 * rng.standard_normal(space.t_max) for _ in range(N_RANDOM_SCHEDULES)]
    other_vars = [orc.exact_estimator_variance(space, rm, orc.causal_grads(space, rm, b)) for b in others]
    xterm_gap = 0.0
    for t in range(1, space.t_max + 1):
        if space.probs @ space.step_energy[:, t - 1] > 0.0:
            xterm_gap = max(xterm_gap, abs(orc.cross_term_optimal_baseline(space, rm, t) - iso[t - 1]))
    if policy.kind == TABULAR:
        checks.append(_check("isolated_variance_minimal", iso_var - min(other_vars), 1e-12))
        checks.append(_check("cross_term_baseline_equals_isolated", xterm_gap, 1e-10))
        value_var = orc.exact_estimator_variance(space, rm, orc.causal_grads(space, rm, values))
        checks.append(Check("prefix_value_minus_isolated_variance_report", value_var - iso_var, float("nan"), True))
    else:
        # correlated step gradients: reported, not asserted
        checks.append(Check("isolated_minus_otb_variance_report", iso_var - other_vars[0], float("nan"), True))
        checks.append(Check("cross_term_isolated_gap_report", xterm_gap, float("nan"), True))

    var_ogb = orc.exact_estimator_variance(space, rm, orc.noncausal_grads(space, rm, ogb))
    shifted = [orc.exact_estimator_variance(space, rm, orc.noncausal_grads(space, rm, ogb + s * e))
               for e in EPSILONS for s in (1.0, -1.0)]
    checks.append(_check("ogb_minimises_noncausal_variance", var_ogb - min(shifted), 1e-12))

    if policy.t_max >= 2:
        group = orc.homogeneous_group(policy, rm, 1, cfg.run.group_size, rng)
        cc = orc.convex_decomposition_check(group, 1)
        checks.append(_check("convex_decomposition", abs(cc.lhs - cc.rhs), 1e-10, cc.homogeneous and abs(cc.lhs - cc.rhs) <= 1e-10))
        group = orc.homogeneous_group(policy, rm, 1, cfg.run.group_size, rng, deterministic_suffix=True)
        cc = orc.convex_decomposition_check(group, 1)
        checks.append(_check("convex_decomposition_alpha_one",
                             max(abs(cc.alpha - 1.0), abs(cc.lhs - bl.otb_hat(group, 1))), 1e-10))

    tis_gap = 0.0
    for tr in space.trajectories(rm):
        tr = with_onpolicy_behavior(tr)
        tis_gap = max(tis_gap, float(np.abs(grad_tis(policy, tr, otb, 2.0) - grad_causal(policy, tr, otb)).max()))
    checks.append(_check("tis_identical_policy_reduction", tis_gap, 1e-12))
    return checks


@dataclass
class VerifyResult:
    rows: list
    failures: int
    path: Path


def cmd_verify(cfg: ExperimentConfig) -> VerifyResult:
    results = _per_seed(lambda s: (s, verify_instance(cfg, s)), cfg.run.seeds)
    rows = [(s, c.name, c.passed, c.residual, c.tolerance) for s, checks in results for c in checks]
    failures = sum(1 for r in rows if not r[2])
    path = records.write_csv(Path(cfg.output.dir) / "verify.csv", VERIFY_COLUMNS, rows)
    for r in rows:
        if not r[2]:
            log.warning("check failed: seed=%s %s residual=%r", r[0], r[1], r[3])
    return VerifyResult(rows, failures, path)


# -- compare ---------------------------------------------------------------

COMPARE_COLUMNS = ("seed", "kind", "group_size", "exact_J", "exact_variance",
                   "mc_var_of_mean", "mc_var_of_mean_tok", "mc_batches")
NSWEEP_COLUMNS = ("seed", "kind", "group_size", "mc_var_of_mean_tok")


def exact_baseline_table(space: orc.EnumeratedSpace, rm, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Population analogue of a baseline kind: ``(baseline table, advantage table)``.

    Group means become expectations, proxy weights become exact energies.
    Trajectory-level kinds give ``R - B`` broadcast; token-level ``G_t - B_t``.
    """
    G = space.returns(rm)
    R = space.total_rewards(rm)
    p = space.probs
    if kind in bl.TRAJECTORY_KINDS:
        if kind == "none":
            b = 0.0
        elif kind in ("grpo", "rloo"):
            b = float(p @ R)
        elif kind == "opo":
            b = float(p @ (R * space.lengths) / (p @ space.lengths))
        else:
            b = orc.exact_ogb(space, rm)
        B = np.full(space.mask.shape, b)
        return B, (R[:, None] - b) * space.mask
    if kind in ("otb", "otb_tis"):
        B = orc.baseline_table(space, orc.otb_schedule(space, rm))
    elif kind == "otb_isolated":
        B = orc.baseline_table(space, orc.isolated_schedule(space, rm))
    else:
        B = orc.value_table(space, rm)
    return B, (G - B) * space.mask


def value_function(space: orc.EnumeratedSpace, rm):
    """``prefix -> E[G_t | prefix]`` lookup built from an enumerated space."""
    table = orc.value_table(space, rm)
    lookup = {}
    for i, seq in enumerate(space.tokens):
        for k in range(len(seq)):
            lookup.setdefault(seq[:k], float(table[i, k]))
    return lambda prefix: lookup[tuple(prefix)]


def mc_group_diagnostics(space: orc.EnumeratedSpace, rm, kind: str, n: int, batches: int,
                         rng: np.random.Generator, clip: float = bl.DEFAULT_CLIP,
                         value_fn=None) -> dict:
    """Mean diagnostics over ``batches`` groups drawn from the exact trajectory law."""
    trajs = space.trajectories(rm)
    if kind == "otb_tis":
        trajs = [with_onpolicy_behavior(tr) for tr in trajs]
    idx = space.sample_indices(rng, (batches, n))
    T = space.t_max
    energies = space.proxy_energy.sum(axis=1)
    adv = np.zeros((batches, n))
    adv_tok = np.zeros((batches, n, T))
    grads = np.zeros((batches, n, space.policy.num_params))
    for b, row in enumerate(idx):
        group = bl.GroupBatch(space.prompt_id, tuple(trajs[i] for i in row))
        table = bl.advantages(group, kind, clip=clip, value_fn=value_fn)
        A = np.zeros((n, T))
        A[:, :table.values.shape[1]] = table.values * table.mask
        adv[b] = A[:, 0]
        adv_tok[b] = A
        grads[b] = np.einsum("nt,ntp->np", A, space.scores[row])
    d = diagnostics_from_arrays(energies[idx], adv, grads, space.proxy_energy[idx], adv_tok)
    return {k: float(np.mean(v)) for k, v in d.items()}


@dataclass
class CompareResult:
    rows: list
    nsweep_rows: list
    paths: list = field(default_factory=list)


def compare_instance(cfg: ExperimentConfig, seed: int):
    policy = instance_policy(cfg, seed)
    rm = reward_model(cfg)
    space = orc.enumerate_space(policy)
    vf = value_function(space, rm)
    rows, sweep = [], []
    for j, kind in enumerate(cfg.run.compare_kinds):
        B, A = exact_baseline_table(space, rm, kind)
        j_val = orc.objective_J(space, rm, B)
        var = orc.exact_estimator_variance(space, rm, orc.advantage_grads(space, A))
        mc = mc_group_diagnostics(space, rm, kind, cfg.run.group_size, cfg.run.mc_batches,
                                  make_rng(seed, MONTE_CARLO, j, cfg.run.group_size),
                                  cfg.estimator.clip, vf)
        rows.append((seed, kind, cfg.run.group_size, j_val, var,
                     mc["var_of_mean"], mc["var_of_mean_tok"], cfg.run.mc_batches))
        for n in cfg.run.n_sweep:
            mc_n = mc if n == cfg.run.group_size else mc_group_diagnostics(
                space, rm, kind, n, cfg.run.mc_batches, make_rng(seed, MONTE_CARLO, j, n),
                cfg.estimator.clip, vf)
            sweep.append((seed, kind, n, mc_n["var_of_mean_tok"]))
    return rows, sweep


def cmd_compare(cfg: ExperimentConfig) -> CompareResult:
    parts = _per_seed(lambda s: compare_instance(cfg, s), cfg.run.seeds)
    rows = [r for rs, _ in parts for r in rs]
    sweep = [r for _, ss in parts for r in ss]
    out = Path(cfg.output.dir)
    result = CompareResult(rows, sweep)
    result.paths.append(records.write_csv(out / "compare.csv", COMPARE_COLUMNS, rows))
    result.paths.append(records.write_csv(out / "compare_nsweep.csv", NSWEEP_COLUMNS, sweep))
    if _svg_enabled(cfg):
        kinds = list(cfg.run.compare_kinds)
        mean_var = {k: float(np.mean([r[4] for r in rows if r[1] == k])) for k in kinds}
        result.paths.append(records.write_text(out / "compare.svg", bar_chart(
            mean_var, title="Exact causal-estimator variance (mean over seeds)", ylabel="variance")))
        series = {}
        for k in kinds:
            ns = list(cfg.run.n_sweep)
            ys = [float(np.mean([r[3] for r in sweep if r[1] == k and r[2] == n])) for n in ns]
            series[k] = (ns, ys)
        result.paths.append(records.write_text(out / "compare_nsweep.svg", line_chart(
            series, title="Monte-Carlo variance of the batch mean", xlabel="group size N",
            ylabel="V-hat (token-resolved)", log_x=True)))
    return result


# -- train -----------------------------------------------------------------

TRAIN_COLUMNS = ("seed", "step", "kind", "expected_reward", "grad_norm", "var_of_mean",
                 "var_of_mean_tok", "total_power", "total_power_tok", "signal")


class TrainingDiverged(RuntimeError):
    def __init__(self, seed: int, step: int):
        super().__init__(f"non-finite parameters at step {step} (seed {seed})")
        self.seed = seed
        self.step = step


@dataclass
class TrainRun:
    seed: int
    rows: list
    optimum: float
    advantage_rows: list = field(default_factory=list)
    log_lines: list = field(default_factory=list)
    diverged_at: int | None = None


def _expected_reward(policy: Policy, rm, seed: int, step: int) -> tuple[float, orc.EnumeratedSpace | None]:
    try:
        space = orc.enumerate_space(policy)
    except ValueError:
        rng = make_rng(seed, EVAL, step)
        vals = [policy.sample_trajectory(0, rng, rm).total_reward for _ in range(1000)]
        return float(np.mean(vals)), None
    return orc.expected_reward(space, rm), space


def train_run(cfg: ExperimentConfig, seed: int, record: bool | None = None) -> TrainRun:
    record = cfg.output.record if record is None else record
    policy = instance_policy(cfg, seed)
    rm = reward_model(cfg)
    est = cfg.estimator
    spec = EstimatorSpec(est.form, est.baseline, est.clip, est.exclude_self)
    run = TrainRun(seed, [], orc.optimal_expected_reward(policy, rm))
    _, space = _expected_reward(policy, rm, seed, 0)

    for step in range(1, cfg.run.steps + 1):
        if est.baseline == "value_oracle":
            if space is None:
                raise ValueError("value_oracle training needs an enumerable instance")
            spec = EstimatorSpec(est.form, est.baseline, est.clip, est.exclude_self,
                                 value_fn=value_function(space, rm))
        grads, diags = [], []
        for g in range(cfg.run.batch_groups):
            rng = make_rng(seed, ROLLOUT, step, g)
            members = []
            for i in range(cfg.run.group_size):
                tr = policy.sample_trajectory(0, rng, rm)
                members.append(with_onpolicy_behavior(tr) if est.form == "causal_tis" or est.baseline == "otb_tis" else tr)
            group = bl.GroupBatch(0, tuple(members))
            table, g_vecs = group_gradients(policy, group, spec)
            grads.append(g_vecs)
            diags.append(batch_diagnostics(group, table, g_vecs))
            if record:
                for i, m in enumerate(group.members):
                    run.log_lines.append(records.trajectory_line(m, step=step, group=g))
                run.advantage_rows.extend(records.advantage_rows(step, g, group, table))
        mean_grad = np.concatenate(grads).mean(axis=0)
        with np.errstate(over="ignore", invalid="ignore"):
            new_params = policy.params + cfg.run.learning_rate * mean_grad
        if not np.all(np.isfinite(new_params)):
            run.diverged_at = step
            log.error("seed %d diverged at step %d", seed, step)
            break
        policy = policy.with_params(new_params)
        reward, space = _expected_reward(policy, rm, seed, step)
        run.rows.append((
            seed, step, est.baseline, reward,
            float(np.linalg.norm(mean_grad)),
            float(np.mean([d.var_of_mean for d in diags])),
            float(np.mean([d.var_of_mean_tok for d in diags])),
            float(np.mean([d.total_power for d in diags])),
            float(np.mean([d.total_power_tok for d in diags])),
            float(np.mean([d.signal for d in diags])),
        ))
    return run


def _window_mean(ys, window: int):
    ys = np.asarray(ys, dtype=np.float64)
    if window <= 1 or ys.size == 0:
        return ys
    c = np.cumsum(np.insert(ys, 0, 0.0))
    out = np.empty_like(ys)
    for i in range(ys.size):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


@dataclass
class TrainResult:
    runs: list
    paths: list = field(default_factory=list)


def cmd_train(cfg: ExperimentConfig) -> TrainResult:
    runs = _per_seed(lambda s: train_run(cfg, s), cfg.run.seeds)
    out = Path(cfg.output.dir)
    result = TrainResult(runs)
    rows = [r for run in runs for r in run.rows]
    result.paths.append(records.write_csv(out / "train.csv", TRAIN_COLUMNS, rows))
    if cfg.output.record:
        for run in runs:
            result.paths.append(records.write_text(out / f"trajectories_seed{run.seed}.jsonl", "".join(run.log_lines)))
            result.paths.append(records.write_csv(out / f"advantages_seed{run.seed}.csv",
                                                  records.ADVANTAGE_COLUMNS, run.advantage_rows))
    if _svg_enabled(cfg):
        w = cfg.run.window
        reward_series = {f"seed {r.seed}": ([row[1] for row in r.rows], list(_window_mean([row[3] for row in r.rows], w)))
                         for r in runs}
        var_series = {f"seed {r.seed}": ([row[1] for row in r.rows], list(_window_mean([row[6] for row in r.rows], w)))
                      for r in runs}
        kind = cfg.estimator.baseline
        result.paths.append(records.write_text(out / "train.svg", line_chart(
            reward_series, title=f"Expected reward ({kind})", xlabel="step", ylabel="expected reward")))
        result.paths.append(records.write_text(out / "train_variance.svg", line_chart(
            var_series, title=f"Variance of the batch mean ({kind})", xlabel="step", ylabel="V-hat (token-resolved)")))
    diverged = [r for r in runs if r.diverged_at is not None]
    if diverged:
        raise TrainingDiverged(diverged[0].seed, diverged[0].diverged_at)
    return result


# -- replay ----------------------------------------------------------------


def replay_advantages(log_path: Path, kind: str, clip: float = bl.DEFAULT_CLIP,
                      exclude_self: bool = False) -> list:
    """Recompute advantages from logged forward-pass probabilities only."""
    if kind == "value_oracle":
        raise ValueError("value_oracle needs the policy; it cannot be replayed from a log")
    if kind not in bl.BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}")
    rows = []
    for step, g, group in records.read_groups(Path(log_path)):
        table = bl.advantages(group, kind, clip=clip, exclude_self=exclude_self)
        rows.extend(records.advantage_rows(step, g, group, table))
    return rows


def cmd_replay(log_path: Path, kind: str, out_dir: Path, clip: float = bl.DEFAULT_CLIP,
               exclude_self: bool = False) -> Path:
    rows = replay_advantages(log_path, kind, clip, exclude_self)
    return records.write_csv(Path(out_dir) / "replay_advantages.csv", records.ADVANTAGE_COLUMNS, rows)
