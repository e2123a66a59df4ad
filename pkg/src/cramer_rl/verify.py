"""Randomized certification probes for the tabular operators.

Each probe draws seeded random instances, measures the quantity a theorem or
lemma bounds (contraction ratio, monotonicity violation, oracle gap, ...), and
reports the worst case against its threshold.  `run_probes` fans probes across
a thread pool (capped by the CRAMER_RL_THREADS environment variable) and
returns results in deterministic name order; each probe owns its RNG, so the
numbers do not depend on scheduling.
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tabular as tb

GAMMAS = (0.5, 0.9, 0.99)
ALPHAS = (0.0, 0.2)


@dataclass
class ProbeResult:
    name: str
    instances: int
    worst: float
    threshold: float
    passed: bool

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "instances": self.instances,
            "worst_ratio_or_error": self.worst,
            "threshold": self.threshold,
            "pass": self.passed,
        }


def _result(name, instances, worst, threshold):
    return ProbeResult(name, instances, float(worst), threshold, bool(worst <= threshold))


def _rng(seed, salt):
    return np.random.default_rng(np.random.SeedSequence((seed, salt)))


def probe_dist_operator_contraction(seed, instances):
    """Measured sup-d_e contraction ratio of the distributional soft backup,
    reported as the worst excess over gamma."""
    rng = _rng(seed, 1)
    worst = -np.inf
    count = 0
    for _ in range(instances):
        gamma = GAMMAS[int(rng.integers(len(GAMMAS)))]
        alpha = ALPHAS[int(rng.integers(len(ALPHAS)))]
        mdp = tb.random_mdp(rng, int(rng.integers(2, 6)), int(rng.integers(2, 4)), gamma,
                            terminal_prob=float(rng.uniform(0.0, 0.3)))
        policy = tb.random_policy(rng, mdp)
        z1 = tb.random_return_table(rng, mdp)
        if rng.random() < 0.5:
            # constant atom shift of z1: exercises the shift-invariance route
            c = float(rng.uniform(-1.0, 1.0)) or 0.5
            z2 = tb.ReturnTable(
                [[tb.DiscreteReturnDist(d.atoms + c, d.probs) for d in row]
                 for row in z1.dists]
            )
        else:
            z2 = tb.random_return_table(rng, mdp)
        if tb.sup_energy_distance(z1, z2) == 0.0:
            continue
        ratio = tb.contraction_probe(mdp, policy, z1, z2, alpha)
        worst = max(worst, ratio - gamma)
        count += 1
    return _result("dist_soft_operator_contraction", count, worst, 1e-9)


def _scalar_contraction(seed, instances, alpha_choices, name, salt):
    rng = _rng(seed, salt)
    worst = -np.inf
    for _ in range(instances):
        gamma = GAMMAS[int(rng.integers(len(GAMMAS)))]
        alpha = alpha_choices[int(rng.integers(len(alpha_choices)))]
        mdp = tb.random_mdp(rng, int(rng.integers(2, 7)), int(rng.integers(2, 4)), gamma,
                            terminal_prob=float(rng.uniform(0.0, 0.3)))
        policy = tb.random_policy(rng, mdp)
        q1 = rng.uniform(-5.0, 5.0, size=mdp.reward.shape)
        q2 = rng.uniform(-5.0, 5.0, size=mdp.reward.shape)
        gap = np.max(np.abs(q1 - q2))
        if gap == 0.0:
            continue
        t1 = tb.soft_bellman_operator_q(mdp, policy, q1, alpha)
        t2 = tb.soft_bellman_operator_q(mdp, policy, q2, alpha)
        worst = max(worst, np.max(np.abs(t1 - t2)) / gap - gamma)
    return _result(name, instances, worst, 1e-12)


def probe_scalar_operator_contraction(seed, instances):
    return _scalar_contraction(seed, instances, (0.0,), "scalar_operator_contraction", 2)


def probe_soft_operator_contraction(seed, instances):
    return _scalar_contraction(seed, instances, (0.1, 0.2, 1.0), "soft_operator_contraction", 3)


def probe_classical_improvement(seed, instances):
    """Greedy policy iteration must never decrease any state value."""
    rng = _rng(seed, 4)
    worst = -np.inf
    for _ in range(instances):
        mdp = tb.random_mdp(rng, int(rng.integers(2, 6)), int(rng.integers(2, 4)),
                            GAMMAS[int(rng.integers(len(GAMMAS)))])
        policy = tb.greedy_policy(mdp.reward)
        v_prev = None
        for _ in range(50):
            q = tb._evaluate_deterministic_exact(mdp, policy)
            v = (policy.probs * q).sum(axis=1)
            if v_prev is not None:
                worst = max(worst, float(np.max(v_prev - v)))
            v_prev = v
            improved = tb.greedy_policy(q)
            if np.array_equal(improved.probs, policy.probs):
                break
            policy = improved
    return _result("classical_improvement_monotone", instances, worst, 1e-9)


def probe_classical_vs_bruteforce(seed, instances):
    """Greedy iteration lands on the enumeration optimum (same greedy policy)."""
    rng = _rng(seed, 5)
    worst = 0.0
    for _ in range(instances):
        n_s = int(rng.integers(2, 6))
        n_a = int(rng.integers(2, 4))
        mdp = tb.random_mdp(rng, n_s, n_a, float(rng.choice([0.5, 0.9])))
        policy, q = tb.classical_policy_iteration(mdp)
        best_q = brute_force_optimal_q(mdp)
        mismatch = float(np.max(np.abs(q - best_q)))
        same_policy = np.array_equal(
            np.argmax(policy.probs, axis=1), np.argmax(tb.greedy_policy(best_q).probs, axis=1)
        )
        worst = max(worst, mismatch if same_policy else np.inf)
    return _result("classical_iteration_vs_enumeration", instances, worst, 1e-7)


def brute_force_optimal_q(mdp: tb.FiniteMdp, tol: float = 1e-13) -> np.ndarray:
    """Optimal Q by exhaustive evaluation of every deterministic policy.

    Evaluation iterates the Bellman backup rather than solving the linear
    system, keeping this oracle independent of the policy-iteration code path.
    """
    best_v = None
    best_actions = None
    for assignment in itertools.product(range(mdp.n_actions), repeat=mdp.n_states):
        probs = np.zeros((mdp.n_states, mdp.n_actions))
        probs[np.arange(mdp.n_states), assignment] = 1.0
        policy = tb.TabularPolicy(probs)
        q = tb.policy_evaluation(mdp, policy, 0.0, tol)
        v = q[np.arange(mdp.n_states), assignment]
        if best_v is None:
            best_v, best_actions = v, assignment
        elif np.all(v >= best_v - 1e-12) and np.any(v > best_v):
            best_v, best_actions = v, assignment
    probs = np.zeros((mdp.n_states, mdp.n_actions))
    probs[np.arange(mdp.n_states), best_actions] = 1.0
    return tb.policy_evaluation(mdp, tb.TabularPolicy(probs), 0.0, tol)


def probe_soft_improvement_onestep(seed, instances):
    """E_new[Q - a log pi_new] >= E_old[Q - a log pi_old] per state."""
    rng = _rng(seed, 6)
    worst = -np.inf
    for _ in range(instances):
        n_s, n_a = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        alpha = float(rng.uniform(0.05, 1.0))
        mdp = tb.random_mdp(rng, n_s, n_a, 0.9)
        q = rng.uniform(-3.0, 3.0, size=(n_s, n_a))
        old = tb.TabularPolicy(rng.dirichlet(np.ones(n_a), size=n_s))
        new = tb.soft_policy_improvement(mdp, q, alpha)

        def objective(pol):
            with np.errstate(divide="ignore"):
                logp = np.where(pol.probs > 0, np.log(pol.probs), 0.0)
            return (pol.probs * (q - alpha * logp)).sum(axis=1)

        worst = max(worst, float(np.max(objective(old) - objective(new))))
    return _result("soft_improvement_onestep", instances, worst, 1e-10)


def probe_soft_iteration_monotone(seed, instances):
    """Q_h of successive soft-iteration policies is entrywise non-decreasing."""
    rng = _rng(seed, 7)
    worst = -np.inf
    for _ in range(instances):
        gamma = float(rng.choice([0.5, 0.9]))
        mdp = tb.random_mdp(rng, int(rng.integers(2, 5)), int(rng.integers(2, 4)), gamma,
                            terminal_prob=float(rng.uniform(0.0, 0.3)))
        alpha = float(rng.choice([0.1, 0.2, 0.5]))
        eval_tol = 1e-13
        policy = tb.uniform_policy(mdp)
        q_prev = tb.policy_evaluation(mdp, policy, alpha, eval_tol)
        for _ in range(25):
            policy = tb.soft_policy_improvement(mdp, q_prev, alpha)
            q = tb.policy_evaluation(mdp, policy, alpha, eval_tol)
            worst = max(worst, float(np.max(q_prev - q)))
            q_prev = q
    return _result("soft_iteration_monotone", instances, worst, 1e-10)


def probe_soft_iteration_vs_oracle(seed, instances):
    """Soft policy iteration agrees with soft value iteration to 1e-6."""
    rng = _rng(seed, 8)
    worst = 0.0
    for _ in range(instances):
        gamma = float(rng.choice([0.5, 0.9]))
        mdp = tb.random_mdp(rng, 5, 3, gamma, terminal_prob=float(rng.uniform(0.0, 0.2)))
        alpha = float(rng.choice([0.1, 0.2]))
        _, q_pi = tb.soft_policy_iteration(mdp, alpha, tol=1e-9)
        q_star = tb.soft_value_iteration_oracle(mdp, alpha, tol=1e-12 * (1 - gamma))
        worst = max(worst, float(np.max(np.abs(q_pi - q_star))))
    return _result("soft_iteration_vs_oracle", instances, worst, 1e-6)


def probe_dist_fixed_point_unique(seed, instances):
    """Distributional evaluation from two different starts meets within 2*tol."""
    rng = _rng(seed, 9)
    tol = 1e-9
    worst = 0.0
    for _ in range(instances):
        gamma = float(rng.choice([0.5, 0.9]))
        mdp = tb.random_mdp(rng, int(rng.integers(2, 5)), 2, gamma)
        policy = tb.random_policy(rng, mdp)
        alpha = float(rng.choice([0.0, 0.2]))
        za = tb.dist_policy_evaluation(mdp, policy, alpha, tol, atom_cap=128)
        z0 = tb.ReturnTable(
            [[tb.DiscreteReturnDist.dirac(float(rng.uniform(-3, 3)))
              for _ in range(mdp.n_actions)] for _ in range(mdp.n_states)]
        )
        zb = tb.dist_policy_evaluation(mdp, policy, alpha, tol, atom_cap=128, z0=z0)
        worst = max(worst, tb.sup_energy_distance(za, zb) / (2 * tol))
    return _result("dist_fixed_point_uniqueness", instances, worst, 1.0)


def probe_dist_iteration_vs_oracle(seed, instances):
    """Mean table of distributional soft policy iteration vs the scalar oracle."""
    rng = _rng(seed, 10)
    worst = 0.0
    for _ in range(instances):
        gamma = float(rng.choice([0.5, 0.9]))
        mdp = tb.random_mdp(rng, 4, 2, gamma, terminal_prob=float(rng.uniform(0.0, 0.25)))
        alpha = float(rng.choice([0.1, 0.2]))
        _, z = tb.dist_soft_policy_iteration(mdp, alpha, tol=1e-7, atom_cap=64)
        q_star = tb.soft_value_iteration_oracle(mdp, alpha, tol=1e-11 * (1 - gamma))
        worst = max(worst, float(np.max(np.abs(z.mean_table() - q_star))))
    return _result("dist_iteration_vs_oracle", instances, worst, 1e-3)


def probe_expectation_consistency(seed, instances):
    """Means of the distributional backup match the scalar soft backup."""
    rng = _rng(seed, 11)
    worst = 0.0
    for _ in range(instances):
        gamma = GAMMAS[int(rng.integers(len(GAMMAS)))]
        alpha = ALPHAS[int(rng.integers(len(ALPHAS)))]
        mdp = tb.random_mdp(rng, int(rng.integers(2, 6)), int(rng.integers(2, 4)), gamma,
                            terminal_prob=float(rng.uniform(0.0, 0.3)))
        policy = tb.random_policy(rng, mdp)
        z = tb.random_return_table(rng, mdp)
        backed = tb.dist_soft_bellman(mdp, policy, z, alpha)
        scalar = tb.soft_bellman_operator_q(mdp, policy, z.mean_table(), alpha)
        worst = max(worst, float(np.max(np.abs(backed.mean_table() - scalar))))
    return _result("expectation_consistency", instances, worst, 1e-10)


PROBES = {
    "dist_soft_operator_contraction": probe_dist_operator_contraction,
    "scalar_operator_contraction": probe_scalar_operator_contraction,
    "soft_operator_contraction": probe_soft_operator_contraction,
    "classical_improvement_monotone": probe_classical_improvement,
    "classical_iteration_vs_enumeration": probe_classical_vs_bruteforce,
    "soft_improvement_onestep": probe_soft_improvement_onestep,
    "soft_iteration_monotone": probe_soft_iteration_monotone,
    "soft_iteration_vs_oracle": probe_soft_iteration_vs_oracle,
    "dist_fixed_point_uniqueness": probe_dist_fixed_point_unique,
    "dist_iteration_vs_oracle": probe_dist_iteration_vs_oracle,
    "expectation_consistency": probe_expectation_consistency,
}

# some probes are expensive per instance; scale their counts down
_INSTANCE_SCALE = {
    "classical_iteration_vs_enumeration": 0.2,
    "soft_iteration_vs_oracle": 0.2,
    "dist_fixed_point_uniqueness": 0.1,
    "dist_iteration_vs_oracle": 0.2,
    "soft_iteration_monotone": 0.3,
}


def thread_cap() -> int:
    raw = os.environ.get("CRAMER_RL_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return max(1, n) if n > 0 else 1


def run_probes(seed: int, instances: int, threads: int | None = None):
    """Run every probe; returns ProbeResults sorted by probe name."""
    if instances < 1:
        raise ValueError("instances must be >= 1")
    threads = threads if threads is not None else thread_cap()

    def launch(item):
        name, fn = item
        n = max(1, int(instances * _INSTANCE_SCALE.get(name, 1.0)))
        return fn(seed, n)

    items = sorted(PROBES.items())
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(launch, items))
    else:
        results = [launch(item) for item in items]
    return sorted(results, key=lambda r: r.name)
