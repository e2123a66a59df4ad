"""Exact finite-MDP engine.

Scalar and distributional soft Bellman operators, the policy evaluation /
improvement / iteration schemes built from them, and helpers for measuring
contraction ratios.  Return distributions are represented exactly as finite
atom/probability lists, since every source of randomness here (transitions,
policies) is finite.

Terminal states are absorbing (reward-0 self-loops) and every operator pins
their rows to the immediate reward, so entropy bonuses never accrue past the
end of an episode.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

ATOM_MERGE_TOL = 1e-12


class IterationCapExceeded(RuntimeError):
    """An iteration scheme hit its sweep cap; `.last` carries the last iterate."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


@dataclass
class FiniteMdp:
    transition: np.ndarray  # (S, A, S) row-stochastic in the last axis
    reward: np.ndarray  # (S, A)
    terminal: np.ndarray  # (S,) bool
    discount: float

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        s, a, s2 = self.transition.shape
        if s != s2 or self.reward.shape != (s, a) or self.terminal.shape != (s,):
            raise ValueError("inconsistent MDP table shapes")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must be in [0, 1), got {self.discount}")
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("rewards must be finite")
        row_sums = self.transition.sum(axis=2)
        if np.max(np.abs(row_sums - 1.0)) > 1e-12:
            raise ValueError("transition rows must sum to 1 within 1e-12")
        for st in np.flatnonzero(self.terminal):
            expect = np.zeros(s)
            expect[st] = 1.0
            if not np.allclose(self.transition[st], expect[None, :], atol=1e-12):
                raise ValueError(f"terminal state {st} must self-loop")
            if np.any(self.reward[st] != 0.0):
                raise ValueError(f"terminal state {st} must have zero reward")

    @property
    def n_states(self):
        return self.reward.shape[0]

    @property
    def n_actions(self):
        return self.reward.shape[1]


@dataclass
class TabularPolicy:
    probs: np.ndarray  # (S, A), rows on the simplex

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(self.probs < 0.0):
            raise ValueError("policy probabilities must be nonnegative")
        if np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("policy rows must sum to 1 within 1e-12")


@dataclass
class DiscreteReturnDist:
    """Finitely supported return distribution: sorted atoms + probabilities."""

    atoms: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.atoms.shape != self.probs.shape or self.atoms.ndim != 1:
            raise ValueError("atoms and probs must be matching 1-D arrays")
        if self.atoms.size == 0:
            raise ValueError("empty return distribution")
        if np.any(np.diff(self.atoms) <= 0.0):
            raise ValueError("atoms must be strictly increasing")
        if abs(self.probs.sum() - 1.0) > 1e-10:
            raise ValueError("probabilities must sum to 1 within 1e-10")

    @classmethod
    def dirac(cls, value: float):
        return cls(np.array([value]), np.array([1.0]))

    @classmethod
    def from_weighted_atoms(cls, atoms, probs, merge_tol=ATOM_MERGE_TOL):
        """Sort, merge atoms closer than `merge_tol`, and renormalize.

        Merged atoms keep the probability-weighted location so expectations are
        preserved exactly.
        """
        atoms = np.asarray(atoms, dtype=np.float64)
        probs = np.asarray(probs, dtype=np.float64)
        order = np.argsort(atoms, kind="stable")
        atoms, probs = atoms[order], probs[order]
        # group boundaries wherever the gap exceeds the merge tolerance
        new_group = np.empty(atoms.size, dtype=bool)
        new_group[0] = True
        np.greater(np.diff(atoms), merge_tol, out=new_group[1:])
        group = np.cumsum(new_group) - 1
        n = int(group[-1]) + 1
        p = np.zeros(n)
        np.add.at(p, group, probs)
        loc_weighted = np.zeros(n)
        np.add.at(loc_weighted, group, probs * atoms)
        # merged location is the probability-weighted mean; groups whose atoms
        # all coincide keep the exact value (no division-rounding residue)
        first_idx = np.flatnonzero(new_group)
        last_idx = np.append(first_idx[1:] - 1, atoms.size - 1)
        uniform = atoms[first_idx] == atoms[last_idx]
        loc = np.divide(loc_weighted, p, out=atoms[first_idx].copy(), where=(~uniform) & (p > 0.0))
        keep = p > 0.0
        p = p[keep]
        return cls(loc[keep], p / p.sum())

    def mean(self) -> float:
        return float(np.dot(self.atoms, self.probs))

    @property
    def n_atoms(self) -> int:
        return self.atoms.size


@dataclass
class ReturnTable:
    """One DiscreteReturnDist per (state, action) pair."""

    dists: list = field(default_factory=list)  # list[list[DiscreteReturnDist]]

    @classmethod
    def constant(cls, mdp: FiniteMdp, value: float = 0.0):
        return cls(
            [
                [DiscreteReturnDist.dirac(value) for _ in range(mdp.n_actions)]
                for _ in range(mdp.n_states)
            ]
        )

    def mean_table(self) -> np.ndarray:
        return np.array([[d.mean() for d in row] for row in self.dists])

    def max_atoms(self) -> int:
        return max(d.n_atoms for row in self.dists for d in row)

    def shape(self):
        return len(self.dists), len(self.dists[0])


def policy_entropy(policy: TabularPolicy) -> np.ndarray:
    """Per-state Shannon entropy with the 0*log(0) = 0 convention."""
    p = policy.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, -p * np.log(p), 0.0)
    return terms.sum(axis=1)


def bellman_operator_q(mdp: FiniteMdp, policy: TabularPolicy, q: np.ndarray) -> np.ndarray:
    """(T^pi Q)(s, a) = r(s, a) + gamma * E_{s', a'}[Q(s', a')]; terminal rows = r."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != mdp.reward.shape:
        raise ValueError("q table shape mismatch")
    next_v = (policy.probs * q).sum(axis=1)
    out = mdp.reward + mdp.discount * (mdp.transition @ next_v)
    out[mdp.terminal] = mdp.reward[mdp.terminal]
    return out


def soft_bellman_operator_q(
    mdp: FiniteMdp, policy: TabularPolicy, q: np.ndarray, alpha: float
) -> np.ndarray:
    """Entropy-augmented backup: adds gamma * alpha * E[H(pi(.|s'))] to the
    standard one.  Terminal rows stay pinned to the immediate reward."""
    if alpha < 0.0:
        raise ValueError("alpha must be >= 0")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != mdp.reward.shape:
        raise ValueError("q table shape mismatch")
    next_v = (policy.probs * q).sum(axis=1) + alpha * policy_entropy(policy)
    out = mdp.reward + mdp.discount * (mdp.transition @ next_v)
    out[mdp.terminal] = mdp.reward[mdp.terminal]
    return out


def dist_soft_bellman(
    mdp: FiniteMdp, policy: TabularPolicy, z: ReturnTable, alpha: float
) -> ReturnTable:
    """Exact distributional soft backup.

    Each output entry is the finite mixture with one atom
    r(s,a) + gamma * (z_atom - alpha * log pi(a'|s')) per next branch, weighted
    by P(s'|s,a) * pi(a'|s') * p(z_atom).  Zero-probability branches are
    skipped; terminal (s, a) collapses to the Dirac at r(s, a).
    """
    if alpha < 0.0:
        raise ValueError("alpha must be >= 0")
    s_n, a_n = z.shape()
    if (s_n, a_n) != (mdp.n_states, mdp.n_actions):
        raise ValueError("return table shape mismatch")
    gamma = mdp.discount
    out_rows = []
    for s in range(s_n):
        row = []
        for a in range(a_n):
            if mdp.terminal[s]:
                row.append(DiscreteReturnDist.dirac(mdp.reward[s, a]))
                continue
            atom_chunks, prob_chunks = [], []
            r = mdp.reward[s, a]
            for s2 in np.flatnonzero(mdp.transition[s, a] > 0.0):
                p_s2 = mdp.transition[s, a, s2]
                for a2 in np.flatnonzero(policy.probs[s2] > 0.0):
                    p_a2 = policy.probs[s2, a2]
                    src = z.dists[s2][a2]
                    shift = r + gamma * (src.atoms - alpha * np.log(p_a2))
                    atom_chunks.append(shift)
                    prob_chunks.append(p_s2 * p_a2 * src.probs)
            row.append(
                DiscreteReturnDist.from_weighted_atoms(
                    np.concatenate(atom_chunks), np.concatenate(prob_chunks)
                )
            )
        out_rows.append(row)
    return ReturnTable(out_rows)


def energy_distance_discrete(d1: DiscreteReturnDist, d2: DiscreteReturnDist) -> float:
    """Exact integral of the squared CDF gap between two step CDFs.

    The gap is constant between consecutive atoms of the merged support, so the
    integral is a finite sum of gap^2 * segment_length terms.
    """
    xs = np.union1d(d1.atoms, d2.atoms)
    if xs.size == 1:
        return 0.0
    c1 = np.concatenate(([0.0], np.cumsum(d1.probs)))
    c2 = np.concatenate(([0.0], np.cumsum(d2.probs)))
    f1 = c1[np.searchsorted(d1.atoms, xs, side="right")]
    f2 = c2[np.searchsorted(d2.atoms, xs, side="right")]
    gap = f1[:-1] - f2[:-1]
    return float(np.dot(gap * gap, np.diff(xs)))


def sup_energy_distance(z1: ReturnTable, z2: ReturnTable) -> float:
    """max over (s, a) of the exact discrete energy distance."""
    if z1.shape() != z2.shape():
        raise ValueError("return table shape mismatch")
    return max(
        energy_distance_discrete(a, b)
        for row1, row2 in zip(z1.dists, z2.dists)
        for a, b in zip(row1, row2)
    )


def contraction_probe(
    mdp: FiniteMdp, policy: TabularPolicy, z1: ReturnTable, z2: ReturnTable, alpha: float
) -> float:
    """Measured ratio sup-d_e(T z1, T z2) / sup-d_e(z1, z2)."""
    before = sup_energy_distance(z1, z2)
    if before == 0.0:
        raise ZeroDivisionError("contraction ratio undefined for identical tables")
    after = sup_energy_distance(
        dist_soft_bellman(mdp, policy, z1, alpha), dist_soft_bellman(mdp, policy, z2, alpha)
    )
    return after / before


def policy_evaluation(
    mdp: FiniteMdp,
    policy: TabularPolicy,
    alpha: float,
    tol: float,
    max_sweeps: int = 2_000_000,
) -> np.ndarray:
    """Iterate the (soft) scalar backup until the sup-norm change drops below tol."""
    if tol <= 0.0:
        raise ValueError("tol must be > 0")
    q = np.zeros_like(mdp.reward)
    for _ in range(max_sweeps):
        nxt = soft_bellman_operator_q(mdp, policy, q, alpha)
        if np.max(np.abs(nxt - q)) < tol:
            return nxt
        q = nxt
    raise IterationCapExceeded("policy evaluation did not converge", last=q)


def soft_policy_improvement(mdp: FiniteMdp, q: np.ndarray, alpha: float) -> TabularPolicy:
    """Boltzmann policy pi(a|s) proportional to exp(Q(s, a)/alpha)."""
    if alpha <= 0.0:
        raise ValueError("alpha must be > 0")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("q table shape mismatch")
    scaled = q / alpha
    scaled -= scaled.max(axis=1, keepdims=True)
    e = np.exp(scaled)
    return TabularPolicy(e / e.sum(axis=1, keepdims=True))


def uniform_policy(mdp: FiniteMdp) -> TabularPolicy:
    return TabularPolicy(np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions))


def soft_policy_iteration(
    mdp: FiniteMdp, alpha: float, tol: float, max_iters: int = 10_000
):
    """Alternate exact soft evaluation and Boltzmann improvement to convergence.

    Stops once the policy table changes by less than `tol` in sup norm.
    Returns (policy, q_table) for the final policy.
    """
    if alpha <= 0.0:
        raise ValueError("alpha must be > 0")
    eval_tol = tol * max(1.0 - mdp.discount, 1e-3) * 0.1
    policy = uniform_policy(mdp)
    q = policy_evaluation(mdp, policy, alpha, eval_tol)
    for _ in range(max_iters):
        improved = soft_policy_improvement(mdp, q, alpha)
        if np.max(np.abs(improved.probs - policy.probs)) < tol:
            return improved, policy_evaluation(mdp, improved, alpha, eval_tol)
        policy = improved
        q = policy_evaluation(mdp, policy, alpha, eval_tol)
    raise IterationCapExceeded("soft policy iteration did not converge", last=(policy, q))


def project_to_grid(dist: DiscreteReturnDist, n_atoms: int) -> DiscreteReturnDist:
    """Project onto a uniform grid over the distribution's own support.

    Each atom's mass is split linearly between its two neighbouring grid
    points, which preserves the mean exactly and bounds the CDF displacement by
    one grid spacing.
    """
    if n_atoms < 2:
        raise ValueError("n_atoms must be >= 2")
    if dist.n_atoms <= n_atoms:
        return dist
    lo, hi = dist.atoms[0], dist.atoms[-1]
    grid = np.linspace(lo, hi, n_atoms)
    spacing = (hi - lo) / (n_atoms - 1)
    pos = (dist.atoms - lo) / spacing
    low = np.clip(np.floor(pos).astype(np.int64), 0, n_atoms - 2)
    frac = pos - low
    p = np.zeros(n_atoms)
    np.add.at(p, low, dist.probs * (1.0 - frac))
    np.add.at(p, low + 1, dist.probs * frac)
    keep = p > 0.0
    return DiscreteReturnDist(grid[keep], p[keep] / p[keep].sum())


def dist_policy_evaluation(
    mdp: FiniteMdp,
    policy: TabularPolicy,
    alpha: float,
    tol: float,
    atom_cap: int = 64,
    z0: ReturnTable | None = None,
    max_sweeps: int = 100_000,
) -> ReturnTable:
    """Iterate the distributional soft backup to within `tol` of its fixed point.

    Stops once the successive-sweep sup energy distance falls below
    tol * (1 - gamma) / gamma, which bounds the distance to the fixed point by
    `tol` under the operator's gamma-contraction.  Entries exceeding `atom_cap`
    atoms are projected onto a uniform grid over their own support.
    """
    if atom_cap < 16:
        raise ValueError("atom_cap must be >= 16")
    gamma = mdp.discount
    thresh = tol * (1.0 - gamma) / gamma if gamma > 0.0 else tol
    z = z0 if z0 is not None else ReturnTable.constant(mdp)
    for _ in range(max_sweeps):
        nxt = dist_soft_bellman(mdp, policy, z, alpha)
        nxt = ReturnTable([[project_to_grid(d, atom_cap) for d in row] for row in nxt.dists])
        if sup_energy_distance(nxt, z) < thresh:
            return nxt
        z = nxt
    raise IterationCapExceeded("distributional evaluation did not converge", last=z)


def dist_soft_policy_iteration(
    mdp: FiniteMdp,
    alpha: float,
    tol: float,
    atom_cap: int = 64,
    max_iters: int = 10_000,
    eval_tol: float | None = None,
):
    """Distributional soft policy iteration.

    Evaluation runs the exact mixture backup (with grid projection once an
    entry exceeds `atom_cap` atoms); improvement applies the Boltzmann update
    to the mean table.  Returns (policy, return_table).
    """
    if alpha <= 0.0:
        raise ValueError("alpha must be > 0")
    if eval_tol is None:
        eval_tol = tol * 0.1
    policy = uniform_policy(mdp)
    z = dist_policy_evaluation(mdp, policy, alpha, eval_tol, atom_cap)
    for _ in range(max_iters):
        improved = soft_policy_improvement(mdp, z.mean_table(), alpha)
        if np.max(np.abs(improved.probs - policy.probs)) < tol:
            z = dist_policy_evaluation(mdp, improved, alpha, eval_tol, atom_cap, z0=z)
            return improved, z
        policy = improved
        z = dist_policy_evaluation(mdp, policy, alpha, eval_tol, atom_cap, z0=z)
    raise IterationCapExceeded(
        "distributional policy iteration did not converge", last=(policy, z)
    )


def soft_value_iteration_oracle(
    mdp: FiniteMdp, alpha: float, tol: float, max_sweeps: int = 2_000_000
) -> np.ndarray:
    """Independent fixed point of Q <- r + gamma * E_{s'}[alpha * logsumexp(Q(s',.)/alpha)].

    Serves as the acceptance oracle for both policy-iteration schemes; it never
    materializes a policy, so it shares no code path with them.
    """
    if alpha <= 0.0:
        raise ValueError("alpha must be > 0")
    q = np.zeros_like(mdp.reward)
    for _ in range(max_sweeps):
        scaled = q / alpha
        m = scaled.max(axis=1)
        soft_v = alpha * (m + np.log(np.exp(scaled - m[:, None]).sum(axis=1)))
        nxt = mdp.reward + mdp.discount * (mdp.transition @ soft_v)
        nxt[mdp.terminal] = mdp.reward[mdp.terminal]
        if np.max(np.abs(nxt - q)) < tol:
            return nxt
        q = nxt
    raise IterationCapExceeded("soft value iteration did not converge", last=q)


def greedy_policy(q: np.ndarray) -> TabularPolicy:
    """Deterministic argmax policy; ties go to the smallest action index."""
    q = np.asarray(q, dtype=np.float64)
    probs = np.zeros_like(q)
    probs[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return TabularPolicy(probs)


def _evaluate_deterministic_exact(mdp: FiniteMdp, policy: TabularPolicy) -> np.ndarray:
    """Exact Q^pi via the linear system (I - gamma * P_pi) V = r_pi."""
    r_pi = (policy.probs * mdp.reward).sum(axis=1)
    p_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    v = np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * p_pi, r_pi)
    q = mdp.reward + mdp.discount * (mdp.transition @ v)
    q[mdp.terminal] = mdp.reward[mdp.terminal]
    return q


def classical_policy_iteration(mdp: FiniteMdp, tol: float = 1e-10, max_iters: int = 10_000):
    """Greedy policy iteration with exact evaluation.

    Terminates when the greedy policy stops changing; the returned q table then
    satisfies the Bellman optimality equation within `tol`-level numerics.
    """
    policy = greedy_policy(mdp.reward)
    for _ in range(max_iters):
        q = _evaluate_deterministic_exact(mdp, policy)
        improved = greedy_policy(q)
        if np.array_equal(improved.probs, policy.probs):
            return policy, q
        policy = improved
    raise IterationCapExceeded("classical policy iteration did not converge", last=policy)


# --- seedable random instances -------------------------------------------------


def random_mdp(
    rng: np.random.Generator,
    n_states: int,
    n_actions: int,
    discount: float,
    terminal_prob: float = 0.0,
) -> FiniteMdp:
    """Dirichlet(1, ..., 1) transition rows, rewards uniform in [-1, 1]."""
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    reward = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    terminal = rng.random(n_states) < terminal_prob
    if terminal.all():
        terminal[int(rng.integers(n_states))] = False
    for s in np.flatnonzero(terminal):
        transition[s] = 0.0
        transition[s, :, s] = 1.0
        reward[s] = 0.0
    return FiniteMdp(transition, reward, terminal, discount)


def random_policy(rng: np.random.Generator, mdp: FiniteMdp) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states))


def random_return_table(
    rng: np.random.Generator, mdp: FiniteMdp, max_atoms: int = 5, value_range: float = 2.0
) -> ReturnTable:
    rows = []
    for _ in range(mdp.n_states):
        row = []
        for _ in range(mdp.n_actions):
            k = int(rng.integers(1, max_atoms + 1))
            atoms = np.sort(rng.uniform(-value_range, value_range, size=k))
            atoms = np.unique(atoms)
            probs = rng.dirichlet(np.ones(atoms.size))
            row.append(DiscreteReturnDist(atoms, probs))
        rows.append(row)
    return ReturnTable(rows)
