"""Joint minimization of the fused estimation criterion.

``solve`` runs ADMM with one auxiliary block-difference per condition pair
(Euclidean fusion prox) and one auxiliary copy per condition (l1 prox).
The theta step solves its coupled positive-definite system exactly: the
complete-graph coupling is a rank-n_theta correction of the per-condition
systems, so cached Cholesky factors plus one capacity-matrix solve give
the joint minimizer each iteration.

``solve_oracle`` is a deliberately independent slow check: plain
subgradient descent with diminishing steps and best-iterate tracking,
sharing only objective evaluation with the fast path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .criterion import (
    Hyperparameters,
    ObjectiveBreakdown,
    objective,
    pair_list,
    prox_l1,
)
from .data import ParameterVector, RegressionProblem

# Conditions k, i are reported as merged when ||theta_k - theta_i|| falls
# below this factor times (1 + max_k ||theta_k||).
MERGE_REL_TOL = 1e-5


class SolverNumericalError(RuntimeError):
    """Raised when iterates stop being finite."""


@dataclass(frozen=True)
class SolverConfig:
    rho: float = 1.0
    eps_abs: float = 1e-8
    eps_rel: float = 1e-6
    max_iter: int = 50_000
    adapt_rho: bool = True
    seed: int = 0  # consumed by the oracle only; solve itself is seedless
    trace: bool = False

    def __post_init__(self) -> None:
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.eps_abs <= 0 or self.eps_rel <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class SolveResult:
    thetas: list[ParameterVector]
    objective: ObjectiveBreakdown
    iterations: int
    converged: bool
    primal_residual: float
    dual_residual: float
    trace: list[tuple[int, float, float, float]] | None = None


def max_pairwise_distance(thetas: list[ParameterVector]) -> float:
    if len(thetas) < 2:
        return 0.0
    stack = np.asarray([t.values for t in thetas])
    best = 0.0
    for i in range(1, len(thetas)):
        best = max(best, float(np.linalg.norm(stack[:i] - stack[i], axis=1).max()))
    return best


def merge_threshold(thetas: list[ParameterVector], rel: float = MERGE_REL_TOL) -> float:
    scale = max((float(np.linalg.norm(t.values)) for t in thetas), default=0.0)
    return rel * (1.0 + scale)


def is_coalesced(thetas: list[ParameterVector], rel: float = MERGE_REL_TOL) -> bool:
    """True when every pair of condition models has effectively merged."""
    return max_pairwise_distance(thetas) <= merge_threshold(thetas, rel)


def merged_pairs(
    thetas: list[ParameterVector], rel: float = MERGE_REL_TOL
) -> list[tuple[int, int]]:
    """Index pairs whose models coincide up to the merge threshold."""
    thr = merge_threshold(thetas, rel)
    stack = np.asarray([t.values for t in thetas])
    return [
        (k, i)
        for (k, i) in pair_list(len(thetas))
        if float(np.linalg.norm(stack[k] - stack[i])) <= thr
    ]


class _ThetaStep:
    """Exact solver for A theta = rhs with A = blockdiag(M_k) - corr * B B^T.

    M_k = G_k + m_diag * I and B stacks K copies of the identity, which is
    exactly the theta-step Hessian: diagonal blocks G_k + (m_diag - corr) I
    and every off-diagonal block -corr * I.  Factorizations are cached for
    a fixed (m_diag, corr).
    """

    def __init__(self, G_list: list[np.ndarray], m_diag: float, corr: float):
        n = G_list[0].shape[0]
        eye = np.eye(n)
        self._factors = [cho_factor(G + m_diag * eye) for G in G_list]
        self._corr = corr
        if corr > 0.0:
            inv_sum = np.zeros((n, n))
            for f in self._factors:
                inv_sum += cho_solve(f, eye)
            # Capacity matrix of the rank-n coupling; PD because A is PD.
            self._cap = cho_factor(eye / corr - inv_sum)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        part = np.asarray([cho_solve(f, r) for f, r in zip(self._factors, rhs)])
        if self._corr == 0.0:
            return part
        t = cho_solve(self._cap, part.sum(axis=0))
        return part + np.asarray([cho_solve(f, t) for f in self._factors])


def _check_problems(problems: list[RegressionProblem]) -> None:
    if not problems:
        raise ValueError("need at least one problem")
    structure = problems[0].structure
    for p in problems:
        if p.structure != structure:
            raise ValueError(
                f"structure mismatch: {p.condition_name!r} differs from "
                f"{problems[0].condition_name!r}"
            )


def solve(
    problems: list[RegressionProblem],
    hp: Hyperparameters,
    cfg: SolverConfig | None = None,
    initial_thetas: list[ParameterVector] | None = None,
) -> SolveResult:
    """ADMM minimization of the joint criterion over all condition models.

    Stops once primal and dual residuals fall below their mixed
    absolute/relative thresholds; hitting max_iter returns a result with
    ``converged=False`` rather than raising.
    """
    cfg = cfg or SolverConfig()
    _check_problems(problems)
    structure = problems[0].structure
    K, n = len(problems), structure.n_theta

    G_list = [2.0 * p.Phi.T @ p.Phi for p in problems]
    b = np.asarray([2.0 * p.Phi.T @ p.Y for p in problems])
    if not np.all(np.isfinite(b)):
        raise ValueError("non-finite data in problems")

    use_pairs = hp.fusion_variant == "l2" and hp.lambda1 > 0.0 and K >= 2
    quad_fusion = hp.lambda1 if (hp.fusion_variant == "l2_squared" and K >= 2) else 0.0

    pairs = pair_list(K) if use_pairs else []
    P = len(pairs)
    if use_pairs:
        lo = np.asarray([p[0] for p in pairs])
        hi = np.asarray([p[1] for p in pairs])
        inc_t = np.zeros((K, P))  # transpose of the signed pair incidence
        inc_t[lo, np.arange(P)] = 1.0
        inc_t[hi, np.arange(P)] = -1.0

    if initial_thetas is not None:
        if len(initial_thetas) != K:
            raise ValueError("initial theta list length mismatch")
        theta = np.asarray([t.values for t in initial_thetas], dtype=float)
    else:
        theta = np.zeros((K, n))

    d = theta[lo] - theta[hi] if use_pairs else np.zeros((0, n))
    w = theta.copy()
    u = np.zeros_like(d)
    v = np.zeros_like(w)

    rho = cfg.rho
    rescales = 0

    def make_step(rho_val: float) -> _ThetaStep:
        # Desired diagonal blocks: G_k + (coupling count) * weight * I, with
        # every off-diagonal block -corr * I; M absorbs corr once since BB^T
        # carries identity blocks on its own diagonal.
        if use_pairs:
            return _ThetaStep(G_list, rho_val * (K + 1), rho_val)
        corr = 2.0 * quad_fusion
        return _ThetaStep(G_list, corr * K + rho_val, corr)

    step = make_step(rho)

    dim_pri = (P + K) * n
    dim_dual = K * n
    trace: list[tuple[int, float, float, float]] | None = [] if cfg.trace else None

    r_norm = np.inf
    s_norm = np.inf
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        rhs = b + rho * (w - v)
        if use_pairs:
            rhs += rho * (inc_t @ (d - u))
        theta = step.solve(rhs)
        if not np.all(np.isfinite(theta)):
            raise SolverNumericalError(f"non-finite iterate at iteration {it}")

        if use_pairs:
            d_old = d
            V = theta[lo] - theta[hi] + u
            norms = np.linalg.norm(V, axis=1)
            tau = hp.lambda1 / rho
            with np.errstate(divide="ignore", invalid="ignore"):
                scale = np.where(norms > tau, 1.0 - tau / np.maximum(norms, 1e-300), 0.0)
            d = scale[:, None] * V
            u = u + (theta[lo] - theta[hi]) - d
        w_old = w
        w = prox_l1(theta + v, hp.lambda2 / rho)
        v = v + theta - w

        pri_blocks = [theta - w]
        dual_change = w - w_old
        if use_pairs:
            pri_blocks.append(theta[lo] - theta[hi] - d)
            dual_change = dual_change + inc_t @ (d - d_old)
        r_norm = float(np.sqrt(sum(float(np.sum(bk * bk)) for bk in pri_blocks)))
        s_norm = rho * float(np.linalg.norm(dual_change))

        theta_norm = float(np.linalg.norm(theta))
        aux_norm = float(np.sqrt(np.sum(w * w) + np.sum(d * d)))
        dual_vec = rho * (v + (inc_t @ u if use_pairs else 0.0))
        eps_pri = cfg.eps_abs * np.sqrt(dim_pri) + cfg.eps_rel * max(theta_norm, aux_norm)
        eps_dual = cfg.eps_abs * np.sqrt(dim_dual) + cfg.eps_rel * float(
            np.linalg.norm(dual_vec)
        )

        if trace is not None:
            obj_now = objective(
                problems, [ParameterVector(t, structure) for t in theta], hp
            ).total
            trace.append((it, obj_now, r_norm, s_norm))

        if r_norm <= eps_pri and s_norm <= eps_dual:
            converged = True
            break

        if cfg.adapt_rho and rescales < 10:
            if r_norm > 10.0 * s_norm:
                rho *= 2.0
                u /= 2.0
                v /= 2.0
                step = make_step(rho)
                rescales += 1
            elif s_norm > 10.0 * r_norm:
                rho /= 2.0
                u *= 2.0
                v *= 2.0
                step = make_step(rho)
                rescales += 1

    thetas = [ParameterVector(theta[k], structure) for k in range(K)]
    return SolveResult(
        thetas=thetas,
        objective=objective(problems, thetas, hp),
        iterations=it,
        converged=converged,
        primal_residual=r_norm,
        dual_residual=s_norm,
        trace=trace,
    )


# ---------------------------------------------------------------------------
# Independent slow oracle
# ---------------------------------------------------------------------------

_ORACLE_MAX_K = 6
_ORACLE_MAX_NTHETA = 20
_ORACLE_MAX_ROWS = 100


def _single_linkage_groups(stack: np.ndarray, tol: float) -> list[list[int]]:
    """Greedy single-linkage grouping of rows at distance tolerance tol."""
    K = stack.shape[0]
    labels = list(range(K))
    for i in range(K):
        for j in range(i + 1, K):
            if np.linalg.norm(stack[i] - stack[j]) <= tol:
                old, new = labels[j], labels[i]
                labels = [new if l == old else l for l in labels]
    groups: dict[int, list[int]] = {}
    for idx, l in enumerate(labels):
        groups.setdefault(l, []).append(idx)
    return list(groups.values())


def solve_oracle(
    problems: list[RegressionProblem],
    hp: Hyperparameters,
    iterations: int = 200_000,
    seed: int = 0,
) -> SolveResult:
    """Desk-scale reference minimizer used to cross-check ``solve``.

    Subgradient descent with step c/sqrt(t) and best-iterate tracking.  At
    the l1 kinks the minimum-norm subdifferential element is used, with
    coefficients within one step's pull of zero treated as sitting at the
    kink, which suppresses the chatter plain sign subgradients produce.
    The tracked candidate set also includes snapped copies of the iterates
    (tiny coefficients zeroed, near-equal condition models averaged) and a
    tail average, all scored by plain objective evaluation.  Shares no
    minimization code with ``solve``.
    """
    _check_problems(problems)
    structure = problems[0].structure
    K, n = len(problems), structure.n_theta
    if K > _ORACLE_MAX_K or n > _ORACLE_MAX_NTHETA:
        raise ValueError(
            f"oracle size guard: K <= {_ORACLE_MAX_K} and "
            f"n_theta <= {_ORACLE_MAX_NTHETA} required (got K={K}, n_theta={n})"
        )
    if any(p.n_rows > _ORACLE_MAX_ROWS for p in problems):
        raise ValueError(f"oracle size guard: M <= {_ORACLE_MAX_ROWS} required")

    G = np.asarray([2.0 * p.Phi.T @ p.Phi for p in problems])
    bvec = np.asarray([2.0 * p.Phi.T @ p.Y for p in problems])
    c0 = float(sum(p.Y @ p.Y for p in problems))
    squared = hp.fusion_variant == "l2_squared"
    iu = np.triu_indices(K, k=1)

    def value_and_smooth_grad(th: np.ndarray) -> tuple[float, np.ndarray]:
        """Objective value and the smooth+fusion subgradient (l1 excluded)."""
        Gth = np.einsum("kij,kj->ki", G, th)
        f = c0 - float(np.sum(bvec * th)) + 0.5 * float(np.sum(th * Gth))
        g = Gth - bvec
        if K >= 2 and hp.lambda1 > 0.0:
            diffs = th[:, None, :] - th[None, :, :]
            if squared:
                f += hp.lambda1 * float((diffs[iu] ** 2).sum())
                g += 2.0 * hp.lambda1 * diffs.sum(axis=1)
            else:
                norms = np.linalg.norm(diffs, axis=2)
                f += hp.lambda1 * float(norms[iu].sum())
                with np.errstate(divide="ignore", invalid="ignore"):
                    inv = np.where(norms > 1e-300, 1.0 / np.maximum(norms, 1e-300), 0.0)
                g += hp.lambda1 * (diffs * inv[:, :, None]).sum(axis=1)
        f += hp.lambda2 * float(np.abs(th).sum())
        return f, g

    def f_value(th: np.ndarray) -> float:
        return value_and_smooth_grad(th)[0]

    # Safe initial step: reciprocal of the largest smooth curvature present.
    curvature = max(float(np.linalg.eigvalsh(Gk)[-1]) for Gk in G)
    if squared:
        curvature += 4.0 * hp.lambda1 * K
    c = 1.0 / max(curvature, 1e-12)

    rng = np.random.default_rng(seed)
    theta = np.asarray(
        [np.linalg.lstsq(p.Phi, p.Y, rcond=None)[0] for p in problems]
    )
    theta = theta + 1e-9 * (1.0 + np.abs(theta).max()) * rng.standard_normal(theta.shape)

    best_f = f_value(theta)
    best_theta = theta.copy()

    def consider(th: np.ndarray, val: float | None = None) -> None:
        nonlocal best_f, best_theta
        if val is None:
            val = f_value(th)
        if val < best_f:
            best_f = val
            best_theta = th.copy()

    def polish(th: np.ndarray) -> None:
        scale = 1.0 + float(np.abs(th).max())
        for tol in (1e-10, 1e-8, 1e-6, 1e-4):
            cand = np.where(np.abs(th) <= tol * scale, 0.0, th)
            consider(cand)
            if K >= 2:
                for grp in _single_linkage_groups(cand, tol * scale):
                    if len(grp) > 1:
                        merged = cand.copy()
                        merged[grp] = cand[grp].mean(axis=0)
                        consider(merged)
                        consider(np.where(np.abs(merged) <= tol * scale, 0.0, merged))

    # Annealed restarts: each stage reruns the c/sqrt(t) schedule from the
    # best point so far with a smaller constant, shrinking the kink-chatter
    # floor geometrically while early stages cover the travel distance.
    stage_fractions = (0.5, 0.25, 0.25)
    stage_scales = (1.0, 3e-2, 1e-3)
    tail_sum = np.zeros_like(theta)
    tail_count = 0

    for frac, scale in zip(stage_fractions, stage_scales):
        steps = max(1, int(frac * iterations))
        c_stage = c * scale
        theta = best_theta.copy()
        for t in range(1, steps + 1):
            eta = c_stage / np.sqrt(t)
            f, g = value_and_smooth_grad(theta)
            if hp.lambda2 > 0.0:
                sub = g + hp.lambda2 * np.sign(theta)
                # Minimum-norm element where the iterate sits at the kink
                # (within one step's pull of zero); the iterate itself is
                # left untouched so escaping coordinates can accumulate.
                at_kink = np.abs(theta) <= eta * hp.lambda2
                shrunk = np.sign(g) * np.maximum(np.abs(g) - hp.lambda2, 0.0)
                sub = np.where(at_kink, shrunk, sub)
            else:
                sub = g
            consider(theta, f)
            theta = theta - eta * sub
            if t % 1000 == 0:
                polish(best_theta)
            if scale == stage_scales[-1]:
                tail_sum += theta
                tail_count += 1
        consider(theta)
        polish(best_theta)

    if tail_count:
        consider(tail_sum / tail_count)
    polish(best_theta)

    thetas = [ParameterVector(best_theta[k], structure) for k in range(K)]
    return SolveResult(
        thetas=thetas,
        objective=objective(problems, thetas, hp),
        iterations=iterations,
        converged=True,
        primal_residual=0.0,
        dual_residual=0.0,
        trace=None,
    )
