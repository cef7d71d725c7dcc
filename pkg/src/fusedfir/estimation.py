"""Least-squares baselines: per-condition fits and the pooled fit.

Solutions come from an orthogonal (SVD) factorization rather than normal
equations, so rank-deficient problems deterministically yield the
minimum-norm solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ParameterVector, RegressionProblem

# Cost guard: smallest Gram eigenvalue is only computed up to this size.
_GRAM_EIG_LIMIT = 512


@dataclass(frozen=True)
class LsFit:
    """A least-squares solution with its residual and Gram diagnostics."""

    theta: ParameterVector
    residual_norm_sq: float
    gram_min_eig: float | None
    gram_positive_definite: bool


def _gram_diagnostics(Phi: np.ndarray) -> tuple[float | None, bool]:
    n = Phi.shape[1]
    gram = Phi.T @ Phi
    if n <= _GRAM_EIG_LIMIT:
        eigs = np.linalg.eigvalsh(gram)
        min_eig = float(eigs[0])
        scale = max(1.0, float(eigs[-1]))
        return min_eig, min_eig > 1e-12 * scale
    try:
        np.linalg.cholesky(gram)
        return None, True
    except np.linalg.LinAlgError:
        return None, False


def ls_fit(p: RegressionProblem) -> LsFit:
    """Minimize ||Y - Phi theta||^2; minimum-norm solution when singular."""
    if not (np.all(np.isfinite(p.Phi)) and np.all(np.isfinite(p.Y))):
        raise ValueError(f"non-finite inputs in problem {p.condition_name!r}")
    theta, *_ = np.linalg.lstsq(p.Phi, p.Y, rcond=None)
    residual = p.Y - p.Phi @ theta
    min_eig, pd = _gram_diagnostics(p.Phi)
    return LsFit(
        theta=ParameterVector(theta, p.structure),
        residual_norm_sq=float(residual @ residual),
        gram_min_eig=min_eig,
        gram_positive_definite=pd,
    )


def stack_problems(problems: list[RegressionProblem]) -> RegressionProblem:
    """Vertically stack problems sharing one structure into a single system."""
    if not problems:
        raise ValueError("need at least one problem")
    structure = problems[0].structure
    for p in problems:
        if p.structure != structure:
            raise ValueError(
                f"structure mismatch: {p.condition_name!r} has {p.structure}, "
                f"expected {structure}"
            )
    return RegressionProblem(
        Y=np.concatenate([p.Y for p in problems]),
        Phi=np.vstack([p.Phi for p in problems]),
        structure=structure,
        condition_name="+".join(p.condition_name for p in problems),
    )


def pooled_ls_fit(problems: list[RegressionProblem]) -> LsFit:
    """Single theta minimizing the summed squared residuals of all problems."""
    return ls_fit(stack_problems(problems))
