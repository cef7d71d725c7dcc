"""Four-stage batch procedure: bounds, tuning, joint solve, clustering.

After the joint solve, condition models that the fusion penalty pulled
close are merged by seeded k-means, each category is refit by pooled
least squares on its members, and every category model is scored on
held-out data with the FIT percentage.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _json
from .bounds import BoundsReport, compute_bounds, lambda1_max
from .criterion import FUSION_VARIANTS, Hyperparameters, objective
from .data import (
    ConditionDataset,
    IngestionError,
    ManifestEntry,
    ModelStructure,
    ParameterVector,
    RegressionProblem,
    build_regressor,
    condition_of,
    load_dataset,
    load_manifest,
)
from .estimation import LsFit, pooled_ls_fit
from .solver import SolveResult, SolverConfig, merged_pairs, solve

_KMEANS_MAX_ITER = 300


class PipelineStageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and the cause."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class GridSearchFailedError(RuntimeError):
    """No grid point converged, so no hyperparameters can be selected."""


# ---------------------------------------------------------------------------
# FIT metric
# ---------------------------------------------------------------------------

def fit_metric(Y: np.ndarray, Y_hat: np.ndarray) -> float:
    """Goodness-of-fit percentage: 100 * (1 - SSE / variance-scaled SSE).

    100 means a perfect prediction, 0 matches the mean predictor, and
    arbitrarily negative values are possible.
    """
    Y = np.asarray(Y, dtype=float)
    Y_hat = np.asarray(Y_hat, dtype=float)
    if Y.shape != Y_hat.shape or Y.ndim != 1:
        raise ValueError("Y and Y_hat must be 1-D arrays of equal length")
    if Y.size < 2:
        raise ValueError("need at least two samples")
    denom = float(((Y - Y.mean()) ** 2).sum())
    if denom == 0.0:
        raise ValueError("undefined FIT (zero variance)")
    num = float(((Y - Y_hat) ** 2).sum())
    return (1.0 - num / denom) * 100.0


@dataclass(frozen=True)
class FitReport:
    model_source: str
    eval_dataset: str
    fit_percent: float | None  # None marks an undefined cell


def cross_evaluate(
    models: dict[str, ParameterVector],
    eval_problems: list[RegressionProblem],
) -> list[FitReport]:
    """FIT of every model on every evaluation dataset."""
    reports = []
    for source, theta in models.items():
        for p in eval_problems:
            if p.structure != theta.structure:
                raise ValueError(
                    f"structure mismatch between model {source!r} and dataset "
                    f"{p.condition_name!r}"
                )
            try:
                fit = fit_metric(p.Y, p.Phi @ theta.values)
            except ValueError:
                fit = None
            reports.append(
                FitReport(
                    model_source=source,
                    eval_dataset=p.condition_name,
                    fit_percent=fit,
                )
            )
    return reports


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Candidate penalty weights: fusion as fractions of its upper bound,
    sparsity as absolute values."""

    lambda1_factors: tuple[float, ...] = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)
    lambda2_values: tuple[float, ...] = (0.0, 1e-6, 1e-4, 1e-2, 1.0, 1e2)

    def __post_init__(self) -> None:
        for name in ("lambda1_factors", "lambda2_values"):
            vals = tuple(float(v) for v in getattr(self, name))
            object.__setattr__(self, name, vals)
            if not vals:
                raise ValueError(f"{name} must be non-empty")
            if any(not np.isfinite(v) or v < 0 for v in vals):
                raise ValueError(f"{name} must be finite and nonnegative")
            if list(vals) != sorted(vals):
                raise ValueError(f"{name} must be sorted ascending")


@dataclass(frozen=True)
class ScoreRow:
    lambda1: float
    lambda2: float
    score: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class GridSearchResult:
    hp: Hyperparameters
    score_table: list[ScoreRow]
    lambda1_bound: float | None


def _better_row(candidate: ScoreRow, incumbent: ScoreRow | None) -> bool:
    """Lower score wins; exact ties prefer larger lambda1, then lambda2."""
    if incumbent is None:
        return True
    if candidate.score != incumbent.score:
        return candidate.score < incumbent.score
    return (candidate.lambda1, candidate.lambda2) > (incumbent.lambda1, incumbent.lambda2)


def _validation_score(
    val_problems: list[RegressionProblem],
    result: SolveResult,
    hp: Hyperparameters,
    literal_criterion: bool,
) -> float:
    if literal_criterion:
        return objective(val_problems, result.thetas, hp).total
    sse = 0.0
    for p, t in zip(val_problems, result.thetas):
        r = p.Y - p.Phi @ t.values
        sse += float(r @ r)
    return sse


def grid_search(
    estimation_problems: list[RegressionProblem],
    validation_problems: list[RegressionProblem],
    grid: GridSpec,
    cfg: SolverConfig | None = None,
    *,
    fusion_variant: str = "l2",
    literal_criterion: bool = False,
    threads: int | None = None,
) -> GridSearchResult:
    """Score every grid point and pick the best-validating weights.

    Models are estimated on the estimation problems and scored on the
    validation problems (squared-error score by default; the full
    criterion value when ``literal_criterion``).  Non-converged points
    score +inf and stay flagged in the table.  Ties prefer the larger
    lambda1, then the larger lambda2.
    """
    cfg = cfg or SolverConfig()
    if fusion_variant not in FUSION_VARIANTS:
        raise ValueError(f"unknown fusion variant {fusion_variant!r}")
    if len(estimation_problems) != len(validation_problems) or not estimation_problems:
        raise ValueError("estimation and validation problem lists must align")
    for pe, pv in zip(estimation_problems, validation_problems):
        if pe.structure != pv.structure:
            raise ValueError("estimation/validation structure mismatch")
        if condition_of(pe.condition_name) != condition_of(pv.condition_name):
            raise ValueError(
                f"condition mismatch: {pe.condition_name!r} vs {pv.condition_name!r}"
            )

    if len(estimation_problems) >= 2:
        bound = lambda1_max(estimation_problems)
        lambda1_candidates = [f * bound for f in grid.lambda1_factors]
    else:
        bound = None
        lambda1_candidates = [0.0]

    points = [
        Hyperparameters(lambda1=l1, lambda2=l2, fusion_variant=fusion_variant)
        for l1 in lambda1_candidates
        for l2 in grid.lambda2_values
    ]

    def evaluate(hp: Hyperparameters) -> ScoreRow:
        result = solve(estimation_problems, hp, cfg)
        if not result.converged:
            return ScoreRow(hp.lambda1, hp.lambda2, float("inf"), False, result.iterations)
        score = _validation_score(validation_problems, result, hp, literal_criterion)
        return ScoreRow(hp.lambda1, hp.lambda2, score, True, result.iterations)

    if threads is not None and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            table = list(pool.map(evaluate, points))
    else:
        table = [evaluate(hp) for hp in points]

    best: ScoreRow | None = None
    for row in table:
        if _better_row(row, best):
            best = row
    if best is None or not np.isfinite(best.score):
        raise GridSearchFailedError("no grid point converged")
    hp = Hyperparameters(best.lambda1, best.lambda2, fusion_variant=fusion_variant)
    return GridSearchResult(hp=hp, score_table=table, lambda1_bound=bound)


# ---------------------------------------------------------------------------
# K-means
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClusterAssignment:
    labels: dict[str, int]
    centroids: list[ParameterVector]
    k: int
    inertia: float


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[int(rng.integers(X.shape[0]))]]
    for _ in range(k - 1):
        d2 = np.min(
            [np.sum((X - c) ** 2, axis=1) for c in centers], axis=0
        )
        total = float(d2.sum())
        if total == 0.0:
            idx = int(rng.integers(X.shape[0]))
        else:
            idx = int(rng.choice(X.shape[0], p=d2 / total))
        centers.append(X[idx])
    return np.asarray(centers)


def _lloyd(X: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    k = centers.shape[0]
    labels = np.full(X.shape[0], -1)
    prev_inertia = np.inf
    for _ in range(_KMEANS_MAX_ITER):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)
        # Empty-cluster repair: hand the point farthest from its centroid over.
        repaired = False
        for c in range(k):
            if not np.any(new_labels == c):
                far = int(np.argmax(d2[np.arange(X.shape[0]), new_labels]))
                new_labels[far] = c
                d2[far, :] = 0.0
                repaired = True
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centers = np.asarray([X[labels == c].mean(axis=0) for c in range(k)])
        inertia = float(((X - centers[labels]) ** 2).sum())
        # Plain Lloyd steps never increase inertia; repair steps may jump.
        assert repaired or inertia <= prev_inertia + 1e-9 * (1.0 + prev_inertia)
        prev_inertia = inertia
    d2 = ((X - centers[labels]) ** 2).sum()
    return labels, centers, float(d2)


def kmeans(
    thetas: list[ParameterVector],
    k: int,
    seed: int,
    restarts: int = 10,
    names: list[str] | None = None,
) -> ClusterAssignment:
    """Seeded k-means++ / Lloyd clustering of condition models.

    Runs ``restarts`` seedings and keeps the lowest inertia; categories are
    relabeled by first appearance so the output does not depend on the
    restart that won.
    """
    if not thetas:
        raise ValueError("need at least one parameter vector")
    if not 1 <= k <= len(thetas):
        raise ValueError(f"k={k} out of range 1..{len(thetas)}")
    if names is None:
        names = [str(i) for i in range(len(thetas))]
    if len(names) != len(thetas):
        raise ValueError("names must align with thetas")
    structure = thetas[0].structure
    X = np.asarray([t.values for t in thetas])

    rng = np.random.default_rng(seed)
    best_labels: np.ndarray | None = None
    best_inertia = np.inf
    for _ in range(max(1, restarts)):
        labels, _, inertia = _lloyd(X, _kmeans_pp_init(X, k, rng))
        if inertia < best_inertia:
            best_inertia = inertia
            best_labels = labels
    assert best_labels is not None

    relabel: dict[int, int] = {}
    for l in best_labels:
        if int(l) not in relabel:
            relabel[int(l)] = len(relabel)
    labels_map = {name: relabel[int(l)] for name, l in zip(names, best_labels)}
    centroids = []
    for c in range(k):
        members = [i for i, name in enumerate(names) if labels_map[name] == c]
        centroids.append(ParameterVector(X[members].mean(axis=0), structure))
    return ClusterAssignment(
        labels=labels_map, centroids=centroids, k=k, inertia=best_inertia
    )


def silhouette_score(thetas: list[ParameterVector], labels: dict[str, int], names: list[str]) -> float:
    """Mean silhouette over points; singleton clusters score zero."""
    X = np.asarray([t.values for t in thetas])
    lab = np.asarray([labels[name] for name in names])
    D = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=2)
    scores = []
    for i in range(len(names)):
        own = (lab == lab[i]) & (np.arange(len(names)) != i)
        if not own.any():
            scores.append(0.0)
            continue
        a = float(D[i, own].mean())
        b = min(
            float(D[i, lab == c].mean()) for c in np.unique(lab) if c != lab[i]
        )
        top = max(a, b)
        scores.append((b - a) / top if top > 0 else 0.0)
    return float(np.mean(scores))


def auto_select_k(
    thetas: list[ParameterVector],
    seed: int,
    restarts: int = 10,
    names: list[str] | None = None,
) -> int:
    """Pick the cluster count in 2..K-1 maximizing the mean silhouette."""
    K = len(thetas)
    if K <= 3:
        return min(2, K)
    if names is None:
        names = [str(i) for i in range(K)]
    best_k, best_s = 2, -np.inf
    for k in range(2, K):
        sub_seed = int(np.random.SeedSequence((seed, k)).generate_state(1)[0])
        assignment = kmeans(thetas, k, seed=sub_seed, restarts=restarts, names=names)
        s = silhouette_score(thetas, assignment.labels, names)
        if s > best_s:
            best_k, best_s = k, s
    return best_k


# ---------------------------------------------------------------------------
# Refit + full pipeline
# ---------------------------------------------------------------------------

def refit_clusters(
    problems: list[RegressionProblem], assignment: ClusterAssignment
) -> dict[int, LsFit]:
    """Pooled least-squares refit of every category over its members."""
    groups: dict[int, list[RegressionProblem]] = {c: [] for c in range(assignment.k)}
    for p in problems:
        key = p.condition_name if p.condition_name in assignment.labels else condition_of(
            p.condition_name
        )
        if key not in assignment.labels:
            raise ValueError(f"assignment does not cover condition {p.condition_name!r}")
        groups[assignment.labels[key]].append(p)
    for c, members in groups.items():
        if not members:
            raise ValueError(f"category {c} has no member problems")
    return {c: pooled_ls_fit(members) for c, members in sorted(groups.items())}


@dataclass
class PipelineReport:
    """Aggregated outcome of one full pipeline run; serializes to JSON."""

    seed: int
    structure: ModelStructure
    k_clusters: int
    fusion_variant: str
    literal_criterion: bool
    conditions: list[str]
    notes: list[str]
    bounds: BoundsReport | None
    lambda1_bound: float | None
    grid: GridSpec
    selected: Hyperparameters
    score_table: list[ScoreRow]
    solve_result: SolveResult
    theta_names: list[str]
    clusters: ClusterAssignment
    refits: dict[int, LsFit]
    refit_members: dict[int, list[str]]
    fit_reports: list[FitReport]

    def to_dict(self) -> dict:
        sr = self.solve_result
        return {
            "schema": 1,
            "seed": self.seed,
            "structure": {
                "taps": self.structure.taps,
                "channels": self.structure.channels,
                "n_theta": self.structure.n_theta,
            },
            "k_clusters": self.k_clusters,
            "fusion_variant": self.fusion_variant,
            "literal_criterion": self.literal_criterion,
            "conditions": list(self.conditions),
            "notes": list(self.notes),
            "bounds": self.bounds.to_dict() if self.bounds else None,
            "grid": {
                "lambda1_factors": list(self.grid.lambda1_factors),
                "lambda2_values": list(self.grid.lambda2_values),
                "lambda1_bound": self.lambda1_bound,
            },
            "selected_hyperparameters": {
                "lambda1": self.selected.lambda1,
                "lambda2": self.selected.lambda2,
                "fusion_variant": self.selected.fusion_variant,
            },
            "score_table": [
                {
                    "lambda1": row.lambda1,
                    "lambda2": row.lambda2,
                    "score": row.score if np.isfinite(row.score) else None,
                    "converged": row.converged,
                    "iterations": row.iterations,
                }
                for row in self.score_table
            ],
            "solve": {
                "objective": {
                    "fit_term": sr.objective.fit_term,
                    "fusion_term": sr.objective.fusion_term,
                    "sparsity_term": sr.objective.sparsity_term,
                    "lambda1": sr.objective.lambda1,
                    "lambda2": sr.objective.lambda2,
                    "total": sr.objective.total,
                },
                "iterations": sr.iterations,
                "converged": sr.converged,
                "primal_residual": sr.primal_residual,
                "dual_residual": sr.dual_residual,
                "merged_pairs": [list(p) for p in merged_pairs(sr.thetas)],
            },
            "thetas": {
                name: [float(x) for x in t.values]
                for name, t in zip(self.theta_names, sr.thetas)
            },
            "clusters": {
                "k": self.clusters.k,
                "inertia": self.clusters.inertia,
                "labels": dict(sorted(self.clusters.labels.items())),
                "centroids": [
                    [float(x) for x in c.values] for c in self.clusters.centroids
                ],
            },
            "refits": [
                {
                    "category": c,
                    "members": self.refit_members[c],
                    "model_source": "+".join(self.refit_members[c]),
                    "theta": [float(x) for x in fit.theta.values],
                    "residual_norm_sq": fit.residual_norm_sq,
                }
                for c, fit in sorted(self.refits.items())
            ],
            "fit_reports": [
                {
                    "model_source": r.model_source,
                    "eval_dataset": r.eval_dataset,
                    "fit_percent": r.fit_percent,
                }
                for r in self.fit_reports
            ],
        }

    def to_json(self) -> str:
        return _json.dumps(self.to_dict())


@dataclass(frozen=True)
class _LoadedData:
    structure: ModelStructure
    conditions: list[str]
    estimation: list[RegressionProblem]
    validation: list[RegressionProblem]
    evaluation: list[RegressionProblem]


def _load_problems(
    manifest: list[ManifestEntry] | str | Path,
    structure: ModelStructure,
    base_dir: str | Path | None = None,
) -> _LoadedData:
    if isinstance(manifest, (str, Path)):
        base_dir = Path(manifest).parent
        entries = load_manifest(manifest)
    else:
        entries = list(manifest)
        base_dir = Path(base_dir) if base_dir is not None else Path(".")

    by_role: dict[str, dict[str, ConditionDataset]] = {
        "estimation": {},
        "validation": {},
        "evaluation": {},
    }
    for entry in entries:
        ds = load_dataset(base_dir / entry.file, entry)
        if ds.n_channels != structure.channels:
            raise IngestionError(
                f"dataset {entry.name!r} has {ds.n_channels} channels, "
                f"structure requires {structure.channels}"
            )
        cond = condition_of(entry.name)
        role = by_role[entry.role]
        if entry.role != "evaluation" and cond in role:
            raise IngestionError(
                f"condition {cond!r} has multiple {entry.role} datasets"
            )
        role[entry.name if entry.role == "evaluation" else cond] = ds

    conditions = sorted(by_role["estimation"])
    if not conditions:
        raise IngestionError("manifest has no estimation datasets")
    missing = [c for c in conditions if c not in by_role["validation"]]
    if missing:
        raise IngestionError(f"conditions missing validation datasets: {missing}")

    estimation = [
        build_regressor(by_role["estimation"][c], structure) for c in conditions
    ]
    validation = [
        build_regressor(by_role["validation"][c], structure) for c in conditions
    ]
    if by_role["evaluation"]:
        evaluation = [
            build_regressor(by_role["evaluation"][name], structure)
            for name in sorted(by_role["evaluation"])
        ]
    else:
        evaluation = validation
    return _LoadedData(structure, conditions, estimation, validation, evaluation)


def run_pipeline(
    manifest: list[ManifestEntry] | str | Path,
    structure: ModelStructure,
    grid: GridSpec,
    k_clusters: int,
    cfg: SolverConfig | None = None,
    seed: int = 0,
    *,
    fusion_variant: str = "l2",
    literal_criterion: bool = False,
    auto_k: bool = False,
    threads: int | None = None,
    base_dir: str | Path | None = None,
) -> PipelineReport:
    """Run bounds, grid search, joint solve, clustering, refit, evaluation.

    Every stage failure re-raises as PipelineStageError naming the stage.
    Deterministic for fixed inputs and seed: rerunning yields a
    byte-identical JSON report.
    """
    cfg = cfg or SolverConfig()
    notes: list[str] = []

    def stage(name: str, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as exc:
            raise PipelineStageError(name, exc) from exc

    data = stage("ingest", _load_problems, manifest, structure, base_dir)
    K = len(data.conditions)

    if K >= 2:
        bounds_report = stage("bounds", compute_bounds, data.estimation)
    else:
        bounds_report = None
        notes.append("fusion undefined for a single condition; fusion stages skipped")

    grid_result = stage(
        "grid_search",
        grid_search,
        data.estimation,
        data.validation,
        grid,
        cfg,
        fusion_variant=fusion_variant,
        literal_criterion=literal_criterion,
        threads=threads,
    )

    solve_result = stage("solve", solve, data.estimation, grid_result.hp, cfg)
    if not solve_result.converged:
        raise PipelineStageError(
            "solve",
            RuntimeError(
                f"solver did not converge in {solve_result.iterations} iterations"
            ),
        )

    seeds = np.random.SeedSequence(seed).spawn(1)
    kmeans_seed = int(seeds[0].generate_state(1)[0])
    if auto_k and K > 2:
        k_used = stage(
            "cluster", auto_select_k, solve_result.thetas, seed, names=data.conditions
        )
        notes.append(f"auto-selected k={k_used} by silhouette")
    else:
        k_used = min(k_clusters, K) if K == 1 else k_clusters
    assignment = stage(
        "cluster",
        kmeans,
        solve_result.thetas,
        k_used,
        kmeans_seed,
        10,
        data.conditions,
    )

    refits = stage("refit", refit_clusters, data.estimation, assignment)
    refit_members = {
        c: [
            p.condition_name
            for p in data.estimation
            if assignment.labels[condition_of(p.condition_name)] == c
        ]
        for c in range(assignment.k)
    }
    models = {
        "+".join(refit_members[c]): fit.theta for c, fit in sorted(refits.items())
    }
    fit_reports = stage("evaluate", cross_evaluate, models, data.evaluation)

    est_names = [p.condition_name for p in data.estimation]
    return PipelineReport(
        seed=seed,
        structure=structure,
        k_clusters=k_used,
        fusion_variant=fusion_variant,
        literal_criterion=literal_criterion,
        conditions=data.conditions,
        notes=notes,
        bounds=bounds_report,
        lambda1_bound=grid_result.lambda1_bound,
        grid=grid,
        selected=grid_result.hp,
        score_table=grid_result.score_table,
        solve_result=solve_result,
        theta_names=est_names,
        clusters=assignment,
        refits=refits,
        refit_members=refit_members,
        fit_reports=fit_reports,
    )


# ---------------------------------------------------------------------------
# Plot-ready CSV outputs
# ---------------------------------------------------------------------------

def write_theta_csv(path: str | Path, names: list[str], thetas: list[ParameterVector]) -> None:
    n = thetas[0].structure.n_theta
    lines = ["name," + ",".join(f"theta_{i}" for i in range(n))]
    for name, t in zip(names, thetas):
        lines.append(name + "," + ",".join(f"{v:.17g}" for v in t.values))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_theta_csv(path: str | Path, structure: ModelStructure) -> dict[str, ParameterVector]:
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not text:
        raise IngestionError(f"{path}: empty theta CSV")
    header = text[0].split(",")
    if len(header) - 1 != structure.n_theta:
        raise IngestionError(
            f"{path}: has {len(header) - 1} coefficients per row, structure "
            f"requires {structure.n_theta}"
        )
    models: dict[str, ParameterVector] = {}
    for line in text[1:]:
        cells = line.split(",")
        models[cells[0]] = ParameterVector(
            np.asarray([float(c) for c in cells[1:]]), structure
        )
    return models


def write_fit_matrix_csv(path: str | Path, reports: list[FitReport]) -> None:
    sources = list(dict.fromkeys(r.model_source for r in reports))
    datasets = list(dict.fromkeys(r.eval_dataset for r in reports))
    cells = {(r.model_source, r.eval_dataset): r.fit_percent for r in reports}
    lines = ["model_source," + ",".join(datasets)]
    for s in sources:
        row = [s]
        for d in datasets:
            v = cells.get((s, d))
            row.append("" if v is None else f"{v:.17g}")
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
