from __future__ import annotations

import json

import numpy as np
import pytest

from fusedfir import (
    GridSpec,
    Hyperparameters,
    ModelStructure,
    ParameterVector,
    RegressionProblem,
    SolverConfig,
    SyntheticScenario,
    build_regressor,
    cross_evaluate,
    fit_metric,
    generate_synthetic,
    grid_search,
    kmeans,
    ls_fit,
    refit_clusters,
    run_pipeline,
)
from fusedfir.data import ManifestEntry, write_dataset_csv
from fusedfir.pipeline import ScoreRow, _better_row, auto_select_k, silhouette_score

from conftest import random_problems


def vec(values, structure=None):
    values = np.atleast_1d(np.asarray(values, dtype=float))
    structure = structure or ModelStructure(taps=values.size, channels=1)
    return ParameterVector(values, structure)


class TestFitMetric:
    def test_perfect_prediction(self):
        assert fit_metric(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 3.0])) == 100.0

    def test_mean_predictor(self):
        Y = np.array([1.0, 2.0, 3.0])
        assert fit_metric(Y, np.full(3, Y.mean())) == 0.0

    def test_hand_negative_case(self):
        assert fit_metric(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 5.0])) == -100.0

    def test_constant_target_rejected(self):
        with pytest.raises(ValueError, match="zero variance"):
            fit_metric(np.array([2.0, 2.0]), np.array([1.0, 3.0]))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            fit_metric(np.ones(3), np.ones(4))

    def test_exactly_100_iff_equal(self):
        Y = np.array([1.0, 2.0, 4.0])
        assert fit_metric(Y, Y) == 100.0
        assert fit_metric(Y, Y + 1e-6) < 100.0

    def test_translation_invariance(self):
        rng = np.random.default_rng(0)
        Y = rng.standard_normal(20)
        Y_hat = Y + 0.1 * rng.standard_normal(20)
        base = fit_metric(Y, Y_hat)
        assert fit_metric(Y + 5.0, Y_hat + 5.0) == pytest.approx(base, rel=1e-12)


class TestKmeans:
    def test_separated_scalars(self):
        thetas = [vec([0.0]), vec([0.1]), vec([10.0])]
        out = kmeans(thetas, k=2, seed=0, names=["a", "b", "c"])
        assert out.labels["a"] == out.labels["b"] != out.labels["c"]

    def test_singletons_zero_inertia(self):
        thetas = [vec([0.0]), vec([5.0]), vec([9.0])]
        out = kmeans(thetas, k=3, seed=0)
        assert out.inertia == 0.0
        assert sorted(out.labels.values()) == [0, 1, 2]

    def test_two_near_one_far(self):
        rng = np.random.default_rng(1)
        base = rng.standard_normal(4)
        thetas = [vec(base), vec(base + 1e-3), vec(base + 10.0)]
        out = kmeans(thetas, k=2, seed=3, names=["x", "y", "z"])
        assert out.labels["x"] == out.labels["y"] != out.labels["z"]

    def test_centroids_are_member_means(self):
        rng = np.random.default_rng(2)
        thetas = [vec(rng.standard_normal(3)) for _ in range(7)]
        out = kmeans(thetas, k=3, seed=5)
        X = np.asarray([t.values for t in thetas])
        for c in range(out.k):
            members = [i for i in range(7) if out.labels[str(i)] == c]
            np.testing.assert_allclose(
                out.centroids[c].values, X[members].mean(axis=0), atol=1e-8
            )

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        thetas = [vec(rng.standard_normal(3)) for _ in range(6)]
        a = kmeans(thetas, k=2, seed=11)
        b = kmeans(thetas, k=2, seed=11)
        assert a.labels == b.labels
        assert a.inertia == b.inertia

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            kmeans([vec([1.0])], k=2, seed=0)

    def test_silhouette_and_auto_k(self):
        rng = np.random.default_rng(4)
        thetas = (
            [vec(rng.standard_normal(2) * 0.05) for _ in range(3)]
            + [vec(rng.standard_normal(2) * 0.05 + 10.0) for _ in range(3)]
        )
        names = [str(i) for i in range(6)]
        out = kmeans(thetas, k=2, seed=0, names=names)
        assert silhouette_score(thetas, out.labels, names) > 0.9
        assert auto_select_k(thetas, seed=0, names=names) == 2


class TestGridSearch:
    def _aligned(self, seed, K=2, n=3, M=12):
        est = random_problems(seed, K=K, n=n, M=M)
        val = random_problems(seed + 1000, K=K, n=n, M=M)
        val = [
            RegressionProblem(Y=v.Y, Phi=v.Phi, structure=v.structure, condition_name=e.condition_name.replace("-1", "-2"))
            for v, e in zip(val, est)
        ]
        return est, val

    def test_single_point_grid(self):
        est, val = self._aligned(0)
        grid = GridSpec(lambda1_factors=(0.5,), lambda2_values=(0.1,))
        out = grid_search(est, val, grid)
        assert len(out.score_table) == 1
        assert out.hp.lambda2 == 0.1
        assert out.hp.lambda1 == pytest.approx(0.5 * out.lambda1_bound)

    def test_tie_break_prefers_larger_weights(self):
        a = ScoreRow(1.0, 0.0, 5.0, True, 10)
        b = ScoreRow(2.0, 0.0, 5.0, True, 10)
        c = ScoreRow(2.0, 1.0, 5.0, True, 10)
        d = ScoreRow(0.5, 9.0, 4.0, True, 10)
        assert _better_row(b, a)
        assert not _better_row(a, b)
        assert _better_row(c, b)
        assert _better_row(d, c)  # lower score still dominates

    def test_exact_tie_selects_largest_lambda2(self):
        # All-zero targets make every grid point score exactly zero.
        s = ModelStructure(taps=2, channels=1)
        rng = np.random.default_rng(5)
        Phi = rng.standard_normal((8, 2))
        est = [RegressionProblem(Y=np.zeros(8), Phi=Phi, structure=s, condition_name="A0-1")]
        val = [RegressionProblem(Y=np.zeros(8), Phi=Phi, structure=s, condition_name="A0-2")]
        grid = GridSpec(lambda1_factors=(1.0,), lambda2_values=(0.0, 0.5, 2.0))
        out = grid_search(est, val, grid)
        assert out.hp.lambda2 == 2.0
        assert all(r.score == 0.0 for r in out.score_table)

    def test_argmin_never_worse_than_unregularized(self):
        est, val = self._aligned(1, K=3, n=4, M=20)
        grid = GridSpec(lambda1_factors=(0.0, 1e-2, 1.0), lambda2_values=(0.0, 1e-2, 1.0))
        out = grid_search(est, val, grid)
        zero_row = [r for r in out.score_table if r.lambda1 == 0.0 and r.lambda2 == 0.0]
        best = min(r.score for r in out.score_table)
        assert best <= zero_row[0].score

    def test_non_converged_scored_inf(self):
        est, val = self._aligned(2)
        grid = GridSpec(lambda1_factors=(0.5,), lambda2_values=(0.0, 0.3))
        cfg = SolverConfig(max_iter=2)
        from fusedfir.pipeline import GridSearchFailedError

        with pytest.raises(GridSearchFailedError):
            grid_search(est, val, grid, cfg)

    def test_threads_match_sequential(self):
        est, val = self._aligned(3, K=3, n=4, M=15)
        grid = GridSpec(lambda1_factors=(1e-3, 1e-1), lambda2_values=(0.0, 1e-2))
        seq = grid_search(est, val, grid)
        par = grid_search(est, val, grid, threads=4)
        assert seq.hp == par.hp
        assert seq.score_table == par.score_table

    def test_literal_criterion_scoring(self):
        est, val = self._aligned(4)
        grid = GridSpec(lambda1_factors=(1e-4,), lambda2_values=(0.0,))
        default = grid_search(est, val, grid)
        literal = grid_search(est, val, grid, literal_criterion=True)
        # With lambda2 = 0 and tiny lambda1 the two scores differ by the
        # weighted fusion term.
        assert literal.score_table[0].score >= default.score_table[0].score

    def test_misaligned_conditions_rejected(self):
        est, _ = self._aligned(5)
        _, val = self._aligned(6)
        bad = [
            RegressionProblem(Y=v.Y, Phi=v.Phi, structure=v.structure, condition_name=f"X{i}-2")
            for i, v in enumerate(val)
        ]
        with pytest.raises(ValueError, match="condition mismatch"):
            grid_search(est, bad, GridSpec())


class TestRefitAndCrossEval:
    def test_singleton_category_equals_ls(self):
        problems = random_problems(7, K=2, n=3, M=10)
        from fusedfir import ClusterAssignment

        assignment = ClusterAssignment(
            labels={"C0": 0, "C1": 1},
            centroids=[vec(np.zeros(3)), vec(np.zeros(3))],
            k=2,
            inertia=0.0,
        )
        refits = refit_clusters(problems, assignment)
        np.testing.assert_allclose(
            refits[0].theta.values, ls_fit(problems[0]).theta.values, atol=1e-12
        )

    def test_identical_merged_same_theta(self):
        p = random_problems(8, K=1, n=3, M=10)[0]
        twin = RegressionProblem(Y=p.Y, Phi=p.Phi, structure=p.structure, condition_name="C1-1")
        from fusedfir import ClusterAssignment

        assignment = ClusterAssignment(
            labels={"C0": 0, "C1": 0}, centroids=[vec(np.zeros(3))], k=1, inertia=0.0
        )
        refits = refit_clusters([p, twin], assignment)
        np.testing.assert_allclose(
            refits[0].theta.values, ls_fit(p).theta.values, atol=1e-10
        )

    def test_empty_category_rejected(self):
        problems = random_problems(9, K=2, n=3, M=10)
        from fusedfir import ClusterAssignment

        assignment = ClusterAssignment(
            labels={"C0": 0, "C1": 0},
            centroids=[vec(np.zeros(3)), vec(np.zeros(3))],
            k=2,
            inertia=0.0,
        )
        with pytest.raises(ValueError, match="no member"):
            refit_clusters(problems, assignment)

    def test_cross_eval_perfect_on_own_noiseless_data(self):
        rng = np.random.default_rng(10)
        s = ModelStructure(taps=3, channels=1)
        Phi = rng.standard_normal((30, 3))
        theta = rng.standard_normal(3)
        p = RegressionProblem(Y=Phi @ theta, Phi=Phi, structure=s, condition_name="C0-2")
        reports = cross_evaluate({"C0-1": vec(theta, s)}, [p])
        assert reports[0].fit_percent == pytest.approx(100.0, abs=1e-9)

    def test_zero_model_on_zero_mean_data(self):
        s = ModelStructure(taps=1, channels=1)
        p = RegressionProblem(
            Y=np.array([1.0, -1.0]), Phi=np.ones((2, 1)), structure=s, condition_name="C0-2"
        )
        reports = cross_evaluate({"zero": vec([0.0], s)}, [p])
        assert reports[0].fit_percent == 0.0

    def test_undefined_cell_marked(self):
        s = ModelStructure(taps=1, channels=1)
        p = RegressionProblem(
            Y=np.array([2.0, 2.0]), Phi=np.ones((2, 1)), structure=s, condition_name="C0-2"
        )
        reports = cross_evaluate({"m": vec([1.0], s)}, [p])
        assert reports[0].fit_percent is None


def small_scenario(seed=2024):
    s = ModelStructure(taps=3, channels=2)
    g0 = ParameterVector(np.array([1.0, 0.5, -0.25, 0.0, 0.0, 0.0]), s)
    g1 = ParameterVector(np.array([-0.8, 0.9, 0.4, 0.0, 0.0, 0.0]), s)
    return SyntheticScenario(
        group_truths=(g0, g1),
        assignment={"BR30": 0, "BR40": 0, "WBA30": 1, "WBA40": 1},
        noise_sigma=0.05,
        irrelevant_channels=frozenset({2}),
        samples_per_condition=120,
        seed=seed,
    )


def write_manifest(tmp_path, datasets, extra=()):
    entries = []
    for ds in datasets:
        write_dataset_csv(ds, tmp_path / f"{ds.name}.csv")
        role = "estimation" if ds.name.endswith("-1") else "validation"
        entries.append(
            {
                "name": ds.name,
                "file": f"{ds.name}.csv",
                "role": role,
                "channels": list(ds.channel_names),
                "output": "y",
            }
        )
    entries.extend(extra)
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(entries), encoding="utf-8")
    return path


class TestRunPipeline:
    def test_two_group_recovery(self, tmp_path):
        scn = small_scenario()
        manifest = write_manifest(tmp_path, generate_synthetic(scn))
        report = run_pipeline(
            manifest,
            scn.structure,
            GridSpec(lambda1_factors=(0.0, 1e-4, 1e-2, 1e-1), lambda2_values=(0.0, 1e-2)),
            k_clusters=2,
            cfg=SolverConfig(),
            seed=7,
        )
        labels = report.clusters.labels
        assert labels["BR30"] == labels["BR40"]
        assert labels["WBA30"] == labels["WBA40"]
        assert labels["BR30"] != labels["WBA30"]

        # Fusion engages: a positive weight is selected and never validates
        # worse than the unregularized grid point.
        assert report.selected.lambda1 > 0
        unregularized = [
            r for r in report.score_table if r.lambda1 == 0.0 and r.lambda2 == 0.0
        ][0]
        best = min(r.score for r in report.score_table)
        assert best <= unregularized.score

        own = [
            r.fit_percent
            for r in report.fit_reports
            if ("BR" in r.model_source) == ("BR" in r.eval_dataset)
        ]
        assert min(own) > 70.0

    def test_single_condition_skips_fusion(self, tmp_path):
        s = ModelStructure(taps=2, channels=1)
        g = ParameterVector(np.array([1.0, -0.5]), s)
        scn = SyntheticScenario(
            group_truths=(g,),
            assignment={"BR30": 0},
            noise_sigma=0.01,
            irrelevant_channels=frozenset(),
            samples_per_condition=60,
            seed=3,
        )
        manifest = write_manifest(tmp_path, generate_synthetic(scn))
        report = run_pipeline(
            manifest, s, GridSpec(), k_clusters=1, cfg=SolverConfig(), seed=1
        )
        assert any("fusion undefined" in note for note in report.notes)
        assert report.bounds is None
        assert report.selected.lambda1 == 0.0

    def test_rerun_byte_identical(self, tmp_path):
        scn = small_scenario()
        manifest = write_manifest(tmp_path, generate_synthetic(scn))
        grid = GridSpec(lambda1_factors=(1e-3, 1e-1), lambda2_values=(0.0, 1e-2))
        a = run_pipeline(manifest, scn.structure, grid, 2, SolverConfig(), seed=5)
        b = run_pipeline(manifest, scn.structure, grid, 2, SolverConfig(), seed=5)
        assert a.to_json() == b.to_json()

    def test_manifest_order_invariance(self, tmp_path):
        scn = small_scenario()
        datasets = generate_synthetic(scn)
        grid = GridSpec(lambda1_factors=(1e-3,), lambda2_values=(0.0,))
        (tmp_path / "a").mkdir(exist_ok=True)
        (tmp_path / "b").mkdir(exist_ok=True)
        m1 = write_manifest(tmp_path / "a", datasets[::-1])
        m2 = write_manifest(tmp_path / "b", datasets)
        a = run_pipeline(m1, scn.structure, grid, 2, SolverConfig(), seed=5)
        b = run_pipeline(m2, scn.structure, grid, 2, SolverConfig(), seed=5)
        assert a.to_json() == b.to_json()

    def test_missing_validation_rejected(self, tmp_path):
        scn = small_scenario()
        datasets = [d for d in generate_synthetic(scn) if d.name != "BR30-2"]
        manifest = write_manifest(tmp_path, datasets)
        from fusedfir import PipelineStageError

        with pytest.raises(PipelineStageError, match="ingest"):
            run_pipeline(manifest, scn.structure, GridSpec(), 2, SolverConfig(), seed=0)

    def test_evaluation_role_used_when_present(self, tmp_path):
        scn = small_scenario()
        datasets = generate_synthetic(scn)
        eval_ds = datasets[1]
        extra = [
            {
                "name": "BR30-3",
                "file": f"{eval_ds.name}.csv",
                "role": "evaluation",
                "channels": list(eval_ds.channel_names),
                "output": "y",
            }
        ]
        manifest = write_manifest(tmp_path, datasets, extra=extra)
        grid = GridSpec(lambda1_factors=(1e-3,), lambda2_values=(0.0,))
        report = run_pipeline(manifest, scn.structure, grid, 2, SolverConfig(), seed=5)
        assert {r.eval_dataset for r in report.fit_reports} == {"BR30-3"}
