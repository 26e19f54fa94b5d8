import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import binarized_metrics, tally
from reference_tables import BOVW_GRID, BOVW_MAX, DEEP_GRID, fixture_reports, row
from retina_bench.bovw import CodebookConfig, kmeans_fit
from retina_bench.dataset import ClassLabel
from retina_bench.descriptors import DescriptorSet
from retina_bench.evaluation import (BadK, BovwPipeline, CvReport, EmptyInput, EmptyMatrix,
                                     FoldResult, LengthMismatch, PrecomputedPipeline,
                                     TooFewSamples, class_metrics, confusion, overall_accuracy,
                                     parse_csv, render_csv, render_markdown, render_report,
                                     report_from_summary, run_cv, stratified_kfold)

N, E, D = ClassLabel


# ------------------------------------------------------------------ folds


def test_drusen_folds_sizes():
    f = stratified_kfold([D] * 84, k=10, seed=0)
    assert sorted(Counter(f.folds.tolist()).values()) == [8] * 6 + [9] * 4


@given(st.lists(st.sampled_from(list(ClassLabel)), min_size=10, max_size=200),
       st.integers(2, 10), st.integers(0, 1000))
def test_folds_partition_and_stratify(labels, k, seed):
    if len(labels) < k:
        return
    f = stratified_kfold(labels, k, seed)
    seen = np.concatenate([f.test_indices(i) for i in range(k)])
    assert sorted(seen.tolist()) == list(range(len(labels)))
    for i in range(k):
        assert not set(f.test_indices(i)) & set(f.train_indices(i))
    lab = np.asarray(labels)
    for c in set(labels):
        sizes = [int((lab[f.test_indices(i)] == c).sum()) for i in range(k)]
        assert max(sizes) - min(sizes) <= 1
    totals = [len(f.test_indices(i)) for i in range(k)]
    assert max(totals) - min(totals) <= 1


def test_fold_seed_determinism():
    labels = [N] * 30 + [E] * 20 + [D] * 12
    assert np.array_equal(stratified_kfold(labels, 5, 3).folds, stratified_kfold(labels, 5, 3).folds)
    assert not np.array_equal(stratified_kfold(labels, 5, 3).folds,
                              stratified_kfold(labels, 5, 4).folds)


def test_fold_errors():
    with pytest.raises(BadK):
        stratified_kfold([0, 1, 2], 1)
    with pytest.raises(TooFewSamples):
        stratified_kfold([0, 1, 2], 4)


# ---------------------------------------------------------------- metrics


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=80))
def test_confusion_matches_tally(pairs):
    t, p = zip(*pairs)
    assert confusion(t, p).tolist() == tally(t, p)


def test_confusion_errors():
    with pytest.raises(LengthMismatch):
        confusion([0, 1], [0])
    with pytest.raises(LengthMismatch):
        confusion([], [])


def test_all_normal_example():
    cm = np.array([[10, 0, 0], [0, 0, 0], [0, 0, 0]])
    m = class_metrics(cm)
    assert m.acc.tolist() == [100.0, 100.0, 100.0]
    assert m.sens[N] == 100.0 and m.spec[N] == 0.0
    assert m.spec[E] == 100.0 and m.sens[E] == 0.0
    assert (N, "spec") in m.undefined and (E, "sens") in m.undefined and (D, "sens") in m.undefined
    assert overall_accuracy(cm) == 100.0
    with pytest.raises(EmptyMatrix):
        class_metrics(np.zeros((3, 3)))


def exact(value):
    # the oracle works in Fractions; the float must be the correctly rounded ratio
    return 0.0 if value is None else float(value)


def test_metrics_equal_binarized_oracle_on_random_matrices():
    r = np.random.default_rng(2024)
    for _ in range(1000):
        cm = r.integers(0, 20, size=(3, 3))
        cm[r.random((3, 3)) < 0.2] = 0
        if cm.sum() == 0:
            cm[0, 0] = 1
        m = class_metrics(cm)
        for c, (acc, sens, spec) in zip(ClassLabel, binarized_metrics(cm.tolist())):
            assert m.acc[c] == exact(acc)
            assert m.sens[c] == exact(sens)
            assert m.spec[c] == exact(spec)


def test_mean_and_sample_std():
    folds = [FoldResult(class_metrics(np.eye(3, dtype=int)), v) for v in (90.0, 94.0)]
    r = CvReport("bovw", "W=1", folds)
    assert r.overall_mean == 92.0
    assert r.overall_std == pytest.approx(math.sqrt(8), abs=1e-12)


def test_report_from_summary_round_trips_stats():
    r = report_from_summary("deep", "x", [1, 2, 3], [4, 5, 6], [7, 8, 9], 92.0, 1.53)
    assert r.overall_mean == pytest.approx(92.0, abs=1e-12)
    assert r.overall_std == pytest.approx(1.53, abs=1e-12)
    assert r.mean("sens").tolist() == [4.0, 5.0, 6.0]


# -------------------------------------------------------------- rendering


def test_bovw_grid_cells():
    bovw, _ = fixture_reports()
    md = render_markdown(bovw).splitlines()
    for w, (a, s, p) in BOVW_GRID.items():
        assert row(w, [*a, *s, *p]) in md
    assert BOVW_MAX in md
    assert "| W | Acc Norm | Acc Ex | Acc Dru | Sens Norm | Sens Ex | Sens Dru | Spec Norm | Spec Ex | Spec Dru |" in md


def test_deep_grid_cells():
    _, deep = fixture_reports()
    md = render_markdown(deep)
    assert "| GoogLeNet | 88.17 | 88.17 | 99.65 | 96.02 | 70.36 | 97.00 | 75.79 | 96.33 | 99.90 |" in md
    for m, (a, s, p) in DEEP_GRID.items():
        assert row(m, [*a, *s, *p]) in md.splitlines()
    assert "Max" not in md


def test_overall_accuracy_cells():
    bovw, deep = fixture_reports()
    md = render_markdown([bovw[-1], *deep])
    for cell in ("77.76 ± 1.97", "91.83 ± 2.93", "90.76 ± 1.93", "92.00 ± 1.53", "91.23 ± 1.07"):
        assert cell in md
    assert "| Accuracy | 77.76 ± 1.97 | 91.83 ± 2.93 |" in md


def test_csv_round_trip():
    bovw, deep = fixture_reports()
    text = render_csv(bovw + deep)
    back = parse_csv(text)
    assert [(r.pipeline, r.param) for r in back] == [(r.pipeline, r.param) for r in bovw + deep]
    assert render_csv(back) == text


def test_render_report_dispatch():
    bovw, _ = fixture_reports()
    assert render_report(bovw, "csv").startswith("pipeline,param,class")
    with pytest.raises(EmptyInput):
        render_report([])
    with pytest.raises(ValueError):
        render_report(bovw, "html")


def test_flagged_metrics_listed():
    cm = np.array([[3, 0, 0], [0, 2, 0], [0, 0, 0]])
    r = CvReport("bovw", "W=5", [FoldResult(class_metrics(cm), overall_accuracy(cm), cm)])
    assert r.flagged == [(0, D, "sens")]
    assert "fold 0: sens of Drusen" in render_markdown([r])


# ---------------------------------------------------------------- harness


def separable(rng, per=12):
    labels = np.repeat([0, 1, 2], per)
    x = np.eye(3)[labels] * 3 + 0.3 * rng.normal(size=(3 * per, 3))
    return x, labels


def test_precomputed_cv_perfect(rng):
    x, y = separable(rng)
    r = run_cv(PrecomputedPipeline(x), y, k=4, seed=0, name="deep", param="toy")
    assert len(r.folds) == 4 and r.overall_mean == 100.0


def test_jobs_do_not_change_results(rng):
    x, y = separable(rng)
    a = run_cv(PrecomputedPipeline(x), y, k=3, seed=5, name="deep", param="p", jobs=1)
    b = run_cv(PrecomputedPipeline(x), y, k=3, seed=5, name="deep", param="p", jobs=2)
    assert render_csv([a]) == render_csv([b])


def toy_descriptor_sets(rng, labels, sentinel_at=None):
    sets = []
    for i, c in enumerate(labels):
        v = rng.normal(size=(6, 64)) * 0.1
        v[:, c] += 1.0
        if i == sentinel_at:
            v[0] = 1e6
        sets.append(DescriptorSet(v, np.zeros(6, np.int8), np.zeros(6, np.int8)))
    return sets


def test_codebook_pool_excludes_test_fold(rng):
    labels = np.repeat([0, 1, 2], 8)
    seen = []

    def spy(pool, cfg):
        seen.append(pool.copy())
        return kmeans_fit(pool, cfg)

    target = 5
    sets = toy_descriptor_sets(rng, labels, sentinel_at=target)
    pipe = BovwPipeline(sets, CodebookConfig(words=3, seed=1), fit_codebook=spy)
    run_cv(pipe, labels, k=4, seed=2, name="bovw", param="W=3")
    folds = stratified_kfold(labels, 4, 2)
    assert len(seen) == 4
    for f, pool in enumerate(seen):
        hits = int((pool == 1e6).all(axis=1).sum())
        assert hits == (0 if target in folds.test_indices(f) else 1)
        assert len(pool) == 6 * len(folds.train_indices(f))
