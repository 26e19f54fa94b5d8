import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import kernel_reference, svm_dual_optimum
from retina_bench.dataset import ClassLabel
from retina_bench.svm import (PAIRS, BinarySvmModel, DimensionMismatch, MissingClass,
                              ModelFormatError, MultiClassSvmModel, NonFiniteInput,
                              SingleClassInput, SvmConfig, dual_objective, kernel_eval,
                              kernel_matrix, kkt_violations, predict, train_binary,
                              train_multiclass)

N, E, D = ClassLabel


def clouds(rng, n=30, spread=0.3, dim=2):
    centres = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]])[:, :dim]
    x = np.concatenate([c + spread * rng.normal(size=(n, dim)) for c in centres])
    y = np.repeat([0, 1, 2], n)
    return x, y


def bias_only(d_ne, d_nd, d_ed):
    empty = np.zeros((0, 1))
    vals = dict(zip(PAIRS, (d_ne, d_nd, d_ed)))
    return MultiClassSvmModel({p: BinarySvmModel(empty, np.zeros(0), b) for p, b in vals.items()})


# ----------------------------------------------------------------- kernels


def test_kernel_examples():
    x = np.array([1.0, 2.0, -0.5])
    assert kernel_eval("rbf", x, x, 0.37) == 1.0
    assert kernel_eval("linear", x, x) == pytest.approx(x @ x)
    assert kernel_eval("rbf", np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.5) == pytest.approx(
        0.367879, abs=1e-6)
    with pytest.raises(DimensionMismatch):
        kernel_eval("linear", np.zeros(2), np.zeros(3))


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(0.01, 3.0), st.data())
def test_kernel_matrix_matches_scalar_oracle(xs, gamma, data):
    ys = data.draw(st.lists(st.floats(-5, 5), min_size=len(xs), max_size=len(xs)))
    a, b = np.array([xs]), np.array([ys])
    for k in ("linear", "rbf"):
        assert kernel_matrix(k, a, b, gamma)[0, 0] == pytest.approx(
            kernel_reference(k, xs, ys, gamma), rel=1e-9, abs=1e-12)


def test_config_validation():
    for bad in (dict(C=0), dict(kernel="poly"), dict(gamma=-1.0), dict(kkt_tolerance=0)):
        with pytest.raises(ValueError):
            SvmConfig(**bad)
    assert SvmConfig().resolved_gamma(4) == 0.25 and SvmConfig().C == 8.0


# ----------------------------------------------------------------- binary


def test_two_point_analytic_solution():
    m = train_binary(np.array([[-1.0], [1.0]]), np.array([-1.0, 1.0]), SvmConfig(C=8))
    assert np.allclose(m.alpha, [0.5, 0.5], atol=1e-12)
    assert m.bias == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(m.decision_function(np.array([[-2.0], [0.3], [5.0]])), [-2.0, 0.3, 5.0])


def test_xor_rbf_separable():
    x = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    y = np.array([1.0, 1.0, -1.0, -1.0])
    m = train_binary(x, y, SvmConfig(C=8, kernel="rbf", gamma=1.0))
    assert (np.sign(m.decision_function(x)) == y).all()


def test_duplicated_point_with_both_labels():
    x = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
    y = np.array([1.0, -1.0, -1.0])
    m = train_binary(x, y, SvmConfig(C=8))
    assert m.converged
    assert (m.alpha >= 0).all() and (m.alpha <= 8).all()


def test_binary_errors():
    with pytest.raises(SingleClassInput):
        train_binary(np.zeros((3, 2)), np.ones(3))
    with pytest.raises(NonFiniteInput):
        train_binary(np.array([[np.inf], [0.0]]), np.array([1.0, -1.0]))
    with pytest.raises(DimensionMismatch):
        train_binary(np.zeros((3, 2)), np.array([1.0, -1.0]))


@given(st.integers(0, 2 ** 32), st.integers(2, 12), st.sampled_from(["linear", "rbf"]))
def test_model_invariants(seed, n, kernel):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, 3))
    y = np.where(r.random(n) < 0.5, -1.0, 1.0)
    y[0], y[1] = 1.0, -1.0
    cfg = SvmConfig(C=8, kernel=kernel)
    m = train_binary(x, y, cfg, record_objective=True)
    assert (m.alpha >= 0).all() and (m.alpha <= 8).all()
    assert abs(m.alpha @ y) <= 1e-6
    assert (np.abs(m.dual_coef) > 1e-9).all()
    assert kkt_violations(m, x, y, 8).max() < cfg.kkt_tolerance
    h = np.array(m.objective_history)
    assert (np.diff(h) >= -1e-12).all()
    if len(h):
        assert h[-1] == pytest.approx(dual_objective(m.alpha, y, kernel_matrix(kernel, x, x, m.gamma)),
                                      abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_dual_optimum_against_qp_oracle(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 13))
    x = r.normal(size=(n, 2))
    y = np.where(r.random(n) < 0.5, -1.0, 1.0)
    y[0], y[-1] = 1.0, -1.0
    for kernel in ("linear", "rbf"):
        cfg = SvmConfig(C=8, kernel=kernel, kkt_tolerance=1e-5)
        m = train_binary(x, y, cfg)
        k = kernel_matrix(kernel, x, x, m.gamma)
        best, _ = svm_dual_optimum(k, y, 8.0)
        assert abs(dual_objective(m.alpha, y, k) - best) <= 1e-4


@given(st.integers(0, 2 ** 32), st.floats(0.1, 10.0))
def test_rbf_joint_scaling_leaves_predictions(seed, s):
    r = np.random.default_rng(seed)
    x, y = clouds(r, n=8, spread=1.5)
    # solve tightly so both runs land on the same optimum, not just within 1e-3 of it
    a = train_multiclass(x, y, SvmConfig(kernel="rbf", gamma=0.5, kkt_tolerance=1e-10))
    b = train_multiclass(s * x, y, SvmConfig(kernel="rbf", gamma=0.5 / s ** 2, kkt_tolerance=1e-10))
    probe = r.normal(size=(20, 2)) * 3
    da, db = a.pairwise_decisions(probe), b.pairwise_decisions(s * probe)
    assert np.allclose(da, db, atol=1e-6)
    assert np.array_equal(a.predict_many(probe[np.abs(da).min(axis=1) > 1e-6]),
                          b.predict_many(s * probe[np.abs(da).min(axis=1) > 1e-6]))


# -------------------------------------------------------------- multiclass


def test_three_clouds_perfect_training_accuracy(rng):
    x, y = clouds(rng)
    m = train_multiclass(x, y, SvmConfig(kernel="linear"))
    assert len(m.models) == 3 and list(m.models) == list(PAIRS)
    assert (m.predict_many(x) == y).all()
    assert predict(m, np.array([0.0, 4.0])) is D
    assert predict(m, x[35]) is E


def test_missing_class():
    x = np.array([[0.0], [1.0], [2.0]])
    with pytest.raises(MissingClass) as exc:
        train_multiclass(x, [0, 1, 1])
    assert exc.value.label is D


def test_single_point_per_class():
    m = train_multiclass(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), [0, 1, 2])
    assert (m.predict_many(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])) == [0, 1, 2]).all()


def test_unanimous_drusen():
    assert predict(bias_only(1.0, -1.0, -1.0), np.zeros(1)) is D


def test_vote_cycle_tie_breaks():
    # N beats E, D beats N, E beats D: one vote each
    assert predict(bias_only(0.5, -2.0, 1.0), np.zeros(1)) is D  # largest |d| won
    assert predict(bias_only(1.0, -1.0, 1.0), np.zeros(1)) is N  # all equal: lowest ordinal
    assert predict(bias_only(0.5, -1.0, 1.0), np.zeros(1)) is E  # E ties D on strength, E lower


def test_predict_dim_mismatch(rng):
    x, y = clouds(rng, n=5)
    m = train_multiclass(x, y)
    with pytest.raises(DimensionMismatch):
        predict(m, np.zeros(3))


def test_model_file_round_trip(tmp_path, rng):
    x, y = clouds(rng, n=10, spread=1.0)
    m = train_multiclass(x, y, SvmConfig(kernel="rbf"))
    m.save(tmp_path / "a.rsm")
    back = MultiClassSvmModel.load(tmp_path / "a.rsm")
    back.save(tmp_path / "b.rsm")
    assert (tmp_path / "a.rsm").read_bytes() == (tmp_path / "b.rsm").read_bytes()
    assert np.allclose(back.pairwise_decisions(x), m.pairwise_decisions(x), atol=1e-4)
    raw = (tmp_path / "a.rsm").read_bytes()
    (tmp_path / "c.rsm").write_bytes(raw[:-3])
    with pytest.raises(ModelFormatError):
        MultiClassSvmModel.load(tmp_path / "c.rsm")
    (tmp_path / "d.rsm").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ModelFormatError):
        MultiClassSvmModel.load(tmp_path / "d.rsm")
