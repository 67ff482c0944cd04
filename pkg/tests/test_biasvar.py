import numpy as np
import pytest

from biasvar import (
    BIASVAR_COLUMNS,
    EstimateConstants,
    SeedEnsemble,
    build_reports,
    decompose,
    decompose_outputs,
    ensemble_lipschitz_lower,
    lower_constants,
    resolve_xprime,
    sweep_biasvar,
    train_ensemble,
    upper_constants,
    variance_at,
    variance_bound,
)
from config import TrainSection
from core_math import make_rng
from errors import EnsembleError, ShapeMismatchError
from metrics_log import read_csv
from model import FFArch, copy_net, init, params_of
from train import training_setup


def naive_decomposition(outputs, targets):
    s, n, _ = outputs.shape
    mean = outputs.mean(axis=0)
    bias = var = loss = 0.0
    for i in range(n):
        bias += np.sum((targets[i] - mean[i]) ** 2) / n
        for z in range(s):
            var += np.sum((outputs[z, i] - mean[i]) ** 2) / (n * s)
            loss += np.sum((targets[i] - outputs[z, i]) ** 2) / (n * s)
    return bias, var, loss


def ensemble(width=16, seeds=(0, 1, 2, 3), d=8, k=3):
    return SeedEnsemble([init(FFArch((width,), d, k), s) for s in seeds])


# ────────────────────────────────────────────────
# Разложение
# ────────────────────────────────────────────────

@pytest.mark.parametrize("case", range(20))
def test_identity_and_naive_oracle(case):
    rng = make_rng(case)
    outputs = rng.standard_normal((2 + case % 4, 15, 4))
    targets = np.eye(4)[rng.integers(0, 4, size=15)]
    bias, var, loss = decompose_outputs(outputs, targets)
    assert bias + var == pytest.approx(loss, rel=1e-12)
    assert (bias, var, loss) == pytest.approx(naive_decomposition(outputs, targets), rel=1e-12)
    assert bias <= loss + 1e-12


def test_identical_members_have_zero_variance(small_ff, tiny_data):
    _, test_set = tiny_data
    e = SeedEnsemble([small_ff, copy_net(small_ff), copy_net(small_ff)])
    bias, var, loss = decompose(e, test_set.inputs, test_set.labels)
    assert var == 0.0
    assert bias == pytest.approx(loss, rel=1e-12)


def test_opposite_outputs_have_zero_bias():
    c = make_rng(1).standard_normal((10, 3))
    bias, var, loss = decompose_outputs(np.stack([c, -c]), np.zeros((10, 3)))
    assert bias == 0.0
    assert var == pytest.approx(np.mean(np.sum(c ** 2, axis=1)), rel=1e-12)
    assert loss == pytest.approx(var, rel=1e-12)


def test_decompose_accepts_one_hot_targets(tiny_data):
    _, test_set = tiny_data
    e = ensemble()
    from_labels = decompose(e, test_set.inputs, test_set.labels)
    from_targets = decompose(e, test_set.inputs, np.eye(3)[test_set.labels])
    assert from_labels == from_targets


def test_decomposition_shape_errors():
    with pytest.raises(ShapeMismatchError):
        decompose_outputs(np.zeros((2, 5, 3)), np.zeros((5, 4)))
    with pytest.raises(EnsembleError):
        decompose_outputs(np.zeros((1, 5, 3)), np.zeros((5, 3)))


def test_ensemble_validation():
    with pytest.raises(EnsembleError):
        SeedEnsemble([init(FFArch((4,), 3, 2), 0)])
    with pytest.raises(EnsembleError):
        SeedEnsemble([init(FFArch((4,), 3, 2), 0), init(FFArch((5,), 3, 2), 1)])
    assert ensemble(seeds=(3, 7)).seeds == [3, 7]


# ────────────────────────────────────────────────
# Константы и оценки дисперсии
# ────────────────────────────────────────────────

def test_variance_at_zero_input_is_zero():
    assert variance_at(ensemble(), np.zeros(8)) == 0.0


def test_mean_function_constant_does_not_exceed_seed_average(tiny_data):
    _, test_set = tiny_data
    c_bar, c_bar_zeta = ensemble_lipschitz_lower(ensemble(), test_set.inputs)
    assert 0.0 < c_bar <= c_bar_zeta * (1 + 1e-12)


def test_upper_constants_are_mean_and_rms():
    e = ensemble()
    up = upper_constants(e)
    assert up.source == "upper"
    assert up.c_bar <= up.c_bar_zeta


@pytest.mark.parametrize("width", [4, 16, 64])
def test_upper_estimates_dominate_variance(width, tiny_data):
    _, test_set = tiny_data
    e = ensemble(width)
    _, variance, _ = decompose(e, test_set.inputs, test_set.labels)
    for kind in ("zero", "test-point"):
        xp, _ = resolve_xprime(kind, test_set.inputs, seed=0)
        bound = variance_bound(e, test_set.inputs, xp, upper_constants(e))
        assert variance <= bound.bound_v1 <= bound.bound_v2 * (1 + 1e-12)


def test_lower_estimates_are_ordered(tiny_data):
    _, test_set = tiny_data
    e = ensemble()
    low = lower_constants(e, test_set.inputs)
    bound = variance_bound(e, test_set.inputs, np.zeros(8), low)
    assert bound.bound_v1 <= bound.bound_v2 * (1 + 1e-12)
    assert bound.var_at_xprime == 0.0


def test_variance_bound_formula():
    e = ensemble()
    x = make_rng(2).standard_normal((6, 8))
    bound = variance_bound(e, x, np.zeros(8), EstimateConstants("lower", 2.0, 3.0))
    msd = np.mean(np.sum(x ** 2, axis=1))
    assert bound.mean_sq_dist == pytest.approx(msd)
    assert bound.bound_v1 == pytest.approx(3 * (4 + 9) * msd)
    assert bound.bound_v2 == pytest.approx(6 * 9 * msd)


def test_xprime_dimension_mismatch():
    with pytest.raises(ShapeMismatchError):
        variance_bound(ensemble(), np.zeros((4, 8)), np.zeros(7), EstimateConstants("lower", 1.0, 1.0))


def test_resolve_xprime():
    x = make_rng(3).standard_normal((9, 8))
    zero, index = resolve_xprime("zero", x)
    assert index is None and not np.any(zero)
    a, ia = resolve_xprime("test-point", x, seed=5)
    b, ib = resolve_xprime("test-point", x, seed=5)
    assert ia == ib and 0 <= ia < 9 and np.array_equal(a, x[ia])
    with pytest.raises(ValueError):
        resolve_xprime("random", x)


# ────────────────────────────────────────────────
# Отчёты и свип
# ────────────────────────────────────────────────

def test_build_reports(tiny_data):
    _, test_set = tiny_data
    reports = build_reports(ensemble(), test_set.inputs, test_set.labels, width=16)
    assert [r.xprime_kind for r in reports] == ["zero", "test-point"]
    zero = reports[0]
    assert zero.bias_sq + zero.variance == pytest.approx(zero.expected_test_loss, rel=1e-12)
    assert zero.r_sq == pytest.approx(zero.mean_sq_dist)
    assert zero.variance <= zero.bound_v1_upper
    assert zero.bound_v1 == zero.bound_v1_lower
    assert set(zero.csv_row()) == set(BIASVAR_COLUMNS)
    ratios = zero.dominance("upper")
    assert ratios[0] >= 1.0 and ratios[1] >= ratios[0] * (1 - 1e-12)


def test_dominance_with_zero_variance(small_ff, tiny_data):
    _, test_set = tiny_data
    e = SeedEnsemble([small_ff, copy_net(small_ff)])
    report = build_reports(e, test_set.inputs, test_set.labels, xprime_kinds=("zero",))[0]
    assert report.dominance() == (float("inf"), float("inf"))


def tiny_setup(n):
    cfg = TrainSection(loss="mse", schedule="constant", base_lr=0.01, batch_size=50,
                       min_epochs=2, max_epochs=2)
    return training_setup(cfg, "ff", n)


def test_train_ensemble_is_independent_of_workers(tiny_data):
    train_set, _ = tiny_data
    arch = FFArch((8,), 8, 3)
    one = train_ensemble(arch, train_set, tiny_setup(train_set.n), [0, 1, 2], workers=1)
    many = train_ensemble(arch, train_set, tiny_setup(train_set.n), [0, 1, 2], workers=3)
    assert one.seeds == many.seeds == [0, 1, 2]
    for a, b in zip(one.members, many.members):
        assert np.array_equal(params_of(a), params_of(b))


def test_sweep_writes_csv(tmp_path, tiny_data):
    train_set, test_set = tiny_data
    reports = sweep_biasvar([4, 8], train_set, test_set, tiny_setup(train_set.n), [0, 1],
                            xprime_kinds=("zero",), workers=2, out_dir=tmp_path)
    assert [r.width for r in reports] == [4, 8]
    rows = read_csv(tmp_path / "biasvar.csv")
    assert [r["width"] for r in rows] == [4, 8]
    assert list(rows[0]) == BIASVAR_COLUMNS
    assert (tmp_path / "traces" / "biasvar_4_seed1.jsonl").exists()
