import numpy as np
import pytest

from crowdalign import metrics


def test_count():
    assert metrics.count(np.full((4, 4), 0.25)) == pytest.approx(4.0)


def test_mae_mse_scalar_loop(rng):
    for _ in range(100):
        n = int(rng.integers(1, 20))
        a = rng.uniform(0, 50, n)
        b = rng.uniform(0, 50, n)
        want_mae = sum(abs(x - y) for x, y in zip(a, b)) / n
        want_mse = (sum((x - y) ** 2 for x, y in zip(a, b)) / n) ** 0.5
        assert metrics.mae(a, b) == pytest.approx(want_mae, abs=1e-9)
        assert metrics.mse(a, b) == pytest.approx(want_mse, abs=1e-9)


def test_mse_is_root_mean_square():
    # counting-literature convention: the "MSE" column is an RMS error
    assert metrics.mse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(np.sqrt(12.5))


def test_length_checks():
    with pytest.raises(ValueError):
        metrics.mae([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        metrics.mae([], [])


def test_eval_result_payload():
    out = metrics.eval_result([1.0, 5.0], [2.0, 3.0])
    assert out["n"] == 2
    assert out["mae"] == pytest.approx(1.5)
    assert out["per_image"] == pytest.approx([1.0, 2.0])


def test_spearman_perfect_and_reversed():
    x = [1.0, 2.0, 3.0, 4.0]
    assert metrics.spearman(x, [10.0, 20.0, 30.0, 40.0]) == pytest.approx(1.0)
    assert metrics.spearman(x, [4.0, 3.0, 2.0, 1.0]) == pytest.approx(-1.0)


def test_spearman_is_rank_based():
    # a monotone nonlinear map must not change the coefficient
    x = np.array([0.1, 0.7, 0.3, 0.9, 0.5])
    y = np.exp(7 * x)
    assert metrics.spearman(x, y) == pytest.approx(1.0)


def test_spearman_known_value():
    # hand-computed: ranks of x (1,2,3,4,5), y (2,1,4,3,5) -> rho = 1 - 6*4/120
    x = [1.0, 2.0, 3.0, 4.0, 5.0]
    y = [1.5, 1.2, 3.9, 3.3, 8.0]
    assert metrics.spearman(x, y) == pytest.approx(0.8)


def test_spearman_matches_scipy_with_ties(rng):
    from scipy import stats
    for _ in range(50):
        n = int(rng.integers(3, 15))
        # integer draws force frequent ties
        x = rng.integers(0, 5, n).astype(float)
        y = rng.integers(0, 5, n).astype(float)
        if np.all(x == x[0]) or np.all(y == y[0]):
            continue
        want = stats.spearmanr(x, y).statistic
        assert metrics.spearman(x, y) == pytest.approx(want, abs=1e-12)


def test_spearman_rejects_constant_and_short():
    with pytest.raises(ValueError):
        metrics.spearman([1.0, 1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        metrics.spearman([1.0], [2.0])
