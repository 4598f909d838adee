import numpy as np
import pytest

from crossfit_gee.model import (
    IDENTITY,
    LINKS,
    LOG,
    LOGIT,
    Dataset,
    ModelSpec,
    ObservationBlock,
    ParameterVector,
    evaluate_mean,
    get_link,
    mean_derivative_matrix,
    residual,
    residuals,
)


def block_with_predictor(eta, y=None):
    # x = I so that x' beta = beta
    eta = np.asarray(eta, dtype=float)
    y = np.zeros_like(eta) if y is None else y
    return ObservationBlock(y, np.eye(eta.size)), eta


def test_evaluate_mean_examples():
    b, eta = block_with_predictor([1.0, -2.0])
    np.testing.assert_array_equal(evaluate_mean(b, eta, IDENTITY), [1.0, -2.0])
    b, eta = block_with_predictor([0.0, 0.0])
    np.testing.assert_allclose(evaluate_mean(b, eta, LOGIT), [0.5, 0.5])
    b, eta = block_with_predictor([0.0])
    np.testing.assert_allclose(evaluate_mean(b, eta, LOG), [1.0])


def test_residual_examples():
    b, eta = block_with_predictor([1.0, 1.0], y=np.array([1.0, 2.0]))
    np.testing.assert_array_equal(residual(b, eta), [0.0, 1.0])
    b, eta = block_with_predictor([0.0], y=np.array([1.0]))
    np.testing.assert_array_equal(residual(b, eta, LOG), [0.0])


def test_mean_derivative_examples():
    b, eta = block_with_predictor([0.3, -1.2])
    np.testing.assert_array_equal(mean_derivative_matrix(b, eta, IDENTITY), np.eye(2))
    b, eta = block_with_predictor([0.0, 0.0])
    np.testing.assert_allclose(mean_derivative_matrix(b, eta, LOGIT), 0.25 * np.eye(2))
    b, eta = block_with_predictor([np.log(2.0), 0.0])
    np.testing.assert_allclose(mean_derivative_matrix(b, eta, LOG), np.diag([2.0, 1.0]))


@pytest.mark.parametrize("name", sorted(LINKS))
def test_link_derivatives_match_finite_differences(name):
    link = LINKS[name]
    t = np.linspace(-5, 5, 100)
    h = 1e-5
    for f, df in ((link.g, link.g1), (link.g1, link.g2), (link.g2, link.g3)):
        fd = (f(t + h) - f(t - h)) / (2 * h)
        exact = df(t)
        scale = np.maximum(np.abs(exact), 1e-3)
        assert np.max(np.abs(fd - exact) / scale) <= 1e-6


def test_residual_plus_mean_recovers_y(rng):
    for link in LINKS.values():
        x = rng.normal(size=(4, 3))
        y = rng.normal(size=3)
        beta = rng.normal(size=4)
        b = ObservationBlock(y, x)
        np.testing.assert_allclose(residual(b, beta, link) + evaluate_mean(b, beta, link), y,
                                   rtol=0, atol=1e-14)


def test_derivative_matrix_positive_for_nonlinear_links(rng):
    b = ObservationBlock(rng.normal(size=3), rng.normal(size=(5, 3)))
    beta = rng.normal(size=5)
    for link in (LOG, LOGIT):
        d = mean_derivative_matrix(b, beta, link)
        assert np.all(np.diag(d) > 0)
        np.testing.assert_array_equal(d, np.diag(np.diag(d)))


def test_dataset_shapes_and_blocks(rng):
    x = rng.normal(size=(6, 3, 2))
    y = rng.normal(size=(6, 2))
    d = Dataset(x, y)
    assert (d.n, d.p, d.l) == (6, 3, 2)
    blocks = list(d.blocks)
    assert len(blocks) == 6
    np.testing.assert_array_equal(blocks[2].x, x[2])
    again = Dataset.from_blocks(blocks)
    np.testing.assert_array_equal(again.x, x)
    beta = rng.normal(size=3)
    np.testing.assert_allclose(d.linear_predictor(beta)[4], blocks[4].linear_predictor(beta))
    np.testing.assert_allclose(residuals(d, beta)[1], residual(blocks[1], beta))


def test_dataset_rejects_bad_input(rng):
    with pytest.raises(ValueError):
        Dataset(rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 3)))
    x = rng.normal(size=(3, 2, 2))
    x[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        Dataset(x, np.zeros((3, 2)))
    with pytest.raises(ValueError):
        Dataset.from_blocks([ObservationBlock([1.0], [[1.0]]),
                             ObservationBlock([1.0, 2.0], np.eye(2))])


def test_dataset_warns_on_huge_columns():
    x = np.ones((2, 1, 1)) * 1e7
    with pytest.warns(RuntimeWarning):
        Dataset(x, np.zeros((2, 1)))


def test_dataset_is_read_only(rng):
    d = Dataset(rng.normal(size=(3, 2, 1)), rng.normal(size=(3, 1)))
    with pytest.raises(ValueError):
        d.x[0, 0, 0] = 1.0


def test_parameter_vector_support():
    pv = ParameterVector(np.array([0.0, 1.5, 0.0, -2.0]), m_set=(0,))
    assert pv.support == (1, 3)
    assert pv.model_set == (0, 1, 3)
    with pytest.raises(ValueError):
        ParameterVector(np.zeros(2), m_set=(5,))


def test_unknown_link():
    with pytest.raises(ValueError):
        get_link("probit")
    assert ModelSpec("logit").link is LOGIT
