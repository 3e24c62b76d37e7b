from math import erf, sqrt

import numpy as np
import pytest

from joint_ggm import inference
from joint_ggm.admm_solver import fit_joint
from joint_ggm.admm_solver import JointModel
from joint_ggm.admm_solver import SolverConfig
from joint_ggm.admm_solver import uniform_weights
from joint_ggm.errors import ConfigError
from joint_ggm.errors import DimensionError
from joint_ggm.errors import NonFiniteError
from joint_ggm.errors import NotPositiveDefiniteError
from joint_ggm.gaussianize import ClassCovariance
from joint_ggm.inference import ClassifierScores
from joint_ggm.inference import MessagePassingWeights
from joint_ggm.inference import NodeFeatures


def exact_gelu(x):
    return x * 0.5 * (1.0 + erf(x / sqrt(2.0)))


def model_from(precisions, means, n_c=None):
    p = precisions[0].shape[0]
    return JointModel(np.zeros((p, p)), precisions, precisions,
                      mu_hat=means, n_c=n_c)


# Classification

def test_nearest_mean_under_identity():
    model = model_from([np.eye(3)] * 2, [np.zeros(3), [2.0, 0.0, 0.0]])
    result = inference.classify(np.zeros(3), model)
    assert np.array_equal(result.scores, [0.0, -2.0])
    assert result.predicted == 0
    assert result.label == 1


def test_identity_score_is_half_squared_norm():
    model = model_from([np.eye(4)], [np.zeros(4)])
    z = np.array([1.0, -2.0, 0.5, 3.0])
    assert inference.classify(z, model).scores[0] == -0.5 * np.dot(z, z)


def test_score_includes_log_determinant():
    theta = np.diag([4.0, 1.0])
    model = model_from([theta], [np.zeros(2)])
    expected = 0.5 * np.log(4.0) - 0.5 * 4.0
    assert abs(inference.classify([1.0, 0.0], model).scores[0]
               - expected) < 1e-14


def test_ties_go_to_the_first_class():
    model = model_from([np.eye(2)] * 3, [np.zeros(2)] * 3)
    assert inference.classify([0.3, 0.1], model).predicted == 0


def test_shifting_scores_keeps_the_decision():
    scores = np.array([-3.0, -1.5, -2.0])
    for shift in (-100.0, 0.0, 7.5):
        assert ClassifierScores(scores + shift).predicted == 1


def test_class_prior_correction():
    model = model_from([np.eye(2)] * 2, [np.zeros(2)] * 2, n_c=[30, 10])
    plain = inference.classify([0.0, 0.0], model)
    corrected = inference.classify([0.0, 0.0], model, class_prior=True)
    assert np.allclose(corrected.scores - plain.scores,
                       np.log([0.75, 0.25]))
    with pytest.raises(ConfigError):
        inference.classify([0.0, 0.0], model_from([np.eye(2)], [np.zeros(2)]),
                           class_prior=True)


def test_classify_checks_dimensions():
    model = model_from([np.eye(3)], [np.zeros(3)])
    with pytest.raises(DimensionError):
        inference.classify(np.zeros(2), model)
    with pytest.raises(DimensionError):
        inference.classify_batch(np.zeros((4, 2)), model)


def test_batch_agrees_with_single_samples():
    rng = np.random.default_rng(30)
    a = rng.standard_normal((3, 3))
    precisions = [np.eye(3) * 2, a @ a.T + np.eye(3)]
    model = model_from(precisions, [np.zeros(3), np.ones(3)])
    samples = rng.standard_normal((20, 3))
    scores, predicted = inference.classify_batch(samples, model)
    for row, expected_scores, expected_class in zip(samples, scores,
                                                     predicted):
        single = inference.classify(row, model)
        assert np.allclose(single.scores, expected_scores, rtol=0,
                           atol=1e-12)
        assert single.predicted == expected_class


def test_accuracy_close_to_bayes_rate():
    """Fit on draws from a known 3-class mixture and compare held-out
    accuracy with the Monte Carlo Bayes rate of the true parameters."""
    rng = np.random.default_rng(31)
    means = [np.zeros(3), np.array([1.2, 0.0, 0.0]),
             np.array([0.0, 1.2, 0.4])]
    precisions = [np.array([[1.0, 0.3, 0.0], [0.3, 1.0, 0.0],
                            [0.0, 0.0, 1.0]]),
                  np.array([[2.0, -0.5, 0.0], [-0.5, 1.0, 0.2],
                            [0.0, 0.2, 1.0]]),
                  np.eye(3) * 1.5]
    factors = [np.linalg.cholesky(np.linalg.inv(t)) for t in precisions]

    def draw(c, n):
        return means[c] + rng.standard_normal((n, 3)) @ factors[c].T

    covs = []
    for c in range(3):
        x = draw(c, 3000)
        centered = x - x.mean(axis=0)
        covs.append(ClassCovariance(centered.T @ centered / len(x), len(x),
                                    x.mean(axis=0), c + 1))
    model = fit_joint(covs, uniform_weights(3, 3),
                      SolverConfig(rho=0.005, gamma_s=0.005,
                                   max_iters=5000))
    assert model.converged
    labels = rng.integers(3, size=2000)
    samples = np.vstack([draw(c, 1) for c in labels])
    _, predicted = inference.classify_batch(samples, model)
    accuracy = np.mean(predicted == labels)
    bayes = inference.bayes_rate_monte_carlo(
        means, precisions, 10 ** 6, np.random.default_rng(32))
    assert abs(accuracy - bayes) <= 0.03


# Message passing

def test_gelu():
    assert inference.gelu(0.0) == 0.0
    for x in (-3.0, -0.5, 0.7, 5.0):
        assert abs(inference.gelu(x) - exact_gelu(x)) < 1e-12


def test_diagonal_theta_gives_zero_output():
    rng = np.random.default_rng(33)
    nodes = NodeFeatures(rng.standard_normal((4, 3)))
    result = inference.signed_message_passing(
        np.diag([1.0, 2.0, 3.0, 4.0]), nodes,
        MessagePassingWeights.identity(3))
    assert np.array_equal(result, np.zeros((4, 3)))


def test_negative_only_theta_uses_the_synergistic_branch():
    rng = np.random.default_rng(34)
    theta = np.eye(3) - 0.2 * (np.ones((3, 3)) - np.eye(3))
    nodes = NodeFeatures(rng.standard_normal((3, 2)))
    weights = MessagePassingWeights(rng.standard_normal((2, 2)),
                                    rng.standard_normal((2, 2)))
    result = inference.signed_message_passing(theta, nodes, weights)
    _, negative = inference.sign_partition(theta)
    alpha = inference.normalize_rows(negative, weights.epsilon)
    expected = inference.gelu(alpha @ nodes.features @ weights.w_neg)
    assert np.allclose(result, expected, rtol=0, atol=1e-14)


def test_three_node_fixture():
    theta = np.array([[1.0, 0.5, -0.5],
                      [0.5, 1.0, 0.0],
                      [-0.5, 0.0, 1.0]])
    nodes = NodeFeatures([[1.0], [2.0], [3.0]])
    result = inference.signed_message_passing(
        theta, nodes, MessagePassingWeights([[1.0]], [[1.0]]))
    a = 0.5 / (0.5 + 1e-8)
    assert abs(result[0, 0] - exact_gelu(a * 2 + a * 3)) < 1e-9
    assert abs(result[1, 0] - exact_gelu(a * 1)) < 1e-9
    assert abs(result[2, 0] - exact_gelu(a * 1)) < 1e-9
    assert 4.999 < result[0, 0] < 5.0


def test_message_passing_properties_on_random_instances():
    rng = np.random.default_rng(35)
    for _ in range(200):
        p = int(rng.integers(2, 8))
        d = int(rng.integers(1, 4))
        theta = rng.standard_normal((p, p))
        theta = 0.5 * (theta + theta.T)
        theta[rng.random((p, p)) < 0.3] = 0.0
        theta = np.triu(theta) + np.triu(theta, 1).T
        positive, negative = inference.sign_partition(theta)
        off = np.abs(theta) > 1e-6
        np.fill_diagonal(off, False)
        assert not np.any((positive > 0) & (negative > 0))
        assert np.array_equal((positive > 0) | (negative > 0), off)
        for magnitudes in (positive, negative):
            alpha = inference.normalize_rows(magnitudes, 1e-8)
            sums = alpha.sum(axis=1)
            totals = magnitudes.sum(axis=1)
            assert np.all(sums <= 1.0)
            assert np.all(sums[totals == 0] == 0.0)
            assert np.allclose(sums, totals / (totals + 1e-8), atol=1e-12)
        nodes = NodeFeatures(rng.standard_normal((p, d)))
        weights = MessagePassingWeights(rng.standard_normal((d, 2)),
                                        rng.standard_normal((d, 2)))
        result = inference.signed_message_passing(theta, nodes, weights)
        for i in range(p):
            total = np.zeros(2)
            for j in range(p):
                if i == j:
                    continue
                if theta[i, j] > 1e-6:
                    share = theta[i, j] / (positive[i].sum() + 1e-8)
                    total += share * (weights.w_pos.T @ nodes.features[j])
                elif theta[i, j] < -1e-6:
                    share = -theta[i, j] / (negative[i].sum() + 1e-8)
                    total += share * (weights.w_neg.T @ nodes.features[j])
            expected = [exact_gelu(x) for x in total]
            assert np.allclose(result[i], expected, rtol=0, atol=1e-10)


def test_message_passing_shape_checks():
    nodes = NodeFeatures(np.ones((3, 2)))
    with pytest.raises(DimensionError):
        inference.signed_message_passing(np.eye(4), nodes,
                                         MessagePassingWeights.identity(2))
    with pytest.raises(DimensionError):
        inference.signed_message_passing(np.eye(3), nodes,
                                         MessagePassingWeights.identity(3))
    with pytest.raises(DimensionError):
        MessagePassingWeights(np.eye(2), np.eye(3))
    with pytest.raises(ConfigError):
        MessagePassingWeights(np.eye(2), np.eye(2), epsilon=0.0)
    with pytest.raises(NonFiniteError):
        NodeFeatures([[np.nan]])


# Partial correlation and precision selection

def test_partial_correlation_of_diagonal_is_identity():
    assert np.array_equal(inference.partial_correlation(np.diag([1.0, 4.0])),
                          np.eye(2))


def test_partial_correlation_two_by_two():
    rho = inference.partial_correlation([[2.0, -1.0], [-1.0, 2.0]])
    assert rho[0, 1] == 0.5


def test_partial_correlation_signs_oppose_theta():
    rng = np.random.default_rng(36)
    a = rng.standard_normal((5, 5))
    theta = a @ a.T + 0.5 * np.eye(5)
    rho = inference.partial_correlation(theta)
    assert np.all(np.abs(rho) <= 1.0)
    assert np.array_equal(rho, rho.T)
    off = ~np.eye(5, dtype=bool)
    assert np.all(np.sign(rho[off]) == -np.sign(theta[off]))
    for i in range(5):
        for j in range(5):
            if i != j:
                expected = -theta[i, j] / np.sqrt(theta[i, i] * theta[j, j])
                assert abs(rho[i, j] - expected) < 1e-12


def test_partial_correlation_rejects_bad_diagonal():
    with pytest.raises(NotPositiveDefiniteError):
        inference.partial_correlation([[1.0, 0.0], [0.0, 0.0]])


def test_select_precision():
    theta_com = np.eye(2) * 3
    model = JointModel(theta_com, [np.zeros((2, 2))] * 2,
                       [np.eye(2), np.eye(2) * 2])
    assert inference.select_precision(model, layer='common') is \
        model.theta_com
    assert np.array_equal(inference.select_precision(model, 1),
                          np.eye(2) * 2)
    with pytest.raises(ConfigError):
        inference.select_precision(model)
    with pytest.raises(DimensionError):
        inference.select_precision(model, 2)
    with pytest.raises(ConfigError):
        inference.select_precision(model, 0, layer='specific')
