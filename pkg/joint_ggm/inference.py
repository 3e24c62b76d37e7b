"""Classification and message passing with fitted precision matrices.

A sample z is scored against class c by its Gaussian log-likelihood up to a
shared constant,

    s(c | z) = 1/2 logdet Theta_c - 1/2 (z - mu_c)' Theta_c (z - mu_c),

and assigned to the best scoring class. Message passing splits the
neighbours of a node by the sign of theta_ij: positive entries are
competitive (mutually exclusive) neighbours, negative entries synergistic
ones, and each branch has its own projection.
"""

import logging

import numpy as np
from scipy.special import ndtr

from .admm_solver import DEFAULT_EDGE_TOL
from .admm_solver import JointModel
from .admm_solver import logdet_pd
from .errors import ConfigError
from .errors import DimensionError
from .errors import NonFiniteError
from .errors import NotPositiveDefiniteError

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-8
LAYERS = ('combined', 'common')


class ClassifierScores:
    """Per-class scores of one sample; predicted is a 0-based class index."""

    def __init__(self, scores, class_ids=None):
        self.scores = np.asarray(scores, dtype=float)
        # np.argmax returns the first maximum.
        self.predicted = int(np.argmax(self.scores))
        self.class_ids = (list(class_ids) if class_ids is not None
                          else list(range(1, self.scores.size + 1)))

    @property
    def label(self):
        return self.class_ids[self.predicted]

    def to_dict(self):
        return {'scores': self.scores, 'predicted': self.label}


class NodeFeatures:

    def __init__(self, features):
        features = np.array(features, dtype=float)
        if features.ndim != 2:
            raise DimensionError('Node features must be p x d, got {}-D',
                                 features.ndim)
        if not np.all(np.isfinite(features)):
            raise NonFiniteError('Node features contain non-finite values')
        self.features = features

    @property
    def p(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]


class MessagePassingWeights:
    """Projections for the competitive (w_pos) and synergistic (w_neg)
    branches, both d x d'."""

    def __init__(self, w_pos, w_neg, epsilon=DEFAULT_EPSILON):
        self.w_pos = np.atleast_2d(np.asarray(w_pos, dtype=float))
        self.w_neg = np.atleast_2d(np.asarray(w_neg, dtype=float))
        if self.w_pos.shape != self.w_neg.shape:
            raise DimensionError('w_pos has shape {}, w_neg has shape {}',
                                 self.w_pos.shape, self.w_neg.shape)
        if not epsilon > 0:
            raise ConfigError('epsilon must be positive, got {!r}', epsilon)
        self.epsilon = float(epsilon)

    @classmethod
    def identity(cls, d, epsilon=DEFAULT_EPSILON):
        return cls(np.eye(d), np.eye(d), epsilon)


def class_log_priors(model):
    total = sum(model.n_c)
    if total <= 0 or min(model.n_c) <= 0:
        raise ConfigError('Class prior correction needs positive class '
                          'sizes, got {}', model.n_c)
    return np.log(np.asarray(model.n_c, dtype=float) / total)


def classify_batch(samples, model, class_prior=False):
    """Score every row of an n x p matrix; returns (n x C scores, n
    predicted indices)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[1] != model.p:
        raise DimensionError('Samples have p={}, model has p={}',
                             samples.shape[1], model.p)
    scores = np.empty((samples.shape[0], model.n_classes))
    for c, (theta, mu) in enumerate(zip(model.theta_hat, model.mu_hat)):
        centered = samples - mu
        quadratic = np.einsum('ij,jk,ik->i', centered, theta, centered)
        scores[:, c] = 0.5 * logdet_pd(theta) - 0.5 * quadratic
    if class_prior:
        scores = scores + class_log_priors(model)
    return scores, np.argmax(scores, axis=1)


def classify(z_tilde, model, class_prior=False):
    z_tilde = np.asarray(z_tilde, dtype=float)
    if z_tilde.shape != (model.p,):
        raise DimensionError('Sample has shape {}, model has p={}',
                             z_tilde.shape, model.p)
    scores, _ = classify_batch(z_tilde[np.newaxis, :], model, class_prior)
    return ClassifierScores(scores[0], model.class_ids)


def bayes_rate_monte_carlo(means, precisions, n_draws, rng,
                           chunk_size=100000):
    """Accuracy of the Bayes classifier under equal class priors, estimated
    from n_draws labelled samples of the true mixture."""
    truth = JointModel(np.zeros_like(precisions[0]), precisions, precisions,
                       mu_hat=means)
    factors = [np.linalg.cholesky(np.linalg.inv(theta))
               for theta in precisions]
    correct = 0
    remaining = n_draws
    while remaining > 0:
        size = min(chunk_size, remaining)
        labels = rng.integers(len(means), size=size)
        noise = rng.standard_normal((size, truth.p))
        samples = np.empty_like(noise)
        for c, (mu, factor) in enumerate(zip(means, factors)):
            rows = labels == c
            samples[rows] = mu + noise[rows] @ factor.T
        _, predicted = classify_batch(samples, truth)
        correct += int(np.sum(predicted == labels))
        remaining -= size
    return correct / n_draws


def gelu(x):
    """Exact GELU, x * Phi(x)."""
    return x * ndtr(x)


def sign_partition(theta, edge_tol=DEFAULT_EDGE_TOL):
    """Magnitudes of the positive and negative off-diagonal entries."""
    theta = np.asarray(theta, dtype=float)
    off = theta - np.diag(np.diag(theta))
    positive = np.where(off > edge_tol, off, 0.0)
    negative = np.where(off < -edge_tol, -off, 0.0)
    return positive, negative


def normalize_rows(magnitudes, epsilon):
    return magnitudes / (magnitudes.sum(axis=1, keepdims=True) + epsilon)


def signed_message_passing(theta, nodes, weights, edge_tol=DEFAULT_EDGE_TOL):
    """h_i = GELU(sum_{theta_ij>0} a+_ij W_pos' z_j
                  + sum_{theta_ij<0} a-_ij W_neg' z_j)
    with a+-_ij = |theta_ij| / (same-sign row sum + epsilon)."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (nodes.p, nodes.p):
        raise DimensionError('theta has shape {}, node features have p={}',
                             theta.shape, nodes.p)
    if weights.w_pos.shape[0] != nodes.d:
        raise DimensionError('Weights expect d={}, node features have d={}',
                             weights.w_pos.shape[0], nodes.d)
    positive, negative = sign_partition(theta, edge_tol)
    alpha_pos = normalize_rows(positive, weights.epsilon)
    alpha_neg = normalize_rows(negative, weights.epsilon)
    messages = (alpha_pos @ (nodes.features @ weights.w_pos)
                + alpha_neg @ (nodes.features @ weights.w_neg))
    return gelu(messages)


def partial_correlation(theta):
    """-theta_ij / sqrt(theta_ii theta_jj) with a unit diagonal."""
    theta = np.asarray(theta, dtype=float)
    diagonal = np.diag(theta)
    if np.any(diagonal <= 0):
        raise NotPositiveDefiniteError(
            'partial_correlation needs a positive diagonal')
    scale = np.sqrt(diagonal)
    rho = -theta / np.outer(scale, scale)
    np.fill_diagonal(rho, 1.0)
    return np.clip(0.5 * (rho + rho.T), -1.0, 1.0)


def select_precision(model, class_index=None, layer='combined'):
    """The matrix message passing runs on: theta_hat of one class, or the
    common layer when the class is unknown."""
    if layer == 'common':
        return model.theta_com
    if layer != 'combined':
        raise ConfigError('Unknown layer {!r}, expected one of {}', layer,
                          ', '.join(LAYERS))
    if class_index is None:
        raise ConfigError('The combined layer needs a class index')
    if not 0 <= class_index < model.n_classes:
        raise DimensionError('Class index {} out of range for {} classes',
                             class_index, model.n_classes)
    return model.theta_hat[class_index]
