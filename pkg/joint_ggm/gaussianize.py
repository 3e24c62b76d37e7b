"""Rank-based nonparanormal transformation and class covariances.

Each column of a sample matrix is replaced by the standard normal quantiles
of its midranks, z = Phi^-1((rank - 0.5) / n). The transformed matrices feed
the uncentered class covariance Sigma = Z'Z / n and the class mean used by
the classifier.
"""

import logging

import numpy as np
from scipy import stats
from scipy.special import ndtri
from sklearn.covariance import empirical_covariance

from .errors import DimensionError
from .errors import EmptyInputError
from .errors import MalformedInputError
from .errors import NonFiniteError

logger = logging.getLogger(__name__)

SHAPIRO_ALPHA = 0.05


class ObservationMatrix:
    """Per-sample node observations of one class, rows are samples."""

    def __init__(self, data, class_id=1, transformed=False,
                 degenerate_columns=()):
        data = np.array(data, dtype=float)
        if data.ndim != 2:
            raise DimensionError('Observation matrix must be 2-D, got {}-D',
                                 data.ndim)
        if data.shape[0] < 2:
            raise MalformedInputError(
                'Observation matrix for class {} needs at least 2 samples, '
                'got {}', class_id, data.shape[0]
            )
        check_finite(data, 'observation matrix for class {}'.format(class_id))
        data.setflags(write=False)
        self.data = data
        self.class_id = class_id
        self.transformed = transformed
        self.degenerate_columns = tuple(degenerate_columns)

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def p(self):
        return self.data.shape[1]

    def __repr__(self):
        return 'ObservationMatrix(n={}, p={}, class_id={}, transformed={})'\
            .format(self.n, self.p, self.class_id, self.transformed)


class ClassCovariance:
    """Uncentered covariance of transformed observations, plus class mean."""

    def __init__(self, sigma_hat, n_c, mu_hat, class_id=1):
        self.sigma_hat = np.asarray(sigma_hat, dtype=float)
        self.n_c = int(n_c)
        self.mu_hat = np.asarray(mu_hat, dtype=float)
        self.class_id = class_id

    @property
    def p(self):
        return self.sigma_hat.shape[0]

    def to_dict(self):
        return {
            'p': self.p,
            'n_c': self.n_c,
            'class_id': self.class_id,
            'sigma_hat': self.sigma_hat,
            'mu_hat': self.mu_hat,
        }

    @classmethod
    def from_dict(cls, d):
        sigma_hat = np.array(d['sigma_hat'], dtype=float)
        if sigma_hat.shape != (d['p'], d['p']):
            raise DimensionError('sigma_hat has shape {}, expected p={}',
                                 sigma_hat.shape, d['p'])
        return cls(sigma_hat, d['n_c'], d['mu_hat'], d.get('class_id', 1))


def check_finite(values, what):
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(values)))[0]
        raise NonFiniteError('Non-finite value in {} at index {}',
                             what, tuple(int(i) for i in bad))


def rank_ecdf(column):
    """Midrank empirical CDF, (rank - 0.5) / n, always inside (0, 1)."""
    column = np.asarray(column, dtype=float)
    if column.ndim != 1 or column.size < 1:
        raise DimensionError('rank_ecdf needs a nonempty 1-D column')
    check_finite(column, 'column')
    ranks = stats.rankdata(column, method='average')
    return (ranks - 0.5) / column.size


def normal_quantile(p):
    """Standard normal quantile function. Accepts scalars or arrays."""
    p_array = np.asarray(p, dtype=float)
    if not np.all((p_array > 0.0) & (p_array < 1.0)):
        raise MalformedInputError(
            'normal_quantile needs probabilities strictly inside (0, 1)')
    result = ndtri(p_array)
    return float(result) if np.ndim(p) == 0 else result


def transform_columns(data):
    """Return (transformed array, degenerate column indices)."""
    transformed = np.empty_like(data)
    degenerate = []
    for j in range(data.shape[1]):
        column = data[:, j]
        if np.all(column == column[0]):
            degenerate.append(j)
        transformed[:, j] = normal_quantile(rank_ecdf(column))
    return transformed, degenerate


def nonparanormal_transform(obs):
    """Map every column of an untransformed ObservationMatrix through
    normal_quantile(rank_ecdf(column)). Constant columns become all zeros
    and are recorded in degenerate_columns."""
    if obs.transformed:
        raise MalformedInputError(
            'Observation matrix for class {} is already transformed',
            obs.class_id)
    transformed, degenerate = transform_columns(obs.data)
    if degenerate:
        logger.warning('class %s: constant columns %s map to zero',
                       obs.class_id, degenerate)
    return ObservationMatrix(transformed, obs.class_id, transformed=True,
                             degenerate_columns=degenerate)


def nonparanormal_transform_pooled(observations):
    """Fit the rank transform on all classes stacked together and split the
    result back per class, in input order."""
    check_same_width(observations)
    if any(obs.transformed for obs in observations):
        raise MalformedInputError('Pooled transform needs raw observations')
    pooled = np.vstack([obs.data for obs in observations])
    transformed, degenerate = transform_columns(pooled)
    if degenerate:
        logger.warning('pooled data: constant columns %s map to zero',
                       degenerate)
    result = []
    start = 0
    for obs in observations:
        stop = start + obs.n
        result.append(ObservationMatrix(transformed[start:stop],
                                        obs.class_id, transformed=True,
                                        degenerate_columns=degenerate))
        start = stop
    logger.info('pooled transform: %s classes, %s rows, p=%s',
                len(observations), pooled.shape[0], pooled.shape[1])
    return result


def transform_against_reference(raw, reference):
    """Transform new samples with the ECDF of reference (training) samples.

    A value x of column j maps to (#{ref < x} + #{ref = x} / 2) / n, the
    same midrank score rank_ecdf gives the reference rows, so a training
    row gets its training score back. Values between two reference values
    land halfway between their scores; values outside the reference range
    are clipped to 1/(4n) and 1 - 1/(4n)."""
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    reference = np.atleast_2d(np.asarray(reference, dtype=float))
    if reference.size == 0:
        raise EmptyInputError('Reference samples are empty')
    if raw.shape[1] != reference.shape[1]:
        raise DimensionError('Samples have p={}, reference has p={}',
                             raw.shape[1], reference.shape[1])
    check_finite(raw, 'samples')
    n_ref = reference.shape[0]
    probabilities = np.empty_like(raw)
    for j in range(raw.shape[1]):
        ref_sorted = np.sort(reference[:, j])
        below = np.searchsorted(ref_sorted, raw[:, j], side='left')
        not_above = np.searchsorted(ref_sorted, raw[:, j], side='right')
        ties = not_above - below
        probabilities[:, j] = (below + 0.5 * ties) / n_ref
    edge = 0.25 / n_ref
    return normal_quantile(np.clip(probabilities, edge, 1.0 - edge))


def empirical_class_covariance(z_tilde, class_id=1):
    """Sigma = (1/n) sum z z' taken about zero, and the column mean."""
    z_tilde = np.atleast_2d(np.asarray(z_tilde, dtype=float))
    sigma_hat = empirical_covariance(z_tilde, assume_centered=True)
    sigma_hat = 0.5 * (sigma_hat + sigma_hat.T)
    return ClassCovariance(sigma_hat, z_tilde.shape[0],
                           z_tilde.mean(axis=0), class_id)


def class_covariance(obs):
    if not obs.transformed:
        raise MalformedInputError(
            'class_covariance needs transformed observations (class {})',
            obs.class_id)
    return empirical_class_covariance(obs.data, obs.class_id)


def shapiro_pass_rate(data, alpha=SHAPIRO_ALPHA):
    """Fraction of columns whose Shapiro-Wilk p-value exceeds alpha.
    Constant columns count as failures."""
    data = np.asarray(data, dtype=float)
    if data.shape[0] < 3:
        raise MalformedInputError('Shapiro-Wilk needs at least 3 samples')
    passed = 0
    for j in range(data.shape[1]):
        column = data[:, j]
        if np.all(column == column[0]):
            continue
        if stats.shapiro(column)[1] > alpha:
            passed += 1
    return passed / data.shape[1]


def check_same_width(observations):
    if not observations:
        raise MalformedInputError('No observation matrices given')
    widths = {obs.p for obs in observations}
    if len(widths) != 1:
        raise DimensionError('Observation matrices disagree on p: {}',
                             sorted(widths))
