"""Cross-modal priors from attention footprints, and the choice of k.

An attention matrix has one row per node and one column per patch; each row
is a softmax output. Rows of the class-level aggregate are l2-normalised and
the prior is their Gram matrix, W = A A', i.e. cosine similarities between
node footprints. A sharpness k turns W into per-edge penalty weights

    w~ = 1 - sigmoid(k (W - 0.5)),

so edges with strong co-attention are penalised less. k* is picked over a
candidate grid by the extended BIC of a joint fit at each k.
"""

from dataclasses import dataclass, field
import logging

from joblib import delayed, Parallel
import numpy as np
from scipy.special import expit

from .admm_solver import DEFAULT_EDGE_TOL
from .admm_solver import edge_count
from .admm_solver import fit_joint
from .admm_solver import logdet_pd
from .errors import ConfigError
from .errors import ConvergenceError
from .errors import DimensionError
from .errors import EmptyInputError
from .errors import MalformedInputError

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-6
SYMMETRY_TOL = 1e-9
DEFAULT_GAMMA_EBIC = 0.5
DEFAULT_CANDIDATES = tuple(range(51))


class AttentionStack:
    """Per-sample attention matrices of one class and modality."""

    def __init__(self, matrices, class_id=1, modality='source'):
        if len(matrices) == 0:
            raise EmptyInputError('Attention stack for class {} is empty',
                                  class_id)
        matrices = [np.asarray(m, dtype=float) for m in matrices]
        shape = matrices[0].shape
        for index, matrix in enumerate(matrices):
            if matrix.ndim != 2 or matrix.shape != shape:
                raise DimensionError(
                    'Attention matrix {} has shape {}, expected {}',
                    index, matrix.shape, shape)
            if not np.all(np.isfinite(matrix)) or np.any(matrix < 0):
                raise MalformedInputError(
                    'Attention matrix {} has negative or non-finite entries',
                    index)
            row_sums = matrix.sum(axis=1)
            bad = np.flatnonzero(np.abs(row_sums - 1.0) > ROW_SUM_TOL)
            if bad.size:
                raise MalformedInputError(
                    'Attention matrix {} row {} sums to {!r}, expected 1',
                    index, int(bad[0]), float(row_sums[bad[0]]))
        self.matrices = matrices
        self.class_id = class_id
        self.modality = modality

    @property
    def p(self):
        return self.matrices[0].shape[0]

    @property
    def n_patches(self):
        return self.matrices[0].shape[1]

    def __len__(self):
        return len(self.matrices)


class PriorMatrix:
    """Symmetric p x p prior with entries in [-1, 1]."""

    def __init__(self, w, class_id=1):
        w = np.array(w, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DimensionError('Prior must be square, got shape {}',
                                 w.shape)
        if not np.allclose(w, w.T, rtol=0.0, atol=SYMMETRY_TOL):
            raise MalformedInputError('Prior for class {} is not symmetric',
                                      class_id)
        if np.any(np.abs(w) > 1.0 + SYMMETRY_TOL):
            raise MalformedInputError(
                'Prior for class {} has entries outside [-1, 1]', class_id)
        self.w = np.clip(w, -1.0, 1.0)
        self.class_id = class_id

    @property
    def p(self):
        return self.w.shape[0]

    @classmethod
    def constant(cls, p, value=0.5, class_id=1):
        """Uninformative prior: every k gives the same weights."""
        return cls(np.full((p, p), value), class_id)


class AdaptiveWeightMatrix:
    """Per-edge penalty multipliers in (0, 1) at sharpness k."""

    def __init__(self, w_tilde, k=0.0, class_id=1):
        self.w_tilde = np.asarray(w_tilde, dtype=float)
        self.k = float(k)
        self.class_id = class_id

    @property
    def p(self):
        return self.w_tilde.shape[0]

    @classmethod
    def uniform(cls, p, class_id=1):
        return cls(np.full((p, p), 0.5), 0.0, class_id)


def aggregate_attention(stack):
    """Element-wise mean over the stack."""
    if len(stack) == 0:
        raise EmptyInputError('Cannot aggregate an empty attention stack')
    return np.mean(np.stack(stack.matrices), axis=0)


def attention_prior(agg, class_id=1):
    """Cosine similarity between the rows of an aggregated attention matrix."""
    agg = np.asarray(agg, dtype=float)
    if agg.ndim != 2:
        raise DimensionError('Aggregated attention must be 2-D, got {}-D',
                             agg.ndim)
    norms = np.linalg.norm(agg, axis=1)
    zero_rows = np.flatnonzero(norms == 0)
    if zero_rows.size:
        raise EmptyInputError(
            'Aggregated attention row {} is all zero', int(zero_rows[0]))
    normalized = agg / norms[:, np.newaxis]
    w = normalized @ normalized.T
    w = 0.5 * (w + w.T)
    return PriorMatrix(np.clip(w, -1.0, 1.0), class_id)


def adaptive_weights(prior, k):
    if not k >= 0:
        raise ConfigError('Sharpness k must be nonnegative, got {!r}', k)
    # 1 - 1/(1 + exp(-x)) == expit(-x), exact at x = 0.
    w_tilde = expit(-k * (prior.w - 0.5))
    return AdaptiveWeightMatrix(w_tilde, k, prior.class_id)


def class_edge_counts(model, edge_tol=DEFAULT_EDGE_TOL):
    return [edge_count(model.combined(c), edge_tol)
            for c in range(model.n_classes)]


def ebic_score(model, covs, gamma_ebic=DEFAULT_GAMMA_EBIC,
               edge_tol=DEFAULT_EDGE_TOL):
    """Extended BIC of a fitted model:

        sum_c n_c [tr(Sigma_c Theta_c) - logdet Theta_c]
            + |E| log(sum_c n_c) + 4 gamma |E| log p

    Theta_c is theta_hat; |E| counts upper-triangle edges of
    theta_com + s_c, summed over classes."""
    if len(covs) != model.n_classes:
        raise DimensionError('Got {} covariances for a {}-class model',
                             len(covs), model.n_classes)
    fit_term = 0.0
    for theta, cov in zip(model.theta_hat, covs):
        fit_term += cov.n_c * (float(np.sum(cov.sigma_hat * theta))
                               - logdet_pd(theta))
    n_edges = sum(class_edge_counts(model, edge_tol))
    n_total = sum(cov.n_c for cov in covs)
    return (fit_term + n_edges * np.log(n_total)
            + 4.0 * gamma_ebic * n_edges * np.log(model.p))


@dataclass
class SelectionContext:
    """Everything select_k needs besides the candidate list."""
    covs: list
    priors: list
    config: object
    gamma_ebic: float = DEFAULT_GAMMA_EBIC
    edge_tol: float = DEFAULT_EDGE_TOL
    n_jobs: int = 1

    def __post_init__(self):
        if len(self.priors) != len(self.covs):
            raise DimensionError('Got {} priors for {} classes',
                                 len(self.priors), len(self.covs))


@dataclass
class SelectionResult:
    k_star: float
    weights: list
    model: object
    scores: list = field(default_factory=list)

    def to_dict(self):
        return {'k_star': self.k_star, 'scores': self.scores}


def score_candidate(k, context):
    weights = [adaptive_weights(prior, k) for prior in context.priors]
    model = fit_joint(context.covs, weights, context.config)
    score = {
        'k': k,
        'converged': model.converged,
        'edges': sum(class_edge_counts(model, context.edge_tol)),
        'ebic': ebic_score(model, context.covs, context.gamma_ebic,
                           context.edge_tol),
    }
    return score, weights, model


def select_k(candidates, context):
    """Fit once per candidate k from a cold start and keep the lowest eBIC.
    Ties go to the smaller k. Candidates whose fit does not converge are
    skipped with a warning."""
    candidates = sorted(set(candidates))
    if not candidates:
        raise EmptyInputError('select_k needs at least one candidate')
    if 0 not in candidates:
        raise ConfigError('Candidate list must include k = 0, got {}',
                          candidates)
    if any(k < 0 for k in candidates):
        raise ConfigError('Candidates must be nonnegative, got {}',
                          candidates)
    logger.info('select_k: %s candidates, n_jobs=%s', len(candidates),
                context.n_jobs)
    results = Parallel(n_jobs=context.n_jobs, prefer='threads')(
        delayed(score_candidate)(k, context) for k in candidates)

    scores = []
    best = None
    for score, weights, model in results:
        scores.append(score)
        logger.debug('k=%s ebic=%.10g edges=%s converged=%s', score['k'],
                     score['ebic'], score['edges'], score['converged'])
        if not score['converged']:
            logger.warning('select_k: fit at k=%s did not converge; skipped',
                           score['k'])
            continue
        if best is None or (score['ebic'], score['k']) < \
                (best[0]['ebic'], best[0]['k']):
            best = (score, weights, model)
    if best is None:
        raise ConvergenceError('No candidate k converged out of {}',
                               len(candidates))
    score, weights, model = best
    model.k_star = score['k']
    logger.info('select_k: k*=%s ebic=%.10g', score['k'], score['ebic'])
    return SelectionResult(score['k'], weights, model, scores)
