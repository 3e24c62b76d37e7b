"""Joint estimation of a common precision matrix and class-specific parts.

For classes c = 1..C with covariances Sigma_c the solver minimises

    sum_c [tr(Sigma_c (T + S_c)) - logdet(T + S_c)]
        + rho |T|_1 + gamma_s sum_c |W_c o S_c|_1

by ADMM on the split Z_c = T + S_c. One iteration runs, in order, the
eigenvalue prox for every Z_c, soft-thresholding of the common part T,
weighted soft-thresholding of every S_c, and the dual ascent on U_c.
Z_c is positive definite after every step and is the precision estimate
handed to inference.

A single-class graphical lasso by coordinate descent (scikit-learn) is kept
beside the solver as an independent reference, along with the independent
and two-stage baselines built from it.
"""

from dataclasses import asdict, dataclass
import logging
import warnings

import networkx as nx
import numpy as np
from scipy import linalg
from sklearn.covariance import graphical_lasso
from sklearn.exceptions import ConvergenceWarning

from .errors import ConfigError
from .errors import ConvergenceError
from .errors import DimensionError
from .errors import NonFiniteError
from .errors import NotPositiveDefiniteError

logger = logging.getLogger(__name__)

DEFAULT_EDGE_TOL = 1e-6
REFERENCE_MAX_P = 50
TAIL_FRACTION = 0.1
TAIL_TOLERANCE = 1e-8


@dataclass(frozen=True)
class SolverConfig:
    rho: float = 0.1
    gamma_s: float = 0.1
    mu: float = 1.0
    max_iters: int = 200
    primal_tol: float = 1e-4
    dual_tol: float = 1e-4
    penalize_diagonal: bool = False

    def __post_init__(self):
        for name in ('rho', 'gamma_s', 'mu', 'primal_tol', 'dual_tol'):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigError('{} must be positive, got {!r}',
                                  name, value)
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ConfigError('max_iters must be a positive integer, got {!r}',
                              self.max_iters)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ADMMState:
    """Iterates of one fit. Owned by a single fit_joint call."""

    def __init__(self, theta_com, s, z, u):
        self.theta_com = theta_com
        self.s = s
        self.z = z
        self.u = u
        self.iteration = 0
        self.primal_history = []
        self.dual_history = []
        self.objective_history = []

    @property
    def n_classes(self):
        return len(self.z)


class JointModel:
    """A fitted bundle: common part, specific parts, precision estimates
    (theta_hat = Z after the last iteration), class means and diagnostics."""

    def __init__(self, theta_com, s, theta_hat, mu_hat=None, n_c=None,
                 class_ids=None, converged=True, iterations=0,
                 residuals=None, config=None, k_star=None, method='joint'):
        self.theta_com = np.asarray(theta_com, dtype=float)
        self.s = [np.asarray(m, dtype=float) for m in s]
        self.theta_hat = [np.asarray(m, dtype=float) for m in theta_hat]
        n_classes = len(self.theta_hat)
        if mu_hat is None:
            mu_hat = [np.zeros(self.p)] * n_classes
        self.mu_hat = [np.asarray(m, dtype=float) for m in mu_hat]
        self.n_c = list(n_c) if n_c is not None else [0] * n_classes
        self.class_ids = (list(class_ids) if class_ids is not None
                          else list(range(1, n_classes + 1)))
        self.converged = bool(converged)
        self.iterations = int(iterations)
        self.residuals = residuals or {}
        self.config = config
        self.k_star = k_star
        self.method = method
        self._check_shapes()

    def _check_shapes(self):
        p = self.p
        if self.theta_com.shape != (p, p):
            raise DimensionError('theta_com must be square, got {}',
                                 self.theta_com.shape)
        if not (len(self.s) == len(self.theta_hat) == len(self.mu_hat)):
            raise DimensionError('Per-class lists disagree: s={}, '
                                 'theta_hat={}, mu_hat={}', len(self.s),
                                 len(self.theta_hat), len(self.mu_hat))
        for m in self.s + self.theta_hat:
            if m.shape != (p, p):
                raise DimensionError('Per-class matrix has shape {}, '
                                     'expected {}', m.shape, (p, p))
        for m in self.mu_hat:
            if m.shape != (p,):
                raise DimensionError('mu_hat has shape {}, expected ({},)',
                                     m.shape, p)

    @property
    def p(self):
        return self.theta_com.shape[0]

    @property
    def n_classes(self):
        return len(self.theta_hat)

    def combined(self, c):
        """Theta_com + S_c, the class precision before the Z substitution."""
        return self.theta_com + self.s[c]

    def to_dict(self):
        return {
            'p': self.p,
            'C': self.n_classes,
            'method': self.method,
            'class_ids': self.class_ids,
            'n_c': self.n_c,
            'theta_com': self.theta_com,
            's': self.s,
            'theta_hat': self.theta_hat,
            'mu_hat': self.mu_hat,
            'converged': self.converged,
            'iterations': self.iterations,
            'k_star': self.k_star,
            'residuals': self.residuals,
            'config': self.config.to_dict() if self.config else None,
        }

    @classmethod
    def from_dict(cls, d):
        config = d.get('config')
        model = cls(
            d['theta_com'], d['s'], d['theta_hat'], d.get('mu_hat'),
            d.get('n_c'), d.get('class_ids'), d.get('converged', True),
            d.get('iterations', 0), d.get('residuals'),
            SolverConfig.from_dict(config) if config else None,
            d.get('k_star'), d.get('method', 'joint'),
        )
        if model.p != d['p'] or model.n_classes != d['C']:
            raise DimensionError('Model header says p={} C={}, matrices say '
                                 'p={} C={}', d['p'], d['C'], model.p,
                                 model.n_classes)
        return model


def symmetrize(matrix):
    return 0.5 * (matrix + matrix.T)


def soft_threshold(x, tau):
    """sign(x) * max(|x| - tau, 0), element-wise; tau may be an array."""
    if np.any(np.asarray(tau) < 0):
        raise ConfigError('soft_threshold needs tau >= 0')
    result = np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)
    if np.ndim(result) == 0:
        return float(result)
    return result


def threshold_off_diagonal(matrix, tau, penalize_diagonal):
    result = soft_threshold(matrix, tau)
    if not penalize_diagonal:
        np.fill_diagonal(result, np.diag(matrix))
    return result


def z_update(g, sigma_hat, mu):
    """argmin_{Z > 0} tr(Sigma Z) - logdet Z + (mu/2)|Z - G|_F^2.

    With Q diag(lam) Q' = G - Sigma/mu, the minimiser is Q diag(lam~) Q'
    where lam~ = (lam + sqrt(lam^2 + 4/mu)) / 2 > 0."""
    m = np.asarray(g, dtype=float) - np.asarray(sigma_hat, dtype=float) / mu
    if not np.all(np.isfinite(m)):
        raise NonFiniteError('Non-finite input to the Z update')
    eigenvalues, q = linalg.eigh(symmetrize(m))
    root = np.sqrt(eigenvalues ** 2 + 4.0 / mu)
    # The second form avoids cancellation for large negative eigenvalues.
    lifted = np.where(eigenvalues >= 0,
                      0.5 * (eigenvalues + root),
                      (2.0 / mu) / (root - eigenvalues))
    return symmetrize((q * lifted) @ q.T)


def theta_com_update(state, config):
    n_classes = state.n_classes
    average = sum(z - s + u / config.mu
                  for z, s, u in zip(state.z, state.s, state.u)) / n_classes
    tau = config.rho / (n_classes * config.mu)
    return symmetrize(threshold_off_diagonal(average, tau,
                                             config.penalize_diagonal))


def s_update(state, weights, config):
    result = []
    for z, u, w in zip(state.z, state.u, weights):
        w = weight_array(w)
        if w.shape != z.shape:
            raise DimensionError('Weight matrix has shape {}, expected {}',
                                 w.shape, z.shape)
        target = z - state.theta_com + u / config.mu
        tau = config.gamma_s * w / config.mu
        result.append(symmetrize(threshold_off_diagonal(
            target, tau, config.penalize_diagonal)))
    return result


def dual_update(state, mu):
    return [u + mu * (z - state.theta_com - s)
            for z, s, u in zip(state.z, state.s, state.u)]


def weight_array(weights):
    """Accept an AdaptiveWeightMatrix or a bare array."""
    return np.asarray(getattr(weights, 'w_tilde', weights), dtype=float)


def uniform_weights(p, n_classes, value=0.5):
    return [np.full((p, p), value) for _ in range(n_classes)]


def initial_state(covs):
    """Theta_com = inverse pooled diagonal, S = 0, Z = Theta_com, U = 0."""
    total = sum(cov.n_c for cov in covs)
    if total > 0:
        pooled = sum(cov.n_c * cov.sigma_hat for cov in covs) / total
    else:
        pooled = sum(cov.sigma_hat for cov in covs) / len(covs)
    diagonal = np.diag(pooled).copy()
    # Constant (degenerate) columns have zero variance.
    diagonal[diagonal <= 0] = 1.0
    theta_com = np.diag(1.0 / diagonal)
    p = theta_com.shape[0]
    n_classes = len(covs)
    return ADMMState(theta_com,
                     [np.zeros((p, p)) for _ in range(n_classes)],
                     [theta_com.copy() for _ in range(n_classes)],
                     [np.zeros((p, p)) for _ in range(n_classes)])


def logdet_pd(theta):
    """log det of a symmetric positive definite matrix via Cholesky."""
    try:
        factor, _ = linalg.cho_factor(theta, lower=True)
    except linalg.LinAlgError:
        raise NotPositiveDefiniteError('Matrix is not positive definite')
    return 2.0 * np.sum(np.log(np.diag(factor)))


def l1_norm(matrix, weights=None, penalize_diagonal=False):
    values = np.abs(matrix)
    if weights is not None:
        values = values * weights
    if not penalize_diagonal:
        values = values - np.diag(np.diag(values))
    return float(values.sum())


def joint_objective(theta_com, s, covs, weights, config):
    """Value of the joint objective at (theta_com, s); inf when a class
    precision theta_com + s_c is not positive definite."""
    total = config.rho * l1_norm(theta_com,
                                 penalize_diagonal=config.penalize_diagonal)
    for s_c, cov, w in zip(s, covs, weights):
        theta = theta_com + s_c
        try:
            logdet = logdet_pd(theta)
        except NotPositiveDefiniteError:
            return np.inf
        total += np.sum(cov.sigma_hat * theta) - logdet
        total += config.gamma_s * l1_norm(s_c, weight_array(w),
                                          config.penalize_diagonal)
    return float(total)


def average_nll(theta, sigma_hat):
    """Average Gaussian negative log-likelihood of samples with (uncentered)
    second moment sigma_hat under precision theta."""
    p = theta.shape[0]
    return 0.5 * (float(np.sum(sigma_hat * theta)) - logdet_pd(theta)
                  + p * np.log(2.0 * np.pi))


def check_covariances(covs):
    if not covs:
        raise DimensionError('fit_joint needs at least one class')
    ps = {cov.sigma_hat.shape for cov in covs}
    if len(ps) != 1:
        raise DimensionError('Class covariances disagree on shape: {}',
                             sorted(ps))
    for cov in covs:
        if not np.all(np.isfinite(cov.sigma_hat)):
            raise NonFiniteError('Non-finite covariance for class {}',
                                 cov.class_id)


def fit_joint(covs, weights, config, callback=None):
    """Run ADMM until both residuals fall below their tolerances or
    max_iters is reached. Returns a JointModel; converged is False when the
    iteration budget ran out. callback(state) is called after every
    iteration."""
    check_covariances(covs)
    if len(weights) != len(covs):
        raise DimensionError('Got {} weight matrices for {} classes',
                             len(weights), len(covs))
    p = covs[0].p
    logger.debug('fit_joint p=%s C=%s config=%s', p, len(covs), config)
    state = initial_state(covs)
    mu = config.mu
    converged = False
    for iteration in range(1, config.max_iters + 1):
        previous = [state.theta_com + s for s in state.s]
        state.z = [z_update(state.theta_com + s - u / mu, cov.sigma_hat, mu)
                   for s, u, cov in zip(state.s, state.u, covs)]
        state.theta_com = theta_com_update(state, config)
        state.s = s_update(state, weights, config)
        state.u = dual_update(state, mu)
        state.iteration = iteration

        primal = max(np.linalg.norm(z - state.theta_com - s)
                     for z, s in zip(state.z, state.s))
        dual = mu * max(np.linalg.norm(state.theta_com + s - old)
                        for s, old in zip(state.s, previous))
        if not (np.isfinite(primal) and np.isfinite(dual)):
            raise NonFiniteError('Non-finite iterate at ADMM iteration {}',
                                 iteration, iteration=iteration)
        objective = joint_objective(state.theta_com, state.s, covs, weights,
                                    config)
        state.primal_history.append(float(primal))
        state.dual_history.append(float(dual))
        state.objective_history.append(objective)
        logger.debug('iteration %s: primal %.3e dual %.3e objective %.10g',
                     iteration, primal, dual, objective)
        if callback is not None:
            callback(state)
        if primal < config.primal_tol and dual < config.dual_tol:
            converged = True
            break

    if converged:
        logger.info('fit_joint converged after %s iterations: primal %.3e '
                    'dual %.3e', state.iteration, state.primal_history[-1],
                    state.dual_history[-1])
    else:
        logger.warning('fit_joint did not converge after %s iterations: '
                       'primal %.3e dual %.3e', state.iteration,
                       state.primal_history[-1], state.dual_history[-1])
    tail_monotone = check_tail_monotone(state.objective_history) \
        if converged else None
    residuals = {
        'primal': state.primal_history,
        'dual': state.dual_history,
        'objective': state.objective_history,
        'final_primal': state.primal_history[-1],
        'final_dual': state.dual_history[-1],
        'objective_tail_monotone': tail_monotone,
    }
    return JointModel(
        state.theta_com, state.s, state.z,
        mu_hat=[cov.mu_hat for cov in covs],
        n_c=[cov.n_c for cov in covs],
        class_ids=[cov.class_id for cov in covs],
        converged=converged, iterations=state.iteration,
        residuals=residuals, config=config,
    )


def check_tail_monotone(objective_history):
    """Log whether the objective is non-increasing over the last tenth of
    the run."""
    tail = objective_history[-max(2, int(len(objective_history)
                                         * TAIL_FRACTION)):]
    steps = np.diff(tail)
    monotone = bool(np.all(steps <= TAIL_TOLERANCE))
    if monotone:
        logger.info('objective non-increasing over the last %s iterations',
                    len(tail))
    else:
        logger.warning('objective rose by up to %.3e over the last %s '
                       'iterations', float(np.max(steps)), len(tail))
    return monotone


def reference_glasso(sigma_hat, lam, tol=1e-10, enet_tol=1e-12,
                     max_iter=2000):
    """Graphical lasso by coordinate descent: the minimiser of
    tr(Sigma Theta) - logdet Theta + lam |Theta|_1,off. Raises
    ConvergenceError when the duality gap does not reach tol."""
    sigma_hat = symmetrize(np.asarray(sigma_hat, dtype=float))
    p = sigma_hat.shape[0]
    if p > REFERENCE_MAX_P:
        raise DimensionError('reference_glasso is limited to p <= {}, got {}',
                             REFERENCE_MAX_P, p)
    if not lam > 0:
        raise ConfigError('reference_glasso needs lam > 0, got {!r}', lam)
    if np.any(np.diag(sigma_hat) <= 0):
        raise NotPositiveDefiniteError(
            'reference_glasso needs a positive covariance diagonal')
    with warnings.catch_warnings():
        warnings.simplefilter('error', ConvergenceWarning)
        try:
            _, precision = graphical_lasso(sigma_hat, alpha=lam, mode='cd',
                                           tol=tol, enet_tol=enet_tol,
                                           max_iter=max_iter)
        except (ConvergenceWarning, FloatingPointError) as e:
            raise ConvergenceError('reference_glasso failed: {}', e)
    return symmetrize(precision)


def baseline_lambda(config, n_classes, weight=0.5):
    """Per-class graphical lasso penalty matched to a joint fit.

    The joint objective charges an edge held by all classes rho once, so
    rho / C per class, and an edge held by one class gamma_s * weight.
    The baseline gets the smaller price: no edge is cheaper for the joint
    fit than for the per-class fits. With one class this is the penalty
    the joint objective collapses to."""
    if n_classes < 1:
        raise ConfigError('Need at least one class, got {}', n_classes)
    return min(config.rho / n_classes, config.gamma_s * weight)


def fit_independent(covs, lam):
    """One reference_glasso per class, wrapped as a model with an empty
    common layer."""
    check_covariances(covs)
    thetas = [reference_glasso(cov.sigma_hat, lam) for cov in covs]
    p = covs[0].p
    return JointModel(
        np.zeros((p, p)), thetas, thetas,
        mu_hat=[cov.mu_hat for cov in covs],
        n_c=[cov.n_c for cov in covs],
        class_ids=[cov.class_id for cov in covs],
        method='independent',
    )


def fit_two_stage(covs, lam, edge_tol=DEFAULT_EDGE_TOL):
    """reference_glasso per class, then a split: an off-diagonal entry is
    common when it is nonzero with one sign in every class and takes the
    smallest magnitude; the common diagonal is the class mean."""
    check_covariances(covs)
    thetas = np.array([reference_glasso(cov.sigma_hat, lam) for cov in covs])
    signs = np.sign(np.where(np.abs(thetas) > edge_tol, thetas, 0.0))
    shared = np.all(signs == signs[0], axis=0) & (signs[0] != 0)
    theta_com = np.where(shared, signs[0] * np.abs(thetas).min(axis=0), 0.0)
    np.fill_diagonal(theta_com, thetas.diagonal(axis1=1, axis2=2).mean(axis=0))
    return JointModel(
        theta_com, [theta - theta_com for theta in thetas], list(thetas),
        mu_hat=[cov.mu_hat for cov in covs],
        n_c=[cov.n_c for cov in covs],
        class_ids=[cov.class_id for cov in covs],
        method='two_stage',
    )


def upper_support(matrix, edge_tol=DEFAULT_EDGE_TOL):
    """Boolean mask of upper-triangle off-diagonal entries above edge_tol."""
    mask = np.abs(matrix) > edge_tol
    return np.triu(mask, k=1)


def edge_count(matrix, edge_tol=DEFAULT_EDGE_TOL):
    return int(upper_support(matrix, edge_tol).sum())


def common_specific_ratio(model, edge_tol=DEFAULT_EDGE_TOL):
    """Share of estimated edges that sit in the common layer."""
    common = edge_count(model.theta_com, edge_tol)
    specific = sum(edge_count(s, edge_tol) for s in model.s)
    if common + specific == 0:
        logger.warning('common_specific_ratio: model has no edges')
        return 0.0
    return common / (common + specific)


def parse_layer(selector, n_classes):
    """Expand a layer selector (common, specific:c, combined:c or all) into
    a list of (tag, kind, class index) with 1-based class numbers in tags."""
    if selector == 'all':
        return ([('common', 'common', None)]
                + [('specific:{}'.format(c + 1), 'specific', c)
                   for c in range(n_classes)])
    if selector == 'common':
        return [('common', 'common', None)]
    kind, _, number = selector.partition(':')
    if kind in ('specific', 'combined') and number.isdigit() \
            and 1 <= int(number) <= n_classes:
        return [(selector, kind, int(number) - 1)]
    raise ConfigError('Unknown layer selector {!r}; use common, specific:c, '
                      'combined:c (1 <= c <= {}) or all', selector, n_classes)


def edge_list(model, selector='all', edge_tol=DEFAULT_EDGE_TOL):
    """Upper-triangle edges of the selected layers. A positive entry links
    mutually exclusive nodes, a negative one synergistic nodes."""
    edges = []
    for tag, kind, c in parse_layer(selector, model.n_classes):
        if kind == 'common':
            matrix = model.theta_com
        elif kind == 'specific':
            matrix = model.s[c]
        else:
            matrix = model.combined(c)
        for i, j in zip(*np.nonzero(upper_support(matrix, edge_tol))):
            value = float(matrix[i, j])
            edges.append({
                'i': int(i),
                'j': int(j),
                'value': value,
                'sign': '+' if value > 0 else '-',
                'relation': ('mutually_exclusive' if value > 0
                             else 'synergistic'),
                'layer': tag,
            })
    return edges


def edge_graph(edges, p):
    """networkx multigraph on nodes 0..p-1 carrying the edge attributes."""
    graph = nx.MultiGraph()
    graph.add_nodes_from(range(p))
    for edge in edges:
        attributes = {k: v for k, v in edge.items() if k not in ('i', 'j')}
        graph.add_edge(edge['i'], edge['j'], **attributes)
    return graph
