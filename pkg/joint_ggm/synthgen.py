"""Synthetic common/specific precision structures and recovery scoring.

A scenario shares one sparse common layer across C classes and gives every
class its own sparse specific layer; supports are disjoint, so the true
common ratio is known exactly. Samples are Gaussian draws from each class
precision. All randomness flows from one integer seed through numpy's
SeedSequence, split into separate streams for the structure, the training
samples and the held-out samples.
"""

from dataclasses import dataclass, field
import logging

from joblib import delayed, Parallel
import numpy as np
from scipy import linalg

from .admm_solver import DEFAULT_EDGE_TOL
from .admm_solver import JointModel
from .admm_solver import average_nll
from .admm_solver import baseline_lambda
from .admm_solver import common_specific_ratio
from .admm_solver import fit_independent
from .admm_solver import fit_joint
from .admm_solver import fit_two_stage
from .admm_solver import symmetrize
from .admm_solver import upper_support
from .errors import ConfigError
from .errors import InfeasibleScenarioError
from .gaussianize import ObservationMatrix
from .gaussianize import class_covariance
from .gaussianize import empirical_class_covariance
from .gaussianize import nonparanormal_transform_pooled
from .priors import adaptive_weights
from .priors import AdaptiveWeightMatrix
from .priors import PriorMatrix
from .priors import select_k
from .priors import SelectionContext

logger = logging.getLogger(__name__)

GENERATOR_NAME = 'PCG64'
MAGNITUDE_RANGE = (0.2, 0.6)
# Support threshold for scoring recovery against a scenario: an estimated
# entry counts as an edge when it exceeds the smallest generated magnitude.
RECOVERY_EDGE_TOL = MAGNITUDE_RANGE[0]
DEFAULT_MIN_EIGENVALUE = 0.1
PRIOR_KINDS = ('oracle', 'noise', 'constant')
METHODS = ('independent', 'two_stage', 'joint', 'joint_prior')


def streams(seed):
    """Seed sequences for (structure, training samples, held-out samples)."""
    structure, samples, heldout = np.random.SeedSequence(seed).spawn(3)
    return structure, samples, heldout


def make_generator(seed_sequence):
    return np.random.Generator(np.random.PCG64(seed_sequence))


def trial_seed(seed, trial):
    """Seed of the trial-th scenario derived from a base seed."""
    return int(np.random.SeedSequence([seed, trial]).generate_state(1)[0])


class SyntheticScenario:

    def __init__(self, p, n_classes, n_c, common_ratio_target, edge_density,
                 seed, theta_com_true, s_true, samples,
                 min_eigenvalue=DEFAULT_MIN_EIGENVALUE):
        self.p = p
        self.n_classes = n_classes
        self.n_c = list(n_c)
        self.common_ratio_target = common_ratio_target
        self.edge_density = edge_density
        self.seed = seed
        self.min_eigenvalue = min_eigenvalue
        self.theta_com_true = np.asarray(theta_com_true, dtype=float)
        self.s_true = [np.asarray(s, dtype=float) for s in s_true]
        self.samples = samples

    @property
    def theta_true(self):
        return [self.theta_com_true + s for s in self.s_true]

    def parameters(self):
        return {
            'p': self.p,
            'n_classes': self.n_classes,
            'n_c': self.n_c,
            'common_ratio_target': self.common_ratio_target,
            'edge_density': self.edge_density,
            'min_eigenvalue': self.min_eigenvalue,
        }

    def to_dict(self):
        d = self.parameters()
        d.update({
            'seed': self.seed,
            'generator': GENERATOR_NAME,
            'theta_com_true': self.theta_com_true,
            's_true': self.s_true,
            'theta_true': self.theta_true,
            'samples': [obs.data for obs in self.samples],
        })
        return d

    @classmethod
    def from_dict(cls, d):
        if d.get('generator', GENERATOR_NAME) != GENERATOR_NAME:
            raise ConfigError('Scenario was made with generator {}, '
                              'expected {}', d['generator'], GENERATOR_NAME)
        samples = [ObservationMatrix(data, class_id=c + 1)
                   for c, data in enumerate(d['samples'])]
        return cls(d['p'], d['n_classes'], d['n_c'],
                   d['common_ratio_target'], d['edge_density'], d['seed'],
                   d['theta_com_true'], d['s_true'], samples,
                   d.get('min_eigenvalue', DEFAULT_MIN_EIGENVALUE))


def check_parameters(p, n_classes, n_c, common_ratio_target, edge_density,
                     seed, min_eigenvalue):
    if p < 2:
        raise InfeasibleScenarioError('p must be at least 2, got {}', p)
    if n_classes < 1:
        raise InfeasibleScenarioError('Need at least one class, got {}',
                                      n_classes)
    if len(n_c) != n_classes or min(n_c) < 2:
        raise InfeasibleScenarioError(
            'Need {} class sizes of at least 2 samples, got {}',
            n_classes, n_c)
    if not 0.0 <= edge_density <= 1.0:
        raise InfeasibleScenarioError('edge_density must be in [0, 1], '
                                      'got {!r}', edge_density)
    if not 0.0 <= common_ratio_target <= 1.0:
        raise InfeasibleScenarioError('common_ratio_target must be in '
                                      '[0, 1], got {!r}', common_ratio_target)
    if not min_eigenvalue > 0:
        raise InfeasibleScenarioError('min_eigenvalue must be positive, '
                                      'got {!r}', min_eigenvalue)
    if int(seed) != seed or seed < 0:
        raise InfeasibleScenarioError('seed must be a nonnegative integer, '
                                      'got {!r}', seed)


def support_sizes(p, n_classes, common_ratio_target, edge_density):
    """(common edge count, list of specific edge counts per class)."""
    n_pairs = p * (p - 1) // 2
    n_total = int(round(edge_density * n_pairs))
    if edge_density > 0 and n_total < 1:
        raise InfeasibleScenarioError(
            'edge_density {!r} gives no edges for p={}', edge_density, p)
    n_common = int(round(common_ratio_target * n_total))
    remainder = n_total - n_common
    base, extra = divmod(remainder, n_classes)
    return n_common, [base + (1 if c < extra else 0)
                      for c in range(n_classes)]


def place_edges(p, pairs, magnitudes):
    matrix = np.zeros((p, p))
    rows, cols = pairs
    matrix[rows, cols] = magnitudes
    matrix[cols, rows] = magnitudes
    return matrix


def sample_gaussian(theta, n, rng):
    """n draws from N(0, theta^-1) through the Cholesky factor of the
    covariance."""
    covariance = symmetrize(linalg.inv(theta))
    factor = linalg.cholesky(covariance, lower=True)
    return rng.standard_normal((n, theta.shape[0])) @ factor.T


def generate_scenario(p, n_classes, n_c, common_ratio_target, edge_density,
                      seed, min_eigenvalue=DEFAULT_MIN_EIGENVALUE):
    if np.ndim(n_c) == 0:
        n_c = [int(n_c)] * n_classes
    n_c = [int(n) for n in n_c]
    check_parameters(p, n_classes, n_c, common_ratio_target, edge_density,
                     seed, min_eigenvalue)
    structure_seq, samples_seq, _ = streams(seed)
    rng = make_generator(structure_seq)

    n_common, n_specific = support_sizes(p, n_classes, common_ratio_target,
                                         edge_density)
    n_total = n_common + sum(n_specific)
    upper = np.triu_indices(p, k=1)
    order = rng.permutation(upper[0].size)[:n_total]
    low, high = MAGNITUDE_RANGE
    magnitudes = rng.uniform(low, high, size=n_total)
    magnitudes *= np.where(rng.random(n_total) < 0.5, -1.0, 1.0)

    def layer(start, stop):
        chosen = order[start:stop]
        return place_edges(p, (upper[0][chosen], upper[1][chosen]),
                           magnitudes[start:stop])

    common = layer(0, n_common)
    s_true = []
    start = n_common
    for count in n_specific:
        s_true.append(layer(start, start + count))
        start += count

    smallest = min(linalg.eigvalsh(common + s)[0]
                   for s in s_true)
    lift = max(0.0, min_eigenvalue - (1.0 + smallest))
    theta_com_true = common + (1.0 + lift) * np.eye(p)
    logger.debug('scenario seed=%s: %s common edges, specific %s, '
                 'diagonal %.6g', seed, n_common, n_specific, 1.0 + lift)

    sample_seqs = samples_seq.spawn(n_classes)
    samples = []
    for c, s in enumerate(s_true):
        data = sample_gaussian(theta_com_true + s, n_c[c],
                               make_generator(sample_seqs[c]))
        samples.append(ObservationMatrix(data, class_id=c + 1))
    return SyntheticScenario(p, n_classes, n_c, common_ratio_target,
                             edge_density, seed, theta_com_true, s_true,
                             samples, min_eigenvalue)


def regenerate(scenario, seed):
    """A scenario with the same parameters and a different seed."""
    params = scenario.parameters()
    return generate_scenario(params['p'], params['n_classes'], params['n_c'],
                             params['common_ratio_target'],
                             params['edge_density'], seed,
                             params['min_eigenvalue'])


def draw_heldout(scenario, n=None):
    """Fresh samples per class from the held-out stream of the scenario
    seed; n defaults to the training sizes."""
    _, _, heldout_seq = streams(scenario.seed)
    seqs = heldout_seq.spawn(scenario.n_classes)
    result = []
    for c, theta in enumerate(scenario.theta_true):
        size = n if n is not None else scenario.n_c[c]
        result.append(sample_gaussian(theta, size, make_generator(seqs[c])))
    return result


def scenario_covariances(scenario, gaussianize=False):
    """Class covariances for fitting: of the raw draws, or of the pooled
    rank transform when gaussianize is set."""
    if gaussianize:
        return [class_covariance(obs) for obs in
                nonparanormal_transform_pooled(scenario.samples)]
    return [empirical_class_covariance(obs.data, obs.class_id)
            for obs in scenario.samples]


class LayerScore:
    """Edge counts of one layer; precision, recall and F1 count 0/0 as 1."""

    def __init__(self, tp, fp, fn):
        self.tp = int(tp)
        self.fp = int(fp)
        self.fn = int(fn)

    @staticmethod
    def ratio(numerator, denominator):
        return numerator / denominator if denominator else 1.0

    @property
    def precision(self):
        return self.ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self):
        return self.ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self):
        return self.ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def spurious_ratio(self):
        """FP / (TP + FP); an empty estimate has no spurious edges."""
        total = self.tp + self.fp
        return self.fp / total if total else 0.0

    def __add__(self, other):
        return LayerScore(self.tp + other.tp, self.fp + other.fp,
                          self.fn + other.fn)

    @classmethod
    def compare(cls, estimate, truth, edge_tol=DEFAULT_EDGE_TOL):
        est = upper_support(estimate, edge_tol)
        true = upper_support(truth, edge_tol)
        return cls(np.sum(est & true), np.sum(est & ~true),
                   np.sum(~est & true))

    def to_dict(self):
        return {'tp': self.tp, 'fp': self.fp, 'fn': self.fn,
                'precision': self.precision, 'recall': self.recall,
                'f1': self.f1}


CSV_HEADER = [
    'method', 'seed', 'k_star', 'common_f1', 'specific_f1',
    'combined_precision', 'combined_recall', 'combined_f1',
    'spurious_edge_ratio', 'csr_estimated', 'csr_true', 'csr_target',
    'nll_train', 'nll_heldout', 'nll_gap', 'converged',
]


@dataclass
class RecoveryReport:
    method: str
    seed: int
    layers: dict
    csr_estimated: float
    csr_true: float
    csr_target: float
    nll_train: list
    nll_heldout: list
    k_star: object = None
    converged: bool = True
    notes: dict = field(default_factory=dict)

    @property
    def combined(self):
        return self.layers['combined']

    @property
    def nll_gap(self):
        """Mean held-out minus mean training NLL; stands in for a
        generalisation gap."""
        return float(np.mean(self.nll_heldout) - np.mean(self.nll_train))

    @property
    def specific_f1(self):
        scores = [v for k, v in self.layers.items()
                  if k.startswith('specific:')]
        return float(np.mean([s.f1 for s in scores]))

    def to_dict(self):
        return {
            'method': self.method,
            'seed': self.seed,
            'k_star': self.k_star,
            'converged': self.converged,
            'layers': {k: v.to_dict() for k, v in self.layers.items()},
            'csr': {'estimated': self.csr_estimated, 'true': self.csr_true,
                    'target': self.csr_target},
            'nll': {'train': self.nll_train, 'heldout': self.nll_heldout,
                    'gap': self.nll_gap,
                    'definition': 'mean held-out minus mean training '
                                  'average negative log-likelihood'},
            'spurious_edge_ratio': self.combined.spurious_ratio,
        }

    def csv_row(self):
        return [
            self.method, self.seed,
            '' if self.k_star is None else self.k_star,
            float(self.layers['common'].f1), self.specific_f1,
            float(self.combined.precision), float(self.combined.recall),
            float(self.combined.f1), float(self.combined.spurious_ratio),
            float(self.csr_estimated), float(self.csr_true),
            float(self.csr_target), float(np.mean(self.nll_train)),
            float(np.mean(self.nll_heldout)), self.nll_gap,
            int(self.converged),
        ]


def true_common_ratio(scenario, edge_tol=DEFAULT_EDGE_TOL):
    truth = JointModel(scenario.theta_com_true, scenario.s_true,
                       scenario.theta_true)
    return common_specific_ratio(truth, edge_tol)


def score_recovery(scenario, model, edge_tol=DEFAULT_EDGE_TOL):
    if model.p != scenario.p or model.n_classes != scenario.n_classes:
        raise ConfigError('Model is p={} C={}, scenario is p={} C={}',
                          model.p, model.n_classes, scenario.p,
                          scenario.n_classes)
    layers = {'common': LayerScore.compare(model.theta_com,
                                           scenario.theta_com_true, edge_tol)}
    combined = LayerScore(0, 0, 0)
    for c in range(scenario.n_classes):
        layers['specific:{}'.format(c + 1)] = LayerScore.compare(
            model.s[c], scenario.s_true[c], edge_tol)
        combined = combined + LayerScore.compare(
            model.combined(c), scenario.theta_true[c], edge_tol)
    layers['combined'] = combined

    heldout = draw_heldout(scenario)
    nll_train = []
    nll_heldout = []
    for theta, obs, fresh in zip(model.theta_hat, scenario.samples, heldout):
        nll_train.append(average_nll(
            theta, empirical_class_covariance(obs.data).sigma_hat))
        nll_heldout.append(average_nll(
            theta, empirical_class_covariance(fresh).sigma_hat))

    report = RecoveryReport(
        model.method, scenario.seed, layers,
        common_specific_ratio(model, edge_tol),
        true_common_ratio(scenario, edge_tol),
        scenario.common_ratio_target, nll_train, nll_heldout,
        model.k_star, model.converged,
    )
    logger.info('%s seed=%s: combined F1 %.4f, CSR %.4f (true %.4f)',
                report.method, report.seed, report.combined.f1,
                report.csr_estimated, report.csr_true)
    return report


def oracle_prior(scenario, class_index):
    """1 on the true specific support and the diagonal, 0 elsewhere."""
    w = (np.abs(scenario.s_true[class_index]) > 0).astype(float)
    np.fill_diagonal(w, 1.0)
    return PriorMatrix(w, class_index + 1)


def noise_prior(p, rng, class_id=1):
    """Symmetric uniform [0, 1] noise with a unit diagonal."""
    w = np.triu(rng.random((p, p)), k=1)
    w = w + w.T
    np.fill_diagonal(w, 1.0)
    return PriorMatrix(w, class_id)


def build_priors(scenario, prior_kind, rng=None):
    if prior_kind == 'oracle':
        return [oracle_prior(scenario, c) for c in range(scenario.n_classes)]
    if prior_kind == 'noise':
        if rng is None:
            rng = make_generator(np.random.SeedSequence([scenario.seed, 1]))
        return [noise_prior(scenario.p, rng, c + 1)
                for c in range(scenario.n_classes)]
    if prior_kind == 'constant':
        return [PriorMatrix.constant(scenario.p, class_id=c + 1)
                for c in range(scenario.n_classes)]
    raise ConfigError('Unknown prior kind {!r}, expected one of {}',
                      prior_kind, ', '.join(PRIOR_KINDS))


def fit_method(method, scenario, config, covs, k_candidates=(0,),
               prior_kind='oracle', gamma_ebic=0.5,
               edge_tol=DEFAULT_EDGE_TOL, n_jobs=1):
    """Fit one of METHODS on the scenario covariances. The per-class
    baselines use baseline_lambda(config, C)."""
    if method == 'independent':
        return fit_independent(covs, baseline_lambda(config, len(covs)))
    if method == 'two_stage':
        return fit_two_stage(covs, baseline_lambda(config, len(covs)),
                             edge_tol)
    if method == 'joint':
        weights = [AdaptiveWeightMatrix.uniform(scenario.p, c + 1)
                   for c in range(scenario.n_classes)]
        model = fit_joint(covs, weights, config)
        model.k_star = 0
        return model
    if method == 'joint_prior':
        context = SelectionContext(covs, build_priors(scenario, prior_kind),
                                   config, gamma_ebic, edge_tol, n_jobs)
        model = select_k(k_candidates, context).model
        model.method = 'joint_prior'
        return model
    raise ConfigError('Unknown method {!r}, expected one of {}', method,
                      ', '.join(METHODS))


def compare_methods(scenario, config, methods=METHODS, k_candidates=(0,),
                    prior_kind='oracle', gamma_ebic=0.5,
                    edge_tol=DEFAULT_EDGE_TOL, gaussianize=False, n_jobs=1):
    """Fit every method on one scenario and score it."""
    covs = scenario_covariances(scenario, gaussianize)
    reports = []
    for method in methods:
        model = fit_method(method, scenario, config, covs, k_candidates,
                           prior_kind, gamma_ebic, edge_tol, n_jobs)
        reports.append(score_recovery(scenario, model, edge_tol))
    return reports


@dataclass
class RejectionStats:
    prior_kind: str
    trials: list

    @property
    def k_stars(self):
        return [t['k_star'] for t in self.trials]

    @property
    def zero_fraction(self):
        return sum(1 for k in self.k_stars if k == 0) / len(self.trials)

    @property
    def mean_k(self):
        return float(np.mean(self.k_stars))

    @property
    def median_k(self):
        return float(np.median(self.k_stars))

    @property
    def median_f1_k_star(self):
        return float(np.median([t['f1_k_star'] for t in self.trials]))

    @property
    def median_f1_k0(self):
        return float(np.median([t['f1_k0'] for t in self.trials]))

    def to_dict(self):
        return {
            'prior_kind': self.prior_kind,
            'trials': self.trials,
            'zero_fraction': self.zero_fraction,
            'mean_k': self.mean_k,
            'median_k': self.median_k,
            'median_f1_k_star': self.median_f1_k_star,
            'median_f1_k0': self.median_f1_k0,
        }


def run_rejection_trial(scenario, trial, k_candidates, prior_kind, config,
                        gamma_ebic, edge_tol, gaussianize):
    seed = trial_seed(scenario.seed, trial)
    current = regenerate(scenario, seed)
    covs = scenario_covariances(current, gaussianize)
    priors = build_priors(current, prior_kind)
    selection = select_k(k_candidates, SelectionContext(
        covs, priors, config, gamma_ebic, edge_tol))
    baseline = fit_joint(covs, [adaptive_weights(prior, 0)
                                for prior in priors], config)
    return {
        'trial': trial,
        'seed': seed,
        'k_star': selection.k_star,
        'f1_k_star': score_recovery(current, selection.model,
                                    edge_tol).combined.f1,
        'f1_k0': score_recovery(current, baseline, edge_tol).combined.f1,
    }


def prior_rejection_trial(scenario, trials, k_candidates, prior_kind,
                          config, gamma_ebic=0.5, edge_tol=DEFAULT_EDGE_TOL,
                          gaussianize=False, n_jobs=1):
    """Run select_k on `trials` scenarios regenerated from child seeds of
    scenario.seed, each with a fresh prior of the given kind."""
    if trials < 1:
        raise ConfigError('Need at least one trial, got {}', trials)
    if prior_kind not in PRIOR_KINDS:
        raise ConfigError('Unknown prior kind {!r}, expected one of {}',
                          prior_kind, ', '.join(PRIOR_KINDS))
    results = Parallel(n_jobs=n_jobs, prefer='threads')(
        delayed(run_rejection_trial)(scenario, trial, k_candidates,
                                     prior_kind, config, gamma_ebic,
                                     edge_tol, gaussianize)
        for trial in range(trials))
    stats = RejectionStats(prior_kind, results)
    logger.info('%s prior: k*=0 in %.1f%% of %s trials, mean k* %.2f',
                prior_kind, 100 * stats.zero_fraction, trials, stats.mean_k)
    return stats
