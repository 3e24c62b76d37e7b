#! /usr/bin/env python3

"""
Joint sparse Gaussian graphical models with cross-modal priors.

Each class is a CSV, TSV or XLSX matrix of samples (rows) by nodes
(columns). The pipeline rank-transforms the classes together, computes class
covariances, turns optional attention footprints into penalty weights, picks
the prior sharpness k by extended BIC and fits a common precision layer plus
one specific layer per class. Fitted models classify new samples, drive
sign-split message passing and export their graphs. The synth and eval
commands generate scenarios with known structure and score recovery.

Global options (--config, --seed, --threads, --log-level, -v) go after the
subcommand. A --config JSON document mirrors the pipeline configuration,
with solver settings nested under "solver"; flags override it.

Exit status:
 0: success
 1: error; one line ERROR<tab>code<tab>name is printed on stdout
 2: a fit did not converge within max_iters (outputs are still written)
"""

# First come standard libraries, in alphabetical order.
import argparse
from dataclasses import asdict, dataclass, field, fields
import logging
from pathlib import Path
import sys

# After a blank line, import third-party libraries.
import networkx as nx
import numpy as np

# After another blank line, import local libraries.
from .admm_solver import DEFAULT_EDGE_TOL
from .admm_solver import edge_graph
from .admm_solver import edge_list
from .admm_solver import JointModel
from .admm_solver import SolverConfig
from .errors import BadExtensionError
from .errors import ConfigError
from .errors import DimensionError
from .errors import JointGGMError
from .gaussianize import class_covariance
from .gaussianize import ClassCovariance
from .gaussianize import nonparanormal_transform
from .gaussianize import nonparanormal_transform_pooled
from .gaussianize import ObservationMatrix
from .gaussianize import shapiro_pass_rate
from .gaussianize import transform_against_reference
from .inference import classify_batch
from .inference import MessagePassingWeights
from .inference import NodeFeatures
from .inference import select_precision
from .inference import signed_message_passing
from .matrix_io import atomic_write
from .matrix_io import check_input_path
from .matrix_io import read_attention_stack
from .matrix_io import read_json
from .matrix_io import read_matrix
from .matrix_io import write_json
from .matrix_io import write_jsonl
from .matrix_io import write_matrix
from .matrix_io import write_table
from .matrix_io import write_workbook
from .priors import adaptive_weights
from .priors import aggregate_attention
from .priors import attention_prior
from .priors import AttentionStack
from .priors import DEFAULT_CANDIDATES
from .priors import DEFAULT_GAMMA_EBIC
from .priors import PriorMatrix
from .priors import score_candidate
from .priors import select_k
from .priors import SelectionContext
from .priors import SelectionResult
from .synthgen import compare_methods
from .synthgen import CSV_HEADER
from .synthgen import generate_scenario
from .synthgen import METHODS
from .synthgen import prior_rejection_trial
from .synthgen import PRIOR_KINDS
from .synthgen import score_recovery
from .synthgen import SyntheticScenario
from .version import __version__

logger = logging.getLogger(__name__)

LOG_LEVELS = ('debug', 'info', 'warning', 'error')
SOLVER_FIELDS = tuple(f.name for f in fields(SolverConfig))
GRAPH_EXTENSIONS = ('.json', '.graphml')


@dataclass
class PipelineConfig:
    inputs: list = field(default_factory=list)
    attention: list = field(default_factory=list)
    priors: list = field(default_factory=list)
    output: str = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    k_candidates: list = field(
        default_factory=lambda: list(DEFAULT_CANDIDATES))
    gamma_ebic: float = DEFAULT_GAMMA_EBIC
    edge_tol: float = DEFAULT_EDGE_TOL
    seed: int = 0
    threads: int = 1
    log_level: str = None
    header: bool = False

    def validate(self):
        if not self.k_candidates:
            raise ConfigError('k_candidates must not be empty')
        if 0 not in self.k_candidates:
            raise ConfigError('k_candidates must contain 0, got {}',
                              self.k_candidates)
        if any(k < 0 for k in self.k_candidates):
            raise ConfigError('k_candidates must be nonnegative, got {}',
                              self.k_candidates)
        if not self.edge_tol >= 0:
            raise ConfigError('edge_tol must be nonnegative, got {!r}',
                              self.edge_tol)
        if self.threads == 0:
            raise ConfigError('threads must be nonzero')
        for path in self.inputs + self.priors:
            check_input_path(path)
        for path in self.attention:
            if not Path(path).exists():
                raise ConfigError('Attention input is missing: {}', path)

    def to_dict(self):
        d = asdict(self)
        d['solver'] = self.solver.to_dict()
        return d


PIPELINE_FIELDS = tuple(f.name for f in fields(PipelineConfig))


def main():
    args = parse_args()
    config_logging(args)
    error_code = run_command(args)
    logging.shutdown()
    sys.exit(error_code)


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit 1 with the ERROR line, leaving 2 to mean
    not converged."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print('{}: error: {}'.format(self.prog, message), file=sys.stderr)
        print('ERROR', ConfigError.error_code, ConfigError.name, sep='\t')
        sys.exit(1)


def parse_candidates(text):
    """Parse "0,5,10" or an inclusive range "0:50" or "0:50:5"."""
    try:
        if ':' in text:
            parts = [int(x) for x in text.split(':')]
            start, stop = parts[0], parts[1]
            step = parts[2] if len(parts) > 2 else 1
            return list(range(start, stop + 1, step))
        return [float(x) if '.' in x else int(x) for x in text.split(',')]
    except (ValueError, IndexError):
        raise argparse.ArgumentTypeError(
            'bad candidate list {!r}; use 0,5,10 or 0:50'.format(text))


def global_options():
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group('global options')
    group.add_argument('--config', help='JSON configuration document')
    group.add_argument('--seed', type=int)
    group.add_argument('--threads', type=int,
                       help='worker threads for independent fits')
    group.add_argument('--log-level', choices=LOG_LEVELS)
    group.add_argument('-v', '--verbose', action='count')
    group.add_argument('--header', action='store_true', default=None,
                       help='input matrices have a header row')
    group.add_argument('--edge-tol', type=float)
    group.add_argument('-o', '--output')
    return parent


def solver_options():
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group('solver options')
    group.add_argument('--rho', type=float)
    group.add_argument('--gamma-s', type=float)
    group.add_argument('--mu', type=float)
    group.add_argument('--max-iters', type=int)
    group.add_argument('--primal-tol', type=float)
    group.add_argument('--dual-tol', type=float)
    group.add_argument('--penalize-diagonal', action='store_true',
                       default=None)
    group.add_argument('--k-candidates', type=parse_candidates,
                       help='e.g. 0,5,10 or 0:50 (default 0:50)')
    group.add_argument('--gamma-ebic', type=float)
    return parent


def parse_args(argv=None):
    parser = ArgumentParser(
        prog='joint-ggm',
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument('--version', action='version',
                        version='%(prog)s {}'.format(__version__))
    subparsers = parser.add_subparsers(dest='command', required=True)
    common = [global_options()]
    solving = common + [solver_options()]

    p = subparsers.add_parser('gaussianize', parents=common,
                              help=cmd_gaussianize.__doc__)
    p.add_argument('inputs', nargs='+')
    p.add_argument('--per-class', action='store_true',
                   help='rank within each class instead of pooled')
    p.add_argument('--reference', nargs='+',
                   help='transform against the ECDF of these raw matrices')
    p.add_argument('--shapiro', action='store_true',
                   help='print Shapiro-Wilk pass rates before and after')
    p.set_defaults(func=cmd_gaussianize)

    p = subparsers.add_parser('covariance', parents=common,
                              help=cmd_covariance.__doc__)
    p.add_argument('inputs', nargs='+')
    p.add_argument('--gaussianize', action='store_true',
                   help='inputs are raw; apply the pooled transform first')
    p.set_defaults(func=cmd_covariance)

    p = subparsers.add_parser('prior', parents=common,
                              help=cmd_prior.__doc__)
    p.add_argument('attention', nargs=1,
                   help='directory of matrices or attention JSON')
    p.add_argument('--class-id', type=int, default=1)
    p.add_argument('--k', type=float)
    p.add_argument('--weights-out')
    p.set_defaults(func=cmd_prior)

    p = subparsers.add_parser('select-k', parents=solving,
                              help=cmd_select_k.__doc__)
    p.add_argument('--covariances', required=True,
                   help='JSON written by the covariance command')
    p.add_argument('--prior', nargs='+', dest='priors')
    p.add_argument('--model-out')
    p.set_defaults(func=cmd_select_k)

    p = subparsers.add_parser('fit', parents=solving, help=cmd_fit.__doc__)
    p.add_argument('inputs', nargs='*')
    prior_source = p.add_mutually_exclusive_group()
    prior_source.add_argument('--attention', nargs='+')
    prior_source.add_argument('--prior', nargs='+', dest='priors')
    p.add_argument('--report')
    p.add_argument('--convergence-log')
    p.set_defaults(func=cmd_fit)

    p = subparsers.add_parser('classify', parents=common,
                              help=cmd_classify.__doc__)
    p.add_argument('inputs', nargs=1)
    p.add_argument('--model', required=True)
    p.add_argument('--reference', nargs='+',
                   help='raw training matrices for the rank transform')
    p.add_argument('--class-prior', action='store_true',
                   help='add log(n_c / N) to every class score')
    p.set_defaults(func=cmd_classify)

    p = subparsers.add_parser('message-pass', parents=common,
                              help=cmd_message_pass.__doc__)
    p.add_argument('--model', required=True)
    p.add_argument('--features', required=True)
    p.add_argument('--w-pos')
    p.add_argument('--w-neg')
    p.add_argument('--class', type=int, dest='class_number',
                   help='1-based class whose precision is used')
    p.add_argument('--layer', choices=('combined', 'common'),
                   default='combined')
    p.add_argument('--epsilon', type=float, default=1e-8)
    p.set_defaults(func=cmd_message_pass)

    p = subparsers.add_parser('synth', parents=common,
                              help=cmd_synth.__doc__)
    p.add_argument('--p', type=int, default=30)
    p.add_argument('--classes', type=int, default=4)
    p.add_argument('--n', type=int, nargs='+', default=[200],
                   help='samples per class, one value or one per class')
    p.add_argument('--common-ratio', type=float, default=0.4)
    p.add_argument('--density', type=float, default=0.1)
    p.add_argument('--min-eigenvalue', type=float, default=0.1)
    p.add_argument('--samples-dir')
    p.set_defaults(func=cmd_synth)

    p = subparsers.add_parser('eval', parents=solving, help=cmd_eval.__doc__)
    p.add_argument('--scenario', required=True)
    p.add_argument('--model', help='score this model instead of fitting')
    p.add_argument('--methods', nargs='+', choices=METHODS,
                   default=list(METHODS))
    p.add_argument('--prior-kind', choices=PRIOR_KINDS, default='oracle')
    p.add_argument('--gaussianize', action='store_true')
    p.add_argument('--rejection-trials', type=int, default=0)
    p.add_argument('--csv')
    p.add_argument('--xlsx')
    p.set_defaults(func=cmd_eval)

    p = subparsers.add_parser('export-graph', parents=common,
                              help=cmd_export_graph.__doc__)
    p.add_argument('--model', required=True)
    p.add_argument('--layer', default='all',
                   help='common, specific:c, combined:c or all')
    p.set_defaults(func=cmd_export_graph)

    args = parser.parse_args(argv)
    return args


def config_logging(args):
    global logger
    if args.log_level:
        level = getattr(logging, args.log_level.upper())
    elif not args.verbose:
        level = logging.WARNING
    elif args.verbose == 1:
        level = logging.INFO
    else:
        level = logging.DEBUG
    logger = logging.getLogger('joint_ggm')
    if not logger.handlers:
        err_handler = logging.StreamHandler()
        logger.addHandler(err_handler)
    logger.setLevel(level)


def load_config(args):
    """Defaults, then the --config document, then flags."""
    values = {}
    solver = {}
    if getattr(args, 'config', None):
        document = read_json(args.config)
        if not isinstance(document, dict):
            raise ConfigError('Config {} must be a JSON object', args.config)
        unknown = set(document) - set(PIPELINE_FIELDS)
        if unknown:
            raise ConfigError('Unknown config fields: {}',
                              ', '.join(sorted(unknown)))
        solver.update(document.pop('solver', None) or {})
        values.update(document)
    for name in PIPELINE_FIELDS:
        value = getattr(args, name, None)
        if value is not None and value != []:
            values[name] = value
    for name in SOLVER_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            solver[name] = value
    unknown = set(solver) - set(SOLVER_FIELDS)
    if unknown:
        raise ConfigError('Unknown solver fields: {}',
                          ', '.join(sorted(unknown)))
    values['solver'] = SolverConfig(**solver)
    config = PipelineConfig(**values)
    config.validate()
    if config.log_level and not getattr(args, 'log_level', None) \
            and not getattr(args, 'verbose', None):
        logging.getLogger('joint_ggm').setLevel(config.log_level.upper())
    return config


def run_command(args):
    """Run the selected subcommand and return its exit status."""
    logger.debug('command: %s', args.command)
    try:
        config = load_config(args)
        error_code = args.func(args, config)
    except JointGGMError as e:
        logger.error(e.message)
        print('ERROR', e.error_code, e.name, sep='\t')
        error_code = 1
    logger.debug('finished with %s', error_code)
    return error_code


def require_output(config, what='output file'):
    if not config.output:
        raise ConfigError('An {} is required (-o)', what)
    return Path(config.output)


def read_observations(paths, header):
    return [ObservationMatrix(read_matrix(path, header), class_id=c + 1)
            for c, path in enumerate(paths)]


def pooled_reference(paths, header):
    return np.vstack([read_matrix(path, header) for path in paths])


def cmd_gaussianize(args, config):
    """Rank-transform class matrices to normal scores."""
    observations = read_observations(config.inputs, config.header)
    if args.reference:
        reference = pooled_reference(args.reference, config.header)
        transformed = [
            ObservationMatrix(transform_against_reference(obs.data,
                                                          reference),
                              obs.class_id, transformed=True)
            for obs in observations
        ]
    elif args.per_class:
        transformed = [nonparanormal_transform(obs) for obs in observations]
    else:
        transformed = nonparanormal_transform_pooled(observations)
    output_dir = Path(config.output or '.')
    for path, obs in zip(config.inputs, transformed):
        write_matrix(output_dir / (Path(path).stem + '.gauss.csv'), obs.data)
    if args.shapiro:
        for path, raw, obs in zip(config.inputs, observations, transformed):
            print(path, shapiro_pass_rate(raw.data),
                  shapiro_pass_rate(obs.data), sep='\t')
    return 0


def covariances_from_inputs(config, gaussianize=True):
    observations = read_observations(config.inputs, config.header)
    if gaussianize:
        observations = nonparanormal_transform_pooled(observations)
    else:
        observations = [ObservationMatrix(obs.data, obs.class_id,
                                          transformed=True)
                        for obs in observations]
    return [class_covariance(obs) for obs in observations]


def cmd_covariance(args, config):
    """Class covariances of transformed matrices, as JSON."""
    output = require_output(config)
    covs = covariances_from_inputs(config, gaussianize=args.gaussianize)
    write_json(output, {'covariances': [cov.to_dict() for cov in covs]})
    return 0


def read_covariances(input_file):
    try:
        return [ClassCovariance.from_dict(d)
                for d in read_json(input_file)['covariances']]
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError('Covariance file is bad: {}. {!r}', input_file, e)


def read_scenario(input_file):
    try:
        return SyntheticScenario.from_dict(read_json(input_file))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError('Scenario file is bad: {}. {!r}', input_file, e)


def read_prior(path, class_id):
    return PriorMatrix(read_matrix(path), class_id)


def prior_from_attention(path, class_id):
    stack = AttentionStack(read_attention_stack(path), class_id)
    return attention_prior(aggregate_attention(stack), class_id)


def cmd_prior(args, config):
    """Cosine-similarity prior of an attention stack, and optionally its
    penalty weights at one k."""
    output = require_output(config)
    prior = prior_from_attention(args.attention[0], args.class_id)
    write_matrix(output, prior.w)
    if args.weights_out:
        if args.k is None:
            raise ConfigError('--weights-out needs --k')
        write_matrix(args.weights_out, adaptive_weights(prior, args.k).w_tilde)
    return 0


def load_priors(config, n_classes):
    """One prior per class from attention stacks or prior matrices; a single
    prior is shared by all classes. None when neither is given."""
    if config.attention:
        priors = [prior_from_attention(path, c + 1)
                  for c, path in enumerate(config.attention)]
    elif config.priors:
        priors = [read_prior(path, c + 1)
                  for c, path in enumerate(config.priors)]
    else:
        return None
    if len(priors) == 1:
        priors = [PriorMatrix(priors[0].w, c + 1) for c in range(n_classes)]
    if len(priors) != n_classes:
        raise DimensionError('Got {} priors for {} classes', len(priors),
                             n_classes)
    return priors


def run_selection(covs, priors, config):
    """select_k over the configured candidates, or the prior-free fit at
    k = 0 when there is no prior."""
    no_prior = priors is None
    if no_prior:
        priors = [PriorMatrix.constant(covs[0].p, class_id=c + 1)
                  for c in range(len(covs))]
    context = SelectionContext(covs, priors, config.solver, config.gamma_ebic,
                               config.edge_tol, config.threads)
    if not no_prior:
        return select_k(config.k_candidates, context)
    # A lone candidate is kept even when it did not converge.
    logger.info('no prior given; fitting at k = 0')
    score, weights, model = score_candidate(0, context)
    model.k_star = 0
    return SelectionResult(0, weights, model, [score])


def selection_report(selection, config):
    model = selection.model
    return {
        'k_star': selection.k_star,
        'scores': selection.scores,
        'converged': model.converged,
        'iterations': model.iterations,
        'final_primal': model.residuals.get('final_primal'),
        'final_dual': model.residuals.get('final_dual'),
        'config': config.to_dict(),
    }


def cmd_select_k(args, config):
    """Pick k by extended BIC for covariances and priors."""
    output = require_output(config, 'output report')
    covs = read_covariances(args.covariances)
    priors = load_priors(config, len(covs))
    selection = run_selection(covs, priors, config)
    write_json(output, selection_report(selection, config))
    if args.model_out:
        write_json(args.model_out, selection.model.to_dict())
    return 0 if selection.model.converged else 2


def sibling_path(output, suffix):
    output = Path(output)
    return output.with_name(output.stem + suffix)


def write_convergence_log(output_file, model):
    residuals = model.residuals
    rows = zip(range(1, model.iterations + 1), residuals['primal'],
               residuals['dual'], residuals['objective'])
    return write_table(output_file, ['iteration', 'primal', 'dual',
                                     'objective'],
                       rows, delimiter='\t')


def cmd_fit(args, config):
    """Fit the joint model for class matrices (pooled rank transform,
    covariances, priors, k selection) and write model, report and
    convergence log."""
    output = require_output(config, 'output model file')
    if not config.inputs:
        raise ConfigError('fit needs at least one input matrix')
    covs = covariances_from_inputs(config)
    priors = load_priors(config, len(covs))
    selection = run_selection(covs, priors, config)
    model = selection.model
    write_json(output, model.to_dict())
    report = selection_report(selection, config)
    report['inputs'] = config.inputs
    write_json(args.report or sibling_path(output, '.report.json'), report)
    write_convergence_log(
        args.convergence_log or sibling_path(output, '.convergence.tsv'),
        model)
    if not model.converged:
        logger.warning('model written but not converged: %s', output)
        return 2
    return 0


def read_model(input_file):
    try:
        return JointModel.from_dict(read_json(input_file))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError('Model file is bad: {}. {}', input_file, e)


def cmd_classify(args, config):
    """Score samples against every class of a model, as JSONL."""
    output = require_output(config)
    model = read_model(args.model)
    samples = read_matrix(args.inputs[0], config.header)
    if args.reference:
        samples = transform_against_reference(
            samples, pooled_reference(args.reference, config.header))
    scores, predicted = classify_batch(samples, model, args.class_prior)
    write_jsonl(output, (
        {'sample': i, 'scores': row, 'predicted': model.class_ids[c]}
        for i, (row, c) in enumerate(zip(scores, predicted))
    ))
    return 0


def cmd_message_pass(args, config):
    """Sign-split message passing over node features."""
    output = require_output(config)
    model = read_model(args.model)
    nodes = NodeFeatures(read_matrix(args.features, config.header))
    if args.w_pos or args.w_neg:
        if not (args.w_pos and args.w_neg):
            raise ConfigError('--w-pos and --w-neg go together')
        weights = MessagePassingWeights(read_matrix(args.w_pos),
                                        read_matrix(args.w_neg),
                                        args.epsilon)
    else:
        weights = MessagePassingWeights.identity(nodes.d, args.epsilon)
    class_index = (args.class_number - 1 if args.class_number is not None
                   else None)
    theta = select_precision(model, class_index, args.layer)
    write_matrix(output, signed_message_passing(theta, nodes, weights,
                                                config.edge_tol))
    return 0


def cmd_synth(args, config):
    """Generate a synthetic scenario with known common/specific layers."""
    output = require_output(config, 'output scenario file')
    n_c = args.n[0] if len(args.n) == 1 else args.n
    scenario = generate_scenario(args.p, args.classes, n_c,
                                 args.common_ratio, args.density,
                                 config.seed, args.min_eigenvalue)
    write_json(output, scenario.to_dict())
    if args.samples_dir:
        for obs in scenario.samples:
            write_matrix(Path(args.samples_dir)
                         / 'class_{}.csv'.format(obs.class_id), obs.data)
    return 0


def cmd_eval(args, config):
    """Fit baselines and the joint model on a scenario, or score one model,
    and write the comparison table."""
    output = require_output(config, 'output report')
    scenario = read_scenario(args.scenario)
    if args.model:
        reports = [score_recovery(scenario, read_model(args.model),
                                  config.edge_tol)]
    else:
        reports = compare_methods(scenario, config.solver, args.methods,
                                  config.k_candidates, args.prior_kind,
                                  config.gamma_ebic, config.edge_tol,
                                  args.gaussianize, config.threads)
    document = {'reports': [report.to_dict() for report in reports]}
    if args.rejection_trials:
        document['rejection'] = prior_rejection_trial(
            scenario, args.rejection_trials, config.k_candidates,
            args.prior_kind, config.solver, config.gamma_ebic,
            config.edge_tol, args.gaussianize, config.threads).to_dict()
    write_json(output, document)
    rows = [report.csv_row() for report in reports]
    write_table(args.csv or sibling_path(output, '.csv'), CSV_HEADER, rows)
    if args.xlsx:
        write_workbook(args.xlsx, CSV_HEADER, rows, title='recovery')
    return 0 if all(report.converged for report in reports) else 2


def cmd_export_graph(args, config):
    """Write the edges of a model layer as a JSON list or GraphML."""
    output = require_output(config)
    suffix = output.suffix.lower()
    if suffix not in GRAPH_EXTENSIONS:
        raise BadExtensionError('Graph output has bad extension: {} '
                                '(expected one of {})', output,
                                ', '.join(GRAPH_EXTENSIONS))
    model = read_model(args.model)
    edges = edge_list(model, args.layer, config.edge_tol)
    logger.info('%s edges in layer %s', len(edges), args.layer)
    if suffix == '.json':
        write_json(output, edges)
    else:
        graph = edge_graph(edges, model.p)
        atomic_write(output, lambda fout: nx.write_graphml(graph, fout),
                     mode='wb')
    return 0


if __name__ == '__main__':
    main()
