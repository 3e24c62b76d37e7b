"""Exceptions raised by the joint_ggm library.

Every exception carries an integer error_code and a short name so that the
command line front end can print one machine-parsable line per failure.

Error codes:
 10: input matrix has ragged rows or non-numeric cells
 11: input path is missing or is not a file
 12: input file has an unsupported extension
 13: configuration value is invalid
 20: matrix dimensions do not agree
 21: non-finite values in an input or an iterate
 22: matrix is not positive definite
 23: an iterative procedure failed to converge
 24: synthetic scenario parameters are infeasible
 25: an input that must be nonempty is empty
"""


class JointGGMError(Exception):
    """Base class. The message is formatted with str.format(*args)."""
    error_code = 1
    name = 'error'

    def __init__(self, message, *args):
        self.message = message.format(*args)
        super().__init__(self.message)


class MalformedInputError(JointGGMError):
    error_code = 10
    name = 'malformed_input'


class MissingInputError(JointGGMError):
    error_code = 11
    name = 'missing_input'


class BadExtensionError(JointGGMError):
    error_code = 12
    name = 'bad_extension'


class ConfigError(JointGGMError):
    error_code = 13
    name = 'bad_config'


class DimensionError(JointGGMError):
    error_code = 20
    name = 'dimension_mismatch'


class NonFiniteError(JointGGMError):
    """Raised on NaN or inf. The solver sets iteration to the failing step."""
    error_code = 21
    name = 'non_finite'

    def __init__(self, message, *args, iteration=None):
        super().__init__(message, *args)
        self.iteration = iteration


class NotPositiveDefiniteError(JointGGMError):
    error_code = 22
    name = 'not_positive_definite'


class ConvergenceError(JointGGMError):
    error_code = 23
    name = 'no_convergence'


class InfeasibleScenarioError(JointGGMError):
    error_code = 24
    name = 'infeasible_scenario'


class EmptyInputError(JointGGMError):
    error_code = 25
    name = 'empty_input'
