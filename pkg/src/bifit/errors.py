"""Exception types shared across the package.

Each error carries a short machine-readable code; the CLI prints it as a
single-line ``error[<code>]: <message>`` prefix before exiting nonzero.
"""


class BifitError(Exception):
    code = "internal"


class InputError(BifitError):
    """Malformed user-supplied input (tokens, probabilities, empty arrays)."""

    code = "input"


class DimensionError(BifitError):
    """Array shape or divisibility constraint violated."""

    code = "dimension"


class ContractError(BifitError):
    """Inconsistent arguments between components (layouts, lengths, configs)."""

    code = "contract"


class GenerationError(BifitError):
    """Synthetic scene sampling could not satisfy its constraints."""

    code = "generation"


class DatasetIOError(BifitError):
    """Missing or corrupt dataset files; message names the offending path."""

    code = "io"


class CheckpointError(BifitError):
    """Unreadable checkpoint or checkpoint/config mismatch."""

    code = "checkpoint"


class NumericError(BifitError):
    """Non-finite values where finite ones are required (e.g. training loss)."""

    code = "numeric"
