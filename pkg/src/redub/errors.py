"""Error taxonomy shared by the library and the command line tools.

Every failure the pipeline raises deliberately is a PipelineError.  The three
subclasses partition failures by who has to fix them:

* ConfigError   - the configuration is self-inconsistent (exit code 2)
* DataError     - an input file or tensor violates its contract (exit code 3)
* ContractError - an internal invariant broke; a bug, not a user error (exit code 4)
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for deliberate failures. Generic exit code 1."""

    exit_code = 1


class ConfigError(PipelineError):
    """Inconsistent or out-of-range configuration."""

    exit_code = 2


class DataError(PipelineError):
    """Malformed input data: files, tensors, streams."""

    exit_code = 3


class ArgumentError(DataError, ValueError):
    """A function argument violates its precondition.

    Doubles as ValueError so callers that predate the taxonomy keep working.
    """


class DegenerateMaskError(DataError):
    """An edit mask selects nothing, so masked losses are undefined."""


class ContractError(PipelineError):
    """A postcondition or internal invariant failed; indicates a bug."""

    exit_code = 4
