"""Exception types shared across the package.

CLI exit-code mapping: ConfigError/FormatError -> 2, NumericError (and
subclasses) / InvariantError -> 3.
"""


class ShapeError(ValueError):
    """Tensor dimensions do not match what an operation requires."""


class ConfigError(ValueError):
    """Invalid configuration value or unsatisfiable request."""


class FormatError(ValueError):
    """A binary or text artifact could not be decoded."""


class NumericError(RuntimeError):
    """A numeric computation produced non-finite values or failed."""


class TrainingError(NumericError):
    """Training diverged (non-finite loss)."""


class InvariantError(RuntimeError):
    """A runtime invariant that must hold by construction was violated."""


class UndefinedStatError(ValueError):
    """Statistics requested from a state with zero observations."""


class BlockedAccountError(RuntimeError):
    """The query channel refused an account that the defense has banned.

    When raised from a batched call, ``scores`` holds the outputs that were
    answered before the refusal (in call order).
    """

    def __init__(self, account, scores=None):
        super().__init__(f"account {account!r} is blocked")
        self.account = account
        self.scores = scores if scores is not None else []


class AttackAbortedError(RuntimeError):
    """All available attacker accounts were banned mid-run.

    Carries the best program found so far (``program``) and the spent
    ``budget`` so callers can inspect the partial result.
    """

    def __init__(self, message, program=None, budget=None):
        super().__init__(message)
        self.program = program
        self.budget = budget
