"""Exception hierarchy shared by every layer of the package."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class ShapeError(ContractError):
    pass


class ConfigurationError(ContractError):
    pass


class CheckpointError(ContractError):
    pass


class InsufficientDataError(ContractError):
    pass


class GradCheckError(ContractError):
    """The function under check did not evaluate deterministically."""


class NumericOverflowError(ArithmeticError):
    """An operation produced NaN or Inf."""

    def __init__(self, op_kind, detail=""):
        self.op_kind = op_kind
        msg = f"non-finite output from op '{op_kind}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
