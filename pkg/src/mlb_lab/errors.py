"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class InputError(ValueError):
    """A data argument is out of its valid domain (labels, empty batches...)."""


class ConfigError(ValueError):
    """A configuration combination is not supported."""


class ContractError(RuntimeError):
    """A caller broke a precondition the library relies on."""


class OracleError(RuntimeError):
    """The finite-difference oracle hit a non-finite loss value."""


class NonFiniteLossError(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value

    def __reduce__(self):
        return type(self), (self.step, self.value)
