"""Exception hierarchy. Each error carries a category used for CLI exit codes."""


class LSTTNError(Exception):
    category = "error"


class ConfigError(LSTTNError, ValueError):
    category = "config"


class ValidationError(ConfigError):
    category = "validation"


class ParseError(LSTTNError, ValueError):
    category = "parse"


class LayoutError(LSTTNError, ValueError):
    category = "layout"


class InsufficientDataError(LayoutError):
    category = "insufficient-data"


class DegenerateDataError(LSTTNError, ValueError):
    category = "degenerate-data"


class DegenerateMaskError(DegenerateDataError):
    category = "degenerate-mask"


class DegenerateBatchError(DegenerateDataError):
    category = "degenerate-batch"


class NumericError(LSTTNError, ArithmeticError):
    category = "numeric"


class DivergenceError(NumericError):
    category = "divergence"


class RegistryError(LSTTNError, KeyError):
    category = "registry"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class CompatibilityError(LSTTNError, ValueError):
    category = "compatibility"


class RangeError(LSTTNError, IndexError):
    category = "range"
