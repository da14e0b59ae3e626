class MulterError(Exception):
    pass


class DimensionError(MulterError, ValueError):
    pass


class ConfigurationError(MulterError, ValueError):
    pass


class DataError(MulterError):
    pass


class UsageError(MulterError):
    pass


class NumericError(MulterError, ArithmeticError):
    pass
