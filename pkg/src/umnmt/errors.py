"""Exception taxonomy shared across the package.

CLI exit codes: ConfigError -> 1, DataError family -> 2, NumericsError -> 3.
"""


class UmnmtError(Exception):
    pass


class ConfigError(UmnmtError):
    """Bad or inconsistent configuration (unknown keys, invalid schedule, ...)."""


class DataError(UmnmtError):
    """Malformed or mismatched input data / files."""


class EmptySentence(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class FormatError(DataError):
    """Corrupt or incompatible binary file (feature grids, checkpoints)."""


class ShapeError(UmnmtError):
    def __init__(self, msg, *shapes):
        if shapes:
            msg = f"{msg}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(msg)


class NumericsError(UmnmtError):
    """Non-finite values where finite ones are required."""


class LengthError(UmnmtError):
    """Sequence longer than the model's position table."""


class ModalityError(UmnmtError):
    """Image-gated computation requested without an image (or vice versa)."""


class DistributionError(UmnmtError):
    """Probability table with negative mass or mass not summing to one."""
