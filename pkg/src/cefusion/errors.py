"""Exception hierarchy shared by every module.

The CLI maps :class:`NumericError` to exit status 4 and every other
:class:`CefusionError` to exit status 3.
"""


class CefusionError(Exception):
    pass


class DimensionError(CefusionError):
    pass


class ParameterError(CefusionError):
    pass


class NumericError(CefusionError):
    pass


class LabelError(CefusionError):
    pass


class ContractError(CefusionError):
    pass


class FormatError(CefusionError):
    pass


class CorruptionError(FormatError):
    pass


class AlignmentError(CefusionError):
    pass


class ManifestError(CefusionError):
    pass


class DataError(CefusionError):
    pass


class CoverageError(CefusionError):
    pass
