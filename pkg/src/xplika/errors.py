class XplikaError(ValueError):
    """Base class for data and model errors raised by the toolkit."""


class ModelError(XplikaError):
    """Malformed manifest, bad weights or an inconsistent layer chain."""


class TensorFormatError(XplikaError):
    """A tensor file that cannot be decoded."""


class NonFiniteError(XplikaError):
    """An engine operation produced NaN or Inf."""
