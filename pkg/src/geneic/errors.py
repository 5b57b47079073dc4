"""Exception hierarchy shared by every geneic module."""


class GeneicError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(GeneicError, ValueError):
    """An argument violates an operation's preconditions (shape, range, emptiness)."""


class InputShapeError(ContractError):
    pass


class TokenizationError(ContractError):
    pass


class NoPartnerError(GeneicError):
    """The queried image sits alone in its cluster."""


class DegenerateBatchError(GeneicError):
    """Every pair in a batch has an undefined attribute direction."""


class NumericError(GeneicError, ArithmeticError):
    pass


class FormatError(GeneicError):
    """A binary or text artifact could not be parsed.

    ``offset`` is the byte offset (or line number for text formats) where
    parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
