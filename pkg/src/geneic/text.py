"""Caption tokenization shared by the scorer, the metrics and the prompt composer."""
import re

_PUNCT = re.compile(r"[^\w\s]|_")


def tokenize(text):
    """Lowercase, turn punctuation into spaces and split on whitespace.

    >>> tokenize("A red Bird.")
    ['a', 'red', 'bird']
    """
    return _PUNCT.sub(" ", text.lower()).split()
