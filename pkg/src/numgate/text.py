"""Tokenization shared by the featurizer and the quantity parser."""

import re
from decimal import Decimal, InvalidOperation

# Numbers keep their thousands separators, decimals and exponent as one token.
NUMBER_PATTERN = r"\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d*\.\d+|\d+"
_NUMBER_RE = re.compile(rf"(?:{NUMBER_PATTERN})(?:[eE][-+]?\d+)?")
_TOKEN_RE = re.compile(
    rf"(?P<num>(?:{NUMBER_PATTERN})(?:[eE][-+]?\d+)?)|(?P<word>[^\W\d_]+)|(?P<sym>[%$])"
)


def tokenize_with_offsets(text):
    """Return ``[(token, start, end), ...]`` with lowercase tokens.

    Letters runs, number literals and the symbols ``%`` and ``$`` become
    tokens; all other characters separate tokens.
    """
    return [(m.group(0).lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def tokenize(text):
    """Lowercase tokens of ``text``.

    >>> tokenize("Over 500 GB!")
    ['over', '500', 'gb']
    """
    return [tok for tok, _, _ in tokenize_with_offsets(text)]


def parse_number(token):
    """Parse a number token into a ``Decimal``; ``None`` if it is not one."""
    if not _NUMBER_RE.fullmatch(token):
        return None
    try:
        value = Decimal(token.replace(",", ""))
    except InvalidOperation:
        return None
    if not value.is_finite():
        return None
    return value


def is_number(token):
    return parse_number(token) is not None
