"""Late-interaction retrieval with a query-side numeric gate."""

from .model import NumericGatedRetriever
from .quantity import Cmp, NumericalCondition, Quantity, parse_condition, parse_quantities, satisfies

__all__ = [
    "Cmp",
    "NumericGatedRetriever",
    "NumericalCondition",
    "Quantity",
    "parse_condition",
    "parse_quantities",
    "satisfies",
]
__version__ = "0.1.0"
