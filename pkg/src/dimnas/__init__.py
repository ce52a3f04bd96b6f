"""Architecture search for U-Net module blocks on 1D signals, with transfer
of the discovered block design to 2D by isotropic kernel extension."""

__version__ = "0.1.0"

from .search_space import Genome, OpKind, SearchSpaceSpec, decode, encode, preset
from .supernet import SupernetSpec
from .search import (
    SearchResult,
    SearchSchedule,
    random_search_baseline,
    retrain,
    search,
    transfer_and_retrain,
)

__all__ = [
    "Genome",
    "OpKind",
    "SearchSpaceSpec",
    "SupernetSpec",
    "SearchResult",
    "SearchSchedule",
    "decode",
    "encode",
    "preset",
    "search",
    "random_search_baseline",
    "retrain",
    "transfer_and_retrain",
    "__version__",
]
