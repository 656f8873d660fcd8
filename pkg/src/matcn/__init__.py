"""Siamese MA-TCN toolkit for deciding whether two sets of GPS trips share a driver."""

from .config import RunConfig
from .model import MaTcnConfig, forward_trip, receptive_field
from .preprocess import BBox, Corpus, GridSequence, build_corpus, load_corpus, save_corpus
from .siamese import SiameseConfig, classify, dissimilarity, init_siamese, make_pairs
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "BBox", "Corpus", "GridSequence", "MaTcnConfig", "RunConfig", "SiameseConfig", "Tape", "Tensor",
    "build_corpus", "classify", "dissimilarity", "forward_trip", "init_siamese", "load_corpus",
    "make_pairs", "receptive_field", "save_corpus",
]
