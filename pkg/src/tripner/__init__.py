"""Class-incremental NER as entity-triplet sequence generation."""

__version__ = "0.1.0"

from .codec import EntityTypeRegistry, TargetSequence, TripletOrder
from .corpus import CLSchedule, CLTask, Corpus, EntityTriplet, Sentence
from .errors import TripnerError

__all__ = [
    "CLSchedule",
    "CLTask",
    "Corpus",
    "EntityTriplet",
    "EntityTypeRegistry",
    "Sentence",
    "TargetSequence",
    "TripletOrder",
    "TripnerError",
    "__version__",
]
