import pytest
import torch

from tripner.backbone import BackboneSpec, Vocabulary, seed_everything
from tripner.codec import EntityTypeRegistry
from tripner.corpus import EntityTriplet, Sentence
from tripner.model import PointerModel

torch.set_num_threads(1)


def make_tiny_model(
    types=("A", "B"),
    n=10,
    hidden_dim=32,
    heads=4,
    words=None,
    seed=0,
    max_target_len=24,
    tie_embeddings=True,
):
    """A small pointer model over a fixed word inventory."""
    seed_everything(seed)
    words = words if words is not None else {f"w{i}" for i in range(12)}
    registry = EntityTypeRegistry(types)
    vocab = Vocabulary(words, type_names=registry.types)
    spec = BackboneSpec(
        hidden_dim=hidden_dim,
        heads=heads,
        max_target_len=max_target_len,
        tie_embeddings=tie_embeddings,
    )
    return PointerModel(spec, vocab, registry, n=n)


@pytest.fixture
def tiny_model():
    return make_tiny_model()


@pytest.fixture
def sample_sentence():
    return Sentence(
        id="s1",
        tokens=tuple(f"w{i}" for i in range(6)),
        entities=(EntityTriplet(1, 2, "A"), EntityTriplet(4, 4, "B")),
    )
