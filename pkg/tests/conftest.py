import numpy as np
import pytest

from evimark.core import (TAG_ADJ, TAG_ENTITY, TAG_NOUN, TAG_OTHER,
                          EmbeddingTable, Vocabulary)
from evimark.harness import WorldSpec, build_world, compute_scene_weights
from evimark.model import Scene, ToyLM
from evimark.prefixtune import TrainConfig

SMALL_TAGS = (TAG_OTHER, TAG_ENTITY, TAG_ENTITY, TAG_NOUN, TAG_NOUN,
              TAG_ADJ, TAG_OTHER, TAG_OTHER)


def make_lm(v=8, d=4, seed=0, gain=2.0, eos=None, bigram=None, tags=None,
            surface=None):
    """Small deterministic ToyLM for unit tests; token 0 is BOS."""
    rng = np.random.default_rng(seed)
    if tags is None:
        tags = SMALL_TAGS if v == 8 else tuple(
            TAG_ENTITY if 1 <= i <= max(1, v // 4) else TAG_OTHER for i in range(v))
    emb = rng.normal(size=(v, d))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    if bigram is None:
        bigram = rng.normal(0.0, 1.0, size=(v, v))
    proj = rng.normal(size=(v, d))
    proj /= np.linalg.norm(proj, axis=1, keepdims=True)
    vocab = Vocabulary(size=v, tags=tuple(tags), surface_forms=surface)
    return ToyLM(vocab=vocab, embeddings=EmbeddingTable(dim=d, vectors=emb),
                 bigram_scores=np.asarray(bigram, dtype=float), visual_gain=gain,
                 projection=proj, eos_token=eos)


def make_scene(present=None, absent=(), salience=1.0):
    present = present or {}
    if not isinstance(present, dict):
        present = {int(t): salience for t in present}
    return Scene(present=present, absent=frozenset(absent))


@pytest.fixture(scope="session")
def small_world():
    spec = WorldSpec(vocab_size=128, dim=32, n_entities=8, n_scenes=4,
                     entities_per_scene=2, n_determiners=4, n_nouns=24,
                     n_adjectives=12, seed=5)
    return build_world(spec)


@pytest.fixture(scope="session")
def small_world_weights(small_world):
    weights, extract_ns = compute_scene_weights(
        small_world, TrainConfig(learning_rate=0.5, steps=200))
    return weights, extract_ns
