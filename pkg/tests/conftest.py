"""Shared fixtures: a tiny architecture and small synthetic corpora."""

import numpy as np
import pytest

from svkit.corpus import generate_synthetic_corpus
from svkit.model import ModelSpec

TINY_FRAME_LAYERS = ((8, 5, 1), (8, 3, 2), (8, 3, 3), (8, 1, 1), (16, 1, 1))


def make_tiny_spec(num_speakers=6, feature_dim=6, classifier_bias=True,
                   embed_dims=(8, 8)):
    return ModelSpec(num_speakers=num_speakers, feature_dim=feature_dim,
                     frame_layers=TINY_FRAME_LAYERS, embed_dims=embed_dims,
                     classifier_bias=classifier_bias)


def split_per_speaker(sequences, held_out=1):
    """Hold out the last `held_out` utterances of each speaker."""
    by_spk = {}
    for s in sequences:
        by_spk.setdefault(s.speaker_id, []).append(s)
    train, val = [], []
    for spk in sorted(by_spk):
        train.extend(by_spk[spk][:-held_out])
        val.extend(by_spk[spk][-held_out:])
    return train, val


@pytest.fixture(scope="session")
def tiny_corpus():
    """36 utterances from 6 speakers, 6-dim features, 24-40 frames."""
    return generate_synthetic_corpus(6, 6, frame_range=(24, 40),
                                     feature_dim=6, seed=100)
