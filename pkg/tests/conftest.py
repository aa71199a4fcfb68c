"""Shared fixtures: synthetic corpora and one trained model per session."""

import numpy as np
import pytest

import docspot as ds
from docspot.images import crop, resize_bilinear

TRAIN_SEED = 11
HELDOUT_SEED = 99
TRAIN_CFG = ds.TrainConfig(epochs=30, seed=3)


@pytest.fixture(scope="session")
def train_corpus():
    return ds.generate_corpus(20, 3, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def heldout_corpus():
    return ds.generate_corpus(20, 3, seed=HELDOUT_SEED)


def crops_by_category(docs, gt, size=32):
    """Ground-truth crops resized to the model input, with labels."""
    dmap = dict(docs)
    counts = {}
    for e in gt.entries:
        counts[e.category] = counts.get(e.category, 0) + 1
    return [
        (resize_bilinear(crop(dmap[e.doc_id], e.bbox), size, size), e.category)
        for e in gt.entries
        if counts[e.category] >= 2
    ]


@pytest.fixture(scope="session")
def trained_model(train_corpus):
    docs, gt = train_corpus
    dataset = crops_by_category(docs, gt)
    train_pairs, _ = ds.make_pairs(dataset, TRAIN_CFG)
    model = ds.init_model(seed=TRAIN_CFG.seed)
    trained, trace = ds.train(model, train_pairs, TRAIN_CFG)
    assert trace[-1] < trace[0]
    return trained


@pytest.fixture(scope="session")
def heldout_index(heldout_corpus, trained_model):
    docs, _ = heldout_corpus
    result = ds.index_corpus(docs, ds.ProposalParams(), trained_model)
    assert not result.errors
    return result.store
