import pytest

from curvedetect.scorer import NGramModel
from curvedetect.synthcorpus import generate_corpus


@pytest.fixture(scope="session")
def corpus_a():
    """Harbor-themed paragraphs: [0:400] train, [400:550] held out."""
    return generate_corpus(550, seed=11, theme="harbor")


@pytest.fixture(scope="session")
def corpus_b():
    return generate_corpus(550, seed=22, theme="orchard")


@pytest.fixture(scope="session")
def train_a(corpus_a):
    return corpus_a[:400]


@pytest.fixture(scope="session")
def heldout_a(corpus_a):
    return corpus_a[400:]


@pytest.fixture(scope="session")
def train_b(corpus_b):
    return corpus_b[:400]


@pytest.fixture(scope="session")
def model_a3(train_a):
    return NGramModel.train(train_a, order=3, smoothing_k=1e-4)


@pytest.fixture(scope="session")
def model_b3(train_b):
    return NGramModel.train(train_b, order=3, smoothing_k=1e-4)


@pytest.fixture(scope="session")
def unigram_a(train_a):
    return NGramModel.train(train_a, order=1, smoothing_k=1.0)
