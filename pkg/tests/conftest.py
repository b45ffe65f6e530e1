import pytest

import _corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """600/240 glyph corpus for fast end-to-end runs."""
    return _corpus.write_corpus(tmp_path_factory.mktemp("corpus_small"),
                                n_train=600, n_test=240)


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    """6000/1000 corpus backing the desk-scale acceptance runs."""
    return _corpus.write_corpus(tmp_path_factory.mktemp("corpus_desk"),
                                n_train=6000, n_test=1000)
