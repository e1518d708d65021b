import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from occnet import scenegen


@pytest.fixture(scope="session")
def digits_dir(tmp_path_factory):
    """Synthetic MNIST-format IDX corpus (sklearn digits upscaled to 28x28)."""
    d = tmp_path_factory.mktemp("digits")
    scenegen.synthesize_digit_corpus(d)
    return d


@pytest.fixture(scope="session")
def small_dataset_dir(digits_dir, tmp_path_factory):
    """A few hundred generated scenes for fast pipeline tests."""
    d = tmp_path_factory.mktemp("dataset")
    scenegen.generate_dataset(d, digits_dir, seed=3, samples_per_base=2, limit_bases=150)
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
