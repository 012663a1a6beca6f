"""Shared fixtures for the ssmnd test suite."""

import os
import sys

import numpy as np
import pytest

# Add the ssmnd app directory to the path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "apps", "ssmnd"))


@pytest.fixture
def rng():
    """Seeded generator so every test draws the same numbers."""
    return np.random.default_rng(0)


@pytest.fixture
def presets_dir():
    return os.path.join(os.path.dirname(__file__), "..", "data", "presets")
