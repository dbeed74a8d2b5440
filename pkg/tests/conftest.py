"""Shared pytest fixtures; plain builders live in factories.py."""

import pytest

from factories import make_seed


@pytest.fixture
def five_seeds():
    return [make_seed(f"seed-{i}", chr(ord("A") + i)) for i in range(5)]
