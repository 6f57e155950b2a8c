from __future__ import annotations

import pytest

from helpers import make_dataset, make_mock, make_template


@pytest.fixture
def dataset():
    return make_dataset()


@pytest.fixture
def template():
    return make_template()


@pytest.fixture
def hash_backend(dataset):
    return make_mock(dataset, mode="hash")
