from __future__ import annotations

import pytest

from mblstm import tensor as T


@pytest.fixture(autouse=True)
def _double_precision():
    """Every test starts in double precision and leaves the global mode untouched."""
    previous = T.get_precision()
    T.set_precision("double")
    yield
    T.set_precision(previous)
