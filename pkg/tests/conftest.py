import pytest

from egoattn import tensor


@pytest.fixture(autouse=True)
def _debug_checks():
    tensor.set_debug_checks(True)
    yield
    tensor.set_debug_checks(False)
