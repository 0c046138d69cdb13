import pytest

from granp import autodiff as ad


@pytest.fixture
def f64():
    """Run a test under 64-bit precision (gradient checks require it)."""
    with ad.precision("f64"):
        yield


@pytest.fixture(autouse=True)
def _reset_precision():
    yield
    ad.set_precision("f32")
