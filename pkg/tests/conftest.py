import pytest

from darkforge import autodiff


@pytest.fixture(autouse=True)
def finite_checks():
    """Forward ops must never emit NaN/Inf during unit tests."""
    autodiff.strict_checks = True
    yield
    autodiff.strict_checks = False
