import pytest

from videosal.autograd import set_debug_checks


@pytest.fixture(autouse=True)
def debug_numerics():
    """NaN/Inf scans on every op output; heavy tests opt out locally."""
    set_debug_checks(True)
    yield
    set_debug_checks(False)
