import math

import numpy as np
import pytest
from hypothesis import strategies as st

from malliavin_lab import expr as ex
from malliavin_lab.model import SdeModel

OU_LAMBDA = (1.0 - math.exp(-2.0)) / 2.0  # int_0^1 e^{-2(1-r)} dr


@pytest.fixture
def ou():
    return SdeModel.from_text(b="-x", sigma="1", x0=1.0, T=1.0)


@pytest.fixture
def quintic():
    return SdeModel.from_text(b="-x^5", sigma="x^2", x0=1.0, T=1.0)


@pytest.fixture
def quintic_shifted_sigma():
    return SdeModel.from_text(b="-x^5", sigma="x^2+0.5", x0=1.0, T=1.0)


def poly_text(coeffs):
    """Render coefficients (low order first) as grammar text, independently of to_text."""
    terms = []
    for k, c in enumerate(coeffs):
        if c == 0:
            continue
        body = repr(abs(float(c))) + ("" if k == 0 else ("*x" if k == 1 else f"*x^{k}"))
        terms.append(("- " if c < 0 else "+ ") + body)
    if not terms:
        return "0"
    text = " ".join(terms)
    return text[2:] if text.startswith("+ ") else "0 " + text


coeff = st.integers(-9, 9).map(float) | st.floats(-5, 5, allow_nan=False, allow_infinity=False)
polynomials = st.lists(coeff, min_size=1, max_size=7)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
