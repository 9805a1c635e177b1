import numpy as np
import pytest

from vlasovlab.formfactor import build_form_factor
from vlasovlab.kernels import CoulombKernel, build_smeared_kernel


@pytest.fixture(scope="session")
def ff2():
    return build_form_factor(2)


@pytest.fixture(scope="session")
def ff3():
    return build_form_factor(3)


@pytest.fixture(scope="session")
def kernel2(ff2):
    """Double-smeared repulsive kernel, d=2, r=0.1."""
    return build_smeared_kernel(CoulombKernel(d=2, sigma=1), ff2.rescale(0.1))


@pytest.fixture(scope="session")
def kernel3(ff3):
    return build_smeared_kernel(CoulombKernel(d=3, sigma=1), ff3.rescale(0.1))


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
