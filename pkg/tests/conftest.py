import numpy as np
import pytest

from matchfrontier.prefs import parse_profile

# 3x3 market used throughout: w1: f2,f3,f1; w2: f2,f1,f3; w3: f1,f3,f2;
# f1: w1,w2,w3; f2: w2,w3,w1; f3: w3,w1,w2 (everyone acceptable)
EXAMPLE1_TEXT = ("f2,f3,f1,_;f2,f1,f3,_;f1,f3,f2,_"
                 "|w1,w2,w3,_;w2,w3,w1,_;w3,w1,w2,_")

# exact RSD marginals for that market, averaged over all 720 priority orders
RSD_EXPECTED = np.array([[11 / 24, 1 / 4, 7 / 24],
                         [1 / 6, 3 / 4, 1 / 12],
                         [3 / 8, 0.0, 5 / 8]])


@pytest.fixture
def example1():
    return parse_profile(EXAMPLE1_TEXT)


@pytest.fixture
def rsd_expected():
    return RSD_EXPECTED.copy()
