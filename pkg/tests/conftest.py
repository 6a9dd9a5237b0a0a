import numpy as np
import pytest

from anchorpu import Dataset, ModelParams


def make_logistic_data(rng, n=200, p=2, beta=None, c=0.5, k=1):
    """Dataset drawn from the working model itself.

    Covariates are standard normal behind an intercept column; the anchor is
    a coin flip on true cases.  Redraws until the dataset satisfies the data
    contract (both anchor classes, strata covered).
    """
    if beta is None:
        beta = np.concatenate([[0.0], rng.uniform(-1.5, 1.5, size=p - 1)])
    beta = np.asarray(beta, dtype=np.float64)
    c_values = np.atleast_1d(np.asarray(c, dtype=np.float64))
    for _ in range(100):
        design = np.hstack([np.ones((n, 1)), rng.normal(size=(n, p - 1))])
        logit = design @ beta
        y = rng.random(n) < 1.0 / (1.0 + np.exp(-logit))
        stratum = rng.integers(0, k, size=n) if k > 1 else None
        c_row = c_values[stratum] if k > 1 else c_values[0]
        anchor = (y & (rng.random(n) < c_row)).astype(int)
        try:
            data = Dataset(design=design, anchor=anchor, stratum=stratum)
        except ValueError:
            continue
        return data, ModelParams(beta=beta, sens=c_values), y
    raise RuntimeError("could not draw a valid dataset")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
