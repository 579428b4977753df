import numpy as np
import pytest

from geosampler.inference import FitConfig
from geosampler.village import (
    CovariateSchema,
    CovariateSet,
    HouseRecord,
    build_frame,
)


def make_frame(coords, covariates=None, schema=None, selector=CovariateSet.GLOBAL_ONLY,
               true_status=None):
    houses = []
    for i, (x, y) in enumerate(coords):
        houses.append(
            HouseRecord(
                id=f"h{i:03d}",
                x_m=float(x),
                y_m=float(y),
                covariates=(covariates[i] if covariates else {}),
                true_status=(None if true_status is None else int(true_status[i])),
            )
        )
    return build_frame(houses, schema or CovariateSchema(), selector)


@pytest.fixture
def collinear3():
    return make_frame([(0.0, 0.0), (0.0, 100.0), (0.0, 200.0)])


@pytest.fixture
def random_frame():
    rng = np.random.default_rng(11)
    return make_frame(rng.uniform(0.0, 600.0, (25, 2)))


@pytest.fixture
def fast_fit_cfg():
    # smaller grid / search budget for unit tests that do not probe grid quality
    return FitConfig(grid_size=3, nm_max_evals=80)
