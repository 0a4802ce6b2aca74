import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obree.errors import EstimationError
from obree.rng import derive_stream
from obree.toy import ToyModel, toy_estimate, toy_exact_pi, toy_simulate, toy_transform


def test_transforms():
    assert np.allclose(toy_transform("unif_max", 2.0, [0.1, 0.5, 0.9]), [0.2, 1.0, 1.8])
    assert toy_transform("exp_rate", 1.0, [math.exp(-1)])[0] == pytest.approx(1.0, abs=1e-15)
    assert np.array_equal(toy_transform("normal_mean", 0.0, [0.3, -0.3]), [0.3, -0.3])


def test_estimators():
    assert toy_estimate("normal_mean", [1, 2, 3]) == 2.0
    assert toy_estimate("exp_rate", [0.5, 1.5]) == 1.0
    assert toy_estimate("unif_max", [0.2, 1.0, 1.8]) == 1.8


def test_exact_expectations():
    assert toy_exact_pi("normal_mean", 0.7, 3) == 0.7
    assert toy_exact_pi("exp_rate", 1.0, 10) == pytest.approx(10 / 9, abs=1e-15)
    assert toy_exact_pi("unif_max", 2.0, 4) == pytest.approx(1.6, abs=1e-15)


@pytest.mark.parametrize("toy_id,n,theta", [("exp_rate", 10, 1.0), ("unif_max", 4, 2.0), ("normal_mean", 5, 0.7)])
def test_simulated_mean_matches_closed_form(toy_id, n, theta):
    R = 20_000
    est = np.array([toy_estimate(toy_id, toy_simulate(toy_id, theta, n, derive_stream(8, [("sim", h)])))
                    for h in range(R)])
    se = est.std(ddof=1) / math.sqrt(R)
    assert abs(est.mean() - toy_exact_pi(toy_id, theta, n)) <= 4 * se


def test_invalid_inputs():
    with pytest.raises(ValueError):
        toy_transform("poisson", 1.0, [0.5])
    with pytest.raises(ValueError):
        toy_transform("exp_rate", -1.0, [0.5])
    with pytest.raises(ValueError):
        ToyModel("exp_rate", 1)
    with pytest.raises(EstimationError):
        toy_estimate("normal_mean", [])


@settings(max_examples=40, deadline=None)
@given(theta=st.floats(0.1, 20.0), scale=st.floats(0.1, 10.0))
def test_common_draws_give_scale_equivariance(theta, scale):
    stream_draws = derive_stream(3, [("sim", 0)]).uniform(12)
    for toy_id in ("exp_rate", "unif_max"):
        a = toy_estimate(toy_id, toy_transform(toy_id, theta, stream_draws))
        b = toy_estimate(toy_id, toy_transform(toy_id, theta * scale, stream_draws))
        assert b == pytest.approx(a * scale, rel=1e-12)


def test_model_batch_matches_single_estimates():
    model = ToyModel("exp_rate", 7)
    draws = np.vstack([model.draw(derive_stream(1, [("sim", h)])) for h in range(5)])
    batch = model.estimate_replicas([1.5], draws)[:, 0]
    single = [model.estimate(model.generate([1.5], d))[0] for d in draws]
    assert np.allclose(batch, single, rtol=1e-15)
