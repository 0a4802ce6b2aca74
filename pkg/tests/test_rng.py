import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obree.errors import ConfigError
from obree.rng import TAG_LABELS, StreamKey, derive_stream


def test_same_key_same_draws():
    a = derive_stream(42, [("sim", 3)]).raw(1000)
    b = derive_stream(42, [("sim", 3)]).raw(1000)
    assert np.array_equal(a, b)


def test_neighbouring_keys_differ():
    a = derive_stream(42, [("sim", 3)]).raw(1)[0]
    b = derive_stream(42, [("sim", 4)]).raw(1)[0]
    assert a != b


def test_tag_order_and_depth_matter():
    first = lambda tags: int(derive_stream(7, tags).raw(1)[0])  # noqa: E731
    outs = {
        first([("rep", 1), ("sim", 2)]),
        first([("sim", 2), ("rep", 1)]),
        first([("rep", 1)]),
        first([("rep", 1), ("sim", 2), ("unit", 0)]),
        first([("rep", 2), ("sim", 1)]),
    }
    assert len(outs) == 5


def test_base_seed_matters():
    assert derive_stream(1, [("rep", 0)]).raw(1)[0] != derive_stream(2, [("rep", 0)]).raw(1)[0]


@pytest.mark.slow
def test_no_collisions_among_a_million_keys():
    firsts = np.fromiter((derive_stream(42, [("sim", h)]).raw(1)[0] for h in range(10**6)),
                         dtype=np.uint64, count=10**6)
    assert np.unique(firsts).size == 10**6


def test_unknown_label_is_a_config_error():
    with pytest.raises(ConfigError):
        derive_stream(0, [("bogus", 1)])


@pytest.mark.parametrize("tags", [[], [("rep", -1)], [("rep",)]])
def test_malformed_tags_rejected(tags):
    with pytest.raises(ConfigError):
        derive_stream(0, tags)


def test_seed_range_checked():
    with pytest.raises(ConfigError):
        derive_stream(2**64, [("rep", 0)])
    with pytest.raises(ConfigError):
        derive_stream(-1, [("rep", 0)])


def test_vocabulary_is_fixed():
    assert TAG_LABELS == {"rep": 1, "sim": 2, "unit": 3, "obs": 4, "contam": 5}


def test_uniforms_open_interval_and_moments():
    u = derive_stream(3, [("obs", 0)]).uniform(200_000)
    assert u.min() > 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 4 * np.sqrt(1 / 12 / u.size)


def test_normals_are_inverse_cdf_of_uniforms():
    from scipy.special import ndtri

    z = derive_stream(3, [("obs", 1)]).normal(1000)
    u = derive_stream(3, [("obs", 1)]).uniform(1000)
    assert np.array_equal(z, ndtri(u))
    big = derive_stream(3, [("obs", 2)]).normal(200_000)
    assert abs(big.mean()) < 4 / np.sqrt(big.size)
    assert abs(big.var() - 1) < 4 * np.sqrt(2 / big.size)


def test_position_counts_draws_and_continues_stream():
    s = derive_stream(5, [("unit", 0)])
    head = s.raw(10)
    tail = s.raw(5)
    assert s.position == 15
    assert np.array_equal(np.concatenate([head, tail]), derive_stream(5, [("unit", 0)]).raw(15))


def test_distinct_streams_uncorrelated():
    a = derive_stream(9, [("sim", 0)]).normal(100_000)
    b = derive_stream(9, [("sim", 1)]).normal(100_000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / np.sqrt(a.size)


def test_child_extends_path():
    key = StreamKey(1, (("rep", 2),)).child("sim", 3)
    assert key.tags == (("rep", 2), ("sim", 3))
    assert key.philox_key() == StreamKey(1, (("rep", 2), ("sim", 3))).philox_key()


@settings(max_examples=30, deadline=None)
@given(theta=st.floats(0.1, 10.0), h=st.integers(0, 1000))
def test_simulated_estimate_is_deterministic_in_theta(theta, h):
    from obree.toy import ToyModel

    model = ToyModel("exp_rate", 8)
    once = model.estimate(model.simulate([theta], derive_stream(11, [("rep", 1), ("sim", h)])))
    again = model.estimate(model.simulate([theta], derive_stream(11, [("rep", 1), ("sim", h)])))
    assert np.array_equal(once, again)


def test_threads_see_identical_streams():
    from concurrent.futures import ThreadPoolExecutor

    def draw(h):
        return derive_stream(13, [("rep", 0), ("sim", h)]).raw(64)

    serial = [draw(h) for h in range(32)]
    with ThreadPoolExecutor(4) as pool:
        parallel = list(pool.map(draw, reversed(range(32))))[::-1]
    assert all(np.array_equal(a, b) for a, b in zip(serial, parallel))
