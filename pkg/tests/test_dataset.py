import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bwdq import dataset as D
from bwdq.dataset import Dataset, RandomPolicy, Transition
from bwdq.errors import FormatError, InvalidArgument

from conftest import make_dataset


@st.composite
def datasets(draw, max_n=12):
    obs_dim = draw(st.integers(1, 4))
    act_dim = draw(st.integers(1, 3))
    n = draw(st.integers(0, max_n))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    cuts = sorted(set(rng.integers(1, n, size=rng.integers(0, 4))) if n > 1 else [])
    starts = np.array(([0] + cuts) if n else [], dtype=np.int64)
    ds = Dataset(obs_dim, act_dim, float(rng.uniform(0.01, 0.999)), rng.normal(size=(n, obs_dim)) * 1e3,
                 rng.uniform(-1, 1, size=(n, act_dim)), rng.standard_cauchy(size=n),
                 rng.normal(size=(n, obs_dim)), np.zeros((n, act_dim)), np.zeros(n, bool),
                 rng.random(n) < 0.2, starts, meta={"seed": seed})
    return D.fill_next_actions(ds)


@given(datasets())
def test_bytes_round_trip_is_bit_exact(ds):
    back = D.from_bytes(D.to_bytes(ds))
    assert back.same_transitions(ds)
    assert D.to_bytes(back) == D.to_bytes(ds)


def test_file_round_trip_and_transition_equality(tmp_path, small_dataset):
    D.save(small_dataset, tmp_path / "a.bwds")
    back = D.load(tmp_path / "a.bwds")
    assert back.transitions == small_dataset.transitions


def test_empty_dataset_round_trip(tmp_path):
    ds = Dataset(2, 1, 0.9, np.zeros((0, 2)), np.zeros((0, 1)), np.zeros(0), np.zeros((0, 2)), np.zeros((0, 1)),
                 np.zeros(0, bool), np.zeros(0, bool), np.zeros(0, np.int64))
    D.save(ds, tmp_path / "e.bwds")
    assert len(D.load(tmp_path / "e.bwds")) == 0


def test_format_errors_carry_offsets(small_dataset):
    blob = D.to_bytes(small_dataset)
    with pytest.raises(FormatError, match="offset 0"):
        D.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="offset"):
        D.from_bytes(blob[:-5])
    with pytest.raises(FormatError, match="offset"):
        D.from_bytes(blob[:10])
    with pytest.raises(FormatError):
        D.from_bytes(blob + b"\0")
    bad_version = blob[:4] + struct.pack("<I", 7) + blob[8:]
    with pytest.raises(FormatError, match="offset 4"):
        D.from_bytes(bad_version)


def test_jsonl_round_trip(tmp_path):
    ds = make_dataset(n=9, traj_len=4)
    D.save_jsonl(ds, tmp_path / "d.jsonl")
    assert D.load_jsonl(tmp_path / "d.jsonl").same_transitions(ds)


def test_actions_outside_box_rejected():
    with pytest.raises(InvalidArgument):
        Dataset(1, 1, 0.9, np.zeros((1, 1)), np.full((1, 1), 1.5), np.zeros(1), np.zeros((1, 1)),
                np.zeros((1, 1)), np.zeros(1, bool), np.zeros(1, bool), np.zeros(1, np.int64))


@pytest.mark.parametrize("gamma", [0.0, 1.0, -0.5])
def test_discount_must_be_open_interval(gamma):
    with pytest.raises(InvalidArgument):
        make_dataset(discount=gamma)


def test_fill_next_actions_definitional():
    ds = make_dataset(n=5, traj_len=3)  # trajectories [0,1,2], [3,4]
    a = ds.actions
    assert np.array_equal(ds.next_actions[0], a[1]) and np.array_equal(ds.next_actions[1], a[2])
    assert list(ds.has_next) == [True, True, False, True, False]
    assert ds[2].next_action is None and ds[4].next_action is None
    single = make_dataset(n=1, traj_len=1)
    assert single[0].next_action is None


def test_fill_next_actions_rejects_overlap(small_dataset):
    with pytest.raises(InvalidArgument):
        D.fill_next_actions(small_dataset, bounds=[(0, 10), (5, 20)])


@given(datasets())
def test_fill_next_actions_idempotent(ds):
    assert D.fill_next_actions(ds).same_transitions(ds)


def test_from_transitions_with_bounds():
    ts = [Transition(np.array([float(i)]), np.array([0.1 * i]), 1.0, np.array([i + 1.0]), None, False)
          for i in range(4)]
    ds = D.fill_next_actions(Dataset.from_transitions(ts, 1, 1, 0.9, trajectory_bounds=[(0, 2), (2, 4)]))
    assert [r.start for r in ds.trajectory_bounds] == [0, 2]
    assert ds[0].next_action[0] == pytest.approx(0.1) and ds[1].next_action is None


def test_sample_batch_determinism_and_singleton(small_dataset):
    a = D.sample_batch(small_dataset, 8, np.random.default_rng(3))
    b = D.sample_batch(small_dataset, 8, np.random.default_rng(3))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    one = make_dataset(n=1, traj_len=1)
    batch = D.sample_batch(one, 1, np.random.default_rng(0))
    assert np.array_equal(batch.states[0], one.states[0])


def test_sample_batch_is_uniform():
    ds = make_dataset(n=10, traj_len=10)
    idx = D.sample_indices(ds, 100_000, np.random.default_rng(0))
    freq = np.bincount(idx, minlength=10) / 100_000
    sigma = np.sqrt(0.1 * 0.9 / 100_000)
    assert np.all(np.abs(freq - 0.1) < 3 * sigma)


def test_sampling_empty_dataset_fails():
    empty = make_dataset(n=0)
    with pytest.raises(InvalidArgument):
        D.sample_batch(empty, 1, np.random.default_rng(0))
    with pytest.raises(InvalidArgument):
        D.sample_random_pair(empty, RandomPolicy(2), np.random.default_rng(0))


def test_random_pair_properties(small_dataset):
    s, a = D.sample_random_pair(small_dataset, RandomPolicy(2), np.random.default_rng(0), n=10_000)
    assert np.all(np.abs(a) <= 1.0)
    assert np.all(np.abs(a.mean(axis=0)) < 0.05)
    assert all(any(np.array_equal(x, y) for y in small_dataset.states) for x in s[:50])
    _, z = D.sample_random_pair(small_dataset, RandomPolicy(2, std=0.0), np.random.default_rng(0), n=5)
    assert not z.any()


@given(st.floats(0.01, 5.0), st.floats(-2, 0), st.floats(0, 2), st.integers(0, 1000))
def test_random_policy_respects_clip(std, lo, hi, seed):
    a = RandomPolicy(3, std, lo, hi).sample(np.random.default_rng(seed), 200)
    assert np.all(a >= lo) and np.all(a <= hi)


@given(st.integers(1, 500), st.floats(0.01, 0.99), st.integers(0, 100))
def test_holdout_split_is_a_deterministic_partition(n, frac, seed):
    tr, ho = D.holdout_split(n, frac, seed)
    tr2, ho2 = D.holdout_split(n, frac, seed)
    assert np.array_equal(tr, tr2) and np.array_equal(ho, ho2)
    assert np.array_equal(np.sort(np.concatenate([tr, ho])), np.arange(n))


def test_standardizer_round_trip():
    std = D.fit_standardizer(np.array([[1.0, 5.0], [3.0, 5.0]]))
    assert np.array_equal(std.std, [1.0, 1.0])  # constant column keeps unit scale
    back = D.Standardizer.from_json(std.to_json())
    assert np.array_equal(back.mean, std.mean)
