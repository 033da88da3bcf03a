import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rknet.ssm import (DatasetFormatError, InitialLaw, NoiseSchedule, StateSpaceModel,
                       episode_seed, generate_dataset, load_dataset, make_cv_model,
                       make_schedule, default_initial_law, save_dataset, simulate_episode)


def test_cv_model_reference_constants():
    m = make_cv_model(1.0, 0.01)
    np.testing.assert_array_equal(m.F, [[1, 1], [0, 1]])
    np.testing.assert_array_equal(m.H, [[1, 0]])
    np.testing.assert_allclose(m.Q, [[0, 0], [0, 1e-4]], rtol=0, atol=1e-20)
    assert (m.state_dim, m.meas_dim) == (2, 1)


def test_cv_model_substitution():
    m = make_cv_model(0.5, 0.1)
    np.testing.assert_array_equal(m.F, [[1, 0.5], [0, 1]])
    np.testing.assert_allclose(m.Q, [[0, 0], [0, 0.01]])


@pytest.mark.parametrize("dt,sv", [(1.0, 0.0), (0.0, 0.01), (-1.0, 0.01), (1.0, -0.1)])
def test_cv_model_rejects_degenerate(dt, sv):
    with pytest.raises(ValueError):
        make_cv_model(dt, sv)


def test_model_rejects_indefinite_q():
    with pytest.raises(ValueError):
        StateSpaceModel(np.eye(2), np.ones((1, 2)), np.diag([1.0, -1.0]))
    with pytest.raises(ValueError):
        StateSpaceModel(np.eye(2), np.ones((1, 3)), np.eye(2))


def test_schedule_s1_switch():
    s = make_schedule("S1", 150)
    assert len(s) == 150
    assert s.sigma[74] == 0.35
    assert s.sigma[75] == 1.75
    assert np.all(s.sigma[:75] == 0.35) and np.all(s.sigma[75:] == 1.75)


def test_schedule_constants():
    np.testing.assert_array_equal(make_schedule("S2a", 10).sigma, np.full(10, 1.5))
    np.testing.assert_array_equal(make_schedule("S2b", 10).sigma, np.full(10, 0.6))
    ratio = make_schedule("S3a", 2).sigma / make_schedule("S3b", 2).sigma
    np.testing.assert_allclose(ratio, 10.0, atol=1e-6)
    # printed approximations
    assert round(make_schedule("S3a", 1).sigma[0], 2) == 1.91
    assert round(make_schedule("S3b", 1).sigma[0], 2) == 0.19


def test_schedule_ratios():
    s1 = make_schedule("S1", 150).sigma
    assert s1[100] / s1[0] == pytest.approx(5.0)
    assert make_schedule("S2a", 1).sigma[0] / make_schedule("S2b", 1).sigma[0] == pytest.approx(2.5)


def test_schedule_unknown():
    with pytest.raises(ValueError, match="valid ids"):
        make_schedule("S9", 10)
    with pytest.raises(ValueError):
        make_schedule("S1", 0)


def test_zero_noise_recursion():
    model = StateSpaceModel(np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([[1.0, 0.0]]),
                            np.zeros((2, 2)))
    init = InitialLaw(np.array([0.0, 1.0]), np.zeros((2, 2)))
    ep = simulate_episode(model, NoiseSchedule(np.zeros(3)), init, 3, seed=5)
    # stored index 0 is t = 1, one step after the initial draw x_0 = (0, 1)
    np.testing.assert_array_equal(ep.x, [[1, 1], [2, 1], [3, 1]])
    np.testing.assert_array_equal(ep.z[:, 0], [1, 2, 3])


def test_simulation_deterministic():
    m, init = make_cv_model(), default_initial_law()
    sched = make_schedule("S1", 150)
    a = simulate_episode(m, sched, init, 150, seed=123)
    b = simulate_episode(m, sched, init, 150, seed=123)
    assert a == b
    assert a.x.tobytes() == b.x.tobytes()
    c = simulate_episode(m, sched, init, 150, seed=124)
    assert not np.array_equal(a.z, c.z)


def test_schedule_length_mismatch():
    with pytest.raises(ValueError):
        simulate_episode(make_cv_model(), make_schedule("S1", 10), default_initial_law(), 11, 0)


def test_measurement_noise_variance_monte_carlo():
    m, init = make_cv_model(), default_initial_law()
    ds = generate_dataset(m, [("S1", 1000)], init, 150, 2024, "train")
    x, z, _ = ds.stacked()
    w = z[..., 0] - x[..., 0]
    var = w.var(axis=0, ddof=1)
    assert 0.35**2 * 0.85 <= var[10] <= 0.35**2 * 1.15
    assert 1.75**2 * 0.85 <= var[100] <= 1.75**2 * 1.15
    # every step, not just the two probes
    expected = make_schedule("S1", 150).R
    assert np.all(np.abs(var / expected - 1) < 0.15)


def test_velocity_random_walk_increments():
    m, init = make_cv_model(), default_initial_law()
    ds = generate_dataset(m, [("S2a", 1000)], init, 50, 3, "train")
    x, _, _ = ds.stacked()
    dv = np.diff(x[..., 1], axis=1)
    assert dv.std() == pytest.approx(0.01, rel=0.05)
    # position integrates velocity with no position noise
    np.testing.assert_allclose(np.diff(x[..., 0], axis=1), x[:, :-1, 1], atol=1e-12)


def test_dataset_sizes_and_mix():
    m, init = make_cv_model(), default_initial_law()
    ds = generate_dataset(m, [("S2a", 500), ("S2b", 500)], init, 20, 1, "train")
    ids = [ep.schedule.scenario_id for ep in ds.episodes]
    assert ids.count("S2a") == 500 and ids.count("S2b") == 500
    assert ids[:4] == ["S2a", "S2b", "S2a", "S2b"]
    val = generate_dataset(m, [("S1", 100)], init, 150, 1, "val")
    assert len(val) == 100 and val.T == 150


def test_dataset_rejects_empty():
    with pytest.raises(ValueError):
        generate_dataset(make_cv_model(), [("S1", 0)], default_initial_law(), 10, 0, "train")
    with pytest.raises(ValueError):
        generate_dataset(make_cv_model(), [], default_initial_law(), 10, 0, "train")


def test_episode_independent_of_generation_order():
    m, init = make_cv_model(), default_initial_law()
    full = generate_dataset(m, [("S1", 6)], init, 30, 99, "test")
    k = 4
    alone = simulate_episode(m, make_schedule("S1", 30), init, 30,
                             episode_seed(99, "test", k), episode_id=k)
    assert full.episodes[k] == alone


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63 - 1), st.sampled_from(["train", "val", "test"]), st.integers(0, 10**6))
def test_episode_seed_stable(master, split, k):
    assert episode_seed(master, split, k) == episode_seed(master, split, k)
    assert 0 <= episode_seed(master, split, k) < 2**64


def test_splits_get_distinct_seeds():
    seeds = {episode_seed(1, s, 0) for s in ("train", "val", "test")}
    assert len(seeds) == 3


def test_roundtrip_bit_exact(tmp_path):
    m, init = make_cv_model(), default_initial_law()
    ds = generate_dataset(m, [("S3a", 3), ("S3b", 2)], init, 40, 17, "val")
    path = tmp_path / "ds.jsonl"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back == ds
    for a, b in zip(ds.episodes, back.episodes):
        assert a.x.tobytes() == b.x.tobytes() and a.z.tobytes() == b.z.tobytes()
    assert back.rng_algorithm == ds.rng_algorithm


def test_load_truncated(tmp_path):
    ds = generate_dataset(make_cv_model(), [("S1", 3)], default_initial_law(), 20, 1, "train")
    path = tmp_path / "ds.jsonl"
    save_dataset(ds, path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(DatasetFormatError, match="line"):
        load_dataset(path)


def test_load_length_mismatch(tmp_path):
    ds = generate_dataset(make_cv_model(), [("S1", 3)], default_initial_law(), 20, 1, "train")
    path = tmp_path / "ds.jsonl"
    save_dataset(ds, path)
    lines = path.read_text().splitlines()
    import json
    rec = json.loads(lines[2])
    rec["x"] = rec["x"][:-1]
    rec["z"] = rec["z"][:-1]
    rec["sigma"] = rec["sigma"][:-1]
    lines[2] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="line 3"):
        load_dataset(path)


def test_load_missing_field(tmp_path):
    ds = generate_dataset(make_cv_model(), [("S1", 2)], default_initial_law(), 5, 1, "train")
    path = tmp_path / "ds.jsonl"
    save_dataset(ds, path)
    lines = path.read_text().splitlines()
    lines[1] = lines[1].replace('"z"', '"zz"')
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="'z'"):
        load_dataset(path)
