import numpy as np
import pytest

from nudgeforge import autodiff as ad
from nudgeforge import dynamics, fileformats
from nudgeforge.assimilation import NudgeOperator
from nudgeforge.observation import ObservationOperator, Rng
from nudgeforge.training import (AdamState, Checkpoint, TrainingConfig, TrainingError, adam_step,
                                 initial_params, load_checkpoint, make_windows, save_checkpoint, train,
                                 unrolled_loss, window_loss, write_loss_curve)


def toy_data(n=8, steps=41, burn_in=50):
    model = dynamics.lorenz96(n, 8.0)
    return model, dynamics.generate_trajectory(model, model.default_initial_condition(), steps,
                                               burn_in=burn_in)


def test_window_counts_and_anchors():
    snaps = np.arange(11.0)[:, None]
    obs = snaps.copy()
    w = make_windows(snaps, obs, 5)
    assert [x.anchor for x in w] == [0, 5]
    np.testing.assert_array_equal(w[1].states[:, 0], [5, 6, 7, 8, 9, 10])
    np.testing.assert_array_equal(w[1].observations[:, 0], [6, 7, 8, 9, 10])
    assert len(make_windows(snaps, obs, 1)) == 10
    big = np.zeros((1620, 1))
    assert len(make_windows(big, big, 5)) == 323


def test_equilibrium_window_has_zero_loss():
    model = dynamics.lorenz96(40, 8.0)
    H = ObservationOperator((40,), 1)
    states = np.full((6, 40), 8.0)
    window = make_windows(states, states, 5)[0]
    loss = window_loss(NudgeOperator.linear(H, np.zeros((40, 40))), window, model, 0.0, Rng(0))
    assert float(ad._raw(loss)) < 1e-25


def test_loss_is_nonnegative():
    model, truth = toy_data()
    H = ObservationOperator((8,), 2)
    windows = make_windows(truth, truth[:, ::2], 3)
    gain = np.random.default_rng(0).standard_normal((8, 4))
    for w in windows[:4]:
        assert float(ad._raw(window_loss(NudgeOperator.linear(H, gain), w, model, 0.3, Rng(1)))) >= 0


def test_window_gradient_linear_toy_system():
    # 8-dim linear system dx/dt = A x advanced by RK4 through the same loop
    A = -0.3 * np.eye(8) + 0.2 * np.roll(np.eye(8), 1, axis=1)

    class Linear:
        obs_interval = 0.1

        def advance(self, u):
            return dynamics.rk4_step(lambda x: ad.matvec(A, x), u, 0.1, check=False)

    rng = np.random.default_rng(0)
    H = ObservationOperator((8,), 2)
    u0 = rng.standard_normal((1, 8))
    targets = rng.standard_normal((1, 2, 8))
    ys = rng.standard_normal((1, 2, 4))
    proto = NudgeOperator.linear(H, np.zeros((8, 4)))

    def fn(p):
        return unrolled_loss(proto.with_params(p), Linear(), u0, targets, ys)[0]

    rep = ad.gradient_check(fn, {"gain": rng.standard_normal((8, 4))}, tolerance=1e-5)
    assert rep["all_passed"], rep


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    st = AdamState.zeros_like(p)
    new, st2 = adam_step(p, {"w": np.zeros(2)}, st, 1e-3)
    np.testing.assert_array_equal(new["w"], p["w"])
    assert not np.any(st2.m["w"]) and not np.any(st2.v["w"]) and st2.step == 1


def test_adam_first_step_is_signed_lr():
    g = np.array([0.5, -3.0, 1e-2])
    p = {"w": np.zeros(3)}
    new, _ = adam_step(p, {"w": g}, AdamState.zeros_like(p), 1e-3)
    np.testing.assert_allclose(new["w"], -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(new["w"], -1e-3 * np.sign(g), rtol=1e-5)


def test_adam_streams_are_bit_identical():
    rng = np.random.default_rng(3)
    grads = [{"w": rng.standard_normal(4).astype(np.float32)} for _ in range(20)]
    runs = []
    for _ in range(2):
        p = {"w": np.zeros(4, np.float32)}
        st = AdamState.zeros_like(p)
        for g in grads:
            p, st = adam_step(p, g, st, 1e-3)
        runs.append(p["w"])
    np.testing.assert_array_equal(*runs)


def config(**kw):
    base = dict(K=2, epochs=3, sigma=0.1, seed=0, method="nnn", channels=4)
    base.update(kw)
    return TrainingConfig(**base)


def test_zero_epochs_returns_initial_parameters():
    model, truth = toy_data()
    H = ObservationOperator((8,), 2)
    cfg = config(epochs=0)
    ckpt = train(cfg, model, H, truth)
    init, _ = initial_params(cfg, H)
    for k in init:
        np.testing.assert_array_equal(ckpt.params[k], init[k])
    assert ckpt.loss_curve == []


def test_one_small_step_does_not_increase_window_loss():
    model, truth = toy_data(steps=3)
    H = ObservationOperator((8,), 1)
    cfg = config(sigma=0.0, epochs=1, lr=1e-5, dtype="float64")
    ys = truth[:, :]
    window = make_windows(truth, ys, 2)[0]
    params, spec = initial_params(cfg, H)
    proto = NudgeOperator.neural(spec, params, H)

    def loss_of(p):
        return float(ad._raw(unrolled_loss(proto.with_params(p), model, window.states[None, 0],
                                           window.states[None, 1:], window.observations[None])[0]))

    before = loss_of(params)
    ckpt = train(cfg, model, H, truth[:3])
    assert loss_of(ckpt.params) <= before


def test_training_reduces_loss_and_is_deterministic(tmp_path):
    model, truth = toy_data(steps=61)
    H = ObservationOperator((8,), 2)
    cfg = config(epochs=15, lr=1e-2)
    a = train(cfg, model, H, truth)
    b = train(cfg, model, H, truth)
    assert a.loss_curve[-1][1] < a.loss_curve[0][1]
    save_checkpoint(a, tmp_path / "a.nnnc")
    save_checkpoint(b, tmp_path / "b.nnnc")
    assert (tmp_path / "a.nnnc").read_bytes() == (tmp_path / "b.nnnc").read_bytes()


def test_chunked_gradients_match_full_batch():
    model, truth = toy_data(steps=41)
    H = ObservationOperator((8,), 2)
    full = train(config(epochs=2, dtype="float64"), model, H, truth)
    chunked = train(config(epochs=2, dtype="float64", chunk_size=3), model, H, truth)
    for k in full.params:
        np.testing.assert_allclose(chunked.params[k], full.params[k], rtol=1e-9, atol=1e-12)


def test_minibatch_mode_updates_per_chunk():
    model, truth = toy_data(steps=41)
    H = ObservationOperator((8,), 2)
    ckpt = train(config(epochs=1, chunk_size=5, minibatch=True), model, H, truth)
    assert len(ckpt.loss_curve) == 1


def test_linear_baseline_starts_from_zero_gain():
    model, truth = toy_data()
    H = ObservationOperator((8,), 2)
    params, spec = initial_params(config(method="linear"), H)
    assert spec is None and params["gain"].shape == (8, 4) and not np.any(params["gain"])
    ckpt = train(config(method="linear", epochs=2), model, H, truth)
    assert ckpt.kind == "linear" and np.any(ckpt.params["gain"])


def test_blown_up_windows_abort_training():
    model, truth = toy_data()
    H = ObservationOperator((8,), 1)
    with pytest.raises(TrainingError):
        train(config(sigma=1e7, epochs=1), model, H, truth)


def test_checkpoint_round_trip(tmp_path):
    model, truth = toy_data()
    H = ObservationOperator((8,), 2)
    ckpt = train(config(epochs=0), model, H, truth)
    p1, p2 = tmp_path / "1.nnnc", tmp_path / "2.nnnc"
    save_checkpoint(ckpt, p1)
    loaded = load_checkpoint(p1, expected_state_dim=8)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for k, v in loaded.params.items():
        if k.endswith("bias"):
            assert not np.any(v)
    with pytest.raises(fileformats.FormatError):
        load_checkpoint(p1, expected_state_dim=40)


def test_checkpoint_rejects_corruption(tmp_path):
    model, truth = toy_data()
    ckpt = train(config(epochs=0), model, ObservationOperator((8,), 2), truth)
    raw = fileformats.checkpoint_bytes(ckpt.header(), ckpt.params)
    for bad in (raw[:-3], b"XXXX" + raw[4:], raw + b"\0"):
        with pytest.raises(fileformats.FormatError):
            fileformats.parse_checkpoint(bad)


def test_loss_curve_csv(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_curve(path, [(1, 0.5, 0), (2, 0.25, 1)])
    assert path.read_text().splitlines() == ["epoch,mean_loss,skipped_windows", "1,0.5,0", "2,0.25,1"]


def test_config_digest_tracks_every_field():
    assert config().digest() == config().digest()
    assert config().digest() != config(seed=1).digest()
