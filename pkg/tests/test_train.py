"""Losses, optimizer, metrics, and the training loop."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import stden.diffengine as de
from stden.data import Dataset, FlowSeries, Normalizer, SynthConfig, random_network, simulate, window_and_split
from stden.model import Model, ModelConfig, init_params
from stden.odeint import SolverConfig
from stden.train import (
    Adam,
    MetricsRecord,
    TrainConfig,
    TrainingDiverged,
    aggregate_mean,
    aligned_timestamps,
    clip_global_norm,
    compute_metrics,
    evaluate,
    kl_penalty,
    nll_loss,
    predict_at,
    read_metrics,
    train,
    write_history_csv,
    write_metrics,
    _val_mae,
)

HALF_LOG_2PI = 0.9189385332046727


# -- losses --------------------------------------------------------------


def test_nll_perfect_prediction_unit_sigma():
    x = np.zeros((2, 3))
    loss = nll_loss(de.Tensor(x), de.Tensor(x), obs_sigma=1.0)
    assert abs(loss.item() - HALF_LOG_2PI) < 1e-12


def test_nll_unit_error_unit_sigma():
    pred = np.ones((4,))
    target = np.zeros((4,))
    loss = nll_loss(de.Tensor(pred), de.Tensor(target), obs_sigma=1.0)
    assert abs(loss.item() - (0.5 + HALF_LOG_2PI)) < 1e-12


def test_nll_perfect_prediction_sigma_two():
    x = np.ones((3,))
    loss = nll_loss(de.Tensor(x), de.Tensor(x), obs_sigma=2.0)
    assert abs(loss.item() - (np.log(2.0) + HALF_LOG_2PI)) < 1e-12


def test_nll_rejects_shape_mismatch_and_bad_sigma():
    with pytest.raises(ValueError):
        nll_loss(de.Tensor(np.zeros(2)), de.Tensor(np.zeros(3)))
    with pytest.raises(ValueError):
        nll_loss(de.Tensor(np.zeros(2)), de.Tensor(np.zeros(2)), obs_sigma=0.0)


def test_nll_gradient_matches_scaled_mse_gradient():
    # d/dp mean[(p-y)^2]/(2 s^2) = (p-y)/(N s^2); the constant term is flat
    rng = np.random.default_rng(7)
    p0 = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    sigma = 2.0
    store = de.ParamStore()
    store.add("p", p0)
    tape = de.Tape()
    loss = nll_loss(store.leaf("p", tape), de.Tensor(y), obs_sigma=sigma)
    tape.backward(loss)
    expected = (p0 - y) / (p0.size * sigma * sigma)
    assert np.allclose(store.grads["p"], expected, rtol=1e-13, atol=0)


def test_kl_standard_normal_is_zero():
    loss = kl_penalty(de.Tensor(np.zeros((2, 2))), de.Tensor(np.ones((2, 2))))
    assert loss.item() == 0.0


def test_kl_unit_mean():
    loss = kl_penalty(de.Tensor(np.ones(5)), de.Tensor(np.ones(5)))
    assert abs(loss.item() - 0.5) < 1e-12


def test_kl_wide_sigma():
    # 0.5 * (0 + 4 - 2 ln 2 - 1) = 1.5 - ln 2
    loss = kl_penalty(de.Tensor(np.zeros(3)), de.Tensor(np.full(3, 2.0)))
    assert abs(loss.item() - 0.8068528194400547) < 1e-12


def test_kl_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        kl_penalty(de.Tensor(np.zeros(2)), de.Tensor(np.array([1.0, 0.0])))


def test_loss_gradients_pass_grad_check():
    rng = np.random.default_rng(3)
    store = de.ParamStore()
    store.add("pred", rng.normal(size=(2, 3)))
    store.add("mu", rng.normal(size=(4,)))
    store.add("sigma", rng.uniform(0.5, 2.0, size=(4,)))
    target = rng.normal(size=(2, 3))

    def fn(s, tape):
        loss = nll_loss(s.leaf("pred", tape), de.Tensor(target), obs_sigma=1.5)
        kl = kl_penalty(s.leaf("mu", tape), s.leaf("sigma", tape))
        return de.add(loss, de.scale(kl, 0.3))

    assert de.grad_check(fn, store) < 1e-7


# -- optimizer -----------------------------------------------------------


def test_adam_zero_gradient_leaves_params_unchanged():
    store = de.ParamStore()
    store.add("w", np.array([1.0, -2.0, 3.0]))
    before = store.params["w"].copy()
    opt = Adam(store, lr=0.1)
    opt.step()
    assert np.array_equal(store.params["w"], before)


def test_adam_first_step_magnitude_is_learning_rate():
    store = de.ParamStore()
    store.add("w", np.array([1.0]))
    store.grads["w"][:] = 0.5  # any positive gradient: bias correction gives |step| ~ lr
    opt = Adam(store, lr=1e-2)
    opt.step()
    assert abs((1.0 - store.params["w"][0]) - 1e-2) < 1e-9


def test_adam_descends_on_quadratic():
    store = de.ParamStore()
    store.add("w", np.array([4.0]))
    opt = Adam(store, lr=0.05)
    values = []
    for _ in range(400):
        w = store.params["w"][0]
        values.append(0.5 * w * w)
        store.grads["w"][:] = w
        opt.step()
    assert values[-1] < 1e-3 < values[0]


def test_adam_raises_on_nonfinite_gradient():
    store = de.ParamStore()
    store.add("w", np.array([1.0]))
    store.grads["w"][:] = np.nan
    with pytest.raises(TrainingDiverged):
        Adam(store, lr=0.1).step()


def test_clip_global_norm():
    store = de.ParamStore()
    store.add("a", np.zeros(1))
    store.add("b", np.zeros(1))
    store.grads["a"][:] = 3.0
    store.grads["b"][:] = 4.0
    norm = clip_global_norm(store, 2.5)
    assert norm == 5.0
    assert abs(store.grads["a"][0] - 1.5) < 1e-15
    assert abs(store.grads["b"][0] - 2.0) < 1e-15


def test_clip_global_norm_under_limit_is_identity():
    store = de.ParamStore()
    store.add("a", np.zeros(2))
    store.grads["a"][:] = [0.3, -0.4]
    norm = clip_global_norm(store, 5.0)
    assert abs(norm - 0.5) < 1e-15
    assert np.array_equal(store.grads["a"], [0.3, -0.4])


# -- metrics -------------------------------------------------------------


def test_metrics_hand_example():
    mae, rmse, mape = compute_metrics([1.0, 2.0], [2.0, 4.0])
    assert abs(mae - 1.5) < 1e-15
    assert abs(rmse - np.sqrt(2.5)) < 1e-15
    assert abs(mape - 50.0) < 1e-12


def test_metrics_mape_masks_near_zero_targets():
    mae, rmse, mape = compute_metrics([5.0, 1.0], [0.0, 2.0])
    assert abs(mae - 3.0) < 1e-15
    assert abs(rmse - np.sqrt(13.0)) < 1e-15
    assert abs(mape - 50.0) < 1e-12  # only the |target| > 1e-3 entry counts


def test_metrics_mape_undefined_when_all_targets_tiny():
    _, _, mape = compute_metrics([1.0, 2.0], [0.0, 5e-4])
    assert mape is None


def test_metrics_shape_mismatch():
    with pytest.raises(ValueError):
        compute_metrics(np.zeros(3), np.zeros(4))


@settings(deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_mae_never_exceeds_rmse(seed, size):
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=size)
    target = rng.normal(size=size)
    mae, rmse, _ = compute_metrics(pred, target)
    assert mae <= rmse + 1e-12


def test_horizon_minutes():
    rec = MetricsRecord("stden", 0, "test", 3, 1.0, 2.0, None, 10)
    assert rec.horizon_minutes == 15
    assert MetricsRecord("stden", 0, "test", 12, 1.0, 2.0, 5.0, 10).horizon_minutes == 60


def test_metrics_file_round_trip(tmp_path):
    records = [
        MetricsRecord("stden", 0, "test", 3, 1.25, 2.5, 37.5, 100),
        MetricsRecord("ha", 1, "val", 12, 0.5, 0.75, None, 40),
    ]
    path = tmp_path / "metrics.txt"
    write_metrics(path, records)
    loaded = read_metrics(path)
    assert loaded == records


def test_aggregate_mean_is_arithmetic_mean():
    records = [
        MetricsRecord("stden", 0, "test", 3, 1.0, 2.0, 10.0, 5),
        MetricsRecord("stden", 1, "test", 3, 3.0, 4.0, 30.0, 5),
        MetricsRecord("stden", 0, "test", 6, 7.0, 8.0, None, 5),
    ]
    out = aggregate_mean(records)
    assert len(out) == 2
    by_h = {r.horizon_steps: r for r in out}
    assert by_h[3].mae == 2.0 and by_h[3].rmse == 3.0 and by_h[3].mape == 20.0
    assert by_h[3].seed == -1 and by_h[3].count == 10
    assert by_h[6].mae == 7.0 and by_h[6].mape is None


def test_history_csv_round_trip(tmp_path):
    from stden.train import EpochStats

    history = [EpochStats(0, 1.5, 0.7, 320), EpochStats(1, 1.25, 0.62, 320)]
    path = tmp_path / "history.csv"
    write_history_csv(path, history)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "epoch,train_loss,val_mae,nfe"
    assert len(lines) == 3
    cells = lines[2].split(",")
    assert int(cells[0]) == 1 and float(cells[1]) == 1.25 and int(cells[3]) == 320


# -- aligned evaluation --------------------------------------------------


def manual_dataset(steps=60, edges=2, history=3, horizon=4, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(steps, edges))
    series = FlowSeries(values)
    count = steps - (history + horizon) + 1
    starts = np.arange(count)
    return Dataset(
        series,
        history,
        horizon,
        starts[: count - 16],
        starts[count - 16 : count - 8],
        starts[count - 8 :],
        Normalizer(0.0, 1.0),
    )


def test_aligned_timestamps_hand_example():
    ds = manual_dataset()
    # test starts 46..53, T=3: horizon-4 targets start at 46+3+3, horizon-2 end at 53+3+1
    stamps = aligned_timestamps(ds, "test", (2, 4))
    assert stamps[0] == 46 + 3 + 4 - 1
    assert stamps[-1] == 53 + 3 + 2 - 1
    assert np.array_equal(stamps, np.arange(52, 58))


def test_aligned_timestamps_single_horizon_covers_all_windows():
    ds = manual_dataset()
    stamps = aligned_timestamps(ds, "test", (1,))
    assert len(stamps) == len(ds.test_starts)


def test_aligned_timestamps_too_few_windows():
    ds = manual_dataset()
    ds = Dataset(
        ds.series, ds.history_len, ds.horizon,
        ds.train_starts, ds.val_starts, ds.test_starts[:1], ds.normalizer,
    )
    with pytest.raises(ValueError):
        aligned_timestamps(ds, "test", (1, 4))


def test_aligned_timestamps_empty_split():
    ds = manual_dataset()
    ds = Dataset(
        ds.series, ds.history_len, ds.horizon,
        ds.train_starts, ds.val_starts[:0], ds.test_starts, ds.normalizer,
    )
    with pytest.raises(ValueError):
        aligned_timestamps(ds, "val", (1,))


class RowLookupPredictor:
    """Oracle that returns the true series row for any timestamp."""

    def __init__(self, series):
        self.series = series

    def predict_rows(self, timestamps):
        return self.series.values[np.asarray(timestamps)]


def test_evaluate_timestamp_predictor_is_horizon_invariant():
    ds = manual_dataset()
    noisy = RowLookupPredictor(ds.series)
    records = evaluate(noisy, ds, split="test", horizons=(1, 2, 4), model_name="oracle")
    assert len(records) == 3
    assert all(r.mae == 0.0 and r.rmse == 0.0 for r in records)
    shifted = RowLookupPredictor(
        FlowSeries(ds.series.values + np.linspace(0, 1, ds.series.edge_count))
    )
    recs = evaluate(shifted, ds, split="test", horizons=(1, 2, 4), model_name="oracle")
    assert recs[0].mae == recs[1].mae == recs[2].mae
    assert recs[0].rmse == recs[1].rmse == recs[2].rmse


# -- training loop -------------------------------------------------------


def small_problem(seed=3):
    cfg = SynthConfig(nodes=8, avg_out_degree=2.0, seed=seed, steps=120,
                      smoothness=2, noise=0.05, excite_period=60)
    net = random_network(cfg)
    sim = simulate(net, cfg)
    ds = window_and_split(sim.flows, history_len=6, horizon=4)
    mcfg = ModelConfig(history_len=6, horizon=4, latent_channels=1, gru_hidden=8,
                       solver=SolverConfig(method="rk4", substeps_per_interval=2))
    return net, ds, mcfg


def make_model(net, mcfg, seed=0, kind="stden"):
    return Model(net, mcfg, init_params(net, mcfg, seed, kind=kind), kind=kind)


def test_train_is_deterministic():
    net, ds, mcfg = small_problem()
    results = []
    for _ in range(2):
        model = make_model(net, mcfg, seed=1)
        cfg = TrainConfig(learning_rate=5e-3, batch_size=8, max_epochs=3, patience=10)
        results.append(train(model, ds, cfg, seed=11))
    a, b = results
    assert [e.train_loss for e in a.history] == [e.train_loss for e in b.history]
    assert [e.val_mae for e in a.history] == [e.val_mae for e in b.history]
    assert a.nfe_total == b.nfe_total


def test_train_reduces_loss():
    net, ds, mcfg = small_problem()
    model = make_model(net, mcfg, seed=0)
    cfg = TrainConfig(learning_rate=1e-2, batch_size=8, max_epochs=6, patience=20)
    result = train(model, ds, cfg, seed=0)
    assert result.history[-1].train_loss < result.history[0].train_loss
    assert all(np.isfinite(e.train_loss) for e in result.history)


def test_train_restores_best_validation_params():
    net, ds, mcfg = small_problem()
    model = make_model(net, mcfg, seed=2)
    cfg = TrainConfig(learning_rate=2e-2, batch_size=8, max_epochs=6, patience=20)
    result = train(model, ds, cfg, seed=5)
    maes = [e.val_mae for e in result.history]
    assert result.best_val_mae == min(maes)
    assert result.best_epoch == int(np.argmin(maes))
    recomputed = _val_mae(model, ds, np.array(ds.val_starts), 32)
    assert recomputed == result.best_val_mae


def test_train_early_stops_with_zero_patience():
    net, ds, mcfg = small_problem()
    model = make_model(net, mcfg, seed=4)
    cfg = TrainConfig(learning_rate=5e-2, batch_size=8, max_epochs=40, patience=0)
    result = train(model, ds, cfg, seed=2)
    if len(result.history) < 40:  # stopped early: exactly one non-improving epoch ran
        maes = [e.val_mae for e in result.history]
        assert maes[-1] >= min(maes[:-1])
        assert result.best_epoch == len(result.history) - 2
    else:
        assert all(x > y for x, y in zip([e.val_mae for e in result.history],
                                         [e.val_mae for e in result.history][1:]))


def test_train_budget_knobs_limit_work():
    net, ds, mcfg = small_problem()
    model = make_model(net, mcfg, seed=0)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=2, patience=5,
                      batches_per_epoch=2, val_windows=3)
    result = train(model, ds, cfg, seed=0)
    # rk4 on 4 intervals x 2 substeps x 4 evals per batch, 2 batches per epoch
    assert result.history[0].nfe == 2 * 4 * 2 * 4
    assert len(result.history) == 2


def test_train_gru_kind_draws_no_latent_noise():
    net, ds, mcfg = small_problem()
    model = make_model(net, mcfg, seed=0, kind="gru")
    cfg = TrainConfig(learning_rate=1e-2, batch_size=8, max_epochs=2, patience=5)
    result = train(model, ds, cfg, seed=0)
    assert result.nfe_total == 0
    assert len(result.history) == 2


def test_train_empty_val_split_uses_train_loss():
    net, ds, mcfg = small_problem()
    ds = Dataset(ds.series, ds.history_len, ds.horizon,
                 np.concatenate([ds.train_starts, ds.val_starts]),
                 ds.val_starts[:0], ds.test_starts, ds.normalizer)
    model = make_model(net, mcfg, seed=0)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=8, max_epochs=2, patience=5)
    result = train(model, ds, cfg, seed=0)
    assert all(e.val_mae == e.train_loss for e in result.history)


@pytest.mark.filterwarnings("ignore:overflow")
@pytest.mark.filterwarnings("ignore:invalid value")
def test_train_raises_on_divergence():
    net, ds, mcfg = small_problem()
    model = make_model(net, mcfg, seed=0)
    cfg = TrainConfig(learning_rate=1e200, batch_size=8, max_epochs=4, patience=5)
    with pytest.raises(TrainingDiverged):
        train(model, ds, cfg, seed=0)


def test_predict_at_matches_single_window_forward():
    net, ds, mcfg = small_problem()
    model = make_model(net, mcfg, seed=1)
    k = 3
    stamp = int(ds.test_starts[0]) + ds.history_len + k - 1
    rows = predict_at(model, ds, [stamp], horizon=k)
    hist, _ = ds.window(int(ds.test_starts[0]))
    flows, _, _, _ = model.forward(ds.normalizer.normalize(hist))
    expected = ds.normalizer.denormalize(flows[k - 1])
    assert np.allclose(rows[0], expected, rtol=0, atol=1e-12)


def test_evaluate_model_end_to_end():
    net, ds, mcfg = small_problem()
    model = make_model(net, mcfg, seed=1)
    records = evaluate(model, ds, split="test", horizons=(1, 2), seed=1)
    assert [r.horizon_steps for r in records] == [1, 2]
    stamps = aligned_timestamps(ds, "test", (1, 2))
    for r in records:
        assert r.count == len(stamps) * net.edge_count
        assert np.isfinite(r.mae) and r.mae <= r.rmse + 1e-12
        assert r.model == "stden" and r.split == "test" and r.seed == 1
