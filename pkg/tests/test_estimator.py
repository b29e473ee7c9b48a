"""
估计器框架测试
"""
import numpy as np
import pytest

from src.config_manager import DRONE_MODES, Settings
from src.estimator import (
    BackendSpec, EstimatorSpec, FeatureSpec, LabelSpec, ValidityGuard, build_estimator,
    constant_estimator, dataset_header, make_estimator,
)
from src.models import EstimatorError, TrainingError, TrainingSample
from src.snapshot_history import SnapshotHistory

BATTERY = FeatureSpec("battery", "battery", "minmax", (0.0, 1.0))
MODE = FeatureSpec("mode", "mode", categories=tuple(DRONE_MODES))
SNAPSHOT = {"entity_id": "d", "battery": 0.8, "mode": "IDLE"}


def battery_spec(**overrides) -> EstimatorSpec:
    fields = dict(
        id="future_battery",
        inputs=(BATTERY, MODE),
        output=BATTERY,
        horizon=(1, 200),
        guard=ValidityGuard.mode_never("CHARGING"),
        backend=BackendSpec("constant"),
        bootstrap_value=0.0,
    )
    fields.update(overrides)
    return EstimatorSpec(**fields)


def track(t0, t1, mode_at=lambda t: "PROTECTING", battery_at=lambda t: 1.0, entity="d"):
    history = SnapshotHistory()
    for t in range(t0, t1 + 1):
        history.record(entity, t, {"entity_id": entity, "battery": battery_at(t), "mode": mode_at(t)})
    return history


def sample(x, label, t=0):
    return TrainingSample(np.asarray(x, dtype=float), float(label), t, t + 1, "d")


# ==================== 声明 ====================

def test_untrained_handle_predicts_bootstrap():
    handle = make_estimator(battery_spec())
    for delta in (1, 57, 200):
        assert handle.predict(SNAPSHOT, delta) == 0.0


def test_horizon_must_start_at_one():
    with pytest.raises(EstimatorError):
        make_estimator(battery_spec(horizon=(0, 200)))
    with pytest.raises(EstimatorError):
        make_estimator(battery_spec(horizon=(10, 5)))


def test_declaration_errors():
    with pytest.raises(EstimatorError):
        make_estimator(battery_spec(inputs=(BATTERY, BATTERY)))
    with pytest.raises(EstimatorError):
        make_estimator(battery_spec(bootstrap_value=float("inf")))
    with pytest.raises(EstimatorError):
        make_estimator(battery_spec(backend=BackendSpec("svm")))


def test_battery_and_mode_input_dimensions():
    handle = make_estimator(battery_spec())
    assert handle.feature_dim == 1 + len(DRONE_MODES)
    assert handle.input_dim == handle.feature_dim + 1


def test_configured_estimators():
    estimators = Settings().estimators
    handle = build_estimator("future_battery", estimators)
    assert handle.feature_dim == 6
    assert handle.spec.guard == ValidityGuard.mode_never("CHARGING")
    assert build_estimator("future_birds", estimators).spec.entity == "field"
    with pytest.raises(EstimatorError):
        build_estimator("missing", estimators)


def test_dataset_header():
    header = dataset_header(make_estimator(battery_spec()))
    assert header[:3] == ["t_observed", "t_resolved", "battery"]
    assert header[3:8] == [f"mode_{m}" for m in DRONE_MODES]
    assert header[-2:] == ["delta_fraction", "label"]


# ==================== observe ====================

def test_observe_records_pending():
    handle = make_estimator(battery_spec())
    pending = handle.observe(SNAPSHOT, 100, 50)

    assert (pending.t_observed, pending.delta, pending.due) == (100, 50, 150)
    assert pending.entity_id == "d"
    assert pending.input_vector[0] == pytest.approx(0.8)
    assert pending.input_vector[1 + DRONE_MODES.index("IDLE")] == 1.0
    assert pending.input_vector[-1] == pytest.approx(0.25)


def test_observe_rejects_out_of_range_delta():
    handle = make_estimator(battery_spec())
    with pytest.raises(EstimatorError):
        handle.observe(SNAPSHOT, 100, 300)
    with pytest.raises(EstimatorError):
        handle.observe(SNAPSHOT, 100, None)


def test_two_observes_same_tick():
    handle = make_estimator(battery_spec())
    handle.observe(SNAPSHOT, 100, 10)
    handle.observe(SNAPSHOT, 100, 20)
    assert handle.pending_count == 2
    assert [p.delta for p in handle.pending] == [10, 20]


def test_missing_snapshot_field():
    handle = make_estimator(battery_spec())
    with pytest.raises(EstimatorError):
        handle.observe({"battery": 0.5}, 0, 10, "d")


# ==================== resolve_pending ====================

def test_charging_inside_window_is_discarded():
    handle = make_estimator(battery_spec())
    handle.observe(SNAPSHOT, 100, 50)
    history = track(100, 150, mode_at=lambda t: "CHARGING" if t == 120 else "PROTECTING")

    assert handle.resolve_pending(history, 150) == []
    assert handle.get_stats()["discarded"] == 1
    assert handle.pending_count == 0


def test_guard_passes_and_label_is_read():
    handle = make_estimator(battery_spec())
    handle.observe(SNAPSHOT, 100, 50)
    history = track(100, 150, battery_at=lambda t: 0.55 if t == 150 else 0.8)

    resolved = handle.resolve_pending(history, 150)
    assert len(resolved) == 1
    assert resolved[0].label == pytest.approx(0.55)
    assert (resolved[0].t_observed, resolved[0].t_resolved) == (100, 150)
    assert handle.collected[0] is resolved[0]


def test_unguarded_keeps_charged_samples():
    handle = make_estimator(battery_spec(guard=ValidityGuard.always_valid()))
    handle.observe(SNAPSHOT, 100, 50)
    history = track(100, 150, mode_at=lambda t: "CHARGING" if t == 120 else "PROTECTING")
    assert len(handle.resolve_pending(history, 150)) == 1


def test_not_yet_due_stays_pending():
    handle = make_estimator(battery_spec())
    handle.observe(SNAPSHOT, 100, 50)
    assert handle.resolve_pending(track(100, 140), 140) == []
    assert handle.pending_count == 1


def test_missing_history_keeps_sample_pending():
    handle = make_estimator(battery_spec())
    handle.observe(SNAPSHOT, 100, 50)
    with pytest.raises(EstimatorError):
        handle.resolve_pending(track(100, 140), 150)

    # 账本守恒: observed = resolved + discarded + pending
    stats = handle.get_stats()
    assert handle.pending_count == 1
    assert stats["observed"] == stats["resolved"] + stats["discarded"] + handle.pending_count

    history = track(100, 150, battery_at=lambda t: 0.6 if t == 150 else 0.8)
    assert [s.label for s in handle.resolve_pending(history, 150)] == [pytest.approx(0.6)]
    assert handle.pending_count == 0


def test_guard_on_history_matches_explicit_sequence():
    history = track(0, 30, mode_at=lambda t: "CHARGING" if t in (7, 21) else "PROTECTING")
    guard = ValidityGuard.mode_never("CHARGING")
    for t0, t1 in [(0, 6), (0, 7), (7, 20), (8, 30), (21, 30)]:
        assert guard.holds(history, "d", t0, t1) == guard.holds_over(history.window("d", t0 + 1, t1))


def waiting_spec(**overrides):
    fields = dict(
        id="waiting_time",
        inputs=(FeatureSpec("queue_fraction", "queue_fraction"),),
        output=FeatureSpec("waiting_time", "waiting_time", "minmax", (0.0, 200.0)),
        horizon=(1, 50),
        backend=BackendSpec("constant"),
        bootstrap_value=35.0,
        label=LabelSpec("until_mode", "CHARGING", "elapsed"),
        trigger="enqueue",
    )
    fields.update(overrides)
    return EstimatorSpec(**fields)


def test_until_mode_elapsed_label():
    handle = make_estimator(waiting_spec())
    handle.observe({"entity_id": "d", "queue_fraction": 0.25}, 10)
    history = track(10, 30, mode_at=lambda t: "CHARGING" if t >= 25 else "PROTECTING")

    assert handle.resolve_pending(track(10, 20), 20) == []
    resolved = handle.resolve_pending(history, 30)
    assert [(s.label, s.t_resolved) for s in resolved] == [(15.0, 25)]


def test_until_mode_feature_label_reads_last_tick_before_event():
    spec = battery_spec(
        id="approach_battery",
        horizon=(1, 400),
        label=LabelSpec("until_mode", "CHARGING", "feature"),
        trigger="release",
    )
    handle = make_estimator(spec)
    handle.observe({"entity_id": "d", "battery": 0.4, "mode": "MOVING_TO_CHARGER"}, 10)
    history = track(
        10, 30,
        mode_at=lambda t: "CHARGING" if t >= 25 else "MOVING_TO_CHARGER",
        battery_at=lambda t: 0.4 - 0.0045 * (t - 10),
    )

    resolved = handle.resolve_pending(history, 30)
    assert len(resolved) == 1
    assert resolved[0].t_resolved == 24
    assert resolved[0].label == pytest.approx(0.4 - 0.0045 * 14)


def test_until_mode_termination_discards():
    handle = make_estimator(waiting_spec())
    handle.observe({"entity_id": "d", "queue_fraction": 0.0}, 10)
    history = track(10, 30, mode_at=lambda t: "TERMINATED" if t >= 18 else "PROTECTING")

    assert handle.resolve_pending(history, 30) == []
    stats = handle.get_stats()
    assert stats["discarded"] == 1 and stats["timed_out"] == 0


def test_until_mode_timeout():
    handle = make_estimator(waiting_spec())
    handle.observe({"entity_id": "d", "queue_fraction": 0.0}, 10)

    assert handle.resolve_pending(track(10, 60), 60) == []
    assert handle.pending_count == 1
    assert handle.resolve_pending(track(10, 61), 61) == []
    stats = handle.get_stats()
    assert stats["timed_out"] == 1 and stats["discarded"] == 1
    assert stats["observed"] == stats["resolved"] + stats["discarded"] + handle.pending_count


# ==================== predict / train_update ====================

def test_constant_backend_predicts_value():
    handle = constant_estimator("waiting_time", 100.0)
    snapshot = {"entity_id": "d"}
    assert handle.predict(snapshot) == 100.0

    report = handle.train_update([])
    assert handle.trained
    assert report.n_samples == 0
    assert handle.predict(snapshot) == 100.0


def test_constant_backend_ignores_data():
    handle = make_estimator(battery_spec(backend=BackendSpec("constant", value=0.3), bootstrap_value=0.3))
    x = handle.encode(SNAPSHOT, 10)
    handle.train_update([sample(x, 0.9), sample(x, 0.1)])
    assert handle.predict(SNAPSHOT, 10) == 0.3


def test_knn_single_sample():
    handle = make_estimator(battery_spec(backend=BackendSpec("knn", k=5)))
    x = handle.encode(SNAPSHOT, 40)
    handle.train_update([sample(x, 0.3)])
    assert handle.predict(SNAPSHOT, 40) == pytest.approx(0.3)


@pytest.mark.parametrize("window, expected", [(1, 10), (2, 20)])
def test_knn_replay_window(window, expected):
    handle = make_estimator(battery_spec(backend=BackendSpec("knn", k=3)), replay_window=window)
    rng = np.random.default_rng(window)
    batches = [[sample(handle.encode(SNAPSHOT, int(d)), rng.random()) for d in rng.integers(1, 201, 10)]
               for _ in range(2)]

    handle.train_update(batches[0])
    assert len(handle.model) == 10
    handle.train_update(batches[1])
    assert len(handle.model) == expected


def test_knn_needs_data():
    handle = make_estimator(battery_spec(backend=BackendSpec("knn")))
    with pytest.raises(TrainingError):
        handle.train_update([])


def test_mlp_update_and_export():
    handle = make_estimator(battery_spec(backend=BackendSpec("mlp", hidden_layers=(4,), epochs=5, batch_size=4)))
    rng = np.random.default_rng(1)
    data = []
    for _ in range(20):
        battery, delta = rng.random(), int(rng.integers(1, 201))
        snap = {"battery": battery, "mode": "PROTECTING"}
        data.append(sample(handle.encode(snap, delta), max(0.0, battery - 0.0025 * delta)))

    report = handle.train_update(data)
    assert report.n_samples == 20
    assert np.isfinite(report.final_loss)
    assert np.isfinite(handle.predict(SNAPSHOT, 10))
    assert handle.evaluate(data).mse >= 0.0

    arrays = handle.model_arrays()
    assert list(arrays["layer_sizes"]) == [handle.input_dim, 4, 1]
    assert bool(arrays["trained"])


def battery_batch(handle, seed, n=20):
    rng = np.random.default_rng(seed)
    batch = []
    for _ in range(n):
        battery, delta = rng.random(), int(rng.integers(1, 201))
        snap = {"battery": battery, "mode": "PROTECTING"}
        batch.append(sample(handle.encode(snap, delta), max(0.0, battery - 0.002 * delta)))
    return batch


def test_mlp_model_depends_only_on_window():
    backend = BackendSpec("mlp", hidden_layers=(4,), epochs=5, batch_size=4)
    a = make_estimator(battery_spec(backend=backend), replay_window=1)
    b = make_estimator(battery_spec(backend=backend), replay_window=1)
    shared = battery_batch(a, 3)

    # 第一轮数据不同，窗口为 1 时第二轮之后模型只由共同的数据决定
    a.train_update(battery_batch(a, 1))
    b.train_update(battery_batch(b, 2))
    a.train_update(shared)
    b.train_update(shared)

    for wa, wb in zip(a.model.weights + a.model.biases, b.model.weights + b.model.biases):
        assert np.array_equal(wa, wb)


def test_seed_offset_shifts_backend_seed():
    estimators = Settings().estimators
    plain = build_estimator("waiting_time", estimators)
    shifted = build_estimator("waiting_time", estimators, seed_offset=7)
    assert shifted.spec.backend.seed == plain.spec.backend.seed + 7


def test_input_feature_round_trip():
    handle = make_estimator(battery_spec(
        inputs=(FeatureSpec("battery", "battery", "minmax", (0.0, 2.0)), MODE),
    ))
    x = handle.encode({"battery": 1.5, "mode": "CHARGING"}, 10)
    assert x[0] == pytest.approx(0.75)
    assert handle.input_feature(x, "battery") == pytest.approx(1.5)
    with pytest.raises(EstimatorError):
        handle.input_feature(x, "mode")


def test_reset_run_state_keeps_model():
    handle = make_estimator(battery_spec(backend=BackendSpec("constant", value=0.5)))
    handle.train_update([])
    handle.observe(SNAPSHOT, 0, 5)
    handle.predict(SNAPSHOT, 5)

    handle.reset_run_state()
    assert handle.pending_count == 0
    assert handle.get_stats()["observed"] == 0
    assert handle.mean_prediction is None
    assert handle.trained
