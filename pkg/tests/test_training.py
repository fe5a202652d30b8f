import json

import numpy as np
import pytest

from famctl.nn import HyperParams
from famctl.objective import infidelity
from famctl.targets import evaluate_targets
from famctl.training import (
    Adam,
    NumericalError,
    TrainingConfig,
    TrainState,
    batch_gradient,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
)


def small_config(**kw):
    base = dict(
        family="zz", iterations=4, batch_size=8, eval_count=10, n_steps=8,
        hyper=HyperParams(2, 12, 1e-2, 1.0), duration_hyper=HyperParams(1, 6, 1e-2, 1.0),
        chunk_size=3,
    )
    base.update(kw)
    return TrainingConfig(**base)


def zero_network(net):
    for a in net.arrays():
        a[...] = 0.0


def test_adam_hand_step():
    p = [np.array([1.0])]
    opt = Adam([0.1], shapes=[(1,)])
    opt.step(p, [np.array([0.5])])
    # m = 0.05, v = 2.5e-4, bias corrected to 0.5 and 0.25
    assert p[0][0] == 1.0 - 0.1 * 0.5 / (0.5 + 1e-8)
    opt.step(p, [np.array([-1.0])])
    m = 0.9 * 0.05 + 0.1 * -1.0
    v = 0.999 * 2.5e-4 + 0.001 * 1.0
    expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert p[0][0] == pytest.approx(expected, rel=1e-15)


def test_adam_per_array_rates():
    p = [np.zeros(2), np.zeros(3)]
    Adam([1e-3, 1e-1], shapes=[(2,), (3,)]).step(p, [np.ones(2), np.ones(3)])
    np.testing.assert_allclose(p[0], -1e-3)
    np.testing.assert_allclose(p[1], -1e-1)


def test_zero_gradient_point_leaves_parameters_unchanged():
    state = TrainState(small_config())
    zero_network(state.model.net)
    before = [a.copy() for a in state.trainable()]
    # targets at alpha = 0 are the identity, which the zero network produces exactly
    train_step(state, np.zeros((8, 1)))
    for a, b in zip(state.trainable(), before):
        np.testing.assert_array_equal(a, b)
    assert state.history[-1][1] == pytest.approx(0.0, abs=1e-15)


def test_zero_head_evaluates_identity():
    state = TrainState(small_config(family="u1"))
    zero_network(state.model.net)
    report = evaluate(state)
    targets = evaluate_targets(state.family, report.alphas)
    np.testing.assert_allclose(report.infidelities, infidelity(np.eye(2), targets), atol=1e-14)


def test_report_statistics():
    state = TrainState(small_config())
    r = evaluate(state, count=17, seed=9)
    assert r.mean_infidelity == pytest.approx(np.mean(r.infidelities))
    assert r.std_infidelity == pytest.approx(np.std(r.infidelities))
    d = r.to_dict()
    assert d["count"] == 17 and len(d["samples"]) == 17
    lo, hi = state.family.box(inflated=False)
    assert np.all((r.alphas >= lo) & (r.alphas <= hi))


def test_iterations_zero_is_initial_evaluation():
    cfg = small_config(iterations=0)
    state, report = train(cfg)
    fresh = evaluate(TrainState(cfg))
    np.testing.assert_array_equal(report.infidelities, fresh.infidelities)
    assert state.history == []


@pytest.mark.parametrize(
    "mode,extra",
    [("fixed-T", {}), ("shared-T", {"mu": 1e-2, "duration": 2.0}), ("per-target-T", {"mu": 1e-2, "duration": 2.0})],
)
def test_batch_gradient_matches_fd(mode, extra):
    cfg = small_config(mode=mode, family="u1", **extra)
    state = TrainState(cfg)
    alphas = np.random.default_rng(0).uniform(0, np.pi, (5, 3))
    _, _, _, grads = batch_gradient(state, alphas)
    rng = np.random.default_rng(1)
    for arr, g in zip(state.trainable(), grads):
        flat = arr.reshape(-1)
        for idx in rng.choice(flat.size, size=min(2, flat.size), replace=False):
            orig = flat[idx]
            vals = []
            for s in (1e-6, -1e-6):
                flat[idx] = orig + s
                vals.append(batch_gradient(state, alphas)[0])
            flat[idx] = orig
            fd = (vals[0] - vals[1]) / 2e-6
            # the cost is O(1), so FD roundoff is ~1e-10 absolute
            assert g.reshape(-1)[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_shared_duration_stays_in_bounds():
    cfg = small_config(mode="shared-T", mu=5.0, duration=0.15, hyper=HyperParams(1, 4, 1e-3, 1.0), t_lr=0.5)
    state, _ = train(cfg)
    assert state.shared_duration[0] == cfg.t_min


def test_shared_duration_first_step_is_t_lr():
    # the first Adam step has magnitude lr whatever the gradient scale
    cfg = small_config(mode="shared-T", mu=1.0, duration=2.0, iterations=1, t_lr=0.03)
    state, _ = train(cfg)
    assert state.shared_duration[0] == pytest.approx(2.0 - 0.03, abs=1e-9)


def test_per_target_initial_duration_centred():
    cfg = small_config(mode="per-target-T", duration=2.5)
    state = TrainState(cfg)
    durations, _ = state.durations(np.linspace(0, np.pi / 2, 7)[:, None])
    assert np.all(np.abs(durations - 2.5) < 1.0)


def test_non_finite_aborts():
    state = TrainState(small_config())
    state.model.net.weights[0][0, 0] = np.nan
    with pytest.raises(NumericalError, match="iteration 0"):
        train_step(state, np.full((4, 1), 0.3))


def test_resume_is_bit_exact(tmp_path):
    full, _ = train(small_config(iterations=6, mode="per-target-T"))
    first, _ = train(small_config(iterations=3, mode="per-target-T"), out_dir=tmp_path)
    d = json.loads((tmp_path / "checkpoint.json").read_text())
    d["config"]["iterations"] = 6
    resumed, _ = train(None, state=TrainState.from_dict(json.loads(json.dumps(d))))
    a, b = full.to_dict(), resumed.to_dict()
    a["config"] = b["config"] = None
    assert a == b


def test_workers_do_not_change_results():
    cfg = small_config(iterations=3, mode="shared-T", batch_size=20)
    s1, r1 = train(cfg, workers=1)
    s8, r8 = train(cfg, workers=8)
    assert json.dumps(s1.to_dict()) == json.dumps(s8.to_dict())
    np.testing.assert_array_equal(r1.infidelities, r8.infidelities)


def test_same_seed_same_run():
    cfg = small_config(iterations=2)
    assert train(cfg)[0].to_dict() == train(cfg)[0].to_dict()


def test_outputs_written(tmp_path):
    cfg = small_config(iterations=2)
    train(cfg, out_dir=tmp_path, checkpoint_every=1)
    for name in ("checkpoint.json", "train_log.csv", "eval_report.json", "eval_samples.csv"):
        assert (tmp_path / name).exists()
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,") and len(lines) == 3
    state = load_checkpoint(tmp_path / "checkpoint.json")
    assert state.iteration == 2
    assert evaluate(state).mean_infidelity == json.loads((tmp_path / "eval_report.json").read_text())["mean_infidelity"]


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ValueError):
        load_checkpoint(bad)
    bad.write_text(json.dumps({"schema": "famctl.checkpoint", "version": 1}))
    with pytest.raises(ValueError):
        load_checkpoint(bad)
    state = TrainState(small_config())
    save_checkpoint(state, tmp_path / "ok.json")
    d = json.loads((tmp_path / "ok.json").read_text())
    d["channel_order"] = list(reversed(d["channel_order"]))
    (tmp_path / "ok.json").write_text(json.dumps(d))
    with pytest.raises(ValueError, match="channel order"):
        load_checkpoint(tmp_path / "ok.json")


@pytest.mark.parametrize(
    "kw",
    [{"eval_seed": 1, "train_seed": 1}, {"mode": "adaptive"}, {"mu": -1.0}, {"iterations": -1},
     {"mode": "shared-T", "duration": 10.0}],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        small_config(**kw)


def test_config_round_trip_and_unknown_keys():
    cfg = small_config(mode="shared-T", mu=0.01)
    assert TrainingConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainingConfig.from_dict({"family": "zz", "learning_rate": 1.0})


@pytest.mark.slow
def test_smoke_runs_trend_downward():
    # 50-iteration block means of the batch cost should not increase
    good = 0
    seeds = range(10)
    for seed in seeds:
        cfg = small_config(iterations=200, batch_size=16, n_steps=16, hyper=HyperParams(3, 32, 1e-2, 2.5),
                           init_seed=seed, train_seed=100 + seed, eval_seed=200 + seed)
        state, _ = train(cfg)
        costs = np.array(state.history)[:, 1]
        blocks = costs.reshape(4, 50).mean(axis=1)
        good += bool(np.all(np.diff(blocks) <= 0))
    assert good >= 9
