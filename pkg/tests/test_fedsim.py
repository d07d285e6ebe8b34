import math

import numpy as np
import pytest

from trail.config import from_dict
from trail.datasets import gen_synthetic
from trail.errors import InvalidInputError, NumericalDivergenceError
from trail.fedsim import (
    ClientState, DegradationProfile, ModelVector, apply_uplink, build_world, cross_entropy,
    emit_observation, global_loss, init_model, inter_consensus, intra_aggregate, local_train,
    loss_and_grad, noisy_labels, run_experiment, write_outputs,
)


def finite_difference(model, X, y, h=1e-6):
    g = np.empty_like(model.w)
    for k in range(model.w.size):
        e = np.zeros_like(model.w)
        e[k] = h
        g[k] = (cross_entropy(model, X, y, model.w + e) - cross_entropy(model, X, y, model.w - e)) / (2 * h)
    return g


def random_problem(rng, kind):
    dim, C, n = int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 12))
    model = init_model(kind, dim, C, hidden=int(rng.integers(1, 5)), rng=rng)
    model = model.with_params(rng.normal(0, 0.7, model.w.size))
    return model, rng.normal(size=(n, dim)), rng.integers(0, C, n)


def gradient_error(model, X, y):
    _, g = loss_and_grad(model, X, y)
    fd = finite_difference(model, X, y)
    return np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)


@pytest.mark.parametrize("kind", ["logistic", "mlp"])
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(0 if kind == "logistic" else 1)
    for _ in range(20):
        assert gradient_error(*random_problem(rng, kind)) < 1e-5


def client_on(ds, cid=0, profile=None, model=None):
    model = model or init_model("logistic", ds.dim, ds.num_classes)
    return ClientState(cid, ds.features, ds.labels, model, profile or DegradationProfile())


def test_zero_steps_returns_init():
    ds = gen_synthetic(3, 2, 10, seed=0)
    c = client_on(ds)
    out = local_train(c, c.model, steps=0, lr=0.1)
    np.testing.assert_array_equal(out.w, c.model.w)


def test_single_full_batch_step_is_gradient_descent():
    ds = gen_synthetic(3, 2, 10, seed=1)
    rng = np.random.default_rng(2)
    init = init_model("logistic", 2, 3).with_params(rng.normal(size=9))
    c = client_on(ds, model=init)
    out = local_train(c, init, steps=1, lr=0.3, momentum=0.0, batch=10)
    _, g = loss_and_grad(init, ds.features, ds.labels)
    np.testing.assert_allclose(out.w, init.w - 0.3 * g, rtol=0, atol=1e-15)
    assert np.linalg.norm(g - finite_difference(init, ds.features, ds.labels)) <= 1e-5 * np.linalg.norm(g)


def test_training_loss_decreases():
    ds = gen_synthetic(4, 5, 400, spread=1.0, seed=3)
    c = client_on(ds)
    rng = np.random.default_rng(4)
    model, trace, checkpoints = c.model, [], []
    for _ in range(10):  # 200 steps, full-shard loss every 20
        model = local_train(c, model, steps=20, lr=0.05, momentum=0.05, batch=32, rng=rng, trace=trace)
        checkpoints.append(cross_entropy(model, ds.features, ds.labels))
    assert len(trace) == 200
    assert np.all(np.diff(checkpoints) < 0)


def test_training_is_deterministic_and_leaves_shard_alone():
    ds = gen_synthetic(4, 5, 100, seed=5)
    prof = DegradationProfile(noise_start=0.5, noise_end=0.5)
    c = client_on(ds, profile=prof)
    before = (c.features.copy(), c.labels.copy())
    a = local_train(c, c.model, 10, 0.1, rng=np.random.default_rng(6))
    b = local_train(c, c.model, 10, 0.1, rng=np.random.default_rng(6))
    np.testing.assert_array_equal(a.w, b.w)
    np.testing.assert_array_equal(c.features, before[0])
    np.testing.assert_array_equal(c.labels, before[1])


def test_divergence_names_client_and_step():
    ds = gen_synthetic(3, 2, 10, seed=0)
    c = ClientState(7, ds.features * 1e200, ds.labels, init_model("logistic", 2, 3))
    with pytest.raises(NumericalDivergenceError) as info, np.errstate(all="ignore"):
        local_train(c, c.model, steps=5, lr=1e200, batch=10)
    assert info.value.client == 7 and info.value.step is not None


def test_label_noise_kinds():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 5, 10_000)
    np.testing.assert_array_equal(noisy_labels(y, 1.0, 5, rng), (y + 1) % 5)
    np.testing.assert_array_equal(noisy_labels(y, 0.0, 5, rng, "uniform"), y)
    assert abs(np.mean(noisy_labels(y, 0.5, 5, rng) != y) - 0.5) < 0.02


def test_degradation_ramp_stays_in_range():
    p = DegradationProfile(onset=10, noise_start=0.1, noise_end=0.8, noise_slope=0.05,
                           loss_start=0.9, loss_end=0.2, loss_slope=-0.1)
    noise = [p.noise_prob(t) for t in range(100)]
    loss = [p.loss_prob(t) for t in range(100)]
    assert noise[0] == 0.1 and noise[-1] == 0.8 and np.all(np.diff(noise) >= 0)
    assert loss[0] == 0.9 and loss[-1] == 0.2
    assert all(0 <= v <= 1 for v in noise + loss)
    with pytest.raises(InvalidInputError):
        DegradationProfile(noise_end=1.5)


def test_uplink_drop_rates():
    rng = np.random.default_rng(0)
    assert all(apply_uplink(None, 0.0, rng) for _ in range(1000))
    assert not any(apply_uplink(None, 1.0, rng) for _ in range(1000))
    drops = sum(not apply_uplink(None, 0.3, rng) for _ in range(100_000))
    assert abs(drops / 100_000 - 0.3) < 0.01
    with pytest.raises(InvalidInputError):
        apply_uplink(None, 1.2, rng)


def vec(values):
    values = np.asarray(values, dtype=float)
    return ModelVector("logistic", 1, values.size // 2, values)


def test_intra_aggregate_examples():
    w = vec([0.3, -1.2, 2.0, 0.1])
    out, ok = intra_aggregate([(w, 4), (w.copy(), 9)])
    assert ok and np.array_equal(out.w, w.w)
    out, _ = intra_aggregate([(vec([0.0, 0.0]), 1), (vec([1.0, 1.0]), 3)])
    np.testing.assert_array_equal(out.w, [0.75, 0.75])


def test_weighted_means_match_compensated_summation():
    rng = np.random.default_rng(3)
    vecs = [vec(rng.normal(0, 10, 6)) for _ in range(7)]
    sizes = rng.integers(1, 1000, 7)
    total = math.fsum(sizes)
    expected = [math.fsum(n * v.w[k] for n, v in zip(sizes, vecs)) / total for k in range(6)]
    for fn in (intra_aggregate, inter_consensus):
        out, _ = fn(list(zip(vecs, sizes)))
        np.testing.assert_allclose(out.w, expected, rtol=0, atol=1e-12)


def test_nothing_delivered_keeps_previous():
    prev = vec([1.0, 2.0])
    out, ok = intra_aggregate([], prev)
    assert out is prev and not ok
    out, ok = inter_consensus([(vec([5.0, 5.0]), 0)], prev)
    assert out is prev and not ok


def test_consensus_examples():
    a, b = vec([1.0, 3.0]), vec([3.0, 7.0])
    np.testing.assert_array_equal(inter_consensus([(a, 5)])[0].w, a.w)
    np.testing.assert_array_equal(inter_consensus([(a, 5), (b, 5)])[0].w, [2.0, 5.0])


def test_global_loss_examples():
    ds = gen_synthetic(10, 3, 1000, seed=0)
    clients = [ClientState(k, ds.features[k::4], ds.labels[k::4], init_model("logistic", 3, 10)) for k in range(4)]
    uniform = init_model("logistic", 3, 10)
    assert abs(global_loss(uniform, clients) - math.log(10)) < 1e-9
    rng = np.random.default_rng(1)
    g = uniform.with_params(rng.normal(size=uniform.w.size))
    per_client = [cross_entropy(g, c.features, c.labels) for c in clients]
    assert global_loss(g, clients) == pytest.approx(np.mean(per_client), rel=0, abs=1e-12)


def test_separable_data_overfits():
    ds = gen_synthetic(2, 2, 100, spread=0.05, seed=4, separation=3.0)
    c = client_on(ds)
    model = local_train(c, c.model, 300, 1.0, batch=100)
    assert global_loss(model, [c]) < 0.01


def test_emit_observation_channels():
    ds = gen_synthetic(2, 2, 20, seed=0)
    c = client_on(ds)
    acc, deliv = emit_observation(c, c.model, delivered=True)
    assert deliv == 1.0 and 0 <= acc <= 1
    for _ in range(5):
        emit_observation(c, c.model, delivered=False)
    assert c.delivery_history[-1] == 0.0
    emit_observation(c, c.model, True)
    emit_observation(c, c.model, True)
    assert c.delivery_history[-1] == np.mean([0, 0, 0, 1, 1])
    # an unscheduled round repeats the last accuracy
    emit_observation(c, None, False)
    assert c.accuracy_history[-1] == c.accuracy_history[-2]
    assert c.delivery_history[-1] == c.delivery_history[-2]


TINY = dict(
    seed=3, clients=6, servers=2,
    dataset=dict(classes=3, dim=4, spread=1.0, test_count=100),
    partition=dict(size=30),
    training=dict(local_steps=2, aggregations=3, horizon=4, lr=0.1),
    degradation=dict(fraction=0.5, onset=2, onset_jitter=2),
    hsmm=dict(window=6, fit_every=3, max_iters=5),
    scheduler=dict(capacity=2),
)


def test_world_construction():
    world = build_world(from_dict(TINY))
    assert len(world.clients) == 6 and len(world.degrading) == 3
    assert all(c.n == 30 for c in world.clients)
    assert len(world.test) == 100


def test_experiment_replays_bit_identically(tmp_path):
    cfg = from_dict(TINY)
    a = run_experiment(cfg)
    b = run_experiment(cfg, jobs=3)
    write_outputs(a, tmp_path / "a")
    write_outputs(b, tmp_path / "b")
    for name in ("metrics.csv", "trust.csv", "models.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len(a.metrics) == 12
    assert all(0 <= m.test_acc <= 1 and m.train_loss >= 0 for m in a.metrics)
    assert a.trust and {r.round for r in a.trust} == {3, 6, 9, 12}


def test_trust_scheduler_drops_degraded_clients():
    cfg = from_dict({**TINY, "training": dict(local_steps=2, aggregations=5, horizon=8, lr=0.1),
                     "degradation": dict(fraction=0.5, onset=0, onset_jitter=0, noise_slope=0.2, loss_slope=0.1),
                     "hsmm": dict(window=20, fit_every=5, max_iters=10)})
    res = run_experiment(cfg)
    last = [r for r in res.trust if r.round == cfg.rounds]
    trust = {r.client: r.trust for r in last}
    bad = set(res.degrading)
    assert max(trust[c] for c in bad) < min(trust[c] for c in trust if c not in bad)
