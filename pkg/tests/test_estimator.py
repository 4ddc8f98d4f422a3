import numpy as np
import pytest

from diffpf import estimator
from diffpf.caseio import read_metrics
from diffpf.datagen import ScenarioConfig, generate_dataset, split_dataset
from diffpf.errors import Diverged, MissingGroundTruth, SingularJacobian, ZeroNormalizer
from diffpf.estimator import (
    DEFAULT_TERMS,
    LITERAL_TERMS,
    AdamState,
    LossSpec,
    MetricsRecord,
    TrainConfig,
    adam_step,
    loss,
    perturb_params,
    reconstruction_error,
    train,
    validation_error,
)
from diffpf.gradients import GenTargets, ParamGradient
from diffpf.network import (
    BusKind,
    admittance_matrix,
    line_admittances,
    params_from_admittances,
)
from diffpf.powerflow import PfInputBatch, compute_injections, nr_solve

from .conftest import random_grid


@pytest.fixture(scope="module")
def ieee14_data(ieee14):
    ds = generate_dataset(ieee14, ScenarioConfig(n_samples=60, seed=5, tol=1e-12))
    return split_dataset(ds, ("every_kth", 3))


@pytest.fixture(scope="module")
def case5_data(case5):
    ds = generate_dataset(case5, ScenarioConfig(n_samples=40, seed=1, tol=1e-12))
    return split_dataset(ds, ("every_kth", 2))


def test_loss_spec_parse():
    assert LossSpec.parse("default").terms == DEFAULT_TERMS
    assert LossSpec.parse("literal", 4) == LossSpec(LITERAL_TERMS, 4)
    assert LossSpec.parse("p_g, q_g").terms == {"p_g", "q_g"}
    with pytest.raises(ValueError):
        LossSpec.parse("bogus")
    with pytest.raises(ValueError):
        LossSpec(DEFAULT_TERMS, 0)


def test_loss_zero_at_reference(ieee14, ieee14_data):
    assert loss(ieee14.params, ieee14_data, 3, LossSpec(DEFAULT_TERMS, 3), ieee14.topology) < 1e-10


def test_v_g_loss_identically_zero(ieee14, ieee14_data):
    p = perturb_params(ieee14.params, 0.5, 2)
    assert loss(p, ieee14_data, 2, LossSpec({"v_g"}, 2), ieee14.topology) == 0.0


def test_loss_hand_computed_two_bus():
    topo, p = random_grid(2, 0, n_gen=1)
    inputs = PfInputBatch(v_g=[[1.02]], p=[[0.3]], q_l=np.zeros((0, 1)))
    targets = GenTargets(v=[[1.02]], theta=[[0.1]], p=[[0.25]], q=[[-0.05]])
    out = nr_solve(inputs, p, topo, 2)
    pc, _ = compute_injections(out.state(), p, topo)
    expected = (out.theta[1, 0] - 0.1) ** 2 + (out.q_g[0, 0] + 0.05) ** 2 + (pc[1, 0] - 0.25) ** 2
    got = loss(p, (inputs, targets), 2, LossSpec(DEFAULT_TERMS, 2), topo)
    assert got == pytest.approx(expected, rel=1e-14)


def test_reconstruction_error_examples(ieee14):
    ref = ieee14.params
    init = perturb_params(ref, 0.2, 0)
    topo = ieee14.topology
    assert reconstruction_error(init, ref, init, topo) == 1.0
    assert reconstruction_error(ref, ref, init, topo) == 0.0
    g0, b0 = line_admittances(init)
    g1, b1 = line_admittances(ref)
    half = params_from_admittances((g0 + g1) / 2, (b0 + b1) / 2, ref.shunt_g, ref.shunt_b)
    assert reconstruction_error(half, ref, init, topo) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ZeroNormalizer):
        reconstruction_error(init, ref, ref, topo)


def test_reconstruction_error_homogeneous(ieee14):
    ref = ieee14.params
    init = perturb_params(ref, 0.3, 4)
    topo = ieee14.topology
    g0, b0 = line_admittances(init)
    g1, b1 = line_admittances(ref)
    for c in (0.1, 0.4, 0.7, 1.0):
        p = params_from_admittances(g1 + c * (g0 - g1), b1 + c * (b0 - b1), ref.shunt_g, ref.shunt_b)
        assert reconstruction_error(p, ref, init, topo) == pytest.approx(c, rel=1e-10)


def test_validation_error_at_reference(ieee14, ieee14_data):
    assert validation_error(ieee14.params, ieee14_data, 3, ieee14.topology) < 1e-10


def test_validation_error_single_offset(ieee14, ieee14_data):
    one = ieee14_data.subset([0])
    delta = 1e-3
    one.hidden_v = one.hidden_v.copy()
    one.hidden_v[2, 0] += delta
    e = validation_error(ieee14.params, one, 6, ieee14.topology)
    assert e == pytest.approx(delta ** 2 / 14, rel=1e-8)


def test_validation_error_needs_ground_truth(ieee14, ieee14_data):
    blind = ieee14_data.subset(np.arange(5))
    blind.hidden_v = blind.hidden_theta = None
    with pytest.raises(MissingGroundTruth):
        validation_error(ieee14.params, blind, 3, ieee14.topology)


def _adam_params():
    topo, p = random_grid(3, 0, extra_lines=0)
    return p.with_trainable({"gamma"})


def test_adam_first_step_magnitude_is_lr():
    p = _adam_params()
    cfg = TrainConfig(lr=1e-3)
    state, q = adam_step(AdamState(), p, ParamGradient(d_gamma=np.array([0.3, -2.0])), cfg)
    np.testing.assert_allclose(q.gamma - p.gamma, [-1e-3, 1e-3], rtol=1e-6)
    assert state.t == 1
    assert np.array_equal(q.beta, p.beta)


def test_adam_zero_gradient():
    p = _adam_params()
    cfg = TrainConfig(lr=1e-3)
    state, p1 = adam_step(AdamState(), p, ParamGradient(d_gamma=np.array([1.0, 1.0])), cfg)
    state2, p2 = adam_step(state, p1, ParamGradient(d_gamma=np.zeros(2)), cfg)
    # moments decay but remain nonzero so the update continues in the old direction
    np.testing.assert_allclose(state2.m["gamma"], 0.9 * state.m["gamma"])
    np.testing.assert_allclose(state2.u["gamma"], 0.999 * state.u["gamma"])
    state3, p3 = adam_step(AdamState(), p, ParamGradient(d_gamma=np.zeros(2)), cfg)
    assert np.array_equal(p3.gamma, p.gamma)


def test_adam_scale_invariance_first_step():
    p = _adam_params()
    _, q = adam_step(AdamState(), p, ParamGradient(d_gamma=np.array([0.01, 0.1])), TrainConfig())
    d = np.abs(q.gamma - p.gamma)
    assert d[0] == pytest.approx(d[1], rel=1e-5)


def test_perturb_params_seeded(ieee14):
    a = perturb_params(ieee14.params, 0.2, 7)
    b = perturb_params(ieee14.params, 0.2, 7)
    c = perturb_params(ieee14.params, 0.2, 8)
    assert np.array_equal(a.gamma, b.gamma) and not np.array_equal(a.gamma, c.gamma)
    assert np.array_equal(a.shunt_b, ieee14.params.shunt_b)


def test_train_from_optimum_stays(case5, case5_data):
    # n=6 removes the truncation bias that would otherwise give Adam a direction to move in
    cfg = TrainConfig(epochs=100, batch_size=4, record_elapsed=False, n=6)
    params, hist = train(case5_data, case5.topology, case5.params, cfg)
    assert len(hist) == 100
    assert max(r.loss for r in hist) < 1e-9
    inc = case5.topology.incidence
    drift = np.linalg.norm(admittance_matrix(params, inc) - admittance_matrix(case5.params, inc))
    assert drift < 1e-3 * np.linalg.norm(admittance_matrix(case5.params, inc))


def test_train_deterministic(case5, case5_data, tmp_path):
    init = perturb_params(case5.params, 0.2, 0)
    cfg = TrainConfig(epochs=15, batch_size=4, record_elapsed=False, eval_every=5)
    p1, h1 = train(case5_data, case5.topology, init, cfg, case5.params, tmp_path / "a.csv")
    p2, h2 = train(case5_data, case5.topology, init, cfg, case5.params, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert np.array_equal(p1.gamma, p2.gamma) and np.array_equal(p1.beta, p2.beta)
    rows = read_metrics(tmp_path / "a.csv")
    assert len(rows) == 15
    assert [r["valid_err"] is not None for r in rows].count(True) == 3
    assert all(r["elapsed_s"] is None for r in rows)
    assert rows[0]["are"] == pytest.approx(h1[0].are)


def test_train_reduces_loss(case5, case5_data):
    init = perturb_params(case5.params, 0.2, 1)
    cfg = TrainConfig(epochs=300, batch_size=4, lr=1e-2, record_elapsed=False)
    _, hist = train(case5_data, case5.topology, init, cfg, case5.params)
    assert hist[-1].loss < 0.1 * hist[0].loss
    assert np.isfinite(hist[-1].valid_err)


def test_full_batch_one_step_per_epoch(case5, case5_data, monkeypatch):
    calls = []
    real = estimator.adam_step

    def counting(*a):
        calls.append(1)
        return real(*a)

    monkeypatch.setattr(estimator, "adam_step", counting)
    n_train = len(case5_data.indices("train"))
    cfg = TrainConfig(epochs=7, batch_size=n_train, record_elapsed=False)
    _, hist = train(case5_data, case5.topology, case5.params, cfg)
    assert len(calls) == 7 and len(hist) == 7


def test_train_rejects_oversized_batch(case5, case5_data):
    with pytest.raises(ValueError):
        train(case5_data, case5.topology, case5.params, TrainConfig(epochs=1, batch_size=1000))


def test_train_singular_context(case5, case5_data):
    e = case5.topology.n_line
    bad = case5.params.with_groups(gamma=np.full(e, -800.0), beta=np.full(e, -800.0),
                                   shunt_g=np.zeros(5), shunt_b=np.zeros(5))
    with pytest.raises(SingularJacobian, match="epoch 0, batch 0"):
        train(case5_data, case5.topology, bad, TrainConfig(epochs=2, batch_size=4))


def test_train_diverged(case5, case5_data):
    init = perturb_params(case5.params, 0.2, 0)
    # a factor below one makes the very first epoch count as divergence
    cfg = TrainConfig(epochs=5, batch_size=4, diverge_factor=1e-3)
    with pytest.raises(Diverged):
        train(case5_data, case5.topology, init, cfg)


def test_are_rise_detector():
    hist = [MetricsRecord(i, 1.0 - 0.01 * i, are=0.5 + 0.01 * abs(i - 5)) for i in range(12)]
    assert not estimator._are_rising(hist[:6], 5)
    assert estimator._are_rising(hist, 5)


def test_stop_on_are_rise_evaluates_final_epoch(case5, case5_data):
    init = perturb_params(case5.params, 0.2, 0)
    cfg = TrainConfig(epochs=50, batch_size=4, lr=5e-2, stop_on_are_rise=True, are_window=1,
                      eval_every=1000, record_elapsed=False, n=1)
    _, hist = train(case5_data, case5.topology, init, cfg, case5.params)
    assert hist[-1].valid_err is not None
    if len(hist) < 50:
        assert hist[-1].are > hist[-2].are
