import math

import numpy as np
import pytest
import torch

from g2g.errors import CheckpointError, ConfigurationError, ContractViolationError, NonFiniteLossError
from g2g.model import SpecNet, build_g1, init_weights, network_digest
from g2g.training import (
    LOG_COLUMNS,
    ObjectiveConfig,
    PhasePlan,
    epoch_order,
    gan_losses,
    init_state,
    l1_loss,
    load_state,
    g2g_plan,
    predict,
    run_plan,
    train_step,
    triple_tensors,
)

from oracles import finite_difference_check

WIDTH = {"ngf": 8, "ndf": 8}


def test_l1_loss():
    a = torch.tensor([[1.0, -1.0], [0.5, 0.0]])
    assert float(l1_loss(a, torch.zeros(2, 2))) == pytest.approx(0.625)
    with pytest.raises(ContractViolationError):
        l1_loss(a, torch.zeros(3))


def test_gan_losses_at_zero_logits():
    d, g = gan_losses(torch.zeros(1, 1, 12, 12, dtype=torch.float64), torch.zeros(1, 1, 12, 12, dtype=torch.float64))
    assert float(d) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert float(g) == pytest.approx(math.log(2), abs=1e-12)


def test_gan_losses_shape_mismatch():
    with pytest.raises(ContractViolationError):
        gan_losses(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 12, 12))


def test_negative_lambda_rejected():
    with pytest.raises(ConfigurationError):
        ObjectiveConfig(lambda_l1=-1)


def test_g2g_plan():
    p1, p2 = g2g_plan()
    assert (p1.epochs, p1.learning_rate, p1.trainable) == (200, 1e-3, frozenset({"G1", "D1", "G2", "D2"}))
    assert (p2.epochs, p2.learning_rate, p2.trainable) == (200, 1e-6, frozenset({"G2", "D2"}))


def test_phase2_freezes_g1_and_d1(fixture_triples):
    state = init_state(seed=0, **WIDTH)
    before = {n: network_digest(state.nets[n]) for n in ("G1", "D1", "G2", "D2")}
    plan = [PhasePlan(2, 1, 1e-6, frozenset({"G2", "D2"}))]
    run_plan(state, plan, fixture_triples[:4], ObjectiveConfig())
    after = {n: network_digest(state.nets[n]) for n in before}
    assert after["G1"] == before["G1"] and after["D1"] == before["D1"]
    assert after["G2"] != before["G2"] and after["D2"] != before["D2"]


def test_logged_totals_recompose(fixture_triples):
    cfg = ObjectiveConfig(lambda_l1=100.0)
    state = run_plan(init_state(seed=1, **WIDTH), g2g_plan(1), fixture_triples[:3], cfg)
    assert len(state.history) == 6
    for row in state.history:
        for g in ("g1", "g2"):
            expected = row[f"{g}_adv"] + cfg.lambda_l1 * row[f"{g}_l1"]
            assert abs(row[f"{g}_total"] - expected) <= 1e-6 * abs(expected)


def test_lambda_zero_is_pure_adversarial(fixture_triples):
    state = init_state(seed=2, **WIDTH)
    losses = train_step(state, triple_tensors(fixture_triples[:1]), ObjectiveConfig(lambda_l1=0.0),
                        frozenset({"G1", "D1", "G2", "D2"}))
    assert losses["g1_total"] == losses["g1_adv"]
    assert losses["g2_total"] == losses["g2_adv"]


def _run_log(triples, seed):
    state = run_plan(init_state(seed=seed, **WIDTH), g2g_plan(1), triples, ObjectiveConfig())
    return [tuple(row[c] for c in LOG_COLUMNS) for row in state.history], state


def test_seeded_rerun_is_exact(fixture_triples):
    log_a, state_a = _run_log(fixture_triples[:2], seed=3)
    log_b, state_b = _run_log(fixture_triples[:2], seed=3)
    assert log_a == log_b
    assert network_digest(state_a.nets["G2"]) == network_digest(state_b.nets["G2"])
    log_c, _ = _run_log(fixture_triples[:2], seed=4)
    assert log_a != log_c


def test_epoch_order_is_seeded_permutation():
    order = epoch_order(10, 5, 1, 0)
    assert sorted(order) == list(range(10))
    assert order == epoch_order(10, 5, 1, 0)
    assert order != epoch_order(10, 5, 1, 1)


def test_resume_matches_uninterrupted(tmp_path, fixture_triples):
    data = fixture_triples[:2]
    plan = [PhasePlan(1, 2, 1e-3, frozenset({"G1", "D1", "G2", "D2"}))]
    full = run_plan(init_state(seed=6, **WIDTH), plan, data, ObjectiveConfig())

    out = tmp_path / "run"
    partial = run_plan(init_state(seed=6, **WIDTH), plan, data, ObjectiveConfig(), out_dir=out,
                       checkpoint_every=1, stop_after_epochs=1)
    assert partial.epoch == 1
    resumed = load_state(out / "ckpt_phase1_epoch1.bin", model="g2g", widths={**WIDTH, "g2_skips": True})
    resumed = run_plan(resumed, plan, data, ObjectiveConfig(), out_dir=out, checkpoint_every=1)
    for name in full.nets:
        assert network_digest(full.nets[name]) == network_digest(resumed.nets[name]), name
    assert full.history == resumed.history
    lines = (out / "loss_log.csv").read_text().splitlines()
    assert lines[0] == ",".join(LOG_COLUMNS) and len(lines) == 1 + 4


def test_load_state_with_other_widths_fails(tmp_path, fixture_triples):
    plan = [PhasePlan(1, 1, 1e-3, frozenset({"G1", "D1", "G2", "D2"}))]
    run_plan(init_state(seed=0, **WIDTH), plan, fixture_triples[:1], ObjectiveConfig(), out_dir=tmp_path)
    with pytest.raises(CheckpointError):
        load_state(tmp_path / "ckpt_phase1_epoch1.bin", widths={"ngf": 4, "ndf": 8, "g2_skips": True})


def test_gradient_check_reduced_g1():
    torch.manual_seed(0)
    spec = build_g1(ngf=1, depth=4, side=16, max_mult=2)
    net = SpecNet(spec).double()
    init_weights(net, torch.Generator().manual_seed(0), std=0.5)
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64) * 2 - 1
    target = torch.rand(1, 3, 16, 16, dtype=torch.float64) * 2 - 1
    params = [p for p in net.parameters()]
    errors = finite_difference_check(lambda: l1_loss(net(x), target), params, 20, np.random.default_rng(0))
    assert len(errors) == 20
    assert max(errors) < 1e-3


def test_non_finite_loss_aborts(fixture_triples):
    state = init_state(seed=0, **WIDTH)
    with torch.no_grad():
        next(state.nets["G1"].parameters()).fill_(float("nan"))
    with pytest.raises(NonFiniteLossError, match="phase"):
        run_plan(state, g2g_plan(1), fixture_triples[:1], ObjectiveConfig())


def test_empty_data_and_empty_plan(fixture_triples):
    state = init_state(seed=0, **WIDTH)
    with pytest.raises(ConfigurationError):
        run_plan(state, g2g_plan(1), [], ObjectiveConfig())
    digest = network_digest(state.nets["G1"])
    assert run_plan(state, [], fixture_triples, ObjectiveConfig()) is state
    assert network_digest(state.nets["G1"]) == digest and state.step == 0


def test_unknown_network_in_plan(fixture_triples):
    with pytest.raises(ConfigurationError):
        run_plan(init_state(seed=0, **WIDTH), [PhasePlan(1, 1, 1e-3, frozenset({"G3"}))],
                 fixture_triples[:1], ObjectiveConfig())


def test_pix2pix_step(fixture_triples):
    state = init_state("pix2pix", seed=0, **WIDTH)
    losses = train_step(state, triple_tensors(fixture_triples[:1]), ObjectiveConfig(), frozenset({"P2P_G", "P2P_D"}))
    assert set(losses) == {"d1", "g1_adv", "g1_l1", "g1_total"}
    pred = predict(state, fixture_triples[0].satellite)
    assert pred.g2_out is None and pred.final_mask.data.shape == (256, 256, 1)


def test_predict_outputs(fixture_triples):
    state = init_state(seed=0, **WIDTH)
    pred = predict(state, fixture_triples[0].satellite)
    assert pred.g1_out.data.shape == pred.g2_out.data.shape == (256, 256, 3)
    assert set(np.unique(pred.final_mask.data)) <= {0, 1}
    with pytest.raises(ContractViolationError):
        from g2g.raster import Raster
        predict(state, Raster(np.zeros((128, 128, 3), dtype=np.float32)))
    with pytest.raises(CheckpointError):
        predict(None, fixture_triples[0].satellite)
