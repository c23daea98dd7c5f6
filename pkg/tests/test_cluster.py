import numpy as np
import pytest

from gba_sim.cluster import (
    StrategyConfig,
    all_gather,
    all_reduce_sum,
    make_topology,
    run_step,
)
from gba_sim.costmodel import CostLedger, HardwareModel, all_gather_bytes_total, step_time
from gba_sim.encoder import PairBatch, encode, encode_backward, init_encoder
from gba_sim.losses import LossWeights, itc_loss
from gba_sim.numerics import ShapeError, gaussian, make_rng
from gba_sim.trainer import random_mask
from oracles import central_diff, max_rel_error


def make_batches(seed, k, world, b, d_in, masks=False, patch=4):
    rng = make_rng(seed)
    out = []
    for _ in range(k):
        row = []
        for _ in range(world):
            img_mask = random_mask(rng, b, d_in // patch, 0.75) if masks else None
            txt_mask = random_mask(rng, b, d_in, 0.5) if masks else None
            row.append(PairBatch(gaussian(rng, b, d_in), gaussian(rng, b, d_in), img_mask, txt_mask))
        out.append(row)
    return out


def concat(batches):
    return PairBatch(np.vstack([b.x_img for b in batches]), np.vstack([b.x_txt for b in batches]))


def single_process_grads(model, raw):
    """Gradient of the contrastive loss over one batch, computed without the cluster."""
    emb = encode(model, raw)
    res = itc_loss(emb, model.temp, normalize=False)
    grads = encode_backward(model, raw, res.grads["v_cls"], res.grads["t_cls"])
    grads["log_tau"] = np.array([[res.grad_log_tau]])
    return res.value, grads


class TestTopology:
    def test_contiguous_groups(self):
        topo = make_topology(8, 4)
        assert topo.groups == ((0, 1, 2, 3), (4, 5, 6, 7))
        assert topo.num_groups == 2

    def test_single_group(self):
        assert make_topology(8, 8).groups == (tuple(range(8)),)

    def test_non_divisible(self):
        with pytest.raises(ValueError, match="3.*8"):
            make_topology(8, 3)


class TestCollectives:
    def test_gather_two_members(self):
        a, b = np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]])
        out = all_gather(make_topology(2, 2), 0, [a, b])
        for held in out:
            assert np.array_equal(held, np.array([[1.0, 2.0], [3.0, 4.0]]))

    def test_gather_single_member_logs_no_bytes(self):
        ledger = CostLedger()
        payload = np.array([[5.0, 6.0]])
        out = all_gather(make_topology(3, 1), 1, [payload], ledger)
        assert np.array_equal(out[0], payload)
        assert ledger.bytes_all_gather == 0

    def test_gather_bytes(self):
        ledger = CostLedger()
        payloads = [np.zeros((10, 8)) for _ in range(4)]
        all_gather(make_topology(4, 4), 0, payloads, ledger)
        assert ledger.bytes_all_gather == 4 * 3 * 640 == 7680
        assert ledger.collective_count["all_gather"] == 1
        assert ledger.participations["all_gather"] == 4

    def test_gather_shape_mismatch(self):
        with pytest.raises(ShapeError):
            all_gather(make_topology(2, 2), 0, [np.zeros((2, 2)), np.zeros((3, 2))])

    def test_reduce_cancellation(self):
        g = gaussian(make_rng(0), 3, 3)
        out = all_reduce_sum(make_topology(2, 1), [{"w": g}, {"w": -g}])
        assert np.all(out[0]["w"] == 0.0) and np.all(out[1]["w"] == 0.0)

    def test_reduce_single_worker(self):
        g = gaussian(make_rng(1), 2, 2)
        assert np.array_equal(all_reduce_sum(make_topology(1, 1), [{"w": g}])[0]["w"], g)

    def test_reduce_matches_sequential_sum(self):
        rng = make_rng(2)
        grads = [{"w": gaussian(rng, 3, 4)} for _ in range(4)]
        ledger = CostLedger()
        out = all_reduce_sum(make_topology(4, 2), grads, ledger)
        expected = ((grads[0]["w"] + grads[1]["w"]) + grads[2]["w"]) + grads[3]["w"]
        for held in out:
            assert np.array_equal(held["w"], expected)
        assert ledger.bytes_all_reduce == 4 * 3 * 12 * 8

    def test_reduce_shape_mismatch(self):
        with pytest.raises(ShapeError):
            all_reduce_sum(make_topology(2, 1), [{"w": np.zeros((2, 2))}, {"w": np.zeros((2, 3))}])


class TestStrategyConfig:
    def test_invariants(self):
        with pytest.raises(ValueError):
            StrategyConfig("conventional", 4, 8, 2)
        with pytest.raises(ValueError):
            StrategyConfig("grouped", 4, 4, 2)
        with pytest.raises(ValueError):
            StrategyConfig("conventional", 4, 4).validate(8)
        StrategyConfig("gba", 4, 2, 3).validate(8)

    def test_table6_samples_per_loss_are_equal(self):
        rows = [StrategyConfig("conventional", 512, 32), StrategyConfig("grouped", 1024, 16),
                StrategyConfig("gba", 1024, 8, 2)]
        assert {s.samples_per_loss for s in rows} == {16384}


class TestRunStep:
    def setup_method(self):
        self.model = init_encoder(make_rng(42), 6, 5, tau=0.1)

    def test_conventional_matches_single_process(self):
        world, b = 4, 3
        strat = StrategyConfig("conventional", b, world)
        batches = make_batches(1, 1, world, b, 6)
        res = run_step(strat, make_topology(world, world), self.model, batches)
        value, grads = single_process_grads(self.model, concat(batches[0]))
        assert abs(res.loss_value - value) < 1e-10
        for name, g in grads.items():
            assert np.max(np.abs(res.grads[name] - g)) < 1e-10

    def test_gba_full_group_is_mean_of_micro_batches(self):
        world, b = 4, 2
        strat = StrategyConfig("gba", b, world, 2)
        batches = make_batches(2, 2, world, b, 6)
        res = run_step(strat, make_topology(world, world), self.model, batches)
        _, ga = single_process_grads(self.model, concat(batches[0]))
        _, gb = single_process_grads(self.model, concat(batches[1]))
        for name in ga:
            assert np.max(np.abs(res.grads[name] - 0.5 * (ga[name] + gb[name]))) < 1e-10

    @pytest.mark.parametrize("kind,group,k", [("grouped", 2, 1), ("gba", 2, 3), ("gba", 1, 2)])
    def test_gradient_is_derivative_of_mean_group_loss(self, kind, group, k):
        world, b = 4, 2
        strat = StrategyConfig(kind, b, group, k)
        topo = make_topology(world, group)
        batches = make_batches(3, k, world, b, 6)
        res = run_step(strat, topo, self.model, batches)
        params = self.model.params()
        for name in ("w_img", "w_txt", "log_tau"):
            def objective(p, name=name):
                model = self.model.with_params({**params, name: p})
                return run_step(strat, topo, model, batches).loss_value
            numeric = central_diff(objective, params[name])
            assert max_rel_error(res.grads[name], numeric) < 1e-5

    def test_full_objective_gradient(self):
        world, b, k = 4, 2, 2
        model = init_encoder(make_rng(5), 8, 4, tau=0.2, aux=True, patch_size=4, vocab=5)
        strat = StrategyConfig("gba", b, 2, k)
        topo = make_topology(world, 2)
        batches = make_batches(4, k, world, b, 8, masks=True)
        weights = LossWeights(0.3, 0.3)
        res = run_step(strat, topo, model, batches, weights=weights)
        params = model.params()
        for name in params:
            def objective(p, name=name):
                return run_step(strat, topo, model.with_params({**params, name: p}), batches,
                                weights=weights).loss_value
            assert max_rel_error(res.grads[name], central_diff(objective, params[name])) < 1e-5

    def test_table6_gba_shape_scaled(self):
        strat = StrategyConfig("gba", 16, 2, 2)
        topo = make_topology(8, 2)
        model = init_encoder(make_rng(0), 8, 8)
        res = run_step(strat, topo, model, make_batches(6, 2, 8, 16, 8))
        assert res.ledger.participations["all_gather"] / 8 == 2
        assert res.ledger.collective_count["all_reduce"] == 1
        assert res.ledger.collective_count["all_gather"] == 2 * topo.num_groups
        assert res.ledger.bytes_all_gather == all_gather_bytes_total(strat, topo, 8)

    def test_negative_set_is_group_sized(self):
        strat = StrategyConfig("grouped", 3, 2)
        res = run_step(strat, make_topology(8, 2), self.model, make_batches(7, 1, 8, 3, 6))
        assert res.similarity_rows == {6}
        assert res.ledger.peak_resident_rows == 2 * 2 * 3

    def test_workers_agree_bitwise(self):
        strat = StrategyConfig("gba", 2, 2, 2)
        res = run_step(strat, make_topology(4, 2), self.model, make_batches(8, 2, 4, 2, 6))
        for grads in res.accumulated_grads[1:]:
            for name, g in grads.items():
                assert np.array_equal(g, res.accumulated_grads[0][name])

    def test_deterministic(self):
        strat = StrategyConfig("gba", 2, 2, 2)
        args = (strat, make_topology(4, 2), self.model)
        a = run_step(*args, make_batches(9, 2, 4, 2, 6), hw=HardwareModel())
        b = run_step(*args, make_batches(9, 2, 4, 2, 6), hw=HardwareModel())
        assert a.loss_value == b.loss_value
        assert a.ledger == b.ledger
        for name in a.grads:
            assert np.array_equal(a.grads[name], b.grads[name])

    def test_simulated_time_matches_closed_form(self):
        strat = StrategyConfig("gba", 4, 2, 2)
        topo = make_topology(4, 2)
        hw = HardwareModel(bandwidth=1e6, latency=1e-3, compute_rate=1e3)
        model = init_encoder(make_rng(1), 5, 5)
        res = run_step(strat, topo, model, make_batches(10, 2, 4, 4, 5), hw=hw)
        assert res.ledger.simulated_time == pytest.approx(step_time(strat, topo, hw, 5), rel=1e-12)

    def test_inconsistent_batches_rejected(self):
        strat = StrategyConfig("grouped", 3, 2)
        with pytest.raises(ValueError):
            run_step(strat, make_topology(4, 2), self.model, make_batches(0, 1, 4, 2, 6))
        with pytest.raises(ValueError):
            run_step(strat, make_topology(4, 2), self.model, make_batches(0, 2, 4, 3, 6))
        with pytest.raises(ValueError):
            run_step(strat, make_topology(4, 4), self.model, make_batches(0, 1, 4, 3, 6))
