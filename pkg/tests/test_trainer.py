import math

import numpy as np
import pytest

from gba_sim.cluster import StrategyConfig
from gba_sim.datapipe import SyntheticTask, synth_pairs
from gba_sim.encoder import DualEncoder, PairBatch, encode
from gba_sim.losses import Temperature
from gba_sim.numerics import NonFiniteError, ShapeError, gaussian, l2_normalize_rows, make_rng
from gba_sim.optim import OptimizerConfig, OptimizerState, optimizer_step
from gba_sim.trainer import PairSampler, TrainConfig, evaluate_retrieval, mean_recall, train
from oracles import ranks_brute_force


class TestEncode:
    def test_identity_weights_pass_unit_rows_through(self):
        x = l2_normalize_rows(gaussian(make_rng(0), 4, 3))
        enc = DualEncoder(np.eye(3), np.eye(3))
        emb = encode(enc, PairBatch(x, x))
        assert np.allclose(emb.v_cls, x, atol=1e-15)
        assert np.allclose(emb.t_cls, x, atol=1e-15)

    def test_zero_row_errors(self):
        enc = DualEncoder(np.eye(2), np.eye(2))
        with pytest.raises(ValueError, match="zero row"):
            encode(enc, PairBatch([[0.0, 0.0]], [[1.0, 0.0]]))

    def test_outputs_unit_norm(self):
        rng = make_rng(1)
        enc = DualEncoder(gaussian(rng, 5, 3), gaussian(rng, 5, 3))
        emb = encode(enc, PairBatch(gaussian(rng, 7, 5), gaussian(rng, 7, 5)))
        assert np.allclose(np.linalg.norm(emb.v_cls, axis=1), 1.0, atol=1e-12)
        assert np.allclose(np.linalg.norm(emb.t_cls, axis=1), 1.0, atol=1e-12)

    def test_width_mismatch(self):
        enc = DualEncoder(np.eye(3), np.eye(3))
        with pytest.raises(ShapeError):
            encode(enc, PairBatch(np.ones((2, 4)), np.ones((2, 4))))


def lamb_transcription(p, g, m, v, step, lr, b1, b2, eps, wd):
    """One LAMB update written out scalar by scalar."""
    p, g, m, v = (list(map(float, a.ravel())) for a in (p, g, m, v))
    upd = []
    for i in range(len(p)):
        m[i] = b1 * m[i] + (1 - b1) * g[i]
        v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
        mhat = m[i] / (1 - b1 ** step)
        vhat = v[i] / (1 - b2 ** step)
        upd.append(mhat / (math.sqrt(vhat) + eps) + wd * p[i])
    wn = math.sqrt(sum(x * x for x in p))
    un = math.sqrt(sum(x * x for x in upd))
    ratio = wn / un if wn > 0 and un > 0 else 1.0
    return [p[i] - lr * ratio * upd[i] for i in range(len(p))], m, v


class TestOptimizer:
    def test_sgd_fixed_point(self):
        p = {"w": np.array([[1.0, -2.0]])}
        out = optimizer_step(p, {"w": np.zeros((1, 2))}, OptimizerConfig("sgd", 0.1, weight_decay=0.0))
        assert np.array_equal(out["w"], p["w"])

    def test_sgd_hand_arithmetic(self):
        out = optimizer_step({"w": np.array([[1.0]])}, {"w": np.array([[0.5]])},
                             OptimizerConfig("sgd", 0.1, weight_decay=0.0))
        assert out["w"][0, 0] == pytest.approx(0.95, abs=1e-15)

    def test_lamb_matches_transcription_over_steps(self):
        rng = make_rng(3)
        config = OptimizerConfig("lamb", 0.01, (0.9, 0.98), 1e-6, 0.05)
        p = gaussian(rng, 3, 4)
        state = OptimizerState()
        m = np.zeros(12)
        v = np.zeros(12)
        ref = p.copy()
        for step in range(1, 4):
            g = gaussian(rng, 3, 4)
            p = optimizer_step({"w": p}, {"w": g}, config, state)["w"]
            flat, m, v = lamb_transcription(ref, g, np.array(m), np.array(v), step, 0.01, 0.9, 0.98, 1e-6, 0.05)
            ref = np.array(flat).reshape(3, 4)
            assert np.allclose(p, ref, rtol=1e-13, atol=1e-15)

    def test_table8_defaults(self):
        c = OptimizerConfig()
        assert (c.kind.value, c.betas, c.eps, c.weight_decay, c.learning_rate) == \
            ("lamb", (0.9, 0.98), 1e-6, 0.05, 2e-4)

    def test_non_finite_gradients_rejected(self):
        with pytest.raises(NonFiniteError):
            optimizer_step({"w": np.ones((1, 1))}, {"w": np.array([[np.nan]])}, OptimizerConfig())


class TestRetrieval:
    def test_identical_embeddings_perfect(self):
        v = l2_normalize_rows(gaussian(make_rng(0), 12, 6))
        r = evaluate_retrieval(v, v)
        assert all(x == 1.0 for x in r.values())

    def test_positive_ranked_second(self):
        n = 10
        eye = np.eye(n)
        v = eye
        t = 0.5 * eye + 0.9 * np.roll(eye, 1, axis=1)
        sim = v @ t.T
        assert set(ranks_brute_force(sim)) == {1}
        assert set(ranks_brute_force(sim.T)) == {1}
        r = evaluate_retrieval(v, t)
        assert r["i2t_R@1"] == 0.0 and r["t2i_R@1"] == 0.0
        assert r["i2t_R@5"] == 1.0 and r["t2i_R@5"] == 1.0

    def test_matches_brute_force_on_random(self):
        rng = make_rng(4)
        v, t = gaussian(rng, 15, 3), gaussian(rng, 15, 3)
        ranks = ranks_brute_force(v @ t.T)
        r = evaluate_retrieval(v, t)
        for k in (1, 5, 10):
            assert r[f"i2t_R@{k}"] == np.mean([x < k for x in ranks])

    def test_ties_broken_by_lower_index(self):
        v = np.ones((3, 2))
        r = evaluate_retrieval(v, v, ks=(1,))
        assert r["i2t_R@1"] == pytest.approx(1 / 3)

    def test_mean_recall(self):
        assert mean_recall([100, 100, 100, 0, 0, 0]) == 50.0

    def test_truncates_k_for_small_sets(self):
        r = evaluate_retrieval(np.eye(4), np.eye(4))
        assert "i2t_R@5" not in r and "i2t_R@1" in r

    def test_rotation_invariant(self):
        rng = make_rng(5)
        v, t = gaussian(rng, 20, 4), gaussian(rng, 20, 4)
        q, _ = np.linalg.qr(gaussian(rng, 4, 4))
        assert evaluate_retrieval(v, t) == evaluate_retrieval(v @ q, t @ q)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            evaluate_retrieval(np.zeros((0, 2)), np.zeros((0, 2)))


def small_config(**kw):
    base = dict(strategy=StrategyConfig("conventional", 4, 4), world_size=4, steps=5,
                optimizer=OptimizerConfig("lamb", 0.005), seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_zero_lr_constant_loss(self):
        data = synth_pairs(SyntheticTask(16, 8, 0.01, 1))
        h = train(small_config(optimizer=OptimizerConfig("lamb", 0.0), shuffle=False), data)
        assert len(set(h.losses)) == 1

    def test_same_seed_bit_identical(self):
        data = synth_pairs(SyntheticTask(32, 8, 0.01, 1))
        a = train(small_config(strategy=StrategyConfig("gba", 2, 2, 2)), data)
        b = train(small_config(strategy=StrategyConfig("gba", 2, 2, 2)), data)
        assert a.records == b.records
        assert a.retrieval == b.retrieval

    def test_one_record_per_step(self):
        h = train(small_config(steps=7), synth_pairs(SyntheticTask(16, 8, 0.01, 1)))
        assert [r.step for r in h.records] == list(range(7))

    def test_conventional_equals_single_group_grouped(self):
        data = synth_pairs(SyntheticTask(32, 8, 0.01, 2))
        a = train(small_config(strategy=StrategyConfig("conventional", 4, 4)), data)
        b = train(small_config(strategy=StrategyConfig("grouped", 4, 4)), data)
        assert np.max(np.abs(np.array(a.losses) - np.array(b.losses))) < 1e-10

    def test_full_objective_trains(self):
        data = synth_pairs(SyntheticTask(32, 8, 0.01, 2))
        h = train(small_config(full_objective=True, steps=20), data)
        assert h.losses[-1] < h.losses[0]
        assert "w_mim" in h.model.params()

    @pytest.mark.parametrize("strategy", [StrategyConfig("conventional", 8, 8), StrategyConfig("grouped", 16, 4),
                                          StrategyConfig("gba", 16, 2, 2)], ids=lambda s: s.kind.value)
    def test_itc_only_reaches_perfect_retrieval(self, strategy):
        data = synth_pairs(SyntheticTask(256, 16, 0.01, 0))
        h = train(TrainConfig(strategy, world_size=8, steps=200, optimizer=OptimizerConfig("lamb", 0.005)), data)
        assert h.retrieval["i2t_R@1"] == 1.0 and h.retrieval["t2i_R@1"] == 1.0
        assert h.losses[-1] < h.losses[0]

    def test_sampler_cycles_deterministically(self):
        s = PairSampler(5, make_rng(0))
        first = s.take(12)
        assert sorted(first[:5]) == list(range(5))
        assert sorted(first[5:10]) == list(range(5))
        assert np.array_equal(first, PairSampler(5, make_rng(0)).take(12))

    def test_temperature_stays_clamped(self):
        data = synth_pairs(SyntheticTask(16, 8, 0.01, 1))
        h = train(small_config(optimizer=OptimizerConfig("lamb", 0.2), steps=40), data)
        assert 1e-3 - 1e-15 <= h.model.temp.tau <= 1e2
        assert isinstance(h.model.temp, Temperature)
