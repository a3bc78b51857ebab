import math
from dataclasses import replace

import numpy as np
import pytest

from srcpath import tensor as T
from srcpath.episode import Episode
from srcpath.model import ModelConfig, init_params, roll_path
from srcpath.simulator import make_world
from srcpath.training import (
    SGD,
    CandidateSource,
    TrainConfig,
    bandit_sanity,
    episode_rng,
    full_loss_gradcheck,
    kt_loss,
    learning_rate,
    policy_loss,
    records_summary,
    sample_episode,
    total_loss,
    train,
    write_records_csv,
)


def small(seed=0, beta=1, dim=4):
    cfg = ModelConfig(8, embed_dim=dim, lstm_hidden=dim, score_dim=dim, dropout_rate=0.0)
    p = init_params(cfg, np.random.default_rng(seed))
    eps = [Episode([(1, 0.3)], [0, 2, 4, 6, 7], [2], 3), Episode([], [1, 3, 4, 5, 6], [5, 0], 3)]
    sample = roll_path(eps, p, cfg, "sample", np.random.default_rng(seed))
    return cfg, p, eps, sample


class TestLosses:
    def test_zero_reward(self):
        _, _, _, s = small()
        np.testing.assert_array_equal(policy_loss(s.step_logprobs, [0.0, 0.0]).value, 0.0)

    def test_two_halves(self):
        lp = T.constant(np.log([[0.5, 0.5]]))
        assert policy_loss(lp, [1.0]).value[0] == pytest.approx(2 * math.log(2), abs=1e-15)

    def test_baseline_shifts_reward(self):
        lp = T.constant(np.log([[0.5, 0.25]]))
        assert policy_loss(lp, [0.7], 0.2).value[0] == pytest.approx(-0.5 * math.log(0.125), abs=1e-15)

    def test_kt_half(self):
        preds = T.constant(np.full((1, 20), 0.5))
        y = (np.arange(20) % 2).astype(float)
        assert kt_loss(preds, y).value[0] == pytest.approx(20 * math.log(2), abs=1e-12)

    def test_kt_perfect_hard_labels(self):
        preds = T.constant(np.array([[1 - T.EPS, T.EPS]]))
        assert kt_loss(preds, [1.0, 0.0]).value[0] == pytest.approx(0.0, abs=1e-6)

    def test_kt_scalar(self):
        expected = -(0.3 * math.log(0.8) + 0.7 * math.log(0.2))
        assert kt_loss(T.constant([[0.8]]), [0.3]).value[0] == pytest.approx(expected, abs=1e-12)

    def test_kt_shape_mismatch(self):
        with pytest.raises(ValueError):
            kt_loss(T.constant(np.full((1, 3), 0.5)), [0.1, 0.2])

    def test_beta_additivity(self):
        _, p, _, s = small()
        r, y = np.array([0.4, 0.1]), np.full((2, 3), 0.3)
        l0, parts0 = total_loss(s, r, y, p, beta=0, l2=1e-3)
        l1, parts1 = total_loss(s, r, y, p, beta=1, l2=1e-3)
        pg = float(np.mean(policy_loss(s.step_logprobs, r).value))
        assert float(l0.value) == pg + parts0["l2"]
        assert float(l1.value) - pg - parts1["l2"] == pytest.approx(float(np.mean(kt_loss(s.kt_preds, y).value)), abs=1e-12)

    def test_kt_head_disconnected_without_beta(self):
        _, p, _, s = small()
        loss, _ = total_loss(s, np.array([0.4, 0.1]), np.full((2, 3), 0.3), p, beta=0, l2=0.0)
        p.zero_grad()
        loss.backward()
        for name in ("kt_w1", "kt_b1", "kt_w2", "kt_b2"):
            np.testing.assert_array_equal(p[name].grad, 0.0)

    def test_kt_head_gets_only_weight_decay(self):
        _, p, _, s = small()
        loss, _ = total_loss(s, np.array([0.4, 0.1]), None, p, beta=0, l2=1e-3)
        p.zero_grad()
        loss.backward()
        np.testing.assert_allclose(p["kt_w1"].grad, 2e-3 * p["kt_w1"].value, rtol=0, atol=1e-18)

    def test_full_gradcheck(self):
        report = full_loss_gradcheck(seed=1)
        assert report["max_rel_error"] < 1e-4


class TestOptimizationStep:
    def test_step_raises_sampled_path_probability(self):
        cfg = ModelConfig(2, embed_dim=4, lstm_hidden=4, score_dim=4, dropout_rate=0.0)
        p = init_params(cfg, np.random.default_rng(0))
        ep = Episode([], [0, 1], [1], 1)
        s = roll_path(ep, p, cfg, "sample", np.random.default_rng(3))
        before = float(s.step_probs.value[0, 0])
        loss, _ = total_loss(s, np.array([0.8]), None, p, beta=0)
        p.zero_grad()
        loss.backward()
        SGD(p).step(0.1)
        chosen = s.positions[0, 0]
        after = roll_path(ep, p, cfg, "greedy").distributions[0, 0, chosen]
        assert after > before

    def test_learning_rate_endpoints(self):
        cfg = TrainConfig(epochs=300)
        assert learning_rate(0, cfg) == 1e-3
        assert learning_rate(299, cfg) == pytest.approx(1e-5, rel=1e-12)
        mid = learning_rate(150, cfg)
        assert 1e-5 < mid < 1e-3

    def test_bandit_converges(self):
        out = bandit_sanity(0, steps=300)
        assert out["best_prob"] >= 0.95


class TestTrain:
    def setup_method(self):
        self.world = make_world("prereq_chain", 8, seed=0)
        self.model = ModelConfig(8, embed_dim=4, lstm_hidden=4, score_dim=4)
        self.cfg = TrainConfig(epochs=3, batch_size=8, path_length=3, candidate_size=5, eval_episodes=4, seed=2)

    def test_zero_epochs_keeps_params(self):
        p = init_params(self.model, episode_rng(0, 0))
        snap = {k: v.copy() for k, v in p.arrays().items()}
        out = train(self.model, self.world, replace(self.cfg, epochs=0), params=p)
        assert out.records == []
        for k, v in out.params.arrays().items():
            np.testing.assert_array_equal(v, snap[k])

    def test_deterministic(self):
        a = train(self.model, self.world, self.cfg)
        b = train(self.model, self.world, self.cfg)
        assert [r.epoch for r in a.records] == [r.epoch for r in b.records]
        for ra, rb in zip(a.records, b.records):
            assert (ra.mean_sampled_ET, ra.greedy_ET, ra.loss_pg, ra.loss_kt, ra.grad_norm) == (
                rb.mean_sampled_ET,
                rb.greedy_ET,
                rb.loss_pg,
                rb.loss_kt,
                rb.grad_norm,
            )
        for k, v in a.params.arrays().items():
            np.testing.assert_array_equal(v, b.params.arrays()[k])

    def test_rollouts_and_records(self, tmp_path):
        out = train(self.model, self.world, replace(self.cfg, rollouts_per_episode=4, baseline_subtraction=True))
        assert len(out.records) == 3 and all(np.isfinite(r.loss_pg) for r in out.records)
        write_records_csv(tmp_path / "log.csv", out.records)
        assert (tmp_path / "log.csv").read_text().splitlines()[0].startswith("epoch,mean_sampled_ET")
        assert records_summary(out.records)["epochs"] == 3

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(beta=2)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=10, rollouts_per_episode=3)
        with pytest.raises(ValueError):
            TrainConfig(scenario=4)


class TestEpisodes:
    def test_fixed_scenario(self):
        w = make_world("prereq_chain", 12, seed=1)
        src = CandidateSource(12, 0, 4, np.random.default_rng(0), 6)
        eps = [sample_episode(w, src, np.random.default_rng(k)) for k in range(20)]
        assert len({ep.candidates for ep in eps}) == 1

    def test_partition_scenario(self):
        src = CandidateSource(14, 1, 4, np.random.default_rng(0))
        flat = [c for g in src.groups for c in g]
        assert len(flat) == len(set(flat)) == 12
        w = make_world("prereq_chain", 14, seed=1)
        for k in range(20):
            assert sample_episode(w, src, np.random.default_rng(k)).candidates in src.groups

    def test_fresh_and_full_scenarios(self):
        w = make_world("prereq_chain", 10, seed=1)
        src = CandidateSource(10, 2, 3, np.random.default_rng(0), 5)
        eps = [sample_episode(w, src, np.random.default_rng(k)) for k in range(20)]
        assert len({ep.candidates for ep in eps}) > 1 and all(len(ep.candidates) == 5 for ep in eps)
        full = CandidateSource(10, 3, 3, np.random.default_rng(0))
        assert sample_episode(w, full, np.random.default_rng(0)).candidates == tuple(range(10))

    def test_first_target_in_candidates(self):
        w = make_world("prereq_chain", 10, seed=1)
        src = CandidateSource(10, 2, 3, np.random.default_rng(0), 4)
        for k in range(50):
            ep = sample_episode(w, src, np.random.default_rng(k))
            assert ep.targets[0] in ep.candidates and 1 <= len(ep.targets) <= 3

    def test_bad_scenario(self):
        with pytest.raises(ValueError):
            CandidateSource(10, 5, 3, np.random.default_rng(0))
        with pytest.raises(ValueError):
            CandidateSource(10, 2, 6, np.random.default_rng(0), 4)
