import math

import numpy as np
import pytest

from navlab import demogen, nnet, policy, rewards, training
from navlab.gridsim import SensorConfig, WorldConfig, generate_world
from navlab.policy import init_params
from navlab.rewards import RewardConfig, RewardKind, WeightKind
from navlab.training import (STAGE_EPOCH_DEFAULTS, StageConfig,
                             StageOrderError, TrainingData, batch_grad_norm,
                             bc_loss_per_sample, loss_bc, loss_expectile,
                             loss_stage1, run_stage, stage3_loss_nodes)


def small_records(small_pcfg, seed=0, episodes=3):
    """A handful of labeled chunks from scripted rollouts, sized for the
    small policy config."""
    sensor = SensorConfig(num_rays=small_pcfg.num_rays)
    world = generate_world(seed, WorldConfig(width=16, height=16,
                                             num_categories=small_pcfg.num_categories))
    kinds = [demogen.PolicyKind.EXPERT, demogen.PolicyKind.FRONTIER,
             demogen.PolicyKind.NOISY]
    records = []
    for i in range(episodes):
        ep = demogen.run_policy_episode(world, 1 + i % small_pcfg.num_categories,
                                        kinds[i % 3], seed=100 + i, budget=40,
                                        sensor=sensor)
        records.extend(demogen.chunk_steps(ep, window=small_pcfg.map_window))
    rewards.label_records(records)
    return records


@pytest.fixture
def small_data(small_pcfg):
    return TrainingData.from_records(small_records(small_pcfg), small_pcfg)


class TestBCLoss:
    def test_uniform_logits(self):
        assert loss_bc(np.zeros((4, 4)), [0, 1, 2, 3]) == pytest.approx(math.log(4))

    def test_matches_logsumexp_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            logits = rng.normal(size=(4, 4)) * 3
            labels = rng.integers(0, 4, size=4)
            want = np.mean([np.log(np.exp(row).sum()) - row[l]
                            for row, l in zip(logits, labels)])
            assert loss_bc(logits, labels) == pytest.approx(want)

    def test_per_sample_matches_scalar(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(3, 4, 4))
        labels = rng.integers(0, 4, size=(3, 4))
        per = bc_loss_per_sample(nnet.as_node(logits), labels).val
        for i in range(3):
            assert per[i] == pytest.approx(loss_bc(logits[i], labels[i]))

    def test_confident_correct_prediction_near_zero(self):
        logits = np.full((4, 4), -20.0)
        logits[np.arange(4), [1, 1, 0, 3]] = 20.0
        assert loss_bc(logits, [1, 1, 0, 3]) == pytest.approx(0.0, abs=1e-9)


class TestExpectileLoss:
    def test_asymmetric_hand_values(self):
        # under-prediction (u = +1) is penalized tau, over-prediction 1-tau
        assert loss_expectile(0.0, 1.0, 0.9) == pytest.approx(0.9)
        assert loss_expectile(0.0, -1.0, 0.9) == pytest.approx(0.1)

    def test_literal_sign_flips_the_asymmetry(self):
        assert loss_expectile(0.0, 1.0, 0.9, sign="paper_literal") == pytest.approx(0.1)
        assert loss_expectile(0.0, -1.0, 0.9, sign="paper_literal") == pytest.approx(0.9)

    def test_symmetric_at_half(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            p, t = rng.normal(size=2) * 3
            assert loss_expectile(p, t, 0.5) == pytest.approx(0.5 * (t - p) ** 2)

    def test_minimizer_is_the_expectile(self):
        targets = [0.0, 0.0, 0.0, 10.0]
        grid = np.linspace(-1, 11, 2401)

        def mean_loss(tau):
            return [np.mean([loss_expectile(float(p), t, tau) for t in targets])
                    for p in grid]
        # tau = 0.5 reduces to half the squared error, minimized at the mean
        assert grid[np.argmin(mean_loss(0.5))] == pytest.approx(2.5, abs=0.01)
        # tau = 0.9 solves 0.9 * (10 - m) = 0.1 * 3m, i.e. m = 7.5
        assert grid[np.argmin(mean_loss(0.9))] == pytest.approx(7.5, abs=0.01)


class TestStage1Loss:
    def test_uniform_logits_hand_value(self):
        c1 = 4
        got = loss_stage1(np.zeros((8, c1)), np.zeros((8, 4)), np.zeros(4),
                          np.zeros((3, 4)), [0] * 8, [0] * 8, 0, [0] * 3)
        assert got == pytest.approx(8 * math.log(c1) + 8 * math.log(4)
                                    + math.log(4) + 3 * math.log(4))

    def test_perfect_heads_near_zero(self):
        cat = np.full((8, 4), -20.0)
        cat[:, 2] = 20.0
        bucket = np.full((8, 4), -20.0)
        bucket[:, 1] = 20.0
        act = np.array([-20.0, -20.0, 20.0, -20.0])
        steer = np.full((3, 4), -20.0)
        steer[:, 0] = 20.0
        got = loss_stage1(cat, bucket, act, steer, [2] * 8, [1] * 8, 2, [0] * 3)
        assert got == pytest.approx(0.0, abs=1e-8)


class TestStage3Loss:
    def test_none_weights_and_zero_lambda_reduce_to_bc(self):
        rng = np.random.default_rng(3)
        logits = nnet.as_node(rng.normal(size=(5, 4, 4)))
        labels = rng.integers(0, 4, size=(5, 4))
        cfg = StageConfig(stage=3, lam=0.0,
                          reward=RewardConfig(weight_kind=WeightKind.NONE))
        total, bc, _ = stage3_loss_nodes(logits, labels,
                                         nnet.as_node(rng.normal(size=5)),
                                         rng.normal(size=5), rng.normal(size=5), cfg)
        plain = nnet.mean(bc_loss_per_sample(logits, labels)).val
        assert total.val == pytest.approx(float(plain))

    def test_weights_follow_the_chosen_reward_kind(self):
        rng = np.random.default_rng(4)
        logits = nnet.as_node(rng.normal(size=(3, 4, 4)))
        labels = rng.integers(0, 4, size=(3, 4))
        pred = nnet.as_node(np.zeros(3))
        r = np.array([5.0, 0.0, -5.0])
        rtg = np.array([-5.0, 0.0, 5.0])
        per = bc_loss_per_sample(logits, labels).val
        for kind, values in ((RewardKind.RTG, rtg), (RewardKind.INSTANT, r)):
            cfg = StageConfig(stage=3, lam=0.0,
                              reward=RewardConfig(weight_kind=WeightKind.SOFTPLUS,
                                                  reward_kind=kind))
            total, _, _ = stage3_loss_nodes(logits, labels, pred, r, rtg, cfg)
            want = np.mean([rewards.sample_weight(v, WeightKind.SOFTPLUS) * p
                            for v, p in zip(values, per)])
            assert total.val == pytest.approx(want)

    def test_exp_weights_amplify_outliers(self):
        # one high-reward sample should dominate the exp-weighted loss
        rng = np.random.default_rng(5)
        logits = nnet.as_node(rng.normal(size=(2, 4, 4)))
        labels = rng.integers(0, 4, size=(2, 4))
        rtg = np.array([8.0, 0.0])
        cfg = StageConfig(stage=3, lam=0.0,
                          reward=RewardConfig(weight_kind=WeightKind.EXP))
        total, _, _ = stage3_loss_nodes(logits, labels, nnet.as_node(np.zeros(2)),
                                        rtg, rtg, cfg)
        per = bc_loss_per_sample(logits, labels).val
        assert total.val == pytest.approx((math.exp(8) * per[0] + per[1]) / 2)


class TestStageConfig:
    def test_epoch_defaults(self):
        assert StageConfig(stage=1).epochs == STAGE_EPOCH_DEFAULTS[1]
        assert StageConfig(stage=2).epochs == STAGE_EPOCH_DEFAULTS[2]
        assert StageConfig(stage=3, epochs=9).epochs == 9

    def test_validation(self):
        with pytest.raises(ValueError):
            StageConfig(stage=4)
        with pytest.raises(ValueError):
            StageConfig(stage=2, tau=1.0)
        with pytest.raises(ValueError):
            StageConfig(stage=2, lam=-0.1)
        with pytest.raises(ValueError):
            StageConfig(stage=2, expectile_sign="upside_down")


class TestRunStage:
    def test_stage2_trains_and_respects_freezes(self, small_pcfg, small_data):
        pset = init_params(small_pcfg, 0)
        cfg = StageConfig(stage=2, epochs=3, batch_size=16, lr=3e-3)
        report = run_stage(2, small_data, pset, cfg, small_pcfg)
        assert report.frozen_groups_stable()
        assert len(report.epochs) == 3
        assert report.epochs[-1]["bc"] < report.epochs[0]["bc"]
        # map path is frozen in stage 2
        assert pset["map_encoder"].frozen and pset["obs_encoder"].frozen
        assert not pset["action_head"].frozen

    def test_stage1_manages_temporary_heads(self, small_pcfg, small_data):
        pset = init_params(small_pcfg, 0)
        run_stage(1, small_data, pset, StageConfig(stage=1, epochs=1, batch_size=16),
                  small_pcfg)
        assert "stage1_heads" in pset
        run_stage(2, small_data, pset, StageConfig(stage=2, epochs=1, batch_size=16),
                  small_pcfg)
        assert "stage1_heads" not in pset

    def test_stage3_needs_labels(self, small_pcfg, small_data):
        unlabeled = TrainingData(small_data.packed_maps, small_data.frame_feats,
                                 small_data.goals, small_data.actions,
                                 small_data.sector_cats, small_data.sector_buckets,
                                 small_data.recent_action)
        pset = init_params(small_pcfg, 0)
        with pytest.raises(StageOrderError):
            run_stage(3, unlabeled, pset, StageConfig(stage=3, epochs=1), small_pcfg)

    def test_stage3_adds_reward_head_and_fits_it(self, small_pcfg, small_data):
        pset = init_params(small_pcfg, 0)
        cfg = StageConfig(stage=3, epochs=4, batch_size=16, lr=3e-3)
        report = run_stage(3, small_data, pset, cfg, small_pcfg)
        assert "reward_head" in pset
        assert report.frozen_groups_stable()
        assert report.epochs[-1]["rtg"] < report.epochs[0]["rtg"]

    def test_deterministic_in_seed(self, small_pcfg, small_data):
        runs = []
        for _ in range(2):
            pset = init_params(small_pcfg, 0)
            run_stage(2, small_data, pset,
                      StageConfig(stage=2, epochs=1, batch_size=16, seed=5),
                      small_pcfg)
            runs.append(pset.checksums())
        assert runs[0] == runs[1]

    def test_stage_mismatch_rejected(self, small_pcfg, small_data):
        pset = init_params(small_pcfg, 0)
        with pytest.raises(ValueError):
            run_stage(2, small_data, pset, StageConfig(stage=3), small_pcfg)


class TestBatchGradNorm:
    def test_positive_and_side_effect_free(self, small_pcfg, small_data):
        pset = init_params(small_pcfg, 0)
        pset.set_trainable(training.STAGE_TRAINABLE[2])
        before = pset.checksums()
        gn = batch_grad_norm(2, small_data, np.arange(8), pset,
                             StageConfig(stage=2), small_pcfg)
        assert gn > 0
        assert pset.checksums() == before


class TestTrainingData:
    def test_from_records_shapes(self, small_pcfg, small_data):
        n = len(small_data)
        assert small_data.frame_feats.shape == (n, 4, small_pcfg.obs_dim)
        assert small_data.actions.shape == (n, 4)
        assert small_data.sector_cats.shape == (n, 8)
        assert small_data.sector_buckets.shape == (n, 8)
        assert small_data.labeled

    def test_batch_patches_round_trip(self, small_pcfg, small_data):
        got = small_data.batch_patches([0, 2], small_pcfg)
        assert got.shape == (2, small_pcfg.n_map_tokens, small_pcfg.patch_dim)
        assert set(np.unique(got)) <= {0.0, 1.0}

    def test_stage2_loss_grad_check(self, small_pcfg, small_data):
        pset = init_params(small_pcfg, 1)
        pset.set_trainable(training.STAGE_TRAINABLE[2])
        idx = np.arange(6)
        patches = small_data.batch_patches(idx, small_pcfg)

        def build(leaves):
            logits, _, _ = policy.forward_nodes(
                leaves, patches, small_data.frame_feats[idx],
                small_data.goals[idx], small_pcfg)
            return nnet.mean(bc_loss_per_sample(logits, small_data.actions[idx]))
        report = nnet.grad_check(build, pset, samples_per_group=20)
        assert report.passed, f"max rel err {report.max_rel_err}"
