import numpy as np
import pytest

from navlab import policy
from navlab.gridsim import (NUM_ACTIONS, Heading, Pose, SensorConfig,
                            WorldConfig, generate_world, observe)
from navlab.mapper import Frame, SemanticMap, egocentric_view, new_map, update_map
from navlab.nnet import grad_check
from navlab.policy import (CORE_GROUPS, PolicyConfig, add_reward_head,
                           add_stage1_heads, drop_stage1_heads, init_params,
                           map_patches, obs_features, predict,
                           pretrain_obs_encoder, select_actions)


def small_sensor():
    return SensorConfig(num_rays=5)


def make_frames(seed=0, n=4):
    world = generate_world(seed, WorldConfig(width=16, height=16))
    pose = Pose(world.free_cells()[3], Heading.E)
    return [observe(world, pose, small_sensor()) for _ in range(n)], world, pose


def make_ego_map(cfg, seed=11):
    rng = np.random.default_rng(seed)
    ch = rng.random((cfg.num_categories + 2, cfg.map_window, cfg.map_window)) < 0.2
    ch[1] &= ~ch[0]
    return SemanticMap(ch, (0, 0), Frame.EGOCENTRIC)


class TestConfig:
    def test_dimension_properties(self, small_pcfg):
        assert small_pcfg.n_map_tokens == 9
        assert small_pcfg.patch_dim == 5 * 9
        assert small_pcfg.obs_dim == 20

    def test_patch_must_divide_window(self):
        with pytest.raises(ValueError):
            PolicyConfig(map_window=9, patch=4)

    def test_window_must_be_odd(self):
        with pytest.raises(ValueError):
            PolicyConfig(map_window=10, patch=5)


class TestInitParams:
    def test_group_names(self, small_pcfg):
        pset = init_params(small_pcfg, 0)
        assert tuple(pset.groups) == CORE_GROUPS

    def test_deterministic(self, small_pcfg):
        a = init_params(small_pcfg, 5)
        b = init_params(small_pcfg, 5)
        assert a.checksums() == b.checksums()
        assert a.checksums() != init_params(small_pcfg, 6).checksums()

    def test_staged_heads(self, small_pcfg):
        pset = init_params(small_pcfg, 0)
        add_reward_head(pset, small_pcfg, 0)
        add_stage1_heads(pset, small_pcfg, 0)
        assert "reward_head" in pset and "stage1_heads" in pset
        add_reward_head(pset, small_pcfg, 1)  # idempotent
        drop_stage1_heads(pset)
        assert "stage1_heads" not in pset


class TestFeaturization:
    def test_obs_features_layout(self, small_pcfg):
        frames, _, _ = make_frames()
        obs = frames[0]
        f = obs_features(obs, small_pcfg)
        n = small_pcfg.num_rays
        assert f.shape == (4 * n,)
        assert np.allclose(f[:n], obs.depth / obs.max_range)
        for i, hit in enumerate(obs.hits):
            if hit is None:
                assert f[n + i] == 0 and f[2 * n + i] == 0 and f[3 * n + i] == 0
            else:
                assert f[n + i] == 1.0
                assert f[2 * n + i] == pytest.approx(hit[1] / obs.max_range)
                assert f[3 * n + i] == pytest.approx(hit[0] / small_pcfg.num_categories)

    def test_obs_features_wrong_ray_count(self, small_pcfg):
        frames, _, _ = make_frames()
        bad_cfg = PolicyConfig(num_categories=3, map_window=9, patch=3,
                               num_rays=7, d=8, d_v=8, n_queries=2, hidden=12)
        with pytest.raises(ValueError):
            obs_features(frames[0], bad_cfg)

    def test_map_patches_oracle(self, small_pcfg):
        smap = make_ego_map(small_pcfg)
        x = map_patches(smap, small_pcfg)
        g = small_pcfg.map_window // small_pcfg.patch
        assert x.shape == (small_pcfg.n_map_tokens, small_pcfg.patch_dim)
        p = small_pcfg.patch
        for gy in range(g):
            for gx in range(g):
                block = smap.channels[:, gy * p:(gy + 1) * p, gx * p:(gx + 1) * p]
                assert np.allclose(x[gy * g + gx], block.astype(float).ravel())

    def test_map_patches_rejects_allocentric(self, small_pcfg):
        smap = new_map(small_pcfg.num_categories, small_pcfg.map_window,
                       small_pcfg.map_window)
        with pytest.raises(ValueError):
            map_patches(smap, small_pcfg)

    def test_map_patches_rejects_wrong_size(self, small_pcfg):
        smap = SemanticMap(np.zeros((5, 15, 15), dtype=bool), (0, 0), Frame.EGOCENTRIC)
        with pytest.raises(ValueError):
            map_patches(smap, small_pcfg)


class TestEncoders:
    def test_zero_map_tokens_differ_only_by_position(self, small_pcfg):
        pset = init_params(small_pcfg, 0)
        empty = SemanticMap(np.zeros((5, 9, 9), dtype=bool), (0, 0), Frame.EGOCENTRIC)
        tokens = policy.encode_map(empty, pset, small_pcfg)
        depos = tokens - pset["map_encoder"].tensors["pos"]
        assert np.allclose(depos, depos[0])

    def test_requires_four_frames(self, small_pcfg):
        pset = init_params(small_pcfg, 0)
        frames, _, _ = make_frames(n=3)
        with pytest.raises(ValueError):
            policy.encode_observations(frames, pset, small_pcfg)

    def test_current_frame_is_last_token_only(self, small_pcfg):
        pset = init_params(small_pcfg, 0)
        leaves = pset.leaves()
        rng = np.random.default_rng(2)
        feats = rng.random((4, small_pcfg.obs_dim))
        base = policy.encode_observations_nodes(leaves, feats).val
        bumped = feats.copy()
        bumped[3] += 0.5  # only the current frame
        out = policy.encode_observations_nodes(pset.leaves(), bumped).val
        assert np.allclose(out[:-1], base[:-1])  # pooled history untouched
        assert not np.allclose(out[-1], base[-1])

    def test_history_frame_leaves_current_token_alone(self, small_pcfg):
        pset = init_params(small_pcfg, 0)
        rng = np.random.default_rng(3)
        feats = rng.random((4, small_pcfg.obs_dim))
        base = policy.encode_observations_nodes(pset.leaves(), feats).val
        bumped = feats.copy()
        bumped[0] += 0.5
        out = policy.encode_observations_nodes(pset.leaves(), bumped).val
        assert np.allclose(out[-1], base[-1])
        assert not np.allclose(out[:-1], base[:-1])

    def test_token_count(self, small_pcfg):
        pset = init_params(small_pcfg, 0)
        frames, _, _ = make_frames()
        tokens = policy.encode_observations(frames, pset, small_pcfg)
        assert tokens.shape == (small_pcfg.n_queries + 1, small_pcfg.d)

    def test_zero_projector_makes_fusion_identity(self, small_pcfg):
        pset = init_params(small_pcfg, 0)
        pset["projector"].tensors["w"][:] = 0.0
        pset["projector"].tensors["b"][:] = 0.0
        leaves = pset.leaves()
        rng = np.random.default_rng(4)
        mt = policy.encode_map_nodes(leaves, rng.random((9, small_pcfg.patch_dim)))
        ot = policy.encode_observations_nodes(leaves, rng.random((4, small_pcfg.obs_dim)))
        fused = policy.fuse_nodes(leaves, mt, ot)
        assert np.allclose(fused.val, ot.val)


class TestPredict:
    def test_shapes_and_reward_head(self, small_pcfg):
        pset = init_params(small_pcfg, 0)
        frames, _, _ = make_frames()
        smap = make_ego_map(small_pcfg)
        logits, rtg = predict(smap, frames, 1, pset, small_pcfg)
        assert logits.shape == (small_pcfg.horizon, NUM_ACTIONS)
        assert rtg is None
        with pytest.raises(KeyError):
            predict(smap, frames, 1, pset, small_pcfg, with_reward=True)
        add_reward_head(pset, small_pcfg, 0)
        _, rtg = predict(smap, frames, 1, pset, small_pcfg, with_reward=True)
        assert isinstance(rtg, float)

    def test_goal_sensitivity(self, small_pcfg):
        pset = init_params(small_pcfg, 0)
        frames, _, _ = make_frames()
        smap = make_ego_map(small_pcfg)
        a, _ = predict(smap, frames, 1, pset, small_pcfg)
        b, _ = predict(smap, frames, 2, pset, small_pcfg)
        assert not np.allclose(a, b)

    def test_map_sensitivity(self, small_pcfg):
        pset = init_params(small_pcfg, 0)
        frames, _, _ = make_frames()
        a, _ = predict(make_ego_map(small_pcfg, 1), frames, 1, pset, small_pcfg)
        b, _ = predict(make_ego_map(small_pcfg, 2), frames, 1, pset, small_pcfg)
        assert not np.allclose(a, b)

    def test_batched_matches_single(self, small_pcfg):
        pset = init_params(small_pcfg, 0)
        rng = np.random.default_rng(8)
        patches = rng.random((3, 9, small_pcfg.patch_dim))
        feats = rng.random((3, 4, small_pcfg.obs_dim))
        goals = np.array([1, 2, 0])
        logits, _, _ = policy.forward_nodes(pset.leaves(), patches, feats,
                                            goals, small_pcfg)
        for i in range(3):
            single, _, _ = policy.forward_nodes(pset.leaves(), patches[i],
                                                feats[i], goals[i], small_pcfg)
            assert np.allclose(logits.val[i], single.val)

    def test_stage1_head_shapes(self, small_pcfg):
        pset = init_params(small_pcfg, 0)
        add_stage1_heads(pset, small_pcfg, 0)
        rng = np.random.default_rng(9)
        hidden = policy.nnet.Node(rng.random((6, small_pcfg.hidden)))
        cat, bucket, act, steer = policy.stage1_head_nodes(pset.leaves(), hidden,
                                                           small_pcfg)
        assert cat.val.shape == (6, 8, small_pcfg.num_categories + 1)
        assert bucket.val.shape == (6, 8, 4)
        assert act.val.shape == (6, NUM_ACTIONS)
        assert steer.val.shape == (6, small_pcfg.num_categories, NUM_ACTIONS)


class TestSelectActions:
    def test_greedy_tie_takes_lowest_index(self):
        logits = np.array([[1.0, 1.0, 0.0, 1.0], [0.0, 2.0, 2.0, 1.0]])
        assert select_actions(logits) == [0, 1]

    def test_greedy_shift_invariant(self):
        rng = np.random.default_rng(10)
        logits = rng.normal(size=(4, 4))
        assert select_actions(logits) == select_actions(logits + 7.0)

    def test_sample_deterministic_in_seed(self):
        rng = np.random.default_rng(11)
        logits = rng.normal(size=(4, 4))
        a = select_actions(logits, mode="sample", seed=3)
        assert a == select_actions(logits, mode="sample", seed=3)
        assert all(0 <= x < 4 for x in a)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            select_actions(np.array([[np.inf, 0.0]]))
        with pytest.raises(ValueError):
            select_actions(np.zeros((1, 4)), mode="nope")


class TestGradients:
    def test_full_forward_grad_check(self, small_pcfg):
        pset = init_params(small_pcfg, 1)
        add_reward_head(pset, small_pcfg, 1)
        rng = np.random.default_rng(12)
        patches = rng.random((2, 9, small_pcfg.patch_dim))
        feats = rng.random((2, 4, small_pcfg.obs_dim))
        goals = np.array([1, 2])

        def build(leaves):
            logits, rtg, _ = policy.forward_nodes(leaves, patches, feats, goals,
                                                  small_pcfg, with_reward=True)
            return policy.nnet.add(policy.nnet.mean(policy.nnet.square(logits)),
                                   policy.nnet.mean(policy.nnet.square(rtg)))
        report = grad_check(build, pset, samples_per_group=25)
        assert report.passed, f"max rel err {report.max_rel_err}"
        assert set(report.per_group) == set(pset.groups)


class TestPretrain:
    def test_reduces_loss_and_freezes(self, small_pcfg):
        short = pretrain_obs_encoder(init_params(small_pcfg, 0), small_pcfg,
                                     seed=0, steps=2)
        pset = init_params(small_pcfg, 0)
        final = pretrain_obs_encoder(pset, small_pcfg, seed=0, steps=120)
        assert final < short  # training actually improved reconstruction
        assert pset["obs_encoder"].frozen
        assert "obs_decoder" not in pset
        assert tuple(pset.groups) == CORE_GROUPS
