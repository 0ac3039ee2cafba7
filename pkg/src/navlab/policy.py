"""The fusion policy: patch map encoder, per-frame observation encoder with
a learned-query history pooler, map-observation cross-attention, a small
trunk, and action / reward output heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnet
from .gridsim import NUM_ACTIONS, Observation
from .mapper import Frame, SemanticMap
from .nnet import Node, ParamGroup, ParamSet


@dataclass
class PolicyConfig:
    num_categories: int = 6
    map_window: int = 15     # egocentric window M_e, odd
    patch: int = 5           # map patch edge; must divide map_window
    num_rays: int = 15
    d: int = 32              # model width
    d_v: int = 32            # attention value width
    n_queries: int = 4       # learned history queries
    hidden: int = 64         # trunk width
    horizon: int = 4         # predicted actions per step
    num_frames: int = 4      # history + current observation frames

    def __post_init__(self):
        if self.map_window % self.patch != 0:
            raise ValueError("map window must be divisible by the patch size")
        if self.map_window % 2 != 1:
            raise ValueError("map window must be odd")

    @property
    def n_map_tokens(self) -> int:
        return (self.map_window // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return (self.num_categories + 2) * self.patch * self.patch

    @property
    def obs_dim(self) -> int:
        return 4 * self.num_rays


# core groups in creation order; reward_head and stage1_heads are staged in
CORE_GROUPS = ("map_encoder", "obs_encoder", "history_pooler", "fusion",
               "projector", "goal_embedding", "trunk", "action_head")


def init_params(cfg: PolicyConfig, seed: int) -> ParamSet:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x501C]))

    def w(*shape):
        fan_in = shape[0] if len(shape) > 1 else shape[0]
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

    def z(*shape):
        return np.zeros(shape)

    d, dv, h = cfg.d, cfg.d_v, cfg.hidden
    pset = ParamSet()
    pset.add(ParamGroup("map_encoder", {
        "w": w(cfg.patch_dim, d), "b": z(d),
        "pos": rng.normal(0.0, 0.1, size=(cfg.n_map_tokens, d)),
    }))
    pset.add(ParamGroup("obs_encoder", {
        "w1": w(cfg.obs_dim, d), "b1": z(d), "w2": w(d, d), "b2": z(d),
    }))
    pset.add(ParamGroup("history_pooler", {
        "queries": rng.normal(0.0, 0.5, size=(cfg.n_queries, d)),
        "wq": w(d, d), "wk": w(d, d), "wv": w(d, d),
        "tpos": rng.normal(0.0, 0.1, size=(cfg.num_frames - 1, d)),
    }))
    pset.add(ParamGroup("fusion", {"wq": w(d, d), "wk": w(d, d), "wv": w(d, dv)}))
    pset.add(ParamGroup("projector", {"w": w(dv, d), "b": z(d)}))
    pset.add(ParamGroup("goal_embedding", {
        "table": rng.normal(0.0, 1.0, size=(cfg.num_categories + 1, d)),
    }))
    pset.add(ParamGroup("trunk", {
        "w1": w((cfg.n_queries + 1 + cfg.n_map_tokens + 1) * d, h), "b1": z(h),
        "w2": w(h, h), "b2": z(h),
    }))
    pset.add(ParamGroup("action_head", {"w": w(h, cfg.horizon * NUM_ACTIONS),
                                        "b": z(cfg.horizon * NUM_ACTIONS)}))
    return pset


def add_reward_head(pset: ParamSet, cfg: PolicyConfig, seed: int) -> None:
    if "reward_head" in pset:
        return
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    pset.add(ParamGroup("reward_head", {
        "w": rng.normal(0.0, 1.0 / np.sqrt(cfg.hidden), size=(cfg.hidden, 1)),
        "b": np.zeros(1),
    }))


def add_stage1_heads(pset: ParamSet, cfg: PolicyConfig, seed: int) -> None:
    if "stage1_heads" in pset:
        return
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57A6]))
    h, c1 = cfg.hidden, cfg.num_categories + 1

    def w(*shape):
        return rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)

    pset.add(ParamGroup("stage1_heads", {
        "w_cat": w(h, 8 * c1), "b_cat": np.zeros(8 * c1),
        "w_bucket": w(h, 8 * 4), "b_bucket": np.zeros(8 * 4),
        "w_act": w(h, NUM_ACTIONS), "b_act": np.zeros(NUM_ACTIONS),
        "w_steer": w(h, cfg.num_categories * NUM_ACTIONS),
        "b_steer": np.zeros(cfg.num_categories * NUM_ACTIONS),
    }))


def drop_stage1_heads(pset: ParamSet) -> None:
    if "stage1_heads" in pset:
        pset.remove("stage1_heads")


# -- input featurization ------------------------------------------------------

def obs_features(obs: Observation, cfg: PolicyConfig) -> np.ndarray:
    """Per-ray (depth, hit flag, hit distance, hit category) stacked into
    one normalized feature vector."""
    n = cfg.num_rays
    if obs.depth.shape[0] != n:
        raise ValueError(f"expected {n} rays, got {obs.depth.shape[0]}")
    feats = np.zeros(4 * n)
    rng_max = obs.max_range
    feats[0:n] = obs.depth / rng_max
    for i, hit in enumerate(obs.hits):
        if hit is not None:
            cat, dist = hit
            feats[n + i] = 1.0
            feats[2 * n + i] = dist / rng_max
            feats[3 * n + i] = cat / cfg.num_categories
    return feats


def map_patches(smap: SemanticMap, cfg: PolicyConfig) -> np.ndarray:
    """Flatten an egocentric map into non-overlapping patch vectors,
    channels interleaved per patch: (n_map_tokens, patch_dim)."""
    if smap.frame is not Frame.EGOCENTRIC:
        raise ValueError("policy input maps must be egocentric")
    k, m, m2 = smap.channels.shape
    if m != cfg.map_window or m2 != cfg.map_window:
        raise ValueError(f"expected {cfg.map_window}x{cfg.map_window} map, got {m}x{m2}")
    p = cfg.patch
    g = m // p
    x = smap.channels.astype(np.float64).reshape(k, g, p, g, p)
    x = x.transpose(1, 3, 0, 2, 4).reshape(g * g, k * p * p)
    return x


# -- batched forward pass -----------------------------------------------------

def encode_map_nodes(leaves, patches: np.ndarray) -> Node:
    """patches (..., n_m, patch_dim) -> tokens (..., n_m, d)."""
    enc = leaves["map_encoder"]
    tokens = nnet.affine(nnet.as_node(patches, "map_patches"),
                         enc["w"], enc["b"], name="map_embed")
    return nnet.add(tokens, enc["pos"], name="map_pos")


def _encode_frames(leaves, feats: np.ndarray, name: str) -> Node:
    enc = leaves["obs_encoder"]
    x = nnet.tanh(nnet.affine(nnet.as_node(feats, name), enc["w1"], enc["b1"],
                              name=name + "_l1"), name=name + "_t1")
    return nnet.affine(x, enc["w2"], enc["b2"], name=name + "_l2")


def encode_observations_nodes(leaves, frame_feats: np.ndarray) -> Node:
    """frame_feats (..., 4, obs_dim): 3 history frames then the current
    frame -> (..., n_queries + 1, d) observation tokens."""
    if frame_feats.shape[-2] != 4:
        raise ValueError("exactly 4 observation frames are required")
    pool = leaves["history_pooler"]
    hist = _encode_frames(leaves, frame_feats[..., :3, :], "hist_frames")
    cur = _encode_frames(leaves, frame_feats[..., 3:, :], "cur_frame")
    hist = nnet.add(hist, pool["tpos"], name="hist_tpos")
    pooled = nnet.cross_attention(pool["queries"], hist, hist,
                                  pool["wq"], pool["wk"], pool["wv"],
                                  name="history_pool")
    if pooled.val.ndim < cur.val.ndim:  # unbatched queries against batched keys
        pooled = nnet.reshape(pooled, cur.val.shape[:-2] + pooled.val.shape,
                              name="pool_expand")
    return nnet.concat([pooled, cur], axis=-2, name="obs_tokens")


def fuse_nodes(leaves, map_tokens: Node, obs_tokens: Node) -> Node:
    """Cross-attend observations (query) over map tokens (key/value), then
    project back to model width with a residual connection."""
    fus, proj = leaves["fusion"], leaves["projector"]
    fused = nnet.cross_attention(obs_tokens, map_tokens, map_tokens,
                                 fus["wq"], fus["wk"], fus["wv"], name="fusion")
    projected = nnet.affine(fused, proj["w"], proj["b"], name="project")
    return nnet.add(projected, obs_tokens, name="fuse_residual")


def trunk_nodes(leaves, projected: Node, map_tokens: Node,
                goal_ids: np.ndarray) -> Node:
    """Fused tokens are concatenated rather than averaged so the trunk
    keeps per-token detail, and the raw map tokens come along as a skip
    path that does not have to squeeze through the attention softmax."""
    tr = leaves["trunk"]
    lead = projected.val.shape[:-2]
    tokens = nnet.reshape(projected, lead + (-1,), name="token_cat")
    map_flat = nnet.reshape(map_tokens, lead + (-1,), name="map_skip")
    goal = nnet.gather_rows(leaves["goal_embedding"]["table"],
                            np.asarray(goal_ids, dtype=np.int64), name="goal_embed")
    x = nnet.concat([tokens, map_flat, goal], axis=-1, name="trunk_in")
    h = nnet.tanh(nnet.affine(x, tr["w1"], tr["b1"], name="trunk_l1"), name="trunk_t1")
    return nnet.tanh(nnet.affine(h, tr["w2"], tr["b2"], name="trunk_l2"), name="trunk_t2")


def predict_nodes(leaves, hidden: Node, cfg: PolicyConfig,
                  with_reward: bool = False):
    """Trunk hidden state -> (action logits (..., horizon, V), rtg or None)."""
    ah = leaves["action_head"]
    logits = nnet.affine(hidden, ah["w"], ah["b"], name="action_logits")
    logits = nnet.reshape(logits, hidden.val.shape[:-1] + (cfg.horizon, NUM_ACTIONS),
                          name="logits_rows")
    rtg = None
    if with_reward:
        if "reward_head" not in leaves:
            raise KeyError("reward head not initialized")
        rh = leaves["reward_head"]
        rtg = nnet.reshape(nnet.affine(hidden, rh["w"], rh["b"], name="rtg_head"),
                           hidden.val.shape[:-1], name="rtg_scalar")
    return logits, rtg


def forward_nodes(leaves, patches, frame_feats, goal_ids, cfg: PolicyConfig,
                  with_reward: bool = False):
    """Full batched forward pass; returns (logits, rtg, trunk_hidden)."""
    map_tokens = encode_map_nodes(leaves, patches)
    obs_tokens = encode_observations_nodes(leaves, frame_feats)
    projected = fuse_nodes(leaves, map_tokens, obs_tokens)
    hidden = trunk_nodes(leaves, projected, map_tokens, goal_ids)
    logits, rtg = predict_nodes(leaves, hidden, cfg, with_reward=with_reward)
    return logits, rtg, hidden


def stage1_head_nodes(leaves, hidden: Node, cfg: PolicyConfig):
    """Temporary map-understanding heads: per-sector category logits,
    per-sector free-space bucket logits, most-recent-action logits, and
    per-category steering logits (the scripted demonstrator's action for
    every possible goal category, which forces the frozen-later map
    encoder to preserve the cells and half-plane masses steering needs)."""
    sh = leaves["stage1_heads"]
    c1 = cfg.num_categories + 1
    lead = hidden.val.shape[:-1]
    cat = nnet.reshape(nnet.affine(hidden, sh["w_cat"], sh["b_cat"], name="s1_cat"),
                       lead + (8, c1), name="s1_cat_rows")
    bucket = nnet.reshape(nnet.affine(hidden, sh["w_bucket"], sh["b_bucket"],
                                      name="s1_bucket"), lead + (8, 4),
                          name="s1_bucket_rows")
    act = nnet.affine(hidden, sh["w_act"], sh["b_act"], name="s1_act")
    steer = nnet.reshape(nnet.affine(hidden, sh["w_steer"], sh["b_steer"],
                                     name="s1_steer"),
                         lead + (cfg.num_categories, NUM_ACTIONS),
                         name="s1_steer_rows")
    return cat, bucket, act, steer


# -- convenience single-sample wrappers (numpy in, numpy out) -----------------

def encode_map(smap: SemanticMap, pset: ParamSet, cfg: PolicyConfig) -> np.ndarray:
    return encode_map_nodes(pset.leaves(), map_patches(smap, cfg)).val


def encode_observations(frames, pset: ParamSet, cfg: PolicyConfig) -> np.ndarray:
    if len(frames) != 4:
        raise ValueError("exactly 4 observation frames are required")
    feats = np.stack([obs_features(o, cfg) for o in frames])
    return encode_observations_nodes(pset.leaves(), feats).val


def predict(smap: SemanticMap, frames, goal_id: int, pset: ParamSet,
            cfg: PolicyConfig, with_reward: bool = False):
    """Single-step inference. Returns (logits (horizon, V), rtg or None)."""
    feats = np.stack([obs_features(o, cfg) for o in frames])
    logits, rtg, _ = forward_nodes(pset.leaves(), map_patches(smap, cfg), feats,
                                   np.int64(goal_id), cfg, with_reward=with_reward)
    return logits.val, (None if rtg is None else float(rtg.val))


def select_actions(logits: np.ndarray, mode: str = "greedy",
                   seed: int | None = None) -> list:
    """Decode one action per logit row. Greedy breaks ties toward the
    lowest action index; sampling is deterministic in the seed."""
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    if mode == "greedy":
        return [int(i) for i in np.argmax(logits, axis=-1)]
    if mode == "sample":
        rng = np.random.default_rng(seed)
        out = []
        for row in logits:
            z = row - row.max()
            p = np.exp(z) / np.exp(z).sum()
            out.append(int(rng.choice(len(row), p=p)))
        return out
    raise ValueError(f"unknown decode mode {mode!r}")


# -- stage 0: observation-encoder pretraining ---------------------------------

def pretrain_obs_encoder(pset: ParamSet, cfg: PolicyConfig, seed: int,
                         steps: int = 300, batch: int = 32,
                         lr: float = 1e-3) -> float:
    """Train the observation encoder to reconstruct random feature vectors
    through a throwaway linear decoder, then freeze it. Returns the final
    reconstruction loss."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0B5]))
    dec = ParamGroup("obs_decoder", {
        "w": rng.normal(0.0, 1.0 / np.sqrt(cfg.d), size=(cfg.d, cfg.obs_dim)),
        "b": np.zeros(cfg.obs_dim),
    })
    pset.add(dec)
    pset.set_trainable(["obs_encoder", "obs_decoder"])
    hyper = nnet.AdamConfig(lr=lr)
    loss_val = np.inf
    for _ in range(steps):
        x = rng.random((batch, cfg.obs_dim))
        leaves = pset.leaves()
        tok = _encode_frames(leaves, x, "recon")
        recon = nnet.affine(tok, leaves["obs_decoder"]["w"],
                            leaves["obs_decoder"]["b"], name="recon_out")
        loss = nnet.mean(nnet.square(nnet.sub(recon, x)), name="recon_loss")
        loss.backward()
        nnet.adam_step(pset, pset.grads_from_leaves(leaves), hyper)
        loss_val = float(loss.val)
    pset.remove("obs_decoder")
    pset["obs_encoder"].frozen = True
    return loss_val
