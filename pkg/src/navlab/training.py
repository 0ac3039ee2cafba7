"""Three-stage optimization: map-understanding pretraining, behavior
cloning, and reward-amplified fine-tuning with an expectile-regressed
return head."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import mapper, nnet, policy, rewards
from .dataset import obs_frames_from_bytes
from .gridsim import Action
from .nnet import Node, ParamSet
from .policy import PolicyConfig
from .rewards import RewardConfig, RewardKind, WeightKind

STAGE_EPOCH_DEFAULTS = {1: 3, 2: 5, 3: 5}

# per-stage trainable group sets; everything else is frozen
STAGE_TRAINABLE = {
    1: ("map_encoder", "projector", "trunk", "stage1_heads"),
    2: ("history_pooler", "fusion", "projector", "trunk", "goal_embedding",
        "action_head"),
    3: ("history_pooler", "fusion", "projector", "trunk", "goal_embedding",
        "action_head", "reward_head"),
}


class StageOrderError(Exception):
    pass


# label reindexing under a left-right mirror of the egocentric frame
MIRROR_ACTION = np.array([0, 2, 1, 3])       # swap TurnLeft / TurnRight
MIRROR_SECTOR = np.array([0, 7, 6, 5, 4, 3, 2, 1])  # clockwise wedges reverse


@dataclass
class StageConfig:
    stage: int
    epochs: int | None = None
    batch_size: int = 64
    lr: float = 3e-4
    lam: float = 1.0          # RTG loss weight
    tau: float = 0.9          # expectile
    reward: RewardConfig = field(default_factory=RewardConfig)
    seed: int = 0
    expectile_sign: str = "intent"  # "intent" or "paper_literal"
    augment: bool = True      # task-symmetry minibatch augmentation
    goal_relabel: float = 0.5  # counterfactual goal relabeling share (BC stages)
    history_dropout: float = 0.0  # share of samples with flattened history

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError("stage must be 1, 2, or 3")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epochs is None:
            self.epochs = STAGE_EPOCH_DEFAULTS[self.stage]
        if self.expectile_sign not in ("intent", "paper_literal"):
            raise ValueError("expectile_sign must be 'intent' or 'paper_literal'")


@dataclass
class TrainReport:
    stage: int
    epochs: list = field(default_factory=list)  # dicts: bc, rtg, total, grad_norm
    checksums_before: dict = field(default_factory=dict)
    checksums_after: dict = field(default_factory=dict)
    frozen_groups: list = field(default_factory=list)
    wall_time: float = 0.0

    def frozen_groups_stable(self) -> bool:
        return all(self.checksums_after[g] == self.checksums_before[g]
                   for g in self.frozen_groups if g in self.checksums_after)


# -- in-memory training arrays ------------------------------------------------

class TrainingData:
    """Dense arrays for minibatching; maps stay bit-packed until batched."""

    def __init__(self, packed_maps, frame_feats, goals, actions, sector_cats,
                 sector_buckets, recent_action, r=None, rtg=None, steer=None):
        self.packed_maps = packed_maps
        self.frame_feats = frame_feats
        self.goals = goals
        self.actions = actions
        self.sector_cats = sector_cats
        self.sector_buckets = sector_buckets
        self.recent_action = recent_action
        self.r = r
        self.rtg = rtg
        self.steer = steer  # (B, num_categories) scripted action per goal

    def augmented_batch(self, idx, cfg: PolicyConfig, rng,
                        goal_relabel: float = 0.0,
                        history_dropout: float = 0.0):
        """One minibatch with task-symmetry augmentation applied: every
        sample gets a random relabeling of the goal categories, and half
        the samples are mirrored left-right. Both are exact symmetries of
        the task, so they multiply the rare turn/stop decisions without
        changing what the policy must learn - and they make rote
        memorization of training states inconsistent, forcing the network
        toward the underlying steering rule.

        With probability `goal_relabel` a sample additionally gets a fresh
        uniform goal id and its action labels replaced by the scripted
        plan for that goal from the same map state (counterfactual goal
        relabeling). This decouples the goal id from the map content, so
        the network cannot stop on "standing on any labeled cell" - it
        must consult the goal.

        Returns (patches, feats, goals, actions, sector_cats,
        sector_buckets, recent_action, steer)."""
        from . import demogen
        C = cfg.num_categories
        n = cfg.num_rays
        steer_all = self.ensure_steer(cfg)
        B = len(idx)
        patches = np.empty((B, cfg.n_map_tokens, cfg.patch_dim))
        feats = self.frame_feats[idx].copy()
        goals = self.goals[idx].copy()
        actions = self.actions[idx].copy()
        cats = self.sector_cats[idx].copy()
        buckets = self.sector_buckets[idx].copy()
        recent = self.recent_action[idx].copy()
        steer = steer_all[idx].copy()
        mirror = rng.random(B) < 0.5
        # optional history dropout: replace the frame history with copies
        # of the current frame (the episode-start padding pattern, and
        # what a wall bump produces)
        hist_drop = rng.random(B) < history_dropout
        for j, i in enumerate(idx):
            if hist_drop[j]:
                feats[j] = feats[j, -1]
            ch = mapper.map_from_bytes(
                self.packed_maps[i], frame=mapper.Frame.EGOCENTRIC).channels
            perm = rng.permutation(C)
            inv = np.argsort(perm)
            ch = np.concatenate([ch[:2], ch[2:][perm]])
            goals[j] = inv[goals[j] - 1] + 1
            steer[j] = steer[j][perm]
            hit = cats[j] > 0
            cats[j, hit] = inv[cats[j, hit] - 1] + 1
            catf = feats[j, :, 3 * n:4 * n]
            flag = feats[j, :, n:2 * n] > 0
            raw = np.rint(catf * C).astype(np.int64)
            catf[flag] = (inv[raw[flag] - 1] + 1) / C
            if mirror[j]:
                ch = ch[:, :, ::-1]
                for blk in range(4):  # rays fan left to right; reverse them
                    feats[j, :, blk * n:(blk + 1) * n] = \
                        feats[j, :, blk * n:(blk + 1) * n][:, ::-1]
                actions[j] = MIRROR_ACTION[actions[j]]
                steer[j] = MIRROR_ACTION[steer[j]]
                recent[j] = MIRROR_ACTION[recent[j]]
                cats[j] = cats[j][MIRROR_SECTOR]
                buckets[j] = buckets[j][MIRROR_SECTOR]
            smap = mapper.SemanticMap(np.ascontiguousarray(ch), (0, 0),
                                      mapper.Frame.EGOCENTRIC)
            if goal_relabel > 0.0 and rng.random() < goal_relabel:
                goals[j] = int(rng.integers(1, C + 1))
                actions[j] = demogen.scripted_plan(smap, goals[j])
            patches[j] = policy.map_patches(smap, cfg)
        return patches, feats, goals, actions, cats, buckets, recent, steer

    def ensure_steer(self, cfg: PolicyConfig) -> np.ndarray:
        """Per-category scripted-steering labels, derived lazily from the
        stored maps (they are a pure function of the egocentric crop)."""
        if self.steer is None:
            from . import demogen
            out = np.empty((len(self.packed_maps), cfg.num_categories),
                           dtype=np.int64)
            for i, blob in enumerate(self.packed_maps):
                ego = mapper.map_from_bytes(blob, frame=mapper.Frame.EGOCENTRIC)
                for c in range(cfg.num_categories):
                    out[i, c] = int(demogen.scripted_action(ego, c + 1))
            self.steer = out
        return self.steer

    def __len__(self):
        return len(self.packed_maps)

    @property
    def labeled(self) -> bool:
        return self.r is not None and self.rtg is not None

    @classmethod
    def from_records(cls, records, cfg: PolicyConfig) -> "TrainingData":
        packed = [mapper.map_to_bytes(r.ego_map) for r in records]
        feats = np.stack([
            np.stack([policy.obs_features(f, cfg) for f in r.frames])
            for r in records])
        goals = np.array([r.goal for r in records], dtype=np.int64)
        actions = np.array([r.actions for r in records], dtype=np.int64)
        cats = np.array([[c if c is not None else 0
                          for c, _ in r.description.sectors] for r in records],
                        dtype=np.int64)
        buckets = np.array([[b for _, b in r.description.sectors]
                            for r in records], dtype=np.int64)
        recent = np.array([r.description.recent_actions[-1]
                           if r.description.recent_actions else int(Action.STOP)
                           for r in records], dtype=np.int64)
        labeled = all(r.rtg is not None for r in records)
        rr = np.array([r.r for r in records]) if labeled else None
        rtg = np.array([r.rtg for r in records]) if labeled else None
        return cls(packed, feats, goals, actions, cats, buckets, recent, rr, rtg)

    @classmethod
    def from_dataset(cls, reader, cfg: PolicyConfig) -> "TrainingData":
        packed, feats = [], []
        with open(reader.blob_path, "rb") as blob:
            for h in reader.headers:
                blob.seek(h["map_offset"])
                packed.append(blob.read(h["map_len"]))
                blob.seek(h["obs_offset"])
                frames = obs_frames_from_bytes(blob.read(h["obs_len"]))
                feats.append(np.stack([policy.obs_features(f, cfg) for f in frames]))
        hs = reader.headers
        goals = np.array([h["goal"] for h in hs], dtype=np.int64)
        actions = np.array([h["actions"] for h in hs], dtype=np.int64)
        cats = np.array([[c if c is not None else 0 for c, _ in h["sectors"]]
                         for h in hs], dtype=np.int64)
        buckets = np.array([[b for _, b in h["sectors"]] for h in hs], dtype=np.int64)
        recent = np.array([h["recent"][-1] if h["recent"] else int(Action.STOP)
                           for h in hs], dtype=np.int64)
        labeled = all("rtg" in h for h in hs)
        rr = np.array([h["r"] for h in hs]) if labeled else None
        rtg = np.array([h["rtg"] for h in hs]) if labeled else None
        return cls(packed, np.stack(feats), goals, actions, cats, buckets,
                   recent, rr, rtg)

    def batch_patches(self, idx, cfg: PolicyConfig) -> np.ndarray:
        out = np.empty((len(idx), cfg.n_map_tokens, cfg.patch_dim))
        for j, i in enumerate(idx):
            smap = mapper.map_from_bytes(self.packed_maps[i])
            out[j] = policy.map_patches(smap, cfg)
        return out


# -- losses -------------------------------------------------------------------

def bc_loss_per_sample(logits: Node, labels: np.ndarray) -> Node:
    """Mean over the label positions of the negative log-softmax
    probability of each labeled action; logits (B, H, V), labels (B, H)."""
    labels = np.asarray(labels, dtype=np.int64)
    ls = nnet.log_softmax(logits, name="bc_logprob")
    b, h = labels.shape
    idx = (np.arange(b)[:, None], np.arange(h)[None, :], labels)
    picked = nnet.take(ls, idx, name="bc_pick")
    return nnet.scale(nnet.sum_(picked, axis=-1, name="bc_sum"), -1.0 / h,
                      name="bc_per_sample")


def loss_bc(logits: np.ndarray, labels) -> float:
    """Scalar cross-entropy over one 4-row logit block."""
    node = bc_loss_per_sample(nnet.as_node(logits[None], "logits"),
                              np.asarray(labels, dtype=np.int64)[None])
    return float(node.val[0])


def expectile_loss_per_sample(pred: Node, target: np.ndarray, tau: float,
                              sign: str = "intent") -> Node:
    """Asymmetric squared error |tau - 1(u<0)| * u^2 per sample.

    sign="intent" uses u = target - pred so tau > 0.5 pulls the prediction
    toward the upper expectile; "paper_literal" flips the residual."""
    target = np.asarray(target, dtype=np.float64)
    if sign == "intent":
        u = nnet.sub(nnet.as_node(target, "rtg_target"), pred, name="residual")
    else:
        u = nnet.sub(pred, nnet.as_node(target, "rtg_target"), name="residual")
    w = np.abs(tau - (u.val < 0).astype(np.float64))
    return nnet.mul(nnet.as_node(w, "expectile_w"), nnet.square(u, name="u_sq"),
                    name="expectile")


def loss_expectile(pred: float, target: float, tau: float,
                   sign: str = "intent") -> float:
    node = expectile_loss_per_sample(nnet.as_node(np.array([float(pred)])),
                                     np.array([float(target)]), tau, sign)
    return float(node.val[0])


def stage3_loss_nodes(logits: Node, labels, rtg_pred: Node, r_labels,
                      rtg_labels, cfg: StageConfig):
    """Reward-weighted BC plus expectile regression. The per-sample weight
    is a constant function of the chosen reward label (no gradient flows
    through it). Returns (total, bc_mean, expectile_mean) nodes."""
    values = rtg_labels if cfg.reward.reward_kind is RewardKind.RTG else r_labels
    w = np.array([rewards.sample_weight(float(v), cfg.reward.weight_kind)
                  for v in values])
    bc = bc_loss_per_sample(logits, labels)
    weighted = nnet.mean(nnet.mul(nnet.as_node(w, "bc_weight"), bc,
                                  name="weighted_bc"), name="bc_mean")
    exp_loss = nnet.mean(expectile_loss_per_sample(rtg_pred, values, cfg.tau,
                                                   cfg.expectile_sign),
                         name="rtg_mean")
    total = nnet.add(weighted, nnet.scale(exp_loss, cfg.lam, name="lam_rtg"),
                     name="stage3_loss")
    return total, weighted, exp_loss


def loss_stage3(logits: np.ndarray, labels, rtg_pred: float, rtg_label: float,
                cfg: StageConfig) -> float:
    total, _, _ = stage3_loss_nodes(
        nnet.as_node(logits[None]), np.asarray(labels, dtype=np.int64)[None],
        nnet.as_node(np.array([float(rtg_pred)])),
        np.array([float(rtg_label)]), np.array([float(rtg_label)]), cfg)
    return float(total.val)


def stage1_loss_nodes(cat_logits: Node, bucket_logits: Node, act_logits: Node,
                      steer_logits: Node, cat_labels, bucket_labels,
                      act_labels, steer_labels) -> Node:
    """Summed cross-entropy over 8 sector-category slots, 8 free-space
    bucket slots, the most recent action, and the per-category scripted
    steering action; batch-averaged."""
    cat_labels = np.asarray(cat_labels, dtype=np.int64)
    bucket_labels = np.asarray(bucket_labels, dtype=np.int64)
    act_labels = np.asarray(act_labels, dtype=np.int64)
    steer_labels = np.asarray(steer_labels, dtype=np.int64)
    b = cat_labels.shape[0]
    bi = np.arange(b)
    cat_ls = nnet.log_softmax(cat_logits)
    bucket_ls = nnet.log_softmax(bucket_logits)
    act_ls = nnet.log_softmax(act_logits)
    steer_ls = nnet.log_softmax(steer_logits)
    si = np.arange(8)[None, :]
    ci = np.arange(steer_labels.shape[1])[None, :]
    cat_ce = nnet.sum_(nnet.take(cat_ls, (bi[:, None], si, cat_labels)), axis=-1)
    bucket_ce = nnet.sum_(nnet.take(bucket_ls, (bi[:, None], si, bucket_labels)),
                          axis=-1)
    act_ce = nnet.take(act_ls, (bi, act_labels))
    steer_ce = nnet.sum_(nnet.take(steer_ls, (bi[:, None], ci, steer_labels)),
                         axis=-1)
    per = nnet.add(nnet.add(nnet.add(cat_ce, bucket_ce), act_ce), steer_ce)
    return nnet.scale(nnet.mean(per, name="stage1_mean"), -1.0, name="stage1_loss")


def loss_stage1(cat_logits, bucket_logits, act_logits, steer_logits,
                cat_labels, bucket_labels, act_labels, steer_labels) -> float:
    node = stage1_loss_nodes(
        nnet.as_node(np.asarray(cat_logits)[None]),
        nnet.as_node(np.asarray(bucket_logits)[None]),
        nnet.as_node(np.asarray(act_logits)[None]),
        nnet.as_node(np.asarray(steer_logits)[None]),
        np.asarray(cat_labels)[None], np.asarray(bucket_labels)[None],
        np.asarray([act_labels]), np.asarray(steer_labels)[None])
    return float(node.val)


# -- stage driver -------------------------------------------------------------

def run_stage(stage: int, data: TrainingData, pset: ParamSet,
              cfg: StageConfig, pcfg: PolicyConfig) -> TrainReport:
    """Train one stage in place. Freeze flags follow the stage schedule;
    frozen-group checksums are recorded before and after."""
    if stage != cfg.stage:
        raise ValueError("cfg.stage does not match the requested stage")
    if stage == 3 and not data.labeled:
        raise StageOrderError("stage 3 requires reward labels; run labeling first")
    if stage == 1:
        policy.add_stage1_heads(pset, pcfg, cfg.seed)
    else:
        policy.drop_stage1_heads(pset)
    if stage == 3:
        policy.add_reward_head(pset, pcfg, cfg.seed)
    pset.set_trainable([g for g in STAGE_TRAINABLE[stage] if g in pset.groups])

    report = TrainReport(stage=stage, checksums_before=pset.checksums(),
                         frozen_groups=[g for g, grp in pset.groups.items()
                                        if grp.frozen])
    hyper = nnet.AdamConfig(lr=cfg.lr)
    t0 = time.perf_counter()
    n = len(data)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, stage, epoch]))
        order = rng.permutation(n)
        sums = {"bc": 0.0, "rtg": 0.0, "total": 0.0, "grad_norm": 0.0}
        n_batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            stats = _train_batch(stage, data, idx, pset, cfg, pcfg, hyper, rng)
            for k in sums:
                sums[k] += stats[k]
            n_batches += 1
        report.epochs.append({k: v / max(1, n_batches) for k, v in sums.items()})
    report.wall_time = time.perf_counter() - t0
    report.checksums_after = pset.checksums()
    for gname, group in pset.groups.items():
        if group.frozen and \
                report.checksums_after[gname] != report.checksums_before[gname]:
            raise AssertionError(f"frozen group {gname} changed during stage {stage}")
    return report


def _train_batch(stage, data: TrainingData, idx, pset, cfg: StageConfig,
                 pcfg: PolicyConfig, hyper, rng=None) -> dict:
    if cfg.augment and rng is not None:
        # stage 3 weights samples by the recorded trajectory's return, so
        # its action labels must stay the recorded ones
        relabel = cfg.goal_relabel if stage != 3 else 0.0
        (patches, feats, goals, actions, sector_cats, sector_buckets,
         recent, steer) = data.augmented_batch(idx, pcfg, rng, relabel,
                                               cfg.history_dropout)
    else:
        patches = data.batch_patches(idx, pcfg)
        feats = data.frame_feats[idx]
        goals = data.goals[idx]
        actions = data.actions[idx]
        sector_cats = data.sector_cats[idx]
        sector_buckets = data.sector_buckets[idx]
        recent = data.recent_action[idx]
        steer = data.ensure_steer(pcfg)[idx] if stage == 1 else None
    leaves = pset.leaves()
    logits, rtg_pred, hidden = policy.forward_nodes(
        leaves, patches, feats, goals, pcfg, with_reward=(stage == 3))
    if stage == 1:
        cat_l, bucket_l, act_l, steer_l = policy.stage1_head_nodes(
            leaves, hidden, pcfg)
        loss = stage1_loss_nodes(cat_l, bucket_l, act_l, steer_l,
                                 sector_cats, sector_buckets, recent, steer)
        bc_val, rtg_val = 0.0, 0.0
    elif stage == 2:
        loss = nnet.mean(bc_loss_per_sample(logits, actions),
                         name="bc_batch")
        bc_val, rtg_val = float(loss.val), 0.0
    else:
        loss, bc_node, rtg_node = stage3_loss_nodes(
            logits, actions, rtg_pred, data.r[idx], data.rtg[idx], cfg)
        bc_val, rtg_val = float(bc_node.val), float(rtg_node.val)
    loss.backward()
    grads = pset.grads_from_leaves(leaves)
    gn = nnet.grad_norm(grads)
    nnet.adam_step(pset, grads, hyper)
    return {"bc": bc_val, "rtg": rtg_val, "total": float(loss.val),
            "grad_norm": gn}


def batch_grad_norm(stage, data: TrainingData, idx, pset, cfg: StageConfig,
                    pcfg: PolicyConfig) -> float:
    """Gradient norm of one batch without updating parameters."""
    patches = data.batch_patches(idx, pcfg)
    leaves = pset.leaves()
    logits, rtg_pred, _ = policy.forward_nodes(
        leaves, patches, data.frame_feats[idx], data.goals[idx], pcfg,
        with_reward=(stage == 3))
    if stage == 3:
        loss, _, _ = stage3_loss_nodes(logits, data.actions[idx], rtg_pred,
                                       data.r[idx], data.rtg[idx], cfg)
    else:
        loss = nnet.mean(bc_loss_per_sample(logits, data.actions[idx]))
    loss.backward()
    return nnet.grad_norm(pset.grads_from_leaves(leaves))
