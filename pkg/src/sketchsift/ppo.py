"""Subset-selection MDP, reward computation, rollouts, and clipped-surrogate
actor-critic updates for the stroke selector.

The environment is frozen: a trained embedding net plus a precomputed photo
gallery. An episode starts from the full sketch; each step samples a
keep/drop mask, scores the rasterized subset against the gallery, and (in the
default chained mode) continues from the shrunken subset.
"""

from __future__ import annotations

import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import selector as sel
from .embedder import EmbedNet
from .errors import DatasetTooSmall, EmptyBatch, EmptySubset, LengthMismatch
from .ranking import GalleryFeatures, acc_at_k, rank, rank_many
from .sketch import (
    StrokeMask,
    VectorSketch,
    apply_mask,
    raster_of_mask,
    rasterize_strokes,
    serialize_sketch,
)

REWARD_VARIANTS = ("neg_rank", "inv_rank", "neg_triplet", "inv_triplet_eps", "combined")


@dataclass
class RewardConfig:
    variant: str = "combined"
    rank_weight: float = 1.0  # weight on the 1/rank term
    triplet_weight: float = 1.0  # weight on the (negated) triplet-loss term
    triplet_eps: float = 1e-2  # epsilon inside the inverse-triplet variant
    margin: float = 0.2  # shared with the retrieval net

    def __post_init__(self) -> None:
        if self.variant not in REWARD_VARIANTS:
            raise LengthMismatch(f"unknown reward variant {self.variant!r}")
        if self.rank_weight < 0 or self.triplet_weight < 0:
            raise LengthMismatch("reward weights must be >= 0")
        if self.rank_weight == 0 and self.triplet_weight == 0:
            raise LengthMismatch("reward weights cannot both be 0")


@dataclass
class PPOConfig:
    clip_eps: float = 0.2
    value_coeff: float = 0.5
    entropy_coeff: float = 0.01
    episode_len: int = 5
    lr_initial: float = 1e-4
    lr_after_warm: float = 1e-5
    warm_epochs: int = 15
    batch_size: int = 16
    policy_sync_every: int = 20
    epochs: int = 300
    seed: int = 0
    buffer_capacity: int = 4096
    update_sample: int = 256
    update_minibatch: int = 32
    update_passes: int = 2
    chained_states: bool = True
    literal_log_ratio: bool = False  # diagnostics-only quotient-of-logs ratio

    def __post_init__(self) -> None:
        if not 0 < self.clip_eps < 1:
            raise LengthMismatch(f"clip_eps {self.clip_eps} outside (0, 1)")
        if self.episode_len < 1:
            raise LengthMismatch(f"episode_len {self.episode_len} < 1")


@dataclass
class EpisodeRecord:
    state: VectorSketch
    mask: StrokeMask
    logp_old: float
    reward: float
    value_old: float
    step: int


class ReplayBuffer:
    """Bounded FIFO of episode records with seeded uniform sampling."""

    def __init__(self, capacity: int = 4096):
        self._items: deque[EpisodeRecord] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    @property
    def capacity(self) -> int:
        return self._items.maxlen or 0

    def add(self, record: EpisodeRecord) -> None:
        self._items.append(record)

    def extend(self, records: Sequence[EpisodeRecord]) -> None:
        for r in records:
            self._items.append(r)

    def sample(self, n: int, rng: np.random.Generator) -> list[EpisodeRecord]:
        n = min(n, len(self._items))
        idx = rng.choice(len(self._items), size=n, replace=False)
        items = list(self._items)
        return [items[i] for i in idx]


# --------------------------------------------------------------------------
# reward


@dataclass
class RolloutEnv:
    """Frozen retrieval environment: embedding net + gallery + raster params."""

    net: EmbedNet
    gallery: GalleryFeatures
    line_width: int = 1

    @property
    def raster_hw(self) -> int:
        return self.net.config.input_hw


def _triplet_value(
    anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray, margin: float
) -> float:
    d_pos = float(np.linalg.norm(anchor - positive))
    d_neg = float(np.linalg.norm(anchor - negative))
    return max(0.0, d_pos - d_neg + margin)


def _sample_negative(
    gallery: GalleryFeatures, paired_idx: int, rng: np.random.Generator
) -> int:
    if gallery.size == 1:
        return paired_idx
    other = int(rng.integers(0, gallery.size - 1))
    return other if other < paired_idx else other + 1


def _reward_from_parts(
    anchor: np.ndarray,
    rank_value: int,
    paired_id: str,
    env: RolloutEnv,
    cfg: RewardConfig,
    rng: np.random.Generator | None,
) -> float:
    if cfg.variant == "neg_rank":
        return float(-rank_value)
    if cfg.variant == "inv_rank":
        return 1.0 / rank_value
    if rng is None:
        raise LengthMismatch(f"variant {cfg.variant!r} needs an rng for the negative sample")
    paired_idx = env.gallery.index_of(paired_id)
    neg_idx = _sample_negative(env.gallery, paired_idx, rng)
    loss = _triplet_value(
        anchor, env.gallery.features[paired_idx], env.gallery.features[neg_idx], cfg.margin
    )
    if cfg.variant == "neg_triplet":
        return -loss
    if cfg.variant == "inv_triplet_eps":
        return 1.0 / (loss + cfg.triplet_eps)
    return cfg.rank_weight / rank_value - cfg.triplet_weight * loss


def compute_reward(
    mask: StrokeMask,
    sketch: VectorSketch,
    paired_id: str,
    env: RolloutEnv,
    cfg: RewardConfig,
    rng: np.random.Generator | None = None,
    stroke_rasters: np.ndarray | None = None,
) -> float:
    """Score one subset mask against the frozen environment.

    Variants: neg_rank (-rank), inv_rank (1/rank), neg_triplet (-loss),
    inv_triplet_eps (1/(loss+eps)), combined (rank_weight/rank -
    triplet_weight*loss). The triplet negative is a uniformly sampled other
    gallery photo drawn from rng, so callers pin the stream per record.
    """
    if mask.selected_count == 0:
        raise EmptySubset("reward needs a non-empty subset")
    if stroke_rasters is None:
        stroke_rasters = rasterize_strokes(sketch, env.raster_hw, env.raster_hw, env.line_width)
    raster = raster_of_mask(stroke_rasters, mask)
    anchor = env.net.embed(raster[None])[0]
    rr = rank(anchor, env.gallery, paired_id)
    return _reward_from_parts(anchor, rr.rank, paired_id, env, cfg, rng)


def _state_signature(sketch: VectorSketch, paired_id: str) -> int:
    return zlib.crc32((paired_id + "\n" + serialize_sketch(sketch)).encode("ascii"))


def _reward_rng(master_seed: int, sketch: VectorSketch, paired_id: str) -> np.random.Generator:
    """Content-pinned stream: identical states always draw the same negative."""
    sig = _state_signature(sketch, paired_id)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((master_seed, sig))))


def rollout(
    sketch: VectorSketch,
    policy: sel.SelectorNet,
    env: RolloutEnv,
    paired_id: str,
    reward_cfg: RewardConfig,
    episode_len: int,
    rng: np.random.Generator,
    reward_seed: int = 0,
    chained: bool = True,
) -> list[EpisodeRecord]:
    """Unroll the subset MDP from the full sketch.

    Chained mode shrinks the state each step; once the chain collapses to a
    single stroke that state is still recorded once (its only action is to
    keep the stroke) and the episode then terminates at the fixed point.
    Independent mode resamples from the full sketch each step.
    """
    full_rasters = rasterize_strokes(sketch, env.raster_hw, env.raster_hw, env.line_width)
    state = sketch
    state_idx = tuple(range(sketch.stroke_count))
    records: list[EpisodeRecord] = []
    for t in range(1, episode_len + 1):
        out = sel.encode(policy, state)
        mask, logp = sel.sample_mask_nonempty(out.probs_array, rng)
        reward = compute_reward(
            mask,
            state,
            paired_id,
            env,
            reward_cfg,
            rng=_reward_rng(reward_seed, state, paired_id),
            stroke_rasters=full_rasters[list(state_idx)],
        )
        records.append(
            EpisodeRecord(
                state=state,
                mask=mask,
                logp_old=logp,
                reward=reward,
                value_old=out.value_scalar,
                step=t,
            )
        )
        if chained:
            was_single = state.stroke_count == 1
            kept = mask.selected_indices()
            state_idx = tuple(state_idx[i] for i in kept)
            state = apply_mask(state, mask)
            if was_single and state.stroke_count == 1:
                break
    return records


def collect_rollouts(
    sketches: Sequence[VectorSketch],
    paired_ids: Sequence[str],
    policy: sel.SelectorNet,
    env: RolloutEnv,
    reward_cfg: RewardConfig,
    episode_len: int,
    rng: np.random.Generator,
    reward_seed: int = 0,
    chained: bool = True,
) -> list[EpisodeRecord]:
    """Lockstep rollouts for a sketch batch: one batched policy encode and one
    batched reward embed per MDP step. Same per-episode semantics as rollout."""
    hw = env.raster_hw
    caches = [
        rasterize_strokes(s, hw, hw, env.line_width) for s in sketches
    ]
    states = list(sketches)
    state_idx = [tuple(range(s.stroke_count)) for s in sketches]
    alive = list(range(len(sketches)))
    records: list[EpisodeRecord] = []
    for t in range(1, episode_len + 1):
        if not alive:
            break
        out = sel.encode_batch(policy, [states[i] for i in alive])
        masks, logps = [], []
        for j, i in enumerate(alive):
            mask, logp = sel.sample_mask_nonempty(out.probs_of(j), rng)
            masks.append(mask)
            logps.append(logp)
        rasters = np.stack(
            [
                raster_of_mask(caches[i][list(state_idx[i])], mask)
                for i, mask in zip(alive, masks)
            ]
        )
        anchors = env.net.embed(rasters)
        ranks = rank_many(anchors, env.gallery, [paired_ids[i] for i in alive])
        next_alive = []
        for j, i in enumerate(alive):
            reward = _reward_from_parts(
                anchors[j],
                int(ranks[j]),
                paired_ids[i],
                env,
                reward_cfg,
                rng=_reward_rng(reward_seed, states[i], paired_ids[i]),
            )
            records.append(
                EpisodeRecord(
                    state=states[i],
                    mask=masks[j],
                    logp_old=logps[j],
                    reward=reward,
                    value_old=float(out.values.data[j, 0]),
                    step=t,
                )
            )
            if chained:
                was_single = states[i].stroke_count == 1
                kept = masks[j].selected_indices()
                state_idx[i] = tuple(state_idx[i][m] for m in kept)
                states[i] = apply_mask(states[i], masks[j])
                if not (was_single and states[i].stroke_count == 1):
                    next_alive.append(i)
            else:
                next_alive.append(i)
        alive = next_alive
    return records


# --------------------------------------------------------------------------
# loss


@dataclass
class PPODiagnostics:
    clip_fraction: float
    mean_ratio: float
    value_mse: float
    mean_entropy: float
    surr_unclipped: np.ndarray
    surr_clipped: np.ndarray


def ppo_loss(
    batch: Sequence[EpisodeRecord],
    policy: sel.SelectorNet,
    cfg: PPOConfig,
) -> tuple[ad.Tensor, PPODiagnostics]:
    """Clipped-surrogate actor-critic loss over a record batch.

    Per record: ratio = exp(logp_new - logp_old) of the whole mask, advantage
    = stored reward - stored value, surrogate = min(ratio*adv, clip(ratio)*adv).
    The returned scalar is -(mean surrogate - c1*value_error + c2*entropy); it
    is differentiable through the policy parameters when built under a Tape.
    States are encoded as one ragged batch.
    """
    if not batch:
        raise EmptyBatch("ppo_loss needs at least one record")
    n = len(batch)
    out = sel.encode_batch(policy, [r.state for r in batch])
    total_strokes = out.probs.shape[0]

    onehot = np.zeros((total_strokes, 2))
    sum_matrix = np.zeros((n, total_strokes))
    avg_matrix = np.zeros((n, total_strokes))
    for b, record in enumerate(batch):
        start, k = out.offsets[b], out.counts[b]
        if k != len(record.mask):
            raise LengthMismatch(
                f"record {b}: mask of {len(record.mask)} for state with {k} strokes"
            )
        for i, bit in enumerate(record.mask.bits):
            onehot[start + i, 0 if bit else 1] = 1.0
        sum_matrix[b, start : start + k] = 1.0
        avg_matrix[b, start : start + k] = 1.0 / k

    chosen = ad.sum_(
        ad.mul(ad.constant(onehot), ad.clip(out.probs, sel.PROB_FLOOR, 1.0)),
        axis=1,
        keepdims=True,
    )  # (S, 1)
    logp_new = ad.matmul(ad.constant(sum_matrix), ad.log(chosen))  # (B, 1)

    logp_old = np.array([[r.logp_old] for r in batch])
    if cfg.literal_log_ratio:
        denom = np.where(np.abs(logp_old) > 1e-12, logp_old, -1e-12)
        ratio = ad.mul(logp_new, ad.constant(1.0 / denom))
    else:
        ratio = ad.exp(ad.sub(logp_new, ad.constant(logp_old)))

    advantage = ad.constant([[r.reward - r.value_old] for r in batch])
    surr_raw = ad.mul(ratio, advantage)
    surr_clip = ad.mul(ad.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), advantage)
    surrogate = ad.minimum(surr_raw, surr_clip)  # (B, 1)

    rewards = ad.constant([[r.reward] for r in batch])
    v_err = ad.sub(out.values, rewards)
    v_sq = ad.mul(v_err, v_err)  # (B, 1)

    p = ad.clip(out.probs, sel.PROB_FLOOR, 1.0)
    stroke_ent = ad.neg(ad.sum_(ad.mul(p, ad.log(p)), axis=1, keepdims=True))  # (S, 1)
    entropy = ad.matmul(ad.constant(avg_matrix), stroke_ent)  # (B, 1)

    objective = ad.sub(
        ad.add(surrogate, ad.mul_scalar(entropy, cfg.entropy_coeff)),
        ad.mul_scalar(v_sq, cfg.value_coeff),
    )
    loss = ad.neg(ad.mean(objective))

    unclipped = surr_raw.data[:, 0].copy()
    clipped = surr_clip.data[:, 0].copy()
    diags = PPODiagnostics(
        clip_fraction=float((clipped < unclipped).mean()),
        mean_ratio=float(ratio.data.mean()),
        value_mse=float(v_sq.data.mean()),
        mean_entropy=float(entropy.data.mean()),
        surr_unclipped=unclipped,
        surr_clipped=clipped,
    )
    return loss, diags


# --------------------------------------------------------------------------
# training


@dataclass
class SelectorEpochStats:
    epoch: int
    mean_reward: float
    acc1: float
    acc5: float
    clip_frac: float
    entropy: float


@dataclass
class SketchPairSet:
    """Vector sketches aligned with their paired photo rasters and ids."""

    sketches: list[VectorSketch]
    photos: np.ndarray  # (N, H, W)
    ids: list[str]

    def __post_init__(self) -> None:
        if not (len(self.sketches) == self.photos.shape[0] == len(self.ids)):
            raise LengthMismatch("sketches/photos/ids lengths disagree")

    def __len__(self) -> int:
        return len(self.ids)


def _selector_validation(
    policy: sel.SelectorNet,
    val: SketchPairSet,
    env: RolloutEnv,
    val_gallery: GalleryFeatures | None = None,
) -> tuple[float, float]:
    """Acc@1/Acc@5 of retrieval on the greedy-selected subsets of val sketches."""
    if not len(val):
        return 0.0, 0.0
    hw = env.raster_hw
    out = sel.encode_batch(policy, val.sketches)
    images = []
    for b, sketch in enumerate(val.sketches):
        mask = sel.safe_greedy_mask(out.probs_of(b))
        rasters = rasterize_strokes(sketch, hw, hw, env.line_width)
        images.append(raster_of_mask(rasters, mask))
    embs = env.net.embed(np.stack(images))
    if val_gallery is None:
        val_gallery = GalleryFeatures(env.net.embed(val.photos), val.ids)
    ranks = rank_many(embs, val_gallery, val.ids)
    return acc_at_k(ranks, 1), acc_at_k(ranks, 5)


def train_selector(
    train: SketchPairSet,
    embed_net: EmbedNet,
    ppo_cfg: PPOConfig,
    reward_cfg: RewardConfig,
    val: SketchPairSet | None = None,
    line_width: int = 1,
    on_epoch: Callable[[SelectorEpochStats], None] | None = None,
    selector_cfg: sel.SelectorConfig | None = None,
) -> tuple[sel.SelectorNet, list[SelectorEpochStats]]:
    """PPO training loop against the frozen embedding net.

    Rollouts are collected with the behavior (old) policy; every
    policy_sync_every collection iterations the current policy takes
    update_passes x minibatch Adam steps on buffer samples, then the behavior
    policy is refreshed from it.
    """
    if len(train) < 2:
        raise DatasetTooSmall(f"need >= 2 training pairs, got {len(train)}")
    selector_cfg = selector_cfg or sel.SelectorConfig(seed=ppo_cfg.seed)
    policy = sel.SelectorNet(selector_cfg)
    behavior = policy.clone()
    env = RolloutEnv(net=embed_net, gallery=GalleryFeatures(embed_net.embed(train.photos), train.ids), line_width=line_width)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((ppo_cfg.seed, 23))))
    buffer = ReplayBuffer(ppo_cfg.buffer_capacity)
    state = ad.AdamState()
    log_rows: list[SelectorEpochStats] = []
    iteration = 0
    val_gallery = (
        GalleryFeatures(embed_net.embed(val.photos), val.ids)
        if val is not None and len(val)
        else None
    )

    for epoch in range(1, ppo_cfg.epochs + 1):
        lr = ppo_cfg.lr_initial if epoch <= ppo_cfg.warm_epochs else ppo_cfg.lr_after_warm
        order = rng.permutation(len(train))
        epoch_rewards: list[float] = []
        epoch_clip: list[float] = []
        epoch_entropy: list[float] = []
        for start in range(0, len(train), ppo_cfg.batch_size):
            idx = order[start : start + ppo_cfg.batch_size]
            records = collect_rollouts(
                [train.sketches[i] for i in idx],
                [train.ids[i] for i in idx],
                behavior,
                env,
                reward_cfg,
                ppo_cfg.episode_len,
                rng,
                reward_seed=ppo_cfg.seed,
                chained=ppo_cfg.chained_states,
            )
            buffer.extend(records)
            epoch_rewards.extend(r.reward for r in records)
            iteration += 1
            if iteration % ppo_cfg.policy_sync_every == 0 and len(buffer):
                for _ in range(ppo_cfg.update_passes):
                    sampled = buffer.sample(ppo_cfg.update_sample, rng)
                    for chunk_start in range(0, len(sampled), ppo_cfg.update_minibatch):
                        chunk = sampled[chunk_start : chunk_start + ppo_cfg.update_minibatch]
                        with ad.Tape() as tape:
                            loss, diags = ppo_loss(chunk, policy, ppo_cfg)
                        grads = tape.gradients(loss, params=policy.params.values())
                        ad.adam_step(
                            policy.params,
                            {n: grads[p] for n, p in policy.params.items()},
                            state,
                            lr,
                        )
                        epoch_clip.append(diags.clip_fraction)
                        epoch_entropy.append(diags.mean_entropy)
                behavior.copy_params_from(policy)

        acc1, acc5 = (
            _selector_validation(policy, val, env, val_gallery)
            if val is not None
            else (0.0, 0.0)
        )
        stats = SelectorEpochStats(
            epoch=epoch,
            mean_reward=float(np.mean(epoch_rewards)) if epoch_rewards else 0.0,
            acc1=acc1,
            acc5=acc5,
            clip_frac=float(np.mean(epoch_clip)) if epoch_clip else 0.0,
            entropy=float(np.mean(epoch_entropy)) if epoch_entropy else 0.0,
        )
        log_rows.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return policy, log_rows


# --------------------------------------------------------------------------
# applications


def clean_training_data(
    sketches: Sequence[VectorSketch],
    policy: sel.SelectorNet,
) -> list[VectorSketch]:
    """Replace each sketch by its greedy-selected subset."""
    cleaned = []
    for sketch in sketches:
        mask = sel.safe_greedy_mask(sel.encode(policy, sketch).probs_array)
        cleaned.append(apply_mask(sketch, mask))
    return cleaned


def augment(
    sketch: VectorSketch,
    policy: sel.SelectorNet,
    n: int,
    rng: np.random.Generator,
) -> list[VectorSketch]:
    """n sampled subset variants; masks repeat only once all 2^K - 1 nonempty
    masks have been produced."""
    if n < 1:
        raise LengthMismatch(f"n {n} < 1")
    probs = sel.encode(policy, sketch).probs_array
    k = sketch.stroke_count
    total_nonempty = (1 << k) - 1
    seen: set[tuple[bool, ...]] = set()
    out: list[VectorSketch] = []
    while len(out) < n:
        mask = None
        for _ in range(64):
            candidate, _ = sel.sample_mask(probs, rng)
            if candidate.selected_count == 0:
                continue
            if len(seen) >= total_nonempty or candidate.bits not in seen:
                mask = candidate
                break
        if mask is None:
            # exhaust deterministically: pick an unseen mask uniformly
            unseen = [
                StrokeMask.from_int(v, k)
                for v in range(1, total_nonempty + 1)
                if StrokeMask.from_int(v, k).bits not in seen
            ]
            mask = unseen[int(rng.integers(0, len(unseen)))] if unseen else StrokeMask.all_select(k)
        seen.add(mask.bits)
        out.append(apply_mask(sketch, mask))
    return out
