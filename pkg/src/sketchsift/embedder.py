"""The retrieval embedding net: conv stages -> global average pool -> unit-norm vector.

Trained with the hinge triplet objective so that a sketch raster lands closer
to its paired photo than to other photos. The sketch and photo branches share
these weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .errors import DatasetTooSmall, LengthMismatch, ShapeMismatch

EMBED_MAGIC = "SKETCHSIFT-EMBED"


@dataclass
class EmbedNetConfig:
    input_hw: int = 64
    channels: tuple[int, ...] = (8, 16)
    embed_dim: int = 32
    margin: float = 0.2
    lr: float = 1e-4
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        if self.embed_dim < 2:
            raise LengthMismatch(f"embed_dim {self.embed_dim} < 2")
        if self.margin <= 0:
            raise LengthMismatch(f"margin {self.margin} must be > 0")
        if self.batch_size < 1:
            raise LengthMismatch(f"batch_size {self.batch_size} < 1")


class EmbedNet:
    """Stack of conv(3x3 valid)+relu+maxpool stages, GAP, linear, l2-normalize."""

    def __init__(self, config: EmbedNetConfig):
        self.config = config
        rng = np.random.Generator(np.random.PCG64(config.seed))
        self.params: dict[str, ad.Tensor] = {}
        in_ch = 1
        for i, out_ch in enumerate(config.channels):
            fan_in = in_ch * 9
            k = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, 3, 3))
            # zero-sum filters + small positive bias: flat regions of the
            # all-positive ink input map to +bias, so no relu starts dead
            k = k - k.mean(axis=(1, 2, 3), keepdims=True)
            self.params[f"conv{i}.k"] = ad.parameter(k)
            self.params[f"conv{i}.b"] = ad.parameter(np.full(out_ch, 0.05))
            in_ch = out_ch
        w = rng.normal(0.0, np.sqrt(1.0 / in_ch), size=(in_ch, config.embed_dim))
        self.params["fc.w"] = ad.parameter(w)
        self.params["fc.b"] = ad.parameter(np.zeros(config.embed_dim))

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def forward(self, images: np.ndarray) -> ad.Tensor:
        """(B, H, W) image batch -> (B, d) unit-norm embedding tensor."""
        if images.ndim != 3 or images.shape[1] != self.config.input_hw or images.shape[2] != self.config.input_hw:
            raise ShapeMismatch(
                f"expected (B, {self.config.input_hw}, {self.config.input_hw}), got {images.shape}"
            )
        x = ad.constant(images[:, None, :, :])
        for i in range(len(self.config.channels)):
            x = ad.conv2d_valid(x, self.params[f"conv{i}.k"], self.params[f"conv{i}.b"])
            x = ad.relu(x)
            x = ad.maxpool2(x)
        pooled = ad.mean(x, axis=(2, 3))
        emb = ad.add(ad.matmul(pooled, self.params["fc.w"]), self.params["fc.b"])
        return ad.l2_normalize_rows(emb)

    def embed(self, images: np.ndarray) -> np.ndarray:
        """Inference path: plain (B, d) array, no tape interaction needed."""
        return self.forward(images).data

    def clone(self) -> "EmbedNet":
        other = EmbedNet(self.config)
        for name, p in self.params.items():
            other.params[name].data = p.data.copy()
        return other


def triplet_loss(
    anchor: ad.Tensor,
    positive: ad.Tensor,
    negative: ad.Tensor,
    margin: float,
) -> ad.Tensor:
    """Mean over the batch of max(0, d(a,p) - d(a,n) + margin)."""
    if anchor.shape != positive.shape or anchor.shape != negative.shape:
        raise ShapeMismatch(
            f"triplet shapes {anchor.shape}, {positive.shape}, {negative.shape}"
        )
    if margin <= 0:
        raise LengthMismatch(f"margin {margin} must be > 0")

    def distance(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
        diff = ad.sub(a, b)
        sq = ad.sum_(ad.mul(diff, diff), axis=1)
        return ad.sqrt(ad.add_scalar(sq, 1e-12))

    gap = ad.add_scalar(ad.sub(distance(anchor, positive), distance(anchor, negative)), margin)
    return ad.mean(ad.relu(gap))


@dataclass
class RasterPairs:
    """Aligned sketch/photo raster arrays with their pair ids."""

    sketches: np.ndarray  # (N, H, W)
    photos: np.ndarray  # (N, H, W)
    ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if not (len(self.ids) == self.sketches.shape[0] == self.photos.shape[0]):
            raise LengthMismatch("sketches/photos/ids lengths disagree")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    val_acc1: float


def _validation_acc1(net: EmbedNet, val: RasterPairs) -> float:
    from .ranking import GalleryFeatures, acc_at_k, rank

    gallery = GalleryFeatures(net.embed(val.photos), val.ids)
    query = net.embed(val.sketches)
    ranks = [rank(query[i], gallery, val.ids[i]).rank for i in range(len(val))]
    return acc_at_k(ranks, 1)


def train_retrieval(
    train: RasterPairs,
    val: RasterPairs,
    config: EmbedNetConfig,
    epochs: int,
    patience: int = 10,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> tuple[EmbedNet, list[EpochStats]]:
    """Train from scratch; keeps the parameters of the best validation epoch.

    Negatives are drawn uniformly from the other pairs of each shuffled batch.
    Fully seed-deterministic: two runs with the same config and data produce
    bit-identical parameters and logs.
    """
    if len(train) < 2:
        raise DatasetTooSmall(f"need >= 2 training pairs, got {len(train)}")
    net = EmbedNet(config)
    if epochs == 0:
        return net, []

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((config.seed, 101))))
    state = ad.AdamState()
    log: list[EpochStats] = []
    best_acc = -1.0
    best_params: dict[str, np.ndarray] = {n: p.data.copy() for n, p in net.params.items()}
    stale = 0

    n = len(train)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue  # a 1-pair batch has no in-batch negative
            offsets = rng.integers(1, len(idx), size=len(idx))
            neg_idx = idx[(np.arange(len(idx)) + offsets) % len(idx)]
            images = np.concatenate(
                [train.sketches[idx], train.photos[idx], train.photos[neg_idx]], axis=0
            )
            with ad.Tape() as tape:
                emb = net.forward(images)
                b = len(idx)
                anchor = ad.gather_rows(emb, np.arange(0, b))
                pos = ad.gather_rows(emb, np.arange(b, 2 * b))
                neg = ad.gather_rows(emb, np.arange(2 * b, 3 * b))
                loss = triplet_loss(anchor, pos, neg, config.margin)
            grads = tape.gradients(loss, params=net.params.values())
            ad.adam_step(net.params, {n_: grads[p] for n_, p in net.params.items()}, state, config.lr)
            losses.append(loss.item())

        val_acc = _validation_acc1(net, val) if len(val) else 0.0
        stats = EpochStats(epoch=epoch, loss=float(np.mean(losses)), val_acc1=val_acc)
        log.append(stats)
        if on_epoch is not None:
            on_epoch(stats)

        if val_acc > best_acc:
            best_acc = val_acc
            best_params = {n_: p.data.copy() for n_, p in net.params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break

    if len(val):
        for name, data in best_params.items():
            net.params[name].data = data
    return net, log


def save_checkpoint(net: EmbedNet) -> bytes:
    config = asdict(net.config)
    config["channels"] = list(net.config.channels)
    return checkpoint.pack(EMBED_MAGIC, config, {n: p.data for n, p in net.params.items()})


def load_checkpoint(data: bytes) -> EmbedNet:
    config_dict, params = checkpoint.unpack(data, EMBED_MAGIC)
    config_dict["channels"] = tuple(config_dict["channels"])
    net = EmbedNet(EmbedNetConfig(**config_dict))
    for name, arr in params.items():
        if name not in net.params or net.params[name].data.shape != arr.shape:
            raise checkpoint.CorruptCheckpoint(f"unexpected parameter {name} {arr.shape}")
        net.params[name].data = arr.copy()
    return net
