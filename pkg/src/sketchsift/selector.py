"""Stroke-subset selector: hierarchical recurrent encoder with a per-stroke
keep/drop head and a scalar retrievability (value) head.

Each stroke runs through a shared gated recurrent encoder (all strokes of a
sketch advance in one batched step per time index); the sequence of final
stroke features runs through a second recurrent pass whose final state is the
sketch-level context. Stroke features fused with the context feed both heads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .errors import EmptySketch, LengthMismatch, ShapeMismatch
from .sketch import StrokeMask, VectorSketch

log = logging.getLogger(__name__)

SELECTOR_MAGIC = "SKETCHSIFT-SELECTOR"
HEAD_KINDS = ("categorical", "bernoulli")


@dataclass
class SelectorConfig:
    hidden: int = 128
    head: str = "categorical"
    seed: int = 0
    point_deltas: bool = True  # append per-point deltas to the coordinate features

    def __post_init__(self) -> None:
        if self.hidden < 8:
            raise LengthMismatch(f"hidden {self.hidden} < 8")
        if self.head not in HEAD_KINDS:
            raise LengthMismatch(f"head {self.head!r} not in {HEAD_KINDS}")

    @property
    def input_features(self) -> int:
        return 4 if self.point_deltas else 2


@dataclass
class PolicyOutput:
    probs: ad.Tensor  # (K, 2), columns [select, ignore]
    stroke_features: ad.Tensor  # (K, hidden)
    value: ad.Tensor  # (1, 1)

    @property
    def probs_array(self) -> np.ndarray:
        return self.probs.data

    @property
    def value_scalar(self) -> float:
        return float(self.value.data[0, 0])


@dataclass
class BatchPolicyOutput:
    """Outputs for a ragged batch: stroke rows are the sketches' strokes
    concatenated in order; offsets[b] is sketch b's first row."""

    probs: ad.Tensor  # (S, 2) over all strokes of all sketches
    stroke_features: ad.Tensor  # (S, hidden)
    values: ad.Tensor  # (B, 1)
    offsets: tuple[int, ...]
    counts: tuple[int, ...]

    def probs_of(self, b: int) -> np.ndarray:
        start = self.offsets[b]
        return self.probs.data[start : start + self.counts[b]]


def _gru_gate_params(rng, name, in_dim, hidden, params):
    bound = 1.0 / np.sqrt(hidden)
    for gate in ("z", "r", "c"):
        params[f"{name}.Wx_{gate}"] = ad.parameter(
            rng.uniform(-bound, bound, size=(in_dim, hidden))
        )
        params[f"{name}.Wh_{gate}"] = ad.parameter(
            rng.uniform(-bound, bound, size=(hidden, hidden))
        )
        params[f"{name}.b_{gate}"] = ad.parameter(np.zeros(hidden))


class SelectorNet:
    def __init__(self, config: SelectorConfig):
        self.config = config
        rng = np.random.Generator(np.random.PCG64(config.seed))
        d = config.hidden
        self.params: dict[str, ad.Tensor] = {}
        _gru_gate_params(rng, "enc", config.input_features, d, self.params)
        _gru_gate_params(rng, "ctx", d, d, self.params)
        self.params["fuse.gamma"] = ad.parameter(np.ones(d))
        self.params["fuse.beta"] = ad.parameter(np.zeros(d))
        head_cols = 2 if config.head == "categorical" else 1
        self.params["head.w"] = ad.parameter(rng.uniform(-0.05, 0.05, size=(d, head_cols)))
        self.params["head.b"] = ad.parameter(np.zeros(head_cols))
        self.params["value.w"] = ad.parameter(rng.uniform(-0.05, 0.05, size=(d, 1)))
        self.params["value.b"] = ad.parameter(np.zeros(1))

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def clone(self) -> "SelectorNet":
        other = SelectorNet(self.config)
        for name, p in self.params.items():
            other.params[name].data = p.data.copy()
        return other

    def copy_params_from(self, other: "SelectorNet") -> None:
        for name, p in other.params.items():
            self.params[name].data = p.data.copy()

    # -- recurrent cells ----------------------------------------------------

    def _gru_step(self, prefix: str, x: ad.Tensor, h: ad.Tensor) -> ad.Tensor:
        p = self.params
        z = ad.sigmoid(
            ad.add(
                ad.add(ad.matmul(x, p[f"{prefix}.Wx_z"]), ad.matmul(h, p[f"{prefix}.Wh_z"])),
                p[f"{prefix}.b_z"],
            )
        )
        r = ad.sigmoid(
            ad.add(
                ad.add(ad.matmul(x, p[f"{prefix}.Wx_r"]), ad.matmul(h, p[f"{prefix}.Wh_r"])),
                p[f"{prefix}.b_r"],
            )
        )
        c = ad.tanh(
            ad.add(
                ad.add(
                    ad.matmul(x, p[f"{prefix}.Wx_c"]),
                    ad.matmul(ad.mul(r, h), p[f"{prefix}.Wh_c"]),
                ),
                p[f"{prefix}.b_c"],
            )
        )
        keep = ad.add_scalar(ad.neg(z), 1.0)  # 1 - z
        return ad.add(ad.mul(keep, h), ad.mul(z, c))


def _stroke_feature_rows(sketches: Sequence[VectorSketch], with_deltas: bool):
    """Pack all strokes of all sketches into (N_max, S, F) step inputs plus a
    (N_max, S) point-valid mask; rows follow sketch order."""
    feats = 4 if with_deltas else 2
    arrays = []
    for sketch in sketches:
        w = float(sketch.canvas_w)
        h = float(sketch.canvas_h)
        for stroke in sketch.strokes:
            scaled = stroke.to_array() / np.array([w, h])
            if with_deltas:
                deltas = np.zeros_like(scaled)
                deltas[1:] = scaled[1:] - scaled[:-1]
                scaled = np.concatenate([scaled, deltas], axis=1)
            arrays.append(scaled)
    total = len(arrays)
    n_max = max(len(a) for a in arrays)
    steps = np.zeros((n_max, total, feats))
    valid = np.zeros((n_max, total))
    for i, arr in enumerate(arrays):
        steps[: len(arr), i] = arr
        valid[: len(arr), i] = 1.0
    return steps, valid


def _masked_gru(net: SelectorNet, prefix: str, steps_fn, valid: np.ndarray, rows: int) -> ad.Tensor:
    """Run a gated recurrence over time-major inputs, holding finished rows."""
    d = net.config.hidden
    h = ad.constant(np.zeros((rows, d)))
    for t in range(valid.shape[0]):
        h_new = net._gru_step(prefix, steps_fn(t), h)
        gate = np.repeat(valid[t][:, None], d, axis=1)
        h = ad.add(
            ad.mul(ad.constant(gate), h_new), ad.mul(ad.constant(1.0 - gate), h)
        )
    return h


def encode_batch(net: SelectorNet, sketches: Sequence[VectorSketch]) -> BatchPolicyOutput:
    """Encode a ragged batch of sketches in one op stream.

    All strokes advance through the shared stroke encoder together; the
    per-sketch context recurrence then steps over stroke index with row
    masking, and segment matrices pool per-sketch values.
    """
    sketches = list(sketches)
    if not sketches or any(s is None or s.stroke_count < 1 for s in sketches):
        raise EmptySketch("selector needs at least one stroke per sketch")
    d = net.config.hidden
    counts = tuple(s.stroke_count for s in sketches)
    offsets = tuple(int(v) for v in np.concatenate([[0], np.cumsum(counts)[:-1]]))
    n_sketches = len(sketches)
    total = sum(counts)

    steps, valid = _stroke_feature_rows(sketches, net.config.point_deltas)
    stroke_feats = _masked_gru(
        net, "enc", lambda t: ad.constant(steps[t]), valid, rows=total
    )  # (S, d)

    k_max = max(counts)
    ctx_idx = np.zeros((k_max, n_sketches), dtype=np.int64)
    ctx_valid = np.zeros((k_max, n_sketches))
    for b, (start, k) in enumerate(zip(offsets, counts)):
        ctx_idx[:, b] = start + np.minimum(np.arange(k_max), k - 1)
        ctx_valid[:k, b] = 1.0
    ctx = _masked_gru(
        net,
        "ctx",
        lambda t: ad.gather_rows(stroke_feats, ctx_idx[t]),
        ctx_valid,
        rows=n_sketches,
    )  # (B, d)

    sketch_of_stroke = np.repeat(np.arange(n_sketches), counts)
    ctx_rows = ad.gather_rows(ctx, sketch_of_stroke)  # (S, d)
    fused = ad.layer_norm(
        ad.add(stroke_feats, ctx_rows), net.params["fuse.gamma"], net.params["fuse.beta"]
    )

    if net.config.head == "categorical":
        logits = ad.add(ad.matmul(fused, net.params["head.w"]), net.params["head.b"])
        probs = ad.softmax_rows(logits)
    else:
        p_select = ad.sigmoid(
            ad.add(ad.matmul(fused, net.params["head.w"]), net.params["head.b"])
        )
        probs = ad.hstack2(p_select, ad.add_scalar(ad.neg(p_select), 1.0))

    avg = np.zeros((n_sketches, total))
    for b, (start, k) in enumerate(zip(offsets, counts)):
        avg[b, start : start + k] = 1.0 / k
    pooled = ad.matmul(ad.constant(avg), fused)  # (B, d) per-sketch mean
    values = ad.add(ad.matmul(pooled, net.params["value.w"]), net.params["value.b"])
    return BatchPolicyOutput(
        probs=probs,
        stroke_features=fused,
        values=values,
        offsets=offsets,
        counts=counts,
    )


def encode(net: SelectorNet, sketch: VectorSketch) -> PolicyOutput:
    """Per-stroke select/ignore probabilities, fused features, and the value."""
    if sketch is None or sketch.stroke_count < 1:
        raise EmptySketch("selector needs at least one stroke")
    out = encode_batch(net, [sketch])
    return PolicyOutput(
        probs=out.probs, stroke_features=out.stroke_features, value=out.values
    )


def critic_score(net: SelectorNet, sketch: VectorSketch) -> float:
    return encode(net, sketch).value_scalar


def critic_scores(net: SelectorNet, sketches: Sequence[VectorSketch]) -> np.ndarray:
    """Batched critic values, one per sketch."""
    return encode_batch(net, sketches).values.data[:, 0].copy()


# --------------------------------------------------------------------------
# action utilities

PROB_FLOOR = 1e-12


def sample_mask(probs: np.ndarray, rng: np.random.Generator) -> tuple[StrokeMask, float]:
    """Independent per-stroke draws; returns the mask and its total log-prob."""
    probs = np.asarray(probs, dtype=np.float64)
    u = rng.random(probs.shape[0])
    select = u < probs[:, 0]
    chosen = np.where(select, probs[:, 0], probs[:, 1])
    logp = float(np.log(np.maximum(chosen, PROB_FLOOR)).sum())
    return StrokeMask(tuple(bool(b) for b in select)), logp


def log_prob_of(probs: np.ndarray, mask: StrokeMask) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[0] != len(mask):
        raise LengthMismatch(f"{probs.shape[0]} prob rows for mask of {len(mask)}")
    chosen = np.where(np.array(mask.bits), probs[:, 0], probs[:, 1])
    return float(np.log(np.maximum(chosen, PROB_FLOOR)).sum())


def log_prob_tensor(probs: ad.Tensor, mask: StrokeMask) -> ad.Tensor:
    """Differentiable total log-prob of the mask under (K, 2) probability rows."""
    if probs.shape[0] != len(mask):
        raise LengthMismatch(f"{probs.shape[0]} prob rows for mask of {len(mask)}")
    onehot = np.zeros(probs.shape)
    for i, bit in enumerate(mask.bits):
        onehot[i, 0 if bit else 1] = 1.0
    chosen = ad.sum_(ad.mul(ad.constant(onehot), ad.clip(probs, PROB_FLOOR, 1.0)), axis=1)
    return ad.sum_(ad.log(chosen))


def entropy(probs: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    p = np.maximum(probs, PROB_FLOOR)
    return float(-(p * np.log(p)).sum(axis=1).mean())


def entropy_tensor(probs: ad.Tensor) -> ad.Tensor:
    """Mean per-stroke entropy as a differentiable scalar."""
    p = ad.clip(probs, PROB_FLOOR, 1.0)
    return ad.neg(ad.mean(ad.sum_(ad.mul(p, ad.log(p)), axis=1)))


def greedy_mask(probs: np.ndarray) -> StrokeMask:
    """Per-stroke argmax; exact ties select."""
    probs = np.asarray(probs, dtype=np.float64)
    return StrokeMask(tuple(bool(b) for b in probs[:, 0] >= probs[:, 1]))


def safe_greedy_mask(probs: np.ndarray) -> StrokeMask:
    """Greedy mask, but an all-ignore outcome keeps the most likely stroke."""
    mask = greedy_mask(probs)
    if mask.selected_count > 0:
        return mask
    keep = int(np.argmax(np.asarray(probs)[:, 0]))
    return StrokeMask(tuple(i == keep for i in range(len(mask))))


def sample_mask_nonempty(
    probs: np.ndarray, rng: np.random.Generator
) -> tuple[StrokeMask, float]:
    """Sampling with the training rule: resample an all-ignore draw once, then
    force all-select (logged)."""
    mask, logp = sample_mask(probs, rng)
    if mask.selected_count > 0:
        return mask, logp
    mask, logp = sample_mask(probs, rng)
    if mask.selected_count > 0:
        return mask, logp
    log.info("all-ignore sample twice; forcing all-select")
    forced = StrokeMask.all_select(probs.shape[0])
    return forced, log_prob_of(probs, forced)


# --------------------------------------------------------------------------
# persistence


def save_checkpoint(net: SelectorNet) -> bytes:
    return checkpoint.pack(
        SELECTOR_MAGIC, asdict(net.config), {n: p.data for n, p in net.params.items()}
    )


def load_checkpoint(data: bytes) -> SelectorNet:
    config_dict, params = checkpoint.unpack(data, SELECTOR_MAGIC)
    net = SelectorNet(SelectorConfig(**config_dict))
    for name, arr in params.items():
        if name not in net.params or net.params[name].data.shape != arr.shape:
            raise checkpoint.CorruptCheckpoint(f"unexpected parameter {name} {arr.shape}")
        net.params[name].data = arr.copy()
    return net
