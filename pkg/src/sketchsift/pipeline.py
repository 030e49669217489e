"""End-to-end orchestration shared by the CLI and the acceptance suite.

Artifacts land under the run's out_dir:

    dataset/                 sketch documents, P5 photos, manifest.txt
    checkpoints/*.ckpt       embedding net / selector envelopes
    logs/*.csv               training logs
    reports/*.csv, *.dat     metric tables and x-y plot data
    figures/*.png            rendered figures
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import plots
from . import ppo as ppo_mod
from . import selector as sel
from .config import RunConfig
from .embedder import (
    EmbedNet,
    EpochStats,
    RasterPairs,
    load_checkpoint as load_embed,
    save_checkpoint as save_embed,
    train_retrieval,
)
from .errors import MissingArtifact, UsageError
from .oracles import (
    GatingReport,
    NoiseResistanceReport,
    critic_correlation,
    exhaustive_best_subset,
    gating_sweep,
    linear_limit,
    noise_resistance_eval,
)
from .ppo import RolloutEnv, SketchPairSet, train_selector
from .ranking import GalleryFeatures, stroke_prefixes
from .selector import SelectorNet, load_checkpoint as load_selector, save_checkpoint as save_selector
from .sketch import VectorSketch, rasterize
from .synth import Dataset, LabeledSketch, PairSpec, generate_dataset, load_dataset


def _run_dirs(cfg: RunConfig) -> dict[str, Path]:
    out = Path(cfg.out_dir)
    dirs = {
        "out": out,
        "checkpoints": out / "checkpoints",
        "logs": out / "logs",
        "reports": out / "reports",
        "figures": out / "figures",
    }
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


def dataset_dir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.dataset) if cfg.paths.dataset else Path(cfg.out_dir) / "dataset"


def embed_ckpt_path(cfg: RunConfig) -> Path:
    if cfg.paths.embed_checkpoint:
        return Path(cfg.paths.embed_checkpoint)
    return Path(cfg.out_dir) / "checkpoints" / "embed.ckpt"


def selector_ckpt_path(cfg: RunConfig) -> Path:
    if cfg.paths.selector_checkpoint:
        return Path(cfg.paths.selector_checkpoint)
    return Path(cfg.out_dir) / "checkpoints" / "selector.ckpt"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}; run the earlier stage first")
    return path


def base_pair_spec(cfg: RunConfig) -> PairSpec:
    return PairSpec(
        jitter_sigma=cfg.data.jitter_sigma,
        n_clean_strokes=cfg.data.n_clean_min,
        canvas=cfg.data.canvas,
        photo_hw=cfg.embed.input_hw,
        line_width=cfg.line_width,
        noise_points_min=cfg.data.noise_points_min,
        noise_points_max=cfg.data.noise_points_max,
        noise_step_max=cfg.data.noise_step_max,
    )


# --------------------------------------------------------------------------
# stage: gen-data


def run_gen_data(cfg: RunConfig) -> Dataset:
    _run_dirs(cfg)
    return generate_dataset(
        cfg.data.n_pairs,
        base_pair_spec(cfg),
        cfg.data.fractions,
        seed=cfg.seed,
        out_dir=dataset_dir(cfg),
        n_clean_range=(cfg.data.n_clean_min, cfg.data.n_clean_max),
    )


# --------------------------------------------------------------------------
# data adapters


def raster_pairs(cfg: RunConfig, dataset: Dataset, split: str) -> RasterPairs:
    sketches, photos, ids = dataset.load_split(split)
    hw = cfg.embed.input_hw
    rasters = np.stack(
        [rasterize(s, hw, hw, cfg.line_width).pixels for s in sketches]
    )
    return RasterPairs(sketches=rasters, photos=photos, ids=tuple(ids))


def _noise_rng(cfg: RunConfig, tag: str, pair_id: str) -> np.random.Generator:
    sig = zlib.crc32(f"{tag}:{pair_id}".encode("ascii"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, sig))))


def noisy_sketch_set(
    cfg: RunConfig, dataset: Dataset, split: str, n_noise: int, tag: str
) -> tuple[SketchPairSet, list[LabeledSketch]]:
    """Split sketches with n_noise planted scribbles each (seed-pinned per pair)."""
    from .synth import inject_noise

    sketches, photos, ids = dataset.load_split(split)
    spec = base_pair_spec(cfg)
    labeled = [
        inject_noise(s, n_noise, _noise_rng(cfg, tag, pid), spec, pid)
        for s, pid in zip(sketches, ids)
    ]
    pair_set = SketchPairSet(
        sketches=[lab.sketch for lab in labeled], photos=photos, ids=list(ids)
    )
    return pair_set, labeled


def analysis_pairs(
    cfg: RunConfig,
    n: int,
    n_noise: int,
    clean_range: tuple[int, int] | None = None,
) -> tuple[SketchPairSet, list[LabeledSketch]]:
    """Fresh pairs (disjoint seed space from the dataset) for correlation and
    gating analyses; the gallery is their own photos."""
    from dataclasses import replace

    from .synth import generate_pair, inject_noise

    lo, hi = clean_range or (cfg.data.n_clean_min, cfg.data.n_clean_max)
    spec = base_pair_spec(cfg)
    sketches, photos, ids, labeled = [], [], [], []
    master = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 4242))))
    families = ("polygon", "ellipse", "blob")
    for i in range(n):
        pair_spec = replace(
            spec,
            shape_family=families[i % 3],
            seed=cfg.seed * 1_000_000 + 500_000 + i,
            n_clean_strokes=int(master.integers(lo, hi + 1)),
        )
        photo, lab = generate_pair(pair_spec)
        noisy = inject_noise(
            lab.sketch, n_noise, _noise_rng(cfg, "analysis", lab.pair_id), spec, lab.pair_id
        )
        sketches.append(noisy.sketch)
        photos.append(photo.pixels)
        ids.append(lab.pair_id)
        labeled.append(noisy)
    pair_set = SketchPairSet(sketches=sketches, photos=np.stack(photos), ids=ids)
    return pair_set, labeled


def junk_episodes(cfg: RunConfig, n: int) -> list[tuple[list[VectorSketch], None]]:
    """Pairless doodle episodes: the critic should keep their scores below the
    gate, so they contribute feed savings and no retrieval curve."""
    from .ranking import stroke_prefixes as prefixes_of
    from .synth import generate_junk_sketch

    spec = base_pair_spec(cfg)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 5151))))
    episodes = []
    for _ in range(n):
        k = int(rng.integers(cfg.data.n_clean_min + 1, cfg.data.n_clean_max + 3))
        episodes.append((prefixes_of(generate_junk_sketch(spec, k, rng)), None))
    return episodes


# --------------------------------------------------------------------------
# stage: train-retrieval


def run_train_retrieval(cfg: RunConfig) -> tuple[EmbedNet, list[EpochStats]]:
    dirs = _run_dirs(cfg)
    dataset = load_dataset(_require(dataset_dir(cfg), "dataset"))
    train = raster_pairs(cfg, dataset, "train")
    val = raster_pairs(cfg, dataset, "val")
    net, log = train_retrieval(
        train, val, cfg.embed, epochs=cfg.embed_epochs, patience=cfg.embed_patience
    )
    embed_ckpt_path(cfg).parent.mkdir(parents=True, exist_ok=True)
    embed_ckpt_path(cfg).write_bytes(save_embed(net))
    with (dirs["logs"] / "train_retrieval.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_acc1"])
        for s in log:
            writer.writerow([s.epoch, f"{s.loss:.8f}", f"{s.val_acc1:.6f}"])
    if log:
        plots.save_retrieval_training(log, dirs["figures"] / "train_retrieval.png")
    return net, log


# --------------------------------------------------------------------------
# stage: train-selector


def run_train_selector(
    cfg: RunConfig,
) -> tuple[SelectorNet, list[ppo_mod.SelectorEpochStats]]:
    dirs = _run_dirs(cfg)
    dataset = load_dataset(_require(dataset_dir(cfg), "dataset"))
    net = load_embed(_require(embed_ckpt_path(cfg), "embedding checkpoint").read_bytes())
    train_set, _ = noisy_sketch_set(cfg, dataset, "train", cfg.data.noise_strokes, "trainnoise")
    val_set, _ = noisy_sketch_set(cfg, dataset, "val", cfg.data.noise_strokes, "valnoise")
    policy, log = train_selector(
        train_set,
        net,
        cfg.ppo,
        cfg.reward,
        val=val_set,
        line_width=cfg.line_width,
        selector_cfg=cfg.selector,
    )
    selector_ckpt_path(cfg).parent.mkdir(parents=True, exist_ok=True)
    selector_ckpt_path(cfg).write_bytes(save_selector(policy))
    with (dirs["logs"] / "train_selector.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_reward", "acc1", "acc5", "clip_frac", "entropy"])
        for s in log:
            writer.writerow(
                [
                    s.epoch,
                    f"{s.mean_reward:.8f}",
                    f"{s.acc1:.6f}",
                    f"{s.acc5:.6f}",
                    f"{s.clip_frac:.6f}",
                    f"{s.entropy:.6f}",
                ]
            )
    if log:
        plots.save_selector_training(log, dirs["figures"] / "train_selector.png")
    return policy, log


# --------------------------------------------------------------------------
# stage: eval


@dataclass
class EvalResult:
    noise_report: NoiseResistanceReport
    correlation_rho: float
    correlation_samples: int


def run_eval(cfg: RunConfig, analysis_n: int = 0) -> EvalResult:
    dirs = _run_dirs(cfg)
    dataset = load_dataset(_require(dataset_dir(cfg), "dataset"))
    net = load_embed(_require(embed_ckpt_path(cfg), "embedding checkpoint").read_bytes())
    policy = load_selector(
        _require(selector_ckpt_path(cfg), "selector checkpoint").read_bytes()
    )

    test_sketches, test_photos, test_ids = dataset.load_split("test")
    gallery = GalleryFeatures(net.embed(test_photos), test_ids)
    _, test_noisy = noisy_sketch_set(cfg, dataset, "test", cfg.eval.noise_strokes, "evalnoise")
    noise_report = noise_resistance_eval(
        list(zip(test_sketches, test_ids)),
        test_noisy,
        policy,
        net,
        gallery,
        line_width=cfg.line_width,
    )
    with (dirs["reports"] / "noise_resistance.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["condition", "acc1", "acc5"])
        writer.writerow(["clean", noise_report.acc1_clean, noise_report.acc5_clean])
        writer.writerow(["noisy", noise_report.acc1_noisy, noise_report.acc5_noisy])
        writer.writerow(["noisy+selector", noise_report.acc1_selected, noise_report.acc5_selected])
        writer.writerow(["noise_recall", noise_report.noise_recall, ""])
        writer.writerow(["noise_precision", noise_report.noise_precision, ""])
    plots.save_accuracy_bars(noise_report, dirs["figures"] / "noise_resistance.png")

    # selection overlays for the first few noisy test sketches
    masks = [
        sel.safe_greedy_mask(sel.encode(policy, lab.sketch).probs_array)
        for lab in test_noisy[:8]
    ]
    plots.save_selection_examples(
        [lab.sketch for lab in test_noisy[:8]], masks, dirs["figures"] / "selection_examples.png"
    )

    # critic correlation on a fresh analysis set (own gallery)
    n = analysis_n or cfg.eval.analysis_pairs
    analysis_set, _ = analysis_pairs(cfg, n, cfg.eval.noise_strokes)
    analysis_gallery = GalleryFeatures(net.embed(analysis_set.photos), analysis_set.ids)
    samples, rho = critic_correlation(
        policy,
        list(zip(analysis_set.sketches, analysis_set.ids)),
        net,
        analysis_gallery,
        step_frac=cfg.eval.completion_step,
        unit=cfg.eval.completion_unit,
        line_width=cfg.line_width,
    )
    plots.save_critic_scatter(samples, rho, dirs["figures"] / "critic_correlation.png")
    with (dirs["reports"] / "critic_correlation.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["critic_score", "percentile"])
        for score, pct in samples:
            writer.writerow([f"{score:.8f}", f"{pct:.8f}"])
        writer.writerow(["spearman_rho", f"{rho:.6f}"])
    return EvalResult(noise_report=noise_report, correlation_rho=rho, correlation_samples=len(samples))


# --------------------------------------------------------------------------
# stage: oracle


@dataclass
class OracleResult:
    rows: list[dict]
    drop_fraction: float


def run_oracle(cfg: RunConfig, k_cap: int | None = None) -> OracleResult:
    dirs = _run_dirs(cfg)
    dataset = load_dataset(_require(dataset_dir(cfg), "dataset"))
    net = load_embed(_require(embed_ckpt_path(cfg), "embedding checkpoint").read_bytes())
    test_sketches, test_photos, test_ids = dataset.load_split("test")
    gallery = GalleryFeatures(net.embed(test_photos), test_ids)
    cap = k_cap if k_cap is not None else cfg.eval.k_cap

    rows: list[dict] = []
    n_drop = 0
    limit = min(len(test_sketches), cfg.eval.oracle_sketches)
    for sketch, pid in list(zip(test_sketches, test_ids))[:limit]:
        subset = exhaustive_best_subset(sketch, net, gallery, pid, k_cap=cap, line_width=cfg.line_width)
        prefix = linear_limit(sketch, net, gallery, pid, line_width=cfg.line_width)
        n_drop += int(prefix.has_drop)
        rows.append(
            {
                "pair_id": pid,
                "k": sketch.stroke_count,
                "subsets_evaluated": subset.subsets_evaluated,
                "best_subset_rank": subset.best_rank,
                "best_prefix_rank": prefix.best_prefix_rank,
                "full_rank": subset.full_rank,
                "has_drop": int(prefix.has_drop),
            }
        )
    drop_fraction = n_drop / len(rows) if rows else 0.0
    with (dirs["reports"] / "oracle.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()) if rows else ["pair_id"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    # x-y plot data: per-sketch full rank vs best subset rank
    with (dirs["reports"] / "oracle_rank_scatter.dat").open("w") as fh:
        for row in rows:
            fh.write(f"{row['full_rank']} {row['best_subset_rank']}\n")
    summary = dirs["reports"] / "oracle_summary.txt"
    best_better = sum(1 for r in rows if r["best_subset_rank"] < r["full_rank"])
    summary.write_text(
        f"sketches evaluated: {len(rows)}\n"
        f"subset strictly better than full sketch: {best_better}/{len(rows)}\n"
        f"instances with a rank drop while drawing: {drop_fraction:.4f}\n"
    )
    return OracleResult(rows=rows, drop_fraction=drop_fraction)


# --------------------------------------------------------------------------
# stage: gate


def run_gate(cfg: RunConfig, analysis_n: int = 0) -> list[GatingReport]:
    dirs = _run_dirs(cfg)
    _require(dataset_dir(cfg), "dataset")
    net = load_embed(_require(embed_ckpt_path(cfg), "embedding checkpoint").read_bytes())
    policy = load_selector(
        _require(selector_ckpt_path(cfg), "selector checkpoint").read_bytes()
    )
    n = analysis_n or cfg.eval.analysis_pairs
    analysis_set, _ = analysis_pairs(
        cfg,
        n,
        cfg.eval.noise_strokes,
        clean_range=(cfg.eval.gate_clean_min, cfg.eval.gate_clean_max),
    )
    gallery = GalleryFeatures(net.embed(analysis_set.photos), analysis_set.ids)
    episodes = [
        (stroke_prefixes(sketch), pid)
        for sketch, pid in zip(analysis_set.sketches, analysis_set.ids)
    ]
    episodes += junk_episodes(cfg, int(round(cfg.eval.gate_junk_fraction * n)))
    reports = gating_sweep(
        episodes, policy, net, gallery, cfg.eval.tau_list, line_width=cfg.line_width
    )
    with (dirs["reports"] / "gating.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["threshold", "feeds_saved_frac", "r_a_gated", "r_b_gated", "r_a_full", "r_b_full"]
        )
        for r in reports:
            writer.writerow(
                [
                    f"{r.threshold:.6f}",
                    f"{r.feeds_saved_frac:.6f}",
                    f"{r.r_a_gated:.4f}",
                    f"{r.r_b_gated:.4f}",
                    f"{r.r_a_full:.4f}",
                    f"{r.r_b_full:.4f}",
                ]
            )
    plots.save_gating_summary(reports, dirs["figures"] / "gating.png")
    return reports


# --------------------------------------------------------------------------
# stage: augment / clean


def run_augment(cfg: RunConfig, sketch_path: Path | str, n: int) -> list[Path]:
    from .sketch import parse_sketch, serialize_sketch

    dirs = _run_dirs(cfg)
    sketch_path = Path(sketch_path)
    if not sketch_path.exists():
        raise MissingArtifact(f"sketch document {sketch_path} does not exist")
    policy = load_selector(
        _require(selector_ckpt_path(cfg), "selector checkpoint").read_bytes()
    )
    sketch = parse_sketch(sketch_path.read_text())
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 77))))
    variants = ppo_mod.augment(sketch, policy, n, rng)
    out_dir = dirs["out"] / "augmented"
    out_dir.mkdir(exist_ok=True)
    written = []
    for i, variant in enumerate(variants):
        path = out_dir / f"{sketch_path.stem}_aug{i:03d}.sketch"
        path.write_text(serialize_sketch(variant))
        written.append(path)
    return written


def run_clean(cfg: RunConfig) -> Path:
    import os

    from .sketch import serialize_sketch

    dirs = _run_dirs(cfg)
    dataset = load_dataset(_require(dataset_dir(cfg), "dataset"))
    policy = load_selector(
        _require(selector_ckpt_path(cfg), "selector checkpoint").read_bytes()
    )
    train_sketches, _, train_ids = dataset.load_split("train")
    cleaned = ppo_mod.clean_training_data(train_sketches, policy)
    out_dir = dirs["out"] / "cleaned"
    (out_dir / "sketches").mkdir(parents=True, exist_ok=True)
    lines = []
    by_id = dict(zip(train_ids, cleaned))
    for entry in dataset.entries:
        if entry.split == "train":
            rel = f"sketches/{entry.pair_id}.sketch"
            (out_dir / rel).write_text(serialize_sketch(by_id[entry.pair_id]))
            photo_rel = os.path.relpath(dataset.root / entry.photo_path, out_dir)
            lines.append(f"{entry.pair_id} {rel} {photo_rel} train\n")
    (out_dir / "manifest.txt").write_text("".join(lines))
    return out_dir
