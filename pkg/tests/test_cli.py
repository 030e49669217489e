import subprocess
import sys

import numpy as np
import pytest

from sketchsift.cli import main
from sketchsift.sketch import parse_sketch
from sketchsift.synth import load_dataset


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    """A tiny full pipeline run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli_run")
    cfg = root / "run.cfg"
    cfg.write_text(
        f"""
seed=5
out_dir={root / 'out'}
data.n_pairs=18
data.noise_strokes=2
embed.input_hw=16
embed.channels=3,5
embed.embed_dim=8
embed.lr=0.001
embed_epochs=4
selector.hidden=12
ppo.epochs=2
ppo.batch_size=6
ppo.policy_sync_every=2
ppo.update_sample=12
ppo.update_minibatch=6
ppo.update_passes=1
eval.oracle_sketches=3
"""
    )
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["train-retrieval", "--config", str(cfg)]) == 0
    assert main(["train-selector", "--config", str(cfg)]) == 0
    return root, cfg


def test_pipeline_artifacts(smoke_run):
    root, cfg = smoke_run
    out = root / "out"
    assert (out / "dataset" / "manifest.txt").exists()
    assert (out / "checkpoints" / "embed.ckpt").exists()
    assert (out / "checkpoints" / "selector.ckpt").exists()
    log = (out / "logs" / "train_selector.csv").read_text().splitlines()
    assert log[0] == "epoch,mean_reward,acc1,acc5,clip_frac,entropy"
    assert len(log) == 3
    assert (out / "figures" / "train_retrieval.png").exists()
    assert (out / "figures" / "train_selector.png").exists()


def test_eval_and_gate_and_oracle(smoke_run):
    root, cfg = smoke_run
    out = root / "out"
    assert main(["eval", "--config", str(cfg), "--analysis-pairs", "6"]) == 0
    assert (out / "reports" / "noise_resistance.csv").exists()
    assert (out / "reports" / "critic_correlation.csv").exists()
    assert (out / "figures" / "noise_resistance.png").exists()
    assert (out / "figures" / "critic_correlation.png").exists()
    assert main(["oracle", "--config", str(cfg)]) == 0
    oracle_csv = (out / "reports" / "oracle.csv").read_text().splitlines()
    assert oracle_csv[0].startswith("pair_id,k,subsets_evaluated")
    assert (out / "reports" / "oracle_rank_scatter.dat").exists()
    assert main(["gate", "--config", str(cfg), "--analysis-pairs", "6"]) == 0
    gating = (out / "reports" / "gating.csv").read_text().splitlines()
    assert gating[0].startswith("threshold,feeds_saved_frac")
    assert (out / "figures" / "gating.png").exists()


def test_augment_and_clean(smoke_run):
    root, cfg = smoke_run
    out = root / "out"
    dataset = load_dataset(out / "dataset")
    sketch_path = out / "dataset" / dataset.entries[0].sketch_path
    assert main(["augment", "--config", str(cfg), "--sketch", str(sketch_path), "--n", "3"]) == 0
    written = sorted((out / "augmented").glob("*.sketch"))
    assert len(written) == 3
    original = parse_sketch(sketch_path.read_text())
    for p in written:
        variant = parse_sketch(p.read_text())
        assert set(variant.strokes) <= set(original.strokes)

    assert main(["clean", "--config", str(cfg)]) == 0
    cleaned = load_dataset(out / "cleaned")
    originals = {e.pair_id: e for e in dataset.entries if e.split == "train"}
    sketches, photos, ids = cleaned.load_split("train")
    assert set(ids) == set(originals)
    for sketch, pid in zip(sketches, ids):
        before = parse_sketch((out / "dataset" / originals[pid].sketch_path).read_text())
        assert sketch.stroke_count <= before.stroke_count


def test_eval_missing_checkpoint_exit_2(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"out_dir={tmp_path / 'out'}\ndata.n_pairs=6\n")
    assert main(["gen-data", "--config", str(cfg)]) == 0
    rc = main(["eval", "--config", str(cfg)])
    assert rc == 2


def test_oracle_k_cap_exceeded_exit_2(smoke_run):
    root, cfg = smoke_run
    rc = main(["oracle", "--config", str(cfg), "--k-cap", "2"])
    assert rc == 2


def test_unknown_flag_exit_1():
    assert main(["gen-data", "--bogus-flag"]) == 1


def test_unknown_config_key_exit_1(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("no.such.key=1\n")
    assert main(["gen-data", "--config", str(cfg)]) == 1


def test_set_override(tmp_path):
    out = tmp_path / "out"
    rc = main(
        ["gen-data", "--out-dir", str(out), "--set", "data.n_pairs=7", "--seed", "9"]
    )
    assert rc == 0
    dataset = load_dataset(out / "dataset")
    assert len(dataset.entries) == 7


def test_init_config_prints_defaults(capsys):
    assert main(["init-config"]) == 0
    text = capsys.readouterr().out
    assert "embed.input_hw=64" in text
    assert "ppo.clip_eps=0.2" in text


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "sketchsift.cli", "init-config"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "seed=" in proc.stdout
