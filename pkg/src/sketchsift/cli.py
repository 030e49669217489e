"""Command-line entry points.

Exit codes: 0 success, 1 usage error (bad flags or config keys), 2 runtime
error (missing artifacts, module errors).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, load_config, set_key, default_config_text
from .errors import SketchSiftError, UsageError


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        raise UsageError(message)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=str, default=None, help="RunConfig key=value file")
    sub.add_argument("--out-dir", type=str, default=None, help="override out_dir")
    sub.add_argument("--seed", type=int, default=None, help="override seed")
    sub.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="sketchsift", description=__doc__)
    subparsers = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("gen-data", "generate the synthetic paired dataset"),
        ("train-retrieval", "train the embedding net with the triplet objective"),
        ("train-selector", "train the stroke-subset selector with PPO"),
        ("eval", "noise-resistance metrics, critic correlation, figures"),
        ("oracle", "exhaustive subset and prefix-limit reports"),
        ("gate", "score-gated on-the-fly retrieval report"),
        ("augment", "sample subset variants of a sketch document"),
        ("clean", "rewrite the training split as greedy-selected subsets"),
        ("serve", "run the HTTP JSON API"),
        ("init-config", "print a default config file to stdout"),
    ]:
        sub = subparsers.add_parser(name, help=help_text)
        if name != "init-config":
            _add_common(sub)
        if name == "eval":
            sub.add_argument("--analysis-pairs", type=int, default=0)
        if name == "gate":
            sub.add_argument("--analysis-pairs", type=int, default=0)
        if name == "oracle":
            sub.add_argument("--k-cap", type=int, default=None)
        if name == "augment":
            sub.add_argument("--sketch", type=str, required=True)
            sub.add_argument("--n", type=int, default=4)
        if name == "train-selector":
            sub.add_argument("--reward-variant", type=str, default=None)
            sub.add_argument("--selector-out", type=str, default=None)
    return parser


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.embed.seed = args.seed
        cfg.selector.seed = args.seed
        cfg.ppo.seed = args.seed
    for override in args.set:
        if "=" not in override:
            raise UsageError(f"--set expects KEY=VALUE, got {override!r}")
        key, value = override.split("=", 1)
        set_key(cfg, key.strip(), value.strip())
    return cfg


def _dispatch(args) -> int:
    if args.command == "init-config":
        sys.stdout.write(default_config_text())
        return 0

    cfg = _config_from_args(args)

    if args.command == "gen-data":
        dataset = pipeline.run_gen_data(cfg)
        print(f"wrote {len(dataset.entries)} pairs under {dataset.root}")
        return 0
    if args.command == "train-retrieval":
        _, log = pipeline.run_train_retrieval(cfg)
        if log:
            print(
                f"trained {len(log)} epochs; final loss {log[-1].loss:.4f}, "
                f"best val acc@1 {max(s.val_acc1 for s in log):.3f}"
            )
        print(f"checkpoint: {pipeline.embed_ckpt_path(cfg)}")
        return 0
    if args.command == "train-selector":
        if args.reward_variant is not None:
            cfg.reward.variant = args.reward_variant
            cfg.reward.__post_init__()
        if args.selector_out is not None:
            cfg.paths.selector_checkpoint = args.selector_out
        _, log = pipeline.run_train_selector(cfg)
        if log:
            print(f"trained {len(log)} epochs; final mean reward {log[-1].mean_reward:.4f}")
        print(f"checkpoint: {pipeline.selector_ckpt_path(cfg)}")
        return 0
    if args.command == "eval":
        result = pipeline.run_eval(cfg, analysis_n=args.analysis_pairs)
        r = result.noise_report
        print(
            f"acc@1 clean {r.acc1_clean:.3f} | noisy {r.acc1_noisy:.3f} | "
            f"selector {r.acc1_selected:.3f}"
        )
        print(
            f"noise recall {r.noise_recall:.3f}, precision {r.noise_precision:.3f}; "
            f"critic rho {result.correlation_rho:.3f} over {result.correlation_samples} samples"
        )
        return 0
    if args.command == "oracle":
        result = pipeline.run_oracle(cfg, k_cap=args.k_cap)
        print(
            f"evaluated {len(result.rows)} sketches; "
            f"drop-event fraction {result.drop_fraction:.4f}"
        )
        return 0
    if args.command == "gate":
        reports = pipeline.run_gate(cfg, analysis_n=args.analysis_pairs)
        for rep in reports:
            print(
                f"tau={rep.threshold:g}: saved {rep.feeds_saved_frac:.3f}, "
                f"r@A {rep.r_a_gated:.2f} vs {rep.r_a_full:.2f} ungated"
            )
        return 0
    if args.command == "augment":
        written = pipeline.run_augment(cfg, args.sketch, args.n)
        print(f"wrote {len(written)} subset documents under {written[0].parent}")
        return 0
    if args.command == "clean":
        out_dir = pipeline.run_clean(cfg)
        print(f"cleaned training split written to {out_dir}")
        return 0
    if args.command == "serve":
        import uvicorn

        from .server import create_app, runtime_from_config

        app = create_app(runtime_from_config(cfg))
        uvicorn.run(app, host=cfg.serve.host, port=cfg.serve.port, log_level="info")
        return 0
    raise UsageError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _dispatch(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SketchSiftError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
