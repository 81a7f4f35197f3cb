"""Command-line entry point.

Every subcommand takes one JSON config file; artifacts default to canonical
locations under the config's output root. Exit codes: 2 for configuration
errors (the message names the bad field), 3 for missing or inconsistent
upstream artifacts, 1 for any other contract violation.
"""

from __future__ import annotations

import argparse
import os
import sys

from .errors import AvatarDiffError, ConfigError, ManifestError, MissingArtifactError
from .pipeline import (
    ablate,
    evaluate_run,
    extract_dataset_tsd,
    generate_data,
    load_config,
    run_config_hash,
    synthesize_run,
    train_alignment_stage,
    train_detail_stage,
)

ENV_OUTPUT_ROOT = "AVATARDIFF_OUT"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON run configuration file")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--set", action="append", default=[], dest="overrides",
                   metavar="PATH=VALUE",
                   help="override a config key by dotted path, "
                        "e.g. --set scene.num_frames=12")


def _config(args, extra=()):
    overrides = list(args.overrides) + list(extra)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    env_root = os.environ.get(ENV_OUTPUT_ROOT)
    if env_root:
        overrides.append(f"output_root={env_root}")
    return load_config(args.config, overrides)


def cmd_generate_data(args) -> int:
    info = generate_data(_config(args))
    print(f"wrote {info['train_frames']} train frames to {info['train_dir']}")
    print(f"wrote {info['test_frames']} test frames to {info['test_dir']}")
    print(f"config hash {info['config_hash']}")
    return 0


def cmd_extract_tsd(args) -> int:
    path = extract_dataset_tsd(_config(args), args.input, args.output)
    print(f"wrote detail maps to {path}")
    return 0


def cmd_train_tsdm(args) -> int:
    path = train_alignment_stage(_config(args), args.dataset, args.out, args.resume)
    print(f"alignment checkpoint: {path}")
    return 0


def cmd_train_fcsd(args) -> int:
    path = train_detail_stage(_config(args), args.dataset, args.tsdm, args.out,
                              args.resume)
    print(f"frame-stage checkpoint: {path}")
    return 0


def cmd_synthesize(args) -> int:
    extra = [f"sampling.steps={args.steps}"] if args.steps is not None else []
    out = synthesize_run(_config(args, extra), args.dataset, args.tsdm, args.fcsd,
                         args.out)
    print(f"generated sequence: {out}")
    return 0


def cmd_evaluate(args) -> int:
    rep = evaluate_run(_config(args), args.generated, args.gt, args.out,
                       force=args.force)
    print(f"report written to {args.out or 'the run report directory'}")
    print(f"mean l2 {rep['mean']['l2']:.6g}  mean psnr {rep['mean']['psnr']}  "
          f"pe {rep['pe']:.4f}  ee {rep['ee']:.4f}  "
          f"flow gap {rep['flow']['mean_abs_gap']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    extra = [f"sampling.steps={args.steps}"] if args.steps is not None else []
    cfg = _config(args, extra)
    out = ablate(cfg)
    for name, row in out["variants"].items():
        print(f"{name:16s} pe {row['pe']:.4f}  ee {row['ee']:.4f}  "
              f"flow gap {row['flow_gap']:.4f}")
    for check, ok in out["comparison"].items():
        print(f"{check}: {ok}")
    return 0


def cmd_show_config(args) -> int:
    cfg = _config(args)
    print(f"resolved config hash {run_config_hash(cfg)}")
    print(f"output root {cfg.output_root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avatardiff",
        description="Two-stage talking-head diffusion on procedural scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render the scene into train/test splits")
    _add_common(p)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("extract-tsd", help="write detail maps for a stored sequence")
    _add_common(p)
    p.add_argument("--input", required=True, help="sequence directory")
    p.add_argument("--output", required=True, help="output directory")
    p.set_defaults(func=cmd_extract_tsd)

    p = sub.add_parser("train-tsdm", help="train the detail-alignment stage")
    _add_common(p)
    p.add_argument("--dataset", default=None, help="training sequence directory")
    p.add_argument("--out", default=None, help="checkpoint path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train_tsdm)

    p = sub.add_parser("train-fcsd", help="train the frame synthesis stage")
    _add_common(p)
    p.add_argument("--dataset", default=None, help="training sequence directory")
    p.add_argument("--tsdm", default=None, help="alignment checkpoint")
    p.add_argument("--out", default=None, help="checkpoint path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train_fcsd)

    p = sub.add_parser("synthesize", help="generate frames for a driving sequence")
    _add_common(p)
    p.add_argument("--dataset", default=None, help="driving sequence directory")
    p.add_argument("--tsdm", default=None, help="alignment checkpoint")
    p.add_argument("--fcsd", default=None, help="frame-stage checkpoint")
    p.add_argument("--out", default=None, help="output sequence directory")
    p.add_argument("--steps", type=int, default=None, help="reverse steps per frame")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="score a generated sequence against truth")
    _add_common(p)
    p.add_argument("--generated", default=None, help="generated sequence directory")
    p.add_argument("--gt", default=None, help="ground-truth sequence directory")
    p.add_argument("--out", default=None, help="report directory")
    p.add_argument("--force", action="store_true",
                   help="evaluate even if config hashes disagree")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run every condition ablation and compare")
    _add_common(p)
    p.add_argument("--steps", type=int, default=None, help="reverse steps per frame")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("show-config", help="validate a config and print its hash")
    _add_common(p)
    p.set_defaults(func=cmd_show_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (MissingArtifactError, ManifestError) as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return 3
    except AvatarDiffError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
