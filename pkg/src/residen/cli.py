"""Command line surface.

Subcommands: train, eval, extract-features, cross-eval, gradcheck, synth.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error,
5 protocol error. Gradcheck returns 1 when any op fails its tolerance.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from typing import List, Optional

from .config import load_config_file, resolve_run_config
from .data import resolve_au_list
from .errors import (
    ConfigError,
    DataError,
    NumericError,
    ProtocolError,
    ResidenError,
    UsageError,
)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_PROTOCOL = 5


def _parse_au_list_arg(text: str):
    if text in ("disfa", "emotionet"):
        return resolve_au_list(text)
    try:
        return resolve_au_list([int(p) for p in text.split(",") if p.strip()])
    except ValueError:
        raise ConfigError(f"cannot parse class list {text!r}; "
                          "use 'disfa', 'emotionet' or comma-separated ids")


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextlib.contextmanager
def training_lock(out_dir: str):
    """One training process per checkpoint directory; stale locks are reclaimed."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, ".lock")
    fd = None
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                with open(path, "r", encoding="utf-8") as fh:
                    pid = int(fh.read().strip() or "0")
            except (OSError, ValueError):
                pid = 0
            if pid and _pid_alive(pid):
                raise ProtocolError(
                    f"another training process (pid {pid}) holds {path}"
                )
            with contextlib.suppress(FileNotFoundError):
                os.unlink(path)
    if fd is None:
        raise ProtocolError(f"could not acquire training lock {path}")
    os.write(fd, str(os.getpid()).encode("ascii"))
    os.close(fd)
    try:
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    from .training import train_run

    resolved = resolve_run_config(load_config_file(args.config))
    if args.seed is not None:
        resolved["seed"] = args.seed
    if args.out is not None:
        resolved["output"]["dir"] = args.out
    if args.joint_finetune:
        if resolved["architecture"].get("kind") != "fusion":
            raise ConfigError("--joint-finetune only applies to fusion runs")
        resolved["architecture"]["joint_finetune"] = True
    out_dir = resolved["output"]["dir"]
    if not out_dir:
        raise ConfigError("training needs output.dir (or --out)")
    with training_lock(out_dir):
        result = train_run(resolved, quiet=args.quiet)
    print(f"checkpoint: {result['best_path']}")
    print(f"epoch log:  {os.path.join(out_dir, 'epochs.csv')}")
    return 0


def _write_eval_outputs(report, out_dir: str, quiet: bool) -> None:
    from .metrics import write_report_csv, write_report_json
    from .plots import save_report_figure

    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "report.json")
    csv_path = os.path.join(out_dir, "report.csv")
    png_path = os.path.join(out_dir, "report.png")
    write_report_json(report, json_path)
    write_report_csv(report, csv_path)
    save_report_figure(report, png_path)
    if not quiet:
        for i, au in enumerate(report.au_ids):
            print(f"au {au:>2}: accuracy={report.accuracy[i]:.4f} "
                  f"f1={report.f1[i]:.4f} final={report.final_score[i]:.4f}")
        if report.dropped_aus:
            print("dropped units: " + ", ".join(str(a) for a in report.dropped_aus))
    print(f"mean: accuracy={report.mean_accuracy:.4f} f1={report.mean_f1:.4f} "
          f"final_score={report.mean_final_score:.4f} "
          f"({report.num_samples} samples)")
    print(f"report: {json_path}, {csv_path}, {png_path}")


def _emit_heatmaps(ctx, out_dir: str, count: int, quiet: bool) -> None:
    import numpy as np

    from .layers import Ctx
    from .metrics import class_activation_map, saliency_map
    from .plots import save_heatmap_overlay
    from .tensor import Tensor

    for sample_id in ctx.ids[:count]:
        img = ctx.dataset.image(sample_id)
        x = ctx.dataset.batch([sample_id], ctx.means)
        probs = ctx.model.forward(Tensor(x), Ctx("eval")).data[0]
        idx = int(np.argmax(probs))
        au = ctx.source.ids[idx]
        sal = saliency_map(ctx.model, x, idx)
        cam = class_activation_map(ctx.model, x, idx)
        base = os.path.join(out_dir, f"heatmap_{sample_id}_au{au}")
        save_heatmap_overlay(img.astype(np.float32) / 255.0, sal,
                             base + "_saliency.png",
                             title=f"{sample_id} unit {au} saliency")
        save_heatmap_overlay(img.astype(np.float32) / 255.0, cam,
                             base + "_cam.png",
                             title=f"{sample_id} unit {au} activation")
        if not quiet:
            print(f"heatmaps for {sample_id} (unit {au}, p={probs[idx]:.3f})")


def cmd_eval(args) -> int:
    from .training import prepare_evaluation

    ctx = prepare_evaluation(args.checkpoint, args.manifest,
                             threshold=args.threshold, split=args.split,
                             same_list_only=True)
    report = ctx.run()
    if args.cell_accuracy:
        print(f"cell accuracy: {report.cell_accuracy():.6f}")
    _write_eval_outputs(report, args.out, args.quiet)
    if args.heatmaps > 0:
        _emit_heatmaps(ctx, args.out, args.heatmaps, args.quiet)
    return 0


def cmd_cross_eval(args) -> int:
    from .training import prepare_evaluation

    target = _parse_au_list_arg(args.au_list) if args.au_list else None
    ctx = prepare_evaluation(args.checkpoint, args.manifest, au_list=target,
                             threshold=args.threshold, split=args.split)
    report = ctx.run()
    _write_eval_outputs(report, args.out, args.quiet)
    return 0


def cmd_extract_features(args) -> int:
    from .training import extract_features_to_cache

    count, width = extract_features_to_cache(args.checkpoint, args.manifest,
                                             args.out)
    print(f"wrote {count} feature vectors of width {width} to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(eps=args.eps, tolerance=args.tolerance)
    width = max(len(r.op) for r in results)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.op:<{width}}  max_rel_err={r.max_rel_err:.3e}  "
              f"({r.seconds:.2f}s)  {status}")
        failed += 0 if r.passed else 1
    total = sum(r.seconds for r in results)
    print(f"{len(results) - failed}/{len(results)} ops passed at "
          f"tolerance {args.tolerance:g} in {total:.1f}s")
    return 0 if failed == 0 else 1


def cmd_synth(args) -> int:
    from .synth import SynthSpec, generate

    if args.au_list:
        au_ids = tuple(_parse_au_list_arg(args.au_list).ids)
    elif args.num_aus is not None:
        from .data import DISFA_AUS

        if not 1 <= args.num_aus <= len(DISFA_AUS):
            raise ConfigError(f"--num-aus must be in 1..{len(DISFA_AUS)}")
        au_ids = DISFA_AUS[: args.num_aus]
    else:
        au_ids = None
    test_frac = 1.0 - args.train_frac - args.val_frac
    if test_frac < -1e-9:
        raise ConfigError("--train-frac plus --val-frac cannot exceed 1")
    spec_kwargs = dict(
        count=args.count,
        seed=args.seed,
        num_emotions=args.num_emotions,
        au_noise=args.au_noise,
        split_fractions=(args.train_frac, args.val_frac, max(0.0, test_frac)),
        out_hw=args.hw,
    )
    if au_ids is not None:
        spec_kwargs["au_list"] = au_ids
    manifest_path = generate(SynthSpec(**spec_kwargs), args.out)
    print(f"wrote {args.count} samples; manifest: {manifest_path}")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="residen",
        description="Dense-residual action unit detection toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True, help="run config JSON path")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override output.dir")
    p.add_argument("--joint-finetune", action="store_true",
                   help="unfreeze the expression extractor (fusion runs)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a detector checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--split", default=None,
                   choices=("train", "val", "test", "all"))
    p.add_argument("--heatmaps", type=int, default=0,
                   help="emit saliency/activation overlays for the first N samples")
    p.add_argument("--cell-accuracy", action="store_true",
                   help="also print the cell-level accuracy aggregate")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cross-eval",
                       help="evaluate across class lists (units may be dropped)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--au-list", default=None,
                   help="target list: 'disfa', 'emotionet' or comma-separated ids")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--split", default=None,
                   choices=("train", "val", "test", "all"))
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_cross_eval)

    p = sub.add_parser("extract-features",
                       help="write an expression feature cache for a manifest")
    p.add_argument("--checkpoint", required=True,
                   help="expression classifier checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="cache file path")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every differentiable op")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic labeled face corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--au-list", default=None)
    p.add_argument("--num-aus", type=int, default=None,
                   help="use the first N stock unit ids")
    p.add_argument("--num-emotions", type=int, default=7)
    p.add_argument("--au-noise", type=float, default=0.05)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--hw", type=int, default=128)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ProtocolError as e:
        print(f"protocol error: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except ResidenError as e:  # a subclass that slipped the ladder above
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main(None))
