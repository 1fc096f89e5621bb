"""crowdsplat command line: build-scene | make-occlusion-pairs |
make-refiner-pairs | refine | eval.

Exit codes: 0 success, 2 validation error, 3 component runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .distill import OptimConfig, StepSizes
from .fileio import atomic_write_bytes, atomic_write_json, json_safe, load_json
from .pipeline import (
    ConfigError,
    build_scene,
    eval_command,
    eval_report_text,
    make_occlusion_pairs,
    make_refiner_pairs,
    refine_command,
)
from .renderer import RenderConfig
from .scene import ClusterConfig

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _add_common(parser: argparse.ArgumentParser, need_config: bool = True) -> None:
    parser.add_argument("--config", required=need_config, help="JSON config (or a prior manifest)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker threads (falls back to CROWDSPLAT_THREADS, then 1)",
    )


def _resolve_threads(args) -> int:
    if args.threads is not None:
        return max(args.threads, 1)
    env = os.environ.get("CROWDSPLAT_THREADS")
    return max(int(env), 1) if env else 1


def _load_config(args) -> dict:
    doc = load_json(args.config)
    # Re-running from a previous manifest: unwrap its echoed config.
    if "config" in doc and "version" in doc and "kind" in doc:
        doc = doc["config"]
    if args.seed is not None:
        doc = dict(doc)
        doc["seed"] = args.seed
    return doc


def _cmd_build_scene(args) -> int:
    config = _load_config(args)
    _, _, manifest_path = build_scene(config, args.out, base=Path(args.config).parent)
    print(manifest_path)
    return EXIT_OK


def _cmd_make_occlusion_pairs(args) -> int:
    config = _load_config(args)
    manifest = make_occlusion_pairs(config, args.out, threads=_resolve_threads(args))
    print(f"{len(manifest['entries'])} samples -> {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def _cmd_make_refiner_pairs(args) -> int:
    config = _load_config(args)
    manifest = make_refiner_pairs(config, args.out, threads=_resolve_threads(args))
    counts = manifest["split_counts"]
    print(
        f"{len(manifest['entries'])} entries "
        f"({counts['train']} train / {counts['test']} test scenes) "
        f"-> {Path(args.out) / 'manifest.json'}"
    )
    return EXIT_OK


def _optim_config_from(doc: dict) -> OptimConfig:
    step_doc = doc.get("step_sizes", {})
    render_doc = doc.get("render", {})
    return OptimConfig(
        iterations=int(doc.get("iterations", 500)),
        step_sizes=StepSizes(**step_doc),
        lambda_ssim=float(doc.get("lambda_ssim", 0.2)),
        beta1=float(doc.get("beta1", 0.9)),
        beta2=float(doc.get("beta2", 0.999)),
        eps=float(doc.get("eps", 1e-8)),
        views_per_step=int(doc.get("views_per_step", 4)),
        seed=int(doc.get("seed", 0)),
        render_config=RenderConfig(**render_doc),
    )


def _cmd_refine(args) -> int:
    config = _load_config(args) if args.config else {}
    cluster_doc = config.get("cluster", {})
    report = refine_command(
        scene_manifest=args.scene,
        out_dir=args.out,
        refiner_spec=config.get("refiner", {"kind": "identity"}),
        cluster_cfg=ClusterConfig(
            eps=float(cluster_doc.get("eps", 1.5)),
            min_pts=int(cluster_doc.get("min_pts", 1)),
        ),
        optim_cfg=_optim_config_from(config.get("optim", {})),
        rig_spec=config.get("rig", {}),
        image_size=config.get("image_size", (256, 256)),
        focal=config.get("focal"),
        refresh_every=args.refresh_every,
    )
    print(f"{len(report['clusters'])} clusters refined -> {Path(args.out) / 'report.json'}")
    if report["errors"]:
        for err in report["errors"]:
            print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_eval(args) -> int:
    summary = eval_command(args.dir_a, args.dir_b, extractor_seed=args.seed or 0)
    out = Path(args.out)
    atomic_write_json(out / "report.json", json_safe(summary))
    text = eval_report_text(summary)
    atomic_write_bytes(out / "report.txt", text.encode("utf-8"))
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-scene", help="skin bodies and write scene PLYs + manifest")
    _add_common(p)
    p.set_defaults(fn=_cmd_build_scene)

    p = sub.add_parser("make-occlusion-pairs", help="emit occluded/full training pairs")
    _add_common(p)
    p.set_defaults(fn=_cmd_make_occlusion_pairs)

    p = sub.add_parser("make-refiner-pairs", help="emit coarse/gt/normal refiner pairs")
    _add_common(p)
    p.set_defaults(fn=_cmd_make_refiner_pairs)

    p = sub.add_parser("refine", help="cluster-wise pseudo-GT refinement of a scene")
    p.add_argument("--scene", required=True, help="scene manifest JSON")
    p.add_argument(
        "--refresh-every",
        type=int,
        default=0,
        help="regenerate pseudo-ground truths every N iterations (0 = once)",
    )
    _add_common(p, need_config=False)
    p.set_defaults(fn=_cmd_refine)

    p = sub.add_parser("eval", help="PSNR/SSIM/feature-distance over paired directories")
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    p.add_argument("--seed", type=int, default=0, help="feature extractor seed")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"crowdsplat: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"crowdsplat: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # runtime failures from components
        print(f"crowdsplat: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
