"""Command-line interface: generate, classic, eval, ablate, noise.

Configuration is a flat `key = value` text file covering every pipeline
field (see DEFAULT_CONFIG_TEXT). A provided config file must be complete:
unknown or missing keys are validation errors, so a saved config or manifest
always pins the full parameter set.

Exit codes: 0 success, 2 usage/validation, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .classic import ADJUSTMENTS, classic_mosaic, load_tile_pool
from .diffusion import ExemplarPool
from .imageops import load_image, partition_blocks, save_image
from .metrics import eval_report
from .noise import MODES, normalize_variance, sample_coarse, subsample_noise, tile_rng
from .pipeline import MosaicConfig, generate_mosaic

DEFAULT_SWEEP = (0.0, 500.0, 2000.0, 5000.0, 10000.0, 20000.0)
DEFAULT_ABLATE_SEEDS = (0, 1, 2)
ABLATE_REPORT_RESOLUTION = 64


class ConfigError(Exception):
    """Invalid configuration or command usage."""


def _parse_optional_float(s: str):
    if s.lower() in ("", "auto", "none"):
        return None
    return float(s)


def _parse_bool(s: str) -> bool:
    v = s.lower()
    if v in ("true", "yes", "1"):
        return True
    if v in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_optional_str(s: str):
    return s if s else None


# key -> (parser, default-as-text)
CONFIG_SCHEMA = {
    "level": (int, "3"),
    "scale": (int, "4"),
    "steps": (int, "50"),
    "cfg_scale": (float, "7.5"),
    "w0": (float, "5000"),
    "gamma": (float, "0.95"),
    "blur_sigma": (_parse_optional_float, "auto"),
    "objective": (str, "rgb-mse"),
    "adain_enabled": (_parse_bool, "true"),
    "adain_before_guidance": (_parse_bool, "true"),
    "redenoise_after_update": (_parse_bool, "false"),
    "noise_mode": (str, "consistent"),
    "parameterization": (str, "v"),
    "master_seed": (int, "0"),
    "label": (_parse_optional_str, ""),
    "label_grid": (_parse_optional_str, ""),
    "schedule_steps": (int, "1000"),
    "beta_start": (float, "1e-4"),
    "beta_end": (float, "0.02"),
    "threads": (int, "1"),
}

DEFAULT_CONFIG_TEXT = "\n".join(
    f"{key} = {default}" for key, (_, default) in CONFIG_SCHEMA.items()
) + "\n"


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse a complete flat key = value config into typed values."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        parser, _ = CONFIG_SCHEMA[key]
        try:
            values[key] = parser(val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    missing = [k for k in CONFIG_SCHEMA if k not in values]
    if missing:
        raise ConfigError(f"{source}: missing config key {missing[0]!r}")
    return values


def load_config(path: str | None) -> dict:
    if path is None:
        return {k: parser(default) for k, (parser, default) in CONFIG_SCHEMA.items()}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))


def read_label_grid(path: str, n_tiles: int) -> list[str | None]:
    """One label token per tile, row-major, whitespace separated; '-' = none."""
    tokens = Path(path).read_text().split()
    if len(tokens) != n_tiles:
        raise ConfigError(f"label grid {path} has {len(tokens)} entries, need {n_tiles}")
    return [None if tok == "-" else tok for tok in tokens]


def build_mosaic_config(values: dict, args) -> MosaicConfig:
    """Apply CLI flag overrides on top of parsed config values."""
    values = dict(values)
    if getattr(args, "seed", None) is not None:
        values["master_seed"] = args.seed
    if getattr(args, "w0", None) is not None:
        values["w0"] = args.w0
    if getattr(args, "level", None) is not None:
        values["level"] = args.level
    if getattr(args, "mode", None) is not None:
        values["noise_mode"] = args.mode
    threads = getattr(args, "threads", None)
    if threads is None:
        threads = os.environ.get("MOSAICGEN_THREADS")
        threads = int(threads) if threads else None
    if threads is not None:
        values["threads"] = threads

    label = values.pop("label")
    label_grid = values.pop("label_grid")
    if label and label_grid:
        raise ConfigError("set either label or label_grid, not both")
    labels: str | list[str | None] | None = label
    if label_grid:
        n_tiles = 4 ** values["level"]
        labels = read_label_grid(label_grid, n_tiles)
    config = MosaicConfig(labels=labels, **values)
    try:
        config.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return config


def config_to_manifest(config: MosaicConfig) -> dict:
    doc = dataclasses.asdict(config)
    if isinstance(doc["labels"], list):
        doc["labels"] = ["-" if lab is None else lab for lab in doc["labels"]]
    return doc


def write_manifest(path: Path, command: str, config_doc: dict, inputs: dict,
                   outputs: dict, seeds: list[int], stage_times: dict) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config_doc,
        "inputs": inputs,
        "outputs": outputs,
        "seeds": seeds,
        "wall_times_s": stage_times,
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n")


def _metrics_or_note(ref, mosaic) -> dict:
    try:
        return eval_report(ref, mosaic).to_dict()
    except ValueError as exc:
        return {"skipped": str(exc)}


def cmd_generate(args) -> int:
    values = load_config(args.config)
    config = build_mosaic_config(values, args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    ref = load_image(args.ref)
    pool = ExemplarPool.from_directory(args.pool)
    load_time = time.perf_counter() - t0

    result = generate_mosaic(ref, pool, config)

    t1 = time.perf_counter()
    save_image(result.mosaic, out_dir / "mosaic.png")
    tiles_dir = out_dir / "tiles"
    tiles_dir.mkdir(exist_ok=True)
    for k, tile in enumerate(result.tiles):
        save_image(tile, tiles_dir / f"tile_{k:04d}.png")
    metrics_doc = _metrics_or_note(ref, result.mosaic)
    (out_dir / "metrics.json").write_text(json.dumps(metrics_doc, indent=2) + "\n")
    write_time = time.perf_counter() - t1

    write_manifest(
        out_dir / "manifest.json",
        command="generate",
        config_doc=config_to_manifest(config),
        inputs={"ref": str(args.ref), "pool": str(args.pool)},
        outputs={
            "mosaic": str(out_dir / "mosaic.png"),
            "tiles": str(tiles_dir),
            "metrics": str(out_dir / "metrics.json"),
        },
        seeds=[config.master_seed],
        stage_times={"load": load_time, "synthesis": result.wall_time, "write": write_time},
    )
    print(f"wrote {out_dir / 'mosaic.png'} ({len(result.tiles)} tiles, "
          f"{result.wall_time:.2f}s synthesis)")
    return 0


def cmd_classic(args) -> int:
    if args.adjust not in ADJUSTMENTS:
        raise ConfigError(f"adjust must be one of {ADJUSTMENTS}, got {args.adjust!r}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ref = load_image(args.ref)
    grid = partition_blocks(ref, args.level)
    pool = load_tile_pool(args.pool, grid.block_h, grid.block_w, max_reuse=args.max_reuse)
    load_time = time.perf_counter() - t0

    t1 = time.perf_counter()
    match_log: list[tuple[int, float]] = []
    mosaic = classic_mosaic(ref, pool, args.level, adjust=args.adjust, match_log=match_log)
    match_time = time.perf_counter() - t1

    save_image(mosaic, out_dir / "mosaic.png")
    write_manifest(
        out_dir / "manifest.json",
        command="classic",
        config_doc={
            "level": args.level,
            "adjust": args.adjust,
            "max_reuse": args.max_reuse,
            "matches": [{"tile": i, "distance": d} for i, d in match_log],
        },
        inputs={"ref": str(args.ref), "pool": str(args.pool)},
        outputs={"mosaic": str(out_dir / "mosaic.png")},
        seeds=[],
        stage_times={"load": load_time, "match": match_time},
    )
    print(f"wrote {out_dir / 'mosaic.png'} ({len(match_log)} tiles matched)")
    return 0


def _eval_pair(ref_path: Path, mosaic_path: Path) -> dict:
    ref = load_image(ref_path)
    mosaic = load_image(mosaic_path)
    if ref.shape != mosaic.shape:
        raise ConfigError(
            f"size mismatch: {ref_path} is {ref.shape}, {mosaic_path} is {mosaic.shape}"
        )
    return eval_report(ref, mosaic).to_dict()


def cmd_eval(args) -> int:
    ref_path, mosaic_path = Path(args.ref), Path(args.mosaic)
    if ref_path.is_dir() != mosaic_path.is_dir():
        raise ConfigError("eval needs two files or two directories")
    if ref_path.is_dir():
        names = sorted(p.name for p in ref_path.glob("*.png"))
        if not names:
            raise ConfigError(f"no PNG files in {ref_path}")
        pairs = {}
        for name in names:
            other = mosaic_path / name
            if not other.exists():
                raise ConfigError(f"missing mosaic counterpart for {name}")
            pairs[name] = _eval_pair(ref_path / name, other)
        keys = [k for k in next(iter(pairs.values())) if k != "metadata"]
        aggregate = {k: float(np.mean([p[k] for p in pairs.values()])) for k in keys}
        doc = {"pairs": pairs, "aggregate": aggregate}
    else:
        doc = _eval_pair(ref_path, mosaic_path)
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote {args.out}")
    return 0


def cmd_ablate(args) -> int:
    values = load_config(args.config)
    sweep = [float(w) for w in args.w0_list.split(",")] if args.w0_list else list(DEFAULT_SWEEP)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(DEFAULT_ABLATE_SEEDS)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    ref = load_image(args.ref)
    pool = ExemplarPool.from_directory(args.pool)
    rows = []
    t0 = time.perf_counter()
    for w0 in sweep:
        for seed in seeds:
            cell = dict(values)
            cell["w0"] = w0
            cell["master_seed"] = seed
            config = build_mosaic_config(cell, argparse.Namespace())
            result = generate_mosaic(ref, pool, config)
            save_image(result.mosaic, out_dir / f"mosaic_w{w0:g}_seed{seed}.png")
            report = eval_report(ref, result.mosaic)
            doc = report.to_dict()
            rows.append({
                "w0": w0,
                "seed": seed,
                **{f"pyramid_e{k}": doc[f"pyramid_e{k}"] for k in (1, 2, 3, 4)},
                "psnr": doc[f"psnr_{ABLATE_REPORT_RESOLUTION}"],
                "ssim": doc[f"ssim_{ABLATE_REPORT_RESOLUTION}"],
            })
    sweep_time = time.perf_counter() - t0

    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    write_manifest(
        out_dir / "manifest.json",
        command="ablate",
        config_doc={**values, "label": values["label"] or "",
                    "sweep_w0": sweep, "seeds": seeds},
        inputs={"ref": str(args.ref), "pool": str(args.pool)},
        outputs={"csv": str(csv_path)},
        seeds=seeds,
        stage_times={"sweep": sweep_time},
    )
    print(f"wrote {csv_path} ({len(rows)} cells)")
    return 0


def cmd_noise(args) -> int:
    if args.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {args.mode!r}")
    if args.scale < 1:
        raise ConfigError("scale must be >= 1")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    coarse = sample_coarse((1, args.height, args.width), args.seed)
    field = subsample_noise(coarse, args.scale, tile_rng(args.seed, 0), args.mode)
    pre_var = _residual_variance(field.values, coarse.values, args.scale)
    if args.scale > 1:
        field = normalize_variance(field, coarse)
    post_var = _residual_variance(field.values, coarse.values, args.scale)

    def to_png(values):
        return np.clip((values + 3.0) / 6.0, 0.0, 1.0)

    save_image(to_png(coarse.values), out_dir / "coarse.png")
    save_image(to_png(field.values), out_dir / "fine.png")

    s = args.scale
    n = s * s
    c, h, w = coarse.values.shape
    sums = field.values.reshape(c, h, s, w, s).sum(axis=(2, 4)) if s > 1 else field.values
    resid = np.abs(sums - coarse.values)
    stats = {
        "mode": args.mode,
        "seed": args.seed,
        "scale": s,
        "coarse_shape": [c, h, w],
        "fine_shape": list(field.values.shape),
        "max_block_sum_residual": float(resid.max()),
        "residual_variance_pre_normalization": pre_var,
        "residual_variance_post_normalization": post_var,
        "expected_pre_normalization": (n - 1) / n**2 if args.mode == "literal" else (n - 1) / n,
    }
    (out_dir / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    print(f"wrote {out_dir}/coarse.png, fine.png, stats.json "
          f"(max residual {stats['max_block_sum_residual']:.2e})")
    return 0


def _residual_variance(fine: np.ndarray, coarse: np.ndarray, s: int) -> float:
    """Empirical variance of the zero-sum component around each block mean."""
    if s == 1:
        return 0.0
    c, h, w = coarse.shape
    blocks = fine.reshape(c, h, s, w, s)
    mean = coarse[:, :, None, :, None] / (s * s)
    return float(np.var(blocks - mean))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mosaicgen",
        description="Generative photomosaic synthesis and evaluation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a photomosaic with guided diffusion")
    p.add_argument("--config", help="flat key = value config file (complete key set)")
    p.add_argument("--ref", required=True, help="reference PNG")
    p.add_argument("--pool", required=True, help="exemplar pool directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--threads", type=int, help="worker threads (or MOSAICGEN_THREADS)")
    p.add_argument("--w0", type=float, help="override initial guidance weight")
    p.add_argument("--level", type=int, help="override mosaic level")
    p.add_argument("--mode", choices=MODES, help="override noise mode")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("classic", help="matching-based photomosaic baseline")
    p.add_argument("--ref", required=True)
    p.add_argument("--pool", required=True, help="tile image directory")
    p.add_argument("--out", required=True)
    p.add_argument("--level", type=int, default=3)
    p.add_argument("--adjust", default="none", help="none | tone | histogram")
    p.add_argument("--max-reuse", type=int, default=None, dest="max_reuse")
    p.set_defaults(func=cmd_classic)

    p = sub.add_parser("eval", help="metrics report for a (reference, mosaic) pair")
    p.add_argument("--ref", required=True, help="reference PNG or directory")
    p.add_argument("--mosaic", required=True, help="mosaic PNG or directory")
    p.add_argument("--out", required=True, help="output JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="guidance-weight sweep with metrics CSV")
    p.add_argument("--config", help="base config file")
    p.add_argument("--ref", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--w0-list", dest="w0_list",
                   help="comma-separated sweep values (default Fig.-style grid)")
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("noise", help="export a coherent noise field for inspection")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--scale", type=int, default=8)
    p.add_argument("--mode", default="consistent")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_noise)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
