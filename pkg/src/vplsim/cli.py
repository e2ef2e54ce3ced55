"""Command-line front end.

Subcommands: `gen` (lens sample files), `psf` (PSF grid cache), `degrade`
(single image or manifest), `checkerboard` (diagnostic target), `eval`
(segmentation scoring).  Every run that writes artifacts also writes a
JSON config echo sufficient to reproduce it; all randomness flows from
the explicit --seed.  Exit codes: 0 success, 1 validation or runtime
failure, 2 usage error.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .diffraction import (
    DiffractionConfig,
    build_psf_grid,
    load_psf_grid,
    save_psf_grid,
)
from .render import (
    DatasetManifest,
    ManifestEntry,
    PatchLayout,
    annulus_gradient_ratio,
    default_output_name,
    degrade_dataset,
    read_manifest,
    render_checkerboard,
    save_rgb,
    write_manifest,
)
from .segeval import ConfusionMatrix, accumulate, load_label_image, report, summary
from .vplgen import (
    level_id_for,
    level_spec,
    load_sample,
    sample_level5,
    sample_vpl,
    save_sample,
)

ECHO_NAME = "run-config.json"


class UsageError(Exception):
    """Bad argument combination detected after parsing (exit 2)."""


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration of one run, echoed next to its outputs."""

    command: str
    seed: int
    jobs: int
    optics: DiffractionConfig
    layout: PatchLayout
    options: dict

    def to_dict(self) -> dict:
        return {
            "tool": "vplsim",
            "version": __version__,
            "command": self.command,
            "seed": self.seed,
            "jobs": self.jobs,
            "optics": asdict(self.optics),
            "layout": asdict(self.layout),
            "options": self.options,
        }

    def write_echo(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _parse_level(text):
    t = text.strip().upper()
    if t in {"1", "2", "3", "4", "5"}:
        return None, int(t)
    if len(t) == 2 and t[0] in "CH" and t[1] in "12345":
        return ("csl" if t[0] == "C" else "hrdl"), int(t[1])
    raise argparse.ArgumentTypeError(
        f"unknown level {text!r}; expected 1-5, C1-C5, or H1-H5")


def _parse_dims(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like 512x512, got {text!r}")
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("dims must be positive")
    return h, w


def _add_optics_flags(p):
    p.add_argument("--config", metavar="FILE",
                   help="JSON config file; individual flags override it")
    p.add_argument("--pupil-samples", type=int)
    p.add_argument("--padding-factor", type=int)
    p.add_argument("--kernel-size", type=int)
    p.add_argument("--pixel-pitch", type=float, metavar="UM")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--overlap", type=int)


def _resolve_config(args):
    """Merge config file and flags into optics + layout (flags win)."""
    optics_doc, layout_doc = {}, {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        optics_doc = dict(doc.get("optics", {}))
        layout_doc = dict(doc.get("layout", {}))
    if "wavelengths" in optics_doc:
        optics_doc["wavelengths"] = tuple(
            (c, float(lam)) for c, lam in optics_doc["wavelengths"])
    overrides = {
        "pupil_samples": args.pupil_samples,
        "padding_factor": args.padding_factor,
        "psf_kernel_size": args.kernel_size,
        "pixel_pitch_um": args.pixel_pitch,
    }
    optics_doc.update({k: v for k, v in overrides.items() if v is not None})
    if args.patch_size is not None:
        layout_doc["patch_size"] = args.patch_size
    if args.overlap is not None:
        layout_doc["overlap"] = args.overlap
    return DiffractionConfig(**optics_doc), PatchLayout(**layout_doc)


def _write_summary(args, run: RunConfig, results: dict) -> None:
    if getattr(args, "json_summary", None):
        doc = run.to_dict()
        doc["results"] = results
        with open(args.json_summary, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _load_samples(directory) -> dict:
    files = sorted(Path(directory).glob("*.json"))
    files = [f for f in files if f.name != ECHO_NAME]
    samples = {}
    for f in files:
        s = load_sample(f)
        samples[s.sample_id] = s
    if not samples:
        raise ValueError(f"no sample files (*.json) found in {directory}")
    return samples


def _grid_for(sample, optics, cache_dir):
    """Fetch a sample's PSF grid from cache or build (and cache) it."""
    if cache_dir:
        path = Path(cache_dir) / f"{sample.sample_id}.psfgrid"
        if path.exists():
            grid = load_psf_grid(path)
            if grid.config != optics:
                raise ValueError(
                    f"{path}: cached grid was built with a different configuration")
            return grid
    grid = build_psf_grid(sample, optics)
    if cache_dir:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_psf_grid(grid, Path(cache_dir) / f"{sample.sample_id}.psfgrid")
    return grid


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen(args) -> int:
    level_behavior, level = args.level
    behavior = args.behavior or level_behavior or "csl"
    if level_behavior and args.behavior and args.behavior != level_behavior:
        raise UsageError(
            f"--behavior {args.behavior} conflicts with --level {level_behavior[0].upper()}{level}")
    count = args.count if args.count is not None else (20 if level == 5 else 1)
    if count < 1:
        raise UsageError("--count must be >= 1")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(args.seed).generate_state(count, dtype=np.uint64)
    if level == 5:
        samples = sample_level5(behavior, count, (int(s) for s in seeds))
    else:
        spec = level_spec(level_id_for(behavior, level))
        samples = [sample_vpl(spec, behavior, int(s)) for s in seeds]
    run = RunConfig("gen", args.seed, 1, *_resolve_config(args), {
        "behavior": behavior, "level": level, "count": count, "out": str(out_dir)})
    paths = []
    for s in samples:
        p = out_dir / f"{s.sample_id}.json"
        save_sample(s, p)
        paths.append(str(p))
    run.write_echo(out_dir / ECHO_NAME)
    print(f"wrote {len(paths)} sample(s) to {out_dir}")
    _write_summary(args, run, {"samples": [s.sample_id for s in samples],
                               "files": paths})
    return 0


def _cmd_psf(args) -> int:
    optics, layout = _resolve_config(args)
    sample = load_sample(args.sample)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = build_psf_grid(sample, optics)
    path = out_dir / f"{sample.sample_id}.psfgrid"
    save_psf_grid(grid, path)
    run = RunConfig("psf", args.seed, 1, optics, layout,
                    {"sample": str(args.sample), "out": str(path)})
    run.write_echo(out_dir / ECHO_NAME)
    print(f"cached PSF grid: {path}")
    _write_summary(args, run, {"grid": str(path),
                               "kernel_size": grid.kernel_size,
                               "pitch_um": grid.pitch_um})
    return 0


def _cmd_degrade(args) -> int:
    optics, layout = _resolve_config(args)
    samples = _load_samples(args.samples)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.image:
        name = default_output_name(args.image, args.sample_id or "assigned")
        entries = [ManifestEntry(args.image, str(out_dir / name),
                                 args.sample_id or "")]
    else:
        src = read_manifest(args.manifest)
        entries = []
        for e in src.entries:
            out = e.output_path
            if not os.path.isabs(out):
                out = str(out_dir / out)
            entries.append(ManifestEntry(e.input_path, out, e.sample_id, e.seed))
    needed = {e.sample_id for e in entries if e.sample_id}
    unknown = needed - set(samples)
    if unknown:
        raise ValueError(f"manifest references unknown sample(s): {sorted(unknown)}")
    if any(not e.sample_id for e in entries):
        needed = set(samples)           # unpinned entries draw from the full pool

    grids = {sid: _grid_for(samples[sid], optics, args.psf_cache)
             for sid in sorted(needed)}
    result = degrade_dataset(DatasetManifest(entries=entries), grids, layout,
                             seed=args.seed, jobs=args.jobs)
    if args.image and not result.failures:
        # single-image runs name the output after the drawn sample
        entry = result.manifest.entries[0]
        final = out_dir / default_output_name(entry.input_path, entry.sample_id)
        if str(final) != entry.output_path:
            os.replace(entry.output_path, final)
            entry.output_path = str(final)
    write_manifest(result.manifest, out_dir / "manifest.tsv")
    run = RunConfig("degrade", args.seed, args.jobs, optics, layout, {
        "image": args.image, "manifest": args.manifest,
        "samples": str(args.samples), "out": str(out_dir),
        "psf_cache": args.psf_cache, "sample_id": args.sample_id})
    run.write_echo(out_dir / ECHO_NAME)
    for entry, error in result.failures:
        print(f"vplsim: warning: {entry.input_path}: {error}", file=sys.stderr)
    done = len(result.manifest.entries) - len(result.failures)
    print(f"degraded {done}/{len(result.manifest.entries)} image(s) to {out_dir}")
    _write_summary(args, run, {
        "outputs": [e.output_path for e in result.manifest.entries],
        "assignments": {e.output_path: e.sample_id for e in result.manifest.entries},
        "failures": [[e.input_path, msg] for e, msg in result.failures]})
    return 1 if result.failures else 0


def _cmd_checkerboard(args) -> int:
    optics, layout = _resolve_config(args)
    sample = load_sample(args.sample)
    grid = _grid_for(sample, optics, args.psf_cache)
    img = render_checkerboard(sample, args.dims, args.square, optics,
                              layout, grid=grid)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_rgb(out, img)
    ratio = annulus_gradient_ratio(img)
    run = RunConfig("checkerboard", args.seed, 1, optics, layout, {
        "sample": str(args.sample), "out": str(out),
        "dims": list(args.dims), "square": args.square})
    run.write_echo(out.with_name(out.stem + ".config.json"))
    print(f"{sample.sample_id}: annulus/center gradient ratio {ratio:.4f}")
    _write_summary(args, run, {"image": str(out), "sample": sample.sample_id,
                               "gradient_ratio": ratio})
    return 0


def _cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    names = sorted(p.name for p in pred_dir.iterdir() if p.is_file())
    pairs = [(pred_dir / n, gt_dir / n) for n in names if (gt_dir / n).is_file()]
    if not pairs:
        raise ValueError(f"no prediction/ground-truth pairs between {pred_dir} and {gt_dir}")
    conf = ConfusionMatrix(n_classes=args.classes, ignore_index=args.ignore_index)
    for pred_path, gt_path in pairs:
        accumulate(conf, load_label_image(pred_path), load_label_image(gt_path))
    sys.stdout.write(report(conf))
    run = RunConfig("eval", args.seed, 1, *_resolve_config(args), {
        "pred": str(pred_dir), "gt": str(gt_dir), "pairs": len(pairs),
        "classes": args.classes, "ignore_index": args.ignore_index})
    _write_summary(args, run, summary(conf))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vplsim",
        description="Virtual lens sample generation, PSF synthesis, and "
                    "spatially-variant image degradation.")
    parser.add_argument("--version", action="version",
                        version=f"vplsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate lens sample files")
    p.add_argument("--level", type=_parse_level, required=True,
                   help="1-5, or a level id like C3 / H2")
    p.add_argument("--behavior", choices=("csl", "hrdl"))
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--json-summary", metavar="FILE")
    _add_optics_flags(p)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("psf", help="build and cache a PSF grid for a sample")
    p.add_argument("--sample", required=True, metavar="FILE")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json-summary", metavar="FILE")
    _add_optics_flags(p)
    p.set_defaults(func=_cmd_psf)

    p = sub.add_parser("degrade", help="degrade an image or a whole manifest")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", metavar="FILE")
    src.add_argument("--manifest", metavar="FILE")
    p.add_argument("--samples", required=True, metavar="DIR",
                   help="directory of sample files")
    p.add_argument("--sample-id", metavar="ID",
                   help="pin one sample (single-image mode)")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--psf-cache", metavar="DIR",
                   help="reuse / populate cached PSF grids here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--json-summary", metavar="FILE")
    _add_optics_flags(p)
    p.set_defaults(func=_cmd_degrade)

    p = sub.add_parser("checkerboard", help="render a diagnostic checkerboard")
    p.add_argument("--sample", required=True, metavar="FILE")
    p.add_argument("--out", required=True, metavar="PNG")
    p.add_argument("--dims", type=_parse_dims, default=(512, 512))
    p.add_argument("--square", type=int, default=16, metavar="PX")
    p.add_argument("--psf-cache", metavar="DIR")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json-summary", metavar="FILE")
    _add_optics_flags(p)
    p.set_defaults(func=_cmd_checkerboard)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, metavar="DIR")
    p.add_argument("--gt", required=True, metavar="DIR")
    p.add_argument("--classes", type=int, default=19)
    p.add_argument("--ignore-index", type=int, default=255)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json-summary", metavar="FILE")
    _add_optics_flags(p)
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:           # argparse usage errors / --version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vplsim: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"vplsim: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
