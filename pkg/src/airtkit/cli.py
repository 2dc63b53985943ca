"""Command-line pipeline: generate, train, encode, evaluate, export.

Every command writes its outputs plus a JSON run manifest (flags, seeds,
input/output SHA-256 hashes, wall-clock seconds) so whole pipelines can be
audited and replayed. Exit codes: 2 bad flags, 3 bad input file, 4
numerical divergence; errors print one machine-parsable line on stderr.

Image stacks (latents, PCA scores, TSR coefficients, PPT phases) reuse the
TSQ container with dt = 1, one frame per image, alongside a JSON sidecar
describing what each image is.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, autodiff
from .baselines import pca, ppt, tsr
from .io import FormatError, read_tsq, write_pgm, write_tsq
from .metrics import (
    MetricError,
    RegionMask,
    best_of_stack,
    denoise_then_pca_eval,
    iou,
    write_pc_curves,
)
from .model import ModelConfig, ModelState
from .sequence import ThermogramSequence, ValidationError, center, reshape_raster
from .synth import DEFAULT_DT, DEFAULT_N_T, PanelSpec, default_panel, defect_mask, generate
from .training import TrainingDiverged, encode_sequence, reconstruct_sequence, train

EXIT_BAD_FLAGS = 2
EXIT_BAD_INPUT = 3
EXIT_DIVERGED = 4


class InputError(Exception):
    """A referenced input file is missing or malformed."""


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Collects one run's inputs/outputs/timings, then lands as JSON."""

    def __init__(self, command: str, args: argparse.Namespace):
        flags = {k: v for k, v in vars(args).items() if k != "func"}
        self.payload = {
            "tool": "airtkit",
            "version": __version__,
            "command": command,
            "flags": {k: (str(v) if isinstance(v, Path) else v) for k, v in flags.items()},
            "seed": getattr(args, "seed", None),
            "inputs": {},
            "outputs": {},
            "wall_seconds": None,
        }
        self._start = time.perf_counter()

    def add_input(self, path) -> None:
        path = Path(path)
        if not path.exists():
            raise InputError(f"no such file: {path}")
        self.payload["inputs"][str(path)] = sha256_file(path)

    def add_output(self, path) -> None:
        self.payload["outputs"][str(path)] = sha256_file(Path(path))

    def write(self, path) -> None:
        self.payload["wall_seconds"] = time.perf_counter() - self._start
        with open(path, "w") as fh:
            json.dump(self.payload, fh, indent=2, sort_keys=True)


def manifest_path(args, primary_output) -> Path:
    if args.manifest is not None:
        return Path(args.manifest)
    out = Path(primary_output)
    return out.with_name(out.name + ".manifest.json")


def load_sequence(path) -> ThermogramSequence:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    try:
        return read_tsq(path)
    except (FormatError, ValidationError) as exc:
        raise InputError(f"bad sequence file {path}: {exc}") from exc


def load_model(path) -> ModelState:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    try:
        return ModelState.load(path)
    except (FormatError, ValidationError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"bad checkpoint {path}: {exc}") from exc


def load_mask(args) -> RegionMask:
    """Mask from --mask PGM; --classes (a panel spec echo) adds depth labels."""
    if args.classes is not None:
        path = Path(args.classes)
        if not path.exists():
            raise InputError(f"no such file: {path}")
        try:
            spec = PanelSpec.from_dict(json.loads(path.read_text()))
            return defect_mask(spec)
        except (json.JSONDecodeError, TypeError, ValidationError) as exc:
            raise InputError(f"bad panel spec {path}: {exc}") from exc
    path = Path(args.mask)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    try:
        return RegionMask.from_pgm(path)
    except (FormatError, MetricError) as exc:
        raise InputError(f"bad mask {path}: {exc}") from exc


def stack_to_tsq(images: np.ndarray, path) -> None:
    """Store an image stack in the sequence container (dt = 1 per image)."""
    write_tsq(ThermogramSequence(frames=np.asarray(images, dtype=np.float64), dt=1.0), path)


def stack_from_tsq(path) -> np.ndarray:
    return load_sequence(path).frames


# -- commands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    manifest = Manifest("synth", args)
    if args.spec is not None:
        spec_path = Path(args.spec)
        if not spec_path.exists():
            raise InputError(f"no such file: {spec_path}")
        manifest.add_input(spec_path)
        try:
            spec = PanelSpec.from_dict(json.loads(spec_path.read_text()))
        except (json.JSONDecodeError, TypeError) as exc:
            raise InputError(f"bad panel spec {spec_path}: {exc}") from exc
    else:
        spec = default_panel(noise_rel=args.noise_rel, seed=args.seed,
                             n_y=args.ny, n_x=args.nx)
    try:
        seq, mask = generate(spec, n_t=args.nt, dt=args.dt)
    except ValidationError as exc:
        raise InputError(f"invalid panel spec: {exc}") from exc

    out = Path(args.out)
    write_tsq(seq, out)
    mask_path = Path(args.mask_out) if args.mask_out else out.with_suffix(".mask.pgm")
    mask.to_pgm(mask_path)
    spec_path = Path(args.spec_out) if args.spec_out else out.with_suffix(".spec.json")
    with open(spec_path, "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
    for p in (out, mask_path, spec_path):
        manifest.add_output(p)
    manifest.write(manifest_path(args, out))
    print(f"wrote {out} ({seq.n_t}x{seq.n_y}x{seq.n_x}), {mask_path}, {spec_path}")
    return 0


def _history_csv(history, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "total", "rec", "kd", "wall_seconds"])
        for h in history:
            writer.writerow([h.epoch, h.total, h.rec, h.kd, h.wall_seconds])


def cmd_train(args) -> int:
    manifest = Manifest("train", args)
    manifest.add_input(args.tsq)
    seq = load_sequence(args.tsq)
    pm = center(reshape_raster(seq))
    subset = pm.n_pixels if args.subset.lower() == "all" else int(args.subset)
    try:
        cfg = ModelConfig(
            n_t=seq.n_t,
            mask_ratio=args.mask_ratio,
            patch_len=args.patch_len,
            noise_sigma_rel=args.noise_rel,
            kd_weight=args.alpha,
            lr=args.lr,
            batch_size=args.batch,
            epochs=args.epochs,
            subset_size=subset,
            seed=args.seed,
        )
    except ValidationError as exc:
        raise InputError(f"invalid training configuration: {exc}") from exc

    out = Path(args.out)
    history_path = Path(args.history) if args.history else out.with_suffix(".history.csv")
    try:
        result = train(pm, cfg)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            exc.last_good.save(out)
            _history_csv(exc.history, history_path)
        print(f"error code={EXIT_DIVERGED} command=train reason={exc}", file=sys.stderr)
        return EXIT_DIVERGED

    result.model.save(out)
    _history_csv(result.history, history_path)
    manifest.add_output(out)
    manifest.add_output(history_path)
    manifest.payload["epoch_wall_seconds"] = [h.wall_seconds for h in result.history]
    manifest.payload["checkpoint_hash"] = result.model.content_hash()
    manifest.write(manifest_path(args, out))
    last = result.history[-1]
    print(
        f"trained {cfg.epochs} epochs on {cfg.subset_size} pixels: "
        f"total {last.total:.6g} rec {last.rec:.6g} kd {last.kd:.6g} -> {out}"
    )
    return 0


def cmd_encode(args) -> int:
    manifest = Manifest("encode", args)
    manifest.add_input(args.tsq)
    manifest.add_input(args.model)
    seq = load_sequence(args.tsq)
    model = load_model(args.model)
    try:
        stack = encode_sequence(seq, model)
    except ValidationError as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.out)
    stack_to_tsq(stack.images, out)
    sidecar = out.with_suffix(".provenance.json")
    with open(sidecar, "w") as fh:
        json.dump(
            {
                "kind": "latent_images",
                "count": stack.n_images,
                "per_image_min": stack.mins.tolist(),
                "per_image_max": stack.maxs.tolist(),
                "provenance": stack.provenance,
            },
            fh,
            indent=2,
        )
    manifest.add_output(out)
    manifest.add_output(sidecar)
    manifest.write(manifest_path(args, out))
    print(f"encoded {stack.n_images} latent images -> {out}")
    return 0


def cmd_reconstruct(args) -> int:
    manifest = Manifest("reconstruct", args)
    manifest.add_input(args.tsq)
    manifest.add_input(args.model)
    seq = load_sequence(args.tsq)
    model = load_model(args.model)
    try:
        recon = reconstruct_sequence(seq, model)
    except ValidationError as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.out)
    write_tsq(recon, out)
    manifest.add_output(out)
    manifest.write(manifest_path(args, out))
    print(f"reconstructed sequence -> {out}")
    return 0


def cmd_pca(args) -> int:
    manifest = Manifest("pca", args)
    manifest.add_input(args.tsq)
    seq = load_sequence(args.tsq)
    pm = center(reshape_raster(seq))
    try:
        result = pca(pm, args.k)
    except ValidationError as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.out)
    stack_to_tsq(result.score_images(seq.n_y, seq.n_x), out)
    summary = {
        "kind": "pca_scores",
        "k": args.k,
        "rank": result.rank,
        "explained_variance": result.explained_variance.tolist(),
    }
    sidecar = out.with_suffix(".summary.json")
    with open(sidecar, "w") as fh:
        json.dump(summary, fh, indent=2)
    manifest.add_output(out)
    manifest.add_output(sidecar)
    manifest.write(manifest_path(args, out))
    print(f"pca: {args.k} score images (rank {result.rank}) -> {out}")
    return 0


def cmd_tsr(args) -> int:
    manifest = Manifest("tsr", args)
    manifest.add_input(args.tsq)
    seq = load_sequence(args.tsq)
    pm = reshape_raster(seq)
    try:
        result = tsr(pm, degree=args.degree, times=seq.times)
    except ValidationError as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.out)
    stack_to_tsq(result.image_stack(seq.n_y, seq.n_x), out)
    sidecar = out.with_suffix(".summary.json")
    with open(sidecar, "w") as fh:
        json.dump(
            {
                "kind": "tsr",
                "degree": args.degree,
                "images": [f"coeff_{j}" for j in range(args.degree + 1)]
                + ["dlnT_dlnt", "d2lnT_dlnt2"],
                "valid_pixels": int(result.valid.sum()),
                "total_pixels": int(result.valid.size),
            },
            fh,
            indent=2,
        )
    manifest.add_output(out)
    manifest.add_output(sidecar)
    manifest.write(manifest_path(args, out))
    print(f"tsr: degree {args.degree}, {int(result.valid.sum())} valid pixels -> {out}")
    return 0


def cmd_ppt(args) -> int:
    manifest = Manifest("ppt", args)
    manifest.add_input(args.tsq)
    seq = load_sequence(args.tsq)
    pm = reshape_raster(seq)
    result = ppt(pm)
    out = Path(args.out)
    stack_to_tsq(result.phase_images(seq.n_y, seq.n_x), out)
    sidecar = out.with_suffix(".summary.json")
    with open(sidecar, "w") as fh:
        json.dump(
            {"kind": "ppt_phases", "bins": result.phases.shape[0], "dt": seq.dt},
            fh,
            indent=2,
        )
    manifest.add_output(out)
    manifest.add_output(sidecar)
    manifest.write(manifest_path(args, out))
    print(f"ppt: {result.phases.shape[0]} phase images -> {out}")
    return 0


def cmd_eval(args) -> int:
    manifest = Manifest("eval", args)
    if args.stack is None and args.pred_mask is None:
        raise InputError("nothing to evaluate: pass --stack and/or --pred-mask")
    mask = load_mask(args)
    manifest.add_input(args.classes if args.classes else args.mask)

    report = None
    if args.stack is not None:
        manifest.add_input(args.stack)
        stack = stack_from_tsq(args.stack)
        try:
            report = best_of_stack(
                stack, mask, method=args.method, image_id=Path(args.stack).name
            )
        except MetricError as exc:
            raise InputError(f"cannot score stack: {exc}") from exc

    iou_value = None
    if args.pred_mask is not None:
        manifest.add_input(args.pred_mask)
        pred_path = Path(args.pred_mask)
        if not pred_path.exists():
            raise InputError(f"no such file: {pred_path}")
        pred = RegionMask.from_pgm(pred_path)
        try:
            iou_value = iou(pred, mask)
        except MetricError as exc:
            raise InputError(str(exc)) from exc
        if report is not None:
            report = type(report)(
                method=report.method, image_id=report.image_id,
                rows=report.rows, iou=iou_value,
            )

    out = Path(args.out)
    if report is not None:
        report.to_csv(out)
        json_path = Path(args.json) if args.json else out.with_suffix(".json")
        report.to_json(json_path)
        manifest.add_output(out)
        manifest.add_output(json_path)
        agg = report.aggregate
        line = f"eval[{args.method}]: contrast {agg.contrast:.4f} snr {agg.snr_db:.2f} dB"
        if iou_value is not None:
            line += f" iou {iou_value:.4f}"
        print(line)
    else:
        with open(out, "w") as fh:
            json.dump({"iou": iou_value}, fh, indent=2)
        manifest.add_output(out)
        print(f"eval: iou {iou_value:.4f}")
    manifest.write(manifest_path(args, out))
    return 0


def cmd_denoise_eval(args) -> int:
    manifest = Manifest("denoise-eval", args)
    manifest.add_input(args.tsq)
    manifest.add_input(args.model)
    seq = load_sequence(args.tsq)
    model = load_model(args.model)
    mask = load_mask(args)
    try:
        points = denoise_then_pca_eval(seq, model, mask, k=args.k)
    except (ValidationError, MetricError) as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.out)
    write_pc_curves(points, out)
    manifest.add_output(out)
    manifest.write(manifest_path(args, out))
    best = max(points, key=lambda p: p.contrast)
    print(
        f"denoise-eval: best PC {best.pc_index} contrast {best.contrast:.4f} "
        f"snr {best.snr_db:.2f} dB over {len(points)} PCs -> {out}"
    )
    return 0


def cmd_export(args) -> int:
    manifest = Manifest("export", args)
    manifest.add_input(args.stack)
    stack = stack_from_tsq(args.stack)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    norms = []
    stem = Path(args.stack).stem
    for j, img in enumerate(stack):
        lo, hi = float(img.min()), float(img.max())
        scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
        path = outdir / f"{stem}_{j:03d}.pgm"
        write_pgm(np.round(scaled * 65535).astype(np.int64), path, maxval=65535)
        manifest.add_output(path)
        norms.append({"image": path.name, "min": lo, "max": hi})
    norm_path = outdir / f"{stem}_normalization.json"
    with open(norm_path, "w") as fh:
        json.dump(norms, fh, indent=2)
    manifest.add_output(norm_path)
    manifest.write(manifest_path(args, norm_path))
    print(f"exported {len(stack)} 16-bit PGM images to {outdir}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="airtkit",
        description="Active infrared thermography toolkit: synthetic panels, "
        "classical baselines, masked autoencoder training, and metrics.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, output_flag=True):
        p.add_argument("--seed", type=int, default=0, help="root RNG seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap (results are identical for any value)")
        p.add_argument("--manifest", default=None,
                       help="manifest path (default: alongside the main output)")

    p = sub.add_parser("synth", help="generate a synthetic pulsed inspection")
    p.add_argument("--out", required=True, help="output TSQ path")
    p.add_argument("--nt", type=int, default=DEFAULT_N_T)
    p.add_argument("--dt", type=float, default=DEFAULT_DT)
    p.add_argument("--ny", type=int, default=64)
    p.add_argument("--nx", type=int, default=64)
    p.add_argument("--noise-rel", type=float, default=0.05,
                   help="noise std as a fraction of peak signal")
    p.add_argument("--spec", default=None, help="panel spec JSON (overrides presets)")
    p.add_argument("--mask-out", default=None)
    p.add_argument("--spec-out", default=None)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the masked autoencoder")
    p.add_argument("--tsq", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--subset", default="1000", help="pixel count or 'all'")
    p.add_argument("--mask-ratio", type=float, default=0.5)
    p.add_argument("--patch-len", type=int, default=8)
    p.add_argument("--noise-rel", type=float, default=0.05,
                   help="corruption noise std relative to batch std")
    p.add_argument("--alpha", type=float, default=0.1, help="distillation weight")
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--history", default=None, help="loss history CSV path")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="latent image stack for every pixel")
    p.add_argument("--tsq", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("reconstruct", help="denoised sequence through the autoencoder")
    p.add_argument("--tsq", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("pca", help="principal component score images")
    p.add_argument("--tsq", required=True)
    p.add_argument("-k", type=int, default=32)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("tsr", help="log-log polynomial fit images")
    p.add_argument("--tsq", required=True)
    p.add_argument("--degree", type=int, default=5)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_tsr)

    p = sub.add_parser("ppt", help="Fourier phase images")
    p.add_argument("--tsq", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_ppt)

    p = sub.add_parser("eval", help="contrast/SNR report for a stack, and/or IoU")
    p.add_argument("--stack", default=None, help="image stack TSQ")
    p.add_argument("--mask", default=None, help="region mask PGM")
    p.add_argument("--classes", default=None,
                   help="panel spec JSON for per-depth classes (instead of --mask)")
    p.add_argument("--pred-mask", default=None, help="predicted mask PGM for IoU")
    p.add_argument("--method", default="stack", help="method label for the report")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--json", default=None, help="report JSON path")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("denoise-eval", help="reconstruct, then score the first k PCs")
    p.add_argument("--tsq", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--classes", default=None)
    p.add_argument("-k", type=int, default=20)
    p.add_argument("--out", required=True, help="per-PC curves CSV")
    common(p)
    p.set_defaults(func=cmd_denoise_eval)

    p = sub.add_parser("export", help="render a stack to 16-bit PGM files")
    p.add_argument("--stack", required=True)
    p.add_argument("--outdir", required=True)
    common(p)
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and args.mask is None and args.classes is None:
        parser.error("eval requires --mask or --classes")
    if args.command == "denoise-eval" and args.mask is None and args.classes is None:
        parser.error("denoise-eval requires --mask or --classes")
    try:
        return args.func(args)
    except InputError as exc:
        print(
            f"error code={EXIT_BAD_INPUT} command={args.command} reason={exc}",
            file=sys.stderr,
        )
        return EXIT_BAD_INPUT
    except autodiff.NonFiniteError as exc:
        print(
            f"error code={EXIT_DIVERGED} command={args.command} reason={exc}",
            file=sys.stderr,
        )
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
