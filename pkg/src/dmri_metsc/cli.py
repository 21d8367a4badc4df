"""Command-line front end: simulate, fit, train, evaluate, ablate and audit-sparsity.

Exit codes: 0 success, 2 usage or configuration error, 3 data error, 4 numerical failure.
"""

import argparse
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np
from rapidfuzz import fuzz, process

from dmri_metsc import __version__
from dmri_metsc.config import Config
from dmri_metsc.data_io import (
    PhantomSpec,
    Volume,
    extract_windows,
    load_scheme,
    make_phantom,
    read_maps,
    read_volume,
    resolve_preset,
    split_voxels,
    subsample_scheme,
    write_maps,
    write_phantom,
)
from dmri_metsc.errors import DataError, MetscError, UsageError
from dmri_metsc.evaluation import audit_codes, evaluate_files, write_audit
from dmri_metsc.experiments import AblationSettings, parse_grid, resolve_axis, run_ablation
from dmri_metsc.models import ModelKind
from dmri_metsc.network import DECODER_KINDS, ENCODER_KINDS, DecoderConfig, EncoderConfig, init_weights
from dmri_metsc.solvers import IhtConfig, fit_volume, resolve_method
from dmri_metsc.sparse_dict import build_dictionary, load_dictionary, save_dictionary
from dmri_metsc.training import (
    CHECKPOINT_NAME,
    DICTIONARY_NAME,
    TrainConfig,
    collect_codes,
    load_model,
    predict,
    save_checkpoint,
    train,
    write_history_csv,
)

logger = logging.getLogger(__name__)

LOCK_NAME = ".metsc.lock"


def resolve_kind(name: str) -> ModelKind:
    try:
        return ModelKind(name)
    except ValueError:
        choices = [k.value for k in ModelKind]
        matches = process.extract(name, choices, scorer=fuzz.WRatio, limit=3, score_cutoff=50)
        hint = f" Did you mean: {', '.join(m[0] for m in matches)}?" if matches else ""
        raise UsageError(f"unknown model kind '{name}'.{hint}") from None


def parse_dims(text: str) -> Tuple[int, int, int]:
    """``HxWxS`` (or ``HxW`` for a single slice)."""
    try:
        dims = [int(v) for v in text.lower().split("x")]
    except ValueError:
        raise UsageError(f"dims must look like 32x32x4, got '{text}'") from None
    if len(dims) == 2:
        dims.append(1)
    if len(dims) != 3 or min(dims) < 1:
        raise UsageError(f"dims must be three positive extents, got '{text}'")
    return tuple(dims)


def parse_snr(text: str) -> Optional[float]:
    if text.lower() in ("inf", "none", "noiseless"):
        return None
    try:
        snr = float(text)
    except ValueError:
        raise UsageError(f"snr must be a number or 'inf', got '{text}'") from None
    if snr <= 0:
        raise UsageError("snr must be positive")
    return snr


@contextmanager
def output_lock(out_dir: Path) -> Iterator[Path]:
    """Exclusive ownership of ``out_dir`` for the duration of one command."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{out_dir} is in use by another command (remove {lock} if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def _measurements(volume: Volume, preset: Optional[str], per_shell: Optional[int]) -> Optional[np.ndarray]:
    if preset is None and per_shell is None:
        return None
    bvalues = None
    if preset is not None:
        try:
            bvalues = resolve_preset(preset)
        except ValueError as e:
            raise UsageError(str(e)) from e
    _, index = subsample_scheme(volume.scheme, bvalues=bvalues, per_shell=per_shell)
    return index


def _volume_kind(volume: Volume, override: Optional[str]) -> ModelKind:
    if override:
        return resolve_kind(override)
    return ModelKind(volume.provenance.get("kind", ModelKind.IVIM.value))


def _dump(payload: dict) -> None:
    print(json.dumps(payload, indent=2, default=str))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    kind = resolve_kind(args.kind)
    dims = parse_dims(args.dims)
    scheme = load_scheme(args.bval, args.bvec) if args.bval and args.bvec else None
    spec = PhantomSpec.default(kind)
    if args.smooth is not None:
        spec.smooth = args.smooth
    seed = Config.get_default_seed() if args.seed is None else args.seed
    out_dir = Config.get_output_dir(args.out)
    with output_lock(out_dir):
        phantom = make_phantom(kind, dims, spec, snr=parse_snr(args.snr), seed=seed, scheme=scheme)
        paths = write_phantom(out_dir, phantom)
    _dump({"success": True, "voxels": int(np.prod(dims)), "files": {k: str(v) for k, v in paths.items()}})
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    method = resolve_method(args.method)
    volume = read_volume(args.volume)
    kind = _volume_kind(volume, args.kind)
    measurements = _measurements(volume, args.scheme, args.per_shell)
    scheme = volume.scheme if measurements is None else volume.scheme.subset(measurements)
    out_dir = Config.get_output_dir(args.out)
    started = time.perf_counter()
    with output_lock(out_dir):
        if method == "metsc":
            if not args.weights:
                raise UsageError("--method metsc needs a trained checkpoint: pass --weights")
            weights, dictionary = load_model(args.weights, scheme, args.dict, force=args.force)
            maps = predict(volume, weights, dictionary, measurements=measurements)
        else:
            dictionary = None
            options = {"workers": args.workers}
            if method in ("iht", "nnls"):
                dictionary = (
                    load_dictionary(args.dict, scheme)
                    if args.dict
                    else build_dictionary(kind, scheme, args.dict_size)
                )
                if method == "iht":
                    options["iht"] = IhtConfig.for_dictionary(
                        dictionary.atoms, lam_rel=args.lam_rel, max_iters=args.iht_iters, tol=args.iht_tol
                    )
            elif method == "bayes":
                options["snr_prior"] = args.snr_prior
            maps = fit_volume(volume, method, kind, dictionary, measurements=measurements, **options)
        provenance = {
            "method": method,
            "volume": str(args.volume),
            "volume_hash": volume.data_hash(),
            "scheme_hash": scheme.scheme_hash(),
        }
        path = write_maps(out_dir / "maps.bin", maps, provenance)
    elapsed = time.perf_counter() - started
    logger.info("Fitted %d voxels with %s in %.1fs", int(volume.mask.sum()), method, elapsed)
    _dump({"success": True, "maps": str(path), "runtime_s": elapsed})
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    kind = resolve_kind(args.kind)
    volume = read_volume(args.data)
    truth_path = Path(args.truth) if args.truth else Path(args.data).with_name("truth.bin")
    truth = read_maps(truth_path)
    if ModelKind(truth.kind) is not kind:
        raise DataError(f"{truth_path} holds {truth.kind} maps, training a {kind.value} model")
    measurements = _measurements(volume, args.scheme, args.per_shell)
    scheme = volume.scheme if measurements is None else volume.scheme.subset(measurements)
    cfg = TrainConfig.from_config(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        seed=args.seed,
        warmup_epochs=args.warmup,
    )
    if cfg.warmup_epochs > cfg.epochs:
        cfg.warmup_epochs = cfg.epochs
    encoder = EncoderConfig(
        patch_size=args.patch_size,
        embed_dim=args.embed_dim,
        depth=args.depth,
        ffn_dim=2 * args.embed_dim,
        kind=args.encoder,
    )
    decoder = DecoderConfig(n_layers=args.layers, lambda_init=args.lam_rel, kind=args.decoder)
    out_dir = Config.get_output_dir(args.out)
    with output_lock(out_dir):
        dictionary = build_dictionary(kind, scheme, args.dict_size)
        windows = extract_windows(
            volume,
            patch_size=encoder.patch_size,
            window=encoder.window,
            measurements=measurements,
            targets=truth.data,
        )
        train_idx, val_idx = split_voxels(len(windows), args.val_frac, cfg.seed)
        start = init_weights(dictionary, encoder, decoder, seed=cfg.seed, bypass=args.bypass)
        result = train(
            windows.subset(train_idx),
            dictionary,
            kind,
            cfg,
            validation=windows.subset(val_idx) if val_idx.size else None,
            weights=start,
        )
        checkpoint = save_checkpoint(out_dir / CHECKPOINT_NAME, result.weights, result.history, cfg)
        save_dictionary(dictionary, out_dir / DICTIONARY_NAME)
        history = write_history_csv(out_dir / "loss_history.csv", result.history)
    _dump(
        {
            "success": True,
            "checkpoint": str(checkpoint),
            "loss_history": str(history),
            "epochs": len(result.history),
            "initial_val_loss": result.initial_val_loss,
            "final_train_loss": result.history[-1]["train_loss"] if result.history else None,
        }
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    out_dir = Config.get_output_dir(args.out)
    with output_lock(out_dir):
        report = evaluate_files(args.pred, args.truth, args.mask, args.compare)
        paths = report.write(out_dir, force=args.force)
    sys.stdout.write(report.to_text())
    logger.info("Report written to %s", paths["json"])
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    axis = resolve_axis(args.axis)
    grid = parse_grid(axis, args.grid)
    settings = AblationSettings.from_config(
        kind=resolve_kind(args.kind).value if args.kind else None,
        seed=args.seed,
        epochs=args.epochs,
        repeats=args.repeats,
        bootstrap_repeats=args.bootstrap_repeats,
    )
    out_dir = Config.get_output_dir(args.out)
    with output_lock(out_dir):
        outcome = run_ablation(axis, grid, settings, out_dir, force=args.force)
    _dump({"success": True, "axis": axis, "cells": len(outcome.reports), "summary": outcome.summary})
    return 0


def cmd_audit_sparsity(args: argparse.Namespace) -> int:
    volume = read_volume(args.data)
    measurements = _measurements(volume, args.scheme, args.per_shell)
    scheme = volume.scheme if measurements is None else volume.scheme.subset(measurements)
    weights, dictionary = load_model(args.weights, scheme, args.dict)
    windows = extract_windows(
        volume, patch_size=weights.encoder.patch_size, window=weights.encoder.window, measurements=measurements
    )
    audit = audit_codes(collect_codes(weights, dictionary, windows.windows), bins=args.bins)
    out_dir = Config.get_output_dir(args.out)
    with output_lock(out_dir):
        provenance = {"weights": str(args.weights), "data": str(args.data), "data_hash": volume.data_hash()}
        write_audit(out_dir, audit, provenance)
    sys.stdout.write(audit.to_text())
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmri-metsc", description="Model-embedded sparse-coding networks for diffusion MRI."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="Override METSC_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Simulate a phantom volume with its truth maps")
    p.add_argument("--kind", required=True, help="ivim or noddi")
    p.add_argument("--dims", default="32x32x4", help="HxWxS (default: 32x32x4)")
    p.add_argument("--snr", default="30", help="Rician SNR, or 'inf' for noiseless (default: 30)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--smooth", type=float, default=None, help="Relative in-region parameter modulation")
    p.add_argument("--bval", default=None)
    p.add_argument("--bvec", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="Fit parameter maps to a volume")
    p.add_argument("--method", required=True, help="nlls, bayes, iht, nnls or metsc")
    p.add_argument("--volume", required=True)
    p.add_argument("--scheme", default=None, help="b-value preset to fit on (e.g. comb1)")
    p.add_argument("--per-shell", type=int, default=None, help="Directions kept per shell")
    p.add_argument("--kind", default=None, help="Model kind (default: from the volume sidecar)")
    p.add_argument("--dict", default=None, help="Dictionary file (default: built, or next to --weights)")
    p.add_argument("--dict-size", type=int, default=None)
    p.add_argument("--weights", default=None, help="Checkpoint for --method metsc")
    p.add_argument("--lam-rel", type=float, default=0.01, help="IHT threshold relative to the dictionary norm")
    p.add_argument(
        "--iht-iters",
        type=int,
        default=500,
        help="Classic IHT iteration cap; runs to --iht-tol (the network decoder unrolls only its "
        "train --layers, 8 by default; pass --iht-iters 8 --iht-tol 0 for a matched comparison)",
    )
    p.add_argument("--iht-tol", type=float, default=1e-10)
    p.add_argument("--snr-prior", type=float, default=30.0)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--force", action="store_true", help="Load a checkpoint despite hash mismatches")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="Train a network on a volume and its gold-standard maps")
    p.add_argument("--kind", required=True)
    p.add_argument("--data", required=True, help="Volume file; truth.bin next to it is the default target")
    p.add_argument("--truth", default=None)
    p.add_argument("--scheme", default=None)
    p.add_argument("--per-shell", type=int, default=None)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=None, help="Default 200 (2000 with METSC_FULL_SCALE)")
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dict-size", type=int, default=None)
    p.add_argument("--patch-size", type=int, default=3)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--lam-rel", type=float, default=0.01)
    p.add_argument("--encoder", choices=ENCODER_KINDS, default="transformer")
    p.add_argument("--decoder", choices=DECODER_KINDS, default="unrolled")
    p.add_argument("--bypass", action="store_true", help="Start with no encoder blocks (classic IHT)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Compare parameter maps with the gold standard")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--compare", nargs="+", default=None, help="Second method's maps for a paired t-test")
    p.add_argument("--mask", default=None)
    p.add_argument("--force", action="store_true", help="Overwrite a report made from other inputs")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="Run an ablation axis on synthetic phantoms")
    p.add_argument("--axis", required=True)
    p.add_argument("--grid", default=None, help="start:stop:step or a comma list")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--kind", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--repeats", type=int, default=None, help="Seeds per cell (paired t-tests when >= 2)")
    p.add_argument("--bootstrap-repeats", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("audit-sparsity", help="Histogram of sparse-code support over a volume")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dict", default=None)
    p.add_argument("--scheme", default=None)
    p.add_argument("--per-shell", type=int, default=None)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_audit_sparsity)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or Config.get_log_level()).upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        return args.func(args)
    except MetscError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
