"""Ablation runs on synthetic phantoms.

Every cell simulates a training and a test phantom, trains one network, predicts the test
phantom and reports accuracy against the simulation truth. Cells are independent and
seeded, so rerunning an axis reproduces its reports.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from rapidfuzz import fuzz, process

from dmri_metsc.config import Config
from dmri_metsc.data_io import (
    ParameterMaps,
    WindowBatch,
    extract_windows,
    hcp_like_scheme,
    ivim_scheme,
    make_phantom,
    random_direction_subset,
    resolve_preset,
    split_voxels,
    subsample_dataset,
    subsample_scheme,
    write_maps,
)
from dmri_metsc.errors import UsageError
from dmri_metsc.evaluation import (
    REPORT_VERSION,
    ExperimentReport,
    audit_codes,
    compare_methods,
    maps_hash,
    trend_summary,
    write_curve_csv,
    write_sweep_svg,
)
from dmri_metsc.forward_models import add_rician_noise
from dmri_metsc.models import AcquisitionScheme, ModelKind, parameter_names
from dmri_metsc.network import DecoderConfig, EncoderConfig, MetscWeights, parameter_box
from dmri_metsc.sparse_dict import Dictionary, build_ivim_dictionary, build_noddi_dictionary
from dmri_metsc.training import TrainConfig, collect_codes, predict, predict_windows, train

logger = logging.getLogger(__name__)

ABLATION_AXES = ("bvals", "nbvals", "dictsize", "patchsize", "datasize", "decoder", "encoder", "snr", "bootstrap")

DEFAULT_GRIDS: Dict[str, list] = {
    "bvals": ["comb1", "comb2", "comb3", "comb4", "comb5"],
    "nbvals": ["b3", "comb1", "b7", "full10"],
    "dictsize": [25, 50, 100],
    "patchsize": [1, 3, 5],
    "datasize": [250, 500, 1000],
    "decoder": ["unrolled", "mlp"],
    "encoder": ["transformer", "conv"],
    "snr": [10, 20, 30, 40, 50, 60, 70],
    "bootstrap": [30, 18, 12],
}

_INT_AXES = ("dictsize", "patchsize", "datasize", "bootstrap")

# Test phantoms draw noise from a stream disjoint from the training phantom's
TEST_SEED_OFFSET = 100_003

ABNORMAL_INPUT_SNR = 5.0


def resolve_axis(name: str) -> str:
    if name in ABLATION_AXES:
        return name
    matches = process.extract(name, ABLATION_AXES, scorer=fuzz.WRatio, limit=3, score_cutoff=50)
    hint = f" Did you mean: {', '.join(m[0] for m in matches)}?" if matches else ""
    raise UsageError(f"unknown ablation axis '{name}'.{hint}")


def parse_grid(axis: str, text: Optional[str]) -> list:
    """``start:stop:step`` (inclusive) or a comma-separated list; None gives the default grid."""
    axis = resolve_axis(axis)
    if not text:
        return list(DEFAULT_GRIDS[axis])
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0:
                raise ValueError("step must be positive")
            values = list(np.arange(start, stop + step / 2, step))
        else:
            values = [v.strip() for v in text.split(",") if v.strip()]
        if axis in _INT_AXES:
            return [int(float(v)) for v in values]
        if axis == "snr":
            return [float(v) for v in values]
    except ValueError as e:
        raise UsageError(f"cannot parse grid '{text}' for axis '{axis}': {e}") from e
    if axis in ("bvals", "nbvals"):
        for v in values:
            try:
                resolve_preset(v)
            except ValueError as e:
                raise UsageError(str(e)) from e
    return values


@dataclass
class AblationSettings:
    """Everything one ablation cell depends on.

    Desk-scale defaults; :meth:`from_config` switches to the published sizes when
    ``METSC_FULL_SCALE`` is set.
    """

    kind: str = "ivim"
    train_dims: Tuple[int, int, int] = (24, 24, 2)
    test_dims: Tuple[int, int, int] = (12, 12, 1)
    snr: float = 30.0
    seed: int = 0
    repeats: int = 1
    preset: str = "comb1"
    per_shell: Optional[int] = None
    n_dirs: int = 30
    dict_size: int = 50
    noddi_j: int = 8
    patch_size: int = 3
    train_size: Optional[int] = None
    val_frac: float = 0.1
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    warmup_epochs: int = 2
    encoder_kind: str = "transformer"
    decoder_kind: str = "unrolled"
    embed_dim: int = 32
    heads: int = 4
    depth: int = 1
    n_layers: int = 8
    bootstrap_repeats: int = 3

    @classmethod
    def from_config(cls, **overrides) -> "AblationSettings":
        base = cls(seed=Config.get_default_seed())
        if Config.full_scale():
            base = replace(
                base,
                train_dims=(224, 224, 1),
                test_dims=(64, 64, 1),
                dict_size=300,
                noddi_j=12,
                epochs=Config.get_default_epochs(),
                warmup_epochs=Config.get_default_warmup_epochs(),
                batch_size=512,
                lr=1e-4,
                embed_dim=64,
                depth=2,
            )
        return replace(base, **{k: v for k, v in overrides.items() if v is not None})

    @property
    def model_kind(self) -> ModelKind:
        return ModelKind(self.kind)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            heads=self.heads,
            depth=self.depth,
            ffn_dim=2 * self.embed_dim,
            kind=self.encoder_kind,
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(n_layers=self.n_layers, kind=self.decoder_kind)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            warmup_epochs=min(self.warmup_epochs, self.epochs),
            seed=seed,
        )

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return asdict(self)


AXIS_FIELDS = {
    "bvals": "preset",
    "nbvals": "preset",
    "patchsize": "patch_size",
    "datasize": "train_size",
    "decoder": "decoder_kind",
    "encoder": "encoder_kind",
    "snr": "snr",
}


def settings_for_cell(axis: str, value, base: AblationSettings) -> AblationSettings:
    if axis == "dictsize":
        field_name = "dict_size" if base.model_kind is ModelKind.IVIM else "noddi_j"
        return replace(base, **{field_name: int(value)})
    if axis == "bootstrap":
        return replace(base, kind=ModelKind.NODDI.value, per_shell=int(value), n_dirs=max(base.n_dirs, 90))
    return replace(base, **{AXIS_FIELDS[axis]: value})


# ---------------------------------------------------------------------------
# One cell
# ---------------------------------------------------------------------------


def acquisition(settings: AblationSettings) -> Tuple[AcquisitionScheme, Optional[np.ndarray]]:
    """Full simulated scheme and the measurements the network sees (None means all)."""
    if settings.model_kind is ModelKind.IVIM:
        full = ivim_scheme()
        _, index = subsample_scheme(full, bvalues=resolve_preset(settings.preset))
        return full, index
    full = hcp_like_scheme(shells=(1000.0, 2000.0), n_dirs=settings.n_dirs)
    if settings.per_shell is None or settings.per_shell >= settings.n_dirs:
        return full, None
    _, index = subsample_scheme(full, per_shell=settings.per_shell)
    return full, index


def _cell_dictionary(settings: AblationSettings, scheme: AcquisitionScheme) -> Dictionary:
    if settings.model_kind is ModelKind.IVIM:
        return build_ivim_dictionary(scheme, j=settings.dict_size)
    return build_noddi_dictionary(scheme, j_vic=settings.noddi_j, j_kappa=settings.noddi_j)


@dataclass
class CellResult:
    label: str
    seed: int
    pred: ParameterMaps
    truth: ParameterMaps
    mask: np.ndarray
    weights: MetscWeights
    dictionary: Dictionary
    test_windows: WindowBatch
    runtime_s: float
    history: List[Dict[str, float]]


def run_cell(
    settings: AblationSettings,
    label: str,
    seed: Optional[int] = None,
    measurements: Optional[np.ndarray] = None,
) -> CellResult:
    """Simulate, train and predict one configuration.

    ``measurements`` overrides the scheme subset chosen from ``settings``.
    """
    seed = settings.seed if seed is None else seed
    started = time.perf_counter()
    kind = settings.model_kind
    full, default_index = acquisition(settings)
    index = default_index if measurements is None else np.asarray(measurements, dtype=np.int64)
    scheme = full if index is None else full.subset(index)
    logger.info("Ablation cell %s (seed %d): %d measurements", label, seed, scheme.n_measurements)
    dictionary = _cell_dictionary(settings, scheme)
    encoder = settings.encoder_config()
    train_phantom = make_phantom(kind, settings.train_dims, snr=settings.snr, seed=seed, scheme=full)
    test_phantom = make_phantom(
        kind, settings.test_dims, snr=settings.snr, seed=seed + TEST_SEED_OFFSET, scheme=full
    )
    windows = extract_windows(
        train_phantom.volume,
        patch_size=encoder.patch_size,
        window=encoder.window,
        measurements=index,
        targets=train_phantom.truth.data,
    )
    if settings.train_size is not None:
        windows = windows.subset(subsample_dataset(len(windows), settings.train_size, seed))
    train_idx, val_idx = split_voxels(len(windows), settings.val_frac, seed)
    result = train(
        windows.subset(train_idx),
        dictionary,
        kind,
        settings.train_config(seed),
        validation=windows.subset(val_idx) if val_idx.size else None,
        encoder=encoder,
        decoder=settings.decoder_config(),
    )
    pred = predict(test_phantom.volume, result.weights, dictionary, measurements=index)
    test_windows = extract_windows(
        test_phantom.volume, patch_size=encoder.patch_size, window=encoder.window, measurements=index
    )
    elapsed = time.perf_counter() - started
    logger.info("Ablation cell %s (seed %d) finished in %.1fs", label, seed, elapsed)
    return CellResult(
        label,
        seed,
        pred,
        test_phantom.truth,
        test_phantom.volume.mask,
        result.weights,
        dictionary,
        test_windows,
        elapsed,
        result.history,
    )


def abnormal_input_check(
    weights: MetscWeights,
    dictionary: Dictionary,
    windows: np.ndarray,
    snr: float = ABNORMAL_INPUT_SNR,
    seed: int = 0,
) -> Dict[str, dict]:
    """Predict on smeared and on noise-corrupted windows; count outputs outside the valid box."""
    windows = np.asarray(windows, dtype=np.float64)
    B, N, F = windows.shape
    C = weights.n_signals
    cells = F // C
    spatial = windows.reshape(B, N, cells, C)
    smeared = np.broadcast_to(spatial.mean(axis=2, keepdims=True), spatial.shape).reshape(B, N, F)
    noisy = add_rician_noise(windows, snr, np.random.default_rng([seed, 5]))
    box = parameter_box(weights.kind)
    out = {}
    for name, inputs in (("smeared", smeared), ("noisy", noisy)):
        params = predict_windows(weights, dictionary, np.ascontiguousarray(inputs))
        outside = ~np.isfinite(params) | (params < box[0]) | (params > box[1])
        out[name] = {
            "n_windows": int(B),
            "out_of_box": int(outside.any(axis=1).sum()),
            "min": params.min(axis=0).tolist() if B else [],
            "max": params.max(axis=0).tolist() if B else [],
        }
    return out


def _cell_report(axis: str, value, settings: AblationSettings, cells: Sequence[CellResult]) -> ExperimentReport:
    report = ExperimentReport(
        name=f"{axis}={value}",
        kind=settings.model_kind,
        config={"axis": axis, "value": value, **settings.to_dict()},
        data_hash=maps_hash(*(c.truth.data for c in cells)),
        seed=settings.seed,
    )
    for cell in cells:
        method = "metsc" if len(cells) == 1 else f"metsc[{cell.label}]"
        report.add_method(method, cell.pred.data, cell.truth.data, cell.mask, cell.runtime_s)
    report.extras["final_train_loss"] = [c.history[-1]["train_loss"] if c.history else None for c in cells]
    return report


def _mean_metric(report: ExperimentReport, name: str, metric: str) -> float:
    return float(np.mean([getattr(params[name], metric) for params in report.metrics.values()]))


# ---------------------------------------------------------------------------
# Axes
# ---------------------------------------------------------------------------


@dataclass
class AblationOutcome:
    axis: str
    grid: list
    reports: List[ExperimentReport]
    summary: dict


def run_ablation(
    axis: str,
    grid: Optional[Sequence] = None,
    settings: Optional[AblationSettings] = None,
    out_dir: Optional[Union[str, Path]] = None,
    force: bool = False,
) -> AblationOutcome:
    """Run every cell of ``axis`` and summarize; writes reports when ``out_dir`` is given."""
    axis = resolve_axis(axis)
    grid = list(grid) if grid is not None else list(DEFAULT_GRIDS[axis])
    base = settings or AblationSettings.from_config()
    if axis == "bootstrap":
        return _run_bootstrap(grid, base, out_dir, force)
    reports: List[ExperimentReport] = []
    per_seed_mse: Dict[str, np.ndarray] = {}
    names = parameter_names(base.model_kind)
    for value in grid:
        cell_settings = settings_for_cell(axis, value, base)
        seeds = [base.seed + r for r in range(base.repeats)]
        cells = [run_cell(cell_settings, f"seed={s}", seed=s) for s in seeds]
        report = _cell_report(axis, value, cell_settings, cells)
        reports.append(report)
        per_seed_mse[str(value)] = np.array(
            [[m[n].mse for n in names] for m in report.metrics.values()]
        )
        if out_dir is not None:
            report.write(Path(out_dir) / axis, stem=_stem(axis, value), force=force)
    summary = _summarize(axis, grid, reports, per_seed_mse, names)
    if out_dir is not None:
        _write_summary(Path(out_dir) / axis, axis, grid, reports, summary, names)
    return AblationOutcome(axis, grid, reports, summary)


def _stem(axis: str, value) -> str:
    return f"{axis}_{value}".replace(".", "p")


def _summarize(axis, grid, reports, per_seed_mse, names) -> dict:
    summary = {
        "report_version": REPORT_VERSION,
        "axis": axis,
        "grid": list(grid),
        "cells": [
            {
                "value": value,
                "config_hash": report.config_hash,
                "mse": {n: _mean_metric(report, n, "mse") for n in names},
                "rel_error": {n: _mean_metric(report, n, "rel_error") for n in names},
            }
            for value, report in zip(grid, reports)
        ],
    }
    if axis == "snr":
        rel_f = [cell["rel_error"][names[0]] for cell in summary["cells"]]
        summary["trend"] = {names[0]: trend_summary(grid, rel_f, plateau_from=40.0)}
    reference = str(grid[0])
    if per_seed_mse[reference].shape[0] >= 2:
        ttests = []
        for value in grid[1:]:
            ttests += compare_methods(per_seed_mse[reference], per_seed_mse[str(value)], names, reference, str(value))
        summary["ttests"] = [t.to_dict() for t in ttests]
    return summary


def _write_summary(out_dir: Path, axis, grid, reports, summary, names) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    labels = [str(v) for v in grid]
    lines = ["value," + ",".join(f"mse_{n},rel_error_{n}" for n in names)]
    for label, cell in zip(labels, summary["cells"]):
        lines.append(
            label + "," + ",".join(f"{cell['mse'][n]!r},{cell['rel_error'][n]!r}" for n in names)
        )
    (out_dir / "summary.csv").write_text("\n".join(lines) + "\n")
    if axis in ("snr", "dictsize", "patchsize", "datasize"):
        x = [float(v) for v in grid]
        curves = {n: [cell["rel_error"][n] for cell in summary["cells"]] for n in names}
        write_curve_csv(out_dir / "rel_error_curve.csv", axis, x, curves)
        write_sweep_svg(out_dir / "rel_error_curve.svg", x, curves, axis, "relative error (%)", f"{axis} sweep")
    logger.info("Wrote %s ablation summary to %s", axis, out_dir)


def _run_bootstrap(grid, base: AblationSettings, out_dir, force) -> AblationOutcome:
    """Per direction count: models on seeded random direction subsets, then per-voxel spread."""
    reports = []
    names = parameter_names(ModelKind.NODDI)
    cells_summary = []
    for per_shell in grid:
        settings = settings_for_cell("bootstrap", per_shell, base)
        full, _ = acquisition(settings)
        cells = []
        for r in range(settings.bootstrap_repeats):
            _, index = random_direction_subset(full, int(per_shell), seed=settings.seed + r)
            cells.append(run_cell(settings, f"subset={r}", seed=settings.seed, measurements=index))
        stack = np.stack([c.pred.data for c in cells])
        std = ParameterMaps(ModelKind.NODDI, stack.std(axis=0))
        report = _cell_report("bootstrap", per_shell, settings, cells)
        masked_std = std.data[cells[0].mask]
        report.extras["std_mean"] = {n: float(masked_std[:, k].mean()) for k, n in enumerate(names)}
        report.extras["std_finite"] = bool(np.all(np.isfinite(std.data)))
        report.extras["std_nonnegative"] = bool(np.all(std.data >= 0))
        report.extras["abnormal_input"] = abnormal_input_check(
            cells[0].weights, cells[0].dictionary, cells[0].test_windows.windows, seed=settings.seed
        )
        if settings.decoder_kind == "unrolled":
            codes = collect_codes(cells[0].weights, cells[0].dictionary, cells[0].test_windows.windows)
            report.extras["zero_fraction"] = audit_codes(codes).zero_fraction
        reports.append(report)
        cells_summary.append({"value": per_shell, "config_hash": report.config_hash, **report.extras})
        if out_dir is not None:
            target = Path(out_dir) / "bootstrap"
            report.write(target, stem=_stem("bootstrap", per_shell), force=force)
            write_maps(target / f"std_{per_shell}.bin", std, {"per_shell": per_shell, "seed": settings.seed})
    summary = {"report_version": REPORT_VERSION, "axis": "bootstrap", "grid": list(grid), "cells": cells_summary}
    if out_dir is not None:
        target = Path(out_dir) / "bootstrap"
        target.mkdir(parents=True, exist_ok=True)
        (target / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return AblationOutcome("bootstrap", list(grid), reports, summary)
