"""Accuracy metrics, paired tests, experiment reports, sweep plots and the sparsity audit."""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from dmri_metsc.data_io import ParameterMaps, read_maps
from dmri_metsc.errors import DataError, DimensionError, UsageError
from dmri_metsc.models import UM2_PER_MS, ModelKind, parameter_names

logger = logging.getLogger(__name__)

REPORT_VERSION = 1

# Parameters shown in um^2/ms in text tables
_DIFFUSIVITIES = ("D", "Dstar")


def config_hash(config: dict) -> str:
    """Short SHA-256 of the canonical JSON form of ``config``."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def maps_hash(*arrays: np.ndarray) -> str:
    digest = hashlib.sha256()
    for array in arrays:
        digest.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return digest.hexdigest()[:16]


@dataclass
class ParameterMetrics:
    """Accuracy of one parameter over the masked voxels.

    ``rel_error`` is the mean of |pred - truth| / |truth| in percent over voxels with a
    nonzero truth value.
    """

    mse: float
    bias: float
    rel_error: float
    n_voxels: int

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return asdict(self)


def _masked_rows(pred: np.ndarray, truth: np.ndarray, mask: Optional[np.ndarray]):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction shape {pred.shape} differs from truth shape {truth.shape}")
    n_params = pred.shape[-1]
    if mask is None:
        return pred.reshape(-1, n_params), truth.reshape(-1, n_params)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape[:-1]:
        raise DimensionError(f"mask shape {mask.shape} does not match maps {pred.shape[:-1]}")
    return pred[mask], truth[mask]


def parameter_metrics(
    pred: np.ndarray,
    truth: np.ndarray,
    names: Sequence[str],
    mask: Optional[np.ndarray] = None,
) -> Dict[str, ParameterMetrics]:
    """MSE, bias and relative error per parameter (last axis) over masked voxels."""
    p, t = _masked_rows(pred, truth, mask)
    if p.shape[0] == 0:
        raise DataError("no voxels to evaluate: the mask is empty")
    out = {}
    for k, name in enumerate(names):
        err = p[:, k] - t[:, k]
        nonzero = t[:, k] != 0
        rel = (
            float(np.mean(np.abs(err[nonzero]) / np.abs(t[nonzero, k])) * 100.0)
            if np.any(nonzero)
            else float("nan")
        )
        out[name] = ParameterMetrics(
            mse=float(np.mean(err * err)),
            bias=float(np.mean(err)),
            rel_error=rel,
            n_voxels=int(p.shape[0]),
        )
    return out


def squared_errors(pred: np.ndarray, truth: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-voxel squared error, voxels x parameters."""
    p, t = _masked_rows(pred, truth, mask)
    return (p - t) ** 2


@dataclass
class PairedTTest:
    """Two-sided paired Student's t-test; ``degenerate`` flags zero-variance differences."""

    parameter: str
    method_a: str
    method_b: str
    statistic: float
    pvalue: float
    n: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return asdict(self)


def paired_ttest(
    errors_a: Sequence[float],
    errors_b: Sequence[float],
    parameter: str = "",
    method_a: str = "a",
    method_b: str = "b",
) -> PairedTTest:
    """Paired t-test on per-subject (or per-seed) mean errors of two methods."""
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise DataError("a paired t-test needs at least two subjects")
    diff = a - b
    if np.all(diff == diff[0]):
        logger.warning("Paired differences for %s have zero variance; p-value undefined", parameter or "?")
        return PairedTTest(parameter, method_a, method_b, float("nan"), float("nan"), int(a.size), True)
    result = stats.ttest_rel(a, b)
    return PairedTTest(
        parameter, method_a, method_b, float(result.statistic), float(result.pvalue), int(a.size)
    )


def compare_methods(
    per_subject_a: np.ndarray,
    per_subject_b: np.ndarray,
    names: Sequence[str],
    method_a: str,
    method_b: str,
) -> List[PairedTTest]:
    """One paired test per parameter on subjects x parameters error tables."""
    a = np.atleast_2d(per_subject_a)
    b = np.atleast_2d(per_subject_b)
    return [paired_ttest(a[:, k], b[:, k], name, method_a, method_b) for k, name in enumerate(names)]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    """Per-method, per-parameter metrics with everything needed to trace them back."""

    name: str
    kind: ModelKind
    metrics: Dict[str, Dict[str, ParameterMetrics]] = field(default_factory=dict)
    runtime_s: Dict[str, float] = field(default_factory=dict)
    config: Dict[str, object] = field(default_factory=dict)
    data_hash: str = ""
    seed: Optional[int] = None
    ttests: List[PairedTTest] = field(default_factory=list)
    extras: Dict[str, object] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def add_method(
        self,
        method: str,
        pred: np.ndarray,
        truth: np.ndarray,
        mask: Optional[np.ndarray] = None,
        runtime_s: Optional[float] = None,
    ) -> Dict[str, ParameterMetrics]:
        result = parameter_metrics(pred, truth, parameter_names(self.kind), mask)
        self.metrics[method] = result
        if runtime_s is not None:
            self.runtime_s[method] = float(runtime_s)
        return result

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return {
            "report_version": REPORT_VERSION,
            "name": self.name,
            "kind": ModelKind(self.kind).value,
            "seed": self.seed,
            "config": self.config,
            "config_hash": self.config_hash,
            "data_hash": self.data_hash,
            "units": {"D": "mm^2/s", "Dstar": "mm^2/s"},
            "metrics": {
                method: {name: m.to_dict() for name, m in params.items()}
                for method, params in self.metrics.items()
            },
            "runtime_s": self.runtime_s,
            "ttests": [t.to_dict() for t in self.ttests],
            "extras": self.extras,
        }

    def to_text(self) -> str:
        """Aligned table; diffusivities are shown in um^2/ms."""
        names = parameter_names(self.kind)
        header = ["method", "parameter", "MSE", "bias", "rel.err %", "voxels", "runtime s"]
        rows = [header]
        for method, params in self.metrics.items():
            for name in names:
                m = params[name]
                scale = UM2_PER_MS if name in _DIFFUSIVITIES else 1.0
                label = f"{name} [um2/ms]" if name in _DIFFUSIVITIES else name
                runtime = self.runtime_s.get(method)
                rows.append(
                    [
                        method,
                        label,
                        f"{m.mse * scale * scale:.4g}",
                        f"{m.bias * scale:+.4g}",
                        f"{m.rel_error:.3g}",
                        str(m.n_voxels),
                        "" if runtime is None else f"{runtime:.2f}",
                    ]
                )
        widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
        lines = [f"# {self.name} ({ModelKind(self.kind).value}) config {self.config_hash} data {self.data_hash}"]
        for r in rows:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
        for t in self.ttests:
            flag = " (zero variance)" if t.degenerate else ""
            lines.append(
                f"t-test {t.method_a} vs {t.method_b} on {t.parameter}: "
                f"t={t.statistic:.4g} p={t.pvalue:.4g} n={t.n}{flag}"
            )
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["method,parameter,mse,bias,rel_error,n_voxels"]
        for method, params in self.metrics.items():
            for name, m in params.items():
                lines.append(f"{method},{name},{m.mse!r},{m.bias!r},{m.rel_error!r},{m.n_voxels}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Union[str, Path], stem: str = "report", force: bool = False) -> Dict[str, Path]:
        """Write JSON, text and CSV; an existing report is only replaced when its hashes agree."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / f"{stem}.json"
        if json_path.exists() and not force:
            try:
                previous = json.loads(json_path.read_text())
            except json.JSONDecodeError as e:
                raise DataError(f"existing report {json_path} is unreadable: {e}") from e
            for key, value in (("config_hash", self.config_hash), ("data_hash", self.data_hash)):
                if previous.get(key) != value:
                    raise DataError(
                        f"{json_path} was produced with {key} {previous.get(key)}, now {value}; "
                        "refusing to overwrite"
                    )
        paths = {
            "json": json_path,
            "text": out_dir / f"{stem}.txt",
            "csv": out_dir / f"{stem}.csv",
        }
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default))
        paths["text"].write_text(self.to_text())
        paths["csv"].write_text(self.to_csv())
        logger.info("Wrote report %s to %s", self.name, out_dir)
        return paths


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def evaluate_maps(
    pred: ParameterMaps,
    truth: ParameterMaps,
    mask: Optional[np.ndarray] = None,
    method: str = "pred",
    name: str = "evaluation",
) -> ExperimentReport:
    """Report comparing one set of parameter maps to the gold standard."""
    if ModelKind(pred.kind) is not ModelKind(truth.kind):
        raise DataError(f"prediction kind '{pred.kind}' differs from truth kind '{truth.kind}'")
    report = ExperimentReport(
        name=name,
        kind=ModelKind(truth.kind),
        config={"method": method, "mask": None if mask is None else int(np.count_nonzero(mask))},
        data_hash=maps_hash(truth.data, pred.data),
    )
    report.add_method(method, pred.data, truth.data, mask)
    return report


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def trend_summary(x: Sequence[float], y: Sequence[float], plateau_from: Optional[float] = None) -> dict:
    """Direction of a sweep curve: endpoints, monotone steps and plateau spread."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    steps = np.diff(y)
    summary = {
        "first": float(y[0]),
        "last": float(y[-1]),
        "first_exceeds_last": bool(y[0] > y[-1]),
        "decreasing_steps": int(np.sum(steps < 0)),
        "steps": int(steps.size),
        "monotone_decreasing": bool(np.all(steps <= 0)),
    }
    if plateau_from is not None:
        plateau = y[x >= plateau_from]
        if plateau.size:
            summary["plateau_from"] = float(plateau_from)
            summary["plateau_variation"] = float((plateau.max() - plateau.min()) / abs(plateau.mean()))
    return summary


def write_curve_csv(
    path: Union[str, Path], x_label: str, x: Sequence[float], curves: Dict[str, Sequence[float]]
) -> Path:
    path = Path(path)
    labels = list(curves)
    lines = [",".join([x_label] + labels)]
    for k, xv in enumerate(x):
        lines.append(",".join([repr(float(xv))] + [repr(float(curves[c][k])) for c in labels]))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_sweep_svg(
    path: Union[str, Path],
    x: Sequence[float],
    curves: Dict[str, Sequence[float]],
    xlabel: str,
    ylabel: str,
    title: str = "",
) -> Path:
    """Static line plot of one or more curves, written as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams.update({"font.family": "DejaVu Sans", "axes.unicode_minus": False, "svg.hashsalt": "metsc"})
    import matplotlib.pyplot as plt

    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.0, 3.6), constrained_layout=True)
    for label, ys in curves.items():
        ax.plot(list(x), list(ys), marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if len(curves) > 1:
        ax.legend(loc="best", fontsize=8)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Sparsity audit
# ---------------------------------------------------------------------------


@dataclass
class SparsityAudit:
    """Distribution of per-voxel nonzero fractions of sparse codes."""

    n_codes: int
    dict_size: int
    zero_fraction: float
    histogram: List[int]
    bin_edges: List[float]
    mean_support: float

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return asdict(self)

    def to_text(self) -> str:
        lines = [
            f"codes {self.n_codes}, atoms {self.dict_size}, mean support {self.mean_support:.2f}",
            f"global zero fraction {self.zero_fraction:.4f}",
            "nonzero fraction  count",
        ]
        peak = max(self.histogram) or 1
        for lo, hi, count in zip(self.bin_edges[:-1], self.bin_edges[1:], self.histogram):
            bar = "#" * int(round(40 * count / peak))
            lines.append(f"[{lo:.2f}, {hi:.2f})  {count:>6}  {bar}")
        return "\n".join(lines) + "\n"


def audit_codes(codes: np.ndarray, bins: int = 20) -> SparsityAudit:
    """Exact-zero statistics over a codes matrix (one row per voxel)."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    if codes.size == 0:
        raise DataError("no codes to audit")
    nonzero = codes != 0
    per_voxel = nonzero.mean(axis=1)
    counts, edges = np.histogram(per_voxel, bins=bins, range=(0.0, 1.0))
    return SparsityAudit(
        n_codes=int(codes.shape[0]),
        dict_size=int(codes.shape[1]),
        zero_fraction=float(1.0 - nonzero.mean()),
        histogram=[int(c) for c in counts],
        bin_edges=[float(e) for e in edges],
        mean_support=float(nonzero.sum(axis=1).mean()),
    )


def write_audit(out_dir: Union[str, Path], audit: SparsityAudit, provenance: Optional[dict] = None) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"json": out_dir / "sparsity.json", "text": out_dir / "sparsity.txt", "csv": out_dir / "sparsity.csv"}
    payload = {"report_version": REPORT_VERSION, **audit.to_dict(), "provenance": provenance or {}}
    paths["json"].write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default))
    paths["text"].write_text(audit.to_text())
    lines = ["bin_low,bin_high,count"]
    lines += [
        f"{lo!r},{hi!r},{c}" for lo, hi, c in zip(audit.bin_edges[:-1], audit.bin_edges[1:], audit.histogram)
    ]
    paths["csv"].write_text("\n".join(lines) + "\n")
    logger.info("Sparsity audit: zero fraction %.4f over %d codes", audit.zero_fraction, audit.n_codes)
    return paths


# ---------------------------------------------------------------------------
# Map files
# ---------------------------------------------------------------------------


def _read_mask(path: Optional[str], shape: Tuple[int, ...]) -> Optional[np.ndarray]:
    if not path:
        return None
    payload = Path(path).read_bytes()
    if len(payload) != int(np.prod(shape)):
        raise DataError(f"mask {path} has {len(payload)} bytes, maps need {int(np.prod(shape))}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape).astype(bool)


def _rows(data: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    return data[mask] if mask is not None else data.reshape(-1, data.shape[-1])


def evaluate_files(
    pred_paths: Sequence[str],
    truth_paths: Sequence[str],
    mask_path: Optional[str] = None,
    compare_paths: Optional[Sequence[str]] = None,
) -> ExperimentReport:
    """Report over one or more subjects; with ``compare_paths`` adds paired t-tests across them."""
    if len(pred_paths) != len(truth_paths):
        raise UsageError(f"got {len(pred_paths)} prediction(s) for {len(truth_paths)} truth map(s)")
    if compare_paths and len(compare_paths) != len(pred_paths):
        raise UsageError("comparison maps need one file per subject, like the predictions")
    truths = [read_maps(p) for p in truth_paths]
    preds = [read_maps(p) for p in pred_paths]
    kind = ModelKind(truths[0].kind)
    names = parameter_names(kind)
    masks = [_read_mask(mask_path, t.data.shape[:3]) for t in truths]
    report = ExperimentReport(
        name="evaluation",
        kind=kind,
        config={
            "pred": list(pred_paths),
            "truth": list(truth_paths),
            "mask": mask_path,
            "compare": list(compare_paths) if compare_paths else None,
        },
        data_hash=maps_hash(*(t.data for t in truths)),
    )

    def pooled(maps):
        for m, t in zip(maps, truths):
            if ModelKind(m.kind) is not kind or m.data.shape != t.data.shape:
                raise DataError(
                    f"prediction {m.kind} {m.data.shape} does not match truth {kind.value} {t.data.shape}"
                )
        p = np.concatenate([_rows(m.data, mask) for m, mask in zip(maps, masks)])
        t = np.concatenate([_rows(t.data, mask) for t, mask in zip(truths, masks)])
        per_subject = np.array(
            [squared_errors(m.data, t.data, mask).mean(axis=0) for m, t, mask in zip(maps, truths, masks)]
        )
        return p, t, per_subject

    p, t, per_subject = pooled(preds)
    report.add_method("pred", p, t)
    if compare_paths:
        cp, ct, per_subject_b = pooled([read_maps(c) for c in compare_paths])
        report.add_method("compare", cp, ct)
        report.ttests = compare_methods(per_subject, per_subject_b, names, "pred", "compare")
    return report
