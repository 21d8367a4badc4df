"""Supervised training, prediction and checkpoints for the three-stage network."""

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from dmri_metsc import gradcore as gc
from dmri_metsc.config import Config
from dmri_metsc.data_io import ParameterMaps, Volume, WindowBatch, extract_windows
from dmri_metsc.errors import ConfigurationError, DataError, NumericalError, ParseError, SchemeMismatchError
from dmri_metsc.models import AcquisitionScheme, ModelKind
from dmri_metsc.network import (
    DecoderConfig,
    EncoderConfig,
    MetscWeights,
    forward,
    init_weights,
    leaves,
)
from dmri_metsc.solvers import parallel_map
from dmri_metsc.sparse_dict import Dictionary, load_dictionary

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CHECKPOINT_NAME = "model.bin"
DICTIONARY_NAME = "dictionary.bin"
LOSS_NAME = "per-parameter standardized MSE, summed over parameters"


@dataclass
class TrainConfig:
    """Optimizer and schedule settings; ``lr`` is the peak rate after warm-up."""

    epochs: int = 200
    batch_size: int = 512
    lr: float = 1e-4
    warmup_epochs: int = 20
    seed: int = 0
    early_stop_patience: Optional[int] = None
    shards: int = 1

    @classmethod
    def from_config(cls, **overrides) -> "TrainConfig":
        """Desk or full scale defaults from :class:`Config`, then explicit overrides."""
        base = cls(
            epochs=Config.get_default_epochs(),
            warmup_epochs=Config.get_default_warmup_epochs(),
            seed=Config.get_default_seed(),
        )
        return cls(**{**asdict(base), **{k: v for k, v in overrides.items() if v is not None}})

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.shards < 1:
            raise ConfigurationError(f"invalid training configuration: {self}")

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return asdict(self)


def cosine_warmup_lr(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``lr`` over ``warmup_epochs`` then cosine decay to zero (epoch 0-based)."""
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    remaining = max(cfg.epochs - cfg.warmup_epochs, 1)
    progress = (epoch - cfg.warmup_epochs) / remaining
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def target_statistics(targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-parameter mean and scale (standard deviation, floored) of the training targets."""
    targets = np.asarray(targets, dtype=np.float64)
    mean = targets.mean(axis=0)
    scale = targets.std(axis=0)
    floor = np.maximum(np.abs(mean) * 1e-3, 1e-12)
    return mean, np.maximum(scale, floor)


def standardized_mse(pred: gc.Tensor, target: np.ndarray, scale: np.ndarray) -> gc.Tensor:
    diff = (pred - target) / scale
    return gc.sum_(gc.mean(diff * diff, axis=0))


def _loss_and_grads(
    weights: MetscWeights,
    dictionary: Dictionary,
    windows: np.ndarray,
    targets: np.ndarray,
    rng: Optional[np.random.Generator],
) -> Tuple[float, Dict[str, np.ndarray]]:
    p = leaves(weights, requires_grad=True)
    out = forward(weights, dictionary, windows, p, training=rng is not None, rng=rng)
    loss = standardized_mse(out.params, targets, weights.target_scale)
    grads = gc.backward(loss, leaves=p.values())
    return loss.item(), {name: grads[t] for name, t in p.items()}


def sharded_gradients(
    weights: MetscWeights,
    dictionary: Dictionary,
    windows: np.ndarray,
    targets: np.ndarray,
    shards: int,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Gradient of the batch loss as the size-weighted sum of per-shard gradients."""
    bounds = np.linspace(0, len(windows), shards + 1).astype(int)
    pieces = [(bounds[k], bounds[k + 1]) for k in range(shards) if bounds[k + 1] > bounds[k]]

    def one(k: int):
        lo, hi = pieces[k]
        return _loss_and_grads(weights, dictionary, windows[lo:hi], targets[lo:hi], rng)

    results = parallel_map(one, len(pieces), workers=1 if rng is not None else None)
    total = len(windows)
    loss = 0.0
    grads = {name: np.zeros_like(v) for name, v in weights.params.items()}
    for (lo, hi), (shard_loss, shard_grads) in zip(pieces, results):
        share = (hi - lo) / total
        loss += share * shard_loss
        for name, g in shard_grads.items():
            grads[name] += share * g
    return loss, grads


def evaluate_loss(weights: MetscWeights, dictionary: Dictionary, batch: WindowBatch, chunk: int = 512) -> float:
    """Standardized MSE over ``batch`` in inference mode."""
    if len(batch) == 0:
        return float("nan")
    preds = predict_windows(weights, dictionary, batch.windows, chunk)
    diff = (preds - batch.targets) / weights.target_scale
    return float(np.sum(np.mean(diff * diff, axis=0)))


@dataclass
class TrainResult:
    weights: MetscWeights
    history: List[Dict[str, float]]
    initial_val_loss: float


def train(
    dataset: WindowBatch,
    dictionary: Dictionary,
    model_kind: Union[str, ModelKind],
    train_cfg: Optional[TrainConfig] = None,
    validation: Optional[WindowBatch] = None,
    encoder: Optional[EncoderConfig] = None,
    decoder: Optional[DecoderConfig] = None,
    weights: Optional[MetscWeights] = None,
) -> TrainResult:
    """Fit the network to (window, gold-standard parameter) pairs with Adam.

    Deterministic for a given seed on one worker: the seed drives initialization, shuffling and
    dropout. One history row per epoch records the train loss, validation loss and rate.
    """
    cfg = train_cfg or TrainConfig.from_config()
    kind = ModelKind(model_kind)
    if ModelKind(dictionary.kind) is not kind:
        raise ConfigurationError(f"dictionary kind '{dictionary.kind}' does not match model '{kind.value}'")
    if dataset.targets is None or len(dataset) == 0:
        raise DataError("training needs a non-empty dataset with gold-standard targets")
    weights = weights.copy() if weights is not None else init_weights(dictionary, encoder, decoder, seed=cfg.seed)
    weights.target_mean, weights.target_scale = target_statistics(dataset.targets)
    rng = np.random.default_rng(cfg.seed)
    state = gc.AdamState.zeros_like(weights.params)
    history: List[Dict[str, float]] = []
    initial_val = evaluate_loss(weights, dictionary, validation) if validation is not None else float("nan")
    best_val, stale = initial_val, 0
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = cosine_warmup_lr(epoch, cfg)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for batch_no, start in enumerate(range(0, n, cfg.batch_size)):
            index = order[start : start + cfg.batch_size]
            dropout_rng = np.random.default_rng([cfg.seed, epoch, batch_no])
            loss, grads = sharded_gradients(
                weights, dictionary, dataset.windows[index], dataset.targets[index], cfg.shards, dropout_rng
            )
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NumericalError(f"non-finite loss or gradient at epoch {epoch + 1}, batch {batch_no + 1}")
            weights.params, state = gc.adam_step(weights.params, grads, state, lr)
            epoch_loss += loss * len(index) / n
        val_loss = evaluate_loss(weights, dictionary, validation) if validation is not None else float("nan")
        history.append({"epoch": epoch + 1, "train_loss": epoch_loss, "val_loss": val_loss, "lr": lr})
        logger.info("epoch %d/%d train %.6g val %.6g lr %.3g", epoch + 1, cfg.epochs, epoch_loss, val_loss, lr)
        if cfg.early_stop_patience and math.isfinite(val_loss):
            if val_loss < best_val or not math.isfinite(best_val):
                best_val, stale = val_loss, 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    logger.info("Validation loss plateaued; stopping after epoch %d", epoch + 1)
                    break
    return TrainResult(weights, history, initial_val)


def predict_windows(
    weights: MetscWeights, dictionary: Dictionary, windows: np.ndarray, chunk: int = 512
) -> np.ndarray:
    """Parameters for every window, in inference mode."""
    out = [
        forward(weights, dictionary, windows[start : start + chunk]).params.data
        for start in range(0, len(windows), chunk)
    ]
    return np.concatenate(out, axis=0) if out else np.zeros((0, 3))


def collect_codes(
    weights: MetscWeights, dictionary: Dictionary, windows: np.ndarray, chunk: int = 512
) -> np.ndarray:
    """Sparse codes of the unrolled decoder for every window."""
    if weights.decoder.kind != "unrolled":
        raise ConfigurationError(f"a '{weights.decoder.kind}' decoder produces no sparse code")
    out = [
        forward(weights, dictionary, windows[start : start + chunk]).code.data
        for start in range(0, len(windows), chunk)
    ]
    return np.concatenate(out, axis=0) if out else np.zeros((0, dictionary.atoms.shape[1]))


def predict(
    volume: Volume,
    weights: MetscWeights,
    dictionary: Dictionary,
    mask: Optional[np.ndarray] = None,
    measurements: Optional[np.ndarray] = None,
) -> ParameterMaps:
    """Parameter maps for every masked voxel; other voxels stay zero."""
    scheme = volume.scheme if measurements is None else volume.scheme.subset(measurements)
    if scheme.scheme_hash() != weights.scheme_hash:
        raise SchemeMismatchError(
            f"volume scheme {scheme.scheme_hash()} differs from the training scheme {weights.scheme_hash}; "
            "refit or subsample the volume to the training scheme"
        )
    batch = extract_windows(
        volume, mask, weights.encoder.patch_size, weights.encoder.window, measurements=measurements
    )
    maps = np.zeros(volume.data.shape[:3] + (3,))
    if len(batch):
        maps[tuple(batch.coords.T)] = predict_windows(weights, dictionary, batch.windows)
    return ParameterMaps(weights.kind, maps)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _manifest_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def save_checkpoint(
    path: Union[str, Path],
    weights: MetscWeights,
    history: Optional[List[Dict[str, float]]] = None,
    train_cfg: Optional[TrainConfig] = None,
) -> Path:
    """Arrays as one little-endian float64 payload in sorted name order, plus a JSON manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(weights.params):
        array = np.ascontiguousarray(weights.params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(array.tobytes())
        offset += array.size
    payload = b"".join(chunks)
    path.write_bytes(payload)
    manifest = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "network": weights.to_dict(),
        "arrays": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "seed": train_cfg.seed if train_cfg else None,
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "loss": LOSS_NAME,
        "loss_history": history or [],
    }
    _manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info("Wrote checkpoint %s (%d arrays)", path, len(entries))
    return path


def load_checkpoint(
    path: Union[str, Path],
    scheme_hash: Optional[str] = None,
    dictionary_hash: Optional[str] = None,
    force: bool = False,
) -> Tuple[MetscWeights, dict]:
    """Restore weights bit-exactly; refuses on hash mismatches unless ``force``."""
    path = Path(path)
    try:
        manifest = json.loads(_manifest_path(path).read_text())
        payload = path.read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"cannot read checkpoint {path}: {e}") from e
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise DataError(f"checkpoint payload {path} does not match its manifest checksum")
    net = manifest["network"]
    for label, expected, actual in (
        ("scheme", scheme_hash, net["scheme_hash"]),
        ("dictionary", dictionary_hash, net["dictionary_hash"]),
    ):
        if expected is not None and expected != actual:
            message = f"checkpoint was trained for {label} {actual}, got {expected}"
            if not force:
                raise SchemeMismatchError(message + " (pass force to load anyway)")
            logger.warning("Loading despite mismatch: %s", message)
    flat = np.frombuffer(payload, dtype="<f8")
    params = {}
    for entry in manifest["arrays"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        params[entry["name"]] = flat[entry["offset"] : entry["offset"] + size].reshape(entry["shape"]).copy()
    weights = MetscWeights(
        kind=ModelKind(net["kind"]),
        encoder=EncoderConfig(**net["encoder"]),
        decoder=DecoderConfig(**net["decoder"]),
        n_signals=int(net["n_signals"]),
        params=params,
        scheme_hash=net["scheme_hash"],
        dictionary_hash=net["dictionary_hash"],
        target_mean=np.asarray(net["target_mean"], dtype=np.float64),
        target_scale=np.asarray(net["target_scale"], dtype=np.float64),
    )
    return weights, manifest


def write_history_csv(path: Union[str, Path], history: List[Dict[str, float]]) -> Path:
    path = Path(path)
    lines = ["epoch,train_loss,val_loss,lr"]
    lines += [f"{h['epoch']},{h['train_loss']!r},{h['val_loss']!r},{h['lr']!r}" for h in history]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_model(
    weights_path: Union[str, Path],
    scheme: AcquisitionScheme,
    dictionary_path: Optional[Union[str, Path]] = None,
    force: bool = False,
) -> Tuple[MetscWeights, Dictionary]:
    """Checkpoint plus its dictionary (by default the one saved next to it), checked against ``scheme``."""
    dictionary_path = Path(dictionary_path) if dictionary_path else Path(weights_path).with_name(DICTIONARY_NAME)
    dictionary = load_dictionary(dictionary_path, None if force else scheme)
    weights, _ = load_checkpoint(weights_path, scheme.scheme_hash(), dictionary.dictionary_hash(), force=force)
    return weights, dictionary
