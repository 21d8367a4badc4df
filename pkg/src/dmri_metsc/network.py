"""The three-stage network: patch encoder, unrolled IHT decoder, and parameter mapping.

Inputs are windows of patches shaped ``(batch, N, p*p*C)``: ``N`` patches around a core
voxel, each a flattened ``p x p x C`` block (C fastest) normalized by the core voxel's b=0
signal. Row ``N // 2`` is the core voxel's own patch.

All learnable arrays live in :attr:`MetscWeights.params`. A forward pass wraps them in
:class:`~dmri_metsc.gradcore.Tensor` leaves so the same code serves inference and training.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Optional

import numpy as np

from dmri_metsc import gradcore as gc
from dmri_metsc.errors import ConfigurationError, DimensionError, NumericalError
from dmri_metsc.models import UM2_PER_MS, ModelKind
from dmri_metsc.solvers import IVIM_BOX, spectral_norm_sq
from dmri_metsc.sparse_dict import TAU, Dictionary, IvimDictionary, NoddiDictionary, principal_direction

logger = logging.getLogger(__name__)

NODDI_KAPPA_BOX = (1e-3, 1e3)
ENCODER_KINDS = ("transformer", "conv")
DECODER_KINDS = ("unrolled", "mlp")


@dataclass
class EncoderConfig:
    """Stage-one settings. ``depth=0`` skips every attention block."""

    patch_size: int = 3
    embed_dim: int = 64
    heads: int = 4
    depth: int = 2
    ffn_dim: int = 128
    dropout: float = 0.1
    window: int = 3
    positional: bool = False
    kind: str = "transformer"

    def __post_init__(self) -> None:
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigurationError(f"patch_size must be a positive odd integer, got {self.patch_size}")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigurationError(f"window must be a positive odd integer, got {self.window}")
        if self.heads < 1 or self.embed_dim % self.heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads"
            )
        if self.depth < 0:
            raise ConfigurationError("depth must be non-negative")
        if self.kind not in ENCODER_KINDS:
            raise ConfigurationError(f"encoder kind must be one of {ENCODER_KINDS}, got {self.kind}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def n_patches(self) -> int:
        return self.window * self.window

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return asdict(self)


@dataclass
class DecoderConfig:
    """Stage-two settings. ``lambda_init`` is relative to the dictionary's spectral norm."""

    n_layers: int = 8
    dict_size: int = 0
    lambda_init: float = 0.01
    weights_shared: bool = True
    kind: str = "unrolled"
    mlp_hidden: int = 128

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ConfigurationError("n_layers must be at least 1")
        if self.lambda_init <= 0:
            raise ConfigurationError("lambda_init must be positive")
        if self.kind not in DECODER_KINDS:
            raise ConfigurationError(f"decoder kind must be one of {DECODER_KINDS}, got {self.kind}")

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return asdict(self)


@dataclass
class MetscWeights:
    """Every array of one network plus the hashes it was built against."""

    kind: ModelKind
    encoder: EncoderConfig
    decoder: DecoderConfig
    n_signals: int
    params: Dict[str, np.ndarray]
    scheme_hash: str
    dictionary_hash: str
    target_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    target_scale: np.ndarray = field(default_factory=lambda: np.ones(3))

    @property
    def patch_features(self) -> int:
        return self.encoder.patch_size**2 * self.n_signals

    def copy(self) -> "MetscWeights":
        return MetscWeights(
            kind=self.kind,
            encoder=self.encoder,
            decoder=self.decoder,
            n_signals=self.n_signals,
            params={k: v.copy() for k, v in self.params.items()},
            scheme_hash=self.scheme_hash,
            dictionary_hash=self.dictionary_hash,
            target_mean=self.target_mean.copy(),
            target_scale=self.target_scale.copy(),
        )

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def to_dict(self) -> dict:
        """Convert to dictionary (configuration only, arrays excluded)."""
        return {
            "kind": ModelKind(self.kind).value,
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
            "n_signals": self.n_signals,
            "scheme_hash": self.scheme_hash,
            "dictionary_hash": self.dictionary_hash,
            "target_mean": self.target_mean.tolist(),
            "target_scale": self.target_scale.tolist(),
            "parameter_count": self.parameter_count(),
        }


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _identity_like(rows: int, cols: int, row_offset: int = 0) -> np.ndarray:
    out = np.zeros((rows, cols))
    n = min(rows - row_offset, cols)
    out[row_offset + np.arange(n), np.arange(n)] = 1.0
    return out


def center_offset(patch_size: int, n_signals: int) -> int:
    """Feature offset of the center voxel inside a flattened patch."""
    half = patch_size // 2
    return (half * patch_size + half) * n_signals


def analytic_decoder(atoms: np.ndarray, lambda_rel: float):
    """W0 = step Phi^T, S0 = I - step Phi^T Phi and the matching threshold."""
    lipschitz = spectral_norm_sq(atoms)
    step = 0.99 / lipschitz
    W = step * atoms.T
    S = np.eye(atoms.shape[1]) - step * (atoms.T @ atoms)
    lam = lambda_rel * step * math.sqrt(lipschitz)
    return W, S, lam


def init_weights(
    dictionary: Dictionary,
    encoder: Optional[EncoderConfig] = None,
    decoder: Optional[DecoderConfig] = None,
    seed: int = 0,
    bypass: bool = False,
) -> MetscWeights:
    """Build a network whose decoder starts at the analytic IHT operators.

    The embedding and output projection start identity-like (center voxel in, center voxel
    out) when ``embed_dim >= C``. ``bypass`` drops every encoder block on top of that, so the
    whole network reduces to classic IHT followed by block-barycenter extraction.
    """
    encoder = encoder or EncoderConfig()
    if bypass:
        encoder = replace(encoder, depth=0, kind="transformer")
    n_atoms = dictionary.atoms.shape[1]
    decoder = decoder or DecoderConfig(dict_size=n_atoms)
    if decoder.dict_size == 0:
        decoder = DecoderConfig(**{**decoder.to_dict(), "dict_size": n_atoms})
    if decoder.dict_size != n_atoms:
        raise ConfigurationError(
            f"decoder dict_size {decoder.dict_size} does not match dictionary with {n_atoms} atoms"
        )
    C = dictionary.atoms.shape[0]
    D = encoder.embed_dim
    F = encoder.patch_size**2 * C
    rng = np.random.default_rng(seed)

    def normal(*shape, std=0.02):
        return rng.normal(0.0, std, size=shape)

    identity = D >= C
    if bypass and not identity:
        raise ConfigurationError(f"bypass needs embed_dim >= {C} measurements, got {D}")
    params: Dict[str, np.ndarray] = {}
    offset = center_offset(encoder.patch_size, C)
    if encoder.kind == "transformer":
        params["E"] = _identity_like(F, D, offset) if identity else normal(F, D, std=1 / math.sqrt(F))
        if encoder.positional:
            params["pos"] = normal(encoder.n_patches, D)
        for l in range(encoder.depth):
            prefix = f"block{l}."
            params[prefix + "ln1_g"] = np.ones(D)
            params[prefix + "ln1_b"] = np.zeros(D)
            params[prefix + "U_qkv"] = normal(D, 3 * D, std=1 / math.sqrt(D))
            params[prefix + "U_msa"] = normal(D, D)
            params[prefix + "ln2_g"] = np.ones(D)
            params[prefix + "ln2_b"] = np.zeros(D)
            params[prefix + "W1"] = normal(D, encoder.ffn_dim, std=1 / math.sqrt(D))
            params[prefix + "b1"] = np.zeros(encoder.ffn_dim)
            params[prefix + "W2"] = normal(encoder.ffn_dim, D)
            params[prefix + "b2"] = np.zeros(D)
    else:
        params["conv.W"] = normal(F, D, std=1 / math.sqrt(F))
        params["conv.b"] = np.zeros(D)
        params["conv.ln_g"] = np.ones(D)
        params["conv.ln_b"] = np.zeros(D)
    params["P"] = _identity_like(D, C) if identity else normal(D, C, std=1 / math.sqrt(D))
    params["fuse"] = np.vstack([0.5 * np.eye(C), 0.5 * np.eye(C)])

    kind = ModelKind(dictionary.kind)
    if decoder.kind == "unrolled":
        W, S, lam = analytic_decoder(dictionary.atoms, decoder.lambda_init)
        if decoder.weights_shared:
            params["W"], params["S"] = W, S
        else:
            for l in range(decoder.n_layers):
                params[f"W.{l}"], params[f"S.{l}"] = W.copy(), S.copy()
        params["log_lam"] = np.full(decoder.n_layers, math.log(lam))
        if kind is ModelKind.IVIM:
            # diffusivity grids are learned in um^2/ms so Adam steps stay proportionate
            params["grid.D"] = dictionary.d_grid * UM2_PER_MS
            params["grid.Dstar"] = dictionary.dstar_grid * UM2_PER_MS
        else:
            params["grid.vic"] = dictionary.atom_vic.copy()
            params["grid.kappa"] = dictionary.atom_kappa.copy()
    else:
        H = decoder.mlp_hidden
        params["mlp.W1"] = normal(C, H, std=math.sqrt(2.0 / C))
        params["mlp.b1"] = np.zeros(H)
        params["mlp.W2"] = normal(H, H, std=math.sqrt(2.0 / H))
        params["mlp.b2"] = np.zeros(H)
        params["mlp.W3"] = normal(H, 3, std=math.sqrt(1.0 / H))
        params["mlp.b3"] = np.zeros(3)

    logger.info(
        "Initialized %s network (%s encoder, %s decoder, %d atoms)",
        kind.value,
        encoder.kind,
        decoder.kind,
        n_atoms,
    )
    return MetscWeights(
        kind=kind,
        encoder=encoder,
        decoder=decoder,
        n_signals=C,
        params=params,
        scheme_hash=dictionary.scheme.scheme_hash(),
        dictionary_hash=dictionary.dictionary_hash(),
    )


def leaves(weights: MetscWeights, requires_grad: bool = False) -> Dict[str, gc.Tensor]:
    """Wrap every parameter array as a tensor leaf."""
    return {k: gc.Tensor(v, requires_grad=requires_grad, name=k) for k, v in weights.params.items()}


# ---------------------------------------------------------------------------
# Stage 1: encoder
# ---------------------------------------------------------------------------


def _attention(x: gc.Tensor, p: Dict[str, gc.Tensor], prefix: str, cfg: EncoderConfig):
    D, Dh = cfg.embed_dim, cfg.head_dim
    qkv = x @ p[prefix + "U_qkv"]
    heads = []
    scale = 1.0 / math.sqrt(Dh)
    for h in range(cfg.heads):
        q = gc.take(qkv, slice(h * Dh, (h + 1) * Dh), axis=-1)
        k = gc.take(qkv, slice(D + h * Dh, D + (h + 1) * Dh), axis=-1)
        v = gc.take(qkv, slice(2 * D + h * Dh, 2 * D + (h + 1) * Dh), axis=-1)
        scores = gc.softmax_rows(gc.matmul(q, gc.transpose(k)) * scale)
        heads.append(gc.matmul(scores, v))
    return gc.concat(heads, axis=-1) @ p[prefix + "U_msa"]


def _block(z, p, prefix, cfg, training, rng):
    z_msa = _attention(gc.layer_norm(z, p[prefix + "ln1_g"], p[prefix + "ln1_b"]), p, prefix, cfg)
    z_msa = gc.dropout(z_msa, cfg.dropout, rng, training)
    mid = z + z_msa
    hidden = gc.gelu(gc.layer_norm(mid, p[prefix + "ln2_g"], p[prefix + "ln2_b"]) @ p[prefix + "W1"] + p[prefix + "b1"])
    hidden = gc.dropout(hidden, cfg.dropout, rng, training)
    # residual sums the block input, the attention output and the feed-forward output
    return hidden @ p[prefix + "W2"] + p[prefix + "b2"] + z + z_msa


def encode_batch(
    patches: np.ndarray,
    p: Dict[str, gc.Tensor],
    cfg: EncoderConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> gc.Tensor:
    """Encode ``(batch, N, features)`` windows into one length-C vector per core voxel."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3:
        raise DimensionError(f"expected (batch, N, features) windows, got shape {patches.shape}")
    core = patches.shape[1] // 2
    if cfg.kind == "conv":
        x = gc.Tensor(patches[:, core, :])
        h = gc.relu(gc.layer_norm(x @ p["conv.W"] + p["conv.b"], p["conv.ln_g"], p["conv.ln_b"]))
        return h @ p["P"]
    if patches.shape[2] != p["E"].shape[0]:
        raise DimensionError(
            f"patch features {patches.shape[2]} do not match the embedding ({p['E'].shape[0]})"
        )
    z = gc.Tensor(patches) @ p["E"]
    if "pos" in p:
        if patches.shape[1] != p["pos"].shape[0]:
            raise DimensionError("positional embedding does not match the patch count")
        z = z + p["pos"]
    for l in range(cfg.depth):
        z = _block(z, p, f"block{l}.", cfg, training, rng)
    return gc.take(z, core, axis=1) @ p["P"]


def encode(patch_stack: np.ndarray, cfg: EncoderConfig, weights: MetscWeights) -> np.ndarray:
    """Encode one ``(N, features)`` window; returns the length-C encoded signal."""
    patch_stack = np.asarray(patch_stack, dtype=np.float64)
    if patch_stack.ndim != 2:
        raise DimensionError(f"expected (N, features), got shape {patch_stack.shape}")
    return encode_batch(patch_stack[None], leaves(weights), cfg).data[0].copy()


def core_signals(patches: np.ndarray, patch_size: int, n_signals: int) -> np.ndarray:
    """Center-voxel signals of each window's core patch."""
    offset = center_offset(patch_size, n_signals)
    core = patches.shape[1] // 2
    return np.asarray(patches)[:, core, offset : offset + n_signals]


def fuse(z_fc: gc.Tensor, raw: np.ndarray, p: Dict[str, gc.Tensor]) -> gc.Tensor:
    """Concatenate the raw core signals to the encoding and project back to length C."""
    return gc.concat([z_fc, gc.Tensor(raw)], axis=-1) @ p["fuse"]


# ---------------------------------------------------------------------------
# Stage 2: unrolled IHT
# ---------------------------------------------------------------------------


@dataclass
class OrientationSteering:
    """Per-voxel corrections that rotate the decoder onto each core voxel's fibre.

    ``dW_T[i] = step (Phi_i - Phi_0)`` and ``dS_T[i] = -step (Phi_i^T Phi_i - Phi_0^T Phi_0)``
    where ``Phi_0`` are the canonical atoms and ``Phi_i`` the atoms rotated onto voxel i's
    principal direction. Added to the learned W and S they reproduce IHT on ``Phi_i``.
    """

    dW_T: np.ndarray
    dS_T: np.ndarray

    def __len__(self) -> int:
        return int(self.dW_T.shape[0])


def orientation_steering(dictionary: NoddiDictionary, raw: np.ndarray) -> OrientationSteering:
    """Steering terms for a batch of b=0-normalized core signals."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    canonical = dictionary.atoms
    if raw.shape[1] != canonical.shape[0]:
        raise DimensionError(
            f"core signals have {raw.shape[1]} measurements but the dictionary has {canonical.shape[0]} rows"
        )
    step = 0.99 / spectral_norm_sq(canonical)
    gram = canonical.T @ canonical
    n_voxels, n_atoms = raw.shape[0], canonical.shape[1]
    dW_T = np.empty((n_voxels, canonical.shape[0], n_atoms))
    dS_T = np.empty((n_voxels, n_atoms, n_atoms))
    for i, signal in enumerate(raw):
        rotated = dictionary.atoms_for(principal_direction(signal, dictionary.scheme))
        dW_T[i] = step * (rotated - canonical)
        dS_T[i] = -step * (rotated.T @ rotated - gram)
    return OrientationSteering(dW_T, dS_T)


def _per_voxel(v: gc.Tensor, operators: np.ndarray) -> gc.Tensor:
    """Row i of ``v`` times ``operators[i]``."""
    batch, width = v.data.shape
    out = gc.reshape(v, (batch, 1, width)) @ gc.Tensor(operators)
    return gc.reshape(out, (batch, operators.shape[2]))


def unrolled_decode_batch(
    u: gc.Tensor,
    p: Dict[str, gc.Tensor],
    cfg: DecoderConfig,
    steering: Optional[OrientationSteering] = None,
) -> gc.Tensor:
    """x <- H(W u + S x, lam_l) for ``n_layers`` layers starting at x = 0.

    With ``steering`` every row uses its own W + dW and S + dS.
    """
    if steering is not None and len(steering) != u.data.shape[0]:
        raise DimensionError(f"steering covers {len(steering)} voxels, batch has {u.data.shape[0]}")
    lam = gc.exp(p["log_lam"])
    x = None
    for l in range(cfg.n_layers):
        W = p["W"] if cfg.weights_shared else p[f"W.{l}"]
        S = p["S"] if cfg.weights_shared else p[f"S.{l}"]
        pre = u @ gc.transpose(W)
        if steering is not None:
            pre = pre + _per_voxel(u, steering.dW_T)
        if x is not None:
            pre = pre + x @ gc.transpose(S)
            if steering is not None:
                pre = pre + _per_voxel(x, steering.dS_T)
        x = gc.hard_threshold(pre, gc.take(lam, l, axis=0), nonneg=True)
        if not np.all(np.isfinite(x.data)):
            raise NumericalError(f"non-finite sparse code at decoder layer {l}")
    return x


def unrolled_decode(z_fc: np.ndarray, dec_cfg: DecoderConfig, weights: MetscWeights) -> np.ndarray:
    """Sparse code for one encoded signal."""
    u = gc.Tensor(np.asarray(z_fc, dtype=np.float64).reshape(1, -1))
    return unrolled_decode_batch(u, leaves(weights), dec_cfg).data[0].copy()


# ---------------------------------------------------------------------------
# Stage 3: parameter mapping
# ---------------------------------------------------------------------------


def _normalize(x: gc.Tensor) -> gc.Tensor:
    shifted = x + TAU
    return shifted / gc.sum_(shifted, axis=-1, keepdims=True)


def _barycenter(block: gc.Tensor, grid: gc.Tensor) -> gc.Tensor:
    return gc.sum_(block * grid, axis=-1, keepdims=True) / gc.sum_(block, axis=-1, keepdims=True)


def map_ivim_batch(x: gc.Tensor, p: Dict[str, gc.Tensor], dictionary: IvimDictionary) -> gc.Tensor:
    """(f, D, D*) per row with learnable grid vectors clamped to the valid box."""
    xn = _normalize(x)
    tissue = gc.take(xn, dictionary.tissue_block, axis=-1)
    perfusion = gc.take(xn, dictionary.perfusion_block, axis=-1)
    d_grid = gc.clip(p["grid.D"] / UM2_PER_MS, *IVIM_BOX["D"])
    dstar_grid = gc.clip(p["grid.Dstar"] / UM2_PER_MS, *IVIM_BOX["Dstar"])
    f = gc.sum_(perfusion, axis=-1, keepdims=True)
    return gc.concat([f, _barycenter(tissue, d_grid), _barycenter(perfusion, dstar_grid)], axis=-1)


def map_noddi_batch(x: gc.Tensor, p: Dict[str, gc.Tensor], dictionary: NoddiDictionary) -> gc.Tensor:
    """(v_ic, v_iso, OD) per row; OD = 2/pi * atan(1/kappa) of the barycentric kappa."""
    xn = _normalize(x)
    aniso = gc.take(xn, dictionary.aniso_block, axis=-1)
    v_iso = gc.sum_(gc.take(xn, dictionary.iso_block, axis=-1), axis=-1, keepdims=True)
    v_ic = _barycenter(aniso, gc.clip(p["grid.vic"], 0.0, 1.0))
    kappa = _barycenter(aniso, gc.clip(p["grid.kappa"], *NODDI_KAPPA_BOX))
    od = gc.atan(1.0 / kappa) * (2.0 / math.pi)
    return gc.concat([v_ic, v_iso, od], axis=-1)


def map_ivim(x: np.ndarray, dictionary: IvimDictionary, weights: MetscWeights) -> np.ndarray:
    return map_ivim_batch(gc.Tensor(np.atleast_2d(x)), leaves(weights), dictionary).data[0].copy()


def map_noddi(x: np.ndarray, dictionary: NoddiDictionary, weights: MetscWeights) -> np.ndarray:
    return map_noddi_batch(gc.Tensor(np.atleast_2d(x)), leaves(weights), dictionary).data[0].copy()


def parameter_box(kind: ModelKind) -> np.ndarray:
    """Lower/upper bound per output parameter, shape (2, 3)."""
    if ModelKind(kind) is ModelKind.IVIM:
        return np.array([[0.0, IVIM_BOX["D"][0], IVIM_BOX["Dstar"][0]], [1.0, IVIM_BOX["D"][1], IVIM_BOX["Dstar"][1]]])
    return np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


def _mlp_head(u: gc.Tensor, p: Dict[str, gc.Tensor], weights: MetscWeights) -> gc.Tensor:
    h = gc.relu(u @ p["mlp.W1"] + p["mlp.b1"])
    h = gc.relu(h @ p["mlp.W2"] + p["mlp.b2"])
    standardized = h @ p["mlp.W3"] + p["mlp.b3"]
    out = standardized * weights.target_scale + weights.target_mean
    box = parameter_box(weights.kind)
    parts = [gc.clip(gc.take(out, slice(k, k + 1), axis=-1), box[0, k], box[1, k]) for k in range(3)]
    return gc.concat(parts, axis=-1)


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    params: gc.Tensor
    code: Optional[gc.Tensor]
    encoded: gc.Tensor


def forward(
    weights: MetscWeights,
    dictionary: Dictionary,
    patches: np.ndarray,
    p: Optional[Dict[str, gc.Tensor]] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> ForwardResult:
    """Run all three stages on a batch of windows.

    NODDI decoders are steered per voxel onto the core signal's principal direction.
    """
    p = p if p is not None else leaves(weights)
    patches = np.asarray(patches, dtype=np.float64)
    encoded = encode_batch(patches, p, weights.encoder, training, rng)
    raw = core_signals(patches, weights.encoder.patch_size, weights.n_signals)
    u = fuse(encoded, raw, p)
    if weights.decoder.kind == "mlp":
        return ForwardResult(_mlp_head(u, p, weights), None, encoded)
    steering = orientation_steering(dictionary, raw) if isinstance(dictionary, NoddiDictionary) else None
    code = unrolled_decode_batch(u, p, weights.decoder, steering)
    if isinstance(dictionary, IvimDictionary):
        params = map_ivim_batch(code, p, dictionary)
    else:
        params = map_noddi_batch(code, p, dictionary)
    return ForwardResult(params, code, encoded)
