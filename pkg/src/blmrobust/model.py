"""The 1D CNN classifier: Conv-BN-ReLU-Dropout x2, global average pooling, dense logits.

Input is a preprocessed ``(630, 2)`` window (or a ``(B, 630, 2)`` batch), output
three logits ordered (no channeling, partial well, channeling).
"""

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .errors import FormatError, InvalidConfig, ShapeMismatch

WEIGHTS_MAGIC = "BLMCNN"
WEIGHTS_VERSION = 1

CLASS_NAMES = ("no_channeling", "partial_well", "channeling")
NUM_CLASSES = 3


@dataclass(frozen=True)
class ArchConfig:
    input_len: int = 630
    input_channels: int = 2
    conv1_channels: int = 256
    conv2_channels: int = 160
    kernel_size: int = 5
    num_classes: int = 3
    dropout_rate: float = 0.3
    scale_factor: float = 1.0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidConfig(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.num_classes != NUM_CLASSES:
            raise InvalidConfig("num_classes must be 3")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidConfig("dropout_rate must lie in [0, 1)")
        if self.scale_factor <= 0:
            raise InvalidConfig("scale_factor must be positive")
        if self.input_len < 2 or self.input_channels < 1:
            raise InvalidConfig("bad input shape")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise InvalidConfig("bn_momentum must lie in (0, 1]")
        if min(self.channels) < 1:
            raise InvalidConfig(f"scaled channel counts {self.channels} must be >= 1")

    @property
    def channels(self):
        """Effective (conv1, conv2) channel counts after ``scale_factor``."""
        f = Fraction(self.scale_factor).limit_denominator(1 << 16)
        return (int(round(self.conv1_channels * f)), int(round(self.conv2_channels * f)))

    def param_shapes(self):
        c1, c2 = self.channels
        k = self.kernel_size
        return {
            "conv1.weight": (c1, self.input_channels, k),
            "conv1.bias": (c1,),
            "bn1.gamma": (c1,),
            "bn1.beta": (c1,),
            "bn1.running_mean": (c1,),
            "bn1.running_var": (c1,),
            "conv2.weight": (c2, c1, k),
            "conv2.bias": (c2,),
            "bn2.gamma": (c2,),
            "bn2.beta": (c2,),
            "bn2.running_mean": (c2,),
            "bn2.running_var": (c2,),
            "dense.weight": (c2, self.num_classes),
            "dense.bias": (self.num_classes,),
        }

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


TRAINABLE = (
    "conv1.weight", "conv1.bias", "bn1.gamma", "bn1.beta",
    "conv2.weight", "conv2.bias", "bn2.gamma", "bn2.beta",
    "dense.weight", "dense.bias",
)
BUFFERS = ("bn1.running_mean", "bn1.running_var", "bn2.running_mean", "bn2.running_var")


@dataclass
class ModelParams:
    cfg: ArchConfig
    arrays: dict

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self):
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})

    def validate(self):
        shapes = self.cfg.param_shapes()
        if set(shapes) != set(self.arrays):
            raise FormatError(f"parameter names {sorted(self.arrays)} do not match config")
        for name, shape in shapes.items():
            arr = self.arrays[name]
            if arr.shape != shape:
                raise FormatError(f"{name}: shape {arr.shape} != {shape}")
            if not np.all(np.isfinite(arr)):
                raise FormatError(f"{name}: non-finite entries")
        for name in ("bn1.running_var", "bn2.running_var"):
            if np.any(self.arrays[name] <= 0):
                raise FormatError(f"{name} must be strictly positive")
        return self

    def fingerprint(self):
        """sha256 over config and raw parameter bytes."""
        h = hashlib.sha256(json.dumps(self.cfg.to_dict(), sort_keys=True).encode())
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name], dtype="<f8").tobytes())
        return h.hexdigest()


def build_model(cfg, seed):
    """He-normal conv kernels, Glorot-uniform dense layer, zero biases."""
    if not isinstance(cfg, ArchConfig):
        raise InvalidConfig("cfg must be an ArchConfig")
    rng = np.random.default_rng(seed)
    c1, c2 = cfg.channels
    k = cfg.kernel_size
    arrays = {}
    arrays["conv1.weight"] = rng.normal(0.0, np.sqrt(2.0 / (cfg.input_channels * k)),
                                       size=(c1, cfg.input_channels, k))
    arrays["conv1.bias"] = np.zeros(c1)
    arrays["conv2.weight"] = rng.normal(0.0, np.sqrt(2.0 / (c1 * k)), size=(c2, c1, k))
    arrays["conv2.bias"] = np.zeros(c2)
    for name, c in (("bn1", c1), ("bn2", c2)):
        arrays[f"{name}.gamma"] = np.ones(c)
        arrays[f"{name}.beta"] = np.zeros(c)
        arrays[f"{name}.running_mean"] = np.zeros(c)
        arrays[f"{name}.running_var"] = np.ones(c)
    limit = np.sqrt(6.0 / (c2 + cfg.num_classes))
    arrays["dense.weight"] = rng.uniform(-limit, limit, size=(c2, cfg.num_classes))
    arrays["dense.bias"] = np.zeros(cfg.num_classes)
    return ModelParams(cfg, arrays)


def param_nodes(g, params, trainable=False):
    """Graph nodes for the parameters: constants, or ``param`` leaves for training."""
    nodes = {}
    for name, arr in params.arrays.items():
        if trainable and name in TRAINABLE:
            nodes[name] = g.param(name, arr.shape)
        else:
            nodes[name] = g.const(arr)
    return nodes


@dataclass
class ForwardNodes:
    logits: object
    batch_stats: dict  # bn name -> (mean node, var node), train mode only


def build_logits(z, pn, cfg, mode="eval", drop_masks=None, freeze_bn=False):
    """Append the network to the graph of ``z`` (a ``(B, 630, 2)`` node).

    ``mode="train"`` uses batch statistics in batch-norm (unless ``freeze_bn``)
    and multiplies by the inverted-dropout masks in ``drop_masks``
    (nodes named ``drop1``/``drop2``, or ``None`` for no dropout).
    """
    if mode not in ("eval", "train"):
        raise ValueError(f"unknown mode {mode!r}")
    stats = {}
    h = z
    for i in (1, 2):
        h = ad.conv1d(h, pn[f"conv{i}.weight"]) + pn[f"conv{i}.bias"]
        gamma, beta = pn[f"bn{i}.gamma"], pn[f"bn{i}.beta"]
        if mode == "train" and not freeze_bn:
            mu = ad.mean(h, axis=(0, 1), keepdims=True)
            d = h - mu
            var = ad.mean(ad.square(d), axis=(0, 1), keepdims=True)
            inv = 1.0 / ad.sqrt(var + cfg.bn_eps)
            h = ad.affine(d, gamma * inv, beta)
            stats[f"bn{i}"] = (mu, var)
        else:
            rm = pn[f"bn{i}.running_mean"].value
            rv = pn[f"bn{i}.running_var"].value
            inv = h.graph.const(1.0 / np.sqrt(rv + cfg.bn_eps))
            s = gamma * inv
            h = ad.affine(h, s, beta - rm * s)
        h = ad.relu(h)
        if mode == "train" and drop_masks is not None:
            h = h * drop_masks[f"drop{i}"]
    pooled = ad.mean(h, axis=1)
    logits = ad.matmul(pooled, pn["dense.weight"]) + pn["dense.bias"]
    return ForwardNodes(logits, stats)


def dropout_masks(cfg, batch, rng):
    """Inverted-dropout masks for both blocks, or ``None`` when rate is 0."""
    if cfg.dropout_rate == 0.0:
        return None
    keep = 1.0 - cfg.dropout_rate
    c1, c2 = cfg.channels
    return {
        "drop1": (rng.random((batch, cfg.input_len, c1)) < keep) / keep,
        "drop2": (rng.random((batch, cfg.input_len, c2)) < keep) / keep,
    }


def update_running_stats(params, stat_values, count):
    """Momentum update of batch-norm buffers from batch mean/var arrays."""
    m = params.cfg.bn_momentum
    for bn, (mu, var) in stat_values.items():
        unbiased = var.reshape(-1) * (count / max(count - 1, 1))
        rm = params.arrays[f"{bn}.running_mean"]
        rv = params.arrays[f"{bn}.running_var"]
        params.arrays[f"{bn}.running_mean"] = (1 - m) * rm + m * mu.reshape(-1)
        params.arrays[f"{bn}.running_var"] = (1 - m) * rv + m * unbiased


def _as_batch(z, cfg):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 2
    if single:
        z = z[None]
    if z.ndim != 3 or z.shape[1:] != (cfg.input_len, cfg.input_channels):
        raise ShapeMismatch(f"expected (B, {cfg.input_len}, {cfg.input_channels}), got {z.shape}")
    return z, single


def forward_logits(params, z, mode="eval", rng=None, freeze_bn=False):
    """Logits for one preprocessed window ``(630, 2)`` or a batch ``(B, 630, 2)``.

    Train mode updates the batch-norm running statistics in ``params`` in place
    (unless ``freeze_bn``) and draws dropout masks from ``rng``.
    """
    cfg = params.cfg
    zb, single = _as_batch(z, cfg)
    if mode == "eval":
        g = ad.Graph()
        fw = build_logits(g.const(zb), param_nodes(g, params), cfg)
        out = fw.logits.value
    else:
        if rng is None:
            rng = np.random.default_rng()
        g = ad.Graph()
        zn = g.input("z")
        masks = dropout_masks(cfg, zb.shape[0], rng)
        mask_nodes = None if masks is None else {k: g.input(k) for k in masks}
        fw = build_logits(zn, param_nodes(g, params), cfg, mode="train",
                          drop_masks=mask_nodes, freeze_bn=freeze_bn)
        vals = ad.forward_eval(g, {"z": zb, **(masks or {})})
        out = vals[fw.logits.id]
        if fw.batch_stats:
            update_running_stats(
                params,
                {k: (vals[m.id], vals[v.id]) for k, (m, v) in fw.batch_stats.items()},
                zb.shape[0] * zb.shape[1],
            )
    return out[0] if single else out


# ---------------------------------------------------------------------------
# weight files: a zip (numpy .npz) holding "__header__" (JSON) plus one .npy per array

def save_weights(params, path):
    header = {
        "magic": WEIGHTS_MAGIC,
        "version": WEIGHTS_VERSION,
        "arch": params.cfg.to_dict(),
        "arrays": {k: list(v.shape) for k, v in sorted(params.arrays.items())},
    }
    payload = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in params.arrays.items()}
    payload["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_weights(path, expected_cfg=None):
    """Load a weight file; raises :class:`FormatError` on any inconsistency."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError:
        raise
    try:
        with np.load(io.BytesIO(raw), allow_pickle=False) as npz:
            files = {k: npz[k] for k in npz.files}
    except (zipfile.BadZipFile, ValueError, EOFError, OSError) as exc:
        raise FormatError(f"{path}: unreadable weight container ({exc})") from None
    if "__header__" not in files:
        raise FormatError(f"{path}: missing header")
    try:
        header = json.loads(files.pop("__header__").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    if header.get("magic") != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic {header.get('magic')!r}")
    if header.get("version") != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')!r}")
    try:
        cfg = ArchConfig.from_dict(header["arch"])
    except (KeyError, TypeError, InvalidConfig) as exc:
        raise FormatError(f"{path}: bad architecture header ({exc})") from None
    if expected_cfg is not None and cfg != expected_cfg:
        raise FormatError(f"{path}: architecture {cfg} does not match expected {expected_cfg}")
    declared = {k: tuple(v) for k, v in header.get("arrays", {}).items()}
    if declared != cfg.param_shapes():
        raise FormatError(f"{path}: declared arrays do not match the architecture")
    for k, shape in declared.items():
        if k not in files or files[k].shape != shape:
            raise FormatError(f"{path}: array {k} missing or mis-shaped")
    params = ModelParams(cfg, {k: files[k].astype(np.float64) for k in declared})
    return params.validate()
