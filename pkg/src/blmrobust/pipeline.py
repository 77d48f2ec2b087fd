"""Deployed preprocessing and classification: C(X) = softmax(f(P(N(X)))).

N is per-window, per-channel z-normalization; P left-pads with zeros to the
model length of 630 samples. All numeric paths go through the autodiff graph
(constant-folded when there is nothing to differentiate), so the plain
classifier and the attack wrappers produce bitwise identical values.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import SigmaZero, TraceTooShort, WindowTooLong
from .model import build_logits, param_nodes

PAD_LENGTH = 630
SIGMA_MIN = 1e-9
# added to the variance inside the graph so d(sigma) stays finite
SIGMA_STABILIZER = 1e-12


@dataclass
class Window:
    values: np.ndarray
    origin: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != 2:
            raise ValueError(f"window must be (W, 2), got {self.values.shape}")
        if self.values.shape[0] > PAD_LENGTH:
            raise WindowTooLong(f"W={self.values.shape[0]} exceeds {PAD_LENGTH}")
        if self.values.shape[0] < 2:
            raise ValueError("window needs at least 2 samples")

    @property
    def W(self):
        return self.values.shape[0]


@dataclass
class PaddedInput:
    z: np.ndarray
    mask: np.ndarray

    @property
    def W(self):
        return int(self.mask[:, 0].sum())


@dataclass
class ClassProbs:
    probs: np.ndarray
    predicted_label: int


def _values(x):
    return x.values if isinstance(x, Window) else np.asarray(x, dtype=np.float64)


def _as_batch(x):
    x = _values(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"expected (W, 2) or (B, W, 2), got {x.shape}")
    return x, False


def normalize_node(x, ddof=0):
    """Graph z-normalization of a ``(B, W, C)`` node along time."""
    mu = ad.mean(x, axis=1, keepdims=True)
    d = x - mu
    var = ad.mean(ad.square(d), axis=1, keepdims=True, ddof=ddof)
    return d / ad.sqrt(var + SIGMA_STABILIZER)


def channel_stats(x, ddof=0):
    """Per-channel ``(mu, sigma, raw_sigma)`` over time, each shaped ``(B, 1, C)``.

    ``sigma`` includes the stabilizer and is what the graph divides by;
    ``raw_sigma`` is the plain (population by default) standard deviation.
    """
    xb, _ = _as_batch(x)
    n = xb.shape[1]
    mu = np.sum(xb, axis=1, keepdims=True) / n
    d = xb - mu
    var = np.sum(d * d, axis=1, keepdims=True) / (n - ddof)
    return mu, np.sqrt(var + SIGMA_STABILIZER), np.sqrt(var)


def check_sigma(x, ddof=0, sigma_min=SIGMA_MIN):
    """Raise :class:`SigmaZero` for the first degenerate channel (per batch row)."""
    xb, _ = _as_batch(x)
    _, _, raw = channel_stats(xb, ddof)
    bad = np.argwhere(raw[:, 0, :] <= sigma_min)
    if bad.size:
        b, c = bad[0]
        raise SigmaZero(int(c), float(raw[b, 0, c]), window=None if xb.shape[0] == 1 else int(b))


def znormalize(x, ddof=0):
    """Per-channel z-normalization of a ``(W, 2)`` window or ``(B, W, 2)`` batch."""
    xb, single = _as_batch(x)
    check_sigma(xb, ddof)
    g = ad.Graph()
    z = normalize_node(g.const(xb), ddof).value
    return z[0] if single else z


def pad_left(normed, p=PAD_LENGTH):
    """Prefix ``p - W`` zero rows; mask is 1 on the copied rows."""
    nb, single = _as_batch(normed)
    w = nb.shape[1]
    if w > p:
        raise WindowTooLong(f"W={w} exceeds pad length {p}")
    g = ad.Graph()
    z = ad.pad_left(g.const(nb), p).value
    mask = np.zeros_like(z)
    mask[:, p - w:, :] = 1.0
    if single:
        return PaddedInput(z[0], mask[0])
    return PaddedInput(z, mask)


def padding_mask(w, p=PAD_LENGTH, channels=2):
    mask = np.zeros((p, channels))
    mask[p - w:] = 1.0
    return mask


def preprocess(x, ddof=0):
    """``P(N(x))`` as a :class:`PaddedInput`."""
    return pad_left(znormalize(x, ddof))


def pipeline_logits_node(x, pn, cfg, ddof=0):
    """Logits node for raw windows ``x`` (a ``(B, W, 2)`` node)."""
    z = ad.pad_left(normalize_node(x, ddof), cfg.input_len)
    return build_logits(z, pn, cfg).logits


def probs_and_labels(logits):
    """Softmax probabilities and argmax labels (lowest index wins ties)."""
    probs = ad.softmax_array(logits)
    return probs, np.argmax(probs, axis=-1)


def classify_batch(params, xs, ddof=0):
    """Probabilities ``(B, 3)`` and labels ``(B,)`` for a batch of equal-length windows."""
    xb, _ = _as_batch(xs)
    if xb.shape[1] > params.cfg.input_len:
        raise WindowTooLong(f"W={xb.shape[1]} exceeds {params.cfg.input_len}")
    check_sigma(xb, ddof)
    g = ad.Graph()
    logits = pipeline_logits_node(g.const(xb), param_nodes(g, params), params.cfg, ddof)
    return probs_and_labels(logits.value)


def classify(params, x, ddof=0):
    """Deployed classifier output for one window (lowest-index argmax tie-break)."""
    xb, single = _as_batch(x)
    if not single:
        raise ValueError("classify takes a single window; use classify_batch")
    probs, labels = classify_batch(params, xb, ddof)
    return ClassProbs(probs[0], int(labels[0]))


def sliding_windows(trace, W):
    """All ``L - W + 1`` windows of a trace, window ``i`` covering ``[i, i + W)``."""
    values = trace.values if hasattr(trace, "values") else np.asarray(trace, dtype=np.float64)
    L = values.shape[0]
    if W < 2 or W > PAD_LENGTH:
        raise WindowTooLong(f"window length {W} outside [2, {PAD_LENGTH}]")
    if L < W:
        raise TraceTooShort(f"trace length {L} < window length {W}")
    return [Window(values[i:i + W], origin=i) for i in range(L - W + 1)]


def window_stack(values, W, origins=None):
    """``(n, W, 2)`` array of windows at ``origins`` (default: all)."""
    values = np.asarray(values, dtype=np.float64)
    L = values.shape[0]
    if L < W:
        raise TraceTooShort(f"trace length {L} < window length {W}")
    if origins is None:
        origins = np.arange(L - W + 1)
    idx = np.asarray(origins)[:, None] + np.arange(W)[None, :]
    return values[idx]
