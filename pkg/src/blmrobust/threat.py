"""Structured common-mode + per-channel L-inf threat model.

A perturbation is ``delta[t, c] = eps_com[c] * u_com[t] + eps_ind[c] * u_ind[t, c]``
with ``u`` in the unit box. In signal space the budgets are in units of the
clean window's per-channel sigma; in normalized space they are absolute.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import BoxViolation, NoUnpaddedEntries, SigmaZero
from .pipeline import (
    PAD_LENGTH,
    SIGMA_MIN,
    PaddedInput,
    Window,
    channel_stats,
    normalize_node,
)

ADMISSIBILITY_SLACK = 1e-9


@dataclass(frozen=True)
class StructuredBudget:
    eps_com: tuple = (0.10, 0.10)
    eps_ind: tuple = (0.02, 0.02)
    space: str = "signal"

    def __post_init__(self):
        com = tuple(float(e) for e in self.eps_com)
        ind = tuple(float(e) for e in self.eps_ind)
        if len(com) != 2 or len(ind) != 2:
            raise ValueError("budgets need exactly two channels")
        if min(com + ind) < 0 or not np.all(np.isfinite(com + ind)):
            raise ValueError("budgets must be finite and non-negative")
        if self.space not in ("signal", "normalized"):
            raise ValueError(f"unknown budget space {self.space!r}")
        object.__setattr__(self, "eps_com", com)
        object.__setattr__(self, "eps_ind", ind)

    @classmethod
    def from_pair(cls, com, ind, space="signal"):
        """Same ``(com, ind)`` budget on both channels, e.g. ``(0.10, 0.02)``."""
        return cls((com, com), (ind, ind), space)

    @property
    def per_channel(self):
        return np.asarray(self.eps_com) + np.asarray(self.eps_ind)

    @property
    def eps_glob(self):
        return float(self.per_channel.max())

    @property
    def is_zero(self):
        return not np.any(self.per_channel > 0)

    def scaled(self, k):
        return StructuredBudget(tuple(k * e for e in self.eps_com),
                                tuple(k * e for e in self.eps_ind), self.space)

    def to_dict(self):
        return {"eps_com": list(self.eps_com), "eps_ind": list(self.eps_ind), "space": self.space}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["eps_com"]), tuple(d["eps_ind"]), d.get("space", "signal"))


@dataclass
class PerturbationVars:
    u_com: np.ndarray
    u_ind: np.ndarray

    def __post_init__(self):
        self.u_com = np.asarray(self.u_com, dtype=np.float64)
        self.u_ind = np.asarray(self.u_ind, dtype=np.float64)
        if self.u_com.ndim != 1 or self.u_ind.shape != (self.u_com.shape[0], 2):
            raise ValueError(f"bad shapes u_com {self.u_com.shape}, u_ind {self.u_ind.shape}")

    @classmethod
    def zeros(cls, T):
        return cls(np.zeros(T), np.zeros((T, 2)))

    @classmethod
    def from_stacked(cls, u):
        u = np.asarray(u, dtype=np.float64)
        return cls(u[:, 0], u[:, 1:3])

    def stacked(self):
        """``(T, 3)`` array ``[u_com, u_ind_0, u_ind_1]``."""
        return np.column_stack([self.u_com, self.u_ind])

    def check_box(self):
        if np.abs(self.u_com).max(initial=0) > 1 or np.abs(self.u_ind).max(initial=0) > 1:
            raise BoxViolation("perturbation variables leave [-1, 1]")


def _stacked(u):
    if isinstance(u, PerturbationVars):
        u.check_box()
        return u.stacked()
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != 3:
        raise ValueError(f"stacked u must end in 3 columns, got {u.shape}")
    if np.abs(u).max(initial=0) > 1:
        raise BoxViolation("perturbation variables leave [-1, 1]")
    return u


def _budget_arrays(b):
    return np.asarray(b.eps_com), np.asarray(b.eps_ind)


def assemble_delta_array(u, b):
    """``eps_com * u[..., :1] + eps_ind * u[..., 1:]`` for stacked ``u`` (no box check)."""
    com, ind = _budget_arrays(b)
    return u[..., 0:1] * com + u[..., 1:3] * ind


def assemble_delta(u, b):
    """Structured perturbation ``(T, 2)`` from perturbation variables."""
    return assemble_delta_array(_stacked(u), b)


def delta_node(u, b):
    """Graph version of :func:`assemble_delta_array` for a ``(..., T, 3)`` node."""
    com, ind = _budget_arrays(b)
    return ad.slice_axis(u, -1, 0, 1) * com + ad.slice_axis(u, -1, 1, 3) * ind


def reparam_normalized(z, b, u, respect_padding=False):
    """``z + delta(u)`` in normalized space; ``u`` spans all 630 steps."""
    zz = z.z if isinstance(z, PaddedInput) else np.asarray(z, dtype=np.float64)
    delta = assemble_delta(u, b)
    if delta.shape != zz.shape:
        raise ValueError(f"u covers {delta.shape[0]} steps, input has {zz.shape[0]}")
    if respect_padding:
        delta = delta * z.mask
    return zz + delta


def signal_wrapper_node(x0, sigma0, u, b, ddof=0, p=PAD_LENGTH):
    """Preprocessing-aware wrapper ``P(N(x0 + sigma0 * delta(u)))`` as graph nodes.

    ``x0`` (B, W, 2) and ``sigma0`` (B, 1, 2) may be constants or inputs; ``u``
    is a (B, W, 3) node. Returns ``(z, delta_signal)`` nodes.
    """
    delta_sig = sigma0 * delta_node(u, b)
    x_hat = x0 + delta_sig
    z = ad.pad_left(normalize_node(x_hat, ddof), p)
    return z, delta_sig


def signal_delta(x0, b, u, ddof=0):
    """Signal-space perturbation ``sigma(x0) * delta(u)`` for one window."""
    values = x0.values if isinstance(x0, Window) else np.asarray(x0, dtype=np.float64)
    _, sigma, _ = channel_stats(values, ddof)
    return sigma[0] * assemble_delta(u, b)


def reparam_signal(x0, b, u, ddof=0):
    """``P(N(x_hat))`` with ``x_hat = x0 + sigma(x0) * delta(u)``, mask from ``x0``."""
    values = x0.values if isinstance(x0, Window) else np.asarray(x0, dtype=np.float64)
    _, sigma, raw = channel_stats(values, ddof)
    if np.any(raw <= SIGMA_MIN):
        raise SigmaZero(int(np.argmin(raw[0, 0])), float(raw.min()))
    us = _stacked(u)
    if us.shape[0] != values.shape[0]:
        raise ValueError(f"u covers {us.shape[0]} steps, window has {values.shape[0]}")
    x_hat = values + sigma[0] * assemble_delta_array(us, b)
    _, _, raw_hat = channel_stats(x_hat, ddof)
    if np.any(raw_hat <= SIGMA_MIN):
        c = int(np.argmin(raw_hat[0, 0]))
        raise SigmaZero(c, float(raw_hat[0, 0, c]))
    g = ad.Graph()
    z, _ = signal_wrapper_node(g.const(values[None]), g.const(sigma), g.const(us[None]), b, ddof)
    mask = np.zeros((PAD_LENGTH, 2))
    mask[PAD_LENGTH - values.shape[0]:] = 1.0
    return PaddedInput(z.value[0], mask)


@dataclass
class Admissibility:
    feasible: bool
    witness: np.ndarray  # s_t per step, NaN where the step is infeasible
    step_feasible: np.ndarray = field(repr=False)


def admissibility_check(delta, x0, b, scale=None, slack=ADMISSIBILITY_SLACK, ddof=0):
    """Is ``delta`` (W, 2, signal units) of the structured form for budget ``b``?

    Per step, ``d = delta / scale`` must admit a common ``s in [-1, 1]`` with
    ``|d_c - eps_com_c * s| <= eps_ind_c`` on both channels; the check
    intersects the per-channel intervals for ``s``. ``scale`` defaults to
    sigma(x0); pass ones for absolute (normalized-space) budgets.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if scale is None:
        values = x0.values if isinstance(x0, Window) else np.asarray(x0, dtype=np.float64)
        if values.shape != delta.shape:
            raise ValueError(f"delta {delta.shape} does not match window {values.shape}")
        scale = channel_stats(values, ddof)[1][0, 0]
    d = delta / np.asarray(scale, dtype=np.float64).reshape(1, 2)
    com, ind = _budget_arrays(b)
    lo = np.full(d.shape[0], -1.0)
    hi = np.full(d.shape[0], 1.0)
    ok = np.ones(d.shape[0], dtype=bool)
    for c in range(2):
        if com[c] > 0:
            lo = np.maximum(lo, (d[:, c] - ind[c] - slack) / com[c])
            hi = np.minimum(hi, (d[:, c] + ind[c] + slack) / com[c])
        else:
            ok &= np.abs(d[:, c]) <= ind[c] + slack
    ok &= lo <= hi
    witness = np.where(ok, 0.5 * (lo + hi), np.nan)
    if not np.any(com > 0):
        witness = np.where(ok, 0.0, np.nan)
    return Admissibility(bool(ok.all()), witness, ok)


def in_preprocessed_image(z, mask, tol=1e-9, ddof=0):
    """Could ``z`` be ``P(N(x))`` for some window ``x``?

    Requires exact zeros on padded rows and, per channel, unpadded mean within
    ``tol`` of 0 and standard deviation within ``tol`` of 1.
    """
    z = np.asarray(z, dtype=np.float64)
    mask = np.asarray(mask)
    if np.any(z[mask == 0] != 0):
        return False
    rows = mask[:, 0] > 0
    part = z[rows]
    if part.shape[0] < 2:
        return False
    mu = part.mean(axis=0)
    sd = part.std(axis=0, ddof=ddof)
    return bool(np.all(np.abs(mu) <= tol) and np.all(np.abs(sd - 1.0) <= tol))


def infeasibility_witness(z, eps, channel=0):
    """Point inside the L-inf ball of radius ``eps`` around ``z`` outside the image of P(N(.)).

    Shifts the first unpadded entry of ``channel`` by ``eps / 2``, which moves
    that channel's unpadded mean by ``eps / (2 W)``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    rows = np.flatnonzero(z.mask[:, channel] > 0)
    if rows.size == 0:
        raise NoUnpaddedEntries("no unpadded entries to modify")
    z_hat = z.z.copy()
    z_hat[rows[0], channel] += eps / 2.0
    return z_hat
