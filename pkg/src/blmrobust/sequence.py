"""Sequence-level analysis over sliding windows of a scan.

A single structured perturbation of the trace induces consistent perturbations
of every window that overlaps it. This module classifies whole traces, attacks
a range of windows jointly, measures how smoothly the class probabilities move,
and grows adversarial sequences one window at a time.

Budgets for a sequence use one per-channel unit for every time step: the
standard deviation of the clean trace over the perturbed support (for the
extension search, the seed window's). Admissibility of each window is checked
in that unit; admissibility under each window's own sigma is reported too.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attack import PgdConfig, pgd_batch, sample_rng
from .errors import SigmaZero, TraceTooShort, ValidationError
from .model import build_logits, param_nodes
from .pipeline import (
    PAD_LENGTH,
    SIGMA_MIN,
    channel_stats,
    classify_batch,
    normalize_node,
    probs_and_labels,
    window_stack,
)
from .threat import admissibility_check, assemble_delta_array, delta_node

DEFAULT_KAPPA = 0.5
CHANNELING = 2


def _trace_values(trace):
    values = trace.values if hasattr(trace, "values") else trace
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != 2:
        raise ValidationError(f"trace must be (L, 2), got {values.shape}")
    return values


def classify_windows(params, values, W, origins=None, ddof=0, chunk=64):
    """Probabilities and labels for the windows of ``values`` at ``origins``."""
    xs = window_stack(values, W, origins)
    probs, labels = [], []
    for lo in range(0, xs.shape[0], chunk):
        try:
            p, lab = classify_batch(params, xs[lo:lo + chunk], ddof)
        except SigmaZero as exc:
            if exc.window is not None:
                exc = SigmaZero(exc.channel, exc.sigma, window=lo + exc.window)
            raise exc from None
        probs.append(p)
        labels.append(lab)
    return np.concatenate(probs), np.concatenate(labels)


@dataclass
class ClassSequence:
    probs: np.ndarray  # (L - W + 1, 3)
    labels: np.ndarray
    W: int

    def __len__(self):
        return self.probs.shape[0]


def classification_sequence(params, trace, W, ddof=0):
    """Classifier output for every window origin of the trace."""
    values = _trace_values(trace)
    if values.shape[0] < W:
        raise TraceTooShort(f"trace length {values.shape[0]} < window length {W}")
    probs, labels = classify_windows(params, values, W, ddof=ddof)
    return ClassSequence(probs, labels, W)


@dataclass
class SmoothnessReport:
    steps: np.ndarray
    max_step: float
    kappa: float
    is_smooth: bool

    def to_dict(self):
        return {"steps": self.steps.tolist(), "max_step": self.max_step,
                "kappa": self.kappa, "is_smooth": self.is_smooth}


def smoothness(seq, kappa=DEFAULT_KAPPA):
    """L1 distance between consecutive probability vectors, against ``kappa``."""
    probs = np.asarray(seq.probs if hasattr(seq, "probs") else seq, dtype=np.float64)
    steps = np.abs(np.diff(probs, axis=0)).sum(axis=1) if probs.shape[0] > 1 else np.zeros(0)
    max_step = float(steps.max()) if steps.size else 0.0
    return SmoothnessReport(steps, max_step, float(kappa), max_step < kappa)


@dataclass
class AdvSequence:
    """Windows ``start..end`` of a trace under one consistent perturbation.

    ``delta`` covers trace indices ``[offset, offset + len(delta))``; window
    ``j`` sees ``delta[j - offset : j - offset + W]``.
    """

    start: int
    end: int
    W: int
    offset: int
    delta: np.ndarray
    scale: np.ndarray  # per-channel unit the budget is expressed in
    probs: np.ndarray
    labels: np.ndarray
    clean_labels: np.ndarray
    admissible: np.ndarray
    own_sigma_admissible: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.end - self.start + 1

    @property
    def flipped(self):
        return self.labels != self.clean_labels

    @property
    def adversarial(self):
        return self.flipped & self.admissible

    def window_delta(self, j):
        lo = j - self.offset
        return self.delta[lo:lo + self.W]

    def consistent(self):
        """Overlapping samples of consecutive windows share their perturbation exactly."""
        for j in range(self.start, self.end):
            a, b = self.window_delta(j), self.window_delta(j + 1)
            if not np.array_equal(a[1:], b[:-1]):
                return False
        return True

    def to_dict(self):
        return {
            "start": self.start, "end": self.end, "W": self.W, "length": len(self),
            "labels": self.labels.tolist(), "clean_labels": self.clean_labels.tolist(),
            "admissible": self.admissible.tolist(),
            "own_sigma_admissible": (None if self.own_sigma_admissible is None
                                     else self.own_sigma_admissible.tolist()),
            "scale": self.scale.tolist(),
        }


def _evaluate_sequence(params, values, W, start, end, offset, delta, scale, b, ddof,
                       clean_labels=None):
    """Re-classify windows ``start..end`` of ``values + delta`` independently."""
    pert = values.copy()
    pert[offset:offset + delta.shape[0]] += delta
    origins = np.arange(start, end + 1)
    probs, labels = classify_windows(params, pert, W, origins, ddof)
    if clean_labels is None:
        clean_labels = classify_windows(params, values, W, origins, ddof)[1]
    adm, own = [], []
    for j in origins:
        d = delta[j - offset:j - offset + W]
        adm.append(admissibility_check(d, None, b, scale=scale).feasible)
        own.append(admissibility_check(d, values[j:j + W], b, ddof=ddof).feasible)
    return AdvSequence(int(start), int(end), W, int(offset), delta, scale, probs, labels,
                       np.asarray(clean_labels), np.array(adm), np.array(own))


# ---------------------------------------------------------------------------
# joint attack over a window range

class _SequenceObjective:
    def __init__(self, params, segment, scale, W, b, goal, cls, ddof):
        self.W = W
        self.goal = goal
        self.cls = cls
        n = segment.shape[0] - W + 1
        idx = np.arange(n)[:, None] + np.arange(W)[None, :]
        g = ad.Graph()
        u = g.input("u", segment.shape[:1] + (3,))
        x_hat = g.const(segment) + g.const(scale[None]) * delta_node(u, b)
        z = ad.pad_left(normalize_node(ad.take(x_hat, idx), ddof), PAD_LENGTH)
        logits = build_logits(z, param_nodes(g, params), params.cfg).logits
        onehot = np.zeros((n, params.cfg.num_classes))
        onehot[:, cls] = 1.0
        xent = ad.softmax_xent(logits, onehot)
        # suppress: push -log p(cls) up; target: push log p(cls) up
        per_window = xent if goal == "suppress" else ad.neg(xent)
        g.set_output(ad.sum_(per_window))
        self.graph, self.logits, self.out = g, logits, g.output
        self.segment, self.scale, self.b, self.ddof = segment, scale, b, ddof

    def labels(self, u):
        vals = ad.forward_eval(self.graph, {"u": u}, check_finite=False)
        return probs_and_labels(vals[self.logits.id])[1]

    def goal_met(self, labels):
        return labels != self.cls if self.goal == "suppress" else labels == self.cls

    def evaluate(self, u, rows):
        bind = {"u": u[0]}
        vals = ad.forward_eval(self.graph, bind, check_finite=False)
        grad = ad.backward_grad(self.graph, bind, {"u"}, values=vals, check_finite=False)["u"]
        met = self.goal_met(probs_and_labels(vals[self.logits.id])[1])
        self.last_count = int(met.sum())
        self.trace_counts.append(self.last_count)
        if self.last_count > self.best_count:
            self.best_count, self.best_u = self.last_count, u[0].copy()
        loss = float(vals[self.out.id].reshape(()))
        return np.array([loss]), grad[None], np.array([bool(met.all())])

    def valid(self, u, rows):
        x_hat = self.segment + self.scale[None] * assemble_delta_array(u[0], self.b)
        idx = np.arange(self.segment.shape[0] - self.W + 1)[:, None] + np.arange(self.W)[None, :]
        _, _, raw = channel_stats(x_hat[idx], self.ddof)
        return np.array([bool(np.all(raw > SIGMA_MIN))])


@dataclass
class SequenceAttackResult:
    perturbed: np.ndarray
    sequence: AdvSequence
    n_flips: int
    n_goal: int
    loss_trace: list = field(repr=False)


def sequence_attack(params, trace, a, b_end, budget, cfg=None, goal="suppress", cls=CHANNELING,
                    W=None, ddof=0):
    """One structured perturbation of ``trace[a : b_end + W]`` attacking windows ``a..b_end``.

    ``goal="suppress"`` drives class ``cls`` out of the windows' predictions,
    ``goal="target"`` drives them into ``cls``. PGD ascends the summed
    per-window log-probability objective, stops early once every window meets
    the goal and otherwise keeps the iterate meeting it for the most windows.
    """
    cfg = cfg or PgdConfig()
    values = _trace_values(trace)
    L = values.shape[0]
    if W is None:
        raise ValidationError("window length W is required")
    if not (0 <= a <= b_end <= L - W):
        raise ValidationError(f"range [{a}, {b_end}] outside [0, {L - W}]")
    if goal not in ("suppress", "target"):
        raise ValidationError(f"unknown goal {goal!r}")
    if not 0 <= cls < params.cfg.num_classes:
        raise ValidationError(f"class {cls} out of range")
    offset, stop = a, b_end + W
    segment = values[offset:stop]
    _, scale, raw = channel_stats(segment, ddof)
    scale = scale[0, 0]
    if np.any(raw <= SIGMA_MIN):
        raise SigmaZero(int(np.argmin(raw[0, 0])), float(raw.min()))
    clean_probs, clean_labels = classify_windows(params, values, W, np.arange(a, b_end + 1), ddof)

    obj = _SequenceObjective(params, segment, scale, W, budget, goal, cls, ddof)
    obj.best_count, obj.best_u, obj.trace_counts = -1, np.zeros((segment.shape[0], 3)), []
    res = pgd_batch(obj, 1, (segment.shape[0], 3), cfg, [sample_rng(cfg.seed)], early_stop=True)
    u = res.u[0] if res.success[0] else obj.best_u
    delta = scale[None] * assemble_delta_array(u, budget)
    seq = _evaluate_sequence(params, values, W, a, b_end, offset, delta, scale, budget, ddof,
                             clean_labels)
    perturbed = values.copy()
    perturbed[offset:stop] += delta
    n_goal = int(obj.goal_met(seq.labels).sum())
    return SequenceAttackResult(perturbed, seq, int(seq.flipped.sum()), n_goal, res.loss_traces[0])


# ---------------------------------------------------------------------------
# extendability

@dataclass
class Extension:
    extendable: bool
    direction: str
    index: int  # trace index of the newly exposed sample
    sample_delta: np.ndarray  # (2,) perturbation of that sample, zeros if none found
    vars: np.ndarray  # (3,) structured variables (s, r0, r1)
    label: int = None
    method: str = ""


def _grid_points(resolution):
    g = np.linspace(-1.0, 1.0, resolution)
    s, r0, r1 = np.meshgrid(g, g, g, indexing="ij")
    return np.column_stack([s.ravel(), r0.ravel(), r1.ravel()])


class _ExtensionProblem:
    """Window ``j`` of the perturbed trace with one free sample at position ``pos``."""

    def __init__(self, params, values, W, j, pos, fixed_delta, scale, b, ddof):
        self.params, self.W, self.j, self.pos = params, W, j, pos
        self.base = values[j:j + W] + fixed_delta  # fixed_delta has zeros at pos
        self.clean = values[j:j + W]
        self.scale, self.b, self.ddof = scale, b, ddof
        self.clean_label = int(classify_batch(params, self.clean[None], ddof)[1][0])
        self.com = np.asarray(b.eps_com)
        self.ind = np.asarray(b.eps_ind)
        self._graph = None

    def sample_delta(self, v):
        """``(n, 3)`` variables -> ``(n, 2)`` signal perturbations of the free sample."""
        v = np.atleast_2d(v)
        return self.scale * assemble_delta_array(v, self.b)

    def windows(self, d):
        xs = np.repeat(self.base[None], d.shape[0], axis=0)
        xs[:, self.pos] += d
        return xs

    def labels(self, d, chunk=256):
        xs = self.windows(d)
        out = np.empty(xs.shape[0], dtype=int)
        probs = np.empty((xs.shape[0], self.params.cfg.num_classes))
        for lo in range(0, xs.shape[0], chunk):
            _, _, raw = channel_stats(xs[lo:lo + chunk], self.ddof)
            ok = np.all(raw[:, 0, :] > SIGMA_MIN, axis=1)
            p = np.full((ok.size, probs.shape[1]), np.nan)
            lab = np.full(ok.size, self.clean_label)
            if ok.any():
                p_ok, lab_ok = classify_batch(self.params, xs[lo:lo + chunk][ok], self.ddof)
                p[ok], lab[ok] = p_ok, lab_ok
            probs[lo:lo + chunk], out[lo:lo + chunk] = p, lab
        return probs, out

    def _build(self):
        g = ad.Graph()
        u = g.input("u", (1, 1, 3))
        mask = np.zeros((1, self.W, 1))
        mask[0, self.pos] = 1.0
        x = g.const(self.base[None]) + (g.const(self.scale[None, None]) * delta_node(u, self.b)) * mask
        z = ad.pad_left(normalize_node(x, self.ddof), PAD_LENGTH)
        logits = build_logits(z, param_nodes(g, self.params), self.params.cfg).logits
        onehot = np.eye(self.params.cfg.num_classes)[[self.clean_label]]
        g.set_output(ad.sum_(ad.softmax_xent(logits, onehot)))
        self._graph, self._logits = g, logits

    def evaluate(self, u, rows):
        if self._graph is None:
            self._build()
        bind = {"u": u[0][None, None]}
        vals = ad.forward_eval(self._graph, bind, check_finite=False)
        grad = ad.backward_grad(self._graph, bind, {"u"}, values=vals, check_finite=False)["u"]
        lab = probs_and_labels(vals[self._logits.id])[1]
        loss = float(vals[self._graph.output.id].reshape(()))
        return np.array([loss]), grad.reshape(1, 3), lab != self.clean_label

    def valid(self, u, rows):
        x = self.windows(self.sample_delta(u[0]))
        _, _, raw = channel_stats(x, self.ddof)
        return np.array([bool(np.all(raw > SIGMA_MIN))])


def _unique_vars(vars_, problem):
    d = problem.sample_delta(vars_)
    # equal (d0, d1) pairs give equal windows; keep the first variable triple of each
    key = np.round(d / problem.scale, 12)
    _, first = np.unique(key, axis=0, return_index=True)
    first.sort()
    return vars_[first], d[first]


def _search_extension(problem, grid_resolution, cfg, use_pgd, chunk=512):
    zero = np.zeros((1, 3))
    _, lab0 = problem.labels(problem.sample_delta(zero))
    if lab0[0] != problem.clean_label:
        return zero[0], int(lab0[0]), "zero"
    vars_, deltas = _unique_vars(_grid_points(grid_resolution), problem)
    best_v, best_p = zero[0], np.inf
    for lo in range(0, vars_.shape[0], chunk):
        probs, lab = problem.labels(deltas[lo:lo + chunk])
        hit = np.flatnonzero(lab != problem.clean_label)
        if hit.size:
            k = hit[0]
            return vars_[lo + k], int(lab[k]), "grid"
        p_clean = probs[:, problem.clean_label]
        k = int(np.nanargmin(p_clean)) if np.any(np.isfinite(p_clean)) else None
        if k is not None and p_clean[k] < best_p:
            best_p, best_v = p_clean[k], vars_[lo + k]
    if not use_pgd:
        return None, None, "grid"
    refine = PgdConfig(steps=cfg.steps, step_size=cfg.step_size, random_start=False, restarts=1,
                       seed=cfg.seed)
    u0 = best_v.copy()
    res = _pgd_from(problem, u0, refine)
    if res is not None:
        _, lab = problem.labels(problem.sample_delta(res))
        if lab[0] != problem.clean_label:
            return res, int(lab[0]), "pgd"
    return None, None, "grid+pgd"


def _pgd_from(problem, u0, cfg):
    """Sign-gradient ascent starting at ``u0``; first flipping iterate or ``None``."""
    u = u0[None].copy()
    rows = np.array([0])
    for step in range(cfg.steps + 1):
        loss, grad, hit = problem.evaluate(u, rows)
        if not np.all(np.isfinite(grad)) or not np.isfinite(loss[0]):
            return None
        if hit[0]:
            return u[0]
        if step == cfg.steps:
            return None
        prop = np.clip(u + cfg.step_size * np.sign(grad), -1.0, 1.0)
        if problem.valid(prop, rows)[0]:
            u = prop
    return None


def is_extendable_under_attack(params, trace, seq, budget, direction="forward", cfg=None,
                               grid_resolution=21, use_pgd=True, ddof=0):
    """Can the adversarial sequence ``seq`` grow by one window in ``direction``?

    Only the newly exposed sample is free; its structured perturbation
    ``scale * (eps_com * s + eps_ind * r)`` is searched over a dense grid of
    ``(s, r0, r1)`` (after trying zero), then refined by PGD from the grid point
    with the lowest clean-class probability. A returned extension has been
    re-verified with an independent classifier call.
    """
    cfg = cfg or PgdConfig()
    values = _trace_values(trace)
    L, W = values.shape[0], seq.W
    if direction == "forward":
        j, t, pos = seq.end + 1, seq.end + W, W - 1
        if t >= L:
            return Extension(False, direction, t, np.zeros(2), np.zeros(3), method="boundary")
    elif direction == "backward":
        j, t, pos = seq.start - 1, seq.start - 1, 0
        if t < 0:
            return Extension(False, direction, t, np.zeros(2), np.zeros(3), method="boundary")
    else:
        raise ValidationError(f"unknown direction {direction!r}")
    fixed = np.zeros((W, 2))
    for k in range(W):
        idx = j + k - seq.offset
        if k != pos and 0 <= idx < seq.delta.shape[0]:
            fixed[k] = seq.delta[idx]
    problem = _ExtensionProblem(params, values, W, j, pos, fixed, seq.scale, budget, ddof)
    v, label, method = _search_extension(problem, grid_resolution, cfg, use_pgd)
    if v is None:
        return Extension(False, direction, t, np.zeros(2), np.zeros(3), method=method)
    d = problem.sample_delta(v)[0]
    # independent re-verification of the extended window
    window = problem.windows(d[None])[0]
    verified = int(classify_batch(params, window[None], ddof)[1][0]) != problem.clean_label
    full = fixed.copy()
    full[pos] = d
    verified = verified and admissibility_check(full, None, budget, scale=seq.scale).feasible
    if not verified:
        return Extension(False, direction, t, np.zeros(2), np.zeros(3), method=method + ":unverified")
    return Extension(True, direction, t, d, v, label, method)


def extend(seq, ext):
    """``(start, end, offset, delta)`` of ``seq`` grown by the extension ``ext``."""
    d = ext.sample_delta[None]
    if ext.direction == "forward":
        return seq.start, seq.end + 1, seq.offset, np.concatenate([seq.delta, d])
    return seq.start - 1, seq.end, seq.offset - 1, np.concatenate([d, seq.delta])


def seed_sequence(params, trace, j, delta, budget, W, ddof=0, scale=None):
    """Length-one :class:`AdvSequence` from a single adversarial window ``j``.

    The budget unit ``scale`` defaults to the window's own clean sigma.
    """
    values = _trace_values(trace)
    if scale is None:
        scale = channel_stats(values[j:j + W], ddof)[1][0, 0]
    return _evaluate_sequence(params, values, W, j, j, j, np.asarray(delta, dtype=np.float64),
                              scale, budget, ddof)


def maximal_adv_sequence_under_attack(params, trace, seed, budget, cfg=None, grid_resolution=21,
                                      max_length=None, ddof=0):
    """Grow ``seed`` forward, then backward, until the extension attack fails.

    The result is maximal only with respect to this attack (grid plus PGD); it
    is not a certificate that no longer consistent sequence exists.
    """
    values = _trace_values(trace)
    seq = seed
    if not bool(seq.adversarial.all()):
        raise ValidationError("seed window is not adversarial")
    for direction in ("forward", "backward"):
        while max_length is None or len(seq) < max_length:
            ext = is_extendable_under_attack(params, values, seq, budget, direction, cfg,
                                             grid_resolution, True, ddof)
            if not ext.extendable:
                break
            start, end, offset, delta = extend(seq, ext)
            seq = _evaluate_sequence(params, values, seq.W, start, end, offset, delta,
                                     seq.scale, budget, ddof)
    return seq
