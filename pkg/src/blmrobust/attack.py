"""PGD attacks on the wrapped classifier and pipeline-checked robust accuracy.

Five optimization spaces are supported (see :class:`AttackConfigKind`). Every
candidate an attack reports in its own space is mapped back to a signal-space
perturbation and re-checked against the deployed pipeline: admissible under
the structured budget, and a different predicted label.

PGD runs batched over samples, but each sample draws its random starts from its
own generator (seeded with ``[seed, sample_index]``) and the network forward is
row-independent, so results do not depend on batch composition or ``jobs``.
"""

import csv
import enum
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import EmptyDataset, GradientFailure, NonReconstructible, SigmaZero, ValidationError
from .model import build_logits, param_nodes
from .pipeline import (
    PAD_LENGTH,
    SIGMA_MIN,
    Window,
    channel_stats,
    classify_batch,
    normalize_node,
    probs_and_labels,
)
from .threat import (
    StructuredBudget,
    admissibility_check,
    assemble_delta_array,
    delta_node,
    signal_wrapper_node,
)

CHUNK = 64


class AttackConfigKind(str, enum.Enum):
    BASELINE = "Baseline"
    NO_NORMALIZATION = "NoNormalization"
    NO_PADDING = "NoPadding"
    NAIVE_MASK_RENORM = "NaiveMaskRenorm"
    NAIVE_RAW = "NaiveRaw"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).replace("-", "").replace("_", "").lower()
        for kind in cls:
            if kind.value.lower() == key or kind.name.replace("_", "").lower() == key:
                return kind
        raise ValidationError(f"unknown attack configuration {name!r}")

    @property
    def is_naive(self):
        return self in (AttackConfigKind.NAIVE_MASK_RENORM, AttackConfigKind.NAIVE_RAW)


ALL_KINDS = tuple(AttackConfigKind)


@dataclass(frozen=True)
class PgdConfig:
    steps: int = 40
    step_size: float = None  # defaults to 2.5 * radius / steps
    radius: float = 1.0
    random_start: bool = True
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValidationError("steps must be positive")
        if self.radius != 1.0:
            raise ValidationError("wrapped attacks use the unit box: radius must be 1.0")
        if int(self.restarts) < 0:
            raise ValidationError("restarts must be non-negative")
        if self.step_size is None:
            object.__setattr__(self, "step_size", 2.5 * self.radius / self.steps)
        if not self.step_size > 0:
            raise ValidationError("step_size must be positive")

    @property
    def runs(self):
        return max(1, int(self.restarts))

    def to_dict(self):
        return {"steps": self.steps, "step_size": self.step_size, "radius": self.radius,
                "random_start": self.random_start, "restarts": self.restarts, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        keys = ("steps", "step_size", "radius", "random_start", "restarts", "seed")
        return cls(**{k: d[k] for k in keys if k in d})


def sample_rng(seed, index=None):
    """Independent generator for one sample of a seeded run."""
    entropy = [int(seed)] if index is None else [int(seed), int(index)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


# ---------------------------------------------------------------------------
# generic PGD

@dataclass
class PgdResult:
    u: np.ndarray  # (n, *shape); successful iterate, or the last one
    success: np.ndarray
    failed_gradient: np.ndarray
    loss_traces: list


def pgd_batch(objective, n, shape, cfg, rngs, early_stop=True):
    """Sign-gradient ascent in the unit box for ``n`` independent problems.

    ``objective.evaluate(u, rows)`` returns per-row ``(loss, grad, success)``
    for the rows ``rows`` of the problem set; non-finite losses or gradients
    abort that row's current restart. ``objective.valid(u, rows)`` (optional)
    flags proposals to reject, in which case the row keeps its previous iterate.
    """
    alpha = cfg.step_size
    out_u = np.zeros((n,) + tuple(shape))
    success = np.zeros(n, dtype=bool)
    failed = np.zeros(n, dtype=bool)
    traces = [[] for _ in range(n)]
    valid = getattr(objective, "valid", None)
    for run in range(cfg.runs):
        rows = np.flatnonzero(~success) if early_stop else np.arange(n)
        if rows.size == 0:
            break
        if cfg.random_start:
            u = np.stack([rngs[i].uniform(-1.0, 1.0, size=shape) for i in rows])
        else:
            u = np.zeros((rows.size,) + tuple(shape))
        for step in range(cfg.steps + 1):
            if rows.size == 0:
                break
            loss, grad, hit = objective.evaluate(u, rows)
            finite = np.isfinite(loss) & np.all(np.isfinite(grad.reshape(rows.size, -1)), axis=1)
            for j, i in enumerate(rows):
                traces[i].append(float(loss[j]))
            failed[rows[~finite]] = True
            keep = finite.copy()
            if early_stop:
                hit = hit & finite
                out_u[rows[hit]] = u[hit]
                success[rows[hit]] = True
                keep &= ~hit
            if step == cfg.steps:
                if not early_stop:
                    out_u[rows] = u
                break
            rows, u, grad = rows[keep], u[keep], grad[keep]
            if rows.size == 0:
                break
            proposal = np.clip(u + alpha * np.sign(grad), -1.0, 1.0)
            if valid is not None:
                ok = valid(proposal, rows)
                proposal[~ok] = u[~ok]
            u = proposal
        if not early_stop:
            break
    return PgdResult(out_u, success, failed & ~success, traces)


class _FunctionObjective:
    def __init__(self, loss_and_grad, success_fn):
        self.loss_and_grad = loss_and_grad
        self.success_fn = success_fn

    def evaluate(self, u, rows):
        loss, grad = self.loss_and_grad(u[0])
        hit = bool(self.success_fn(u[0])) if self.success_fn is not None else False
        return np.array([loss], dtype=float), np.asarray(grad, dtype=float)[None], np.array([hit])


def pgd(loss_and_grad, shape, cfg, success=None, rng=None):
    """Single-problem PGD; returns the first successful iterate or ``None``.

    ``loss_and_grad(u) -> (loss, grad)``; ``success(u) -> bool``. Without a
    success predicate the final iterate is returned.
    """
    rng = sample_rng(cfg.seed) if rng is None else rng
    res = pgd_batch(_FunctionObjective(loss_and_grad, success), 1, tuple(shape), cfg, [rng],
                    early_stop=success is not None)
    if res.failed_gradient[0]:
        raise GradientFailure("non-finite gradient in every restart")
    if success is None:
        return res.u[0]
    return res.u[0] if res.success[0] else None


# ---------------------------------------------------------------------------
# the five optimization spaces

def u_shape(kind, W):
    """Shape of one sample's attack variables in configuration ``kind``."""
    kind = AttackConfigKind.parse(kind)
    if kind in (AttackConfigKind.BASELINE, AttackConfigKind.NO_NORMALIZATION):
        return (W, 3)
    if kind == AttackConfigKind.NO_PADDING:
        return (PAD_LENGTH, 3)
    return (PAD_LENGTH, 2)


class WrappedObjective:
    """Cross-entropy of the network in one configuration's optimization space.

    ``loss_sign=+1`` ascends the loss of ``labels`` (untargeted attack on the
    clean prediction, or adversarial training on true labels).
    """

    def __init__(self, kind, params, x0, labels, b, ddof=0, target_labels=None):
        self.kind = AttackConfigKind.parse(kind)
        self.params = params
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.labels = np.asarray(labels)
        self.b = b
        self.ddof = ddof
        n, W, _ = self.x0.shape
        self.W = W
        self.mu0, self.sigma0, raw = channel_stats(self.x0, ddof)
        if np.any(raw <= SIGMA_MIN):
            row, _, c = np.argwhere(raw <= SIGMA_MIN)[0]
            raise SigmaZero(int(c), float(raw[row, 0, c]), window=int(row))
        self.onehot = np.eye(params.cfg.num_classes)[self.labels]
        self.z0 = None
        if self.kind.is_naive:
            g = ad.Graph()
            self.z0 = ad.pad_left(normalize_node(g.const(self.x0), ddof), PAD_LENGTH).value
        self.shape = u_shape(self.kind, W)
        self._build()

    def _build(self):
        kind, b, W = self.kind, self.b, self.W
        g = ad.Graph()
        u = g.input("u", (None,) + self.shape)
        x0 = g.input("x0", (None, W, 2))
        sigma0 = g.input("sigma0", (None, 1, 2))
        mu0 = g.input("mu0", (None, 1, 2))
        z0 = g.input("z0", (None, PAD_LENGTH, 2))
        onehot = g.input("onehot", (None, self.onehot.shape[1]))
        if kind == AttackConfigKind.BASELINE:
            z, _ = signal_wrapper_node(x0, sigma0, u, b, self.ddof)
        elif kind == AttackConfigKind.NO_NORMALIZATION:
            x_hat = x0 + sigma0 * delta_node(u, b)
            z = ad.pad_left((x_hat - mu0) / sigma0, PAD_LENGTH)
        elif kind == AttackConfigKind.NO_PADDING:
            inner = ad.slice_axis(u, 1, PAD_LENGTH - W, PAD_LENGTH)
            z, _ = signal_wrapper_node(x0, sigma0, inner, b, self.ddof)
            pad_rows = np.zeros((1, PAD_LENGTH, 1))
            pad_rows[:, :PAD_LENGTH - W] = 1.0
            z = z + delta_node(u, b) * pad_rows
        else:
            z_hat = z0 + u * b.eps_glob
            if kind == AttackConfigKind.NAIVE_MASK_RENORM:
                z = ad.pad_left(
                    normalize_node(ad.slice_axis(z_hat, 1, PAD_LENGTH - W, PAD_LENGTH), self.ddof),
                    PAD_LENGTH)
            else:
                z = z_hat
        logits = build_logits(z, param_nodes(g, self.params), self.params.cfg).logits
        xent = ad.softmax_xent(logits, onehot)
        g.set_output(ad.sum_(xent))
        self.graph, self.logits_node, self.xent_node = g, logits, xent

    def _bindings(self, u, rows):
        bind = {"u": u, "x0": self.x0[rows], "sigma0": self.sigma0[rows],
                "mu0": self.mu0[rows], "onehot": self.onehot[rows]}
        bind["z0"] = self.z0[rows] if self.z0 is not None else np.zeros((len(rows), PAD_LENGTH, 2))
        return bind

    def logits(self, u, rows):
        vals = ad.forward_eval(self.graph, self._bindings(u, rows), check_finite=False)
        return vals[self.logits_node.id]

    def evaluate(self, u, rows):
        bind = self._bindings(u, rows)
        vals = ad.forward_eval(self.graph, bind, check_finite=False)
        grad = ad.backward_grad(self.graph, bind, {"u"}, values=vals, check_finite=False)["u"]
        _, pred = probs_and_labels(vals[self.logits_node.id])
        return vals[self.xent_node.id], grad, pred != self.labels[rows]

    def x_hat(self, u, rows):
        """Signal the normalization inside the tool graph sees, or ``None``."""
        if self.kind in (AttackConfigKind.BASELINE, AttackConfigKind.NO_NORMALIZATION):
            return self.x0[rows] + self.sigma0[rows] * assemble_delta_array(u, self.b)
        if self.kind == AttackConfigKind.NO_PADDING:
            inner = u[:, PAD_LENGTH - self.W:]
            return self.x0[rows] + self.sigma0[rows] * assemble_delta_array(inner, self.b)
        if self.kind == AttackConfigKind.NAIVE_MASK_RENORM:
            return self.z0[rows, PAD_LENGTH - self.W:] + u[:, PAD_LENGTH - self.W:] * self.b.eps_glob
        return None

    def valid(self, u, rows):
        if self.kind == AttackConfigKind.NO_NORMALIZATION:
            return np.ones(len(rows), dtype=bool)
        xh = self.x_hat(u, rows)
        if xh is None:
            return np.ones(len(rows), dtype=bool)
        _, _, raw = channel_stats(xh, self.ddof)
        return np.all(raw[:, 0, :] > SIGMA_MIN, axis=1)


# ---------------------------------------------------------------------------
# candidates, reconstruction and pipeline checking

@dataclass
class Candidate:
    kind: AttackConfigKind
    u: np.ndarray
    eps_glob: float = 0.0
    z0: np.ndarray = None  # clean padded input (naive spaces only)

    def normalized_input(self):
        """Perturbed padded input for the naive spaces."""
        return self.z0 + self.u * self.eps_glob


def reconstruct_to_signal(candidate, x0, b, ddof=0):
    """Map a candidate from its optimization space to a signal-space ``(W, 2)`` delta.

    Wrapped spaces return ``sigma(x0) * delta(u)`` on the unpadded steps (any
    padded-region perturbation is dropped). Naive spaces undo the normalization
    with x0's own statistics on unpadded steps, so
    ``delta = (z_hat - z0) * sigma(x0)`` there, and drop the padded region.
    """
    values = x0.values if isinstance(x0, Window) else np.asarray(x0, dtype=np.float64)
    W = values.shape[0]
    if W < 1 or W > PAD_LENGTH:
        raise NonReconstructible(f"window of length {W} has no unpadded support")
    kind = AttackConfigKind.parse(candidate.kind)
    sigma = channel_stats(values, ddof)[1][0]
    if kind in (AttackConfigKind.BASELINE, AttackConfigKind.NO_NORMALIZATION):
        return sigma * assemble_delta_array(candidate.u, b)
    if kind == AttackConfigKind.NO_PADDING:
        return sigma * assemble_delta_array(candidate.u[PAD_LENGTH - W:], b)
    z0 = candidate.z0
    if z0 is None:
        g = ad.Graph()
        z0 = ad.pad_left(normalize_node(g.const(values[None]), ddof), PAD_LENGTH).value[0]
    z_hat = z0 + candidate.u * candidate.eps_glob
    return (z_hat[PAD_LENGTH - W:] - z0[PAD_LENGTH - W:]) * sigma


def pipeline_check(delta, x0, params, b, ddof=0, original_label=None):
    """Admissible under ``b`` and flips the deployed classifier's label."""
    values = x0.values if isinstance(x0, Window) else np.asarray(x0, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != values.shape or not np.all(np.isfinite(delta)):
        return False
    if not admissibility_check(delta, values, b, ddof=ddof).feasible:
        return False
    if original_label is None:
        original_label = int(classify_batch(params, values[None], ddof)[1][0])
    try:
        _, label = classify_batch(params, (values + delta)[None], ddof)
    except SigmaZero:
        return False
    return int(label[0]) != int(original_label)


@dataclass
class AttackOutcome:
    kind: AttackConfigKind
    original_label: int
    tool_success: bool
    pipeline_success: bool
    tool_label: int = None
    flipped_label: int = None  # deployed-pipeline label of the reconstruction
    candidate: Candidate = field(default=None, repr=False)
    reconstructed_delta: np.ndarray = field(default=None, repr=False)
    admissible: bool = None
    gradient_failure: bool = False
    loss_trace: list = field(default_factory=list, repr=False)


def _outcome(obj, res, j, x0, label, params, b, ddof):
    out = AttackOutcome(obj.kind, int(label), bool(res.success[j]), False,
                        gradient_failure=bool(res.failed_gradient[j]),
                        loss_trace=res.loss_traces[j])
    if not res.success[j]:
        return out
    u = res.u[j]
    out.tool_label = int(probs_and_labels(obj.logits(u[None], np.array([j])))[1][0])
    out.candidate = Candidate(obj.kind, u, b.eps_glob, obj.z0[j] if obj.z0 is not None else None)
    out.reconstructed_delta = reconstruct_to_signal(out.candidate, x0, b, ddof)
    out.admissible = admissibility_check(out.reconstructed_delta, x0, b, ddof=ddof).feasible
    if out.admissible:
        try:
            out.flipped_label = int(classify_batch(params, (x0 + out.reconstructed_delta)[None], ddof)[1][0])
        except SigmaZero:
            out.flipped_label = None
        out.pipeline_success = out.flipped_label is not None and out.flipped_label != out.original_label
    return out


def attack_windows(kind, params, xs, b, cfg, labels=None, indices=None, ddof=0, rngs=None):
    """Attack a stack of equal-length windows ``(n, W, 2)``; one outcome per window.

    Sample ``k`` draws its random starts from ``sample_rng(cfg.seed, indices[k])``
    (``indices`` defaults to ``0..n-1``) unless explicit ``rngs`` are given.
    ``labels`` are the labels to attack, by default the clean predictions.
    """
    kind = AttackConfigKind.parse(kind)
    xs = np.asarray(xs, dtype=np.float64)
    n = xs.shape[0]
    indices = np.arange(n) if indices is None else np.asarray(indices)
    if rngs is None:
        rngs = [sample_rng(cfg.seed, i) for i in indices]
    if labels is None:
        labels = classify_batch(params, xs, ddof)[1]
    labels = np.asarray(labels)
    outcomes = []
    for lo in range(0, n, CHUNK):
        hi = min(n, lo + CHUNK)
        obj = WrappedObjective(kind, params, xs[lo:hi], labels[lo:hi], b, ddof)
        res = pgd_batch(obj, hi - lo, obj.shape, cfg, rngs[lo:hi], early_stop=True)
        for j in range(hi - lo):
            outcomes.append(_outcome(obj, res, j, xs[lo + j], labels[lo + j], params, b, ddof))
    return outcomes


def run_config(kind, params, x0, b, cfg, ddof=0, index=None):
    """Attack a single window in configuration ``kind``.

    Random starts come from ``[cfg.seed]``, or ``[cfg.seed, index]`` when the
    window is sample ``index`` of a dataset run.
    """
    values = x0.values if isinstance(x0, Window) else np.asarray(x0, dtype=np.float64)
    rng = sample_rng(cfg.seed) if index is None else sample_rng(cfg.seed, index)
    return attack_windows(kind, params, values[None], b, cfg, ddof=ddof, rngs=[rng])[0]


# ---------------------------------------------------------------------------
# dataset-level evaluation

@dataclass
class ConfigResult:
    kind: AttackConfigKind
    n_samples: int
    clean_accuracy: float
    ra_tool: float
    ra_pipe: float
    n_clean_correct: int
    ra_tool_clean_correct: float
    ra_pipe_clean_correct: float
    outcomes: list = field(repr=False)

    def summary(self):
        return {
            "kind": self.kind.value,
            "n_samples": self.n_samples,
            "clean_accuracy": self.clean_accuracy,
            "ra_tool": self.ra_tool,
            "ra_pipe": self.ra_pipe,
            "n_clean_correct": self.n_clean_correct,
            "ra_tool_clean_correct": self.ra_tool_clean_correct,
            "ra_pipe_clean_correct": self.ra_pipe_clean_correct,
        }


@dataclass
class RobustnessReport:
    budget: StructuredBudget
    pgd: PgdConfig
    results: dict  # kind value -> ConfigResult
    model_fingerprint: str = ""
    manifest_hash: str = ""
    wall_time: float = 0.0

    def __getitem__(self, kind):
        return self.results[AttackConfigKind.parse(kind).value]

    def to_dict(self, include_timing=True):
        d = {
            "budget": self.budget.to_dict(),
            "pgd": self.pgd.to_dict(),
            "seed": self.pgd.seed,
            "model_fingerprint": self.model_fingerprint,
            "manifest_hash": self.manifest_hash,
            "configs": [r.summary() for r in self.results.values()],
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d

    def per_sample_rows(self):
        rows = []
        for r in self.results.values():
            for i, o in enumerate(r.outcomes):
                rows.append({
                    "kind": r.kind.value,
                    "sample": i,
                    "original_label": o.original_label,
                    "tool_success": int(o.tool_success),
                    "pipeline_success": int(o.pipeline_success),
                    "tool_label": "" if o.tool_label is None else o.tool_label,
                    "flipped_label": "" if o.flipped_label is None else o.flipped_label,
                    "admissible": "" if o.admissible is None else int(o.admissible),
                    "gradient_failure": int(o.gradient_failure),
                    "steps_run": len(o.loss_trace),
                })
        return rows

    def write(self, json_path, csv_path=None):
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        if csv_path is not None:
            rows = self.per_sample_rows()
            fields = ["kind", "sample", "original_label", "tool_success", "pipeline_success",
                      "tool_label", "flipped_label", "admissible", "gradient_failure", "steps_run"]
            with open(csv_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=fields)
                w.writeheader()
                w.writerows(rows)


def _attack_job(args):
    kind, params, xs, labels, indices, b, cfg, ddof = args
    outs = attack_windows(kind, params, xs, b, cfg, labels=labels, indices=indices, ddof=ddof)
    for o in outs:
        o.loss_trace = list(o.loss_trace)
    return outs


def _split(n, jobs):
    bounds = np.linspace(0, n, jobs + 1).astype(int)
    return [(bounds[k], bounds[k + 1]) for k in range(jobs) if bounds[k + 1] > bounds[k]]


def evaluate_dataset(kinds, params, windows, labels, b, cfg, jobs=1, ddof=0,
                     manifest_hash="", pool=None):
    """RA^tool and RA^pipe for every configuration in ``kinds``.

    ``windows`` is ``(n, W, 2)``; ``labels`` the dataset's true labels. RA
    counts attack failures over all samples, whatever the clean prediction;
    the ``*_clean_correct`` fields restrict to correctly classified samples.
    """
    xs = np.asarray(windows, dtype=np.float64)
    if xs.ndim != 3 or xs.shape[0] == 0:
        raise EmptyDataset("dataset has no windows")
    labels = np.asarray(labels)
    t0 = time.perf_counter()
    pred = classify_batch(params, xs, ddof)[1]
    correct = pred == labels
    n = xs.shape[0]
    jobs = max(1, int(jobs or 1))
    results = {}
    for kind in kinds:
        kind = AttackConfigKind.parse(kind)
        parts = _split(n, jobs)
        tasks = [(kind, params, xs[a:z], pred[a:z], np.arange(a, z), b, cfg, ddof) for a, z in parts]
        if jobs > 1 and len(tasks) > 1:
            if pool is None:
                with ProcessPoolExecutor(max_workers=jobs) as ex:
                    chunks = list(ex.map(_attack_job, tasks))
            else:
                chunks = list(pool.map(_attack_job, tasks))
        else:
            chunks = [_attack_job(t) for t in tasks]
        outcomes = [o for c in chunks for o in c]
        tool = np.array([o.tool_success for o in outcomes])
        pipe = np.array([o.pipeline_success for o in outcomes])
        nc = int(correct.sum())
        results[kind.value] = ConfigResult(
            kind=kind,
            n_samples=n,
            clean_accuracy=float(correct.mean()),
            ra_tool=float(1.0 - tool.mean()),
            ra_pipe=float(1.0 - pipe.mean()),
            n_clean_correct=nc,
            ra_tool_clean_correct=float((correct & ~tool).sum() / nc) if nc else float("nan"),
            ra_pipe_clean_correct=float((correct & ~pipe).sum() / nc) if nc else float("nan"),
            outcomes=outcomes,
        )
    return RobustnessReport(b, cfg, results, params.fingerprint(), manifest_hash,
                            time.perf_counter() - t0)


def default_jobs():
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def with_seed(cfg, seed):
    return replace(cfg, seed=seed)
