"""Synthetic two-channel beam-loss scans with labeled windows.

Channel 0 (crystal BLM) dips and channel 1 (secondary BLM) peaks during a
channeling event; partial-well events are the same Gaussian profiles scaled
down. On top sit a linear drift, a smooth common-mode fluctuation shared by
both channels and independent white noise per channel.
"""

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import FormatError, InvalidGenParams, InvalidSplit
from .model import CLASS_NAMES
from .pipeline import SIGMA_MIN, Window, channel_stats

NO_CHANNELING, PARTIAL_WELL, CHANNELING = 0, 1, 2
LABEL_COVERAGE = 0.6
TRACE_COLUMNS = ("time_index", "crystal_blm", "secondary_blm")
DATASET_COLUMNS = ("window_id", "label", "scan", "origin", "time_index", "crystal_blm",
                   "secondary_blm")
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class GenParams:
    baseline: tuple = (1.0, 0.3)
    drift: tuple = (0.05, 0.02)  # total linear change over the scan
    noise_sigma: tuple = (0.03, 0.03)
    common_amp: float = 0.06
    common_corr_len: float = 12.0
    common_scale: tuple = (1.0, 0.6)
    dip_depth: float = 0.6
    peak_height: float = 1.0
    event_width: float = 6.0  # Gaussian sigma in samples
    support_halfwidth: float = 3.0  # event support is center +/- this many widths
    partial_factor: float = 0.4
    events_per_scan: int = 4
    scan_length: int = 1000

    def __post_init__(self):
        for name in ("baseline", "drift", "noise_sigma", "common_scale"):
            val = tuple(float(v) for v in getattr(self, name))
            if len(val) != 2:
                raise InvalidGenParams(f"{name} needs two channels")
            object.__setattr__(self, name, val)
        if min(self.noise_sigma) < 0 or self.common_amp < 0 or self.common_corr_len <= 0:
            raise InvalidGenParams("noise parameters must be non-negative")
        if self.event_width <= 0 or self.support_halfwidth <= 0:
            raise InvalidGenParams("event width must be positive")
        if not 0 < self.partial_factor < 1:
            raise InvalidGenParams("partial_factor must lie in (0, 1)")
        if self.events_per_scan < 0 or self.scan_length < 2:
            raise InvalidGenParams("bad event count or scan length")
        smallest = self.partial_factor * min(self.dip_depth, self.peak_height)
        if self.events_per_scan and smallest <= 5 * max(self.noise_sigma):
            raise InvalidGenParams(
                f"partial-well amplitude {smallest:g} must exceed 5x noise sigma")
        if self.dip_depth >= self.baseline[0]:
            raise InvalidGenParams("dip deeper than the crystal baseline")

    @property
    def support(self):
        return 2 * self.support_halfwidth * self.event_width

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Event:
    center: float
    kind: int  # PARTIAL_WELL or CHANNELING
    width: float
    halfwidth: float

    @property
    def support(self):
        return self.center - self.halfwidth, self.center + self.halfwidth

    def coverage(self, lo, hi):
        """Fraction of the event support inside ``[lo, hi)``."""
        a, b = self.support
        return max(0.0, min(b, hi) - max(a, lo)) / (b - a)


@dataclass
class ScanTrace:
    values: np.ndarray
    seed: int = None
    params: GenParams = None
    events: list = field(default_factory=list)

    @property
    def L(self):
        return self.values.shape[0]


@dataclass
class LabeledWindow:
    window: Window
    label: int
    scan_seed: int
    origin: int


def event_profile(t, center, width):
    return np.exp(-0.5 * ((t - center) / width) ** 2)


def generate_scan(params, seed, L=None, events=None):
    """One synthetic scan; ``events`` (list of ``(center, kind)``) overrides random placement."""
    if not isinstance(params, GenParams):
        raise InvalidGenParams("params must be GenParams")
    L = params.scan_length if L is None else int(L)
    if L < 2:
        raise InvalidGenParams("scan length must be at least 2")
    rng = np.random.default_rng(seed)
    t = np.arange(L, dtype=np.float64)
    base = np.asarray(params.baseline)[None, :] + np.outer(t / max(L - 1, 1), params.drift)
    values = base.copy()

    if events is None:
        events = []
        n = params.events_per_scan
        if n:
            slot = L / n
            kinds = np.array([CHANNELING, PARTIAL_WELL] * ((n + 1) // 2))[:n]
            rng.shuffle(kinds)
            jitter = 0.15 * slot
            for k in range(n):
                c = (k + 0.5) * slot + rng.uniform(-jitter, jitter)
                events.append(Event(float(c), int(kinds[k]), params.event_width,
                                    params.support_halfwidth * params.event_width))
    else:
        events = [Event(float(c), int(kind), params.event_width,
                        params.support_halfwidth * params.event_width) for c, kind in events]
    for ev in events:
        amp = 1.0 if ev.kind == CHANNELING else params.partial_factor
        prof = event_profile(t, ev.center, ev.width)
        values[:, 0] -= amp * params.dip_depth * prof
        values[:, 1] += amp * params.peak_height * prof

    if params.common_amp > 0:
        w = gaussian_filter1d(rng.normal(size=L), params.common_corr_len, mode="reflect")
        sd = w.std()
        if sd > 0:
            w = w / sd * params.common_amp
        values += np.outer(w, params.common_scale)
    values += rng.normal(size=(L, 2)) * np.asarray(params.noise_sigma)
    # loss signals are non-negative
    np.maximum(values, 0.0, out=values)
    return ScanTrace(values, seed, params, events)


def window_label(events, lo, hi):
    """Label of the window ``[lo, hi)``: channeling, then partial well, by >= 60% coverage."""
    cov = {CHANNELING: 0.0, PARTIAL_WELL: 0.0}
    for ev in events:
        cov[ev.kind] = max(cov[ev.kind], ev.coverage(lo, hi))
    if cov[CHANNELING] >= LABEL_COVERAGE:
        return CHANNELING
    if cov[PARTIAL_WELL] >= LABEL_COVERAGE:
        return PARTIAL_WELL
    return NO_CHANNELING


def label_windows(trace, W, origins=None):
    """Labeled windows of a generated scan (all origins by default)."""
    L = trace.values.shape[0]
    if origins is None:
        origins = range(L - W + 1)
    return [LabeledWindow(Window(trace.values[i:i + W], origin=i),
                          window_label(trace.events, i, i + W), trace.seed, i)
            for i in origins]


# ---------------------------------------------------------------------------
# datasets

@dataclass
class WindowSet:
    windows: np.ndarray  # (n, W, 2)
    labels: np.ndarray
    scans: np.ndarray  # scan index within the dataset
    origins: np.ndarray

    def __len__(self):
        return int(self.labels.shape[0])

    def class_counts(self):
        return np.bincount(self.labels, minlength=len(CLASS_NAMES))

    def subset(self, idx):
        return WindowSet(self.windows[idx], self.labels[idx], self.scans[idx], self.origins[idx])


@dataclass
class Dataset:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    W: int
    seed: int
    n_scans: int
    split: tuple
    params: GenParams
    scan_split: dict  # split name -> list of scan indices
    windows_per_event: int = 8

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}

    def manifest(self):
        return {
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "W": self.W,
            "n_scans": self.n_scans,
            "split": list(self.split),
            "windows_per_event": self.windows_per_event,
            "gen_params": self.params.to_dict(),
            "scan_seeds": [scan_seed(self.seed, i) for i in range(self.n_scans)],
            "scan_split": {k: list(map(int, v)) for k, v in self.scan_split.items()},
            "membership": {
                name: [[int(s), int(o), int(lab)] for s, o, lab in zip(ws.scans, ws.origins, ws.labels)]
                for name, ws in self.splits().items()
            },
        }

    def manifest_hash(self):
        return manifest_hash(self.manifest())


def manifest_hash(manifest):
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()


def scan_seed(seed, i):
    return int(np.random.SeedSequence([int(seed), int(i)]).generate_state(1)[0])


def _event_windows(trace, W, per_event, rng):
    """Origins of windows holding a whole event, plus event-free origins."""
    L = trace.values.shape[0]
    picks = []
    for ev in trace.events:
        a, b = ev.support
        lo, hi = int(np.ceil(b)) - W, int(np.floor(a))
        lo, hi = max(lo, 0), min(hi, L - W)
        if hi < lo:
            continue
        cand = np.arange(lo, hi + 1)
        cand = [o for o in cand if window_label(trace.events, o, o + W) == ev.kind
                and all(e is ev or e.coverage(o, o + W) == 0 for e in trace.events)]
        if not cand:
            continue
        k = min(per_event, len(cand))
        idx = np.round(np.linspace(0, len(cand) - 1, k)).astype(int)
        picks.extend(int(cand[i]) for i in idx)
    free = [o for o in range(L - W + 1)
            if all(e.coverage(o, o + W) == 0 for e in trace.events)]
    n_free = len(picks) // 2 if trace.events else per_event
    if free and n_free:
        sel = rng.choice(len(free), size=min(n_free, len(free)), replace=False)
        picks.extend(int(free[i]) for i in np.sort(sel))
    return picks


def _classifiable(x):
    return bool(np.all(channel_stats(x)[2] > SIGMA_MIN))


def make_dataset(n_scans=40, seed=0, W=128, split=(0.7, 0.15, 0.15), params=None,
                 windows_per_event=8):
    """Windows from ``n_scans`` generated scans, split by scan into train/val/test.

    Each event contributes ``windows_per_event`` windows that contain it
    entirely; event-free windows are added at half the event-window count.
    Windows straddling an event boundary are not sampled, which keeps the
    class of every sampled window unambiguous.
    """
    params = params or GenParams()
    split = tuple(float(f) for f in split)
    if len(split) != 3 or min(split) < 0 or abs(sum(split) - 1.0) > 1e-9:
        raise InvalidSplit(f"split fractions {split} must be three non-negatives summing to 1")
    if n_scans < 1:
        raise InvalidSplit("need at least one scan")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2**31 - 1]))
    order = rng.permutation(n_scans)
    counts = np.floor(np.asarray(split) * n_scans).astype(int)
    # hand leftovers to the largest fractional remainders, earliest split first on ties
    rem = np.asarray(split) * n_scans - counts
    for k in np.argsort(-rem, kind="stable")[: n_scans - counts.sum()]:
        counts[k] += 1
    bounds = np.concatenate([[0], np.cumsum(counts)])
    scan_split = {name: sorted(int(s) for s in order[bounds[k]:bounds[k + 1]])
                  for k, name in enumerate(("train", "val", "test"))}

    parts = {name: ([], [], [], []) for name in scan_split}
    owner = {s: name for name, ss in scan_split.items() for s in ss}
    for i in range(n_scans):
        trace = generate_scan(params, scan_seed(seed, i))
        wrng = np.random.default_rng(scan_seed(seed, i) ^ 0x5EED)
        for o in _event_windows(trace, W, windows_per_event, wrng):
            x = trace.values[o:o + W]
            if not _classifiable(x):
                continue
            p = parts[owner[i]]
            p[0].append(x)
            p[1].append(window_label(trace.events, o, o + W))
            p[2].append(i)
            p[3].append(o)

    def _ws(p):
        if not p[0]:
            return WindowSet(np.zeros((0, W, 2)), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int))
        return WindowSet(np.stack(p[0]), np.array(p[1]), np.array(p[2]), np.array(p[3]))

    return Dataset(_ws(parts["train"]), _ws(parts["val"]), _ws(parts["test"]), W, int(seed),
                   int(n_scans), split, params, scan_split, windows_per_event)


# ---------------------------------------------------------------------------
# file formats

def write_trace(trace, path):
    values = trace.values if hasattr(trace, "values") else np.asarray(trace)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for i, (a, b) in enumerate(values):
            fh.write(f"{i},{a:.17g},{b:.17g}\n")


def _float(text, row, path):
    try:
        v = float(text)
    except ValueError:
        raise FormatError(f"{path}: row {row}: not a number: {text!r}") from None
    if not np.isfinite(v):
        raise FormatError(f"{path}: row {row}: non-finite value")
    return v


def read_trace(path):
    """Read a trace CSV (header ``time_index,crystal_blm,secondary_blm``)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(TRACE_COLUMNS):
            raise FormatError(f"{path}: row 1: expected header {','.join(TRACE_COLUMNS)}")
        rows = []
        for n, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"{path}: row {n}: expected 3 columns, got {len(row)}")
            rows.append((_float(row[1], n, path), _float(row[2], n, path)))
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return ScanTrace(np.array(rows, dtype=np.float64))


def write_dataset(dataset, out_dir):
    """``train.csv``, ``val.csv``, ``test.csv`` (long format) plus ``manifest.json``."""
    os.makedirs(out_dir, exist_ok=True)
    for name, ws in dataset.splits().items():
        with open(os.path.join(out_dir, f"{name}.csv"), "w", newline="") as fh:
            fh.write(",".join(DATASET_COLUMNS) + "\n")
            for k in range(len(ws)):
                lab, s, o = int(ws.labels[k]), int(ws.scans[k]), int(ws.origins[k])
                for t, (a, b) in enumerate(ws.windows[k]):
                    fh.write(f"{k},{lab},{s},{o},{t},{a:.17g},{b:.17g}\n")
    manifest = dataset.manifest()
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest_hash(manifest)


def _read_split(path, W):
    windows, labels, scans, origins = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(DATASET_COLUMNS):
            raise FormatError(f"{path}: row 1: expected header {','.join(DATASET_COLUMNS)}")
        current, rows = None, []
        for n, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(DATASET_COLUMNS):
                raise FormatError(f"{path}: row {n}: expected {len(DATASET_COLUMNS)} columns, got {len(row)}")
            try:
                wid, lab, s, o, t = (int(v) for v in row[:5])
            except ValueError:
                raise FormatError(f"{path}: row {n}: bad integer field") from None
            if wid != current:
                if rows:
                    windows.append(rows)
                current, rows = wid, []
                labels.append(lab)
                scans.append(s)
                origins.append(o)
            if t != len(rows):
                raise FormatError(f"{path}: row {n}: time_index {t} out of order")
            rows.append((_float(row[5], n, path), _float(row[6], n, path)))
        if rows:
            windows.append(rows)
    if any(len(w) != W for w in windows):
        raise FormatError(f"{path}: windows must all have length {W}")
    arr = np.array(windows, dtype=np.float64).reshape(len(windows), W, 2)
    return WindowSet(arr, np.array(labels, dtype=int), np.array(scans, dtype=int),
                     np.array(origins, dtype=int))


def read_dataset(out_dir):
    """Inverse of :func:`write_dataset`; checks membership against the manifest."""
    mpath = os.path.join(out_dir, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: {exc}") from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{mpath}: unsupported manifest version")
    W = int(manifest["W"])
    sets = {}
    for name in ("train", "val", "test"):
        ws = _read_split(os.path.join(out_dir, f"{name}.csv"), W)
        expected = manifest["membership"][name]
        got = [[int(s), int(o), int(lab)] for s, o, lab in zip(ws.scans, ws.origins, ws.labels)]
        if got != expected:
            raise FormatError(f"{out_dir}/{name}.csv does not match the manifest membership")
        sets[name] = ws
    return Dataset(sets["train"], sets["val"], sets["test"], W, manifest["seed"],
                   manifest["n_scans"], tuple(manifest["split"]),
                   GenParams.from_dict(manifest["gen_params"]),
                   {k: list(v) for k, v in manifest["scan_split"].items()},
                   manifest.get("windows_per_event", 8))


def demo_trace(params=None, seed=7, L=600, center=300.0):
    """Scan with one channeling event at ``center`` and no other events."""
    params = params or GenParams()
    return generate_scan(params, seed, L=L, events=[(center, CHANNELING)])
