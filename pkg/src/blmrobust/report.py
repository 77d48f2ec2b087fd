"""Experiment summaries: per-configuration and per-budget robust-accuracy tables.

Configuration cells read ``RA_tool → RA_pipe``; budget tables use plain
decimals. Everything is printed with three decimals.
"""

import hashlib
import json
import os
import platform
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ManifestMismatch

SCHEMA_VERSION = 1
ARROW = "→"
_CELL = re.compile(r"^\s*(-?\d+\.\d{3}|nan)\s*" + ARROW + r"\s*(-?\d+\.\d{3}|nan)\s*$")


def budget_label(budget):
    b = budget if isinstance(budget, dict) else budget.to_dict()
    com, ind = b["eps_com"], b["eps_ind"]
    if com[0] == com[1] and ind[0] == ind[1]:
        return f"({com[0]:.2f}, {ind[0]:.2f})"
    return f"(({com[0]:.2f}, {com[1]:.2f}), ({ind[0]:.2f}, {ind[1]:.2f}))"


def _as_dict(obj):
    return obj if isinstance(obj, dict) else obj.to_dict()


@dataclass
class ExperimentSummary:
    model_fingerprints: dict  # role -> fingerprint
    manifest_hash: str
    config_rows: list  # role, budget, kind, clean_accuracy, ra_tool, ra_pipe
    budget_rows: list  # budget, ra_<role> ...
    training: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)  # optional paths checked on load
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        body = {
            "schema_version": self.schema_version,
            "model_fingerprints": self.model_fingerprints,
            "manifest_hash": self.manifest_hash,
            "config_rows": self.config_rows,
            "budget_rows": self.budget_rows,
            "training": self.training,
            "environment": self.environment,
            "artifacts": self.artifacts,
        }
        body["content_hash"] = content_hash(body)
        return body

    @classmethod
    def from_dict(cls, d):
        return cls(d["model_fingerprints"], d["manifest_hash"], d["config_rows"], d["budget_rows"],
                   d.get("training", {}), d.get("environment", {}), d.get("artifacts", {}),
                   d.get("schema_version", SCHEMA_VERSION))


def content_hash(body):
    clean = {k: v for k, v in body.items() if k != "content_hash"}
    return hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest()


def _roles(logs):
    roles = {}
    for log in logs:
        d = _as_dict(log)
        mode = d["config"].get("mode", "clean")
        roles[d["fingerprint"]] = "adv" if mode == "adv_finetune" else "clean"
    return roles


def summarize(reports, logs=(), environment=None, artifacts=None):
    """Aggregate robustness reports (and training logs) into one summary.

    Reports are attributed to the clean or fine-tuned model through the
    training logs' weight fingerprints; unmatched models get a short
    fingerprint-based role. Training deltas are adversarial minus clean.
    """
    reports = [_as_dict(r) for r in reports]
    hashes = {r.get("manifest_hash", "") for r in reports}
    if len(hashes) > 1:
        raise ManifestMismatch(f"reports reference different dataset manifests: {sorted(hashes)}")
    roles = _roles(logs)
    fingerprints = {}
    config_rows, by_budget = [], {}
    for r in reports:
        fp = r.get("model_fingerprint", "")
        role = roles.get(fp, "clean" if not roles and len(
            {x.get("model_fingerprint") for x in reports}) == 1 else f"model-{fp[:8]}")
        fingerprints[role] = fp
        label = budget_label(r["budget"])
        for c in r["configs"]:
            config_rows.append({"role": role, "budget": label, "kind": c["kind"],
                                "clean_accuracy": c["clean_accuracy"],
                                "ra_tool": c["ra_tool"], "ra_pipe": c["ra_pipe"]})
            if c["kind"] == "Baseline":
                by_budget.setdefault(label, {})[role] = (c["ra_pipe"], c["clean_accuracy"])
    roles_seen = sorted(fingerprints, key=lambda s: (s != "clean", s != "adv", s))
    budget_rows = []
    for label, cells in by_budget.items():
        row = {"budget": label}
        for role in roles_seen:
            row[f"ra_{role}"] = cells[role][0] if role in cells else None
        if "clean" in cells and "adv" in cells:
            row["delta"] = cells["adv"][0] - cells["clean"][0]
        budget_rows.append(row)

    training = {}
    clean_acc = {role: cells[role][1] for cells in by_budget.values() for role in cells}
    if "clean" in clean_acc and "adv" in clean_acc:
        training = {
            "clean_acc_before": clean_acc["clean"],
            "clean_acc_after": clean_acc["adv"],
            "clean_acc_delta": clean_acc["adv"] - clean_acc["clean"],
            "ra_delta": {row["budget"]: row["delta"] for row in budget_rows if "delta" in row},
        }
    for log in logs:
        d = _as_dict(log)
        role = roles.get(d["fingerprint"])
        training[f"val_acc_{role}"] = d.get("final_val_acc")
    env = environment if environment is not None else {
        "python": platform.python_version(), "numpy": np.__version__, "platform": platform.platform()}
    return ExperimentSummary(fingerprints, hashes.pop() if hashes else "", config_rows, budget_rows,
                             training, env, dict(artifacts or {}))


def _fmt(x):
    return "nan" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.3f}"


def render_markdown(summary):
    """Configuration table (``tool → pipe`` cells) and budget table."""
    s = summary if isinstance(summary, ExperimentSummary) else ExperimentSummary.from_dict(summary)
    budgets = list(dict.fromkeys(r["budget"] for r in s.config_rows))
    lines = ["## Robust accuracy by configuration", ""]
    header = ["Model", "Configuration", "Clean acc."] + [f"RA {b}" for b in budgets]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    keys = list(dict.fromkeys((r["role"], r["kind"]) for r in s.config_rows))
    for role, kind in keys:
        cells = {r["budget"]: r for r in s.config_rows if r["role"] == role and r["kind"] == kind}
        first = next(iter(cells.values()))
        row = [role, kind, _fmt(first["clean_accuracy"])]
        for b in budgets:
            r = cells.get(b)
            row.append("" if r is None else f"{_fmt(r['ra_tool'])} {ARROW} {_fmt(r['ra_pipe'])}")
        lines.append("| " + " | ".join(row) + " |")
    lines += ["", "## Pipeline-checked robust accuracy by budget", ""]
    cols = [k for k in (s.budget_rows[0] if s.budget_rows else {"budget": None}) if k != "budget"]
    lines.append("| " + " | ".join(["Budget"] + cols) + " |")
    lines.append("|" + "---|" * (len(cols) + 1))
    for row in s.budget_rows:
        vals = []
        for c in cols:
            v = row.get(c)
            vals.append(("+" if c == "delta" and v is not None and v >= 0 else "") + _fmt(v))
        lines.append("| " + " | ".join([row["budget"]] + vals) + " |")
    return "\n".join(lines) + "\n"


def parse_markdown(text):
    """Numbers back out of :func:`render_markdown` output.

    Returns ``{"configs": {(role, kind, budget): (tool, pipe)}, "clean": {(role, kind): acc},
    "budgets": {budget: {column: value}}}``.
    """
    configs, clean, budgets = {}, {}, {}
    section, header = None, None
    for line in text.splitlines():
        if line.startswith("## "):
            section = "config" if "configuration" in line else "budget"
            header = None
            continue
        if not line.startswith("|"):
            continue
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        if header is None:
            header = cells
            continue
        if set(line.replace("|", "").strip()) <= {"-"}:
            continue
        if section == "config":
            role, kind = cells[0], cells[1]
            clean[(role, kind)] = _num(cells[2])
            for name, cell in zip(header[3:], cells[3:]):
                if not cell:
                    continue
                m = _CELL.match(cell)
                if not m:
                    raise FormatError(f"bad configuration cell {cell!r}")
                configs[(role, kind, name[3:])] = (_num(m.group(1)), _num(m.group(2)))
        else:
            budgets[cells[0]] = {name: _num(c) for name, c in zip(header[1:], cells[1:])}
    return {"configs": configs, "clean": clean, "budgets": budgets}


def _num(text):
    return float("nan") if text == "nan" else float(text)


def save_summary(summary, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    body = summary.to_dict()
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "summary.md"), "w") as fh:
        fh.write(render_markdown(summary))
    return body["content_hash"]


def load_summary(path, verify=True):
    """Load ``summary.json``; with ``verify`` recompute and compare every stored hash.

    The content hash covers the whole summary. If ``artifacts`` names a weights
    file or a dataset manifest that still exists, their fingerprints must match
    the stored ones as well.
    """
    with open(path) as fh:
        body = json.load(fh)
    if body.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported schema version {body.get('schema_version')!r}")
    summary = ExperimentSummary.from_dict(body)
    if verify:
        if body.get("content_hash") != content_hash(body):
            raise FormatError(f"{path}: content hash mismatch (summary was modified)")
        _verify_artifacts(summary)
    return summary


def _verify_artifacts(summary):
    from .data import manifest_hash
    from .model import load_weights

    for role, wpath in summary.artifacts.get("weights", {}).items():
        if os.path.exists(wpath):
            fp = load_weights(wpath).fingerprint()
            if fp != summary.model_fingerprints.get(role):
                raise FormatError(f"weights {wpath} no longer match the {role} fingerprint")
    mpath = summary.artifacts.get("manifest")
    if mpath and os.path.exists(mpath):
        with open(mpath) as fh:
            if manifest_hash(json.load(fh)) != summary.manifest_hash:
                raise ManifestMismatch(f"manifest {mpath} no longer matches the summary")
