"""``blm-robust`` command line.

Every option can also come from ``--config file.json``; explicit flags win over
the file, the file wins over built-in defaults. Exit codes: 0 success,
1 validation error, 2 runtime or numeric error. Errors are reported on stderr
as a one-line JSON object.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import attack as atk
from . import data as dat
from . import report as rep
from . import sequence as sq
from .errors import BlmRobustError, EmptyDataset, FormatError, IoError, ValidationError
from .model import ArchConfig, build_model, load_weights, save_weights
from .pipeline import classify_batch
from .threat import StructuredBudget, admissibility_check
from .training import TrainConfig, finetune_adversarial, finetune_config, train_clean

DEFAULT_BUDGET = (0.10, 0.02)

# per-subcommand defaults, applied after the config file
DEFAULTS = {
    "gen-data": {"n_scans": 40, "W": 128, "split": "0.7,0.15,0.15", "windows_per_event": 8},
    "train": {"epochs": 10, "lr": 0.05, "batch_size": 32, "scale_factor": 0.125, "dropout": 0.3},
    "finetune-adv": {"epochs": 3, "lr": 0.01, "batch_size": 32, "adv_fraction": 0.5, "pgd_steps": 10},
    "attack": {"kind": "Baseline", "budgets": DEFAULT_BUDGET, "steps": 40, "restarts": 1, "W": 128},
    "eval-robust": {"kinds": "all", "budgets": DEFAULT_BUDGET, "scales": "1", "steps": 40,
                    "restarts": 1, "split_name": "test"},
    "seq-attack": {"budgets": DEFAULT_BUDGET, "W": 128, "goal": "suppress", "cls": 2, "kappa": 0.5,
                   "steps": 40, "max_length": 8, "grid_resolution": 21},
    "check-candidate": {"budgets": DEFAULT_BUDGET},
    "summarize": {},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _global_flags(p, suppress):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="JSON file with option values")
    p.add_argument("--seed", type=int, default=default)
    p.add_argument("--jobs", type=int, default=default, help="parallel attack workers")
    p.add_argument("--out", default=default, help="output directory")


def build_parser():
    parser = _Parser(prog="blm-robust", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        return p

    p = cmd("gen-data", "generate a synthetic labeled window dataset")
    p.add_argument("--n-scans", type=int)
    p.add_argument("--W", type=int)
    p.add_argument("--split", help="train,val,test fractions")
    p.add_argument("--windows-per-event", type=int)

    p = cmd("train", "train the classifier from scratch")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--scale-factor", type=float)
    p.add_argument("--dropout", type=float)

    p = cmd("finetune-adv", "adversarially fine-tune a trained model")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--budgets", help="com,ind or com0,com1,ind0,ind1")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--adv-fraction", type=float)
    p.add_argument("--pgd-steps", type=int)

    p = cmd("attack", "attack one window")
    p.add_argument("--model")
    p.add_argument("--trace", help="trace CSV; the window starts at --origin")
    p.add_argument("--origin", type=int)
    p.add_argument("--W", type=int)
    p.add_argument("--kind")
    p.add_argument("--budgets")
    p.add_argument("--steps", type=int)
    p.add_argument("--restarts", type=int)

    p = cmd("eval-robust", "robust accuracy of a model on a dataset split")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--split-name", choices=("train", "val", "test"))
    p.add_argument("--kinds", help="comma-separated configurations or 'all'")
    p.add_argument("--budgets")
    p.add_argument("--scales", help="comma-separated budget multipliers")
    p.add_argument("--steps", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--limit", type=int, help="evaluate only the first N windows")

    p = cmd("seq-attack", "attack a range of consecutive windows of a trace")
    p.add_argument("--model")
    p.add_argument("--trace", help="trace CSV (default: built-in demo trace)")
    p.add_argument("--range", help="first,last window origin")
    p.add_argument("--W", type=int)
    p.add_argument("--budgets")
    p.add_argument("--goal", choices=("suppress", "target"))
    p.add_argument("--class", dest="cls", type=int)
    p.add_argument("--kappa", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--max-length", type=int, help="cap for the maximality search, 0 to skip it")
    p.add_argument("--grid-resolution", type=int)

    p = cmd("check-candidate", "pipeline check of a supplied perturbation")
    p.add_argument("--model")
    p.add_argument("--window", help="trace CSV holding the clean window")
    p.add_argument("--delta", help="trace CSV holding the signal-space perturbation")
    p.add_argument("--budgets")
    p.add_argument("--label", type=int, help="label to flip (default: clean prediction)")

    p = cmd("summarize", "aggregate robustness reports and training logs")
    p.add_argument("--reports", nargs="+")
    p.add_argument("--logs", nargs="*")
    p.add_argument("--manifest")
    p.add_argument("--weights", nargs="*", help="role=path pairs recorded for later verification")
    return parser


# ---------------------------------------------------------------------------
# option handling

def _load_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ValidationError(f"config file {path} does not exist")
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValidationError("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def resolve(args):
    """Merge flags, config file and defaults into one namespace."""
    cfg = _load_config(getattr(args, "config", None))
    merged = dict(DEFAULTS.get(args.command, {}))
    merged.update({"seed": 0, "jobs": None, "out": "."})
    merged.update(cfg)
    for k, v in vars(args).items():
        if v is not None:
            merged[k] = v
        else:
            merged.setdefault(k, None)
    return argparse.Namespace(**merged)


def parse_floats(value, name):
    if isinstance(value, (list, tuple)):
        vals = value
    else:
        vals = str(value).split(",")
    try:
        return [float(v) for v in vals]
    except ValueError:
        raise ValidationError(f"--{name}: expected comma-separated numbers, got {value!r}") from None


def parse_budget(value):
    if value is None:
        raise ValidationError("--budgets is required")
    if isinstance(value, dict):
        return StructuredBudget.from_dict(value)
    v = parse_floats(value, "budgets")
    if len(v) == 2:
        return StructuredBudget.from_pair(v[0], v[1])
    if len(v) == 4:
        return StructuredBudget((v[0], v[1]), (v[2], v[3]))
    raise ValidationError("--budgets takes 2 (com,ind) or 4 (com0,com1,ind0,ind1) numbers")


def _require(opts, *names):
    for n in names:
        if getattr(opts, n, None) is None:
            raise ValidationError(f"--{n.replace('_', '-')} is required")


def _input(path, what):
    if path is None:
        raise ValidationError(f"{what} path is required")
    if not os.path.exists(path):
        raise ValidationError(f"{what} {path} does not exist")
    return path


def _outdir(opts):
    try:
        os.makedirs(opts.out, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {opts.out}: {exc}") from None
    if not os.access(opts.out, os.W_OK):
        raise IoError(f"output directory {opts.out} is not writable")
    return opts.out


def _path(opts, name):
    return os.path.join(opts.out, name)


def _load_dataset(path):
    _input(path, "dataset")
    if os.path.isdir(path) and not os.path.exists(os.path.join(path, "manifest.json")):
        raise EmptyDataset(f"{path} holds no dataset (manifest.json missing)")
    return dat.read_dataset(path)


def _pgd(opts, steps_key="steps"):
    return atk.PgdConfig(steps=int(getattr(opts, steps_key)), restarts=int(getattr(opts, "restarts", 1)),
                         seed=int(opts.seed))


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(opts):
    split = tuple(parse_floats(opts.split, "split"))
    ds = dat.make_dataset(n_scans=int(opts.n_scans), seed=int(opts.seed), W=int(opts.W), split=split,
                          windows_per_event=int(opts.windows_per_event))
    out = _outdir(opts)
    h = dat.write_dataset(ds, out)
    return {"manifest_hash": h, "sizes": {k: len(v) for k, v in ds.splits().items()},
            "class_counts": {k: v.class_counts().tolist() for k, v in ds.splits().items()}}


def _write_log(log, opts, stem):
    log.write(_path(opts, f"{stem}.csv"), _path(opts, f"{stem}.json"))


def cmd_train(opts):
    ds = _load_dataset(opts.data)
    arch = ArchConfig(scale_factor=float(opts.scale_factor), dropout_rate=float(opts.dropout))
    params0 = build_model(arch, int(opts.seed))
    cfg = TrainConfig(epochs=int(opts.epochs), batch_size=int(opts.batch_size),
                      learning_rate=float(opts.lr), seed=int(opts.seed))
    out = _outdir(opts)
    params, log = train_clean(params0, ds, cfg)
    save_weights(params, os.path.join(out, "weights.npz"))
    _write_log(log, opts, "train_log")
    return {"fingerprint": log.fingerprint, "final_val_acc": log.final_val_acc}


def cmd_finetune_adv(opts):
    if getattr(opts, "budgets", None) is None:
        raise ValidationError("finetune-adv requires --budgets")
    budget = parse_budget(opts.budgets)
    params = load_weights(_input(opts.model, "model"))
    ds = _load_dataset(opts.data)
    base = TrainConfig(epochs=int(opts.epochs), batch_size=int(opts.batch_size),
                       learning_rate=float(opts.lr), seed=int(opts.seed))
    cfg = finetune_config(base, budget, adv_fraction=float(opts.adv_fraction),
                          pgd=atk.PgdConfig(steps=int(opts.pgd_steps), seed=int(opts.seed)))
    out = _outdir(opts)
    tuned, log = finetune_adversarial(params, ds, cfg)
    save_weights(tuned, os.path.join(out, "weights_adv.npz"))
    _write_log(log, opts, "finetune_log")
    return {"fingerprint": log.fingerprint, "final_val_acc": log.final_val_acc}


def _write_delta(delta, path):
    dat.write_trace(np.asarray(delta), path)


def cmd_attack(opts):
    _require(opts, "origin")
    params = load_weights(_input(opts.model, "model"))
    values = dat.read_trace(_input(opts.trace, "trace")).values
    W, o = int(opts.W), int(opts.origin)
    if not 0 <= o <= values.shape[0] - W:
        raise ValidationError(f"origin {o} outside [0, {values.shape[0] - W}]")
    x0 = values[o:o + W]
    b = parse_budget(opts.budgets)
    out = _outdir(opts)
    outcome = atk.run_config(atk.AttackConfigKind.parse(opts.kind), params, x0, b, _pgd(opts))
    res = {
        "kind": outcome.kind.value, "origin": o, "W": W, "budget": b.to_dict(),
        "original_label": outcome.original_label, "tool_success": outcome.tool_success,
        "pipeline_success": outcome.pipeline_success, "tool_label": outcome.tool_label,
        "flipped_label": outcome.flipped_label, "admissible": outcome.admissible,
        "gradient_failure": outcome.gradient_failure,
    }
    if outcome.reconstructed_delta is not None:
        _write_delta(outcome.reconstructed_delta, _path(opts, "delta.csv"))
    _dump(res, os.path.join(out, "attack.json"))
    return res


def _kinds(value):
    if value in ("all", None):
        return list(atk.ALL_KINDS)
    names = value if isinstance(value, list) else str(value).split(",")
    return [atk.AttackConfigKind.parse(n.strip()) for n in names]


def _scale_tag(s):
    return f"{s:g}".replace(".", "p")


def cmd_eval_robust(opts):
    params = load_weights(_input(opts.model, "model"))
    ds = _load_dataset(opts.data)
    ws = ds.splits()[opts.split_name]
    if getattr(opts, "limit", None):
        ws = ws.subset(np.arange(min(int(opts.limit), len(ws))))
    b = parse_budget(opts.budgets)
    kinds = _kinds(opts.kinds)
    scales = parse_floats(opts.scales, "scales")
    jobs = opts.jobs or atk.default_jobs()
    out = _outdir(opts)
    results = {}
    for s in scales:
        report = atk.evaluate_dataset(kinds, params, ws.windows, ws.labels, b.scaled(s), _pgd(opts),
                                      jobs=jobs, manifest_hash=ds.manifest_hash())
        stem = "robustness" if len(scales) == 1 else f"robustness_x{_scale_tag(s)}"
        report.write(os.path.join(out, stem + ".json"), os.path.join(out, stem + ".csv"))
        results[f"{s:g}"] = [c.summary() for c in report.results.values()]
    return results


def _write_probs(path, origins, clean, pert):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["origin", "clean_p0", "clean_p1", "clean_p2", "clean_label",
                    "pert_p0", "pert_p1", "pert_p2", "pert_label"])
        for o, pc, lc, pp, lp in zip(origins, clean.probs, clean.labels, pert.probs, pert.labels):
            w.writerow([int(o), *(f"{v:.17g}" for v in pc), int(lc), *(f"{v:.17g}" for v in pp), int(lp)])


def _maximal_length(params, values, res, b, cfg, opts):
    """Maximal-under-attack sequence grown from the first adversarial window of the range."""
    seq = res.sequence
    adv = np.flatnonzero(seq.adversarial)
    if int(opts.max_length) <= 0 or adv.size == 0:
        return None
    j = seq.start + int(adv[0])
    seed = sq.seed_sequence(params, values, j, seq.window_delta(j), b, seq.W,
                           scale=seq.scale)
    if not bool(seed.adversarial.all()):
        return None
    grown = sq.maximal_adv_sequence_under_attack(params, values, seed, b, cfg,
                                                 int(opts.grid_resolution), int(opts.max_length))
    return {"seed_origin": j, "start": grown.start, "end": grown.end, "length": len(grown),
            "capped": len(grown) >= int(opts.max_length), "qualifier": "maximal under attack"}


def cmd_seq_attack(opts):
    params = load_weights(_input(opts.model, "model"))
    if getattr(opts, "trace", None):
        values = dat.read_trace(_input(opts.trace, "trace")).values
    else:
        values = dat.demo_trace().values
    _require(opts, "range")
    rng = parse_floats(opts.range, "range")
    if len(rng) != 2 or any(r != int(r) for r in rng):
        raise ValidationError("--range takes two integer window origins a,b")
    a, b_end = int(rng[0]), int(rng[1])
    W = int(opts.W)
    budget = parse_budget(opts.budgets)
    cfg = atk.PgdConfig(steps=int(opts.steps), seed=int(opts.seed))
    res = sq.sequence_attack(params, values, a, b_end, budget, cfg, goal=opts.goal,
                             cls=int(opts.cls), W=W)
    out = _outdir(opts)
    clean = sq.classification_sequence(params, values, W)
    pert = sq.classification_sequence(params, res.perturbed, W)
    dat.write_trace(res.perturbed, os.path.join(out, "perturbed_trace.csv"))
    dat.write_trace(values, os.path.join(out, "clean_trace.csv"))
    _write_probs(os.path.join(out, "window_probs.csv"), np.arange(len(clean)), clean, pert)
    outside = np.ones(len(clean), dtype=bool)
    outside[max(0, a - W + 1):b_end + W] = False  # windows overlapping the support
    report = {
        "range": [a, b_end], "W": W, "goal": opts.goal, "class": int(opts.cls),
        "budget": budget.to_dict(), "n_windows": b_end - a + 1,
        "n_flips": res.n_flips, "n_goal": res.n_goal,
        "outside_unchanged": bool(np.array_equal(clean.labels[outside], pert.labels[outside])),
        "sequence": res.sequence.to_dict(),
        "smoothness_clean": sq.smoothness(clean, float(opts.kappa)).to_dict(),
        "smoothness_perturbed": sq.smoothness(pert, float(opts.kappa)).to_dict(),
        "maximality": _maximal_length(params, values, res, budget, cfg, opts),
    }
    _dump(report, os.path.join(out, "sequence.json"))
    return {k: report[k] for k in ("n_windows", "n_flips", "n_goal", "outside_unchanged", "maximality")}


def cmd_check_candidate(opts):
    params = load_weights(_input(opts.model, "model"))
    x0 = dat.read_trace(_input(opts.window, "window")).values
    delta = dat.read_trace(_input(opts.delta, "delta")).values
    if delta.shape != x0.shape:
        raise ValidationError(f"delta shape {delta.shape} != window shape {x0.shape}")
    b = parse_budget(opts.budgets)
    label = opts.label if getattr(opts, "label", None) is not None else int(classify_batch(params, x0[None])[1][0])
    adm = admissibility_check(delta, x0, b)
    ok = atk.pipeline_check(delta, x0, params, b, original_label=label)
    res = {"original_label": int(label), "admissible": bool(adm.feasible), "pipeline_success": bool(ok)}
    _dump(res, os.path.join(_outdir(opts), "check.json"))
    return res


def _read_json(path, what):
    try:
        with open(_input(path, what)) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None


def cmd_summarize(opts):
    _require(opts, "reports")
    reports = [_read_json(p, "report") for p in opts.reports]
    logs = [_read_json(p, "training log") for p in (opts.logs or [])]
    artifacts = {}
    if getattr(opts, "manifest", None):
        artifacts["manifest"] = _input(opts.manifest, "manifest")
    if getattr(opts, "weights", None):
        pairs = [w.split("=", 1) for w in opts.weights]
        if any(len(p) != 2 for p in pairs):
            raise ValidationError("--weights takes role=path pairs")
        artifacts["weights"] = {role: _input(path, "weights") for role, path in pairs}
    summary = rep.summarize(reports, logs, artifacts=artifacts)
    h = rep.save_summary(summary, _outdir(opts))
    return {"content_hash": h, "rows": len(summary.config_rows)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune-adv": cmd_finetune_adv,
    "attack": cmd_attack,
    "eval-robust": cmd_eval_robust,
    "seq-attack": cmd_seq_attack,
    "check-candidate": cmd_check_candidate,
    "summarize": cmd_summarize,
}


def exit_code(exc):
    if isinstance(exc, (ValidationError, FormatError)):
        return 1
    return 2


def _fail(exc):
    code = exit_code(exc)
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}),
          file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise ValidationError("a subcommand is required")
        opts = resolve(args)
        result = COMMANDS[args.command](opts)
    except (BlmRobustError, ArithmeticError, ValueError) as exc:
        return _fail(exc)
    except OSError as exc:
        return _fail(IoError(str(exc)))
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
