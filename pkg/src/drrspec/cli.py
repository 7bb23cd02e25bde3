"""Command-line entry point: ``drrspec generate | train | cv | attribute``.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import (NotReluOnlyError, cosine_similarity, mean_relevance, relevance,
                          relevance_sparsity)
from .cohort import CohortFormatError, SynthConfig, export_cohort, generate_cohort, import_cohort
from .evaluation import (METHOD_ALIASES, METHODS, CVSettings, check_no_leakage,
                         fold_relevance_diagnostics, nested_cv)
from .model import build_isotopenet_lite, load_checkpoint, save_checkpoint
from .training import NumericalError, TrainConfig, read_config, train

log = logging.getLogger("drrspec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SECTIONS = ("synth", "train", "cv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _load_config(path):
    return {} if path is None else read_config(path)


def _section(data, name):
    """``data[name]`` if present, else the top-level keys that are not sections."""
    if name in data:
        sec = data[name]
        if not isinstance(sec, dict):
            raise ValueError(f"config section {name!r} must be a mapping")
        return dict(sec)
    return {k: v for k, v in data.items() if k not in SECTIONS and not k.startswith("_")}


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, tuple):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    return obj


def _prepare_out(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc.strerror or exc}") from exc
    return out


def _strip_out(argv):
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
        elif a == "--out":
            skip = True
        elif not a.startswith("--out="):
            out.append(a)
    return out


def _write_manifest(out, command, config, seeds, argv, extra=None):
    """Everything needed to rerun the command. It is deliberately free of
    timestamps and of the output location, so reruns are byte-identical."""
    manifest = {"command": command, "version": __version__, "config": _jsonable(config),
                "seeds": _jsonable(seeds), "argv": _strip_out(argv)}
    if extra:
        manifest.update(_jsonable(extra))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        return str(v)
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n")


def _subset(cohort, lab=None, patients=None):
    pats = None
    if patients:
        pats = [p for p in patients.split(",") if p]
    sub = cohort.select(lab, pats)
    if len(sub) == 0:
        raise ValueError("the selected cohort subset is empty")
    return sub


# ---------------------------------------------------------------- commands


def cmd_generate(args, argv):
    data = _load_config(args.config)
    synth = _section(data, "synth")
    if args.seed is not None:
        synth["seed"] = args.seed
    config = SynthConfig.from_mapping(synth)
    out = _prepare_out(args.out)
    t0 = time.perf_counter()
    cohort = generate_cohort(config)
    export_cohort(cohort, out)
    _write_manifest(out, "generate", {"synth": config.to_dict()}, {"synth": config.seed}, argv)
    log.info("wrote %d spectra x %d bins to %s (%.1fs)", len(cohort), cohort.n, out,
             time.perf_counter() - t0)
    return EXIT_OK


def _train_config(data, seed):
    sec = _section(data, "train")
    base = Path(data.get("_base_dir", "."))
    if seed is not None:
        sec["seed"] = seed
    return TrainConfig.from_mapping(sec, base_dir=base)


def cmd_train(args, argv):
    data = _load_config(args.config)
    if args.config:
        data["_base_dir"] = str(Path(args.config).parent)
    config = _train_config(data, args.seed)
    cohort = _subset(import_cohort(args.cohort), args.lab, args.patients)
    if config.penalty_mask is not None and config.penalty_mask.size != cohort.n:
        raise ValueError(f"penalty mask has {config.penalty_mask.size} entries, cohort has "
                         f"{cohort.n} bins")
    out = _prepare_out(args.out)
    model = build_isotopenet_lite(cohort.n, 2, cohort.mz_step, seed=config.seed)

    def progress(row):
        log.info("epoch %d  total %.5g  nll %.5g  l1 %.5g  l2 %.5g", row["epoch"],
                 row["total"], row["nll"], row["l1"], row["l2"])

    try:
        model, report = train(model, cohort.X, cohort.labels, config, progress)
    except NumericalError as exc:
        if exc.report is not None:
            exc.report.write_csv(out / "loss_history.csv")
        raise
    meta = {"train_config": config.to_dict(), "lab": args.lab, "n_spectra": len(cohort),
            "class_names": list(cohort.class_names)}
    save_checkpoint(out / "checkpoint.json", model, _jsonable(meta))
    report.write_csv(out / "loss_history.csv")
    _write_manifest(out, "train", {"train": config.to_dict(), "cohort": str(args.cohort),
                                   "lab": args.lab, "patients": args.patients},
                    {"train": config.seed}, argv)
    log.info("trained %d steps in %.1fs", report.steps, report.wall_time)
    return EXIT_OK


def _cv_settings(data, method, args):
    sec = _section(data, "cv")
    sec.pop("train", None)
    known = {f.name for f in fields(CVSettings)} - {"train", "method"}
    unknown = set(sec) - known - {"methods"}
    if unknown:
        raise ValueError(f"unknown cv config keys: {sorted(unknown)}")
    sec.pop("methods", None)
    train_data = dict(data)
    train_data.pop("cv", None)
    if "train" not in train_data:
        train_data = {}
    tcfg = _train_config(train_data, None)
    if args.seed is not None:
        sec["seed"] = args.seed
    if args.workers is not None:
        sec["workers"] = args.workers
    if args.outer is not None:
        sec["outer_folds"] = args.outer
    if args.inner is not None:
        sec["inner_folds"] = args.inner
    if args.grid and method != "plain-nn":
        sec["grid"] = tuple(float(v) if method == "drr-nn" else int(v)
                            for v in args.grid.split(","))
    elif method == "plain-nn":
        sec.pop("grid", None)
    elif isinstance(sec.get("grid"), dict):
        sec["grid"] = sec["grid"].get(method)
    return CVSettings(method=method, train=tcfg, **sec)


def _methods(args, data):
    names = args.method or _section(data, "cv").get("methods") or ["drr-nn"]
    out = []
    for entry in names:
        for m in str(entry).split(","):
            m = METHOD_ALIASES.get(m, m)
            if m not in METHODS:
                raise UsageError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
            out.append(m)
    return out


def cmd_cv(args, argv):
    data = _load_config(args.config)
    if args.config:
        data["_base_dir"] = str(Path(args.config).parent)
    methods = _methods(args, data)
    cohort = import_cohort(args.cohort)
    out = _prepare_out(args.out)
    summary, configs, seeds = [], {}, {}
    for method in methods:
        settings = _cv_settings(data, method, args)
        log.info("nested CV %s: grid %s, %d outer x %d inner folds", method,
                 list(settings.grid), settings.outer_folds, settings.inner_folds)
        report = nested_cv(cohort, settings)
        check_no_leakage(report, cohort)
        mdir = out / method
        report.write(mdir)
        ckdir = mdir / "checkpoints"
        ckdir.mkdir(exist_ok=True)
        for (lab, fold), model in sorted(report.models.items()):
            if hasattr(model, "layers"):
                save_checkpoint(ckdir / f"lab{lab}_fold{fold}.json", model,
                                {"train_lab": lab, "fold": fold, "method": method})
            else:
                (ckdir / f"lab{lab}_fold{fold}.json").write_text(json.dumps(_jsonable(
                    {"bins": model["bins"], "means": model["lda"].means,
                     "coef": model["lda"].coef, "intercept": model["lda"].intercept,
                     "shrinkage": model["lda"].shrinkage}), sort_keys=True))
        if args.relevance and method != "roc-lda":
            diag = fold_relevance_diagnostics(cohort, report, args.tau)
            rows = [(d["train_lab"], d["fold"], d["cosine"], d["test_sparsity"]) for d in diag]
            _write_csv(mdir / "relevance_folds.csv",
                       ("train_lab", "fold", "cosine", "test_sparsity"), rows)
        s = report.summary()
        summary.append((method, s["spot_balanced_accuracy"], s["patient_balanced_accuracy"],
                        s["model_count"]))
        cfg = {"method": method, "grid": list(settings.grid),
               "outer_folds": settings.outer_folds, "inner_folds": settings.inner_folds,
               "selection": settings.selection, "two_sided_auroc": settings.two_sided_auroc,
               "lda_shrinkage": settings.lda_shrinkage, "train": settings.train.to_dict()}
        configs[method] = cfg
        seeds[method] = settings.seed
        print(f"{method}: spot balanced accuracy {s['spot_balanced_accuracy']:.4f}, "
              f"patient balanced accuracy {s['patient_balanced_accuracy']:.4f} "
              f"({s['model_count']} models, {report.seconds:.0f}s)")
    _write_csv(out / "summary.csv", ("method", "spot_balanced_accuracy",
                                     "patient_balanced_accuracy", "model_count"), summary)
    _write_manifest(out, "cv", {"cv": configs, "cohort": str(args.cohort)}, seeds, argv)
    return EXIT_OK


def cmd_attribute(args, argv):
    model, meta = load_checkpoint(args.checkpoint)
    cohort = import_cohort(args.cohort)
    if cohort.n != model.n_inputs:
        raise ValueError(f"checkpoint expects {model.n_inputs} bins, cohort has {cohort.n}")
    if not model.is_relu_only():
        raise NotReluOnlyError("relevance maps need a ReLU-only network")
    target = _subset(cohort, args.lab, args.patients)
    if args.reference_lab or args.reference_patients:
        reference = _subset(cohort, args.reference_lab, args.reference_patients)
    else:
        reference = target
    out = _prepare_out(args.out)
    mz = cohort.mz
    maps, ref_maps, report = {}, {}, {"classes": {}}
    for c in range(model.n_classes):
        if np.any(target.labels == c):
            maps[c] = mean_relevance(model, target.X[target.labels == c], c).values
        if np.any(reference.labels == c):
            ref_maps[c] = mean_relevance(model, reference.X[reference.labels == c], c).values
    cols = [np.zeros(cohort.n) if c not in maps else maps[c] for c in range(model.n_classes)]
    _write_csv(out / "mean_relevance.csv",
               ["mz"] + [f"relevance_class{c}" for c in range(model.n_classes)],
               zip(mz, *cols))
    for c in maps:
        entry = {"sparsity": relevance_sparsity(maps[c], args.tau),
                 "n_spectra": int(np.count_nonzero(target.labels == c))}
        if c in ref_maps:
            entry["reference_sparsity"] = relevance_sparsity(ref_maps[c], args.tau)
            try:
                entry["cosine_to_reference"] = cosine_similarity(maps[c], ref_maps[c])
            except ValueError:
                entry["cosine_to_reference"] = None
        report["classes"][str(c)] = entry
    cos = [e["cosine_to_reference"] for e in report["classes"].values()
           if e.get("cosine_to_reference") is not None]
    report["mean_cosine_to_reference"] = float(np.mean(cos)) if cos else None
    report["tau"] = args.tau
    if args.bins:
        bins = [int(b) for b in args.bins.split(",")]
        if any(not 0 <= b < cohort.n for b in bins):
            raise ValueError(f"bin indices must lie in 0..{cohort.n - 1}")
        rows = []
        rel = {c: relevance(model, target.X, c) for c in range(model.n_classes)}
        for i in range(len(target)):
            for b in bins:
                rows.append([target.sample_ids[i], target.patient_ids[i], target.lab_ids[i],
                             int(target.labels[i]), b, mz[b]]
                            + [rel[c][i, b] for c in range(model.n_classes)])
        _write_csv(out / "spot_relevance.csv",
                   ["sample_id", "patient_id", "lab_id", "label", "bin", "mz"]
                   + [f"relevance_class{c}" for c in range(model.n_classes)], rows)
    (out / "report.json").write_text(json.dumps(_jsonable(report), indent=1, sort_keys=True) + "\n")
    _write_manifest(out, "attribute", {"checkpoint": str(args.checkpoint),
                                       "cohort": str(args.cohort), "lab": args.lab,
                                       "patients": args.patients, "bins": args.bins,
                                       "reference_lab": args.reference_lab,
                                       "reference_patients": args.reference_patients,
                                       "tau": args.tau},
                    {"checkpoint": meta.get("seed", model.seed)}, argv)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="drrspec", description="Relevance-regularized spectrum classifiers.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="generate a synthetic two-lab cohort")
    g.add_argument("--config", help="JSON or YAML synthesis config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train one network on a cohort")
    t.add_argument("--cohort", required=True)
    t.add_argument("--config", help="JSON or YAML training config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--lab", help="train on one lab only")
    t.add_argument("--patients", help="comma-separated patient ids to train on")

    c = sub.add_parser("cv", help="nested inter-lab cross-validation")
    c.add_argument("--cohort", required=True)
    c.add_argument("--config", help="JSON or YAML config with optional cv/train sections")
    c.add_argument("--out", required=True)
    c.add_argument("--method", action="append",
                   help="drr-nn, plain-nn or roc-lda; repeat or comma-separate for several")
    c.add_argument("--grid", help="comma-separated grid values (lambda or k)")
    c.add_argument("--outer", type=int)
    c.add_argument("--inner", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--workers", type=int)
    c.add_argument("--relevance", action="store_true",
                   help="also write per-fold relevance cosine and sparsity")
    c.add_argument("--tau", type=float, default=0.01)

    a = sub.add_parser("attribute", help="relevance maps of a trained network")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--cohort", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--lab")
    a.add_argument("--patients")
    a.add_argument("--reference-lab", help="subset whose mean maps the target is compared to")
    a.add_argument("--reference-patients")
    a.add_argument("--bins", help="comma-separated bin indices for per-spectrum relevance")
    a.add_argument("--tau", type=float, default=0.01)
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "cv": cmd_cv,
            "attribute": cmd_attribute}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"drrspec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"drrspec: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CohortFormatError, NotReluOnlyError, ValueError, KeyError, TypeError,
            OSError) as exc:
        print(f"drrspec: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
