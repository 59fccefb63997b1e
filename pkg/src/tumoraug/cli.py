"""Command-line front end.

Directory layouts
-----------------
cases     ``<root>/<case_id>/<case_id>-{t1n,t1c,t2w,t2f,seg}.nii.gz`` plus an
          optional ``<root>/phases.csv`` manifest (``case_id,phase``)
labels    the case layout above, or flat ``<root>/<case_id>.nii.gz``
softmax   ``<root>/<case_id>.npz`` holding a ``probabilities`` array of
          shape ``(5, nx, ny, nz)``

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .augment import AugmentConfig, LabelPool, RandomStream, augment_case
from .errors import DimsMismatchError, IoFailureError, NiftiError, TumorAugError
from .metrics import METRIC_NAMES, CaseScores, evaluate_case, write_scores_csv
from .phantom import PhantomSpec, make_case, random_spec
from .postproc import ThresholdSet, apply_thresholds, ensemble_predict, load_threshold_set
from .stats import (aggregate_scores, paired_columns, paired_t, rank_models,
                    read_score_matrix, write_rank_table)
from .volume import (MODALITIES, REGIONS, IntensityVolume, LabelVolume, MultiModalCase, Phase,
                     load_nifti, save_nifti)

log = logging.getLogger("tumoraug")

DEFAULT_SEED = 20250
EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 2, 3
PHASE_MANIFEST = "phases.csv"


class UsageError(Exception):
    """Bad arguments, configuration or input pairing (exit 2)."""


# ---------------------------------------------------------------------------
# file layout helpers
# ---------------------------------------------------------------------------

def _nii(path: Path) -> Path | None:
    for suffix in (".nii.gz", ".nii"):
        p = path.with_name(path.name + suffix)
        if p.exists():
            return p
    return None


def case_file(root: Path, case_id: str, kind: str) -> Path | None:
    return _nii(root / case_id / f"{case_id}-{kind}")


def label_file(root: Path, case_id: str) -> Path | None:
    return case_file(root, case_id, "seg") or _nii(root / case_id)


def list_case_ids(root: Path) -> list[str]:
    if not root.is_dir():
        raise IoFailureError(f"{root} is not a directory")
    ids = set()
    for entry in root.iterdir():
        if entry.is_dir() and label_file(root, entry.name):
            ids.add(entry.name)
        elif entry.name.endswith(".nii.gz"):
            ids.add(entry.name[:-7])
        elif entry.name.endswith(".nii"):
            ids.add(entry.name[:-4])
    return sorted(ids)


def read_phase_manifest(path: Path) -> dict[str, Phase]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or {"case_id", "phase"} - set(reader.fieldnames):
                raise UsageError(f"{path}: header must be 'case_id,phase'")
            try:
                return {row["case_id"].strip(): Phase.parse(row["phase"]) for row in reader}
            except ValueError as exc:
                raise UsageError(f"{path}: {exc}") from None
    except OSError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc


def write_phase_manifest(path: Path, phases: dict[str, Phase]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "phase"])
        for cid in sorted(phases):
            writer.writerow([cid, phases[cid].value])


def _phases_for(root: Path, manifest: str | None) -> dict[str, Phase]:
    if manifest:
        return read_phase_manifest(Path(manifest))
    default = root / PHASE_MANIFEST
    return read_phase_manifest(default) if default.exists() else {}


def load_case(root: Path, case_id: str, phase: Phase) -> MultiModalCase:
    mods = {}
    spacing = (1.0, 1.0, 1.0)
    for m in MODALITIES:
        path = case_file(root, case_id, m)
        if path is None:
            raise UsageError(f"case {case_id}: missing {m} volume in {root / case_id}")
        vol = load_nifti(path, kind="intensity")
        mods[m] = vol.data
        spacing = vol.spacing
    seg = label_file(root, case_id)
    if seg is None:
        raise UsageError(f"case {case_id}: missing seg volume")
    return MultiModalCase(case_id, mods, load_nifti(seg, kind="label").data, phase, spacing)


def save_case(case: MultiModalCase, root: Path, headers: dict[str, bytes | None] | None = None) -> None:
    headers = headers or {}
    for m in MODALITIES:
        save_nifti(IntensityVolume(case.modalities[m], case.spacing, headers.get(m)),
                   root / case.id / f"{case.id}-{m}.nii.gz")
    save_nifti(LabelVolume(case.label, case.spacing, headers.get("seg")),
               root / case.id / f"{case.id}-seg.nii.gz")


def _metadata(args) -> dict:
    return {
        "tool": f"tumoraug {__version__}",
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "seed": args.seed,
    }


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _load_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON ({exc})") from None
    except OSError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _phantom_specs(doc) -> list[PhantomSpec]:
    if isinstance(doc, list):
        entries = doc
    elif isinstance(doc, dict) and "generate" in doc:
        gen = dict(doc["generate"])
        n = int(gen.pop("n"))
        seed = int(gen.pop("seed", 0))
        prefix = gen.pop("prefix", "case")
        dims = gen.pop("dims", (64, 64, 64))
        phase = gen.pop("phase", None)
        max_lesions = int(gen.pop("max_lesions", 2))
        if gen:
            raise ValueError(f"unknown generate keys: {sorted(gen)}")
        width = len(str(n - 1))
        return [random_spec(f"{prefix}{i:0{width}d}", seed + i, dims, phase, max_lesions)
                for i in range(n)]
    elif isinstance(doc, dict) and "cases" in doc:
        entries = doc["cases"]
    elif isinstance(doc, dict):
        entries = [doc]
    else:
        raise ValueError("phantom spec must be an object or a list of objects")
    return [PhantomSpec.from_dict(e) for e in entries]


def cmd_phantom(args) -> int:
    doc = _load_json(args.spec)
    try:
        specs = _phantom_specs(doc)
        cases = [make_case(s) for s in specs]
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"{args.spec}: bad phantom spec ({exc})") from None
    out = Path(args.out_dir)
    for case in cases:
        save_case(case, out)
    write_phase_manifest(out / PHASE_MANIFEST, {c.id: c.phase for c in cases})
    log.info("wrote %d phantom cases to %s", len(cases), out)
    return EXIT_OK


def _augment_config(args, config: dict) -> AugmentConfig:
    try:
        if args.augment_config:
            return AugmentConfig.from_dict(_load_json(args.augment_config))
        if args.preset:
            return AugmentConfig.preset(args.preset)
        section = config.get("augment", "custom")
        if isinstance(section, str):
            return AugmentConfig.preset(section)
        return AugmentConfig.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad augmentation config: {exc}") from None


def _augment_one(task) -> dict:
    case_id, index, seed, cases_dir, out_dir, phase, cfg, pool = task
    cases_dir, out_dir = Path(cases_dir), Path(out_dir)
    case = load_case(cases_dir, case_id, phase)
    new, outcome = augment_case(case, pool, cfg, RandomStream(seed))
    if new is case:
        # untouched cases are copied byte-for-byte
        for kind in (*MODALITIES, "seg"):
            src = case_file(cases_dir, case_id, kind) or label_file(cases_dir, case_id)
            dst = out_dir / case_id / src.name
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, dst)
    else:
        headers = {m: load_nifti(case_file(cases_dir, case_id, m)).header for m in MODALITIES}
        headers["seg"] = load_nifti(label_file(cases_dir, case_id)).header
        save_case(new, out_dir, headers)
    return {"case_id": case_id, "index": index, "seed": seed, **outcome.to_dict()}


def cmd_augment(args) -> int:
    cfg = _augment_config(args, args._config)
    cases_dir, pool_dir, out_dir = Path(args.cases_dir), Path(args.pool_dir), Path(args.out_dir)
    phases = _phases_for(cases_dir, args.phases)
    case_ids = list_case_ids(cases_dir)
    pool_labels = {cid: load_nifti(label_file(pool_dir, cid), kind="label").data
                   for cid in list_case_ids(pool_dir)}
    pool = LabelPool.from_labels(pool_labels)
    if cfg.p_insert > 0 and not pool:
        raise UsageError(f"{pool_dir}: donor pool is empty")
    tasks = [(cid, i, args.seed ^ i, str(cases_dir), str(out_dir),
              phases.get(cid, Phase.POST), cfg, pool)
             for i, cid in enumerate(case_ids)]
    records = _map(_augment_one, tasks, args.jobs)
    out_dir.mkdir(parents=True, exist_ok=True)
    if phases:
        write_phase_manifest(out_dir / PHASE_MANIFEST, {c: phases[c] for c in case_ids if c in phases})
    counts = [0, 0, 0]
    for r in records:
        counts[r["tumors_inserted"]] += 1
    report = {
        "metadata": _metadata(args),
        "config": cfg.to_dict(),
        "summary": {"cases": len(records), "tumor_counts": counts},
        "cases": records,
    }
    with open(out_dir / "outcomes.json", "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    log.info("augmented %d cases; tumor counts %s", len(records), counts)
    return EXIT_OK


def _evaluate_one(task) -> CaseScores:
    case_id, pred_path, gt_path, phase, tol, dilation = task
    pred = load_nifti(pred_path, kind="label")
    gt = load_nifti(gt_path, kind="label")
    if pred.data.shape != gt.data.shape:
        raise UsageError(f"case {case_id}: prediction {pred.data.shape} vs ground truth "
                         f"{gt.data.shape}")
    return evaluate_case(pred.data, gt.data, phase, case_id=case_id, spacing=gt.spacing,
                         tol_mm=tol, dilation_iters=dilation)


def summarize(scores: Sequence[CaseScores]) -> list[dict]:
    rows = []
    for metric in METRIC_NAMES:
        for region in REGIONS:
            n = sum(c.get(region, metric) is not None for c in scores)
            if n == 0:
                continue
            mean, sd = aggregate_scores(scores, metric, region)
            rows.append({"metric": metric, "region": region.value, "mean": mean, "sd": sd, "n": n})
    return rows


def _write_aggregate_matrix(summary: list[dict], path: Path) -> None:
    """Score-matrix CSV (one row per metric, one column per region) for rank/ttest."""
    cells = {(r["metric"], r["region"]): r["mean"] for r in summary}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", *(r.value for r in REGIONS)])
        for metric in METRIC_NAMES:
            writer.writerow([metric, *(f"{cells[(metric, r.value)]:.6f}"
                                       if (metric, r.value) in cells else ""
                                       for r in REGIONS)])


def cmd_evaluate(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    phases = _phases_for(gt_dir, args.phases)
    gt_ids = list_case_ids(gt_dir)
    pred_ids = list_case_ids(pred_dir)
    missing_pred = sorted(set(gt_ids) - set(pred_ids))
    missing_gt = sorted(set(pred_ids) - set(gt_ids))
    if missing_pred or missing_gt:
        parts = []
        if missing_pred:
            parts.append(f"no prediction for {', '.join(missing_pred)}")
        if missing_gt:
            parts.append(f"no ground truth for {', '.join(missing_gt)}")
        raise UsageError("; ".join(parts))
    tasks = [(cid, label_file(pred_dir, cid), label_file(gt_dir, cid),
              phases.get(cid, Phase.POST), args.tolerance, args.dilation) for cid in gt_ids]
    scores = _map(_evaluate_one, tasks, args.jobs)
    summary = summarize(scores)
    out = Path(args.out_report)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "json":
        doc = {
            "metadata": _metadata(args),
            "per_case": [row for c in scores for row in c.rows()],
            "aggregate": summary,
        }
        out.write_text(json.dumps(doc, indent=2) + "\n")
    else:
        write_scores_csv(scores, out)
        stem = out.name[:-4] if out.name.endswith(".csv") else out.name
        _write_aggregate_matrix(summary, out.with_name(f"{stem}_aggregate.csv"))
        with open(out.with_name(f"{stem}_summary.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["metric", "region", "mean", "sd", "n"])
            writer.writeheader()
            for row in summary:
                writer.writerow({**row, "mean": f"{row['mean']:.6f}", "sd": f"{row['sd']:.6f}"})
    log.info("evaluated %d cases", len(scores))
    return EXIT_OK


def _thresholds(args, config: dict) -> ThresholdSet:
    try:
        if args.thresholds:
            return load_threshold_set(args.thresholds)
        section = config.get("thresholds", "set0")
        return ThresholdSet.from_json(section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad threshold set: {exc}") from None


def load_probabilities(path: Path) -> np.ndarray:
    try:
        with np.load(path) as npz:
            return npz["probabilities"]
    except KeyError:
        raise UsageError(f"{path}: no 'probabilities' array") from None
    except (OSError, ValueError) as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc


def _npz_ids(root: Path) -> list[str]:
    if not root.is_dir():
        raise IoFailureError(f"{root} is not a directory")
    return sorted(p.name[:-4] for p in root.glob("*.npz"))


def cmd_ensemble(args) -> int:
    ts = _thresholds(args, args._config)
    prob_dirs = [Path(p) for p in args.prob_dirs]
    phases = read_phase_manifest(Path(args.phases)) if args.phases else {}
    ids = _npz_ids(prob_dirs[0])
    for d in prob_dirs[1:]:
        other = _npz_ids(d)
        if other != ids:
            diff = sorted(set(ids) ^ set(other))
            raise UsageError(f"{d}: case ids differ from {prob_dirs[0]}: {', '.join(diff)}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for cid in ids:
        probs = [load_probabilities(d / f"{cid}.npz") for d in prob_dirs]
        try:
            label = ensemble_predict(probs, phases.get(cid, Phase.POST), ts)
        except DimsMismatchError as exc:
            raise UsageError(f"case {cid}: {exc}") from None
        save_nifti(LabelVolume(label), out / f"{cid}.nii.gz")
    log.info("ensembled %d cases from %d models", len(ids), len(prob_dirs))
    return EXIT_OK


def cmd_postprocess(args) -> int:
    ts = _thresholds(args, args._config)
    src, out = Path(args.label_dir), Path(args.out_dir)
    phases = _phases_for(src, args.phases)
    for cid in list_case_ids(src):
        vol = load_nifti(label_file(src, cid), kind="label")
        label = apply_thresholds(vol.data, ts, phases.get(cid, Phase.POST))
        save_nifti(LabelVolume(label, vol.spacing, vol.header), out / f"{cid}.nii.gz")
    return EXIT_OK


def _read_matrix(path: str):
    try:
        return read_score_matrix(path)
    except OSError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_rank(args) -> int:
    matrix = _read_matrix(args.scores)
    try:
        table = rank_models(matrix)
    except ValueError as exc:
        raise UsageError(f"{args.scores}: {exc}") from None
    write_rank_table(table, args.out, args.format)
    return EXIT_OK


def cmd_ttest(args) -> int:
    a, b = _read_matrix(args.a), _read_matrix(args.b)
    try:
        cols, xs, ys = paired_columns(a, b, args.row_a, args.row_b)
        result = paired_t(xs, ys)
    except (ValueError, TumorAugError) as exc:
        raise UsageError(str(exc)) from None
    row = {"a": args.a, "b": args.b, "columns": " ".join(cols), **result.as_dict(),
           "significant": result.p_value < args.alpha}
    with open(args.out, "w", newline="") as fh:
        if args.format == "json":
            json.dump(row, fh, indent=2)
            fh.write("\n")
        else:
            writer = csv.DictWriter(fh, fieldnames=list(row))
            writer.writeheader()
            writer.writerow({**row, "t_statistic": f"{result.t_statistic:.4f}",
                             "p_value": f"{result.p_value:.4f}"})
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="JSON run configuration")
    p.add_argument("--seed", type=int, default=d(None), help=f"base seed (default {DEFAULT_SEED})")
    p.add_argument("--jobs", type=int, default=d(None), help="worker processes")
    p.add_argument("--format", choices=("csv", "json"), default=d(None), help="report format")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tumoraug", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        _add_globals(p, suppress=True)
        p.set_defaults(func=fn)
        return p

    p = add("phantom", cmd_phantom, "generate phantom cases from a JSON spec")
    p.add_argument("spec")
    p.add_argument("out_dir")

    p = add("augment", cmd_augment, "insert synthetic tumors into a case directory")
    p.add_argument("cases_dir")
    p.add_argument("pool_dir", help="case directory whose labels form the donor pool")
    p.add_argument("out_dir")
    p.add_argument("--preset", choices=("regular", "custom"))
    p.add_argument("--augment-config", help="JSON AugmentConfig (overrides --preset)")
    p.add_argument("--phases", help="phase manifest (default: <cases_dir>/phases.csv)")

    p = add("evaluate", cmd_evaluate, "score predictions against ground truth")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("out_report")
    p.add_argument("--phases", help="phase manifest (default: <gt_dir>/phases.csv)")
    p.add_argument("--tolerance", type=float, default=1.0, help="NSD tolerance in mm")
    p.add_argument("--dilation", type=int, default=3, help="lesion matching dilation")

    p = add("ensemble", cmd_ensemble, "average softmax outputs, post-process and threshold")
    p.add_argument("prob_dirs", nargs="+")
    p.add_argument("--phases", help="phase manifest CSV")
    p.add_argument("--thresholds", help="set0 | set1 | set2 | path to JSON")
    p.add_argument("--out", dest="out_dir", required=True)

    p = add("postprocess", cmd_postprocess, "apply lesion-size thresholds to label maps")
    p.add_argument("label_dir")
    p.add_argument("out_dir")
    p.add_argument("--phases")
    p.add_argument("--thresholds", help="set0 | set1 | set2 | path to JSON")

    p = add("rank", cmd_rank, "rank models per region (1 = best)")
    p.add_argument("scores")
    p.add_argument("out")

    p = add("ttest", cmd_ttest, "paired t-test between two score rows")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("out")
    p.add_argument("--row-a", help="row label in A (default: first row)")
    p.add_argument("--row-b", help="row label in B (default: first row)")
    p.add_argument("--alpha", type=float, default=0.05)
    return parser


def _resolve(args) -> None:
    config = _load_json(args.config) if args.config else {}
    if not isinstance(config, dict):
        raise UsageError(f"{args.config}: run config must be a JSON object")
    args._config = config
    if args.seed is None:
        args.seed = int(config.get("seed", DEFAULT_SEED))
    if args.jobs is None:
        args.jobs = int(config.get("jobs", 1))
    if args.format is None:
        args.format = config.get("format", "csv")
    if args.format not in ("csv", "json"):
        raise UsageError(f"format must be csv or json, got {args.format!r}")
    if args.seed < 0:
        raise UsageError("seed must be non-negative")


def main(argv: Iterable[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(list(argv) if argv is not None else None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _resolve(args)
        return args.func(args)
    except UsageError as exc:
        print(f"tumoraug {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IoFailureError, NiftiError, OSError) as exc:
        print(f"tumoraug {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TumorAugError, ValueError) as exc:
        # invalid input data detected inside the library (e.g. RC in a pre-treatment case)
        print(f"tumoraug {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
