"""Experiment configuration, orchestration over arms and folds, and table rendering."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .case import load_cases
from .errors import ConfigError, DegenerateTestError, SummaryError
from .evaluation import evaluate_heatmap
from .io import save_volume
from .phantom import PhantomParams, generate_cohort
from .registration import RegistrationOptions, align_case, displacement_error
from .stats import TestResult, bonferroni_flags, summarize, wilcoxon_signed_rank
from .training import FoldSplit, TrainConfig, make_folds, train
from .unet import ARM_ORDER, get_config, infer_volume

log = logging.getLogger("dualcad")

COUNT_MEASURES = ("TP", "FN", "FP")
RATIO_MEASURES = ("sensitivity", "ppv", "f1")
MEASURE_LABELS = {"TP": "TP", "FN": "FN", "FP": "FP", "sensitivity": "Sensitivity", "ppv": "PPV", "f1": "F1"}
RECORD_FIELDS = ("arm", "fold", "case_id", "patient_id", "tp", "fn", "fp", "sensitivity", "ppv", "f1")

# measurement, arm 1, arm 2: the 25 reported comparisons
REPORTED_COMPARISONS = (
    ("FP", "dual_ce", "dual_all"),
    *((m, "dual_ce", "dual_all") for m in ("sensitivity", "ppv", "f1")),
    *((m, "dual_ce", "dual_FLAIR") for m in ("sensitivity", "ppv", "f1")),
    *((m, "dual_ce", "ce") for m in ("sensitivity", "ppv", "f1")),
    *((m, "dual_ce", "dual_ce+FLAIR") for m in ("sensitivity", "ppv", "f1")),
    *((m, "dual_ce", "ce+FLAIR") for m in ("sensitivity", "ppv", "f1")),
    *((m, "dual_all", "all") for m in ("sensitivity", "ppv", "f1")),
    *((m, "ce", "all") for m in ("sensitivity", "ppv", "f1")),
    *((m, "ce", "T1n_ce") for m in ("sensitivity", "ppv", "f1")),
)

DEFAULTS = {
    "seed": 0,
    "arms": ["ce", "dual_ce"],
    "data": {"path": None, "n_cases": 10, "cases_per_patient": 1, "phantom": json.loads(json.dumps(PhantomParams().to_dict()))},
    "split": {"mode": "cv", "holdout_cases": 0},
    "train": TrainConfig().to_dict(),
    "registration": RegistrationOptions().to_dict(),
    "evaluation": {"threshold": 0.5, "dilation_radius": 6, "connectivity": 26},
    "stats": {"family_size": 25, "comparisons": None, "bootstrap_resamples": 10000},
    "output": {"dir": "runs/experiment", "heatmaps": False, "overlays": False, "checkpoints": True},
}

PROFILES = {
    "desk": {
        "data": {"phantom": {"dims": [64, 64, 32], "spacing": [3.0, 3.0, 4.0]}},
        "train": {"epochs": 20, "base_features": 8, "depth": 4},
        # one 3 mm voxel keeps the physical fusion range of six 0.5 mm voxels
        "evaluation": {"dilation_radius": 1},
    },
    "paper": {
        "data": {"phantom": {"dims": [512, 512, 32], "spacing": [0.45, 0.45, 4.0]}},
        "train": {"epochs": 70, "base_features": 16, "depth": 4},
        "evaluation": {"dilation_radius": 6},
    },
}


# -- configuration ----------------------------------------------------------------


def deep_merge(base, update):
    out = copy.deepcopy(base)
    for k, v in (update or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _leaf_paths(d, prefix=()):
    for k, v in d.items():
        if isinstance(v, dict) and v:
            yield from _leaf_paths(v, prefix + (k,))
        yield prefix + (k,)


def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg, overrides):
    """Apply ``key=value`` strings; keys are dotted paths or unambiguous leaf names."""
    cfg = copy.deepcopy(cfg)
    paths = list(_leaf_paths(cfg))
    for item in overrides:
        item = item[2:] if item.startswith("--") else item
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        path = tuple(key.split("."))
        if path not in paths:
            matches = [p for p in paths if p[-1] == key]
            if len(matches) != 1:
                hint = "unknown" if not matches else "ambiguous (" + ", ".join(".".join(m) for m in matches) + ")"
                raise ConfigError(f"override key {key!r} is {hint}")
            path = matches[0]
        node = cfg
        for k in path[:-1]:
            node = node[k]
        node[path[-1]] = parse_value(text)
    return cfg


@dataclass
class ExperimentConfig:
    """Resolved experiment settings; ``raw`` is the merged JSON-compatible dict."""

    raw: dict

    @classmethod
    def build(cls, config=None, profile=None, overrides=()):
        if profile is not None and profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
        raw = deep_merge(DEFAULTS, PROFILES.get(profile, {}))
        raw = deep_merge(raw, config or {})
        unknown = set(config or {}) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        raw = apply_overrides(raw, overrides)
        if profile:
            raw["profile"] = profile
        out = cls(raw)
        out.validate()
        return out

    @classmethod
    def load(cls, path=None, profile=None, overrides=()):
        config = json.loads(Path(path).read_text()) if path else None
        if config:
            profile = profile or config.pop("profile", None)
        return cls.build(config, profile, overrides)

    # typed views
    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def arms(self):
        return [a for a in ARM_ORDER if a in self.raw["arms"]]

    @property
    def train_config(self):
        return TrainConfig.from_dict(self.raw["train"])

    @property
    def registration_options(self):
        d = dict(self.raw["registration"])
        d["seed"] = self.seed
        return RegistrationOptions(**d)

    @property
    def phantom_params(self):
        return PhantomParams(**self.raw["data"]["phantom"])

    @property
    def evaluation(self):
        return self.raw["evaluation"]

    @property
    def output_dir(self):
        return Path(self.raw["output"]["dir"])

    def validate(self):
        arms = self.raw["arms"]
        if not isinstance(arms, list) or not arms:
            raise ConfigError("arms must be a non-empty list")
        for a in arms:
            get_config(a)
        if len(set(arms)) != len(arms):
            raise ConfigError("arms must not repeat")
        data = self.raw["data"]
        if data["path"] is not None and not Path(data["path"]).is_dir():
            raise ConfigError(f"dataset directory {data['path']} does not exist")
        if data["path"] is None:
            self.phantom_params
            if int(data["n_cases"]) < 1:
                raise ConfigError("n_cases must be at least 1")
        self.train_config
        self.registration_options
        ev = self.evaluation
        if not 0 <= ev["threshold"] < 1 or ev["dilation_radius"] < 0 or ev["connectivity"] not in (6, 26):
            raise ConfigError(f"invalid evaluation settings {ev}")
        mode = self.raw["split"]["mode"]
        if mode not in ("cv", "holdout"):
            raise ConfigError(f"split mode must be 'cv' or 'holdout', got {mode!r}")
        if mode == "holdout" and int(self.raw["split"]["holdout_cases"]) < 1:
            raise ConfigError("holdout split needs holdout_cases >= 1")

    def hash(self):
        """Digest of every setting that affects results (the output location is excluded)."""
        d = copy.deepcopy(self.raw)
        d.pop("output", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def provenance(self, **extra):
        return {"config_hash": self.hash(), "master_seed": self.seed, "version": __version__, **extra}


def derived_seed(master, *keys):
    return int(np.random.SeedSequence([master, *keys]).generate_state(1)[0])


def write_sidecar(path, provenance):
    path = Path(path)
    side = path.with_name(path.name + ".provenance.json")
    side.write_text(json.dumps({"file": path.name, **provenance}, indent=1, sort_keys=True) + "\n")
    return side


def _write_json(path, obj, provenance=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    if provenance is not None:
        write_sidecar(path, provenance)


def _fmt(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".10g")
    return str(v)


def write_csv(path, rows, fieldnames, provenance=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fieldnames)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in fieldnames])
    if provenance is not None:
        write_sidecar(path, provenance)
    return path


# -- data -----------------------------------------------------------------------------


def load_dataset(cfg):
    data = cfg.raw["data"]
    if data["path"] is not None:
        return load_cases(data["path"])
    return generate_cohort(cfg.seed, cfg.phantom_params, int(data["n_cases"]), int(data["cases_per_patient"]))


def make_split(cases, cfg):
    """Cross-validation folds, or a single patient-disjoint holdout encoded as fold 0."""
    tc = cfg.train_config
    split = cfg.raw["split"]
    if split["mode"] == "cv":
        return make_folds(cases, tc.folds, cfg.seed, tc.val_fraction), list(range(tc.folds))
    n_test = int(split["holdout_cases"])
    by_patient = {}
    for c in cases:
        by_patient.setdefault(c.patient_id, []).append(c.case_id)
    names = sorted(by_patient)
    rng = np.random.default_rng([cfg.seed, 0])
    names = [names[j] for j in rng.permutation(len(names))]
    assignments, taken = {}, 0
    for p in names:
        fold = 0 if taken < n_test else 1
        for c in by_patient[p]:
            assignments[c] = fold
        taken += len(by_patient[p]) if fold == 0 else 0
    if taken >= len(cases):
        raise ConfigError(f"holdout of {n_test} cases leaves nothing to train on")
    ordered = {c.case_id: assignments[c.case_id] for c in cases}
    return FoldSplit(ordered, {c.case_id: c.patient_id for c in cases}, 2, cfg.seed, tc.val_fraction), [0]


# -- experiment -----------------------------------------------------------------------


@dataclass
class ExperimentReport:
    arms: list  # completed arms in table order
    records: list  # per-case dicts with RECORD_FIELDS
    summaries: dict = field(default_factory=dict)  # arm -> measure -> MetricSummary
    tests: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)  # arm -> structured error
    warnings: list = field(default_factory=list)

    def arm_records(self, arm):
        return [r for r in self.records if r["arm"] == arm]


def _measure_value(rec, measure):
    key = measure.lower() if measure in COUNT_MEASURES else measure
    return rec[key]


def compute_summaries(records, arms, seed=0, resamples=10000):
    out = {}
    for arm in arms:
        rows = [r for r in records if r["arm"] == arm]
        out[arm] = {}
        for m in COUNT_MEASURES + RATIO_MEASURES:
            try:
                out[arm][m] = summarize([_measure_value(r, m) for r in rows], seed, resamples)
            except SummaryError:
                out[arm][m] = None
    return out


def compute_tests(records, arms, comparisons=None, family_size=25):
    """Paired Wilcoxon tests over cases present with defined values in both arms."""
    comparisons = [tuple(c) for c in (comparisons if comparisons is not None else REPORTED_COMPARISONS)]
    done = set(arms)
    results, notes = [], []
    by_arm = {a: {r["case_id"]: r for r in records if r["arm"] == a} for a in done}
    for measure, a, b in comparisons:
        if a not in done or b not in done:
            continue
        label = f"{MEASURE_LABELS[measure]} {a} vs {b}"
        common = [c for c in sorted(by_arm[a]) if c in by_arm[b]]
        pairs = [(_measure_value(by_arm[a][c], measure), _measure_value(by_arm[b][c], measure)) for c in common]
        pairs = [(x, y) for x, y in pairs if x is not None and y is not None]
        if not pairs:
            notes.append(f"{label}: no case with defined values in both arms")
            continue
        x, y = (np.array(v, dtype=float) for v in zip(*pairs))
        try:
            results.append(wilcoxon_signed_rank(x, y, label, measurement=MEASURE_LABELS[measure], arm_a=a, arm_b=b))
        except DegenerateTestError:
            results.append(TestResult(label, float("nan"), 0, float("nan"), "degenerate", measurement=MEASURE_LABELS[measure], arm_a=a, arm_b=b))
            notes.append(f"{label}: all paired differences are zero")
    fam = family_size if family_size else max(1, len(results))
    return bonferroni_flags(results, fam), notes


def _register_all(cases, cfg, out_dir, prov):
    opts = cfg.registration_options
    aligned, rows, timings = [], [], {}
    for case in cases:
        t0 = time.perf_counter()
        a = align_case(case, opts)
        timings[case.case_id] = time.perf_counter() - t0
        trace = a.registration_trace
        row = {
            "case_id": case.case_id,
            "final_metric": trace.rows[-1]["metric"] if trace and trace.rows else None,
            "iterations": len(trace) if trace else 0,
            "reasons": "|".join(trace.reasons) if trace else "",
            "displacement_error_vox": displacement_error(a.registration, case.misalignment, case.grid) if case.misalignment is not None else None,
        }
        rows.append(row)
        aligned.append(a)
        log.info("registered %s (%.1f s)", case.case_id, timings[case.case_id])
    fields = ["case_id", "final_metric", "iterations", "reasons", "displacement_error_vox"]
    write_csv(out_dir / "registration" / "registration.csv", rows, fields, prov)
    return aligned, timings


def _run_arm(arm, cases, split, folds, cfg, out_dir, prov):
    config = get_config(arm)
    tc = cfg.train_config
    ev = cfg.evaluation
    arm_dir = out_dir / "arms" / arm
    stages = (["register"] if config.needs_prediag else []) + ["split", "train", "infer", "evaluate"]
    by_id = {c.case_id: c for c in cases}
    records, histories = [], {}
    for i in folds:
        fold_tc = TrainConfig.from_dict({**tc.to_dict(), "seed": derived_seed(cfg.seed, 1, i)})
        net, hist = train(cases, config, fold_tc, split, i)
        histories[i] = hist
        fold_dir = arm_dir / f"fold{i}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        hist_rows = [{k: e[k] for k in ("epoch", "train_loss", "val_loss")} for e in hist.epochs]
        write_csv(fold_dir / "history.csv", hist_rows, ["epoch", "train_loss", "val_loss"], prov)
        if cfg.raw["output"]["checkpoints"]:
            ck = net.save(fold_dir / "model", extra={"provenance": {**prov, "arm": arm, "fold": i, "train_seed": fold_tc.seed}})
            write_sidecar(ck.with_suffix(".npz"), prov)
        for cid in split.test(i):
            case = by_id[cid]
            heat = infer_volume(net, case)
            r, m = evaluate_heatmap(heat, case.mask, ev["threshold"], ev["dilation_radius"], ev["connectivity"], cid)
            rec = {"arm": arm, "fold": i, "case_id": cid, "patient_id": case.patient_id, **{k: getattr(m, k) for k in ("tp", "fn", "fp", "sensitivity", "ppv", "f1")}}
            records.append(rec)
            _write_json(arm_dir / "cases" / f"{cid}.json", {**rec, "match": r.to_dict()}, prov)
            if cfg.raw["output"]["heatmaps"]:
                path = arm_dir / "heatmaps" / f"{cid}.vol.json"
                save_volume(heat, path)
                write_sidecar(path, prov)
            if cfg.raw["output"]["overlays"]:
                from .overlay import save_overlay

                save_overlay(case, heat, arm_dir / "overlays" / f"{cid}.png", threshold=ev["threshold"])
    arm_prov = {
        **prov,
        "arm": arm,
        "slots": [list(s) for s in config.slots],
        "stages": stages,
        "folds": folds,
        "train_seeds": {str(i): derived_seed(cfg.seed, 1, i) for i in folds},
        "registration_seed": cfg.seed if config.needs_prediag else None,
    }
    _write_json(arm_dir / "provenance.json", arm_prov)
    return records, histories


def run_experiment(cfg, progress=None):
    """Register (dual arms only), split, train per fold, infer, evaluate and aggregate."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = ExperimentConfig.build(cfg)
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    prov = cfg.provenance()
    _write_json(out_dir / "config.json", cfg.raw, prov)
    cases = load_dataset(cfg)
    split, folds = make_split(cases, cfg)
    _write_json(out_dir / "folds.json", split.to_dict(), prov)
    timings = {}
    aligned = None
    if any(get_config(a).needs_prediag for a in cfg.arms):
        aligned, timings["registration"] = _register_all(cases, cfg, out_dir, prov)
    records, errors = [], {}
    done = []
    for arm in cfg.arms:
        t0 = time.perf_counter()
        arm_cases = aligned if get_config(arm).needs_prediag else cases
        try:
            recs, _ = _run_arm(arm, arm_cases, split, folds, cfg, out_dir, prov)
        except Exception as exc:  # one failing arm must not sink the others
            errors[arm] = {"arm": arm, "type": type(exc).__name__, "message": str(exc)}
            _write_json(out_dir / "arms" / arm / "error.json", errors[arm], prov)
            log.error("arm %s failed: %s", arm, exc)
            continue
        records.extend(recs)
        done.append(arm)
        timings[arm] = time.perf_counter() - t0
        if progress:
            progress(arm)
    records.sort(key=lambda r: (ARM_ORDER.index(r["arm"]), r["case_id"]))
    report = build_report(records, done, cfg)
    report.errors = errors
    report.warnings += [f"arm {a} failed: {e['message']}" for a, e in errors.items()]
    (out_dir / "timings.json").write_text(json.dumps(timings, indent=1, sort_keys=True) + "\n")
    render_tables(report, out_dir, prov)
    return report


def build_report(records, arms, cfg):
    st = cfg.raw["stats"]
    summaries = compute_summaries(records, arms, cfg.seed, int(st["bootstrap_resamples"]))
    tests, notes = compute_tests(records, arms, st["comparisons"], st["family_size"])
    return ExperimentReport(list(arms), records, summaries, tests, {}, notes)


# -- tables ---------------------------------------------------------------------------


SUMMARY_KEYS = ("mean", "sd", "median", "ci95_low", "ci95_high", "q25", "q75")
TABLE1_FIELDS = ["arm", "n_cases"] + [f"{m}_{k}" for m in COUNT_MEASURES for k in SUMMARY_KEYS]
TABLE2_FIELDS = ["arm"] + [f"{m}_{k}" for m in RATIO_MEASURES for k in ("n", "n_excluded", "median", "ci95_low", "ci95_high", "q25", "q75", "mean", "sd")]
TESTS_FIELDS = ["measurement", "arm_1", "arm_2", "n", "W", "p_uncorrected", "method", "significant", "highly_significant"]


def table_rows(report):
    t1, t2 = [], []
    for arm in report.arms:
        s = report.summaries[arm]
        row = {"arm": arm, "n_cases": len(report.arm_records(arm))}
        for m in COUNT_MEASURES:
            for k in SUMMARY_KEYS:
                row[f"{m}_{k}"] = getattr(s[m], k) if s[m] else None
        t1.append(row)
        row = {"arm": arm}
        for m in RATIO_MEASURES:
            sm = s[m]
            row[f"{m}_n"] = sm.n if sm else 0
            row[f"{m}_n_excluded"] = sm.n_excluded if sm else len(report.arm_records(arm))
            for k in ("median", "ci95_low", "ci95_high", "q25", "q75", "mean", "sd"):
                row[f"{m}_{k}"] = 100.0 * getattr(sm, k) if sm else None  # percent
        t2.append(row)
    tests = [
        {
            "measurement": t.measurement, "arm_1": t.arm_a, "arm_2": t.arm_b, "n": t.n, "W": t.w,
            "p_uncorrected": t.p, "method": t.method, "significant": t.significant, "highly_significant": t.highly_significant,
        }
        for t in report.tests
    ]
    return t1, t2, tests


def render_tables(report, out_dir, provenance=None):
    """Write per_case.csv, table1.csv, table2.csv and tests.csv; returns written paths."""
    out_dir = Path(out_dir)
    if not report.arms:
        msg = "no completed arms: no tables written"
        warnings.warn(msg)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report_warnings.txt").write_text(msg + "\n" + "".join(w + "\n" for w in report.warnings))
        return []
    t1, t2, tests = table_rows(report)
    written = [
        write_csv(out_dir / "per_case.csv", report.records, list(RECORD_FIELDS), provenance),
        write_csv(out_dir / "table1.csv", t1, TABLE1_FIELDS, provenance),
        write_csv(out_dir / "table2.csv", t2, TABLE2_FIELDS, provenance),
        write_csv(out_dir / "tests.csv", tests, TESTS_FIELDS, provenance),
    ]
    if report.warnings:
        warnings.warn(f"partial report: {len(report.warnings)} warning(s), see report_warnings.txt")
        (out_dir / "report_warnings.txt").write_text("".join(w + "\n" for w in report.warnings))
        written.append(out_dir / "report_warnings.txt")
    return written


def read_records(paths):
    """Per-case rows from one or more per_case CSV files."""
    records = []
    for p in paths:
        with open(p, newline="") as fh:
            for row in csv.DictReader(fh):
                rec = {"arm": row["arm"], "fold": int(row["fold"]) if row.get("fold") else None, "case_id": row["case_id"], "patient_id": row.get("patient_id", "")}
                for k in ("tp", "fn", "fp"):
                    rec[k] = int(row[k])
                for k in RATIO_MEASURES:
                    rec[k] = float(row[k]) if row[k] != "" else None
                records.append(rec)
    return records


def report_from_records(records, cfg=None, seed=0, resamples=10000, comparisons=None, family_size=25):
    """Rebuild summaries and tests from per-case rows."""
    if cfg is not None:
        return build_report(records, [a for a in ARM_ORDER if any(r["arm"] == a for r in records)], cfg)
    arms = [a for a in ARM_ORDER if any(r["arm"] == a for r in records)]
    arms += sorted({r["arm"] for r in records} - set(arms))
    summaries = compute_summaries(records, arms, seed, resamples)
    tests, notes = compute_tests(records, arms, comparisons, family_size)
    return ExperimentReport(arms, records, summaries, tests, {}, notes)
