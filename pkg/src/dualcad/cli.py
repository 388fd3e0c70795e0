"""Command-line entry point: ``dualcad <command> [options] [--key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .case import load_cases, save_case
from .errors import ConfigError, DualCadError
from .evaluation import evaluate_heatmap
from .io import load_volume, save_volume
from .phantom import generate_cohort
from .registration import align_case, displacement_error
from .runner import (
    RATIO_MEASURES,
    RECORD_FIELDS,
    ExperimentConfig,
    _write_json,
    read_records,
    render_tables,
    report_from_records,
    run_experiment,
    write_csv,
    write_sidecar,
)
from .training import FoldSplit, make_folds, train
from .unet import UNet, get_config, infer_volume

log = logging.getLogger("dualcad")


def _config(args):
    return ExperimentConfig.load(args.config, args.profile, args.overrides)


def cmd_phantom_generate(args):
    cfg = _config(args)
    n = args.n_cases if args.n_cases is not None else int(cfg.raw["data"]["n_cases"])
    seed = args.seed if args.seed is not None else cfg.seed
    per = args.cases_per_patient or int(cfg.raw["data"]["cases_per_patient"])
    out = Path(args.out)
    prov = cfg.provenance(phantom_seed=seed)
    for case in generate_cohort(seed, cfg.phantom_params, n, per):
        save_case(case, out / case.case_id, args.format)
        write_sidecar(out / case.case_id / "manifest.json", prov)
    _write_json(out / "phantom.json", {"seed": seed, "n_cases": n, "cases_per_patient": per, "params": cfg.phantom_params.to_dict()}, prov)
    print(f"wrote {n} cases to {out}")


def cmd_register(args):
    cfg = _config(args)
    opts = cfg.registration_options
    out = Path(args.out)
    rows = []
    for case in load_cases(args.data):
        aligned = align_case(case, opts)
        save_case(aligned, out / case.case_id, args.format)
        aligned.registration_trace.to_csv(out / case.case_id / "registration_trace.csv")
        err = displacement_error(aligned.registration, case.misalignment, case.grid) if case.misalignment is not None else None
        rows.append({"case_id": case.case_id, "reasons": "|".join(aligned.registration_trace.reasons), "displacement_error_vox": err})
        print(f"{case.case_id}: {aligned.registration_trace.convergence_reason}" + (f", error {err:.3f} voxel" if err is not None else ""))
    write_csv(out / "registration.csv", rows, ["case_id", "reasons", "displacement_error_vox"], cfg.provenance())


def _fold_from(args, cases, cfg):
    if args.folds:
        return FoldSplit.from_dict(json.loads(Path(args.folds).read_text()))
    tc = cfg.train_config
    return make_folds(cases, tc.folds, cfg.seed, tc.val_fraction)


def cmd_train(args):
    cfg = _config(args)
    tc = cfg.train_config
    if args.seed is not None:
        tc = type(tc).from_dict({**tc.to_dict(), "seed": args.seed})
    cases = load_cases(args.data)
    config = get_config(args.arm)
    if config.needs_prediag and not all(c.aligned for c in cases):
        raise ConfigError(f"arm {args.arm!r} needs aligned cases; run 'dualcad register' first")
    fold = None
    if args.fold is not None:
        fold = _fold_from(args, cases, cfg)
    out = Path(args.out)
    net, hist = train(cases, config, tc, fold, args.fold, progress=lambda e: log.info("epoch %d loss %.4f", e["epoch"], e["train_loss"]))
    prov = cfg.provenance(arm=args.arm, fold=args.fold, train_seed=tc.seed)
    ck = net.save(out / "model", extra={"provenance": prov})
    write_sidecar(ck.with_suffix(".npz"), prov)
    hist.to_csv(out / "history.csv")
    write_sidecar(out / "history.csv", prov)
    if fold is not None:
        _write_json(out / "folds.json", fold.to_dict(), prov)
    print(f"checkpoint {ck}; final train loss {hist.train_loss[-1]:.4f}")


def cmd_infer(args):
    cfg = _config(args)
    net = UNet.load(args.checkpoint)
    cases = load_cases(args.data)
    if args.cases:
        wanted = set(args.cases)
        cases = [c for c in cases if c.case_id in wanted]
    elif args.fold is not None:
        folds = FoldSplit.from_dict(json.loads(Path(args.folds or Path(args.checkpoint).parent / "folds.json").read_text()))
        test = set(folds.test(args.fold))
        cases = [c for c in cases if c.case_id in test]
    out = Path(args.out)
    prov = cfg.provenance(arm=net.config.name if net.config else None, checkpoint=str(args.checkpoint))
    for case in cases:
        heat = infer_volume(net, case)
        path = out / f"{case.case_id}.vol.json"
        save_volume(heat, path)
        write_sidecar(path, prov)
        if args.png:
            from .overlay import save_overlay

            save_overlay(case, heat, out / f"{case.case_id}.png", threshold=cfg.evaluation["threshold"])
    _write_json(out / "index.json", {"arm": prov["arm"], "fold": args.fold, "cases": [c.case_id for c in cases]}, prov)
    print(f"wrote {len(cases)} heat maps to {out}")


def cmd_evaluate(args):
    cfg = _config(args)
    ev = cfg.evaluation
    heat_dir, out = Path(args.heatmaps), Path(args.out)
    index = heat_dir / "index.json"
    meta = json.loads(index.read_text()) if index.exists() else {}
    arm = args.arm or meta.get("arm") or "arm"
    prov = cfg.provenance(arm=arm)
    by_id = {c.case_id: c for c in load_cases(args.data)}
    records = []
    for path in sorted(heat_dir.glob("*.vol.json")):
        cid = path.name[: -len(".vol.json")]
        if cid not in by_id:
            raise DualCadError(f"heat map {path.name} has no matching case in {args.data}")
        case = by_id[cid]
        r, m = evaluate_heatmap(load_volume(path), case.mask, ev["threshold"], ev["dilation_radius"], ev["connectivity"], cid)
        rec = {"arm": arm, "fold": meta.get("fold"), "case_id": cid, "patient_id": case.patient_id, **{k: getattr(m, k) for k in ("tp", "fn", "fp", "sensitivity", "ppv", "f1")}}
        records.append(rec)
        _write_json(out / "cases" / f"{cid}.json", {**rec, "match": r.to_dict()}, prov)
    write_csv(out / "metrics.csv", records, list(RECORD_FIELDS), prov)
    print(f"evaluated {len(records)} cases; metrics in {out / 'metrics.csv'}")


def _all_pairs(arms):
    return [(m, a, b) for i, a in enumerate(arms) for b in arms[i + 1 :] for m in ("FP",) + RATIO_MEASURES]


def cmd_stats(args):
    records = read_records(args.metrics)
    arms = sorted({r["arm"] for r in records})
    if len(arms) < 2:
        raise ConfigError(f"stats needs metrics for at least two arms, found {arms}")
    rep = report_from_records(records, seed=args.seed, resamples=args.resamples, family_size=args.family_size)
    if args.comparisons == "all-pairs" or (args.comparisons == "auto" and not rep.tests):
        rep = report_from_records(records, seed=args.seed, resamples=args.resamples, comparisons=_all_pairs(rep.arms), family_size=args.family_size)
    render_tables(rep, args.out)
    print(f"{len(rep.arms)} arms, {len(rep.tests)} tests; tables in {args.out}")


def cmd_run(args):
    overrides = list(args.overrides) + ([f"output.dir={json.dumps(args.out)}"] if args.out else [])
    cfg = ExperimentConfig.load(args.config, args.profile, overrides)
    rep = run_experiment(cfg)
    _print_table2(rep)
    for arm, err in rep.errors.items():
        print(f"arm {arm} failed: {err['type']}: {err['message']}", file=sys.stderr)
    return 1 if rep.errors else 0


def cmd_report(args):
    run = Path(args.run)
    cfg = ExperimentConfig(json.loads((run / "config.json").read_text()))
    rep = report_from_records(read_records([run / "per_case.csv"]), cfg)
    render_tables(rep, args.out or run, cfg.provenance())
    _print_table2(rep)


def _print_table2(rep):
    def cell(s):
        return "n/a" if s is None else f"{100 * s.median:5.1f} [{100 * s.ci95_low:5.1f}-{100 * s.ci95_high:5.1f}]"

    print(f"{'arm':<14} {'FP median':>9}  {'sensitivity %':<20} {'PPV %':<20} {'F1 %':<20}")
    for arm in rep.arms:
        s = rep.summaries[arm]
        fp = "n/a" if s["FP"] is None else f"{s['FP'].median:g}"
        print(f"{arm:<14} {fp:>9}  {cell(s['sensitivity']):<20} {cell(s['ppv']):<20} {cell(s['f1']):<20}")


def build_parser():
    p = argparse.ArgumentParser(prog="dualcad", description=__doc__)
    p.add_argument("--version", action="version", version=f"dualcad {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--profile", choices=["desk", "paper"])
        return sp

    ph = sub.add_parser("phantom", help="synthetic data")
    phs = ph.add_subparsers(dest="phantom_command", required=True)
    g = common(phs.add_parser("generate", help="write a phantom cohort"))
    g.add_argument("--out", required=True)
    g.add_argument("--n-cases", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--cases-per-patient", type=int)
    g.add_argument("--format", choices=["native", "nifti"], default="native")
    g.set_defaults(func=cmd_phantom_generate)

    r = common(sub.add_parser("register", help="align every prediag scan onto its diagnosis ceT1w"))
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--format", choices=["native", "nifti"], default="native")
    r.set_defaults(func=cmd_register)

    t = common(sub.add_parser("train", help="train one arm, optionally on one fold"))
    t.add_argument("--data", required=True)
    t.add_argument("--arm", required=True)
    t.add_argument("--fold", type=int)
    t.add_argument("--folds", help="folds.json to reuse instead of a fresh split")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    i = common(sub.add_parser("infer", help="write heat maps"))
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--cases", nargs="*")
    i.add_argument("--fold", type=int, help="restrict to this fold's test cases")
    i.add_argument("--folds", help="folds.json (defaults to the one next to the checkpoint)")
    i.add_argument("--png", action="store_true", help="also write PNG overlays")
    i.set_defaults(func=cmd_infer)

    e = common(sub.add_parser("evaluate", help="lesion-wise TP/FP/FN per case"))
    e.add_argument("--heatmaps", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--arm")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("stats", help="compare per-case metrics of two or more arms")
    s.add_argument("--metrics", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    s.add_argument("--resamples", type=int, default=10000)
    s.add_argument("--family-size", type=int, default=25)
    s.add_argument("--comparisons", choices=["auto", "reported", "all-pairs"], default="auto")
    s.set_defaults(func=cmd_stats, takes_overrides=False)

    rn = common(sub.add_parser("run", help="full experiment matrix"))
    rn.add_argument("--out")
    rn.set_defaults(func=cmd_run)

    rp = sub.add_parser("report", help="re-render tables of a finished run")
    rp.add_argument("--run", required=True)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report, takes_overrides=False)
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    bad = [x for x in extra if not (x.startswith("--") and "=" in x)]
    if bad or (extra and not getattr(args, "takes_overrides", True)):
        parser.error(f"unrecognised arguments: {' '.join(bad or extra)}")
    args.overrides = extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        rc = args.func(args)
    except DualCadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
