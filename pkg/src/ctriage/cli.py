"""``ctriage`` command: gen, train, infer, eval, literary, report and run.

Every subcommand accepts ``--config`` (YAML), ``--seed``, ``--out`` and
``--taxonomy``; flags override config keys. ``CTRIAGE_THREADS`` caps the
BLAS thread pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import pipeline as pl
from .aggregate import NetworkScorer, StudyVerdict
from .config import SPLITS, RunConfig, load_config, thread_count
from .metrics import literary_rate
from .net.model import Checkpoint
from .net.train import write_log
from .phantom import PhantomSpec, generate_corpus

log = logging.getLogger("ctriage")


class CliError(RuntimeError):
    """A failure to report as one line on stderr with exit status 1."""


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _prevalence(text):
    out = {}
    for item in filter(None, text.split(",")):
        name, _, value = item.partition("=")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected trait=prob, got {item!r}") from None
    return out


def _config(args, **extra) -> RunConfig:
    overrides = {"seed": args.seed, "taxonomy": args.taxonomy, "out": args.out, **extra}
    try:
        return load_config(args.config, overrides)
    except (OSError, ValueError, TypeError) as exc:
        raise CliError(f"bad configuration: {exc}") from None


def _writable_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory not writable: {path} ({exc})") from None
    return path


# ------------------------------------------------------------------ gen

def gen_corpus(cfg: RunConfig, n, seed, out, prevalence=None) -> dict:
    tax = cfg.load_taxonomy()
    out = _writable_dir(out)
    spec = PhantomSpec(seed=seed, slice_size=cfg.slice_size, n_slices=cfg.n_slices)
    studies, manifest = generate_corpus(spec, n, tax, target_prevalence=prevalence)
    pl.write_corpus(studies, manifest, out)
    counts = np.sum([s.study_labels for s in studies], axis=0)
    return dict(zip(tax.names, (int(c) for c in counts)))


def cmd_gen(args):
    cfg = _config(args)
    n = args.n if args.n is not None else cfg.n_train
    counts = gen_corpus(cfg, n, cfg.seed, args.out or Path(cfg.out) / "corpus", args.prevalence)
    print(f"generated {n} studies")
    for name, c in counts.items():
        print(f"  {name:28s} {c:6d}")


# ------------------------------------------------------------------ train

def _member_dir(models, m) -> Path:
    return Path(models) / f"member_{m:02d}"


def train_models(cfg: RunConfig, train_dir, val_dir, out, resume=False):
    tax = cfg.load_taxonomy()
    out = _writable_dir(out)
    train = pl.load_corpus(train_dir, strict=True)
    val = pl.load_corpus(val_dir, strict=True)
    pl.check_disjoint({"train": [r["study_uid"] for r in train.records],
                       "val": [r["study_uid"] for r in val.records]})
    X, Y = pl.slice_arrays(zip(train.volumes, train.records))
    Xv, Yv = pl.slice_arrays(zip(val.volumes, val.records))
    starts = {}
    if resume:
        for m in range(cfg.ensemble_size):
            path = _member_dir(out, m) / "last.ckpt"
            if path.exists():
                starts[m] = Checkpoint.load(path, tax.hash)
                log.info("member %d resumes after epoch %d", m, starts[m].epoch)

    def on_epoch(m, ckpt):
        d = _member_dir(out, m)
        d.mkdir(parents=True, exist_ok=True)
        ckpt.save(d / "last.ckpt")
        write_log(ckpt.meta.get("history", []), d / "log.csv")

    members = pl.train_ensemble(cfg, tax, X, Y, Xv, Yv, resume=starts, on_epoch=on_epoch)
    for m, est in enumerate(members):
        d = _member_dir(out, m)
        d.mkdir(parents=True, exist_ok=True)
        est.checkpoint_.save(d / "best.ckpt")
        write_log(est.history_, d / "log.csv")
    cfg.dump(out / "config.yaml")
    return members


def cmd_train(args):
    cfg = _config(args, ensemble_size=args.ensemble_size, **{"train.epochs": args.epochs})
    out = args.out or Path(cfg.out) / "models"
    members = train_models(cfg, args.train, args.val, out, resume=args.resume)
    print(f"trained {len(members)} member(s) into {out}")


# ------------------------------------------------------------------ infer

def load_members(models, tax):
    paths = sorted(Path(models).glob("member_*/best.ckpt"))
    if not paths:
        raise CliError(f"no checkpoints under {models}")
    return [NetworkScorer(c.network(), c.taxonomy_hash)
            for c in (Checkpoint.load(p, tax.hash) for p in paths)]


def infer(cfg: RunConfig, corpus, models, out, calib=None, threshold=None) -> dict:
    tax = cfg.load_taxonomy()
    out = _writable_dir(out)
    members = load_members(models, tax)
    if threshold is not None:
        thresholds = {f"tau{threshold:g}": float(threshold)}
    else:
        if calib is None:
            raise CliError("infer needs --calib or --threshold")
        cal = pl.load_corpus(calib)
        if not cal.volumes:
            raise CliError("calibration corpus has no valid studies")
        cal_scores = pl.study_scores(members, cal.volumes, cfg.top_m)
        thresholds = pl.calibrate(members, tax, cal_scores, cfg.target_coverages, cfg.top_m)
    data = pl.load_corpus(corpus)
    if not data.volumes:
        raise CliError("zero valid studies in corpus")
    scores = pl.study_scores(members, data.volumes, cfg.top_m)
    uids = [v.study_uid for v in data.volumes]
    for op, tau in thresholds.items():
        verdicts = pl.make_verdicts(scores, uids, tau, tax)
        with open(out / f"verdicts_{op}.jsonl", "w", encoding="utf-8") as fh:
            for v in verdicts:
                fh.write(v.to_json(tax.names) + "\n")
    with open(out / "thresholds.json", "w", encoding="utf-8") as fh:
        json.dump({op: repr(t) for op, t in thresholds.items()}, fh, indent=1, sort_keys=True)
    summary = {"n_studies": len(uids), "excluded_files": data.excluded_files,
               "excluded_studies": data.excluded_studies}
    with open(out / "exclusions.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return {**summary, "thresholds": thresholds}


def cmd_infer(args):
    cfg = _config(args)
    out = args.out or Path(cfg.out) / "infer"
    s = infer(cfg, args.corpus, args.models, out, args.calib, args.threshold)
    print(f"scored {s['n_studies']} studies; excluded files: {s['excluded_files']}; "
          f"excluded studies: {len(s['excluded_studies'])}")
    for op, tau in s["thresholds"].items():
        print(f"  {op}: threshold {tau:.6g}")


# ------------------------------------------------------------------ eval

def read_verdicts(directory) -> dict:
    out = {}
    for path in sorted(Path(directory).glob("verdicts_*.jsonl")):
        op = path.stem[len("verdicts_"):]
        with open(path, encoding="utf-8") as fh:
            out[op] = [StudyVerdict.from_json(line) for line in fh if line.strip()]
    if not out:
        raise CliError(f"no verdicts_*.jsonl files in {directory}")
    return out


def _op_order(op):
    try:
        return (0, -float(op[3:])) if op.startswith("cov") else (1, op)
    except ValueError:
        return (1, op)


def evaluate_dir(cfg: RunConfig, verdict_dir, manifest, out):
    from .phantom import read_manifest

    tax = cfg.load_taxonomy()
    out = _writable_dir(out)
    verdicts = read_verdicts(verdict_dir)
    verdicts = {op: verdicts[op] for op in sorted(verdicts, key=_op_order)}
    truth = {r["study_uid"]: r["labels"] for r in read_manifest(manifest)}
    try:
        result = pl.evaluate(verdicts, truth, tax, cfg.n_bootstrap, cfg.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    pl.write_eval_outputs(result, out, seed=cfg.seed)
    return result


def cmd_eval(args):
    cfg = _config(args)
    out = args.out or Path(cfg.out) / "eval"
    result = evaluate_dir(cfg, args.verdicts, args.manifest, out)
    _print_summary(result)


def _print_summary(result):
    for row in result.rows:
        if row["metric"] in ("auc", "coverage", "csmr", "literary_csmr_pct") and \
                row["trait_or_ALL"] == pl.COMPOSITE:
            v = row["value"]
            shown = "undefined" if v is None else f"{v:.4f}"
            print(f"  {row['metric']:18s} {row['operating_point']:12s} {shown}")


# ------------------------------------------------------------------ literary / report

def cmd_literary(args):
    overall, csmr = literary_rate(miss_fraction=args.miss_fraction) if args.miss_fraction is not None \
        else literary_rate()
    print(f"overall error rate: {100 * overall:.2f}%")
    print(f"significant miss rate: {100 * csmr:.2f}%")


def bundle_report(run_dir, out=None) -> Path:
    run_dir = Path(run_dir)
    eval_dir = run_dir / "eval"
    if not (eval_dir / "metrics.csv").exists():
        raise CliError(f"no evaluation outputs under {eval_dir}")
    out = _writable_dir(out or run_dir / "report")
    for path in sorted(eval_dir.iterdir()):
        if path.is_file():
            shutil.copyfile(path, out / path.name)
    for extra in ("infer/thresholds.json", "infer/exclusions.json", "models/config.yaml"):
        if (run_dir / extra).exists():
            shutil.copyfile(run_dir / extra, out / Path(extra).name)
    for log_path in sorted((run_dir / "models").glob("member_*/log.csv")):
        shutil.copyfile(log_path, out / f"train_log_{log_path.parent.name}.csv")
    lines = ["# Desk trial report", "", "| metric | trait | operating point | value | CI |",
             "|---|---|---|---|---|"]
    with open(out / "metrics.csv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            metric, trait, op, value, lo, hi = line.rstrip("\n").split(",")
            ci = f"[{lo}, {hi}]" if lo else ""
            lines.append(f"| {metric} | {trait} | {op} | {value} | {ci} |")
    (out / "summary.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def cmd_report(args):
    cfg = _config(args)
    run_dir = args.run or cfg.out
    out = bundle_report(run_dir, args.out)
    print(f"report written to {out}")


# ------------------------------------------------------------------ run

def run_all(cfg: RunConfig, out=None) -> Path:
    out = _writable_dir(out or cfg.out)
    tax = cfg.load_taxonomy()
    corpora = {}
    for split in SPLITS:
        studies, manifest = pl.make_split(cfg, split, tax)
        corpora[split] = pl.write_corpus(studies, manifest, out / "corpus" / split)
    pl.check_disjoint({s: [r["study_uid"] for r in pl.read_manifest(d / "manifest.jsonl")]
                       for s, d in corpora.items()})
    train_models(cfg, corpora["train"], corpora["val"], out / "models")
    infer(cfg, corpora["test"], out / "models", out / "infer", calib=corpora["calib"])
    evaluate_dir(cfg, out / "infer", corpora["test"] / "manifest.jsonl", out / "eval")
    bundle_report(out)
    cfg.dump(out / "config.yaml")
    return out


def cmd_run(args):
    cfg = _config(args, ensemble_size=args.ensemble_size, **{"train.epochs": args.epochs})
    out = run_all(cfg, args.out)
    print(f"run complete: {out}")
    _print_summary_from(out / "eval")


def _print_summary_from(eval_dir):
    print((Path(eval_dir) / "metrics.csv").read_text(encoding="utf-8"), end="")


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="run seed (overrides config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--taxonomy", help="taxonomy CSV (default: built-in 12 traits)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="ctriage", description="Desk-scale CT head triage pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write a phantom corpus")
    g.add_argument("--n", type=_positive_int, help="number of studies")
    g.add_argument("--prevalence", type=_prevalence, help="oversample traits, e.g. ich=0.3,mass=0.3")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train an ensemble")
    t.add_argument("--train", required=True, help="training corpus directory")
    t.add_argument("--val", required=True, help="validation corpus directory")
    t.add_argument("--ensemble-size", type=_positive_int)
    t.add_argument("--epochs", type=_positive_int)
    t.add_argument("--resume", action="store_true", help="continue from each member's last.ckpt")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="score a corpus and emit verdicts")
    i.add_argument("--corpus", required=True)
    i.add_argument("--models", required=True)
    grp = i.add_mutually_exclusive_group(required=True)
    grp.add_argument("--calib", help="calibration corpus; one verdict file per target coverage")
    grp.add_argument("--threshold", type=float, help="fixed confidence threshold")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="metrics, ROC, risk-coverage, plots")
    e.add_argument("--verdicts", required=True, help="directory holding verdicts_*.jsonl")
    e.add_argument("--manifest", required=True, help="ground-truth manifest.jsonl")
    e.set_defaults(func=cmd_eval)

    lit = sub.add_parser("literary", parents=[common], help="reader error rate from published studies")
    lit.add_argument("--miss-fraction", type=float)
    lit.set_defaults(func=cmd_literary)

    r = sub.add_parser("report", parents=[common], help="bundle evaluation outputs")
    r.add_argument("--run", help="run directory (default: config out)")
    r.set_defaults(func=cmd_report)

    a = sub.add_parser("run", parents=[common], help="gen, train, infer, eval and report")
    a.add_argument("--ensemble-size", type=_positive_int)
    a.add_argument("--epochs", type=_positive_int)
    a.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        n = thread_count()
    except ValueError as exc:
        parser.error(str(exc))
    try:
        with threadpool_limits(n) if n else nullcontext():
            args.func(args)
    except CliError as exc:
        print(f"ctriage {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
