"""Command-line entry point.

    cfcd gen      --config spec.json --out data/
    cfcd train    --config train.yaml --dataset data/database.jsonl --out run/
    cfcd eval     --checkpoint run/final.bin --dataset data/database.jsonl \
                  --queries data/queries.jsonl --benchmark data/benchmark_hard.json --out run/
    cfcd diagnose --checkpoint run/final.bin --dataset data/database.jsonl --log run/steps.csv --out run/
    cfcd compare  --dataset ... --queries ... --benchmark ... --out cmp/

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, missing
input files, invalid spec or config).
"""

import argparse
import csv
import logging
import os
import sys

import yaml

from . import evaluate as ev
from .data import SyntheticSpec, generate, read_dataset, read_spec, write_dataset, write_spec
from .errors import CFCDError, ConfigError, SpecError
from .model import load_checkpoint
from .plots import histogram_svg, lines_svg
from .trainer import TrainConfig, TrainLog, train

log = logging.getLogger("cfcd")

ABLATIONS = ("no_matching", "no_hns", "fixed_arcface")
SCALE_SETS = {"1": ev.SCALES_1, "3": ev.SCALES_3, "5": ev.SCALES_5}
COMPARE_RHOS = (0.01, 0.02, 0.03, 0.04, 0.05)


class UsageError(Exception):
    pass


def _need_file(path, what):
    if path is None or not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def parse_scales(text):
    if text in SCALE_SETS:
        return SCALE_SETS[text]
    try:
        scales = tuple(float(s) for s in text.split(","))
    except ValueError:
        raise UsageError(f"--scales takes 1, 3, 5 or a comma list of positive numbers, got {text!r}")
    if not scales or min(scales) <= 0:
        raise UsageError(f"scales must be positive, got {text!r}")
    return scales


def _load_config(args):
    if args.config:
        cfg = TrainConfig.load(_need_file(args.config, "config file"))
    else:
        cfg = TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    for flag in args.ablation or ():
        setattr(cfg, flag, True)
    return cfg.check()


def _eval_inputs(args):
    db = read_dataset(_need_file(args.dataset, "dataset"))
    queries = read_dataset(_need_file(args.queries, "queries")) if args.queries else db
    benches = [ev.Benchmark.load(_need_file(p, "benchmark")) for p in args.benchmark or ()]
    return db, queries, benches


# --- commands ---------------------------------------------------------------

def cmd_gen(args):
    spec = read_spec(_need_file(args.config, "spec file")) if args.config else SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    g = generate(spec)
    os.makedirs(args.out, exist_ok=True)
    write_spec(spec, os.path.join(args.out, "spec.json"))
    write_dataset(g.database, os.path.join(args.out, "database.jsonl"))
    write_dataset(g.queries, os.path.join(args.out, "queries.jsonl"))
    for split, bench in g.benchmarks.items():
        bench.save(os.path.join(args.out, f"benchmark_{split}.json"))
    print(f"wrote {len(g.database)} database and {len(g.queries)} query records to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    ds = read_dataset(_need_file(args.dataset, "dataset"))
    bench = queries = None
    if args.benchmark:
        bench = ev.Benchmark.load(_need_file(args.benchmark[0], "benchmark"))
        queries = read_dataset(_need_file(args.queries, "queries")) if args.queries else ds
    os.makedirs(args.out, exist_ok=True)
    cfg.dump(os.path.join(args.out, "config.yaml"))
    res = train(ds, cfg, out_dir=args.out, benchmark=bench, queries=queries)
    res.log.write_steps_csv(os.path.join(args.out, "steps.csv"))
    res.log.write_epochs_csv(os.path.join(args.out, "epochs.csv"))
    last = res.log.epochs[-1] if res.log.epochs else {}
    print(f"trained {cfg.T} epochs; final train acc {last.get('train_acc', float('nan')):.4f}; "
          f"checkpoint {res.checkpoints[-1] if res.checkpoints else '-'}")
    return 0


def cmd_eval(args):
    model = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    scales = parse_scales(args.scales)
    db, queries, benches = _eval_inputs(args)
    if not benches:
        raise UsageError("eval needs at least one --benchmark")
    os.makedirs(args.out, exist_ok=True)
    for bench in benches:
        mean_ap, aps = ev.evaluate_benchmark(model, db, queries, bench, scales)
        meta = {"split": bench.split, "scales": ",".join(f"{s:.6g}" for s in scales),
                "checkpoint": os.path.basename(args.checkpoint)}
        ev.write_ap_csv(os.path.join(args.out, f"map_{bench.split}.csv"), aps, mean_ap, meta)
        print(f"{bench.split}: mAP {100 * mean_ap:.2f} over {len(aps)} queries")
    return 0


def cmd_diagnose(args):
    model = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    ds = read_dataset(_need_file(args.dataset, "dataset"))
    os.makedirs(args.out, exist_ok=True)
    diag = ev.logit_diagnostics(model, ds, margin=args.margin)
    diag.write_csv(os.path.join(args.out, "logit_hist.csv"))
    counts = {"gap": diag.histogram(diag.gap), f"gap (margin {args.margin:g})": diag.histogram(diag.gap_margin)}
    with open(os.path.join(args.out, "logit_gap.svg"), "w") as fh:
        fh.write(histogram_svg(diag.edges, counts, "target minus best non-target cosine", "gap"))
    with open(os.path.join(args.out, "logit_target.svg"), "w") as fh:
        fh.write(histogram_svg(diag.edges, {"target": diag.histogram(diag.target)}, "target cosine", "cos"))
    print(f"misaligned fraction {diag.misaligned_fraction:.4f} "
          f"(with margin {args.margin:g}: {diag.misaligned_fraction_margin:.4f})")
    if args.log:
        steps = TrainLog.read_steps_csv(_need_file(args.log, "train log"))
        x = [r["step"] for r in steps]
        with open(os.path.join(args.out, "scale_margin.svg"), "w") as fh:
            fh.write(lines_svg(x, {"s": [r["s"] for r in steps]}, "scale during training", "step", "s"))
        with open(os.path.join(args.out, "margin.svg"), "w") as fh:
            fh.write(lines_svg(x, {"m": [r["m"] for r in steps], "cos_m": [r["cos_m"] for r in steps]},
                               "margin and median target cosine", "step", "value"))
    return 0


def compare_matrix(base: TrainConfig, rhos=COMPARE_RHOS):
    """(row name, config) pairs for the loss comparison."""
    rows = [
        ("arcface", TrainConfig(**{**vars(base), "loss": "arcface"})),
        ("cosface", TrainConfig(**{**vars(base), "loss": "cosface"})),
        ("adacos", TrainConfig(**{**vars(base), "loss": "adacos"})),
    ]
    for rho in rhos:
        rows.append((f"madacos_rho{rho:g}", TrainConfig(**{**vars(base), "loss": "madacos", "rho": rho})))
    return rows


def cmd_compare(args):
    db, queries, benches = _eval_inputs(args)
    if not benches:
        raise UsageError("compare needs at least one --benchmark")
    rhos = COMPARE_RHOS
    base = TrainConfig(E=20, T=20, validate=False)
    if args.config:
        with open(_need_file(args.config, "compare config")) as fh:
            d = yaml.safe_load(fh) or {}
        if not isinstance(d, dict):
            raise ConfigError("compare config must be a mapping")
        rhos = tuple(float(r) for r in d.pop("rhos", rhos))
        base = TrainConfig.from_dict({"E": 20, "T": 20, "validate": False, **d})
    if args.seed is not None:
        base.seed = args.seed
    scales = parse_scales(args.scales)
    os.makedirs(args.out, exist_ok=True)
    header = ["loss", "rho", "s_final", "m_final"] + [f"map_{b.split}" for b in benches]
    out_rows = []
    for name, cfg in compare_matrix(base.check(), rhos):
        res = train(db, cfg)
        s_final = float(res.log.steps[-1]["s"]) if res.log.steps else float("nan")
        m_final = float(res.log.steps[-1]["m"]) if res.log.steps else float("nan")
        maps = [ev.evaluate_benchmark(res.model, db, queries, b, scales)[0] for b in benches]
        rho = repr(cfg.rho) if cfg.classifier == "madacos" else ""
        out_rows.append([name, rho, repr(s_final), repr(m_final)] + [repr(m) for m in maps])
        print(f"{name:>18s}  " + "  ".join(f"{b.split} {100 * m:.2f}" for b, m in zip(benches, maps)))
    with open(os.path.join(args.out, "compare.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(out_rows)
    return 0


# --- parser -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="cfcd", description="Coarse-to-fine retrieval training on synthetic grids.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="overrides the seed in --config")
        if dataset:
            sp.add_argument("--dataset", required=True, help="database JSONL file")

    g = sub.add_parser("gen", help="generate a synthetic dataset and benchmarks")
    g.add_argument("--config", help="JSON SyntheticSpec (defaults if omitted)")
    common(g, dataset=False)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="two-phase training")
    t.add_argument("--config", help="YAML TrainConfig")
    t.add_argument("--ablation", action="append", choices=ABLATIONS)
    t.add_argument("--benchmark", action="append", help="optional benchmark for per-epoch validation mAP")
    t.add_argument("--queries", help="query JSONL for validation")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mAP of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--queries", help="query JSONL (defaults to --dataset)")
    e.add_argument("--benchmark", action="append", required=True)
    e.add_argument("--scales", default="1", help="1, 3, 5 or a comma list")
    common(e)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="logit histograms and training-curve plots")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--log", help="steps.csv written by train")
    d.add_argument("--margin", type=float, default=0.15, help="angular margin for the shifted gap")
    common(d)
    d.set_defaults(func=cmd_diagnose)

    c = sub.add_parser("compare", help="train and score each classification loss")
    c.add_argument("--config", help="YAML TrainConfig overrides plus optional 'rhos' list")
    c.add_argument("--queries")
    c.add_argument("--benchmark", action="append", required=True)
    c.add_argument("--scales", default="1")
    common(c)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, SpecError, ConfigError) as exc:
        print(f"cfcd {args.command}: {exc}", file=sys.stderr)
        return 2
    except (CFCDError, ValueError, OSError) as exc:
        print(f"cfcd {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
