"""Command-line front end.

Every subcommand writes its artifacts plus ``manifest.json`` into ``--out``.
Flags may also come from ``SELFTRAIN_<FLAG>`` environment variables (for
example ``SELFTRAIN_SEED=3``); explicit flags win. Exit codes: 0 success,
2 usage error, 3 configuration error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .artifacts import append_jsonl, atomic_write, emit_metrics, now, sha256_arrays, write_manifest
from .config import RunConfig, load_config
from .errors import ConfigError, SelfTrainError
from .experiments import STUDIES, load_data, median, reseed, run_study
from .nn.checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .pseudo import filter_confidence, balance, generate_pseudo_labels, load_pool, pool_digest, save_pool
from .rng import derive_rng
from .robust import (
    adversarial_accuracy,
    corruption_error_matrix,
    eval_topk,
    flip_probability,
    load_baseline,
    mce,
    mfr,
    perturbation_sequences,
)
from .train import iterate_noisy_student, train_student, train_supervised

log = logging.getLogger("selftrain")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4
ENV_PREFIX = "SELFTRAIN_"


def _env(name, default=None):
    return os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"), default)


def _common(p, needs=()):
    p.add_argument("--config", default=_env("config"), help="run config JSON (defaults when omitted)")
    p.add_argument("--out", default=_env("out"), required=_env("out") is None, help="output directory")
    p.add_argument("--seed", type=int, default=_env("seed"), help="override the run seed")
    p.add_argument("--threads", type=int, default=_env("threads"), help="BLAS thread limit")
    for flag in needs:
        p.add_argument(f"--{flag}", default=_env(flag), required=_env(flag) is None)


def build_parser():
    parser = argparse.ArgumentParser(prog="selftrain", description="Self-training with a noised student.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("train-teacher", help="supervised teacher on the labeled split"))
    _common(sub.add_parser("pseudo-label", help="teacher distributions for the unlabeled split"), ["teacher"])
    p = sub.add_parser("filter-balance", help="confidence filter and class balancing of a pool")
    _common(p, ["pool"])
    p = sub.add_parser("train-student", help="joint student on labeled data plus a pool")
    _common(p, ["pool"])
    p.add_argument("--teacher", default=_env("teacher"))
    p.add_argument("--arch", default=_env("arch"))
    _common(sub.add_parser("iterate", help="teacher, then one student per plan entry"))
    eval_help = {
        "eval": "top-1/top-5 accuracy of a checkpoint",
        "corrupt-eval": "corruption error and mCE of a checkpoint",
        "perturb-eval": "flip probability and mFR of a checkpoint",
        "attack-eval": "FGSM/PGD accuracy of a checkpoint",
    }
    for name, text in eval_help.items():
        _common(sub.add_parser(name, help=text), ["model"])
    p = sub.add_parser("ablate", help="run a named study over several seeds")
    _common(p)
    p.add_argument("--study", required=True, choices=sorted(STUDIES))
    p.add_argument("--seeds", default=_env("seeds", "0,1,2,3,4"), help="comma-separated seeds")
    p = sub.add_parser("plot", help="CSV of adversarial accuracy against eps from attack-eval reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True, help="CSV path")
    return parser


def _load(args):
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = reseed(config, args.seed)
    return config


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data(config):
    return load_data(config.data, config.seed)


def _dataset_hashes(labeled, unlabeled, test):
    return {
        "labeled": sha256_arrays(labeled.images, labeled.labels),
        "unlabeled": sha256_arrays(unlabeled.images),
        "test": sha256_arrays(test.images, test.labels),
    }


def _history_records(history, **tag):
    return [dict(tag, **rec) for rec in history]


def cmd_train_teacher(args, config):
    out = _out(args)
    labeled, unlabeled, test = _data(config)
    res = train_supervised(labeled, config.teacher.train, config.teacher.arch, val=test)
    digest = save_checkpoint(out / "teacher.ckpt", res.model, res.steps)
    emit_metrics(_history_records(res.history, stage="teacher"), out)
    return _dataset_hashes(labeled, unlabeled, test), {"teacher.ckpt": digest}


def cmd_pseudo_label(args, config):
    out = _out(args)
    labeled, unlabeled, test = _data(config)
    teacher, _ = load_checkpoint(args.teacher)
    pool = generate_pseudo_labels(teacher, unlabeled)
    save_pool(out / "pool", pool, stage="pseudo-label", teacher_sha256=file_sha256(args.teacher), unlabeled_count=len(unlabeled))
    inputs = dict(_dataset_hashes(labeled, unlabeled, test), teacher=file_sha256(args.teacher))
    return inputs, {"pool": pool_digest(pool)}


def cmd_filter_balance(args, config):
    out = _out(args)
    pool, meta = load_pool(args.pool)
    pool = filter_confidence(pool, config.pseudo.tau)
    if config.pseudo.balance and len(pool):
        cap = config.pseudo.cap or max(1, meta.get("unlabeled_count", len(pool)) // pool.num_classes)
        pool = balance(pool, cap, derive_rng(config.seed, "balance"))
    save_pool(out / "pool", pool, stage="filter-balance", tau=config.pseudo.tau, unlabeled_count=meta.get("unlabeled_count", meta["count"]))
    return {"pool": meta["sha256"]}, {"pool": pool_digest(pool)}


def cmd_train_student(args, config):
    out = _out(args)
    labeled, unlabeled, test = _data(config)
    pool, meta = load_pool(args.pool)
    teacher = load_checkpoint(args.teacher)[0] if args.teacher else None
    arch = args.arch or config.plan[0].arch
    res = train_student(labeled, pool, arch, config.student, val=test, teacher=teacher)
    digest = save_checkpoint(out / "student.ckpt", res.model, res.steps)
    emit_metrics(_history_records(res.history, stage="student"), out)
    return dict(_dataset_hashes(labeled, unlabeled, test), pool=meta["sha256"]), {"student.ckpt": digest}


def cmd_iterate(args, config):
    out = _out(args)
    labeled, unlabeled, test = _data(config)
    records, digests, summaries = [], {}, []
    (out / "progress.jsonl").unlink(missing_ok=True)

    def done(res):
        name = f"iter_{res.iteration}.ckpt"
        digests[name] = save_checkpoint(out / name, res.model, extra={"iteration": res.iteration})
        records.extend(_history_records(res.history, iteration=res.iteration))
        summaries.append(res.metrics)
        append_jsonl(out / "progress.jsonl", res.metrics)

    iterate_noisy_student(
        labeled, unlabeled, config.teacher, config.plan, config.student, config.pseudo, test=test, on_iteration=done, val=test
    )
    emit_metrics(records, out, summary={"iterations": summaries, "final_test_top1": summaries[-1]["test_top1"]})
    return _dataset_hashes(labeled, unlabeled, test), digests


def _eval_setup(args, config):
    _, _, test = _data(config)
    model, _ = load_checkpoint(args.model)
    return model, test, {"model": file_sha256(args.model), "test": sha256_arrays(test.images, test.labels)}


def cmd_eval(args, config):
    model, test, inputs = _eval_setup(args, config)
    report = {"top1": eval_topk(model, test, 1), "top5": eval_topk(model, test, min(5, model.num_classes))}
    atomic_write(_out(args) / "eval.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return inputs, {}


def cmd_corrupt_eval(args, config):
    model, test, inputs = _eval_setup(args, config)
    ev = config.eval
    base, base_id = load_baseline(ev.baseline)
    kinds, sev = list(ev.corruption_kinds), list(ev.severities)
    err = corruption_error_matrix(model, test, kinds, sev, config.seed)
    base_err = corruption_error_matrix(base, test, kinds, sev, config.seed)
    report = {
        "baseline_id": base_id,
        "kinds": kinds,
        "severities": sev,
        "error_matrix": err.tolist(),
        "baseline_error_matrix": base_err.tolist(),
        "corruption_top1": float(1.0 - err.mean()),
        "mce": mce(err, base_err),
    }
    atomic_write(_out(args) / "corruption.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return inputs, {}


def cmd_perturb_eval(args, config):
    model, test, inputs = _eval_setup(args, config)
    ev = config.eval
    base, base_id = load_baseline(ev.baseline)
    seqs = perturbation_sequences(test, ev.perturbation_kinds, ev.frames, ev.perturb_images, config.seed)
    fp, base_fp = flip_probability(model, seqs), flip_probability(base, seqs)
    report = {"baseline_id": base_id, "flip_probability": fp, "baseline_flip_probability": base_fp, "mfr": mfr(fp, base_fp)}
    atomic_write(_out(args) / "perturbation.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return inputs, {}


def cmd_attack_eval(args, config):
    model, test, inputs = _eval_setup(args, config)
    ev = config.eval
    rows = [{"attack": "fgsm", "eps": e, "accuracy": adversarial_accuracy(model, test, e, "fgsm")} for e in ev.fgsm_eps]
    rows.append(
        {
            "attack": "pgd",
            "eps": ev.pgd_eps,
            "steps": ev.pgd_steps,
            "accuracy": adversarial_accuracy(model, test, ev.pgd_eps, "pgd", ev.pgd_steps, ev.pgd_step_size),
        }
    )
    report = {"clean_top1": eval_topk(model, test, 1), "attacks": rows}
    atomic_write(_out(args) / "attack.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return inputs, {}


def _collect_numbers(runs):
    """Median over seeds of every numeric leaf shared by all runs."""
    first = runs[0]
    if isinstance(first, dict):
        out = {}
        for k in first:
            if all(isinstance(r, dict) and k in r for r in runs):
                v = _collect_numbers([r[k] for r in runs])
                if v is not None:
                    out[k] = v
        return out or None
    if all(isinstance(r, (int, float)) and not isinstance(r, bool) and r is not None for r in runs):
        return median(runs)
    return None


def cmd_ablate(args, config):
    out = _out(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"seeds must be comma-separated integers, got {args.seeds!r}", "--seeds") from None
    if not seeds:
        raise ConfigError("at least one seed is required", "--seeds")
    report = run_study(args.study, config, seeds)
    report["median"] = _collect_numbers(report["runs"])
    atomic_write(out / f"ablate_{args.study}.json", json.dumps(report, indent=2, sort_keys=True, default=str) + "\n")
    return {}, {}


def cmd_plot(args):
    lines = ["source,attack,eps,eps_255,accuracy"]
    for path in args.reports:
        report = json.loads(Path(path).read_text())
        for row in report["attacks"]:
            lines.append(f"{path},{row['attack']},{row['eps']:.8g},{row['eps'] * 255:.6g},{row['accuracy']:.6f}")
    atomic_write(args.out, "\n".join(lines) + "\n")


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "pseudo-label": cmd_pseudo_label,
    "filter-balance": cmd_filter_balance,
    "train-student": cmd_train_student,
    "iterate": cmd_iterate,
    "eval": cmd_eval,
    "corrupt-eval": cmd_corrupt_eval,
    "perturb-eval": cmd_perturb_eval,
    "attack-eval": cmd_attack_eval,
    "ablate": cmd_ablate,
}


def run(argv=None):
    """Parse ``argv`` and execute one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "plot":
            cmd_plot(args)
            return EXIT_OK
        config = _load(args)
        started = now()
        with threadpool_limits(limits=args.threads):
            inputs, outputs = COMMANDS[args.command](args, config)
        write_manifest(args.out, args.command, config, config.seed, inputs, outputs, started)
    except ConfigError as exc:
        print(f"selftrain: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SelfTrainError, OSError, ValueError, KeyError) as exc:
        print(f"selftrain: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())
