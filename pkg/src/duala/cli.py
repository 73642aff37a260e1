"""Command-line pipeline: generate, pretrain, finetune, evaluate, ablate.

Every run prints its resolved configuration and seed before acting, and is
byte-reproducible for identical inputs within one build. Exit codes: 0 on
success, 1 for validation or check failures, 2 for I/O and format errors.

Environment: DUALA_THREADS bounds worker parallelism (default 1; the
current implementation computes serially regardless, which trivially
respects any bound), DUALA_F64=1 switches training math to 64-bit.
"""

import argparse
import os
import sys
from dataclasses import replace
from statistics import median

from duala import data, evaluate, gradsuite, train
from duala.errors import DualaError, FormatError, ValidationError

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_FORMAT = 2


def _check_threads():
    raw = os.environ.get("DUALA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"DUALA_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ValidationError("DUALA_THREADS must be >= 1")
    return n


def _read_text(path):
    with open(path) as fh:
        return fh.read()


def _print_config(command, text, seed):
    print(f"[duala {command}] seed={seed}")
    for line in text.strip().splitlines():
        print(f"  {line}")


def _parse_ids(raw):
    try:
        return [int(tok) for tok in raw.split(",") if tok.strip() != ""]
    except ValueError:
        raise ValidationError(f"bad id list {raw!r}; expected e.g. 0,1,2")


def _parse_seeds(raw):
    if ".." in raw:
        lo, _, hi = raw.partition("..")
        try:
            lo, hi = int(lo), int(hi)
        except ValueError:
            raise ValidationError(f"bad seed range {raw!r}")
        if hi < lo:
            raise ValidationError(f"bad seed range {raw!r}")
        return list(range(lo, hi + 1))
    return _parse_ids(raw)


def _train_config(args, fallback_text=None):
    """Resolve TrainConfig: --config file, else the given snapshot text."""
    if getattr(args, "config", None):
        text = _read_text(args.config)
        source = args.config
    else:
        text = fallback_text or ""
        source = "<checkpoint>" if fallback_text else "<defaults>"
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return train.TrainConfig.from_text(text, source, overrides)


def _apply_disable_flags(cfg, args):
    if getattr(args, "no_sdp", False):
        cfg = replace(cfg, sdp_variant="off")
    if getattr(args, "no_sa", False):
        cfg = replace(cfg, lambda_sa=0.0)
    if getattr(args, "no_rc", False):
        cfg = replace(cfg, lambda_rc=0.0)
    return cfg


def cmd_gen(args):
    text = _read_text(args.config) if args.config else ""
    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = data.SynthConfig.from_text(text, args.config or "<defaults>",
                                     overrides)
    _print_config("gen", cfg.to_text(), cfg.seed)
    pack = data.generate_synthetic(cfg)
    data.save_pack(pack, args.out)
    print(f"wrote {args.out}: {len(pack.subjects)} subjects, "
          f"{len(pack.stimulus_table)} stimuli, {pack.class_count} classes")
    return EXIT_OK


def cmd_pretrain(args):
    pack = data.load_pack(args.pack)
    subject_ids = _parse_ids(args.subjects)
    cfg = _train_config(args)
    _print_config("pretrain", cfg.to_text(), cfg.seed)
    ckpt = train.pretrain(pack, subject_ids, cfg)
    train.compute_reference(ckpt, pack)
    train.save_checkpoint(ckpt, args.out)
    trace_path = args.trace or args.out + ".trace.csv"
    train.write_trace(ckpt, trace_path)
    print(f"wrote {args.out} ({len(ckpt.tensors)} tensors) and {trace_path}")
    return EXIT_OK


def cmd_finetune(args):
    ckpt = train.load_checkpoint(args.ckpt)
    pack = data.load_pack(args.pack)
    cfg = _apply_disable_flags(_train_config(args, ckpt.config_text), args)
    _print_config("finetune", cfg.to_text(), cfg.seed)
    session = data.session_subset(pack.subject(args.subject),
                                  args.session_trials)
    tuned = train.finetune(ckpt, pack, session, cfg)
    train.save_checkpoint(tuned, args.out)
    trace_path = args.trace or args.out + ".trace.csv"
    train.write_trace(tuned, trace_path)
    skips = ", ".join(f"{k}={v}" for k, v in sorted(tuned.counters.items()))
    print(f"wrote {args.out}; {skips}")
    return EXIT_OK


def _eval_records(ckpt, pack, subject_id, pool_size, n_pools, seed,
                  arm="eval"):
    _, retr, ids = train.embed_subject(ckpt, pack, subject_id, "test")
    img = pack.retrieval_targets(ids)
    labels = pack.class_labels(ids)
    rep = evaluate.retrieval_accuracy(retr, img, pool_size, n_pools, seed)
    sr = evaluate.class_structure_metrics(retr, labels)
    return {
        "arm": arm, "seed": seed, "subject": int(subject_id),
        "pool_size": rep.pool_size, "n_pools": rep.n_pools,
        "image_acc": rep.image_acc, "brain_acc": rep.brain_acc,
        "intra_mean": sr.intra_mean, "inter_mean": sr.inter_mean,
        "ratio": sr.ratio, "silhouette": sr.silhouette,
    }


def cmd_eval(args):
    ckpt = train.load_checkpoint(args.ckpt)
    pack = data.load_pack(args.pack)
    seed = args.seed if args.seed is not None else 0
    record = _eval_records(ckpt, pack, args.subject, args.pool_size,
                           args.pools, seed)
    evaluate.emit_report([record], args.report, args.format,
                         fieldnames=list(record))
    print(f"subject {args.subject}: image_acc={record['image_acc']:.4f} "
          f"brain_acc={record['brain_acc']:.4f} "
          f"silhouette={record['silhouette']:.4f} -> {args.report}")
    if args.emit_pca:
        _, retr, ids = train.embed_subject(ckpt, pack, args.subject, "test")
        coords = evaluate.pca_project(retr, 2)
        labels = pack.class_labels(ids)
        rows = [{"stimulus_id": int(i), "class_id": int(c),
                 "x": float(x), "y": float(y)}
                for i, c, (x, y) in zip(ids, labels, coords)]
        evaluate.emit_report(rows, args.emit_pca, "csv",
                             fieldnames=["stimulus_id", "class_id", "x", "y"])
        print(f"wrote PCA coordinates -> {args.emit_pca}")
    return EXIT_OK


ABLATION_ARMS = (
    ("baseline", False, False, False),
    ("sdp", True, False, False),
    ("sa", False, True, False),
    ("sdp_sa", True, True, False),
    ("full", True, True, True),
)


def ablation_config(cfg, arm_name):
    """Config for one ablation arm, derived from the full config."""
    for name, use_sdp, use_sa, use_rc in ABLATION_ARMS:
        if name == arm_name:
            variant = cfg.sdp_variant if cfg.sdp_variant != "off" \
                else "deterministic"
            return replace(
                cfg,
                sdp_variant=variant if use_sdp else "off",
                lambda_sa=cfg.lambda_sa if use_sa else 0.0,
                lambda_rc=cfg.lambda_rc if use_rc else 0.0)
    raise ValidationError(f"unknown ablation arm {arm_name!r}")


def cmd_ablate(args):
    ckpt = train.load_checkpoint(args.ckpt)
    pack = data.load_pack(args.pack)
    cfg = _train_config(args, ckpt.config_text)
    _print_config("ablate", cfg.to_text(), cfg.seed)
    seeds = _parse_seeds(args.seeds)
    session = data.session_subset(pack.subject(args.subject),
                                  args.session_trials)
    records = []
    for arm, _, _, _ in ABLATION_ARMS:
        for seed in seeds:
            arm_cfg = replace(ablation_config(cfg, arm), seed=seed)
            tuned = train.finetune(ckpt, pack, session, arm_cfg)
            records.append(_eval_records(tuned, pack, args.subject,
                                         args.pool_size, args.pools, seed,
                                         arm=arm))
    evaluate.emit_report(records, args.report, args.format,
                         fieldnames=list(records[0]))
    for arm, _, _, _ in ABLATION_ARMS:
        rows = [r for r in records if r["arm"] == arm]
        print(f"{arm:10s} median brain_acc="
              f"{median(r['brain_acc'] for r in rows):.4f} "
              f"image_acc={median(r['image_acc'] for r in rows):.4f} "
              f"silhouette={median(r['silhouette'] for r in rows):.4f}")
    print(f"wrote {len(records)} rows -> {args.report}")
    return EXIT_OK


def cmd_gradcheck(args):
    seeds = _parse_seeds(args.seeds)
    results = gradsuite.run_suite(seeds, inject_bug=args.inject_bug)
    ok = True
    for name, err, passed in results:
        print(f"{name:26s} max_rel_err={err:.3e} "
              f"{'PASS' if passed else 'FAIL'}")
        ok = ok and passed
    print(f"gradient suite: {'PASS' if ok else 'FAIL'} "
          f"(threshold {gradsuite.THRESHOLD:g}, seeds {seeds})")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser():
    parser = argparse.ArgumentParser(
        prog="duala",
        description="Dual-level alignment for cross-subject decoding")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset pack")
    p.add_argument("--config", help="SynthConfig key=value file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="train source subjects jointly")
    p.add_argument("--pack", required=True)
    p.add_argument("--subjects", required=True, help="comma-separated ids")
    p.add_argument("--config", help="TrainConfig key=value file")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="loss trace CSV (default <out>.trace.csv)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="adapt to a new subject")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pack", required=True)
    p.add_argument("--subject", type=int, required=True)
    p.add_argument("--session-trials", type=int, default=750)
    p.add_argument("--config", help="TrainConfig key=value file")
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-sdp", action="store_true",
                   help="disable the distribution perturbation")
    p.add_argument("--no-sa", action="store_true",
                   help="disable the triplet alignment loss")
    p.add_argument("--no-rc", action="store_true",
                   help="disable the relational consistency loss")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="retrieval and structure metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pack", required=True)
    p.add_argument("--subject", type=int, required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--pool-size", type=int, default=100)
    p.add_argument("--pools", type=int, default=30)
    p.add_argument("--seed", type=int)
    p.add_argument("--emit-pca", help="write 2-D PCA coordinates CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the component-ablation arms")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pack", required=True)
    p.add_argument("--subject", type=int, required=True)
    p.add_argument("--seeds", default="0..4")
    p.add_argument("--session-trials", type=int, default=750)
    p.add_argument("--config", help="TrainConfig key=value file")
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--pool-size", type=int, default=100)
    p.add_argument("--pools", type=int, default=30)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference self-check")
    p.add_argument("--seeds", default="0..4")
    p.add_argument("--inject-bug", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _check_threads()
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except DualaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
