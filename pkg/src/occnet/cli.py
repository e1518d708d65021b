"""Command-line pipeline: generate, train, eval, compare, timecourse, params.

Every run writes a resolved-config snapshot (run_config.json) next to
its outputs so results can be reproduced bit-identically.

Exit codes: 2 invalid flags, 3 I/O failure, 4 non-finite loss,
5 dataset-checksum mismatch, 6 missing per-step dump.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import evalstats, network, scenegen, training
from .backend import backend_info


def _snapshot(out_dir, command, args):
    os.makedirs(out_dir, exist_ok=True)
    resolved = {"command": command, "backend": backend_info()}
    resolved.update({k: v for k, v in sorted(vars(args).items()) if k != "func"})
    with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
        json.dump(resolved, fh, indent=2, default=str)


def cmd_generate(args):
    _snapshot(args.out, "generate", args)
    disparities = tuple(int(v) for v in args.disparities.split(","))
    manifest = scenegen.generate_dataset(
        args.out, args.mnist, seed=args.seed, samples_per_base=args.samples_per_base,
        limit_bases=args.limit_bases, disparities=disparities, shard_size=args.shard_size)
    print(f"train pairs: {manifest['train_count']}")
    print(f"test pairs:  {manifest['test_count']}")
    frac = scenegen.load_dataset(args.out, "train")["fractions"]
    deciles = np.percentile(frac, np.arange(0, 101, 10))
    print("occlusion deciles: " + " ".join(f"{v:.2f}" for v in deciles))


def cmd_synth_digits(args):
    os.makedirs(args.out, exist_ok=True)
    _snapshot(args.out, "synth-digits", args)
    n_train, n_test = scenegen.synthesize_digit_corpus(args.out)
    print(f"wrote IDX corpus to {args.out}: {n_train} train / {n_test} test digits")


def cmd_train(args):
    config = training.TrainConfig(
        preset=args.model, stereo=args.stereo, learning_rate=args.lr,
        epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
        tau=args.tau, classes=args.classes, limit=args.limit,
        val_fraction=args.val_fraction, dtype=args.dtype)
    _snapshot(args.out, "train", args)
    dataset = scenegen.load_dataset(args.dataset, "train")
    training.train(config, dataset, args.out, resume_from=args.resume)
    print(f"final checkpoint: {os.path.join(args.out, 'final.ckpt')}")


def cmd_eval(args):
    _snapshot(args.out, "eval", args)
    spec, params, preset_name, _ = network.load_checkpoint(args.checkpoint)
    dataset = scenegen.load_dataset(args.dataset, args.split, limit=args.limit)
    stereo = spec.input_channels == 2
    x = scenegen.to_model_input(dataset["left"], dataset["right"], stereo)
    labels = dataset["labels"].astype(np.int64)
    correct, probs = evalstats.evaluate(spec, params, x, labels,
                                        batch_size=args.batch_size)
    name = args.name or preset_name or "model"
    checksum = f"{dataset['checksum']}:{args.split}"
    evalstats.write_eval_output(args.out, name, checksum, correct, labels,
                                probs=probs if args.dump else None)
    print(f"{name}: accuracy {correct.mean():.4f} "
          f"(error {1 - correct.mean():.4f}) on {len(labels)} samples")


def cmd_compare(args):
    _snapshot(args.out, "compare", args)
    evals = [evalstats.read_eval_output(d) for d in args.evals]
    rows, summary = evalstats.compare(evals, q=args.fdr, exact=args.exact)
    csv_path = os.path.join(args.out, "comparison.csv")
    evalstats.write_compare_csv(csv_path, rows)
    evalstats.write_compare_json(os.path.join(args.out, "comparison.json"), summary)
    for row in rows:
        mark = "*" if row["reject_at_fdr05"] else " "
        print(f"{mark} {row['model_a']:>4} vs {row['model_b']:<4} "
              f"b={row['b']:<6} c={row['c']:<6} chi2={row['chi2']:.4f} p={row['p']:.4g}")
    print(f"wrote {csv_path}")


def cmd_timecourse(args):
    _snapshot(args.out, "timecourse", args)
    data = evalstats.read_eval_output(args.eval)
    if "probs" not in data:
        print("error: no per-step softmax dump in this eval output; "
              "re-run `occnet eval` with --dump", file=sys.stderr)
        sys.exit(6)
    report = evalstats.timecourse(data["probs"], data["labels"], top_k=args.top_k)
    csv_path = os.path.join(args.out, "timecourse.csv")
    evalstats.write_timecourse_csv(csv_path, report, data["probs"], data["labels"])
    summary = {
        "n": report.n,
        "counts": report.counts,
        "corrected_over_all": report.corrected_over_all,
        "corrected_over_initially_wrong": report.corrected_over_initially_wrong,
        "reverted_over_all": report.reverted_over_all,
        "reverted_over_initially_correct": report.reverted_over_initially_correct,
        "single_step": report.single_step,
    }
    with open(os.path.join(args.out, "timecourse.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary, indent=2))


def cmd_params(args):
    print(f"{'model':<6} {'parameters':>12}")
    for name in network.PRESET_NAMES:
        spec = network.preset(name, input_channels=args.channels,
                              classes=args.classes, tau=args.tau)
        print(f"{name:<6} {network.count_params(spec):>12,}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="occnet",
        description="Occluded-stereo scene generation, recurrent convolutional "
                    "network training, and paired-classifier statistics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate an occluded stereo dataset")
    p.add_argument("--mnist", required=True, help="directory with the IDX digit files")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples-per-base", type=int, default=10,
                   help="occluder combinations per base digit (default 10)")
    p.add_argument("--limit-bases", type=int, default=None, help="smoke mode: cap base digits")
    p.add_argument("--disparities", default="2,4", help="far,near occluder disparity in px")
    p.add_argument("--shard-size", type=int, default=100_000, help="records per shard file")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("synth-digits",
                       help="write a synthetic MNIST-format IDX corpus (sklearn digits)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_digits)

    p = sub.add_parser("train", help="train one architecture preset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default="BLT", choices=network.PRESET_NAMES)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--stereo", dest="stereo", action="store_true", default=True,
                   help="2-channel left/right input (default)")
    g.add_argument("--mono", dest="stereo", action="store_false",
                   help="1-channel input (left view)")
    p.add_argument("--lr", type=float, default=0.003, help="adam learning rate (default 0.003)")
    p.add_argument("--epochs", type=int, default=25, help="training epochs (default 25)")
    p.add_argument("--batch-size", type=int, default=500, help="mini-batch size (default 500)")
    p.add_argument("--tau", type=int, default=4, help="unrolled time steps (default 4)")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=None, help="smoke mode: cap training samples")
    p.add_argument("--val-fraction", type=float, default=0.02)
    p.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--out", required=True)
    p.add_argument("--name", default=None, help="model name in the output manifest")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=500)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--dump", dest="dump", action="store_true", default=True,
                   help="write the per-step softmax dump (default)")
    g.add_argument("--no-dump", dest="dump", action="store_false")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="pairwise McNemar tests with FDR control")
    p.add_argument("--evals", nargs="+", required=True, help="eval output directories")
    p.add_argument("--out", required=True)
    p.add_argument("--fdr", type=float, default=0.05, help="FDR level q (default 0.05)")
    p.add_argument("--exact", action="store_true",
                   help="exact binomial McNemar (small discordant counts)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("timecourse", help="softmax time-course report and exemplar traces")
    p.add_argument("--eval", required=True, help="eval output directory (needs --dump)")
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=int, default=16,
                   help="exemplar trajectories to export (default 16)")
    p.set_defaults(func=cmd_timecourse)

    p = sub.add_parser("params", help="trainable-parameter counts for the six presets")
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--tau", type=int, default=4)
    p.set_defaults(func=cmd_params)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except evalstats.DatasetMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(5)
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(4)
    except (OSError, scenegen.IdxFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(3)


if __name__ == "__main__":
    main()
