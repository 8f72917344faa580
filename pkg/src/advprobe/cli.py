"""Command-line entry point: synth, train, attack, sweep, report.

Flag precedence is CLI > JSON config file > built-in defaults; the global
seed falls back to the ADVPROBE_SEED environment variable. Exit codes:
0 success, 1 runtime error, 2 usage error. Commands never mutate their
inputs and write only under their --out paths.
"""

import argparse
import json
import os
import statistics
import sys

import numpy as np
from PIL import Image

from . import data, metrics, models
from .attacks import ATTACKS, AttackConfig, write_trace_jsonl
from .errors import AdvprobeError, UsageError
from .tensorcore import evaluate_accuracy, init_weights, sgd_train

DEFAULTS = {
    "seed": 0,
    "epsilon": 0.1,
    "max_iters": 100000,
    "max_queries": 800,
    "tpgd_steps": 10,
    "direction_policy": None,
    "epochs": 10,
    "lr": 0.01,
    "jobs": 1,
}

DEFAULT_GRIDS = {
    "iterations": [50, 100, 200, 400, 800],
    "epsilon": [0.02, 0.05, 0.1, 0.2, 0.4],
    "samples": [10, 20, 50, 100],
}


def _load_config_file(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    unknown = set(doc) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return doc


def _resolve(args, key):
    """CLI flag if given, else config file, else env seed, else default."""
    cli_value = getattr(args, key, None)
    if cli_value is not None:
        return cli_value
    file_cfg = getattr(args, "_file_cfg", {})
    if key in file_cfg:
        return file_cfg[key]
    if key == "seed" and os.environ.get("ADVPROBE_SEED"):
        return int(os.environ["ADVPROBE_SEED"])
    return DEFAULTS[key]


def _attack_cfg(args):
    return AttackConfig(
        epsilon=float(_resolve(args, "epsilon")),
        max_iters=int(_resolve(args, "max_iters")),
        max_queries=int(_resolve(args, "max_queries")),
        seed=int(_resolve(args, "seed")),
        direction_policy=_resolve(args, "direction_policy"),
        tpgd_steps=int(_resolve(args, "tpgd_steps")),
    )


def _load_corpus(data_dir, csv_name, num_classes=None, split_tag="train"):
    return data.load_gtsrb_layout(
        data_dir, os.path.join(data_dir, csv_name), num_classes=num_classes, split_tag=split_tag
    )


def cmd_synth(args):
    k = args.classes
    if not 2 <= k <= 10:
        raise UsageError(f"--classes must be in [2, 10], got {k}")
    if args.per_class < 1 or args.per_class_test < 0:
        raise UsageError("--per-class must be >= 1 and --per-class-test >= 0")
    seed = int(_resolve(args, "seed"))
    os.makedirs(args.out, exist_ok=True)
    train = data.synth_signs(k, args.per_class, seed, split_tag="train")
    data.export_corpus(train, args.out, csv_name="index.csv")
    written = len(train)
    if args.per_class_test > 0:
        test = data.synth_signs(k, args.per_class_test, seed + 1, split_tag="test")
        data.export_corpus(test, args.out, csv_name="test.csv")
        written += len(test)
    print(f"wrote {written} images under {args.out} (classes={k}, seed={seed})")
    return 0


def cmd_train(args):
    seed = int(_resolve(args, "seed"))
    epochs = int(_resolve(args, "epochs"))
    lr = float(_resolve(args, "lr"))
    train_set = _load_corpus(args.data, "index.csv", split_tag="train")
    arch_fn = models.whitebox_arch if args.arch == "whitebox" else models.blackbox_arch
    arch = arch_fn(train_set.num_classes)
    weights, history = sgd_train(init_weights(arch, seed), arch, train_set, epochs, lr, seed)
    classifier = models.Classifier(weights, arch)
    models.save_model(classifier, args.out)
    train_acc = evaluate_accuracy(weights, arch, train_set)
    line = f"arch={args.arch} epochs={epochs} train_accuracy={train_acc:.4f}"
    test_csv = os.path.join(args.data, "test.csv")
    if os.path.exists(test_csv):
        test_set = _load_corpus(args.data, "test.csv", train_set.num_classes, split_tag="test")
        line += f" test_accuracy={evaluate_accuracy(weights, arch, test_set):.4f}"
    if history:
        line += " epoch_accuracies=" + ",".join(f"{a:.4f}" for a in history)
    print(line)
    return 0


def cmd_attack(args):
    if args.method == "tpgd" and not args.surrogate:
        raise UsageError("tpgd needs --surrogate weights")
    if args.method != "tpgd" and args.surrogate:
        raise UsageError(f"{args.method} is a black-box attack; drop --surrogate")
    target_model = models.load_model(args.target)
    oracle = models.BlackBoxOracle(target_model)
    side = target_model.descriptor.input_side
    image = data.load_image(args.image, side=side)
    sample = data.LabeledSample(image, args.label)
    cfg = _attack_cfg(args)

    if args.method == "tpgd":
        surrogate = models.load_model(args.surrogate)
        result = ATTACKS["tpgd"](surrogate, oracle, sample, cfg)
    else:
        result = ATTACKS[args.method](oracle, sample, cfg)

    if args.out_image:
        arr = np.clip(np.round(result.adversarial * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(args.out_image)
    if args.out_trace:
        write_trace_jsonl(result, args.out_trace)
    print(json.dumps(result.to_json_dict(), sort_keys=True))
    return 0


def _parse_grid(text, variable):
    parts = [p for p in text.split(",") if p]
    if variable == "epsilon":
        return [float(p) for p in parts]
    return [int(p) for p in parts]


def cmd_sweep(args):
    attack_set = [a for a in args.attacks.split(",") if a]
    for a in attack_set:
        if a not in ATTACKS:
            raise UsageError(f"unknown attack {a!r}")
    if "tpgd" in attack_set and not args.surrogate:
        raise UsageError("tpgd in --attacks needs --surrogate weights")

    target_model = models.load_model(args.target)
    surrogate = models.load_model(args.surrogate) if args.surrogate else None
    csv_name = args.csv or ("test.csv" if os.path.exists(os.path.join(args.data, "test.csv")) else "index.csv")
    sample_set = _load_corpus(
        args.data, csv_name, target_model.descriptor.num_classes, split_tag="eval"
    )
    if args.samples:
        sample_set = sample_set.subset(args.samples)
    grid = _parse_grid(args.grid, args.variable) if args.grid else DEFAULT_GRIDS[args.variable]

    spec = metrics.SweepSpec(
        variable=args.variable,
        grid=grid,
        fixed_cfg=_attack_cfg(args),
        attack_set=attack_set,
        sample_set=sample_set,
    )
    result = metrics.run_sweep(spec, target_model, surrogate, jobs=int(_resolve(args, "jobs")))
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "sweep.csv")
    metrics.write_sweep_csv(result, csv_path)
    metrics.write_probs_dump(result, os.path.join(args.out, "probs_dump.json"))
    print(f"wrote {csv_path} ({len(result.rows)} rows)")
    return 0


def cmd_report(args):
    with open(args.sweep_csv, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or lines[0] != metrics.CSV_HEADER:
        raise AdvprobeError(f"{args.sweep_csv} is not a sweep CSV")
    print(f"{'attack':<8} {'variable':<10} {'value':>8} {'success':>8} {'queries':>9}")
    for ln in lines[1:]:
        attack, variable, value, sr, mq, _, _ = ln.split(",")
        print(f"{attack:<8} {variable:<10} {value:>8} {float(sr):>8.3f} {float(mq):>9.1f}")

    if args.probs_dump:
        with open(args.probs_dump, "r", encoding="utf-8") as f:
            dump = json.load(f)
        print()
        print(f"{'run set':<16} {'n_succ':>6} {'med_true_conf':>14} {'med_flatness':>13}")
        for key in sorted(dump):
            rows = [r for r in dump[key] if r["success"] and not r["clean_misclassified"]]
            if not rows:
                print(f"{key:<16} {0:>6} {'-':>14} {'-':>13}")
                continue
            confs = [metrics.true_class_confidence(r["final_probs"], r["label"]) for r in rows]
            flats = [metrics.flatness(r["final_probs"], r["label"]) for r in rows]
            print(
                f"{key:<16} {len(rows):>6} {statistics.median(confs):>14.4f} "
                f"{statistics.median(flats):>13.4f}"
            )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="advprobe",
        description="Train small CNN classifiers and probe them with "
        "transfer and query-based adversarial attacks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=None, help="global RNG seed")
        p.add_argument("--config", default=None, help="JSON config file")

    p = sub.add_parser("synth", help="generate a synthetic sign corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=25, dest="per_class")
    p.add_argument("--per-class-test", type=int, default=0, dest="per_class_test")
    add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a classifier on a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", choices=("whitebox", "blackbox"), required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--out", required=True, help="output weight file (.advw)")
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack one image")
    p.add_argument("--target", required=True, help="target weight file")
    p.add_argument("--surrogate", default=None, help="surrogate weights (tpgd only)")
    p.add_argument("--method", choices=sorted(ATTACKS), required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--label", type=int, required=True)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--max-iters", type=int, default=None, dest="max_iters")
    p.add_argument("--max-queries", type=int, default=None, dest="max_queries")
    p.add_argument("--tpgd-steps", type=int, default=None, dest="tpgd_steps")
    p.add_argument(
        "--policy",
        choices=("pixel_basis", "dense_sign"),
        default=None,
        dest="direction_policy",
    )
    p.add_argument("--out-image", default=None, dest="out_image")
    p.add_argument("--out-trace", default=None, dest="out_trace")
    add_common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="run a success-rate sweep")
    p.add_argument("--target", required=True)
    p.add_argument("--surrogate", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", default=None, help="index CSV inside --data (default: test.csv if present)")
    p.add_argument("--variable", choices=metrics.VARIABLES, required=True)
    p.add_argument("--grid", default=None, help="comma-separated grid values")
    p.add_argument("--attacks", default="tpgd,simba,msimba")
    p.add_argument("--samples", type=int, default=None, help="cap on sample count")
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--max-iters", type=int, default=None, dest="max_iters")
    p.add_argument("--max-queries", type=int, default=None, dest="max_queries")
    p.add_argument("--tpgd-steps", type=int, default=None, dest="tpgd_steps")
    p.add_argument(
        "--policy",
        choices=("pixel_basis", "dense_sign"),
        default=None,
        dest="direction_policy",
    )
    p.add_argument("--jobs", type=int, default=None)
    add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarize sweep artifacts")
    p.add_argument("--sweep-csv", required=True, dest="sweep_csv")
    p.add_argument("--probs-dump", default=None, dest="probs_dump")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args._file_cfg = _load_config_file(args.config) if getattr(args, "config", None) else {}
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except AdvprobeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
