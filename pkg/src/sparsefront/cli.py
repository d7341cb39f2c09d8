"""Experiment orchestration: train models, run attacks, sweeps, and reports.

Every command writes a manifest.json (full configuration, seeds, package
version) next to its outputs; re-running with the same manifest reproduces
the reports byte for byte. Reports are CSV for tables and JSON for
per-sample records. Files are written atomically so a crashed run never
leaves a partial file where a complete one stood.

Subcommands: fetch-data, train-svm, train-net, attack, sweep, attenuation,
table1. A plain-text key=value config file can seed any command's defaults;
explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

from . import __version__
from . import attacks as attacks_mod
from . import attenuation as attenuation_mod
from . import data as data_mod
from . import models as models_mod
from .attacks import AttackSpec
from .frontend import FrontEndConfig
from .models import TrainConfig
from .transform import Basis

BASIS_KINDS = {"haar": "haar_orthonormal", "cdf97": "cdf97_biorthogonal"}

# Published reference accuracies (percent) for the epsilon/rho settings of
# the headline table: SVM at epsilon=0.12, rho=2%; CNN at epsilon=0.25,
# rho=3%.
PAPER_TABLE = {
    ("svm", "semiwhite", "none"): 0.0,
    ("svm", "white", "none"): 0.0,
    ("svm", "semiwhite", "sparse"): 97.31,
    ("svm", "white", "sparse"): 94.62,
    ("cnn", "fgsm", "none"): 19.45,
    ("cnn", "semiwhite", "none"): 8.87,
    ("cnn", "white", "none"): 8.87,
    ("cnn", "fgsm", "sparse"): 89.75,
    ("cnn", "semiwhite", "sparse"): 88.76,
    ("cnn", "white", "sparse"): 84.04,
}

SVM_DEFAULTS = dict(epochs=200, learning_rate=0.1, batch_size=64, weight_decay=1e-4)
NET_DEFAULTS = {
    "reduced_dense": dict(epochs=10, learning_rate=0.1, batch_size=64,
                          lr_decay_every=4, lr_decay_factor=0.5,
                          weight_decay=1e-4, dropout_rate=0.0),
    "paper_cnn": dict(epochs=8, learning_rate=0.05, batch_size=64,
                      lr_decay_every=3, lr_decay_factor=0.5,
                      weight_decay=1e-4, dropout_rate=0.5),
}


def _atomic_write(path: Path, payload: bytes):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_json(path, obj):
    path = Path(path)
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    _atomic_write(Path(path), buf.getvalue().encode())


def write_manifest(out_dir, command, config):
    write_json(Path(out_dir) / "manifest.json", {
        "command": command,
        "config": config,
        "package": "sparsefront",
        "version": __version__,
    })


def _fmt(x):
    return format(float(x), ".10g")


def _front_end_from_args(args):
    basis = Basis(BASIS_KINDS[args.basis], 28, 28, args.levels)
    return FrontEndConfig(basis, args.rho)


def _model_path(out_dir, name):
    return Path(out_dir) / f"{name}.model"


def _load_dataset(args, split):
    return data_mod.load_mnist(args.data, split)


def _report_attack(out_dir, report, extra):
    summary = dict(extra)
    summary.update({
        "clean_accuracy": report.clean_accuracy,
        "attacked_accuracy": report.attacked_accuracy,
        "mean_distortion": report.mean_distortion,
        "samples": report.n,
    })
    write_json(Path(out_dir) / "report.json", {"summary": summary, "records": report.records})
    write_csv(
        Path(out_dir) / "report.csv",
        ["sample", "label", "clean_prediction", "attacked_prediction",
         "pair_i", "pair_t", "predicted_gap", "achieved_gap"],
        [
            [r["sample"], r["label"], r["clean_prediction"], r["attacked_prediction"],
             r["chosen_pair"][0], r["chosen_pair"][1], _fmt(r["predicted_gap"]),
             _fmt(r["achieved_gap"])]
            for r in report.records
        ],
    )
    return summary


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_fetch_data(args):
    data_mod.fetch_mnist(args.data, args.base_url or data_mod.DEFAULT_BASE_URL)
    return 0


def cmd_train_svm(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fe = None if args.no_defense else _front_end_from_args(args)
    config = TrainConfig(
        seed=args.seed,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        dropout_rate=0.0,
        front_end=fe,
        clip_recon=args.clip,
    )
    a, b = args.digits
    train = data_mod.filter_pair(_load_dataset(args, "train"), a, b)
    test = data_mod.filter_pair(_load_dataset(args, "test"), a, b)
    model = models_mod.train_linear_svm(train.images, train.labels, config)
    name = f"svm_{a}v{b}_" + ("plain" if fe is None else f"sparse_rho{args.rho:g}")
    models_mod.save_model(model, _model_path(out, name))
    clean = attacks_mod.evaluate(model, test, AttackSpec("none", 0.0, clip=args.clip))
    summary = {
        "model_file": f"{name}.model",
        "digits": [a, b],
        "train_samples": len(train),
        "test_samples": len(test),
        "clean_accuracy": clean.clean_accuracy,
    }
    write_json(out / "report.json", {"summary": summary})
    write_manifest(out, "train-svm", _args_config(args))
    print(f"{name}: clean test accuracy {100 * clean.clean_accuracy:.2f}%")
    return 0


def cmd_train_net(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fe = None if args.no_defense else _front_end_from_args(args)
    defaults = NET_DEFAULTS[args.arch]
    config = TrainConfig(
        seed=args.seed,
        epochs=args.epochs if args.epochs is not None else defaults["epochs"],
        batch_size=args.batch_size if args.batch_size is not None else defaults["batch_size"],
        learning_rate=args.lr if args.lr is not None else defaults["learning_rate"],
        lr_decay_every=defaults["lr_decay_every"],
        lr_decay_factor=defaults["lr_decay_factor"],
        weight_decay=args.weight_decay if args.weight_decay is not None else defaults["weight_decay"],
        dropout_rate=args.dropout if args.dropout is not None else defaults["dropout_rate"],
        front_end=fe,
        clip_recon=args.clip,
    )
    train = _load_dataset(args, "train")
    test = _load_dataset(args, "test")
    log_lines = []

    def log(epoch, loss):
        line = f"epoch {epoch}: mean loss {loss:.6f}"
        log_lines.append(line)
        print(line)

    net = models_mod.train_network(
        train.images, train.labels, config, models_mod.ARCH_PRESETS[args.arch], log=log
    )
    name = f"net_{args.arch}_" + ("plain" if fe is None else f"sparse_rho{args.rho:g}")
    models_mod.save_model(net, _model_path(out, name))
    clean = attacks_mod.evaluate(net, test, AttackSpec("none", 0.0, clip=args.clip))
    summary = {
        "model_file": f"{name}.model",
        "arch": args.arch,
        "clean_accuracy": clean.clean_accuracy,
        "training_log": log_lines,
    }
    write_json(out / "report.json", {"summary": summary})
    write_manifest(out, "train-net", _args_config(args))
    print(f"{name}: clean test accuracy {100 * clean.clean_accuracy:.2f}%")
    return 0


def cmd_attack(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = models_mod.load_model(args.model)
    spec = AttackSpec(args.attack, args.epsilon, clip=args.clip)
    if isinstance(model, models_mod.LinearModel):
        a, b = args.digits
        test = data_mod.filter_pair(_load_dataset(args, "test"), a, b)
    else:
        test = _load_dataset(args, "test")
    if args.limit:
        test = data_mod.Dataset(test.images[: args.limit], test.labels[: args.limit], test.split)
    report = attacks_mod.evaluate(model, test, spec)
    summary = _report_attack(out, report, {
        "model": str(args.model),
        "attack": args.attack,
        "epsilon": args.epsilon,
        "clip": args.clip,
    })
    write_manifest(out, "attack", _args_config(args))
    print(
        f"{args.attack} eps={args.epsilon:g}: clean {100 * summary['clean_accuracy']:.2f}% "
        f"-> attacked {100 * summary['attacked_accuracy']:.2f}%"
    )
    return 0


def cmd_sweep(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not args.rhos or not args.epsilons:
        raise ValueError("sweep needs nonempty --rhos and --epsilons")
    a, b = args.digits
    train = data_mod.filter_pair(_load_dataset(args, "train"), a, b)
    test = data_mod.filter_pair(_load_dataset(args, "test"), a, b)
    rows = []
    acc = {}
    for rho in args.rhos:
        basis = Basis(BASIS_KINDS[args.basis], 28, 28, args.levels)
        fe = FrontEndConfig(basis, rho)
        config = TrainConfig(
            seed=args.seed, front_end=fe, dropout_rate=0.0, clip_recon=args.clip,
            **SVM_DEFAULTS,
        )
        model = models_mod.train_linear_svm(train.images, train.labels, config)
        for eps in args.epsilons:
            report = attacks_mod.evaluate(model, test, AttackSpec(args.attack, eps, clip=args.clip))
            acc[(rho, eps)] = report.attacked_accuracy
    for eps in args.epsilons:
        best_rho = max(args.rhos, key=lambda r: acc[(r, eps)])
        for rho in args.rhos:
            rows.append([_fmt(rho), _fmt(eps), _fmt(acc[(rho, eps)]),
                         "best" if rho == best_rho else ""])
    write_csv(out / "report.csv", ["rho", "epsilon", "attacked_accuracy", "note"], rows)
    write_manifest(out, "sweep", _args_config(args))
    for row in rows:
        print(",".join(str(c) for c in row))
    return 0


def cmd_attenuation(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    modes = ["semiwhite", "white"] if args.mode == "both" else [args.mode]
    rows = []
    for mode in modes:
        config = attenuation_mod.EnsembleConfig(
            n=args.n, k=args.k, trials=args.trials, basis_kind=args.basis_kind,
            mode=mode, seed=args.seed, levels=args.levels,
        )
        report = attenuation_mod.run_ensemble(config)
        rows.append([args.n, args.k, args.basis_kind, mode, _fmt(report.mean_ratio),
                     _fmt(report.stderr), args.trials, args.seed])
        print(
            f"N={args.n} K={args.k} {args.basis_kind} {mode}: "
            f"mean ratio {report.mean_ratio:.6f} (stderr {report.stderr:.2g}, K/N={args.k / args.n:.6f})"
        )
    write_csv(out / "report.csv",
              ["n", "k", "basis", "mode", "mean_ratio", "stderr", "trials", "seed"], rows)
    write_manifest(out, "attenuation", _args_config(args))
    return 0


def cmd_table1(args):
    """Train all four models and reproduce the headline accuracy table."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = _load_dataset(args, "train")
    test = _load_dataset(args, "test")
    pair_train = data_mod.filter_pair(train, 3, 7)
    pair_test = data_mod.filter_pair(test, 3, 7)
    basis = Basis(BASIS_KINDS[args.basis], 28, 28, args.levels)
    clip = args.clip

    def svm_model(fe):
        config = TrainConfig(seed=args.seed, front_end=fe, dropout_rate=0.0,
                             clip_recon=clip, **SVM_DEFAULTS)
        return models_mod.train_linear_svm(pair_train.images, pair_train.labels, config)

    def net_model(fe):
        defaults = NET_DEFAULTS[args.arch]
        config = TrainConfig(seed=args.seed, front_end=fe, clip_recon=clip, **defaults)
        return models_mod.train_network(train.images, train.labels, config,
                                        models_mod.ARCH_PRESETS[args.arch])

    print("training SVMs (plain, defended)...")
    svm_plain = svm_model(None)
    svm_def = svm_model(FrontEndConfig(basis, args.svm_rho))
    print("training networks (plain, defended)...")
    net_plain = net_model(None)
    net_def = net_model(FrontEndConfig(basis, args.cnn_rho))

    rows = []
    results = {}

    def run(task, model, attack, defense, epsilon):
        report = attacks_mod.evaluate(
            model,
            pair_test if task == "svm" else test,
            AttackSpec(attack, epsilon, clip=clip),
        )
        measured = 100 * report.attacked_accuracy
        paper = PAPER_TABLE[(task, attack, defense)]
        rows.append([task, attack, defense, _fmt(measured), _fmt(paper),
                     _fmt(measured - paper)])
        results[(task, attack, defense)] = measured
        print(f"{task:>4} {attack:>10} {defense:>7}: measured {measured:6.2f}  paper {paper:6.2f}")

    for attack in ("semiwhite", "white"):
        run("svm", svm_plain, attack, "none", args.svm_epsilon)
    for attack in ("semiwhite", "white"):
        run("svm", svm_def, attack, "sparse", args.svm_epsilon)
    for attack in ("fgsm", "semiwhite", "white"):
        run("cnn", net_plain, attack, "none", args.cnn_epsilon)
    for attack in ("fgsm", "semiwhite", "white"):
        run("cnn", net_def, attack, "sparse", args.cnn_epsilon)

    clean_rows = []
    for task, model, ds in (("svm", svm_plain, pair_test), ("svm_defended", svm_def, pair_test),
                            ("cnn", net_plain, test), ("cnn_defended", net_def, test)):
        r = attacks_mod.evaluate(model, ds, AttackSpec("none", 0.0, clip=clip))
        clean_rows.append([task, _fmt(100 * r.clean_accuracy)])
        print(f"clean {task}: {100 * r.clean_accuracy:.2f}")

    write_csv(out / "report.csv",
              ["task", "attack", "defense", "measured", "paper", "delta"], rows)
    write_csv(out / "clean.csv", ["model", "clean_accuracy"], clean_rows)
    write_manifest(out, "table1", _args_config(args))

    ordered = (
        results[("cnn", "white", "sparse")]
        <= results[("cnn", "semiwhite", "sparse")]
        <= results[("cnn", "fgsm", "sparse")]
    )
    print(f"defended CNN ordering white <= semiwhite <= fgsm: {'OK' if ordered else 'VIOLATED'}")
    return 0


# ---------------------------------------------------------------------------
# Argument plumbing
# ---------------------------------------------------------------------------


def _args_config(args):
    config = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "config"):
            continue
        if isinstance(value, Path):
            value = str(value)
        config[key] = value
    return config


def _add_common(p):
    p.add_argument("--data", default=None, help="MNIST directory (default: $SPARSEFRONT_DATA_DIR)")
    p.add_argument("--out", default="runs/out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="key=value config file with flag defaults")


def _add_frontend_flags(p, rho):
    p.add_argument("--rho", type=float, default=rho, help="sparsity fraction K/N")
    p.add_argument("--basis", choices=sorted(BASIS_KINDS), default="cdf97")
    p.add_argument("--levels", type=int, default=1, help="wavelet decomposition levels")
    p.add_argument("--no-defense", action="store_true", help="train without the front end")
    p.add_argument("--clip", action="store_true",
                   help="physical pipeline: clamp images and reconstructions to [0,1]")


def _digits(text):
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected two digits like 3,7")
    return parts


def _float_list(text):
    return [float(p) for p in text.split(",") if p]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sparsefront",
        description="Sparsifying front-end defenses and locally-linear attacks on MNIST",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch-data", help="download and checksum the MNIST archives")
    p.add_argument("--data", default=None)
    p.add_argument("--base-url", default=None)
    p.set_defaults(func=cmd_fetch_data)

    p = sub.add_parser("train-svm", help="train the binary linear SVM")
    _add_common(p)
    _add_frontend_flags(p, rho=0.02)
    p.add_argument("--digits", type=_digits, default=[3, 7])
    p.add_argument("--epochs", type=int, default=SVM_DEFAULTS["epochs"])
    p.add_argument("--lr", type=float, default=SVM_DEFAULTS["learning_rate"])
    p.add_argument("--batch-size", type=int, default=SVM_DEFAULTS["batch_size"])
    p.add_argument("--weight-decay", type=float, default=SVM_DEFAULTS["weight_decay"])
    p.set_defaults(func=cmd_train_svm)

    p = sub.add_parser("train-net", help="train the feedforward network")
    _add_common(p)
    _add_frontend_flags(p, rho=0.03)
    p.add_argument("--arch", choices=sorted(models_mod.ARCH_PRESETS), default="reduced_dense")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.set_defaults(func=cmd_train_net)

    p = sub.add_parser("attack", help="attack a trained model over the test split")
    _add_common(p)
    p.add_argument("--model", required=True, help="model file from train-svm/train-net")
    p.add_argument("--attack", choices=["none", "fgsm", "semiwhite", "white"], required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--digits", type=_digits, default=[3, 7], help="digit pair for SVM models")
    p.add_argument("--clip", action="store_true")
    p.add_argument("--limit", type=int, default=0, help="evaluate only the first N samples")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="grid of rho x epsilon for the SVM task")
    _add_common(p)
    p.add_argument("--digits", type=_digits, default=[3, 7])
    p.add_argument("--rhos", type=_float_list, default=[0.01, 0.02, 0.03, 0.04, 0.05])
    p.add_argument("--epsilons", type=_float_list, default=[0.12])
    p.add_argument("--attack", choices=["semiwhite", "white"], default="white")
    p.add_argument("--basis", choices=sorted(BASIS_KINDS), default="cdf97")
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--clip", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attenuation", help="Monte Carlo attenuation-ratio study")
    p.add_argument("--out", default="runs/attenuation")
    p.add_argument("--config", default=None)
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--basis-kind", choices=["identity", "haar"], default="identity")
    p.add_argument("--mode", choices=["semiwhite", "white", "both"], default="both")
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_attenuation)

    p = sub.add_parser("table1", help="full reproduction of the headline table")
    _add_common(p)
    p.add_argument("--arch", choices=sorted(models_mod.ARCH_PRESETS), default="paper_cnn")
    p.add_argument("--basis", choices=sorted(BASIS_KINDS), default="cdf97")
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--svm-epsilon", type=float, default=0.12)
    p.add_argument("--svm-rho", type=float, default=0.02)
    p.add_argument("--cnn-epsilon", type=float, default=0.25)
    p.add_argument("--cnn-rho", type=float, default=0.03)
    p.add_argument("--clip", action="store_true", default=True,
                   help="physical [0,1] pipeline (default on for this command)")
    p.add_argument("--no-clip", dest="clip", action="store_false")
    p.set_defaults(func=cmd_table1)

    return parser


def _apply_config_file(parser, argv):
    # pre-scan for --config and install its key=value pairs as defaults
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    defaults = {}
    for line in Path(known.config).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        defaults[key.strip().replace("-", "_")] = value.strip()
    for action in parser._subparsers._group_actions:
        for sub_parser in action.choices.values():
            usable = {a.dest for a in sub_parser._actions}
            typed = {}
            for key, value in defaults.items():
                if key not in usable:
                    continue
                for a in sub_parser._actions:
                    if a.dest == key:
                        if a.type is not None:
                            typed[key] = a.type(value)
                        elif isinstance(a.default, bool) or a.const is True:
                            typed[key] = value.lower() in ("1", "true", "yes")
                        elif isinstance(a.default, int):
                            typed[key] = int(value)
                        elif isinstance(a.default, float):
                            typed[key] = float(value)
                        else:
                            typed[key] = value
            sub_parser.set_defaults(**typed)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    _apply_config_file(parser, argv)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, data_mod.IdxFormatError, models_mod.TrainingDivergence) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
