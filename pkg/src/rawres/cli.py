"""Command-line entry point: ``rawres <command> [options]``.

Exit codes: 0 ok, 2 usage, 3 environment/data, 4 numerical failure.
"""

import argparse
import dataclasses
import json
import logging
import os
import struct
import sys

import numpy as np

from . import audio, stats
from .datasets import DatasetError, make_split, synthetic_dataset
from .engine import NumericalError
from .io_utils import atomic_write_bytes, atomic_write_text
from .model import MAGIC, VERSION, CheckpointError, build_network, ledger_for, load_checkpoint, m34res_config, \
    save_checkpoint, slim2d_config
from .resblocks import BLOCK_KINDS
from .training import ConfigError, _prepare_dataset, build_features, clip_features, evaluate, load_config, \
    run_experiment, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("rawres")


class UsageError(Exception):
    pass


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="base random seed (default: config value or 0)")
    p.add_argument("--out", default=None, help="output file or directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="rawres", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("param-count", help="print the parameter ledger of a network")
    p.add_argument("--arch", choices=("m34res", "slim2d"), default="m34res")
    p.add_argument("--rb", required=True, help="residual block kind, RB1..RB6")
    p.add_argument("--csv", action="store_true", help="print CSV instead of the aligned table")
    _common(p)

    p = sub.add_parser("features", help="turn one WAV file into a network input")
    p.add_argument("--input", required=True)
    p.add_argument("--preprocessing", choices=("none", "scale_max", "standardize", "logmel"), default="logmel")
    p.add_argument("--seconds", type=float, default=4.0)
    p.add_argument("--format", choices=("csv", "bin"), default="csv")
    _common(p)

    p = sub.add_parser("train", help="train one network from an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--rb", default=None, help="block kind (default: first in config)")
    p.add_argument("--preprocessing", default=None, help="default: first in config")
    _common(p)

    p = sub.add_parser("evaluate", help="test accuracy of a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--preprocessing", default=None)
    _common(p)

    p = sub.add_parser("experiment", help="run the rb x preprocessing x repetition grid")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=None, help="parallel worker processes")
    _common(p)

    p = sub.add_parser("stats", help="ANOVA + Tukey-Kramer over a results CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--results2", default=None, help="second dataset's results for matching cells")
    p.add_argument("--alpha", type=float, default=0.05)
    _common(p)

    p = sub.add_parser("synth", help="write the synthetic tone corpus")
    p.add_argument("--clips-per-class", type=int, default=2)
    p.add_argument("--seconds", type=float, default=0.5)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--classes", type=int, default=10)
    _common(p)
    return parser


def _write_or_print(text, out):
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_param_count(args):
    if args.rb not in BLOCK_KINDS:
        raise UsageError(f"unknown block kind {args.rb!r}; expected one of {', '.join(BLOCK_KINDS)}")
    config = m34res_config(args.rb) if args.arch == "m34res" else slim2d_config(args.rb)
    ledger = ledger_for(config)
    text = ledger.to_csv() if args.csv else ledger.format() + "\n"
    if args.out:
        atomic_write_text(args.out, ledger.to_csv())
    sys.stdout.write(text)
    return EXIT_OK


def tensor_bytes(name, arr):
    manifest = json.dumps({"tensors": [[name, list(arr.shape)]]}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<BI", VERSION, len(manifest)) + manifest + np.ascontiguousarray(arr, "<f4").tobytes()


def cmd_features(args):
    clip = audio.load_wav(args.input)
    feat = clip_features(clip, args.preprocessing, args.seconds)
    if args.preprocessing == "logmel":
        # band standardisation needs training-set statistics, so it is left to the caller
        feat = audio.pad_frames(feat, audio.n_frames(int(round(args.seconds * audio.TARGET_SR))))
    arr = np.atleast_2d(feat)
    if args.format == "bin":
        if not args.out:
            raise UsageError("--format bin needs --out")
        atomic_write_bytes(args.out, tensor_bytes(args.preprocessing, arr))
        return EXIT_OK
    text = "\n".join(",".join(repr(float(v)) for v in row) for row in arr) + "\n"
    _write_or_print(text, args.out)
    return EXIT_OK


def _single_run_setup(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    rb = getattr(args, "rb", None) or cfg.rb_kinds[0]
    if rb not in BLOCK_KINDS:
        raise UsageError(f"unknown block kind {rb!r}")
    preproc = args.preprocessing or cfg.preprocessing[0]
    if args.command == "train":
        work = args.out or "run"
    else:
        # evaluate: the corpus built by `train` sits next to the checkpoint
        work = os.path.dirname(os.path.abspath(args.checkpoint))
    spec = _prepare_dataset(cfg, work)
    split = make_split(spec, cfg.strict_holdout)
    data = build_features(spec, split, preproc)
    return cfg, rb, preproc, data


def cmd_train(args):
    cfg, rb, preproc, data = _single_run_setup(args)
    arch = "slim2d" if preproc == "logmel" else "m34res"
    net = build_network(arch, rb, cfg.n_classes, seed=cfg.seed, **cfg.arch_overrides(2 if arch == "slim2d" else 1))
    result = train(net, data, cfg.hyper(), seed=cfg.seed + 1, rb_kind=rb, preprocessing=preproc, dataset=cfg.dataset)
    out = args.out or "run"
    os.makedirs(out, exist_ok=True)
    save_checkpoint(net, os.path.join(out, "model.rbn"))
    atomic_write_text(os.path.join(out, "history.json"),
                      json.dumps(dataclasses.asdict(result), indent=2, sort_keys=True) + "\n")
    print(f"{rb} {preproc}: test accuracy {100 * result.test_accuracy:.2f}% after {result.epochs} epochs")
    return EXIT_OK


def cmd_evaluate(args):
    net = load_checkpoint(args.checkpoint)
    args.rb = net.rb_kind
    cfg, rb, preproc, data = _single_run_setup(args)
    acc = evaluate(net, data["x_test"], data["y_test"])
    text = f"accuracy={acc!r}\n"
    _write_or_print(text, args.out)
    return EXIT_OK


def cmd_experiment(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.jobs is not None:
        cfg = dataclasses.replace(cfg, jobs=args.jobs)
    out = args.out or "results"
    table = run_experiment(cfg, out)
    summary = table.summary()
    for preproc, row in summary.items():
        cells = "  ".join(f"{rb}={v['formatted']}" for rb, v in row.items())
        print(f"{preproc}: {cells}")
    print(f"config hash {cfg.digest()}; results in {out}")
    return EXIT_OK


def cmd_stats(args):
    results = stats.read_results_csv(args.results)
    matrices = stats.analyze_results(results, args.alpha)
    if not matrices:
        raise UsageError("results need at least two block kinds with two repetitions each")
    matches = None
    if args.results2:
        other = stats.analyze_results(stats.read_results_csv(args.results2), args.alpha)
        matches = {}
        for block, m in matrices.items():
            if block in other and other[block].labels == m.labels:
                matches[block] = stats.matching_matrix(m, other[block])
    report = stats.render_significance(matrices, matches)
    report += f"alpha={args.alpha} (assumed significance level)\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        atomic_write_text(os.path.join(args.out, "significance.csv"), stats.matrix_to_csv(matrices))
        atomic_write_text(os.path.join(args.out, "report.txt"), report)
        if matches:
            lines = ["block,row,col,match"]
            for block, mm in matches.items():
                labels = matrices[block].labels
                for i, a in enumerate(labels):
                    for j, b in enumerate(labels):
                        lines.append(f"{block},{a},{b},{mm[i, j]}")
            atomic_write_text(os.path.join(args.out, "matching.csv"), "\n".join(lines) + "\n")
    sys.stdout.write(report)
    return EXIT_OK


def cmd_synth(args):
    out = args.out or "synthetic"
    spec = synthetic_dataset(out, args.seed or 0, args.classes, args.clips_per_class, args.seconds, args.folds,
                             args.sample_rate)
    print(f"wrote {len(spec.clips)} clips to {out}")
    return EXIT_OK


COMMANDS = {
    "param-count": cmd_param_count,
    "features": cmd_features,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "stats": cmd_stats,
    "synth": cmd_synth,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"rawres {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"rawres {args.command}: missing path: {exc.filename or exc}", file=sys.stderr)
        return EXIT_DATA
    except (DatasetError, audio.WavError, CheckpointError, stats.ResultsFormatError) as exc:
        print(f"rawres {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ArithmeticError) as exc:
        print(f"rawres {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
