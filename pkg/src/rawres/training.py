"""Adam, L2, the plateau/early-stop schedule, the training loop and the
repeated-run experiment grid."""

import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import audio
from .datasets import load_dataset, make_split, synthetic_dataset
from .engine import NumericalError, derive_seed, make_rng
from .io_utils import atomic_write_text
from .layers import softmax_cross_entropy
from .model import build_network
from .resblocks import check_kind

log = logging.getLogger(__name__)

PREPROCESSING = ("none", "scale_max", "standardize", "logmel")


class ConfigError(ValueError):
    pass


# --- optimiser ---------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """In-place Adam update of ``params`` (dict name -> array)."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {key}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {key} at step {state.t}")
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


def network_params(network):
    """name -> array views of every trainable tensor, plus matching grads."""
    params, grads = {}, {}
    for layer, key in network.parameters():
        name = f"{layer.name}/{key}"
        params[name] = layer.params[key]
        grads[name] = layer.grads[key]
    return params, grads


def regularized_keys(network, l2_all=False):
    keys = []
    for layer, key in network.parameters():
        if l2_all or key in layer.kernel_keys:
            keys.append(f"{layer.name}/{key}")
    return keys


def apply_l2(loss, grads, weights, lam=1e-4):
    """Add lam * sum(w^2) to the loss and 2*lam*w to each gradient.

    ``weights`` maps name -> array for the regularised subset; ``grads`` is
    updated in place for those names.
    """
    if lam == 0:
        return loss, grads
    penalty = 0.0
    for name, w in weights.items():
        penalty += float(np.sum(w * w))
        grads[name] = grads[name] + 2.0 * lam * w
    return loss + lam * penalty, grads


# --- schedule ----------------------------------------------------------------

@dataclass
class ScheduleState:
    lr: float = 1e-3
    best_val_acc: float = 0.0
    epochs_since_improve_lr: int = 0
    epochs_since_improve_stop: int = 0
    patience_lr: int = 15
    patience_stop: int = 50
    factor: float = 0.2
    min_delta: float = 1e-4
    epoch: int = 0


def epoch_end(schedule, val_acc):
    """Advance one epoch; returns ``(lr, stop)``.

    An improvement (``val_acc > best + min_delta``) resets both counters.
    Otherwise the LR counter reaching ``patience_lr`` multiplies the LR by
    ``factor`` and restarts, and the stop counter reaching ``patience_stop``
    ends training.
    """
    schedule.epoch += 1
    if val_acc > schedule.best_val_acc + schedule.min_delta:
        schedule.best_val_acc = val_acc
        schedule.epochs_since_improve_lr = 0
        schedule.epochs_since_improve_stop = 0
        return schedule.lr, False
    schedule.epochs_since_improve_lr += 1
    schedule.epochs_since_improve_stop += 1
    if schedule.epochs_since_improve_lr >= schedule.patience_lr:
        schedule.lr *= schedule.factor
        schedule.epochs_since_improve_lr = 0
    stop = schedule.epochs_since_improve_stop >= schedule.patience_stop
    return schedule.lr, stop


# --- training loop -----------------------------------------------------------

@dataclass
class Hyper:
    epochs: int = 400
    batch_size: int = 128
    lr: float = 1e-3
    lr_factor: float = 0.2
    patience_lr: int = 15
    patience_stop: int = 50
    min_delta: float = 1e-4
    l2: float = 1e-4
    l2_all: bool = False
    # stop once an epoch's training accuracy hits 1.0
    stop_on_train_fit: bool = False


@dataclass
class RunResult:
    rb_kind: str
    preprocessing: str
    dataset: str
    repetition: int
    test_accuracy: float
    epochs: int
    lr_trace: list
    history: list = field(default_factory=list)
    initial_loss: float = float("nan")


def mean_loss(network, x, y, batch_size=128):
    """Inference-mode cross-entropy averaged over all examples."""
    y = np.asarray(y)
    total = 0.0
    for start in range(0, y.size, batch_size):
        logits = network.forward(x[start:start + batch_size], training=False)
        loss, _, _ = softmax_cross_entropy(logits, y[start:start + batch_size])
        total += loss * logits.shape[0]
    return total / y.size


def evaluate(network, x, y, batch_size=128):
    """Inference-mode accuracy; argmax ties resolve to the lowest class."""
    y = np.asarray(y)
    if y.size == 0:
        return float("nan")
    correct = 0
    for start in range(0, y.size, batch_size):
        logits = network.forward(x[start:start + batch_size], training=False)
        correct += int(np.sum(np.argmax(logits, axis=1) == y[start:start + batch_size]))
    return correct / y.size


def train(network, data, hyper, seed=0, rb_kind=None, preprocessing="", dataset=""):
    """Mini-batch Adam training with plateau LR decay and early stopping.

    ``data`` is a dict with ``x_train, y_train, x_val, y_val, x_test, y_test``.
    BN runs in training mode on batches; validation (for the schedule) and the
    final test evaluation use inference mode.
    """
    rng = make_rng(seed)
    x_tr, y_tr = data["x_train"], np.asarray(data["y_train"])
    x_val, y_val = data["x_val"], np.asarray(data["y_val"])
    n = y_tr.size
    if n == 0:
        raise ValueError("empty training set")
    opt = OptimState(lr=hyper.lr)
    schedule = ScheduleState(lr=hyper.lr, patience_lr=hyper.patience_lr, patience_stop=hyper.patience_stop,
                             factor=hyper.lr_factor, min_delta=hyper.min_delta)
    schedule.best_val_acc = evaluate(network, x_val, y_val, hyper.batch_size)
    params, _ = network_params(network)
    reg = regularized_keys(network, hyper.l2_all)
    history = []
    lr_trace = []
    initial_loss = mean_loss(network, x_tr, y_tr, hyper.batch_size)
    epoch = 0
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            loss, probs = network.loss_and_grads(x_tr[idx], y_tr[idx], training=True)
            _, grads = network_params(network)
            loss, grads = apply_l2(loss, grads, {k: params[k] for k in reg}, hyper.l2)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            opt.lr = schedule.lr
            adam_step(params, grads, opt)
            loss_sum += loss * idx.size
            correct += int(np.sum(np.argmax(probs, axis=1) == y_tr[idx]))
        train_acc = correct / n
        val_acc = evaluate(network, x_val, y_val, hyper.batch_size)
        lr_trace.append(schedule.lr)
        history.append({"epoch": epoch, "loss": loss_sum / n, "train_acc": train_acc, "val_acc": val_acc,
                        "lr": schedule.lr})
        log.debug("epoch %d loss %.4f train %.3f val %.3f lr %.2g", epoch, loss_sum / n, train_acc, val_acc, schedule.lr)
        _, stop = epoch_end(schedule, val_acc)
        if stop or (hyper.stop_on_train_fit and train_acc == 1.0):
            break
    test_acc = evaluate(network, data["x_test"], data["y_test"], hyper.batch_size)
    return RunResult(rb_kind or network.rb_kind, preprocessing, dataset, 0, test_acc, epoch, lr_trace,
                     history, initial_loss)


# --- features ----------------------------------------------------------------

def clip_features(clip, preprocessing, clip_seconds):
    """Resample, fit length and normalise one clip; logmel returns the
    unstandardised spectrogram (padding happens after standardisation)."""
    c = audio.resample(clip, audio.TARGET_SR)
    if preprocessing == "logmel":
        n = int(round(clip_seconds * audio.TARGET_SR))
        if c.samples.size > n:
            c = audio.fit_length(c, clip_seconds)
        return audio.log_mel(c)
    c = audio.fit_length(c, clip_seconds)
    return audio.normalize(c, preprocessing).samples


def build_features(spec, split, preprocessing, cache=None):
    """Arrays for train/val/test; log-Mel bands standardised with
    statistics from the training partition only."""
    if preprocessing not in PREPROCESSING:
        raise ConfigError(f"unknown preprocessing {preprocessing!r}")
    per_clip = {}
    needed = sorted(set(split.train) | set(split.validation) | set(split.test))
    for i in needed:
        ref = spec.clips[i]
        key = (spec.path(ref), preprocessing)
        if cache is not None and key in cache:
            per_clip[i] = cache[key]
            continue
        clip = audio.load_wav(spec.path(ref), ref.label, ref.fold)
        per_clip[i] = clip_features(clip, preprocessing, spec.clip_seconds)
        if cache is not None:
            cache[key] = per_clip[i]
    if preprocessing == "logmel":
        stats = audio.fit_channel_stats([per_clip[i] for i in split.train])
        frames = audio.n_frames(int(round(spec.clip_seconds * audio.TARGET_SR)))
        per_clip = {i: audio.pad_frames(audio.channel_standardize(s, stats), frames) for i, s in per_clip.items()}

    def stack(idx):
        if not idx:
            shape = next(iter(per_clip.values())).shape if per_clip else (0,)
            return np.zeros((0,) + shape), np.zeros(0, dtype=np.int64)
        return np.stack([per_clip[i] for i in idx]), np.array([spec.clips[i].label for i in idx], dtype=np.int64)

    x_tr, y_tr = stack(split.train)
    x_val, y_val = stack(split.validation)
    x_te, y_te = stack(split.test)
    return {"x_train": x_tr, "y_train": y_tr, "x_val": x_val, "y_val": y_val, "x_test": x_te, "y_test": y_te}


# --- experiment config -------------------------------------------------------

@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    root: str = ""
    rb_kinds: tuple = ("RB1", "RB2", "RB3", "RB4", "RB5", "RB6")
    preprocessing: tuple = ("none",)
    repetitions: int = 10
    seed: int = 0
    epochs: int = 400
    batch_size: int = 128
    lr: float = 1e-3
    lr_factor: float = 0.2
    patience_lr: int = 15
    patience_stop: int = 50
    min_delta: float = 1e-4
    l2: float = 1e-4
    l2_all: bool = False
    strict_holdout: bool = False
    clip_seconds: float = 0.0
    n_classes: int = 10
    # reduced-architecture overrides; empty = full-size network
    widths: tuple = ()
    depths: tuple = ()
    stem_filters: int = 0
    stem_kernel: int = 0
    stem_stride: int = 0
    stem_pool: int = 0
    # synthetic corpus generation (dataset=synthetic)
    synthetic_clips_per_class: int = 2
    synthetic_folds: int = 5
    synthetic_sample_rate: int = 8000
    jobs: int = 1

    def hyper(self):
        return Hyper(self.epochs, self.batch_size, self.lr, self.lr_factor, self.patience_lr,
                     self.patience_stop, self.min_delta, self.l2, self.l2_all)

    def arch_overrides(self, rank):
        o = {}
        if self.widths:
            o["widths"] = tuple(self.widths)
        if self.depths:
            o["depths"] = tuple(self.depths)
        if self.stem_filters:
            o["stem_filters"] = self.stem_filters
        if rank == 1:
            if self.stem_kernel:
                o["stem_kernel"] = (self.stem_kernel,)
            if self.stem_stride:
                o["stem_stride"] = (self.stem_stride,)
            if self.stem_pool:
                o["stem_pool"] = (self.stem_pool,)
        else:
            if self.stem_kernel:
                o["stem_kernel"] = (1, self.stem_kernel)
            if self.stem_stride:
                o["stem_stride"] = (1, self.stem_stride)
            if self.stem_pool:
                o["stem_pool"] = (1, self.stem_pool)
        return o

    def effective_clip_seconds(self):
        if self.clip_seconds:
            return self.clip_seconds
        return {"urbansound8k": 4.0, "esc10": 5.0}.get(self.dataset, 0.5)

    def canonical(self):
        d = asdict(self)
        d.pop("jobs")
        return json.dumps(d, sort_keys=True)

    def digest(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


_TUPLE_STR = {"rb_kinds", "preprocessing"}
_TUPLE_INT = {"widths", "depths"}


def parse_config_text(text):
    """Flat ``key = value`` lines; '#' starts a comment; lists are comma-separated."""
    defaults = ExperimentConfig()
    fields = {f: getattr(defaults, f) for f in defaults.__dataclass_fields__}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        default = fields[key]
        try:
            if key in _TUPLE_STR:
                values[key] = tuple(v.strip() for v in val.split(",") if v.strip())
            elif key in _TUPLE_INT:
                values[key] = tuple(int(v) for v in val.split(",") if v.strip())
            elif isinstance(default, bool):
                if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(val)
                values[key] = val.lower() in ("true", "1", "yes")
            elif isinstance(default, int):
                values[key] = int(val)
            elif isinstance(default, float):
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {val!r} for {key}") from None
    cfg = ExperimentConfig(**values)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    for kind in cfg.rb_kinds:
        try:
            check_kind(kind)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if not cfg.rb_kinds:
        raise ConfigError("rb_kinds is empty")
    for p in cfg.preprocessing:
        if p not in PREPROCESSING:
            raise ConfigError(f"unknown preprocessing {p!r}; expected one of {PREPROCESSING}")
    if cfg.dataset not in ("urbansound8k", "esc10", "synthetic"):
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    if cfg.repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    if cfg.batch_size < 1 or cfg.epochs < 1:
        raise ConfigError("batch_size and epochs must be >= 1")


def load_config(path):
    with open(path) as fh:
        return parse_config_text(fh.read())


# --- experiment grid ---------------------------------------------------------

@dataclass
class AccuracyTable:
    """Per-(preprocessing, rb) lists of test accuracies."""

    dataset: str
    cells: dict = field(default_factory=dict)  # (preproc, rb) -> list of (rep, acc, epochs)
    failures: list = field(default_factory=list)

    def groups(self, preprocessing):
        out = {}
        for (p, rb), rows in sorted(self.cells.items()):
            if p == preprocessing:
                out[rb] = [acc for _, acc, _ in sorted(rows)]
        return out

    def summary(self):
        out = {}
        for (p, rb), rows in sorted(self.cells.items()):
            accs = [acc for _, acc, _ in sorted(rows)]
            std = float(np.std(accs, ddof=1)) if len(accs) > 1 else float("nan")
            out.setdefault(p, {})[rb] = {
                "n": len(accs),
                "mean": float(np.mean(accs)),
                "std": std,
                "usable": len(accs) >= 2,
                "formatted": f"{100 * np.mean(accs):.2f}±{100 * std:.2f}%" if len(accs) > 1 else f"{100 * np.mean(accs):.2f}%",
            }
        return out

    def to_csv(self):
        lines = ["rb,preproc,rep,accuracy,epochs"]
        for (p, rb), rows in sorted(self.cells.items(), key=lambda kv: (kv[0][0], kv[0][1])):
            for rep, acc, epochs in sorted(rows):
                lines.append(f"{rb},{p},{rep},{acc!r},{epochs}")
        return "\n".join(lines) + "\n"


def mean_std(values):
    """Mean and sample (n-1) standard deviation."""
    values = np.asarray(values, dtype=float)
    return float(values.mean()), float(values.std(ddof=1)) if values.size > 1 else float("nan")


def _prepare_dataset(cfg, work_dir="."):
    seconds = cfg.effective_clip_seconds()
    if cfg.dataset == "synthetic":
        root = cfg.root or os.path.join(work_dir, f"synthetic-corpus-seed{cfg.seed}")
        meta = os.path.join(root, "metadata.csv")
        if not os.path.exists(meta):
            synthetic_dataset(root, cfg.seed, cfg.n_classes, cfg.synthetic_clips_per_class, seconds,
                              cfg.synthetic_folds, cfg.synthetic_sample_rate)
        spec = load_dataset("synthetic", root, seconds)
    else:
        if not cfg.root or not os.path.isdir(cfg.root):
            raise FileNotFoundError(cfg.root or "<empty root>")
        spec = load_dataset(cfg.dataset, cfg.root, seconds)
        spec.drop_missing()
    return spec


def _run_cell(args):
    cfg, spec, split, preproc, rb, rep, data = args
    arch = "slim2d" if preproc == "logmel" else "m34res"
    rank = 2 if arch == "slim2d" else 1
    seed = derive_seed(cfg.seed, preproc, rb, rep)
    net = build_network(arch, rb, cfg.n_classes, seed=derive_seed(seed, "init"), **cfg.arch_overrides(rank))
    try:
        result = train(net, data, cfg.hyper(), seed=derive_seed(seed, "shuffle"), rb_kind=rb,
                       preprocessing=preproc, dataset=cfg.dataset)
    except NumericalError as exc:
        return preproc, rb, rep, None, str(exc)
    result.repetition = rep
    return preproc, rb, rep, result, None


def run_experiment(cfg, out_dir=None):
    """Run every (preprocessing, rb, repetition) cell; write results if
    ``out_dir`` is given.  Returns the :class:`AccuracyTable`."""
    validate_config(cfg)
    spec = _prepare_dataset(cfg, out_dir or ".")
    split = make_split(spec, cfg.strict_holdout)
    table = AccuracyTable(cfg.dataset)
    started = time.time()
    cache = {}
    jobs = []
    for preproc in cfg.preprocessing:
        data = build_features(spec, split, preproc, cache)
        for rb in cfg.rb_kinds:
            for rep in range(cfg.repetitions):
                jobs.append((cfg, spec, split, preproc, rb, rep, data))
    n_workers = max(1, min(cfg.jobs, _thread_cap()))
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            outcomes = list(pool.map(_run_cell, jobs))
    else:
        outcomes = [_run_cell(j) for j in jobs]
    for preproc, rb, rep, result, err in outcomes:
        table.cells.setdefault((preproc, rb), [])
        if result is None:
            table.failures.append({"preproc": preproc, "rb": rb, "rep": rep, "error": err})
        else:
            table.cells[(preproc, rb)].append((rep, result.test_accuracy, result.epochs))
    if out_dir is not None:
        write_results(table, cfg, out_dir, spec)
    log.info("experiment finished in %.1fs", time.time() - started)
    return table


def _thread_cap():
    try:
        return max(1, int(os.environ.get("RAWRES_THREADS", "0")) or os.cpu_count() or 1)
    except ValueError:
        return 1


def write_results(table, cfg, out_dir, spec=None):
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "results.csv"), table.to_csv())
    summary = {
        "config": json.loads(cfg.canonical()),
        "config_hash": cfg.digest(),
        "dataset": table.dataset,
        "cells": table.summary(),
        "failures": table.failures,
        "deviations": list(spec.deviations) if spec is not None else [],
    }
    atomic_write_text(os.path.join(out_dir, "summary.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
