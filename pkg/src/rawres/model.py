"""Network assembly, parameter ledger and checkpoint I/O.

Two architectures share one skeleton::

    stem:   conv(stem_kernel, stem_stride, 48) -> BN -> ReLU -> maxpool
    stages: [residual block x depth] (+ maxpool) per stage
    head:   global average pool -> dense -> softmax

``m34res`` is the 1D raw-waveform network (depths 3/4/6/3, widths
48/96/192/384).  ``slim2d`` takes a 64-band log-Mel spectrogram and uses
(3,3) blocks with depths 1/2/3/1 and a (4,4) pool after every stage.
"""

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import DTYPE, make_rng
from .layers import BatchNorm, Conv, Dense, GlobalAvgPool, MaxPool, ReLU, softmax, softmax_cross_entropy
from .resblocks import ResidualBlock, block_param_count, check_kind

N_MELS = 64


@dataclass(frozen=True)
class ArchConfig:
    rank: int
    rb_kind: str
    n_classes: int = 10
    # 0 = same as the first stage width
    stem_filters: int = 0
    stem_kernel: tuple = (80,)
    stem_stride: tuple = (4,)
    stem_pool: tuple = (4,)
    widths: tuple = (48, 96, 192, 384)
    depths: tuple = (3, 4, 6, 3)
    block_kernel: tuple = (3,)
    # pool window after each stage, None for no pool
    stage_pools: tuple = ((4,), (4,), (4,), None)
    pool_padding: str = "valid"
    name: str = "m34res"
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99

    def __post_init__(self):
        check_kind(self.rb_kind)
        if not self.stem_filters:
            object.__setattr__(self, "stem_filters", int(self.widths[0]))
        if self.rank not in (1, 2):
            raise ValueError(f"rank must be 1 or 2, got {self.rank}")
        if len(self.widths) != len(self.depths) or len(self.widths) != len(self.stage_pools):
            raise ValueError("widths, depths and stage_pools must have equal length")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("stem_kernel", "stem_stride", "stem_pool", "widths", "depths", "block_kernel"):
            d[key] = tuple(d[key])
        d["stage_pools"] = tuple(None if p is None else tuple(p) for p in d["stage_pools"])
        return cls(**d)


def m34res_config(rb_kind, n_classes=10, **overrides):
    return ArchConfig(rank=1, rb_kind=rb_kind, n_classes=n_classes, **overrides)


def slim2d_config(rb_kind, n_classes=10, **overrides):
    base = dict(
        stem_kernel=(1, 80),
        stem_stride=(1, 4),
        stem_pool=(1, 4),
        depths=(1, 2, 3, 1),
        block_kernel=(3, 3),
        stage_pools=((4, 4),) * 4,
        pool_padding="same",
        name="slim2d",
    )
    base.update(overrides)
    return ArchConfig(rank=2, rb_kind=rb_kind, n_classes=n_classes, **base)


class Network:
    def __init__(self, config, seed=0):
        self.config = config
        rng = make_rng(seed)
        c = config
        r = c.rank
        self.stem = [
            Conv(1, c.stem_filters, c.stem_kernel, c.stem_stride, r, rng, name="stem/conv"),
            BatchNorm(c.stem_filters, c.bn_epsilon, c.bn_momentum, name="stem/bn"),
            ReLU(name="stem/relu"),
            MaxPool(c.stem_pool, r, c.pool_padding, name="stem/pool"),
        ]
        self.stages = []
        channels = c.stem_filters
        for s, (width, depth, pool) in enumerate(zip(c.widths, c.depths, c.stage_pools)):
            blocks = []
            for b in range(depth):
                blocks.append(ResidualBlock(c.rb_kind, r, channels, width, c.block_kernel, rng,
                                            name=f"stage{s + 1}/block{b + 1}",
                                            bn_epsilon=c.bn_epsilon, bn_momentum=c.bn_momentum))
                channels = width
            pool_layer = None if pool is None else MaxPool(pool, r, c.pool_padding, name=f"stage{s + 1}/pool")
            self.stages.append((blocks, pool_layer))
        self.gap = GlobalAvgPool(name="head/gap")
        self.dense = Dense(channels, c.n_classes, rng, name="head/dense")

    @property
    def rb_kind(self):
        return self.config.rb_kind

    @property
    def rank(self):
        return self.config.rank

    def modules(self):
        """Layers and blocks in execution order."""
        out = list(self.stem)
        for blocks, pool in self.stages:
            out.extend(blocks)
            if pool is not None:
                out.append(pool)
        out.extend([self.gap, self.dense])
        return out

    def layers(self):
        """Flat list of leaf layers in execution (= ledger) order."""
        out = []
        for m in self.modules():
            out.extend(m.layers if isinstance(m, ResidualBlock) else [m])
        return out

    def parameters(self):
        """Yield (layer, key) for every trainable tensor."""
        for layer in self.layers():
            for key in layer.params:
                yield layer, key

    def state_tensors(self):
        """(name, array) for all trainable and non-trainable tensors, ledger order."""
        out = []
        for layer in self.layers():
            for key, arr in layer.params.items():
                out.append((f"{layer.name}/{key}", arr))
            for key, arr in layer.buffers.items():
                out.append((f"{layer.name}/{key}", arr))
        return out

    def _prepare(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim == self.rank + 1:
            x = x[..., None]
        if x.ndim != self.rank + 2 or x.shape[-1] != 1:
            raise ValueError(f"expected input of shape (batch, {'length' if self.rank == 1 else 'mels, frames'}[, 1]), got {x.shape}")
        if self.rank == 2 and x.shape[1] != N_MELS:
            raise ValueError(f"2D input must have {N_MELS} mel bands, got {x.shape[1]}")
        self.feature_shape(x.shape[1:-1])
        return x

    def feature_shape(self, spatial):
        """Spatial extent entering global pooling; raises if a pool cannot fit."""
        spatial = tuple(spatial)
        for m in self.modules():
            if isinstance(m, (Conv, MaxPool)):
                spatial = m.output_shape(spatial)
        if any(e < 1 for e in spatial):
            raise ValueError(f"input collapses to extent {spatial}")
        return spatial

    def forward(self, x, training=False):
        """Return logits of shape (batch, n_classes)."""
        h = self._prepare(x)
        for m in self.modules():
            h = m.forward(h, training)
        return h

    def predict_proba(self, x):
        return softmax(self.forward(x, training=False))

    def backward(self, dlogits):
        g = dlogits
        for m in reversed(self.modules()):
            g = m.backward(g)
        return g

    def loss_and_grads(self, x, labels, training=True):
        logits = self.forward(x, training)
        loss, probs, dlogits = softmax_cross_entropy(logits, labels)
        self.backward(dlogits)
        return loss, probs

    def ledger(self):
        rows = [(layer.name, layer.n_trainable, layer.n_non_trainable) for layer in self.layers()
                if layer.n_trainable or layer.n_non_trainable]
        return ParamLedger(rows)


@dataclass
class ParamLedger:
    rows: list = field(default_factory=list)

    @property
    def trainable(self):
        return sum(r[1] for r in self.rows)

    @property
    def non_trainable(self):
        return sum(r[2] for r in self.rows)

    @property
    def total(self):
        return self.trainable + self.non_trainable

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "trainable", "non_trainable"])
        w.writerows(self.rows)
        return buf.getvalue()

    def format(self):
        width = max([len(r[0]) for r in self.rows] + [5])
        lines = [f"{'layer':<{width}}  {'trainable':>10}  {'non_trainable':>13}"]
        for name, t, n in self.rows:
            lines.append(f"{name:<{width}}  {t:>10,}  {n:>13,}")
        lines.append(f"{'total':<{width}}  {self.trainable:>10,}  {self.non_trainable:>13,}")
        lines.append(f"total parameters: {self.total:,}")
        return "\n".join(lines)


def ledger_for(config):
    """Parameter ledger computed from the config alone (no weights allocated)."""
    c = config
    rows = [
        ("stem/conv", Conv.param_count(c.stem_kernel, 1, c.stem_filters), 0),
        ("stem/bn", 2 * c.stem_filters, 2 * c.stem_filters),
    ]
    channels = c.stem_filters
    for s, (width, depth) in enumerate(zip(c.widths, c.depths)):
        for b in range(depth):
            name = f"stage{s + 1}/block{b + 1}"
            rows.extend(_block_rows(c.rb_kind, channels, width, c.block_kernel, name))
            channels = width
    rows.append(("head/dense", Dense.param_count(channels, c.n_classes), 0))
    return ParamLedger(rows)


def _block_rows(kind, c_in, c_out, kernel, name):
    from .resblocks import WIRING

    k = int(np.prod(kernel))
    branch, post = WIRING[kind]
    rows = []
    channels = c_in
    for i, code in enumerate(branch):
        if code == "C":
            rows.append((f"{name}/branch{i}_C", Conv.param_count((k,), channels, c_out), 0))
            channels = c_out
        elif code == "B":
            rows.append((f"{name}/branch{i}_B", 2 * channels, 2 * channels))
    for i, code in enumerate(post):
        if code == "B":
            rows.append((f"{name}/post{i}_B", 2 * c_out, 2 * c_out))
    total = sum(r[1] + r[2] for r in rows)
    expect = block_param_count(kind, c_in, c_out, kernel)
    assert total == expect["trainable"] + expect["non_trainable"]
    return rows


def count_parameters(network):
    return network.ledger()


def build_m34res(rb_kind, n_classes=10, input_length=None, seed=0, **overrides):
    """Build the 1D raw-waveform network; ``input_length`` is validated if given."""
    net = Network(m34res_config(rb_kind, n_classes, **overrides), seed)
    if input_length is not None:
        if input_length < 1024 and not overrides:
            raise ValueError(f"input_length must be >= 1024, got {input_length}")
        net.feature_shape((input_length,))
    return net


def build_slim2d(rb_kind, n_classes=10, input_shape=None, seed=0, **overrides):
    """Build the 2D log-Mel network; ``input_shape`` = (64, frames) if given."""
    net = Network(slim2d_config(rb_kind, n_classes, **overrides), seed)
    if input_shape is not None:
        mels, frames = input_shape
        if mels != N_MELS:
            raise ValueError(f"mel axis must be {N_MELS}, got {mels}")
        if frames < 80:
            raise ValueError(f"need at least 80 frames, got {frames}")
        net.feature_shape((mels, frames))
    return net


def build_network(arch, rb_kind, n_classes=10, seed=0, **overrides):
    if arch == "m34res":
        return Network(m34res_config(rb_kind, n_classes, **overrides), seed)
    if arch == "slim2d":
        return Network(slim2d_config(rb_kind, n_classes, **overrides), seed)
    raise ValueError(f"unknown architecture {arch!r}; expected 'm34res' or 'slim2d'")


def min_valid_frames(config, mels=N_MELS, limit=1 << 20):
    """Smallest time extent that survives every pool, or None if no time
    extent can (for 2D, when the mel axis itself is exhausted)."""
    lead = (mels,) if config.rank == 2 else ()
    try:
        _extent_chain(config, lead + (limit,))
    except ValueError:
        return None
    lo, hi = 1, limit
    while lo < hi:
        mid = (lo + hi) // 2
        try:
            _extent_chain(config, lead + (mid,))
            hi = mid
        except ValueError:
            lo = mid + 1
    return lo


def _extent_chain(config, spatial):
    c = config
    ext = list(spatial)

    def conv(kernel, stride):
        for i, s in enumerate(stride):
            ext[i] = -(-ext[i] // s)

    def pool(size):
        for i, s in enumerate(size):
            if c.pool_padding == "valid":
                if ext[i] < s:
                    raise ValueError(f"axis {i}: extent {ext[i]} < pool {s}")
                ext[i] //= s
            else:
                ext[i] = -(-ext[i] // s)

    conv(c.stem_kernel, c.stem_stride)
    pool(c.stem_pool)
    for p in c.stage_pools:
        if p is not None:
            pool(p)
    return tuple(ext)


# --- checkpoints -------------------------------------------------------------

MAGIC = b"RBN1"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def checkpoint_bytes(network):
    tensors = network.state_tensors()
    manifest = {
        "arch": network.config.to_dict(),
        "tensors": [[name, list(arr.shape)] for name, arr in tensors],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<BI", VERSION, len(blob)), blob]
    for _, arr in tensors:
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(network, path):
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_bytes(network))


def network_from_bytes(data):
    if len(data) < 9:
        raise CheckpointError("truncated header", len(data))
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}", 0)
    version, mlen = struct.unpack_from("<BI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    offset = 9
    if offset + mlen > len(data):
        raise CheckpointError("truncated manifest", len(data))
    try:
        manifest = json.loads(data[offset:offset + mlen].decode())
        config = ArchConfig.from_dict(manifest["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed manifest: {exc}", offset) from None
    offset += mlen
    net = Network(config, seed=0)
    live = dict(net.state_tensors())
    names = [name for name, _ in net.state_tensors()]
    stored = [name for name, _ in manifest["tensors"]]
    if stored != names:
        raise CheckpointError("tensor list does not match architecture", 9)
    owners = {}
    for layer in net.layers():
        for key in layer.params:
            owners[f"{layer.name}/{key}"] = (layer.params, key)
        for key in layer.buffers:
            owners[f"{layer.name}/{key}"] = (layer.buffers, key)
    for name, shape in manifest["tensors"]:
        shape = tuple(shape)
        if shape != live[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: {shape} vs {live[name].shape}", offset)
        nbytes = 4 * math.prod(shape)
        if offset + nbytes > len(data):
            raise CheckpointError(f"truncated tensor {name}", len(data))
        arr = np.frombuffer(data, dtype="<f4", count=math.prod(shape), offset=offset).astype(DTYPE).reshape(shape)
        store, key = owners[name]
        store[key] = arr
        offset += nbytes
    if offset != len(data):
        raise CheckpointError("trailing bytes after last tensor", offset)
    for layer in net.layers():
        layer.zero_grads()
    return net


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return network_from_bytes(fh.read())
