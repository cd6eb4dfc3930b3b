"""The six residual-block wirings around a parameter-free identity shortcut.

Layer orders (C=conv, B=batchnorm, R=relu, "+" = shortcut addition)::

    RB1  C B R C B  + R
    RB2  C B R C    + B R
    RB3  C B R C B R +
    RB4  R C B R C B +
    RB5  B R C B R C +        (first B sees c_in channels)
    RB6  C R C B    + B R

When ``c_out == 2 * c_in`` the shortcut appends ``c_in`` zero channels.
"""

import numpy as np

from .layers import BatchNorm, Conv, ReLU

BLOCK_KINDS = ("RB1", "RB2", "RB3", "RB4", "RB5", "RB6")

# (branch, post_add) as strings of layer codes
WIRING = {
    "RB1": ("CBRCB", "R"),
    "RB2": ("CBRC", "BR"),
    "RB3": ("CBRCBR", ""),
    "RB4": ("RCBRCB", ""),
    "RB5": ("BRCBRC", ""),
    "RB6": ("CRCB", "BR"),
}


def check_kind(kind):
    if kind not in WIRING:
        raise ValueError(f"unknown residual block kind {kind!r}; expected one of {', '.join(BLOCK_KINDS)}")
    return kind


def _check_channels(c_in, c_out):
    if c_out not in (c_in, 2 * c_in):
        raise ValueError(f"c_out must equal c_in or 2*c_in, got c_in={c_in}, c_out={c_out}")


class ResidualBlock:
    """y = post_add(pad(x) + branch(x))."""

    def __init__(self, kind, rank, c_in, c_out, kernel=3, rng=None, name="block", bn_epsilon=1e-3, bn_momentum=0.99):
        check_kind(kind)
        _check_channels(c_in, c_out)
        self.kind = kind
        self.rank = rank
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = (kernel,) * rank if np.isscalar(kernel) else tuple(kernel)
        self.name = name
        branch_codes, post_codes = WIRING[kind]

        channels = c_in
        convs_seen = 0
        self.branch = []
        for i, code in enumerate(branch_codes):
            lname = f"{name}/branch{i}_{code}"
            if code == "C":
                self.branch.append(Conv(channels, c_out, self.kernel, 1, rank, rng, name=lname))
                channels = c_out
                convs_seen += 1
            elif code == "B":
                self.branch.append(BatchNorm(channels, bn_epsilon, bn_momentum, name=lname))
            else:
                self.branch.append(ReLU(name=lname))
        self.post_add = []
        for i, code in enumerate(post_codes):
            lname = f"{name}/post{i}_{code}"
            if code == "B":
                self.post_add.append(BatchNorm(c_out, bn_epsilon, bn_momentum, name=lname))
            else:
                self.post_add.append(ReLU(name=lname))
        self._spatial = None

    @property
    def layers(self):
        return self.branch + self.post_add

    def output_shape(self, spatial):
        return tuple(spatial)

    def forward(self, x, training=False):
        if x.shape[-1] != self.c_in:
            raise ValueError(f"{self.name}: input has {x.shape[-1]} channels, block expects {self.c_in}")
        f = x
        for layer in self.branch:
            f = layer.forward(f, training)
        short = x
        if self.c_out != self.c_in:
            pad = [(0, 0)] * (x.ndim - 1) + [(0, self.c_out - self.c_in)]
            short = np.pad(x, pad)
        if f.shape != short.shape:
            raise AssertionError(f"{self.name}: branch output {f.shape} does not match shortcut {short.shape}")
        y = short + f
        for layer in self.post_add:
            y = layer.forward(y, training)
        return y

    def backward(self, grad):
        for layer in reversed(self.post_add):
            grad = layer.backward(grad)
        g_branch = grad
        for layer in reversed(self.branch):
            g_branch = layer.backward(g_branch)
        return g_branch + grad[..., : self.c_in]

    def ledger(self):
        return [(layer.name, layer.n_trainable, layer.n_non_trainable) for layer in self.layers]


def block_param_count(kind, c_in, c_out, kernel=3):
    """(trainable, non_trainable) for one block, computed without weights."""
    check_kind(kind)
    _check_channels(c_in, c_out)
    k = int(np.prod(kernel))
    branch_codes, post_codes = WIRING[kind]
    trainable = non_trainable = 0
    channels = c_in
    for code in branch_codes:
        if code == "C":
            trainable += Conv.param_count((k,), channels, c_out)
            channels = c_out
        elif code == "B":
            trainable += 2 * channels
            non_trainable += 2 * channels
    for code in post_codes:
        if code == "B":
            trainable += 2 * c_out
            non_trainable += 2 * c_out
    return {"trainable": trainable, "non_trainable": non_trainable}


def build_block(kind, rank, c_in, c_out, kernel=3, rng=None, name="block"):
    return ResidualBlock(kind, rank, c_in, c_out, kernel, rng, name)
