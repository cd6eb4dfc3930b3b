import numpy as np
import pytest

from rawres.engine import finite_diff_grad, make_rng, max_relative_error
from rawres.layers import BatchNorm, Conv, ReLU, softmax_cross_entropy
from rawres.resblocks import ResidualBlock


def layer_gradient_errors(layer, x, training=True, seed=0):
    """Max relative error of input and parameter gradients against central
    differences, for the scalar sum(layer(x) * R) with random R."""
    rng = make_rng(seed + 1000)
    y = layer.forward(x, training)
    proj = rng.standard_normal(y.shape)

    def f_input(v):
        return float(np.sum(layer.forward(v, training) * proj))

    layer.forward(x, training)
    dx = layer.backward(proj)
    errors = {"input": max_relative_error(dx, finite_diff_grad(f_input, x))}
    analytic = {k: g.copy() for k, g in layer.grads.items()}
    for key, p in layer.params.items():
        original = p.copy()

        def f_param(v, key=key):
            layer.params[key][...] = v
            return float(np.sum(layer.forward(x, training) * proj))

        numeric = finite_diff_grad(f_param, original)
        layer.params[key][...] = original
        errors[key] = max_relative_error(analytic[key], numeric)
    return errors


@pytest.fixture
def rng():
    return make_rng(1234)


def network_gradient_errors(net, x, labels, rel_floor=1e-4, step=1e-5):
    """Per-tensor max relative error of the training-mode loss gradient.

    Tensors whose true gradient is structurally zero (a bias feeding a
    BatchNorm) are judged against ``rel_floor`` times the largest gradient
    entry in the network rather than against their own noise.
    """
    net.loss_and_grads(x, labels, training=True)
    analytic = {(l.name, k): l.grads[k].copy() for l, k in net.parameters()}
    scale = max(float(np.max(np.abs(g))) for g in analytic.values())
    errors = {}
    for layer, key in net.parameters():
        original = layer.params[key].copy()

        def f(v, layer=layer, key=key):
            layer.params[key][...] = v
            return softmax_cross_entropy(net.forward(x, training=True), labels)[0]

        numeric = finite_diff_grad(f, original, step)
        layer.params[key][...] = original
        errors[(layer.name, key)] = max_relative_error(analytic[(layer.name, key)], numeric, rel_floor * scale)
    return errors


SMOKE_ARCH = dict(widths=(8, 16, 32, 64), depths=(1, 1, 1, 1))


def smoke_run(kind, root, seed=0, epochs=150):
    """Reduced raw-waveform network fitted to the whole 20-clip tone corpus."""
    from rawres.datasets import Split, synthetic_dataset
    from rawres.model import build_network
    from rawres.training import Hyper, build_features, train

    spec = synthetic_dataset(root, seed=seed, n_classes=10, clips_per_class=2)
    everything = list(range(len(spec.clips)))
    data = build_features(spec, Split(everything, everything, everything), "none")
    net = build_network("m34res", kind, seed=seed, **SMOKE_ARCH)
    result = train(net, data, Hyper(epochs=epochs, batch_size=16, stop_on_train_fit=True), seed=seed + 1)
    return net, data, result


# (rank, c_in, c_out, input shape): equal-channel and expansion for both ranks
BLOCK_GRAD_CASES = [
    (1, 4, 4, (2, 20, 4)),
    (1, 2, 4, (2, 9, 2)),
    (2, 2, 2, (2, 4, 5, 2)),
    (2, 2, 4, (2, 3, 4, 2)),
]


def _block_errors(block, x, seed):
    """Gradient errors for input and every parameter of a block."""
    rng = make_rng(seed + 77)
    y = block.forward(x, training=True)
    proj = rng.standard_normal(y.shape)

    def scalar():
        return float(np.sum(block.forward(x_cur[0], training=True) * proj))

    x_cur = [x]
    block.forward(x, training=True)
    dx = block.backward(proj)
    analytic = {(l.name, k): l.grads[k].copy() for l in block.layers for k in l.params}

    def f_input(v):
        x_cur[0] = v
        return scalar()

    numeric = {"input": finite_diff_grad(f_input, x)}
    x_cur[0] = x
    for layer in block.layers:
        for key, p in layer.params.items():
            orig = p.copy()

            def f_param(v, layer=layer, key=key):
                layer.params[key][...] = v
                return scalar()

            numeric[(layer.name, key)] = finite_diff_grad(f_param, orig)
            layer.params[key][...] = orig
    analytic["input"] = dx
    # biases and betas feeding a later BatchNorm have identically zero gradient;
    # a floor tied to the block's gradient scale keeps their noise from dominating
    floor = 1e-4 * max(np.max(np.abs(g)) for g in analytic.values())
    return {k: max_relative_error(analytic[k], numeric[k], floor) for k in numeric}


def _relu_margin(block, x):
    """Smallest |pre-activation| seen by any ReLU in the block."""
    margins = []
    for layer in block.layers:
        if isinstance(layer, ReLU):
            orig = layer.forward

            def spy(v, training=False, orig=orig):
                margins.append(np.min(np.abs(v)))
                return orig(v, training)

            layer.forward = spy
    try:
        block.forward(x, training=True)
    finally:
        for layer in block.layers:
            layer.__dict__.pop("forward", None)
    return min(margins, default=np.inf)


def _kink_free_input(block, rng, shape, margin=1e-3):
    # finite differences straddling a ReLU kink are meaningless, so redraw
    for _ in range(100):
        x = rng.standard_normal(shape)
        if _relu_margin(block, x) > margin:
            return x
    raise RuntimeError("no kink-free input found")


def block_gradient_errors(kind, rank, c_in, c_out, shape, seed):
    """Gradient errors of a randomly initialised block with non-trivial
    BatchNorm affine parameters and conv biases."""
    rng = make_rng(seed)
    block = ResidualBlock(kind, rank, c_in, c_out, 3, rng)
    for layer in block.layers:
        if isinstance(layer, BatchNorm):
            layer.params["gamma"][:] = rng.uniform(0.5, 1.5, layer.params["gamma"].shape)
            layer.params["beta"][:] = 0.1 * rng.standard_normal(layer.params["beta"].shape)
        if isinstance(layer, Conv):
            layer.params["bias"][:] = 0.1 * rng.standard_normal(layer.params["bias"].shape)
    return _block_errors(block, _kink_free_input(block, rng, shape), seed)
