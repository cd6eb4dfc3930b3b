"""Numeric core: float64 arrays, seeded generators, glorot init and the
finite-difference gradient oracle.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
Random streams use numpy's PCG64 bit generator, whose output for a given
seed is fixed across platforms and numpy releases.
"""

import hashlib

import numpy as np

DTYPE = np.float64


class NumericalError(RuntimeError):
    """A computation produced a non-finite value."""


def make_rng(seed):
    """Return a PCG64-backed generator for a non-negative integer seed."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(base_seed, *keys):
    """Deterministic 64-bit child seed from a base seed and any hashable labels.

    Uses BLAKE2b over the textual form so results do not depend on Python's
    per-process hash randomisation.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base_seed)).encode())
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode())
    return int.from_bytes(h.digest(), "little")


def as_tensor(values):
    return np.ascontiguousarray(values, dtype=DTYPE)


def glorot_limit(fan_in, fan_out):
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fans must be >= 1, got fan_in={fan_in}, fan_out={fan_out}")
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_uniform(shape, fan_in, fan_out, rng):
    """Draw i.i.d. U(-L, L) values with L = sqrt(6 / (fan_in + fan_out))."""
    limit = glorot_limit(fan_in, fan_out)
    return rng.uniform(-limit, limit, size=tuple(shape)).astype(DTYPE)


def conv_fans(kernel, c_in, c_out):
    """Fan-in/fan-out of a conv kernel with spatial extent ``kernel``."""
    k = int(np.prod(kernel))
    return k * c_in, k * c_out


def finite_diff_grad(fn, point, step=1e-5):
    """Central-difference gradient of scalar ``fn`` at ``point``.

    The per-coordinate step is ``step * max(1, |x_i|)``.  ``point`` is not
    modified.  Raises :class:`NumericalError` naming the coordinate if the
    function turns non-finite.
    """
    x = np.array(point, dtype=DTYPE, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = step * max(1.0, abs(orig))
        flat[i] = orig + h
        f_plus = float(fn(x))
        flat[i] = orig - h
        f_minus = float(fn(x))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            idx = tuple(int(v) for v in np.unravel_index(i, x.shape))
            raise NumericalError(f"non-finite function value at coordinate {idx}")
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(a, b, floor=1e-8):
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {name}")
