"""Minimal dense-network kernel: forward, exact reverse-mode gradients, Adam.

Parameters live in one flat float64 vector laid out per layer as W (row
major, in x out) followed by b. Everything is 64-bit and deterministic
given a seed and a fixed iteration order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, DataFormatError, TrainingError

ACT_CODES = {"linear": kernels.ACT_LINEAR,
             "tanh": kernels.ACT_TANH,
             "relu": kernels.ACT_RELU}

CHECKPOINT_VERSION = 1


def param_count(widths):
    return int(sum((widths[i] + 1) * widths[i + 1] for i in range(len(widths) - 1)))


@dataclass
class Mlp:
    widths: tuple[int, ...]
    activations: tuple[str, ...]
    params: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.activations = tuple(self.activations)
        if len(self.activations) != len(self.widths) - 1:
            raise ConfigurationError(
                f"need {len(self.widths) - 1} activation tags, "
                f"got {len(self.activations)}")
        for a in self.activations:
            if a not in ACT_CODES:
                raise ConfigurationError(f"unknown activation {a!r}")
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (param_count(self.widths),):
            raise ConfigurationError(
                f"expected {param_count(self.widths)} parameters, "
                f"got {self.params.shape}")

    @property
    def act_codes(self):
        return [ACT_CODES[a] for a in self.activations]

    def copy(self):
        return Mlp(self.widths, self.activations, self.params.copy(), self.seed)


def init_mlp(widths, activations, seed) -> Mlp:
    """Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    for i in range(len(widths) - 1):
        nin, nout = widths[i], widths[i + 1]
        bound = np.sqrt(6.0 / (nin + nout))
        parts.append(rng.uniform(-bound, bound, size=nin * nout))
        parts.append(np.zeros(nout))
    return Mlp(tuple(widths), tuple(activations), np.concatenate(parts), seed)


def layer_slices(widths):
    """Flat-vector slice per layer, for freezing and inspection."""
    out = []
    off = 0
    for i in range(len(widths) - 1):
        n = (widths[i] + 1) * widths[i + 1]
        out.append(slice(off, off + n))
        off += n
    return out


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def forward(net: Mlp, x):
    """Evaluate the network; accepts a vector or a (B, n) batch."""
    xb, squeeze = _as_batch(x)
    if xb.shape[1] != net.widths[0]:
        raise ConfigurationError(
            f"input width {xb.shape[1]} != first layer width {net.widths[0]}")
    y, _ = kernels.mlp_forward(net.params, list(net.widths), net.act_codes, xb, False)
    return y[0] if squeeze else y


def forward_cached(net: Mlp, x):
    """Like :func:`forward` but returns (y, cache) for a later backward."""
    xb, _ = _as_batch(x)
    if xb.shape[1] != net.widths[0]:
        raise ConfigurationError(
            f"input width {xb.shape[1]} != first layer width {net.widths[0]}")
    return kernels.mlp_forward(net.params, list(net.widths), net.act_codes, xb, True)


def backward_cached(net: Mlp, cache, dy):
    """(dparams, dx) for upstream dy, given a cache from forward_cached."""
    dyb, _ = _as_batch(dy)
    return kernels.mlp_backward(net.params, list(net.widths), net.act_codes,
                                cache, dyb)


def backward(net: Mlp, x, upstream):
    """Exact parameter gradient of the forward map at x under `upstream`.

    Stateless convenience wrapper: recomputes the forward pass internally.
    """
    xb, squeeze = _as_batch(x)
    ub, _ = _as_batch(upstream)
    if ub.shape[1] != net.widths[-1]:
        raise ConfigurationError(
            f"upstream width {ub.shape[1]} != output width {net.widths[-1]}")
    _, cache = forward_cached(net, xb)
    dparams, dx = backward_cached(net, cache, ub)
    return (dparams, dx[0]) if squeeze else (dparams, dx)


@dataclass
class OptimState:
    """Adam state over one flat parameter vector."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def ensure(self, n):
        if self.m is None:
            self.m = np.zeros(n)
            self.v = np.zeros(n)
        elif self.m.shape != (n,):
            raise ConfigurationError(
                f"optimizer sized for {self.m.shape[0]} params, got {n}")


def adam_step(opt: OptimState, params, grads):
    """One bias-corrected Adam update; returns the new parameter vector."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ConfigurationError(
            f"gradient shape {grads.shape} != params {params.shape}")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise TrainingError(
            f"non-finite gradient at coordinate {bad} "
            f"(value {grads[bad]!r}, step {opt.step})")
    opt.ensure(params.shape[0])
    opt.step += 1
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grads
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grads * grads
    m_hat = opt.m / (1.0 - opt.beta1 ** opt.step)
    v_hat = opt.v / (1.0 - opt.beta2 ** opt.step)
    return params - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then raw little-endian float64 blobs.
# Deterministic bytes (no timestamps), so identical runs produce identical
# files.

def save_checkpoint(path, header: dict, arrays):
    header = dict(header)
    header["format_version"] = CHECKPOINT_VERSION
    header["array_lengths"] = [int(a.size) for a in arrays]
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"bad checkpoint header: {exc}", path=str(path))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise DataFormatError(
                f"unsupported checkpoint version {header.get('format_version')}",
                path=str(path))
        blob = fh.read()
    arrays = []
    off = 0
    for n in header["array_lengths"]:
        arrays.append(np.frombuffer(blob, dtype="<f8", count=n, offset=off).copy())
        off += 8 * n
    if off != len(blob):
        raise DataFormatError("checkpoint payload length mismatch", path=str(path))
    return header, arrays


def save_mlp(path, net: Mlp, extra: dict | None = None):
    header = {
        "kind": "mlp",
        "widths": list(net.widths),
        "activations": list(net.activations),
        "seed": net.seed,
    }
    if extra:
        header["extra"] = extra
    save_checkpoint(path, header, [net.params])


def load_mlp(path):
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "mlp":
        raise DataFormatError(f"not an mlp checkpoint: kind={header.get('kind')}",
                              path=str(path))
    net = Mlp(tuple(header["widths"]), tuple(header["activations"]),
              arrays[0], header.get("seed", 0))
    return net, header.get("extra", {})
