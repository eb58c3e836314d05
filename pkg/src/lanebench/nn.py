"""Dense MLPs with hand-written backprop, Adam, and a squashed Gaussian head.

Everything runs in float64 so analytic gradients can be checked tightly
against finite differences.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
SQUASH_EPS = 1e-6
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = b"LBNNCKPT"
CHECKPOINT_VERSION = 1
_ACTIVATIONS = {"relu": 0, "tanh": 1}


class CheckpointError(ValueError):
    pass


class Mlp:
    """Fully connected network; hidden layers share one activation, output is linear.

    Weights are stored as ``(fan_in, fan_out)`` so a batch ``x @ W + b`` maps rows.
    """

    def __init__(self, layer_sizes, activation="relu", rng=None, params=None):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = [int(n) for n in layer_sizes]
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.activation = activation
        self.version = 0
        shapes = self.shapes()
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            params = []
            for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
                bound = 1.0 / math.sqrt(fan_in)
                params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                params.append(rng.uniform(-bound, bound, size=fan_out))
        got = [np.shape(p) for p in params]
        if got != shapes:
            raise ValueError(f"parameter shapes {got} do not match layer sizes {self.layer_sizes}")
        # every tensor is a view into one flat buffer so optimisers can work on it whole
        self.flat = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in params])
        self.params = []
        off = 0
        for shape in shapes:
            n = int(np.prod(shape))
            self.params.append(self.flat[off : off + n].reshape(shape))
            off += n

    def shapes(self):
        out = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            out += [(fan_in, fan_out), (fan_out,)]
        return out

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes, self.activation, params=[p.copy() for p in self.params])

    def touch(self):
        """Mark parameters as modified so older forward caches become stale."""
        self.version += 1

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"input has {h.shape[1]} features, network expects {self.layer_sizes[0]}")
        inputs, pre = [], []
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            inputs.append(h)
            z = h @ W + b
            pre.append(z)
            if i < self.n_layers - 1:
                h = np.maximum(z, 0.0) if self.activation == "relu" else np.tanh(z)
            else:
                h = z
        cache = {"inputs": inputs, "pre": pre, "squeeze": squeeze, "version": self.version, "net": id(self)}
        return (h[0] if squeeze else h), cache

    def flatten(self, grads) -> np.ndarray:
        return np.concatenate([g.ravel() for g in grads])

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out, need_param_grads=True):
        """Reverse pass; returns (param grads or None, grad w.r.t. input)."""
        if cache.get("net") != id(self) or cache.get("version") != self.version:
            raise ValueError("stale forward cache: parameters changed since forward()")
        g = np.asarray(grad_out, dtype=np.float64)
        if cache["squeeze"]:
            g = g[None, :]
        grads = [None] * len(self.params) if need_param_grads else None
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                z = cache["pre"][i]
                if self.activation == "relu":
                    g = g * (z > 0.0)
                else:
                    t = np.tanh(z)
                    g = g * (1.0 - t * t)
            W = self.params[2 * i]
            if need_param_grads:
                grads[2 * i] = cache["inputs"][i].T @ g
                grads[2 * i + 1] = g.sum(axis=0)
            g = g @ W.T
        return grads, (g[0] if cache["squeeze"] else g)


@dataclass
class AdamState:
    lr: float
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr) -> "AdamState":
        if isinstance(params, np.ndarray):
            params = [params]
        return cls(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place.

    ``params``/``grads`` are matching lists of arrays, or single flat arrays.
    """
    if isinstance(params, np.ndarray):
        params, grads = [params], [grads]
    if len(params) != len(grads) or len(state.m) != len(params):
        raise ValueError("parameter, gradient and moment lists differ in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {params[i].shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter tensor {i}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    step = state.lr / (1.0 - b1**state.t)
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        _adam_kernel(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1), v.reshape(-1),
                     b1, b2, step, c2, state.eps)


@njit(cache=True)
def _adam_kernel(p, g, m, v, b1, b2, step, c2, eps):
    for i in range(p.shape[0]):
        m[i] = b1 * m[i] + (1.0 - b1) * g[i]
        v[i] = b2 * v[i] + (1.0 - b2) * (g[i] * g[i])
        p[i] -= step * (m[i] / (np.sqrt(v[i] / c2) + eps))


@dataclass
class GaussianSample:
    u: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    log_std: np.ndarray
    noise: np.ndarray
    action: np.ndarray
    log_prob: np.ndarray
    # where the raw log std was inside the clamp (gradient mask)
    log_std_free: np.ndarray
    scale: np.ndarray


def gaussian_head(mean, log_std, noise, low=-1.0, high=1.0) -> GaussianSample:
    """Reparameterised tanh-squashed Gaussian rescaled to ``[low, high]``.

    Works on single vectors or batches (last axis is the action dimension);
    ``log_prob`` is summed over that axis.
    """
    mean = np.asarray(mean, dtype=np.float64)
    raw = np.asarray(log_std, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    ls = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(ls)
    u = mean + std * noise
    t = np.tanh(u)
    scale = 0.5 * (high - low)
    action = low + scale * (t + 1.0)
    # keep strictly inside the range when tanh rounds to +-1
    action = np.clip(action, np.nextafter(low, high), np.nextafter(high, low))
    log_n = -0.5 * noise * noise - ls - _HALF_LOG_2PI
    log_det = np.log(scale) + np.log(1.0 - t * t + SQUASH_EPS)
    log_prob = np.sum(log_n - log_det, axis=-1)
    free = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
    return GaussianSample(u, mean, std, ls, noise, action, log_prob, free, np.broadcast_to(scale, u.shape))


def gaussian_head_backward(sample: GaussianSample, grad_action, grad_log_prob):
    """Gradients of a scalar w.r.t. (mean, raw log std) given d/d action and d/d log_prob.

    ``grad_log_prob`` has the shape of ``sample.log_prob`` (one per row).
    """
    t = np.tanh(sample.u)
    one_m = 1.0 - t * t
    glp = np.asarray(grad_log_prob, dtype=np.float64)[..., None]
    g_u = np.asarray(grad_action, dtype=np.float64) * sample.scale * one_m + glp * (2.0 * t * one_m / (one_m + SQUASH_EPS))
    g_mean = g_u
    g_log_std = (g_u * sample.std * sample.noise - glp) * sample.log_std_free
    return g_mean, g_log_std


def save_checkpoint(nets: dict, path) -> None:
    """Write named networks as: magic, version, net count, per-net header, float64 payload."""
    header = bytearray(CHECKPOINT_MAGIC)
    header += struct.pack("<II", CHECKPOINT_VERSION, len(nets))
    payload = bytearray()
    for name, net in nets.items():
        raw_name = name.encode("utf-8")
        header += struct.pack("<I", len(raw_name)) + raw_name
        header += struct.pack("<II", _ACTIVATIONS[net.activation], len(net.layer_sizes))
        header += struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes)
        for p in net.params:
            payload += np.ascontiguousarray(p, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(header) + bytes(payload))


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    off = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise CheckpointError(f"{path}: truncated header")
        out = struct.unpack_from(fmt, data, off)
        off += size
        return out

    version, count = take("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    specs = []
    codes = {v: k for k, v in _ACTIVATIONS.items()}
    for _ in range(count):
        (name_len,) = take("<I")
        if off + name_len > len(data):
            raise CheckpointError(f"{path}: truncated header")
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        act, n_sizes = take("<II")
        if act not in codes:
            raise CheckpointError(f"{path}: corrupt header (activation code {act})")
        sizes = take(f"<{n_sizes}I")
        specs.append((name, codes[act], list(sizes)))
    nets = {}
    for name, act, sizes in specs:
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            for shape in ((fan_in, fan_out), (fan_out,)):
                n = int(np.prod(shape))
                if off + 8 * n > len(data):
                    raise CheckpointError(f"{path}: truncated payload")
                params.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64))
                off += 8 * n
        nets[name] = Mlp(sizes, act, params=params)
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return nets
