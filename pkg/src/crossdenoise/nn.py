"""Numerical substrate: sigmoid/BCE, dense layers, Adam, parameter container."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

BCE_EPS = 1e-7


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0.0)


def bce_loss(y_hat, y):
    p = np.clip(y_hat, BCE_EPS, 1.0 - BCE_EPS)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def bce_grad(y_hat, y):
    """d loss / d y_hat, under the same clamp as :func:`bce_loss`."""
    p = np.clip(y_hat, BCE_EPS, 1.0 - BCE_EPS)
    return -y / p + (1.0 - y) / (1.0 - p)


def bce_logit_grad(y_hat, y):
    """d loss / d logit when y_hat = sigmoid(logit)."""
    return np.asarray(y_hat, dtype=np.float64) - y


ACTIVATIONS = ("sigmoid", "relu", "identity")


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("weight/bias shapes are inconsistent")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, rng, n_in, n_out, activation="identity"):
        return cls(xavier_uniform(rng, n_out, n_in), np.zeros(n_out), activation)


def dense_forward(layer: DenseLayer, x):
    """Returns (output, cache). `x` has shape (batch, in)."""
    if x.shape[-1] != layer.in_features:
        raise ValueError(f"expected input width {layer.in_features}, got {x.shape[-1]}")
    z = x @ layer.weight.T + layer.bias
    if layer.activation == "sigmoid":
        a = sigmoid(z)
    elif layer.activation == "relu":
        a = relu(z)
    else:
        a = z
    return a, (x, z, a)


def dense_backward(layer: DenseLayer, cache, grad_out):
    """Returns (grad_input, grad_weight, grad_bias)."""
    x, z, a = cache
    if grad_out.shape != a.shape:
        raise ValueError("upstream gradient shape mismatch")
    if layer.activation == "sigmoid":
        dz = grad_out * a * (1.0 - a)
    elif layer.activation == "relu":
        dz = grad_out * (z > 0)
    else:
        dz = grad_out
    return dz @ layer.weight, dz.T @ x, dz.sum(axis=0)


def normal_embedding(rng, rows, dim, std=0.01):
    return rng.normal(0.0, std, size=(rows, dim))


def xavier_uniform(rng, n_out, n_in):
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_out, n_in))


class NumericError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam, in place on `params` and `state`."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


_MAGIC = b"CDNM"


def save_params(path_or_file, kind: str, dims: dict, params: dict) -> None:
    """Header (model kind, dims, tensor table) then little-endian float64 tensors."""
    names = sorted(params)
    header = json.dumps(
        {"kind": kind, "dims": dims, "tensors": [[n, list(params[n].shape)] for n in names]},
        sort_keys=True,
    ).encode("utf-8")
    blob = [_MAGIC, struct.pack("<I", len(header)), header]
    blob += [np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names]
    data = b"".join(blob)
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(data)


def load_params(path_or_file):
    """Returns (kind, dims, params)."""
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError("not a parameter container")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + hlen])
    off = 8 + hlen
    params = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64)
        params[name] = arr.reshape(shape)
        off += 8 * count
    return header["kind"], header["dims"], params
