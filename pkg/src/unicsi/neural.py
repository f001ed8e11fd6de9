"""Dense networks with hand-written backpropagation.

Layers compute ``y = act(x @ W.T + b)`` on row batches. Every layer carries a
per-output-unit ``trainable`` flag; frozen rows get exactly zero gradient and
are never touched by :func:`optimizer_step`, so freezing is bitwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UsageError

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("linear", "leaky_relu", "tanh")

CSAE_MAGIC = b"CSAE"
CSAE_VERSION = 1


def activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "linear":
        return z
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def activate_grad(name: str, z: np.ndarray) -> np.ndarray:
    """Derivative of the activation at pre-activation ``z``."""
    if name == "linear":
        return np.ones_like(z)
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str = "linear"
    trainable: np.ndarray | None = None  # (out,) bool

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ValueError(
                f"weights {self.weights.shape} and biases {self.biases.shape} do not match"
            )
        if self.trainable is None:
            self.trainable = np.ones(self.out_size, dtype=bool)
        self.trainable = np.asarray(self.trainable, dtype=bool)
        if self.trainable.shape != (self.out_size,):
            raise ValueError("trainable mask length must equal the layer output size")

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]

    def n_params(self) -> int:
        return self.weights.size + self.biases.size

    def flops(self) -> int:
        # multiply-accumulate per weight (bias add folded in) plus one op per unit for a nonlinearity
        return 2 * self.in_size * self.out_size + (0 if self.activation == "linear" else self.out_size)


@dataclass
class ModelParams:
    layers: list[DenseLayer]
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_size != b.in_size:
                raise ValueError(f"layer sizes do not chain: {a.out_size} -> {b.in_size}")

    @property
    def input_size(self) -> int:
        return self.layers[0].in_size if self.layers else 0

    @property
    def output_size(self) -> int:
        return self.layers[-1].out_size if self.layers else 0

    @property
    def sizes(self) -> list[int]:
        return [self.input_size] + [l.out_size for l in self.layers] if self.layers else []

    def freeze(self, trainable: bool = False) -> None:
        for layer in self.layers:
            layer.trainable[:] = trainable

    def copy(self) -> "ModelParams":
        return ModelParams([
            DenseLayer(l.weights.copy(), l.biases.copy(), l.activation, l.trainable.copy())
            for l in self.layers
        ])

    def flatten(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0)
        return np.concatenate([np.concatenate([l.weights.ravel(), l.biases]) for l in self.layers])


def init_dense(sizes: list[int], rng: np.random.Generator, hidden: str = "leaky_relu",
               output: str = "linear", dtype=np.float64) -> ModelParams:
    """Uniform fan-in initialization, ``U(-1/sqrt(in), 1/sqrt(in))``."""
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype)
        b = rng.uniform(-bound, bound, size=n_out).astype(dtype)
        act = output if i == len(sizes) - 2 else hidden
        layers.append(DenseLayer(w, b, act))
    return ModelParams(layers)


def count_params(model: ModelParams) -> int:
    return sum(l.n_params() for l in model.layers)


def count_flops(model: ModelParams) -> int:
    return sum(l.flops() for l in model.layers)


@dataclass
class ForwardCache:
    model_id: int
    version: int
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    squeezed: bool


def forward(model: ModelParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on one vector or a row batch; returns output and cache."""
    x = np.asarray(x)
    squeezed = x.ndim == 1
    a = x[None, :] if squeezed else x
    if a.shape[-1] != model.input_size:
        raise ValueError(f"input length {a.shape[-1]} != model input size {model.input_size}")
    inputs, preacts = [], []
    for layer in model.layers:
        inputs.append(a)
        z = a @ layer.weights.T + layer.biases
        preacts.append(z)
        a = activate(layer.activation, z)
    cache = ForwardCache(id(model), model.version, inputs, preacts, squeezed)
    return (a[0] if squeezed else a), cache


def predict(model: ModelParams, x: np.ndarray) -> np.ndarray:
    """Forward pass without keeping a cache."""
    a = np.asarray(x)
    for layer in model.layers:
        a = activate(layer.activation, a @ layer.weights.T + layer.biases)
    return a


def backward(model: ModelParams, grad_out: np.ndarray, cache: ForwardCache):
    """Backpropagate ``dL/dy``.

    Returns:
        ``(grads, grad_in)`` where ``grads`` is a list of ``(dW, db)`` per layer
        and ``grad_in`` is ``dL/dx`` with the shape of the forward input.
    """
    if cache.model_id != id(model) or cache.version != model.version:
        raise UsageError("stale forward cache: model changed since the forward pass")
    g = np.asarray(grad_out)
    if cache.squeezed:
        g = g[None, :]
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        dz = g * activate_grad(layer.activation, cache.preacts[i])
        dw = dz.T @ cache.inputs[i]
        db = dz.sum(axis=0)
        if not layer.trainable.all():
            dw[~layer.trainable] = 0.0
            db[~layer.trainable] = 0.0
        grads[i] = (dw, db)
        g = dz @ layer.weights
    return grads, (g[0] if cache.squeezed else g)


@dataclass(frozen=True)
class MaskVector:
    """``e_lambda``: ``lam`` leading ones followed by zeros, length ``lambda_max``."""

    lam: int
    lambda_max: int

    def __post_init__(self):
        if not 0 <= self.lam <= self.lambda_max:
            raise ValueError(f"mask size {self.lam} not in [0, {self.lambda_max}]")

    def vector(self, dtype=np.float64) -> np.ndarray:
        e = np.zeros(self.lambda_max, dtype=dtype)
        e[: self.lam] = 1.0
        return e


def apply_mask(z: np.ndarray, m: MaskVector) -> np.ndarray:
    """Elementwise product with ``e_lambda``; also the mask's own backward."""
    z = np.asarray(z)
    if z.shape[-1] != m.lambda_max:
        raise ValueError(f"latent length {z.shape[-1]} != mask length {m.lambda_max}")
    return z * m.vector(z.dtype)


@dataclass
class OptimizerState:
    """Adam moments for one model."""

    m: list[tuple[np.ndarray, np.ndarray]]
    v: list[tuple[np.ndarray, np.ndarray]]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(model: ModelParams, learning_rate=1e-3, beta1=0.9, beta2=0.999,
                   eps=1e-8) -> OptimizerState:
    zeros = [(np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in model.layers]
    zeros2 = [(np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in model.layers]
    return OptimizerState(zeros, zeros2, 0, learning_rate, beta1, beta2, eps)


def optimizer_step(model: ModelParams, grads, state: OptimizerState) -> None:
    """One Adam update in place. Frozen rows keep their parameters and moments."""
    if len(grads) != len(model.layers) or len(state.m) != len(model.layers):
        raise ValueError("gradient / optimizer state do not match the model layers")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (layer, (dw, db)) in enumerate(zip(model.layers, grads)):
        if dw.shape != layer.weights.shape or db.shape != layer.biases.shape:
            raise ValueError(f"gradient shape mismatch in layer {i}")
        rows = layer.trainable
        if not rows.any():
            continue
        new = []
        for j, (p, g) in enumerate(((layer.weights, dw), (layer.biases, db))):
            m, v = state.m[i][j], state.v[i][j]
            sel = rows[:, None] if p.ndim == 2 else rows
            m_new = b1 * m + (1.0 - b1) * g
            v_new = b2 * v + (1.0 - b2) * g * g
            upd = state.learning_rate * (m_new / c1) / (np.sqrt(v_new / c2) + state.eps)
            m[...] = np.where(sel, m_new, m)
            v[...] = np.where(sel, v_new, v)
            new.append(np.where(sel, p - upd, p))
        layer.weights, layer.biases = new
    model.version += 1


# --- checkpoint ------------------------------------------------------------

def write_checkpoint(path: str | Path, models: dict[str, ModelParams], metadata: dict) -> None:
    """``CSAE`` binary (layer-shape table + f64 parameters) plus a JSON sidecar.

    ``models`` is an ordered name -> model mapping; the sidecar records which
    layers belong to which model and their activations.
    """
    layers = [l for m in models.values() for l in m.layers]
    buf = bytearray(CSAE_MAGIC)
    buf += struct.pack("<HI", CSAE_VERSION, len(layers))
    for l in layers:
        buf += struct.pack("<II", l.out_size, l.in_size)
    for l in layers:
        buf += np.ascontiguousarray(l.weights, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(l.biases, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))
    meta = dict(metadata)
    meta["models"] = [
        {"name": name, "activations": [l.activation for l in m.layers]}
        for name, m in models.items()
    ]
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))


def read_checkpoint(path: str | Path) -> tuple[dict[str, ModelParams], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CSAE_MAGIC:
        raise ValueError(f"{path}: not a CSAE checkpoint")
    version, n = struct.unpack_from("<HI", raw, 4)
    if version != CSAE_VERSION:
        raise ValueError(f"{path}: unsupported CSAE version {version}")
    off = 4 + struct.calcsize("<HI")
    shapes = [struct.unpack_from("<II", raw, off + 8 * i) for i in range(n)]
    off += 8 * n
    meta = json.loads(Path(str(path) + ".json").read_text())
    params = []
    for out, inp in shapes:
        w = np.frombuffer(raw, "<f8", out * inp, off).reshape(out, inp).astype(np.float64)
        off += 8 * out * inp
        b = np.frombuffer(raw, "<f8", out, off).astype(np.float64)
        off += 8 * out
        params.append((w, b))
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameters")
    models, k = {}, 0
    for entry in meta["models"]:
        acts = entry["activations"]
        models[entry["name"]] = ModelParams(
            [DenseLayer(w, b, a) for (w, b), a in zip(params[k:k + len(acts)], acts)]
        )
        k += len(acts)
    return models, meta
