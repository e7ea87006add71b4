"""Dense feed-forward networks with exact reverse-mode gradients and Adam.

Everything is float64 and batched along the leading axis. Weight matrices
are stored as ``(out, in)`` so a layer computes ``h @ W.T + b``.

Serialized format (``save_mlp`` / ``to_bytes``), all little-endian::

    magic     4 bytes   b"DMLP"
    version   uint32    1
    n_sizes   uint32    number of entries in layer_sizes
    sizes     uint32 x n_sizes
    acts      uint8 x (n_sizes - 2)   hidden activations (0 = tanh, 1 = relu)
    out_act   uint8                   (0 = identity, 1 = tanh)
    params    float64 x P             W0, b0, W1, b1, ... each row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

_MAGIC = b"DMLP"
_VERSION = 1
_HIDDEN_CODES = {"tanh": 0, "relu": 1}
_OUTPUT_CODES = {"identity": 0, "tanh": 1}


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # derivative of the activation evaluated at pre-activation z (a = act(z))
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


class Mlp:
    """Fully connected network.

    Args:
        layer_sizes: widths from input to output, at least two entries.
        activation: one name for all hidden layers or one per hidden layer.
        output_activation: ``"identity"`` or ``"tanh"``.
        seed: seed for Xavier-uniform weight init (biases start at zero).
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        activation: str | Sequence[str] = "tanh",
        output_activation: str = "identity",
        seed: int | None = 0,
    ) -> None:
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"layer_sizes must have >= 2 positive entries, got {sizes}")
        n_hidden = len(sizes) - 2
        if isinstance(activation, str):
            acts = [activation] * n_hidden
        else:
            acts = list(activation)
            if len(acts) != n_hidden:
                raise ShapeError(f"need {n_hidden} hidden activations, got {len(acts)}")
        for a in acts:
            if a not in _HIDDEN_CODES:
                raise ValueError(f"hidden activation must be tanh or relu, got {a!r}")
        if output_activation not in _OUTPUT_CODES:
            raise ValueError(f"output activation must be identity or tanh, got {output_activation!r}")

        self.layer_sizes = sizes
        self.activations = acts
        self.output_activation = output_activation
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def _layer_activation(self, i: int) -> str:
        return self.activations[i] if i < len(self.activations) else self.output_activation

    def params(self) -> list[np.ndarray]:
        """Live parameter arrays in the order W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Mlp":
        net = Mlp.__new__(Mlp)
        net.layer_sizes = list(self.layer_sizes)
        net.activations = list(self.activations)
        net.output_activation = self.output_activation
        net.weights = [w.copy() for w in self.weights]
        net.biases = [b.copy() for b in self.biases]
        return net

    def load_params(self, params: Sequence[np.ndarray]) -> None:
        """Copy values into the live arrays (shapes must match exactly)."""
        live = self.params()
        if len(params) != len(live):
            raise ShapeError(f"expected {len(live)} parameter arrays, got {len(params)}")
        for i, (dst, src) in enumerate(zip(live, params)):
            src = np.asarray(src, dtype=np.float64)
            if src.shape != dst.shape:
                raise ShapeError(f"parameter {i}: expected shape {dst.shape}, got {src.shape}")
            dst[...] = src

    def _as_batch(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.ndim != 2 or x2.shape[1] != self.n_in:
            raise ShapeError(
                f"input shape {x.shape} incompatible with layer_sizes[0]={self.n_in}"
            )
        return x2, single

    def forward(self, x: np.ndarray) -> np.ndarray:
        x2, single = self._as_batch(x)
        h = x2
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = _activate(self._layer_activation(i), h @ w.T + b)
        return h[0] if single else h

    __call__ = forward

    def forward_cache(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Batched forward pass that also returns what ``backward`` needs."""
        x2, _ = self._as_batch(x)
        cache = []
        h = x2
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            a = _activate(self._layer_activation(i), z)
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"non-finite activation at layer {i}")
            cache.append((h, z, a))
            h = a
        return h, cache

    def backward(self, cache: list, upstream: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(upstream * output)`` w.r.t. params and input.

        Parameter gradients are summed over the batch and returned in
        ``params()`` order; the input gradient keeps the batch axis.
        """
        g = np.asarray(upstream, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        out_shape = cache[-1][2].shape
        if g.shape != out_shape:
            raise ShapeError(f"upstream shape {g.shape} does not match output shape {out_shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        for i in reversed(range(len(self.weights))):
            h, z, a = cache[i]
            g = g * _activation_grad(self._layer_activation(i), z, a)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient at layer {i}")
            grads[2 * i] = g.T @ h
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i]
        return grads, g

    def to_bytes(self) -> bytes:
        header = _MAGIC + struct.pack("<II", _VERSION, len(self.layer_sizes))
        header += struct.pack(f"<{len(self.layer_sizes)}I", *self.layer_sizes)
        header += bytes(_HIDDEN_CODES[a] for a in self.activations)
        header += bytes([_OUTPUT_CODES[self.output_activation]])
        flat = np.concatenate([p.ravel() for p in self.params()]).astype("<f8")
        return header + flat.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Mlp":
        if blob[:4] != _MAGIC:
            raise ValueError("not a DMLP parameter blob")
        version, n = struct.unpack_from("<II", blob, 4)
        if version != _VERSION:
            raise ValueError(f"unsupported DMLP version {version}")
        off = 12
        sizes = list(struct.unpack_from(f"<{n}I", blob, off))
        off += 4 * n
        hidden_names = {v: k for k, v in _HIDDEN_CODES.items()}
        out_names = {v: k for k, v in _OUTPUT_CODES.items()}
        acts = [hidden_names[c] for c in blob[off : off + n - 2]]
        off += n - 2
        out_act = out_names[blob[off]]
        off += 1
        net = cls(sizes, acts, out_act, seed=None)
        flat = np.frombuffer(blob, dtype="<f8", offset=off)
        if flat.size != net.num_params():
            raise ValueError(f"expected {net.num_params()} parameters, found {flat.size}")
        pos = 0
        for p in net.params():
            p[...] = flat[pos : pos + p.size].reshape(p.shape)
            pos += p.size
        return net


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def mlp_gradients(net: Mlp, x: np.ndarray, upstream: np.ndarray) -> list[np.ndarray]:
    """d(upstream . net(x)) / d(params), in ``net.params()`` order."""
    _, cache = net.forward_cache(x)
    grads, _ = net.backward(cache, upstream)
    return grads


def save_mlp(net: Mlp, path: str | Path) -> None:
    Path(path).write_bytes(net.to_bytes())


def load_mlp(path: str | Path) -> Mlp:
    return Mlp.from_bytes(Path(path).read_bytes())


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            learning_rate=learning_rate,
            **kw,
        )


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """Bias-corrected Adam; updates ``params`` and ``state`` in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError(
            f"params/grads/state length mismatch: {len(params)}, {len(grads)}, {len(state.first_moment)}"
        )
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return list(params)


@dataclass
class Trainer:
    """A network paired with its Adam state."""

    net: Mlp
    opt: AdamState = field(default=None)  # type: ignore[assignment]
    learning_rate: float = 1e-3

    def __post_init__(self) -> None:
        if self.opt is None:
            self.opt = AdamState.zeros_like(self.net.params(), self.learning_rate)

    def apply(self, grads: Sequence[np.ndarray]) -> None:
        adam_step(self.net.params(), grads, self.opt)
