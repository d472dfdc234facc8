"""Minimal dense-network engine: SELU MLPs, embeddings, Adam, and a gradient checker.

Everything runs in float64 on numpy. The predictor family built on top is a fixed
trunk-plus-heads architecture, so backward passes are written by hand per layer
instead of pulling in an autodiff framework.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

# Self-normalizing ELU constants (alpha, scale) from the standard SELU definition.
SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805


class GradientError(RuntimeError):
    """Raised when a non-finite gradient reaches the optimizer."""


def selu(x: np.ndarray | float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return SELU_SCALE * np.where(x > 0.0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def selu_deriv(x: np.ndarray | float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return SELU_SCALE * np.where(x > 0.0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def sigmoid(x: np.ndarray | float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray | float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


_ACTIVATIONS = {
    "selu": (selu, selu_deriv),
    "linear": (lambda x: x, lambda x: np.ones_like(x)),
}


@dataclass
class DenseLayer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str  # key into _ACTIVATIONS

    def __post_init__(self) -> None:
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("weight/bias row mismatch")


class DenseNet:
    """A plain MLP. Layers chain: layer k's output width is layer k+1's input width."""

    def __init__(self, layers: Sequence[DenseLayer]):
        if not layers:
            raise ValueError("DenseNet needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise ValueError("layer dimensions do not chain")
        self.layers = list(layers)

    @classmethod
    def build(
        cls,
        rng: np.random.Generator,
        dims: Sequence[int],
        hidden_activation: str = "selu",
        output_activation: str = "linear",
    ) -> "DenseNet":
        """LeCun-normal weights (variance 1/fan_in, pairs with SELU), zero biases."""
        layers = []
        for k in range(len(dims) - 1):
            fan_in, fan_out = dims[k], dims[k + 1]
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
            b = np.zeros(fan_out)
            act = output_activation if k == len(dims) - 2 else hidden_activation
            layers.append(DenseLayer(w, b, act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Forward pass keeping (input, pre-activation) per layer for backward()."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.input_dim:
            raise ValueError(f"input width {x.shape[1]} != net input dim {self.input_dim}")
        cache = []
        out = x
        for layer in self.layers:
            pre = out @ layer.weight.T + layer.bias
            cache.append((out, pre))
            out = _ACTIVATIONS[layer.activation][0](pre)
        return out, cache

    def backward(self, cache: list, d_out: np.ndarray) -> tuple[np.ndarray, list]:
        """Returns (d_input, [(dW, db) per layer]) for a batch-summed upstream gradient."""
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)  # type: ignore
        d = np.asarray(d_out, dtype=np.float64)
        for k in range(len(self.layers) - 1, -1, -1):
            x_in, pre = cache[k]
            d_pre = d * _ACTIVATIONS[self.layers[k].activation][1](pre)
            grads[k] = (d_pre.T @ x_in, d_pre.sum(axis=0))
            d = d_pre @ self.layers[k].weight
        return d, grads

    def param_items(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        for k, layer in enumerate(self.layers):
            yield f"{prefix}.w{k}", layer.weight
            yield f"{prefix}.b{k}", layer.bias

    def load_params(self, prefix: str, params: Mapping[str, np.ndarray]) -> None:
        for k, layer in enumerate(self.layers):
            layer.weight = np.array(params[f"{prefix}.w{k}"], dtype=np.float64)
            layer.bias = np.array(params[f"{prefix}.b{k}"], dtype=np.float64)


@dataclass
class EmbeddingTable:
    """Embedding rows; row 0 is reserved for unknown / out-of-range ids."""

    rows: np.ndarray  # [vocab, dim]

    @classmethod
    def init(cls, rng: np.random.Generator, vocab_size: int, dim: int = 8, std: float = 0.1) -> "EmbeddingTable":
        return cls(rng.normal(0.0, std, size=(vocab_size, dim)))

    @property
    def vocab_size(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def safe_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        return np.where((ids >= 0) & (ids < self.vocab_size), ids, 0)

    def lookup(self, ids: np.ndarray) -> np.ndarray:
        return self.rows[self.safe_ids(ids)]

    def scatter_grad(self, ids: np.ndarray, d_rows: np.ndarray, out: np.ndarray) -> None:
        np.add.at(out, self.safe_ids(ids), d_rows)


@dataclass
class AdamState:
    """Bias-corrected Adam; moment accumulators start at zero, step counts updates."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[Mapping[str, np.ndarray], AdamState]:
    """One in-place Adam update over every parameter array.

    Raises GradientError if any gradient is non-finite; parameters are untouched
    in that case so training can abort on the last good state.
    """
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise GradientError(f"non-finite gradient in {name!r} at step {state.step + 1}")
    state.step += 1
    b1c = 1.0 - state.beta1**state.step
    b2c = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
        if not np.all(np.isfinite(p)):
            raise GradientError(f"non-finite parameter {name!r} after step {state.step}")
    return params, state


def grad_check(
    loss_fn: Callable[[], float],
    grad_fn: Callable[[], Mapping[str, np.ndarray]],
    params: Mapping[str, np.ndarray],
    n_probes: int = 100,
    fd_eps: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradients and central finite differences.

    Probes n_probes coordinates drawn uniformly over all parameter entries. The
    relative error uses max(|analytic|, |fd|, 1e-6) as denominator so coordinates
    with genuinely zero gradient do not produce spurious blowups.
    """
    if not 1e-7 <= fd_eps <= 1e-3:
        raise ValueError("fd_eps must be within [1e-7, 1e-3]")
    rng = rng or np.random.default_rng(0)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    analytic = grad_fn()
    worst = 0.0
    for flat in rng.choice(total, size=min(n_probes, total), replace=False):
        slot = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[slot]
        idx = int(flat - offsets[slot])
        p = params[name]
        saved = p.flat[idx]
        p.flat[idx] = saved + fd_eps
        up = loss_fn()
        p.flat[idx] = saved - fd_eps
        down = loss_fn()
        p.flat[idx] = saved
        fd = (up - down) / (2.0 * fd_eps)
        ga = float(analytic[name].flat[idx])
        rel = abs(ga - fd) / max(abs(ga), abs(fd), 1e-6)
        worst = max(worst, rel)
    return worst
