"""MLP encoder/decoder parameters and the AdaBelief optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Var

ACTIVATIONS = ("relu", "linear")


@dataclass
class MlpParams:
    """Weights and biases of a fully connected network.

    ``weights[i]`` has shape (out_i, in_i); consecutive layers must
    compose.  ``activations[i]`` is applied after layer ``i`` and is one
    of ``"relu"`` or ``"linear"``; the final layer is conventionally
    linear.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("layer lists must have equal length")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(
                    f"layer {i} input width {self.weights[i].shape[1]} does not "
                    f"match layer {i - 1} output width {self.weights[i - 1].shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list, weights and biases interleaved per layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activations=list(self.activations),
        )


def init_mlp(sizes: list[int], rng: np.random.Generator,
             hidden_activation: str = "relu") -> MlpParams:
    """Initialize an MLP with uniform +-1/sqrt(fan_in) weights, zero biases.

    ``sizes`` lists layer widths input-first; the final layer is linear,
    all earlier layers use ``hidden_activation``.
    """
    if len(sizes) < 2:
        raise ValueError("need at least input and output widths")
    weights, biases, acts = [], [], []
    for i in range(len(sizes) - 1):
        fan_in = sizes[i]
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(sizes[i + 1], fan_in)))
        biases.append(np.zeros(sizes[i + 1]))
        acts.append("linear" if i == len(sizes) - 2 else hidden_activation)
    return MlpParams(weights=weights, biases=biases, activations=acts)


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Apply the network to a vector or to each column of a matrix."""
    x = np.asarray(x, dtype=np.float64)
    vector_in = x.ndim == 1
    h = x[:, None] if vector_in else x
    if h.shape[0] != params.in_dim:
        raise ValueError(f"input width {h.shape[0]} != network input {params.in_dim}")
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = w @ h + b[:, None]
        if act == "relu":
            h = np.maximum(h, 0.0)
    return h[:, 0] if vector_in else h


class TapedMlp:
    """An MLP's parameters registered as leaves on a tape."""

    def __init__(self, tape: Tape, params: MlpParams):
        self.tape = tape
        self.params = params
        self.weight_vars = [tape.leaf(w) for w in params.weights]
        self.bias_vars = [tape.leaf(b) for b in params.biases]

    def apply(self, x: Var) -> Var:
        h = x
        for w, b, act in zip(self.weight_vars, self.bias_vars, self.params.activations):
            h = self.tape.add_bias(self.tape.matmul(w, h), b)
            if act == "relu":
                h = self.tape.relu(h)
        return h

    def grads(self) -> list[np.ndarray]:
        """Gradients in the same flat order as ``MlpParams.arrays``."""
        out = []
        for wv, bv in zip(self.weight_vars, self.bias_vars):
            gw = wv.grad
            gb = bv.grad
            out.append(gw if gw is not None else np.zeros_like(wv.value))
            out.append(gb if gb is not None else np.zeros_like(bv.value))
        return out


@dataclass
class AdaBeliefState:
    """First-moment and belief (centered second-moment) buffers."""

    m: list[np.ndarray]
    s: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-16
    learning_rate: float = 1e-3

    @classmethod
    def for_params(cls, params: list[np.ndarray], learning_rate: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999,
                   epsilon: float = 1e-16) -> "AdaBeliefState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            s=[np.zeros_like(p) for p in params],
            beta1=beta1, beta2=beta2, epsilon=epsilon,
            learning_rate=learning_rate,
        )

    def copy(self) -> "AdaBeliefState":
        return AdaBeliefState(
            m=[x.copy() for x in self.m], s=[x.copy() for x in self.s],
            step=self.step, beta1=self.beta1, beta2=self.beta2,
            epsilon=self.epsilon, learning_rate=self.learning_rate,
        )


def adabelief_step(params: list[np.ndarray], grads: list[np.ndarray],
                   state: AdaBeliefState) -> tuple[list[np.ndarray], AdaBeliefState]:
    """One AdaBelief update, in place on ``params`` and ``state``.

    Tracks the belief s = EMA of (g - m)^2 with an epsilon floor added per
    step, then applies the bias-corrected update
    ``p -= lr * m_hat / (sqrt(s_hat) + eps)``.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads length mismatch")
    state.step += 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, s in zip(params, grads, state.m, state.s):
        if p.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        diff = g - m
        s *= b2
        s += (1.0 - b2) * diff * diff + eps
        m_hat = m / c1
        s_hat = s / c2
        p -= state.learning_rate * m_hat / (np.sqrt(s_hat) + eps)
    return params, state
