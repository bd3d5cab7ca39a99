"""One-hidden-layer relu networks with hand-written backprop and Adam.

Every learned function in the package (behavioral critic, value heads, dual
potentials, IQL networks) is an instance of :class:`Network`. All arithmetic
is float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument, NumericError

_ACTIVATIONS = {"relu": 0}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATIONS.items()}
_NET_MAGIC = b"NET1"
_NET_HEADER = struct.Struct("<4sIIIB")


@dataclass
class Network:
    w1: np.ndarray  # (hidden, input)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (output, hidden)
    b2: np.ndarray  # (output,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")
        h, i = self.w1.shape
        o = self.w2.shape[0]
        if self.b1.shape != (h,) or self.w2.shape != (o, h) or self.b2.shape != (o,):
            raise InvalidArgument("inconsistent parameter shapes")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def output_dim(self) -> int:
        return self.w2.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> "Network":
        return Network(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(), self.activation)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)


@dataclass
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def scaled(self, c: float) -> "Gradients":
        return Gradients(*(c * g for g in self.params()))

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(*(a + b for a, b in zip(self.params(), other.params())))


@dataclass
class OptimState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8


def init_network(input_dim: int, hidden_dim: int, output_dim: int, seed: int) -> Network:
    """He-uniform weights, zero biases; bit-identical for equal seeds."""
    for d in (input_dim, hidden_dim, output_dim):
        if int(d) != d or d < 1:
            raise InvalidArgument(f"network dims must be positive integers, got {d!r}")
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / input_dim)
    lim2 = np.sqrt(6.0 / hidden_dim)
    w1 = rng.uniform(-lim1, lim1, size=(hidden_dim, input_dim))
    w2 = rng.uniform(-lim2, lim2, size=(output_dim, hidden_dim))
    return Network(w1, np.zeros(hidden_dim), w2, np.zeros(output_dim))


def init_optim(net_or_params, learning_rate: float = 3e-4, beta1: float = 0.9,
               beta2: float = 0.999, eps_opt: float = 1e-8) -> OptimState:
    params = net_or_params.params() if hasattr(net_or_params, "params") else list(net_or_params)
    return OptimState(
        [np.zeros_like(p) for p in params],
        [np.zeros_like(p) for p in params],
        0, learning_rate, beta1, beta2, eps_opt,
    )


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise InvalidArgument(f"expected batch of shape (B, {net.input_dim}), got {x.shape}")
    return x


def forward_hidden(net: Network, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(output, hidden)``; ``hidden`` is the post-relu layer reused by backward."""
    x = _check_input(net, x)
    h = x @ net.w1.T
    h += net.b1
    np.maximum(h, 0.0, out=h)
    out = h @ net.w2.T
    out += net.b2
    return out, h


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    return forward_hidden(net, x)[0]


def backward(net: Network, x: np.ndarray, upstream: np.ndarray, hidden: np.ndarray | None = None,
             input_grad: bool = False):
    """Exact gradients of ``sum(upstream * forward(net, x))``.

    Pass ``hidden`` from :func:`forward_hidden` to skip recomputing the first
    layer. With ``input_grad=True`` returns ``(Gradients, d/dx)``.
    """
    x = _check_input(net, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (x.shape[0], net.output_dim):
        raise InvalidArgument(f"upstream gradient shape {upstream.shape} does not match "
                              f"({x.shape[0]}, {net.output_dim})")
    if hidden is None:
        _, hidden = forward_hidden(net, x)
    gw2 = upstream.T @ hidden
    gb2 = upstream.sum(axis=0)
    if net.output_dim == 1:
        # relu mask as 0/1 floats; fold the scalar upstream into the skinny side
        mask = (hidden > 0.0).astype(np.float64)
        rhs = np.empty((x.shape[1] + 1, x.shape[0]))
        np.multiply(upstream.T, x.T, out=rhs[:-1])
        rhs[-1] = upstream[:, 0]
        acc = rhs @ mask
        w2 = net.w2[0]
        gw1 = (acc[:-1] * w2).T
        gb1 = acc[-1] * w2
        grads = Gradients(gw1, gb1, gw2, gb2)
        if input_grad:
            dx = upstream * (mask @ (w2[:, None] * net.w1))
            return grads, dx
        return grads
    dpre = upstream @ net.w2
    dpre *= hidden > 0
    grads = Gradients(dpre.T @ x, dpre.sum(axis=0), gw2, gb2)
    if input_grad:
        return grads, dpre @ net.w1
    return grads


def adam_update(params: list[np.ndarray], grads: list[np.ndarray], state: OptimState) -> None:
    """In-place bias-corrected Adam step on a list of arrays (descent)."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient passed to optimizer", state.step_count)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step = state.learning_rate / (1.0 - b1 ** t)
    c2 = 1.0 / (1.0 - b2 ** t)
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v * c2)
        denom += state.eps_opt
        p -= step * m / denom


def optim_step(net: Network, grads: Gradients, state: OptimState) -> tuple[Network, OptimState]:
    params = net.params()
    gs = grads.params()
    if len(state.first_moment) != len(params) or any(
            p.shape != g.shape or p.shape != m.shape for p, g, m in zip(params, gs, state.first_moment)):
        raise InvalidArgument("gradient/optimizer shapes do not match network")
    adam_update(params, gs, state)
    return net, state


def polyak_update(target: Network, source: Network, tau: float) -> None:
    """target <- (1 - tau) * target + tau * source, in place."""
    for t, s in zip(target.params(), source.params()):
        t *= 1.0 - tau
        t += tau * s


def network_to_bytes(net: Network) -> bytes:
    header = _NET_HEADER.pack(_NET_MAGIC, net.input_dim, net.hidden_dim, net.output_dim,
                              _ACTIVATIONS[net.activation])
    blob = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.params())
    return header + blob


def network_from_bytes(data: bytes) -> Network:
    if len(data) < _NET_HEADER.size:
        raise FormatError("truncated network header", len(data))
    magic, i, h, o, act = _NET_HEADER.unpack_from(data, 0)
    if magic != _NET_MAGIC:
        raise FormatError(f"bad network magic {magic!r}", 0)
    if act not in _ACTIVATION_NAMES:
        raise FormatError(f"unknown activation tag {act}", _NET_HEADER.size - 1)
    if min(i, h, o) < 1:
        raise FormatError("zero network dimension", 4)
    shapes = [(h, i), (h,), (o, h), (o,)]
    need = _NET_HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != need:
        raise FormatError(f"network blob has {len(data)} bytes, expected {need}", min(len(data), need))
    params, off = [], _NET_HEADER.size
    for s in shapes:
        n = int(np.prod(s))
        params.append(np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(s))
        off += 8 * n
    return Network(*params, activation=_ACTIVATION_NAMES[act])


def save_network(net: Network, path) -> None:
    Path(path).write_bytes(network_to_bytes(net))


def load_network(path) -> Network:
    return network_from_bytes(Path(path).read_bytes())
