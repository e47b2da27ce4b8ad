"""Chaos-free (CFN) and decoupled-gate (DGN) recurrent layers and stacked networks.

Layer update::

    f  = sigmoid(W_f u + R_f h + b_f)
    i  = sigmoid(W_i u + R_i h + b_i)
    c  = tanh(W_htilde u + b_htilde)
    h' = f * tanh(h) + i * c

Layer ``l > 1`` is driven by the *updated* state of layer ``l - 1`` within the
same step, and the output is read from the updated state of the last layer.
A DGN is the same network with ``R_f = R_i = 0``.

All functions accept arbitrary leading batch axes on vectors.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

INVARIANT_BOUND = 2.0

LAYER_TENSORS = ("W_f", "W_i", "W_htilde", "R_f", "R_i", "b_f", "b_i", "b_htilde")


class Mode(str, Enum):
    CFN = "cfn"
    DGN = "dgn"


def _frozen(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.flags.writeable = False
    return arr


def sigmoid(x):
    out = expit(np.asarray(x, dtype=np.float64))
    return out[()] if out.ndim == 0 else out


def tanh_act(x):
    out = np.tanh(np.asarray(x, dtype=np.float64))
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class LayerParams:
    W_f: np.ndarray
    W_i: np.ndarray
    W_htilde: np.ndarray
    R_f: np.ndarray
    R_i: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_htilde: np.ndarray

    def __post_init__(self):
        for name in LAYER_TENSORS:
            object.__setattr__(self, name, _frozen(getattr(self, name), name))
        n_h, n_in = self.W_f.shape if self.W_f.ndim == 2 else (-1, -1)
        if n_h < 1 or n_in < 1:
            raise ValueError(f"W_f must be a non-empty matrix, got shape {self.W_f.shape}")
        expected = {
            "W_f": (n_h, n_in), "W_i": (n_h, n_in), "W_htilde": (n_h, n_in),
            "R_f": (n_h, n_h), "R_i": (n_h, n_h),
            "b_f": (n_h,), "b_i": (n_h,), "b_htilde": (n_h,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def n_h(self) -> int:
        return self.W_f.shape[0]

    @property
    def n_in(self) -> int:
        return self.W_f.shape[1]

    @classmethod
    def zeros(cls, n_h: int, n_in: int) -> "LayerParams":
        return cls(
            W_f=np.zeros((n_h, n_in)), W_i=np.zeros((n_h, n_in)), W_htilde=np.zeros((n_h, n_in)),
            R_f=np.zeros((n_h, n_h)), R_i=np.zeros((n_h, n_h)),
            b_f=np.zeros(n_h), b_i=np.zeros(n_h), b_htilde=np.zeros(n_h),
        )

    def tensors(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in LAYER_TENSORS]

    def replace(self, **changes) -> "LayerParams":
        kwargs = {name: getattr(self, name) for name in LAYER_TENSORS}
        kwargs.update(changes)
        return LayerParams(**kwargs)


@dataclass(frozen=True)
class NetworkParams:
    layers: tuple[LayerParams, ...]
    W_y: np.ndarray
    b_y: np.ndarray
    mode: Mode = Mode.CFN

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a network needs at least one layer")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "W_y", _frozen(self.W_y, "W_y"))
        object.__setattr__(self, "b_y", _frozen(self.b_y, "b_y"))
        for l in range(1, len(layers)):
            if layers[l].n_in != layers[l - 1].n_h:
                raise ValueError(
                    f"layer {l + 1} expects {layers[l].n_in} inputs but layer {l} has {layers[l - 1].n_h} units"
                )
        if self.W_y.ndim != 2 or self.W_y.shape[1] != layers[-1].n_h:
            raise ValueError(f"W_y has shape {self.W_y.shape}, needs {layers[-1].n_h} columns")
        if self.b_y.shape != (self.W_y.shape[0],):
            raise ValueError(f"b_y has shape {self.b_y.shape}, expected ({self.W_y.shape[0]},)")
        if self.mode is Mode.DGN:
            for l, p in enumerate(layers, start=1):
                if np.any(p.R_f != 0.0) or np.any(p.R_i != 0.0):
                    raise ValueError(f"DGN layer {l} has nonzero recurrent gate weights")

    @property
    def n_u(self) -> int:
        return self.layers[0].n_in

    @property
    def n_y(self) -> int:
        return self.W_y.shape[0]

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(p.n_h for p in self.layers)

    @classmethod
    def zeros(cls, n_u: int, hidden_sizes: Sequence[int], n_y: int, mode: Mode = Mode.CFN) -> "NetworkParams":
        sizes = [n_u, *hidden_sizes]
        layers = tuple(LayerParams.zeros(sizes[l + 1], sizes[l]) for l in range(len(hidden_sizes)))
        return cls(layers, np.zeros((n_y, sizes[-1])), np.zeros(n_y), mode)

    def tensors(self) -> list[np.ndarray]:
        """Flat, fixed-order list of every parameter array."""
        out = []
        for p in self.layers:
            out.extend(p.tensors())
        out.extend([self.W_y, self.b_y])
        return out

    def with_tensors(self, tensors: Sequence[np.ndarray]) -> "NetworkParams":
        """Rebuild a network of the same shape from a list ordered like :meth:`tensors`."""
        n = len(LAYER_TENSORS)
        expected = n * len(self.layers) + 2
        if len(tensors) != expected:
            raise ValueError(f"expected {expected} tensors, got {len(tensors)}")
        layers = tuple(
            LayerParams(**dict(zip(LAYER_TENSORS, tensors[l * n:(l + 1) * n])))
            for l in range(len(self.layers))
        )
        return NetworkParams(layers, tensors[-2], tensors[-1], self.mode)


class GateActivations(NamedTuple):
    f: np.ndarray
    i: np.ndarray
    h_tilde: np.ndarray


class StepResult(NamedTuple):
    state: tuple[np.ndarray, ...]
    y: np.ndarray


class Trajectory(NamedTuple):
    y: np.ndarray
    # one array per layer, time axis includes the initial state
    h: tuple[np.ndarray, ...]


def _check_last_dim(x: np.ndarray, n: int, what: str):
    if x.ndim == 0 or x.shape[-1] != n:
        raise ValueError(f"{what} has trailing dimension {x.shape[-1:] or '()'}, expected {n}")


def layer_gates(p: LayerParams, u_tilde, h, mode: Mode = Mode.CFN) -> GateActivations:
    u_tilde = np.asarray(u_tilde, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if u_tilde.shape[-1:] != (p.n_in,):
        _check_last_dim(u_tilde, p.n_in, "layer input")
    if h.shape[-1:] != (p.n_h,):
        _check_last_dim(h, p.n_h, "hidden state")
    a_f = u_tilde @ p.W_f.T + p.b_f
    a_i = u_tilde @ p.W_i.T + p.b_i
    if mode is Mode.CFN or mode == "cfn":
        a_f += h @ p.R_f.T
        a_i += h @ p.R_i.T
    return GateActivations(expit(a_f), expit(a_i), np.tanh(u_tilde @ p.W_htilde.T + p.b_htilde))


def layer_forward(p: LayerParams, h, u_tilde, mode: Mode = Mode.CFN) -> tuple[np.ndarray, GateActivations]:
    """State update together with the gate values that produced it."""
    h = np.asarray(h, dtype=np.float64)
    g = layer_gates(p, u_tilde, h, mode)
    return g.f * np.tanh(h) + g.i * g.h_tilde, g


def layer_step(p: LayerParams, h, u_tilde, mode: Mode = Mode.CFN) -> np.ndarray:
    return layer_forward(p, h, u_tilde, mode)[0]


def default_initial_state(net: NetworkParams) -> tuple[np.ndarray, ...]:
    return tuple(np.zeros(n) for n in net.hidden_sizes)


def _as_state(net: NetworkParams, h_all) -> tuple[np.ndarray, ...]:
    if len(h_all) != len(net.layers):
        raise ValueError(f"state has {len(h_all)} layers, network has {len(net.layers)}")
    return tuple(np.asarray(h, dtype=np.float64) for h in h_all)


def network_step(net: NetworkParams, h_all, u) -> StepResult:
    """One step of the stacked network; returns the updated state and the output."""
    h_all = _as_state(net, h_all)
    x = np.asarray(u, dtype=np.float64)
    _check_last_dim(x, net.n_u, "input")
    new = []
    for p, h in zip(net.layers, h_all):
        x = layer_step(p, h, x, net.mode)
        new.append(x)
    return StepResult(tuple(new), x @ net.W_y.T + net.b_y)


def in_invariant_set(h_all, tol: float = 0.0) -> bool:
    return all(bool(np.all(np.abs(h) <= INVARIANT_BOUND + tol)) for h in h_all)


def simulate(net: NetworkParams, h0, u_seq) -> Trajectory:
    """Iterate :func:`network_step` over ``u_seq``.

    ``u_seq`` has shape ``(T, n_u)`` or ``(B, T, n_u)``.  Returned outputs keep
    that layout; per-layer states have shape ``(T + 1, n_h)`` or
    ``(B, T + 1, n_h)`` with the initial state first.
    """
    u_seq = np.asarray(u_seq, dtype=np.float64)
    if u_seq.ndim not in (2, 3):
        raise ValueError(f"u_seq must have shape (T, n_u) or (B, T, n_u), got {u_seq.shape}")
    _check_last_dim(u_seq, net.n_u, "input sequence")
    batched = u_seq.ndim == 3
    steps = np.moveaxis(u_seq, -2, 0)
    batch_shape = steps.shape[1:-1]
    h = tuple(np.broadcast_to(s, batch_shape + (n,)).copy()
              for s, n in zip(_as_state(net, h0), net.hidden_sizes))
    if not in_invariant_set(h):
        raise ValueError("initial state lies outside [-2, 2]^n_h")
    T = steps.shape[0]
    ys = np.empty((T,) + batch_shape + (net.n_y,))
    hs = [np.empty((T + 1,) + batch_shape + (n,)) for n in net.hidden_sizes]
    for l, hl in enumerate(h):
        hs[l][0] = hl
    for k in range(T):
        h, ys[k] = network_step(net, h, steps[k])
        for l, hl in enumerate(h):
            hs[l][k + 1] = hl
    if batched:
        return Trajectory(np.moveaxis(ys, 0, 1), tuple(np.moveaxis(a, 0, 1) for a in hs))
    return Trajectory(ys, tuple(hs))


def init_network(n_u: int, hidden_sizes: Sequence[int], n_y: int, mode: Mode, rng: np.random.Generator) -> NetworkParams:
    """Fan-in scaled uniform weights, zero biases; DGN recurrent gate weights stay zero."""
    mode = Mode(mode)
    sizes = [n_u, *hidden_sizes]
    layers = []
    for n_in, n_h in zip(sizes[:-1], sizes[1:]):
        a = 1.0 / np.sqrt(n_in)
        draw = lambda shape: rng.uniform(-a, a, size=shape)  # noqa: E731
        W_f, W_i, W_htilde = draw((n_h, n_in)), draw((n_h, n_in)), draw((n_h, n_in))
        if mode is Mode.CFN:
            R_f, R_i = draw((n_h, n_h)), draw((n_h, n_h))
        else:
            R_f, R_i = np.zeros((n_h, n_h)), np.zeros((n_h, n_h))
        z = np.zeros(n_h)
        layers.append(LayerParams(W_f, W_i, W_htilde, R_f, R_i, z, z, z))
    a = 1.0 / np.sqrt(sizes[-1])
    return NetworkParams(tuple(layers), rng.uniform(-a, a, size=(n_y, sizes[-1])), np.zeros(n_y), mode)
