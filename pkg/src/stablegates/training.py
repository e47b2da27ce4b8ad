"""Loss, backpropagation through time, Adam and the training loop for CFN/DGN models."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .rnn import Mode, NetworkParams, init_network, layer_forward, simulate

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def _uy(item) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(item, "u") and hasattr(item, "y"):
        u, y = item.u, item.y
    else:
        u, y = item
    u, y = np.asarray(u, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    return u, y


def _groups(batch) -> list[tuple[list[int], np.ndarray, np.ndarray]]:
    """Indices and stacked ``(B, T, .)`` arrays for each distinct sequence length."""
    pairs = [_uy(item) for item in batch]
    by_len: dict[int, list[int]] = {}
    for idx, (u, _) in enumerate(pairs):
        by_len.setdefault(u.shape[0], []).append(idx)
    return [
        (idxs, np.stack([pairs[i][0] for i in idxs]), np.stack([pairs[i][1] for i in idxs]))
        for _, idxs in sorted(by_len.items())
    ]


def _check_washout(T: int, washout: int):
    if T <= washout:
        raise ValueError(f"sequence of length {T} is not longer than the washout ({washout})")


def mse_loss(net: NetworkParams, batch, washout: int) -> float:
    """Mean over sequences of the post-washout mean squared prediction error (zero initial state)."""
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    total = 0.0
    h0 = tuple(np.zeros(n) for n in net.hidden_sizes)
    for idxs, U, Y in _groups(batch):
        T = U.shape[1]
        _check_washout(T, washout)
        y_hat = simulate(net, h0, U).y
        per_seq = np.sum((Y[:, washout:] - y_hat[:, washout:]) ** 2, axis=(1, 2)) / (T - washout)
        total += float(np.sum(per_seq))
    return total / len(batch)


def sample_dropout_masks(net: NetworkParams, lengths: Sequence[int], rate: float,
                         rng: np.random.Generator) -> list[list[np.ndarray]]:
    """Inverted-dropout scale factors on every layer input, per sequence and step."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    sizes = [net.n_u, *net.hidden_sizes[:-1]]
    keep = 1.0 - rate
    return [
        [(rng.random((T, n)) < keep) / keep for n in sizes]
        for T in lengths
    ]


@dataclass
class _LayerCache:
    X: np.ndarray  # (T, B, n_in) layer inputs after dropout
    H: np.ndarray  # (T+1, B, n_h)
    F: np.ndarray
    I: np.ndarray
    C: np.ndarray
    mask: np.ndarray | None


def _forward(net: NetworkParams, U: np.ndarray, masks) -> list[_LayerCache]:
    B, T, _ = U.shape
    x_seq = np.swapaxes(U, 0, 1)
    caches = []
    for l, p in enumerate(net.layers):
        mask = None if masks is None else masks[l]
        if mask is not None:
            x_seq = x_seq * mask
        H = np.zeros((T + 1, B, p.n_h))
        F, I, C = (np.empty((T, B, p.n_h)) for _ in range(3))
        h = H[0]
        for k in range(T):
            h, g = layer_forward(p, h, x_seq[k], net.mode)
            H[k + 1], F[k], I[k], C[k] = h, g.f, g.i, g.h_tilde
        caches.append(_LayerCache(x_seq, H, F, I, C, mask))
        x_seq = H[1:]
    return caches


def _group_masks(dropout_mask, idxs: list[int], n_layers: int):
    if dropout_mask is None:
        return None
    return [np.stack([dropout_mask[i][l] for i in idxs], axis=1) for l in range(n_layers)]


def bptt_gradients(net: NetworkParams, batch, washout: int, dropout_mask=None) -> tuple[float, NetworkParams]:
    """Loss and its exact gradient, returned as a :class:`NetworkParams` of gradients.

    ``dropout_mask`` is ``None`` or, per sequence, a list of per-layer arrays of
    shape ``(T, n_in)`` multiplying each layer input.
    """
    batch = list(batch)
    n_seq = len(batch)
    if n_seq == 0:
        raise ValueError("empty batch")
    L = len(net.layers)
    cfn = net.mode is Mode.CFN
    grads = [np.zeros_like(t) for t in net.tensors()]
    loss = 0.0
    for idxs, U, Y in _groups(batch):
        T = U.shape[1]
        _check_washout(T, washout)
        caches = _forward(net, U, _group_masks(dropout_mask, idxs, L))
        H_top = caches[-1].H[1:]
        resid = H_top @ net.W_y.T + net.b_y - np.swapaxes(Y, 0, 1)
        resid[:washout] = 0.0
        loss += float(np.sum(resid ** 2)) / (T - washout)
        dY = resid * (2.0 / ((T - washout) * n_seq))
        grads[-2] += np.einsum("tby,tbh->yh", dY, H_top)
        grads[-1] += dY.sum(axis=(0, 1))
        dH_out = dY @ net.W_y
        for l in range(L - 1, -1, -1):
            p, c = net.layers[l], caches[l]
            tanh_h = np.tanh(c.H[:-1])
            dA_f = np.empty_like(c.F)
            dA_i = np.empty_like(c.I)
            dA_c = np.empty_like(c.C)
            carry = np.zeros_like(c.H[0])
            for k in range(T - 1, -1, -1):
                g = dH_out[k] + carry
                f, i, ct, th = c.F[k], c.I[k], c.C[k], tanh_h[k]
                dA_f[k] = g * th * f * (1.0 - f)
                dA_i[k] = g * ct * i * (1.0 - i)
                dA_c[k] = g * i * (1.0 - ct * ct)
                carry = g * f * (1.0 - th * th)
                if cfn:
                    carry = carry + dA_f[k] @ p.R_f + dA_i[k] @ p.R_i
            base = l * 8
            H_prev = c.H[:-1]
            grads[base + 0] += np.einsum("tbh,tbi->hi", dA_f, c.X)
            grads[base + 1] += np.einsum("tbh,tbi->hi", dA_i, c.X)
            grads[base + 2] += np.einsum("tbh,tbi->hi", dA_c, c.X)
            if cfn:
                grads[base + 3] += np.einsum("tbh,tbj->hj", dA_f, H_prev)
                grads[base + 4] += np.einsum("tbh,tbj->hj", dA_i, H_prev)
            grads[base + 5] += dA_f.sum(axis=(0, 1))
            grads[base + 6] += dA_i.sum(axis=(0, 1))
            grads[base + 7] += dA_c.sum(axis=(0, 1))
            if l > 0:
                dX = dA_f @ p.W_f + dA_i @ p.W_i + dA_c @ p.W_htilde
                dH_out = dX if c.mask is None else dX * c.mask
    return loss / n_seq, net.with_tensors(grads)


def batch_loss(net: NetworkParams, batch, washout: int, dropout_mask=None) -> float:
    """Loss as seen by :func:`bptt_gradients`, i.e. including a fixed dropout mask."""
    batch = list(batch)
    loss = 0.0
    for idxs, U, Y in _groups(batch):
        T = U.shape[1]
        _check_washout(T, washout)
        caches = _forward(net, U, _group_masks(dropout_mask, idxs, len(net.layers)))
        y_hat = caches[-1].H[1:] @ net.W_y.T + net.b_y
        r = (y_hat - np.swapaxes(Y, 0, 1))[washout:]
        loss += float(np.sum(r ** 2)) / (T - washout)
    return loss / len(batch)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetworkParams, **hyper) -> "AdamState":
        zeros = [np.zeros_like(a) for a in params.tensors()]
        return cls([z.copy() for z in zeros], zeros, **hyper)


def adam_step(state: AdamState, grads: NetworkParams, lr: float, params: NetworkParams) -> tuple[NetworkParams, AdamState]:
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    g_list = grads.tensors()
    m = [b1 * m_ + (1.0 - b1) * g for m_, g in zip(state.m, g_list)]
    v = [b2 * v_ + (1.0 - b2) * g * g for v_, g in zip(state.v, g_list)]
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new = [p - lr * (m_ / c1) / (np.sqrt(v_ / c2) + state.eps)
           for p, m_, v_ in zip(params.tensors(), m, v)]
    if params.mode is Mode.DGN:
        # recurrent gate weights are structurally absent
        for l in range(len(params.layers)):
            new[l * 8 + 3] = np.zeros_like(new[l * 8 + 3])
            new[l * 8 + 4] = np.zeros_like(new[l * 8 + 4])
    return params.with_tensors(new), AdamState(m, v, t, b1, b2, state.eps)


@dataclass
class TrainConfig:
    hidden_sizes: tuple[int, ...] = (7,)
    mode: Mode = Mode.DGN
    epochs: int = 2000
    base_lr: float = 0.001
    lr_decay_factor: float = 0.9
    lr_decay_every: int = 200
    batch_size: int = 25
    dropout_rate: float = 0.05
    washout: int = 25
    seed: int = 0

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.hidden_sizes = tuple(int(n) for n in self.hidden_sizes)
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("hidden_sizes must list at least one positive layer size")
        if not self.base_lr > 0.0:
            raise ValueError("base_lr must be positive")
        if not 0.0 < self.lr_decay_factor <= 1.0 or self.lr_decay_every < 1:
            raise ValueError("lr_decay_factor must be in (0, 1] and lr_decay_every at least 1")
        if self.washout < 0:
            raise ValueError("washout must be non-negative")

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)


class BestTracker:
    """Keeps the parameters with the lowest validation loss; ties keep the earlier epoch."""

    def __init__(self):
        self.best_epoch: int | None = None
        self.best_loss = np.inf
        self.best_params: NetworkParams | None = None

    def update(self, epoch: int, val_loss: float, params: NetworkParams) -> bool:
        if val_loss < self.best_loss:
            self.best_epoch, self.best_loss, self.best_params = epoch, val_loss, params
            return True
        return False


@dataclass
class TrainReport:
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    n_updates: int = 0

    @property
    def best_val_mse(self) -> float:
        return min(self.val_mse)

    def rows(self) -> Iterable[tuple[int, float, float, float]]:
        return zip(range(len(self.val_mse)), self.train_mse, self.val_mse, self.lr)


def train(config: TrainConfig, train_set, val_set, init: NetworkParams | None = None,
          progress_every: int = 0) -> tuple[NetworkParams, TrainReport]:
    """Mini-batch Adam on the post-washout MSE with validation-based model selection.

    The loss carries no stability penalty for either architecture.
    """
    train_set, val_set = list(train_set), list(val_set)
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    shortest = min(_uy(s)[0].shape[0] for s in train_set + val_set)
    if config.washout >= shortest:
        raise ValueError(f"washout {config.washout} must be shorter than every sequence (shortest: {shortest})")
    u0, y0 = _uy(train_set[0])
    init_rng, shuffle_rng, dropout_rng = (np.random.default_rng(s)
                                          for s in np.random.SeedSequence(config.seed).spawn(3))
    params = init or init_network(u0.shape[1], config.hidden_sizes, y0.shape[1], config.mode, init_rng)
    if params.mode is not config.mode:
        raise ValueError("initial parameters do not match the configured architecture")
    adam = AdamState.for_params(params)
    tracker = BestTracker()
    report = TrainReport()
    lengths = [_uy(s)[0].shape[0] for s in train_set]
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = config.lr_at(epoch)
        order = shuffle_rng.permutation(len(train_set))
        weighted = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [train_set[i] for i in idx]
            masks = None
            if config.dropout_rate > 0.0:
                masks = sample_dropout_masks(params, [lengths[i] for i in idx], config.dropout_rate, dropout_rng)
            loss, grads = bptt_gradients(params, batch, config.washout, masks)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.tensors()):
                raise TrainingDiverged(
                    f"non-finite loss or gradient at epoch {epoch}; lower the learning rate (currently {lr:g})"
                )
            params, adam = adam_step(adam, grads, lr, params)
            report.n_updates += 1
            weighted += loss * len(idx)
        val = mse_loss(params, val_set, config.washout)
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}; lower the learning rate")
        tracker.update(epoch, val, params)
        report.train_mse.append(weighted / len(train_set))
        report.val_mse.append(val)
        report.lr.append(lr)
        report.wall_clock.append(time.perf_counter() - t0)
        if progress_every and (epoch % progress_every == 0 or epoch == config.epochs - 1):
            log.info("epoch %d  train %.6g  val %.6g  lr %.3g", epoch, report.train_mse[-1], val, lr)
    report.best_epoch = tracker.best_epoch
    return tracker.best_params, report


def fit_metric(y_true, y_pred, skip: int = 0):
    """Normalized fit in percent, ``100 (1 - |y - y_hat| / |y - mean(y)|)``, from index ``skip`` on.

    Multi-channel inputs give one value per channel.
    """
    yt = np.asarray(y_true, dtype=np.float64)
    yp = np.asarray(y_pred, dtype=np.float64)
    if yt.shape != yp.shape:
        raise ValueError(f"shape mismatch: {yt.shape} vs {yp.shape}")
    scalar = yt.ndim == 1
    yt, yp = yt.reshape(yt.shape[0], -1)[skip:], yp.reshape(yp.shape[0], -1)[skip:]
    if yt.shape[0] < 2:
        raise ValueError("need at least two samples after skipping")
    den = np.linalg.norm(yt - yt.mean(axis=0), axis=0)
    if np.any(den == 0.0):
        raise ValueError("FIT is undefined for a constant target")
    fit = 100.0 * (1.0 - np.linalg.norm(yt - yp, axis=0) / den)
    if scalar or fit.size == 1:
        return float(fit[0])
    return fit
