import numpy as np
import pytest

from stablegates.rnn import LayerParams, Mode, NetworkParams
from stablegates.stability import network_certificate
from stablegates.training import batch_loss, bptt_gradients

# Reference values computed with 30-digit arithmetic (mpmath) and rounded to float64.
SIGMOID_2 = 0.8807970779778823
SIGMOID_4 = 0.9820137900379085
TANH_2 = 0.9640275800758169
HALF_TANH_2 = 0.48201379003790845


def random_layer(rng, n_h, n_in, mode=Mode.CFN, scale=1.0, r_scale=None):
    r_scale = scale if r_scale is None else r_scale
    g = lambda *s: scale * rng.standard_normal(s)
    R = (lambda: np.zeros((n_h, n_h))) if mode is Mode.DGN else (lambda: r_scale * rng.standard_normal((n_h, n_h)))
    return LayerParams(g(n_h, n_in), g(n_h, n_in), g(n_h, n_in), R(), R(), g(n_h), g(n_h), g(n_h))


def random_net(rng, n_u, sizes, n_y, mode=Mode.CFN, scale=1.0, r_scale=None):
    layers, n_in = [], n_u
    for n in sizes:
        layers.append(random_layer(rng, n, n_in, mode, scale, r_scale))
        n_in = n
    return NetworkParams(tuple(layers), scale * rng.standard_normal((n_y, n_in)), scale * rng.standard_normal(n_y), mode)


def random_certified_net(rng, n_u, sizes, n_y):
    """Alternate between DGNs and small-weight CFNs, redrawing until the certificate holds."""
    while True:
        mode = Mode.DGN if rng.random() < 0.5 else Mode.CFN
        net = random_net(rng, n_u, sizes, n_y, mode, scale=rng.uniform(0.1, 0.8), r_scale=rng.uniform(0.0, 0.3))
        if network_certificate(net).schur_stable:
            return net


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def block_diagonal(nets):
    """One wide network that runs equally deep ``nets`` side by side.

    Weights are placed on the block diagonal, so every sub-network only sees
    its own slice of the input and of each layer state.  The result uses the
    ordinary simulation code path while evaluating many networks per step.
    """
    from scipy.linalg import block_diag

    depth = len(nets[0].layers)
    assert all(len(n.layers) == depth for n in nets)
    mode = Mode.DGN if all(n.mode is Mode.DGN for n in nets) else Mode.CFN
    layers = []
    for l in range(depth):
        ps = [n.layers[l] for n in nets]
        layers.append(LayerParams(
            **{k: block_diag(*(getattr(p, k) for p in ps)) for k in ("W_f", "W_i", "W_htilde", "R_f", "R_i")},
            **{k: np.concatenate([getattr(p, k) for p in ps]) for k in ("b_f", "b_i", "b_htilde")},
        ))
    W_y = block_diag(*(n.W_y for n in nets))
    return NetworkParams(tuple(layers), W_y, np.concatenate([n.b_y for n in nets]), mode)


def split_blocks(x, sizes):
    """Split the trailing axis of ``x`` into consecutive pieces of the given sizes."""
    return np.split(x, np.cumsum(sizes)[:-1], axis=-1)


def gradient_check(net, batch, washout, masks=None, step=1e-6):
    """Largest per-tensor relative error between analytic and central-difference gradients."""
    _, grads = bptt_gradients(net, batch, washout, masks)
    tensors = net.tensors()
    worst = 0.0
    for t, (w, g) in enumerate(zip(tensors, grads.tensors())):
        if net.mode is Mode.DGN and t < 8 * len(net.layers) and t % 8 in (3, 4):
            assert not np.any(g)
            continue
        num = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            for sign in (1, -1):
                shifted = [x.copy() for x in tensors]
                shifted[t][idx] += sign * step
                num[idx] += sign * batch_loss(net.with_tensors(shifted), batch, washout, masks)
            num[idx] /= 2 * step
        denom = max(np.linalg.norm(num), np.linalg.norm(g), 1e-12)
        worst = max(worst, np.linalg.norm(num - g) / denom)
    return worst


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
