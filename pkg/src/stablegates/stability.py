"""Analytic ISS / incremental-ISS certificates and their empirical checks.

Every quantity uses the infinity norm; for matrices that is the induced norm
(maximum absolute row sum).  Layer inputs are assumed to live in
``[-2, 2]^n_in``, which covers both the normalized external input and the
forward-invariant state of the previous layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .rnn import LayerParams, Mode, NetworkParams, in_invariant_set, simulate, sigmoid

MARGINAL_BAND = 1e-9


class CertificateRefused(ValueError):
    """Raised when a bound is requested for a network whose certificate fails."""


def inf_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        return float(np.max(np.abs(a))) if a.size else 0.0
    return float(np.max(np.sum(np.abs(a), axis=1)))


def sigma_bar_f(p: LayerParams) -> float:
    """Upper bound of every forget-gate component over the compact domain."""
    return float(sigmoid(inf_norm(np.hstack([2.0 * p.W_f, 2.0 * p.R_f, p.b_f[:, None]]))))


def phi_bar_htilde(p: LayerParams) -> float:
    return math.tanh(inf_norm(np.hstack([2.0 * p.W_htilde, p.b_htilde[:, None]])))


def rho(p: LayerParams) -> float:
    return sigma_bar_f(p) + 0.25 * inf_norm(p.R_f) + 0.25 * inf_norm(p.R_i) * phi_bar_htilde(p)


def gamma_input(p: LayerParams) -> float:
    return inf_norm(p.W_htilde) + 0.25 * inf_norm(p.W_f) + 0.25 * inf_norm(p.W_i) * phi_bar_htilde(p)


class IssGains(NamedTuple):
    beta_base: float
    gamma_u_coeff: float
    gamma_b_coeff: float


def iss_gains(p: LayerParams) -> IssGains:
    """``|h_k| <= base**k |h_0| + gamma_u * max|u| + gamma_b * |b_htilde|``."""
    s = sigma_bar_f(p)
    return IssGains(s, inf_norm(p.W_htilde) / (1.0 - s), 1.0 / (1.0 - s))


def iss_state_bound(p: LayerParams, h0_norm: float, max_input_norm: float, k: int) -> float:
    g = iss_gains(p)
    return g.beta_base ** k * h0_norm + g.gamma_u_coeff * max_input_norm + g.gamma_b_coeff * inf_norm(p.b_htilde)


@dataclass(frozen=True)
class LayerCertificate:
    sigma_bar_f: float
    phi_bar_htilde: float
    rho: float
    gamma_input: float
    iss_gains: IssGains

    @property
    def delta_iss_holds(self) -> bool:
        return self.rho < 1.0

    @property
    def marginal(self) -> bool:
        return abs(self.rho - 1.0) <= MARGINAL_BAND

    @classmethod
    def of(cls, p: LayerParams) -> "LayerCertificate":
        return cls(sigma_bar_f(p), phi_bar_htilde(p), rho(p), gamma_input(p), iss_gains(p))


def cascade_matrices(net: NetworkParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer difference-norm recursion ``eta_k <= A eta_{k-1} + B |du_{k-1}|``.

    Layer ``l`` is driven by the same-step state of layer ``l - 1``, so its row
    is ``Gamma_l`` times the row of the layer below plus ``rho_l`` on the
    diagonal.
    """
    L = len(net.layers)
    A = np.zeros((L, L))
    B = np.zeros(L)
    for l, p in enumerate(net.layers):
        r, g = rho(p), gamma_input(p)
        if l == 0:
            B[0] = g
        else:
            A[l, :l] = g * A[l - 1, :l]
            B[l] = g * B[l - 1]
        A[l, l] = r
    return A, B


@dataclass(frozen=True)
class NetworkCertificate:
    mode: Mode
    per_layer: tuple[LayerCertificate, ...]
    A_delta: np.ndarray
    B_delta_u: np.ndarray
    delta_iss_input_gain: float | None = field(default=None)

    @property
    def schur_stable(self) -> bool:
        return all(c.delta_iss_holds for c in self.per_layer)

    @property
    def violating_layers(self) -> list[int]:
        return [l for l, c in enumerate(self.per_layer, start=1) if not c.delta_iss_holds]

    @property
    def marginal_layers(self) -> list[int]:
        return [l for l, c in enumerate(self.per_layer, start=1) if c.marginal]

    @property
    def verdict(self) -> str:
        if self.schur_stable:
            return "certified (by design)" if self.mode is Mode.DGN else "certified"
        layers = ", ".join(str(l) for l in self.violating_layers)
        return f"condition rho < 1 violated at layer(s) {layers}"

    def __eq__(self, other):
        if not isinstance(other, NetworkCertificate):
            return NotImplemented
        return (
            self.mode == other.mode
            and self.per_layer == other.per_layer
            and np.array_equal(self.A_delta, other.A_delta)
            and np.array_equal(self.B_delta_u, other.B_delta_u)
            and self.delta_iss_input_gain == other.delta_iss_input_gain
        )

    __hash__ = None


def network_certificate(net: NetworkParams) -> NetworkCertificate:
    per_layer = tuple(LayerCertificate.of(p) for p in net.layers)
    A, B = cascade_matrices(net)
    gain = None
    if all(c.delta_iss_holds for c in per_layer):
        gain = inf_norm(np.linalg.solve(np.eye(len(B)) - A, B))
    return NetworkCertificate(Mode(net.mode), per_layer, A, B, gain)


def _require_certified(cert: NetworkCertificate):
    if not cert.schur_stable:
        raise CertificateRefused(f"no incremental bound available: {cert.verdict}")


def propagate_bound(cert: NetworkCertificate, eta0, input_diffs) -> np.ndarray:
    """Per-layer bound vectors for steps ``0..len(input_diffs)``.

    Iterates ``eta_k = A eta_{k-1} + B d_{k-1}`` with ``d`` the per-step input
    difference norms.  Row ``k`` of the result bounds the per-layer state
    difference norms at step ``k``.
    """
    _require_certified(cert)
    A, B = cert.A_delta, cert.B_delta_u
    d = np.asarray(input_diffs, dtype=np.float64)
    out = np.empty((d.size + 1, B.size))
    out[0] = np.asarray(eta0, dtype=np.float64)
    for k in range(d.size):
        out[k + 1] = A @ out[k] + B * d[k]
    return out


def divergence_bound(cert: NetworkCertificate, h0_diff_norms, max_input_diff: float, k: int) -> float:
    """``|A^k eta_0 + sum_{z<k} A^z B * max_input_diff|_inf`` by iterating the recursion."""
    if k < 0:
        raise ValueError("k must be non-negative")
    return float(np.max(propagate_bound(cert, h0_diff_norms, np.full(k, float(max_input_diff)))[-1]))


@dataclass
class DivergenceTrace:
    state_diff: np.ndarray          # (T+1,) network-wide inf norm
    layer_diff: np.ndarray          # (T+1, L)
    input_diff: np.ndarray          # (T,)
    bound: np.ndarray | None        # (T+1,) or None when the certificate refuses
    layer_bound: np.ndarray | None  # (T+1, L)
    verdict: str
    violation_step: int | None = None

    @property
    def satisfied(self) -> bool:
        return self.bound is not None and self.violation_step is None

    @property
    def max_utilization(self) -> float | None:
        """Largest ratio of empirical difference to bound after step 0 (0/0 counts as 0).

        Step 0 is excluded because the bound starts at the measured initial difference.
        """
        if self.layer_bound is None or self.layer_bound.shape[0] < 2:
            return None
        num, den = self.layer_diff[1:], self.layer_bound[1:]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(num == 0.0, 0.0, num / den)
        return float(np.max(r))


def empirical_delta_iss_check(net: NetworkParams, h0_a, h0_b, u_seq_a, u_seq_b,
                              cert: NetworkCertificate | None = None) -> DivergenceTrace:
    """Simulate two trajectories and compare their divergence with the certificate bound."""
    u_a = np.asarray(u_seq_a, dtype=np.float64)
    u_b = np.asarray(u_seq_b, dtype=np.float64)
    if u_a.shape != u_b.shape or u_a.ndim != 2:
        raise ValueError(f"input sequences must share a (T, n_u) shape, got {u_a.shape} and {u_b.shape}")
    for u in (u_a, u_b):
        if u.size and np.max(np.abs(u)) > 1.0:
            raise ValueError("inputs must lie in [-1, 1]^n_u (input boundedness assumption)")
    if not (in_invariant_set(h0_a) and in_invariant_set(h0_b)):
        raise ValueError("initial states must lie in [-2, 2]^n_h")
    if len(h0_a) != len(net.layers) or len(h0_b) != len(net.layers):
        raise ValueError(f"initial states need one entry per layer ({len(net.layers)})")
    cert = cert or network_certificate(net)
    both = simulate(net, [np.stack([np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)])
                          for a, b in zip(h0_a, h0_b)], np.stack([u_a, u_b]))
    layer_diff = np.stack([np.max(np.abs(h[0] - h[1]), axis=-1) for h in both.h], axis=-1)
    d_in = np.max(np.abs(u_a - u_b), axis=-1) if u_a.size else np.zeros(0)
    state_diff = np.max(layer_diff, axis=-1)
    if not cert.schur_stable:
        return DivergenceTrace(state_diff, layer_diff, d_in, None, None,
                               f"certificate refused ({cert.verdict}); empirical trace only")
    layer_bound = propagate_bound(cert, layer_diff[0], d_in)
    bad = np.nonzero(np.any(layer_diff > layer_bound, axis=-1))[0]
    step = int(bad[0]) if bad.size else None
    verdict = "bound satisfied" if step is None else (
        f"counterexample at step {step}: difference {state_diff[step]:.6e} exceeds bound "
        f"{np.max(layer_bound[step]):.6e}"
    )
    return DivergenceTrace(state_diff, layer_diff, d_in, np.max(layer_bound, axis=-1), layer_bound, verdict, step)


def first_step_below(values: Sequence[float], threshold: float) -> int | None:
    """First index from which ``values`` stays strictly below ``threshold``."""
    v = np.asarray(values)
    above = np.nonzero(v >= threshold)[0]
    if above.size == 0:
        return 0
    k = int(above[-1]) + 1
    return k if k < v.size else None
