"""State-space model primitives.

Reference numpy implementations of ZOH discretization, the discrete
recurrence, its convolution-kernel form and the input-dependent (selective)
scan, plus the differentiable torch operator used by the models. The torch
operator runs the hand-written kernels in :mod:`vssbackdoor.kernels`.

A is always diagonal and stored as a vector of length ``N`` (state size).
"""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import kernels
from ._scan_py import ZOH_EPS
from .errors import DimensionError, DomainError, NumericError


@dataclass(frozen=True)
class ContinuousSsm:
    A: np.ndarray  # diagonal of the state-evolution matrix, (N,)
    B: np.ndarray  # (N,)
    C: np.ndarray  # (N,)

    def __post_init__(self):
        A, B, C = (np.asarray(v, dtype=np.float64).ravel() for v in (self.A, self.B, self.C))
        if not (A.shape == B.shape == C.shape) or A.size == 0:
            raise DimensionError(f"A, B, C must share length N, got {A.shape}, {B.shape}, {C.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def n_state(self):
        return self.A.size


@dataclass(frozen=True)
class DiscreteSsm:
    """Discrete parameters; each field is (N,) or per-step (M, N)."""

    A_bar: np.ndarray
    B_bar: np.ndarray
    C: np.ndarray
    delta: Optional[float] = None

    def __post_init__(self):
        for name in ("A_bar", "B_bar", "C"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not np.all(np.isfinite(self.A_bar)):
            raise DomainError("A_bar has non-finite entries")

    @property
    def time_invariant(self):
        return self.A_bar.ndim == 1 and self.B_bar.ndim == 1 and self.C.ndim == 1


@dataclass(frozen=True)
class ScanSequence:
    x: np.ndarray
    h0: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64).ravel()
        if x.size < 1:
            raise DimensionError("scan sequence must have length >= 1")
        object.__setattr__(self, "x", x)
        if self.h0 is not None:
            h0 = np.asarray(self.h0, dtype=np.float64).ravel()
            if not np.all(np.isfinite(h0)):
                raise DomainError("h0 must be finite")
            object.__setattr__(self, "h0", h0)


def zoh_discretize(ssm: ContinuousSsm, delta: float) -> DiscreteSsm:
    """Zero-order-hold discretization of a diagonal continuous SSM.

    ``A_bar = exp(delta*A)`` and ``B_bar = (delta*A)^-1 (exp(delta*A) - 1) delta*B``.
    Where ``|delta*A| < 1e-8`` the first-order limit ``B_bar = delta*B`` is used.
    """
    delta = float(delta)
    if not np.isfinite(delta) or delta <= 0:
        raise DomainError(f"delta must be a positive finite scalar, got {delta}")
    if not (np.all(np.isfinite(ssm.A)) and np.all(np.isfinite(ssm.B)) and np.all(np.isfinite(ssm.C))):
        raise DomainError("continuous SSM parameters must be finite")
    a = delta * ssm.A
    small = np.abs(a) < ZOH_EPS
    safe_a = np.where(small, 1.0, a)
    gain = np.where(small, delta, np.expm1(a) / safe_a * delta)
    return DiscreteSsm(A_bar=np.exp(a), B_bar=gain * ssm.B, C=ssm.C.copy(), delta=delta)


def _per_step(arr, M, N, name):
    if arr.ndim == 1:
        if arr.shape != (N,):
            raise DimensionError(f"{name} has length {arr.shape[0]}, expected {N}")
        return np.broadcast_to(arr, (M, N))
    if arr.shape != (M, N):
        raise DimensionError(f"{name} must be ({M}, {N}) per step, got {arr.shape}")
    return arr


def scan_sequential(d: DiscreteSsm, seq: ScanSequence) -> np.ndarray:
    """``h_t = A_bar_t * h_{t-1} + B_bar_t x_t``, ``y_t = <C_t, h_t>``."""
    M = seq.x.size
    N = d.A_bar.shape[-1]
    A_bar = _per_step(d.A_bar, M, N, "A_bar")
    B_bar = _per_step(d.B_bar, M, N, "B_bar")
    C = _per_step(d.C, M, N, "C")
    h = np.zeros(N) if seq.h0 is None else seq.h0
    if h.shape != (N,):
        raise DimensionError(f"h0 must have length {N}, got {h.shape}")
    y = np.empty(M)
    for t in range(M):
        h = A_bar[t] * h + B_bar[t] * seq.x[t]
        y[t] = C[t] @ h
    return y


def conv_kernel(d: DiscreteSsm, M: int) -> np.ndarray:
    """``K = (C B_bar, C A_bar B_bar, ..., C A_bar^(M-1) B_bar)`` for time-invariant ``d``."""
    if int(M) < 1:
        raise DomainError(f"kernel length must be >= 1, got {M}")
    if not d.time_invariant:
        raise DomainError("convolution kernel requires time-invariant parameters")
    powers = d.A_bar[None, :] ** np.arange(int(M))[:, None]
    return powers @ (d.C * d.B_bar)


def causal_conv(x, K):
    x = np.asarray(x, dtype=np.float64)
    return np.convolve(x, K)[: x.size]


@dataclass
class SelectiveProjections:
    """Per-token linear maps producing ``B_t``, ``C_t`` and the pre-softplus ``delta_t``."""

    w_B: np.ndarray  # (E, N)
    b_B: np.ndarray  # (N,)
    w_C: np.ndarray  # (E, N)
    b_C: np.ndarray  # (N,)
    w_delta: np.ndarray  # (E, E)
    b_delta: np.ndarray  # (E,)

    def __call__(self, x_t):
        B_t = x_t @ self.w_B + self.b_B
        C_t = x_t @ self.w_C + self.b_C
        delta_t = softplus(x_t @ self.w_delta + self.b_delta)
        return B_t, C_t, delta_t


def softplus(v):
    return np.logaddexp(0.0, v)


def selective_scan(x_seq, projections: SelectiveProjections, A, h0=None) -> np.ndarray:
    """Input-dependent scan over ``x_seq`` of shape (M, E).

    ``A`` is (E, N): each channel owns a diagonal evolution. Every token gets
    its own ``delta_t``, ``B_t`` and ``C_t``; channels are scanned independently.
    """
    x_seq = np.asarray(x_seq, dtype=np.float64)
    if x_seq.ndim != 2 or x_seq.shape[0] < 1:
        raise DimensionError(f"x_seq must be (M >= 1, E), got {x_seq.shape}")
    A = np.asarray(A, dtype=np.float64)
    M, E = x_seq.shape
    if A.ndim != 2 or A.shape[0] != E:
        raise DimensionError(f"A must be ({E}, N), got {A.shape}")
    N = A.shape[1]

    A_bar = np.empty((E, M, N))
    B_bar = np.empty((E, M, N))
    C_all = np.empty((M, N))
    for t in range(M):
        B_t, C_t, delta_t = projections(x_seq[t])
        if not (np.all(np.isfinite(B_t)) and np.all(np.isfinite(C_t)) and np.all(np.isfinite(delta_t))):
            raise NumericError(f"non-finite projection at token {t}", index=t)
        C_all[t] = C_t
        for e in range(E):
            step = zoh_discretize(ContinuousSsm(A[e], B_t, C_t), delta_t[e])
            A_bar[e, t], B_bar[e, t] = step.A_bar, step.B_bar

    y = np.empty((M, E))
    for e in range(E):
        h = None if h0 is None else np.asarray(h0, dtype=np.float64)[e]
        y[:, e] = scan_sequential(DiscreteSsm(A_bar[e], B_bar[e], C_all), ScanSequence(x_seq[:, e], h))
    bad = ~np.all(np.isfinite(y), axis=1)
    if bad.any():
        t = int(np.argmax(bad))
        raise NumericError(f"non-finite scan output at token {t}", index=t)
    return y


class SelectiveScanFn(torch.autograd.Function):
    """Batched selective scan with a hand-derived backward pass."""

    @staticmethod
    def forward(ctx, u, delta, A, B, C, backend=None):
        arrays = [t.detach().cpu().numpy() for t in (u, delta, A, B, C)]
        y, hs = kernels.scan_forward(*arrays, backend=backend)
        ctx.save_for_backward(u, delta, A, B, C)
        ctx.hs = hs
        ctx.backend = backend
        return torch.from_numpy(y).to(u.device)

    @staticmethod
    def backward(ctx, dy):
        u, delta, A, B, C = ctx.saved_tensors
        arrays = [t.detach().cpu().numpy() for t in (u, delta, A, B, C)]
        grads = kernels.scan_backward(*arrays, ctx.hs, dy.detach().cpu().numpy(), backend=ctx.backend)
        ctx.hs = None
        return (*(torch.from_numpy(np.asarray(g)).to(u.device) for g in grads), None)


def selective_scan_torch(u, delta, A, B, C, backend=None):
    """Differentiable scan. ``u, delta``: (batch, M, E); ``A``: (E, N); ``B, C``: (batch, M, N)."""
    return SelectiveScanFn.apply(u, delta, A, B, C, backend)


def grad_check(f: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], eps: float = 1e-6) -> float:
    """Max of ``|g_analytic - g_fd| / max(1, |g_fd|)`` over every input element.

    ``f(*inputs)`` must return a scalar tensor. Finite differences are central
    and perturb the input tensors in place, so ``inputs`` may also be the
    parameters of a module that ``f`` closes over.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise DomainError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad_(True)
    out = f(*inputs)
    if out.numel() != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for t, g in zip(inputs, analytic):
            g = torch.zeros_like(t) if g is None else g
            if not torch.all(torch.isfinite(g)):
                raise NumericError("non-finite analytic gradient")
            flat = t.view(-1)
            g_flat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f(*inputs).item()
                flat[i] = orig - eps
                down = f(*inputs).item()
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                if not np.isfinite(fd):
                    raise NumericError(f"non-finite finite-difference gradient at element {i}", index=i)
                err = abs(g_flat[i].item() - fd) / max(1.0, abs(fd))
                worst = max(worst, err)
    return worst
