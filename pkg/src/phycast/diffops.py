"""Moment-constrained derivative filters and the physical predictor.

A ``k x k`` filter ``w`` acting by cross-correlation has moment matrix

    M[a, b] = 1/(a! b!) * sum_{u, v in -r..r} u^a v^b w[v, u],   r = (k-1)/2

where ``u`` runs along the width axis (columns, rightward) and ``v`` along the
height axis (rows, downward). ``M == Delta_{i,j}`` (one-hot at ``(i, j)``) means
the filter reproduces ``d^{i+j}/dx^i dy^j`` exactly on polynomials of degree
below ``k`` in each variable. Grid spacing is taken as 1.

The derivative bank maps ``Cp`` latent channels to ``D = k*k`` derivative
channels; channel ``d`` targets the pair ``(i, j) = (d // k, d % k)``.
"""

from __future__ import annotations

import csv
import io
import math
from fractions import Fraction

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def _check_odd(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"moment computations need an odd kernel size, got {k}")


def moment_basis(k: int, exact: bool = False) -> np.ndarray:
    """``P[n, a] = (n - r)^a / a!`` for offsets ``n - r`` in ``-r..r``."""
    _check_odd(k)
    r = (k - 1) // 2
    if exact:
        return np.array(
            [[Fraction(u**a, math.factorial(a)) for a in range(k)] for u in range(-r, r + 1)],
            dtype=object,
        )
    return np.array(
        [[u**a / math.factorial(a) for a in range(k)] for u in range(-r, r + 1)], dtype=np.float64
    )


def moment_matrix(w) -> np.ndarray:
    """Moment matrix of a single ``k x k`` filter.

    Integer, ``Fraction`` or object arrays are evaluated in exact rational
    arithmetic; float arrays in floating point.
    """
    arr = np.asarray(w)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ShapeError(f"moment_matrix expects a square filter, got shape {arr.shape}")
    k = arr.shape[0]
    exact = arr.dtype.kind in "iuO"
    P = moment_basis(k, exact=exact)
    if exact:
        arr = np.vectorize(Fraction, otypes=[object])(arr)
    return P.T @ arr.T @ P


def target_moment(i: int, j: int, k: int) -> np.ndarray:
    _check_odd(k)
    if not (0 <= i < k and 0 <= j < k):
        raise ShapeError(f"target index ({i}, {j}) outside 0..{k - 1}")
    out = np.zeros((k, k))
    out[i, j] = 1.0
    return out


def derivative_pairs(k: int) -> list[tuple[int, int]]:
    """Derivative pair for each output channel of a bank: ``d -> (d // k, d % k)``."""
    return [divmod(d, k) for d in range(k * k)]


def exact_derivative_filter(i: int, j: int, k: int) -> np.ndarray:
    """The unique ``k x k`` filter whose moment matrix is ``Delta_{i,j}``."""
    P = moment_basis(k)
    # M = P^T w^T P  =>  w^T = P^{-T} Delta P^{-1}
    Pinv = np.linalg.inv(P)
    return (Pinv.T @ target_moment(i, j, k) @ Pinv).T


def moment_matrices(kernels: Tensor) -> Tensor:
    """Differentiable moment matrices over the last two axes of ``kernels``."""
    k = kernels.shape[-1]
    P = moment_basis(k).astype(kernels.dtype)
    return T.matmul(T.matmul(Tensor(P.T), T.swapaxes(kernels, -1, -2)), Tensor(P))


class DiffKernelBank:
    """Derivative filters ``[D, Cp, k, k]`` plus 1x1 mixing coefficients ``[Cp, D, 1, 1]``."""

    def __init__(self, derivative_kernels: Tensor, combine: Tensor):
        D, cp, k, k2 = derivative_kernels.shape
        if k != k2 or D != k * k:
            raise ShapeError(
                f"derivative kernels must be [k*k, Cp, k, k], got {derivative_kernels.shape}"
            )
        _check_odd(k)
        if combine.shape != (cp, D, 1, 1):
            raise ShapeError(f"combine must be [{cp}, {D}, 1, 1], got {combine.shape}")
        self.derivative_kernels = derivative_kernels
        self.combine = combine
        self._targets = None

    @classmethod
    def create(cls, channels: int, k: int, rng: np.random.Generator, dtype=np.float32, combine_bound=None):
        """Random bank; ``combine_bound`` defaults to the fan-in bound ``1/k``."""
        _check_odd(k)
        D = k * k
        bound = 1.0 / math.sqrt(channels * k * k)
        kernels = rng.uniform(-bound, bound, size=(D, channels, k, k))
        cb = 1.0 / math.sqrt(D) if combine_bound is None else combine_bound
        combine = rng.uniform(-cb, cb, size=(channels, D, 1, 1))
        return cls(
            T.parameter(kernels, dtype=dtype, name="deriv_kernels"),
            T.parameter(combine, dtype=dtype, name="combine"),
        )

    @classmethod
    def exact(cls, channels: int, k: int, combine=None, dtype=np.float64):
        """Bank whose every slice is the exact moment-matching filter."""
        filters = np.stack([exact_derivative_filter(i, j, k) for i, j in derivative_pairs(k)])
        kernels = np.repeat(filters[:, None], channels, axis=1)
        if combine is None:
            combine = np.zeros((channels, k * k, 1, 1))
        return cls(T.parameter(kernels, dtype=dtype), T.parameter(combine, dtype=dtype))

    @property
    def k(self) -> int:
        return self.derivative_kernels.shape[-1]

    @property
    def channels(self) -> int:
        return self.derivative_kernels.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"deriv_kernels": self.derivative_kernels, "combine": self.combine}

    def targets(self) -> np.ndarray:
        D, cp, k, _ = self.derivative_kernels.shape
        if self._targets is None or self._targets.dtype != self.derivative_kernels.dtype:
            tg = np.zeros((D, cp, k, k), dtype=self.derivative_kernels.dtype)
            for d, (i, j) in enumerate(derivative_pairs(k)):
                tg[d, :, i, j] = 1.0
            self._targets = tg
        return self._targets


def moment_loss(bank: DiffKernelBank) -> Tensor:
    """Sum over derivative channels and input slices of ``||M(w) - Delta||_F``."""
    M = moment_matrices(bank.derivative_kernels)
    return T.sum_all(T.frobenius_norm(T.sub(M, Tensor(bank.targets()))))


def moment_residuals(bank: DiffKernelBank) -> np.ndarray:
    """``[D, Cp]`` table of per-slice Frobenius residuals (no gradient)."""
    kernels = bank.derivative_kernels.data.astype(np.float64)
    P = moment_basis(bank.k)
    M = P.T @ np.swapaxes(kernels, -1, -2) @ P
    return np.sqrt(((M - bank.targets()) ** 2).sum(axis=(-2, -1)))


def phi_predict(h: Tensor, bank: DiffKernelBank) -> Tensor:
    """Linear combination of approximated spatial derivatives of ``h``."""
    if h.ndim != 4 or h.shape[1] != bank.channels:
        raise ShapeError(
            f"phi_predict: state {h.shape} does not match bank with {bank.channels} channels"
        )
    derivs = T.conv2d(h, bank.derivative_kernels, padding="same")
    return T.conv2d(derivs, bank.combine, padding="valid")


def order_amplitude_profile(bank: DiffKernelBank) -> dict[int, float]:
    """Mean ``|c_ij|`` grouped by total differential order ``i + j``."""
    k = bank.k
    coeffs = np.abs(bank.combine.data[:, :, 0, 0].astype(np.float64))
    orders = np.array([i + j for i, j in derivative_pairs(k)])
    return {s: float(coeffs[:, orders == s].mean()) for s in range(2 * (k - 1) + 1)}


def profile_to_csv(profile: dict[int, float]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["order", "mean_abs_coeff"])
    for order in sorted(profile):
        writer.writerow([order, repr(profile[order])])
    return buf.getvalue()


def minimize_moment_loss(bank: DiffKernelBank, tol: float = 1e-9, max_iter: int = 500) -> float:
    """Drive the bank's derivative filters to their moment targets, in place.

    Runs linear conjugate gradient on the sum of squared residuals, which
    shares its minimiser with the moment loss, using reverse-mode gradients
    for both the residual and the Hessian-vector products. The moment map is
    badly conditioned for k >= 5 (plain gradient descent crawls), but its
    Hessian has at most k*k distinct eigenvalues, so CG converges in a few
    dozen iterations. Returns the final moment loss.
    """
    kernels = bank.derivative_kernels
    shape, dtype = kernels.shape, kernels.dtype
    targets = Tensor(bank.targets().astype(np.float64))

    def grad(w: np.ndarray) -> np.ndarray:
        leaf = T.parameter(w)
        T.backward(T.sum_all(T.square(T.sub(moment_matrices(leaf), targets))))
        return leaf.grad

    w = kernels.data.astype(np.float64)
    g_zero = grad(np.zeros(shape))
    r = -grad(w)
    p = r.copy()
    rr = float((r * r).sum())
    loss = float(moment_loss(bank).data)
    for it in range(max_iter):
        if loss < tol or rr == 0.0:
            break
        Hp = grad(p) - g_zero
        alpha = rr / float((p * Hp).sum())
        w = w + alpha * p
        r = r - alpha * Hp
        if it % 25 == 24:
            r = -grad(w)  # recompute to shed accumulated round-off
        rr_new = float((r * r).sum())
        p = r + (rr_new / rr) * p
        rr = rr_new
        kernels.data = w.astype(dtype)
        loss = float(moment_loss(bank).data)
    return loss
