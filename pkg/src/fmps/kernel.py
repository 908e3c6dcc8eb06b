"""Dense linear-algebra primitives shared by the tensor code.

Matrices are plain numpy arrays (row major). The thin SVD is LAPACK's,
post-processed into a deterministic gauge; Householder reflectors and the
Lanczos eigensolver are implemented here.
"""

from __future__ import annotations

import logging
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

__all__ = [
    "NumericError",
    "ConvergenceError",
    "SvdResult",
    "svd",
    "householder_to_last",
    "eigh_smallest",
    "lanczos_smallest",
    "polar_unitary",
]


class NumericError(ArithmeticError):
    """A dense factorization failed or received non-finite input."""


class ConvergenceError(NumericError):
    """An iterative solver hit its iteration limit.

    The best iterate is kept on the exception so callers can report it.
    """

    def __init__(self, message: str, residual: float, eigenvalue: float = np.nan,
                 eigenvector: Optional[np.ndarray] = None):
        super().__init__(f"{message} (best residual {residual:.3e})")
        self.residual = residual
        self.eigenvalue = eigenvalue
        self.eigenvector = eigenvector


class SvdResult(NamedTuple):
    U: np.ndarray
    sigma: np.ndarray
    Vh: np.ndarray


def polar_unitary(w: np.ndarray) -> np.ndarray:
    """Unitary factor of the polar decomposition ``w = U P``."""
    x, _, yh = np.linalg.svd(w)
    return x @ yh


def _fix_gauge(u: np.ndarray, s: np.ndarray, vh: np.ndarray, degenerate_rtol: Optional[float]):
    """Rotate the singular bases into a deterministic gauge, in place.

    Each column of ``u`` gets its largest-magnitude entry real positive. With
    ``degenerate_rtol`` set, clusters of (relatively) equal singular values
    share one rotation chosen by the same rule applied to the whole subspace:
    the basis ``B`` for which ``B^dagger E`` is positive definite, ``E`` being
    the standard vectors picked by pivoted QR.
    """
    n = s.shape[0]
    start = 0
    while start < n:
        stop = start + 1
        if degenerate_rtol is not None:
            while stop < n and s[start] - s[stop] <= degenerate_rtol * s[start]:
                stop += 1
        block = u[:, start:stop]
        m = stop - start
        if m == 1:
            col = block[:, 0]
            j = _first_max(np.abs(col))
            if col[j] != 0:
                phase = col[j] / abs(col[j])
                u[:, start] = col / phase
                vh[start, :] = vh[start, :] * phase
        else:
            rows = _pick_rows(block, m)
            rot = polar_unitary(block.conj().T[:, rows])
            u[:, start:stop] = block @ rot
            vh[start:stop, :] = rot.conj().T @ vh[start:stop, :]
        start = stop


# entries this close to the maximum count as ties, resolved by position, so
# rounding noise cannot flip the choice on symmetric inputs
_TIE_RTOL = 1e-8


def _first_max(x: np.ndarray) -> int:
    return int(np.argmax(x >= np.max(x) * (1.0 - _TIE_RTOL)))


def _pick_rows(block: np.ndarray, m: int) -> np.ndarray:
    """Greedy pivoted selection of ``m`` rows spanning ``block``'s row space."""
    res = np.array(block, dtype=np.result_type(block, float))
    picked = []
    for _ in range(m):
        norms = np.linalg.norm(res, axis=1)
        j = _first_max(norms)
        picked.append(j)
        q = res[j] / norms[j]
        res = res - np.outer(res @ q.conj(), q)
    return np.sort(np.array(picked))


def svd(m: np.ndarray, degenerate_rtol: Optional[float] = None) -> SvdResult:
    """Thin SVD ``m = U diag(sigma) Vh`` in the deterministic phase gauge.

    Parameters
    ----------
    m : (rows, cols) array
    degenerate_rtol : float, optional
        When given, singular values within this relative distance are
        treated as one degenerate cluster and their subspace basis is fixed
        as a whole instead of column by column.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise NumericError(f"svd expects a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("svd input contains non-finite entries")
    if m.size == 0:
        k = min(m.shape)
        return SvdResult(np.zeros((m.shape[0], k), m.dtype), np.zeros(k), np.zeros((k, m.shape[1]), m.dtype))
    try:
        u, s, vh = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError:
        logger.warning("gesdd failed on %s matrix, retrying with gesvd", m.shape)
        try:
            u, s, vh = scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"SVD did not converge for a {m.shape} matrix "
                               f"(norm {np.linalg.norm(m):.3e})") from exc
    u = np.array(u)
    vh = np.array(vh)
    _fix_gauge(u, s, vh, degenerate_rtol)
    return SvdResult(u, s, vh)


def householder_to_last(v: np.ndarray) -> np.ndarray:
    """Unitary ``Q`` with ``Q^dagger v = |v| e_last``.

    Built as a Householder reflector followed by a phase on the last
    coordinate, which makes the target coefficient real and positive.
    """
    v = np.asarray(v)
    nv = np.linalg.norm(v)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"expected a non-empty vector, got shape {v.shape}")
    if nv == 0:
        raise ValueError("zero vector has no closure direction")
    dtype = np.result_type(v.dtype, float)
    n = v.shape[0]
    last = v[-1]
    theta = last / abs(last) if last != 0 else 1.0
    u = v.astype(dtype, copy=True)
    u[-1] += theta * nv
    # reflector H maps v onto -theta |v| e_last
    h = np.eye(n, dtype=dtype) - 2.0 * np.outer(u, u.conj()) / np.vdot(u, u).real
    d = np.ones(n, dtype=np.result_type(dtype, np.asarray(theta).dtype))
    d[-1] = -np.conj(theta)
    # Q^dagger = diag(d) H, so Q = H diag(d)^dagger
    return h * d.conj()[None, :]


def eigh_smallest(h: np.ndarray) -> tuple[float, np.ndarray]:
    """Lowest eigenpair of a dense Hermitian matrix."""
    h = np.asarray(h)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise NumericError(f"expected a square matrix, got {h.shape}")
    w, v = scipy.linalg.eigh(h, subset_by_index=[0, 0])
    return float(w[0]), v[:, 0]


def lanczos_smallest(
    apply: Callable[[np.ndarray], np.ndarray],
    dim: int,
    tol: float = 1e-12,
    max_iter: int = 2000,
    v0: Optional[np.ndarray] = None,
    krylov_dim: int = 64,
    seed: int = 0,
    dtype=float,
) -> tuple[float, np.ndarray]:
    """Lowest eigenpair of a Hermitian operator given by its action.

    Restarted Lanczos with full reorthogonalization; each cycle restarts
    from the current Ritz vector. Stops when ``|H x - lam x| <= tol * |H|``
    with ``|H|`` estimated from the extreme Ritz values seen so far.
    ``max_iter`` bounds the total number of operator applications.
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    if v0 is None:
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(dim).astype(dtype)
        if np.dtype(dtype).kind == "c":
            x = x + 1j * rng.standard_normal(dim)
    else:
        x = np.array(v0, dtype=np.result_type(v0, dtype), copy=True)
    nx = np.linalg.norm(x)
    if nx == 0:
        raise ValueError("start vector is zero")
    x = x / nx
    if dim == 1:
        hx = apply(x)
        return float(np.vdot(x, hx).real), x

    kdim = min(krylov_dim, dim)
    norm_est = 0.0
    matvecs = 0
    best = (np.inf, np.nan, x)
    while True:
        basis = np.zeros((kdim + 1, dim), dtype=np.result_type(x, dtype))
        alpha = np.zeros(kdim)
        beta = np.zeros(kdim)
        basis[0] = x
        m = 0
        for j in range(kdim):
            w = apply(basis[j])
            matvecs += 1
            alpha[j] = np.vdot(basis[j], w).real
            # two passes of classical Gram-Schmidt keep the basis orthogonal
            w = w - basis[: j + 1].T @ (basis[: j + 1].conj() @ w)
            w = w - basis[: j + 1].T @ (basis[: j + 1].conj() @ w)
            beta[j] = np.linalg.norm(w)
            m = j + 1
            if beta[j] <= 1e-14 * max(norm_est, abs(alpha[j]), 1e-300):
                break
            basis[j + 1] = w / beta[j]
            if matvecs >= max_iter:
                break
        theta, s = scipy.linalg.eigh_tridiagonal(alpha[:m], beta[: m - 1])
        norm_est = max(norm_est, abs(theta[0]), abs(theta[-1]))
        x = basis[:m].T @ s[:, 0]
        x /= np.linalg.norm(x)
        hx = apply(x)
        matvecs += 1
        lam = float(np.vdot(x, hx).real)
        res = float(np.linalg.norm(hx - lam * x))
        if res < best[0]:
            best = (res, lam, x)
        if res <= tol * max(norm_est, 1e-300) or m == dim:
            return lam, x
        if matvecs >= max_iter:
            raise ConvergenceError(
                f"Lanczos did not converge in {matvecs} operator applications", best[0], best[1], best[2]
            )
