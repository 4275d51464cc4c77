"""Dense float64 linear algebra used by the projection and fusing stages.

Matrices are plain 2-D ``numpy.ndarray`` objects (vectors are ``n x 1``).
The SVD is a one-sided Jacobi (Hestenes) iteration with parallel
round-robin pair ordering, followed by Gram-Schmidt completion so that
both singular-vector factors are always square and orthogonal.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..errors import DimensionError, InputError, NumericError

MAX_SWEEPS = 100
OFF_DIAGONAL_TOL = 1e-12
PINV_RTOL = 1e-10


class SvdResult(NamedTuple):
    U: np.ndarray
    S: np.ndarray
    Vt: np.ndarray


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(-1, 1)
    if a.ndim != 2:
        raise DimensionError(f"expected a rank<=2 array, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def centering_matrix(d: int) -> np.ndarray:
    """``I - 11^T/d``; left-multiplying subtracts each column's mean over its rows."""
    if d < 1:
        raise InputError(f"dimension must be >= 1, got {d}")
    return np.eye(d) - np.full((d, d), 1.0 / d)


def _round_robin(n: int):
    # n even; n-1 rounds, each a perfect matching of 0..n-1
    players = list(range(n))
    half = n // 2
    rounds = []
    for _ in range(n - 1):
        top = np.array(players[:half])
        bottom = np.array(players[half:][::-1])
        rounds.append((top, bottom))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(g: np.ndarray):
    """Orthogonalise the columns of ``g`` (m >= n) in place; return (g, V)."""
    m, n = g.shape
    padded = n + (n % 2)
    if padded != n:
        g = np.hstack([g, np.zeros((m, 1))])
    v = np.eye(padded)
    scale = np.abs(g).max() if g.size else 0.0
    # columns this small are numerically zero; rotating them only stirs noise
    floor = (scale * np.finfo(float).eps * 1e-3) ** 2
    rounds = _round_robin(padded) if padded > 1 else []
    off = 0.0
    for _ in range(MAX_SWEEPS):
        off = 0.0
        for p, q in rounds:
            gp, gq = g[:, p], g[:, q]
            alpha = np.einsum("ij,ij->j", gp, gp)
            beta = np.einsum("ij,ij->j", gq, gq)
            gamma = np.einsum("ij,ij->j", gp, gq)
            live = (alpha > floor) & (beta > floor)
            if not live.any():
                continue
            ratio = np.zeros_like(gamma)
            ratio[live] = np.abs(gamma[live]) / np.sqrt(alpha[live] * beta[live])
            off = max(off, float(ratio.max()))
            act = ratio > OFF_DIAGONAL_TOL
            if not act.any():
                continue
            p, q = p[act], q[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            sign = np.where(zeta >= 0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            gp, gq = g[:, p].copy(), g[:, q].copy()
            g[:, p] = c * gp - s * gq
            g[:, q] = s * gp + c * gq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if off < OFF_DIAGONAL_TOL:
            break
    else:
        raise NumericError(
            f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps; "
            f"residual off-diagonal cosine {off:.3e}"
        )
    return g[:, :n], v[:n, :n]


def complete_basis(q: np.ndarray, m: int) -> np.ndarray:
    """Extend the orthonormal columns of ``q`` (m x r) to an m x m orthogonal matrix."""
    r = q.shape[1]
    basis = np.zeros((m, m))
    basis[:, :r] = q
    # diagonal of the projector onto the orthogonal complement
    outside = 1.0 - np.einsum("ij,ij->i", q, q)
    for j in range(r, m):
        k = int(np.argmax(outside))
        w = np.zeros(m)
        w[k] = 1.0
        cur = basis[:, :j]
        for _ in range(2):
            w = w - cur @ (cur.T @ w)
        w = w / np.linalg.norm(w)
        basis[:, j] = w
        outside = outside - w * w
    return basis


def _svd_tall(a: np.ndarray) -> SvdResult:
    m, n = a.shape
    w, v = _jacobi_columns(a.copy())
    sigma = np.sqrt(np.einsum("ij,ij->j", w, w))
    order = np.argsort(-sigma, kind="stable")
    sigma, w, v = sigma[order], w[:, order], v[:, order]
    smax = sigma[0] if n else 0.0
    zero_tol = max(m, n) * np.finfo(float).eps * smax
    rank = int(np.sum(sigma > zero_tol)) if smax > 0 else 0
    u = w[:, :rank] / sigma[:rank]
    sigma = sigma.copy()
    sigma[rank:] = 0.0
    u = complete_basis(u, m)
    return SvdResult(u, sigma, v.T)


def svd_full(a) -> SvdResult:
    """Full SVD ``a = U @ diag(S) @ Vt`` with square orthogonal ``U`` and ``Vt``.

    ``S`` has length ``min(m, n)``, is non-negative and sorted descending.
    Left singular vectors belonging to zero singular values are filled in by
    null-space completion, so ``U @ U.T == I`` holds for rank-deficient input.
    """
    a = as_matrix(a)
    if a.size == 0:
        raise InputError("svd_full needs a non-empty matrix")
    if not np.all(np.isfinite(a)):
        raise InputError("svd_full input has non-finite entries")
    m, n = a.shape
    if m >= n:
        return _svd_tall(a)
    u, s, vt = _svd_tall(a.T)
    return SvdResult(vt.T, s, u.T)


def reconstruct(res: SvdResult) -> np.ndarray:
    m, n = res.U.shape[0], res.Vt.shape[0]
    sig = np.zeros((m, n))
    k = len(res.S)
    sig[:k, :k] = np.diag(res.S)
    return res.U @ sig @ res.Vt


def pinv_diag(s, size: int | None = None) -> np.ndarray:
    """Reciprocal of singular values with small ones (< 1e-10 * max) mapped to 0."""
    s = np.asarray(s, dtype=np.float64).ravel()
    if size is not None and len(s) < size:
        s = np.concatenate([s, np.zeros(size - len(s))])
    out = np.zeros_like(s)
    if s.size and s.max() > 0:
        keep = s > PINV_RTOL * s.max()
        out[keep] = 1.0 / s[keep]
    return out
