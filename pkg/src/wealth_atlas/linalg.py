"""Small dense symmetric eigendecomposition by cyclic Jacobi rotations."""

from __future__ import annotations

import numpy as np


class ConvergenceError(RuntimeError):
    pass


def off_diagonal_max(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.max(np.abs(off))) if a.size > 1 else 0.0


def jacobi_eigh(
    a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and eigenvectors (columns) of symmetric ``a``.

    Sweeps rotate every off-diagonal pair in row order.  Iteration stops once
    the largest off-diagonal magnitude is far below ``tol`` or stagnates
    under it; convergence is quadratic, so one sweep past ``tol`` is usual.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, float(np.max(np.abs(a))) if n else 1.0)):
        raise ValueError("matrix must be symmetric")
    a = 0.5 * (a + a.T)
    v = np.eye(n)

    off = off_diagonal_max(a)
    for _ in range(max_sweeps):
        if off < tol * 1e-5:
            break
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app, aqq = a[p, p], a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                if s == 0.0:
                    a[p, q] = a[q, p] = 0.0
                    continue
                rotated = True
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        prev, off = off, off_diagonal_max(a)
        if not rotated or (off < tol and off >= 0.5 * prev):
            break
    if off >= tol:
        raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]
