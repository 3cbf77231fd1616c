"""Dense linear algebra: a deterministic full SVD plus small helpers.

Matrices are plain float64 numpy arrays in row-major (C) order. The SVD is
a one-sided Jacobi in the compact rank-k form (k = min(m, n)) with a fixed
sweep order and a fixed sign convention, so identical input bytes always
produce identical output bytes.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateSpectrumWarning,
    IterativeNonConvergence,
    NonFiniteInput,
    ShapeMismatch,
)

MAX_SWEEPS = 30
# A column pair counts as orthogonal when |cos| of their angle is below this.
ORTH_TOL = 1e-12
DEGENERACY_RTOL = 1e-9


def as_matrix(x, name="matrix", check_finite=True):
    """Coerce ``x`` to a 2-D C-contiguous float64 array and validate it."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got ndim={a.ndim}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeMismatch(f"{name} must have positive dimensions, got {a.shape}")
    if check_finite and not np.isfinite(a).all():
        raise NonFiniteInput(f"{name} contains NaN or Inf entries")
    return a


@dataclass
class SvdFactorization:
    """Compact SVD: u (m, k), sigma (k,) non-increasing, vt (k, n)."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    @property
    def k(self):
        return self.sigma.shape[0]


def _round_robin_rounds(n):
    """Fixed tournament schedule: n-1 (or n) rounds of disjoint index pairs
    covering every (i, j) with i < j exactly once."""
    padded = n if n % 2 == 0 else n + 1
    players = list(range(padded))
    rounds = []
    for _ in range(padded - 1):
        pairs = [
            (min(players[i], players[padded - 1 - i]),
             max(players[i], players[padded - 1 - i]))
            for i in range(padded // 2)
            if players[i] < n and players[padded - 1 - i] < n
        ]
        rounds.append(sorted(pairs))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _rotation_coeffs(app, aqq, apq, hot):
    # Smaller-root Jacobi angle; cold pairs get the identity (c=1, s=0).
    tau = np.zeros_like(apq)
    np.divide(aqq - app, 2.0 * apq, out=tau, where=hot)
    t = np.where(
        tau == 0.0, 1.0, np.sign(tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
    )
    c = 1.0 / np.sqrt(1.0 + t * t)
    s = t * c
    c[~hot] = 1.0
    s[~hot] = 0.0
    return c[:, None], s[:, None]


class _RotationBuffers:
    # Scratch reused across rounds; rotations never allocate in the dense path.
    def __init__(self, half, m, n):
        self.ai = np.empty((half, m))
        self.aj = np.empty((half, m))
        self.vi = np.empty((half, n))
        self.vj = np.empty((half, n))
        self.r0m = np.empty((half, m))
        self.r1m = np.empty((half, m))
        self.tm = np.empty((half, m))
        self.r0n = np.empty((half, n))
        self.r1n = np.empty((half, n))
        self.tn = np.empty((half, n))


def _rotate_rows(dst, ii, jj, bi, bj, r0, r1, tmp, c, s):
    # [row_i, row_j] <- [c*row_i - s*row_j, s*row_i + c*row_j]
    np.multiply(c, bi, out=r0)
    np.multiply(s, bj, out=tmp)
    r0 -= tmp
    np.multiply(s, bi, out=r1)
    np.multiply(c, bj, out=tmp)
    r1 += tmp
    dst[ii] = r0
    dst[jj] = r1


def _jacobi_tall(a):
    """One-sided Jacobi on a with m >= n. Returns (u_rows, sigma, vt) where
    u_rows is (n, m): row i is the i-th left singular vector.

    Rotations are applied one tournament round at a time; pairs within a
    round are disjoint, so the batched update equals the sequential one."""
    m, n = a.shape
    at = a.T.copy()  # row i = column i of a
    vt = np.eye(n)

    rounds = [(np.array([p[0] for p in r]), np.array([p[1] for p in r]))
              for r in _round_robin_rounds(n)]
    half = max(len(r[0]) for r in rounds) if rounds else 0
    buf = _RotationBuffers(half, m, n)
    converged = n == 1
    for _ in range(MAX_SWEEPS):
        if converged:
            break
        rotations = 0
        for ii, jj in rounds:
            h = len(ii)
            bi, bj = buf.ai[:h], buf.aj[:h]
            np.take(at, ii, axis=0, out=bi)
            np.take(at, jj, axis=0, out=bj)
            app = np.einsum("ij,ij->i", bi, bi)
            aqq = np.einsum("ij,ij->i", bj, bj)
            apq = np.einsum("ij,ij->i", bi, bj)
            hot = np.abs(apq) > ORTH_TOL * np.sqrt(app * aqq)
            nh = int(hot.sum())
            if nh == 0:
                continue
            rotations += nh
            if 4 * nh >= h:
                c, s = _rotation_coeffs(app, aqq, apq, hot)
                _rotate_rows(at, ii, jj, bi, bj, buf.r0m[:h], buf.r1m[:h],
                             buf.tm[:h], c, s)
                vi, vj = buf.vi[:h], buf.vj[:h]
                np.take(vt, ii, axis=0, out=vi)
                np.take(vt, jj, axis=0, out=vj)
                _rotate_rows(vt, ii, jj, vi, vj, buf.r0n[:h], buf.r1n[:h],
                             buf.tn[:h], c, s)
            else:
                # Few hot pairs: rotate just those.
                sel = np.flatnonzero(hot)
                ih, jh = ii[sel], jj[sel]
                c, s = _rotation_coeffs(app[sel], aqq[sel], apq[sel],
                                        np.ones(nh, dtype=bool))
                ai, aj = at[ih], at[jh]
                at[ih] = c * ai - s * aj
                at[jh] = s * ai + c * aj
                vi, vj = vt[ih], vt[jh]
                vt[ih] = c * vi - s * vj
                vt[jh] = s * vi + c * vj
        if rotations == 0:
            # A full sweep of exact column dot products stayed below the
            # threshold, so every pair is certified orthogonal.
            converged = True
    if not converged and not _is_orthogonal(at):
        raise IterativeNonConvergence(m, n, MAX_SWEEPS)

    sigma = np.linalg.norm(at, axis=1)
    order = np.argsort(-sigma, kind="stable")
    at = at[order]
    vt = vt[order]
    sigma = sigma[order]

    u_rows = np.zeros_like(at)
    nonzero = sigma > 0.0
    u_rows[nonzero] = at[nonzero] / sigma[nonzero, None]
    if not nonzero.all():
        _fill_null_rows(u_rows, np.flatnonzero(~nonzero))
    return u_rows, sigma, vt


def _is_orthogonal(at):
    g = at @ at.T
    d = np.sqrt(np.diag(g))
    scale = np.outer(d, d)
    scale[scale == 0.0] = 1.0
    off = np.abs(g / scale)
    np.fill_diagonal(off, 0.0)
    return off.max() <= ORTH_TOL


def _fill_null_rows(u_rows, null_idx):
    """Complete zero rows of u_rows to an orthonormal set, deterministically:
    for each gap take the standard basis vector with the largest residual
    after projecting out the rows already present (first one above 0.5)."""
    m = u_rows.shape[1]
    present = [u_rows[i] for i in range(u_rows.shape[0]) if i not in set(null_idx)]
    for idx in null_idx:
        best, best_norm = None, -1.0
        for t in range(m):
            v = np.zeros(m)
            v[t] = 1.0
            for q in present:
                v -= (q @ v) * q
            nv = np.linalg.norm(v)
            if nv > best_norm:
                best, best_norm = v, nv
            if nv >= 0.5:
                break
        q = best / best_norm
        u_rows[idx] = q
        present.append(q)


def _apply_sign_convention(u_rows, vt):
    # Largest-|entry| element of each left singular vector made non-negative
    # (ties resolved by argmax's lowest index); vt rows absorb the flip.
    for i in range(u_rows.shape[0]):
        jmax = int(np.argmax(np.abs(u_rows[i])))
        if u_rows[i, jmax] < 0.0:
            u_rows[i] = -u_rows[i]
            vt[i] = -vt[i]


def svd(w):
    """Deterministic compact SVD of a finite real matrix.

    Returns an SvdFactorization with sigma sorted non-increasing and the
    sign convention applied. Emits DegenerateSpectrumWarning when
    consecutive singular values are closer than 1e-9 * sigma[0].
    """
    w = as_matrix(w, "w")
    m, n = w.shape
    if m >= n:
        u_rows, sigma, vt = _jacobi_tall(w)
    else:
        # svd(w.T) = (u', sigma, v't)  =>  w = v' sigma u'^T
        up_rows, sigma, vpt = _jacobi_tall(w.T)
        u_rows, vt = vpt, up_rows

    _apply_sign_convention(u_rows, vt)
    if sigma.shape[0] > 1 and sigma[0] > 0.0:
        if np.min(sigma[:-1] - sigma[1:]) < DEGENERACY_RTOL * sigma[0]:
            warnings.warn(
                "nearly equal singular values: singular vectors are not unique",
                DegenerateSpectrumWarning,
                stacklevel=2,
            )
    return SvdFactorization(
        u=np.ascontiguousarray(u_rows.T), sigma=sigma, vt=np.ascontiguousarray(vt)
    )


def reconstruct(f):
    """u @ diag(sigma) @ vt."""
    return f.u @ (f.sigma[:, None] * f.vt)


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a):
    return np.ascontiguousarray(as_matrix(a, "a").T)


def frobenius_norm(a):
    return float(np.linalg.norm(as_matrix(a, "a")))


def row_l2_norms(a):
    return np.linalg.norm(as_matrix(a, "a"), axis=1)
