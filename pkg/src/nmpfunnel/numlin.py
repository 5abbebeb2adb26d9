"""Dense real linear algebra used throughout the synthesis.

Ordered real Schur forms, Sylvester equations, matrix exponentials and
spectrum classification.  The LAPACK kernels come from scipy; this module
adds the block-reordering driver, separation checks and the tolerance
policy for the imaginary axis.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .errors import ReorderingError, SpectraNotSeparated

__all__ = [
    "SchurDecomposition",
    "SpectrumClassification",
    "as_matrix",
    "default_axis_tol",
    "schur_blocks",
    "ordered_schur",
    "solve_sylvester",
    "expm",
    "classify_spectrum",
    "numerical_rank",
    "block_eigenvalues",
]

#: minimal eigenvalue distance (relative to the matrix norm) for a block swap
SWAP_SEPARATION = 1e-12


def as_matrix(a, rows=None, cols=None, name="matrix"):
    """Coerce ``a`` to a finite 2-D float array, optionally checking its shape."""
    m = np.array(a, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(-1, 1) if cols == 1 else m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"{name} must have {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"{name} must have {cols} columns, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def _square(m, name="matrix"):
    m = as_matrix(m, name=name)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    return m


def default_axis_tol(m):
    """Half-width of the band around the imaginary axis treated as critical."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    norm = np.linalg.norm(m, 2) if m.size else 0.0
    return 1e-9 * max(1.0, norm)


@dataclass(frozen=True)
class SchurDecomposition:
    """Real Schur form ``m = orthogonal @ quasi_triangular @ orthogonal.T``.

    ``blocks`` lists ``(start, size)`` of the 1x1 and 2x2 diagonal blocks and
    ``eigenvalues`` carries one entry per eigenvalue, in diagonal order.
    """

    orthogonal: np.ndarray
    quasi_triangular: np.ndarray
    eigenvalues: np.ndarray
    blocks: tuple
    n_selected: int = 0

    def block_index(self):
        """Block index of every eigenvalue (same order as ``eigenvalues``)."""
        out = []
        for b, (_, size) in enumerate(self.blocks):
            out.extend([b] * size)
        return np.array(out, dtype=int)

    def reconstruct(self):
        return self.orthogonal @ self.quasi_triangular @ self.orthogonal.T


def schur_blocks(t):
    """Return the ``(start, size)`` pairs of the diagonal blocks of ``t``."""
    n = t.shape[0]
    blocks = []
    i = 0
    while i < n:
        if i + 1 < n and t[i + 1, i] != 0.0:
            blocks.append((i, 2))
            i += 2
        else:
            blocks.append((i, 1))
            i += 1
    return blocks


def block_eigenvalues(t, start, size):
    if size == 1:
        return np.array([complex(t[start, start])])
    return np.linalg.eigvals(t[start:start + 2, start:start + 2]).astype(complex)


def _representative(eigs):
    # the member with non-negative imaginary part stands for a conjugate pair
    return eigs[np.argmax(eigs.imag)] if eigs.size == 2 else eigs[0]


def _clean_subdiagonal(t):
    t = np.triu(t, -1)
    tiny = 1e-14 * max(1.0, np.linalg.norm(t, 1))
    sub = np.abs(np.diag(t, -1)) <= tiny
    idx = np.flatnonzero(sub)
    t[idx + 1, idx] = 0.0
    return t


def _normalize_signs(t, z):
    # make the largest-magnitude entry of every Schur vector positive
    idx = np.argmax(np.abs(z), axis=0)
    d = np.sign(z[idx, np.arange(z.shape[1])])
    d[d == 0] = 1.0
    return t * d[:, None] * d[None, :], z * d[None, :]


def ordered_schur(m, select: Callable[[complex], bool] = None):
    """Real Schur decomposition with the selected eigenvalues leading.

    Parameters
    ----------
    m : (n, n) array_like
    select : callable, optional
        Predicate on a complex eigenvalue.  For a complex pair it is called
        with the member of non-negative imaginary part and decides for both.
        ``None`` keeps LAPACK's order.

    Returns
    -------
    SchurDecomposition
        ``n_selected`` counts the eigenvalues in the leading cluster.

    Raises
    ------
    ReorderingError
        When a selected block must pass an unselected block whose eigenvalues
        lie within ``SWAP_SEPARATION * max(1, ||m||)``, or LAPACK reports a
        failed swap.  The offending pair of block start rows is attached.
    """
    m = _square(m)
    n = m.shape[0]
    if n == 0:
        e = np.zeros((0, 0))
        return SchurDecomposition(e, e, np.zeros(0, complex), ())
    t, z = scipy.linalg.schur(m, output="real")
    blocks = schur_blocks(t)
    sep = SWAP_SEPARATION * max(1.0, np.linalg.norm(m, 2))

    n_selected = 0
    if select is not None:
        target = 0
        passed = []  # eigenvalues (and start rows) of unselected blocks so far
        for start, size in blocks:
            eigs = block_eigenvalues(t, start, size)
            if not select(_representative(eigs)):
                passed.append((start, eigs))
                continue
            if start != target:
                for other_start, other in passed:
                    gap = np.min(np.abs(eigs[:, None] - other[None, :]))
                    if gap < sep:
                        raise ReorderingError(
                            f"cannot swap blocks at rows {other_start} and {start}: "
                            f"eigenvalue separation {gap:.3e} below {sep:.3e}",
                            block_pair=(other_start, start),
                        )
                t, z, info = lapack.dtrexc(t, z, start + 1, target + 1)
                if info != 0:
                    raise ReorderingError(
                        f"LAPACK block swap failed moving row {start} to {target} (info={info})",
                        block_pair=(target, start),
                    )
            target += size
            passed = [(s + size if s < start else s, e) for s, e in passed]
        n_selected = target
        t = _clean_subdiagonal(t)

    t, z = _normalize_signs(t, z)
    blocks = tuple(schur_blocks(t))
    eigenvalues = np.concatenate([block_eigenvalues(t, s, k) for s, k in blocks])
    return SchurDecomposition(z, t, eigenvalues, blocks, n_selected)


def solve_sylvester(a, b, c, sep_tol=1e-10):
    """Solve ``a @ X - X @ b = c`` (Bartels-Stewart on real Schur forms).

    Raises
    ------
    SpectraNotSeparated
        If some eigenvalues of ``a`` and ``b`` are closer than
        ``sep_tol * max(1, ||a|| + ||b||)``.
    """
    a = _square(a, "a")
    b = _square(b, "b")
    c = as_matrix(c, rows=a.shape[0], cols=b.shape[0], name="c")
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    scale = max(1.0, np.linalg.norm(a, 2) + np.linalg.norm(b, 2))
    gap = np.min(np.abs(np.linalg.eigvals(a)[:, None] - np.linalg.eigvals(b)[None, :]))
    if gap <= sep_tol * scale:
        raise SpectraNotSeparated(
            f"spectra of a and b overlap: minimal eigenvalue distance {gap:.3e}"
        )
    return scipy.linalg.solve_sylvester(a, -b, c)


def expm(m, t=1.0):
    """``exp(t * m)`` by scaling and squaring with Pade approximants."""
    m = _square(m)
    if t == 0:
        return np.eye(m.shape[0])
    return scipy.linalg.expm(t * m)


@dataclass(frozen=True)
class SpectrumClassification:
    stable: tuple
    antistable: tuple
    critical: tuple

    @property
    def sizes(self):
        return len(self.stable), len(self.antistable), len(self.critical)


def classify_spectrum(eigs, tol_axis=1e-9):
    """Partition eigenvalue indices by the sign of the real part.

    Conjugate pairs share their real part and therefore always land in the
    same set.
    """
    eigs = np.asarray(eigs, dtype=complex).ravel()
    re = eigs.real
    stable = tuple(int(i) for i in np.flatnonzero(re < -tol_axis))
    antistable = tuple(int(i) for i in np.flatnonzero(re > tol_axis))
    critical = tuple(int(i) for i in np.flatnonzero(np.abs(re) <= tol_axis))
    return SpectrumClassification(stable, antistable, critical)


def numerical_rank(m, rtol=1e-10):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.size == 0:
        return 0
    s = np.linalg.svd(m, compute_uv=False)
    return int(np.sum(s > rtol * max(1.0, s[0])))
