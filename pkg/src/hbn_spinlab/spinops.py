"""Spin-1 operators and composition on the electron + three 14N Hilbert space.

Basis per site is (m=+1, 0, -1); site order is (electron, N1, N2, N3), so the
composite index of |m_s, m_1, m_2, m_3> is row-major over that order.
"""

from __future__ import annotations

from functools import lru_cache, reduce

import numpy as np

SITE_DIMS: tuple[int, ...] = (3, 3, 3, 3)
ELECTRON = 0
NUCLEI = (1, 2, 3)
DIM = 81

# total nuclear projection of the three nitrogens
MI_VALUES = np.arange(-3, 4)

_SQ2 = np.sqrt(2.0)


def spin1_operators() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (Sx, Sy, Sz) for spin 1 in the (+1, 0, -1) basis."""
    sp = np.array([[0, _SQ2, 0], [0, 0, _SQ2], [0, 0, 0]], dtype=complex)
    sm = sp.conj().T
    sx = (sp + sm) / 2
    sy = (sp - sm) / 2j
    sz = np.diag([1.0, 0.0, -1.0]).astype(complex)
    return sx, sy, sz


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.kron(a, b)


def embed(op: np.ndarray, site: int, site_dims=SITE_DIMS) -> np.ndarray:
    """Place a local operator on ``site``, identity elsewhere."""
    if not 0 <= site < len(site_dims):
        raise IndexError(f"site {site} out of range for {len(site_dims)} sites")
    op = np.asarray(op)
    if op.shape != (site_dims[site], site_dims[site]):
        raise ValueError(
            f"operator shape {op.shape} does not match site dimension {site_dims[site]}"
        )
    factors = [np.eye(d, dtype=complex) for d in site_dims]
    factors[site] = op.astype(complex)
    return reduce(np.kron, factors)


def is_hermitian(a: np.ndarray, rtol: float = 1e-9) -> bool:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    scale = 1.0 + (np.max(np.abs(a)) if a.size else 0.0)
    return bool(np.max(np.abs(a - a.conj().T), initial=0.0) <= rtol * scale)


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


@lru_cache(maxsize=None)
def _ops():
    sx, sy, sz = spin1_operators()
    local = {"x": sx, "y": sy, "z": sz}
    electron = {k: embed(v, ELECTRON) for k, v in local.items()}
    nuclear = [{k: embed(v, j) for k, v in local.items()} for j in NUCLEI]
    for d in (electron, *nuclear):
        for m in d.values():
            m.setflags(write=False)
    return electron, nuclear


def electron_ops() -> dict[str, np.ndarray]:
    """Electron Sx, Sy, Sz embedded in the 81-dim space (read-only arrays)."""
    return _ops()[0]


def nuclear_ops(j: int) -> dict[str, np.ndarray]:
    """Ix, Iy, Iz of nucleus ``j`` (0, 1 or 2) embedded in the 81-dim space."""
    return _ops()[1][j]


def basis_quantum_numbers() -> tuple[np.ndarray, np.ndarray]:
    """m_s and total m_I for every product basis state, in composite order."""
    m = np.array([1, 0, -1])
    grid = np.stack(np.meshgrid(m, m, m, m, indexing="ij"), axis=-1).reshape(DIM, 4)
    return grid[:, 0].copy(), grid[:, 1:].sum(axis=1)


def mi_multiplicity() -> np.ndarray:
    """Number of nuclear product states with each total m_I in -3..+3."""
    _, mi = basis_quantum_numbers()
    # each nuclear configuration appears once per electron state
    return np.array([np.count_nonzero(mi == v) // 3 for v in MI_VALUES])
