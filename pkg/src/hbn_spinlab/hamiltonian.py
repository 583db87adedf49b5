"""Hamiltonian of the V_B- electron spin coupled to its three nearest 14N nuclei.

All energies are frequencies in MHz (H/h), fields in mT. The static field is
along z, perpendicular to the hBN sheet.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass

import numpy as np

from . import spinops


class ParameterError(ValueError):
    pass


class Manifold(str, enum.Enum):
    GS = "GS"
    ES = "ES"


# name -> (value, provenance comment); dumped verbatim by the CLI
CONSTANTS: dict[str, tuple[float, str]] = {
    "D_GS_MHz": (3450.0, "ground-state zero-field splitting, 3.45 GHz"),
    "D_ES_MHz": (2100.0, "excited-state zero-field splitting, 2.1 GHz"),
    "A_zz_MHz": (47.0, "axial hyperfine constant of each nearest 14N"),
    "A_tran_MHz": (68.0, "transverse hyperfine constant (A_xx + A_yy)/2"),
    "gamma_e_MHz_per_mT": (28.0, "electron gyromagnetic ratio, 28 GHz/T"),
    "gamma_n_MHz_per_mT": (0.003076, "14N gyromagnetic ratio, 3.076 MHz/T"),
    "Q_MHz": (0.0, "14N quadrupole constant; not published, config input"),
}

GAMMA_RATIO = CONSTANTS["gamma_e_MHz_per_mT"][0] / CONSTANTS["gamma_n_MHz_per_mT"][0]


def hyperfine_tensor(a_tran: float, a_zz: float) -> np.ndarray:
    return np.diag([a_tran, a_tran, a_zz]).astype(float)


@dataclass(frozen=True)
class SpinSystemParams:
    manifold: Manifold
    d_zfs: float
    hyperfine: tuple[np.ndarray, np.ndarray, np.ndarray]
    gamma_e: float
    gamma_n: float
    quadrupole: tuple[float, float, float] = (0.0, 0.0, 0.0)
    b0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "manifold", Manifold(self.manifold))
        if np.ndim(self.b0) > 0:
            # a field vector is accepted only if it lies along z
            bx, by, bz = (float(c) for c in self.b0)
            if bx != 0.0 or by != 0.0:
                raise ParameterError("only fields along z are supported")
            object.__setattr__(self, "b0", bz)
        object.__setattr__(self, "b0", float(self.b0))
        if not self.d_zfs > 0:
            raise ParameterError(f"d_zfs must be positive, got {self.d_zfs}")
        if not self.gamma_e > 0 or not self.gamma_n > 0:
            raise ParameterError("gyromagnetic ratios must be positive")
        if not self.b0 >= 0:
            raise ParameterError(f"b0 must be >= 0 mT, got {self.b0}")
        if len(self.hyperfine) != 3 or len(self.quadrupole) != 3:
            raise ParameterError("need exactly 3 hyperfine tensors and 3 quadrupole constants")
        tensors = []
        for a in self.hyperfine:
            a = np.array(a, dtype=float)
            if a.shape != (3, 3):
                raise ParameterError(f"hyperfine tensor must be 3x3, got {a.shape}")
            if np.max(np.abs(a - a.T)) > 1e-9:
                raise ParameterError("hyperfine tensor must be symmetric")
            a.setflags(write=False)
            tensors.append(a)
        object.__setattr__(self, "hyperfine", tuple(tensors))
        object.__setattr__(self, "quadrupole", tuple(float(q) for q in self.quadrupole))

    def replace(self, **changes) -> "SpinSystemParams":
        return dataclasses.replace(self, **changes)

    def with_field(self, b0: float) -> "SpinSystemParams":
        return dataclasses.replace(self, b0=b0)

    def without_hyperfine(self) -> "SpinSystemParams":
        return dataclasses.replace(self, hyperfine=(np.zeros((3, 3)),) * 3)


def default_params(manifold: Manifold | str = Manifold.GS, b0: float = 0.0) -> SpinSystemParams:
    manifold = Manifold(manifold)
    d = CONSTANTS["D_GS_MHz" if manifold is Manifold.GS else "D_ES_MHz"][0]
    a = hyperfine_tensor(CONSTANTS["A_tran_MHz"][0], CONSTANTS["A_zz_MHz"][0])
    q = CONSTANTS["Q_MHz"][0]
    return SpinSystemParams(
        manifold=manifold,
        d_zfs=d,
        hyperfine=(a, a, a),
        gamma_e=CONSTANTS["gamma_e_MHz_per_mT"][0],
        gamma_n=CONSTANTS["gamma_n_MHz_per_mT"][0],
        quadrupole=(q, q, q),
        b0=b0,
    )


def zfs_term(d: float) -> np.ndarray:
    sz = spinops.electron_ops()["z"]
    return d * (sz @ sz - 2.0 / 3.0 * np.eye(spinops.DIM))


def hyperfine_term(tensors) -> np.ndarray:
    e = spinops.electron_ops()
    axes = ("x", "y", "z")
    h = np.zeros((spinops.DIM, spinops.DIM), dtype=complex)
    for j, a in enumerate(tensors):
        n = spinops.nuclear_ops(j)
        for p, ap in enumerate(axes):
            for q, aq in enumerate(axes):
                if a[p, q] != 0.0:
                    h += a[p, q] * (e[ap] @ n[aq])
    return h


def build_hamiltonian(p: SpinSystemParams) -> np.ndarray:
    """Full 81x81 Hamiltonian in MHz for the selected manifold."""
    sz = spinops.electron_ops()["z"]
    eye = np.eye(spinops.DIM)
    h = zfs_term(p.d_zfs) + hyperfine_term(p.hyperfine) + p.gamma_e * p.b0 * sz
    for j in range(3):
        iz = spinops.nuclear_ops(j)["z"]
        h = h - p.gamma_n * p.b0 * iz
        if p.quadrupole[j] != 0.0:
            h = h + p.quadrupole[j] * (iz @ iz - 2.0 / 3.0 * eye)
    return h


def drive_operator(p: SpinSystemParams, kind: str = "RF_inplane") -> np.ndarray:
    """Coupling to an in-plane (x) drive field per mT of amplitude.

    ``kind`` is "RF_inplane" or "MW"; both give the same matrix, the tag only
    picks the frequency window downstream.
    """
    if kind not in ("RF_inplane", "MW"):
        raise ParameterError(f"unknown drive kind {kind!r}")
    v = p.gamma_e * spinops.electron_ops()["x"]
    for j in range(3):
        v = v + p.gamma_n * spinops.nuclear_ops(j)["x"]
    return v
