"""Eigenstructure, anti-crossings, transition catalogs and synthetic spectra."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import constants as sc
from scipy.optimize import minimize_scalar

from . import spinops
from .hamiltonian import (
    CONSTANTS,
    Manifold,
    ParameterError,
    SpinSystemParams,
    build_hamiltonian,
    default_params,
    drive_operator,
)

MS_VALUES = (1, 0, -1)


class NotHermitianError(ValueError):
    pass


class LacNotFoundError(RuntimeError):
    pass


@dataclass(frozen=True)
class EigenSystem:
    """Sorted eigenpairs of an 81x81 Hamiltonian with (m_s, m_I) labels.

    ``sector_weights[n, a, b]`` is the weight of eigenvector ``n`` on the
    product subspace with m_s = MS_VALUES[a] and total m_I = MI_VALUES[b].
    """

    values: np.ndarray
    vectors: np.ndarray
    sector_weights: np.ndarray

    @property
    def ms_weights(self) -> np.ndarray:
        return self.sector_weights.sum(axis=2)

    @property
    def ms_labels(self) -> list[int | None]:
        """Dominant m_s per state, None for states mixed near an anti-crossing."""
        w = self.ms_weights
        out = []
        for row in w:
            k = int(np.argmax(row))
            out.append(MS_VALUES[k] if row[k] > 0.5 else None)
        return out

    @property
    def labels(self) -> list[tuple[int, int, float]]:
        """Dominant (m_s, m_I) sector of each state and its weight."""
        flat = self.sector_weights.reshape(len(self.values), -1)
        idx = np.argmax(flat, axis=1)
        return [
            (MS_VALUES[i // 7], int(spinops.MI_VALUES[i % 7]), float(flat[n, i]))
            for n, i in enumerate(idx)
        ]

    def branch(self, ms: int) -> np.ndarray:
        """Indices of states belonging to branch ``ms``; mixed states count for both."""
        a = MS_VALUES.index(ms)
        w = self.ms_weights
        dominant = w[:, a] > 0.5
        mixed = (w.max(axis=1) <= 0.5) & (w[:, a] > 0.0 + 1e-12)
        return np.flatnonzero(dominant | mixed)

    def mi_labels(self) -> np.ndarray:
        return np.array([lab[1] for lab in self.labels])

    def operator(self, op: np.ndarray) -> np.ndarray:
        """Matrix elements of ``op`` in the eigenbasis."""
        return self.vectors.conj().T @ op @ self.vectors


def _sector_projectors():
    ms, mi = spinops.basis_quantum_numbers()
    return ms, mi


def eigh(h: np.ndarray) -> EigenSystem:
    h = np.asarray(h)
    if not spinops.is_hermitian(h):
        raise NotHermitianError("matrix is not Hermitian")
    h = (h + h.conj().T) / 2
    values, vectors = np.linalg.eigh(h)
    # phase convention: first significant component real and positive
    n = vectors.shape[0]
    for k in range(vectors.shape[1]):
        col = vectors[:, k]
        i = int(np.argmax(np.abs(col) > 1e-8 * np.max(np.abs(col))))
        ph = col[i] / abs(col[i])
        vectors[:, k] = col / ph
    if n == spinops.DIM:
        ms, mi = _sector_projectors()
        prob = np.abs(vectors) ** 2
        sw = np.zeros((n, 3, 7))
        for a, m in enumerate(MS_VALUES):
            for b, v in enumerate(spinops.MI_VALUES):
                mask = (ms == m) & (mi == v)
                sw[:, a, b] = prob[mask].sum(axis=0)
    else:
        sw = np.zeros((n, 3, 7))
    return EigenSystem(values, vectors, sw)


def solve(p: SpinSystemParams) -> EigenSystem:
    return eigh(build_hamiltonian(p))


def level_sweep(manifold, b_values, params: SpinSystemParams | None = None, workers: int = 1):
    """Eigenvalues (MHz) at each field in ``b_values``; returns (b, table[n_b, 81])."""
    b = np.asarray(b_values, dtype=float)
    if b.size == 0:
        raise ParameterError("field range is empty")
    base = params if params is not None else default_params(manifold)

    def one(bv):
        return eigh(build_hamiltonian(base.with_field(float(bv)))).values

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, b))
    else:
        rows = [one(bv) for bv in b]
    return b, np.array(rows)


def _branch_gap(p: SpinSystemParams) -> float:
    es = solve(p)
    w = es.ms_weights
    # the 27 states with the most m_s=-1 character against the 27 with most m_s=0
    lower = np.argsort(-w[:, 2], kind="stable")[:27]
    rest = np.setdiff1d(np.arange(spinops.DIM), lower)
    zero = rest[np.argsort(-w[rest, 1], kind="stable")[:27]]
    return abs(es.values[lower].mean() - es.values[zero].mean())


def find_lac(manifold=Manifold.GS, params: SpinSystemParams | None = None,
             b_range=(1.0, 300.0), resolution: float = 0.01) -> float:
    """Field (mT) where the m_s=0 and m_s=-1 branches come closest."""
    base = params if params is not None else default_params(manifold)
    grid = np.arange(b_range[0], b_range[1] + 1e-9, 1.0)
    gaps = np.array([_branch_gap(base.with_field(b)) for b in grid])
    k = int(np.argmin(gaps))
    if k == 0 or k == len(grid) - 1:
        raise LacNotFoundError(f"no anti-crossing bracketed in {b_range} mT")
    res = minimize_scalar(
        lambda b: _branch_gap(base.with_field(b)),
        bounds=(grid[k - 1], grid[k + 1]),
        method="bounded",
        options={"xatol": resolution / 2},
    )
    return float(res.x)


@dataclass(frozen=True)
class TransitionLine:
    initial: int
    final: int
    freq: float
    strength: float
    weight: float
    branch: tuple[int | None, int | None]


def transition_catalog(es: EigenSystem, v: np.ndarray, window, populations=None,
                       strength_floor: float = 1e-6) -> list[TransitionLine]:
    """All transitions i -> f with E_f - E_i inside ``window`` (MHz).

    Elements below (1e-12 max|V|)^2 are rounding noise and always dropped;
    ``strength_floor`` then drops lines weaker than that fraction of the
    strongest line in the window.
    """
    lo, hi = window
    if lo < 0:
        raise ParameterError("window must start at a non-negative frequency")
    n = len(es.values)
    pops = np.ones(n) if populations is None else np.asarray(populations, dtype=float)
    vm = es.operator(v)
    s = np.abs(vm).T ** 2  # [i, f] = |<f|V|i>|^2
    noise = (1e-12 * np.abs(v).max()) ** 2 if v.size else 0.0
    freqs = es.values[None, :] - es.values[:, None]  # [i, f] = E_f - E_i
    mask = (freqs >= lo) & (freqs <= hi) & (s > noise)
    np.fill_diagonal(mask, False)
    if mask.any():
        mask &= s > strength_floor * s[mask].max()
    labels = es.ms_labels
    out = []
    for i, f in zip(*np.nonzero(mask)):
        out.append(TransitionLine(int(i), int(f), float(freqs[i, f]), float(s[i, f]),
                                  float(pops[i]), (labels[i], labels[f])))
    return out


# --- line shapes and spectra -------------------------------------------------


def lorentzian(f, center, fwhm):
    """Peak-normalised Lorentzian (value 1 at ``center``)."""
    hw = fwhm / 2
    return hw * hw / ((np.asarray(f) - center) ** 2 + hw * hw)


def gaussian(f, center, fwhm):
    sigma = fwhm / (2 * math.sqrt(2 * math.log(2)))
    return np.exp(-0.5 * ((np.asarray(f) - center) / sigma) ** 2)


_SHAPES = {"lorentzian": lorentzian, "gaussian": gaussian}


@dataclass
class Spectrum:
    freqs: np.ndarray
    intensity: np.ndarray
    fwhm: float
    shape: str = "lorentzian"
    centers: np.ndarray = field(default_factory=lambda: np.empty(0))
    amplitudes: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=float)
        self.intensity = np.asarray(self.intensity, dtype=float)
        d = np.diff(self.freqs)
        if self.freqs.ndim != 1 or len(self.freqs) < 2 or np.any(d <= 0):
            raise ParameterError("frequency grid must be strictly increasing")
        if not np.allclose(d, d[0], rtol=1e-6, atol=0):
            raise ParameterError("frequency grid must be uniform")
        if self.intensity.shape != self.freqs.shape or not np.all(np.isfinite(self.intensity)):
            raise ParameterError("intensity must be finite and match the grid")

    def band(self, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
        m = (self.freqs >= lo) & (self.freqs <= hi)
        return self.freqs[m], self.intensity[m]

    def integral(self, lo: float, hi: float) -> float:
        f, y = self.band(lo, hi)
        return float(np.trapezoid(y, f)) if len(f) > 1 else 0.0

    def centroid(self, lo: float, hi: float) -> float:
        f, y = self.band(lo, hi)
        total = np.trapezoid(y, f)
        if total <= 0:
            raise ValueError(f"no intensity in [{lo}, {hi}] MHz")
        return float(np.trapezoid(f * y, f) / total)

    def to_csv(self) -> str:
        rows = ["frequency_mhz,intensity"]
        rows += [f"{f:.12g},{y:.12g}" for f, y in zip(self.freqs, self.intensity)]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, text: str, fwhm: float = float("nan")) -> "Spectrum":
        lines = text.strip().splitlines()
        if lines[0].strip() != "frequency_mhz,intensity":
            raise ValueError("expected header 'frequency_mhz,intensity'")
        data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
        return cls(data[:, 0], data[:, 1], fwhm)


def frequency_grid(start: float, stop: float, step: float) -> np.ndarray:
    n = int(round((stop - start) / step)) + 1
    return start + step * np.arange(n)


def _broaden(grid, centers, amps, fwhm, shape):
    fn = _SHAPES[shape]
    y = np.zeros_like(grid, dtype=float)
    for c, a in zip(centers, amps):
        y += a * fn(grid, c, fwhm)
    return y


def validate_distribution(rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (7,) or np.any(rho < 0) or not np.all(np.isfinite(rho)):
        raise ParameterError("rho must be 7 non-negative numbers over m_I = -3..+3")
    if abs(rho.sum() - 1.0) > 1e-9:
        raise ParameterError(f"rho must sum to 1, got {rho.sum()}")
    return rho


def odmr_lines(p: SpinSystemParams, target_ms: int = -1, strength_weighted: bool = False):
    """Center (MHz) and relative strength of the m_s=0 -> target transition per m_I.

    Each center is the strength-weighted mean over all eigenstate pairs whose
    dominant labels are (0, m_I) -> (target, m_I).
    """
    es = solve(p)
    v = es.operator(drive_operator(p, "MW"))
    labels = es.labels
    ms = np.array([lab[0] for lab in labels])
    mi = np.array([lab[1] for lab in labels])
    centers = np.zeros(7)
    strengths = np.zeros(7)
    bare = p.gamma_e ** 2 / 2  # |<-1|gamma_e Sx|0>|^2 per nuclear state
    for b, m in enumerate(spinops.MI_VALUES):
        src = np.flatnonzero((ms == 0) & (mi == m))
        dst = np.flatnonzero((ms == target_ms) & (mi == m))
        s = np.abs(v[np.ix_(dst, src)]) ** 2
        df = es.values[dst][:, None] - es.values[src][None, :]
        centers[b] = abs(float((s * df).sum() / s.sum()))
        strengths[b] = s.sum() / (len(src) * bare)
    if not strength_weighted:
        strengths = np.ones(7)
    return centers, strengths


def odmr_spectrum(p: SpinSystemParams, rho, fwhm: float, grid, shape: str = "lorentzian",
                  include_plus: bool = False, strength_weighted: bool = False) -> Spectrum:
    """Seven-line hyperfine ODMR spectrum for the nuclear distribution ``rho``.

    Dips are stored as positive intensity; a unit-amplitude line peaks at 1.
    """
    rho = validate_distribution(rho)
    if not fwhm > 0:
        raise ParameterError("fwhm must be positive")
    grid = np.asarray(grid, dtype=float)
    centers, strengths = odmr_lines(p, -1, strength_weighted)
    amps = rho * strengths
    y = _broaden(grid, centers, amps, fwhm, shape)
    all_c, all_a = centers, amps
    if include_plus:
        cp, sp = odmr_lines(p, 1, strength_weighted)
        y += _broaden(grid, cp, rho * sp, fwhm, shape)
        all_c = np.concatenate([centers, cp])
        all_a = np.concatenate([amps, rho * sp])
    return Spectrum(grid, y, fwhm, shape, np.asarray(all_c), np.asarray(all_a))


def branch_populations(es: EigenSystem, ms: int, rho) -> np.ndarray:
    """Spread rho[m_I] evenly over the states of branch ``ms`` labelled m_I."""
    rho = validate_distribution(rho)
    pops = np.zeros(len(es.values))
    members = es.branch(ms)
    mi = es.mi_labels()
    a = MS_VALUES.index(ms)
    for b, m in enumerate(spinops.MI_VALUES):
        idx = members[mi[members] == m]
        if len(idx):
            # mixed states carry their actual weight on the branch
            w = es.ms_weights[idx, a]
            pops[idx] = rho[b] * w / w.sum()
    return pops


def odnmr_spectrum(p: SpinSystemParams, branch: int | str = -1, fwhm: float = 1.0, grid=None,
                   mw_pi_applied: bool = True, rho=None, shape: str = "lorentzian",
                   strength_floor: float = 1e-6) -> Spectrum:
    """Nuclear-spin resonance spectrum read out through the electron.

    The MW pi pulse moves the pumped m_I distribution into m_s=-1; without it
    the population stays in m_s=0. ``branch`` selects which branch's internal
    transitions are summed ("all" for both).
    """
    if not fwhm > 0:
        raise ParameterError("fwhm must be positive")
    grid = frequency_grid(0.0, 80.0, 0.05) if grid is None else np.asarray(grid, dtype=float)
    rho = spinops.mi_multiplicity() / 27 if rho is None else rho
    es = solve(p)
    populated = -1 if mw_pi_applied else 0
    pops = branch_populations(es, populated, rho)
    if branch == "all":
        members = np.union1d(es.branch(-1), es.branch(0))
    else:
        members = es.branch(int(branch))
    inside = np.zeros(len(es.values), dtype=bool)
    inside[members] = True
    lines = transition_catalog(es, drive_operator(p, "RF_inplane"), (0.0, float(grid[-1]) + 10 * fwhm),
                               pops, strength_floor)
    lines = [ln for ln in lines if inside[ln.initial] and inside[ln.final]]
    centers = np.array([ln.freq for ln in lines])
    amps = np.array([ln.weight * ln.strength for ln in lines])
    y = _broaden(grid, centers, amps, fwhm, shape)
    return Spectrum(grid, y, fwhm, shape, centers, amps)


# --- coupling constants -------------------------------------------------------


def c_nn(b: float, params: SpinSystemParams | None = None) -> float:
    """Electron-mediated nuclear-nuclear coupling (MHz) in the m_s=-1 branch."""
    p = params if params is not None else default_params(Manifold.GS)
    a = p.hyperfine[0]
    a_tran = (a[0, 0] + a[1, 1]) / 2
    detuning = abs(p.d_zfs - p.gamma_e * b)
    if detuning <= 1.0:
        raise ParameterError(
            f"C_NN formula invalid within 1 MHz of the GSLAC (|D - gamma_e B| = {detuning:.3g} MHz)"
        )
    return a_tran ** 2 / detuning


D_NN_CONVENTIONS = ("cyclic", "angular", "angular_4pi")


def d_nn(r_nn_nm: float, convention: str = "cyclic",
         gamma_n_hz_per_t: float = CONSTANTS["gamma_n_MHz_per_mT"][0] * 1e9) -> float:
    """Direct 14N-14N dipolar constant in Hz for separation ``r_nn_nm``.

    Conventions for mu0 * gamma^2 * hbar / (2 r^3):
      cyclic       gamma in Hz/T, result read directly as Hz
      angular      gamma in rad/(s T), result in rad/s converted to Hz
      angular_4pi  as angular with mu0 -> mu0/(4 pi) (SI dipolar form)
    """
    if not r_nn_nm > 0:
        raise ParameterError("r_nn must be positive")
    r = r_nn_nm * 1e-9
    if convention == "cyclic":
        return sc.mu_0 * gamma_n_hz_per_t ** 2 * sc.hbar / (2 * r ** 3)
    g = 2 * math.pi * gamma_n_hz_per_t
    omega = sc.mu_0 * g ** 2 * sc.hbar / (2 * r ** 3)
    if convention == "angular":
        return omega / (2 * math.pi)
    if convention == "angular_4pi":
        return omega / (4 * math.pi) / (2 * math.pi)
    raise ParameterError(f"unknown convention {convention!r}; expected one of {D_NN_CONVENTIONS}")
