"""Spectrum and Rabi-trace fitting by damped Gauss-Newton least squares."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import spinops
from .spectra import Spectrum


class FitError(RuntimeError):
    """Raised when the optimizer cannot make progress; carries the last iterate."""

    def __init__(self, message, x=None):
        super().__init__(message)
        self.x = x


class InsufficientDataError(ValueError):
    pass


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)


def levenberg_marquardt(residual, jacobian, x0, lower=None, max_iter: int = 500,
                        rtol: float = 1e-10, lam0: float = 1e-3) -> LMResult:
    """Minimise 0.5*|residual(x)|^2.

    ``lower`` holds per-parameter lower bounds (-inf for free); trial points
    are clipped onto them. A step is accepted only if it lowers the cost, so
    the accepted cost sequence is non-increasing.
    """
    x = np.array(x0, dtype=float)
    lo = np.full_like(x, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    x = np.maximum(x, lo)
    r = residual(x)
    cost = 0.5 * float(r @ r)
    history = [cost]
    lam = lam0
    tiny = 1e-30 * max(len(r), 1)
    for it in range(1, max_iter + 1):
        if cost <= tiny:
            return LMResult(x, cost, it - 1, True, history)
        j = jacobian(x)
        a = j.T @ j
        g = j.T @ r
        d = np.diag(a).copy()
        d = np.maximum(d, 1e-12 * max(d.max(), 1e-300))
        while True:
            try:
                step = np.linalg.solve(a + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                x_new = np.maximum(x + step, lo)
                r_new = residual(x_new)
                cost_new = 0.5 * float(r_new @ r_new)
                if np.isfinite(cost_new) and cost_new < cost:
                    break
            lam *= 4.0
            if lam > 1e16:
                if step is None:
                    raise FitError("singular normal equations, damping could not recover", x)
                # no descent left at machine precision
                return LMResult(x, cost, it, True, history)
        rel = (cost - cost_new) / max(cost, 1e-300)
        x, r, cost = x_new, r_new, cost_new
        history.append(cost)
        lam = max(lam / 3.0, 1e-12)
        if rel < rtol:
            return LMResult(x, cost, it, True, history)
    return LMResult(x, cost, max_iter, False, history)


def numerical_jacobian(fn, x, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian, step ``rel_step`` relative to each |x_i| (1 for zeros)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(len(x)):
        h = rel_step * (abs(x[i]) if x[i] != 0 else 1.0)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((fn(xp) - fn(xm)) / (2 * h))
    return np.stack(cols, axis=1)


# --- Lorentzian spectra -------------------------------------------------------


@dataclass
class PeakSet:
    centers: np.ndarray
    amplitudes: np.ndarray
    fwhm: np.ndarray | float
    baseline: float = 0.0
    mi: tuple[int, ...] | None = None
    converged: bool = True
    cost: float = 0.0
    iterations: int = 0

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float)
        self.amplitudes = np.asarray(self.amplitudes, dtype=float)
        if np.any(np.diff(self.centers) <= 0):
            raise ValueError("peak centers must be strictly ascending")
        if np.any(self.amplitudes < 0):
            raise ValueError("peak amplitudes must be non-negative")
        if np.any(np.asarray(self.fwhm) <= 0):
            raise ValueError("fwhm must be positive")

    @property
    def per_peak_fwhm(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.fwhm, dtype=float), self.centers.shape).copy()

    def evaluate(self, f) -> np.ndarray:
        return lorentzian_model(np.asarray(f, dtype=float), self.centers, self.amplitudes,
                                self.per_peak_fwhm, self.baseline)

    def rho(self) -> np.ndarray:
        """Amplitudes ordered by m_I = -3..+3 (requires ``mi`` labels)."""
        if self.mi is None:
            raise ValueError("peak set has no m_I labels")
        out = np.zeros(7)
        for m, a in zip(self.mi, self.amplitudes):
            out[m + 3] = a
        return out


def lorentzian_model(f, centers, amps, fwhm, baseline):
    hw = np.asarray(fwhm) / 2
    dx = f[:, None] - centers[None, :]
    return baseline + (amps * hw ** 2 / (dx ** 2 + hw ** 2)).sum(axis=1)


class _LorentzianProblem:
    """Parameter packing: [centers?] amplitudes fwhm(1 or n) baseline."""

    def __init__(self, f, y, init: PeakSet, fix_centers: bool, per_peak_fwhm: bool):
        self.f, self.y = f, y
        self.n = len(init.centers)
        self.fixed_centers = init.centers.copy()
        self.fix_centers = fix_centers
        self.per_peak = per_peak_fwhm

    def pack(self, ps: PeakSet) -> np.ndarray:
        parts = [] if self.fix_centers else [ps.centers]
        fw = ps.per_peak_fwhm if self.per_peak else [float(np.mean(ps.per_peak_fwhm))]
        parts += [ps.amplitudes, fw, [ps.baseline]]
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def unpack(self, x):
        n, k = self.n, 0
        if self.fix_centers:
            c = self.fixed_centers
        else:
            c, k = x[:n], n
        a = x[k:k + n]
        k += n
        nw = n if self.per_peak else 1
        w = np.broadcast_to(x[k:k + nw], (n,))
        return c, a, w, x[k + nw]

    def lower(self) -> np.ndarray:
        n = self.n
        nw = n if self.per_peak else 1
        lo = [] if self.fix_centers else [np.full(n, -np.inf)]
        lo += [np.zeros(n), np.full(nw, 1e-9), [-np.inf]]
        return np.concatenate(lo)

    def residual(self, x):
        c, a, w, b = self.unpack(x)
        return lorentzian_model(self.f, c, a, w, b) - self.y

    def jacobian(self, x):
        c, a, w, b = self.unpack(x)
        hw = w / 2
        dx = self.f[:, None] - c[None, :]
        den = dx ** 2 + hw ** 2
        shape = hw ** 2 / den
        cols = []
        if not self.fix_centers:
            cols.append(a * 2 * hw ** 2 * dx / den ** 2)
        cols.append(shape)
        dw = a * hw * dx ** 2 / den ** 2
        cols.append(dw if self.per_peak else dw.sum(axis=1, keepdims=True))
        cols.append(np.ones((len(self.f), 1)))
        return np.hstack(cols)


def fit_lorentzians(spec: Spectrum, init: PeakSet, fix_centers: bool = False,
                    per_peak_fwhm: bool = False, max_iter: int = 500, rtol: float = 1e-10) -> PeakSet:
    if len(spec.freqs) == 0:
        raise InsufficientDataError("empty spectrum")
    prob = _LorentzianProblem(spec.freqs, spec.intensity, init, fix_centers, per_peak_fwhm)
    res = levenberg_marquardt(prob.residual, prob.jacobian, prob.pack(init), prob.lower(),
                              max_iter, rtol)
    c, a, w, b = prob.unpack(res.x)
    order = np.argsort(c)
    mi = tuple(init.mi[k] for k in order) if init.mi is not None else None
    fw = w[order] if per_peak_fwhm else float(w[0])
    return PeakSet(c[order], a[order], fw, float(b), mi, res.converged, res.cost, res.iterations)


def initial_peaks(spec: Spectrum, d_zfs: float, gamma_e: float, b0: float, a_zz: float,
                  fwhm: float | None = None) -> PeakSet:
    """Seed seven peaks on the comb |D - gamma_e B - A_zz m_I|.

    The comb is slid by up to A_zz/2 to the offset that best overlaps the data,
    absorbing the common second-order shift; heights are read at the seeds.
    """
    mi = spinops.MI_VALUES
    comb = np.abs(d_zfs - gamma_e * b0 - a_zz * mi)
    order = np.argsort(comb)
    comb = comb[order]
    offsets = np.linspace(-a_zz / 2, a_zz / 2, 401)
    overlap = [np.interp(comb + o, spec.freqs, spec.intensity).sum() for o in offsets]
    centers = comb + offsets[int(np.argmax(overlap))]
    heights = np.interp(centers, spec.freqs, spec.intensity)
    base = float(np.min(spec.intensity))
    amps = np.clip(heights - base, 0.0, None)
    return PeakSet(centers, amps, fwhm if fwhm else a_zz / 2, base,
                   tuple(int(m) for m in mi[order]))


def fit_odmr(spec: Spectrum, d_zfs: float, gamma_e: float, b0: float, a_zz: float,
             fwhm: float | None = None, fix_centers: bool = False) -> PeakSet:
    """Seed, fit amplitudes with centers held, then release the centers."""
    seed = initial_peaks(spec, d_zfs, gamma_e, b0, a_zz, fwhm)
    held = fit_lorentzians(spec, seed, fix_centers=True)
    if fix_centers:
        return held
    return fit_lorentzians(spec, held)


def polarization(rho) -> float:
    """Mean nuclear polarization sum(m_I rho) / (3 sum(rho)) over m_I = -3..+3."""
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (7,) or np.any(rho < 0):
        raise ValueError("rho must be 7 non-negative populations over m_I = -3..+3")
    total = rho.sum()
    if total == 0:
        raise ValueError("rho is all zero")
    return float(np.dot(spinops.MI_VALUES, rho) / (3 * total))


def spin_temperature_distribution(target: float) -> np.ndarray:
    """Distribution mult(m) exp(beta m) with polarization ``target`` in (-1, 1)."""
    from scipy.optimize import brentq

    if not -1 < target < 1:
        raise ValueError("target polarization must lie strictly between -1 and 1")
    mult = spinops.mi_multiplicity().astype(float)
    mi = spinops.MI_VALUES

    def dist(beta):
        w = mult * np.exp(beta * mi - abs(beta) * 3)
        return w / w.sum()

    beta = brentq(lambda b: polarization(dist(b)) - target, -50, 50, xtol=1e-14)
    return dist(beta)


# --- Rabi traces --------------------------------------------------------------


@dataclass
class RabiFit:
    f_rabi: float
    t2_star: float
    amp: float
    phase: float
    decay_amps: np.ndarray
    decay_times: np.ndarray
    offset: float
    residual: float
    converged: bool
    t2_at_bound: bool = False
    iterations: int = 0

    def evaluate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        rate = 0.0 if math.isinf(self.t2_star) else 1.0 / self.t2_star
        rates = np.array([0.0 if math.isinf(x) else 1.0 / x for x in self.decay_times])
        return damped_cosine_model(t, self.amp, rate, self.f_rabi, self.phase,
                                   self.decay_amps, rates, self.offset)

    def report(self) -> dict:
        out = {
            "f_rabi_MHz": self.f_rabi,
            "t2_star_us": self.t2_star,
            "t2_at_bound": self.t2_at_bound,
            "amp": self.amp,
            "phase_rad": self.phase,
            "offset": self.offset,
            "residual_rms": self.residual,
            "converged": self.converged,
            "iterations": self.iterations,
        }
        for k, (c, tau) in enumerate(zip(self.decay_amps, self.decay_times), 1):
            out[f"decay{k}_amp"] = float(c)
            out[f"decay{k}_time_us"] = float(tau)
        return out


def damped_cosine_model(t, a, rate, f, phi, c, k, b):
    y = a * np.exp(-rate * t) * np.cos(2 * np.pi * f * t + phi) + b
    for ci, ki in zip(c, k):
        y = y + ci * np.exp(-ki * t)
    return y


class _RabiProblem:
    """Parameters: a, 1/T, f, phi, (c_k, 1/tau_k)..., b."""

    def __init__(self, t, y, n_decays):
        self.t, self.y, self.m = t, y, n_decays

    def unpack(self, x):
        m = self.m
        return x[0], x[1], x[2], x[3], x[4:4 + 2 * m:2], x[5:5 + 2 * m:2], x[4 + 2 * m]

    def lower(self):
        lo = [-np.inf, 0.0, 0.0, -np.inf] + [-np.inf, 0.0] * self.m + [-np.inf]
        return np.array(lo)

    def residual(self, x):
        return damped_cosine_model(self.t, *self.unpack(x)) - self.y

    def jacobian(self, x):
        a, rate, f, phi, c, k, _ = self.unpack(x)
        t = self.t
        env = np.exp(-rate * t)
        arg = 2 * np.pi * f * t + phi
        cos, sin = np.cos(arg), np.sin(arg)
        cols = [env * cos, -t * a * env * cos, -a * env * sin * 2 * np.pi * t, -a * env * sin]
        for ci, ki in zip(c, k):
            e = np.exp(-ki * t)
            cols += [e, -t * ci * e]
        cols.append(np.ones_like(t))
        return np.stack(cols, axis=1)


def guess_rabi(t, y, n_decays: int = 1) -> np.ndarray:
    """Starting point from the dominant FFT frequency and a linear phase fit."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    span = t[-1] - t[0]
    tu = np.linspace(t[0], t[-1], len(t))
    yu = np.interp(tu, t, y)
    yu = yu - yu.mean()
    pad = 16 * len(tu)
    spec = np.abs(np.fft.rfft(yu * np.hanning(len(tu)), pad))
    freqs = np.fft.rfftfreq(pad, tu[1] - tu[0])
    spec[freqs < 0.5 / span] = 0.0
    f = float(freqs[np.argmax(spec)])
    basis = np.stack([np.cos(2 * np.pi * f * t), np.sin(2 * np.pi * f * t), np.ones_like(t)], axis=1)
    (ca, cb, b), *_ = np.linalg.lstsq(basis, y, rcond=None)
    a = math.hypot(ca, cb)
    phi = math.atan2(-cb, ca)
    x = [a, 0.1 / span, f, phi] + [0.0, 1.0 / span] * n_decays + [b]
    return np.array(x)


def fit_damped_cosine(times, population=None, init=None, n_decays: int = 1,
                      max_iter: int = 500, rtol: float = 1e-10) -> RabiFit:
    """Fit a e^{-t/T} cos(2 pi f t + phi) + sum_k c_k e^{-t/tau_k} + b.

    ``times`` may be a TimeTrace. ``init`` is a parameter vector in the order
    [a, 1/T, f, phi, c_1, 1/tau_1, ..., b] or None for an automatic guess.
    """
    if population is None:
        times, population = times.times, times.population
    t = np.asarray(times, dtype=float)
    y = np.asarray(population, dtype=float)
    x0 = guess_rabi(t, y, n_decays) if init is None else np.asarray(init, dtype=float)
    f0 = x0[2]
    if len(t) < 8:
        raise InsufficientDataError(f"need at least 8 samples, got {len(t)}")
    if f0 <= 0 or (t[-1] - t[0]) * f0 < 1.0:
        raise InsufficientDataError("trace spans less than one oscillation period")
    prob = _RabiProblem(t, y, n_decays)
    res = levenberg_marquardt(prob.residual, prob.jacobian, x0, prob.lower(), max_iter, rtol)
    a, rate, f, phi, c, k, b = prob.unpack(res.x)
    if a < 0:
        a, phi = -a, phi + math.pi
    phi = (phi + math.pi) % (2 * math.pi) - math.pi
    span = t[-1] - t[0]
    # a decay slower than 1e3 spans is indistinguishable from none
    at_bound = rate * span < 1e-3
    t2 = math.inf if at_bound else 1.0 / rate
    taus = np.array([math.inf if ki <= 0 else 1.0 / ki for ki in k])
    rms = math.sqrt(2 * res.cost / len(t))
    return RabiFit(float(f), t2, float(a), float(phi), np.array(c), taus, float(b), rms,
                   res.converged, at_bound, res.iterations)


def fit_linear(x, y, zero_intercept: bool = False) -> tuple[float, float, float]:
    """Ordinary least squares; returns (slope, intercept, r^2) with centred r^2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2 or len(x) != len(y):
        raise InsufficientDataError("need at least 2 paired points")
    if zero_intercept:
        sxx = float(x @ x)
        if sxx == 0:
            raise ValueError("degenerate x: all zero")
        slope, intercept = float(x @ y) / sxx, 0.0
    else:
        xc = x - x.mean()
        sxx = float(xc @ xc)
        if sxx == 0:
            raise ValueError("degenerate x: all values equal")
        slope = float(xc @ (y - y.mean())) / sxx
        intercept = float(y.mean() - slope * x.mean())
    resid = y - (slope * x + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        r2 = 1.0 if ss_res <= 1e-24 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return slope, intercept, r2
