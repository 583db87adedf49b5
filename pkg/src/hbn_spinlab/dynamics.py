"""Optical nuclear pumping, driven time evolution and hyperfine enhancement."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import spinops
from .hamiltonian import (
    Manifold,
    ParameterError,
    SpinSystemParams,
    build_hamiltonian,
    default_params,
    drive_operator,
)
from .spectra import MS_VALUES, eigh, solve

MULTIPLICITY = spinops.mi_multiplicity()
UNPOLARIZED = MULTIPLICITY / MULTIPLICITY.sum()


class StepSizeError(RuntimeError):
    pass


class TransitionMatchError(ValueError):
    pass


def _sector_masks():
    ms, mi = spinops.basis_quantum_numbers()
    return ms, mi


def flip_probability(es_params: SpinSystemParams, m_i: int) -> float:
    """Chance per optical cycle that |0, m_I> hybridises into |-1, m_I+1>.

    Two-level estimate A^2 / (A^2 + Delta^2): Delta is the mean diagonal
    energy difference between the two product sectors and A^2 the mean squared
    coupling out of a |0, m_I> state, both read off the Hamiltonian.
    """
    if m_i not in range(-3, 4):
        raise ParameterError(f"m_I must be in -3..3, got {m_i}")
    if m_i == 3:
        return 0.0
    h = build_hamiltonian(es_params)
    ms, mi = _sector_masks()
    src = np.flatnonzero((ms == 0) & (mi == m_i))
    dst = np.flatnonzero((ms == -1) & (mi == m_i + 1))
    diag = np.real(np.diag(h))
    delta = diag[dst].mean() - diag[src].mean()
    a2 = float(np.sum(np.abs(h[np.ix_(dst, src)]) ** 2) / len(src))
    if a2 == 0.0:
        return 0.0
    return a2 / (a2 + delta * delta)


def flip_probabilities(es_params: SpinSystemParams) -> np.ndarray:
    return np.array([flip_probability(es_params, int(m)) for m in spinops.MI_VALUES])


def polarization_of(rho) -> float:
    rho = np.asarray(rho, dtype=float)
    return float(np.dot(spinops.MI_VALUES, rho) / (3 * rho.sum()))


@dataclass(frozen=True)
class PumpParams:
    pump_rate: float
    depol_rate: float
    es_params: SpinSystemParams
    gs_params: SpinSystemParams | None = None
    cycles_cap: int = 10 ** 9
    use_gs_mixing: bool = False

    def __post_init__(self):
        if self.pump_rate < 0 or self.depol_rate < 0:
            raise ParameterError("rates must be non-negative")
        if self.cycles_cap < 1:
            raise ParameterError("cycles_cap must be >= 1")


@dataclass(frozen=True)
class PumpResult:
    rho: np.ndarray
    polarization: float
    cycles: int
    converged: bool


def transfer_matrix(flip: np.ndarray, depol_fraction: float) -> np.ndarray:
    """Column-stochastic map for one optical cycle over m_I = -3..+3."""
    t = np.zeros((7, 7))
    for k in range(7):
        t[k, k] += 1.0 - flip[k]
        if k < 6:
            t[k + 1, k] += flip[k]
    eps = min(max(depol_fraction, 0.0), 1.0)
    return (1.0 - eps) * t + eps * np.outer(UNPOLARIZED, np.ones(7))


def pump_steady_state(p: PumpParams, rho0=None, tol: float = 1e-10) -> PumpResult:
    """Fixed point of the optical pumping chain.

    The chain is advanced by repeated squaring of the one-cycle map, so the
    cycle count doubles each round until the L1 change drops below ``tol``.
    """
    rho = UNPOLARIZED.copy() if rho0 is None else np.asarray(rho0, dtype=float)
    if p.pump_rate == 0.0:
        return PumpResult(UNPOLARIZED.copy(), 0.0, 0, True)
    mixing = p.gs_params if (p.use_gs_mixing and p.gs_params is not None) else p.es_params
    m = transfer_matrix(flip_probabilities(mixing), p.depol_rate / p.pump_rate)
    step = m
    cycles = 1
    rho = step @ rho
    while True:
        nxt = step @ rho
        done = np.abs(nxt - rho).sum() < tol
        rho = nxt
        cycles *= 2
        if done:
            break
        if cycles >= p.cycles_cap:
            rho = np.clip(rho, 0, None)
            rho /= rho.sum()
            return PumpResult(rho, polarization_of(rho), cycles, False)
        step = step @ step
    rho = np.clip(rho, 0, None)
    rho /= rho.sum()
    return PumpResult(rho, polarization_of(rho), cycles, True)


def polarization_sweep(b_values, pump_rate: float, depol_rate: float,
                       es_params: SpinSystemParams | None = None) -> np.ndarray:
    base = es_params if es_params is not None else default_params(Manifold.ES)
    out = []
    for b in b_values:
        res = pump_steady_state(PumpParams(pump_rate, depol_rate, base.with_field(float(b))))
        out.append(res.polarization)
    return np.array(out)


# --- coherent dynamics --------------------------------------------------------


@dataclass
class TimeTrace:
    times: np.ndarray
    population: np.ndarray

    def to_csv(self) -> str:
        rows = ["time_us,population"]
        rows += [f"{t:.12g},{y:.12g}" for t, y in zip(self.times, self.population)]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "TimeTrace":
        lines = text.strip().splitlines()
        if lines[0].strip() != "time_us,population":
            raise ValueError("expected header 'time_us,population'")
        data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
        return cls(data[:, 0], data[:, 1])


def propagate(h0: np.ndarray, v: np.ndarray, drive_freq: float, b1: float, times, psi0,
              steps_per_cycle: int = 50, min_step: float = 1e-12) -> np.ndarray:
    """State vectors at ``times`` (us) under H0 + b1 V cos(2 pi f t), energies in MHz.

    Piecewise-constant propagation with a step no longer than
    1 / (steps_per_cycle * max(f, ||H0||)). Each step is split as
    exp(-i H0 dt/2) exp(-i c V dt) exp(-i H0 dt/2) with the drive sampled at
    the step midpoint, done in the eigenbasis of H0. The step grid is tied to
    the drive period so one-period propagators can be reused.
    """
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ParameterError("times must be non-negative and ascending")
    if b1 < 0:
        raise ParameterError("b1 must be non-negative")
    e0, w0 = np.linalg.eigh(h0)
    psi = w0.conj().T @ np.asarray(psi0, dtype=complex)
    out = np.empty((len(times), len(psi)), dtype=complex)
    if b1 == 0.0 or not np.any(v):
        for k, t in enumerate(times):
            out[k] = w0 @ (np.exp(-2j * np.pi * e0 * t) * psi)
        return out
    ve, vw = np.linalg.eigh(w0.conj().T @ v @ w0)
    norm = float(np.max(np.abs(e0)))
    rate = max(drive_freq, norm)
    dt_max = 1.0 / (steps_per_cycle * rate)
    if dt_max < min_step:
        raise StepSizeError(f"required step {dt_max:.3g} us is below {min_step:.3g} us")

    def step(state, t0, dt):
        c = b1 * math.cos(2 * math.pi * drive_freq * (t0 + dt / 2))
        half = np.exp(-1j * np.pi * e0 * dt)
        kick = np.exp(-2j * np.pi * c * ve * dt)
        if state.ndim == 2:
            # stepping a propagator: phases act on rows
            half, kick = half[:, None], kick[:, None]
        state = half * state
        state = vw @ (kick * (vw.conj().T @ state))
        return half * state

    if drive_freq <= 0:
        # static drive: exact propagator
        hs = np.diag(e0) + b1 * (w0.conj().T @ v @ w0)
        es, ws = np.linalg.eigh(hs)
        amp = ws.conj().T @ psi
        for k, t in enumerate(times):
            out[k] = w0 @ (ws @ (np.exp(-2j * np.pi * es * t) * amp))
        return out

    period = 1.0 / drive_freq
    n = max(1, math.ceil(period / dt_max))
    dt = period / n
    # partial propagators from the period start, every `stride` steps
    stride = max(1, n // 32)
    checkpoints = []
    u = np.eye(len(psi), dtype=complex)
    for j in range(n):
        if j % stride == 0:
            checkpoints.append(u)
        u = step(u, j * dt, dt)
    u_period = u

    t_cur, state = 0.0, psi
    for k, t in enumerate(times):
        whole = math.floor((t - t_cur) / period + 1e-12)
        for _ in range(whole):
            state = u_period @ state
        t_cur += whole * period
        # remainder: branch off the period grid without moving it
        rem = t - t_cur
        j = min(int(math.floor(rem / dt + 1e-12)), n - 1)
        c = j // stride
        branch = checkpoints[c] @ state
        for i in range(c * stride, j):
            branch = step(branch, i * dt, dt)
        tail = rem - j * dt
        if tail > 1e-15:
            branch = step(branch, j * dt, tail)
        out[k] = w0 @ branch
    return out


def rabi_evolve(gs_params: SpinSystemParams, drive_freq: float, b1: float, times,
                initial_state: int, target_state: int, steps_per_cycle: int = 50) -> TimeTrace:
    """Population of eigenstate ``target_state`` after starting in ``initial_state``."""
    es = solve(gs_params)
    h0 = build_hamiltonian(gs_params)
    v = drive_operator(gs_params, "RF_inplane")
    psi0 = es.vectors[:, initial_state]
    states = propagate(h0, v, drive_freq, b1, times, psi0, steps_per_cycle)
    target = es.vectors[:, target_state]
    pop = np.abs(states @ target.conj()) ** 2
    return TimeTrace(np.asarray(times, dtype=float), pop)


def nuclear_part(vec: np.ndarray, ms: int) -> np.ndarray:
    """Normalised nuclear state of ``vec`` projected onto electron level ``ms``."""
    a = MS_VALUES.index(ms)
    block = vec.reshape(3, 27)[a]
    nrm = np.linalg.norm(block)
    return block / nrm


def hyperfine_enhancement(gs_params: SpinSystemParams, transition: tuple[int, int], es=None) -> float:
    """Drive matrix element of a nuclear transition relative to a bare nucleus.

    The bare element uses the nuclear parts of both eigenstates within their
    shared m_s level, i.e. the states the dressed ones connect to as the
    hyperfine coupling is switched off.
    """
    es = es if es is not None else solve(gs_params)
    i, f = transition
    labels = es.ms_labels
    if labels[i] is None or labels[i] != labels[f]:
        raise TransitionMatchError(f"states {i} and {f} are not in the same m_s branch")
    ms = labels[i]
    v = drive_operator(gs_params, "RF_inplane")
    dressed = abs(es.vectors[:, f].conj() @ v @ es.vectors[:, i])
    phi_i = nuclear_part(es.vectors[:, i], ms)
    phi_f = nuclear_part(es.vectors[:, f], ms)
    ix = sum(_nuclear_x(j) for j in range(3))
    bare = abs(phi_f.conj() @ ix @ phi_i)
    if bare < 1e-6:
        raise TransitionMatchError(f"transition {i}->{f} has no bare nuclear counterpart")
    return float(dressed / (gs_params.gamma_n * bare))


def _nuclear_x(j: int) -> np.ndarray:
    sx, _, _ = spinops.spin1_operators()
    eye = np.eye(3)
    factors = [eye, eye, eye]
    factors[j] = sx
    return np.kron(np.kron(factors[0], factors[1]), factors[2])


def perturbative_enhancement(gs_params: SpinSystemParams) -> float:
    """First-order estimate (gamma_e/gamma_n) A_tran / |D - gamma_e B|."""
    a = gs_params.hyperfine[0]
    a_tran = (a[0, 0] + a[1, 1]) / 2
    return gs_params.gamma_e / gs_params.gamma_n * a_tran / abs(gs_params.d_zfs - gs_params.gamma_e * gs_params.b0)


def strongest_branch_line(gs_params: SpinSystemParams, window=(49.0, 55.0), ms: int = -1, es=None):
    """Strongest RF transition inside ``window`` between two states of branch ``ms``."""
    from .spectra import transition_catalog

    es = es if es is not None else solve(gs_params)
    labels = es.ms_labels
    lines = [ln for ln in transition_catalog(es, drive_operator(gs_params), window)
             if labels[ln.initial] == ms and labels[ln.final] == ms]
    if not lines:
        raise TransitionMatchError(f"no m_s={ms} line in {window} MHz")
    return max(lines, key=lambda ln: ln.strength)
