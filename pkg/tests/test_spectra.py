import math
from itertools import product

import numpy as np
import pytest

from hbn_spinlab import spinops
from hbn_spinlab.hamiltonian import ParameterError, build_hamiltonian, default_params, drive_operator
from hbn_spinlab.spectra import (
    NotHermitianError,
    Spectrum,
    c_nn,
    d_nn,
    eigh,
    find_lac,
    frequency_grid,
    level_sweep,
    odmr_lines,
    odmr_spectrum,
    odnmr_spectrum,
    solve,
    transition_catalog,
)

UNPOLARIZED = spinops.mi_multiplicity() / 27


def random_hermitian(rng, n=81):
    m = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return (m + m.conj().T) / 2


def test_eigh_small_cases():
    es = eigh(np.diag([3.0, 1.0, 2.0]))
    assert np.allclose(es.values, [1, 2, 3])
    assert np.allclose(np.abs(es.vectors), np.eye(3)[:, [1, 2, 0]])
    h = np.zeros((81, 81))
    h[0, 1] = h[1, 0] = 1.0
    vals = eigh(h).values
    assert vals[0] == pytest.approx(-1) and vals[-1] == pytest.approx(1)


def test_eigh_invariants_random():
    rng = np.random.default_rng(0)
    h = random_hermitian(rng)
    es = eigh(h)
    v = es.vectors
    assert np.max(np.abs(h - v @ np.diag(es.values) @ v.conj().T)) <= 1e-8 * np.max(np.abs(h))
    assert np.max(np.abs(v.conj().T @ v - np.eye(81))) <= 1e-9
    assert np.all(np.diff(es.values) >= 0)
    # phase convention
    for k in range(81):
        col = v[:, k]
        i = np.argmax(np.abs(col) > 1e-8 * np.abs(col).max())
        assert abs(col[i].imag) < 1e-12 and col[i].real > 0


def test_eigh_deterministic():
    h = build_hamiltonian(default_params("GS", 74.0))
    a, b = eigh(h), eigh(h)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.vectors, b.vectors)


def test_eigh_rejects_non_hermitian():
    with pytest.raises(NotHermitianError):
        eigh(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_labels_without_hyperfine_are_exact():
    es = solve(default_params("GS", 40.0).without_hyperfine())
    for ms, mi, w in es.labels:
        assert w == pytest.approx(1.0)
    counts = {m: es.ms_labels.count(m) for m in (1, 0, -1)}
    assert counts == {1: 27, 0: 27, -1: 27}


def _crossing_field(manifold):
    # where the pure m_s=-1 and m_s=0 levels meet, from the swept table
    p = default_params(manifold).without_hyperfine()
    b, table = level_sweep(manifold, np.arange(60.0, 140.0, 0.1), params=p)
    top_of_zero = table[:, 26]
    bottom_above = table[:, 27]
    # below the crossing the 28th level is m_s=-1 at D/3 - gamma_e B; after it m_s=0 at -2D/3
    lower_minus = p.d_zfs / 3 - p.gamma_e * b
    k = np.argmin(np.abs(lower_minus + 2 * p.d_zfs / 3))
    return b[k]


def test_level_sweep_crossings():
    assert _crossing_field("GS") == pytest.approx(3450 / 28, abs=0.06)
    assert _crossing_field("ES") == pytest.approx(75.0, abs=0.06)
    b, table = level_sweep("ES", [60.0, 61.0])
    assert table.shape == (2, 81) and list(b) == [60.0, 61.0]
    with pytest.raises(ParameterError):
        level_sweep("ES", [])


def test_branch_has_27_states():
    es = solve(default_params("GS", 74.0))
    assert len(es.branch(-1)) == 27
    assert len(es.branch(0)) == 27


def test_find_lac_defaults():
    es_lac, gs_lac = find_lac("ES"), find_lac("GS")
    assert es_lac == pytest.approx(75.0, abs=1.5)
    assert gs_lac == pytest.approx(123.2, abs=1.5)
    assert gs_lac > es_lac


@pytest.mark.parametrize("manifold", ["GS", "ES"])
def test_find_lac_without_hyperfine(manifold):
    p = default_params(manifold).without_hyperfine()
    assert find_lac(manifold, params=p) == pytest.approx(p.d_zfs / p.gamma_e, abs=0.01)


def test_catalog_identity_is_empty():
    es = solve(default_params("GS", 74.0))
    assert transition_catalog(es, np.eye(81), (0.0, 1e5)) == []
    with pytest.raises(ParameterError):
        transition_catalog(es, np.eye(81), (-1.0, 5.0))


def test_catalog_completeness_brute_force():
    p = default_params("GS", 74.0)
    es = solve(p)
    v = drive_operator(p)
    window = (10.0, 100.0)
    lines = transition_catalog(es, v, window, strength_floor=0.0)
    vm = es.vectors.conj().T @ v @ es.vectors
    total = 0.0
    for i in range(81):
        for f in range(81):
            df = es.values[f] - es.values[i]
            if i != f and window[0] <= df <= window[1]:
                total += abs(vm[f, i]) ** 2
    assert sum(ln.strength for ln in lines) == pytest.approx(total, rel=1e-12)


def test_catalog_branch_minus_one_band():
    p = default_params("GS", 74.0)
    es = solve(p)
    pops = np.zeros(81)
    pops[es.branch(-1)] = 1 / 27
    lines = [ln for ln in transition_catalog(es, drive_operator(p), (10.0, 100.0), pops)
             if ln.branch == (-1, -1)]
    assert lines
    assert all(35.0 <= ln.freq <= 60.0 for ln in lines)
    assert all(0.0 <= ln.weight <= 1.0 and ln.strength >= 0 for ln in lines)


def test_catalog_bare_nuclear_zeeman():
    p = default_params("GS", 74.0).without_hyperfine()
    es = solve(p)
    lines = transition_catalog(es, drive_operator(p), (0.0, 10.0))
    assert lines
    for ln in lines:
        assert ln.freq == pytest.approx(0.003076 * 74, abs=1e-9)


def test_odmr_amplitudes_follow_rho():
    p = default_params("GS", 74.0)
    grid = frequency_grid(1100, 1650, 0.5)
    sp = odmr_spectrum(p, UNPOLARIZED, 20.0, grid)
    counts = np.array([sum(1 for c in product((1, 0, -1), repeat=3) if sum(c) == m) for m in range(-3, 4)])
    assert np.allclose(sp.amplitudes, counts / 27, atol=1e-12)
    single = np.zeros(7)
    single[6] = 1.0
    sp1 = odmr_spectrum(p, single, 20.0, grid)
    assert sp1.intensity.max() == pytest.approx(1.0, abs=1e-3)
    assert np.count_nonzero(sp1.amplitudes) == 1


def test_odmr_spacing_far_from_gslac():
    centers, _ = odmr_lines(default_params("GS", 3300.0))
    assert np.allclose(np.abs(np.diff(centers)), 47.0, atol=0.5)


def test_odmr_linear_in_rho():
    p = default_params("GS", 74.0)
    grid = frequency_grid(1100, 1650, 1.0)
    rng = np.random.default_rng(2)
    r1, r2 = rng.dirichlet(np.ones(7)), rng.dirichlet(np.ones(7))
    s1 = odmr_spectrum(p, r1, 15.0, grid).intensity
    s2 = odmr_spectrum(p, r2, 15.0, grid).intensity
    mix = odmr_spectrum(p, 0.3 * r1 + 0.7 * r2, 15.0, grid).intensity
    assert np.allclose(mix, 0.3 * s1 + 0.7 * s2, atol=1e-9)


def test_odmr_center_of_mass_moves_with_polarization():
    from hbn_spinlab.analysis import spin_temperature_distribution

    p = default_params("GS", 74.0)
    grid = frequency_grid(1000, 1800, 0.5)
    coms = []
    for target in (-0.4, -0.1, 0.0, 0.2, 0.5):
        sp = odmr_spectrum(p, spin_temperature_distribution(target), 20.0, grid)
        coms.append(sp.centroid(grid[0], grid[-1]))
    # higher m_I sits at lower frequency below the GSLAC
    assert np.all(np.diff(coms) < 0)


def test_odmr_rejects_bad_input():
    p = default_params("GS", 74.0)
    grid = frequency_grid(1100, 1650, 1.0)
    with pytest.raises(ParameterError):
        odmr_spectrum(p, np.full(7, 0.2), 20.0, grid)
    with pytest.raises(ParameterError):
        odmr_spectrum(p, UNPOLARIZED, 0.0, grid)


def test_odnmr_band_and_reference():
    p = default_params("GS", 74.0)
    on = odnmr_spectrum(p, "all", 1.0, mw_pi_applied=True)
    off = odnmr_spectrum(p, "all", 1.0, mw_pi_applied=False)
    assert 40.0 <= on.centroid(20.0, 80.0) <= 50.0
    assert off.integral(35.0, 60.0) <= 0.05 * on.integral(35.0, 60.0)
    # the m_s=0 band sits below 10 MHz
    assert off.centroid(0.0, 20.0) < 10.0


def test_odnmr_without_hyperfine_collapses():
    p = default_params("GS", 74.0).without_hyperfine()
    fwhm = 0.5
    sp = odnmr_spectrum(p, -1, fwhm, frequency_grid(0.0, 20.0, 0.005))
    half = sp.intensity >= sp.intensity.max() / 2
    width = sp.freqs[half][-1] - sp.freqs[half][0]
    assert width == pytest.approx(fwhm, rel=0.05)
    assert sp.freqs[np.argmax(sp.intensity)] == pytest.approx(0.003076 * 74, abs=0.01)


def test_spectrum_grid_validation_and_csv():
    with pytest.raises(ParameterError):
        Spectrum([0.0, 1.0, 1.5], [0, 0, 0], 1.0)
    sp = Spectrum([0.0, 0.5, 1.0], [0.0, 2.0, 0.5], 1.0)
    text = sp.to_csv()
    assert text.startswith("frequency_mhz,intensity\n") and "\r" not in text
    back = Spectrum.from_csv(text)
    assert np.array_equal(back.freqs, sp.freqs) and np.array_equal(back.intensity, sp.intensity)


def test_c_nn_values():
    assert c_nn(74.0) == pytest.approx(3.36, abs=0.01)
    assert c_nn(3300.0) * 1e3 == pytest.approx(51.98, abs=0.05)
    assert c_nn(0.0) == pytest.approx(68 ** 2 / 3450, rel=1e-12)
    with pytest.raises(ParameterError, match="GSLAC"):
        c_nn(3450 / 28)


def test_d_nn_conventions():
    # hand-evaluated: mu0 = 1.25663706212e-6, hbar = 1.054571817e-34, gamma = 3.076e6 Hz/T
    assert d_nn(0.250, "cyclic") == pytest.approx(40.1244, rel=1e-5)
    assert d_nn(0.250, "angular") == pytest.approx(252.109, rel=1e-5)
    assert d_nn(0.250, "angular_4pi") == pytest.approx(20.0622, rel=1e-5)
    assert d_nn(0.5) == pytest.approx(d_nn(0.25) / 8, rel=1e-14)
    assert 30.0 <= d_nn(0.264) <= 40.0
    with pytest.raises(ParameterError):
        d_nn(0.25, "gaussian")
    with pytest.raises(ParameterError):
        d_nn(0.0)
