"""``hbn-spinlab`` command line.

Exit codes: 0 success, 1 internal error, 2 invalid configuration or usage,
3 file I/O error, 4 fit failure, 5 non-converged result.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, dynamics, spectra
from .config import RunConfig, dump_kv, parse_kv, parse_range, write_atomic
from .hamiltonian import CONSTANTS, GAMMA_RATIO, ParameterError

EXIT_INTERNAL, EXIT_CONFIG, EXIT_IO, EXIT_FIT, EXIT_CONVERGENCE = 1, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("HBN_SPINLAB_THREADS", "1")))
    except ValueError:
        return 1


# --- commands -----------------------------------------------------------------
# each returns {filename: text}; the caller writes files and the manifest


def constants_text() -> str:
    lines = []
    for key, (value, note) in CONSTANTS.items():
        lines.append(f"# {note}")
        lines.append(f"{key} = {value:g}")
    lines.append("# gamma_e / gamma_n")
    lines.append(f"gamma_ratio = {GAMMA_RATIO:.1f}")
    return "\n".join(lines) + "\n"


def cmd_levels(cfg: RunConfig) -> dict[str, str]:
    b = parse_range(cfg.b_sweep_mT)
    _, table = spectra.level_sweep(cfg.manifold, b, cfg.params(), workers=_threads())
    header = "b_mT," + ",".join(f"E{k}_MHz" for k in range(table.shape[1]))
    rows = [header] + [
        f"{bv:.12g}," + ",".join(f"{e:.12g}" for e in row) for bv, row in zip(b, table)
    ]
    return {"levels.csv": "\n".join(rows) + "\n"}


def _odmr_grid(cfg: RunConfig) -> np.ndarray:
    if cfg.freq_grid_MHz != "auto":
        return parse_range(cfg.freq_grid_MHz)
    p = cfg.params()
    center = abs(p.d_zfs - p.gamma_e * p.b0)
    lo = max(0.0, center - 4 * cfg.a_zz_MHz - 60)
    return spectra.frequency_grid(round(lo), round(center + 4 * cfg.a_zz_MHz + 60), 0.5)


def cmd_odmr(cfg: RunConfig) -> dict[str, str]:
    fwhm = cfg.fwhm_MHz or 20.0
    sp = spectra.odmr_spectrum(cfg.params(), cfg.rho_vector(), fwhm, _odmr_grid(cfg))
    return {"odmr.csv": sp.to_csv()}


def cmd_nmr(cfg: RunConfig) -> dict[str, str]:
    fwhm = cfg.fwhm_MHz or 1.0
    grid = (parse_range(cfg.freq_grid_MHz) if cfg.freq_grid_MHz != "auto"
            else spectra.frequency_grid(0.0, 80.0, 0.05))
    branch = cfg.branch if cfg.branch == "all" else int(cfg.branch)
    sp = spectra.odnmr_spectrum(cfg.params(), branch, fwhm, grid, cfg.mw_pi, cfg.rho_vector())
    return {"nmr.csv": sp.to_csv()}


def cmd_pump(cfg: RunConfig) -> dict[str, str]:
    b = parse_range(cfg.b_sweep_mT)
    # mixing step uses the configured manifold: ES for ESLAC, GS for GSLAC pumping
    base = cfg.params()
    rows = ["b_mT,polarization,converged," + ",".join(f"rho_{m:+d}" for m in range(-3, 4))]
    stalled = []
    for bv in b:
        res = dynamics.pump_steady_state(
            dynamics.PumpParams(cfg.pump_rate, cfg.depol_rate, base.with_field(float(bv)),
                                cycles_cap=cfg.pump_cycles_cap))
        if not res.converged:
            stalled.append(bv)
        rows.append(f"{bv:.12g},{res.polarization:.12g},{int(res.converged)},"
                    + ",".join(f"{r:.12g}" for r in res.rho))
    if stalled:
        raise CliError(EXIT_CONVERGENCE, "convergence",
                       f"pumping chain did not converge at {len(stalled)} field(s)")
    return {"pump.csv": "\n".join(rows) + "\n"}


def _rabi_pair(p):
    """Default driven pair: the m_I=+3 state of m_s=-1 and its strongest m_I=+2 partner."""
    es = spectra.solve(p)
    labels = es.labels
    v = es.operator(spectra.drive_operator(p))
    start = [k for k, lab in enumerate(labels) if lab[0] == -1 and lab[1] == 3]
    if not start:
        raise CliError(EXIT_CONFIG, "validation", "no m_s=-1, m_I=+3 state at this field")
    i = start[0]
    partners = [k for k, lab in enumerate(labels) if lab[0] == -1 and lab[1] == 2]
    f = max(partners, key=lambda k: abs(v[k, i]))
    return es, i, f, abs(v[f, i])


def _rabi_trace(cfg: RunConfig) -> dynamics.TimeTrace:
    p = cfg.params()
    es, i, f, _ = _rabi_pair(p)
    freq = cfg.rf_freq_MHz if cfg.rf_freq_MHz is not None else es.values[f] - es.values[i]
    times = parse_range(cfg.time_grid_us)
    return dynamics.rabi_evolve(p, float(freq), cfg.rf_b1_mT, times, i, f)


def _add_noise(y: np.ndarray, cfg: RunConfig) -> np.ndarray:
    if cfg.noise == 0:
        return y
    rng = np.random.default_rng(cfg.seed)
    return y + rng.normal(0.0, cfg.noise * float(np.max(np.abs(y))), size=y.shape)


def cmd_rabi(cfg: RunConfig) -> dict[str, str]:
    tr = _rabi_trace(cfg)
    tr.population = _add_noise(tr.population, cfg)
    return {"rabi.csv": tr.to_csv()}


def _read_input(cfg: RunConfig) -> str:
    try:
        return Path(cfg.input).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot read input {cfg.input!r}: {exc.strerror}") from None


def cmd_fit_odmr(cfg: RunConfig) -> dict[str, str]:
    p = cfg.params()
    if cfg.input:
        sp = spectra.Spectrum.from_csv(_read_input(cfg))
        source = {}
    else:
        sp = spectra.odmr_spectrum(p, cfg.rho_vector(), cfg.fwhm_MHz or 20.0, _odmr_grid(cfg))
        sp.intensity = _add_noise(sp.intensity, cfg)
        source = {"odmr_input.csv": sp.to_csv()}
    try:
        fit = analysis.fit_odmr(sp, p.d_zfs, p.gamma_e, p.b0, cfg.a_zz_MHz)
    except analysis.FitError as exc:
        raise CliError(EXIT_FIT, "fit", str(exc)) from None
    rho = fit.rho()
    report = {
        "converged": fit.converged,
        "iterations": fit.iterations,
        "fwhm_MHz": float(np.mean(fit.per_peak_fwhm)),
        "baseline": fit.baseline,
        "polarization": analysis.polarization(rho),
        "residual_rms": float(np.sqrt(2 * fit.cost / len(sp.freqs))),
    }
    for m, c, a in zip(fit.mi, fit.centers, fit.amplitudes):
        report[f"center_mI{m:+d}_MHz"] = float(c)
        report[f"amplitude_mI{m:+d}"] = float(a)
    resid = sp.intensity - fit.evaluate(sp.freqs)
    rows = ["frequency_mhz,residual"] + [f"{f:.12g},{r:.12g}" for f, r in zip(sp.freqs, resid)]
    out = dict(source)
    out["fit_odmr_report.txt"] = dump_kv(report)
    out["fit_odmr_residuals.csv"] = "\n".join(rows) + "\n"
    if not fit.converged:
        raise CliError(EXIT_FIT, "fit", "ODMR fit did not converge")
    return out


def cmd_fit_rabi(cfg: RunConfig) -> dict[str, str]:
    if cfg.input:
        tr = dynamics.TimeTrace.from_csv(_read_input(cfg))
        source = {}
    else:
        tr = _rabi_trace(cfg)
        tr.population = _add_noise(tr.population, cfg)
        source = {"rabi_input.csv": tr.to_csv()}
    try:
        fit = analysis.fit_damped_cosine(tr, n_decays=cfg.n_decays)
    except (analysis.FitError, analysis.InsufficientDataError) as exc:
        raise CliError(EXIT_FIT, "fit", str(exc)) from None
    resid = tr.population - fit.evaluate(tr.times)
    rows = ["time_us,residual"] + [f"{t:.12g},{r:.12g}" for t, r in zip(tr.times, resid)]
    out = dict(source)
    out["fit_rabi_report.txt"] = dump_kv(fit.report())
    out["fit_rabi_residuals.csv"] = "\n".join(rows) + "\n"
    if not fit.converged:
        raise CliError(EXIT_FIT, "fit", "Rabi fit did not converge")
    return out


COMMANDS = {
    "levels": cmd_levels,
    "odmr": cmd_odmr,
    "nmr": cmd_nmr,
    "pump": cmd_pump,
    "rabi": cmd_rabi,
    "fit-odmr": cmd_fit_odmr,
    "fit-rabi": cmd_fit_rabi,
}

COMMAND_HELP = {
    "levels": "eigenvalues over a field sweep -> levels.csv",
    "odmr": "seven-line electron spectrum for a nuclear distribution -> odmr.csv",
    "nmr": "optically detected nuclear spectrum -> nmr.csv",
    "pump": "steady-state nuclear polarization over a field sweep -> pump.csv",
    "rabi": "driven nuclear Rabi trace -> rabi.csv",
    "fit-odmr": "fit seven Lorentzians and report the polarization",
    "fit-rabi": "fit a damped cosine to a Rabi trace",
}

# recipes run by `repro`: (directory, command, config overrides)
REPRO_RECIPES = [
    ("levels_es", "levels", {"manifold": "ES", "b_sweep_mT": "60:90:0.5"}),
    ("levels_gs", "levels", {"manifold": "GS", "b_sweep_mT": "110:135:0.5"}),
    ("odmr_unpolarized", "odmr", {"rho": "uniform-multiplicity"}),
    ("odmr_pumped", "odmr", {"rho": "polarization:0.32"}),
    ("nmr_pi", "nmr", {"branch": "all", "mw_pi": "true"}),
    ("nmr_reference", "nmr", {"branch": "all", "mw_pi": "false"}),
    ("pump_weak", "pump", {"manifold": "ES", "b_sweep_mT": "7:110:1", "pump_rate": "0.2"}),
    ("pump_strong", "pump", {"manifold": "ES", "b_sweep_mT": "7:110:1", "pump_rate": "1.0"}),
    ("rabi", "rabi", {"rf_b1_mT": "0.3", "time_grid_us": "0:12:0.1"}),
    ("fit_odmr", "fit-odmr", {"rho": "polarization:0.32", "noise": "0.01", "seed": "7"}),
    ("fit_rabi", "fit-rabi", {"rf_b1_mT": "0.3", "time_grid_us": "0:12:0.1",
                              "noise": "0.02", "seed": "11"}),
]


def resolved(cfg: RunConfig, command: str) -> RunConfig:
    """Fill command-dependent defaults so a manifest pins every value."""
    if cfg.fwhm_MHz is None:
        cfg.fwhm_MHz = 1.0 if command == "nmr" else 20.0
    if cfg.d_zfs_MHz is None:
        cfg.d_zfs_MHz = cfg.params().d_zfs
    if command in ("rabi", "fit-rabi") and cfg.rf_freq_MHz is None and not cfg.input:
        es, i, f, _ = _rabi_pair(cfg.params())
        cfg.rf_freq_MHz = float(es.values[f] - es.values[i])
    return cfg


def manifest_text(command: str, cfg: RunConfig) -> str:
    head = {"command": command, "tool_version": __version__, "seed": cfg.seed}
    body = {k: v for k, v in cfg.as_dict().items() if k != "seed"}
    return dump_kv(head) + dump_kv(body)


def run_command(command: str, cfg: RunConfig, out_dir: Path) -> list[Path]:
    files = COMMANDS[command](resolved(cfg, command))
    written = []
    for name, text in files.items():
        write_atomic(out_dir / name, text)
        written.append(out_dir / name)
    write_atomic(out_dir / "manifest.txt", manifest_text(command, cfg))
    written.append(out_dir / "manifest.txt")
    return written


def run_manifest(path: Path, out_dir: Path) -> list[Path]:
    try:
        kv = parse_kv(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot read manifest {str(path)!r}: {exc.strerror}") from None
    command = kv.pop("command", None)
    if command not in COMMANDS:
        raise CliError(EXIT_CONFIG, "validation", f"manifest has unknown command {command!r}")
    kv.pop("tool_version", None)
    return run_command(command, RunConfig.from_mapping(kv), out_dir)


def run_repro(out_dir: Path, base: RunConfig | None = None) -> list[Path]:
    written = []
    for name, command, overrides in REPRO_RECIPES:
        cfg = RunConfig.from_mapping(overrides, base=base)
        written += run_command(command, cfg, out_dir / name)
    return written


# --- argument parsing -----------------------------------------------------------

FLAG_KEYS = {
    "manifold": "manifold", "b0": "b0_mT", "b": "b_sweep_mT", "freq": "freq_grid_MHz",
    "fwhm": "fwhm_MHz", "rho": "rho", "branch": "branch", "pump_rate": "pump_rate",
    "depol_rate": "depol_rate", "b1": "rf_b1_mT", "rf_freq": "rf_freq_MHz",
    "times": "time_grid_us", "n_decays": "n_decays", "noise": "noise", "seed": "seed",
    "input": "input", "quadrupole": "quadrupole_MHz",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_CONFIG, "usage", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hbn-spinlab",
                     description="V_B- electron / 14N nuclear spin simulation and fitting.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("constants", help="print the embedded constants table")
    for name in COMMANDS:
        sp = sub.add_parser(name, help=COMMAND_HELP[name])
        sp.add_argument("--config", metavar="FILE")
        sp.add_argument("--out", default=".", metavar="DIR")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--manifold", choices=["GS", "ES"])
        sp.add_argument("--b0", help="static field, mT")
        sp.add_argument("--b", help="field sweep start:stop:step, mT")
        sp.add_argument("--freq", help="frequency grid start:stop:step, MHz")
        sp.add_argument("--fwhm", help="line width, MHz")
        sp.add_argument("--rho", help="uniform-multiplicity | polarization:P | 7 comma values")
        sp.add_argument("--branch", choices=["-1", "0", "all"])
        sp.add_argument("--no-mw-pi", action="store_true", help="reference run without MW pi pulses")
        sp.add_argument("--pump-rate")
        sp.add_argument("--depol-rate")
        sp.add_argument("--b1", help="RF amplitude, mT")
        sp.add_argument("--rf-freq", help="RF frequency, MHz")
        sp.add_argument("--times", help="time grid start:stop:step, us")
        sp.add_argument("--n-decays")
        sp.add_argument("--noise")
        sp.add_argument("--seed")
        sp.add_argument("--input")
        sp.add_argument("--quadrupole", help="14N quadrupole constant, MHz")
    rp = sub.add_parser("repro", help="run every reproduction recipe")
    rp.add_argument("--out", default="repro", metavar="DIR")
    rp.add_argument("--config", metavar="FILE")
    rm = sub.add_parser("replay", help="re-run a command from its manifest")
    rm.add_argument("manifest")
    rm.add_argument("--out", default=".", metavar="DIR")
    return parser


def config_from_args(args) -> RunConfig:
    kv = {}
    if getattr(args, "config", None):
        try:
            kv.update(parse_kv(Path(args.config).read_text(encoding="utf-8")))
        except OSError as exc:
            raise CliError(EXIT_IO, "io", f"cannot read config {args.config!r}: {exc.strerror}") from None
    for flag, key in FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            kv[key] = str(val)
    if getattr(args, "no_mw_pi", False):
        kv["mw_pi"] = "false"
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise CliError(EXIT_CONFIG, "usage", f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    return RunConfig.from_mapping(kv)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "constants":
            sys.stdout.write(constants_text())
            return 0
        if args.command == "repro":
            base = config_from_args(args) if args.config else None
            paths = run_repro(Path(args.out), base)
        elif args.command == "replay":
            paths = run_manifest(Path(args.manifest), Path(args.out))
        else:
            paths = run_command(args.command, config_from_args(args), Path(args.out))
        for p in paths:
            print(p)
        return 0
    except CliError as exc:
        code, kind, msg = exc.code, exc.kind, str(exc)
    except ParameterError as exc:
        code, kind, msg = EXIT_CONFIG, "validation", str(exc)
    except analysis.FitError as exc:
        code, kind, msg = EXIT_FIT, "fit", str(exc)
    except OSError as exc:
        code, kind, msg = EXIT_IO, "io", str(exc)
    except Exception as exc:  # noqa: BLE001
        code, kind, msg = EXIT_INTERNAL, "internal", f"{type(exc).__name__}: {exc}"
    msg = " ".join(msg.split())
    print(f"error code={code} kind={kind} message={msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
