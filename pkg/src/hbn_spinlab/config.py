"""Run configuration: flat ``key = value`` files with ``#`` comments."""

from __future__ import annotations

import dataclasses
import math
import os
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import spinops
from .hamiltonian import (
    CONSTANTS,
    Manifold,
    ParameterError,
    SpinSystemParams,
    hyperfine_tensor,
)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParameterError(f"line {n}: empty key")
        out[key] = value
    return out


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else ("-inf" if v < 0 else "nan"))
    if isinstance(v, (np.floating,)):
        return format_value(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


def dump_kv(items: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in items.items())


def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_range(text: str) -> np.ndarray:
    """``start:stop:step`` (stop inclusive) to an array."""
    try:
        start, stop, step = (float(s) for s in text.split(":"))
    except ValueError:
        raise ParameterError(f"range must be start:stop:step, got {text!r}") from None
    if step <= 0 or stop < start:
        raise ParameterError(f"invalid range {text!r}")
    n = int(round((stop - start) / step)) + 1
    return start + step * np.arange(n)


def _bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ParameterError(f"not a boolean: {s!r}")


def _opt_float(s: str):
    return None if s.strip() in ("", "auto", "none") else float(s)


@dataclass
class RunConfig:
    manifold: str = "GS"
    b0_mT: float = 74.0
    d_zfs_MHz: float | None = None
    a_zz_MHz: float = CONSTANTS["A_zz_MHz"][0]
    a_tran_MHz: float = CONSTANTS["A_tran_MHz"][0]
    quadrupole_MHz: float = CONSTANTS["Q_MHz"][0]
    gamma_e_MHz_per_mT: float = CONSTANTS["gamma_e_MHz_per_mT"][0]
    gamma_n_MHz_per_mT: float = CONSTANTS["gamma_n_MHz_per_mT"][0]
    b_sweep_mT: str = "60:90:0.5"
    freq_grid_MHz: str = "auto"
    fwhm_MHz: float | None = None
    rho: str = "uniform-multiplicity"
    branch: str = "-1"
    mw_pi: bool = True
    pump_rate: float = 1.0
    depol_rate: float = 0.05
    pump_cycles_cap: int = 10 ** 9
    rf_b1_mT: float = 0.2
    rf_freq_MHz: float | None = None
    time_grid_us: str = "0:20:0.1"
    n_decays: int = 1
    noise: float = 0.0
    seed: int = 0
    input: str = ""

    @classmethod
    def from_mapping(cls, kv: dict[str, str], base: "RunConfig | None" = None,
                     ignore_unknown: bool = False) -> "RunConfig":
        cfg = dataclasses.replace(base) if base is not None else cls()
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in kv.items():
            if key not in types:
                if ignore_unknown:
                    continue
                raise ParameterError(f"unknown config key {key!r}")
            t = types[key]
            try:
                if "None" in str(t):
                    val = _opt_float(raw)
                elif "bool" in str(t):
                    val = _bool(raw)
                elif "int" in str(t):
                    val = int(raw)
                elif "float" in str(t):
                    val = float(raw)
                else:
                    val = raw
            except ValueError:
                raise ParameterError(f"bad value for {key}: {raw!r}") from None
            setattr(cfg, key, val)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, **kw) -> "RunConfig":
        return cls.from_mapping(parse_kv(Path(path).read_text(encoding="utf-8")), **kw)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dump(self) -> str:
        return dump_kv(self.as_dict())

    def validate(self) -> None:
        Manifold(self.manifold)
        if self.b0_mT < 0:
            raise ParameterError("b0_mT must be >= 0")
        if self.fwhm_MHz is not None and self.fwhm_MHz <= 0:
            raise ParameterError("fwhm_MHz must be positive")
        if self.branch not in ("-1", "0", "all"):
            raise ParameterError("branch must be -1, 0 or all")
        if self.pump_rate < 0 or self.depol_rate < 0:
            raise ParameterError("rates must be non-negative")
        if self.rf_b1_mT < 0 or self.noise < 0:
            raise ParameterError("rf_b1_mT and noise must be non-negative")
        if self.pump_cycles_cap < 1:
            raise ParameterError("pump_cycles_cap must be >= 1")
        if self.n_decays < 0:
            raise ParameterError("n_decays must be >= 0")
        parse_range(self.b_sweep_mT)
        parse_range(self.time_grid_us)
        if self.freq_grid_MHz != "auto":
            parse_range(self.freq_grid_MHz)
        self.rho_vector()

    def params(self, b0: float | None = None) -> SpinSystemParams:
        m = Manifold(self.manifold)
        d = self.d_zfs_MHz
        if d is None:
            d = CONSTANTS["D_GS_MHz" if m is Manifold.GS else "D_ES_MHz"][0]
        a = hyperfine_tensor(self.a_tran_MHz, self.a_zz_MHz)
        q = self.quadrupole_MHz
        return SpinSystemParams(m, d, (a, a, a), self.gamma_e_MHz_per_mT,
                                self.gamma_n_MHz_per_mT, (q, q, q),
                                self.b0_mT if b0 is None else b0)

    def rho_vector(self) -> np.ndarray:
        from .analysis import spin_temperature_distribution

        s = self.rho.strip()
        if s == "uniform-multiplicity":
            return spinops.mi_multiplicity() / 27
        if s.startswith("polarization:"):
            try:
                return spin_temperature_distribution(float(s.split(":", 1)[1]))
            except ValueError as exc:
                raise ParameterError(f"bad rho {s!r}: {exc}") from None
        try:
            rho = np.array([float(x) for x in s.split(",")])
        except ValueError:
            raise ParameterError(f"bad rho {s!r}") from None
        if rho.shape != (7,) or np.any(rho < 0) or rho.sum() <= 0:
            raise ParameterError("rho needs 7 non-negative values over m_I = -3..+3")
        return rho / rho.sum()
