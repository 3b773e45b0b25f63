"""Strict INI experiment configuration."""
from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh_materials import (
    Bounds,
    ConfigurationError,
    Grid,
    MaterialModel,
    build_grid,
    load_field_csv,
    make_material,
    preset_field,
)


class ConfigParseError(ConfigurationError):
    """Malformed or unknown configuration entry; ``key`` is ``section.name``."""

    def __init__(self, key: str, message: str, line: int | None = None):
        self.key = key
        self.line = line
        where = f" (line {line})" if line else ""
        super().__init__(f"{key}{where}: {message}")


# section -> key -> (required, default)
SCHEMA: dict[str, dict[str, tuple[bool, str | None]]] = {
    "grid": {"d": (True, None), "n": (True, None), "extents": (False, None), "x0": (True, None)},
    "material": {
        "rho": (False, "constant value=1"),
        "mu": (False, "constant value=1"),
        "lambda": (False, "constant value=1"),
        "rho1": (False, None),
        "mu0": (False, None),
        "mu1": (False, None),
        "lambda0": (False, None),
        "lambda1": (False, None),
    },
    "time": {"T": (False, "2.0"), "cfl": (False, "0.5")},
    "basis": {"atoms": (False, "8"), "width": (False, "1.0")},
    "probe": {"gamma": (False, "6.283185307179586"), "lift": (False, "discrete")},
    "regularization": {"method": (False, "truncate"), "param": (False, "1e-6")},
    "stability": {
        "delta": (False, "collar_bump amplitude=1 radius=0.3"),
        "epsilons": (False, "1e-3,1e-4,1e-5,1e-6,1e-7"),
        "xi": (False, "0,0;6.283185307179586,0"),
    },
    "observability": {
        "c0": (False, "1"),
        "c1": (False, "1"),
        "rho2": (False, "1"),
        "tau": (False, "0.5"),
        "ensemble": (False, "16"),
        "T": (False, "2.0"),
    },
    "run": {"seed": (False, "0"), "output_dir": (False, "out")},
}


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, str]]
    digest: str
    source: str = ""
    _cache: dict = field(default_factory=dict, repr=False)

    def get(self, key: str) -> str:
        sec, name = key.split(".")
        return self.values[sec][name]

    def get_float(self, key: str) -> float:
        return _as_float(key, self.get(key))

    def get_int(self, key: str) -> int:
        v = self.get(key)
        try:
            return int(v)
        except ValueError:
            raise ConfigParseError(key, f"expected an integer, got {v!r}") from None

    def get_floats(self, key: str, sep: str = ",") -> list[float]:
        return [_as_float(key, p) for p in self.get(key).split(sep) if p.strip()]

    def get_vectors(self, key: str) -> list[np.ndarray]:
        return [np.array([_as_float(key, v) for v in part.split(",")]) for part in self.get(key).split(";") if part.strip()]

    def grid(self, n: int | None = None) -> Grid:
        """The configured grid; ``n`` replaces the node count per axis."""
        if n is not None:
            return self._build_grid(n)
        if "grid" not in self._cache:
            n_parts = self.get("grid.n").split(",")
            try:
                nn = [int(v) for v in n_parts] if len(n_parts) > 1 else int(n_parts[0])
            except ValueError:
                raise ConfigParseError("grid.n", f"expected integers, got {self.get('grid.n')!r}") from None
            self._cache["grid"] = self._build_grid(nn)
        return self._cache["grid"]

    def _build_grid(self, n) -> Grid:
        d = self.get_int("grid.d")
        ext = self.values["grid"].get("extents")
        extents = None
        if ext:
            extents = [tuple(_as_float("grid.extents", v) for v in part.split(",")) for part in ext.split(";")]
        x0 = self.get_floats("grid.x0")
        if len(x0) != d:
            raise ConfigParseError("grid.x0", f"needs {d} components")
        return build_grid(d, n, extents, x0)

    def field(self, key: str, grid: Grid) -> np.ndarray:
        return parse_field(key, self.get(key), grid, Path(self.source).parent if self.source else Path("."))

    def material(self, grid: Grid | None = None, rho: np.ndarray | None = None) -> MaterialModel:
        """Material sampled on ``grid`` (default: the configured grid)."""
        g = self.grid() if grid is None else grid
        rho_f = self.field("material.rho", g) if rho is None else rho
        mu_f = self.field("material.mu", g)
        lam_f = self.field("material.lambda", g)
        sec = self.values["material"]
        bounds = None
        if any(sec.get(k) for k in ("rho1", "mu0", "mu1", "lambda0", "lambda1")):
            pick = lambda k, default: _as_float(f"material.{k}", sec[k]) if sec.get(k) else default
            bounds = Bounds(
                rho1=pick("rho1", float(rho_f.max())),
                mu0=pick("mu0", float(mu_f.min())),
                mu1=pick("mu1", float(mu_f.max())),
                lambda0=pick("lambda0", float(lam_f.min())),
                lambda1=pick("lambda1", float(lam_f.max())),
            )
        return make_material(rho_f, mu_f, lam_f, g, bounds)


def _as_float(key: str, v: str) -> float:
    try:
        return float(v)
    except ValueError:
        raise ConfigParseError(key, f"expected a number, got {v!r}") from None


def parse_field(key: str, text: str, grid: Grid, base: Path) -> np.ndarray:
    """``1.5`` | ``csv:path`` | ``preset k=v ...``."""
    text = text.strip()
    try:
        return np.full(grid.shape, float(text))
    except ValueError:
        pass
    if text.startswith("csv:"):
        p = Path(text[4:].strip())
        return load_field_csv(p if p.is_absolute() else base / p, grid)
    name, *params = text.split()
    kw = {}
    for p in params:
        if "=" not in p:
            raise ConfigParseError(key, f"preset parameter {p!r} is not key=value")
        k, v = p.split("=", 1)
        kw[k] = _as_float(key, v)
    try:
        return preset_field(name, grid, **kw)
    except TypeError as exc:
        raise ConfigParseError(key, f"bad preset parameters: {exc}") from None


def _line_of(text: str, section: str, key: str) -> int | None:
    cur = None
    for i, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            cur = m.group(1).strip()
            continue
        if cur == section and re.match(rf"\s*{re.escape(key)}\s*[=:]", line, re.IGNORECASE):
            return i
    return None


def parse_config(text: str, source: str = "", overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse INI text strictly; ``overrides`` maps ``section.key`` to a value."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigParseError("config", str(exc).splitlines()[0], line) from None
    values: dict[str, dict[str, str]] = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigParseError(sec, "unknown section", _line_of(text, sec, "") or None)
        for k, v in cp.items(sec):
            if k not in SCHEMA[sec]:
                raise ConfigParseError(f"{sec}.{k}", "unknown key", _line_of(text, sec, k))
        values[sec] = dict(cp.items(sec))
    for key, val in (overrides or {}).items():
        if "." not in key:
            raise ConfigParseError(key, "override must be section.key")
        sec, k = key.split(".", 1)
        if sec not in SCHEMA or k not in SCHEMA[sec]:
            raise ConfigParseError(key, "unknown key")
        values.setdefault(sec, {})[k] = val
    for sec, keys in SCHEMA.items():
        got = values.setdefault(sec, {})
        for k, (required, default) in keys.items():
            if k not in got or got[k] == "":
                if required:
                    raise ConfigParseError(f"{sec}.{k}", "required key missing")
                if default is not None:
                    got[k] = default
    canon = "\n".join(f"{s}.{k}={values[s][k]}" for s in sorted(values) for k in sorted(values[s]))
    digest = hashlib.sha256(canon.encode()).hexdigest()
    return ExperimentConfig(values, digest, source)


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path), overrides)


def fixture_path() -> Path:
    """The shipped unit-square configuration."""
    return Path(__file__).parent / "data" / "unit_square.ini"
