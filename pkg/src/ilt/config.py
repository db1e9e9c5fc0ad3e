"""Run configuration: an INI file plus ``section.key=value`` overrides.

Sections and keys::

    [run]      inputs (whitespace-separated paths or globs), target, output, workers, snapshot_every
    [grid]     width_px, height_px, nm_per_px       (used when rasterizing layout files)
    [kernels]  source = files | synthetic
               nominal, defocus                     (ILTK paths, for source = files)
               freq_dim, sigma_freq, defocus_blur   (for source = synthetic)
               dose_outer, dose_nominal, dose_inner
    [litho]    d_th, beta2
    [opt]      every OptConfig field by name
    [epe]      every EpeSpec field by name

Keys match case-insensitively.  Relative paths resolve against the
directory holding the config file.
"""

from __future__ import annotations

import configparser
import dataclasses
import glob
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .errors import ConfigError, ILTError
from .kernels import Corner, ProcessCorners, load_kernel_set, synth_gaussian_kernels
from .litho import LithoConfig
from .metrics import EpeSpec
from .objective import OptConfig
from .raster import GridSpec

LAYOUT_SUFFIXES = {".txt", ".glp", ".layout"}
IMAGE_SUFFIXES = {".png"}

_SECTIONS = {
    "run": {"inputs", "target", "output", "workers", "snapshot_every"},
    "grid": {"width_px", "height_px", "nm_per_px"},
    "kernels": {"source", "nominal", "defocus", "freq_dim", "sigma_freq", "defocus_blur",
                "dose_outer", "dose_nominal", "dose_inner"},
    "litho": {"d_th", "beta2"},
    "opt": {f.name for f in dataclasses.fields(OptConfig)},
    "epe": {f.name for f in dataclasses.fields(EpeSpec)},
}


@dataclass(frozen=True)
class RunConfig:
    inputs: tuple[Path, ...]
    target: Path | None
    output: Path
    grid: GridSpec
    litho: LithoConfig
    opt: OptConfig
    epe: EpeSpec
    workers: int = 1
    snapshot_every: int = 10
    kernel_paths: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# Typed value parsing
# --------------------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_as(kind, text: str):
    text = text.strip()
    if kind is bool:
        return _parse_bool(text)
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind == (int | None):
        return None if text.lower() in ("", "none") else int(text)
    return text


def _dataclass_kwargs(cls, section: configparser.SectionProxy | dict, name: str) -> dict:
    hints = get_type_hints(cls)
    canonical = {field_name.lower(): field_name for field_name in hints}
    out = {}
    for key, raw in section.items():
        key = canonical[key.lower()]
        try:
            out[key] = _parse_as(hints[key], raw)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from None
    return out


def _get(parser, section, key, kind=str, default=None):
    if not parser.has_section(section):
        return default
    matches = [k for k in parser.options(section) if k.lower() == key]
    if not matches:
        return default
    raw = parser.get(section, matches[-1])
    try:
        return _parse_as(kind, raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------

def apply_overrides(parser: configparser.ConfigParser, overrides) -> None:
    for item in overrides or ():
        key, sep, value = item.partition("=")
        section, dot, option = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        if not parser.has_section(section):
            parser.add_section(section)
        for existing in parser.options(section):
            if existing.lower() == option.lower():
                parser.remove_option(section, existing)
        parser.set(section, option, value)


def _check_names(parser: configparser.ConfigParser) -> None:
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        known = {k.lower() for k in _SECTIONS[section]}
        unknown = {k for k in parser.options(section) if k.lower() not in known}
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")


def _resolve(base: Path, text: str) -> Path:
    path = Path(text).expanduser()
    return path if path.is_absolute() else base / path


def _expand_inputs(base: Path, text: str) -> tuple[Path, ...]:
    found = []
    for pattern in text.split():
        pattern = str(_resolve(base, pattern))
        if glob.has_magic(pattern):
            found.extend(Path(p) for p in sorted(glob.glob(pattern)))
        else:
            found.append(Path(pattern))
    return tuple(found)


def _must_exist(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _load_corners(parser, base: Path) -> tuple[ProcessCorners, dict]:
    doses = (
        _get(parser, "kernels", "dose_outer", float, 1.02),
        _get(parser, "kernels", "dose_nominal", float, 1.00),
        _get(parser, "kernels", "dose_inner", float, 0.98),
    )
    source = _get(parser, "kernels", "source", str, "files")
    if source == "synthetic":
        corners = synth_gaussian_kernels(
            _get(parser, "kernels", "freq_dim", int, 35),
            _get(parser, "kernels", "sigma_freq", float, 8.0),
            _get(parser, "kernels", "defocus_blur", float, 1.25),
            doses,
        )
        return corners, {}
    if source != "files":
        raise ConfigError(f"[kernels] source must be 'files' or 'synthetic', got {source!r}")
    nominal_text = _get(parser, "kernels", "nominal")
    if not nominal_text:
        raise ConfigError("[kernels] nominal is required when source = files")
    paths = {"nominal": _must_exist(_resolve(base, nominal_text), "nominal kernel file")}
    defocus_text = _get(parser, "kernels", "defocus")
    if defocus_text:
        paths["defocus"] = _must_exist(_resolve(base, defocus_text), "defocus kernel file")
    nominal = load_kernel_set(paths["nominal"])
    defocus = load_kernel_set(paths["defocus"]) if "defocus" in paths else nominal
    outer, nom, inner = doses
    return ProcessCorners(Corner(nominal, nom), Corner(defocus, outer), Corner(defocus, inner)), paths


def build_config(parser: configparser.ConfigParser, base: Path, need_inputs: bool = True) -> RunConfig:
    """Validate everything up front; raises ConfigError on the first problem."""
    _check_names(parser)
    try:
        inputs = _expand_inputs(base, _get(parser, "run", "inputs", str, ""))
        if need_inputs:
            if not inputs:
                raise ConfigError("no input files matched [run] inputs")
            for path in inputs:
                _must_exist(path, "input")
        target_text = _get(parser, "run", "target")
        target = _must_exist(_resolve(base, target_text), "target") if target_text else None
        output = _resolve(base, _get(parser, "run", "output", str, "out"))
        workers = _get(parser, "run", "workers", int, 1)
        snapshot_every = _get(parser, "run", "snapshot_every", int, 10)
        if workers < 1 or snapshot_every < 1:
            raise ConfigError("[run] workers and snapshot_every must be >= 1")

        grid = GridSpec(
            _get(parser, "grid", "width_px", int, 2048),
            _get(parser, "grid", "height_px", int, 2048),
            _get(parser, "grid", "nm_per_px", float, 1.0),
        )
        corners, kernel_paths = _load_corners(parser, base)
        litho = LithoConfig(
            corners,
            d_th=_get(parser, "litho", "d_th", float, 0.225),
            beta2=_get(parser, "litho", "beta2", float, 50.0),
        )
        opt_section = parser["opt"] if parser.has_section("opt") else {}
        epe_section = parser["epe"] if parser.has_section("epe") else {}
        opt = OptConfig(**_dataclass_kwargs(OptConfig, opt_section, "opt"))
        epe = EpeSpec(**_dataclass_kwargs(EpeSpec, epe_section, "epe"))
    except ConfigError:
        raise
    except ILTError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(inputs, target, output, grid, litho, opt, epe, workers, snapshot_every, kernel_paths)


def read_parser(path=None, overrides=()) -> tuple[configparser.ConfigParser, Path]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str  # keep OptConfig names like ``T`` intact
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.resolve().parent
    apply_overrides(parser, overrides)
    return parser, base


def load_config(path=None, overrides=(), need_inputs: bool = True) -> RunConfig:
    parser, base = read_parser(path, overrides)
    return build_config(parser, base, need_inputs)
