"""Scenario files, presets, result emission and sweep checkpoints.

Config grammar: one ``section.key = value`` per line, ``#`` starts a
comment, blank lines are ignored. Sections are ``scenario``, ``nv``,
``pump``, ``cavity``, ``diode``, ``odmr``, ``noise`` and ``chain``; see
KEYS for the accepted keys and units. Unknown keys are errors.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .cavity import CavityGeometry
from .laser import DiodeParams
from .nv_levels import ContrastMap, NvSystem, PumpCondition, load_rate_file
from .sensing import Chain, FeasibilityMap, NoiseModel, OdmrConfig, OdmrSpectrum

SCHEMA_VERSION = 1
PRESET_ENV = "THRESHMAG_PRESET_DIR"
PRESETS = ("D1", "D2", "D3", "experimental")


class ConfigError(ValueError):
    """Parse or validation failure; carries the source and line when known."""

    def __init__(self, message: str, source: str | None = None, line: int | None = None):
        self.source = source
        self.line = line
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


class OutputError(OSError):
    pass


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none", "auto") else float(s)


KEYS: dict[str, tuple[Any, str]] = {
    "scenario.name": (str, ""),
    "scenario.notes": (str, ""),
    "nv.density_ppm": (float, "ppm"),
    "nv.t2_star": (float, "s"),
    "nv.thickness": (float, "m"),
    "nv.rates_file": (str, "path, relative to the config file"),
    "pump.intensity": (float, "W/m^2"),
    "pump.rabi_frequency": (float, "Hz"),
    "pump.wavelength": (float, "m"),
    "cavity.L_m": (float, "m"),
    "cavity.L_r": (float, "m"),
    "cavity.R1": (float, ""),
    "cavity.R2": (float, ""),
    "cavity.R3": (float, ""),
    "cavity.alpha_c": (float, "1/m"),
    "cavity.external_transmission": (float, ""),
    "cavity.reflectivity_model": (str, "single_bounce | multi_bounce"),
    "diode.N_tr": (float, "1/m^3"),
    "diode.a": (float, "m^2"),
    "diode.Gamma": (float, ""),
    "diode.epsilon": (float, "m^3"),
    "diode.beta": (float, ""),
    "diode.tau_N": (float, "s"),
    "diode.V": (float, "m^3"),
    "diode.eta_i": (float, ""),
    "diode.wavelength": (float, "m"),
    "diode.gain_model": (str, "linear | logarithmic"),
    "diode.group_index": (float, ""),
    "odmr.center_frequency": (float, "Hz"),
    "odmr.linewidth": (_opt_float, "Hz, or auto for 1/(pi T2*)"),
    "odmr.drive_current": (_opt_float, "A, or auto for the off-resonance threshold"),
    "odmr.span_linewidths": (float, ""),
    "odmr.n_points": (int, ""),
    "noise.kinds": (str, "comma list of optical_shot, current_shot, relative_current"),
    "noise.bandwidth": (float, "Hz"),
    "noise.relative_level": (float, "fraction of the drive current"),
    "chain.contrast_scale": (float, ""),
}


@dataclass(frozen=True)
class Scenario:
    name: str
    nv: NvSystem
    pump: PumpCondition
    cavity: CavityGeometry = CavityGeometry()
    diode: DiodeParams = DiodeParams()
    odmr: OdmrConfig = OdmrConfig()
    noises: tuple[NoiseModel, ...] = (NoiseModel("optical_shot"), NoiseModel("current_shot"))
    contrast_scale: float = 1.0
    notes: str = ""
    rates_file: str | None = None

    @property
    def chain(self) -> Chain:
        return Chain(self.nv, self.pump, self.cavity, self.diode, self.contrast_scale)

    def with_chain(self, chain: Chain) -> "Scenario":
        return replace(self, nv=chain.nv, pump=chain.pump, cavity=chain.cavity, diode=chain.diode, contrast_scale=chain.contrast_scale)

    def noise(self, kind: str) -> NoiseModel:
        for n in self.noises:
            if n.kind == kind:
                return n
        return NoiseModel(kind, self.noises[0].bandwidth if self.noises else 1.0)

    def digest(self) -> str:
        return hashlib.sha256(format_scenario(self).encode()).hexdigest()


# --------------------------------------------------------------------------
# parsing


def parse_config_text(text: str, source: str = "<string>") -> dict[str, tuple[Any, int]]:
    """Key -> (converted value, line number). Rejects unknown and repeated keys."""
    out: dict[str, tuple[Any, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", source, lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", source, lineno)
        if key in out:
            raise ConfigError(f"duplicate key {key!r} (first on line {out[key][1]})", source, lineno)
        conv = KEYS[key][0]
        try:
            out[key] = (conv(value), lineno)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", source, lineno) from None
    return out


def _section(values: Mapping[str, tuple[Any, int]], prefix: str) -> dict[str, Any]:
    n = len(prefix) + 1
    return {k[n:]: v for k, (v, _) in values.items() if k.startswith(prefix + ".")}


def _build(cls, kwargs: dict, values, prefix: str, source: str):
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        # name the offending field and point at its line when we can
        msg = str(exc)
        line = None
        for k, (_, ln) in values.items():
            if k.startswith(prefix + ".") and k.split(".", 1)[1] in msg:
                line = ln
                break
        raise ConfigError(f"[{prefix}] {msg}", source, line) from None


def scenario_from_values(values: Mapping[str, tuple[Any, int]], source: str = "<string>", base_dir: Path | None = None) -> Scenario:
    nv_kw = _section(values, "nv")
    rates_file = nv_kw.pop("rates_file", None)
    for req in ("density_ppm", "t2_star", "thickness"):
        if req not in nv_kw:
            raise ConfigError(f"missing required key nv.{req}", source)
    if rates_file:
        p = Path(rates_file)
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        try:
            nv_kw["rates"] = load_rate_file(p)
        except OSError as exc:
            raise ConfigError(f"cannot read rates file {p}: {exc.strerror}", source) from None
    nv = _build(NvSystem, nv_kw, values, "nv", source)
    pump_kw = _section(values, "pump")
    for req in ("intensity", "rabi_frequency"):
        if req not in pump_kw:
            raise ConfigError(f"missing required key pump.{req}", source)
    pump = _build(PumpCondition, pump_kw, values, "pump", source)
    cavity = _build(CavityGeometry, _section(values, "cavity"), values, "cavity", source)
    diode = _build(DiodeParams, _section(values, "diode"), values, "diode", source)
    odmr = _build(OdmrConfig, _section(values, "odmr"), values, "odmr", source)
    if odmr.linewidth is not None and not odmr.linewidth > 0:
        raise ConfigError("[odmr] linewidth must be > 0", source, values["odmr.linewidth"][1])
    noise_kw = _section(values, "noise")
    kinds = [k.strip() for k in noise_kw.pop("kinds", "optical_shot,current_shot").split(",") if k.strip()]
    noises = tuple(_build(NoiseModel, {"kind": k, **noise_kw}, values, "noise", source) for k in kinds)
    chain_kw = _section(values, "chain")
    scale = chain_kw.get("contrast_scale", 1.0)
    if not (math.isfinite(scale) and scale >= 0):
        raise ConfigError("[chain] contrast_scale must be finite and >= 0", source, values["chain.contrast_scale"][1])
    sc = _section(values, "scenario")
    return Scenario(
        name=sc.get("name", Path(source).stem),
        nv=nv,
        pump=pump,
        cavity=cavity,
        diode=diode,
        odmr=odmr,
        noises=noises,
        contrast_scale=scale,
        notes=sc.get("notes", ""),
        rates_file=rates_file,
    )


def parse_scenario(text: str, source: str = "<string>", base_dir: Path | None = None) -> Scenario:
    return scenario_from_values(parse_config_text(text, source), source, base_dir)


def preset_dir() -> Path | None:
    env = os.environ.get(PRESET_ENV)
    return Path(env) if env else None


def _preset_text(name: str) -> tuple[str, str, Path | None] | None:
    d = preset_dir()
    if d is not None:
        p = d / f"{name}.cfg"
        if p.is_file():
            return p.read_text(encoding="utf-8"), str(p), p.parent
    res = resources.files("threshmag").joinpath("data", "presets", f"{name}.cfg")
    if res.is_file():
        return res.read_text(encoding="utf-8"), f"preset:{name}", None
    return None


def list_presets() -> list[str]:
    names = set(PRESETS)
    d = preset_dir()
    if d is not None and d.is_dir():
        names.update(p.stem for p in d.glob("*.cfg"))
    return sorted(names)


def load_scenario(ref: str | os.PathLike) -> Scenario:
    """Load a preset by name, or a scenario file by path."""
    ref_s = os.fspath(ref)
    p = Path(ref_s)
    if p.suffix or os.sep in ref_s or p.exists():
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read scenario file: {exc.strerror}", ref_s) from None
        return parse_scenario(text, ref_s, p.parent)
    found = _preset_text(ref_s)
    if found is None:
        raise ConfigError(f"no preset named {ref_s!r}; known: {', '.join(list_presets())}", ref_s)
    text, source, base = found
    return parse_scenario(text, source, base)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def format_scenario(s: Scenario) -> str:
    """Serialise a scenario; parse_scenario(format_scenario(s)) == s."""
    lines = [f"scenario.name = {s.name}"]
    if s.notes:
        lines.append(f"scenario.notes = {s.notes}")
    lines += [
        f"nv.density_ppm = {_fmt(s.nv.density_ppm)}",
        f"nv.t2_star = {_fmt(s.nv.t2_star)}",
        f"nv.thickness = {_fmt(s.nv.thickness)}",
    ]
    if s.rates_file:
        lines.append(f"nv.rates_file = {s.rates_file}")
    for section, obj in (("pump", s.pump), ("cavity", s.cavity), ("diode", s.diode)):
        for f in fields(obj):
            if f.name == "microwaves_on":
                continue
            lines.append(f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}")
    for f in fields(s.odmr):
        if f.name == "frequency_grid":
            continue
        v = getattr(s.odmr, f.name)
        lines.append(f"odmr.{f.name} = {'auto' if v is None else _fmt(v)}")
    lines.append("noise.kinds = " + ",".join(n.kind for n in s.noises))
    if s.noises:
        lines.append(f"noise.bandwidth = {_fmt(s.noises[0].bandwidth)}")
        lines.append(f"noise.relative_level = {_fmt(s.noises[0].relative_level)}")
    lines.append(f"chain.contrast_scale = {_fmt(s.contrast_scale)}")
    return "\n".join(lines) + "\n"


def save_scenario(s: Scenario, path: str | os.PathLike) -> None:
    _atomic_write(Path(path), format_scenario(s))


# --------------------------------------------------------------------------
# emission


def _atomic_write(path: Path, data: str) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent if str(path.parent) else ".")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror}") from None
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise OutputError(f"cannot write {path}: {exc.strerror}") from None


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if v is None else str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def table_to_csv(rows: Iterable[Mapping[str, Any]], columns: list[str] | None = None) -> str:
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def spectrum_rows(spec: OdmrSpectrum) -> tuple[list[str], list[dict]]:
    cols = ["frequency_hz", "power_w"]
    return cols, [{"frequency_hz": f, "power_w": p} for f, p in zip(spec.frequencies, spec.powers)]


def contrast_map_rows(cmap: ContrastMap) -> tuple[list[str], list[dict]]:
    cols = ["rabi_hz", "intensity_w_m2", "contrast", "absorption", "triplet_ground", "nv0", "singlet"]
    rows = []
    for i, om in enumerate(cmap.rabi):
        for j, inten in enumerate(cmap.intensity):
            rows.append(
                {
                    "rabi_hz": om,
                    "intensity_w_m2": inten,
                    "contrast": cmap.contrast[i, j],
                    "absorption": cmap.absorption[i, j],
                    "triplet_ground": cmap.triplet_ground[i, j],
                    "nv0": cmap.nv0[i, j],
                    "singlet": cmap.singlet[i, j],
                }
            )
    return cols, rows


def feasibility_rows(fmap: FeasibilityMap) -> tuple[list[str], list[dict]]:
    cols = ["a_m2", "gamma", "I_th_A", "delta_I_th_A", "shot_noise_A", "region"]
    rows = []
    for i, a in enumerate(fmap.a):
        for j, g in enumerate(fmap.gamma):
            rows.append(
                {
                    "a_m2": a,
                    "gamma": g,
                    "I_th_A": fmap.I_th[i, j],
                    "delta_I_th_A": fmap.delta_I_th[i, j],
                    "shot_noise_A": fmap.shot_noise[i, j],
                    "region": fmap.labels[i, j],
                }
            )
    return cols, rows


def _as_table(obj) -> tuple[str, list[str] | None, list[dict], dict]:
    if isinstance(obj, OdmrSpectrum):
        cols, rows = spectrum_rows(obj)
        return "odmr_spectrum", cols, rows, dict(obj.metadata)
    if isinstance(obj, ContrastMap):
        cols, rows = contrast_map_rows(obj)
        return "contrast_map", cols, rows, {}
    if isinstance(obj, FeasibilityMap):
        cols, rows = feasibility_rows(obj)
        return "feasibility_map", cols, rows, {}
    if isinstance(obj, Mapping) and "rows" in obj:
        return obj.get("kind", "table"), obj.get("columns"), list(obj["rows"]), dict(obj.get("metadata", {}))
    rows = list(obj)
    return "table", None, rows, {}


def emit_results(obj, fmt: str, path: str | os.PathLike, scenario: Scenario | None = None, columns: list[str] | None = None) -> list[Path]:
    """Write a table, spectrum or map as CSV or JSON; returns the files written.

    A spectrum written as CSV also gets a ``<path>.meta.json`` sidecar with
    its metadata. Writes are atomic.
    """
    path = Path(path)
    kind, cols, rows, meta = _as_table(obj)
    cols = columns or cols or (list(rows[0]) if rows else [])
    digest = scenario.digest() if scenario is not None else None
    written = [path]
    if fmt == "csv":
        _atomic_write(path, table_to_csv(rows, cols))
        if kind == "odmr_spectrum":
            side = path.with_name(path.name + ".meta.json")
            _atomic_write(side, _json_doc(kind, {"metadata": meta}, digest))
            written.append(side)
    elif fmt == "json":
        body = {"columns": cols, "rows": [[r.get(c) for c in cols] for r in rows]}
        if meta:
            body["metadata"] = meta
        _atomic_write(path, _json_doc(kind, body, digest))
    else:
        raise ValueError(f"unknown format {fmt!r}; use csv or json")
    return written


def _json_doc(kind: str, body: dict, digest: str | None) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind, "scenario_hash": digest, **body}
    return json.dumps(_jsonable(doc), indent=1, sort_keys=True, allow_nan=False) + "\n"


def _parse_cell(s: str):
    if s == "":
        return math.nan
    if s in ("true", "false"):
        return s == "true"
    try:
        return float(s)
    except ValueError:
        return s


def read_csv_table(path: str | os.PathLike) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r, [])
        rows = [{c: _parse_cell(v) for c, v in zip(header, line)} for line in r]
    return header, rows


# --------------------------------------------------------------------------
# sweep checkpoints (JSON lines: one header, then one record per finished cell)


class CheckpointMismatch(ValueError):
    pass


class CheckpointFile:
    def __init__(self, path: str | os.PathLike, key: str):
        self.path = Path(path)
        self.key = key

    def load(self) -> dict[int, dict]:
        if not self.path.exists():
            with open(self.path, "w", encoding="utf-8") as fh:
                fh.write(json.dumps({"sweep_key": self.key}) + "\n")
            return {}
        done: dict[int, dict] = {}
        with open(self.path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        try:
            head = json.loads(lines[0])
        except (json.JSONDecodeError, IndexError):
            raise CheckpointMismatch(f"{self.path}: not a sweep checkpoint") from None
        if head.get("sweep_key") != self.key:
            raise CheckpointMismatch(f"{self.path}: checkpoint belongs to a different sweep")
        good = len(lines[0]) + 1
        for line in lines[1:]:
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                # torn final write: drop it so later appends start on a clean line
                with open(self.path, "r+", encoding="utf-8") as fh:
                    fh.truncate(good)
                break
            done[int(rec["index"])] = rec["row"]
            good += len(line) + 1
        return done

    def append(self, index: int, row: Mapping[str, Any]) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"index": index, "row": row}) + "\n")
            fh.flush()
