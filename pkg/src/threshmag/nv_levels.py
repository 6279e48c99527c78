"""Eight-level NV-/NV0 rate model: occupancies, green absorption and contrast.

Level labels (1-based, as used in rate files):

    1  3A2 ms=0        2  3A2 ms=+-1
    3  3E  ms=0        4  3E  ms=+-1
    5  1A1 singlet     6  1E  singlet (shelving)
    7  NV0 ground      8  NV0 excited

Arrays returned by this module are 0-based, so level ``i`` lives at index
``i - 1``.

Rate matrices use the column convention ``dn/dt = M @ n``: entry ``M[j, i]``
is the rate from level ``i+1`` to level ``j+1`` and every column sums to zero.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np
from scipy.sparse.csgraph import connected_components

from .constants import PUMP_WAVELENGTH, photon_energy, ppm_to_density

N_LEVELS = 8

TRIPLET_GROUND = (0, 1)
TRIPLET_EXCITED = (2, 3)
SINGLET = (4, 5)
NV0 = (6, 7)

_RATE_KEY = re.compile(r"^rate\.([1-8])\.([1-8])$")
_SIGMA_NAMES = ("g", "g0", "e", "r")


class RateFileError(ValueError):
    pass


class DegenerateSteadyState(ValueError):
    """The rate graph has more than one closed class; no unique steady state."""

    def __init__(self, matrix: np.ndarray, classes: list[list[int]]):
        self.matrix = matrix
        self.classes = classes
        levels = [[i + 1 for i in c] for c in classes]
        super().__init__(
            f"rate graph is disconnected: closed level classes {levels} "
            f"in matrix\n{np.array2string(matrix, precision=3)}"
        )


@dataclass(frozen=True)
class RateConstantSet:
    """Spontaneous rates plus the optical cross sections of the model.

    ``rates`` maps ``(from_level, to_level)`` (1-based) to a rate in s^-1.
    Optical transitions are not listed there; they are built from the cross
    sections and the photon flux.
    """

    rates: Mapping[tuple[int, int], float]
    sigma_g: float
    sigma_g0: float
    sigma_e: float
    sigma_r: float
    recombination_ms0: float = 1.0 / 3.0
    provenance: str = "unnamed"

    def __post_init__(self):
        object.__setattr__(self, "rates", MappingProxyType(dict(sorted(self.rates.items()))))
        for (i, j), k in self.rates.items():
            if not (1 <= i <= N_LEVELS and 1 <= j <= N_LEVELS) or i == j:
                raise ValueError(f"invalid transition {i}->{j}")
            if not math.isfinite(k) or k < 0:
                raise ValueError(f"rate.{i}.{j} must be finite and >= 0, got {k}")
        for name in _SIGMA_NAMES:
            s = getattr(self, f"sigma_{name}")
            if not math.isfinite(s) or s <= 0:
                raise ValueError(f"sigma.{name} must be finite and > 0, got {s}")
        if not 0.0 <= self.recombination_ms0 <= 1.0:
            raise ValueError("branch.recombination_ms0 must lie in [0, 1]")

    def __hash__(self):
        return hash((tuple(self.rates.items()), self.sigma_g, self.sigma_g0, self.sigma_e, self.sigma_r, self.recombination_ms0, self.provenance))

    def rate(self, i: int, j: int) -> float:
        return float(self.rates.get((i, j), 0.0))

    def scaled(self, **changes) -> "RateConstantSet":
        """Copy with some fields replaced (handy for sensitivity studies)."""
        data = dict(
            rates=dict(self.rates),
            sigma_g=self.sigma_g,
            sigma_g0=self.sigma_g0,
            sigma_e=self.sigma_e,
            sigma_r=self.sigma_r,
            recombination_ms0=self.recombination_ms0,
            provenance=self.provenance,
        )
        data.update(changes)
        return RateConstantSet(**data)


def parse_rate_text(text: str, source: str = "<string>") -> RateConstantSet:
    rates: dict[tuple[int, int], float] = {}
    sigmas: dict[str, float] = {}
    branch = 1.0 / 3.0
    name = source
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RateFileError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "name":
            name = value
            continue
        try:
            number = float(value)
        except ValueError:
            raise RateFileError(f"{source}:{lineno}: bad number {value!r}") from None
        m = _RATE_KEY.match(key)
        if m:
            rates[(int(m.group(1)), int(m.group(2)))] = number
        elif key.startswith("sigma.") and key[6:] in _SIGMA_NAMES:
            sigmas[key[6:]] = number
        elif key == "branch.recombination_ms0":
            branch = number
        else:
            raise RateFileError(f"{source}:{lineno}: unknown key {key!r}")
    missing = [f"sigma.{n}" for n in _SIGMA_NAMES if n not in sigmas]
    if missing:
        raise RateFileError(f"{source}: missing {', '.join(missing)}")
    try:
        return RateConstantSet(
            rates=rates,
            sigma_g=sigmas["g"],
            sigma_g0=sigmas["g0"],
            sigma_e=sigmas["e"],
            sigma_r=sigmas["r"],
            recombination_ms0=branch,
            provenance=name,
        )
    except ValueError as exc:
        raise RateFileError(f"{source}: {exc}") from None


def load_rate_file(path: str | Path) -> RateConstantSet:
    path = Path(path)
    return parse_rate_text(path.read_text(), source=str(path))


def format_rate_set(rates: RateConstantSet) -> str:
    lines = [f"name = {rates.provenance}"]
    for (i, j) in sorted(rates.rates):
        lines.append(f"rate.{i}.{j} = {rates.rates[(i, j)]!r}")
    for n in _SIGMA_NAMES:
        lines.append(f"sigma.{n} = {getattr(rates, 'sigma_' + n)!r}")
    lines.append(f"branch.recombination_ms0 = {rates.recombination_ms0!r}")
    return "\n".join(lines) + "\n"


_DEFAULT: RateConstantSet | None = None


def default_rates() -> RateConstantSet:
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("threshmag").joinpath("data/default_rates.txt").read_text()
        _DEFAULT = parse_rate_text(text, source="default_rates.txt")
    return _DEFAULT


def incoherent_mixing_rate(rabi_frequency: float, t2_star: float) -> float:
    """Rate-equation limit of a resonant drive: k = Omega_R^2 T2* / 2."""
    return 0.5 * rabi_frequency**2 * t2_star


@dataclass(frozen=True)
class NvSystem:
    density_ppm: float
    t2_star: float
    thickness: float
    rates: RateConstantSet = field(default_factory=default_rates)

    def __post_init__(self):
        for name in ("density_ppm", "t2_star", "thickness"):
            v = getattr(self, name)
            if not math.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be finite and > 0, got {v}")

    @property
    def density(self) -> float:
        """NV- number density in m^-3."""
        return ppm_to_density(self.density_ppm)


@dataclass(frozen=True)
class PumpCondition:
    intensity: float  # W/m^2 at the diamond
    rabi_frequency: float  # Hz
    microwaves_on: bool = False
    wavelength: float = PUMP_WAVELENGTH

    def __post_init__(self):
        for name in ("intensity", "rabi_frequency"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not math.isfinite(self.wavelength) or self.wavelength <= 0:
            raise ValueError("wavelength must be > 0")

    @property
    def photon_flux(self) -> float:
        """Photons per m^2 per s."""
        return self.intensity / photon_energy(self.wavelength)

    def with_microwaves(self, on: bool) -> "PumpCondition":
        return PumpCondition(self.intensity, self.rabi_frequency, on, self.wavelength)


MixingRate = Callable[[float, float], float]


def build_rate_matrix(
    sys: NvSystem, pump: PumpCondition, mixing: MixingRate = incoherent_mixing_rate
) -> np.ndarray:
    """Assemble the 8x8 generator for the given pump and drive."""
    rs = sys.rates
    phi = pump.photon_flux
    k = np.zeros((N_LEVELS, N_LEVELS))  # k[i, j]: rate from i to j (0-based)
    for (i, j), r in rs.rates.items():
        k[i - 1, j - 1] += r
    pump_g = rs.sigma_g * phi
    k[0, 2] += pump_g
    k[1, 3] += pump_g
    k[6, 7] += rs.sigma_g0 * phi
    ion = rs.sigma_e * phi
    k[2, 6] += ion
    k[3, 6] += ion
    rec = rs.sigma_r * phi
    k[7, 0] += rec * rs.recombination_ms0
    k[7, 1] += rec * (1.0 - rs.recombination_ms0)
    if pump.microwaves_on:
        kmw = mixing(pump.rabi_frequency, sys.t2_star)
        if not math.isfinite(kmw) or kmw < 0:
            raise ValueError(f"mixing rate must be finite and >= 0, got {kmw}")
        k[0, 1] += kmw
        k[1, 0] += kmw
    if not np.all(np.isfinite(k)):
        raise ValueError("non-finite entry in rate matrix")
    m = k.T.copy()
    np.fill_diagonal(m, 0.0)
    m -= np.diag(m.sum(axis=0))
    return m


def _closed_classes(m: np.ndarray) -> list[list[int]]:
    adj = (m > 0).astype(int)
    np.fill_diagonal(adj, 0)
    # adj[j, i] > 0 means an edge i -> j; csgraph wants adj[i, j] for i -> j
    n_comp, labels = connected_components(adj.T, directed=True, connection="strong")
    classes = []
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        outside = np.setdiff1d(np.arange(m.shape[0]), members)
        leaks = adj[np.ix_(outside, members)].any() if outside.size else False
        if not leaks:
            classes.append(members.tolist())
    return classes


def _gth(rates: np.ndarray) -> np.ndarray:
    """Stationary vector of an irreducible chain by GTH state reduction.

    ``rates[i, j]`` is the rate from i to j; the diagonal is ignored. Only
    additions of non-negative numbers occur, so tiny rates keep full relative
    precision even next to very fast ones.
    """
    p = np.array(rates, dtype=float)
    np.fill_diagonal(p, 0.0)
    n = p.shape[0]
    for k in range(n - 1, 0, -1):
        s = p[k, :k].sum()
        p[:k, k] /= s
        p[:k, :k] += np.outer(p[:k, k], p[k, :k])
        np.fill_diagonal(p, 0.0)
    pi = np.zeros(n)
    pi[0] = 1.0
    for j in range(1, n):
        pi[j] = pi[:j] @ p[:j, j]
    return pi / pi.sum()


def solve_occupancies(matrix: np.ndarray, initial: np.ndarray | None = None) -> np.ndarray:
    """Normalized steady state of ``dn/dt = matrix @ n``.

    With several closed classes the steady state depends on where the
    population starts; that raises :class:`DegenerateSteadyState` unless an
    ``initial`` distribution is supplied, in which case the long-time limit
    from that start is returned.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("rate matrix must be square")
    if not np.all(np.isfinite(m)):
        raise ValueError("rate matrix has non-finite entries")
    n = m.shape[0]
    rates = m.T.copy()
    np.fill_diagonal(rates, 0.0)
    if np.any(rates < 0):
        raise ValueError("negative off-diagonal rate")
    classes = _closed_classes(m)
    if len(classes) > 1 and initial is None:
        raise DegenerateSteadyState(m, classes)

    occ = np.zeros(n)
    if len(classes) == 1:
        members = classes[0]
        occ[members] = _gth(rates[np.ix_(members, members)])
    else:
        init = np.asarray(initial, dtype=float)
        init = init / init.sum()
        recurrent = sorted(i for c in classes for i in c)
        transient = [i for i in range(n) if i not in recurrent]
        q = rates - np.diag(rates.sum(axis=1))
        absorb = np.zeros((n, len(classes)))
        if transient:
            qtt = q[np.ix_(transient, transient)]
            into = np.column_stack([q[np.ix_(transient, c)].sum(axis=1) for c in classes])
            absorb[transient] = np.linalg.solve(-qtt, into)
        for ci, c in enumerate(classes):
            absorb[c, ci] = 1.0
        mass = init @ absorb
        for ci, c in enumerate(classes):
            occ[c] += mass[ci] * _gth(rates[np.ix_(c, c)])
    occ = np.clip(occ, 0.0, 1.0)
    return occ / occ.sum()


def number_densities(
    sys: NvSystem, occ_on: np.ndarray, occ_off: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-level densities (m^-3) with and without resonant microwaves.

    Only one of the four NV orientations is driven, so the on-resonance
    ensemble is a 1:3 mix of driven and undriven centres.
    """
    n_on = np.asarray(occ_on, dtype=float)
    n_off = np.asarray(occ_off, dtype=float)
    for occ in (n_on, n_off):
        if occ.shape != (N_LEVELS,) or np.any(occ < 0) or not np.all(np.isfinite(occ)):
            raise ValueError("occupancies must be 8 finite non-negative numbers")
    total = sys.density
    dens_off = total * n_off / n_off.sum()
    dens_on = 0.25 * total * n_on / n_on.sum() + 0.75 * dens_off
    return dens_on, dens_off


def absorption_coefficient(sys: NvSystem, densities: np.ndarray) -> float:
    """Green absorption coefficient alpha (m^-1) for per-level densities."""
    rs = sys.rates
    n = np.asarray(densities, dtype=float)
    return float(
        rs.sigma_g * (n[0] + n[1])
        + rs.sigma_g0 * n[6]
        + rs.sigma_e * (n[2] + n[3])
        + rs.sigma_r * n[7]
    )


def single_pass_transmission(sys: NvSystem, alpha: float) -> float:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return math.exp(-alpha * sys.thickness)


@dataclass(frozen=True)
class DiamondResponse:
    occ_on: np.ndarray
    occ_off: np.ndarray
    alpha_on: float
    alpha_off: float
    transmission_on: float
    transmission_off: float

    @property
    def contrast(self) -> float:
        """Transmission gain on resonance, T_on - T_off (>= 0 here)."""
        return self.transmission_on - self.transmission_off

    @property
    def absorption(self) -> float:
        """Off-resonance single-pass absorbed fraction."""
        return 1.0 - self.transmission_off


def diamond_response(
    sys: NvSystem, pump: PumpCondition, mixing: MixingRate = incoherent_mixing_rate
) -> DiamondResponse:
    occ_off = solve_occupancies(build_rate_matrix(sys, pump.with_microwaves(False), mixing))
    if pump.rabi_frequency == 0:
        occ_on = occ_off
    else:
        occ_on = solve_occupancies(build_rate_matrix(sys, pump.with_microwaves(True), mixing))
    dens_on, dens_off = number_densities(sys, occ_on, occ_off)
    a_on = absorption_coefficient(sys, dens_on)
    a_off = absorption_coefficient(sys, dens_off)
    return DiamondResponse(
        occ_on,
        occ_off,
        a_on,
        a_off,
        single_pass_transmission(sys, a_on),
        single_pass_transmission(sys, a_off),
    )


def absorption_contrast(
    sys: NvSystem, pump: PumpCondition, mixing: MixingRate = incoherent_mixing_rate
) -> float:
    """Absorption contrast C = T_on - T_off for a single pass.

    Resonant microwaves lower the green absorption, so C is positive; it is
    the magnitude of the difference of the two fractional transmissions.
    """
    return diamond_response(sys, pump, mixing).contrast


@dataclass(frozen=True)
class ContrastMap:
    rabi: np.ndarray
    intensity: np.ndarray
    contrast: np.ndarray  # shape (len(rabi), len(intensity))
    triplet_ground: np.ndarray  # driven-axis occupancy of levels 1+2
    nv0: np.ndarray  # levels 7+8
    singlet: np.ndarray  # levels 5+6
    absorption: np.ndarray  # off-resonance single-pass absorption


class GridCellError(RuntimeError):
    def __init__(self, rabi: float, intensity: float, cause: Exception):
        self.rabi = rabi
        self.intensity = intensity
        super().__init__(f"cell (rabi={rabi:g} Hz, intensity={intensity:g} W/m^2): {cause}")


def _check_grid(values, name: str) -> np.ndarray:
    g = np.asarray(values, dtype=float)
    if g.ndim != 1 or g.size == 0:
        raise ValueError(f"{name} grid must be a non-empty 1-D sequence")
    if np.any(g <= 0) or np.any(np.diff(g) <= 0):
        raise ValueError(f"{name} grid must be positive and strictly increasing")
    return g


def contrast_map(
    sys: NvSystem,
    rabi_grid,
    intensity_grid,
    mixing: MixingRate = incoherent_mixing_rate,
) -> ContrastMap:
    rabi = _check_grid(rabi_grid, "rabi")
    inten = _check_grid(intensity_grid, "intensity")
    shape = (rabi.size, inten.size)
    out = {k: np.empty(shape) for k in ("c", "tg", "nv0", "s", "abs")}
    # off-resonance occupancies do not depend on the Rabi frequency
    off_cache = {}
    for j, i_w in enumerate(inten):
        try:
            off_cache[j] = solve_occupancies(
                build_rate_matrix(sys, PumpCondition(i_w, 0.0, False), mixing)
            )
        except Exception as exc:  # noqa: BLE001 - re-raised with coordinates
            raise GridCellError(float(rabi[0]), float(i_w), exc) from exc
    for r, omega in enumerate(rabi):
        for j, i_w in enumerate(inten):
            try:
                occ_off = off_cache[j]
                occ_on = solve_occupancies(
                    build_rate_matrix(sys, PumpCondition(i_w, omega, True), mixing)
                )
                d_on, d_off = number_densities(sys, occ_on, occ_off)
                t_on = single_pass_transmission(sys, absorption_coefficient(sys, d_on))
                t_off = single_pass_transmission(sys, absorption_coefficient(sys, d_off))
            except Exception as exc:  # noqa: BLE001
                raise GridCellError(float(omega), float(i_w), exc) from exc
            out["c"][r, j] = t_on - t_off
            out["tg"][r, j] = occ_on[0] + occ_on[1]
            out["nv0"][r, j] = occ_on[6] + occ_on[7]
            out["s"][r, j] = occ_on[4] + occ_on[5]
            out["abs"][r, j] = 1.0 - t_off
    return ContrastMap(rabi, inten, out["c"], out["tg"], out["nv0"], out["s"], out["abs"])
