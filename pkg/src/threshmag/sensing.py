"""ODMR synthesis through the laser threshold, noise models and field sensitivity.

The chain is: diamond absorption on/off resonance -> distributed cavity loss
-> threshold current. Across the microwave line the diamond loss follows a
Lorentzian between its off- and on-resonance values; with the drive current
held at the off-resonance threshold the laser only emits near resonance.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .cavity import (
    CavityGeometry,
    distributed_diamond_loss,
    effective_reflectivity,
    mirror_loss,
)
from .constants import GAMMA_NV, Q_E, photon_energy
from .laser import (
    DiodeParams,
    output_coupling_efficiency,
    slope_efficiency,
    solve_steady_state,
    threshold_current,
)
from .nv_levels import DiamondResponse, NvSystem, PumpCondition, diamond_response

MAX_THRESHOLD_CURRENT = 0.3  # A, thermal limit for a small diode
DEFAULT_CENTER_FREQUENCY = 2.83e9  # Hz


class SensingError(ValueError):
    pass


@dataclass(frozen=True)
class Chain:
    """Everything needed to go from the diamond to the laser output."""

    nv: NvSystem
    pump: PumpCondition
    cavity: CavityGeometry
    diode: DiodeParams
    contrast_scale: float = 1.0  # multiplies the on/off absorption difference

    def with_(self, **changes) -> "Chain":
        return replace(self, **changes)

    def fingerprint(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ChainPoint:
    response: DiamondResponse
    R_e: float
    alpha_m: float
    alpha_e_off: float
    alpha_e_on: float
    I_th_off: float
    I_th_on: float
    eta_o_off: float
    eta_o_on: float
    alpha_c: float

    @property
    def alpha_t_off(self) -> float:
        return self.alpha_c + self.alpha_e_off + self.alpha_m

    @property
    def alpha_t_on(self) -> float:
        return self.alpha_c + self.alpha_e_on + self.alpha_m

    @property
    def delta_I_th(self) -> float:
        return self.I_th_off - self.I_th_on

    @property
    def contrast(self) -> float:
        return self.response.contrast


def evaluate_chain(chain: Chain, response: DiamondResponse | None = None) -> ChainPoint:
    """Threshold currents and losses on and off microwave resonance.

    ``response`` may be passed in to reuse a diamond solution across diode
    or cavity variations.
    """
    if response is None:
        response = diamond_response(chain.nv, chain.pump)
    geom = chain.cavity
    L = geom.length
    d = chain.nv.thickness
    a_off = response.alpha_off
    a_on = a_off + chain.contrast_scale * (response.alpha_on - a_off)
    ae_off = distributed_diamond_loss(a_off, d, L)
    ae_on = distributed_diamond_loss(max(a_on, 0.0), d, L)
    R_e = effective_reflectivity(geom)
    am = mirror_loss(geom, R_e)
    at_off = geom.alpha_c + ae_off + am
    at_on = geom.alpha_c + ae_on + am
    return ChainPoint(
        response=response,
        R_e=R_e,
        alpha_m=am,
        alpha_e_off=ae_off,
        alpha_e_on=ae_on,
        I_th_off=threshold_current(chain.diode, at_off),
        I_th_on=threshold_current(chain.diode, at_on),
        eta_o_off=output_coupling_efficiency(geom, ae_off, R_e=R_e),
        eta_o_on=output_coupling_efficiency(geom, ae_on, R_e=R_e),
        alpha_c=geom.alpha_c,
    )


# --------------------------------------------------------------------------
# ODMR spectra


@dataclass(frozen=True)
class OdmrConfig:
    center_frequency: float = DEFAULT_CENTER_FREQUENCY
    linewidth: float | None = None  # FWHM, Hz; default 1 / (pi T2*)
    drive_current: float | None = None  # A; default I_th off resonance
    frequency_grid: np.ndarray | None = None
    span_linewidths: float = 8.0
    n_points: int = 513

    def resolved_linewidth(self, nv: NvSystem) -> float:
        fl = self.linewidth if self.linewidth is not None else 1.0 / (math.pi * nv.t2_star)
        if not (fl > 0 and math.isfinite(fl)):
            raise SensingError("linewidth must be > 0")
        return fl

    def resolved_grid(self, nv: NvSystem) -> np.ndarray:
        fl = self.resolved_linewidth(nv)
        if self.frequency_grid is None:
            half = 0.5 * self.span_linewidths * fl
            grid = np.linspace(self.center_frequency - half, self.center_frequency + half, self.n_points)
        else:
            grid = np.asarray(self.frequency_grid, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise SensingError("frequency grid must be strictly increasing")
        if grid[-1] - grid[0] < 4 * fl:
            raise SensingError("frequency grid must span at least 4 linewidths")
        return grid


@dataclass(frozen=True)
class OdmrSpectrum:
    frequencies: np.ndarray
    powers: np.ndarray
    metadata: dict = field(default_factory=dict)


def lorentzian_weight(f, f0: float, fwhm: float):
    x = 2.0 * (np.asarray(f, dtype=float) - f0) / fwhm
    return 1.0 / (1.0 + x * x)


def _loss_profile(point: ChainPoint, w):
    w = np.asarray(w, dtype=float)
    alpha_e = point.alpha_e_off + w * (point.alpha_e_on - point.alpha_e_off)
    return alpha_e, point.alpha_c + alpha_e + point.alpha_m


def _eta_o(geom: CavityGeometry, R_e: float, alpha_e):
    num = math.log(1.0 / math.sqrt(geom.R1))
    den = math.log(1.0 / math.sqrt(geom.R1 * R_e)) + (np.asarray(alpha_e) + geom.alpha_c) * geom.length
    return num / den


def _power_at(chain: Chain, point: ChainPoint, w, current: float):
    alpha_e, alpha_t = _loss_profile(point, w)
    eta = _eta_o(chain.cavity, point.R_e, alpha_e)
    diode = chain.diode
    if diode.beta == 0.0 and diode.epsilon == 0.0:
        i_th = np.vectorize(lambda at: threshold_current(diode, float(at)))(alpha_t)
        return np.maximum(0.0, slope_efficiency(diode, 1.0) * eta * (current - i_th))
    flat_t = np.atleast_1d(alpha_t)
    flat_e = np.atleast_1d(eta)
    out = np.array(
        [solve_steady_state(diode, float(at), current, float(e)).P_out for at, e in zip(flat_t, flat_e)]
    )
    return out.reshape(np.shape(alpha_t))


def threshold_contrast_to_spectrum(chain: Chain, odmr: OdmrConfig | None = None, point: ChainPoint | None = None) -> OdmrSpectrum:
    """Laser output power versus microwave frequency at a fixed drive current."""
    odmr = odmr or OdmrConfig()
    point = point or evaluate_chain(chain)
    freqs = odmr.resolved_grid(chain.nv)
    fl = odmr.resolved_linewidth(chain.nv)
    current = point.I_th_off if odmr.drive_current is None else odmr.drive_current
    w = lorentzian_weight(freqs, odmr.center_frequency, fl)
    powers = _power_at(chain, point, w, current)
    meta = {
        "I_th_on": point.I_th_on,
        "I_th_off": point.I_th_off,
        "delta_I_th": point.delta_I_th,
        "contrast": point.contrast,
        "linewidth": fl,
        "center_frequency": odmr.center_frequency,
        "drive_current": current,
        "beta": chain.diode.beta,
        "params_hash": chain.fingerprint(),
    }
    return OdmrSpectrum(freqs, powers, meta)


def max_slope(spectrum: OdmrSpectrum) -> tuple[float, float]:
    """Largest |dP/df| (W/Hz) and the frequency where it occurs."""
    f = np.asarray(spectrum.frequencies, dtype=float)
    p = np.asarray(spectrum.powers, dtype=float)
    if f.size < 16:
        raise SensingError("need at least 16 spectrum points")
    slope = np.abs(np.gradient(p, f))
    k = int(np.argmax(slope))
    if not slope[k] > 0:
        raise SensingError("spectrum is flat: no slope to read out")
    return float(slope[k]), float(f[k])


def lorentzian_max_slope(amplitude: float, fwhm: float) -> float:
    """Peak |dL/df| of a Lorentzian, (3 sqrt 3 / 4) A / FWHM."""
    return 0.75 * math.sqrt(3.0) * amplitude / fwhm


def fwhm(spectrum: OdmrSpectrum) -> float:
    """Full width at half maximum of the (background-subtracted) peak."""
    f = np.asarray(spectrum.frequencies)
    p = np.asarray(spectrum.powers) - float(np.min(spectrum.powers))
    k = int(np.argmax(p))
    half = 0.5 * p[k]
    left = np.flatnonzero(p[:k] < half)
    right = np.flatnonzero(p[k:] < half)
    if left.size == 0 or right.size == 0:
        raise SensingError("peak is not resolved inside the grid")
    i = left[-1]
    j = k + right[0]
    fl = np.interp(half, [p[i], p[i + 1]], [f[i], f[i + 1]])
    fr = np.interp(half, [p[j], p[j - 1]], [f[j], f[j - 1]])
    return float(fr - fl)


# --------------------------------------------------------------------------
# Noise and sensitivity

NOISE_KINDS = ("optical_shot", "current_shot", "relative_current")


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "optical_shot"
    bandwidth: float = 1.0  # Hz
    relative_level: float = 1e-6  # only for relative_current

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise SensingError(f"unknown noise kind {self.kind!r}")
        if not self.bandwidth > 0:
            raise SensingError("bandwidth must be > 0")
        if self.relative_level < 0:
            raise SensingError("relative_level must be >= 0")


def current_shot_noise(current: float, bandwidth: float = 1.0) -> float:
    """sqrt(2 q I df), in A."""
    return math.sqrt(2.0 * Q_E * current * bandwidth)


def optical_shot_noise(power: float, wavelength: float, bandwidth: float = 1.0) -> float:
    """sqrt(2 h nu P df), in W."""
    return math.sqrt(2.0 * photon_energy(wavelength) * power * bandwidth)


@dataclass(frozen=True)
class SensitivityReport:
    sensitivity: float  # T / sqrt(Hz)
    noise: NoiseModel
    slope_max: float  # W/Hz
    slope_frequency: float  # Hz
    operating_power: float  # W at the max-slope point
    drive_current: float  # A
    current_slope: float  # dP/dI at the max-slope point, W/A
    noise_level: float  # W for optical, A for current routes
    I_th_off: float
    delta_I_th: float
    threshold_ok: bool
    shot_ok: bool

    @property
    def viable(self) -> bool:
        return self.threshold_ok and self.shot_ok


def feasibility_flags(I_th: float, delta_I_th: float, bandwidth: float = 1.0, max_current: float = MAX_THRESHOLD_CURRENT) -> tuple[bool, bool]:
    """(I_th within the ceiling, threshold shift above drive-current shot noise)."""
    return I_th <= max_current, delta_I_th >= current_shot_noise(I_th, bandwidth)


def _noise_to_field(noise: NoiseModel, slope: float, p_op: float, current: float, dp_di: float, wavelength: float):
    if slope <= 0:
        raise SensingError("zero ODMR slope: sensitivity undefined")
    if noise.kind == "optical_shot":
        sigma = optical_shot_noise(p_op, wavelength, noise.bandwidth)
        sigma_p = sigma
    else:
        if noise.kind == "current_shot":
            sigma = current_shot_noise(current, noise.bandwidth)
        else:
            sigma = noise.relative_level * current * math.sqrt(noise.bandwidth)
        sigma_p = sigma * dp_di
    return sigma_p / (slope * GAMMA_NV), sigma


def _current_slope(chain: Chain, point: ChainPoint, w: float, current: float) -> float:
    """dP/dI at the given line position."""
    diode = chain.diode
    alpha_e, alpha_t = _loss_profile(point, w)
    eta = float(_eta_o(chain.cavity, point.R_e, alpha_e))
    if diode.beta == 0.0 and diode.epsilon == 0.0:
        return slope_efficiency(diode, eta) if current > threshold_current(diode, float(alpha_t)) else 0.0
    h = max(current * 1e-6, 1e-12)
    p_hi = solve_steady_state(diode, float(alpha_t), current + h, eta).P_out
    p_lo = solve_steady_state(diode, float(alpha_t), max(current - h, 0.0), eta).P_out
    return (p_hi - p_lo) / (2 * h)


def sensitivity(spectrum: OdmrSpectrum, noise: NoiseModel, chain: Chain, point: ChainPoint | None = None) -> SensitivityReport:
    """Field sensitivity from a sampled spectrum: noise / (max slope * gamma_NV)."""
    point = point or evaluate_chain(chain)
    slope, f_star = max_slope(spectrum)
    p_op = float(np.interp(f_star, spectrum.frequencies, spectrum.powers))
    meta = spectrum.metadata
    current = meta.get("drive_current", point.I_th_off)
    w = float(lorentzian_weight(f_star, meta.get("center_frequency", DEFAULT_CENTER_FREQUENCY), meta["linewidth"]))
    dp_di = _current_slope(chain, point, w, current)
    db, sigma = _noise_to_field(noise, slope, p_op, current, dp_di, chain.diode.wavelength)
    t_ok, s_ok = feasibility_flags(point.I_th_off, point.delta_I_th, noise.bandwidth)
    return SensitivityReport(db, noise, slope, f_star, p_op, current, dp_di, sigma, point.I_th_off, point.delta_I_th, t_ok, s_ok)


def chain_sensitivity(chain: Chain, noise: NoiseModel, linewidth: float | None = None, point: ChainPoint | None = None, center: float = DEFAULT_CENTER_FREQUENCY) -> SensitivityReport:
    """Sensitivity with the slope maximised continuously along the line.

    Only for the beta = eps = 0 route, where the power is an explicit
    function of the Lorentzian weight; this is what the optimiser and the
    sweeps call since it has no grid-resolution noise.
    """
    diode = chain.diode
    if diode.beta != 0.0 or diode.epsilon != 0.0:
        odmr = OdmrConfig(center_frequency=center, linewidth=linewidth, n_points=2049)
        return sensitivity(threshold_contrast_to_spectrum(chain, odmr, point), noise, chain, point)
    point = point or evaluate_chain(chain)
    fl = linewidth if linewidth is not None else 1.0 / (math.pi * chain.nv.t2_star)
    current = point.I_th_off
    geom = chain.cavity
    delta = point.alpha_e_on - point.alpha_e_off
    A = math.log(1.0 / math.sqrt(geom.R1))
    B = math.log(1.0 / math.sqrt(geom.R1 * point.R_e)) + (point.alpha_e_off + geom.alpha_c) * geom.length
    s0 = slope_efficiency(diode, 1.0)

    def p_and_dpdw(w):
        at = point.alpha_t_off + w * delta
        ith = threshold_current(diode, at)
        if diode.gain_model == "linear":
            dith = Q_E * diode.V * delta / (diode.eta_i * diode.tau_N * diode.Gamma * diode.a)
        else:
            dith = ith * delta / (diode.Gamma * diode.a * diode.N_tr)
        den = B + w * delta * geom.length
        eta = A / den
        deta = -A * delta * geom.length / den**2
        if current <= ith:
            return 0.0, 0.0, eta
        return s0 * eta * (current - ith), s0 * (deta * (current - ith) - eta * dith), eta

    def neg_slope(u):
        w = 1.0 / (1.0 + u * u)
        dwdu = -2.0 * u * w * w
        return -abs(p_and_dpdw(w)[1] * dwdu * 2.0 / fl)

    res = minimize_scalar(neg_slope, bounds=(0.0, 4.0), method="bounded", options={"xatol": 1e-10})
    u_star = float(res.x)
    slope = -float(res.fun)
    w_star = 1.0 / (1.0 + u_star**2)
    p_op, _, eta = p_and_dpdw(w_star)
    dp_di = s0 * eta
    db, sigma = _noise_to_field(noise, slope, p_op, current, dp_di, diode.wavelength)
    t_ok, s_ok = feasibility_flags(point.I_th_off, point.delta_I_th, noise.bandwidth)
    return SensitivityReport(db, noise, slope, center + 0.5 * u_star * fl, p_op, current, dp_di, sigma, point.I_th_off, point.delta_I_th, t_ok, s_ok)


# --------------------------------------------------------------------------
# Feasibility regions


@dataclass(frozen=True)
class FeasibilityMap:
    a: np.ndarray
    gamma: np.ndarray
    labels: np.ndarray  # shape (len(a), len(gamma)), entries 'A', 'B', 'C'
    I_th: np.ndarray
    delta_I_th: np.ndarray
    shot_noise: np.ndarray

    def region(self, label: str) -> np.ndarray:
        return self.labels == label


def classify(I_th: float, delta_I_th: float, I_sh: float, max_current: float = MAX_THRESHOLD_CURRENT) -> str:
    """Region label: C if over the current ceiling, else A if under shot noise, else B."""
    if I_th > max_current:
        return "C"
    if delta_I_th < I_sh:
        return "A"
    return "B"


def feasibility_map(
    chain: Chain,
    a_grid: Sequence[float],
    gamma_grid: Sequence[float],
    bandwidth: float = 1.0,
    max_current: float = MAX_THRESHOLD_CURRENT,
    point: ChainPoint | None = None,
) -> FeasibilityMap:
    a_vals = np.asarray(a_grid, dtype=float)
    g_vals = np.asarray(gamma_grid, dtype=float)
    if a_vals.ndim != 1 or g_vals.ndim != 1 or a_vals.size == 0 or g_vals.size == 0:
        raise SensingError("grids must be non-empty 1-D sequences")
    if np.any(a_vals <= 0) or np.any(g_vals <= 0):
        raise SensingError("grids must be positive")
    point = point or evaluate_chain(chain)
    shape = (a_vals.size, g_vals.size)
    ith = np.empty(shape)
    dith = np.empty(shape)
    ish = np.empty(shape)
    labels = np.empty(shape, dtype="<U1")
    for i, a in enumerate(a_vals):
        for j, g in enumerate(g_vals):
            diode = chain.diode.with_(a=float(a), Gamma=float(g))
            off = threshold_current(diode, point.alpha_t_off)
            on = threshold_current(diode, point.alpha_t_on)
            ith[i, j] = off
            dith[i, j] = off - on
            ish[i, j] = current_shot_noise(off, bandwidth)
            labels[i, j] = classify(off, off - on, ish[i, j], max_current)
    return FeasibilityMap(a_vals, g_vals, labels, ith, dith, ish)


# --------------------------------------------------------------------------
# Spontaneous emission


@dataclass(frozen=True)
class BetaResult:
    beta: float
    currents: np.ndarray
    powers: np.ndarray
    spectrum: OdmrSpectrum
    report: SensitivityReport


def spontaneous_emission_study(
    chain: Chain,
    betas: Sequence[float],
    odmr: OdmrConfig | None = None,
    noise: NoiseModel | None = None,
    currents: Sequence[float] | None = None,
) -> list[BetaResult]:
    """P-I curves and optical-shot sensitivity for each spontaneous factor.

    All points come from the numeric steady state; the sub-threshold
    spontaneous background therefore enters the operating power and the shot
    noise.
    """
    noise = noise or NoiseModel("optical_shot")
    odmr = odmr or OdmrConfig()
    base = evaluate_chain(chain)
    if currents is None:
        currents = np.linspace(0.5, 1.5, 201) * base.I_th_off
    currents = np.asarray(currents, dtype=float)
    results = []
    for b in betas:
        if not 0.0 <= b <= 1.0:
            raise SensingError(f"beta must lie in [0, 1], got {b}")
        diode = chain.diode.with_(beta=float(b))
        c = chain.with_(diode=diode)
        point = evaluate_chain(c, base.response)
        powers = np.array(
            [solve_steady_state(diode, point.alpha_t_off, float(i), point.eta_o_off).P_out for i in currents]
        )
        spec = _numeric_spectrum(c, odmr, point)
        results.append(BetaResult(float(b), currents, powers, spec, sensitivity(spec, noise, c, point)))
    return results


def _numeric_spectrum(chain: Chain, odmr: OdmrConfig, point: ChainPoint) -> OdmrSpectrum:
    freqs = odmr.resolved_grid(chain.nv)
    fl = odmr.resolved_linewidth(chain.nv)
    current = point.I_th_off if odmr.drive_current is None else odmr.drive_current
    w = lorentzian_weight(freqs, odmr.center_frequency, fl)
    alpha_e, alpha_t = _loss_profile(point, w)
    eta = _eta_o(chain.cavity, point.R_e, alpha_e)
    powers = np.array(
        [solve_steady_state(chain.diode, float(at), current, float(e)).P_out for at, e in zip(alpha_t, eta)]
    )
    meta = {
        "I_th_on": point.I_th_on,
        "I_th_off": point.I_th_off,
        "delta_I_th": point.delta_I_th,
        "contrast": point.contrast,
        "linewidth": fl,
        "center_frequency": odmr.center_frequency,
        "drive_current": current,
        "beta": chain.diode.beta,
        "params_hash": chain.fingerprint(),
    }
    return OdmrSpectrum(freqs, powers, meta)
