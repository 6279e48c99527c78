"""Three-mirror external cavity reduced to a single equivalent cavity.

The diode (length ``L_m``, facets R1 and R2) plus the external arm (length
``L_r``, end mirror R3) is treated as one cavity of length ``L = L_m + L_r``
whose second mirror has an effective reflectivity ``R_e``. Diamond absorption
is spread over the whole length as a distributed loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class CavityGeometry:
    L_m: float = 100e-6  # diode length, m
    L_r: float = 10e-3  # external arm length, m
    R1: float = 0.9
    R2: float = 0.2178  # Fresnel InGaN/air at n = 2.75
    R3: float = 0.99
    alpha_c: float = 0.0  # intrinsic loss, m^-1
    external_transmission: float = 1.0  # one-way power transmission of the arm
    reflectivity_model: str = "single_bounce"

    def __post_init__(self):
        for name in ("R1", "R2", "R3"):
            r = getattr(self, name)
            if not (0.0 < r <= 1.0):
                raise ValueError(f"{name} must lie in (0, 1], got {r}")
        if not (self.L_m > 0 and self.L_r > 0):
            raise ValueError("cavity lengths must be > 0")
        if not (self.alpha_c >= 0 and math.isfinite(self.alpha_c)):
            raise ValueError("alpha_c must be finite and >= 0")
        if not (0.0 < self.external_transmission <= 1.0):
            raise ValueError("external_transmission must lie in (0, 1]")
        if self.reflectivity_model not in REFLECTIVITY_MODELS:
            raise ValueError(f"unknown reflectivity_model {self.reflectivity_model!r}")

    @property
    def length(self) -> float:
        return self.L_m + self.L_r

    def with_(self, **changes) -> "CavityGeometry":
        return replace(self, **changes)


def fresnel_facet_reflectivity(n_medium: float) -> float:
    """Normal-incidence power reflectivity of a medium/air facet."""
    if n_medium < 1:
        raise ValueError("refractive index must be >= 1")
    return ((n_medium - 1.0) / (n_medium + 1.0)) ** 2


def _single_bounce(r2: float, r3: float, R2: float, t_rt: float) -> float:
    return r2 + (1.0 - R2) * t_rt * r3


def _multi_bounce(r2: float, r3: float, R2: float, t_rt: float) -> float:
    # in-phase sum of all external round trips (lossless facet: t^2 = 1 - R2)
    return (r2 + t_rt * r3) / (1.0 + r2 * t_rt * r3)


REFLECTIVITY_MODELS = {"single_bounce": _single_bounce, "multi_bounce": _multi_bounce}


def effective_reflectivity(geom: CavityGeometry, external_transmission: float | None = None) -> float:
    """Phase-neglected effective reflectivity replacing facet R2.

    ``external_transmission`` is the one-way power transmission of the
    external arm excluding the diamond; the round trip therefore scales the
    fed-back field by that same number. The single-bounce form is clamped to
    1 where strong feedback would otherwise exceed it.
    """
    t = geom.external_transmission if external_transmission is None else external_transmission
    if not (0.0 < t <= 1.0):
        raise ValueError("external_transmission must lie in (0, 1]")
    r2 = math.sqrt(geom.R2)
    r3 = math.sqrt(geom.R3)
    r_e = REFLECTIVITY_MODELS[geom.reflectivity_model](r2, r3, geom.R2, t)
    return min(r_e * r_e, 1.0)


def distributed_diamond_loss(alpha_d: float, d: float, L: float) -> float:
    """Diamond absorption spread evenly over the composite cavity length."""
    if alpha_d < 0 or d <= 0 or L <= 0:
        raise ValueError("alpha_d must be >= 0 and d, L > 0")
    return alpha_d * d / L


def mirror_loss(geom: CavityGeometry, R_e: float | None = None) -> float:
    """ln(1/sqrt(R1 R_e)) / L, in m^-1."""
    if R_e is None:
        R_e = effective_reflectivity(geom)
    prod = geom.R1 * R_e
    if not (0.0 < prod <= 1.0):
        raise ValueError("R1 * R_e must lie in (0, 1]")
    return math.log(1.0 / math.sqrt(prod)) / geom.length


def total_cavity_loss(geom: CavityGeometry, alpha_e: float, R_e: float | None = None) -> float:
    """alpha_t = alpha_c + alpha_e + ln(1/sqrt(R1 R_e)) / L."""
    return geom.alpha_c + alpha_e + mirror_loss(geom, R_e)


def round_trip_gain_product(geom: CavityGeometry, modal_gain: float, alpha_e: float, R_e: float | None = None) -> float:
    """R1 R_e exp((Gamma g - alpha_c - alpha_e) 2L); equals 1 at threshold.

    Only the internal losses enter the exponent; the mirrors appear through
    R1 R_e, so with Gamma g = alpha_t the product is exactly one.
    """
    if R_e is None:
        R_e = effective_reflectivity(geom)
    internal = geom.alpha_c + alpha_e
    return geom.R1 * R_e * math.exp((modal_gain - internal) * 2.0 * geom.length)
