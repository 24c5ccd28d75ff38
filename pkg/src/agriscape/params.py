"""Crop and economic parameter sets for the farm-level model.

Defaults reproduce the published parameter table: six crops with their own
margin/habitat service coefficients and prices, a 5% discount rate over 20
years, and per-hectare implementation and maintenance costs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

CROPS = ("Spring wheat", "Barley", "Canola/rapeseed", "Corn", "Oats", "Soybeans")
HABITATS = (
    "Broadleaf",
    "Coniferous",
    "Exposed land/barren",
    "Grassland",
    "Shrubland",
    "Water",
    "Wetland",
)


class ParameterError(ValueError):
    """Invalid or missing model parameter."""


@dataclass(frozen=True)
class CropParams:
    # margin services: strength, distance decay (1/m), time accumulation (1/yr)
    alpha: float
    beta: float
    gamma: float
    delta: float
    epsilon: float
    zeta: float
    # habitat (converted or existing) services
    alpha_h: float
    beta_h: float
    gamma_h: float
    delta_h: float
    epsilon_h: float
    zeta_h: float
    price: float  # USD / tonne

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ParameterError(f"{f.name} must be >= 0, got {getattr(self, f.name)}")
        if self.price <= 0:
            raise ParameterError("price must be > 0")

    def zero_services(self) -> "CropParams":
        return replace(self, alpha=0.0, delta=0.0, alpha_h=0.0, delta_h=0.0)


def _crop(margin, price, habitat=(0.05, 0.005, 0.2, 0.05, 0.005, 0.2)) -> CropParams:
    a, b, g, d, e, z = margin
    ah, bh, gh, dh, eh, zh = habitat
    return CropParams(a, b, g, d, e, z, ah, bh, gh, dh, eh, zh, price)


DEFAULT_CROPS: dict[str, CropParams] = {
    "Spring wheat": _crop((0.05, 0.01, 0.2, 0.05, 0.01, 0.2), 200.0),
    "Barley": _crop((0.05, 0.01, 0.2, 0.05, 0.01, 0.2), 120.0),
    "Canola/rapeseed": _crop((0.20, 0.01, 0.2, 0.10, 0.01, 0.2), 1100.0),
    "Corn": _crop((0.05, 0.01, 0.2, 0.05, 0.01, 0.2), 190.0),
    "Oats": _crop((0.05, 0.01, 0.2, 0.0, 0.01, 0.2), 95.0),
    "Soybeans": _crop((0.10, 0.01, 0.2, 0.10, 0.01, 0.2), 370.0),
}


@dataclass(frozen=True)
class EconomicParams:
    discount_rate: float = 0.05
    horizon: int = 20
    c_m_impl: float = 400.0
    c_h_impl: float = 300.0
    c_m_maint: float = 60.0
    c_h_maint: float = 70.0
    c_ag_maint: float = 100.0
    c_exist_hab: float = 0.0
    penalty: float = 1e3
    d_neib: float = 1000.0

    def __post_init__(self):
        if self.discount_rate <= 0:
            raise ParameterError("discount_rate must be > 0")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ParameterError("horizon must be an integer >= 1")
        for name in ("c_m_impl", "c_h_impl", "c_m_maint", "c_h_maint", "c_ag_maint",
                     "c_exist_hab", "penalty", "d_neib"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")

    @property
    def annuity(self) -> float:
        """Present value of 1 USD per year over the horizon."""
        return sum(self.discount_factors())

    def discount_factors(self) -> list[float]:
        return [(1.0 + self.discount_rate) ** -t for t in range(1, int(self.horizon) + 1)]


NEIGHBOR_SCOPES = ("configuration", "farm")


@dataclass(frozen=True)
class EIParams:
    crops: dict[str, CropParams] = field(default_factory=lambda: dict(DEFAULT_CROPS))
    economics: EconomicParams = field(default_factory=EconomicParams)
    # "farm" restricts neighbour sums to plots of the same farm
    neighbor_scope: str = "configuration"

    def __post_init__(self):
        if self.neighbor_scope not in NEIGHBOR_SCOPES:
            raise ParameterError(f"neighbor_scope must be one of {NEIGHBOR_SCOPES}")

    def crop(self, label: str) -> CropParams:
        try:
            return self.crops[label]
        except KeyError:
            raise ParameterError(f"no crop parameters for label {label!r}") from None

    def to_dict(self) -> dict:
        return {
            "crops": {name: asdict(c) for name, c in self.crops.items()},
            "economics": asdict(self.economics),
            "neighbor_scope": self.neighbor_scope,
        }

    @classmethod
    def from_dict(cls, data: dict | None) -> "EIParams":
        """Build from a (possibly partial) dict; missing keys keep defaults."""
        data = data or {}
        crops = dict(DEFAULT_CROPS)
        for name, block in (data.get("crops") or {}).items():
            base = asdict(crops[name]) if name in crops else {}
            base.update(block)
            try:
                crops[name] = CropParams(**base)
            except TypeError as exc:
                raise ParameterError(f"crop {name!r}: {exc}") from None
        try:
            econ = EconomicParams(**{**asdict(EconomicParams()), **(data.get("economics") or {})})
        except TypeError as exc:
            raise ParameterError(f"economics: {exc}") from None
        return cls(crops=crops, economics=econ,
                   neighbor_scope=data.get("neighbor_scope", "configuration"))


def load_params(path: str | Path) -> EIParams:
    with open(path, encoding="utf-8") as fh:
        return EIParams.from_dict(json.load(fh))
