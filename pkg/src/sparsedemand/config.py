"""Run and scenario configuration: a flat key-value text format.

Files hold one ``dotted.key = value`` pair per line; ``#`` starts a comment.
Prior overrides use the entry syntax ``normal(mean, variance)``,
``gamma(shape, rate)`` or ``1+gamma(shape, rate)``. The only environment
variable with meaning is ``SPARSEDEMAND_QUIET`` (any non-empty value silences
progress output).
"""

from __future__ import annotations

import datetime as dt
import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

from sparsedemand.covariates import SeasonalConfig
from sparsedemand.excitation import DEFAULT_TRUNCATION
from sparsedemand.inference import SamplerConfig
from sparsedemand.model import (
    HierarchyParams,
    PriorEntry,
    PriorSpec,
    ProductParams,
    ShotParams,
    default_prior_spec,
    variant_structure,
)


class ConfigError(ValueError):
    pass


def quiet() -> bool:
    return bool(os.environ.get("SPARSEDEMAND_QUIET", ""))


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def format_kv(items: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def read_kv(path) -> dict[str, str]:
    with open(path) as fh:
        return parse_kv(fh.read())


_PRIOR_RE = re.compile(
    r"^\s*(?:(?P<shift>1)\s*\+\s*)?(?P<family>normal|gamma)\s*\(\s*"
    r"(?P<a>[-+0-9.eE]+)\s*,\s*(?P<b>[-+0-9.eE]+)\s*\)\s*$"
)


def parse_prior_entry(text: str) -> PriorEntry:
    m = _PRIOR_RE.match(text)
    if not m:
        raise ConfigError(
            f"bad prior expression {text!r}; use normal(m, v), gamma(a, b) or 1+gamma(a, b)"
        )
    shift = 1.0 if m.group("shift") else 0.0
    if m.group("family") == "normal" and shift:
        raise ConfigError("shifted priors are only supported for gamma")
    return PriorEntry(m.group("family"), float(m.group("a")), float(m.group("b")), shift)


def format_prior_entry(e: PriorEntry) -> str:
    prefix = "1+" if e.shift else ""
    return f"{prefix}{e.family}({e.a:g}, {e.b:g})"


def _date(value: str, key: str) -> dt.date:
    try:
        return dt.date.fromisoformat(value)
    except ValueError:
        raise ConfigError(f"{key}: malformed date {value!r}") from None


def _floats(value: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in value.split(",")])
    except ValueError:
        raise ConfigError(f"bad number list {value!r}") from None


@dataclass
class RunConfig:
    """Everything a fit/predict/evaluate run needs besides the data file."""

    zero_variant: str = "hbec"
    count_variant: str = "hbe"
    phi: float = 1.0
    truncation: int = DEFAULT_TRUNCATION
    count_mean_map: str = "shifted"
    split_date: dt.date | None = None
    seasonal: SeasonalConfig = field(default_factory=SeasonalConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    prior_overrides: dict[str, str] = field(default_factory=dict)

    def prior_spec(self, process: str) -> PriorSpec:
        variant = self.zero_variant if process == "zero" else self.count_variant
        spec = default_prior_spec(process, variant)
        prefix = f"prior.{process}."
        for key, value in self.prior_overrides.items():
            if key.startswith(prefix):
                spec = _apply_prior_override(spec, key[len(prefix) :], value)
        return spec

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "RunConfig":
        cfg = cls()
        sampler = {}
        seasonal = {}
        for key, value in kv.items():
            if key == "model.zero_variant":
                variant_structure("zero", value)
                cfg.zero_variant = value.lower()
            elif key == "model.count_variant":
                variant_structure("count", value)
                cfg.count_variant = value.lower()
            elif key == "model.phi":
                cfg.phi = float(value)
            elif key == "model.truncation":
                cfg.truncation = int(value)
            elif key == "model.count_mean_map":
                if value not in ("shifted", "exp"):
                    raise ConfigError("model.count_mean_map must be shifted or exp")
                cfg.count_mean_map = value
            elif key == "split.date":
                cfg.split_date = _date(value, key)
            elif key == "seasonal.christmas_start":
                seasonal["christmas_start"] = _month_day(value, key)
            elif key == "seasonal.christmas_end":
                seasonal["christmas_end"] = _month_day(value, key)
            elif key == "seasonal.weekday_baseline":
                seasonal["weekday_baseline"] = int(value)
            elif key == "seasonal.month_baseline":
                seasonal["month_baseline"] = int(value)
            elif key == "sampler.chains":
                sampler["chains"] = int(value)
            elif key == "sampler.warmup":
                sampler["warmup_iters"] = int(value)
            elif key == "sampler.samples":
                sampler["sampling_iters"] = int(value)
            elif key == "sampler.leapfrog_steps":
                sampler["leapfrog_steps"] = int(value)
            elif key == "sampler.target_acceptance":
                sampler["target_acceptance"] = float(value)
            elif key == "sampler.seed":
                sampler["seed"] = int(value)
            elif key.startswith("prior."):
                cfg.prior_overrides[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        if seasonal:
            cfg.seasonal = SeasonalConfig(**seasonal)
        if sampler:
            cfg.sampler = SamplerConfig(**sampler)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_kv(read_kv(path))

    def to_kv(self) -> dict[str, str]:
        items = {
            "model.zero_variant": self.zero_variant,
            "model.count_variant": self.count_variant,
            "model.phi": format(self.phi, "g"),
            "model.truncation": str(self.truncation),
            "model.count_mean_map": self.count_mean_map,
            "seasonal.christmas_start": "%02d-%02d" % self.seasonal.christmas_start,
            "seasonal.christmas_end": "%02d-%02d" % self.seasonal.christmas_end,
            "seasonal.weekday_baseline": str(self.seasonal.weekday_baseline),
            "seasonal.month_baseline": str(self.seasonal.month_baseline),
            "sampler.chains": str(self.sampler.chains),
            "sampler.warmup": str(self.sampler.warmup_iters),
            "sampler.samples": str(self.sampler.sampling_iters),
            "sampler.leapfrog_steps": str(self.sampler.leapfrog_steps),
            "sampler.target_acceptance": format(self.sampler.target_acceptance, "g"),
            "sampler.seed": str(self.sampler.seed),
        }
        if self.split_date is not None:
            items["split.date"] = self.split_date.isoformat()
        items.update(self.prior_overrides)
        return items

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(format_kv(self.to_kv()))


def _month_day(value: str, key: str) -> tuple[int, int]:
    m = re.match(r"^(\d{1,2})-(\d{1,2})$", value.strip())
    if not m:
        raise ConfigError(f"{key}: expected MM-DD, got {value!r}")
    return int(m.group(1)), int(m.group(2))


_INDEXED = re.compile(r"^(?P<base>[a-z_]+)\[(?P<idx>\d+)\]$")


def _replace_tuple(entries, idx, entry, what):
    if entries is None:
        raise ConfigError(f"{what}: not a free prior block for this variant")
    if not 1 <= idx <= len(entries):
        raise ConfigError(f"{what}: index out of range 1..{len(entries)}")
    out = list(entries)
    out[idx - 1] = entry
    return tuple(out)


def _apply_prior_override(spec: PriorSpec, key: str, value: str) -> PriorSpec:
    m = _INDEXED.match(key)
    base, idx = (m.group("base"), int(m.group("idx"))) if m else (key, None)
    scalar_shot = {"kappa": 1, "mu": 2, "tau": 3}
    what = f"prior.{spec.process}.{key}"
    if base == "sigma2":
        if spec.theta_sigma2 is None:
            raise ConfigError(f"{what}: variant has no hierarchical theta scale")
        return spec.override(theta_sigma2=float(value))
    if base == "nu":
        if spec.shot_self_nu is None:
            raise ConfigError(f"{what}: variant has no hierarchical shot rates")
        rates = list(spec.shot_self_nu)
        rates[_index3(idx, what) - 1] = float(value)
        return spec.override(shot_self_nu=tuple(rates))
    if base == "cross_nu":
        if spec.shot_cross_nu is None:
            raise ConfigError(f"{what}: variant has no cross-shot rates")
        rates = list(spec.shot_cross_nu)
        rates[_index3(idx, what) - 1] = float(value)
        return spec.override(shot_cross_nu=tuple(rates))
    entry = parse_prior_entry(value)
    if base == "theta":
        return spec.override(theta=_replace_tuple(spec.theta, _idx(idx, what), entry, what))
    if base == "rho":
        return spec.override(rho=_replace_tuple(spec.rho, _idx(idx, what), entry, what))
    if base == "eta":
        return spec.override(eta_self=_replace_tuple(spec.eta_self, _index3(idx, what), entry, what))
    if base == "cross_eta":
        return spec.override(eta_cross=_replace_tuple(spec.eta_cross, _index3(idx, what), entry, what))
    if base in scalar_shot:
        return spec.override(
            shot_self=_replace_tuple(spec.shot_self, scalar_shot[base], entry, what)
        )
    if base.startswith("cross_") and base[6:] in scalar_shot:
        return spec.override(
            shot_cross=_replace_tuple(spec.shot_cross, scalar_shot[base[6:]], entry, what)
        )
    raise ConfigError(f"{what}: unknown prior key")


def _idx(idx, what):
    if idx is None:
        raise ConfigError(f"{what}: needs an index like theta[1]")
    return idx


def _index3(idx, what):
    i = _idx(idx, what)
    if not 1 <= i <= 3:
        raise ConfigError(f"{what}: index must be 1..3")
    return i


# ---------------------------------------------------------------------------
# Scenario files for the simulate command


@dataclass
class ScenarioConfig:
    products: list[str]
    brands: dict[str, str]
    start_date: dt.date
    horizon: int
    zero_variant: str
    count_variant: str
    mode: str  # "explicit" | "hierarchical"
    prices: np.ndarray
    seed: int = 0
    phi: float = 1.0
    truncation: int = DEFAULT_TRUNCATION
    product_params: list[ProductParams] | None = None
    hierarchy_zero: HierarchyParams | None = None
    hierarchy_count: HierarchyParams | None = None

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        return _parse_scenario(read_kv(path))


def _parse_scenario(kv: dict[str, str]) -> ScenarioConfig:
    def need(key):
        if key not in kv:
            raise ConfigError(f"scenario missing key {key!r}")
        return kv[key]

    entries = [p.strip() for p in need("scenario.products").split(",") if p.strip()]
    products, brands = [], {}
    for item in entries:
        if ":" not in item:
            raise ConfigError(f"scenario.products entries look like ID:BRAND, got {item!r}")
        pid, brand = (s.strip() for s in item.split(":", 1))
        products.append(pid)
        brands[pid] = brand
    horizon = int(need("scenario.horizon"))
    start = _date(need("scenario.start_date"), "scenario.start_date")
    zero_variant = need("scenario.zero_variant").lower()
    count_variant = need("scenario.count_variant").lower()
    zero_st = variant_structure("zero", zero_variant)
    count_st = variant_structure("count", count_variant)
    mode = need("scenario.mode")
    if mode not in ("explicit", "hierarchical"):
        raise ConfigError("scenario.mode must be explicit or hierarchical")

    prices = np.zeros((len(products), horizon))
    for i, pid in enumerate(products):
        raw = need(f"price.{pid}")
        vals = _floats(raw)
        if vals.size == 1:
            prices[i] = vals[0]
        elif vals.size == horizon:
            prices[i] = vals
        else:
            raise ConfigError(f"price.{pid}: need 1 or {horizon} values")

    cfg = ScenarioConfig(
        products=products,
        brands=brands,
        start_date=start,
        horizon=horizon,
        zero_variant=zero_variant,
        count_variant=count_variant,
        mode=mode,
        prices=prices,
        seed=int(kv.get("scenario.seed", "0")),
        phi=float(kv.get("scenario.phi", "1")),
        truncation=int(kv.get("scenario.truncation", str(DEFAULT_TRUNCATION))),
    )

    if mode == "hierarchical":
        hz = HierarchyParams(rho_z=_fixed_len(need("truth.rho_z"), zero_st.n_theta, "truth.rho_z"))
        if zero_st.self_excitation:
            hz.eta_z = _fixed_len(need("truth.eta_z"), 3, "truth.eta_z")
        if zero_st.cross_excitation:
            hz.eta_z_cross = _fixed_len(need("truth.eta_xz"), 3, "truth.eta_xz")
        hc = HierarchyParams(rho_c=_fixed_len(need("truth.rho_c"), count_st.n_theta, "truth.rho_c"))
        if count_st.self_excitation:
            hc.eta_c = _fixed_len(need("truth.eta_c"), 3, "truth.eta_c")
        cfg.hierarchy_zero = hz
        cfg.hierarchy_count = hc
        return cfg

    pps = []
    for pid in products:
        pp = ProductParams(
            theta_z=_fixed_len(need(f"truth.{pid}.theta_z"), zero_st.n_theta, f"truth.{pid}.theta_z"),
            theta_c=_fixed_len(need(f"truth.{pid}.theta_c"), count_st.n_theta, f"truth.{pid}.theta_c"),
        )
        if zero_st.self_excitation:
            pp.shot_z = ShotParams(*_fixed_len(need(f"truth.{pid}.gamma_z"), 3, "gamma_z"))
        if zero_st.cross_excitation:
            pp.cross_shot_z = ShotParams(*_fixed_len(need(f"truth.{pid}.gamma_xz"), 3, "gamma_xz"))
        if count_st.self_excitation:
            pp.shot_c = ShotParams(*_fixed_len(need(f"truth.{pid}.gamma_c"), 3, "gamma_c"))
        pps.append(pp)
    cfg.product_params = pps
    return cfg


def _fixed_len(value: str, n: int, what: str) -> np.ndarray:
    vals = _floats(value)
    if vals.size != n:
        raise ConfigError(f"{what}: expected {n} values, got {vals.size}")
    return vals
