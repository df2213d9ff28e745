"""Log-likelihood, priors and log-posterior for every model variant.

Zero-process variants: ``base1`` (intercept only), ``hb`` (covariates,
hierarchical), ``be`` (covariates + self-excitation, flat priors), ``hbe``,
``bec`` (adds within-brand cross-excitation, flat), ``hbec``. Count-process
variants: ``base0``, ``hb``, ``be``, ``hbe``. The two processes are completely
separable, so each fit targets one process.

The numerical core is written once in ``jax.numpy`` (float64): the public
functions evaluate it eagerly on numpy inputs, while
:func:`build_posterior` returns the same mathematics jit-compiled with its
reverse-mode gradient for the sampler. Priors follow the package defaults in
``default_prior_spec`` (Normal entries carry mean and *variance*; Gamma
entries carry shape and *rate*; a shift of 1 marks supports on ``(1, inf)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import NamedTuple

import numpy as np

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp
from jax.scipy.special import gammaln as jgammaln
from scipy.special import gammaln

from sparsedemand.covariates import (
    COUNT_DESIGN_DIM,
    ZERO_DESIGN_DIM,
    DesignRow,
    PanelDesign,
    SeasonalConfig,
    build_design,
)
from sparsedemand.excitation import (
    DEFAULT_TRUNCATION,
    HistoryState,
    ShotParams,
    event_indicators,
)
from sparsedemand.panel import SalesPanel

ZERO_VARIANTS = ("base1", "hb", "be", "hbe", "bec", "hbec")
COUNT_VARIANTS = ("base0", "hb", "be", "hbe")

_SHOT_SHIFTS = np.array([0.0, 1.0, 0.0])  # kappa, mu (support > 1), tau


class VariantMismatchError(ValueError):
    """Raised when parameters or draws do not match the requested variant."""


@dataclass(frozen=True)
class VariantStructure:
    process: str
    name: str
    covariates: bool
    self_excitation: bool
    cross_excitation: bool
    hierarchical: bool

    @property
    def n_theta(self) -> int:
        if not self.covariates:
            return 1
        return ZERO_DESIGN_DIM if self.process == "zero" else COUNT_DESIGN_DIM


_ZERO_STRUCTURES = {
    "base1": (False, False, False, False),
    "hb": (True, False, False, True),
    "be": (True, True, False, False),
    "hbe": (True, True, False, True),
    "bec": (True, True, True, False),
    "hbec": (True, True, True, True),
}
_COUNT_STRUCTURES = {
    "base0": (False, False, False, False),
    "hb": (True, False, False, True),
    "be": (True, True, False, False),
    "hbe": (True, True, False, True),
}


def variant_structure(process: str, name: str) -> VariantStructure:
    table = {"zero": _ZERO_STRUCTURES, "count": _COUNT_STRUCTURES}.get(process)
    if table is None:
        raise ValueError(f"unknown process {process!r}")
    key = name.lower()
    if key not in table:
        raise ValueError(f"unknown {process}-process variant {name!r}")
    cov, self_e, cross_e, hier = table[key]
    return VariantStructure(process, key, cov, self_e, cross_e, hier)


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class ProductParams:
    """One product's parameters. Fields are present only for variants that use them.

    ``theta_z`` has length 20 for covariate variants and length 1 for the
    intercept-only baseline; ``theta_c`` likewise has length 2 or 1.
    """

    theta_z: np.ndarray | None = None
    shot_z: ShotParams | None = None
    cross_shot_z: ShotParams | None = None
    theta_c: np.ndarray | None = None
    shot_c: ShotParams | None = None


@dataclass
class HierarchyParams:
    """Shared group-level means (rho) and gamma shapes (eta)."""

    rho_z: np.ndarray | None = None
    eta_z: np.ndarray | None = None
    eta_z_cross: np.ndarray | None = None
    rho_c: np.ndarray | None = None
    eta_c: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Priors


@dataclass(frozen=True)
class PriorEntry:
    """One prior density: Normal(mean, variance) or shift + Gamma(shape, rate)."""

    family: str
    a: float
    b: float
    shift: float = 0.0

    def __post_init__(self):
        if self.family not in ("normal", "gamma"):
            raise ValueError(f"unknown prior family {self.family!r}")
        if self.family == "gamma" and (self.a <= 0 or self.b <= 0):
            raise ValueError("gamma prior needs positive shape and rate")
        if self.family == "normal" and self.b <= 0:
            raise ValueError("normal prior needs positive variance")

    def logpdf(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if self.family == "normal":
            out = -0.5 * np.log(2.0 * np.pi * self.b) - (x - self.a) ** 2 / (2.0 * self.b)
        else:
            z = x - self.shift
            with np.errstate(divide="ignore", invalid="ignore"):
                out = np.where(
                    z > 0,
                    self.a * np.log(self.b)
                    - gammaln(self.a)
                    + (self.a - 1.0) * np.log(np.where(z > 0, z, 1.0))
                    - self.b * z,
                    -np.inf,
                )
        return float(out) if out.ndim == 0 else out

    def sample(self, rng: np.random.Generator, size=None):
        if self.family == "normal":
            return rng.normal(self.a, math.sqrt(self.b), size=size)
        return self.shift + rng.gamma(self.a, 1.0 / self.b, size=size)

    def mean(self) -> float:
        if self.family == "normal":
            return self.a
        return self.shift + self.a / self.b

    def variance(self) -> float:
        if self.family == "normal":
            return self.b
        return self.a / self.b**2


def _n(a, b):
    return PriorEntry("normal", a, b)


def _g(a, b, shift=0.0):
    return PriorEntry("gamma", a, b, shift)


@dataclass(frozen=True)
class PriorSpec:
    """Complete prior layer for one (process, variant) pair.

    Flat variants carry per-parameter ``theta``/``shot_*`` entries; the
    hierarchical ones instead carry the fixed product-level scales
    (``theta_sigma2`` and the gamma rates ``shot_*_nu``) plus hyper-priors on
    the group means ``rho`` and gamma shapes ``eta_*``. The ``shift`` of the
    kernel-mean entry is structural (the kernel mean lives on ``(1, inf)``)
    and applies in both modes.
    """

    process: str
    variant: str
    theta: tuple[PriorEntry, ...] | None = None
    theta_sigma2: float | None = None
    rho: tuple[PriorEntry, ...] | None = None
    shot_self: tuple[PriorEntry, ...] | None = None
    shot_self_nu: tuple[float, ...] | None = None
    eta_self: tuple[PriorEntry, ...] | None = None
    shot_cross: tuple[PriorEntry, ...] | None = None
    shot_cross_nu: tuple[float, ...] | None = None
    eta_cross: tuple[PriorEntry, ...] | None = None

    @property
    def structure(self) -> VariantStructure:
        return variant_structure(self.process, self.variant)

    def override(self, **kwargs) -> "PriorSpec":
        return replace(self, **kwargs)


def default_prior_spec(process: str, variant: str) -> PriorSpec:
    """Package-default priors for every variant."""
    st = variant_structure(process, variant)
    if process == "zero":
        flat_theta = (_n(-3.0, 0.75),) + tuple(_n(0.0, 0.75) for _ in range(19))
        rho = flat_theta
        if st.name == "base1":
            return PriorSpec(process, st.name, theta=(_n(-3.0, 3.0),))
        if st.name == "hb":
            return PriorSpec(process, st.name, theta_sigma2=0.05, rho=rho)
        if st.name == "be":
            return PriorSpec(
                process, st.name, theta=flat_theta, shot_self=(_g(5, 1), _g(1, 2, 1.0), _g(10, 2.5))
            )
        if st.name == "hbe":
            return PriorSpec(
                process,
                st.name,
                theta_sigma2=0.05,
                rho=rho,
                shot_self_nu=(1.0, 2.0, 2.5),
                eta_self=(_g(50, 10), _g(10, 10), _g(500, 50)),
            )
        if st.name == "bec":
            return PriorSpec(
                process,
                st.name,
                theta=flat_theta,
                shot_self=(_g(5, 1), _g(1, 2, 1.0), _g(10, 2.5)),
                shot_cross=(_g(2, 8), _g(1, 2, 1.0), _g(10, 2.5)),
            )
        return PriorSpec(
            process,
            st.name,
            theta_sigma2=0.05,
            rho=rho,
            shot_self_nu=(1.0, 2.0, 2.5),
            eta_self=(_g(50, 10), _g(10, 10), _g(500, 50)),
            shot_cross_nu=(8.0, 2.0, 2.5),
            eta_cross=(_g(30, 15), _g(10, 10), _g(500, 50)),
        )
    if st.name == "base0":
        return PriorSpec(process, st.name, theta=(_n(-4.0, 4.0),))
    if st.name == "hb":
        return PriorSpec(process, st.name, theta_sigma2=1.0, rho=(_n(1.0, 0.5), _n(-1.0, 0.5)))
    if st.name == "be":
        return PriorSpec(
            process,
            st.name,
            theta=(_n(1.0, 0.75), _n(-1.0, 0.75)),
            shot_self=(_g(1, 5), _g(3, 1, 1.0), _g(4, 1)),
        )
    return PriorSpec(
        process,
        st.name,
        theta_sigma2=0.05,
        rho=(_n(1.0, 0.75), _n(-1.0, 0.75)),
        shot_self_nu=(5.0, 1.0, 1.0),
        eta_self=(_g(5, 5), _g(15, 5), _g(40, 10)),
    )


# ---------------------------------------------------------------------------
# Parameter layout (flat vector <-> structured)

IDENTITY, EXP, ONE_PLUS_EXP = 0, 1, 2
_SHOT_CODES = (EXP, ONE_PLUS_EXP, EXP)  # kappa, mu, tau


@dataclass(frozen=True)
class ParamLayout:
    """Flat parameter-vector layout for one fitted variant.

    Blocks appear in order: per-product ``theta`` (row-major product x
    coefficient), per-product self-shot triples, per-product cross-shot
    triples, then hierarchy blocks ``rho``, ``eta_self``, ``eta_cross``.
    ``codes`` give the constraining transform per entry (0 identity, 1 exp,
    2 one-plus-exp).
    """

    structure: VariantStructure
    products: tuple[str, ...]
    names: tuple[str, ...]
    codes: np.ndarray = field(repr=False)
    slices: dict[str, slice] = field(repr=False)

    @property
    def dim(self) -> int:
        return len(self.names)


def param_layout(structure: VariantStructure, products) -> ParamLayout:
    products = tuple(products)
    tag = "z" if structure.process == "zero" else "c"
    names: list[str] = []
    codes: list[int] = []
    slices: dict[str, slice] = {}
    k = structure.n_theta

    start = len(names)
    for pid in products:
        for j in range(1, k + 1):
            names.append(f"theta_{tag}[{pid}][{j}]")
            codes.append(IDENTITY)
    slices["theta"] = slice(start, len(names))

    if structure.self_excitation:
        start = len(names)
        for pid in products:
            names += [f"kappa_{tag}[{pid}]", f"mu_{tag}[{pid}]", f"tau_{tag}[{pid}]"]
            codes += list(_SHOT_CODES)
        slices["shot_self"] = slice(start, len(names))

    if structure.cross_excitation:
        start = len(names)
        for pid in products:
            names += [f"kappa_x{tag}[{pid}]", f"mu_x{tag}[{pid}]", f"tau_x{tag}[{pid}]"]
            codes += list(_SHOT_CODES)
        slices["shot_cross"] = slice(start, len(names))

    if structure.hierarchical:
        start = len(names)
        names += [f"rho_{tag}[{j}]" for j in range(1, k + 1)]
        codes += [IDENTITY] * k
        slices["rho"] = slice(start, len(names))
        if structure.self_excitation:
            start = len(names)
            names += [f"eta_{tag}[{j}]" for j in range(1, 4)]
            codes += [EXP] * 3
            slices["eta_self"] = slice(start, len(names))
        if structure.cross_excitation:
            start = len(names)
            names += [f"eta_x{tag}[{j}]" for j in range(1, 4)]
            codes += [EXP] * 3
            slices["eta_cross"] = slice(start, len(names))

    return ParamLayout(
        structure=structure,
        products=products,
        names=tuple(names),
        codes=np.asarray(codes, dtype=np.int8),
        slices=slices,
    )


def split_vector(layout: ParamLayout, vec: np.ndarray) -> dict[str, np.ndarray]:
    """Split a flat (possibly batched) vector into named, reshaped blocks.

    Batched input of shape (..., dim) yields blocks of shape (..., n, k).
    """
    vec = np.asarray(vec)
    if vec.shape[-1] != layout.dim:
        raise VariantMismatchError(
            f"vector length {vec.shape[-1]} != layout dimension {layout.dim}"
        )
    n = len(layout.products)
    k = layout.structure.n_theta
    out = {}
    for name, sl in layout.slices.items():
        block = vec[..., sl]
        if name == "theta":
            block = block.reshape(vec.shape[:-1] + (n, k))
        elif name in ("shot_self", "shot_cross"):
            block = block.reshape(vec.shape[:-1] + (n, 3))
        out[name] = block
    return out


def _shot_triple(sp: ShotParams | None, label: str) -> np.ndarray:
    if sp is None:
        raise VariantMismatchError(f"variant requires {label} shot parameters")
    return np.array([sp.kappa, sp.mu, sp.tau])


def pack_params(
    layout: ParamLayout,
    product_params: list[ProductParams],
    hierarchy: HierarchyParams | None = None,
) -> np.ndarray:
    """Assemble the flat constrained vector for a variant from typed parameters."""
    st = layout.structure
    if len(product_params) != len(layout.products):
        raise VariantMismatchError("wrong number of per-product parameter sets")
    vec = np.zeros(layout.dim)
    thetas = []
    for pp in product_params:
        theta = pp.theta_z if st.process == "zero" else pp.theta_c
        if theta is None or len(np.atleast_1d(theta)) != st.n_theta:
            raise VariantMismatchError(
                f"variant {st.name!r} needs theta of length {st.n_theta}"
            )
        thetas.append(np.atleast_1d(np.asarray(theta, dtype=float)))
    vec[layout.slices["theta"]] = np.concatenate(thetas)
    if st.self_excitation:
        key = "shot_z" if st.process == "zero" else "shot_c"
        vec[layout.slices["shot_self"]] = np.concatenate(
            [_shot_triple(getattr(pp, key), "self") for pp in product_params]
        )
    if st.cross_excitation:
        vec[layout.slices["shot_cross"]] = np.concatenate(
            [_shot_triple(pp.cross_shot_z, "cross") for pp in product_params]
        )
    if st.hierarchical:
        if hierarchy is None:
            raise VariantMismatchError("hierarchical variant needs HierarchyParams")
        rho = hierarchy.rho_z if st.process == "zero" else hierarchy.rho_c
        if rho is None or len(rho) != st.n_theta:
            raise VariantMismatchError("hierarchy rho missing or wrong length")
        vec[layout.slices["rho"]] = np.asarray(rho, dtype=float)
        if st.self_excitation:
            eta = hierarchy.eta_z if st.process == "zero" else hierarchy.eta_c
            if eta is None or len(eta) != 3:
                raise VariantMismatchError("hierarchy eta missing or wrong length")
            vec[layout.slices["eta_self"]] = np.asarray(eta, dtype=float)
        if st.cross_excitation:
            if hierarchy.eta_z_cross is None or len(hierarchy.eta_z_cross) != 3:
                raise VariantMismatchError("hierarchy cross eta missing or wrong length")
            vec[layout.slices["eta_cross"]] = np.asarray(hierarchy.eta_z_cross, dtype=float)
    return vec


def unpack_params(
    layout: ParamLayout, vec: np.ndarray
) -> tuple[list[ProductParams], HierarchyParams | None]:
    """Inverse of :func:`pack_params`."""
    st = layout.structure
    blocks = split_vector(layout, vec)
    out = []
    for i in range(len(layout.products)):
        pp = ProductParams()
        theta = blocks["theta"][i]
        shot = (
            ShotParams(*blocks["shot_self"][i]) if st.self_excitation else None
        )
        if st.process == "zero":
            pp.theta_z = theta
            pp.shot_z = shot
            if st.cross_excitation:
                pp.cross_shot_z = ShotParams(*blocks["shot_cross"][i])
        else:
            pp.theta_c = theta
            pp.shot_c = shot
        out.append(pp)
    hier = None
    if st.hierarchical:
        hier = HierarchyParams()
        if st.process == "zero":
            hier.rho_z = blocks["rho"]
            if st.self_excitation:
                hier.eta_z = blocks["eta_self"]
            if st.cross_excitation:
                hier.eta_z_cross = blocks["eta_cross"]
        else:
            hier.rho_c = blocks["rho"]
            if st.self_excitation:
                hier.eta_c = blocks["eta_self"]
    return out, hier


# ---------------------------------------------------------------------------
# Prepared data


@dataclass
class ModelData:
    """Prebuilt designs, histories and observation arrays for one panel."""

    panel: SalesPanel
    design: PanelDesign
    histories: HistoryState
    truncation: int = DEFAULT_TRUNCATION
    phi: float = 1.0
    count_mean_map: str = "shifted"

    @classmethod
    def from_panel(
        cls,
        panel: SalesPanel,
        seasonal: SeasonalConfig = SeasonalConfig(),
        truncation: int = DEFAULT_TRUNCATION,
        phi: float = 1.0,
        count_mean_map: str = "shifted",
    ) -> "ModelData":
        if count_mean_map not in ("shifted", "exp"):
            raise ValueError("count_mean_map must be 'shifted' or 'exp'")
        return cls(
            panel=panel,
            design=build_design(panel, seasonal),
            histories=event_indicators(panel),
            truncation=truncation,
            phi=phi,
            count_mean_map=count_mean_map,
        )

    def design_matrix(self, structure: VariantStructure) -> np.ndarray:
        full = self.design.zero if structure.process == "zero" else self.design.count
        if structure.covariates:
            return full
        return self.panel.avail[:, :, None].astype(float)

    def event_spectrum(self, which: str) -> np.ndarray:
        """Cached rfft of the self or cross event sequences (see ``_jshots``)."""
        if not hasattr(self, "_spectrum_cache"):
            self._spectrum_cache: dict[str, np.ndarray] = {}
        if which not in self._spectrum_cache:
            events = (
                self.histories.self_events if which == "self" else self.histories.cross_events
            )
            n_fft = _fft_length(self.panel.n_days, self.truncation)
            self._spectrum_cache[which] = np.fft.rfft(events.astype(float), n_fft)
        return self._spectrum_cache[which]

    def observation_arrays(self) -> dict[str, np.ndarray]:
        return {
            "events": self.histories.self_events.astype(float),
            "cross": self.histories.cross_events.astype(float),
            "y": self.panel.units.astype(float),
            "avail": self.panel.avail.astype(float),
        }


# ---------------------------------------------------------------------------
# jax core


class _CoreSpec(NamedTuple):
    process: str
    covariates: bool
    self_exc: bool
    cross_exc: bool
    hier: bool
    n_products: int
    n_theta: int
    n_days: int
    truncation: int
    count_mean_map: str


def _core_spec(st: VariantStructure, n_products: int, n_days: int, truncation: int, count_map: str) -> _CoreSpec:
    return _CoreSpec(
        st.process,
        st.covariates,
        st.self_excitation,
        st.cross_excitation,
        st.hierarchical,
        n_products,
        st.n_theta,
        n_days,
        truncation,
        count_map,
    )


def _jsnb_logpmf(y, mean, shape):
    degenerate = mean == 1.0
    safe = jnp.where(degenerate, 2.0, mean)
    log_q = jnp.log(safe - 1.0) - jnp.log(safe - 1.0 + shape)
    log_p = jnp.log(shape) - jnp.log(safe - 1.0 + shape)
    out = (
        jgammaln(y - 1.0 + shape)
        - jgammaln(y)
        - jgammaln(shape)
        + (y - 1.0) * log_q
        + shape * log_p
    )
    return jnp.where(degenerate, jnp.where(y == 1.0, 0.0, -jnp.inf), out)


def _fft_length(n_days: int, truncation: int) -> int:
    return 1 << max(n_days + truncation, 2).bit_length()


def _jkernel_logw(mu, tau, lags: int):
    """(n, lags) log kernel weights for per-product (mu, tau).

    Uses the ratio identity ``Gamma(d-1+tau) / (Gamma(d) Gamma(tau)) =
    prod_{k=1}^{d-1} (k-1+tau)/k`` so the grid costs one log and one cumsum
    per entry instead of a log-gamma evaluation (whose digamma derivative
    dominates gradient time).
    """
    degenerate = mu == 1.0
    safe = jnp.where(degenerate, 2.0, mu)[:, None]
    tau = tau[:, None]
    log_q = jnp.log(safe - 1.0) - jnp.log(safe - 1.0 + tau)
    log_p = jnp.log(tau) - jnp.log(safe - 1.0 + tau)
    k = jnp.arange(1.0, lags, dtype=jnp.float64)[None, :]
    ratios = jnp.log1p((tau - 1.0) / k)  # log((k - 1 + tau) / k)
    coef = jnp.concatenate([jnp.zeros((tau.shape[0], 1)), jnp.cumsum(ratios, axis=1)], axis=1)
    d_minus_1 = jnp.arange(0.0, lags, dtype=jnp.float64)[None, :]
    logw = tau * log_p + d_minus_1 * log_q + coef
    point_mass = jnp.where(d_minus_1 == 0.0, 0.0, -jnp.inf)
    return jnp.where(degenerate[:, None], point_mass, logw)


def _jshots(triples, event_spectrum, n_days: int, truncation: int):
    """Shot sequences (n, t) for per-product (kappa, mu, tau) triples.

    The event sequences are data, so their FFT (``event_spectrum``) is
    precomputed once per fit; each evaluation only transforms the kernel
    weights and multiplies in the frequency domain (convolution theorem),
    which keeps the per-gradient cost independent of the event history.
    """
    kappa, mu, tau = triples[:, 0], triples[:, 1], triples[:, 2]
    w = jnp.exp(_jkernel_logw(mu, tau, truncation))
    n_fft = _fft_length(n_days, truncation)
    conv = jnp.fft.irfft(event_spectrum * jnp.fft.rfft(w, n_fft), n_fft)
    shots = jnp.concatenate([jnp.zeros((w.shape[0], 1)), conv[:, : n_days - 1]], axis=1)
    return kappa[:, None] * shots


def _split_j(spec: _CoreSpec, x):
    n, k = spec.n_products, spec.n_theta
    i = n * k
    params = {"theta": x[: n * k].reshape(n, k)}
    if spec.self_exc:
        params["shot_self"] = x[i : i + 3 * n].reshape(n, 3)
        i += 3 * n
    if spec.cross_exc:
        params["shot_cross"] = x[i : i + 3 * n].reshape(n, 3)
        i += 3 * n
    if spec.hier:
        params["rho"] = x[i : i + k]
        i += k
        if spec.self_exc:
            params["eta_self"] = x[i : i + 3]
            i += 3
        if spec.cross_exc:
            params["eta_cross"] = x[i : i + 3]
            i += 3
    return params


def _jzero_logits(spec: _CoreSpec, params, arr):
    logits = jnp.einsum("ntk,nk->nt", arr["X"], params["theta"])
    if spec.self_exc:
        logits = logits + _jshots(
            params["shot_self"], arr["spectrum_self"], spec.n_days, spec.truncation
        )
    if spec.cross_exc:
        logits = logits + _jshots(
            params["shot_cross"], arr["spectrum_cross"], spec.n_days, spec.truncation
        )
    return logits


def _jzero_loglik(spec: _CoreSpec, params, arr):
    logits = _jzero_logits(spec, params, arr)
    e, av = arr["events"], arr["avail"]
    return jnp.sum(av * (e * logits - jnp.logaddexp(0.0, logits)))


def _jcount_links(spec: _CoreSpec, params, arr):
    v = jnp.einsum("ntk,nk->nt", arr["X"], params["theta"])
    if spec.self_exc:
        v = v + _jshots(
            params["shot_self"], arr["spectrum_self"], spec.n_days, spec.truncation
        )
    return v


def _jcount_loglik(spec: _CoreSpec, params, arr):
    v = _jcount_links(spec, params, arr)
    phi = arr["phi"]
    mask = arr["avail"] * arr["events"]
    y = jnp.where(mask > 0, arr["y"], 2.0)
    if spec.count_mean_map == "shifted":
        log_lm1 = v
    else:
        lam = jnp.clip(jnp.exp(v), 1.0 + 1e-9, None)
        log_lm1 = jnp.log(lam - 1.0)
    denom = jnp.logaddexp(log_lm1, jnp.log(phi))
    # arr["count_coef"] holds gammaln(y-1+phi) - gammaln(y) - gammaln(phi),
    # precomputed since y and phi are data.
    lf = arr["count_coef"] + (y - 1.0) * (log_lm1 - denom) + phi * (jnp.log(phi) - denom)
    return jnp.sum(jnp.where(mask > 0, lf, 0.0))


def _jnormal_lp(x, mean, var):
    return -0.5 * jnp.log(2.0 * jnp.pi * var) - (x - mean) ** 2 / (2.0 * var)


def _jgamma_lp(x, shape, rate):
    safe = jnp.where(x > 0, x, 1.0)
    lp = shape * jnp.log(rate) - jgammaln(shape) + (shape - 1.0) * jnp.log(safe) - rate * safe
    return jnp.where(x > 0, lp, -jnp.inf)


def _jlogprior(spec: _CoreSpec, params, arr):
    shifts = jnp.asarray(_SHOT_SHIFTS)
    total = 0.0
    theta = params["theta"]
    if spec.hier:
        total = total + _jnormal_lp(theta, params["rho"][None, :], arr["theta_sigma2"]).sum()
        total = total + _jnormal_lp(params["rho"], arr["rho_mean"], arr["rho_var"]).sum()
    else:
        total = total + _jnormal_lp(theta, arr["theta_mean"][None, :], arr["theta_var"][None, :]).sum()
    for side, key in (("self", "shot_self"), ("cross", "shot_cross")):
        if key not in params:
            continue
        z = params[key] - shifts[None, :]
        if spec.hier:
            eta = params[f"eta_{side}"]
            total = total + _jgamma_lp(z, eta[None, :], arr[f"nu_{side}"][None, :]).sum()
            total = total + _jgamma_lp(eta, arr[f"eta_{side}_shape"], arr[f"eta_{side}_rate"]).sum()
        else:
            total = total + _jgamma_lp(
                z, arr[f"shot_{side}_shape"][None, :], arr[f"shot_{side}_rate"][None, :]
            ).sum()
    return total


def _jconstrain(u, codes):
    x = jnp.where(codes == IDENTITY, u, jnp.where(codes == EXP, jnp.exp(u), 1.0 + jnp.exp(u)))
    logjac = jnp.sum(jnp.where(codes == IDENTITY, 0.0, u))
    return x, logjac


def _jlogpost(spec: _CoreSpec, u, arr):
    x, logjac = _jconstrain(u, arr["codes"])
    params = _split_j(spec, x)
    if spec.process == "zero":
        ll = _jzero_loglik(spec, params, arr)
    else:
        ll = _jcount_loglik(spec, params, arr)
    return ll + _jlogprior(spec, params, arr) + logjac


@lru_cache(maxsize=None)
def _compiled_value_and_grad(spec: _CoreSpec):
    return jax.jit(jax.value_and_grad(lambda u, arr: _jlogpost(spec, u, arr)))


@lru_cache(maxsize=None)
def _compiled_value_and_grad_batch(spec: _CoreSpec):
    f = jax.value_and_grad(lambda u, arr: _jlogpost(spec, u, arr))
    return jax.jit(jax.vmap(f, in_axes=(0, None)))


@lru_cache(maxsize=None)
def _compiled_value(spec: _CoreSpec):
    return jax.jit(lambda u, arr: _jlogpost(spec, u, arr))


# ---------------------------------------------------------------------------
# Public single-observation link functions


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise VariantMismatchError(message)


def zero_logit(row: DesignRow, s: float, s_cross: float, pp: ProductParams, variant: str) -> float:
    """Zero-process logit for one product-day given precomputed shot values."""
    st = variant_structure("zero", variant)
    _require(pp.theta_z is not None, "theta_z missing")
    theta = np.atleast_1d(np.asarray(pp.theta_z, dtype=float))
    _require(len(theta) == st.n_theta, f"variant {st.name!r} needs theta_z of length {st.n_theta}")
    x = row.zero_vector() if st.covariates else np.ones(1)
    val = float(theta @ x)
    if st.self_excitation:
        val += s
    if st.cross_excitation:
        val += s_cross
    return val


def count_log_mean(row: DesignRow, s: float, pp: ProductParams, variant: str) -> float:
    """Count-process log-link value for one product-day (mean is ``1 + exp`` of this)."""
    st = variant_structure("count", variant)
    _require(pp.theta_c is not None, "theta_c missing")
    theta = np.atleast_1d(np.asarray(pp.theta_c, dtype=float))
    _require(len(theta) == st.n_theta, f"variant {st.name!r} needs theta_c of length {st.n_theta}")
    x = row.count_vector() if st.covariates else np.ones(1)
    val = float(theta @ x)
    if st.self_excitation:
        val += s
    return val


# ---------------------------------------------------------------------------
# Whole-panel likelihood / prior / posterior


def _likelihood_arrays(data: ModelData, st: VariantStructure) -> dict:
    obs = data.observation_arrays()
    arr = {
        "X": jnp.asarray(data.design_matrix(st)),
        "events": jnp.asarray(obs["events"]),
        "avail": jnp.asarray(obs["avail"]),
    }
    if st.self_excitation:
        arr["spectrum_self"] = jnp.asarray(data.event_spectrum("self"))
    if st.cross_excitation:
        arr["spectrum_cross"] = jnp.asarray(data.event_spectrum("cross"))
    if st.process == "count":
        arr["y"] = jnp.asarray(obs["y"])
        arr["phi"] = jnp.asarray(data.phi)
        ysafe = np.where(obs["y"] >= 1, obs["y"], 2.0)
        arr["count_coef"] = jnp.asarray(
            gammaln(ysafe - 1.0 + data.phi) - gammaln(ysafe) - gammaln(data.phi)
        )
    return arr


def _params_arrays(st: VariantStructure, product_params, hierarchy=None) -> dict:
    if hierarchy is None and st.hierarchical:
        # the likelihood does not involve the hierarchy blocks
        st = replace(st, hierarchical=False)
    layout = param_layout(st, [str(i) for i in range(len(product_params))])
    vec = pack_params(layout, product_params, hierarchy)
    spec = _CoreSpec(st.process, st.covariates, st.self_excitation, st.cross_excitation,
                     st.hierarchical, len(product_params), st.n_theta, 0, 0, "shifted")
    return _split_j(spec, jnp.asarray(vec))


def loglik_zero(data: ModelData, product_params: list[ProductParams], variant: str) -> float:
    """Zero-process log-likelihood of the panel under the given parameters."""
    st = variant_structure("zero", variant)
    spec = _core_spec(st, data.panel.n_products, data.panel.n_days, data.truncation, data.count_mean_map)
    params = _params_arrays(st, product_params)
    return float(_jzero_loglik(spec, params, _likelihood_arrays(data, st)))


def loglik_count(data: ModelData, product_params: list[ProductParams], variant: str) -> float:
    """Count-process log-likelihood (event days only) under the given parameters."""
    st = variant_structure("count", variant)
    spec = _core_spec(st, data.panel.n_products, data.panel.n_days, data.truncation, data.count_mean_map)
    params = _params_arrays(st, product_params)
    return float(_jcount_loglik(spec, params, _likelihood_arrays(data, st)))


def _prior_arrays(prior: PriorSpec) -> dict:
    st = prior.structure
    arr: dict = {}
    if st.hierarchical:
        arr["theta_sigma2"] = jnp.asarray(prior.theta_sigma2)
        arr["rho_mean"] = jnp.asarray([e.a for e in prior.rho])
        arr["rho_var"] = jnp.asarray([e.b for e in prior.rho])
        if st.self_excitation:
            arr["nu_self"] = jnp.asarray(prior.shot_self_nu)
            arr["eta_self_shape"] = jnp.asarray([e.a for e in prior.eta_self])
            arr["eta_self_rate"] = jnp.asarray([e.b for e in prior.eta_self])
        if st.cross_excitation:
            arr["nu_cross"] = jnp.asarray(prior.shot_cross_nu)
            arr["eta_cross_shape"] = jnp.asarray([e.a for e in prior.eta_cross])
            arr["eta_cross_rate"] = jnp.asarray([e.b for e in prior.eta_cross])
    else:
        arr["theta_mean"] = jnp.asarray([e.a for e in prior.theta])
        arr["theta_var"] = jnp.asarray([e.b for e in prior.theta])
        if st.self_excitation:
            arr["shot_self_shape"] = jnp.asarray([e.a for e in prior.shot_self])
            arr["shot_self_rate"] = jnp.asarray([e.b for e in prior.shot_self])
        if st.cross_excitation:
            arr["shot_cross_shape"] = jnp.asarray([e.a for e in prior.shot_cross])
            arr["shot_cross_rate"] = jnp.asarray([e.b for e in prior.shot_cross])
    return arr


def logprior(
    product_params: list[ProductParams],
    hierarchy: HierarchyParams | None,
    prior: PriorSpec,
    hierarchical: bool,
) -> float:
    """Log prior density of a full parameter set; ``-inf`` outside support."""
    st = prior.structure
    _require(hierarchical == st.hierarchical, "hierarchical flag does not match prior spec")
    spec = _CoreSpec(st.process, st.covariates, st.self_excitation, st.cross_excitation,
                     st.hierarchical, len(product_params), st.n_theta, 0, 0, "shifted")
    params = _params_arrays(st, product_params, hierarchy)
    return float(_jlogprior(spec, params, _prior_arrays(prior)))


# ---------------------------------------------------------------------------
# Prior sampling (initialization, hierarchical simulation)


def sample_hierarchy(prior: PriorSpec, rng: np.random.Generator) -> HierarchyParams:
    st = prior.structure
    _require(st.hierarchical, f"variant {st.name!r} has no hierarchy")
    rho = np.array([e.sample(rng) for e in prior.rho])
    eta = np.array([e.sample(rng) for e in prior.eta_self]) if st.self_excitation else None
    eta_x = np.array([e.sample(rng) for e in prior.eta_cross]) if st.cross_excitation else None
    if st.process == "zero":
        return HierarchyParams(rho_z=rho, eta_z=eta, eta_z_cross=eta_x)
    return HierarchyParams(rho_c=rho, eta_c=eta)


def _sample_shots(rng, shapes, rates) -> ShotParams:
    draws = rng.gamma(np.asarray(shapes), 1.0 / np.asarray(rates)) + _SHOT_SHIFTS
    return ShotParams(*draws)


def sample_product_params(
    prior: PriorSpec,
    rng: np.random.Generator,
    n_products: int,
    hierarchy: HierarchyParams | None = None,
) -> list[ProductParams]:
    """Draw per-product parameters from the prior (conditioned on the hierarchy)."""
    st = prior.structure
    out = []
    if st.hierarchical:
        _require(hierarchy is not None, "hierarchical sampling needs HierarchyParams")
        rho = hierarchy.rho_z if st.process == "zero" else hierarchy.rho_c
        eta = hierarchy.eta_z if st.process == "zero" else hierarchy.eta_c
        eta_x = hierarchy.eta_z_cross
        sd = math.sqrt(prior.theta_sigma2)
        for _ in range(n_products):
            theta = rng.normal(np.asarray(rho), sd)
            shot = _sample_shots(rng, eta, prior.shot_self_nu) if st.self_excitation else None
            cross = (
                _sample_shots(rng, eta_x, prior.shot_cross_nu) if st.cross_excitation else None
            )
            out.append(_as_product_params(st, theta, shot, cross))
        return out
    for _ in range(n_products):
        theta = np.array([e.sample(rng) for e in prior.theta])
        shot = (
            ShotParams(*[e.sample(rng) for e in prior.shot_self]) if st.self_excitation else None
        )
        cross = (
            ShotParams(*[e.sample(rng) for e in prior.shot_cross]) if st.cross_excitation else None
        )
        out.append(_as_product_params(st, theta, shot, cross))
    return out


def _as_product_params(st, theta, shot, cross) -> ProductParams:
    if st.process == "zero":
        return ProductParams(theta_z=theta, shot_z=shot, cross_shot_z=cross)
    return ProductParams(theta_c=theta, shot_c=shot)


# ---------------------------------------------------------------------------
# Posterior bundle


@dataclass
class PosteriorBundle:
    """Log-posterior with gradient in unconstrained space, ready for HMC."""

    data: ModelData
    prior: PriorSpec
    layout: ParamLayout
    _spec: _CoreSpec = field(repr=False)
    _arrays: dict = field(repr=False)

    @property
    def names(self) -> tuple[str, ...]:
        return self.layout.names

    @property
    def dim(self) -> int:
        return self.layout.dim

    def value_and_grad(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        v, g = _compiled_value_and_grad(self._spec)(jnp.asarray(u), self._arrays)
        return float(v), np.asarray(g)

    def value_and_grad_batch(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Row-batched posterior value and gradient (used to step chains in lockstep)."""
        v, g = _compiled_value_and_grad_batch(self._spec)(jnp.asarray(u), self._arrays)
        return np.asarray(v), np.asarray(g)

    def value(self, u: np.ndarray) -> float:
        return float(_compiled_value(self._spec)(jnp.asarray(u), self._arrays))

    def sample_init(self, rng: np.random.Generator) -> np.ndarray:
        """Constrained-space prior draw used to initialize a chain."""
        st = self.layout.structure
        hier = sample_hierarchy(self.prior, rng) if st.hierarchical else None
        pps = sample_product_params(self.prior, rng, len(self.layout.products), hier)
        return pack_params(self.layout, pps, hier)

    def constrain(self, u: np.ndarray) -> np.ndarray:
        x, _ = _jconstrain(jnp.asarray(u), self._arrays["codes"])
        return np.asarray(x)


def build_posterior(
    data: ModelData,
    process: str,
    variant: str,
    prior: PriorSpec | None = None,
) -> PosteriorBundle:
    """Assemble the jit-compiled log-posterior bundle for one process variant."""
    st = variant_structure(process, variant)
    if prior is None:
        prior = default_prior_spec(process, variant)
    _require(prior.process == process and prior.variant == st.name, "prior spec does not match variant")
    layout = param_layout(st, data.panel.products)
    spec = _core_spec(st, data.panel.n_products, data.panel.n_days, data.truncation, data.count_mean_map)
    arrays = _likelihood_arrays(data, st)
    arrays.update(_prior_arrays(prior))
    arrays["codes"] = jnp.asarray(layout.codes.astype(np.int64))
    return PosteriorBundle(data=data, prior=prior, layout=layout, _spec=spec, _arrays=arrays)


def logposterior_and_grad(u: np.ndarray, bundle: PosteriorBundle) -> tuple[float, np.ndarray]:
    """Log posterior and gradient at unconstrained ``u`` (includes transform Jacobians)."""
    return bundle.value_and_grad(u)
