# -*- coding: utf-8 -*-
"""
Spectral mixture kernels for multi-output Gaussian processes.

Every variant is stored under one per-channel parametrization: each of the
Q components holds, for every channel i, a weight w_i, a frequency mean mu_i
(cycles/day), a diagonal frequency scale sigma_i (angular scale, as it
enters the exponent), a delay theta_i (days) and a phase phi_i (radians).
Cross-channel parameters are derived from these:

  MOSM    magnitude from the product of the two channel spectral densities,
          delay and phase differences, weighted mean/scale.
  CSM     shared mean and scale, alpha_ij = sqrt(w_i w_j), phase differences.
  SM-LMC  shared mean and scale, alpha_ij = a_i a_j (a may be negative).
  SM-IGP  shared mean and scale, alpha_ij = w_i if i == j else 0.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from comove.errors import ConfigError, InvalidParameterError, UnsupportedConstraintError

logger = logging.getLogger(__name__)

# ============================================================================
# CONSTANTS
# ============================================================================

MOSM = "MOSM"
CSM = "CSM"
SM_LMC = "SM-LMC"
SM_IGP = "SM-IGP"
VARIANTS = (MOSM, CSM, SM_LMC, SM_IGP)

VARIANT_ALIASES = {
    "mosm": MOSM,
    "csm": CSM,
    "smlmc": SM_LMC,
    "sm-lmc": SM_LMC,
    "smigp": SM_IGP,
    "sm-igp": SM_IGP,
}

# Variants whose mean/scale are tied across channels
SHARED_SPECTRUM = (CSM, SM_LMC, SM_IGP)

# target variants reachable from each source by adding ties
RESTRICTIONS = {
    MOSM: (MOSM, CSM, SM_LMC, SM_IGP),
    CSM: (CSM, SM_LMC, SM_IGP),
    SM_LMC: (SM_LMC, SM_IGP),
    SM_IGP: (SM_IGP,),
}

TWO_PI = 2.0 * np.pi
PI_SQUARED = np.pi ** 2

MSG_ERROR_UNKNOWN_VARIANT = "Unknown kernel variant '{variant}' (expected one of {variants})"
MSG_ERROR_CONSTRAINT = "Cannot constrain {source} to {target}: {target} is not a restriction of {source}"

# ============================================================================
# VARIANT NAMES
# ============================================================================

def normalize_variant(name: str) -> str:
    """Accept canonical names (MOSM, SM-LMC, ...) and CLI spellings (smlmc, ...)."""
    if name in VARIANTS:
        return name
    key = str(name).strip().lower()
    if key in VARIANT_ALIASES:
        return VARIANT_ALIASES[key]
    raise ConfigError(MSG_ERROR_UNKNOWN_VARIANT.format(variant=name, variants=", ".join(VARIANTS)))


def has_shared_spectrum(variant: str) -> bool:
    return variant in SHARED_SPECTRUM


def has_delays(variant: str) -> bool:
    return variant == MOSM


def has_phases(variant: str) -> bool:
    return variant in (MOSM, CSM)


def has_signed_weights(variant: str) -> bool:
    return variant == SM_LMC

# ============================================================================
# DOMAIN TYPES
# ============================================================================

def _readonly(values, shape: Tuple[int, ...], label: str) -> np.ndarray:
    array = np.array(values, dtype=float).reshape(shape) if np.size(values) == int(np.prod(shape)) else None
    if array is None:
        raise InvalidParameterError(f"{label} must have shape {shape}, got size {np.size(values)}")
    if not np.all(np.isfinite(array)):
        raise InvalidParameterError(f"{label} must be finite")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class SpectralComponent:
    """
    One mixture component across all channels.

    w: (M,) weights (SM-LMC coefficients for that variant)
    mu: (M, N) frequency means in cycles/day
    sigma: (M, N) diagonal frequency scales
    theta: (M, N) delays in days
    phi: (M,) phases in radians
    """

    w: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    theta: np.ndarray
    phi: np.ndarray

    @classmethod
    def build(cls, w, mu, sigma, theta=None, phi=None, n_dims: Optional[int] = None) -> "SpectralComponent":
        """Build from loosely shaped inputs; scalars per channel mean N = 1."""
        w = np.atleast_1d(np.asarray(w, dtype=float))
        m = w.size
        mu = np.asarray(mu, dtype=float)
        n = n_dims or (1 if mu.ndim <= 1 else mu.shape[-1])
        theta = np.zeros((m, n)) if theta is None else theta
        phi = np.zeros(m) if phi is None else phi
        return cls(
            w=_readonly(w, (m,), "w"),
            mu=_readonly(mu, (m, n), "mu"),
            sigma=_readonly(sigma, (m, n), "sigma"),
            theta=_readonly(theta, (m, n), "theta"),
            phi=_readonly(phi, (m,), "phi"),
        )

    @property
    def M(self) -> int:
        return int(self.w.size)

    @property
    def N(self) -> int:
        return int(self.mu.shape[1])

    def to_dict(self) -> Dict:
        return {
            "w": self.w.tolist(),
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "theta": self.theta.tolist(),
            "phi": self.phi.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SpectralComponent":
        mu = np.asarray(data["mu"], dtype=float)
        n = 1 if mu.ndim <= 1 else mu.shape[-1]
        return cls.build(data["w"], mu, data["sigma"], data.get("theta"), data.get("phi"), n_dims=n)


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """A validated multi-output spectral mixture kernel of one variant."""

    variant: str
    components: Tuple[SpectralComponent, ...]

    def __post_init__(self):
        variant = normalize_variant(self.variant)
        components = tuple(self.components)
        if not components:
            raise InvalidParameterError("KernelSpec needs at least one component (Q >= 1)")
        m, n = components[0].M, components[0].N
        for q, comp in enumerate(components):
            if comp.M != m or comp.N != n:
                raise InvalidParameterError(f"Component {q} has shape (M={comp.M}, N={comp.N}), expected ({m}, {n})")
            if np.any(comp.sigma <= 0):
                raise InvalidParameterError(f"Component {q}: frequency scales must be > 0")
            if np.any(comp.mu < 0):
                raise InvalidParameterError(f"Component {q}: frequency means must be >= 0")
            if not has_signed_weights(variant) and np.any(comp.w < 0):
                raise InvalidParameterError(f"Component {q}: {variant} weights must be >= 0")
            if has_shared_spectrum(variant) and (
                    np.any(comp.mu != comp.mu[0]) or np.any(comp.sigma != comp.sigma[0])):
                raise InvalidParameterError(f"Component {q}: {variant} requires mean and scale shared across channels")
            if not has_delays(variant) and np.any(comp.theta != 0):
                raise InvalidParameterError(f"Component {q}: {variant} has no delays")
            if not has_phases(variant) and np.any(comp.phi != 0):
                raise InvalidParameterError(f"Component {q}: {variant} has no phases")
        object.__setattr__(self, "variant", variant)
        object.__setattr__(self, "components", components)

    @property
    def Q(self) -> int:
        return len(self.components)

    @property
    def M(self) -> int:
        return self.components[0].M

    @property
    def N(self) -> int:
        return self.components[0].N

    def to_dict(self) -> Dict:
        return {
            "variant": self.variant,
            "Q": self.Q,
            "M": self.M,
            "N": self.N,
            "components": [c.to_dict() for c in self.components],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "KernelSpec":
        spec = cls(variant=data["variant"],
                   components=tuple(SpectralComponent.from_dict(c) for c in data["components"]))
        for key in ("Q", "M", "N"):
            if key in data and int(data[key]) != getattr(spec, key):
                raise InvalidParameterError(f"KernelSpec {key}={data[key]} disagrees with its components")
        return spec


@dataclass(frozen=True)
class CrossParams:
    """Cross-spectral parameters of one (component, channel pair)."""

    alpha: float
    mu: np.ndarray
    sigma: np.ndarray
    theta: np.ndarray
    phi: float

# ============================================================================
# CROSS-PARAMETER CONSTRUCTION
# ============================================================================

def pair_params(spec: KernelSpec, q: int) -> Dict[str, np.ndarray]:
    """
    All M x M cross-parameters of component q.

    Returns alpha (M, M), magnitude (M, M), mu/sigma/theta (M, M, N) and
    phi (M, M). `magnitude` is alpha divided by the weight product for MOSM
    (used by the weight gradient) and 1 otherwise.
    """
    comp = spec.components[q]
    variant = spec.variant
    w, mu, sigma = comp.w, comp.mu, comp.sigma
    n = spec.N

    theta = comp.theta[:, None, :] - comp.theta[None, :, :]
    phi = comp.phi[:, None] - comp.phi[None, :]

    if variant == MOSM:
        x = sigma[:, None, :]
        y = sigma[None, :, :]
        total = x + y
        sigma_ij = 2.0 * x * y / total
        mu_ij = (x * mu[None, :, :] + y * mu[:, None, :]) / total
        delta = mu[:, None, :] - mu[None, :, :]
        damping = np.exp(-PI_SQUARED * np.sum(delta ** 2 / total, axis=-1))
        magnitude = TWO_PI ** (n / 2.0) * np.sqrt(np.prod(sigma_ij, axis=-1)) * damping
        alpha = np.outer(w, w) * magnitude
    else:
        sigma_ij = np.broadcast_to(sigma[0], (spec.M, spec.M, n)).copy()
        mu_ij = np.broadcast_to(mu[0], (spec.M, spec.M, n)).copy()
        magnitude = np.ones((spec.M, spec.M))
        if variant == CSM:
            alpha = np.sqrt(np.outer(w, w))
        elif variant == SM_LMC:
            alpha = np.outer(w, w)
        else:
            alpha = np.diag(w)

    return {
        "alpha": alpha,
        "magnitude": magnitude,
        "mu": mu_ij,
        "sigma": sigma_ij,
        "theta": theta,
        "phi": phi,
    }


def cross_params(spec: KernelSpec, q: int, i: int, j: int) -> CrossParams:
    """Cross-spectral parameters of component q between channels i and j."""
    if not (0 <= q < spec.Q and 0 <= i < spec.M and 0 <= j < spec.M):
        raise InvalidParameterError(f"Index out of range: q={q}, i={i}, j={j} for Q={spec.Q}, M={spec.M}")
    p = pair_params(spec, q)
    return CrossParams(
        alpha=float(p["alpha"][i, j]),
        mu=p["mu"][i, j].copy(),
        sigma=p["sigma"][i, j].copy(),
        theta=p["theta"][i, j].copy(),
        phi=float(p["phi"][i, j]),
    )


def effective_delay(spec: KernelSpec, q: int, i: int, j: int) -> Union[float, np.ndarray]:
    """
    Lag (days) by which channel j trails channel i in component q.

    The delay and phase differences are not separately identifiable: a phase
    shift phi_ij moves the cosine by phi_ij / (2 pi mu_ij) days, exactly like a
    delay. This combines both, theta_ij + phi_ij / (2 pi mu_ij), with phi_ij
    wrapped into (-pi, pi] so the answer is the lag closest to theta_ij.
    k_ij(tau) has a zero-phase point at tau = -effective_delay. Components
    with a zero mean carry no phase information and return theta_ij.

    Returns a float for one input dimension and an (N,) array otherwise.
    """
    cross = cross_params(spec, q, i, j)
    phi = float(np.angle(np.exp(1j * cross.phi)))
    norm = float(np.sum(cross.mu ** 2))
    lag = cross.theta.copy()
    if norm > 0.0:
        lag = lag + phi * cross.mu / (TWO_PI * norm)
    if spec.N == 1:
        return float(lag[0])
    return lag

# ============================================================================
# KERNEL EVALUATION
# ============================================================================

def _as_inputs(t, n_dims: int) -> np.ndarray:
    """Shape time inputs as (n, N)."""
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        t = t.reshape(1)
    if n_dims == 1 and t.ndim == 1:
        return t[:, None]
    if t.ndim == 1 and t.size == n_dims:
        return t[None, :]
    if t.ndim != 2 or t.shape[1] != n_dims:
        raise InvalidParameterError(f"Inputs must have {n_dims} column(s), got shape {t.shape}")
    return t


def _component_terms(p: Dict[str, np.ndarray], ch_a: np.ndarray, ch_b: np.ndarray, tau: np.ndarray):
    """Per-entry (alpha, u, envelope, argument) for one component."""
    rows, cols = ch_a[:, None], ch_b[None, :]
    alpha = p["alpha"][rows, cols]
    u = tau + p["theta"][rows, cols]
    envelope = np.exp(-0.5 * np.sum(p["sigma"][rows, cols] * u ** 2, axis=-1))
    argument = TWO_PI * np.sum(p["mu"][rows, cols] * u, axis=-1) + p["phi"][rows, cols]
    return alpha, u, envelope, argument


def _check_channels(spec: KernelSpec, ch: np.ndarray) -> np.ndarray:
    ch = np.asarray(ch, dtype=int).reshape(-1)
    if ch.size and (ch.min() < 0 or ch.max() >= spec.M):
        raise InvalidParameterError(f"Channel index out of range for M={spec.M}")
    return ch


def cross_gram(spec: KernelSpec, ch_a, t_a, ch_b, t_b) -> np.ndarray:
    """Rectangular block K[a, b] = k_{ch_a, ch_b}(t_a - t_b)."""
    ch_a = _check_channels(spec, ch_a)
    ch_b = _check_channels(spec, ch_b)
    x_a = _as_inputs(t_a, spec.N) if ch_a.size else np.zeros((0, spec.N))
    x_b = _as_inputs(t_b, spec.N) if ch_b.size else np.zeros((0, spec.N))
    if x_a.shape[0] != ch_a.size or x_b.shape[0] != ch_b.size:
        raise InvalidParameterError("Channel and time inputs must have the same length")
    tau = x_a[:, None, :] - x_b[None, :, :]
    K = np.zeros((ch_a.size, ch_b.size))
    for q in range(spec.Q):
        alpha, _, envelope, argument = _component_terms(pair_params(spec, q), ch_a, ch_b, tau)
        K += alpha * envelope * np.cos(argument)
    return K


def gram(spec: KernelSpec, ch, t, noise: Optional[Sequence[float]] = None) -> np.ndarray:
    """
    Symmetric Gram matrix of (channel, t) inputs plus per-channel noise on
    the diagonal. The upper triangle is mirrored so the result is exactly
    symmetric.
    """
    ch = _check_channels(spec, ch)
    K = cross_gram(spec, ch, t, ch, t)
    K = np.triu(K) + np.triu(K, 1).T
    if noise is not None:
        noise = np.asarray(noise, dtype=float)
        if noise.shape != (spec.M,):
            raise InvalidParameterError(f"noise must have one variance per channel ({spec.M}), got {noise.shape}")
        if np.any(noise < 0):
            raise InvalidParameterError("noise variances must be >= 0")
        K[np.diag_indices_from(K)] += noise[ch]
    return K


def kernel_eval(spec: KernelSpec, i: int, j: int, tau) -> Union[float, np.ndarray]:
    """k_ij(tau) for a single lag (scalar or length-N vector) or an array of lags."""
    tau_arr = np.asarray(tau, dtype=float)
    lags = tau_arr.reshape(-1, spec.N)
    n = lags.shape[0]
    values = cross_gram(spec, np.full(n, i), lags, np.full(1, j), np.zeros((1, spec.N)))[:, 0]
    if tau_arr.ndim == 0 or (spec.N > 1 and tau_arr.ndim == 1):
        return float(values[0])
    return values.reshape(tau_arr.shape if spec.N == 1 else tau_arr.shape[:-1])


def kernel_at_zero(spec: KernelSpec) -> np.ndarray:
    """M x M matrix of k_ij(0), mirrored to be exactly symmetric."""
    K = np.zeros((spec.M, spec.M))
    for q in range(spec.Q):
        p = pair_params(spec, q)
        u = p["theta"]
        envelope = np.exp(-0.5 * np.sum(p["sigma"] * u ** 2, axis=-1))
        K += p["alpha"] * envelope * np.cos(TWO_PI * np.sum(p["mu"] * u, axis=-1) + p["phi"])
    return np.triu(K) + np.triu(K, 1).T

# ============================================================================
# CONSTRAINTS
# ============================================================================

def constrain(spec: KernelSpec, target_variant: str) -> KernelSpec:
    """
    Apply the ties of a more constrained variant. Mean and scale become the
    first channel's values, delays (and phases where the target has none)
    are zeroed, and weights are mapped so each channel keeps its own
    variance k_ii(0) under the shared spectrum.
    """
    target = normalize_variant(target_variant)
    source = spec.variant
    if target not in RESTRICTIONS[source]:
        raise UnsupportedConstraintError(MSG_ERROR_CONSTRAINT.format(source=source, target=target))
    if target == source:
        return spec

    components = []
    n = spec.N
    for comp in spec.components:
        shared_mu = np.broadcast_to(comp.mu[0], comp.mu.shape)
        shared_sigma = np.broadcast_to(comp.sigma[0], comp.sigma.shape)
        volume = TWO_PI ** (n / 2.0) * np.sqrt(np.prod(comp.sigma[0]))
        w = comp.w
        if source == MOSM:
            if target == SM_LMC:
                weights = w * np.sqrt(volume)
            else:
                weights = w ** 2 * volume
        elif source == CSM:
            weights = np.sqrt(w) if target == SM_LMC else w.copy()
        else:
            weights = w ** 2
        phi = comp.phi if has_phases(target) else np.zeros_like(comp.phi)
        components.append(SpectralComponent.build(
            weights, shared_mu, shared_sigma, np.zeros_like(comp.theta), phi, n_dims=n))
    logger.debug(f"Constrained {source} kernel to {target}")
    return KernelSpec(variant=target, components=tuple(components))

# ============================================================================
# GRADIENTS
# ============================================================================

def component_gradients(spec: KernelSpec, ch, t, adjoint: np.ndarray) -> List[Dict[str, np.ndarray]]:
    """
    Contract an n x n adjoint G with dK/d(parameter) for every per-channel
    parameter of every component: returns, per component, sum_ab G_ab dK_ab/dp
    under keys w (M,), mu (M, N), sigma (M, N), theta (M, N), phi (M,).

    Tied parameters (shared mean/scale) report their total on row 0 with the
    other rows zero; parameters a variant fixes report zeros.
    """
    ch = _check_channels(spec, ch)
    x = _as_inputs(t, spec.N) if ch.size else np.zeros((0, spec.N))
    G = np.asarray(adjoint, dtype=float)
    tau = x[:, None, :] - x[None, :, :]
    Z = np.zeros((ch.size, spec.M))
    Z[np.arange(ch.size), ch] = 1.0

    def pair_sum(F):
        return Z.T @ F @ Z

    results = []
    for q, comp in enumerate(spec.components):
        p = pair_params(spec, q)
        alpha, u, envelope, argument = _component_terms(p, ch, ch, tau)
        cos_term, sin_term = np.cos(argument), np.sin(argument)
        rows, cols = ch[:, None], ch[None, :]
        sigma_e = p["sigma"][rows, cols]
        mu_e = p["mu"][rows, cols]

        base = G * alpha * envelope
        d_alpha = pair_sum(G * envelope * cos_term)
        d_phi = pair_sum(-base * sin_term)
        d_sigma = np.stack([pair_sum(base * cos_term * (-0.5 * u[..., d] ** 2)) for d in range(spec.N)], axis=-1)
        d_mu = np.stack([pair_sum(-base * sin_term * TWO_PI * u[..., d]) for d in range(spec.N)], axis=-1)
        d_theta = np.stack([
            pair_sum(base * (-sigma_e[..., d] * u[..., d] * cos_term - TWO_PI * mu_e[..., d] * sin_term))
            for d in range(spec.N)], axis=-1)

        grad = {
            "w": np.zeros(spec.M),
            "mu": np.zeros((spec.M, spec.N)),
            "sigma": np.zeros((spec.M, spec.N)),
            "theta": np.zeros((spec.M, spec.N)),
            "phi": np.zeros(spec.M),
        }
        w = comp.w

        if spec.variant == MOSM:
            B = d_alpha * p["magnitude"]
            grad["w"] = B @ w + B.T @ w
            weighted = d_alpha * p["alpha"]
            for d in range(spec.N):
                sx = comp.sigma[:, d][:, None]
                sy = comp.sigma[:, d][None, :]
                mx = comp.mu[:, d][:, None]
                my = comp.mu[:, d][None, :]
                total = sx + sy
                delta = mx - my
                damp = PI_SQUARED * delta ** 2 / total ** 2
                fx = (weighted * (sy / (2.0 * sx * total) + damp)
                      + d_sigma[..., d] * 2.0 * sy ** 2 / total ** 2
                      + d_mu[..., d] * sy * (my - mx) / total ** 2)
                fy = (weighted * (sx / (2.0 * sy * total) + damp)
                      + d_sigma[..., d] * 2.0 * sx ** 2 / total ** 2
                      + d_mu[..., d] * sx * (mx - my) / total ** 2)
                grad["sigma"][:, d] = fx.sum(axis=1) + fy.sum(axis=0)
                gx = weighted * (-2.0 * PI_SQUARED * delta / total) + d_mu[..., d] * sy / total
                gy = weighted * (2.0 * PI_SQUARED * delta / total) + d_mu[..., d] * sx / total
                grad["mu"][:, d] = gx.sum(axis=1) + gy.sum(axis=0)
                grad["theta"][:, d] = d_theta[..., d].sum(axis=1) - d_theta[..., d].sum(axis=0)
            grad["phi"] = d_phi.sum(axis=1) - d_phi.sum(axis=0)
        else:
            grad["mu"][0] = d_mu.sum(axis=(0, 1))
            grad["sigma"][0] = d_sigma.sum(axis=(0, 1))
            if spec.variant == CSM:
                B = d_alpha * p["alpha"]
                safe_w = np.where(w > 0, w, 1.0)
                grad["w"] = np.where(w > 0, (B.sum(axis=1) + B.sum(axis=0)) / (2.0 * safe_w), 0.0)
                grad["phi"] = d_phi.sum(axis=1) - d_phi.sum(axis=0)
            elif spec.variant == SM_LMC:
                grad["w"] = d_alpha @ w + d_alpha.T @ w
            else:
                grad["w"] = np.diag(d_alpha).copy()
        results.append(grad)
    return results
