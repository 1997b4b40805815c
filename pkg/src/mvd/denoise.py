"""Denoiser contract plus the analytic reference denoisers.

A denoiser maps (latent, timestep, optional conditions) to a noise estimate
whose implied clean signal can be recovered through the schedule algebra.
None of the reference denoisers here involve a trained network; they exist
so every sampling formula can be verified against closed-form targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, NumericalError
from .schedule import Schedule, noise_from_original

__all__ = [
    "DenoiserRequest",
    "DenoiserResponse",
    "Denoiser",
    "OracleDenoiser",
    "GaussianMixtureModel",
    "GmmDenoiser",
    "MeshOracleDenoiser",
    "extended_attention",
    "oracle_denoise",
    "gmm_denoise",
]


@dataclass
class DenoiserRequest:
    view_id: int
    timestep: int
    latent: np.ndarray
    conditions: dict[str, np.ndarray] | None = None
    prompt: str | None = None
    # opaque cross-view feature pack; a denoiser may use or ignore it
    reference_features: dict | None = None


@dataclass
class DenoiserResponse:
    eps: np.ndarray

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.eps)):
            raise NumericalError("denoiser response contains non-finite values")


class Denoiser:
    """Base contract: subclasses implement __call__ and declare thread safety."""

    concurrent_safe: bool = True

    def __call__(self, req: DenoiserRequest) -> DenoiserResponse:
        raise NotImplementedError

    def close(self) -> None:
        pass


def oracle_denoise(req: DenoiserRequest, target: np.ndarray, s: Schedule) -> DenoiserResponse:
    """Noise whose predicted original is exactly ``target``."""
    if req.latent.shape != target.shape:
        raise ContractError(
            f"oracle_denoise: latent {req.latent.shape} vs target {target.shape}"
        )
    t = req.timestep
    s.check_timestep(t)
    eps = noise_from_original(req.latent, target, t, s)
    return DenoiserResponse(eps.astype(np.float32))


class OracleDenoiser(Denoiser):
    def __init__(self, target: np.ndarray, schedule: Schedule):
        self.target = np.asarray(target, dtype=np.float32)
        self.schedule = schedule

    def __call__(self, req: DenoiserRequest) -> DenoiserResponse:
        return oracle_denoise(req, self.target, self.schedule)


@dataclass
class GaussianMixtureModel:
    """Isotropic mixture over clean-signal modes; the multimodal test denoiser."""

    components: list[np.ndarray]
    weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        if len(self.components) < 1:
            raise ConfigurationError("gmm: need at least one component")
        shape = self.components[0].shape
        for c in self.components:
            if c.shape != shape:
                raise ConfigurationError("gmm: components must share one shape")
        self.components = [np.asarray(c, dtype=np.float64) for c in self.components]
        if self.weights is None:
            k = len(self.components)
            self.weights = np.full(k, 1.0 / k)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if abs(float(self.weights.sum()) - 1.0) > 1e-9 or np.any(self.weights <= 0):
            raise ConfigurationError("gmm: weights must be positive and sum to 1")


def _gmm_responsibilities(
    latent: np.ndarray, gmm: GaussianMixtureModel, ab: float, t: int,
    log_bias: np.ndarray | None = None,
) -> np.ndarray:
    """Log-domain posterior over modes for a latent at noise level alpha_bar."""
    x = np.asarray(latent, dtype=np.float64).ravel()
    sqrt_ab = math.sqrt(ab)
    var = 1.0 - ab
    logw = np.empty(len(gmm.components))
    for k, mode in enumerate(gmm.components):
        d = x - sqrt_ab * mode.ravel()
        logw[k] = math.log(gmm.weights[k]) - float(d @ d) / (2.0 * var)
    if log_bias is not None:
        logw = logw + log_bias
    m = logw.max()
    if not np.isfinite(m):
        raise NumericalError(f"gmm responsibilities underflowed at timestep {t}")
    w = np.exp(logw - m)
    return w / w.sum()


def gmm_denoise(
    req: DenoiserRequest, gmm: GaussianMixtureModel, s: Schedule,
    log_bias: np.ndarray | None = None,
) -> DenoiserResponse:
    """Posterior-mean denoiser: predicted original is the responsibility-weighted
    average of the mixture modes given the noisy latent."""
    if req.latent.shape != gmm.components[0].shape:
        raise ContractError(
            f"gmm_denoise: latent {req.latent.shape} vs component "
            f"{gmm.components[0].shape}"
        )
    t = req.timestep
    s.check_timestep(t)
    ab = float(s.alpha_bar[t])
    if ab >= 1.0:
        raise ContractError(f"gmm_denoise: alpha_bar[{t}] = 1 divides by zero")
    resp = _gmm_responsibilities(req.latent, gmm, ab, t, log_bias)
    x0 = np.zeros(gmm.components[0].shape, dtype=np.float64)
    for w, mode in zip(resp, gmm.components):
        x0 += w * mode
    eps = noise_from_original(req.latent, x0, t, s)
    return DenoiserResponse(eps.astype(np.float32))


class GmmDenoiser(Denoiser):
    def __init__(self, gmm: GaussianMixtureModel, schedule: Schedule):
        self.gmm = gmm
        self.schedule = schedule

    def __call__(self, req: DenoiserRequest) -> DenoiserResponse:
        return gmm_denoise(req, self.gmm, self.schedule)


class MeshOracleDenoiser(Denoiser):
    """Per-view mixture denoiser over encoded renders of several texture variants.

    Each view owns a mixture whose modes are that view's renders encoded to
    latent space; ambiguity across variants is what the consistency machinery
    has to resolve. When a request carries reference features (the reference
    view's current latent), the mode prior is tilted by the reference view's
    own posterior, coupling mode choice across views; ``reference_bias``
    scales that tilt and 0 disables it.
    """

    def __init__(
        self,
        view_renders: dict[int, list[np.ndarray]],
        codec,
        schedule: Schedule,
        reference_bias: float = 0.0,
    ):
        self.schedule = schedule
        self.reference_bias = float(reference_bias)
        self._gmms: dict[int, GaussianMixtureModel] = {}
        for view_id, renders in view_renders.items():
            if len(renders) == 0:
                raise ConfigurationError(f"mesh oracle: view {view_id} has no renders")
            modes = [codec.encode(np.asarray(r, dtype=np.float32)) for r in renders]
            self._gmms[view_id] = GaussianMixtureModel(modes)

    def _reference_log_bias(self, req: DenoiserRequest) -> np.ndarray | None:
        ref = req.reference_features
        if ref is None or self.reference_bias == 0.0:
            return None
        ref_view = ref.get("view_id")
        ref_latent = ref.get("latent")
        if ref_view is None or ref_latent is None or ref_view not in self._gmms:
            return None
        t = int(ref.get("timestep", req.timestep))
        ab = float(self.schedule.alpha_bar[t])
        ref_resp = _gmm_responsibilities(ref_latent, self._gmms[ref_view], ab, t)
        return self.reference_bias * np.log(np.maximum(ref_resp, 1e-300))

    def __call__(self, req: DenoiserRequest) -> DenoiserResponse:
        gmm = self._gmms.get(req.view_id)
        if gmm is None:
            raise ConfigurationError(f"mesh oracle: no renders for view {req.view_id}")
        return gmm_denoise(req, gmm, self.schedule, self._reference_log_bias(req))


def extended_attention(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    K_ref: np.ndarray | None = None,
    V_ref: np.ndarray | None = None,
) -> np.ndarray:
    """Scaled dot-product attention with keys/values from a reference view
    concatenated ahead of the view's own; empty reference reduces to the
    standard form."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ContractError("extended_attention: inputs must be 2-D matrices")
    c = Q.shape[1]
    if K.shape[1] != c or K.shape[0] != V.shape[0]:
        raise ContractError("extended_attention: K/V dims inconsistent with Q")
    if K_ref is None:
        K_ref = np.zeros((0, c))
    if V_ref is None:
        V_ref = np.zeros((0, V.shape[1]))
    K_ref = np.asarray(K_ref, dtype=np.float64).reshape(-1, c)
    V_ref = np.asarray(V_ref, dtype=np.float64).reshape(-1, V.shape[1])
    if K_ref.shape[0] != V_ref.shape[0]:
        raise ContractError("extended_attention: reference K/V row counts differ")
    keys = np.concatenate([K_ref, K], axis=0)
    values = np.concatenate([V_ref, V], axis=0)
    scores = Q @ keys.T / math.sqrt(c)
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    return w @ values
