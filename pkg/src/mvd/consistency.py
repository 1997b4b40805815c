"""Multi-view coupled sampling: per-step blending of transported predictions,
the variance-restoring scale factor, noise replacement, and the lockstep
step loop with its mixed original/guided schedule.

The blend at each latent texel is
    x_tilde = sum_k (w_k / w_sum) * (mu_k + E * (x_k - mu_k)),
    E = w_sum / sqrt(sum_k w_k^2),
where x_k are transported predicted originals, mu_k the transported per-view
prediction means (x_t / sqrt(alpha_bar)), and w_k occlusion-derived weights.
E >= 1 restores the variance a weighted average would lose; with equal unit
weights over N views it equals sqrt(N).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .denoise import Denoiser, DenoiserRequest
from .errors import ConfigurationError, ContractError, EngineError
from .scene import FULL_BODY, GBuffer, ViewRig, neighbors
from .schedule import Schedule, ddim_step, noise_from_original, predict_original
from .warpfield import Codec, WarpPlan, build_warp_plan, downsample_area


@dataclass
class ViewState:
    view_id: int
    latent: np.ndarray  # float32 (C, h, w)
    locked: bool = False
    track: str = FULL_BODY


@dataclass
class MultiViewState:
    views: list[ViewState]
    timestep: int  # shared cursor; all views advance in lockstep

    def latents(self) -> list[np.ndarray]:
        return [v.latent for v in self.views]


@dataclass
class SamplingPolicy:
    """Knobs of the mixed sampling schedule and its side mechanisms."""

    cg_start_fraction: float = 0.1  # leading fraction of steps kept original
    cg_ratio: tuple[int, int] = (1, 1)  # (original, guided) steps per cycle
    enable_cg: bool = True
    enable_optimization: bool = True
    optimization_period: int = 4
    upper_body_replacement: bool = True
    replace_before_noise: bool = True
    replace_threshold: float = 0.0
    lock_front_back_first_event: bool = True
    lock_sides_fraction: float = 0.2
    use_reference_attention: bool = False
    reference_view: int = 0
    reference_bias: float = 4.0

    def validate(self) -> None:
        if not 0.0 <= self.cg_start_fraction <= 1.0:
            raise ConfigurationError(
                f"policy.cg_start_fraction: must be in [0, 1], got {self.cg_start_fraction}"
            )
        if self.optimization_period < 1:
            raise ConfigurationError("policy.optimization_period: must be >= 1")
        n_o, n_c = self.cg_ratio
        if n_o < 0 or n_c < 0 or (n_o + n_c) == 0:
            raise ConfigurationError(f"policy.cg_ratio: invalid cycle {self.cg_ratio}")

    def is_guided_step(self, t: int, num_steps: int) -> bool:
        """Guided steps start after the warmup fraction and then follow the
        original/guided cycle; the default (1, 1) is original on odd t."""
        if not self.enable_cg:
            return False
        warmup = int(round(self.cg_start_fraction * num_steps))
        if (num_steps - t) < warmup:
            return False
        n_o, n_c = self.cg_ratio
        if n_c == 0:
            return False
        if n_o == 0:
            return True
        pos = t % (n_o + n_c)
        return not (1 <= pos <= n_o)

    def is_optimization_step(self, t: int, num_steps: int) -> bool:
        return (
            self.enable_optimization
            and t < num_steps
            and t >= 1
            and t % self.optimization_period == 0
        )


@dataclass
class SourceLink:
    """One blending source for a target view; plan None means identity
    transport (the degenerate all-identical-views scenario)."""

    source: int
    plan: WarpPlan | None
    weight: np.ndarray  # (h, w) latent-resolution nonnegative weights


@dataclass
class ViewGraph:
    """Per-target blending sources, the self term first."""

    links: dict[int, list[SourceLink]]
    coverage: dict[int, np.ndarray] | None = None  # latent-res coverage > 0
    closeup_of: dict[int, int] = field(default_factory=dict)  # fb target -> paired view

    def sources(self, i: int) -> list[SourceLink]:
        return self.links[i]


def build_view_graph(
    rig: ViewRig,
    gbufs: list[GBuffer],
    codec: Codec,
    w_s: float = 0.2,
    w_c: float = 1.0,
    scene_diagonal: float = 1.0,
) -> ViewGraph:
    """Precompute warp plans and latent-resolution weights for every
    (target, source) pair the rig topology admits."""
    links: dict[int, list[SourceLink]] = {}
    coverage: dict[int, np.ndarray] = {}
    closeup_of: dict[int, int] = {}
    for i in range(len(rig)):
        row: list[SourceLink] = []
        for j in [i] + neighbors(rig, i):
            plan = build_warp_plan(
                gbufs[i], gbufs[j], rig.cameras[j],
                w_s=w_s, w_c=w_c, scene_diagonal=scene_diagonal,
            )
            weight = downsample_area(plan.occlusion, codec.ratio)
            row.append(SourceLink(j, plan, weight))
        links[i] = row
        coverage[i] = downsample_area(gbufs[i].mask.astype(np.float64), codec.ratio)
        if rig.track_of(i) == FULL_BODY:
            closeup_of[i] = rig.partner(i)
    return ViewGraph(links, coverage, closeup_of)


def make_degenerate_graph(n_views: int, latent_hw: tuple[int, int]) -> ViewGraph:
    """All views identical: every view sources every view with unit weight."""
    ones = np.ones(latent_hw)
    links = {
        i: [SourceLink(j, None, ones) for j in ([i] + [k for k in range(n_views) if k != i])]
        for i in range(n_views)
    }
    return ViewGraph(links, None)


def scale_factor(weights: np.ndarray, axis: int = 0) -> np.ndarray:
    """E = w_sum / sqrt(sum w^2); 1 exactly when one weight is positive."""
    w_sum = weights.sum(axis=axis)
    sq = np.sqrt((weights**2).sum(axis=axis))
    return np.divide(w_sum, sq, out=np.ones_like(w_sum), where=sq > 0)


def blend_predictions(
    x0_self: np.ndarray,
    transported: np.ndarray,  # (K, C, h, w) transported predicted originals
    means: np.ndarray,  # (K, C, h, w) transported prediction means
    weights: np.ndarray,  # (K, h, w)
    coverage: np.ndarray | None = None,  # (h, w) > 0 where the mesh is seen
) -> np.ndarray:
    """Occlusion-weighted, variance-restored blend; texels where fewer than
    two weights are positive pass the view's own prediction through."""
    if transported.shape != means.shape or transported.shape[0] != weights.shape[0]:
        raise ContractError("blend: transported/means/weights disagree")
    w = np.asarray(weights, dtype=np.float64)
    if coverage is not None:
        bad = (coverage > 0) & ~(w.sum(axis=0) > 0)
        if bad.any():
            raise EngineError("blend: covered texel with all-zero weights")
    w_sum = w.sum(axis=0)
    n_pos = (w > 0).sum(axis=0)
    mix = n_pos >= 2
    safe_sum = np.where(w_sum > 0, w_sum, 1.0)
    e = scale_factor(w)
    contrib = means + e[None, None] * (np.asarray(transported, np.float64) - means)
    blended = np.einsum("khw,kchw->chw", w / safe_sum, contrib)
    return np.where(mix[None], blended, np.asarray(x0_self, np.float64))


def consistency_noise(x_t: np.ndarray, x_blend: np.ndarray, t: int, s: Schedule) -> np.ndarray:
    """Back-transform a blended prediction into the noise that samples it."""
    return noise_from_original(x_t, x_blend, t, s)


def apply_closeup_replacement(
    x_blend: np.ndarray,
    closeup: np.ndarray,
    closeup_weight: np.ndarray,
    threshold: float = 0.0,
) -> np.ndarray:
    """Overwrite the blend with the transported closeup prediction wherever
    the closeup's weight is positive."""
    region = closeup_weight > threshold
    return np.where(region[None], np.asarray(closeup, np.float64), x_blend)


def _reference_pack(state: MultiViewState, policy: SamplingPolicy) -> dict | None:
    if not policy.use_reference_attention:
        return None
    ref = state.views[policy.reference_view]
    return {
        "view_id": ref.view_id,
        "latent": ref.latent.copy(),
        "timestep": state.timestep,
    }


def multiview_step(
    state: MultiViewState,
    denoiser: Denoiser,
    graph: ViewGraph,
    policy: SamplingPolicy,
    schedule: Schedule,
    codec: Codec,
    conditions: dict[int, dict[str, np.ndarray]] | None = None,
    executor=None,
    trace: dict | None = None,
) -> MultiViewState:
    """Advance every view from t to t-1; either independently with its own
    predicted noise or jointly through transported-blend guided noise.

    All per-view results are computed before any state is built, so a
    denoiser failure leaves the input state untouched.
    """
    t = state.timestep
    schedule.check_timestep(t)
    views = state.views
    ref_pack = _reference_pack(state, policy)

    def _request(v: ViewState) -> DenoiserRequest:
        return DenoiserRequest(
            view_id=v.view_id,
            timestep=t,
            latent=v.latent,
            conditions=None if conditions is None else conditions.get(v.view_id),
            reference_features=None
            if (ref_pack is not None and v.view_id == ref_pack["view_id"])
            else ref_pack,
        )

    if executor is not None and denoiser.concurrent_safe:
        eps = [r.eps for r in executor.map(denoiser, [_request(v) for v in views])]
    else:
        eps = [denoiser(_request(v)).eps for v in views]

    guided = policy.is_guided_step(t, schedule.num_steps)
    if not guided:
        new_latents = [
            ddim_step(v.latent, e, t, schedule).astype(np.float32) for v, e in zip(views, eps)
        ]
        return MultiViewState(
            [replace(v, latent=lat) for v, lat in zip(views, new_latents)], t - 1
        )

    ab = float(schedule.alpha_bar[t])
    inv_sqrt_ab = 1.0 / math.sqrt(ab)
    x0 = [predict_original(v.latent, e, t, schedule) for v, e in zip(views, eps)]
    mu = [np.asarray(v.latent, np.float64) * inv_sqrt_ab for v in views]
    decoded_x0 = {}
    decoded_mu = {}
    needed = {link.source for i in range(len(views)) for link in graph.sources(views[i].view_id)}
    index_of = {v.view_id: k for k, v in enumerate(views)}
    for vid in needed:
        k = index_of[vid]
        decoded_x0[vid] = codec.decode(x0[k].astype(np.float32))
        decoded_mu[vid] = codec.decode(mu[k].astype(np.float32))

    new_latents = []
    for k, v in enumerate(views):
        links = graph.sources(v.view_id)
        closeup_src = graph.closeup_of.get(v.view_id) if policy.upper_body_replacement else None
        xs, ms, ws = [], [], []
        closeup = None
        partner_weight = None
        for link in links:
            if link.plan is None:
                xs.append(x0[index_of[link.source]])
                ms.append(mu[index_of[link.source]])
            else:
                xs.append(codec.encode(link.plan.apply(decoded_x0[link.source]).image))
                ms.append(codec.encode(link.plan.apply(decoded_mu[link.source]).image))
            ws.append(link.weight)
            if closeup_src is not None and link.source == closeup_src:
                closeup = xs[-1]
                partner_weight = link.weight
        cover = None if graph.coverage is None else graph.coverage[v.view_id]
        x_blend = blend_predictions(
            x0[k], np.stack(xs).astype(np.float64), np.stack(ms).astype(np.float64),
            np.stack(ws), cover,
        )
        if closeup is not None and policy.replace_before_noise:
            x_blend = apply_closeup_replacement(
                x_blend, closeup, partner_weight, policy.replace_threshold
            )
        eps_g = consistency_noise(v.latent, x_blend, t, schedule)
        if closeup is not None and not policy.replace_before_noise:
            x_blend = apply_closeup_replacement(
                x_blend, closeup, partner_weight, policy.replace_threshold
            )
            ab_prev = float(schedule.alpha_bar[t - 1])
            nxt = math.sqrt(ab_prev) * x_blend + math.sqrt(1.0 - ab_prev) * eps_g
        else:
            nxt = ddim_step(v.latent, eps_g, t, schedule)
        if trace is not None:
            trace.setdefault("x_blend", {})[v.view_id] = x_blend
            trace.setdefault("eps_guided", {})[v.view_id] = eps_g
        new_latents.append(nxt.astype(np.float32))

    return MultiViewState(
        [replace(v, latent=lat) for v, lat in zip(views, new_latents)], t - 1
    )


def init_states(
    n_views: int,
    latent_shape: tuple[int, int, int],
    schedule: Schedule,
    seed: int,
    tracks: list[str] | None = None,
) -> MultiViewState:
    rng = np.random.default_rng(seed)
    views = [
        ViewState(
            view_id=i,
            latent=rng.standard_normal(latent_shape).astype(np.float32),
            track=FULL_BODY if tracks is None else tracks[i],
        )
        for i in range(n_views)
    ]
    return MultiViewState(views, schedule.num_steps)


def run_sampling(
    state: MultiViewState,
    denoiser: Denoiser,
    graph: ViewGraph,
    policy: SamplingPolicy,
    schedule: Schedule,
    codec: Codec,
    conditions=None,
    optimizer=None,
    executor=None,
    step_hook=None,
) -> MultiViewState:
    """Full lockstep rollout T..1 with optimization events interleaved."""
    policy.validate()
    while state.timestep >= 1:
        t = state.timestep
        if optimizer is not None and policy.is_optimization_step(t, schedule.num_steps):
            state = optimizer(state)
        state = multiview_step(
            state, denoiser, graph, policy, schedule, codec, conditions, executor
        )
        if step_hook is not None:
            step_hook(state)
    return state


def run_identical_views(
    n_views: int,
    denoiser: Denoiser,
    schedule: Schedule,
    policy: SamplingPolicy | None = None,
    seed: int = 0,
    latent_shape: tuple[int, int, int] = (3, 64, 64),
    codec: Codec | None = None,
) -> list[np.ndarray]:
    """The flat scenario: several simultaneous processes over one frame with
    identity transport and unit weights; returns the decoded finals.

    The default policy replaces the noise at every step, which is what makes
    independently initialized processes contract onto one shared signal; the
    mixed original/guided schedule is a rig-sampling refinement and stays off
    here unless explicitly requested.
    """
    from .warpfield import IdentityCodec

    if n_views < 1:
        raise ConfigurationError("need at least one sampling process")
    if policy is None:
        policy = SamplingPolicy(cg_start_fraction=0.0, cg_ratio=(0, 1))
    codec = codec or IdentityCodec()
    graph = make_degenerate_graph(n_views, latent_shape[1:])
    state = init_states(n_views, latent_shape, schedule, seed)
    pol = replace(policy, enable_optimization=False, upper_body_replacement=False)
    state = run_sampling(state, denoiser, graph, pol, schedule, codec)
    return [codec.decode(v.latent) for v in state.views]
