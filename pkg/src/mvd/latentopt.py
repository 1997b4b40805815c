"""Explicit cross-view latent optimization: a symmetric decoded-warp
reconstruction loss between view pairs, plain gradient descent with step
halving, and the event schedule with progressive view locking.

Warp maps are treated as constants (no gradient through geometry); the codec
is linear for both reference implementations, so the analytic gradient is
exact and checkable against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .consistency import MultiViewState, SamplingPolicy
from .errors import ConfigurationError
from .scene import ViewRig
from .warpfield import Codec, WarpPlan

PlanLookup = Callable[[int, int], "WarpPlan | None"]  # (target, source) -> plan


@dataclass
class OptimizerConfig:
    step_size: float = 0.5
    iterations: int = 10
    gradient: str = "analytic"  # "analytic" | "finite-difference"
    max_halvings: int = 8
    fd_epsilon: float = 1e-4

    def validate(self) -> None:
        if not (self.step_size > 0 and math.isfinite(self.step_size)):
            raise ConfigurationError("optimizer.step_size: must be finite and positive")
        if self.iterations < 1:
            raise ConfigurationError("optimizer.iterations: must be >= 1")
        if self.gradient not in ("analytic", "finite-difference"):
            raise ConfigurationError(f"optimizer.gradient: unknown method {self.gradient!r}")


@dataclass
class PairLoss:
    value: float
    empty_overlap: bool = False


def _warp(plan: WarpPlan | None, img: np.ndarray):
    """plan None means identity warp with full validity."""
    if plan is None:
        return np.asarray(img, np.float64), np.ones(img.shape[:2], dtype=bool)
    res = plan.apply(img)
    return np.asarray(res.image, np.float64), res.mask


def _warp_adjoint(plan: WarpPlan | None, grad: np.ndarray) -> np.ndarray:
    if plan is None:
        return np.asarray(grad, np.float64)
    return plan.adjoint_apply(grad)


def _directed_residual(x_tgt, x_src, codec, plan):
    """Residual of the directed term: decoded target minus warped decoded
    source, masked to the warp validity; returns (residual, mask, n_valid)."""
    img_t = np.asarray(codec.decode(np.asarray(x_tgt, np.float64)), np.float64)
    img_s = codec.decode(np.asarray(x_src, np.float64))
    warped, mask = _warp(plan, img_s)
    r = np.where(mask[..., None], img_t - warped, 0.0)
    return r, mask, int(mask.sum())


def latent_pair_loss(
    x_i: np.ndarray,
    x_j: np.ndarray,
    codec: Codec,
    plan_i_from_j: WarpPlan | None,
    plan_j_from_i: WarpPlan | None,
) -> PairLoss:
    """Symmetric decoded-space reconstruction loss between two views, each
    direction normalized by its valid-pixel count."""
    total = 0.0
    counts = []
    for x_a, x_b, plan in ((x_i, x_j, plan_i_from_j), (x_j, x_i, plan_j_from_i)):
        r, _, n = _directed_residual(x_a, x_b, codec, plan)
        counts.append(n)
        if n > 0:
            total += float((r**2).sum()) / n
    if all(c == 0 for c in counts):
        return PairLoss(0.0, empty_overlap=True)
    return PairLoss(total)


def latent_pair_grad(
    x_i: np.ndarray,
    x_j: np.ndarray,
    codec: Codec,
    plan_i_from_j: WarpPlan | None,
    plan_j_from_i: WarpPlan | None,
) -> tuple[np.ndarray, np.ndarray, PairLoss]:
    """Analytic gradient of latent_pair_loss for linear codecs."""
    g_i = np.zeros(x_i.shape, dtype=np.float64)
    g_j = np.zeros(x_j.shape, dtype=np.float64)
    total = 0.0
    counts = []
    for x_a, x_b, plan, g_a, g_b in (
        (x_i, x_j, plan_i_from_j, g_i, g_j),
        (x_j, x_i, plan_j_from_i, g_j, g_i),
    ):
        r, mask, n = _directed_residual(x_a, x_b, codec, plan)
        counts.append(n)
        if n == 0:
            continue
        total += float((r**2).sum()) / n
        scaled = (2.0 / n) * r
        g_a += codec.decode_adjoint(scaled)
        g_b -= codec.decode_adjoint(_warp_adjoint(plan, scaled))
    loss = PairLoss(total, empty_overlap=all(c == 0 for c in counts))
    return g_i, g_j, loss


def finite_difference_pair_grad(
    x_i, x_j, codec, plan_i_from_j, plan_j_from_i, epsilon: float = 1e-4
):
    """Central-difference gradient; the slow oracle for the analytic path."""

    def loss_at(a, b):
        return latent_pair_loss(a, b, codec, plan_i_from_j, plan_j_from_i).value

    grads = []
    for which in (0, 1):
        x = np.array((x_i, x_j)[which], dtype=np.float64)
        g = np.zeros_like(x)
        flat = x.ravel()
        gf = g.ravel()
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            hi = loss_at(x, x_j) if which == 0 else loss_at(x_i, x)
            flat[k] = orig - epsilon
            lo = loss_at(x, x_j) if which == 0 else loss_at(x_i, x)
            flat[k] = orig
            gf[k] = (hi - lo) / (2.0 * epsilon)
        grads.append(g)
    base = latent_pair_loss(x_i, x_j, codec, plan_i_from_j, plan_j_from_i)
    return grads[0], grads[1], base


def optimize_pair(
    x_i: np.ndarray,
    x_j: np.ndarray,
    codec: Codec,
    plan_i_from_j: WarpPlan | None,
    plan_j_from_i: WarpPlan | None,
    config: OptimizerConfig,
    lock_i: bool = False,
    lock_j: bool = False,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Descend the pair loss for a fixed number of iterations with step
    halving on non-decrease; locked latents are constants. Returns the new
    latents and the accepted loss trace (non-increasing)."""
    config.validate()
    if lock_i and lock_j:
        return x_i, x_j, []
    grad_fn = (
        latent_pair_grad
        if config.gradient == "analytic"
        else lambda a, b, c, p, q: finite_difference_pair_grad(a, b, c, p, q, config.fd_epsilon)
    )
    cur_i = np.asarray(x_i, np.float64)
    cur_j = np.asarray(x_j, np.float64)
    step = config.step_size
    trace: list[float] = []
    for _ in range(config.iterations):
        g_i, g_j, loss = grad_fn(cur_i, cur_j, codec, plan_i_from_j, plan_j_from_i)
        if loss.empty_overlap:
            return x_i, x_j, []
        if not trace:
            trace.append(loss.value)
        if loss.value == 0.0:
            break
        accepted = False
        for _ in range(config.max_halvings + 1):
            trial_i = cur_i if lock_i else cur_i - step * g_i
            trial_j = cur_j if lock_j else cur_j - step * g_j
            trial = latent_pair_loss(trial_i, trial_j, codec, plan_i_from_j, plan_j_from_i)
            if trial.value < loss.value * (1.0 - 1e-12):
                cur_i, cur_j = trial_i, trial_j
                trace.append(trial.value)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    out_i = x_i if lock_i else cur_i.astype(np.float32)
    out_j = x_j if lock_j else cur_j.astype(np.float32)
    return out_i, out_j, trace


def _ring_pairs(rig: ViewRig) -> list[tuple[int, int]]:
    n = rig.num_per_track
    pairs = [(i, (i + 1) % n) for i in range(n)]
    pairs += [(n + i, n + (i + 1) % n) for i in range(n)]
    return pairs


def _azimuth_close(az: float, target: float, tol: float = 1e-6) -> bool:
    d = abs(az - target) % 360.0
    return min(d, 360.0 - d) <= tol


def update_locks(
    state: MultiViewState,
    rig: ViewRig,
    policy: SamplingPolicy,
    num_steps: int,
) -> MultiViewState:
    """Progressive locking: front/back from the first event, side views once
    the elapsed fraction passes the policy threshold. Locks never release."""
    elapsed = (num_steps - state.timestep) / num_steps
    views = []
    for v in state.views:
        az = rig.azimuth(v.view_id)
        locked = v.locked
        if policy.lock_front_back_first_event and (
            _azimuth_close(az, 0.0) or _azimuth_close(az, 180.0)
        ):
            locked = True
        if elapsed >= policy.lock_sides_fraction and (
            _azimuth_close(az, 90.0) or _azimuth_close(az, 270.0)
        ):
            locked = True
        views.append(replace(v, locked=locked))
    return MultiViewState(views, state.timestep)


def optimization_event(
    state: MultiViewState,
    rig: ViewRig,
    policy: SamplingPolicy,
    config: OptimizerConfig,
    codec: Codec,
    plan_lookup: PlanLookup,
    num_steps: int,
    trace_sink: list | None = None,
) -> MultiViewState:
    """One optimization event: lock updates, same-track adjacent pairs on
    both tracks, then cross-track pairs with the closeup latent as a fixed
    reference."""
    state = update_locks(state, rig, policy, num_steps)
    latents = {v.view_id: v.latent for v in state.views}
    locked = {v.view_id: v.locked for v in state.views}

    def run_pair(i: int, j: int, lock_i: bool, lock_j: bool):
        if lock_i and lock_j:
            return
        xi, xj, trace = optimize_pair(
            latents[i], latents[j], codec,
            plan_lookup(i, j), plan_lookup(j, i),
            config, lock_i=lock_i, lock_j=lock_j,
        )
        latents[i], latents[j] = xi, xj
        if trace_sink is not None and trace:
            trace_sink.append(
                {"timestep": state.timestep, "pair": (i, j), "loss_start": trace[0], "loss_end": trace[-1]}
            )

    for i, j in _ring_pairs(rig):
        run_pair(i, j, locked[i], locked[j])
    for i in range(rig.num_per_track):
        j = rig.partner(i)
        run_pair(i, j, locked[i], True)  # the closeup latent is the reference

    views = [replace(v, latent=latents[v.view_id]) for v in state.views]
    return MultiViewState(views, state.timestep)


def make_plan_cache(build: Callable[[int, int], "WarpPlan | None"]) -> PlanLookup:
    cache: dict[tuple[int, int], WarpPlan | None] = {}

    def lookup(i: int, j: int):
        key = (i, j)
        if key not in cache:
            cache[key] = build(i, j)
        return cache[key]

    return lookup
