"""Cross-view signal transport: image-latent codecs, depth-based warping with
a shared visibility test, and the weighted occlusion maps that gate blending.

Warping is destination-driven: each target pixel looks up its own surface
point, projects it into the source view, and bilinearly samples there if the
point survives a depth test against the source depth buffer. The occlusion
map is zero exactly where that test fails, so warp masks and occlusion maps
can never disagree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .scene import Camera, GBuffer

DEFAULT_W_S = 0.2
DEFAULT_W_C = 1.0
DEFAULT_REL_TOL = 1e-3


class Codec:
    """Contract between image space (H, W, C) and latent space (C, h, w)."""

    ratio: int = 1

    def encode(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode(self, latent: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode_adjoint(self, image_grad: np.ndarray) -> np.ndarray:
        """Transpose of decode as a linear map; used by latent optimization."""
        raise NotImplementedError

    def latent_shape(self, height: int, width: int, channels: int = 3) -> tuple[int, int, int]:
        return (channels, height // self.ratio, width // self.ratio)


class IdentityCodec(Codec):
    """Latent equals image (channel-first); makes every transport claim exact.

    Codecs preserve their input dtype: the sampler feeds float32 state, the
    latent optimizer runs its loss in float64 for clean finite differences.
    """

    ratio = 1

    def encode(self, image):
        return np.ascontiguousarray(np.transpose(image, (2, 0, 1)))

    def decode(self, latent):
        return np.ascontiguousarray(np.transpose(latent, (1, 2, 0)))

    def decode_adjoint(self, image_grad):
        return np.ascontiguousarray(np.transpose(image_grad, (2, 0, 1)), dtype=np.float64)


class PoolCodec(Codec):
    """Area-pool encode with block-replicate decode.

    Replication is the scaled transpose of the pooling matrix, which makes
    encode(decode(x)) = x exactly; a smooth upsampler would break that
    projection property.
    """

    def __init__(self, ratio: int = 8):
        if ratio < 1:
            raise ContractError("pool codec ratio must be >= 1")
        self.ratio = ratio

    def encode(self, image):
        h, w, c = image.shape
        r = self.ratio
        if h % r or w % r:
            raise ContractError(f"image {h}x{w} not divisible by codec ratio {r}")
        blocks = np.asarray(image, dtype=np.float64).reshape(h // r, r, w // r, r, c)
        pooled = np.ascontiguousarray(blocks.mean(axis=(1, 3)).transpose(2, 0, 1))
        return pooled.astype(np.asarray(image).dtype)

    def decode(self, latent):
        img = np.repeat(np.repeat(np.asarray(latent), self.ratio, 1), self.ratio, 2)
        return np.ascontiguousarray(img.transpose(1, 2, 0))

    def decode_adjoint(self, image_grad):
        h, w, c = image_grad.shape
        r = self.ratio
        blocks = np.asarray(image_grad, dtype=np.float64).reshape(h // r, r, w // r, r, c)
        return np.ascontiguousarray(blocks.sum(axis=(1, 3)).transpose(2, 0, 1))


def make_codec(name: str, ratio: int = 8) -> Codec:
    if name == "identity":
        return IdentityCodec()
    if name == "pool":
        return PoolCodec(ratio)
    raise ContractError(f"unknown codec {name!r}")


@dataclass
class WarpResult:
    image: np.ndarray  # zero-filled where mask is 0
    mask: np.ndarray  # (H, W) bool


@dataclass
class WarpPlan:
    """Precomputed gather from one source view into one target view."""

    valid: np.ndarray  # (H, W) bool
    sample_idx: np.ndarray  # (P, 4) flat source-pixel indices for valid pixels
    sample_w: np.ndarray  # (P, 4) convex weights, rows sum to 1
    occlusion: np.ndarray  # (H, W) >= 0, zero exactly where valid is False
    src_shape: tuple[int, int]

    def apply(self, src_image: np.ndarray) -> WarpResult:
        h, w = self.valid.shape
        sh, sw = self.src_shape
        if src_image.shape[:2] != (sh, sw):
            raise ContractError(
                f"warp: source image {src_image.shape[:2]} vs expected {(sh, sw)}"
            )
        flat = np.asarray(src_image, dtype=np.float64).reshape(sh * sw, -1)
        gathered = np.einsum("pk,pkc->pc", self.sample_w, flat[self.sample_idx])
        out_shape = (h, w) + src_image.shape[2:]
        out = np.zeros((h * w,) + flat.shape[1:2])
        out[self.valid.ravel()] = gathered
        return WarpResult(
            out.reshape(out_shape).astype(np.asarray(src_image).dtype), self.valid.copy()
        )

    def adjoint_apply(self, tgt_grad: np.ndarray) -> np.ndarray:
        """Transpose of apply as a linear map: scatter target-pixel gradients
        back onto the source footprints."""
        h, w = self.valid.shape
        sh, sw = self.src_shape
        if tgt_grad.shape[:2] != (h, w):
            raise ContractError(
                f"warp adjoint: gradient {tgt_grad.shape[:2]} vs expected {(h, w)}"
            )
        flat_grad = np.asarray(tgt_grad, dtype=np.float64).reshape(h * w, -1)
        g = flat_grad[self.valid.ravel()]  # (P, C)
        out = np.zeros((sh * sw, g.shape[1]))
        np.add.at(out, self.sample_idx.ravel(), (self.sample_w[..., None] * g[:, None, :]).reshape(-1, g.shape[1]))
        return out.reshape((sh, sw) + tgt_grad.shape[2:])


def build_warp_plan(
    tgt_gbuf: GBuffer,
    src_gbuf: GBuffer,
    src_cam: Camera,
    w_s: float = DEFAULT_W_S,
    w_c: float = DEFAULT_W_C,
    abs_tol: float | None = None,
    rel_tol: float = DEFAULT_REL_TOL,
    scene_diagonal: float = 1.0,
) -> WarpPlan:
    """Project the target's surface points into the source view and fix the
    bilinear footprints, visibility, and occlusion weights once."""
    if w_s < 0 or w_c <= 0:
        raise ContractError("occlusion weights need w_s >= 0 and w_c > 0")
    if abs_tol is None:
        abs_tol = 1e-4 * scene_diagonal
    h, w = tgt_gbuf.resolution
    sh, sw = src_gbuf.resolution

    covered = tgt_gbuf.mask
    pts = tgt_gbuf.hits[covered]
    uv, z = src_cam.project(pts)
    gx = uv[:, 0] - 0.5
    gy = uv[:, 1] - 0.5
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = gx - x0
    fy = gy - y0

    corner_w = np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1
    )
    xs = np.stack([x0, x0 + 1, x0, x0 + 1], axis=1)
    ys = np.stack([y0, y0, y0 + 1, y0 + 1], axis=1)
    in_bounds = (xs >= 0) & (xs < sw) & (ys >= 0) & (ys < sh)
    xs_c = np.clip(xs, 0, sw - 1)
    ys_c = np.clip(ys, 0, sh - 1)
    flat_idx = ys_c * sw + xs_c

    # depth from covered source pixels only, weights renormalized over them
    src_depth = src_gbuf.depth.ravel()[flat_idx]
    src_cov = src_gbuf.mask.ravel()[flat_idx] & in_bounds
    w_cov = np.where(src_cov, corner_w, 0.0)
    w_cov_sum = w_cov.sum(axis=1)
    has_depth = w_cov_sum > 1e-12
    depth_num = (w_cov * np.where(src_cov, src_depth, 0.0)).sum(axis=1)
    depth_sample = np.where(has_depth, depth_num / np.where(has_depth, w_cov_sum, 1.0), np.inf)
    tol = np.maximum(abs_tol, rel_tol * z)
    visible = (z > 0) & has_depth & (np.abs(z - depth_sample) <= tol)

    # surface orientation: a point whose normal faces away from the source
    # camera is on a hidden side even when nothing occludes it (thin sheets)
    cam_pos = src_cam.position
    d = cam_pos[None, :] - pts
    d_norm = np.linalg.norm(d, axis=1)
    incidence = np.einsum(
        "pc,pc->p", tgt_gbuf.normal[covered], d / np.maximum(d_norm, 1e-30)[:, None]
    )
    visible &= incidence > 0.0

    # color footprint: renormalize over in-bounds corners
    w_img = np.where(in_bounds, corner_w, 0.0)
    w_img_sum = w_img.sum(axis=1)
    visible &= w_img_sum > 1e-12
    w_img = w_img / np.where(w_img_sum > 1e-12, w_img_sum, 1.0)[:, None]

    valid = np.zeros((h, w), dtype=bool)
    valid[covered] = visible

    occ_vals = np.where(visible, incidence * w_s + w_c, 0.0)
    occlusion = np.zeros((h, w))
    occlusion[covered] = occ_vals

    return WarpPlan(
        valid=valid,
        sample_idx=flat_idx[visible].astype(np.int32),
        sample_w=w_img[visible],
        occlusion=occlusion,
        src_shape=(sh, sw),
    )


def incidence_weights(normals, to_camera_dirs, w_s=DEFAULT_W_S, w_c=DEFAULT_W_C):
    """The visible branch of the occlusion weighting, on unit vectors."""
    normals = np.asarray(normals, dtype=np.float64)
    dirs = np.asarray(to_camera_dirs, dtype=np.float64)
    return np.einsum("...c,...c->...", normals, dirs) * w_s + w_c


def warp_image(src_image: np.ndarray, plan: WarpPlan) -> WarpResult:
    return plan.apply(src_image)


def occlusion_weights(plan: WarpPlan) -> np.ndarray:
    return plan.occlusion


def downsample_area(arr: np.ndarray, ratio: int) -> np.ndarray:
    """Block-mean downsample of a (H, W) map; identity for ratio 1."""
    if ratio == 1:
        return np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    if h % ratio or w % ratio:
        raise ContractError(f"map {h}x{w} not divisible by ratio {ratio}")
    return np.asarray(arr, np.float64).reshape(h // ratio, ratio, w // ratio, ratio).mean(axis=(1, 3))


def transport_signal(
    latent: np.ndarray, codec: Codec, plan: WarpPlan
) -> tuple[np.ndarray, np.ndarray]:
    """Decode-warp-encode a latent along a plan; returns the transported
    latent and its validity mask at latent resolution (area-averaged)."""
    warped = plan.apply(codec.decode(latent))
    mask_lat = downsample_area(warped.mask.astype(np.float64), codec.ratio)
    return codec.encode(warped.image), mask_lat
