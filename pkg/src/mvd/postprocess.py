"""Geometry refinement driven by normal-map gradients, vertex-color baking,
and two-stage free-view blending over a mesh-baked base render.

The refinement loss compares Sobel gradients of rendered and target normal
maps, which makes it insensitive to constant bias in imperfect normal
predictions. Rendering gradients use a frozen pixel-to-face assignment per
iteration: only the face normals are differentiated, silhouettes are not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, NumericalError
from .scene import Camera, GBuffer, TriMesh, ViewRig, rasterize
from .warpfield import build_warp_plan

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


@dataclass
class NormalTarget:
    """Per-view target normal map (camera-frame vectors) with coverage."""

    normals: np.ndarray  # (H, W, 3), norm <= 1 + tolerance where covered
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self) -> None:
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.normals.shape[:2] != self.mask.shape or self.normals.shape[2] != 3:
            raise ConfigurationError("normal target: normals (H,W,3) and mask (H,W)")


def _pad_index_maps(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    iy = np.clip(np.arange(-1, h + 1), 0, h - 1)
    ix = np.clip(np.arange(-1, w + 1), 0, w - 1)
    return iy, ix


def _correlate3(padded: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = padded.shape[0] - 2, padded.shape[1] - 2
    out = np.zeros((h, w) + padded.shape[2:])
    for a in range(3):
        for b in range(3):
            if kernel[a, b] != 0.0:
                out += kernel[a, b] * padded[a : a + h, b : b + w]
    return out


def _correlate3_adjoint(grad: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = grad.shape[:2]
    out = np.zeros((h + 2, w + 2) + grad.shape[2:])
    for a in range(3):
        for b in range(3):
            if kernel[a, b] != 0.0:
                out[a : a + h, b : b + w] += kernel[a, b] * grad
    return out


def sobel_gradient(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel responses with replicate border padding; per channel."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
        squeeze = True
    else:
        squeeze = False
    h, w = img.shape[:2]
    if h < 3 or w < 3:
        raise ContractError(f"sobel: image must be at least 3x3, got {h}x{w}")
    iy, ix = _pad_index_maps(h, w)
    padded = img[iy][:, ix]
    gx = _correlate3(padded, SOBEL_X)
    gy = _correlate3(padded, SOBEL_Y)
    if squeeze:
        return gx[..., 0], gy[..., 0]
    return gx, gy


def sobel_gradient_adjoint(gx_bar: np.ndarray, gy_bar: np.ndarray) -> np.ndarray:
    """Transpose of sobel_gradient including the replicate-padding fold."""
    h, w = gx_bar.shape[:2]
    d_pad = _correlate3_adjoint(gx_bar, SOBEL_X) + _correlate3_adjoint(gy_bar, SOBEL_Y)
    iy, ix = _pad_index_maps(h, w)
    out = np.zeros((h, w) + gx_bar.shape[2:])
    yy, xx = np.meshgrid(iy, ix, indexing="ij")
    np.add.at(out, (yy.ravel(), xx.ravel()), d_pad.reshape(-1, *gx_bar.shape[2:]))
    return out


def _erode3(mask: np.ndarray) -> np.ndarray:
    """Pixels whose replicate-padded 3x3 window is fully covered."""
    h, w = mask.shape
    iy, ix = _pad_index_maps(h, w)
    padded = mask[iy][:, ix]
    out = np.ones((h, w), dtype=bool)
    for a in range(3):
        for b in range(3):
            out &= padded[a : a + h, b : b + w]
    return out


def _vertex_normal_frame(mesh: TriMesh):
    """Face cross products, unnormalized vertex normal sums, and unit vertex
    normals; the differentiable pieces of smooth shading."""
    v = mesh.vertices
    f = mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    w = np.zeros_like(v)
    for k in range(3):
        np.add.at(w, f[:, k], cross)
    w_norm = np.maximum(np.linalg.norm(w, axis=1, keepdims=True), 1e-30)
    return cross, w, w / w_norm


def _shade_smooth(mesh: TriMesh, gbuf: GBuffer, n_vert: np.ndarray) -> np.ndarray:
    """World-frame interpolated normal map under a frozen assignment."""
    out = np.zeros(gbuf.normal.shape)
    m = gbuf.mask
    if m.any():
        tri = mesh.faces[gbuf.face_id[m]]
        u = np.einsum("pk,pkc->pc", gbuf.bary[m], n_vert[tri])
        out[m] = u / np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-30)
    return out


def render_camera_normals(
    mesh: TriMesh, cam: Camera, gbuf: GBuffer | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame smooth-shaded normal map of the mesh plus its coverage.

    Smooth (vertex-interpolated) shading keeps the refinement objective
    continuous when pixel-to-face assignments flip between iterations; flat
    shading stalls descent on assignment discontinuities.
    """
    if gbuf is None:
        gbuf = rasterize(mesh, cam)
    _, _, n_vert = _vertex_normal_frame(mesh)
    world = _shade_smooth(mesh, gbuf, n_vert)
    img = np.zeros(gbuf.normal.shape)
    img[gbuf.mask] = world[gbuf.mask] @ cam.rotation.T
    return img, gbuf.mask


def normal_refine_loss(
    mesh: TriMesh,
    cams: list[Camera],
    targets: list[NormalTarget],
    frozen: list[GBuffer] | None = None,
) -> float:
    """Sum over views of the mean squared Sobel-gradient difference between
    rendered and target normal maps on the (eroded) shared coverage.

    With ``frozen`` buffers the pixel-to-face assignment is fixed but face
    normals are still recomputed from the current vertices, which is the
    differentiable objective each refinement iteration descends.
    """
    if len(targets) != len(cams):
        raise ConfigurationError(
            f"normal targets for {len(targets)} views but rig has {len(cams)}"
        )
    _, _, n_vert = _vertex_normal_frame(mesh)
    total = 0.0
    for k, cam in enumerate(cams):
        gbuf = frozen[k] if frozen is not None else rasterize(mesh, cam)
        mask = gbuf.mask
        world = _shade_smooth(mesh, gbuf, n_vert)
        rendered = np.zeros(gbuf.normal.shape)
        rendered[mask] = world[mask] @ cam.rotation.T
        shared = _erode3(mask & targets[k].mask)
        if not shared.any():
            continue
        gx_r, gy_r = sobel_gradient(rendered)
        gx_t, gy_t = sobel_gradient(targets[k].normals)
        diff = ((gx_r - gx_t) ** 2 + (gy_r - gy_t) ** 2).sum(axis=-1)
        total += float(diff[shared].sum()) / int(shared.sum())
    return total


def normal_refine_grad(
    mesh: TriMesh,
    cams: list[Camera],
    targets: list[NormalTarget],
    frozen: list[GBuffer],
) -> tuple[np.ndarray, float]:
    """Analytic vertex gradient of the smooth-shaded refinement loss under
    frozen pixel-to-face assignments and barycentric weights."""
    v = mesh.vertices
    f = mesh.faces
    cross, w_sum, n_vert = _vertex_normal_frame(mesh)

    grad_nvert = np.zeros_like(n_vert)  # dL/d(unit vertex normal)
    total = 0.0
    for k, cam in enumerate(cams):
        gbuf = frozen[k]
        mask = gbuf.mask
        world = _shade_smooth(mesh, gbuf, n_vert)
        rendered = np.zeros(gbuf.normal.shape)
        rendered[mask] = world[mask] @ cam.rotation.T
        shared = _erode3(mask & targets[k].mask)
        if not shared.any():
            continue
        n_px = int(shared.sum())
        gx_r, gy_r = sobel_gradient(rendered)
        gx_t, gy_t = sobel_gradient(targets[k].normals)
        rx = np.where(shared[..., None], gx_r - gx_t, 0.0)
        ry = np.where(shared[..., None], gy_r - gy_t, 0.0)
        total += float((rx**2 + ry**2).sum()) / n_px
        d_img = sobel_gradient_adjoint(2.0 * rx / n_px, 2.0 * ry / n_px)
        d_world = d_img[mask] @ cam.rotation  # (P, 3)
        # back through the per-pixel normalize of u = sum_c b_c * n_vert
        tri = f[gbuf.face_id[mask]]
        bw = gbuf.bary[mask]
        u = np.einsum("pk,pkc->pc", bw, n_vert[tri])
        u_norm = np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-30)
        n_pix = u / u_norm
        d_u = (d_world - n_pix * (d_world * n_pix).sum(axis=1, keepdims=True)) / u_norm
        for c in range(3):
            np.add.at(grad_nvert, tri[:, c], bw[:, c, None] * d_u)

    # back through the vertex-normal normalize of w = sum of adjacent crosses
    w_norm = np.maximum(np.linalg.norm(w_sum, axis=1, keepdims=True), 1e-30)
    d_w = (grad_nvert - n_vert * (grad_nvert * n_vert).sum(axis=1, keepdims=True)) / w_norm
    # each face's cross feeds the w of its three vertices
    g_c = d_w[f[:, 0]] + d_w[f[:, 1]] + d_w[f[:, 2]]
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    g_e1 = np.cross(e2, g_c)
    g_e2 = np.cross(g_c, e1)
    grad_v = np.zeros_like(v)
    np.add.at(grad_v, f[:, 0], -(g_e1 + g_e2))
    np.add.at(grad_v, f[:, 1], g_e1)
    np.add.at(grad_v, f[:, 2], g_e2)
    return grad_v, total


def _adjacency(mesh: TriMesh) -> list[list[int]]:
    adj: list[set[int]] = [set() for _ in range(len(mesh.vertices))]
    for a, b, c in mesh.faces:
        adj[a].update((b, c))
        adj[b].update((a, c))
        adj[c].update((a, b))
    return [sorted(s) for s in adj]


def laplacian_energy_grad(mesh: TriMesh, vertices: np.ndarray, adj) -> tuple[float, np.ndarray]:
    """Uniform-Laplacian smoothness energy and its gradient."""
    lap = np.zeros_like(vertices)
    for i, nb in enumerate(adj):
        if nb:
            lap[i] = vertices[i] - vertices[nb].mean(axis=0)
    energy = float((lap**2).sum())
    grad = 2.0 * lap.copy()
    for i, nb in enumerate(adj):
        if nb:
            grad[nb] -= 2.0 * lap[i] / len(nb)
    return energy, grad


def refine_mesh(
    mesh: TriMesh,
    cams: list[Camera],
    targets: list[NormalTarget],
    iterations: int = 60,
    step_size: float = 1e-3,
    lambda_reg: float = 0.1,
    max_halvings: int = 6,
) -> tuple[TriMesh, list[dict]]:
    """Iterative descent on the gradient-space normal loss plus Laplacian
    smoothness; per-iteration vertex displacement is capped at 1% of the
    bounding-box diagonal and the accepted total loss never increases."""
    verts = mesh.vertices.copy()
    adj = _adjacency(mesh)
    cap = 0.01 * mesh.bbox_diagonal()
    trace: list[dict] = []
    step = step_size

    def total_loss(vv: np.ndarray) -> tuple[float, float, float]:
        m = TriMesh(vv, mesh.faces, mesh.colors)
        data = normal_refine_loss(m, cams, targets)
        reg, _ = laplacian_energy_grad(m, vv, adj)
        return data + lambda_reg * reg, data, reg

    cur_total, cur_data, cur_reg = total_loss(verts)
    stalls = 0
    for it in range(iterations):
        m = TriMesh(verts, mesh.faces, mesh.colors)
        frozen = [rasterize(m, cam) for cam in cams]
        g_data, _ = normal_refine_grad(m, cams, targets, frozen)
        _, g_reg = laplacian_energy_grad(m, verts, adj)
        g = g_data + lambda_reg * g_reg
        if not np.all(np.isfinite(g)):
            raise NumericalError("refine_mesh: non-finite gradient; keeping last mesh")
        accepted = False
        for _ in range(max_halvings + 1):
            delta = -step * g
            norms = np.linalg.norm(delta, axis=1, keepdims=True)
            over = norms > cap
            if over.any():
                delta = np.where(over, delta * (cap / np.maximum(norms, 1e-30)), delta)
            trial = verts + delta
            t_total, t_data, t_reg = total_loss(trial)
            if math.isfinite(t_total) and t_total < cur_total * (1.0 - 1e-12):
                verts = trial
                cur_total, cur_data, cur_reg = t_total, t_data, t_reg
                accepted = True
                step = min(step * 1.3, step_size * 8.0)  # regrow after success
                break
            step *= 0.5
        trace.append(
            {"iteration": it, "total": cur_total, "data": cur_data, "reg": cur_reg, "step": step}
        )
        stalls = 0 if accepted else stalls + 1
        if stalls >= 3:
            break
    return TriMesh(verts, mesh.faces, mesh.colors), trace


def bake_vertex_colors(
    mesh: TriMesh,
    cams: list[Camera],
    images: list[np.ndarray],
    w_s: float = 0.2,
    w_c: float = 1.0,
    rel_tol: float = 1e-2,
) -> TriMesh:
    """Per-vertex color as the incidence-weighted average over the views that
    see the vertex; unseen vertices inherit colors along mesh edges."""
    if len(images) != len(cams):
        raise ConfigurationError("bake: need one image per camera")
    v = mesh.vertices
    vn = mesh.vertex_normals()
    acc = np.zeros((len(v), 3))
    wacc = np.zeros(len(v))
    diag = mesh.bbox_diagonal()
    for cam, img in zip(cams, images):
        gbuf = rasterize(mesh, cam)
        uv, z = cam.project(v)
        h, w = gbuf.resolution
        gx = uv[:, 0] - 0.5
        gy = uv[:, 1] - 0.5
        x0 = np.floor(gx).astype(int)
        y0 = np.floor(gy).astype(int)
        inb = (z > 0) & (x0 >= 0) & (x0 + 1 < w) & (y0 >= 0) & (y0 + 1 < h)
        fx = gx - x0
        fy = gy - y0
        depth = np.full(len(v), np.inf)
        col = np.zeros((len(v), 3))
        if inb.any():
            idx = np.flatnonzero(inb)
            cw = np.stack(
                [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1
            )[idx]
            xs = np.stack([x0, x0 + 1, x0, x0 + 1], axis=1)[idx]
            ys = np.stack([y0, y0, y0 + 1, y0 + 1], axis=1)[idx]
            dsamp = gbuf.depth[ys, xs]
            cov = gbuf.mask[ys, xs]
            wc = np.where(cov, cw, 0.0)
            ws = wc.sum(axis=1)
            ok = ws > 1e-12
            dval = np.where(cov, dsamp, 0.0)
            # footprints with no covered corner keep depth = inf and the
            # one-sided occlusion test below must then fail, not pass
            depth[idx[ok]] = (wc * dval).sum(axis=1)[ok] / ws[ok]
            inb = inb.copy()
            inb[idx[~ok]] = False
            flat = np.asarray(img, np.float64).reshape(h * w, -1)
            col[idx] = np.einsum("pk,pkc->pc", cw, flat[ys * w + xs])
        d = cam.position[None, :] - v
        dist = np.linalg.norm(d, axis=1)
        incid = np.einsum("vc,vc->v", vn, d / np.maximum(dist[:, None], 1e-30))
        # one-sided test: occluded only if the depth buffer is clearly closer
        tol = np.maximum(1e-4 * diag, rel_tol * np.abs(z))
        visible = inb & (incid > 0) & (z - depth <= tol)
        wgt = np.where(visible, incid * w_s + w_c, 0.0)
        acc += wgt[:, None] * col
        wacc += wgt
    colors = np.zeros((len(v), 3))
    seen = wacc > 0
    colors[seen] = acc[seen] / wacc[seen, None]
    # propagate along edges to vertices no view saw
    adj = _adjacency(mesh)
    todo = ~seen
    while todo.any():
        progressed = False
        for i in np.flatnonzero(todo):
            nb = [j for j in adj[i] if seen[j]]
            if nb:
                colors[i] = colors[nb].mean(axis=0)
                seen[i] = True
                todo[i] = False
                progressed = True
        if not progressed:
            break
    return TriMesh(mesh.vertices, mesh.faces, np.clip(colors, 0.0, 1.0))


def heuristic_blend_weights(
    disp_a: np.ndarray,
    disp_b: np.ndarray,
    valid_a: np.ndarray,
    valid_b: np.ndarray,
    angle_a: float,
    angle_b: float,
    tau: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic stand-in for a learned weight network: validity times an
    angular preference times an exponential disparity falloff, normalized so
    the two weights sum to at most 1 (the rest falls back to the base)."""
    wa = valid_a.astype(np.float64) * max(math.cos(angle_a), 0.0) * np.exp(
        -np.abs(disp_a) / max(tau, 1e-12)
    )
    wb = valid_b.astype(np.float64) * max(math.cos(angle_b), 0.0) * np.exp(
        -np.abs(disp_b) / max(tau, 1e-12)
    )
    s = wa + wb
    over = s > 1.0
    scale = np.where(over, s, 1.0)
    return wa / scale, wb / scale


def _nearest_views(rig: ViewRig, cam: Camera, track: str) -> list[int]:
    ids = [i for i in range(len(rig)) if rig.track_of(i) == track]
    f = cam.forward
    angs = []
    for i in ids:
        c = math.acos(float(np.clip(f @ rig.cameras[i].forward, -1.0, 1.0)))
        angs.append((c, i))
    angs.sort()
    return [i for _, i in angs[:2]], [a for a, _ in angs[:2]]


def blend_novel_view(
    novel_cam: Camera,
    rig: ViewRig,
    images: list[np.ndarray],
    baked: TriMesh,
    weight_provider=None,
    tau: float | None = None,
    rig_gbufs: list[GBuffer] | None = None,
) -> np.ndarray:
    """Two-stage compositing at a novel pose: distant-track views first over
    the mesh-baked base render, then the closeup track over that result."""
    from .scene import FULL_BODY, UPPER_BODY

    if rig.num_per_track < 2:
        raise ConfigurationError("free-view blending needs at least two views per track")
    provider = weight_provider or heuristic_blend_weights
    novel_gbuf = rasterize(baked, novel_cam)
    base = novel_gbuf.color if novel_gbuf.color is not None else np.zeros(
        (novel_cam.height, novel_cam.width, 3)
    )
    d_novel = np.where(novel_gbuf.mask, novel_gbuf.depth, 0.0)
    depth_span = float(d_novel.max() - d_novel[novel_gbuf.mask].min()) if novel_gbuf.mask.any() else 1.0
    tau_eff = tau if tau is not None else 0.05 * max(depth_span, 1e-6)
    diag = baked.bbox_diagonal()

    if rig_gbufs is None:
        rig_gbufs = [rasterize(baked, c) for c in rig.cameras]

    out = np.asarray(base, np.float64)
    for track in (FULL_BODY, UPPER_BODY):
        (ja, jb), (ang_a, ang_b) = _nearest_views(rig, novel_cam, track)
        plans = [
            build_warp_plan(novel_gbuf, rig_gbufs[j], rig.cameras[j], scene_diagonal=diag)
            for j in (ja, jb)
        ]
        warped = [p.apply(np.asarray(images[j], np.float64)) for p, j in zip(plans, (ja, jb))]
        disps = []
        for p, j in zip(plans, (ja, jb)):
            dsrc = np.where(rig_gbufs[j].mask, rig_gbufs[j].depth, 0.0)
            wd = p.apply(dsrc[..., None]).image[..., 0]
            disps.append(np.where(p.valid, np.abs(wd - d_novel), np.inf))
        wa, wb = provider(
            disps[0], disps[1], plans[0].valid, plans[1].valid, ang_a, ang_b, tau_eff
        )
        out = (
            wa[..., None] * warped[0].image
            + wb[..., None] * warped[1].image
            + (1.0 - wa - wb)[..., None] * out
        )
    return out
