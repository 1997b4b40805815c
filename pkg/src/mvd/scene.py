"""Geometry proxy handling: triangle meshes, pinhole cameras, the two-track
view rig, and a small software rasterizer producing per-view G-buffers.

Conventions: world is y-up, azimuth 0 looks from +z toward the origin
("front"), camera frame is x-right / y-down / z-forward, pixel (ix, iy) has
its center at (ix + 0.5, iy + 0.5). Depth is camera-space z in scene units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError

FULL_BODY = "fb"
UPPER_BODY = "ub"

NEIGHBOR_RANGE_DEG = 60.0  # inclusive boundary so N=6 rigs keep their neighbors


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int32
    colors: np.ndarray | None = None  # (V, 3) in [0, 1]

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int32)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ConfigurationError("mesh vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ConfigurationError("mesh faces must be (F, 3)")
        if not np.all(np.isfinite(self.vertices)):
            raise ConfigurationError("mesh vertices must be finite")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ConfigurationError("mesh face index out of range")
        f = self.faces
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ConfigurationError("mesh contains a degenerate face")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64)
            if self.colors.shape != self.vertices.shape:
                raise ConfigurationError("vertex colors must be (V, 3)")

    def face_normals(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(norm, 1e-30)

    def vertex_normals(self) -> np.ndarray:
        fn = np.cross(
            self.vertices[self.faces[:, 1]] - self.vertices[self.faces[:, 0]],
            self.vertices[self.faces[:, 2]] - self.vertices[self.faces[:, 0]],
        )  # area-weighted
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        return vn / np.maximum(norm, 1e-30)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world -> camera
    translation: np.ndarray  # (3,)
    azimuth_deg: float = 0.0

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("camera focal lengths must be positive")
        rtr = self.rotation @ self.rotation.T
        if np.max(np.abs(rtr - np.eye(3))) > 1e-6:
            raise ConfigurationError("camera rotation must be orthonormal")

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2]

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points -> (pixel uv, camera-space depth z)."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        safe = np.where(z == 0.0, 1e-30, z)
        u = self.fx * pc[..., 0] / safe + self.cx
        v = self.fy * pc[..., 1] / safe + self.cy
        return np.stack([u, v], axis=-1), z

    def pixel_ray_dirs(self) -> np.ndarray:
        """Unnormalized world ray directions with unit camera-z component, so
        a ray parameter t equals camera-space depth."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        d = np.stack(
            [
                (xs + 0.5 - self.cx) / self.fx,
                (ys + 0.5 - self.cy) / self.fy,
                np.ones_like(xs, dtype=np.float64),
            ],
            axis=-1,
        )
        return d @ self.rotation  # rows of R are camera axes, so this is R^T d


def look_at_camera(
    position,
    target,
    width: int,
    height: int,
    fov_deg: float = 50.0,
    azimuth_deg: float = 0.0,
) -> Camera:
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    fn = np.linalg.norm(forward)
    if fn < 1e-12:
        raise ConfigurationError("camera position coincides with its target")
    forward = forward / fn
    world_up = np.array([0.0, 1.0, 0.0])
    if abs(forward @ world_up) > 1.0 - 1e-9:
        world_up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, world_up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    translation = -rotation @ position
    fy = (height / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return Camera(
        fx=fy,
        fy=fy,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
        rotation=rotation,
        translation=translation,
        azimuth_deg=azimuth_deg % 360.0,
    )


@dataclass
class ViewRig:
    cameras: list[Camera]
    tracks: list[str]  # FULL_BODY / UPPER_BODY per view
    num_per_track: int

    def __post_init__(self) -> None:
        if len(self.cameras) != 2 * self.num_per_track or len(self.tracks) != len(self.cameras):
            raise ConfigurationError("rig must hold 2N cameras with matching track labels")
        for i in range(self.num_per_track):
            a = self.cameras[i].azimuth_deg
            b = self.cameras[i + self.num_per_track].azimuth_deg
            if min(abs(a - b), 360.0 - abs(a - b)) > 1e-6:
                raise ConfigurationError(f"paired views {i} and {i + self.num_per_track} must share azimuth")

    def __len__(self) -> int:
        return len(self.cameras)

    def track_of(self, i: int) -> str:
        return self.tracks[i]

    def partner(self, i: int) -> int:
        n = self.num_per_track
        return i + n if i < n else i - n

    def azimuth(self, i: int) -> float:
        return self.cameras[i].azimuth_deg


def build_rig(
    center,
    radius_fb: float,
    radius_ub: float,
    num_per_track: int,
    look_target_fb=None,
    look_target_ub=None,
    height_fb: float | None = None,
    height_ub: float | None = None,
    fov_deg: float = 50.0,
    image_size: int = 128,
) -> ViewRig:
    """Two concentric circular camera tracks with azimuth-paired views."""
    if num_per_track < 3:
        raise ConfigurationError(f"rig needs at least 3 views per track, got {num_per_track}")
    if radius_fb <= 0 or radius_ub <= 0:
        raise ConfigurationError("rig radii must be positive")
    center = np.asarray(center, dtype=np.float64)
    look_fb = center if look_target_fb is None else np.asarray(look_target_fb, np.float64)
    look_ub = look_fb if look_target_ub is None else np.asarray(look_target_ub, np.float64)
    h_fb = float(look_fb[1]) if height_fb is None else height_fb
    h_ub = float(look_ub[1]) if height_ub is None else height_ub

    cams: list[Camera] = []
    for radius, look, h in ((radius_fb, look_fb, h_fb), (radius_ub, look_ub, h_ub)):
        for k in range(num_per_track):
            az = 360.0 * k / num_per_track
            rad = math.radians(az)
            pos = np.array(
                [look[0] + radius * math.sin(rad), h, look[2] + radius * math.cos(rad)]
            )
            cams.append(
                look_at_camera(pos, look, image_size, image_size, fov_deg, azimuth_deg=az)
            )
    tracks = [FULL_BODY] * num_per_track + [UPPER_BODY] * num_per_track
    return ViewRig(cams, tracks, num_per_track)


def rig_for_mesh(
    mesh: TriMesh,
    num_per_track: int = 8,
    fov_deg: float = 50.0,
    image_size: int = 128,
    upper_fraction: float = 0.45,
    margin: float = 1.25,
) -> ViewRig:
    """Frame the whole bounding box on the first track and its top portion on
    the second."""
    lo, hi = mesh.bounds()
    center = 0.5 * (lo + hi)
    half_diag = 0.5 * float(np.linalg.norm(hi - lo))
    tan_half = math.tan(math.radians(fov_deg) / 2.0)
    radius_fb = margin * half_diag / tan_half

    ub_lo = lo.copy()
    ub_lo[1] = hi[1] - upper_fraction * (hi[1] - lo[1])
    ub_center = 0.5 * (ub_lo + hi)
    ub_half = 0.5 * float(np.linalg.norm(hi - ub_lo))
    radius_ub = margin * ub_half / tan_half

    return build_rig(
        center,
        radius_fb,
        radius_ub,
        num_per_track,
        look_target_fb=center,
        look_target_ub=ub_center,
        fov_deg=fov_deg,
        image_size=image_size,
    )


def neighbors(rig: ViewRig, i: int) -> list[int]:
    """Source views for target i: same-track views within the angular range
    (ascending distance, index breaks ties) plus the azimuth-paired closeup
    view for full-body targets."""
    if not 0 <= i < len(rig):
        raise ContractError(f"view index {i} out of range")
    mine = rig.azimuth(i)
    track = rig.track_of(i)
    same: list[tuple[float, int]] = []
    for j in range(len(rig)):
        if j == i or rig.track_of(j) != track:
            continue
        d = abs(rig.azimuth(j) - mine)
        d = min(d, 360.0 - d)
        if d <= NEIGHBOR_RANGE_DEG + 1e-9:
            same.append((d, j))
    out = [j for _, j in sorted(same)]
    if track == FULL_BODY:
        out.append(rig.partner(i))
    return out


@dataclass
class GBuffer:
    depth: np.ndarray  # (H, W) float64, +inf at misses
    normal: np.ndarray  # (H, W, 3) world-frame unit vectors, 0 at misses
    mask: np.ndarray  # (H, W) bool
    hits: np.ndarray  # (H, W, 3) world-space intersection points
    face_id: np.ndarray  # (H, W) int32, -1 at misses
    bary: np.ndarray  # (H, W, 3) screen-space perspective-corrected weights
    color: np.ndarray | None = None  # (H, W, 3) when the mesh carries colors

    @property
    def resolution(self) -> tuple[int, int]:
        return self.depth.shape  # (H, W)


def rasterize(
    mesh: TriMesh,
    cam: Camera,
    resolution: tuple[int, int] | None = None,
    smooth_normals: bool = False,
    znear: float = 1e-6,
) -> GBuffer:
    """Perspective-correct nearest-hit rasterization with a depth buffer.

    Faces are scanned in order with a strict depth comparison, so ties go to
    the lower face index; the brute-force ray caster follows the same rule.
    """
    h, w = resolution if resolution is not None else (cam.height, cam.width)
    depth = np.full((h, w), np.inf)
    face_id = np.full((h, w), -1, dtype=np.int32)
    bary = np.zeros((h, w, 3))

    verts_cam = cam.to_camera(mesh.vertices)
    z_all = verts_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u_all = cam.fx * verts_cam[:, 0] / z_all + cam.cx
        v_all = cam.fy * verts_cam[:, 1] / z_all + cam.cy

    for fi, (a, b, c) in enumerate(mesh.faces):
        za, zb, zc = z_all[a], z_all[b], z_all[c]
        if za <= znear or zb <= znear or zc <= znear:
            continue
        ua, va, ub_, vb = u_all[a], v_all[a], u_all[b], v_all[b]
        uc, vc = u_all[c], v_all[c]
        x0 = max(int(math.floor(min(ua, ub_, uc) - 0.5)), 0)
        x1 = min(int(math.ceil(max(ua, ub_, uc) - 0.5)), w - 1)
        y0 = max(int(math.floor(min(va, vb, vc) - 0.5)), 0)
        y1 = min(int(math.ceil(max(va, vb, vc) - 0.5)), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        area = (ub_ - ua) * (vc - va) - (vb - va) * (uc - ua)
        if area == 0.0:
            continue
        ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        px = xs + 0.5
        py = ys + 0.5
        w0 = ((ub_ - ua) * (py - va) - (vb - va) * (px - ua)) / area  # weight of c
        w1 = ((uc - ub_) * (py - vb) - (vc - vb) * (px - ub_)) / area  # weight of a
        w2 = 1.0 - w0 - w1  # weight of b
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        if not inside.any():
            continue
        inv_z = w1 / za + w2 / zb + w0 / zc
        z = 1.0 / inv_z
        closer = inside & (z < depth[y0 : y1 + 1, x0 : x1 + 1]) & (z > znear)
        if not closer.any():
            continue
        sub = (ys[closer], xs[closer])
        depth[sub] = z[closer]
        face_id[sub] = fi
        zb_w = z[closer]
        bary[sub] = np.stack(
            [w1[closer] / za * zb_w, w2[closer] / zb * zb_w, w0[closer] / zc * zb_w],
            axis=-1,
        )

    mask = face_id >= 0
    hits = np.zeros((h, w, 3))
    normal = np.zeros((h, w, 3))
    color = None
    if mask.any():
        fid = face_id[mask]
        bw = bary[mask]
        tri = mesh.faces[fid]
        hits[mask] = np.einsum("pk,pkc->pc", bw, mesh.vertices[tri])
        if smooth_normals:
            vn = mesh.vertex_normals()
            n = np.einsum("pk,pkc->pc", bw, vn[tri])
            n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-30)
            normal[mask] = n
        else:
            normal[mask] = mesh.face_normals()[fid]
        if mesh.colors is not None:
            color = np.zeros((h, w, 3))
            color[mask] = np.einsum("pk,pkc->pc", bw, mesh.colors[tri])
    elif mesh.colors is not None:
        color = np.zeros((h, w, 3))
    return GBuffer(depth, normal, mask, hits, face_id, bary, color)


def shade_with_colors(gbuf: GBuffer, mesh: TriMesh, colors: np.ndarray) -> np.ndarray:
    """Re-shade a rasterized view with a different per-vertex color set."""
    if colors.shape != mesh.vertices.shape:
        raise ContractError("colors must be (V, 3)")
    h, w = gbuf.resolution
    img = np.zeros((h, w, 3))
    m = gbuf.mask
    if m.any():
        tri = mesh.faces[gbuf.face_id[m]]
        img[m] = np.einsum("pk,pkc->pc", gbuf.bary[m], np.asarray(colors, np.float64)[tri])
    return img


def raycast_reference(
    mesh: TriMesh, cam: Camera, resolution: tuple[int, int] | None = None, znear: float = 1e-6
) -> GBuffer:
    """Exhaustive per-pixel ray casting against every triangle; the slow
    independent oracle the rasterizer is checked against."""
    h, w = resolution if resolution is not None else (cam.height, cam.width)
    origin = cam.position
    ys, xs = np.mgrid[0:h, 0:w]
    d_cam = np.stack(
        [
            (xs + 0.5 - cam.cx) / cam.fx,
            (ys + 0.5 - cam.cy) / cam.fy,
            np.ones((h, w)),
        ],
        axis=-1,
    )
    dirs = d_cam @ cam.rotation  # unit camera-z component: parameter t is depth
    dirs = dirs.reshape(-1, 3)
    n_px = dirs.shape[0]

    depth = np.full(n_px, np.inf)
    face_id = np.full(n_px, -1, dtype=np.int32)
    bary_uv = np.zeros((n_px, 2))

    v = mesh.vertices
    for fi, (a, b, c) in enumerate(mesh.faces):
        # Moeller-Trumbore, vectorized over pixels
        e1 = v[b] - v[a]
        e2 = v[c] - v[a]
        pvec = np.cross(dirs, e2)
        det = pvec @ e1
        ok = np.abs(det) > 1e-300
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origin - v[a]
        u = (pvec @ tvec) * inv_det
        qvec = np.cross(tvec, e1)
        vv = dirs @ qvec * inv_det
        t = (e2 @ qvec) * inv_det
        hit = ok & (u >= 0.0) & (vv >= 0.0) & (u + vv <= 1.0) & (t > znear)
        closer = hit & (t < depth)
        depth[closer] = t[closer]
        face_id[closer] = fi
        bary_uv[closer, 0] = u[closer]
        bary_uv[closer, 1] = vv[closer]

    mask = face_id >= 0
    hits = np.zeros((n_px, 3))
    normal = np.zeros((n_px, 3))
    bary = np.zeros((n_px, 3))
    if mask.any():
        fid = face_id[mask]
        tri = mesh.faces[fid]
        u = bary_uv[mask, 0]
        vv = bary_uv[mask, 1]
        bw = np.stack([1.0 - u - vv, u, vv], axis=-1)
        bary[mask] = bw
        hits[mask] = np.einsum("pk,pkc->pc", bw, v[tri])
        normal[mask] = mesh.face_normals()[fid]
    color = None
    if mesh.colors is not None:
        color = np.zeros((n_px, 3))
        if mask.any():
            color[mask] = np.einsum("pk,pkc->pc", bary[mask], mesh.colors[mesh.faces[face_id[mask]]])
        color = color.reshape(h, w, 3)
    return GBuffer(
        depth.reshape(h, w),
        normal.reshape(h, w, 3),
        mask.reshape(h, w),
        hits.reshape(h, w, 3),
        face_id.reshape(h, w),
        bary.reshape(h, w, 3),
        color,
    )


def encode_normal_image(gbuf: GBuffer, cam: Camera) -> np.ndarray:
    """View-space normal map as RGB in [0,1]: x right, y up, z toward viewer,
    so a camera-facing surface encodes to (0.5, 0.5, 1.0)."""
    h, w = gbuf.resolution
    img = np.zeros((h, w, 3))
    m = gbuf.mask
    if m.any():
        n_cam = gbuf.normal[m] @ cam.rotation.T
        n_enc = np.stack([n_cam[:, 0], -n_cam[:, 1], -n_cam[:, 2]], axis=-1)
        img[m] = n_enc * 0.5 + 0.5
    return img


def render_conditions(
    mesh: TriMesh, cam: Camera, resolution: tuple[int, int] | None = None
) -> dict[str, np.ndarray]:
    """Normalized depth plus encoded normal maps for conditioning exports."""
    gbuf = rasterize(mesh, cam, resolution)
    h, w = gbuf.resolution
    depth_img = np.zeros((h, w))
    if gbuf.mask.any():
        d = gbuf.depth[gbuf.mask]
        lo, hi = float(d.min()), float(d.max())
        span = hi - lo if hi > lo else 1.0
        depth_img[gbuf.mask] = (gbuf.depth[gbuf.mask] - lo) / span
    return {"depth": depth_img, "normal": encode_normal_image(gbuf, cam)}


def make_icosphere(radius: float = 1.0, subdivisions: int = 2, center=(0.0, 0.0, 0.0)) -> TriMesh:
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}
        vlist = list(verts)

        def midpoint(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            if key in cache:
                return cache[key]
            m = vlist[i] + vlist[j]
            m /= np.linalg.norm(m)
            vlist.append(m)
            cache[key] = len(vlist) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(vlist)
        faces = np.array(new_faces, dtype=np.int64)
    verts = verts * radius + np.asarray(center, dtype=np.float64)
    return TriMesh(verts, faces)


def make_quad(center, right, up, half_w: float, half_h: float) -> TriMesh:
    """Two-triangle rectangle; normal = cross(right, up) side."""
    c = np.asarray(center, np.float64)
    r = np.asarray(right, np.float64) * half_w
    u = np.asarray(up, np.float64) * half_h
    verts = np.array([c - r - u, c + r - u, c + r + u, c - r + u])
    faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    return TriMesh(verts, faces)
