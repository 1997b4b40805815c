import numpy as np
import pytest

from mvd.errors import ContractError
from mvd.scene import TriMesh, look_at_camera, make_icosphere, make_quad, rasterize
from mvd.warpfield import (
    IdentityCodec,
    PoolCodec,
    build_warp_plan,
    downsample_area,
    incidence_weights,
    make_codec,
    transport_signal,
    warp_image,
)


def gradient_quad(half=1.2):
    quad = make_quad([0, 0, 0], [1, 0, 0], [0, 1, 0], half, half)
    colors = np.array(
        [[0.1, 0.2, 0.9], [0.9, 0.1, 0.2], [0.2, 0.9, 0.1], [0.8, 0.8, 0.1]]
    )
    return TriMesh(quad.vertices, quad.faces, colors)


def plane_scene(res=64):
    mesh = gradient_quad()
    cam_src = look_at_camera([0.9, 0.3, 3.0], [0, 0, 0], res, res)
    cam_tgt = look_at_camera([-0.8, -0.2, 3.2], [0, 0, 0], res, res)
    g_src = rasterize(mesh, cam_src)
    g_tgt = rasterize(mesh, cam_tgt)
    return mesh, cam_src, cam_tgt, g_src, g_tgt


class TestCodecs:
    def test_identity_round_trip(self):
        rng = np.random.default_rng(0)
        img = rng.random((8, 8, 3)).astype(np.float32)
        c = IdentityCodec()
        assert np.array_equal(c.decode(c.encode(img)), img)

    def test_pool_projection_property(self):
        rng = np.random.default_rng(1)
        c = PoolCodec(8)
        lat = rng.standard_normal((3, 4, 4)).astype(np.float32)
        once = c.encode(c.decode(lat))
        assert np.max(np.abs(once - lat)) <= 1e-6
        twice = c.encode(c.decode(once))
        assert np.max(np.abs(twice - once)) <= 1e-6

    def test_pool_shapes(self):
        c = PoolCodec(8)
        img = np.zeros((32, 64, 3), dtype=np.float32)
        assert c.encode(img).shape == (3, 4, 8)
        with pytest.raises(ContractError):
            c.encode(np.zeros((33, 64, 3), dtype=np.float32))

    def test_pool_adjoint_is_transpose(self):
        rng = np.random.default_rng(2)
        c = PoolCodec(4)
        lat = rng.standard_normal((2, 3, 3))
        img = rng.standard_normal((12, 12, 2))
        lhs = float(np.sum(c.decode(lat.astype(np.float32)).astype(np.float64) * img))
        rhs = float(np.sum(lat * c.decode_adjoint(img)))
        assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))

    def test_make_codec(self):
        assert isinstance(make_codec("identity"), IdentityCodec)
        assert make_codec("pool", 4).ratio == 4
        with pytest.raises(ContractError):
            make_codec("vae")


class TestWarp:
    def test_self_warp_identity(self):
        mesh, cam_src, _, g_src, _ = plane_scene()
        plan = build_warp_plan(g_src, g_src, cam_src, scene_diagonal=mesh.bbox_diagonal())
        img = g_src.color.astype(np.float32)
        out = warp_image(img, plan)
        assert np.array_equal(out.mask, g_src.mask)
        assert np.max(np.abs(out.image[out.mask] - img[out.mask])) <= 1e-6

    def test_cross_view_matches_rerender(self):
        mesh, cam_src, cam_tgt, g_src, g_tgt = plane_scene()
        plan = build_warp_plan(g_tgt, g_src, cam_src, scene_diagonal=mesh.bbox_diagonal())
        out = warp_image(g_src.color.astype(np.float32), plan)
        assert out.mask.sum() > 200
        direct = g_tgt.color
        err = np.abs(out.image[out.mask] - direct[out.mask])
        assert err.mean() <= 2.0 / 255.0

    def test_source_behind_plane_fully_occluded(self):
        mesh = gradient_quad()
        cam_tgt = look_at_camera([0, 0, 3.0], [0, 0, 0], 32, 32)
        cam_src = look_at_camera([0, 0, -3.0], [0, 0, 0], 32, 32)
        g_tgt = rasterize(mesh, cam_tgt)
        g_src = rasterize(mesh, cam_src)
        plan = build_warp_plan(g_tgt, g_src, cam_src, scene_diagonal=mesh.bbox_diagonal())
        assert plan.valid.sum() == 0
        assert np.all(plan.occlusion == 0)

    def test_occluder_blocks_visibility(self):
        # small near quad hides part of a far quad from the source view
        far = gradient_quad(half=1.5)
        near = make_quad([0, 0, 1.0], [1, 0, 0], [0, 1, 0], 0.4, 0.4)
        both = TriMesh(
            np.vstack([far.vertices, near.vertices]),
            np.vstack([far.faces, near.faces + 4]),
        )
        cam_src = look_at_camera([0, 0, 4.0], [0, 0, 0], 64, 64)
        cam_tgt = look_at_camera([2.5, 0.5, 3.0], [0, 0, 0], 64, 64)
        g_src = rasterize(both, cam_src)
        g_tgt = rasterize(both, cam_tgt)
        plan = build_warp_plan(g_tgt, g_src, cam_src, scene_diagonal=both.bbox_diagonal())
        behind = g_tgt.mask & (g_tgt.hits[..., 2] < 0.5)
        assert behind.sum() > 0
        assert plan.valid[behind].sum() < behind.sum()  # some far points hidden
        assert np.all(plan.occlusion[~plan.valid] == 0)

    def test_convex_combination_partition_of_unity(self):
        mesh, cam_src, cam_tgt, g_src, g_tgt = plane_scene()
        plan = build_warp_plan(g_tgt, g_src, cam_src, scene_diagonal=mesh.bbox_diagonal())
        ones = np.ones((64, 64, 1), dtype=np.float32)
        out = warp_image(ones, plan)
        assert np.allclose(out.image[out.mask], 1.0, atol=1e-9)
        rng = np.random.default_rng(3)
        img = rng.random((64, 64, 3)).astype(np.float32)
        out = warp_image(img, plan)
        assert out.image.max() <= img.max() + 1e-9
        assert out.image[out.mask].min() >= img.min() - 1e-9

    def test_occlusion_weight_values(self):
        # frontal incidence with default constants
        assert np.isclose(incidence_weights([0, 0, 1.0], [0, 0, 1.0]), 1.2)
        # grazing incidence degenerates to the stability constant
        assert np.isclose(incidence_weights([0, 0, 1.0], [1.0, 0, 0]), 1.0)

    def test_occlusion_range_and_frontal_value(self):
        mesh, cam_src, cam_tgt, g_src, g_tgt = plane_scene()
        plan = build_warp_plan(g_tgt, g_src, cam_src, scene_diagonal=mesh.bbox_diagonal())
        pos = plan.occlusion[plan.valid]
        assert np.all(pos >= 0.8 - 1e-9) and np.all(pos <= 1.2 + 1e-9)
        # self-warp at the pixel staring straight down the normal
        self_plan = build_warp_plan(g_src, g_src, cam_src, scene_diagonal=mesh.bbox_diagonal())
        uv, _ = cam_src.project(np.array([[0.0, 0.0, 0.0]]))
        cx, cy = int(uv[0, 0]), int(uv[0, 1])
        n = g_src.normal[cy, cx]
        d = cam_src.position - g_src.hits[cy, cx]
        expect = float(incidence_weights(n, d / np.linalg.norm(d)))
        assert np.isclose(self_plan.occlusion[cy, cx], expect)


class TestTransport:
    def test_identity_codec_identity_warp(self):
        mesh, cam_src, _, g_src, _ = plane_scene()
        plan = build_warp_plan(g_src, g_src, cam_src, scene_diagonal=mesh.bbox_diagonal())
        codec = IdentityCodec()
        lat = codec.encode(g_src.color.astype(np.float32))
        out, mask = transport_signal(lat, codec, plan)
        keep = mask >= 1.0
        assert np.max(np.abs(out[:, keep] - lat[:, keep])) <= 1e-6

    def test_pool_codec_constant_fixed_point(self):
        mesh, cam_src, cam_tgt, g_src, g_tgt = plane_scene()
        plan = build_warp_plan(g_tgt, g_src, cam_src, scene_diagonal=mesh.bbox_diagonal())
        codec = PoolCodec(8)
        lat = np.full((3, 8, 8), 0.35, dtype=np.float32)
        out, mask = transport_signal(lat, codec, plan)
        fully = mask >= 1.0 - 1e-12
        assert fully.sum() > 0
        assert np.max(np.abs(out[:, fully] - 0.35)) <= 1e-6

    def test_textured_scene_transport_error(self):
        mesh, cam_src, cam_tgt, g_src, g_tgt = plane_scene()
        plan = build_warp_plan(g_tgt, g_src, cam_src, scene_diagonal=mesh.bbox_diagonal())
        codec = IdentityCodec()
        lat = codec.encode(g_src.color.astype(np.float32))
        out, mask = transport_signal(lat, codec, plan)
        truth = codec.encode(g_tgt.color.astype(np.float32))
        keep = mask >= 1.0
        assert np.abs(out[:, keep] - truth[:, keep]).mean() <= 2.0 / 255.0

    def test_mask_downsampling(self):
        m = np.zeros((8, 8))
        m[:4] = 1.0
        d = downsample_area(m, 4)
        assert d.shape == (2, 2)
        assert np.allclose(d, [[1.0, 1.0], [0.0, 0.0]])
