"""Run orchestration: configuration, the bundled scenarios, cross-view
consistency metrics, artifact output, and the reproducibility manifest.

A run is deterministic given (config, seed): every artifact except the
timing log is content-hashed into manifest.json, and re-running reproduces
the manifest byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import consistency as cons
from . import latentopt as lopt
from .bridge import RemoteDenoiser, connect_tcp, spawn_stdio_backend
from .denoise import Denoiser, GaussianMixtureModel, GmmDenoiser, MeshOracleDenoiser
from .errors import ConfigurationError, EngineError
from .imgio import read_pfm, write_pfm, write_png
from .meshio import read_obj, write_obj
from .postprocess import (
    NormalTarget,
    bake_vertex_colors,
    blend_novel_view,
    normal_refine_loss,
    refine_mesh,
    render_camera_normals,
)
from .scene import (
    TriMesh,
    ViewRig,
    look_at_camera,
    make_icosphere,
    rasterize,
    render_conditions,
    rig_for_mesh,
    shade_with_colors,
)
from .schedule import BetaSpec, Schedule, build_schedule
from .warpfield import Codec, build_warp_plan, make_codec

CONFIG_VERSION = 1
PSNR_CAP_DB = 99.0


def _take(section: dict, allowed: dict, where: str) -> dict:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    merged = dict(allowed)
    merged.update(section)
    return merged


@dataclass
class SceneConfig:
    kind: str = "icosphere"  # "icosphere" | "obj"
    obj_path: str | None = None
    radius: float = 1.0
    subdivisions: int = 3
    texture_variants: int = 13
    texture_contrast: float = 0.45
    texture_seed: int = 2024


@dataclass
class RigConfig:
    num_per_track: int = 8
    image_size: int = 128
    fov_deg: float = 50.0
    upper_fraction: float = 0.45
    margin: float = 1.25


@dataclass
class Demo2dConfig:
    n_views: int = 4
    shape: tuple[int, int, int] = (3, 64, 64)
    patch: int = 8
    contrast: float = 0.4
    weights: tuple[float, float, float] = (0.5, 0.3, 0.2)
    mode_seed: int = 123


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    mode: str = "sphere"  # "sphere" | "demo2d"
    seed: int = 0
    workers: int = 1
    dump_intermediates: bool = False
    num_steps: int = 150
    beta: BetaSpec = field(default_factory=BetaSpec)
    scene: SceneConfig = field(default_factory=SceneConfig)
    rig: RigConfig = field(default_factory=RigConfig)
    demo2d: Demo2dConfig = field(default_factory=Demo2dConfig)
    codec: str = "identity"
    codec_ratio: int = 8
    denoiser: str = "mesh-oracle"  # "mesh-oracle" | "remote"
    backend_cmd: list[str] | None = None
    backend_addr: str | None = None
    backend_timeout: float = 120.0
    policy: cons.SamplingPolicy = field(default_factory=cons.SamplingPolicy)
    optimizer: lopt.OptimizerConfig = field(default_factory=lopt.OptimizerConfig)
    w_s: float = 0.2
    w_c: float = 1.0
    refine_iterations: int = 60
    refine_step: float = 2e-3
    refine_lambda: float = 0.1
    render_tau: float | None = None

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigurationError(f"config version {self.version} unsupported")
        if self.mode not in ("sphere", "demo2d"):
            raise ConfigurationError(f"mode: unknown mode {self.mode!r}")
        if self.codec not in ("identity", "pool"):
            raise ConfigurationError(f"codec: unknown codec {self.codec!r}")
        if self.denoiser not in ("mesh-oracle", "remote"):
            raise ConfigurationError(f"denoiser: unknown kind {self.denoiser!r}")
        if self.denoiser == "remote" and not (self.backend_cmd or self.backend_addr):
            raise ConfigurationError("denoiser remote: needs backend_cmd or backend_addr")
        if self.workers < 1:
            raise ConfigurationError("workers: must be >= 1")
        if self.rig.num_per_track < 3:
            raise ConfigurationError(
                f"rig.num_per_track: must be >= 3, got {self.rig.num_per_track}"
            )
        if self.scene.texture_variants < 1:
            raise ConfigurationError("scene.texture_variants: must be >= 1")
        self.beta.validate()
        self.policy.validate()
        self.optimizer.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["demo2d"]["shape"] = list(self.demo2d.shape)
        d["demo2d"]["weights"] = list(self.demo2d.weights)
        d["policy"]["cg_ratio"] = list(self.policy.cg_ratio)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        top = _take(data, {f: None for f in cls.__dataclass_fields__}, "config")
        kw: dict = {}
        for name, val in top.items():
            if val is None and name in (
                "beta", "scene", "rig", "demo2d", "policy", "optimizer",
            ):
                continue
            if name == "beta" and isinstance(val, dict):
                kw[name] = BetaSpec(**_take(val, {k: getattr(BetaSpec(), k) for k in BetaSpec.__dataclass_fields__}, "beta"))
            elif name == "scene" and isinstance(val, dict):
                kw[name] = SceneConfig(**_take(val, {k: getattr(SceneConfig(), k) for k in SceneConfig.__dataclass_fields__}, "scene"))
            elif name == "rig" and isinstance(val, dict):
                kw[name] = RigConfig(**_take(val, {k: getattr(RigConfig(), k) for k in RigConfig.__dataclass_fields__}, "rig"))
            elif name == "demo2d" and isinstance(val, dict):
                d2 = _take(val, {k: getattr(Demo2dConfig(), k) for k in Demo2dConfig.__dataclass_fields__}, "demo2d")
                d2["shape"] = tuple(d2["shape"])
                d2["weights"] = tuple(d2["weights"])
                kw[name] = Demo2dConfig(**d2)
            elif name == "policy" and isinstance(val, dict):
                p = _take(val, {k: getattr(cons.SamplingPolicy(), k) for k in cons.SamplingPolicy.__dataclass_fields__}, "policy")
                p["cg_ratio"] = tuple(p["cg_ratio"])
                kw[name] = cons.SamplingPolicy(**p)
            elif name == "optimizer" and isinstance(val, dict):
                kw[name] = lopt.OptimizerConfig(**_take(val, {k: getattr(lopt.OptimizerConfig(), k) for k in lopt.OptimizerConfig.__dataclass_fields__}, "optimizer"))
            elif val is not None or name in ("backend_cmd", "backend_addr", "render_tau"):
                kw[name] = val
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"config {path}: {e}") from e
    return RunConfig.from_dict(data)


def preset(name: str) -> RunConfig:
    if name == "sphere":
        return RunConfig(mode="sphere")
    if name == "demo2d":
        return RunConfig(
            mode="demo2d",
            policy=cons.SamplingPolicy(cg_start_fraction=0.0, cg_ratio=(0, 1)),
        )
    raise ConfigurationError(f"unknown preset {name!r}")


def apply_ablation(cfg: RunConfig, ablation: str) -> RunConfig:
    """Map the named evaluation stage onto policy switches."""
    stages = {
        "conditions": dict(enable_cg=False, enable_optimization=False, use_reference_attention=False),
        "cg": dict(enable_cg=True, enable_optimization=False, use_reference_attention=False),
        "optim": dict(enable_cg=True, enable_optimization=True, use_reference_attention=False),
        "full": dict(enable_cg=True, enable_optimization=True, use_reference_attention=True),
    }
    if ablation not in stages:
        raise ConfigurationError(f"unknown ablation stage {ablation!r}")
    return replace(cfg, policy=replace(cfg.policy, **stages[ablation]))


# ---------------------------------------------------------------------------
# scene construction


def smooth_vertex_field(vertices: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Smooth random color field over mesh vertices from low-order harmonics."""
    v = vertices / np.maximum(np.linalg.norm(vertices, axis=1, keepdims=True), 1e-30)
    basis = [
        np.ones(len(v)),
        v[:, 0], v[:, 1], v[:, 2],
        v[:, 0] * v[:, 1], v[:, 1] * v[:, 2], v[:, 0] * v[:, 2],
        v[:, 0] ** 2 - v[:, 1] ** 2, 3 * v[:, 2] ** 2 - 1,
    ]
    b = np.stack(basis, axis=1)
    coeff = rng.standard_normal((b.shape[1], 3)) * 0.35
    coeff[0] = 0.0
    f = b @ coeff
    return np.clip(0.5 + f, 0.05, 0.95)


def build_texture_family(mesh: TriMesh, scene: SceneConfig) -> list[np.ndarray]:
    """K vertex-color variants interpolating between two random textures.

    Adjacent variants stay close (responsive mixture posteriors) while the
    family endpoints differ visibly, which is what makes the consistency
    machinery's job nontrivial but solvable.
    """
    rng = np.random.default_rng(scene.texture_seed)
    tex_a = smooth_vertex_field(mesh.vertices, rng)
    tex_b = smooth_vertex_field(mesh.vertices, rng)
    span = tex_b - tex_a
    norm = np.abs(span).max()
    if norm > 0:
        tex_b = tex_a + span * (scene.texture_contrast / norm)
    k = scene.texture_variants
    if k == 1:
        return [tex_a]
    return [tex_a + (tex_b - tex_a) * (s / (k - 1)) for s in range(k)]


def build_scene(cfg: RunConfig) -> tuple[TriMesh, list[np.ndarray]]:
    sc = cfg.scene
    if sc.kind == "icosphere":
        mesh = make_icosphere(radius=sc.radius, subdivisions=sc.subdivisions)
    elif sc.kind == "obj":
        if not sc.obj_path:
            raise ConfigurationError("scene.obj_path: required for obj scenes")
        mesh = read_obj(sc.obj_path)
    else:
        raise ConfigurationError(f"scene.kind: unknown kind {sc.kind!r}")
    variants = build_texture_family(mesh, sc)
    return mesh, variants


def demo2d_modes(cfg: Demo2dConfig) -> list[np.ndarray]:
    """Three clean-signal modes: one smooth base image with a patch painted
    in a different color per mode."""
    rng = np.random.default_rng(cfg.mode_seed)
    c, h, w = cfg.shape
    f = rng.standard_normal((c, h, w))
    k = np.ones(11) / 11.0
    for ax in (1, 2):
        f = np.apply_along_axis(lambda m: np.convolve(m, k, mode="same"), ax, f)
    base = 0.2 + 0.6 * (f - f.min()) / (f.max() - f.min())
    y = x = max((min(h, w) - cfg.patch) // 2, 0)
    modes = []
    for color in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
        m = base.copy()
        tint = np.array(color[:c], dtype=np.float64).reshape(c, 1, 1)
        m[:, y : y + cfg.patch, x : x + cfg.patch] = 0.3 + cfg.contrast * tint
        modes.append(m.astype(np.float32))
    return modes


# ---------------------------------------------------------------------------
# metrics


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter2d_sep(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    pad = len(g) // 2
    out = np.asarray(img, np.float64)
    padded = np.pad(out, ((pad, pad), (0, 0)) + ((0, 0),) * (out.ndim - 2), mode="edge")
    out = sum(g[k] * padded[k : k + img.shape[0]] for k in range(len(g)))
    padded = np.pad(out, ((0, 0), (pad, pad)) + ((0, 0),) * (out.ndim - 2), mode="edge")
    out = sum(g[k] * padded[:, k : k + img.shape[1]] for k in range(len(g)))
    return out


def psnr_masked(a: np.ndarray, b: np.ndarray, mask: np.ndarray, peak: float = 1.0) -> float:
    if mask.sum() == 0:
        raise EngineError("psnr: empty mask")
    diff = (np.asarray(a, np.float64) - np.asarray(b, np.float64))[mask]
    mse = float((diff**2).mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak**2 / mse), PSNR_CAP_DB)


def ssim_masked(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    c1 = (0.01 * 1.0) ** 2
    c2 = (0.03 * 1.0) ** 2
    g = _gaussian_window()
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    mu_a = _filter2d_sep(a, g)
    mu_b = _filter2d_sep(b, g)
    var_a = _filter2d_sep(a * a, g) - mu_a**2
    var_b = _filter2d_sep(b * b, g) - mu_b**2
    cov = _filter2d_sep(a * b, g) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    if ssim_map.ndim == 3:
        ssim_map = ssim_map.mean(axis=2)
    return float(ssim_map[mask].mean())


@dataclass
class PairMetric:
    source: int
    target: int
    psnr: float
    ssim: float
    valid_pixels: int


@dataclass
class MetricsReport:
    pairs: list[PairMetric]
    excluded: list[tuple[int, int]]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([p.psnr for p in self.pairs])) if self.pairs else 0.0

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([p.ssim for p in self.pairs])) if self.pairs else 0.0


def cross_view_consistency(
    images: list[np.ndarray], graph: cons.ViewGraph
) -> MetricsReport:
    """Warp each view's image to each of its sources' frames and score the
    overlap; pairs with no overlap are excluded but listed."""
    pairs: list[PairMetric] = []
    excluded: list[tuple[int, int]] = []
    for target, links in sorted(graph.links.items()):
        for link in links:
            if link.source == target or link.plan is None:
                continue
            res = link.plan.apply(np.asarray(images[link.source], np.float64))
            if res.mask.sum() == 0:
                excluded.append((link.source, target))
                continue
            pairs.append(
                PairMetric(
                    source=link.source,
                    target=target,
                    psnr=psnr_masked(res.image, images[target], res.mask),
                    ssim=ssim_masked(res.image, images[target], res.mask),
                    valid_pixels=int(res.mask.sum()),
                )
            )
    return MetricsReport(pairs, excluded)


# ---------------------------------------------------------------------------
# artifact output


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class RunWriter:
    """Collects output files and freezes them into a deterministic manifest."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def write_manifest(self, cfg: RunConfig, extra: dict | None = None) -> Path:
        import numpy

        from . import __version__

        manifest = {
            "config": cfg.to_dict(),
            "config_hash": cfg.config_hash(),
            "engine_version": __version__,
            "numpy_version": numpy.__version__,
            "outputs": [
                {"path": str(p.relative_to(self.out)), "sha256": _sha256(p)}
                for p in sorted(set(self.files))
            ],
        }
        if extra:
            manifest.update(extra)
        p = self.out / "manifest.json"
        p.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        return p

    def write_timings(self, timings: dict) -> None:
        # wall-clock data stays out of the manifest so reruns reproduce it
        (self.out / "run_log.json").write_text(json.dumps(timings, indent=1) + "\n")


def write_metrics_csv(path: Path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["source", "target", "psnr_db", "ssim", "valid_pixels"])
        for p in report.pairs:
            w.writerow([p.source, p.target, f"{p.psnr:.6f}", f"{p.ssim:.6f}", p.valid_pixels])
        w.writerow([])
        w.writerow(["mean_psnr_db", f"{report.mean_psnr:.6f}"])
        w.writerow(["mean_ssim", f"{report.mean_ssim:.6f}"])
        for s, t in report.excluded:
            w.writerow(["excluded", s, t])


# ---------------------------------------------------------------------------
# runners


@dataclass
class SphereSetup:
    mesh: TriMesh
    variants: list[np.ndarray]
    rig: ViewRig
    gbufs: list
    graph: cons.ViewGraph
    codec: Codec
    schedule: Schedule
    denoiser: Denoiser
    view_renders: dict[int, list[np.ndarray]]


def prepare_sphere(cfg: RunConfig) -> SphereSetup:
    mesh, variants = build_scene(cfg)
    rig = rig_for_mesh(
        mesh,
        num_per_track=cfg.rig.num_per_track,
        fov_deg=cfg.rig.fov_deg,
        image_size=cfg.rig.image_size,
        upper_fraction=cfg.rig.upper_fraction,
        margin=cfg.rig.margin,
    )
    codec = make_codec(cfg.codec, cfg.codec_ratio)
    schedule = build_schedule(cfg.num_steps, cfg.beta)
    gbufs = [rasterize(mesh, cam) for cam in rig.cameras]
    graph = cons.build_view_graph(
        rig, gbufs, codec, w_s=cfg.w_s, w_c=cfg.w_c, scene_diagonal=mesh.bbox_diagonal()
    )
    view_renders = {
        i: [shade_with_colors(gbufs[i], mesh, colors).astype(np.float32) for colors in variants]
        for i in range(len(rig))
    }
    if cfg.denoiser == "mesh-oracle":
        denoiser = MeshOracleDenoiser(
            view_renders, codec, schedule,
            reference_bias=cfg.policy.reference_bias if cfg.policy.use_reference_attention else 0.0,
        )
    else:
        denoiser = _remote_denoiser(cfg, schedule)
    return SphereSetup(mesh, variants, rig, gbufs, graph, codec, schedule, denoiser, view_renders)


def _remote_denoiser(cfg: RunConfig, schedule: Schedule) -> RemoteDenoiser:
    if cfg.backend_cmd:
        transport = spawn_stdio_backend(cfg.backend_cmd)
    else:
        host, _, port = cfg.backend_addr.rpartition(":")
        transport = connect_tcp(host or "127.0.0.1", int(port))
    return RemoteDenoiser(transport, schedule, timeout=cfg.backend_timeout)


def run_generate(cfg: RunConfig, out_dir, seed: int | None = None) -> dict:
    """Full multi-view sampling run; writes images, metrics, and manifest."""
    cfg.validate()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    t_start = time.monotonic()
    writer = RunWriter(out_dir)
    if cfg.mode == "demo2d":
        return _run_demo2d(cfg, writer, t_start)

    setup = prepare_sphere(cfg)
    h = w = cfg.rig.image_size
    latent_shape = setup.codec.latent_shape(h, w)
    state = cons.init_states(
        len(setup.rig), latent_shape, setup.schedule, cfg.seed, tracks=setup.rig.tracks
    )

    traces: list = []
    plan_lookup = lopt.make_plan_cache(
        lambda i, j: _pair_plan(setup, i, j, cfg)
    )

    def optimizer(st: cons.MultiViewState) -> cons.MultiViewState:
        return lopt.optimization_event(
            st, setup.rig, cfg.policy, cfg.optimizer, setup.codec,
            plan_lookup, setup.schedule.num_steps, trace_sink=traces,
        )

    dump_hook = None
    if cfg.dump_intermediates:
        dump_dir = writer.out / "intermediates"

        def dump_hook(st: cons.MultiViewState) -> None:
            for v in st.views:
                p = writer.path(
                    f"intermediates/latent_t{st.timestep:04d}_v{v.view_id:02d}.pfm"
                )
                write_pfm(p, np.transpose(v.latent, (1, 2, 0)))

    executor = None
    if cfg.workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        executor = ThreadPoolExecutor(max_workers=cfg.workers)
    try:
        state = cons.run_sampling(
            state, setup.denoiser, setup.graph, cfg.policy, setup.schedule,
            setup.codec,
            optimizer=optimizer if cfg.policy.enable_optimization else None,
            executor=executor, step_hook=dump_hook,
        )
    finally:
        if executor is not None:
            executor.shutdown()
        setup.denoiser.close()
    t_sample = time.monotonic()

    images = [np.clip(setup.codec.decode(v.latent), 0.0, 1.0) for v in state.views]
    for i, img in enumerate(images):
        write_png(writer.path(f"views/view_{i:02d}.png"), img)
        write_pfm(writer.path(f"views/view_{i:02d}.pfm"), img.astype(np.float32))
    for i, cam in enumerate(setup.rig.cameras):
        conds = render_conditions(setup.mesh, cam)
        write_png(writer.path(f"conditions/depth_{i:02d}.png"), conds["depth"])
        write_pfm(writer.path(f"conditions/depth_{i:02d}.pfm"), conds["depth"].astype(np.float32))
        write_png(writer.path(f"conditions/normal_{i:02d}.png"), conds["normal"])
        write_pfm(writer.path(f"conditions/normal_{i:02d}.pfm"), conds["normal"].astype(np.float32))

    report = cross_view_consistency(images, setup.graph)
    write_metrics_csv(writer.path("metrics.csv"), report)
    if traces:
        with open(writer.path("optimization_trace.csv"), "w", newline="") as f:
            cw = csv.writer(f)
            cw.writerow(["timestep", "view_a", "view_b", "loss_start", "loss_end"])
            for e in traces:
                cw.writerow([e["timestep"], *e["pair"], f"{e['loss_start']:.9g}", f"{e['loss_end']:.9g}"])
    manifest_path = writer.write_manifest(cfg)
    writer.write_timings(
        {"sampling_s": t_sample - t_start, "total_s": time.monotonic() - t_start}
    )
    return {
        "images": images,
        "report": report,
        "manifest": manifest_path,
        "state": state,
        "setup": setup,
    }


def _pair_plan(setup: SphereSetup, i: int, j: int, cfg: RunConfig):
    # reuse graph plans when present; cross-track reverse pairs are built here
    for link in setup.graph.sources(i):
        if link.source == j and link.plan is not None:
            return link.plan
    return build_warp_plan(
        setup.gbufs[i], setup.gbufs[j], setup.rig.cameras[j],
        w_s=cfg.w_s, w_c=cfg.w_c, scene_diagonal=setup.mesh.bbox_diagonal(),
    )


def _run_demo2d(cfg: RunConfig, writer: RunWriter, t_start: float) -> dict:
    modes = demo2d_modes(cfg.demo2d)
    schedule = build_schedule(cfg.num_steps, cfg.beta)
    gmm = GaussianMixtureModel([m.copy() for m in modes], np.asarray(cfg.demo2d.weights))
    denoiser = GmmDenoiser(gmm, schedule)
    finals = cons.run_identical_views(
        cfg.demo2d.n_views, denoiser, schedule, cfg.policy, cfg.seed,
        latent_shape=cfg.demo2d.shape,
    )
    arrays = [f.transpose(2, 0, 1) for f in finals]
    pairwise = 0.0
    for a in range(len(arrays)):
        for b in range(a + 1, len(arrays)):
            pairwise = max(pairwise, float(np.max(np.abs(arrays[a] - arrays[b]))))
    mode_dist = [min(float(np.max(np.abs(a - m))) for m in modes) for a in arrays]
    for i, img in enumerate(finals):
        write_png(writer.path(f"views/process_{i:02d}.png"), np.clip(img, 0, 1))
        write_pfm(writer.path(f"views/process_{i:02d}.pfm"), img.astype(np.float32))
    for k, m in enumerate(modes):
        write_png(writer.path(f"modes/mode_{k}.png"), np.clip(m.transpose(1, 2, 0), 0, 1))
    summary = {
        "pairwise_max_abs": pairwise,
        "mode_distance_max_abs": mode_dist,
        "consistent": bool(pairwise <= 1e-3),
    }
    writer.path("consensus.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    manifest_path = writer.write_manifest(cfg)
    writer.write_timings({"total_s": time.monotonic() - t_start})
    return {"images": finals, "summary": summary, "manifest": manifest_path, "modes": modes}


def run_refine(cfg: RunConfig, mesh_path, targets_dir, out_dir) -> dict:
    """Normal-map driven vertex refinement of an input mesh."""
    cfg.validate()
    writer = RunWriter(out_dir)
    t0 = time.monotonic()
    mesh = read_obj(mesh_path)
    rig = rig_for_mesh(
        mesh, num_per_track=cfg.rig.num_per_track, fov_deg=cfg.rig.fov_deg,
        image_size=cfg.rig.image_size, upper_fraction=cfg.rig.upper_fraction,
        margin=cfg.rig.margin,
    )
    targets = []
    tdir = Path(targets_dir)
    for i in range(len(rig)):
        normals = read_pfm(tdir / f"normal_{i:02d}.pfm")
        mask_path = tdir / f"mask_{i:02d}.pfm"
        if mask_path.exists():
            mask = read_pfm(mask_path) > 0.5
        else:
            mask = np.linalg.norm(normals, axis=2) > 0.1
        targets.append(NormalTarget(normals, mask))
    refined, trace = refine_mesh(
        mesh, rig.cameras, targets,
        iterations=cfg.refine_iterations, step_size=cfg.refine_step,
        lambda_reg=cfg.refine_lambda,
    )
    write_obj(writer.path("refined.obj"), refined)
    with open(writer.path("refine_trace.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "total", "data", "reg", "step"])
        for e in trace:
            w.writerow([e["iteration"], f"{e['total']:.9g}", f"{e['data']:.9g}", f"{e['reg']:.9g}", f"{e['step']:.3g}"])
    manifest = writer.write_manifest(cfg)
    writer.write_timings({"total_s": time.monotonic() - t0})
    return {"mesh": refined, "trace": trace, "manifest": manifest}


def orbit_cameras(mesh: TriMesh, n_poses: int, image_size: int, fov_deg: float) -> list:
    lo, hi = mesh.bounds()
    center = 0.5 * (lo + hi)
    half = 0.5 * float(np.linalg.norm(hi - lo))
    radius = 1.25 * half / math.tan(math.radians(fov_deg) / 2.0)
    cams = []
    for k in range(n_poses):
        az = 360.0 * (k + 0.5) / n_poses
        rad = math.radians(az)
        pos = center + np.array([radius * math.sin(rad), 0.0, radius * math.cos(rad)])
        cams.append(look_at_camera(pos, center, image_size, image_size, fov_deg, azimuth_deg=az))
    return cams


def run_render(cfg: RunConfig, mesh_path, images_dir, out_dir, n_poses: int = 16) -> dict:
    """Free-view orbit rendering via two-stage blending over the baked mesh."""
    cfg.validate()
    writer = RunWriter(out_dir)
    t0 = time.monotonic()
    mesh = read_obj(mesh_path)
    rig = rig_for_mesh(
        mesh, num_per_track=cfg.rig.num_per_track, fov_deg=cfg.rig.fov_deg,
        image_size=cfg.rig.image_size, upper_fraction=cfg.rig.upper_fraction,
        margin=cfg.rig.margin,
    )
    idir = Path(images_dir)
    images = [read_pfm(idir / f"view_{i:02d}.pfm") for i in range(len(rig))]
    if mesh.colors is None:
        mesh = bake_vertex_colors(mesh, rig.cameras, images, w_s=cfg.w_s, w_c=cfg.w_c)
    rig_gbufs = [rasterize(mesh, c) for c in rig.cameras]
    frames = []
    for k, cam in enumerate(orbit_cameras(mesh, n_poses, cfg.rig.image_size, cfg.rig.fov_deg)):
        frame = blend_novel_view(
            cam, rig, images, mesh, tau=cfg.render_tau, rig_gbufs=rig_gbufs
        )
        frame = np.clip(frame, 0.0, 1.0)
        frames.append(frame)
        write_png(writer.path(f"frames/frame_{k:03d}.png"), frame)
    manifest = writer.write_manifest(cfg)
    writer.write_timings({"total_s": time.monotonic() - t0})
    return {"frames": frames, "manifest": manifest, "baked": mesh}


def run_eval(cfg: RunConfig, images_dir, out_dir) -> MetricsReport:
    """Cross-view consistency metrics for a directory of per-view images."""
    cfg.validate()
    writer = RunWriter(out_dir)
    setup = prepare_sphere(replace(cfg, denoiser="mesh-oracle"))
    idir = Path(images_dir)
    images = [read_pfm(idir / f"view_{i:02d}.pfm") for i in range(len(setup.rig))]
    report = cross_view_consistency(images, setup.graph)
    write_metrics_csv(writer.path("metrics.csv"), report)
    writer.write_manifest(cfg)
    return report
