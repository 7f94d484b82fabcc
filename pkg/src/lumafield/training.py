"""Supervised fitting of the material and light-field networks.

The reference data comes from a closed-form renderer of a textured sphere
(Lambert plus Phong under importance-sampled environment lights), so every
target pixel is exact. Training precomputes the network-independent part of
each pixel (hit, normal, albedo, light sums) once and then only re-runs the
sampling, the networks and the compositing per batch.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from lumafield.assets import (
    RadianceMap,
    TextureMap,
    TriangleMesh,
    load_hdri,
    load_mesh,
    load_texture,
    sample_texture,
    save_hdri,
    save_mesh,
    save_texture,
    sphere_uv,
    uv_sphere,
)
from lumafield.errors import AssetError, ConfigError, NumericalError
from lumafield.lighting import (
    DirectLightSet,
    OlatSpec,
    generate_olat,
    importance_sample_lights,
    load_light_set,
    lookup,
    save_light_set,
)
from lumafield.metrics import MetricsReport, compute_metrics
from lumafield.neural import (
    AdamState,
    NetworkConfig,
    adam_init,
    adam_step,
    init_lightfield_net,
    init_material_net,
    load_checkpoint,
    save_checkpoint,
)
from lumafield.transport import (
    Camera,
    DensityParams,
    NeuralShader,
    RayBundle,
    RenderConfig,
    Scene,
    camera_rays,
    direct_sums,
    prepare_rays,
    shade_bundle,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- data types


@dataclass(eq=False)
class FaceAsset:
    mesh: TriangleMesh
    albedo: TextureMap | np.ndarray | None = None
    normal_map: TextureMap | None = None

    def scene(self, lights: DirectLightSet, hdri: RadianceMap | None = None) -> Scene:
        return Scene(self.mesh, lights, self.albedo, self.normal_map, hdri)


@dataclass(eq=False)
class View:
    camera: Camera
    env: int  # index into Dataset.environments
    image: np.ndarray  # (H, W, 3) linear ground truth


@dataclass(eq=False)
class Dataset:
    views: list[View]
    environments: list[RadianceMap]
    asset: FaceAsset
    lights: list[DirectLightSet] = field(default_factory=list)  # one per environment
    env_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        for v in self.views:
            if not 0 <= v.env < len(self.environments):
                raise ConfigError(f"view references missing environment {v.env}")
            if v.image.shape != (v.camera.height, v.camera.width, 3):
                raise ConfigError("view image dims do not match its camera")
        if not self.env_ids:
            self.env_ids = [f"env{i}" for i in range(len(self.environments))]

    def ensure_lights(self, n_lights: int = 800, **kw) -> list[DirectLightSet]:
        if len(self.lights) != len(self.environments):
            self.lights = [importance_sample_lights(env, n_lights, **kw) for env in self.environments]
        return self.lights

    def num_pixels(self) -> int:
        return sum(v.image.shape[0] * v.image.shape[1] for v in self.views)


@dataclass(frozen=True)
class SphereSpec:
    """Scene recipe for the analytic reference generator."""

    radius: float = 1.0
    environments: tuple = ()  # RadianceMaps; empty means two built-in skies
    albedo: TextureMap | tuple | None = None  # None means the built-in procedural texture
    n_views: int = 8
    width: int = 32
    height: int = 32
    fov_deg: float = 40.0
    distance: float = 3.5
    k_s: float = 0.3
    exponent: float = 32.0
    n_lights: int = 200
    seed: int = 0
    tessellation: tuple = (64, 128)


@dataclass(frozen=True)
class TrainConfig:
    batch_rays: int = 1024
    samples_per_ray: int = 64
    iterations: int = 5000
    lr: float = 5e-4
    lr_decay: float = 0.1  # lr multiplier reached at the last iteration
    seed: int = 7
    checkpoint_every: int = 1000
    network: NetworkConfig = NetworkConfig()
    density: DensityParams = DensityParams()
    specular_exponent: float = 32.0
    shadows: bool = True
    jitter: bool = True

    def __post_init__(self):
        for name in ("batch_rays", "samples_per_ray", "iterations", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("train.lr must be > 0 and lr_decay in (0, 1]")

    def render_config(self) -> RenderConfig:
        return RenderConfig(samples_per_ray=self.samples_per_ray, density=self.density,
                            specular_exponent=self.specular_exponent, shadows=self.shadows,
                            jitter=self.jitter, seed=self.seed)


# ---------------------------------------------------------------- analytic generator


def procedural_albedo(size: int = 64) -> TextureMap:
    """Smooth colour bands in [0.2, 0.8], periodic in u."""
    v, u = np.meshgrid((np.arange(size) + 0.5) / size, (np.arange(2 * size) + 0.5) / (2 * size), indexing="ij")
    r = 0.5 + 0.3 * np.sin(2 * np.pi * u)
    g = 0.5 + 0.3 * np.cos(2 * np.pi * (u + v))
    b = 0.5 + 0.3 * np.sin(np.pi * v) * np.cos(4 * np.pi * u)
    return TextureMap(np.stack([r, g, b], axis=-1).astype(np.float32), "linear")


def gradient_sky(rows: int = 64, cols: int = 128, zenith=(0.3, 0.45, 0.8), horizon=(0.9, 0.85, 0.8),
                 sun: OlatSpec | None = None) -> RadianceMap:
    """Smooth sky blending zenith to horizon colour, dim ground, optional sun cap."""
    y = np.cos(np.pi * (np.arange(rows) + 0.5) / rows)[:, None, None]
    top = np.clip(y, 0.0, 1.0)
    sky = top * np.asarray(zenith) + (1.0 - top) * np.asarray(horizon)
    data = np.where(y > 0, sky, 0.15 * np.asarray(horizon)) * np.ones((1, cols, 1))
    if sun is not None:
        data = data + generate_olat(sun, rows, cols).data
    return RadianceMap(data.astype(np.float32))


def default_environments() -> list[RadianceMap]:
    return [
        gradient_sky(sun=OlatSpec((0.6, 0.7, 0.4), np.radians(8.0), (6.0, 5.5, 5.0))),
        gradient_sky(zenith=(0.6, 0.4, 0.3), horizon=(0.4, 0.5, 0.7),
                     sun=OlatSpec((-0.7, 0.3, 0.6), np.radians(10.0), (3.0, 4.0, 5.0))),
    ]


def ring_cameras(n: int, distance: float, fov_deg: float, width: int, height: int,
                 rng: np.random.Generator) -> list[Camera]:
    """Cameras around +Y at alternating elevations, azimuths jittered by the seed."""
    out = []
    for i in range(n):
        az = 2 * np.pi * (i + 0.25 * rng.random()) / n
        el = np.radians(20.0 if i % 2 else -10.0)
        pos = distance * np.array([np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)])
        out.append(Camera(tuple(pos), (0.0, 0.0, 0.0), np.radians(fov_deg), width, height))
    return out


def analytic_sphere_image(camera: Camera, radius: float, albedo, lights: DirectLightSet, env: RadianceMap | None,
                          k_s: float, exponent: float) -> np.ndarray:
    """Closed-form Lambert + Phong render of a sphere at the origin."""
    o, d = camera_rays(camera)
    o, d = o.reshape(-1, 3), d.reshape(-1, 3)
    b = np.sum(o * d, axis=1)
    disc = b * b - (np.sum(o * o, axis=1) - radius * radius)
    hit = disc > 0.0
    t = -b[hit] - np.sqrt(disc[hit])
    n = (o[hit] + t[:, None] * d[hit]) / radius
    if isinstance(albedo, TextureMap):
        rho = sample_texture(albedo, sphere_uv(n))
    else:
        rho = np.broadcast_to(np.asarray(albedo, float), n.shape)
    s_diff, s_spec = direct_sums(n, -d[hit], lights, None, exponent)
    img = np.zeros_like(o) if env is None else lookup(env, d)
    img[hit] = rho / np.pi * s_diff + k_s * s_spec
    return img.reshape(camera.height, camera.width, 3)


def generate_reference_dataset(spec: SphereSpec = SphereSpec()) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    envs = list(spec.environments) or default_environments()
    if spec.albedo is None:
        albedo = procedural_albedo()
    elif isinstance(spec.albedo, TextureMap):
        albedo = spec.albedo
    else:
        albedo = np.asarray(spec.albedo, float)
    lights = [importance_sample_lights(e, spec.n_lights) for e in envs]
    views = []
    for i, cam in enumerate(ring_cameras(spec.n_views, spec.distance, spec.fov_deg, spec.width, spec.height, rng)):
        env = i % len(envs)
        img = analytic_sphere_image(cam, spec.radius, albedo, lights[env], envs[env], spec.k_s, spec.exponent)
        views.append(View(cam, env, img))
    mesh = uv_sphere(spec.radius, *spec.tessellation)
    return Dataset(views, envs, FaceAsset(mesh, albedo), lights)


# ---------------------------------------------------------------- manifest I/O


def _camera_dict(cam: Camera) -> dict:
    return {"position": [float(x) for x in cam.position], "look_at": [float(x) for x in cam.look_at],
            "fov": float(np.degrees(cam.fov)), "width": cam.width, "height": cam.height}


def _load_image(path: Path) -> np.ndarray:
    if not path.is_file():
        raise AssetError(f"image not found: {path}")
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    return load_hdri(path).data.astype(np.float64)


def save_dataset(ds: Dataset, root) -> Path:
    """Write meshes, textures, maps and exact float32 targets plus ``manifest.yaml``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_mesh(ds.asset.mesh, root / "mesh.obj")
    asset = {"mesh": "mesh.obj"}
    if isinstance(ds.asset.albedo, TextureMap):
        save_texture(root / "albedo.png", ds.asset.albedo.data, bit_depth=16)
        asset["albedo"] = "albedo.png"
    elif ds.asset.albedo is not None:
        asset["albedo_rgb"] = [float(x) for x in ds.asset.albedo]
    if ds.asset.normal_map is not None:
        save_texture(root / "normal.png", ds.asset.normal_map.data, bit_depth=16)
        asset["normal"] = "normal.png"
    envs = []
    for eid, env in zip(ds.env_ids, ds.environments):
        save_hdri(root / f"{eid}.hdr", env)
        envs.append({"id": eid, "path": f"{eid}.hdr"})
    for eid, lights in zip(ds.env_ids, ds.lights):
        save_light_set(root / f"{eid}.lights", lights)
        envs[ds.env_ids.index(eid)]["lights"] = f"{eid}.lights"
    views = []
    for i, v in enumerate(ds.views):
        name = f"view_{i:03d}.npy"
        np.save(root / name, v.image.astype(np.float32))
        views.append({"camera": _camera_dict(v.camera), "env": ds.env_ids[v.env], "image": name})
    manifest = root / "manifest.yaml"
    manifest.write_text(yaml.safe_dump({"asset": asset, "environments": envs, "views": views}, sort_keys=False))
    return manifest


def load_dataset(manifest) -> Dataset:
    manifest = Path(manifest)
    if not manifest.is_file():
        raise AssetError(f"dataset manifest not found: {manifest}")
    root = manifest.parent
    try:
        doc = yaml.safe_load(manifest.read_text())
        asset_doc = doc["asset"]
        mesh = load_mesh(root / asset_doc["mesh"])
        if "albedo" in asset_doc:
            albedo = load_texture(root / asset_doc["albedo"], "linear")
        else:
            albedo = asset_doc.get("albedo_rgb")
            albedo = None if albedo is None else np.asarray(albedo, float)
        normal = load_texture(root / asset_doc["normal"], "linear") if "normal" in asset_doc else None
        ids = [e["id"] for e in doc["environments"]]
        envs = [load_hdri(root / e["path"]) for e in doc["environments"]]
        lights = [load_light_set(root / e["lights"]) for e in doc["environments"] if "lights" in e]
        views = []
        for v in doc["views"]:
            c = v["camera"]
            if v["env"] not in ids:
                raise ConfigError(f"view references unknown environment {v['env']!r}")
            cam = Camera(tuple(c["position"]), tuple(c["look_at"]), np.radians(c["fov"]), int(c["width"]),
                         int(c["height"]))
            views.append(View(cam, ids.index(v["env"]), _load_image(root / v["image"])))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{manifest}: malformed manifest ({exc})") from None
    return Dataset(views, envs, FaceAsset(mesh, albedo, normal), lights, ids)


# ---------------------------------------------------------------- batches & loss


def sample_ray_batch(dataset: Dataset, rng: np.random.Generator, batch: int = 1024):
    """Uniform (view, pixel) draws; returns (origins, dirs, targets, view ids, flat pixel ids)."""
    sizes = np.array([v.image.shape[0] * v.image.shape[1] for v in dataset.views])
    if len(sizes) == 0 or sizes.sum() == 0:
        raise ConfigError("empty dataset")
    flat = rng.integers(0, sizes.sum(), size=batch)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    view_ids = np.searchsorted(offsets, flat, side="right") - 1
    pix = flat - offsets[view_ids]
    origins = np.empty((batch, 3))
    dirs = np.empty((batch, 3))
    targets = np.empty((batch, 3))
    for vid in np.unique(view_ids):
        sel = view_ids == vid
        v = dataset.views[vid]
        rows, cols = np.divmod(pix[sel], v.camera.width)
        origins[sel], dirs[sel] = camera_rays(v.camera, rows, cols)
        targets[sel] = v.image[rows, cols]
    return origins, dirs, targets, view_ids, pix


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass(eq=False)
class RayCache:
    """Network-independent per-pixel data for every training view."""

    bundle: RayBundle
    targets: np.ndarray
    offsets: np.ndarray  # view start indices into the flat pixel list

    @classmethod
    def build(cls, dataset: Dataset, cfg: RenderConfig) -> "RayCache":
        lights = dataset.ensure_lights()
        parts, targets = [], []
        for v in dataset.views:
            scene = dataset.asset.scene(lights[v.env], dataset.environments[v.env])
            o, d = camera_rays(v.camera)
            parts.append(prepare_rays(scene, o, d, cfg))
            targets.append(v.image.reshape(-1, 3))
        sizes = [len(p) for p in parts]
        return cls(RayBundle.concat(parts), np.concatenate(targets), np.concatenate([[0], np.cumsum(sizes)]))


# ---------------------------------------------------------------- training loop


@dataclass(eq=False)
class TrainResult:
    shader: NeuralShader
    losses: list[float]
    optimizers: dict[str, AdamState]
    checkpoints: list[Path] = field(default_factory=list)
    iteration: int = 0


def _config_meta(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    return json.loads(json.dumps(d, default=float))


def write_loss_csv(path, losses, start: int = 0) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss"])
        for i, loss in enumerate(losses, start):
            w.writerow([i, repr(float(loss))])


def _abort_non_finite(it: int, idx: np.ndarray, pred: np.ndarray, target: np.ndarray, out_dir) -> None:
    bad_rows = np.flatnonzero(~(np.isfinite(pred).all(axis=1) & np.isfinite(target).all(axis=1)))
    bad = int(bad_rows[0]) if len(bad_rows) else -1
    dump = {"iteration": it, "batch": it, "sample": bad, "pixel": int(idx[bad]) if bad >= 0 else None,
            "prediction": pred[bad].tolist() if bad >= 0 else None,
            "target": target[bad].tolist() if bad >= 0 else None}
    if out_dir is not None:
        (out_dir / "nan_dump.json").write_text(json.dumps(dump))
    raise NumericalError(f"non-finite loss at iteration {it} (sample {bad}, pixel {dump['pixel']})")


def train(cfg: TrainConfig, dataset: Dataset, out_dir=None, resume=None, cache: RayCache | None = None,
          stop_at: int | None = None) -> TrainResult:
    """Fit both networks; ``stop_at`` halts early (for resume tests) without changing the schedule."""
    rcfg = cfg.render_config()
    net_cfg = cfg.network
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        ck = load_checkpoint(resume)
        shader = NeuralShader(ck.nets["material"], ck.nets["lightfield"], net_cfg)
        opts = ck.optimizers
        start = int(ck.meta["iteration"])
        losses = list(ck.meta.get("losses", []))
    else:
        rng = np.random.default_rng(cfg.seed)
        shader = NeuralShader(init_material_net(rng, net_cfg), init_lightfield_net(rng, net_cfg), net_cfg)
        opts = {k: adam_init(p, cfg.lr) for k, p in shader.nets().items()}
        start, losses = 0, []
    cache = cache or RayCache.build(dataset, rcfg)
    scene = dataset.asset.scene(dataset.ensure_lights()[0])
    total = len(cache.targets)
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    written: list[Path] = []
    for it in range(start, end):
        rng = np.random.default_rng([cfg.seed, it])
        idx = rng.integers(0, total, size=cfg.batch_rays)
        bundle = cache.bundle.take(idx)
        res = shade_bundle(bundle, scene, shader, rcfg, rng=rng, keep_tape=True)
        loss, grad = mse_loss(res.pixels, cache.targets[idx])
        if not np.isfinite(loss):
            _abort_non_finite(it, idx, res.pixels, cache.targets[idx], out_dir)
        losses.append(loss)
        grads = res.backward(grad)
        lr = cfg.lr * cfg.lr_decay ** (it / cfg.iterations)
        for name, net in shader.nets().items():
            adam_step(net, grads[name], opts[name], lr)
        done = it + 1
        if out_dir is not None and (done % cfg.checkpoint_every == 0 or done == end):
            path = out_dir / f"ckpt_{done:06d}.lfc"
            save_checkpoint(path, shader.nets(), opts, {"iteration": done, "losses": losses,
                                                        "config": _config_meta(cfg)})
            written.append(path)
            write_loss_csv(out_dir / "loss.csv", losses)
        if done % 500 == 0:
            log.info("iter %d loss %.6g", done, loss)
    return TrainResult(shader, losses, opts, written, end)


def render_views(shader, dataset: Dataset, cfg: RenderConfig, cache: RayCache | None = None) -> list[np.ndarray]:
    """Render every training view with midpoint sampling."""
    cache = cache or RayCache.build(dataset, cfg)
    scene = dataset.asset.scene(dataset.ensure_lights()[0])
    det = replace(cfg, jitter=False)
    out = []
    for i, v in enumerate(dataset.views):
        sl = slice(cache.offsets[i], cache.offsets[i + 1])
        px = []
        for s in range(sl.start, sl.stop, 4096):
            px.append(shade_bundle(cache.bundle.take(slice(s, min(s + 4096, sl.stop))), scene, shader, det).pixels)
        out.append(np.concatenate(px).reshape(v.image.shape))
    return out


def evaluate(shader, dataset: Dataset, cfg: RenderConfig, cache: RayCache | None = None) -> MetricsReport:
    images = render_views(shader, dataset, cfg, cache)
    return compute_metrics(images, [v.image for v in dataset.views],
                           names=[f"view{i}" for i in range(len(images))])
