"""Light transport over a geometry-anchored Gaussian density field.

Every camera ray is intersected with the mesh. Around the hit x0 the density
sigma(x) = alpha * exp(-|x - x0|^2 / (2 delta^2)) is sampled at stratified
points and composited with transmittance weights. Each sample is shaded with
three terms: direct specular (gamma * Phong lobe around the mirror direction),
direct Lambertian diffuse, and subsurface scattering driven by local degree-1
SH irradiance. Normal and albedo come from the UV lookup at x0 and are shared
by all samples of a ray; the networks see each sample's own position.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from lumafield.assets import (
    RadianceMap,
    TextureMap,
    TriangleMesh,
    decode_normal,
    intersect_many,
    sample_texture,
    visibility,
)
from lumafield.equirect import lookup
from lumafield.errors import ConfigError
from lumafield.lighting import LIGHT_CODE_DIM, DirectLightSet, light_code
from lumafield.neural import MlpParams, NetworkConfig, freq_encode, mlp_backward, mlp_forward
from lumafield.shfield import as_coeffs, irradiance_weights

TERMS = ("specular", "diffuse", "sss")


@dataclass(frozen=True)
class DensityParams:
    alpha_sigma: float = 10.0
    delta: float = 0.5  # scene-box-normalised units

    def __post_init__(self):
        # alpha 0 is allowed so a render can force a fully transparent field
        if self.alpha_sigma < 0 or self.delta <= 0:
            raise ConfigError("density needs alpha_sigma >= 0 and delta > 0")


def density(x, x0, p: DensityParams = DensityParams()) -> np.ndarray:
    d2 = np.sum((np.asarray(x, dtype=np.float64) - np.asarray(x0, dtype=np.float64)) ** 2, axis=-1)
    return p.alpha_sigma * np.exp(-d2 / (2.0 * p.delta ** 2))


def composite_weights(sigmas, dts) -> np.ndarray:
    """w_i = T_i (1 - exp(-sigma_i dt_i)) with T_i = exp(-sum_{j<i} sigma_j dt_j)."""
    tau = np.asarray(sigmas, dtype=np.float64) * np.asarray(dts, dtype=np.float64)
    before = np.cumsum(tau, axis=-1) - tau
    return np.exp(-before) * -np.expm1(-tau)


def stratified_t(t0, count: int, half_width: float, jitter=None) -> tuple[np.ndarray, np.ndarray]:
    """Sample positions in [t0 - half_width, t0 + half_width] clipped to t > 0.

    ``jitter`` is None (bin midpoints) or an array of offsets in [0, 1) shaped (R, count).
    Returns (t, dt), both (R, count); dt is the bin length.
    """
    if count < 1:
        raise ConfigError("samples_per_ray must be >= 1")
    t0 = np.atleast_1d(np.asarray(t0, dtype=np.float64))
    lo = np.maximum(t0 - half_width, 0.0)
    hi = t0 + half_width
    step = (hi - lo) / count
    off = 0.5 if jitter is None else np.asarray(jitter, dtype=np.float64)
    t = lo[:, None] + (np.arange(count)[None, :] + off) * step[:, None]
    return t, np.broadcast_to(step[:, None], t.shape).copy()


@dataclass(frozen=True)
class PathSamples:
    t: np.ndarray
    x: np.ndarray  # (S, 3)
    d_g: np.ndarray  # distance to x0
    sigma: np.ndarray
    dt: np.ndarray
    w: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


def sample_along_ray(origin, direction, hit, count: int = 64, p: DensityParams = DensityParams(),
                     scale: float = 1.0, jitter=None) -> PathSamples:
    """Stratified samples within +-3 delta of the hit; empty on a miss."""
    if hit is None:
        e = np.zeros(0)
        return PathSamples(e, np.zeros((0, 3)), e, e, e, e)
    t, dt = stratified_t([hit.t], count, 3.0 * p.delta * scale, None if jitter is None else [jitter])
    t, dt = t[0], dt[0]
    x = np.asarray(origin, float) + t[:, None] * np.asarray(direction, float)
    d_g = np.linalg.norm(x - hit.x0, axis=1) / scale
    sigma = p.alpha_sigma * np.exp(-d_g ** 2 / (2.0 * p.delta ** 2))
    return PathSamples(t, x, d_g, sigma, dt, composite_weights(sigma, dt / scale))


def reflect(omega_i, n) -> np.ndarray:
    """Mirror direction R = 2 (w.n) n - w."""
    omega_i = np.asarray(omega_i, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return 2.0 * np.sum(omega_i * n, axis=-1, keepdims=True) * n - omega_i


# ---------------------------------------------------------------- camera


@dataclass(frozen=True)
class Camera:
    position: tuple
    look_at: tuple
    fov: float  # vertical field of view, radians
    width: int
    height: int
    up: tuple = (0.0, 1.0, 0.0)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not 0.0 < self.fov < np.pi:
            raise ConfigError("camera fov must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ConfigError("camera dimensions must be positive")
        fwd = np.asarray(self.look_at, float) - np.asarray(self.position, float)
        norm = np.linalg.norm(fwd)
        if norm == 0:
            raise ConfigError("degenerate camera: look_at equals position")
        fwd /= norm
        right = np.cross(fwd, np.asarray(self.up, float))
        if np.linalg.norm(right) < 1e-9:
            raise ConfigError("degenerate camera: view direction parallel to up")
        right /= np.linalg.norm(right)
        return fwd, right, np.cross(right, fwd)


def camera_rays(cam: Camera, rows=None, cols=None) -> tuple[np.ndarray, np.ndarray]:
    """Rays through pixel centres; full grid (H, W, 3) when rows/cols are omitted."""
    fwd, right, up = cam.basis()
    if rows is None:
        rows, cols = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    tan_half = np.tan(cam.fov / 2.0)
    aspect = cam.width / cam.height
    sx = (2.0 * (cols + 0.5) / cam.width - 1.0) * tan_half * aspect
    sy = (1.0 - 2.0 * (rows + 0.5) / cam.height) * tan_half
    d = fwd + sx[..., None] * right + sy[..., None] * up
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return np.broadcast_to(np.asarray(cam.position, float), d.shape).copy(), d


# ---------------------------------------------------------------- scene & shaders


@dataclass(eq=False)
class Scene:
    mesh: TriangleMesh
    lights: DirectLightSet
    albedo: TextureMap | np.ndarray | None = None  # texture, constant RGB, or None (white)
    normal_map: TextureMap | None = None
    hdri: RadianceMap | None = None  # background; None renders black
    light_code: np.ndarray | None = None
    center: np.ndarray = field(default=None)
    scale: float = 0.0

    def __post_init__(self):
        lo, hi = self.mesh.bounds
        if self.center is None:
            self.center = (lo + hi) / 2.0
        if not self.scale:
            self.scale = float(np.max(hi - lo) / 2.0) or 1.0
        if self.light_code is None:
            self.light_code = light_code(self.hdri) if self.hdri is not None else np.zeros(LIGHT_CODE_DIM)

    def albedo_at(self, uv: np.ndarray) -> np.ndarray:
        if isinstance(self.albedo, TextureMap):
            return sample_texture(self.albedo, uv)
        rgb = np.ones(3) if self.albedo is None else np.asarray(self.albedo, dtype=np.float64)
        return np.broadcast_to(rgb, uv.shape[:-1] + (3,)).copy()

    def background(self, dirs: np.ndarray) -> np.ndarray:
        if self.hdri is None:
            return np.zeros(dirs.shape[:-1] + (3,))
        return lookup(self.hdri, dirs)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.center) / self.scale


@dataclass(frozen=True)
class FixedMaterial:
    """Bypass both networks with constant gamma, eta and indirect SH."""

    gamma: float = 0.0
    eta: tuple = (0.0, 0.0, 0.0)
    sh: np.ndarray | None = None  # (3, 4) or 12 floats; None means no indirect light


@dataclass(eq=False)
class NeuralShader:
    material: MlpParams
    lightfield: MlpParams
    config: NetworkConfig = NetworkConfig()

    def nets(self) -> dict[str, MlpParams]:
        return {"material": self.material, "lightfield": self.lightfield}


@dataclass(frozen=True)
class RenderConfig:
    samples_per_ray: int = 64
    density: DensityParams = DensityParams()
    specular_exponent: float = 32.0
    shadows: bool = True
    irradiance_mode: str = "hemisphere"
    terms: tuple = TERMS
    background: bool = True
    jitter: bool = False
    seed: int = 0
    tile: int = 32
    threads: int | None = None


# ---------------------------------------------------------------- shading terms


@dataclass
class ShadingContext:
    n: np.ndarray
    rho_s: np.ndarray
    rho_ss: np.ndarray
    gamma: float
    eta: np.ndarray
    lights: DirectLightSet
    sh: np.ndarray
    omega_o: np.ndarray
    e: float = 32.0
    visibility: np.ndarray | None = None  # (L,) in {0, 1}; None = all visible


def light_weights(n, omega_o, lights: DirectLightSet, vis=None, e: float = 32.0):
    """Per-(point, light) diffuse and specular factors, each (R, L).

    Lights with w_i . n <= 0 are excluded; ``vis`` multiplies in shadowing.
    """
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    omega_o = np.atleast_2d(np.asarray(omega_o, dtype=np.float64))
    ld = lights.directions
    cos_l = n @ ld.T
    above = cos_l > 0.0
    if vis is not None:
        above &= np.asarray(vis, dtype=bool).reshape(above.shape)
    dot_r = 2.0 * cos_l * np.sum(omega_o * n, axis=1, keepdims=True) - omega_o @ ld.T
    diff = np.where(above, cos_l, 0.0)
    spec = np.where(above, np.maximum(dot_r, 0.0) ** e, 0.0)
    return diff, spec


def direct_sums(n, omega_o, lights: DirectLightSet, vis=None, e: float = 32.0):
    """(S_diff, S_spec): light-integrated diffuse and specular lobes, each (R, 3)."""
    diff, spec = light_weights(n, omega_o, lights, vis, e)
    power = lights.radiance * lights.solid_angles[:, None]
    return diff @ power, spec @ power


def shade_direct_specular(ctx: ShadingContext) -> np.ndarray:
    _, s_spec = direct_sums(ctx.n, ctx.omega_o, ctx.lights, ctx.visibility, ctx.e)
    return ctx.gamma * s_spec[0]


def shade_direct_diffuse(ctx: ShadingContext) -> np.ndarray:
    s_diff, _ = direct_sums(ctx.n, ctx.omega_o, ctx.lights, ctx.visibility, ctx.e)
    return np.asarray(ctx.rho_s) / np.pi * s_diff[0]


def shade_indirect_sss(ctx: ShadingContext, mode: str = "hemisphere") -> np.ndarray:
    from lumafield.shfield import cosine_irradiance

    return (np.asarray(ctx.rho_ss) + np.asarray(ctx.eta)) / np.pi * cosine_irradiance(ctx.sh, ctx.n, mode)


# ---------------------------------------------------------------- batched rendering


@dataclass(eq=False)
class RayBundle:
    """Per-ray quantities that do not depend on the networks."""

    origins: np.ndarray
    dirs: np.ndarray
    hit: np.ndarray  # (R,) bool
    t0: np.ndarray
    x0: np.ndarray
    n: np.ndarray  # shading normal
    albedo: np.ndarray
    s_diff: np.ndarray
    s_spec: np.ndarray
    background: np.ndarray
    light_code: np.ndarray  # (R, code_dim)

    def __len__(self) -> int:
        return len(self.hit)

    def take(self, idx) -> "RayBundle":
        return RayBundle(**{k: v[idx] for k, v in self.__dict__.items()})

    @staticmethod
    def concat(parts) -> "RayBundle":
        return RayBundle(**{k: np.concatenate([getattr(p, k) for p in parts]) for k in parts[0].__dict__})


def prepare_rays(scene: Scene, origins, dirs, cfg: RenderConfig = RenderConfig()) -> RayBundle:
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    hb = intersect_many(scene.mesh, origins, dirs)
    hit = hb.mask
    tbn = hb.tbn[hit]
    uv = hb.uv[hit]
    if scene.normal_map is not None:
        n = decode_normal(sample_texture(scene.normal_map, uv), tbn)
    else:
        n = tbn[:, :, 2]
    omega_o = -dirs[hit]
    vis = None
    if cfg.shadows and len(n):
        vis = visibility(scene.mesh, hb.x0[hit], n, scene.lights.directions, offset=1e-3 * scene.scale)
    s_diff = np.zeros((len(dirs), 3))
    s_spec = np.zeros((len(dirs), 3))
    s_diff[hit], s_spec[hit] = direct_sums(n, omega_o, scene.lights, vis, cfg.specular_exponent)
    full_n = np.zeros((len(dirs), 3))
    full_n[hit] = n
    albedo = np.zeros((len(dirs), 3))
    albedo[hit] = scene.albedo_at(uv)
    bg = scene.background(dirs) if cfg.background else np.zeros((len(dirs), 3))
    code = np.broadcast_to(np.asarray(scene.light_code, float), (len(dirs), len(scene.light_code))).copy()
    return RayBundle(origins, dirs, hit, np.where(hit, hb.t, 0.0), hb.x0, full_n, albedo,
                     s_diff, s_spec, bg, code)


@dataclass(eq=False)
class ShadeResult:
    pixels: np.ndarray  # (R, 3)
    terms: dict  # term name -> (R, 3) composited contribution
    background: np.ndarray  # (R, 3) (1 - sum w) * bg
    opacity: np.ndarray  # (R,) sum of weights
    _ctx: dict = field(default_factory=dict, repr=False)

    def backward(self, d_pixels) -> dict[str, list[np.ndarray]]:
        """Parameter gradients of sum(d_pixels * pixels) for each network."""
        return _shade_backward(self._ctx, np.asarray(d_pixels, dtype=np.float64))


def _sample_rng(cfg: RenderConfig, key) -> np.random.Generator | None:
    return np.random.default_rng([cfg.seed, *np.atleast_1d(key)]) if cfg.jitter else None


def shade_bundle(bundle: RayBundle, scene: Scene, shader, cfg: RenderConfig = RenderConfig(),
                 rng: np.random.Generator | None = None, keep_tape: bool = False) -> ShadeResult:
    """Composite the three shading terms along every ray of a prepared bundle."""
    for term in cfg.terms:
        if term not in TERMS:
            raise ConfigError(f"unknown shading term {term!r}")
    n_rays = len(bundle)
    S = cfg.samples_per_ray
    hit = np.flatnonzero(bundle.hit)
    H = len(hit)
    dens = cfg.density
    jitter = rng.random((H, S)) if rng is not None else None
    t, dt = stratified_t(bundle.t0[hit], S, 3.0 * dens.delta * scene.scale, jitter)
    o, d = bundle.origins[hit], bundle.dirs[hit]
    x = o[:, None, :] + t[..., None] * d[:, None, :]
    x_n = scene.normalize(x)
    d_g = np.linalg.norm(x - bundle.x0[hit][:, None, :], axis=-1) / scene.scale
    sigma = dens.alpha_sigma * np.exp(-d_g ** 2 / (2.0 * dens.delta ** 2))
    w = composite_weights(sigma, dt / scene.scale)  # (H, S)

    n = bundle.n[hit]
    rho = bundle.albedo[hit]
    omega_o = -d
    ctx: dict = {"hit": hit, "w": w, "shader": shader, "cfg": cfg, "n_rays": n_rays}

    if isinstance(shader, FixedMaterial):
        gamma = np.full((H, S), float(shader.gamma))
        eta = np.broadcast_to(np.asarray(shader.eta, float), (H, S, 3))
        sh = np.zeros((3, 4)) if shader.sh is None else as_coeffs(shader.sh)
        sh = np.broadcast_to(sh, (H, S, 3, 4))
    elif isinstance(shader, NeuralShader):
        nc = shader.config
        dt_net = shader.material.weights[0].dtype
        pos = freq_encode(x_n.reshape(-1, 3), nc.pos_encoding, dt_net)
        denc = np.repeat(freq_encode(omega_o, nc.dir_encoding, dt_net), S, axis=0)
        mat, mat_tape = mlp_forward(shader.material, pos, denc)
        code = np.repeat(bundle.light_code[hit].astype(dt_net), S, axis=0)
        lf, lf_tape = mlp_forward(shader.lightfield, pos, np.concatenate([denc, code], axis=1))
        mat = mat.astype(np.float64)
        gamma = mat[:, 0].reshape(H, S)
        eta = mat[:, 1:4].reshape(H, S, 3)
        sh = lf.astype(np.float64).reshape(H, S, 3, 4)
        if keep_tape:
            ctx.update(mat_tape=mat_tape, lf_tape=lf_tape)
    else:
        raise TypeError(f"unsupported shader {type(shader).__name__}")

    irr_w = irradiance_weights(n, cfg.irradiance_mode)  # (H, 4)
    e_raw = np.einsum("hscm,hm->hsc", sh, irr_w)
    irr = np.maximum(e_raw, 0.0)

    terms = {k: np.zeros((n_rays, 3)) for k in TERMS}
    if "specular" in cfg.terms:
        terms["specular"][hit] = np.sum(w * gamma, axis=1)[:, None] * bundle.s_spec[hit]
    if "diffuse" in cfg.terms:
        terms["diffuse"][hit] = np.sum(w, axis=1)[:, None] * rho / np.pi * bundle.s_diff[hit]
    if "sss" in cfg.terms:
        terms["sss"][hit] = np.einsum("hs,hsc->hc", w, (rho[:, None, :] + eta) / np.pi * irr)
    opacity = np.zeros(n_rays)
    opacity[hit] = np.sum(w, axis=1)
    background = (1.0 - opacity)[:, None] * bundle.background
    pixels = terms["specular"] + terms["diffuse"] + terms["sss"] + background
    if keep_tape:
        ctx.update(s_spec=bundle.s_spec[hit], rho=rho, eta=eta, irr=irr, e_pos=e_raw > 0.0, irr_w=irr_w)
    return ShadeResult(pixels, terms, background, opacity, ctx)


def _shade_backward(ctx: dict, d_pixels: np.ndarray) -> dict[str, list[np.ndarray]]:
    shader, cfg = ctx["shader"], ctx["cfg"]
    if not isinstance(shader, NeuralShader) or "mat_tape" not in ctx:
        raise RuntimeError("backward needs a NeuralShader result rendered with keep_tape=True")
    g = d_pixels[ctx["hit"]]  # (H, 3)
    w = ctx["w"]
    H, S = w.shape
    d_gamma = np.zeros((H, S))
    d_eta = np.zeros((H, S, 3))
    d_sh = np.zeros((H, S, 3, 4))
    if "specular" in cfg.terms:
        d_gamma = w * np.sum(g * ctx["s_spec"], axis=1)[:, None]
    if "sss" in cfg.terms:
        gw = w[..., None] * g[:, None, :]  # (H, S, 3)
        d_eta = gw * ctx["irr"] / np.pi
        d_irr = gw * (ctx["rho"][:, None, :] + ctx["eta"]) / np.pi * ctx["e_pos"]
        d_sh = d_irr[..., None] * ctx["irr_w"][:, None, None, :]
    d_mat = np.concatenate([d_gamma.reshape(-1, 1), d_eta.reshape(-1, 3)], axis=1)
    return {
        "material": mlp_backward(shader.material, ctx["mat_tape"], d_mat),
        "lightfield": mlp_backward(shader.lightfield, ctx["lf_tape"], d_sh.reshape(-1, 12)),
    }


def render_rays(scene: Scene, origins, dirs, shader, cfg: RenderConfig = RenderConfig(), key=0) -> ShadeResult:
    bundle = prepare_rays(scene, origins, dirs, cfg)
    return shade_bundle(bundle, scene, shader, cfg, _sample_rng(cfg, key))


def render_pixel(origin, direction, scene: Scene, shader, cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    return render_rays(scene, np.asarray(origin)[None], np.asarray(direction)[None], shader, cfg).pixels[0]


# ---------------------------------------------------------------- images


@dataclass
class TimingReport:
    width: int
    height: int
    rays: int
    seconds: float

    def line(self) -> str:
        return f"{self.width}x{self.height}\t{self.rays}\t{self.seconds:.3f}"


@dataclass(eq=False)
class RenderOutput:
    image: np.ndarray  # (H, W, 3) linear
    terms: dict  # name -> (H, W, 3)
    background: np.ndarray
    opacity: np.ndarray  # (H, W)
    timing: TimingReport


def worker_count(threads: int | None = None) -> int:
    if threads:
        return max(1, int(threads))
    env = os.environ.get("LUMAFIELD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"LUMAFIELD_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _tiles(cam: Camera, size: int):
    for r0 in range(0, cam.height, size):
        for c0 in range(0, cam.width, size):
            yield r0, min(r0 + size, cam.height), c0, min(c0 + size, cam.width)


def render_image(scene: Scene, camera: Camera, shader, cfg: RenderConfig = RenderConfig(),
                 tile_order=None) -> RenderOutput:
    """Render pixel tiles in parallel; output does not depend on tile scheduling."""
    tiles = list(_tiles(camera, cfg.tile))
    order = range(len(tiles)) if tile_order is None else list(tile_order)
    if sorted(order) != list(range(len(tiles))):
        raise ConfigError("tile_order must be a permutation of the tile indices")
    H, W = camera.height, camera.width
    image = np.zeros((H, W, 3))
    terms = {k: np.zeros((H, W, 3)) for k in TERMS}
    back = np.zeros((H, W, 3))
    opacity = np.zeros((H, W))

    def work(i):
        r0, r1, c0, c1 = tiles[i]
        rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
        o, d = camera_rays(camera, rr, cc)
        res = render_rays(scene, o, d, shader, cfg, key=i)
        shape = (r1 - r0, c1 - c0, 3)
        return i, res.pixels.reshape(shape), {k: v.reshape(shape) for k, v in res.terms.items()}, \
            res.background.reshape(shape), res.opacity.reshape(shape[:2])

    start = time.perf_counter()
    n_workers = min(worker_count(cfg.threads), len(tiles))
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(work, order))
    else:
        results = [work(i) for i in order]
    elapsed = time.perf_counter() - start
    for i, px, tm, bg, op in results:
        r0, r1, c0, c1 = tiles[i]
        image[r0:r1, c0:c1] = px
        back[r0:r1, c0:c1] = bg
        opacity[r0:r1, c0:c1] = op
        for k in TERMS:
            terms[k][r0:r1, c0:c1] = tm[k]
    return RenderOutput(image, terms, back, opacity, TimingReport(W, H, W * H, elapsed))


def with_terms(cfg: RenderConfig, *terms: str) -> RenderConfig:
    return replace(cfg, terms=tuple(terms))
