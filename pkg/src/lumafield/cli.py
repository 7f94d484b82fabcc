"""``lumafield`` command line: render, relight, train, datasets, OLAT maps, probes, ablations, benchmarks, metrics.

Exit codes: 0 success, 2 configuration/usage error, 3 asset or I/O error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from lumafield.assets import (
    RadianceMap,
    ground_plane,
    load_hdri,
    load_mesh,
    load_texture,
    merge_meshes,
    save_hdri,
    save_texture,
    uv_sphere,
)
from lumafield.config import RunConfig, load_config, split_overrides
from lumafield.errors import AssetError, ConfigError, NumericalError
from lumafield.lighting import OlatSpec, generate_olat, importance_sample_lights
from lumafield.metrics import compute_metrics, display_encode, fmt_db, sharpness
from lumafield.neural import (
    NetworkConfig,
    init_lightfield_net,
    init_material_net,
    lightfield_net_eval,
    load_checkpoint,
)
from lumafield.shfield import cosine_irradiance
from lumafield.transport import (
    TERMS,
    Camera,
    DensityParams,
    FixedMaterial,
    NeuralShader,
    RenderConfig,
    Scene,
    render_image,
)

log = logging.getLogger("lumafield")

EXIT_OK, EXIT_CONFIG, EXIT_ASSET, EXIT_NUMERIC = 0, 2, 3, 4


# ---------------------------------------------------------------- builders


def build_mesh(spec: str | None):
    if not spec:
        raise ConfigError("paths.mesh is required")
    if spec == "builtin:sphere":
        return uv_sphere(1.0, 64, 128)
    if spec == "builtin:sphere_on_plane":
        return merge_meshes(uv_sphere(1.0, 64, 128, center=(0.0, 1.25, 0.0)), ground_plane(4.0, 0.0))
    if spec.startswith("builtin:"):
        raise ConfigError(f"unknown builtin mesh {spec!r}")
    return load_mesh(spec)


def load_env(path: str | None) -> RadianceMap:
    if not path:
        raise ConfigError("paths.hdri is required")
    return load_hdri(path)


def build_scene(cfg: RunConfig, hdri: RadianceMap | None = None, uniform: bool | None = None) -> Scene:
    p, s = cfg.paths, cfg.sampling
    mesh = build_mesh(p.mesh)
    env = hdri if hdri is not None else load_env(p.hdri)
    albedo = load_texture(p.albedo, "srgb-decoded" if cfg.render.albedo_srgb else "linear") if p.albedo else None
    normal = load_texture(p.normal, "linear") if p.normal else None
    uni = s.uniform_mode if uniform is None else uniform
    lights = importance_sample_lights(env, s.n_lights, s.clip_pct, s.imp_thresh, uniform=uni)
    return Scene(mesh, lights, albedo, normal, env)


def parse_fixed(text: str) -> FixedMaterial:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"--fixed-material expects numbers, got {text!r}") from None
    if len(vals) == 2:
        return FixedMaterial(vals[0], (vals[1],) * 3)
    if len(vals) == 4:
        return FixedMaterial(vals[0], tuple(vals[1:]))
    raise ConfigError("--fixed-material takes 'gamma,eta' or 'gamma,eta_r,eta_g,eta_b'")


def shader_from_checkpoint(path) -> NeuralShader:
    ck = load_checkpoint(path)
    if "material" not in ck.nets or "lightfield" not in ck.nets:
        raise AssetError(f"{path}: checkpoint lacks material/lightfield networks")
    mat, lf = ck.nets["material"], ck.nets["lightfield"]
    cfg = NetworkConfig(depth=mat.depth, hidden=mat.hidden, inject_at=mat.inject_at,
                        pos_freqs=(mat.in_width // 3 - 1) // 2, dir_freqs=(mat.inject_width // 3 - 1) // 2,
                        light_code_dim=lf.inject_width - mat.inject_width)
    return NeuralShader(mat, lf, cfg)


def build_shader(cfg: RunConfig, fixed: str | None, allow_random: bool = False):
    if fixed:
        return parse_fixed(fixed)
    if cfg.paths.checkpoint:
        return shader_from_checkpoint(cfg.paths.checkpoint)
    if allow_random:
        t = cfg.train
        nc = NetworkConfig(depth=t.depth, hidden=t.hidden, inject_at=t.inject_at)
        rng = np.random.default_rng(cfg.render.seed)
        return NeuralShader(init_material_net(rng, nc), init_lightfield_net(rng, nc), nc)
    raise ConfigError("rendering needs paths.checkpoint or --fixed-material")


def render_config(cfg: RunConfig, **kw) -> RenderConfig:
    r = cfg.render
    base = RenderConfig(samples_per_ray=r.samples_per_ray,
                        density=DensityParams(cfg.density.alpha_sigma, cfg.density.delta),
                        specular_exponent=r.specular_exponent, shadows=r.shadows, jitter=r.jitter,
                        seed=r.seed, tile=r.tile, threads=r.threads or None)
    return replace(base, **kw)


def camera(cfg: RunConfig, width: int | None = None, height: int | None = None) -> Camera:
    r = cfg.render
    return Camera(r.position, r.look_at, np.radians(r.fov), width or r.width, height or r.height)


def write_png(path, linear, exposure: float = 1.0) -> None:
    save_texture(path, display_encode(linear, exposure), bit_depth=8)


def write_outputs(prefix: Path, image: np.ndarray, exposure: float) -> list[Path]:
    prefix.parent.mkdir(parents=True, exist_ok=True)
    png, hdr = prefix.with_suffix(".png"), prefix.with_suffix(".hdr")
    write_png(png, image, exposure)
    save_hdri(hdr, image.astype(np.float32))
    return [png, hdr]


def read_image(path) -> np.ndarray:
    """Linear float image from .hdr, .npy or a gamma-2.2 encoded .png."""
    path = Path(path)
    if not path.is_file():
        raise AssetError(f"image not found: {path}")
    if path.suffix.lower() == ".hdr":
        return load_hdri(path).data.astype(np.float64)
    if path.suffix.lower() == ".npy":
        return np.load(path).astype(np.float64)
    if path.suffix.lower() == ".png":
        return load_texture(path, "linear").data.astype(np.float64) ** 2.2
    raise AssetError(f"{path}: unsupported image type")


def tile_grid(images: list[np.ndarray], cols: int) -> np.ndarray:
    h, w = images[0].shape[:2]
    rows = -(-len(images) // cols)
    grid = np.zeros((rows * h, cols * w, 3))
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = img
    return grid


# ---------------------------------------------------------------- commands


def cmd_render(cfg: RunConfig, args, hdri_override: str | None = None) -> int:
    hdri = load_env(hdri_override) if hdri_override else None
    scene = build_scene(cfg, hdri)
    shader = build_shader(cfg, args.fixed_material)
    out = render_image(scene, camera(cfg), shader, render_config(cfg))
    prefix = Path(args.out) if args.out else Path(cfg.paths.out) / "render"
    files = write_outputs(prefix, out.image, cfg.render.exposure)
    timing = prefix.parent / (prefix.name + "_timing.txt")
    timing.write_text("resolution\trays\tseconds\n" + out.timing.line() + "\n")
    print("resolution\trays\tseconds")
    print(out.timing.line())
    for f in files:
        log.info("wrote %s", f)
    return EXIT_OK


def cmd_relight(cfg: RunConfig, args) -> int:
    if not args.hdri:
        raise ConfigError("relight needs --hdri PATH")
    return cmd_render(cfg, args, args.hdri)


def cmd_train(cfg: RunConfig, args) -> int:
    from lumafield.training import TrainConfig, load_dataset, train

    if not cfg.paths.dataset:
        raise ConfigError("train needs paths.dataset (a manifest.yaml)")
    ds = load_dataset(cfg.paths.dataset)
    s, t = cfg.sampling, cfg.train
    ds.ensure_lights(s.n_lights, clip_pct=s.clip_pct, imp_thresh=s.imp_thresh, uniform=s.uniform_mode)
    tc = TrainConfig(batch_rays=t.batch_rays, samples_per_ray=cfg.render.samples_per_ray,
                     iterations=t.iterations, lr=t.lr, lr_decay=t.lr_decay, seed=t.seed,
                     checkpoint_every=min(t.checkpoint_every, t.iterations),
                     network=NetworkConfig(depth=t.depth, hidden=t.hidden, inject_at=t.inject_at),
                     density=DensityParams(cfg.density.alpha_sigma, cfg.density.delta),
                     specular_exponent=cfg.render.specular_exponent, shadows=cfg.render.shadows)
    out_dir = Path(args.out or cfg.paths.out)
    res = train(tc, ds, out_dir, resume=args.resume)
    print(f"iterations\t{res.iteration}\nfinal_loss\t{res.losses[-1]:.6g}\ncheckpoint\t{res.checkpoints[-1]}")
    return EXIT_OK


def cmd_gen_dataset(cfg: RunConfig, args) -> int:
    from lumafield.training import SphereSpec, generate_reference_dataset, save_dataset

    envs = tuple(load_hdri(p) for p in args.env) if args.env else ()
    albedo = None
    if cfg.paths.albedo:
        albedo = load_texture(cfg.paths.albedo, "srgb-decoded" if cfg.render.albedo_srgb else "linear")
    spec = SphereSpec(environments=envs, albedo=albedo, n_views=args.views, width=args.size, height=args.size,
                      k_s=args.k_s, exponent=cfg.render.specular_exponent, n_lights=cfg.sampling.n_lights,
                      seed=args.seed)
    manifest = save_dataset(generate_reference_dataset(spec), args.out or Path(cfg.paths.out) / "dataset")
    print(manifest)
    return EXIT_OK


def _floats(text: str, n: int | None, what: str) -> np.ndarray:
    try:
        vals = np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigError(f"{what} expects comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"{what} expects {n} values")
    return vals


def cmd_gen_olat(cfg: RunConfig, args) -> int:
    center = _floats(args.center, 3, "--center")
    if not np.linalg.norm(center) > 0:
        raise ConfigError("--center must be a nonzero vector")
    rad = _floats(args.radiance, None, "--radiance")
    if len(rad) not in (1, 3):
        raise ConfigError("--radiance takes one or three values")
    olat = generate_olat(OlatSpec(center, np.radians(args.radius), np.broadcast_to(rad, (3,))), args.rows, args.cols)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_hdri(out, olat)
    print(out)
    return EXIT_OK


def probe_tiles(shader: NeuralShader, grid, light_code, tile: int = 32, omega=(0.0, 0.0, -1.0)) -> np.ndarray:
    """One diffuse ball per grid point, shaded by the predicted SH; rows = y*z, columns = x."""
    nx, ny, nz = grid
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in (nx, ny, nz)]
    zz, yy, xx = np.meshgrid(axes[2], axes[1][::-1], axes[0], indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)
    sh = lightfield_net_eval(shader.lightfield, pts, np.asarray(omega, float), light_code, shader.config)
    c = (np.arange(tile) + 0.5) / tile * 2.0 - 1.0
    py, px = np.meshgrid(-c, c, indexing="ij")
    inside = px ** 2 + py ** 2 < 1.0
    normals = np.stack([px, py, np.sqrt(np.clip(1.0 - px ** 2 - py ** 2, 0.0, None))], axis=-1)
    normals[~inside] = (0.0, 0.0, 1.0)  # masked out below; keeps the basis input unit length
    tiles = []
    for coeffs in sh:
        img = cosine_irradiance(coeffs, normals) / np.pi
        tiles.append(np.where(inside[..., None], img, 0.0))
    return tile_grid(tiles, nx)


def cmd_probe_field(cfg: RunConfig, args) -> int:
    if not cfg.paths.checkpoint:
        raise ConfigError("probe-field needs paths.checkpoint")
    shader = shader_from_checkpoint(cfg.paths.checkpoint)
    grid = tuple(int(v) for v in _floats(args.grid, 3, "--grid"))
    if min(grid) < 1:
        raise ConfigError("--grid entries must be >= 1")
    from lumafield.lighting import light_code

    code = light_code(load_hdri(cfg.paths.hdri)) if cfg.paths.hdri else np.zeros(shader.config.light_code_dim)
    img = probe_tiles(shader, grid, code, args.tile)
    out = Path(args.out or Path(cfg.paths.out) / "probes.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png(out, img, cfg.render.exposure)
    print(f"tiles\t{int(np.prod(grid))}\nimage\t{out}")
    return EXIT_OK


DENSITY_SWEEP = [(a, d) for a in (1.0, 10.0) for d in (0.05, 0.5, 2.0)]


def edge_gradient(img: np.ndarray) -> float:
    """99th percentile of the luminance gradient magnitude."""
    from lumafield.equirect import luminance

    lum = luminance(img)
    gy, gx = np.gradient(lum)
    return float(np.percentile(np.hypot(gx, gy), 99.0))


def cmd_ablate(cfg: RunConfig, args) -> int:
    out_dir = Path(args.out or Path(cfg.paths.out) / f"ablate_{args.mode}")
    out_dir.mkdir(parents=True, exist_ok=True)
    cam = camera(cfg)
    exposure = cfg.render.exposure
    rows: list[tuple] = []
    if args.mode == "density":
        scene = build_scene(cfg)
        shader = build_shader(cfg, args.fixed_material, allow_random=True)
        images = []
        for a, d in DENSITY_SWEEP:
            img = render_image(scene, cam, shader, render_config(cfg, density=DensityParams(a, d))).image
            images.append(img)
            rows.append((a, d, sharpness(display_encode(img, exposure))))
            write_png(out_dir / f"density_a{a:g}_d{d:g}.png", img, exposure)
        header = ("alpha_sigma", "delta", "sharpness")
        grid = tile_grid(images, 3)
    elif args.mode == "sampling":
        shader = build_shader(cfg, args.fixed_material or "0,0")
        env = load_env(cfg.paths.hdri)
        images = []
        for mode, uni in (("importance", False), ("uniform", True)):
            img = render_image(build_scene(cfg, env, uniform=uni), cam, shader, render_config(cfg)).image
            images.append(img)
            rows.append((mode, edge_gradient(display_encode(img, exposure))))
            write_png(out_dir / f"sampling_{mode}.png", img, exposure)
        header = ("mode", "edge_gradient")
        grid = tile_grid(images, 2)
    elif args.mode == "material-layers":
        scene = build_scene(cfg)
        shader = build_shader(cfg, args.fixed_material)
        out = render_image(scene, cam, shader, render_config(cfg))
        layers = [out.terms[k] for k in TERMS] + [out.background]
        residual = float(np.max(np.abs(sum(layers) - out.image)))
        for name, img in zip(TERMS + ("background",), layers):
            write_png(out_dir / f"layer_{name}.png", img, exposure)
            save_hdri(out_dir / f"layer_{name}.hdr", img.astype(np.float32))
            rows.append((name, float(img.max())))
        write_png(out_dir / "full.png", out.image, exposure)
        rows.append(("sum_residual", residual))
        header = ("layer", "value")
        grid = tile_grid(layers + [out.image], 5)
    else:
        raise ConfigError(f"unknown ablation mode {args.mode!r}")
    write_png(out_dir / "grid.png", grid, exposure)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows([[f"{v:.9g}" if isinstance(v, float) else v for v in r] for r in rows])
    for r in rows:
        print("\t".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in r))
    return EXIT_OK


def bench(scene: Scene, shader, cfg: RunConfig, resolutions, repeats: int = 3) -> list[tuple[int, float, int]]:
    """Median wall time per square resolution; rows are (res, seconds, rays)."""
    rc = render_config(cfg)
    rows = []
    for res in resolutions:
        times, rays = [], set()
        for _ in range(repeats):
            t = time.perf_counter()
            out = render_image(scene, camera(cfg, res, res), shader, rc)
            times.append(time.perf_counter() - t)
            rays.add(out.timing.rays)
        if len(rays) != 1:
            raise NumericalError("ray count changed between benchmark repeats")
        rows.append((res, float(np.median(times)), rays.pop()))
    return rows


def cmd_bench(cfg: RunConfig, args) -> int:
    res = [int(v) for v in _floats(args.resolutions, None, "--resolutions")]
    if min(res) < 1 or args.repeats < 1:
        raise ConfigError("resolutions and repeats must be positive")
    scene = build_scene(cfg)
    shader = build_shader(cfg, args.fixed_material)
    rows = bench(scene, shader, cfg, res, args.repeats)
    out = Path(args.out or Path(cfg.paths.out) / "bench.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["res", "seconds"])
        w.writerows([[r, f"{s:.6f}"] for r, s, _ in rows])
    print("res\tseconds\trays")
    for r, s, n in rows:
        print(f"{r}\t{s:.4f}\t{n}")
    return EXIT_OK


def cmd_metrics(cfg: RunConfig, args) -> int:
    rep = compute_metrics(read_image(args.rendered), read_image(args.reference), exposure=cfg.render.exposure)
    print(f"psnr\t{fmt_db(rep.psnr)}\nssim\t{rep.ssim:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing

COMMANDS = {
    "render": cmd_render, "relight": cmd_relight, "train": cmd_train, "gen-dataset": cmd_gen_dataset,
    "gen-olat": cmd_gen_olat, "probe-field": cmd_probe_field, "ablate": cmd_ablate, "bench": cmd_bench,
    "metrics": cmd_metrics,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lumafield", description=__doc__.splitlines()[0], allow_abbrev=False,
                                 epilog="Any config key can be overridden as --section.key VALUE "
                                        "(or --key VALUE when unambiguous).")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, allow_abbrev=False)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--out", help="output path or prefix")
        return p

    for name in ("render", "relight"):
        p = add(name, "render an image" if name == "render" else "render under a substituted HDRI")
        p.add_argument("--fixed-material", metavar="G,E", help="bypass networks with constant gamma and eta")
        if name == "relight":
            p.add_argument("--hdri", help="environment map to relight with")
    p = add("train", "fit both networks to a dataset")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = add("gen-dataset", "write an analytic sphere dataset")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--k-s", dest="k_s", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--env", action="append", help="environment .hdr (repeatable); default built-in skies")
    p = add("gen-olat", "write a one-light-at-a-time map")
    p.add_argument("--center", required=True, help="light direction x,y,z")
    p.add_argument("--radius", type=float, required=True, help="angular radius in degrees")
    p.add_argument("--radiance", default="1", help="scalar or r,g,b")
    p.add_argument("--rows", type=int, default=64)
    p.add_argument("--cols", type=int, default=128)
    p = add("probe-field", "visualise the light-field network on a grid")
    p.add_argument("--grid", default="4,4,1")
    p.add_argument("--tile", type=int, default=32)
    p = add("ablate", "density sweep, light-sampling comparison or per-term layers")
    p.add_argument("--mode", required=True, choices=["density", "sampling", "material-layers"])
    p.add_argument("--fixed-material", metavar="G,E")
    p = add("bench", "median render time per resolution")
    p.add_argument("--resolutions", default="128,256,512")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--fixed-material", metavar="G,E")
    p = add("metrics", "PSNR/SSIM between two images")
    p.add_argument("rendered")
    p.add_argument("reference")
    return ap


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, split_overrides(rest))
        if args.command == "gen-olat" and args.out is None:
            raise ConfigError("gen-olat needs --out PATH")
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"lumafield: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssetError as exc:
        print(f"lumafield: asset error: {exc}", file=sys.stderr)
        return EXIT_ASSET
    except OSError as exc:
        print(f"lumafield: I/O error: {exc}", file=sys.stderr)
        return EXIT_ASSET
    except NumericalError as exc:
        print(f"lumafield: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
