"""Rendering assets: meshes with a BVH, PNG textures and Radiance HDR maps."""

from lumafield.assets.hdr import RadianceMap, float_to_rgbe, load_hdri, rgbe_to_float, save_hdri
from lumafield.assets.mesh import (
    Hit,
    HitBatch,
    TriangleMesh,
    intersect,
    intersect_many,
    load_mesh,
    make_mesh,
    merge_meshes,
    save_mesh,
    shadow_visibility,
    visibility,
)
from lumafield.assets.primitives import ground_plane, icosphere, sphere_uv, uv_sphere
from lumafield.assets.texture import (
    TextureMap,
    decode_normal,
    linear_to_srgb,
    load_texture,
    sample_texture,
    save_texture,
    srgb_to_linear,
)

__all__ = [
    "Hit", "HitBatch", "RadianceMap", "TextureMap", "TriangleMesh",
    "decode_normal", "float_to_rgbe", "ground_plane", "icosphere", "intersect", "intersect_many",
    "linear_to_srgb", "load_hdri", "load_mesh", "load_texture", "make_mesh", "merge_meshes",
    "rgbe_to_float", "sample_texture", "save_hdri", "save_mesh", "save_texture", "shadow_visibility",
    "sphere_uv", "srgb_to_linear", "uv_sphere", "visibility",
]
