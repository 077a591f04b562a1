from .bvh import BVH, build_bvh
from .kernels import brute_force_hit, closest_hit, occluded
from .mesh import MeshError, TriangleMesh, clean, load_obj, repair, save_obj
from .scene import Hit, SceneGeometry, intersect, moller_trumbore, static_scene
from .transform import DisplacementParam, RigidParam, rotation_matrix, transform_mesh

__all__ = [
    "BVH", "build_bvh", "brute_force_hit", "closest_hit", "occluded", "MeshError",
    "TriangleMesh", "clean", "load_obj", "repair", "save_obj", "Hit", "SceneGeometry",
    "intersect", "moller_trumbore", "static_scene", "DisplacementParam", "RigidParam",
    "rotation_matrix", "transform_mesh",
]
