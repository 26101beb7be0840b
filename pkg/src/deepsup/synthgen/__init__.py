"""Procedural keypoint benchmark: skeleton objects, rendering, occlusion and labels."""

from .augment import Crop, compose_background, normalize_labels, random_crop, truncate, value_noise
from .camera import Camera, CameraError, look_at_rotation
from .classify import (
    DEFAULT_TAXONOMY,
    draw_glyph,
    flatten_taxonomy,
    gen_hierarchical_classification,
    load_cifar100,
)
from .dataset import GenConfig, SyntheticSample, build_benchmark, build_split, heading_frame, make_sample
from .geometry import (
    FAMILIES,
    Box,
    GeometryError,
    Instance,
    SkeletonModel,
    aabb_disjoint,
    rot_z,
    sample_instance,
)
from .render import (
    OcclusionError,
    Render,
    cast,
    keypoint_visibility,
    make_occluded_pair,
    occlusion_ratio,
    render,
    sample_camera,
)
