"""Rigid 6-DoF pose estimation by rotational subgroup voting and truncated SE(3) kernel density estimation."""

from posevote.geom3d import (
    ContractError,
    DegenerateConfigurationError,
    Pose,
    apply,
    compose,
    geodesic_distance,
    invert,
    rigid_align,
    rodrigues_rotate,
    rotation_from_axis_angle,
    translation_distance,
)

__all__ = [
    "ContractError",
    "DegenerateConfigurationError",
    "Pose",
    "apply",
    "compose",
    "geodesic_distance",
    "invert",
    "rigid_align",
    "rodrigues_rotate",
    "rotation_from_axis_angle",
    "translation_distance",
]

__version__ = "0.1.0"
