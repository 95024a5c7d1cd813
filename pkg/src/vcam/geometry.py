"""Viewpoint encoding, the viewpoint regression loss and face visibility.

Angles are radians everywhere in this module. Files on disk store degrees
(see :mod:`vcam.data`), converted at load time.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

TWO_PI = 2.0 * math.pi

# A face counts as visible when its projected fraction exceeds this value.
VISIBILITY_THRESHOLD = 0.05


class InvalidGeometryError(ValueError):
    pass


def normalize_angle(theta):
    """Wrap an angle (scalar or array) into ``[0, 2*pi)``."""
    wrapped = np.mod(theta, TWO_PI)
    # np.mod can return exactly 2*pi for tiny negative inputs
    wrapped = np.where(wrapped >= TWO_PI, 0.0, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class CameraGeometry:
    height: float
    distance: float
    orientation: float = 0.0

    def __post_init__(self):
        if not self.distance > 0:
            raise InvalidGeometryError(f"camera distance must be > 0, got {self.distance}")
        if self.height < 0:
            raise InvalidGeometryError(f"camera height must be >= 0, got {self.height}")
        object.__setattr__(self, "orientation", normalize_angle(self.orientation))

    @property
    def depression(self) -> float:
        return depression_angle(self.height, self.distance)

    def viewpoint(self) -> np.ndarray:
        return encode_viewpoint(self.depression, self.orientation)


def depression_angle(height, distance):
    """Angle between the horizontal and the camera's line of sight, ``arctan(H / D)``."""
    height = np.asarray(height, dtype=np.float64)
    distance = np.asarray(distance, dtype=np.float64)
    if np.any(distance <= 0):
        raise InvalidGeometryError("distance must be > 0")
    if np.any(height < 0):
        raise InvalidGeometryError("height must be >= 0")
    phi = np.arctan(height / distance)
    return float(phi) if phi.ndim == 0 else phi


def encode_viewpoint(phi, theta) -> np.ndarray:
    """Return ``[phi, sin(theta), cos(theta)]``; broadcasts over array inputs (last axis = 3)."""
    phi, theta = np.broadcast_arrays(np.asarray(phi, dtype=np.float64),
                                     np.asarray(theta, dtype=np.float64))
    return np.stack([phi, np.sin(theta), np.cos(theta)], axis=-1)


def recover_orientation(viewpoint) -> np.ndarray:
    """Orientation in ``[0, 2*pi)`` read back from the (sin, cos) part of a viewpoint vector."""
    v = np.asarray(viewpoint, dtype=np.float64)
    return normalize_angle(np.arctan2(v[..., 1], v[..., 2]))


def angular_difference(a, b):
    """Absolute wrapped difference between two angles, in ``[0, pi]``."""
    d = np.abs(np.mod(np.asarray(a) - np.asarray(b) + math.pi, TWO_PI) - math.pi)
    return d


def viewpoint_loss(pred: torch.Tensor, target: torch.Tensor, kind: str = "mse") -> torch.Tensor:
    """Regression loss between predicted and target viewpoint vectors.

    ``kind="mse"`` (default) averages the squared component differences, over
    the 3 components and over the batch. ``kind="l2"`` averages the Euclidean
    norm of the per-sample difference instead; its gradient is undefined at 0.
    """
    if pred.shape[-1] != 3 or target.shape[-1] != 3:
        raise ValueError(f"viewpoint vectors must have 3 components, got {tuple(pred.shape)} "
                         f"and {tuple(target.shape)}")
    diff = pred - target
    if kind == "mse":
        return diff.pow(2).mean()
    if kind == "l2":
        return diff.pow(2).sum(-1).sqrt().mean()
    raise ValueError(f"unknown viewpoint loss kind {kind!r}")


class ViewpointClass(str, enum.Enum):
    FRONT = "front"
    FRONT_SIDE = "front-side"
    SIDE = "side"
    REAR_SIDE = "rear-side"
    REAR = "rear"


VIEWPOINT_CLASSES = tuple(ViewpointClass)

# bin edges on the folded angle, degrees
_CLASS_EDGES_DEG = (22.5, 67.5, 112.5, 157.5)

# class centers on the folded angle, used as representative orientations
CLASS_CENTERS = {
    ViewpointClass.FRONT: 0.0,
    ViewpointClass.FRONT_SIDE: math.radians(45.0),
    ViewpointClass.SIDE: math.radians(90.0),
    ViewpointClass.REAR_SIDE: math.radians(135.0),
    ViewpointClass.REAR: math.pi,
}


def viewpoint_class(theta: float) -> ViewpointClass:
    """Five-way viewpoint bin of an orientation, symmetric under left/right mirroring."""
    theta = normalize_angle(float(theta))
    folded = math.degrees(min(theta, TWO_PI - theta))
    for edge, cls in zip(_CLASS_EDGES_DEG, VIEWPOINT_CLASSES):
        if folded < edge:
            return cls
    return ViewpointClass.REAR


def viewpoint_classes(thetas) -> list[ViewpointClass]:
    return [viewpoint_class(t) for t in np.asarray(thetas, dtype=np.float64).ravel()]


class Face(str, enum.Enum):
    FRONT = "front"
    SIDE = "side"
    REAR = "rear"


FACES = tuple(Face)


class FaceVisibility(NamedTuple):
    front: float
    side: float
    rear: float

    def visible(self, threshold: float = VISIBILITY_THRESHOLD) -> frozenset[Face]:
        return frozenset(f for f, frac in zip(FACES, self) if frac > threshold)


def face_visibility(theta: float) -> FaceVisibility:
    """Projected fraction of the front, side and rear faces seen at orientation ``theta``."""
    c, s = math.cos(theta), math.sin(theta)
    return FaceVisibility(max(c, 0.0), abs(s), max(-c, 0.0))


def class_visible_faces(cls: ViewpointClass) -> frozenset[Face]:
    return face_visibility(CLASS_CENTERS[ViewpointClass(cls)]).visible()
