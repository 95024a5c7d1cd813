"""Parametric vehicle renderer.

A vehicle is an axis-aligned cuboid in its own frame: ``a`` points forward
(front face at ``a = +L/2``), ``b`` points to the vehicle's left and ``z`` up.
The camera sits at orientation ``theta`` around the vehicle and looks down
with depression ``phi``; projection is orthographic, so each visible face
maps to a parallelogram and texture lookup is an exact affine inverse.

Screen coordinates of a vehicle-frame point ``(a, b, z)``::

    x = -a sin(theta) + b cos(theta)
    y =  z cos(phi) - sin(phi) (a cos(theta) + b sin(theta))
"""
from __future__ import annotations

import colorsys
import functools
import math
from dataclasses import dataclass

import numpy as np

from .geometry import VISIBILITY_THRESHOLD, InvalidGeometryError, TWO_PI

MAX_DEPRESSION = math.radians(60.0)

# glyph grid (rows, cols) per face
FRONT_GLYPH = (2, 4)
SIDE_GLYPH = (2, 8)
REAR_GLYPH = (2, 4)

BODY_HUES = np.linspace(0.0, 1.0, 6, endpoint=False)
GLYPH_PALETTE = np.array([
    [0.95, 0.95, 0.95],
    [0.08, 0.08, 0.08],
    [1.00, 0.55, 0.00],
    [0.00, 0.80, 0.85],
])
GLASS = np.array([0.15, 0.20, 0.28])
TIRE = np.array([0.05, 0.05, 0.05])
BUMPER = np.array([0.30, 0.30, 0.30])
HEADLIGHT = np.array([1.00, 0.97, 0.70])
TAILLIGHT = np.array([0.90, 0.05, 0.05])


@dataclass(frozen=True)
class VehicleIdentity:
    id: int
    body_hue: float
    glyph_seed_front: int
    glyph_seed_side: int
    glyph_seed_rear: int
    aspect: tuple[float, float, float]  # length, width, height

    @property
    def body_color(self) -> np.ndarray:
        return np.array(colorsys.hsv_to_rgb(self.body_hue % 1.0, 0.55, 0.75))

    def signature(self) -> tuple:
        """Hashable appearance key; equal signatures mean visually identical vehicles."""
        return (round(self.body_hue, 3),
                _glyph(self.glyph_seed_front, FRONT_GLYPH)[0].tobytes(),
                _glyph(self.glyph_seed_side, SIDE_GLYPH)[0].tobytes(),
                _glyph(self.glyph_seed_rear, REAR_GLYPH)[0].tobytes())


def make_identities(n: int, rng: np.random.Generator, first_id: int = 0) -> list[VehicleIdentity]:
    out = []
    for k in range(n):
        hue = float(rng.choice(BODY_HUES) + rng.uniform(-0.02, 0.02))
        seeds = rng.integers(0, 2**31 - 1, size=3)
        aspect = (float(rng.uniform(1.9, 2.5)), float(rng.uniform(0.9, 1.1)),
                  float(rng.uniform(0.65, 0.9)))
        out.append(VehicleIdentity(first_id + k, hue, int(seeds[0]), int(seeds[1]),
                                   int(seeds[2]), aspect))
    return out


@functools.lru_cache(maxsize=None)
def _glyph(seed: int, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    while True:
        mask = rng.random(shape) < 0.5
        if 2 <= mask.sum() <= mask.size - 2:
            break
    color = GLYPH_PALETTE[rng.integers(len(GLYPH_PALETTE))]
    return mask, color


def _paint_glyph(tex, rows, cols, mask, color):
    block = tex[rows, cols]
    block[mask] = color
    tex[rows, cols] = block


@functools.lru_cache(maxsize=4096)
def face_textures(identity: VehicleIdentity) -> dict[str, np.ndarray]:
    """Per-face RGB textures, row 0 at the bottom of the face, column 0 at ``u = 0``."""
    body = identity.body_color

    front = np.tile(body, (6, 8, 1))
    front[0] = BUMPER
    front[0:2, :2] = front[0:2, 6:] = HEADLIGHT
    _paint_glyph(front, slice(2, 4), slice(2, 6), *_glyph(identity.glyph_seed_front, FRONT_GLYPH))
    front[4:, 1:7] = GLASS

    rear = np.tile(body, (6, 8, 1))
    rear[0] = BUMPER
    rear[0:2, :2] = rear[0:2, 6:] = TAILLIGHT
    _paint_glyph(rear, slice(2, 4), slice(2, 6), *_glyph(identity.glyph_seed_rear, REAR_GLYPH))
    rear[5:, 2:6] = GLASS

    side = np.tile(body, (6, 16, 1))
    side[0:2, 2:4] = side[0:2, 12:14] = TIRE
    _paint_glyph(side, slice(2, 4), slice(4, 12), *_glyph(identity.glyph_seed_side, SIDE_GLYPH))
    side[4:, 3:13] = GLASS

    # rows run front to rear; the windshield band marks the front end
    top = np.tile(np.clip(body * 1.15, 0, 1), (5, 4, 1))
    top[0, :] = GLASS
    return {"front": front, "side": side, "rear": rear, "top": top}


def _face_frames(identity: VehicleIdentity):
    """3-D face rectangles as (name, origin, u-edge, v-edge, outward normal)."""
    L, W, Hv = identity.aspect
    hl, hw = L / 2, W / 2
    return [
        ("front", (hl, -hw, 0.0), (0.0, W, 0.0), (0.0, 0.0, Hv), (1.0, 0.0, 0.0)),
        ("rear", (-hl, hw, 0.0), (0.0, -W, 0.0), (0.0, 0.0, Hv), (-1.0, 0.0, 0.0)),
        # both sides start at the front end so the pattern is mirror-symmetric
        ("left", (hl, hw, 0.0), (-L, 0.0, 0.0), (0.0, 0.0, Hv), (0.0, 1.0, 0.0)),
        ("right", (hl, -hw, 0.0), (-L, 0.0, 0.0), (0.0, 0.0, Hv), (0.0, -1.0, 0.0)),
        ("top", (hl, -hw, Hv), (0.0, W, 0.0), (-L, 0.0, 0.0), (0.0, 0.0, 1.0)),
    ]


def _check_angles(theta: float, phi: float):
    if not (0.0 <= theta < TWO_PI):
        raise InvalidGeometryError(f"orientation must lie in [0, 360) degrees, got {math.degrees(theta)}")
    if not (0.0 <= phi <= MAX_DEPRESSION + 1e-12):
        raise InvalidGeometryError(f"depression must lie in [0, 60] degrees, got {math.degrees(phi)}")


def face_is_drawn(name: str, theta: float, phi: float) -> bool:
    c, s = math.cos(theta), math.sin(theta)
    frac = {"front": c, "rear": -c, "left": s, "right": -s, "top": math.sin(phi)}[name]
    return frac > VISIBILITY_THRESHOLD


def _project(points: np.ndarray, theta: float, phi: float) -> np.ndarray:
    a, b, z = points[..., 0], points[..., 1], points[..., 2]
    st, ct, sp, cp = math.sin(theta), math.cos(theta), math.sin(phi), math.cos(phi)
    return np.stack([-a * st + b * ct, z * cp - sp * (a * ct + b * st)], axis=-1)


def _layout(identity, theta, phi, size, rng):
    """Pixel-to-screen transform fitting the silhouette into the frame."""
    L, W, Hv = identity.aspect
    corners = np.array([(a, b, z) for a in (-L / 2, L / 2) for b in (-W / 2, W / 2) for z in (0, Hv)])
    xy = _project(corners, theta, phi)
    lo, hi = xy.min(0), xy.max(0)
    fill = 0.84 if rng is None else rng.uniform(0.78, 0.9)
    scale = fill * size / max(hi - lo)
    shift = np.zeros(2) if rng is None else rng.uniform(-1.5, 1.5, size=2)
    center = (lo + hi) / 2
    return scale, center, shift


def _rasterize(identity, theta, phi, size, rng, supersample):
    """Return (rgb float image or None, per-face label map) at ``size * supersample``."""
    n = size * supersample
    scale, center, shift = _layout(identity, theta, phi, size, rng)
    pix = (np.arange(n) + 0.5) / supersample
    px, py = np.meshgrid(pix, pix)
    sx = (px - size / 2 - shift[0]) / scale + center[0]
    sy = (size / 2 + shift[1] - py) / scale + center[1]

    labels = np.full((n, n), "", dtype=object)
    image = None
    textures = None
    if rng is not None:
        textures = face_textures(identity)
        bg = rng.uniform(0.35, 0.65) + rng.uniform(-0.05, 0.05, size=3)
        image = np.broadcast_to(bg, (n, n, 3)).copy()
        # light direction relative to the camera, expressed in the vehicle frame
        right = np.array([-math.sin(theta), math.cos(theta), 0.0])
        cam = np.array([math.cos(phi) * math.cos(theta), math.cos(phi) * math.sin(theta), math.sin(phi)])
        light = cam + rng.uniform(-0.7, 0.7) * right + rng.uniform(0.2, 1.0) * np.array([0.0, 0.0, 1.0])
        light /= np.linalg.norm(light)
        gain = rng.uniform(0.8, 1.15)

    for name, origin, eu, ev, normal in _face_frames(identity):
        if not face_is_drawn(name, theta, phi):
            continue
        o = _project(np.array(origin), theta, phi)
        e = np.stack([_project(np.array(eu), theta, phi), _project(np.array(ev), theta, phi)], axis=1)
        det = np.linalg.det(e)
        if abs(det) < 1e-12:
            continue
        inv = np.linalg.inv(e)
        du, dv = sx - o[0], sy - o[1]
        u = inv[0, 0] * du + inv[0, 1] * dv
        v = inv[1, 0] * du + inv[1, 1] * dv
        inside = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
        key = "side" if name in ("left", "right") else name
        labels[inside] = key
        if image is None:
            continue
        tex = textures[key]
        rows = np.clip((v[inside] * tex.shape[0]).astype(int), 0, tex.shape[0] - 1)
        cols = np.clip((u[inside] * tex.shape[1]).astype(int), 0, tex.shape[1] - 1)
        shade = 0.35 + 0.65 * max(0.0, float(np.dot(normal, light)))
        image[inside] = tex[rows, cols] * shade * gain
    return image, labels


def render_vehicle(identity: VehicleIdentity, theta: float, phi: float, image_size: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Render one vehicle view as an ``(S, S, 3)`` uint8 array.

    ``theta`` and ``phi`` are radians. Background, lighting, framing and pixel
    noise are drawn from ``rng``; the output is a deterministic function of
    the inputs and the generator state.
    """
    _check_angles(theta, phi)
    ss = 2
    image, _ = _rasterize(identity, theta, phi, image_size, rng, ss)
    image = image.reshape(image_size, ss, image_size, ss, 3).mean(axis=(1, 3))
    image = image + rng.normal(0.0, 0.025, size=image.shape)
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def face_pixel_counts(identity: VehicleIdentity, theta: float, phi: float, image_size: int) -> dict[str, int]:
    """Pixels covered by each face under the jitter-free framing."""
    _check_angles(theta, phi)
    _, labels = _rasterize(identity, theta, phi, image_size, None, 1)
    return {k: int((labels == k).sum()) for k in ("front", "side", "rear", "top")}
