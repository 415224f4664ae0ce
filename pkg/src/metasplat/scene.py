"""Gaussian scene containers, raw<->physical activations, flattening, and scene files.

All optimizer math in this package runs on *raw* (unconstrained) attributes;
the activations here map raw values to the physical ranges the renderer needs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import (
    CorruptHeader,
    DegenerateQuaternion,
    FormatVersionMismatch,
    IoFailure,
    LayoutMismatch,
    ShapeMismatch,
)

SCALE_GAIN = 1e-3          # raw scale -> physical scale: SCALE_GAIN * softplus(raw)
SCALE_MAX = 0.3            # physical scales saturate here; subgradient 0 at the clamp
QUAT_NORM_EPS = 1e-8

SCENE_MAGIC = b"FSPL"
SCENE_VERSION = 1
_HEADER = struct.Struct("<4sIQI12x")  # magic, version, count, sh_degree, reserved
assert _HEADER.size == 32

ATTRIBUTE_BLOCKS = ("means", "raw_scales", "raw_rotations", "raw_opacities", "sh_coeffs")


def sh_basis_size(degree: int) -> int:
    if degree not in (0, 1, 2, 3):
        raise ValueError(f"sh degree must be in 0..3, got {degree}")
    return (degree + 1) ** 2


@dataclass(frozen=True)
class SceneLayout:
    """Maps attribute blocks of an N-Gaussian scene to offsets in a flat vector."""

    count: int
    sh_degree: int

    @property
    def basis_size(self) -> int:
        return sh_basis_size(self.sh_degree)

    @property
    def per_gaussian(self) -> int:
        return 3 + 3 + 4 + 1 + 3 * self.basis_size

    @property
    def total(self) -> int:
        return self.count * self.per_gaussian

    def offsets(self) -> dict[str, tuple[int, int]]:
        """Block name -> (offset, length), in file/flatten order."""
        n, b = self.count, self.basis_size
        sizes = {"means": 3 * n, "raw_scales": 3 * n, "raw_rotations": 4 * n,
                 "raw_opacities": n, "sh_coeffs": 3 * b * n}
        out, pos = {}, 0
        for name in ATTRIBUTE_BLOCKS:
            out[name] = (pos, sizes[name])
            pos += sizes[name]
        return out

    def block_slice(self, name: str) -> slice:
        off, length = self.offsets()[name]
        return slice(off, off + length)


@dataclass
class GaussianScene:
    """Raw (pre-activation) parameters of N Gaussian primitives.

    Treated as immutable value data: operations return new scenes instead of
    mutating. `count` is fixed under refinement; no primitive is ever added
    or removed.
    """

    means: np.ndarray           # (N, 3) world units
    raw_scales: np.ndarray      # (N, 3) unconstrained
    raw_rotations: np.ndarray   # (N, 4) unnormalized quaternions (w, x, y, z)
    raw_opacities: np.ndarray   # (N,) logits
    sh_coeffs: np.ndarray       # (N, B, 3), B = (degree + 1)^2

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.raw_scales = np.asarray(self.raw_scales, dtype=np.float64).reshape(n, 3)
        self.raw_rotations = np.asarray(self.raw_rotations, dtype=np.float64).reshape(n, 4)
        self.raw_opacities = np.asarray(self.raw_opacities, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh_coeffs, dtype=np.float64)
        if sh.ndim != 3 or sh.shape[0] != n or sh.shape[2] != 3:
            raise ShapeMismatch(f"sh_coeffs must be (N, B, 3), got {sh.shape} for N={n}")
        if sh.shape[1] not in (1, 4, 9, 16):
            raise ShapeMismatch(f"sh basis size must be 1/4/9/16, got {sh.shape[1]}")
        self.sh_coeffs = sh
        for name in ATTRIBUTE_BLOCKS:
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in scene field {name}")

    @property
    def count(self) -> int:
        return self.means.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh_coeffs.shape[1]))) - 1

    def layout(self) -> SceneLayout:
        return SceneLayout(self.count, self.sh_degree)

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.means.copy(), self.raw_scales.copy(),
                             self.raw_rotations.copy(), self.raw_opacities.copy(),
                             self.sh_coeffs.copy())

    def allclose(self, other: "GaussianScene", rtol=0.0, atol=0.0) -> bool:
        return all(
            np.allclose(getattr(self, f), getattr(other, f), rtol=rtol, atol=atol)
            for f in ATTRIBUTE_BLOCKS
        ) and self.sh_degree == other.sh_degree

    @staticmethod
    def empty(sh_degree: int = 1) -> "GaussianScene":
        b = sh_basis_size(sh_degree)
        return GaussianScene(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                             np.zeros((0,)), np.zeros((0, b, 3)))


@dataclass
class PhysicalAttributes:
    """Activated attributes: positive clamped scales, unit quaternions, (0,1) opacities."""

    scales: np.ndarray      # (N, 3) in (0, SCALE_MAX]
    rotations: np.ndarray   # (N, 4) unit quaternions
    opacities: np.ndarray   # (N,) in (0, 1)


@dataclass
class Camera:
    """Pinhole camera: world-to-camera pose plus intrinsics in pixels."""

    rotation: np.ndarray     # (3, 3) orthonormal, world-to-camera
    translation: np.ndarray  # (3,) world-to-camera
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.1

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"camera rotation not orthonormal (|R^T R - I| = {err:.2e})")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not self.near > 0:
            raise ValueError("near plane must be positive")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def pixel_rays(self, pixels_xy: np.ndarray) -> np.ndarray:
        """Unit world-space ray directions through continuous pixel coords (x, y)."""
        px = np.asarray(pixels_xy, dtype=np.float64).reshape(-1, 2)
        d = np.stack([(px[:, 0] - self.cx) / self.fx,
                      (px[:, 1] - self.cy) / self.fy,
                      np.ones(len(px))], axis=1)
        world = d @ self.rotation  # R^T d for each row
        return world / np.linalg.norm(world, axis=1, keepdims=True)

    def unproject(self, pixels_xy: np.ndarray, z_depths: np.ndarray) -> np.ndarray:
        """World points on the pixel rays at the given camera-space z depths."""
        px = np.asarray(pixels_xy, dtype=np.float64).reshape(-1, 2)
        z = np.asarray(z_depths, dtype=np.float64).reshape(-1)
        cam = np.stack([(px[:, 0] - self.cx) / self.fx * z,
                        (px[:, 1] - self.cy) / self.fy * z,
                        z], axis=1)
        return (cam - self.translation) @ self.rotation


def look_at_camera(eye, target, fx: float, fy: float, width: int, height: int,
                   near: float = 0.1, up=(0.0, 0.0, 1.0)) -> Camera:
    """Camera at `eye` with its optical axis through `target` (+z forward, y down)."""
    eye = np.asarray(eye, dtype=np.float64).reshape(3)
    target = np.asarray(target, dtype=np.float64).reshape(3)
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64).reshape(3)
    right = np.cross(forward, up)
    nrm = np.linalg.norm(right)
    if nrm < 1e-9:  # looking straight along up: pick another reference
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        nrm = np.linalg.norm(right)
    right = right / nrm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    translation = -rotation @ eye
    return Camera(rotation=rotation, translation=translation, fx=fx, fy=fy,
                  cx=width / 2.0, cy=height / 2.0, width=width, height=height, near=near)


@dataclass
class ImageBuffer:
    """H x W x 3 image with finite non-negative float values, nominally in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeMismatch(f"image must be (H, W, 3), got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("non-finite pixel values")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class FlatParams:
    """One contiguous vector holding every raw attribute of a scene, block by block."""

    data: np.ndarray
    layout: SceneLayout

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).reshape(-1)
        if self.data.shape[0] != self.layout.total:
            raise LayoutMismatch(
                f"flat vector length {self.data.shape[0]} != layout total {self.layout.total}")

    def block(self, name: str) -> np.ndarray:
        return self.data[self.layout.block_slice(name)]


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    """x with softplus(x) = y, stable for large y."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def activate(scene: GaussianScene) -> PhysicalAttributes:
    """Map raw attributes to physical ones.

    opacity = sigmoid(raw); scale = min(SCALE_GAIN * softplus(raw), SCALE_MAX);
    rotation = raw quaternion normalized to unit length.
    """
    norms = np.linalg.norm(scene.raw_rotations, axis=1)
    if scene.count and norms.min() <= QUAT_NORM_EPS:
        bad = int(np.argmin(norms))
        raise DegenerateQuaternion(f"quaternion {bad} has norm {norms[bad]:.3e}")
    scales = np.minimum(SCALE_GAIN * softplus(scene.raw_scales), SCALE_MAX)
    rotations = scene.raw_rotations / norms[:, None] if scene.count else scene.raw_rotations.copy()
    opacities = expit(scene.raw_opacities)
    return PhysicalAttributes(scales=scales, rotations=rotations, opacities=opacities)


def activate_backward_arrays(raw_scales: np.ndarray, raw_rotations: np.ndarray,
                             raw_opacities: np.ndarray, d_scales: np.ndarray,
                             d_rotations: np.ndarray, d_opacities: np.ndarray):
    """Array-level core of activate_backward (no scene wrapper required)."""
    n = raw_scales.shape[0]
    sp = softplus(raw_scales)
    unclamped = SCALE_GAIN * sp < SCALE_MAX
    d_raw_scales = np.where(unclamped, d_scales * SCALE_GAIN * expit(raw_scales), 0.0)

    if n:
        norms = np.sqrt((raw_rotations * raw_rotations).sum(axis=1))
        unit = raw_rotations / norms[:, None]
        # d/dv of v/||v||: (g - unit * <unit, g>) / ||v||
        proj = np.sum(unit * d_rotations, axis=1, keepdims=True)
        d_raw_rotations = (d_rotations - unit * proj) / norms[:, None]
    else:
        d_raw_rotations = d_rotations.copy()

    op = expit(raw_opacities)
    d_raw_opacities = d_opacities * op * (1.0 - op)
    return d_raw_scales, d_raw_rotations, d_raw_opacities


def activate_backward(scene: GaussianScene, d_scales: np.ndarray,
                      d_rotations: np.ndarray, d_opacities: np.ndarray):
    """Chain upstream gradients on physical attributes back to raw fields.

    `d_rotations` is the gradient with respect to the *unit* quaternion; the
    exact Jacobian of v/||v|| is applied. Clamped scales get exactly zero
    gradient.

    Returns (d_raw_scales, d_raw_rotations, d_raw_opacities).
    """
    n = scene.count
    d_scales = np.asarray(d_scales, dtype=np.float64)
    d_rotations = np.asarray(d_rotations, dtype=np.float64)
    d_opacities = np.asarray(d_opacities, dtype=np.float64)
    if d_scales.shape != (n, 3) or d_rotations.shape != (n, 4) or d_opacities.shape != (n,):
        raise ShapeMismatch("upstream gradient shapes do not match the scene")
    return activate_backward_arrays(scene.raw_scales, scene.raw_rotations,
                                    scene.raw_opacities, d_scales, d_rotations,
                                    d_opacities)


def flatten(scene: GaussianScene) -> FlatParams:
    """Scene -> contiguous vector (block order: means, scales, rotations, opacities, sh)."""
    data = np.concatenate([
        scene.means.ravel(), scene.raw_scales.ravel(), scene.raw_rotations.ravel(),
        scene.raw_opacities.ravel(), scene.sh_coeffs.ravel(),
    ]) if scene.count else np.zeros(0)
    return FlatParams(data=data, layout=scene.layout())


def unflatten(flat: FlatParams, layout: SceneLayout | None = None) -> GaussianScene:
    """Inverse of flatten; exact (bit-for-bit) round trip."""
    layout = layout or flat.layout
    if flat.data.shape[0] != layout.total:
        raise LayoutMismatch(
            f"vector length {flat.data.shape[0]} does not fit layout N={layout.count}, "
            f"L={layout.sh_degree}")
    n, b = layout.count, layout.basis_size
    return GaussianScene(
        means=flat.data[layout.block_slice("means")].reshape(n, 3).copy(),
        raw_scales=flat.data[layout.block_slice("raw_scales")].reshape(n, 3).copy(),
        raw_rotations=flat.data[layout.block_slice("raw_rotations")].reshape(n, 4).copy(),
        raw_opacities=flat.data[layout.block_slice("raw_opacities")].copy(),
        sh_coeffs=flat.data[layout.block_slice("sh_coeffs")].reshape(n, b, 3).copy(),
    )


def flat_like(layout: SceneLayout, fill: float = 0.0) -> FlatParams:
    return FlatParams(np.full(layout.total, fill), layout)


def save_scene(path, scene: GaussianScene) -> None:
    """Write the versioned little-endian binary scene format."""
    header = _HEADER.pack(SCENE_MAGIC, SCENE_VERSION, scene.count, scene.sh_degree)
    body = flatten(scene).data.astype("<f8").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(body)
    except OSError as exc:
        raise IoFailure(f"cannot write scene file {path}: {exc}") from exc


def load_scene(path) -> GaussianScene:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read scene file {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise CorruptHeader(f"scene file {path} truncated: {len(raw)} bytes")
    magic, version, count, sh_degree = _HEADER.unpack_from(raw)
    if magic != SCENE_MAGIC:
        raise CorruptHeader(f"bad magic {magic!r} in {path}")
    if version != SCENE_VERSION:
        raise FormatVersionMismatch(f"scene format version {version}, expected {SCENE_VERSION}")
    if sh_degree > 3:
        raise CorruptHeader(f"sh degree {sh_degree} out of range")
    layout = SceneLayout(int(count), int(sh_degree))
    body = raw[_HEADER.size:]
    if len(body) != layout.total * 8:
        raise CorruptHeader(
            f"scene body has {len(body)} bytes, expected {layout.total * 8}")
    data = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return unflatten(FlatParams(data, layout))
