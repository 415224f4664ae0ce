"""Differentiable splatting of a Gaussian scene into an image.

Forward: activate raw attributes, project each primitive to a 2D Gaussian with
the local-affine (Jacobian) approximation of perspective projection, sort by
depth, then alpha-composite front to back. Backward: hand-derived vector-
Jacobian products from the image all the way to every raw scene field.

Numerical conventions (pinned; the renderer records them in `CONVENTIONS`):
2D covariance dilation +0.3 px^2, per-splat alpha clamp 0.99, skip threshold
1/255, transmittance cutoff 1e-4, depth ties broken by primitive index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import BadDirection, ShapeMismatch, StaleAux
from .scene import (
    Camera,
    GaussianScene,
    ImageBuffer,
    activate,
    activate_backward_arrays,
)

COV2D_DILATION = 0.3

CONVENTIONS = {
    "cov2d_dilation_px2": COV2D_DILATION,
    "alpha_clamp": _kernels.ALPHA_CLAMP,
    "alpha_skip": _kernels.ALPHA_SKIP,
    "transmittance_cutoff": _kernels.T_CUTOFF,
    "depth_tie_break": "primitive index",
}

# Real spherical-harmonics constants, degree 0..3.
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)


def sh_basis(dirs: np.ndarray, basis_size: int) -> np.ndarray:
    """Evaluate the real SH basis (up to degree 3) for unit directions (M, 3)."""
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    m = d.shape[0]
    out = np.empty((m, basis_size))
    out[:, 0] = _C0
    if basis_size == 1:
        return out
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out[:, 1] = -_C1 * y
    out[:, 2] = _C1 * z
    out[:, 3] = -_C1 * x
    if basis_size == 4:
        return out
    xx, yy, zz = x * x, y * y, z * z
    out[:, 4] = _C2[0] * x * y
    out[:, 5] = _C2[1] * y * z
    out[:, 6] = _C2[2] * (2.0 * zz - xx - yy)
    out[:, 7] = _C2[3] * x * z
    out[:, 8] = _C2[4] * (xx - yy)
    if basis_size == 9:
        return out
    out[:, 9] = _C3[0] * y * (3.0 * xx - yy)
    out[:, 10] = _C3[1] * x * y * z
    out[:, 11] = _C3[2] * y * (4.0 * zz - xx - yy)
    out[:, 12] = _C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[:, 13] = _C3[4] * x * (4.0 * zz - xx - yy)
    out[:, 14] = _C3[5] * z * (xx - yy)
    out[:, 15] = _C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, basis_size: int) -> np.ndarray:
    """d basis / d direction, shape (M, basis_size, 3)."""
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    m = d.shape[0]
    g = np.zeros((m, basis_size, 3))
    if basis_size == 1:
        return g
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    g[:, 1, 1] = -_C1
    g[:, 2, 2] = _C1
    g[:, 3, 0] = -_C1
    if basis_size == 4:
        return g
    g[:, 4, 0] = _C2[0] * y
    g[:, 4, 1] = _C2[0] * x
    g[:, 5, 1] = _C2[1] * z
    g[:, 5, 2] = _C2[1] * y
    g[:, 6, 0] = _C2[2] * (-2.0 * x)
    g[:, 6, 1] = _C2[2] * (-2.0 * y)
    g[:, 6, 2] = _C2[2] * (4.0 * z)
    g[:, 7, 0] = _C2[3] * z
    g[:, 7, 2] = _C2[3] * x
    g[:, 8, 0] = _C2[4] * (2.0 * x)
    g[:, 8, 1] = _C2[4] * (-2.0 * y)
    if basis_size == 9:
        return g
    g[:, 9, 0] = _C3[0] * 6.0 * x * y
    g[:, 9, 1] = _C3[0] * (3.0 * x * x - 3.0 * y * y)
    g[:, 10, 0] = _C3[1] * y * z
    g[:, 10, 1] = _C3[1] * x * z
    g[:, 10, 2] = _C3[1] * x * y
    g[:, 11, 0] = _C3[2] * (-2.0 * x * y)
    g[:, 11, 1] = _C3[2] * (4.0 * z * z - x * x - 3.0 * y * y)
    g[:, 11, 2] = _C3[2] * (8.0 * y * z)
    g[:, 12, 0] = _C3[3] * (-6.0 * x * z)
    g[:, 12, 1] = _C3[3] * (-6.0 * y * z)
    g[:, 12, 2] = _C3[3] * (6.0 * z * z - 3.0 * x * x - 3.0 * y * y)
    g[:, 13, 0] = _C3[4] * (4.0 * z * z - 3.0 * x * x - y * y)
    g[:, 13, 1] = _C3[4] * (-2.0 * x * y)
    g[:, 13, 2] = _C3[4] * (8.0 * x * z)
    g[:, 14, 0] = _C3[5] * (2.0 * x * z)
    g[:, 14, 1] = _C3[5] * (-2.0 * y * z)
    g[:, 14, 2] = _C3[5] * (x * x - y * y)
    g[:, 15, 0] = _C3[6] * (3.0 * x * x - 3.0 * y * y)
    g[:, 15, 1] = _C3[6] * (-6.0 * x * y)
    return g


def eval_sh(coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """View-dependent color: clamp_low(basis(dir) . coeffs + 0.5, 0)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 2 or coeffs.shape[1] != 3:
        raise ShapeMismatch(f"coeffs must be (B, 3), got {coeffs.shape}")
    view_dir = np.asarray(view_dir, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(view_dir)
    if abs(norm - 1.0) > 1e-6:
        raise BadDirection(f"view direction norm {norm:.8f} != 1")
    basis = sh_basis(view_dir[None, :], coeffs.shape[0])[0]
    return np.maximum(basis @ coeffs + 0.5, 0.0)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (N, 4) as (w, x, y, z) -> rotation matrices (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_grad_to_quat(d_rot: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Chain gradients on R(q) back to the unit quaternion: (N, 3, 3) -> (N, 4)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = q.shape[0]
    dq = np.zeros((n, 4))
    g = d_rot
    dq[:, 0] = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
                    - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dq[:, 1] = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0]
                    - 2 * x * g[:, 1, 1] - w * g[:, 1, 2] + z * g[:, 2, 0]
                    + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dq[:, 2] = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
                    + x * g[:, 1, 0] + z * g[:, 1, 2] - w * g[:, 2, 0]
                    + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dq[:, 3] = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
                    + w * g[:, 1, 0] - 2 * z * g[:, 1, 1] + y * g[:, 1, 2]
                    + x * g[:, 2, 0] + y * g[:, 2, 1])
    return dq


@dataclass
class ProjectedGaussian:
    """One primitive after projection, in depth order."""

    mean2d: np.ndarray   # (2,) pixels
    cov2d: np.ndarray    # (2, 2) pixels^2, dilation included
    depth: float         # camera-space z
    color: np.ndarray    # (3,) view-evaluated SH color
    opacity: float
    index: int           # original primitive index


@dataclass
class _Projection:
    """Vectorized projection results for the splats that survive culling."""

    kept: np.ndarray       # original indices, depth-sorted (ties by index)
    t_cam: np.ndarray      # (K, 3) camera-space positions
    mean2d: np.ndarray     # (K, 2)
    cov2d: np.ndarray      # (K, 3) packed (a, b, c), dilated
    conic: np.ndarray      # (K, 3) packed inverse (A, B, C)
    color: np.ndarray      # (K, 3)
    opacity: np.ndarray    # (K,)
    bbox: np.ndarray       # (K, 4) int64 inclusive pixel bounds (x0, x1, y0, y1)
    # cached intermediates for the backward chain
    q_unit: np.ndarray     # (K, 4) unit quaternions
    scales: np.ndarray     # (K, 3) physical scales
    rot_mats: np.ndarray   # (K, 3, 3) primitive rotations
    proj_mat: np.ndarray   # (K, 2, 3) = J @ W
    basis: np.ndarray      # (K, B) SH basis at the view directions
    dirs: np.ndarray       # (K, 3) unit view directions
    dist: np.ndarray       # (K,) distance camera center -> mean
    color_pre: np.ndarray  # (K, 3) pre-clamp color values


def _project_arrays(scene: GaussianScene, camera: Camera) -> _Projection:
    phys = activate(scene)
    t_cam = scene.means @ camera.rotation.T + camera.translation
    depth = t_cam[:, 2]
    in_front = depth > camera.near

    idx = np.nonzero(in_front)[0]
    t = t_cam[idx]
    tz = t[:, 2]
    fx, fy = camera.fx, camera.fy
    mean2d = np.stack([fx * t[:, 0] / tz + camera.cx,
                       fy * t[:, 1] / tz + camera.cy], axis=1)

    q_unit = phys.rotations[idx]
    s = phys.scales[idx]
    rot, proj_mat, cov2d, conic = _kernels.project_geometry(
        q_unit, s, t, camera.rotation, fx, fy, COV2D_DILATION)
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]

    # 3-sigma footprint from the larger eigenvalue of the dilated covariance
    mid = 0.5 * (a + c)
    eig_max = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = 3.0 * np.sqrt(eig_max)

    x0 = np.floor(mean2d[:, 0] - radius - 0.5)
    x1 = np.ceil(mean2d[:, 0] + radius + 0.5)
    y0 = np.floor(mean2d[:, 1] - radius - 0.5)
    y1 = np.ceil(mean2d[:, 1] + radius + 0.5)
    visible = (x1 >= 0) & (x0 <= camera.width - 1) & (y1 >= 0) & (y0 <= camera.height - 1)

    idx = idx[visible]
    order = np.lexsort((idx, depth[idx]))
    kept = idx[order]
    sel = np.nonzero(visible)[0][order]

    bbox = np.stack([
        np.clip(x0[sel], 0, camera.width - 1),
        np.clip(x1[sel], 0, camera.width - 1),
        np.clip(y0[sel], 0, camera.height - 1),
        np.clip(y1[sel], 0, camera.height - 1),
    ], axis=1).astype(np.int64)

    center = camera.center
    offsets = scene.means[kept] - center
    dist = np.linalg.norm(offsets, axis=1)
    dirs = offsets / dist[:, None] if len(kept) else offsets
    basis = sh_basis(dirs, scene.sh_coeffs.shape[1])
    color_pre = (basis[:, None, :] @ scene.sh_coeffs[kept])[:, 0, :] + 0.5
    color = np.maximum(color_pre, 0.0)

    return _Projection(
        kept=kept, t_cam=t[sel], mean2d=mean2d[sel], cov2d=cov2d[sel],
        conic=conic[sel], color=color, opacity=phys.opacities[kept], bbox=bbox,
        q_unit=q_unit[sel], scales=s[sel], rot_mats=rot[sel], proj_mat=proj_mat[sel],
        basis=basis, dirs=dirs, dist=dist, color_pre=color_pre,
    )


def project(scene: GaussianScene, camera: Camera) -> list[ProjectedGaussian]:
    """Cull and project primitives; sorted by ascending depth, ties by index."""
    p = _project_arrays(scene, camera)
    out = []
    for k in range(len(p.kept)):
        a, b, c = p.cov2d[k]
        out.append(ProjectedGaussian(
            mean2d=p.mean2d[k].copy(),
            cov2d=np.array([[a, b], [b, c]]),
            depth=float(p.t_cam[k, 2]),
            color=p.color[k].copy(),
            opacity=float(p.opacity[k]),
            index=int(p.kept[k]),
        ))
    return out


@dataclass
class RenderAux:
    """Cached forward state needed by the analytic backward pass."""

    projection: _Projection
    final_trans: np.ndarray   # (H, W) remaining transmittance per pixel
    stop: np.ndarray          # (H, W) sorted-splat index where the pixel saturated
    depth_map: np.ndarray     # (H, W) compositing-weighted expected depth
    fingerprint: bytes


@dataclass
class RenderOutput:
    image: ImageBuffer
    aux: RenderAux


_CHECKSUM_WEIGHTS: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _checksum_weights(size: int) -> tuple[np.ndarray, np.ndarray]:
    cached = _CHECKSUM_WEIGHTS.get(size)
    if cached is None:
        gen = np.random.default_rng(0x5EED + size)
        cached = (gen.uniform(0.5, 1.5, size), gen.uniform(0.5, 1.5, size))
        _CHECKSUM_WEIGHTS[size] = cached
    return cached


def _fingerprint(scene: GaussianScene, camera: Camera, background: np.ndarray):
    """Position-sensitive checksum tying aux data to scene/camera/background.

    Two independent weighted dots per array make accidental collisions (the
    only concern here) vanishingly unlikely, at a fraction of a hash's cost.
    """
    parts = [scene.means, scene.raw_scales, scene.raw_rotations,
             scene.raw_opacities, scene.sh_coeffs]
    sums = []
    for arr in parts:
        flat = arr.reshape(-1)
        w1, w2 = _checksum_weights(flat.size)
        sums.append(flat @ w1)
        sums.append(flat @ w2)
    return (scene.count, scene.sh_degree, camera.width, camera.height,
            camera.fx, camera.fy, camera.cx, camera.cy, camera.near,
            camera.rotation.tobytes(), camera.translation.tobytes(),
            background.tobytes(), tuple(sums))


def render_forward(scene: GaussianScene, camera: Camera,
                   background: np.ndarray) -> RenderOutput:
    """Composite the scene front to back over the given background color."""
    background = np.asarray(background, dtype=np.float64).reshape(3)
    p = _project_arrays(scene, camera)
    bg_depth = float(camera.translation[2])  # camera-space z of the world origin
    img, trans, stop, depth_map = _kernels.composite_forward(
        p.mean2d, p.conic, p.color, p.opacity, p.t_cam[:, 2].copy(), p.bbox,
        camera.height, camera.width, background, bg_depth)
    aux = RenderAux(projection=p, final_trans=trans, stop=stop, depth_map=depth_map,
                    fingerprint=_fingerprint(scene, camera, background))
    return RenderOutput(image=ImageBuffer(img), aux=aux)


def render_backward(scene: GaussianScene, camera: Camera, background: np.ndarray,
                    aux: RenderAux, upstream: np.ndarray) -> np.ndarray:
    """Gradient of <upstream, rendered image> w.r.t. every raw scene field.

    Returns a flat vector in the scene's layout. Culled primitives get exactly
    zero gradient.
    """
    background = np.asarray(background, dtype=np.float64).reshape(3)
    if _fingerprint(scene, camera, background) != aux.fingerprint:
        raise StaleAux("aux does not match this scene/camera/background")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (camera.height, camera.width, 3):
        raise ShapeMismatch(f"upstream shape {upstream.shape} != image shape")

    p = aux.projection
    d_mean2d, d_conic, d_color, d_opacity = _kernels.composite_backward(
        p.mean2d, p.conic, p.color, p.opacity, p.bbox,
        camera.height, camera.width, background, aux.final_trans, aux.stop, upstream)

    layout = scene.layout()
    grad = np.zeros(layout.total)
    if len(p.kept) == 0:
        return grad

    # covariance / projection chain back to position, scale, and rotation
    d_t, d_scales_phys, d_unit_q = _kernels.project_geometry_backward(
        p.q_unit, p.scales, p.t_cam, p.rot_mats, p.proj_mat, p.cov2d,
        camera.rotation, camera.fx, camera.fy, d_conic, d_mean2d)
    d_means = d_t @ camera.rotation

    # color path: clamp subgradient, SH coefficients, and view direction
    active = (p.color_pre > 0.0).astype(np.float64)
    d_val = d_color * active
    bsize = scene.sh_coeffs.shape[1]
    d_sh = p.basis[:, :, None] * d_val[:, None, :]
    bgrad = sh_basis_grad(p.dirs, bsize)
    coeffs = scene.sh_coeffs[p.kept]
    per_basis = (coeffs * d_val[:, None, :]).sum(axis=2)       # (K, B)
    d_dir = (per_basis[:, :, None] * bgrad).sum(axis=1)        # (K, 3)
    proj = np.sum(p.dirs * d_dir, axis=1, keepdims=True)
    d_means += (d_dir - p.dirs * proj) / p.dist[:, None]

    # activation chain on the kept subset, scattered back to original indices
    d_raw_scales, d_raw_rot, d_raw_op = activate_backward_arrays(
        scene.raw_scales[p.kept], scene.raw_rotations[p.kept],
        scene.raw_opacities[p.kept], d_scales_phys, d_unit_q, d_opacity)

    n = scene.count
    means_g = grad[layout.block_slice("means")].reshape(n, 3)
    scales_g = grad[layout.block_slice("raw_scales")].reshape(n, 3)
    rot_g = grad[layout.block_slice("raw_rotations")].reshape(n, 4)
    op_g = grad[layout.block_slice("raw_opacities")]
    sh_g = grad[layout.block_slice("sh_coeffs")].reshape(n, bsize, 3)
    means_g[p.kept] = d_means
    scales_g[p.kept] = d_raw_scales
    rot_g[p.kept] = d_raw_rot
    op_g[p.kept] = d_raw_op
    sh_g[p.kept] = d_sh
    return grad


def write_ppm(path, image: ImageBuffer) -> None:
    """8-bit binary PPM dump for eyeballing renders."""
    px = np.clip(image.pixels, 0.0, 1.0)
    data = (px * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
