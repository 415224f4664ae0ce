"""Compact feed-forward scene predictor and its explicit vector-Jacobian product.

Two modes:

* ``conditional-head``: a per-pixel two-layer head (tanh hidden layer). Input
  feature per sampled pixel: RGB, normalized world ray direction, seed depth
  (7 values). Output: a per-Gaussian raw-attribute residual added onto an
  analytic default construction. The output layer starts at zero, so a fresh
  head predicts the default construction exactly (near-identity Gaussians on
  the seed-depth unprojection).
* ``shared-init``: the raw attributes of a fixed bank of Gaussian slots are
  themselves the learned parameters, shared across scenes (classic learned
  initialization). The prediction ignores the input images entirely and the
  Jacobian to the parameters is the identity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadStride,
    CorruptHeader,
    FormatVersionMismatch,
    IoFailure,
    LayoutMismatch,
    ShapeMismatch,
)
from .scene import Camera, FlatParams, GaussianScene, ImageBuffer, SceneLayout, sh_basis_size, unflatten

FEATURE_DIM = 7  # rgb (3) + unit ray direction (3) + seed depth (1)

CHECKPOINT_MAGIC = b"FSPP"
CHECKPOINT_VERSION = 1
_MODE_CODES = {"conditional-head": 0, "shared-init": 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}

# Residual gains per attribute block. The raw-scale gain compensates the 1e-3
# softplus activation gain so a bounded head output can still span useful
# physical scales; SH and geometry stay near 1.
DEFAULT_GAINS = {
    "means": 1.0,
    "raw_scales": 50.0,
    "raw_rotations": 1.0,
    "raw_opacities": 2.0,
    "sh_coeffs": 1.0,
}
_GAIN_ORDER = ("means", "raw_scales", "raw_rotations", "raw_opacities", "sh_coeffs")


@dataclass
class SceneInput:
    """Context views plus per-pixel seed depths (one H x W map per view)."""

    views: list[tuple[Camera, ImageBuffer]]
    seed_depths: list[np.ndarray]

    def __post_init__(self):
        if not self.views:
            raise ValueError("SceneInput needs at least one view")
        if len(self.seed_depths) != len(self.views):
            raise ShapeMismatch("one seed-depth map per view is required")
        self.seed_depths = [np.asarray(d, dtype=np.float64) for d in self.seed_depths]
        for (cam, img), depth in zip(self.views, self.seed_depths):
            if img.pixels.shape[:2] != (cam.height, cam.width):
                raise ShapeMismatch("image size does not match its camera")
            if depth.shape != (cam.height, cam.width):
                raise ShapeMismatch("seed depth size does not match its camera")


@dataclass
class PredictorParams:
    """Weights of the feed-forward head, with explicit gradient layout."""

    mode: str
    sh_degree: int
    hidden_width: int = 0
    w1: np.ndarray | None = None        # (hidden, 7)
    b1: np.ndarray | None = None        # (hidden,)
    w2: np.ndarray | None = None        # (out_dim, hidden)
    b2: np.ndarray | None = None        # (out_dim,)
    shared_raw: np.ndarray | None = None  # flat scene vector for shared-init
    n_slots: int = 0
    gains: dict = field(default_factory=lambda: dict(DEFAULT_GAINS))

    @property
    def out_dim(self) -> int:
        return 3 + 3 + 4 + 1 + 3 * sh_basis_size(self.sh_degree)

    def to_vector(self) -> np.ndarray:
        if self.mode == "shared-init":
            return self.shared_raw.copy()
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])

    def with_vector(self, vec: np.ndarray) -> "PredictorParams":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if self.mode == "shared-init":
            if vec.shape[0] != self.shared_raw.shape[0]:
                raise LayoutMismatch("parameter vector length mismatch")
            return PredictorParams(mode=self.mode, sh_degree=self.sh_degree,
                                   shared_raw=vec.copy(), n_slots=self.n_slots,
                                   gains=dict(self.gains))
        h, d = self.hidden_width, self.out_dim
        expect = h * FEATURE_DIM + h + d * h + d
        if vec.shape[0] != expect:
            raise LayoutMismatch(f"parameter vector length {vec.shape[0]} != {expect}")
        pos = 0
        w1 = vec[pos:pos + h * FEATURE_DIM].reshape(h, FEATURE_DIM).copy(); pos += h * FEATURE_DIM
        b1 = vec[pos:pos + h].copy(); pos += h
        w2 = vec[pos:pos + d * h].reshape(d, h).copy(); pos += d * h
        b2 = vec[pos:pos + d].copy()
        return PredictorParams(mode=self.mode, sh_degree=self.sh_degree,
                               hidden_width=h, w1=w1, b1=b1, w2=w2, b2=b2,
                               gains=dict(self.gains))


def init_params(rng: np.random.Generator, mode: str = "conditional-head",
                hidden_width: int = 32, sh_degree: int = 1,
                n_slots: int = 0, gains: dict | None = None) -> PredictorParams:
    """Fresh parameters: Xavier-uniform hidden layer, zero output layer.

    shared-init mode instead draws slot means uniformly inside the unit ball
    and leaves every other raw attribute at its neutral default.
    """
    gains = dict(gains) if gains else dict(DEFAULT_GAINS)
    if mode == "conditional-head":
        bound = np.sqrt(6.0 / (FEATURE_DIM + hidden_width))
        out_dim = 3 + 3 + 4 + 1 + 3 * sh_basis_size(sh_degree)
        return PredictorParams(
            mode=mode, sh_degree=sh_degree, hidden_width=hidden_width,
            w1=rng.uniform(-bound, bound, (hidden_width, FEATURE_DIM)),
            b1=np.zeros(hidden_width),
            w2=np.zeros((out_dim, hidden_width)),
            b2=np.zeros(out_dim),
            gains=gains)
    if mode == "shared-init":
        if n_slots < 1:
            raise ValueError("shared-init mode needs n_slots >= 1")
        layout = SceneLayout(n_slots, sh_degree)
        raw = np.zeros(layout.total)
        direction = rng.normal(0.0, 1.0, (n_slots, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = rng.uniform(0.0, 1.0, n_slots) ** (1.0 / 3.0)
        means = direction * radius[:, None]
        raw[layout.block_slice("means")] = means.ravel()
        quats = np.zeros((n_slots, 4))
        quats[:, 0] = 1.0
        raw[layout.block_slice("raw_rotations")] = quats.ravel()
        return PredictorParams(mode=mode, sh_degree=sh_degree,
                               shared_raw=raw, n_slots=n_slots, gains=gains)
    raise ValueError(f"unknown predictor mode {mode!r}")


def _sample_grid(camera: Camera, stride: int):
    rows = np.arange(0, camera.height, stride)
    cols = np.arange(0, camera.width, stride)
    jj, ii = np.meshgrid(cols, rows)
    return ii.ravel(), jj.ravel()


def predicted_count(input: SceneInput, stride: int) -> int:
    total = 0
    for cam, _ in input.views:
        total += int(np.ceil(cam.height / stride)) * int(np.ceil(cam.width / stride))
    return total


def _head_features(params: PredictorParams, input: SceneInput, stride: int):
    """Per-view sampled-pixel features and unprojection geometry."""
    per_view = []
    for (camera, image), depth_map in zip(input.views, input.seed_depths):
        ii, jj = _sample_grid(camera, stride)
        px = np.stack([jj + 0.5, ii + 0.5], axis=1)
        rgb = image.pixels[ii, jj]
        dirs = camera.pixel_rays(px)
        z = depth_map[ii, jj]
        feats = np.concatenate([rgb, dirs, z[:, None]], axis=1)
        # camera-space ray slope per pixel: p_cam = (a z', b z', z')
        a = (px[:, 0] - camera.cx) / camera.fx
        b = (px[:, 1] - camera.cy) / camera.fy
        per_view.append((camera, feats, rgb, z, a, b))
    return per_view


def predict(params: PredictorParams, input: SceneInput, stride: int) -> GaussianScene:
    """One Gaussian per sampled pixel per view (shared-init: the slot bank)."""
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise BadStride(f"stride must be a positive integer, got {stride!r}")
    if params.mode == "shared-init":
        layout = SceneLayout(params.n_slots, params.sh_degree)
        return unflatten(FlatParams(params.shared_raw.copy(), layout))

    basis = sh_basis_size(params.sh_degree)
    means, raw_scales, raw_rot, raw_op, sh = [], [], [], [], []
    g = params.gains
    for camera, feats, rgb, z_seed, a, b in _head_features(params, input, stride):
        hidden = np.tanh(feats @ params.w1.T + params.b1)
        out = hidden @ params.w2.T + params.b2

        r_mean = g["means"] * out[:, 0:3]
        z = z_seed + r_mean[:, 0]
        p_cam = np.stack([a * z + r_mean[:, 1], b * z + r_mean[:, 2], z], axis=1)
        means.append((p_cam - camera.translation) @ camera.rotation)

        raw_scales.append(g["raw_scales"] * out[:, 3:6])
        quat = g["raw_rotations"] * out[:, 6:10]
        quat[:, 0] += 1.0
        raw_rot.append(quat)
        raw_op.append(g["raw_opacities"] * out[:, 10])
        coeffs = (g["sh_coeffs"] * out[:, 11:]).reshape(-1, basis, 3).copy()
        coeffs[:, 0, :] += rgb - 0.5
        sh.append(coeffs)

    return GaussianScene(
        means=np.concatenate(means), raw_scales=np.concatenate(raw_scales),
        raw_rotations=np.concatenate(raw_rot), raw_opacities=np.concatenate(raw_op),
        sh_coeffs=np.concatenate(sh))


def predict_backward(params: PredictorParams, input: SceneInput, stride: int,
                     surrogate_grad: np.ndarray) -> np.ndarray:
    """Map a gradient on the predicted scene's flat layout to a gradient on
    the parameter vector (same layout as ``to_vector``)."""
    if params.mode == "shared-init":
        layout = SceneLayout(params.n_slots, params.sh_degree)
        grad = np.asarray(surrogate_grad, dtype=np.float64).reshape(-1)
        if grad.shape[0] != layout.total:
            raise ShapeMismatch("surrogate gradient does not match the slot bank")
        return grad.copy()

    n = predicted_count(input, stride)
    layout = SceneLayout(n, params.sh_degree)
    grad = np.asarray(surrogate_grad, dtype=np.float64).reshape(-1)
    if grad.shape[0] != layout.total:
        raise ShapeMismatch(
            f"surrogate gradient length {grad.shape[0]} != scene layout {layout.total}")
    basis = layout.basis_size
    d_means = grad[layout.block_slice("means")].reshape(n, 3)
    d_scales = grad[layout.block_slice("raw_scales")].reshape(n, 3)
    d_rot = grad[layout.block_slice("raw_rotations")].reshape(n, 4)
    d_op = grad[layout.block_slice("raw_opacities")]
    d_sh = grad[layout.block_slice("sh_coeffs")].reshape(n, basis, 3)

    g = params.gains
    d_w1 = np.zeros_like(params.w1)
    d_b1 = np.zeros_like(params.b1)
    d_w2 = np.zeros_like(params.w2)
    d_b2 = np.zeros_like(params.b2)

    offset = 0
    for camera, feats, rgb, z_seed, a, b in _head_features(params, input, stride):
        m = feats.shape[0]
        sl = slice(offset, offset + m)
        offset += m

        hidden = np.tanh(feats @ params.w1.T + params.b1)
        d_out = np.zeros((m, params.out_dim))

        # world mean -> camera point -> (depth, lateral) residuals
        d_pcam = d_means[sl] @ camera.rotation.T
        d_out[:, 0] = g["means"] * (d_pcam[:, 0] * a + d_pcam[:, 1] * b + d_pcam[:, 2])
        d_out[:, 1] = g["means"] * d_pcam[:, 0]
        d_out[:, 2] = g["means"] * d_pcam[:, 1]
        d_out[:, 3:6] = g["raw_scales"] * d_scales[sl]
        d_out[:, 6:10] = g["raw_rotations"] * d_rot[sl]
        d_out[:, 10] = g["raw_opacities"] * d_op[sl]
        d_out[:, 11:] = g["sh_coeffs"] * d_sh[sl].reshape(m, 3 * basis)

        d_w2 += d_out.T @ hidden
        d_b2 += d_out.sum(axis=0)
        d_hidden = d_out @ params.w2
        d_pre = d_hidden * (1.0 - hidden * hidden)
        d_w1 += d_pre.T @ feats
        d_b1 += d_pre.sum(axis=0)

    return np.concatenate([d_w1.ravel(), d_b1, d_w2.ravel(), d_b2])


def save_params(path, params: PredictorParams) -> None:
    """Versioned binary checkpoint (magic FSPP)."""
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IB", CHECKPOINT_VERSION, _MODE_CODES[params.mode]))
            fh.write(struct.pack("<I", params.sh_degree))
            fh.write(np.array([params.gains[k] for k in _GAIN_ORDER],
                              dtype="<f8").tobytes())
            if params.mode == "conditional-head":
                fh.write(struct.pack("<II", params.hidden_width, params.out_dim))
                for arr in (params.w1, params.b1, params.w2, params.b2):
                    fh.write(arr.astype("<f8").tobytes())
            else:
                fh.write(struct.pack("<Q", params.n_slots))
                fh.write(params.shared_raw.astype("<f8").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_params(path) -> PredictorParams:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 13 or raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptHeader(f"not a predictor checkpoint: {path}")
    version, mode_code = struct.unpack_from("<IB", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatVersionMismatch(f"checkpoint version {version}")
    if mode_code not in _MODE_NAMES:
        raise CorruptHeader(f"unknown predictor mode code {mode_code}")
    mode = _MODE_NAMES[mode_code]
    pos = 9
    (sh_degree,) = struct.unpack_from("<I", raw, pos); pos += 4
    gains_arr = np.frombuffer(raw, dtype="<f8", count=len(_GAIN_ORDER), offset=pos)
    gains = {k: float(v) for k, v in zip(_GAIN_ORDER, gains_arr)}
    pos += 8 * len(_GAIN_ORDER)

    def take(count):
        nonlocal pos
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        if arr.shape[0] != count:
            raise CorruptHeader("checkpoint truncated")
        return arr

    if mode == "conditional-head":
        hidden, out_dim = struct.unpack_from("<II", raw, pos); pos += 8
        params = PredictorParams(
            mode=mode, sh_degree=int(sh_degree), hidden_width=int(hidden),
            w1=take(hidden * FEATURE_DIM).reshape(hidden, FEATURE_DIM),
            b1=take(hidden), w2=take(out_dim * hidden).reshape(out_dim, hidden),
            b2=take(out_dim), gains=gains)
        if out_dim != params.out_dim:
            raise CorruptHeader("checkpoint output width inconsistent with sh degree")
    else:
        (n_slots,) = struct.unpack_from("<Q", raw, pos); pos += 8
        layout = SceneLayout(int(n_slots), int(sh_degree))
        params = PredictorParams(mode=mode, sh_degree=int(sh_degree),
                                 shared_raw=take(layout.total),
                                 n_slots=int(n_slots), gains=gains)
    if pos != len(raw):
        raise CorruptHeader(f"trailing bytes in checkpoint {path}")
    return params


def predictor_check(rng: np.random.Generator, mode: str = "conditional-head",
                    rel_tol: float = 1e-4):
    """FD verification of predict_backward; returns a gradcheck CheckResult."""
    from .gradcheck import compare_gradients, check_camera
    from .scene import flatten

    size, stride = 8, 2
    camera = check_camera(size, size)
    image = ImageBuffer(rng.uniform(0, 1, (size, size, 3)))
    depth = rng.uniform(2.0, 3.0, (size, size))
    scene_input = SceneInput(views=[(camera, image)], seed_depths=[depth])

    if mode == "conditional-head":
        params = init_params(rng, mode, hidden_width=6)
        params.w2 = rng.normal(0, 0.3, params.w2.shape)
        params.b2 = rng.normal(0, 0.1, params.b2.shape)
    else:
        params = init_params(rng, mode, n_slots=10)

    n = predicted_count(scene_input, stride) if mode == "conditional-head" else params.n_slots
    surrogate = rng.normal(0, 1, SceneLayout(n, params.sh_degree).total)
    analytic = predict_backward(params, scene_input, stride, surrogate)

    def f(vec):
        p = params.with_vector(vec)
        return float(surrogate @ flatten(predict(p, scene_input, stride)).data)

    return compare_gradients(f"predict vjp {mode}", f, analytic,
                             params.to_vector(), step=1e-6, rel_tol=rel_tol,
                             fd_floor=1e-10)
