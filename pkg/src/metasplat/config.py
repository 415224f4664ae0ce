"""Run configuration: defaults, key=value file parsing, and config hashing.

Every experiment is driven by one TrainConfig. Files are plain ``key=value``
lines (``#`` comments allowed); CLI flags override file values. A run always
writes back its resolved snapshot plus a hash of it, so results can be traced
to exact settings.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .errors import BadConfig

RULES = ("metagrad", "reptile", "vanilla")

# accepted aliases for config keys (file and --set flags)
_ALIASES = {"lambda": "lambda_weight", "delta": "anchor_stride"}


@dataclass
class TrainConfig:
    # outer rule
    rule: str = "metagrad"
    lambda_weight: float = 0.0      # weight on the immediate-loss gradient
    outer_lr: float = 1e-3
    outer_iterations: int = 240
    skip_inner_when_supervised: bool = False  # lambda == 1: bypass refinement

    # inner loop
    anchor_stride: int = 40
    k_min: int = 50
    k_max: int = 500
    inner_optimizer: str = "adam"
    sgd_eta: float = 0.1
    lr_means: float = 4e-4          # 1.6e-4 * default scene extent
    lr_scales: float = 0.5
    lr_rotations: float = 1e-3
    lr_opacities: float = 5e-2
    lr_sh: float = 2.5e-3

    # scenes and rendering
    sh_degree: int = 1
    image_size: int = 32
    gaussians_per_scene: int = 64
    cameras_per_scene: int = 16
    ring_radius: float = 2.5
    scene_extent: float = 2.5
    focal_factor: float = 1.0       # fx = fy = focal_factor * image_size
    background_gray: float = 0.0
    w_ssim: float = 0.2
    train_scenes: int = 40
    eval_scenes: int = 10
    depth_noise: float = 0.125      # 0.05 * default scene extent

    # predictor
    predictor_mode: str = "conditional-head"
    hidden_width: int = 32
    stride: int = 4
    context_views: int = 2
    gain_means: float = 1.0
    gain_scales: float = 50.0
    gain_rotations: float = 1.0
    gain_opacities: float = 2.0
    gain_sh: float = 1.0

    # evaluation / bookkeeping
    eval_steps: int = 500
    eval_stride: int = 20
    checkpoint_interval: int = 100
    seed: int = 0
    strict_errors: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.rule not in RULES:
            raise BadConfig(f"rule must be one of {RULES}, got {self.rule!r}")
        if not 0.0 <= self.lambda_weight <= 1.0:
            raise BadConfig(f"lambda must be in [0, 1], got {self.lambda_weight}")
        if not (1 <= self.anchor_stride <= self.k_min <= self.k_max):
            raise BadConfig(
                f"need 1 <= delta <= k_min <= k_max, got delta={self.anchor_stride} "
                f"k_min={self.k_min} k_max={self.k_max}")
        for name in ("outer_lr", "sgd_eta", "lr_means", "lr_scales", "lr_rotations",
                     "lr_opacities", "lr_sh"):
            if not getattr(self, name) > 0:
                raise BadConfig(f"{name} must be positive")
        if self.inner_optimizer not in ("adam", "sgd"):
            raise BadConfig(f"inner_optimizer must be adam or sgd")
        if self.predictor_mode not in ("conditional-head", "shared-init"):
            raise BadConfig(f"unknown predictor mode {self.predictor_mode!r}")
        if self.stride < 1:
            raise BadConfig("stride must be >= 1")
        if self.context_views < 1:
            raise BadConfig("context_views must be >= 1")
        if self.sh_degree not in (0, 1, 2, 3):
            raise BadConfig("sh_degree must be in 0..3")
        if self.image_size < 11:
            raise BadConfig("image_size must be >= 11 (SSIM window)")
        if self.cameras_per_scene < 4:
            raise BadConfig("need at least 4 cameras for a 3:1 split")
        if self.eval_steps < 0 or self.eval_stride < 1:
            raise BadConfig("eval_steps must be >= 0 and eval_stride >= 1")

    def lr_map(self) -> dict[str, float]:
        return {"means": self.lr_means, "raw_scales": self.lr_scales,
                "raw_rotations": self.lr_rotations, "raw_opacities": self.lr_opacities,
                "sh_coeffs": self.lr_sh}

    def gains(self) -> dict[str, float]:
        return {"means": self.gain_means, "raw_scales": self.gain_scales,
                "raw_rotations": self.gain_rotations,
                "raw_opacities": self.gain_opacities, "sh_coeffs": self.gain_sh}

    def replace(self, **kw) -> "TrainConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return TrainConfig(**vals)


def _convert(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise BadConfig(f"cannot parse {name}={raw!r} as {kind.__name__}") from exc


def parse_assignments(pairs, base: TrainConfig | None = None) -> TrainConfig:
    """Apply ``key=value`` strings on top of a base config."""
    base = base or TrainConfig()
    kinds = {f.name: type(getattr(base, f.name)) for f in fields(TrainConfig)}
    updates = {}
    for item in pairs:
        if "=" not in item:
            raise BadConfig(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        key = _ALIASES.get(key, key)
        if key not in kinds:
            raise BadConfig(f"unknown config key {key!r}")
        updates[key] = _convert(key, kinds[key], value)
    return base.replace(**updates)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Read a key=value file; blank lines and # comments are ignored."""
    lines = []
    with open(path) as fh:
        for ln in fh:
            ln = ln.split("#", 1)[0].strip()
            if ln:
                lines.append(ln)
    return parse_assignments(lines, base)


def snapshot(cfg: TrainConfig) -> str:
    """Canonical, sorted key=value rendering of a config."""
    out = []
    for f in sorted(fields(TrainConfig), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        out.append(f"{f.name}={v!r}" if isinstance(v, str) else f"{f.name}={v}")
    return "\n".join(out) + "\n"


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(snapshot(cfg).encode("utf-8")).hexdigest()[:16]


def write_snapshot(path, cfg: TrainConfig) -> str:
    text = snapshot(cfg)
    with open(path, "w") as fh:
        fh.write(f"# resolved config, hash {config_hash(cfg)}\n")
        fh.write(text)
    return config_hash(cfg)
