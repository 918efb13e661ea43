"""Fit configuration and its key/value (TOML) file form."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import tomli

from ..errors import InvalidParameter, ParseError


@dataclass
class SplatLearningRates:
    position: float = 1.6e-4
    rotation: float = 1e-3
    log_scale: float = 5e-3
    opacity: float = 5e-2
    sh: float = 2.5e-3


@dataclass
class DensifyConfig:
    enabled: bool = True
    interval: int = 100
    grad_threshold: float = 2e-4
    scale_split_threshold: float = 0.01
    opacity_prune_threshold: float = 5e-3
    start_iter: int = 500
    # None means half of total_iters
    stop_iter: int | None = None


@dataclass
class FitConfig:
    stage1_iters: int = 9000
    total_iters: int = 30000
    lr_uv_maps: float = 5e-4
    lr_splat: SplatLearningRates = field(default_factory=SplatLearningRates)
    lambda_ssim: float = 0.2
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    lambda_sort: float = 0.05
    seed: int = 0
    psnr_interval: int = 500
    checkpoint_interval: int = 0
    # local-frame regularizers for rigged splats; None means "on iff rigged"
    regularize: bool | None = None
    position_reg_weight: float = 0.01
    position_reg_threshold: float = 1.0
    scale_reg_weight: float = 1.0
    scale_reg_threshold: float = 0.6

    def __post_init__(self):
        if isinstance(self.lr_splat, dict):
            self.lr_splat = SplatLearningRates(**self.lr_splat)
        if isinstance(self.densify, dict):
            self.densify = DensifyConfig(**self.densify)
        self.validate()

    def validate(self):
        lrs = [self.lr_uv_maps] + list(asdict(self.lr_splat).values())
        if not all(lr > 0 for lr in lrs):
            raise InvalidParameter("all learning rates must be positive")
        if not 0 <= self.lambda_ssim <= 1:
            raise InvalidParameter("lambda_ssim must lie in [0, 1]")
        if not 0 <= self.stage1_iters <= self.total_iters:
            raise InvalidParameter("need 0 <= stage1_iters <= total_iters")
        if self.densify.interval < 1:
            raise InvalidParameter("densify interval must be >= 1")

    @property
    def densify_stop(self) -> int:
        d = self.densify.stop_iter
        return int(0.5 * self.total_iters) if d is None else d

    @classmethod
    def test_profile(cls, **overrides) -> "FitConfig":
        """Desk-scale schedule: 300 mesh-only iterations out of 3,000."""
        base = dict(stage1_iters=300, total_iters=3000, psnr_interval=250)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, data: dict) -> "FitConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidParameter(f"unknown config keys: {sorted(unknown)}")
        for key, sub in (("lr_splat", SplatLearningRates), ("densify", DensifyConfig)):
            if key in data:
                if not isinstance(data[key], dict):
                    raise InvalidParameter(f"{key} must be a table")
                allowed = {f.name for f in fields(sub)}
                bad = set(data[key]) - allowed
                if bad:
                    raise InvalidParameter(f"unknown {key} keys: {sorted(bad)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "FitConfig":
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ParseError(str(exc), path) from None
        except OSError as exc:
            raise ParseError(f"cannot read config: {exc.strerror}", path) from None
        try:
            return cls.from_dict(data)
        except (TypeError, InvalidParameter) as exc:
            raise ParseError(str(exc), path) from None

    def to_toml(self) -> str:
        d = asdict(self)
        lines = []
        for key, value in d.items():
            if isinstance(value, dict) or value is None:
                continue
            lines.append(f"{key} = {_toml_value(value)}")
        for section in ("lr_splat", "densify"):
            lines.append(f"\n[{section}]")
            for key, value in d[section].items():
                if value is not None:
                    lines.append(f"{key} = {_toml_value(value)}")
        return "\n".join(lines) + "\n"


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)
