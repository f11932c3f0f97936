"""Run configuration: ``key = value`` files with case-insensitive keys."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .sync import SyncConfig


class ConfigError(ValueError):
    pass


@dataclass
class SlamConfig:
    # virtual camera sync (original option names are accepted as aliases)
    sync_threshold: float = 0.0
    sync_scale_factor: float = 1.0
    use_undistortion: bool = True
    use_translation: bool = True
    use_rotation: bool = True
    strict_paper_sync: bool = True
    # preprocessing (0 keeps the undistorted/ROI size)
    output_width: int = 0
    output_height: int = 0
    # tracking
    pyramid_levels: int = 4
    g_min: float = 5.0
    huber_delta: float = 10.0
    max_iterations: int = 20
    min_inlier_fraction: float = 0.3
    max_lost_frames: int = 10
    # depth
    var_init: float = 1.0
    var_max: float = 4.0
    rho_prop: float = 1.2
    # keyframes and map
    kf_threshold: float = 0.15
    kf_w_t: float = 1.0
    kf_w_r: float = 1.0
    constraint_radius: float = 0.5
    constraint_k_max: int = 3
    reciprocal_threshold: float = 0.01
    relax_iterations: int = 10
    # stream and determinism
    queue_capacity: int = 8
    seed: int = 0

    def sync_config(self) -> SyncConfig:
        return SyncConfig(self.sync_threshold, self.sync_scale_factor, self.use_translation,
                          self.use_rotation, self.strict_paper_sync)


ALIASES = {
    "lsdslam_threshold": "sync_threshold",
    "lsdslam_scalefactor": "sync_scale_factor",
    "lsdslam_undistortion": "use_undistortion",
    "lsdslam_translation": "use_translation",
    "lsdslam_rotation": "use_rotation",
    "sigma2_init": "var_init",
    "sigma2_max": "var_max",
    "theta_kf": "kf_threshold",
    "levels": "pyramid_levels",
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(kind, raw: str, key: str):
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"'{key}': expected a boolean, got '{raw}'")
    try:
        if kind in (int, "int"):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"'{key}': cannot parse '{raw}'") from None


def parse_config(text: str, base: SlamConfig | None = None, source: str = "<config>") -> SlamConfig:
    cfg = base or SlamConfig()
    kinds = {f.name: f.type for f in fields(SlamConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        name = ALIASES.get(key.lower(), key.lower())
        if name not in kinds:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        try:
            setattr(cfg, name, _convert(kinds[name], value, key))
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    validate(cfg)
    return cfg


def validate(cfg: SlamConfig) -> None:
    if cfg.sync_threshold < 0 or cfg.sync_scale_factor <= 0:
        raise ConfigError("sync threshold must be >= 0 and scale factor > 0")
    if (cfg.output_width > 0) != (cfg.output_height > 0) or min(cfg.output_width, cfg.output_height) < 0:
        raise ConfigError("set both output_width and output_height, or neither")
    if cfg.pyramid_levels < 1 or cfg.queue_capacity < 1:
        raise ConfigError("pyramid levels and queue capacity must be >= 1")
    if not 0 < cfg.var_init <= cfg.var_max:
        raise ConfigError("need 0 < var_init <= var_max")
    if min(cfg.kf_threshold, cfg.kf_w_t, cfg.kf_w_r, cfg.rho_prop) <= 0:
        raise ConfigError("keyframe weights, threshold and rho_prop must be positive")


def load_config(path, base: SlamConfig | None = None) -> SlamConfig:
    return parse_config(Path(path).read_text(), base, str(path))
