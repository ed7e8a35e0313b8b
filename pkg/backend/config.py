"""
Configuration for ArtiField
Process settings come from the environment (optionally a .env file); run
configuration is JSON validated by pydantic models.
"""

import json
import logging
import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

from dotenv import load_dotenv
from pydantic import BaseModel, Field, model_validator

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_DATA_DIR = os.path.join(os.path.expanduser("~"), ".artifield")


def _read_bool(env_name: str, default: bool) -> bool:
    value = os.getenv(env_name)
    if value is None:
        return default
    return value.strip().lower() in ("true", "1", "yes")


def _read_int(env_name: str, default: int) -> int:
    value = os.getenv(env_name)
    if value is None:
        return default
    try:
        return int(value)
    except ValueError:
        logger.warning(f"Ignoring non-integer {env_name}={value!r}")
        return default


class AppSettings(BaseModel):
    """Process-wide settings read from the environment."""

    data_dir: str = DEFAULT_DATA_DIR
    log_level: str = "info"
    api_host: str = "0.0.0.0"
    api_port: int = 8000
    deterministic: bool = True
    workers: int = 1
    cors_origins: List[str] = Field(default_factory=list)

    @classmethod
    def from_env(cls) -> "AppSettings":
        return cls(
            data_dir=os.path.expanduser(os.getenv("ARTIFIELD_DATA_DIR") or DEFAULT_DATA_DIR),
            log_level=(os.getenv("ARTIFIELD_LOG_LEVEL", "info") or "info").lower(),
            api_host=os.getenv("ARTIFIELD_API_HOST", "0.0.0.0"),
            api_port=_read_int("ARTIFIELD_API_PORT", 8000),
            deterministic=_read_bool("ARTIFIELD_DETERMINISTIC", True),
            workers=max(1, _read_int("ARTIFIELD_WORKERS", 1)),
            cors_origins=[o.strip() for o in os.getenv("ARTIFIELD_CORS_ORIGINS", "").split(",") if o.strip()],
        )


@lru_cache(maxsize=1)
def get_settings() -> AppSettings:
    return AppSettings.from_env()


def configure_logging(level: Optional[str] = None) -> None:
    level_name = (level or get_settings().log_level).upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


class ModelConfig(BaseModel):
    skeleton: str = "hand16"
    latent_dim: int = Field(128, ge=1)
    latent_init_std: float = Field(0.01, ge=0.0)
    encoding_freqs: int = Field(6, ge=0)
    view_freqs: int = Field(2, ge=0)
    use_view_dir: bool = True
    sdf_hidden: List[int] = Field(default_factory=lambda: [128, 128, 128, 128])
    color_hidden: List[int] = Field(default_factory=lambda: [128, 128, 128])
    weight_hidden: List[int] = Field(default_factory=lambda: [128, 128])
    pose_conditioning: Literal["local", "full", "none"] = "local"
    init_radius: float = Field(0.02, gt=0.0)
    init_beta: float = Field(0.004, gt=0.0)
    init_alpha: Optional[float] = Field(None, gt=0.0)
    init_sharpness: float = Field(50.0, ge=0.0)

    @property
    def alpha(self) -> float:
        return self.init_alpha if self.init_alpha is not None else 1.0 / self.init_beta


class RenderConfig(BaseModel):
    n_coarse: int = Field(64, ge=1)
    n_fine: int = Field(64, ge=0)
    fine_window: int = Field(2, ge=0)
    bbox_padding: float = Field(0.05, ge=0.0)
    background: List[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0])
    perturb: bool = True
    chunk: int = Field(2048, ge=1)


class LossWeights(BaseModel):
    col: float = Field(1.0, ge=0.0)
    eik: float = Field(0.1, ge=0.0)
    w: float = Field(0.1, ge=0.0)
    reg: float = Field(1e-3, ge=0.0)
    surf: float = Field(1.0, ge=0.0)
    normal: float = Field(1.0, ge=0.0)
    joints: float = Field(1e-2, ge=0.0)


class TrainConfig(BaseModel):
    steps: int = Field(20000, ge=1)
    rays_per_batch: int = Field(1024, ge=1)
    surface_points_per_batch: int = Field(1024, ge=1)
    eikonal_points: int = Field(1024, ge=2)
    eikonal_sigma: float = Field(0.01, gt=0.0)
    lr_network: float = Field(1e-4, gt=0.0)
    lr_latent: float = Field(1e-3, gt=0.0)
    lr_pose: float = Field(1e-3, gt=0.0)
    lr_calibration: float = Field(1e-3, gt=0.0)
    pose_freeze_fraction: float = Field(0.1, ge=0.0, le=1.0)
    weight_sharpness: float = Field(50.0, gt=0.0)
    log_every: int = Field(50, ge=1)
    checkpoint_every: int = Field(1000, ge=1)
    progress: bool = True


class FitConfig(BaseModel):
    pose_steps: int = Field(1000, ge=0)
    joint_steps: int = Field(5000, ge=0)
    cloud_steps: int = Field(1000, ge=1)
    cloud_pose_warmup: int = Field(0, ge=0)
    cloud_points_per_iter: int = Field(2048, ge=1)
    cloud_reg: float = Field(1e-3, ge=0.0)
    rays_per_iter: int = Field(512, ge=1)
    mask_fraction: float = Field(0.5, ge=0.0, le=1.0)
    lr_pose: float = Field(1e-2, gt=0.0)
    lr_latent: float = Field(1e-3, gt=0.0)
    min_points: int = Field(100, ge=1)
    progress: bool = True


class SyntheticConfig(BaseModel):
    skeleton: str = "test10"
    n_subjects: int = Field(3, ge=1)
    n_poses: int = Field(20, ge=1)
    n_cameras: int = Field(12, ge=1)
    image_size: int = Field(128, ge=8)
    fov_deg: float = Field(40.0, gt=0.0, lt=180.0)
    camera_distance: float = Field(0.4, gt=0.0)
    camera_height: float = 0.15
    palm_radius: float = Field(0.022, gt=0.0)
    finger_radius: float = Field(0.0085, gt=0.0)
    smooth_radius: float = Field(0.005, gt=0.0)
    weight_sharpness: float = Field(50.0, gt=0.0)
    radius_jitter: float = Field(0.2, ge=0.0, lt=1.0)
    length_jitter: float = Field(0.1, ge=0.0, lt=1.0)
    color_jitter: float = Field(0.08, ge=0.0)
    max_flex: float = Field(0.8, ge=0.0)
    scan_points: int = Field(2048, ge=1)
    light_dir: List[float] = Field(default_factory=lambda: [0.3, -0.4, 0.85])


class RunConfig(BaseModel):
    seed: int = 0
    model: ModelConfig = Field(default_factory=ModelConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    losses: LossWeights = Field(default_factory=LossWeights)
    train: TrainConfig = Field(default_factory=TrainConfig)
    fit: FitConfig = Field(default_factory=FitConfig)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)

    @model_validator(mode="after")
    def _check_background(self) -> "RunConfig":
        if len(self.render.background) != 3:
            raise ValueError("render.background must have 3 components")
        return self


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply dotted ``key=value`` overrides (values parsed as JSON when possible)."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"Override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = [p for p in key.strip().split(".") if p]
        if not parts:
            raise ValueError(f"Empty override key in {item!r}")
        target = data
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ValueError(f"Override {key!r} descends into a non-section value")
        target[parts[-1]] = _parse_value(raw.strip())
    return data


def load_run_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read a JSON run configuration (or defaults) and apply overrides."""
    data: Dict[str, Any] = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        with open(config_path, "r", encoding="utf-8") as f:
            data = json.load(f)
    return RunConfig.model_validate(apply_overrides(data, overrides))


def save_run_config(config: RunConfig, path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.model_dump(), f, indent=2, sort_keys=True)
