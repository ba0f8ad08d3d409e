import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from cim_llm.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_ATLAS_CONFIG = Path(__file__).resolve().parent.parent / "atlas_config.json"


class ExtractionParams(BaseModel):
    """Cut-points and sampling budgets of the extractors.

    The intensity thresholds are not published alongside the feature
    definitions; the defaults below are the tunable starting point.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    theta_ratio: float = 1.5
    theta_homog: float = 0.25
    theta_supp: float = 1.0
    theta_rim: float = 1.3
    min_voxels: int = Field(10, ge=1)
    midline_deadband_mm: float = Field(1.0, ge=0.0)
    midline_min_voxels: int = Field(10, ge=1)
    tiny_net_voxels: int = Field(50, ge=1)
    involvement_min_voxels: int = Field(10, ge=1)
    rim_shell_mm: float = Field(2.0, gt=0.0)
    cnwm_exclusion_mm: float = Field(10.0, ge=0.0)
    max_rays: int = Field(500, ge=1)
    ray_step_mm: float = Field(0.5, gt=0.0)
    ray_length_mm: float = Field(20.0, gt=0.0)
    seed: int = 42

    def thresholds(self) -> Dict[str, float]:
        return {
            "theta_ratio": self.theta_ratio,
            "theta_homog": self.theta_homog,
            "theta_supp": self.theta_supp,
            "theta_rim": self.theta_rim,
        }


class AtlasSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    description: str = ""
    regions: Dict[int, str]
    eloquent: List[int] = Field(default_factory=list)
    deep_gray: List[int] = Field(default_factory=list)
    # either explicit per-hemisphere ids or one list split at world x = 0
    frontal: List[int] = Field(default_factory=list)
    frontal_left: List[int] = Field(default_factory=list)
    frontal_right: List[int] = Field(default_factory=list)

    def region_name(self, region_id: int) -> str:
        return self.regions.get(region_id, f"label_{region_id}")


class AtlasConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    version: str
    atlases: Dict[str, AtlasSpec]


def load_atlas_config(path: Optional[str] = None) -> AtlasConfig:
    config_path = Path(path) if path else DEFAULT_ATLAS_CONFIG
    try:
        with open(config_path, "r") as f:
            config = AtlasConfig.model_validate(json.load(f))
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"Failed to read atlas config at '{config_path}': {e}") from e
    logger.info(f"Loaded atlas config {config.version} from {config_path}")
    return config
