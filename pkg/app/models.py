from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Optional, List, Dict, Any, Tuple
from datetime import datetime
from enum import Enum

from app.errors import InvalidParameterError


# Enums
class PlaneFamily(str, Enum):
    xy = "xy"
    xt = "xt"
    yt = "yt"


PLANE_FAMILIES: Tuple[PlaneFamily, ...] = (PlaneFamily.xy, PlaneFamily.xt, PlaneFamily.yt)


class CubeFormat(str, Enum):
    frames = "frames"  # directory of 8-bit PGM/PNG frames
    raw = "raw"        # DTC1 raw cube


class ProjectionKind(str, Enum):
    gaussian = "gaussian"
    achlioptas = "achlioptas"


class SynthLayout(str, Enum):
    vertical_split = "vertical-split"
    horizontal_thirds = "horizontal-thirds"
    quadrant = "quadrant"


LAYOUT_REGIONS: Dict[SynthLayout, int] = {
    SynthLayout.vertical_split: 2,
    SynthLayout.horizontal_thirds: 3,
    SynthLayout.quadrant: 4,
}


class JobStatus(str, Enum):
    pending = "pending"
    running = "running"
    completed = "completed"
    failed = "failed"
    cancelled = "cancelled"


class JobType(str, Enum):
    segment = "segment"
    evaluate = "evaluate"
    gen_synth = "gen-synth"
    sweep_k = "sweep-k"


# Feature extraction parameters
class LbpParams(BaseModel):
    neighbors: int = Field(8, ge=4)   # P
    radius: int = Field(1, ge=1)      # R
    bins: int = Field(16, ge=2)       # Q

    @model_validator(mode="after")
    def check_bins(self) -> "LbpParams":
        if self.bins > self.code_count:
            raise ValueError(f"bins must be <= 2^neighbors ({self.code_count}), got {self.bins}")
        return self

    @property
    def code_count(self) -> int:
        return 2 ** self.neighbors


class FeatureParams(BaseModel):
    window: int = Field(7, ge=1)      # Nw
    stride_t: int = Field(1, ge=1)    # s_t

    @field_validator("window")
    @classmethod
    def window_is_odd(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"window must be odd, got {value}")
        return value


class ProjectionSpec(BaseModel):
    input_dim: int = Field(ge=1)
    k: int = Field(100, ge=1)
    seed: int = Field(0, ge=0)
    kind: ProjectionKind = ProjectionKind.gaussian

    @model_validator(mode="after")
    def check_k(self) -> "ProjectionSpec":
        if self.k > self.input_dim:
            raise ValueError(f"k={self.k} exceeds feature dimension D={self.input_dim}")
        return self


class EnsembleConfig(BaseModel):
    replicates: int = Field(4, ge=1)          # K, J = 3K
    clusters: int = Field(2, ge=2)            # C
    k: int = Field(100, ge=1)
    max_iter: int = Field(100, ge=1)
    tol: float = Field(1e-4, ge=0.0)
    seed: int = Field(0, ge=0)
    projection: ProjectionKind = ProjectionKind.gaussian

    @property
    def ensemble_size(self) -> int:
        return 3 * self.replicates


class FusionSettings(BaseModel):
    output_labels: Optional[int] = Field(None, ge=2)  # C_out; None = modal member label count
    max_sweeps: int = Field(20, ge=1)
    seed: Optional[int] = Field(None, ge=0)           # None = derived from the master seed


# Flat config keys -> (section, field). Section None means a top-level field.
FLAT_KEYS: Dict[str, Tuple[Optional[str], str]] = {
    "input": (None, "input"),
    "input_format": (None, "input_format"),
    "ground_truth": (None, "ground_truth"),
    "output_dir": (None, "output_dir"),
    "dump_ensemble": (None, "dump_ensemble"),
    "workers": (None, "workers"),
    "lbp_p": ("lbp", "neighbors"),
    "lbp_r": ("lbp", "radius"),
    "bins": ("lbp", "bins"),
    "window": ("features", "window"),
    "stride_t": ("features", "stride_t"),
    "k": ("ensemble", "k"),
    "replicates": ("ensemble", "replicates"),
    "labels": ("ensemble", "clusters"),
    "kmeans_max_iter": ("ensemble", "max_iter"),
    "kmeans_tol": ("ensemble", "tol"),
    "projection": ("ensemble", "projection"),
    "seed": ("ensemble", "seed"),
    "output_labels": ("fusion", "output_labels"),
    "max_sweeps": ("fusion", "max_sweeps"),
    "fusion_seed": ("fusion", "seed"),
}

_FALSE_STRINGS = {"0", "false", "no", "off", ""}


class PipelineConfig(BaseModel):
    input: Optional[str] = None
    input_format: Optional[CubeFormat] = None  # None = infer from path
    ground_truth: Optional[str] = None
    output_dir: str = "runs/latest"
    dump_ensemble: bool = False
    workers: Optional[int] = Field(None, ge=1)
    lbp: LbpParams = Field(default_factory=LbpParams)
    features: FeatureParams = Field(default_factory=FeatureParams)
    ensemble: EnsembleConfig = Field(default_factory=EnsembleConfig)
    fusion: FusionSettings = Field(default_factory=FusionSettings)

    @classmethod
    def from_flat(cls, values: Dict[str, Any], base: Optional["PipelineConfig"] = None) -> "PipelineConfig":
        """Build a config from flat key-value pairs layered over `base` (or defaults)."""
        unknown = sorted(set(values) - set(FLAT_KEYS))
        if unknown:
            raise InvalidParameterError(f"Unknown config keys: {', '.join(unknown)}")

        data = (base or cls()).model_dump()
        for key, value in values.items():
            if value is None:
                continue
            section, name = FLAT_KEYS[key]
            if key == "dump_ensemble" and isinstance(value, str):
                value = value.strip().lower() not in _FALSE_STRINGS
            if section is None:
                data[name] = value
            else:
                data[section][name] = value
        return cls.model_validate(data)

    def to_flat(self) -> Dict[str, Any]:
        """Inverse of from_flat: every documented key with its current value."""
        data = self.model_dump(mode="json")
        flat: Dict[str, Any] = {}
        for key, (section, name) in FLAT_KEYS.items():
            flat[key] = data[name] if section is None else data[section][name]
        return flat


# Synthetic fixtures
class RegionTexture(BaseModel):
    frequency: float = Field(0.125, gt=0.0, le=0.5)  # cycles per pixel
    orientation: float = 0.0                         # degrees
    speed: float = 1.0                               # pixels per frame along the wave normal


DEFAULT_TEXTURES: List[RegionTexture] = [
    RegionTexture(frequency=0.125, orientation=0.0, speed=1.0),
    RegionTexture(frequency=0.125, orientation=90.0, speed=0.5),
    RegionTexture(frequency=0.125, orientation=45.0, speed=-1.0),
    RegionTexture(frequency=0.125, orientation=135.0, speed=0.25),
]


class SynthSpec(BaseModel):
    height: int = Field(64, ge=9)
    width: int = Field(64, ge=9)
    frames: int = Field(16, ge=9)
    layout: SynthLayout = SynthLayout.vertical_split
    textures: Optional[List[RegionTexture]] = None  # None = defaults for the layout
    noise_sigma: float = Field(2.0, ge=0.0)
    mean: float = Field(128.0, ge=0.0, le=255.0)
    std: float = Field(40.0, gt=0.0)
    seed: int = Field(0, ge=0)

    @property
    def region_count(self) -> int:
        return LAYOUT_REGIONS[self.layout]

    @model_validator(mode="after")
    def check_textures(self) -> "SynthSpec":
        if self.textures is not None and len(self.textures) != self.region_count:
            raise ValueError(
                f"layout {self.layout.value} needs {self.region_count} textures, got {len(self.textures)}"
            )
        return self

    def region_textures(self) -> List[RegionTexture]:
        return list(self.textures) if self.textures is not None else DEFAULT_TEXTURES[: self.region_count]


# Evaluation
class MetricsReport(BaseModel):
    pr: float = Field(ge=0.0, le=1.0)
    gce: float = Field(ge=0.0, le=1.0)
    voi: float = Field(ge=0.0)
    pri: float = Field(ge=0.0, le=1.0)
    f_measure: float = Field(ge=0.0, le=1.0)
    n: int = Field(ge=2)


class EvaluationRow(BaseModel):
    name: str
    report: Optional[MetricsReport] = None
    error: Optional[str] = None


class StageTiming(BaseModel):
    stage: str
    seconds: float


# Batch job models
class BatchJob(BaseModel):
    id: str
    job_type: JobType
    status: JobStatus = JobStatus.pending
    args: Dict[str, Any] = Field(default_factory=dict)
    results: Dict[str, Any] = Field(default_factory=dict)
    error_log: Optional[str] = None
    created_at: datetime = Field(default_factory=datetime.utcnow)
    started_at: Optional[datetime] = None
    completed_at: Optional[datetime] = None


class BatchJobCreate(BaseModel):
    job_type: JobType
    args: Dict[str, Any] = Field(default_factory=dict)


# Response models
class APIResponse(BaseModel):
    success: bool
    message: str
    data: Optional[Any] = None
