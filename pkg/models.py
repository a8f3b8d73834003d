# models.py - Domain Models for the Weed Classification and Spraying Pipeline
"""
Data models shared by every stage: dataset catalog, augmentation policy,
model graph, training schedule, evaluation and field-run reports, run config.

Numeric containers that hold numpy arrays (parameters, optimizer moments,
checkpoints) live next to the code that owns them; everything serializable
lives here.
"""

from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Optional, List, Dict, Tuple, Any
from enum import Enum
from pathlib import Path
import logging
import math

logger = logging.getLogger(__name__)

NUM_CLASSES = 16
DEFAULT_INPUT_HW: Tuple[int, int] = (224, 384)

# ============================================================================
# ENUMS - Single Source of Truth
# ============================================================================

class Role(str, Enum):
    """Partition a sample belongs to under the active fold."""
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class LayerKind(str, Enum):
    """Layer inventory of the micro MobileNetV2-style classifier."""
    CONV2D = "conv2d"
    DEPTHWISE = "depthwise_conv2d"
    BATCHNORM = "batchnorm"
    RELU6 = "relu6"
    INVERTED_RESIDUAL = "inverted_residual"
    GAP = "global_avg_pool"
    DENSE = "dense"
    SIGMOID = "sigmoid"


LINEAR_KINDS = (LayerKind.CONV2D, LayerKind.DEPTHWISE, LayerKind.DENSE)


class SchedulerAction(str, Enum):
    """Outcome of one scheduler update (and the restart recorded by the trainer)."""
    CONTINUE = "Continue"
    HALVE_LR = "HalveLR"
    ABORT = "Abort"
    RESTART = "Restart"


class ClockMode(str, Enum):
    """Time base of the real-time pipeline."""
    VIRTUAL = "virtual"
    WALL = "wall"


# ============================================================================
# DATASET
# ============================================================================

class ClassEntry(BaseModel):
    """One class of the taxonomy (id, abbreviated name, full name)."""
    id: int = Field(..., ge=0, le=NUM_CLASSES - 1)
    short: str = Field(..., min_length=1, description="Abbreviation, e.g. 'VM.'")
    full: str = Field(..., min_length=1)

    @property
    def dirname(self) -> str:
        """Folder name used on disk: lowercase short name without the dot."""
        return self.short.lower().rstrip(".")


class ClassTaxonomy(BaseModel):
    """
    Ordered 16-class taxonomy: 14 weeds, the crop (flax) and negatives.

    Lookup by short name is tolerant to case and the trailing dot, so
    'VM.', 'vm' and 'Vm' all resolve to the same class.
    """
    classes: List[ClassEntry]
    negative_class_id: int
    crop_class_id: int

    @model_validator(mode="after")
    def check_entries(self) -> "ClassTaxonomy":
        if len(self.classes) != NUM_CLASSES:
            raise ValueError(f"taxonomy must have exactly {NUM_CLASSES} classes, got {len(self.classes)}")
        if [c.id for c in self.classes] != list(range(NUM_CLASSES)):
            raise ValueError("class ids must be dense 0..15 in order")
        shorts = [c.short for c in self.classes]
        if len(set(shorts)) != len(shorts):
            raise ValueError("short names must be unique")
        ids = {c.id for c in self.classes}
        if self.negative_class_id not in ids or self.crop_class_id not in ids:
            raise ValueError("negative and crop ids must be taxonomy members")
        if self.negative_class_id == self.crop_class_id:
            raise ValueError("negative and crop classes must differ")
        return self

    def __len__(self) -> int:
        return len(self.classes)

    def name(self, class_id: int) -> str:
        return self.classes[class_id].short

    def resolve(self, name_or_id: Any) -> int:
        """Return the class id for an id, a short name or a folder name."""
        if isinstance(name_or_id, int) and not isinstance(name_or_id, bool):
            if 0 <= name_or_id < NUM_CLASSES:
                return name_or_id
            raise KeyError(f"class id {name_or_id} out of range")
        key = str(name_or_id).strip().lower().rstrip(".")
        for entry in self.classes:
            if entry.dirname == key or entry.full.lower() == key:
                return entry.id
        raise KeyError(f"unknown class '{name_or_id}'")

    @property
    def weed_ids(self) -> List[int]:
        return [c.id for c in self.classes if c.id not in (self.negative_class_id, self.crop_class_id)]


class GenSource(BaseModel):
    """Procedural source of a synthetic sample: every drawn variation is explicit."""
    seed: int = Field(..., ge=0)
    class_id: int = Field(..., ge=0, le=NUM_CLASSES - 1)
    width: int = Field(..., ge=32)
    height: int = Field(..., ge=32)
    brightness: float = Field(1.0, gt=0.0)
    shadow: float = Field(0.0, ge=0.0, le=1.0, description="Depth of the linear shadow gradient")
    shadow_angle_deg: float = 0.0
    blur_sigma: float = Field(0.0, ge=0.0)
    rotation_deg: float = 0.0
    scale: float = Field(1.0, gt=0.0)
    offset_x: float = Field(0.0, description="Motif centre offset as a fraction of width")
    offset_y: float = Field(0.0, description="Motif centre offset as a fraction of height")
    clutter: bool = Field(False, description="Draw low-contrast crop-row texture in the background")


class Sample(BaseModel):
    """A catalog entry: a file on disk or a generator record, plus its class."""
    path: Optional[str] = None
    gen: Optional[GenSource] = None
    class_id: int = Field(..., ge=0, le=NUM_CLASSES - 1)
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)

    @model_validator(mode="after")
    def check_source(self) -> "Sample":
        if (self.path is None) == (self.gen is None):
            raise ValueError("sample needs exactly one of 'path' or 'gen'")
        return self


class Manifest(BaseModel):
    """Dataset catalog with per-class counts and the ingestion skip report."""
    taxonomy: ClassTaxonomy
    samples: List[Sample]
    per_class_counts: Dict[int, int]
    skipped: List[str] = Field(default_factory=list, description="Undecodable files")

    @model_validator(mode="after")
    def check_counts(self) -> "Manifest":
        counted: Dict[int, int] = {c.id: 0 for c in self.taxonomy.classes}
        for sample in self.samples:
            counted[sample.class_id] += 1
        expected = {k: v for k, v in counted.items()}
        if {int(k): int(v) for k, v in self.per_class_counts.items()} != expected:
            raise ValueError("per_class_counts disagree with samples")
        missing = [self.taxonomy.name(k) for k, v in counted.items() if v == 0]
        if missing:
            raise ValueError(f"classes without samples: {', '.join(missing)}")
        return self


class SplitAssignment(BaseModel):
    """
    Role (and fold) of every manifest sample under one fold of a k-fold split.

    The test block is fixed per seed; the validation block rotates through the
    non-test pool as the fold index changes.
    """
    fold_count: int = Field(..., ge=1)
    fold: int = Field(0, ge=0)
    seed: int
    ratios: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    roles: List[Role]
    folds: List[Optional[int]]

    @model_validator(mode="after")
    def check_alignment(self) -> "SplitAssignment":
        if len(self.roles) != len(self.folds):
            raise ValueError("roles and folds must align")
        if self.fold >= self.fold_count:
            raise ValueError("fold index must be < fold_count")
        return self

    def indices(self, role: Role) -> List[int]:
        return [i for i, r in enumerate(self.roles) if r == role]


# ============================================================================
# AUGMENTATION
# ============================================================================

class AugmentationPolicy(BaseModel):
    """
    Random ranges of the training-time augmentation.

    Every range is (low, high); a zero-width range at the identity value
    disables that stage.
    """
    rotation_deg: Tuple[float, float] = (-360.0, 360.0)
    scale_x: Tuple[float, float] = (0.5, 1.0)
    scale_y: Tuple[float, float] = (0.5, 1.0)
    channel_shift: Tuple[float, float] = (-25.0, 25.0)
    pixel_shift: Tuple[float, float] = (-25.0, 25.0)
    intensity_scale: Tuple[float, float] = (0.75, 1.25)
    perspective_jitter: float = Field(0.1, ge=0.0, le=0.5)
    flip_prob: float = Field(0.5, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def check_ranges(self) -> "AugmentationPolicy":
        bounds = {
            "rotation_deg": (-360.0, 360.0),
            "scale_x": (0.5, 1.0),
            "scale_y": (0.5, 1.0),
            "channel_shift": (-25.0, 25.0),
            "pixel_shift": (-25.0, 25.0),
            "intensity_scale": (0.75, 1.25),
        }
        for name, (lo_bound, hi_bound) in bounds.items():
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: low {lo} > high {hi}")
            if lo < lo_bound or hi > hi_bound:
                raise ValueError(f"{name}: range ({lo}, {hi}) outside [{lo_bound}, {hi_bound}]")
        return self

    @classmethod
    def identity(cls, **overrides: Any) -> "AugmentationPolicy":
        values: Dict[str, Any] = dict(
            rotation_deg=(0.0, 0.0), scale_x=(1.0, 1.0), scale_y=(1.0, 1.0),
            channel_shift=(0.0, 0.0), pixel_shift=(0.0, 0.0),
            intensity_scale=(1.0, 1.0), perspective_jitter=0.0, flip_prob=0.0,
        )
        values.update(overrides)
        return cls(**values)

    @property
    def is_identity(self) -> bool:
        return self == AugmentationPolicy.identity()


# ============================================================================
# MODEL GRAPH
# ============================================================================

class LayerSpec(BaseModel):
    """
    One node of the model graph.

    Only the fields relevant to `kind` are set; an inverted residual block keeps
    its expand/depthwise/project chain in `body`.
    """
    kind: LayerKind
    name: str
    filters: Optional[int] = Field(None, gt=0)
    kernel: int = Field(1, gt=0)
    stride: int = Field(1, gt=0)
    padding: str = Field("same", pattern="^(same|valid)$")
    use_bias: bool = True
    eps: float = Field(1e-5, ge=0.0)
    expansion: Optional[int] = Field(None, gt=0)
    out_channels: Optional[int] = Field(None, gt=0)
    units: Optional[int] = Field(None, gt=0)
    residual: bool = False
    body: Optional[List["LayerSpec"]] = None


class ModelGraph(BaseModel):
    """Layer topology of a classifier, separate from its numeric parameters."""
    input_shape: Tuple[int, int, int] = (3, DEFAULT_INPUT_HW[0], DEFAULT_INPUT_HW[1])
    num_classes: int = NUM_CLASSES
    width_mult: float = Field(0.25, gt=0.0, le=2.0)
    layers: List[LayerSpec]
    folded: bool = False

    @model_validator(mode="after")
    def check_head(self) -> "ModelGraph":
        kinds = [layer.kind for layer in self.layers[-3:]]
        if kinds != [LayerKind.GAP, LayerKind.DENSE, LayerKind.SIGMOID]:
            raise ValueError("graph must end with GlobalAvgPool -> Dense -> Sigmoid")
        if self.layers[-2].units != self.num_classes:
            raise ValueError(f"head Dense must have {self.num_classes} units")
        return self

    def iter_layers(self):
        """Depth-first walk over layers, block bodies included."""
        def walk(layers):
            for layer in layers:
                yield layer
                if layer.body:
                    yield from walk(layer.body)
        yield from walk(self.layers)


# ============================================================================
# TRAINING
# ============================================================================

class TrainConfig(BaseModel):
    """Training schedule; defaults reproduce the reference training protocol."""
    batch_size: int = Field(32, gt=0)
    lr_init: float = Field(1e-4, gt=0.0)
    halve_patience: int = Field(16, gt=0)
    abort_patience: int = Field(32, gt=0)
    restart_lr: float = Field(0.5e-4, gt=0.0)
    max_epochs: int = Field(30, ge=0)
    max_restarts: int = Field(1, ge=0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    bn_momentum: float = Field(0.9, ge=0.0, lt=1.0)
    seed: int = 0
    workers: int = Field(1, ge=1)
    deterministic: bool = False
    checked: bool = False

    @model_validator(mode="after")
    def check_patience(self) -> "TrainConfig":
        if not 0 < self.halve_patience < self.abort_patience:
            raise ValueError("require 0 < halve_patience < abort_patience")
        return self


class SchedulerState(BaseModel):
    """State of the LR-halving / abort scheduler."""
    best_val_loss: float = math.inf
    epochs_since_improve: int = Field(0, ge=0)
    current_lr: float = Field(1e-4, gt=0.0)
    epoch: int = Field(0, ge=0)
    restarts_done: int = Field(0, ge=0)


class TrainLogRow(BaseModel):
    """One line of train_log.csv."""
    epoch: int
    train_loss: float
    val_loss: float
    val_avg_class_acc: float
    lr: float
    action: SchedulerAction


# ============================================================================
# EVALUATION
# ============================================================================

class LatencyStats(BaseModel):
    """Per-frame latency distribution in milliseconds."""
    mean: float = Field(..., ge=0.0)
    p50: float = Field(..., ge=0.0)
    p95: float = Field(..., ge=0.0)
    max: float = Field(..., ge=0.0)

    @model_validator(mode="after")
    def check_order(self) -> "LatencyStats":
        if not (self.p50 <= self.p95 <= self.max):
            raise ValueError("latency percentiles must satisfy p50 <= p95 <= max")
        return self


class ClassMetrics(BaseModel):
    class_id: int
    name: str
    precision: float = Field(..., ge=0.0, le=1.0)
    recall: float = Field(..., ge=0.0, le=1.0)
    f1: float = Field(..., ge=0.0, le=1.0)
    support: int = Field(..., ge=0)


class BenchmarkReport(BaseModel):
    """Timing and memory figures of one inference runner."""
    runner: str
    batch_size: int = 1
    timed_frames: int
    warmup_frames: int
    latency_ms: LatencyStats
    parameter_count: int
    parameter_bytes: int
    peak_working_set_bytes: int
    flops: int
    flops_by_kind: Dict[str, int] = Field(default_factory=dict)
    reference_latency_ms: float = 47.78


class EvalReport(BaseModel):
    """Per-class precision/recall/F1, macro/micro accuracy and optional benchmark."""
    role: str = "test"
    n_samples: int
    per_class: List[ClassMetrics]
    avg_class_accuracy: float = Field(..., ge=0.0, le=1.0)
    overall_accuracy: float = Field(..., ge=0.0, le=1.0)
    confusion: List[List[int]]
    parameter_count: int
    parameter_bytes: int
    peak_working_set_bytes: int
    benchmark: Optional[BenchmarkReport] = None
    reference: Dict[str, Any] = Field(default_factory=dict)


# ============================================================================
# DEPLOYMENT
# ============================================================================

class ClassPrediction(BaseModel):
    """Arg-max decision over the sigmoid head, lowest class id wins ties."""
    class_id: int = Field(..., ge=0, le=NUM_CLASSES - 1)
    class_name: str
    probabilities: List[float]
    probability: float = Field(..., ge=0.0, le=1.0)
    latency_ms: float = Field(0.0, ge=0.0)

    @model_validator(mode="after")
    def check_argmax(self) -> "ClassPrediction":
        best = max(range(len(self.probabilities)), key=lambda i: (self.probabilities[i], -i))
        if best != self.class_id:
            raise ValueError(f"class_id {self.class_id} is not the arg-max ({best})")
        return self


class PipelineStats(BaseModel):
    """Accounting of one acquire -> infer -> emit run."""
    frames_in: int = Field(0, ge=0)
    frames_out: int = Field(0, ge=0)
    dropped: int = Field(0, ge=0)
    latency_ms: Optional[LatencyStats] = None

    @property
    def drop_rate(self) -> float:
        return self.dropped / self.frames_in if self.frames_in else 0.0


# ============================================================================
# FIELD SIMULATION
# ============================================================================

class WeedPatch(BaseModel):
    """A weed patch along the row (position and radius in metres)."""
    pos_m: float = Field(..., ge=0.0)
    class_id: int = Field(..., ge=0, le=NUM_CLASSES - 1)
    radius_m: float = Field(0.06, gt=0.0)
    lateral_m: float = Field(0.0, description="Offset from the camera axis, + to the right")


class LightingRegion(BaseModel):
    """Lighting override over [start_m, end_m)."""
    start_m: float = Field(..., ge=0.0)
    end_m: float = Field(..., ge=0.0)
    gain: float = Field(1.0, gt=0.0)
    shadow: float = Field(0.0, ge=0.0, le=1.0)
    blur_sigma: float = Field(0.0, ge=0.0)


class Lighting(BaseModel):
    gain: float = Field(1.0, gt=0.0)
    shadow: float = Field(0.0, ge=0.0, le=1.0)
    blur_sigma: float = Field(0.0, ge=0.0)
    regions: List[LightingRegion] = Field(default_factory=list)

    def at(self, pos_m: float) -> Tuple[float, float, float]:
        """(gain, shadow, blur_sigma) in effect at a position."""
        for region in self.regions:
            if region.start_m <= pos_m < region.end_m:
                return region.gain, region.shadow, region.blur_sigma
        return self.gain, self.shadow, self.blur_sigma


class FieldMap(BaseModel):
    """Synthetic flax row: crop lines, weed patches and lighting."""
    row_spacing_m: float = Field(0.25, ge=0.2, le=0.3)
    length_m: float = Field(15.0, gt=0.0)
    crop_rows: List[float] = Field(default_factory=lambda: [-0.25, 0.0, 0.25])
    patches: List[WeedPatch] = Field(default_factory=list)
    lighting: Lighting = Field(default_factory=Lighting)
    speed_mps: float = Field(0.3, gt=0.0)
    crop_class_id: int = 6
    negative_class_id: int = 8

    @model_validator(mode="after")
    def check_patches(self) -> "FieldMap":
        for patch in self.patches:
            if patch.class_id in (self.crop_class_id, self.negative_class_id):
                raise ValueError(f"weed patches cannot use class {patch.class_id} (crop or negative)")
            if patch.pos_m > self.length_m:
                raise ValueError(f"patch at {patch.pos_m} m lies beyond the field ({self.length_m} m)")
        return self


class RobotState(BaseModel):
    """Robot pose and actuator state; gimbal yaw is clamped to its travel."""
    position_m: float = Field(0.0, ge=0.0)
    speed_mps: float = Field(0.3, ge=0.0)
    camera_height_m: float = Field(0.3, ge=0.2, le=0.4)
    gimbal_yaw: float = Field(75.0)
    tank_remaining_ml: float = Field(1000.0, ge=0.0)
    sprayer_on: bool = False

    @field_validator("gimbal_yaw", mode="before")
    @classmethod
    def clamp_yaw(cls, v: Any) -> float:
        return max(0.0, min(150.0, float(v)))


class SprayPolicy(BaseModel):
    """Controller settings: abstain threshold, pulse length and sprayer flux."""
    threshold: float = Field(0.5, ge=0.0, le=1.0)
    pulse_s: float = Field(0.5, ge=0.0)
    flux_ml_per_min: float = Field(78.0, gt=0.0)
    baseline_flux_ml_per_min: float = Field(95.6, gt=0.0)
    no_spray_class_ids: List[int] = Field(default_factory=lambda: [6, 8])


class SprayCommand(BaseModel):
    """Controller output for one frame."""
    spray: bool
    target_yaw: float = 75.0
    duration_s: float = Field(0.0, ge=0.0)
    herbicide: Optional[str] = None

    @field_validator("target_yaw", mode="before")
    @classmethod
    def clamp_yaw(cls, v: Any) -> float:
        return max(0.0, min(150.0, float(v)))


class RunReport(BaseModel):
    """Field-run accounting: detection quality, spraying and herbicide use."""
    duration_s: float
    distance_m: float
    frames_in: int
    frames_processed: int
    frames_dropped: int
    frame_accuracy: float = Field(..., ge=0.0, le=1.0)
    per_class_accuracy: Dict[str, float] = Field(default_factory=dict)
    weeds_total: int
    weeds_sprayed: int
    weeds_missed: int
    patch_accuracy: float = Field(..., ge=0.0, le=1.0)
    false_sprays: int
    spray_commands: int
    skipped_empty_tank: int = 0
    spray_time_s: float
    herbicide_ml: float
    herbicide_by_class_ml: Dict[str, float] = Field(default_factory=dict)
    baseline_ml: float
    savings_ml: float
    savings_pct: float
    tank_remaining_ml: float


# ============================================================================
# RUN CONFIGURATION
# ============================================================================

class RunConfig(BaseModel):
    """
    Fully resolved parameters of one CLI invocation.

    Resolution order: defaults < JSON config file < command-line flags.
    Every resolved value is echoed into the run log.
    """
    command: str = ""
    seed: int = 0
    data_dir: Optional[Path] = None
    out_dir: Path = Path("run")
    width_mult: float = Field(0.25, gt=0.0, le=2.0)
    lr: float = Field(1e-4, gt=0.0)
    batch: int = Field(32, gt=0)
    fps: float = Field(10.0, gt=0.0)
    threshold: float = Field(0.5, ge=0.0, le=1.0)
    scenario: Optional[Path] = None
    deterministic: bool = False
    input_size: Tuple[int, int] = DEFAULT_INPUT_HW
    image_size: Tuple[int, int] = DEFAULT_INPUT_HW
    options: Dict[str, Any] = Field(default_factory=dict, description="Subcommand-specific values")

    @field_validator("input_size", "image_size", mode="before")
    @classmethod
    def parse_size(cls, v: Any) -> Any:
        if isinstance(v, str):
            parts = v.lower().replace("×", "x").split("x")
            if len(parts) != 2:
                raise ValueError(f"size must look like HxW, got '{v}'")
            return int(parts[0]), int(parts[1])
        return v
