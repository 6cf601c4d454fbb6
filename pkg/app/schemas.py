import math
import re
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.errors import ConfigError, GridDivisibilityError


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# configuration

class PatchGridSpec(StrictModel):
    rows: int = Field(..., ge=1, description="M, number of patch rows")
    cols: int = Field(..., ge=1, description="N, number of patch columns")

    @classmethod
    def parse(cls, text: str) -> "PatchGridSpec":
        match = re.fullmatch(r"\s*(\d+)\s*(?:[xX×]\s*(\d+))?\s*", str(text))
        if not match:
            raise ConfigError("grid", f"cannot parse grid '{text}', expected e.g. '8x8'")
        rows = int(match.group(1))
        cols = int(match.group(2) or rows)
        if rows < 1 or cols < 1:
            raise ConfigError("grid", "grid extents must be >= 1")
        return cls(rows=rows, cols=cols)

    @property
    def label(self) -> str:
        return f"{self.rows}x{self.cols}"

    @property
    def cells(self) -> int:
        return self.rows * self.cols

    def check_divides(self, height: int, width: int, key: str = "grid") -> None:
        if height % self.rows or width % self.cols:
            raise GridDivisibilityError(
                key, f"grid {self.label} does not divide image extent {height}x{width}"
            )


class MlpShape(StrictModel):
    hidden: int = Field(64, ge=1, description="Hidden width")
    layers: int = Field(5, ge=2, description="Number of affine layers L")


class MlpSpec(StrictModel):
    in_features: int = Field(..., ge=1, description="4i + m")
    hidden: int = Field(..., ge=1)
    layers: int = Field(..., ge=2)
    out_features: int = Field(1, ge=1, description="One per target channel")
    slope: float = Field(0.2, ge=0, description="Leaky-relu slope of hidden layers")

    @property
    def widths(self) -> List[int]:
        return [self.in_features] + [self.hidden] * (self.layers - 1) + [self.out_features]


class HypernetConfig(StrictModel):
    in_channels: int = Field(1, ge=1, description="m, source channels")
    width: int = Field(32, ge=1, description="Channels of the downsampling stages and trunk")
    trunk_blocks: int = Field(7, ge=0, description="3x3 stride-1 convolution blocks")
    slope: float = Field(0.2, ge=0)
    source_skip: bool = Field(True, description="Concatenate the strided-downsampled source to the trunk input")
    head_init_std: float = Field(1e-3, ge=0, description="Std of the head weights; head bias holds a base MLP")


class DiscConfig(StrictModel):
    in_channels: int = Field(2, ge=2, description="m + 1, source and target concatenated")
    widths: Tuple[int, ...] = Field((64, 128, 256, 256, 1))
    strides: Tuple[int, ...] = Field((2, 2, 2, 1, 1))
    kernel: int = Field(4, ge=1)
    padding: int = Field(1, ge=0)
    slope: float = Field(0.2, ge=0)
    normalization: Literal["none"] = Field("none", description="No normalization layers in D")

    @model_validator(mode="after")
    def _check_blocks(self):
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ConfigError("disc.widths", "widths and strides must have the same non-zero length")
        if self.widths[-1] != 1:
            raise ConfigError("disc.widths", "the last block must emit a single logit channel")
        if any(w < 1 for w in self.widths) or any(s < 1 for s in self.strides):
            raise ConfigError("disc.widths", "widths and strides must be positive")
        return self


class TrainConfig(StrictModel):
    lambda_rec: float = Field(100.0, ge=0, description="Weight of the l1 reconstruction term")
    lr: float = Field(1e-4, ge=0, description="Initial Adam learning rate")
    beta1: float = Field(0.5, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    epochs: int = Field(60, ge=1)
    batch_size: int = Field(8, ge=1)
    lr_decay_every: int = Field(20, ge=1, description="Step decay period in epochs")
    lr_decay_factor: float = Field(0.5, gt=0, le=1)
    crop_height: int = Field(64, ge=1)
    crop_width: int = Field(64, ge=1)
    flip_prob: float = Field(0.5, ge=0, le=1, description="Horizontal flip probability")
    noise_sigma: float = Field(0.1, ge=0, description="Discriminator input noise at epoch 0, annealed to 0")
    noise_on_source: bool = Field(False, description="Also perturb the source channels fed to D")
    generator_loss: Literal["nonsaturating", "minimax"] = "nonsaturating"
    seed: int = 0
    in_channels: int = Field(1, ge=1, description="m, source channels")
    grid: PatchGridSpec = Field(default_factory=lambda: PatchGridSpec(rows=8, cols=8))
    bands: int = Field(6, ge=1, description="i, positional encoding frequency bands")
    coord_denominator: Literal["extent_minus_one", "extent"] = "extent_minus_one"
    global_mlp: MlpShape = Field(default_factory=lambda: MlpShape(hidden=128, layers=8))
    local_mlp: MlpShape = Field(default_factory=lambda: MlpShape(hidden=64, layers=5))
    hypernet: HypernetConfig = Field(default_factory=HypernetConfig)
    disc: DiscConfig = Field(default_factory=DiscConfig)
    val_samples: int = Field(16, ge=1, description="Validation samples scored per epoch")
    workers: int = Field(1, ge=1, description="Threads for batch assembly")
    deterministic: bool = True

    @model_validator(mode="after")
    def _check_grid(self):
        self.grid.check_divides(self.crop_height, self.crop_width, key="grid")
        return self

    def mlp_spec(self) -> MlpSpec:
        shape = self.global_mlp if self.grid.cells == 1 else self.local_mlp
        return MlpSpec(
            in_features=4 * self.bands + self.in_channels,
            hidden=shape.hidden,
            layers=shape.layers,
        )

    def hypernet_config(self) -> HypernetConfig:
        return self.hypernet.model_copy(update={"in_channels": self.in_channels})

    def disc_config(self) -> DiscConfig:
        return self.disc.model_copy(update={"in_channels": self.in_channels + 1})


class SynthConfig(StrictModel):
    height: int = Field(64, ge=8)
    width: int = Field(64, ge=8)
    source_channels: int = Field(1, ge=1, description="m; channel 0 is the reference contrast")
    train_samples: int = Field(256, ge=0)
    test_samples: int = Field(64, ge=0)
    class_a: Tuple[int, int] = Field((1, 3), description="Min/max enhancing (textured) ellipses per image")
    class_b: Tuple[int, int] = Field((1, 3), description="Min/max non-enhancing (smooth) ellipses per image")
    radius: Tuple[float, float] = Field((4.0, 9.0), description="Min/max ellipse semi-axis in pixels")
    stripe_period: float = Field(3.0, gt=0, description="Texture period of class-A interiors in pixels")
    stripe_amplitude: float = Field(0.35, ge=0)
    lesion_level: float = Field(0.2, ge=-1, le=1, description="Shared interior mean of both classes")
    tissue_level: float = Field(-0.3, ge=-1, le=1)
    shading: float = Field(0.1, ge=0, description="Amplitude of the smooth tissue shading")
    head_extent: Tuple[float, float] = Field((0.42, 0.38), description="Head semi-axes as fractions of H, W")
    gain: float = Field(0.5, ge=0, description="Additive uplift of class-A interiors in the target")
    rim_width: float = Field(1.5, ge=0, description="Width of the bright rim in pixels")
    rim_gain: float = Field(0.3, ge=0)
    noise_level: float = Field(0.02, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self):
        for key in ("class_a", "class_b", "radius"):
            lo, hi = getattr(self, key)
            if lo < 0 or hi < lo:
                raise ConfigError(f"data.{key}", f"invalid range ({lo}, {hi})")
        return self


class SweepConfig(StrictModel):
    grids: List[PatchGridSpec] = Field(
        default_factory=lambda: [PatchGridSpec(rows=k, cols=k) for k in (1, 2, 4, 8)]
    )
    workers: int = Field(1, ge=1, description="Concurrent training runs")


class ProbeConfig(StrictModel):
    sample_index: int = Field(0, ge=0, description="Test sample the probe cells are chosen on")


class RunConfig(StrictModel):
    precision: Literal[32, 64] = 32
    deterministic: bool = True
    data: SynthConfig = Field(default_factory=SynthConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)

    @model_validator(mode="after")
    def _cross_check(self):
        if self.data.height < self.train.crop_height or self.data.width < self.train.crop_width:
            raise ConfigError("train.crop_height", "crop is larger than the synthetic image extent")
        if self.data.source_channels != self.train.in_channels:
            raise ConfigError("train.in_channels", "must equal data.source_channels")
        for i, grid in enumerate(self.sweep.grids):
            key = f"sweep.grids[{i}]"
            grid.check_divides(self.train.crop_height, self.train.crop_width, key=key)
            grid.check_divides(self.data.height, self.data.width, key=key)
        return self


# run records and reports

class RunRecord(BaseModel):
    epoch: int
    d_loss: float
    g_loss: float
    rec_loss: float
    val_mse: float
    val_ssim: float
    val_psnr: float
    lr: float
    sigma: float
    objective: float = Field(..., description="Generator objective on the fixed probe batch after the epoch")
    wall_clock: float = Field(..., description="Seconds since training started")


HISTORY_COLUMNS = list(RunRecord.model_fields)


class RunHistory(BaseModel):
    records: List[RunRecord] = Field(default_factory=list)


class MetricsRow(BaseModel):
    id: str
    mse: float
    ssim: float
    psnr: float
    masked_mse: Optional[float] = Field(None, description="MSE over enhancing-region pixels, when a mask exists")


class MetricSummary(BaseModel):
    mean: float
    std: float


class MetricsReport(BaseModel):
    rows: List[MetricsRow]
    summary: Dict[str, MetricSummary]
    count: int
    metadata: Dict[str, Any] = Field(default_factory=dict)

    def table_row(self) -> Dict[str, float]:
        """Aggregates scaled for reporting: MSE x1e-3, SSIM x100, PSNR in dB."""
        nan = MetricSummary(mean=math.nan, std=math.nan)
        mse, ssim, psnr = (self.summary.get(k, nan) for k in ("mse", "ssim", "psnr"))
        return {
            "mse_e3_mean": mse.mean * 1e3,
            "mse_e3_std": mse.std * 1e3,
            "ssim_x100_mean": ssim.mean * 100,
            "ssim_x100_std": ssim.std * 100,
            "psnr_mean": psnr.mean,
            "psnr_std": psnr.std,
        }


class WilcoxonResult(BaseModel):
    statistic: float = Field(..., description="W+, sum of ranks of positive differences")
    n: int = Field(..., description="Non-zero differences")
    p_value: float
    method: Literal["exact", "normal-approximation"]

    @field_validator("p_value")
    @classmethod
    def _p_in_range(cls, v: float) -> float:
        if math.isnan(v) or not 0 < v <= 1:
            raise ValueError("p-value must lie in (0, 1]")
        return v


class EvaluationResult(BaseModel):
    report: MetricsReport
    baseline: Optional[MetricsReport] = None
    comparisons: Dict[str, WilcoxonResult] = Field(default_factory=dict)


class SweepRow(BaseModel):
    grid: str
    mse_e3_mean: float
    mse_e3_std: float
    ssim_x100_mean: float
    ssim_x100_std: float
    psnr_mean: float
    psnr_std: float
    p_mse: Optional[float] = None
    p_ssim: Optional[float] = None
    p_psnr: Optional[float] = None


class SweepTable(BaseModel):
    rows: List[SweepRow]
    reference: Optional[str] = Field(None, description="Grid the p-values compare against")


class ProbeReport(BaseModel):
    grid: str
    foreground_cell: Tuple[int, int]
    background_cell: Tuple[int, int]
    full_mse: float
    foreground_mse: float
    background_mse: float
    full_variance: float
    foreground_variance: float
    background_variance: float


class GradCheckEntry(BaseModel):
    target: str
    parameter: str
    max_relative_error: float
    checked_entries: int
    passed: bool


# dataset

DATASET_FORMAT_VERSION = 1


class SampleRecord(BaseModel):
    id: str
    source_files: List[str]
    target_file: str
    mask_file: Optional[str] = None
    height: int = Field(..., ge=1)
    width: int = Field(..., ge=1)
    channels: int = Field(..., ge=1)


class DatasetManifest(BaseModel):
    format_version: int = DATASET_FORMAT_VERSION
    split: Literal["train", "test"]
    samples: List[SampleRecord] = Field(default_factory=list)

    @model_validator(mode="after")
    def _unique_ids(self):
        ids = [s.id for s in self.samples]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate sample ids in manifest")
        return self


# service bodies

Pixels = List[List[List[float]]]


class TranslateRequest(BaseModel):
    source: Pixels = Field(..., description="Исходное изображение: каналы x строки x столбцы")
    raw: bool = Field(False, description="Сначала обрезать по ненулевой области и нормировать")


class TranslateResponse(BaseModel):
    image: List[List[float]]
    height: int
    width: int
    grid: str


class CompareRequest(BaseModel):
    prediction: Pixels
    target: Pixels


class CompareResponse(BaseModel):
    mse: float
    ssim: float
    psnr: Optional[float] = Field(None, description="null для одинаковых изображений")


class WilcoxonRequest(BaseModel):
    x: List[float] = Field(..., min_length=1)
    y: List[float] = Field(..., min_length=1)


class RunSummary(BaseModel):
    run_id: str
    has_checkpoint: bool
    epochs_completed: int
    config: Optional[Dict[str, Any]] = None


class HealthOut(BaseModel):
    status: str
    model_loaded: bool
    grid: Optional[str] = None
    parameters: Optional[int] = None
