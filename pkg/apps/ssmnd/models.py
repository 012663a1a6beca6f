"""
Pydantic models for the JSON documents the CLI reads and writes.
"""

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

DELTA_SCALE_SWEEP = (0.1, 0.2, 1.0, 5.0)
LR_SWEEP = (1e-3, 6e-4, 1e-4)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------- Model ----------


class ModelConfig(StrictModel):
    """Architecture of one multi-dimensional selective-SSM network."""

    name: str = Field("custom", description="Preset or free-form model name")
    rank: int = Field(..., ge=1, le=3, description="Spatial rank of the input (2 or 3 in practice)")
    input_shape: list[int] = Field(..., min_length=1, description="Extents per axis, T/H/W order")
    in_channels: int = Field(3, ge=1)
    patch: list[int] = Field(..., min_length=1, description="Patch size per axis")
    d_model: int = Field(..., ge=1)
    n_layers: int = Field(..., ge=0)
    arrangement: str = Field("alternating", description="Preset name or arrangement grammar")
    factorization: Literal["mono", "2d+1d", "2d+3d", "1d+1d+1d"] = "mono"
    t_period: int = Field(4, ge=1, description="Spatial layers between temporal pairs (inflated)")

    d_state: int = Field(16, ge=1)
    expand: int = Field(2, ge=1)
    d_conv: int = Field(4, ge=1)
    euler_b: bool = False
    d_skip: bool = True
    scan_mode: Literal["sequential", "parallel"] = "sequential"

    head: Literal["classification", "regression"] = "classification"
    n_classes: int = Field(2, ge=1)
    out_channels: int = Field(1, ge=1, description="Per-token outputs of the regression head")
    readout: Literal["mean", "position"] = "mean"
    readout_index: int = Field(0, ge=0)

    dropout: float = Field(0.0, ge=0, lt=1)
    drop_path: float = Field(0.0, ge=0, lt=1)
    zero_init_out_proj: bool = False
    zero_init_head: bool = False

    @model_validator(mode="after")
    def _check_rank(self) -> "ModelConfig":
        if len(self.input_shape) != self.rank:
            raise ValueError(f"input_shape has {len(self.input_shape)} axes, rank is {self.rank}")
        if len(self.patch) != self.rank:
            raise ValueError(f"patch has {len(self.patch)} axes, rank is {self.rank}")
        if any(p < 1 for p in self.patch) or any(s < 1 for s in self.input_shape):
            raise ValueError("input_shape and patch extents must be >= 1")
        return self


# ---------- Training ----------


class RandAugConfig(StrictModel):
    n: int = Field(2, ge=0)
    m: int = Field(9, ge=0)


class TrainConfig(StrictModel):
    """Optimizer, schedule and regularisation for one training run."""

    lr: float = Field(1e-3, ge=0, description="Base learning rate; 0 freezes the model")
    min_lr: Optional[float] = Field(None, ge=0, description="Cosine floor, default 1e-2 * lr")
    warmup_lr: float = Field(1e-6, ge=0)
    epochs: int = Field(10, ge=1)
    warmup_epochs: int = Field(1, ge=0)
    weight_decay: float = Field(0.05, ge=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    batch_size: int = Field(32, ge=1)
    microbatch: int = Field(8, ge=1, description="Fixed accumulation chunk; results do not depend on threads")
    grad_clip: Optional[float] = Field(1.0, gt=0)
    label_smoothing: float = Field(0.0, ge=0, lt=1)
    ema: bool = False
    ema_decay: float = Field(0.9999, gt=0, lt=1)
    mixup: float = Field(0.0, ge=0, description="Beta(alpha, alpha) mixing; 0 disables")
    randaug: Optional[RandAugConfig] = None
    param_group_lr: dict[str, float] = Field(
        default_factory=dict, description="Parameter-name prefix -> lr multiplier"
    )
    val_fraction: float = Field(0.2, gt=0, lt=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_schedule(self) -> "TrainConfig":
        if self.warmup_epochs > self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) exceeds epochs ({self.epochs})")
        if self.min_lr is not None and self.lr > 0 and self.min_lr > 1e-2 * self.lr:
            raise ValueError("min_lr must be <= 1e-2 * lr")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        return self

    @property
    def floor_lr(self) -> float:
        return 1e-2 * self.lr if self.min_lr is None else self.min_lr


class TaskConfig(StrictModel):
    name: str = Field(..., pattern="^(causal-trap-2d|cross-parity-2d|temporal-pointer-3d)$")
    n_samples: int = Field(1000, ge=1)
    grid: Optional[list[int]] = Field(None, min_length=2, max_length=3, description="Defaults to the task's own grid")
    seed: int = 0


# ---------- Inflation ----------


class InflationPlan(StrictModel):
    """How a 2-D checkpoint becomes a 3-D one."""

    t_patch: int = Field(2, ge=1)
    pos_policy: Literal["scaled_copy", "center_place"] = "scaled_copy"
    delta_scale: float = Field(1.0, gt=0, description="Multiplier on the initial step of new temporal layers")
    t_period: int = Field(4, ge=1)
    frames: int = Field(..., ge=1, description="Input frames of the 3-D model")
    n_layers: Optional[int] = Field(None, ge=1, description="Total 3-D layers; derived when omitted")
    zero_init_new_layers: bool = True
    seed: int = 0

    @property
    def on_delta_scale_sweep(self) -> bool:
        return self.delta_scale in DELTA_SCALE_SWEEP


# ---------- Analysis ----------


class FlopCoefficients(StrictModel):
    vit_dense: float = Field(12.0, gt=0, description="x L * D^2 per ViT block")
    vit_attention: float = Field(2.0, gt=0, description="x L^2 * D per ViT block")
    mamba_proj: float = Field(8.0, gt=0, description="x E * D per token-channel")
    mamba_scan: float = Field(9.0, gt=0, description="x E * N per token-channel")
    mamba_conv: float = Field(2.0, ge=0, description="x E * d_conv per token-channel")


class BenchRequest(StrictModel):
    archs: list[Literal["vit", "mamba"]] = Field(default_factory=lambda: ["vit", "mamba"])
    lo: int = Field(196, ge=1)
    hi: int = Field(12544, ge=1)
    points: int = Field(32, ge=2)
    d_model: int = Field(768, ge=1)
    vit_layers: int = Field(12, ge=1)
    mamba_layers: int = Field(24, ge=1)
    expand: int = Field(2, ge=1)
    d_state: int = Field(16, ge=1)
    d_conv: int = Field(4, ge=1)
    coefficients: FlopCoefficients = Field(default_factory=FlopCoefficients)

    @model_validator(mode="after")
    def _check_range(self) -> "BenchRequest":
        if self.hi < self.lo:
            raise ValueError(f"range end {self.hi} is below its start {self.lo}")
        return self


# ---------- Metrics ----------


class EpochMetrics(StrictModel):
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float


class RunMetrics(StrictModel):
    run_id: str
    task: str
    epochs: list[EpochMetrics]
    final_val_acc: float
    diverged: bool = False
    param_count: int
