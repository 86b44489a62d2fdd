"""
Pydantic schemas for configuration and report records.
These validate every knob before any computation runs and define the JSON
written next to each result.
"""
import math
import warnings
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .config import settings
from .errors import ParameterWarning

Family = Literal["baseline", "graphcon", "kuramoto", "slgnn"]
CouplingKind = Literal["gcn", "gat", "tran"]
Task = Literal["node-class", "graph-class", "graph-reg"]


# Oscillator parameters
class SLParams(BaseModel):
    """Stuart-Landau oscillator parameters"""
    alpha: float = Field(1.0, description="Hopf parameter (1/time)")
    beta: float = Field(1.0, description="Amplitude nonlinearity (1/(time*amp^2))")
    omega: float = Field(0.0, description="Natural frequency (rad/time)")
    gamma: float = Field(0.0, description="Phase-shift parameter (1/(time*amp^2))")
    kappa: float = Field(1.0, description="Coupling strength (1/time)")

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def _check_standard_form(self):
        values = (self.alpha, self.beta, self.omega, self.gamma, self.kappa)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("oscillator parameters must be finite")
        if self.beta <= 0:
            warnings.warn(f"beta={self.beta} <= 0 leaves the standard form; amplitudes may grow without bound", ParameterWarning)
        return self

    @property
    def limit_radius(self) -> Optional[float]:
        if self.alpha > 0 and self.beta > 0:
            return math.sqrt(self.alpha / self.beta)
        return None


class HarmonicParams(BaseModel):
    """Damped harmonic oscillator parameters"""
    zeta: float = Field(0.0, ge=0, description="Damping ratio")
    omega0: float = Field(1.0, ge=0, description="Angular frequency (rad/time)")
    c: Optional[float] = Field(None, ge=0, description="Coupled damping coefficient; defaults to 2*zeta*omega0")

    model_config = ConfigDict(frozen=True, extra="forbid")

    @property
    def damping(self) -> float:
        return self.c if self.c is not None else 2.0 * self.zeta * self.omega0


# Time stepping
class StepConfig(BaseModel):
    """Per-layer stepper settings"""
    dt: float = Field(settings.train_dt, ge=0, description="Step size; 0 is the identity step")
    newton_tol: float = Field(settings.newton_tol, gt=0)
    newton_max_iter: int = Field(settings.newton_max_iter, ge=1)
    cubic_method: Literal["newton", "cardano"] = "newton"
    phase_sign: Literal["minus", "plus"] = "minus"

    model_config = ConfigDict(frozen=True, extra="forbid")


# Model structure
class CouplingConfig(BaseModel):
    """Learnable coupling function F_theta"""
    kind: CouplingKind = "gcn"
    hidden_dim: int = Field(16, ge=1)
    heads: int = Field(2, ge=1, description="Attention heads (gat/tran)")
    attn_dim: int = Field(8, ge=1, description="Key dimension d_k (tran)")
    kappa: float = Field(1.0, gt=0, description="Coupling strength (tran)")
    leaky_slope: float = Field(0.2, ge=0, le=1)
    complex_weights: bool = False
    tied: bool = False

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def _check_heads(self):
        if self.kind == "gat" and self.hidden_dim % self.heads != 0:
            raise ValueError(f"hidden_dim={self.hidden_dim} must be divisible by heads={self.heads} for gat")
        return self


class ModelConfig(BaseModel):
    """End-to-end architecture"""
    family: Family = "slgnn"
    coupling: CouplingConfig = Field(default_factory=CouplingConfig)
    layers: int = Field(4, ge=1)
    dt: float = Field(settings.train_dt, ge=0)
    hidden_dim: int = Field(16, ge=1)
    dropout: float = Field(0.0, ge=0, le=0.5)
    input_dropout: float = Field(0.0, ge=0, le=0.5)
    alpha: float = 1.0
    beta: float = 1.0
    omega: float = 0.0
    gamma: float = 0.0
    phase_sign: Literal["minus", "plus"] = "minus"
    cubic_method: Literal["newton", "cardano"] = "newton"
    newton_tol: float = Field(settings.newton_tol, gt=0)
    newton_max_iter: int = Field(settings.newton_max_iter, ge=1)
    train_oscillator: bool = False
    readout: Literal["mean", "max"] = "mean"

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="before")
    @classmethod
    def _sync_hidden(cls, data: Any) -> Any:
        # the coupling always runs at the model's hidden width
        if not isinstance(data, dict) or "hidden_dim" not in data:
            return data
        coupling = data.get("coupling") or {}
        if isinstance(coupling, CouplingConfig):
            coupling = coupling.model_dump()
        return {**data, "coupling": {**coupling, "hidden_dim": data["hidden_dim"]}}

    def sl_params(self) -> SLParams:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ParameterWarning)
            return SLParams(alpha=self.alpha, beta=self.beta, omega=self.omega, gamma=self.gamma)

    def step_config(self) -> StepConfig:
        return StepConfig(
            dt=self.dt,
            newton_tol=self.newton_tol,
            newton_max_iter=self.newton_max_iter,
            cubic_method=self.cubic_method,
            phase_sign=self.phase_sign,
        )


class TrainConfig(BaseModel):
    """Optimization settings"""
    lr: float = Field(5e-3, ge=0)
    weight_decay: float = Field(5e-4, ge=0)
    epochs: int = Field(200, ge=1)
    patience: Optional[int] = Field(50, ge=1, description="Early-stop patience on validation loss")
    seed: int = 0
    optimizer: Literal["adam", "sgd"] = "adam"
    batch_size: int = Field(settings.graph_batch_size, ge=1, description="Graphs per minibatch for graph-level tasks")
    log_every: int = Field(25, ge=1)

    model_config = ConfigDict(frozen=True, extra="forbid")


# Reports
class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float


class MetricsReport(BaseModel):
    """Result of one training run"""
    task: Task
    family: Family
    coupling: CouplingKind
    seed: int
    epochs_run: int
    best_epoch: int
    test_metric: float = Field(..., description="Accuracy in percent, or mean squared error for regression")
    val_metric: float
    val_loss: float
    history: List[EpochRecord] = Field(default_factory=list)
    config_digest: str = ""
    wall_time: float = Field(0.0, description="Seconds; excluded from reproducibility comparisons")

    def reproducible_view(self) -> Dict[str, Any]:
        return self.model_dump(exclude={"wall_time"})


class DecayFit(BaseModel):
    kind: Literal["exponential", "algebraic"]
    rate: float
    r_squared: float


class CriticalityReport(BaseModel):
    residual: List[float]
    mean_abs_ratio: float


class TTestResult(BaseModel):
    t_score: float
    threshold: float = 1.66
    significant: bool


class DepthRow(BaseModel):
    depth: int
    test_metric: float
    val_metric: float
    epochs_run: int


class RobustnessRow(BaseModel):
    level: int
    mean: float
    p25: float
    p75: float


# Flat run configuration (CLI files + overrides)
class ExperimentConfig(BaseModel):
    """Flat run configuration read by the command line"""
    family: Family = "slgnn"
    coupling: CouplingKind = "gcn"
    alpha: float = 1.0
    beta: float = 1.0
    omega: float = 0.0
    gamma: float = 0.0
    kappa: float = Field(1.0, ge=0.1, le=1.5)
    layers: int = Field(4, ge=1, le=128)
    dt: float = Field(settings.train_dt, ge=0)
    hidden_dim: int = Field(16, ge=2, le=128)
    lr: float = Field(5e-3, ge=1e-5, le=1e-2)
    weight_decay: float = Field(5e-4, ge=0, le=1.0)
    leaky_slope: float = Field(0.2, ge=0, le=1)
    dropout: float = Field(0.0, ge=0, le=0.5)
    input_dropout: float = Field(0.0, ge=0, le=0.5)
    heads: int = 2
    attn_dim: int = Field(8, ge=1, le=80)
    epochs: int = Field(200, ge=1)
    patience: Optional[int] = Field(50, ge=1)
    seed: int = 0
    optimizer: Literal["adam", "sgd"] = "adam"
    cubic_method: Literal["newton", "cardano"] = "newton"
    phase_sign: Literal["minus", "plus"] = "minus"
    newton_tol: float = Field(settings.newton_tol, gt=0)
    newton_max_iter: int = Field(settings.newton_max_iter, ge=1)
    readout: Literal["mean", "max"] = "mean"
    complex_weights: bool = False
    tied: bool = False
    train_oscillator: bool = False
    train_per_class: int = Field(20, ge=1)
    val_count: int = Field(20, ge=0)
    data: str = Field("sbm", description="Bundle directory, or 'sbm' / 'graph-class' / 'graph-reg' for synthetic data")
    sbm_blocks: int = Field(2, ge=2)
    sbm_nodes_per_block: int = Field(50, ge=1)
    sbm_p_in: float = Field(0.2, ge=0, le=1)
    sbm_p_out: float = Field(0.02, ge=0, le=1)
    sbm_noise: float = Field(0.5, ge=0)

    model_config = ConfigDict(extra="forbid")

    @field_validator("heads")
    @classmethod
    def _heads_allowed(cls, value: int) -> int:
        if value not in (1, 2, 4):
            raise ValueError("heads must be 1, 2 or 4")
        return value

    def model_config_record(self) -> ModelConfig:
        coupling = CouplingConfig(
            kind=self.coupling,
            hidden_dim=self.hidden_dim,
            heads=self.heads,
            attn_dim=self.attn_dim,
            kappa=self.kappa,
            leaky_slope=self.leaky_slope,
            complex_weights=self.complex_weights,
            tied=self.tied,
        )
        return ModelConfig(
            family=self.family,
            coupling=coupling,
            layers=self.layers,
            dt=self.dt,
            hidden_dim=self.hidden_dim,
            dropout=self.dropout,
            input_dropout=self.input_dropout,
            alpha=self.alpha,
            beta=self.beta,
            omega=self.omega,
            gamma=self.gamma,
            phase_sign=self.phase_sign,
            cubic_method=self.cubic_method,
            newton_tol=self.newton_tol,
            newton_max_iter=self.newton_max_iter,
            train_oscillator=self.train_oscillator,
            readout=self.readout,
        )

    def train_config_record(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            patience=self.patience,
            seed=self.seed,
            optimizer=self.optimizer,
        )
