"""
Pydantic models for experiment configuration, reports and run manifests.
"""

from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.config import settings


class ExperimentKind(str, Enum):
    """Named experiments runnable from the command line."""
    IDENTITY_SUITE = "identity-suite"
    EQUILIBRIUM_ORACLE = "equilibrium-oracle"
    SAMPLER_CROSSVAL = "sampler-crossval"
    CLT_VERIFY = "clt-verify"
    CLT_MEAN = "clt-mean"
    RIDER_VIRAG = "rider-virag"
    MESO_VERIFY = "meso-verify"
    BETA_SWEEP = "beta-sweep"
    MINIMIZE = "minimize"
    TRANSPORT_CHECK = "transport-check"
    MODDEV = "moddev"


class FluctuationCase(str, Enum):
    INTERIOR = "interior"
    BOUNDARY = "boundary"
    MESOSCOPIC = "mesoscopic"


class ProposalKind(str, Enum):
    METROPOLIS = "metropolis"
    MALA = "mala"


class SamplerSource(str, Enum):
    """Where fluctuation batches come from."""
    MCMC = "mcmc"
    GINIBRE = "ginibre"


class MinimizerMethod(str, Enum):
    LBFGS = "lbfgs"
    GRADIENT_DESCENT = "gradient_descent"


class CheckKind(str, Enum):
    """How a metric is judged: exact/numerical tolerance or a statistical bound."""
    NUMERIC = "numeric"
    STATISTICAL = "statistical"
    ORDER = "order"
    BOUND = "bound"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class PotentialSpec(BaseModel):
    """Builtin potential name with parameters, or polynomial coefficients."""
    model_config = ConfigDict(extra="forbid")

    name: str = "quadratic"
    params: Dict[str, Any] = Field(default_factory=dict)
    coefficients: Optional[List[List[float]]] = None

    @model_validator(mode="after")
    def check_polynomial(self):
        if self.name == "polynomial" and not self.coefficients:
            raise ValueError("polynomial potential requires 'coefficients'")
        return self


class TestFunctionSpec(BaseModel):
    """Library test function, optionally recentred and rescaled."""
    __test__ = False
    model_config = ConfigDict(extra="forbid")

    name: str = "bump_center"
    center: Optional[Tuple[float, float]] = None
    scale: Optional[float] = Field(default=None, gt=0)
    amplitude: float = 1.0
    params: Dict[str, Any] = Field(default_factory=dict)


class GridConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n: int = Field(default_factory=lambda: settings.GRID_SIZE_DEFAULT, ge=8)
    half_width: float = Field(default_factory=lambda: settings.BOX_HALF_WIDTH, gt=0)
    center: Tuple[float, float] = (0.0, 0.0)
    extension_solver: str = Field(default="sor", pattern="^(sor|direct)$")
    box_factor: float = Field(default_factory=lambda: settings.EXTENSION_BOX_FACTOR, ge=10.0)


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    N: int = Field(default=64, ge=1)
    beta: float = Field(default=2.0, gt=0)
    proposal_sigma: float = Field(default=0.05, gt=0)
    burn_in: int = Field(default_factory=lambda: settings.DEFAULT_BURN_IN, ge=0)
    thinning: int = Field(default_factory=lambda: settings.DEFAULT_THINNING, ge=1)
    n_samples: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    adapt: bool = True
    proposal: ProposalKind = ProposalKind.METROPOLIS
    init_box: Optional[float] = Field(default=None, gt=0)
    resync_every: int = Field(default_factory=lambda: settings.RESYNC_EVERY, ge=1)


class MinimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: MinimizerMethod = MinimizerMethod.LBFGS
    max_iters: int = Field(default=5000, ge=1)
    step: float = Field(default=1e-2, gt=0)
    step_shrink: float = Field(default=0.5, gt=0, lt=1)
    armijo: float = Field(default=1e-4, gt=0, lt=1)
    grad_tol: float = Field(default=1e-7, gt=0)
    restarts: int = Field(default=4, ge=1)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)


class ExperimentConfig(BaseModel):
    """One experiment run. Unknown fields are rejected so typos surface."""
    model_config = ConfigDict(extra="forbid")

    kind: ExperimentKind
    seed: int = Field(..., ge=0, lt=2 ** 64)
    potential: PotentialSpec = Field(default_factory=PotentialSpec)
    test_functions: List[TestFunctionSpec] = Field(default_factory=lambda: [TestFunctionSpec()])
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    minimizer: MinimizerConfig = Field(default_factory=MinimizerConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    source: SamplerSource = SamplerSource.GINIBRE
    n_values: List[int] = Field(default_factory=list)
    betas: List[float] = Field(default_factory=list)
    t_values: List[float] = Field(default_factory=list)
    tau_values: List[float] = Field(default_factory=lambda: [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0])
    s_values: List[float] = Field(default_factory=lambda: [0.1, 0.25, 0.4])
    n_configurations: int = Field(default=100, ge=1)
    output_dir: Optional[str] = None
    threads: int = Field(default_factory=lambda: settings.THREADS, ge=1)
    save_fields: bool = True

    @field_validator("betas")
    @classmethod
    def positive_betas(cls, v: List[float]) -> List[float]:
        if any(b <= 0 for b in v):
            raise ValueError("all betas must be positive")
        return v

    @field_validator("n_values")
    @classmethod
    def positive_n(cls, v: List[int]) -> List[int]:
        if any(n < 1 for n in v):
            raise ValueError("all N values must be at least 1")
        return v

    @field_validator("s_values")
    @classmethod
    def truncation_range(cls, v: List[float]) -> List[float]:
        if any(not 0 < s < 0.5 for s in v):
            raise ValueError("truncation parameters s must lie in (0, 1/2)")
        return v


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

class EnergyReport(BaseModel):
    """Next-order energy and its three terms; FN is their sum."""
    FN: float
    pairwise_sum: float
    cross_term: float
    background_term: float
    N: int
    identity_residuals: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def bookkeeping(self):
        total = self.pairwise_sum + self.cross_term + self.background_term
        if total != self.FN:
            raise ValueError("FN must equal the sum of its terms")
        return self


class EulerLagrangeReport(BaseModel):
    min_zeta: float = Field(description="max(-zeta0) over the grid")
    max_abs_zeta_on_support: float
    constancy_defect: float
    tolerance: float
    passed: bool


class CheckResult(BaseModel):
    """A named metric judged against a tolerance."""
    model_config = ConfigDict(ser_json_inf_nan="strings")

    name: str
    value: float
    tolerance: Optional[float] = None
    se: Optional[float] = None
    kind: CheckKind = CheckKind.NUMERIC
    passed: bool
    detail: str = ""


class RunManifest(BaseModel):
    kind: ExperimentKind
    config_hash: str
    code_version: str
    seed: int
    threads: int
    started_at: datetime
    finished_at: Optional[datetime] = None
    checks: List[CheckResult] = Field(default_factory=list)
    files: Dict[str, str] = Field(default_factory=dict)
    environment: Dict[str, Any] = Field(default_factory=dict)
    passed: bool = False


class MetricDiff(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="strings")

    name: str
    a: float
    b: float
    difference: float
    allowance: Optional[float] = None
    regression: bool = False


class CompareReport(BaseModel):
    kind: ExperimentKind
    diffs: List[MetricDiff] = Field(default_factory=list)
    only_in_a: List[str] = Field(default_factory=list)
    only_in_b: List[str] = Field(default_factory=list)
    regressions: int = 0


class CLTPrediction(BaseModel):
    """Limiting Gaussian law of Fluct_N(xi)."""
    mean: float
    variance: float = Field(ge=0)
    case: FluctuationCase

    @model_validator(mode="after")
    def centred_mesoscopic(self):
        if self.case == FluctuationCase.MESOSCOPIC and self.mean != 0:
            raise ValueError("mesoscopic predictions have mean 0")
        return self

    @property
    def std(self) -> float:
        return self.variance ** 0.5


class LaplaceEstimate(BaseModel):
    tau: float
    value: float
    se: float
    ess: float
    reliable: bool


class GaussianityReport(BaseModel):
    n: int
    ks_statistic: float
    p_value: float
    alpha: float = 0.01
    passed: bool
    sample_mean: float
    sample_variance: float
    skewness: float
    skewness_se: float
    excess_kurtosis: float
    kurtosis_se: float
    prediction: CLTPrediction


class ModerateDeviationReport(BaseModel):
    estimates: List[LaplaceEstimate]
    quadratic_coefficient: float = Field(description="c in log E exp(tau F) ~ c tau^2 + b tau")
    linear_coefficient: float
    bound_constant: float = Field(description="smallest C with log E exp(tau F) <= C (tau^2 + |tau|) on the grid")
    convex: bool
    tail_levels: List[float] = Field(default_factory=list)
    tail_frequencies: List[float] = Field(default_factory=list)
    tail_bounds: List[float] = Field(default_factory=list)
    tail_bound_holds: bool = True
