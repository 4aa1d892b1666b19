from pydantic import BaseModel, ConfigDict, Field, field_validator

Matrix = list[list[float]]
Tensor = list[list[list[float]]]


class ModelFile(BaseModel):
    """On-disk schema of a switching model configuration."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    states: list[str] = Field(min_length=1, description="Ordered hidden-state labels")
    Q: Matrix = Field(description="Generator of the hidden chain, rates per unit time")
    lambda_: list[float] = Field(
        alias="lambda", description="Arrival intensity in each hidden state"
    )
    marks: list[float] = Field(
        default_factory=lambda: [1.0],
        min_length=1,
        description="Finite mark support y_1..y_d; a single mark models a simple Poisson process",
    )
    nu: Matrix | None = Field(
        default=None, description="Row-stochastic mark distribution per state; optional when d=1"
    )
    policies: list[str] = Field(min_length=2, description="Ordered policy labels")
    c: Matrix = Field(description="Running benefit rate c[i][a]")
    c1: Matrix | Tensor | None = Field(
        default=None,
        description="Per-arrival benefit, either c1[j][a] or state-dependent c1[i][j][a]",
    )
    K: float | Matrix | Tensor = Field(
        description="Switching cost: scalar for every a != b, an |A|x|A| matrix, or a full tensor"
    )
    rho: float = Field(default=0.0, ge=0.0, description="Discount rate")


class SolverConfig(BaseModel):
    """Numerical parameters; unset values are derived from the model and horizon."""

    model_config = ConfigDict(extra="forbid")

    dt: float | None = Field(default=None, gt=0.0, description="Time step of the layer mesh")
    grid: int | None = Field(default=None, ge=1, description="Simplex lattice resolution N")
    eps_fix: float | None = Field(
        default=None, gt=0.0, description="Sup-norm stopping tolerance of the stationary iteration"
    )
    max_iterations: int = Field(default=500, ge=1)
    sweep_cap: int | None = Field(
        default=None, ge=1, description="Cap on intervention sweeps per layer (defaults to |A|)"
    )
    node_cap: int = Field(default=250_000, ge=1, description="Largest lattice allowed")
    eps_switch: float | None = Field(default=None, gt=0.0)
    steps: int = Field(default=400, ge=2, description="Layers used when dt is derived")


class SwitchRecord(BaseModel):
    time: float
    source: int = Field(description="Policy index before the switch")
    target: int = Field(description="Policy index after the switch")
    cost: float = Field(description="Undiscounted switching cost paid in the hidden state")


class McEstimate(BaseModel):
    mean: float
    stderr: float
    count: int
    seed: int


class FilterCheckReport(BaseModel):
    checkpoints: list[float]
    empirical: Matrix
    expected: Matrix
    stderr: Matrix
    max_deviation: float
    max_zscore: float


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""


class RunManifest(BaseModel):
    command: str
    config_path: str
    model_hash: str
    tool_version: str
    output_dir: str
    seed: int | None = None
    threads: int = 1
    parameters: dict[str, float | int | str | bool | None] = Field(default_factory=dict)

    @field_validator("command")
    @classmethod
    def _known_command(cls, value: str) -> str:
        if value not in {"solve", "simulate", "check"}:
            raise ValueError(f"Unknown command: {value}")
        return value
