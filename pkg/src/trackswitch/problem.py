"""Problem instance: the hidden chain, the observed point process and the cost data."""

from __future__ import annotations

from dataclasses import dataclass, field
import hashlib
from importlib import resources
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import ValidationError

from .errors import (
    BadShape,
    BadStochasticRow,
    InvalidBelief,
    ModelError,
    ModelValidationError,
    NonGenerator,
    NonPositiveIntensity,
    NonPositiveSwitchCost,
    TriangleViolation,
)
from .models import ModelFile

logger = logging.getLogger(__name__)

ROW_TOLERANCE = 1e-9
TRIANGLE_TOLERANCE = 1e-12
MIN_SWITCH_COST = 1e-12
SUM_TOLERANCE = 1e-12
RENORMALIZE_TOLERANCE = 1e-9
NEGATIVE_TOLERANCE = 1e-15

BUNDLED_MODELS = ("onoff", "fed", "callcenter")


@dataclass(frozen=True)
class Belief:
    """A point of the probability simplex D."""

    pi: NDArray[np.float64]

    def __post_init__(self) -> None:
        object.__setattr__(self, "pi", _normalize(self.pi))
        self.pi.setflags(write=False)

    @property
    def size(self) -> int:
        return int(self.pi.shape[0])

    def __getitem__(self, index: int) -> float:
        return float(self.pi[index])

    def __array__(self, dtype: Any = None, copy: Any = None) -> NDArray[np.float64]:
        return np.asarray(self.pi, dtype=dtype)

    @classmethod
    def vertex(cls, m: int, i: int) -> Belief:
        pi = np.zeros(m)
        pi[i] = 1.0
        return cls(pi)

    @classmethod
    def uniform(cls, m: int) -> Belief:
        return cls(np.full(m, 1.0 / m))


def _normalize(values: ArrayLike) -> NDArray[np.float64]:
    pi = np.array(values, dtype=np.float64).reshape(-1)
    if pi.size == 0 or not np.all(np.isfinite(pi)):
        raise InvalidBelief(f"Belief must be a finite nonempty vector, got {pi}")
    if np.any(pi < -NEGATIVE_TOLERANCE):
        raise InvalidBelief(f"Belief has negative entries: {pi}")
    pi = np.clip(pi, 0.0, None)
    total = pi.sum()
    if abs(total - 1.0) > RENORMALIZE_TOLERANCE:
        raise InvalidBelief(f"Belief sums to {total!r}, not 1")
    if abs(total - 1.0) > SUM_TOLERANCE:
        pi = pi / total
    return pi


def as_belief(value: Belief | ArrayLike) -> Belief:
    return value if isinstance(value, Belief) else Belief(np.asarray(value, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class SwitchingModel:
    """Validated model; arrays are read-only and safe to share across threads.

    Indices: i over hidden states, j over marks, a/b over policies.
    """

    states: tuple[str, ...]
    Q: NDArray[np.float64]
    lam: NDArray[np.float64]
    marks: NDArray[np.float64]
    nu: NDArray[np.float64]
    policies: tuple[str, ...]
    c: NDArray[np.float64]
    c1: NDArray[np.float64]
    K: NDArray[np.float64]
    rho: float
    name: str = "model"
    source: dict[str, Any] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        for name in ("Q", "lam", "marks", "nu", "c", "c1", "K"):
            getattr(self, name).setflags(write=False)

    @property
    def m(self) -> int:
        return len(self.states)

    @property
    def d(self) -> int:
        return int(self.marks.shape[0])

    @property
    def n_policies(self) -> int:
        return len(self.policies)

    @property
    def cmax(self) -> float:
        return float(np.max(np.abs(self.c)))

    @property
    def lam_max(self) -> float:
        return float(np.max(self.lam))

    @property
    def lam_min(self) -> float:
        return float(np.min(self.lam))

    @property
    def k0(self) -> float:
        off = ~np.eye(self.n_policies, dtype=bool)
        return float(np.min(self.K[:, off]))

    @property
    def has_arrival_costs(self) -> bool:
        return bool(np.any(self.c1 != 0.0))

    @property
    def arrival_rate(self) -> NDArray[np.float64]:
        """Expected arrival benefit per unit time, lam_i * sum_j nu[i][j] c1[i][j][a]."""
        return self.lam[:, None] * np.einsum("ij,ija->ia", self.nu, self.c1)

    @property
    def reward_rate(self) -> NDArray[np.float64]:
        """Running plus expected arrival benefit per unit time, shape (m, |A|)."""
        return self.c + self.arrival_rate

    @property
    def rate_bound(self) -> float:
        """Bound on the expected benefit rate; equals cmax without arrival costs."""
        return float(np.max(np.abs(self.reward_rate)))

    @property
    def sub_generator(self) -> NDArray[np.float64]:
        return self.Q - np.diag(self.lam)

    def value_bound(self, horizon: float | None) -> float:
        """Uniform bound on |U|: rate_bound*T without discounting, rate_bound/rho otherwise."""
        if self.rho > 0.0:
            bound = self.rate_bound / self.rho
            if horizon is not None:
                bound = min(bound, self.rate_bound * horizon)
            return bound
        if horizon is None:
            raise ValueError("An undiscounted model needs a finite horizon")
        return self.rate_bound * horizon

    def policy_index(self, label: str | int) -> int:
        if isinstance(label, (int, np.integer)):
            if not 0 <= int(label) < self.n_policies:
                raise IndexError(f"Policy index {label} out of range")
            return int(label)
        try:
            return self.policies.index(label)
        except ValueError:
            raise KeyError(f"Unknown policy: {label}") from None

    def mark_index(self, value: float) -> int:
        hits = np.flatnonzero(np.isclose(self.marks, value))
        if hits.size == 0:
            raise KeyError(f"Unknown mark value: {value}")
        return int(hits[0])


def _matrix(values: Any, shape: tuple[int, ...], name: str) -> NDArray[np.float64]:
    array = np.asarray(values, dtype=np.float64)
    if array.shape != shape:
        raise BadShape(f"{name} must have shape {shape}, got {array.shape}")
    if not np.all(np.isfinite(array)):
        raise BadShape(f"{name} must be finite")
    return array


def _switch_costs(raw: Any, m: int, n: int) -> NDArray[np.float64]:
    array = np.asarray(raw, dtype=np.float64)
    off = ~np.eye(n, dtype=bool)
    if array.ndim == 0:
        tensor = np.where(off, float(array), 0.0)[None, :, :].repeat(m, axis=0)
    elif array.shape == (n, n):
        tensor = np.broadcast_to(array, (m, n, n)).copy()
    elif array.shape == (m, n, n):
        tensor = array.copy()
    else:
        raise BadShape(f"K must be a scalar, {(n, n)} or {(m, n, n)}, got {array.shape}")
    if not np.all(np.isfinite(tensor)):
        raise BadShape("K must be finite")
    if np.any(tensor[:, ~off] != 0.0):
        raise BadShape("K[i][a][a] must be zero")
    return tensor


def _arrival_costs(raw: Any, m: int, d: int, n: int) -> NDArray[np.float64]:
    if raw is None:
        return np.zeros((m, d, n))
    array = np.asarray(raw, dtype=np.float64)
    if array.shape == (d, n):
        return np.broadcast_to(array, (m, d, n)).copy()
    if array.shape == (m, d, n):
        return array.copy()
    raise BadShape(f"c1 must have shape {(d, n)} or {(m, d, n)}, got {array.shape}")


def _check_invariants(model: SwitchingModel) -> list[ModelError]:
    violations: list[ModelError] = []
    Q = model.Q
    scale = max(1.0, float(np.max(np.abs(Q))))
    off = ~np.eye(model.m, dtype=bool)
    if np.any(Q[off] < 0.0):
        i, j = np.argwhere((Q < 0.0) & off)[0]
        violations.append(NonGenerator(f"Q[{i}][{j}] = {Q[i, j]} is a negative off-diagonal rate"))
    row_sums = Q.sum(axis=1)
    bad_rows = np.flatnonzero(np.abs(row_sums) > ROW_TOLERANCE * scale)
    if bad_rows.size:
        i = int(bad_rows[0])
        violations.append(NonGenerator(f"Row {i} of Q sums to {row_sums[i]}, not 0"))
    if np.any(model.lam <= 0.0):
        i = int(np.flatnonzero(model.lam <= 0.0)[0])
        violations.append(NonPositiveIntensity(f"lambda[{i}] = {model.lam[i]} must be positive"))
    bad_nu = (model.nu < 0.0).any(axis=1) | (np.abs(model.nu.sum(axis=1) - 1.0) > ROW_TOLERANCE)
    if bad_nu.any():
        i = int(np.flatnonzero(bad_nu)[0])
        violations.append(
            BadStochasticRow(f"Row {i} of nu is not a probability vector: {model.nu[i]}")
        )
    K = model.K
    n = model.n_policies
    off_policy = ~np.eye(n, dtype=bool)
    if np.any(K[:, off_policy] <= MIN_SWITCH_COST):
        i, a, b = np.argwhere((K <= MIN_SWITCH_COST) & off_policy[None, :, :])[0]
        violations.append(
            NonPositiveSwitchCost(f"K[{i}][{a}][{b}] = {K[i, a, b]} must exceed {MIN_SWITCH_COST}")
        )
    # slack[i, a, b, c] = K[i,a,b] + K[i,b,c] - K[i,a,c]
    slack = K[:, :, :, None] + K[:, None, :, :] - K[:, :, None, :]
    if np.any(slack < -TRIANGLE_TOLERANCE):
        i, a, b, c = np.argwhere(slack < -TRIANGLE_TOLERANCE)[0]
        excess = float(-slack[i, a, b, c])
        violations.append(TriangleViolation(int(i), int(a), int(b), int(c), excess))
    return violations


def validate(raw: ModelFile | dict[str, Any], name: str = "model") -> SwitchingModel:
    """Build a SwitchingModel from a parsed configuration and verify every invariant.

    Raises:
    ------
        ModelValidationError: listing every violated invariant.

    """
    try:
        parsed = raw if isinstance(raw, ModelFile) else ModelFile.model_validate(raw)
    except ValidationError as e:
        raise ModelValidationError([BadShape(str(e))]) from e
    m, n = len(parsed.states), len(parsed.policies)
    try:
        marks = np.asarray(parsed.marks, dtype=np.float64)
        d = marks.shape[0]
        nu = np.ones((m, 1)) if parsed.nu is None and d == 1 else parsed.nu
        if nu is None:
            raise BadShape("nu is required when more than one mark is declared")
        model = SwitchingModel(
            states=tuple(parsed.states),
            Q=_matrix(parsed.Q, (m, m), "Q"),
            lam=_matrix(parsed.lambda_, (m,), "lambda"),
            marks=marks,
            nu=_matrix(nu, (m, d), "nu"),
            policies=tuple(parsed.policies),
            c=_matrix(parsed.c, (m, n), "c"),
            c1=_arrival_costs(parsed.c1, m, d, n),
            K=_switch_costs(parsed.K, m, n),
            rho=float(parsed.rho),
            name=name,
            source=parsed.model_dump(by_alias=True),
        )
    except BadShape as e:
        raise ModelValidationError([e]) from e
    violations = _check_invariants(model)
    if violations:
        raise ModelValidationError(violations)
    logger.debug("Validated model %s: m=%d, d=%d, |A|=%d", name, m, model.d, n)
    return model


def load_model(path: Path) -> SwitchingModel:
    """Read and validate a JSON model configuration."""
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelValidationError([BadShape(f"Invalid JSON in {path}: {e}")]) from e
    return validate(data, name=path.stem)


def bundled_config_path(name: str) -> Path:
    if name not in BUNDLED_MODELS:
        raise KeyError(f"No bundled model named {name!r}; choose from {BUNDLED_MODELS}")
    return Path(str(resources.files("trackswitch") / "configs" / f"{name}.json"))


def load_bundled(name: str) -> SwitchingModel:
    return load_model(bundled_config_path(name))


def model_hash(model: SwitchingModel) -> str:
    """Content hash of the validated arrays, stable across key order and formatting."""
    digest = hashlib.sha256()
    for label in (*model.states, "|", *model.policies):
        digest.update(label.encode("utf-8") + b"\0")
    for array in (model.Q, model.lam, model.marks, model.nu, model.c, model.c1, model.K):
        digest.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
    digest.update(np.float64(model.rho).tobytes())
    return digest.hexdigest()[:16]


def cost_C(model: SwitchingModel, pi: Belief | ArrayLike, a: int) -> float:
    """Running benefit rate C(pi, a) = sum_i c[i][a] pi_i."""
    return float(np.asarray(as_belief(pi).pi) @ model.c[:, a])


def cost_K(model: SwitchingModel, a: int, b: int, pi: Belief | ArrayLike) -> float:
    """Switching cost K(a, b, pi) = sum_i K[i][a][b] pi_i; zero when a == b."""
    if a == b:
        return 0.0
    return float(np.asarray(as_belief(pi).pi) @ model.K[:, a, b])


def switch_cost_table(model: SwitchingModel, points: NDArray[np.float64]) -> NDArray[np.float64]:
    """K(a, b, pi) for a batch of beliefs, shape (n_points, |A|, |A|)."""
    return np.einsum("pi,iab->pab", points, model.K)
