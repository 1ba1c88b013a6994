"""Validated experiment configuration.

Configs are JSON documents. Unknown keys are rejected, every default is
filled in on parsing, and the resolved model serializes back to a document
that parses to the same model.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator, model_validator

EXPERIMENTS = (
    "env-stats", "clearings", "covering", "simulate", "survival", "fk-check",
    "confinement", "tube", "lemma2", "lln", "theoremC",
)


class ConfigFault(ValueError):
    """Config rejected; ``path`` is a JSON path such as ``$.sim.beta_inside``."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_default=True)


class EnvironmentModel(_Strict):
    d: int = Field(2, ge=1, le=8)
    nu: float = Field(1.0, gt=0)
    alpha: float = Field(1.0, gt=0)
    a: float = Field(0.5, gt=0)
    master_seed: int = Field(0, ge=0, lt=2**64)
    cell_side: Optional[float] = Field(None, gt=0)
    # delete every atom within this distance of `clear_center` (engineered clearing)
    clear_radius: Optional[float] = Field(None, ge=0)
    clear_center: Optional[list[float]] = None
    snapshot: Optional[str] = None

    @field_validator("cell_side")
    @classmethod
    def _side(cls, v, info: ValidationInfo):
        a = info.data.get("a")
        if v is not None and a is not None and v < 2 * a:
            raise ValueError("cell_side must be >= 2a")
        return v

    @field_validator("clear_center")
    @classmethod
    def _center(cls, v, info: ValidationInfo):
        d = info.data.get("d")
        if v is not None and d is not None and len(v) != d:
            raise ValueError(f"expected {d} coordinates")
        return v


class SimModel(_Strict):
    mode: Literal["free", "mild", "soft", "hard"] = "soft"
    beta: float = Field(1.0, ge=0)
    beta_inside: float = Field(0.0, ge=0)
    t_end: float = Field(1.0, ge=0)
    dt: float = Field(1e-3, gt=0)
    max_particles: int = Field(2_000_000, ge=1)
    seeds: list[int] = Field(default_factory=lambda: [1, 2, 3], min_length=3, max_length=3)
    k: Optional[float] = Field(None, gt=0)
    start: Optional[list[float]] = None
    strict_rates: bool = True

    @field_validator("beta_inside")
    @classmethod
    def _mild(cls, v, info: ValidationInfo):
        beta = info.data.get("beta")
        if info.data.get("mode") == "mild" and beta is not None and not v < beta:
            raise ValueError(f"mild mode needs beta_inside < beta ({beta:g})")
        return v

    @field_validator("dt")
    @classmethod
    def _dt(cls, v, info: ValidationInfo):
        beta = info.data.get("beta")
        if beta is not None and v * beta > 0.1:
            raise ValueError("dt * beta must be <= 0.1")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if any(s < 0 or s >= 2**64 for s in v):
            raise ValueError("seeds must lie in [0, 2**64)")
        return v

    @model_validator(mode="after")
    def _resolve_k(self):
        if self.k is None:
            self.k = math.sqrt(3.0 * self.beta) if self.beta > 0 else 1.0
        return self


class EstimatorModel(_Strict):
    t_grid: list[float] = Field(default_factory=list)
    n_paths: int = Field(10_000, ge=1)
    n_replicates: int = Field(1_000, ge=1)
    n_env_seeds: int = Field(1, ge=1)
    target_survivors: Optional[int] = Field(None, ge=1)
    max_replicates: int = Field(100_000, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    ell: float = Field(10.0, gt=0)
    radius: float = Field(1.0, gt=0)
    slack: float = 0.0
    max_centers: int = Field(10_000, ge=1)
    x: Optional[list[float]] = None
    y: Optional[list[float]] = None
    kappa: Optional[float] = Field(None, gt=0)
    radius_exponent: float = Field(0.4, gt=0)
    track_hits: bool = False
    sigmas: float = Field(3.0, gt=0)

    @field_validator("t_grid")
    @classmethod
    def _grid(cls, v):
        if any(not (t >= 0 and math.isfinite(t)) for t in v):
            raise ValueError("times must be finite and >= 0")
        return v


class ExperimentConfig(_Strict):
    experiment: Literal[EXPERIMENTS]  # type: ignore[valid-type]
    environment: EnvironmentModel = Field(default_factory=EnvironmentModel)
    sim: SimModel = Field(default_factory=SimModel)
    estimator: EstimatorModel = Field(default_factory=EstimatorModel)
    output_dir: str = "runs"

    @model_validator(mode="after")
    def _cross(self):
        if self.sim.start is not None and len(self.sim.start) != self.environment.d:
            raise ConfigFault("$.sim.start", f"expected {self.environment.d} coordinates")
        for name in ("x", "y"):
            v = getattr(self.estimator, name)
            if v is not None and len(v) != self.environment.d:
                raise ConfigFault(f"$.estimator.{name}", f"expected {self.environment.d} coordinates")
        if self.estimator.kappa is None:
            kappa = math.sqrt(self.sim.beta / 2.0)
            # left unset when beta is 0 or so small that beta / 2 underflows
            self.estimator.kappa = kappa if kappa > 0 else None
        return self

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"

    def params_hash(self) -> str:
        """Short digest of everything that affects results (output location excluded)."""
        body = self.model_dump(mode="json")
        body.pop("output_dir", None)
        blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _json_path(loc) -> str:
    out = "$"
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += f".{part}"
    return out


def parse_config(text: str | bytes) -> ExperimentConfig:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigFault("$", f"not UTF-8 ({exc.reason})") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigFault("$", f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigFault("$", "top level must be an object")
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        ctx = err.get("ctx", {}).get("error")
        if isinstance(ctx, ConfigFault):
            raise ctx from None
        msg = err["msg"].removeprefix("Value error, ")
        raise ConfigFault(_json_path(err["loc"]), msg) from None
    except ConfigFault:
        raise
