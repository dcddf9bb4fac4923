"""
Run configuration.

Values come, lowest precedence first, from the compiled defaults, a flat KEY=value file,
PME_-prefixed environment variables (a `.env` in the working directory is loaded first)
and command-line flags. Every command writes the resolved values back in the same format.
"""

import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from dotenv import dotenv_values, find_dotenv, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from services.errors import ConfigError
from services.pme import PmeOptions
from services.projection import ProjectionOptions
from services.workers import resolve_threads

# Настройка логирования
logger = logging.getLogger(__name__)

ENV_PREFIX = "PME_"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class RunConfig(BaseModel):
    """Every tunable of the pipeline, validated at load time."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # data reduction
    n0: Optional[int] = Field(default=None, ge=1)
    alpha: float = Field(default=0.05, gt=0.0, lt=1.0)
    eps: float = Field(default=1e-4, gt=0.0)
    max_em_iter: int = Field(default=1000, ge=1)
    n_max: Optional[int] = Field(default=None, ge=2)
    constraint_tol: Optional[float] = Field(default=None, gt=0.0)

    # fitting loop
    eps_star: float = Field(default=1e-3, gt=0.0)
    max_outer_iter: int = Field(default=100, ge=1)
    best_ratio: float = Field(default=1.1, ge=1.0)
    lambda_exp_min: int = -15
    lambda_exp_max: int = 5
    isomap_k: Optional[int] = Field(default=None, ge=1)

    # projection
    grid0: Optional[int] = Field(default=None, ge=2)
    refine_tol: Optional[float] = Field(default=None, gt=0.0)
    tie_tol: float = Field(default=1e-6, gt=0.0)
    box_inflation: float = Field(default=0.25, ge=0.0)
    max_starts: int = Field(default=8, ge=1)

    # closed fits and interior
    n_pieces: int = Field(default=6, ge=3)
    glue_axis: Optional[int] = Field(default=None, ge=1, le=3)
    closed_lambda: Optional[float] = Field(default=None, ge=0.0)
    k_votes: int = Field(default=10, ge=1)

    # runs
    noise: Literal["sd", "variance"] = "sd"
    seed: int = Field(default=0, ge=0)
    threads: Optional[int] = Field(default=None, ge=1)
    log_level: str = "INFO"

    @field_validator("*", mode="before")
    @classmethod
    def _blank_is_none(cls, value):
        if isinstance(value, str) and value.strip() == "":
            return None
        return value

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, value: str) -> str:
        value = value.upper()
        if value not in LOG_LEVELS:
            raise ValueError(f"log level must be one of {', '.join(LOG_LEVELS)}")
        return value

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.lambda_exp_min > self.lambda_exp_max:
            raise ValueError("lambda_exp_min must not exceed lambda_exp_max")
        if self.n0 is not None and self.n_max is not None and self.n_max <= self.n0:
            raise ValueError("n_max must exceed n0")
        return self

    def lambda_grid(self) -> List[float]:
        return [math.exp(k) for k in range(self.lambda_exp_min, self.lambda_exp_max + 1)]

    def projection_options(self) -> ProjectionOptions:
        return ProjectionOptions(
            grid0=self.grid0, refine_tol=self.refine_tol, tie_tol=self.tie_tol,
            inflate=self.box_inflation, max_starts=self.max_starts,
        )

    def pme_options(self, d: int) -> PmeOptions:
        return PmeOptions(
            d=d, eps=self.eps, eps_star=self.eps_star, alpha=self.alpha, n0=self.n0, n_max=self.n_max,
            max_em_iter=self.max_em_iter, max_outer_iter=self.max_outer_iter, isomap_k=self.isomap_k,
            best_ratio=self.best_ratio, seed=self.seed, threads=self.resolved_threads(),
            constraint_tol=self.constraint_tol, projection=self.projection_options(),
        )

    def resolved_threads(self) -> int:
        return resolve_threads(self.threads)


def _normalize(source: Dict[str, Any], origin: str, strict: bool = True) -> Dict[str, Any]:
    known = set(RunConfig.model_fields)
    values = {}
    for key, value in source.items():
        name = key.strip().lower()
        if name not in known:
            if not strict:
                logger.debug(f"ignoring {key} from {origin}")
                continue
            raise ConfigError(f"unknown configuration key '{key}' in {origin}")
        values[name] = value
    return values


def load_run_config(path=None, overrides: Optional[Dict[str, Any]] = None, use_env: bool = True) -> RunConfig:
    """
    Resolves the run configuration.

    Args:
        path: Optional KEY=value file.
        overrides: Command-line values; None entries are ignored.
        use_env: Read PME_* environment variables (after loading `.env`).

    Returns:
        RunConfig: Validated configuration.

    Raises:
        ConfigError: On unknown keys or a missing config file.
        pydantic.ValidationError: On values violating a precondition.
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(_normalize(dotenv_values(path), str(path)))
    if use_env:
        load_dotenv(find_dotenv(usecwd=True))
        env = {k[len(ENV_PREFIX):]: v for k, v in os.environ.items() if k.startswith(ENV_PREFIX)}
        values.update(_normalize(env, "environment", strict=False))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    config = RunConfig(**values)
    logger.debug(f"resolved configuration: {config.model_dump()}")
    return config


def dump_run_config(config: RunConfig, path) -> Path:
    """Writes the configuration as KEY=value lines; unset optional values stay blank."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, value in config.model_dump().items():
        if value is None:
            text = ""
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{name.upper()}={text}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
