"""
Experiment configuration files: which pencil to solve, how many eigenpairs, and
every solver setting.
"""

from __future__ import annotations

import os
from typing import Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_core import PydanticCustomError
from yaml import YAMLError

from psdid.exceptions import ConfigError
from psdid.linalg import DENSE_LIMIT, DROPTOL, Pencil, SparseMatrix
from psdid.logger import logger
from psdid.preconditioner import PreconditionerSpec
from psdid.problems import GridIndexMap, SlitRectangleSpec, build_slit_laplacian, mm_read
from psdid.shifts import ShiftStrategy
from psdid.solver import BlockSizePolicy, RunConfig, StopCriterion

SCHEMA_VERSION = 1


class MatrixMarketSource(BaseModel):
    """
    Paths of the Matrix Market files of H and, optionally, S. S is the identity
    when omitted.
    """

    model_config = ConfigDict(extra="forbid")

    H: str
    S: Optional[str] = None


class ProblemSource(BaseModel):
    model_config = ConfigDict(extra="forbid")

    generator: Optional[SlitRectangleSpec] = None
    matrix_market: Optional[MatrixMarketSource] = None

    @model_validator(mode="after")
    def exactly_one_source(self) -> ProblemSource:
        if (self.generator is None) == (self.matrix_market is None):
            raise PydanticCustomError(
                "problem_source", "Exactly one of generator and matrix_market is required"
            )
        return self


class BlockPolicy(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int = Field(default=1, ge=1)
    block_size: int = Field(default=1, ge=1)
    block_policy: BlockSizePolicy = BlockSizePolicy.FIXED_WINDOW


class StopSettings(BaseModel):
    """
    Stopping criterion of every run. accept_tol bounds the certificate radius of
    accepted pairs; left out, it equals tolerance for s_inv_residual and is not
    checked for relative_psi.
    """

    model_config = ConfigDict(extra="forbid")

    criterion: StopCriterion = StopCriterion.S_INV_RESIDUAL
    tolerance: float = Field(default=1e-8, gt=0.0)
    accept_tol: Optional[float] = Field(default=None, gt=0.0)


class ExperimentConfig(BaseModel):
    """
    Content of an experiment file. Relative Matrix Market paths are resolved
    against base_dir, the directory of the file.
    """

    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1]
    problem: ProblemSource
    targets: int = Field(default=1, ge=1)
    policy: BlockPolicy = Field(default_factory=BlockPolicy)
    shift: ShiftStrategy = Field(default_factory=ShiftStrategy)
    preconditioner: PreconditionerSpec = Field(default_factory=PreconditionerSpec)
    stop: StopSettings = Field(default_factory=StopSettings)
    max_steps: int = Field(default=1000, ge=0)
    seed: int = Field(default=0, ge=0)
    droptol: float = Field(default=DROPTOL, gt=0.0)
    output_dir: Optional[str] = None
    record_wall_time: bool = False
    record_quality: bool = False
    dense_limit: int = Field(default=DENSE_LIMIT, ge=1)
    base_dir: str = "."

    @model_validator(mode="after")
    def block_holds_wanted_pairs(self) -> ExperimentConfig:
        if self.policy.k > self.policy.block_size:
            raise PydanticCustomError(
                "block_too_small",
                "Block size {block_size} must be at least k = {k}",
                {"block_size": self.policy.block_size, "k": self.policy.k},
            )
        return self

    @staticmethod
    def from_file(file_path: str) -> ExperimentConfig:
        """
        Load and validate an experiment file. The file is JSON, or YAML.
        :param file_path: path of the file.
        :return: validated configuration.
        """
        try:
            with open(file_path, "r") as stream:
                raw = yaml.safe_load(stream)
        except FileNotFoundError:
            logger.error(f"No such file: {file_path}")
            raise ConfigError(file_path, "no such file")
        except YAMLError as e:
            logger.error(f"Invalid configuration file: {file_path}")
            raise ConfigError(file_path, f"invalid syntax: {e}")
        if not isinstance(raw, dict):
            raise ConfigError(file_path, "top level must be a mapping")
        raw.setdefault("base_dir", os.path.dirname(os.path.abspath(file_path)))
        try:
            return ExperimentConfig.model_validate(raw)
        except ValidationError as e:
            logger.error(f"Invalid configuration file {file_path}: {e}")
            raise ConfigError(file_path, str(e))

    def with_overrides(
        self, seed: Optional[int] = None, dense_limit: Optional[int] = None
    ) -> ExperimentConfig:
        update = {}
        if seed is not None:
            update["seed"] = seed
        if dense_limit is not None:
            update["dense_limit"] = dense_limit
        return ExperimentConfig.model_validate(self.model_dump() | update)

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def run_config(self) -> RunConfig:
        """
        Solver settings shared by every run of the experiment.
        """
        return RunConfig(
            k=self.policy.k,
            block_size=self.policy.block_size,
            shift=self.shift,
            preconditioner=self.preconditioner,
            stop_criterion=self.stop.criterion,
            tolerance=self.stop.tolerance,
            accept_tol=self.stop.accept_tol,
            max_steps=self.max_steps,
            block_policy=self.policy.block_policy,
            seed=self.seed,
            droptol=self.droptol,
            record_wall_time=self.record_wall_time,
        )

    def load_pencil(self) -> Tuple[Pencil, Optional[GridIndexMap]]:
        """
        Generate or read the pencil of the experiment.
        :return: pencil, and the node numbering of generated problems.
        """
        source = self.problem
        if source.generator is not None:
            return build_slit_laplacian(source.generator)
        H = mm_read(self.resolve(source.matrix_market.H))
        if source.matrix_market.S is None:
            S = SparseMatrix.identity(H.n)
        else:
            S = mm_read(self.resolve(source.matrix_market.S))
        try:
            return Pencil(H=H, S=S), None
        except ValidationError as e:
            raise ConfigError(source.matrix_market.H, str(e))
