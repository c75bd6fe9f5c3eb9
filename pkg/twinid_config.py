#!/usr/bin/env python3
"""
Run configuration schema, dataset CSV format, and atomic output writers.
"""
import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from twinid_beam import BeamGeometry, Lane, SectionProperties, ThetaS, TruckLoad, default_trucks
from twinid_kernels import SpaceTimeGrid
from twinid_likelihood import MODEL_CATALOG, THETA_C_NAMES
from twinid_shared import (CONFIG_SCHEMA_VERSION, DEFAULT_C_BOTTOM, DEFAULT_COUPLING_SPACING,
                           DEFAULT_DECK_WIDTH, DEFAULT_E, DEFAULT_GIRDER_SPACING, DEFAULT_I,
                           DEFAULT_MAX_ELEMENT_LENGTH, DEFAULT_SPANS, N_DENSE_MAX, ConfigError, GridError)

DATASET_COLUMNS = ("sensor_x", "t", "lane", "y_obs")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SectionSegment(_Strict):
    x0: float = Field(ge=0.0)
    x1: float
    E: float = Field(DEFAULT_E, gt=0.0)
    I: float = Field(DEFAULT_I, gt=0.0)
    c_bottom: float = Field(DEFAULT_C_BOTTOM, gt=0.0)

    @model_validator(mode="after")
    def nonempty(self) -> "SectionSegment":
        if not self.x1 > self.x0:
            raise ValueError(f"segment end x1={self.x1} must exceed x0={self.x0}")
        return self

    def build(self) -> Tuple[float, float, SectionProperties]:
        return self.x0, self.x1, SectionProperties(self.E, self.I, self.c_bottom)


class GeometryConfig(_Strict):
    span_lengths: List[float] = list(DEFAULT_SPANS)
    E: float = DEFAULT_E
    I: float = DEFAULT_I
    c_bottom: float = DEFAULT_C_BOTTOM
    section_segments: List[SectionSegment] = []
    max_element_length: float = DEFAULT_MAX_ELEMENT_LENGTH
    coupling_spacing: float = DEFAULT_COUPLING_SPACING
    spring_supports: Optional[List[int]] = None
    girder_spacing: float = DEFAULT_GIRDER_SPACING
    deck_width: float = DEFAULT_DECK_WIDTH

    def build(self) -> BeamGeometry:
        return BeamGeometry(
            span_lengths=tuple(self.span_lengths),
            section=SectionProperties(self.E, self.I, self.c_bottom),
            section_segments=tuple(seg.build() for seg in self.section_segments),
            max_element_length=self.max_element_length,
            coupling_spacing=self.coupling_spacing,
            spring_supports=None if self.spring_supports is None else tuple(self.spring_supports),
            girder_spacing=self.girder_spacing,
            deck_width=self.deck_width,
        )


class TruckConfig(_Strict):
    lane: Lane
    z: Optional[float] = None
    axle_offsets: Optional[List[float]] = None
    axle_loads: Optional[List[float]] = None

    def build(self, geometry: BeamGeometry) -> TruckLoad:
        left, right = default_trucks(geometry)
        base = left if self.lane is Lane.LEFT else right
        return TruckLoad(
            axle_offsets=base.axle_offsets if self.axle_offsets is None else tuple(self.axle_offsets),
            axle_loads=base.axle_loads if self.axle_loads is None else tuple(self.axle_loads),
            lane=self.lane,
            z=base.z if self.z is None else self.z,
        )


class GridConfig(_Strict):
    n_x: int = Field(5, ge=1)
    n_t: int = Field(5, ge=1)
    sensor_spans: Optional[List[int]] = None
    x_coords: Optional[List[float]] = None
    t_coords: Optional[List[float]] = None


class ModelEntry(_Strict):
    shorthand: str
    reference: bool = False
    reference_sensors: Optional[List[int]] = None
    reference_times: Optional[List[int]] = None
    theta: Dict[str, float] = {}

    @field_validator("shorthand")
    @classmethod
    def known_shorthand(cls, v: str) -> str:
        if v.upper() not in MODEL_CATALOG:
            raise ValueError(f"unknown model '{v}' (known: {', '.join(MODEL_CATALOG)})")
        return v.upper()

    @field_validator("theta")
    @classmethod
    def known_theta(cls, v: Dict[str, float]) -> Dict[str, float]:
        unknown = sorted(set(v) - set(THETA_C_NAMES))
        if unknown:
            raise ValueError(f"unknown probabilistic parameters {unknown}")
        return v


class SamplerSettings(_Strict):
    n_live: int = Field(500, ge=2)
    dlogz: float = Field(0.01, gt=0.0)
    walk_steps: int = Field(25, ge=1)
    max_iter: int = Field(200_000, ge=1)


class SyntheticData(_Strict):
    model: ModelEntry = ModelEntry(shorthand="EXP-A", theta={"sigma_model": 1.0, "sigma_meas": 0.2,
                                                             "l_corr_t": 20.0, "l_corr_x": 30.0})
    seed: Optional[int] = None


class DataConfig(_Strict):
    path: Optional[str] = None
    synthetic: SyntheticData = SyntheticData()


class StudySettings(_Strict):
    grid_sizes: List[int] = [1, 2, 3, 5, 8]
    ground_truth: str = "EXP-A"
    theta_gt: Dict[str, float] = {"C_v": 0.1, "sigma_model": 1.0, "sigma_meas": 0.2,
                                  "l_corr_t": 20.0, "l_corr_x": 30.0}
    pool: List[str] = ["IID-A", "EXP-A", "IID-M", "EXP-M"]
    replicates: int = Field(10, ge=1)
    n_live: int = Field(100, ge=2)
    max_failures: int = Field(0, ge=0)


class BenchSettings(_Strict):
    sizes: List[int] = [64, 256, 1024, 4096]
    n_x: int = Field(4, ge=1)
    models: List[str] = ["EXP-M", "EXP-A"]
    theta: Dict[str, float] = {"C_v": 0.1, "sigma_model": 1.0, "sigma_meas": 0.2,
                               "l_corr_t": 20.0, "l_corr_x": 30.0}
    repeats: int = Field(3, ge=1)


class SweepSettings(_Strict):
    parameter: str = "log10_Kr_1"
    n_points: int = Field(13, ge=1)
    lower: Optional[float] = None
    upper: Optional[float] = None
    n_positions: int = Field(200, ge=1)

    @field_validator("parameter")
    @classmethod
    def structural_parameter(cls, v: str) -> str:
        if v not in ThetaS.NAMES:
            raise ValueError(f"sweep parameter must be one of {list(ThetaS.NAMES)}")
        return v


class PredictSettings(_Strict):
    archive: Optional[str] = None
    n_draws: int = Field(200, ge=1)


class RunConfig(_Strict):
    schema_version: int = CONFIG_SCHEMA_VERSION
    geometry: GeometryConfig = GeometryConfig()
    trucks: Optional[List[TruckConfig]] = None
    grid: GridConfig = GridConfig()
    models: List[ModelEntry] = [ModelEntry(shorthand="EXP-A")]
    priors: Dict[str, Tuple[float, float]] = {}
    sampler: SamplerSettings = SamplerSettings()
    seed: int = 0
    workers: int = Field(1, ge=1)
    out_dir: str = "out"
    n_dense_max: int = Field(N_DENSE_MAX, ge=1)
    infer_structural: bool = False
    theta_s: Dict[str, float] = {}
    data: DataConfig = DataConfig()
    study: StudySettings = StudySettings()
    bench: BenchSettings = BenchSettings()
    sweep: SweepSettings = SweepSettings()
    predict: PredictSettings = PredictSettings()

    @field_validator("schema_version")
    @classmethod
    def supported_version(cls, v: int) -> int:
        if v != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v} (expected {CONFIG_SCHEMA_VERSION})")
        return v

    @field_validator("theta_s")
    @classmethod
    def known_theta_s(cls, v: Dict[str, float]) -> Dict[str, float]:
        unknown = sorted(set(v) - set(ThetaS.NAMES))
        if unknown:
            raise ValueError(f"unknown structural parameters {unknown}")
        return v

    @model_validator(mode="after")
    def nonempty_pool(self) -> "RunConfig":
        if not self.models:
            raise ValueError("models must list at least one shorthand")
        return self

    def build_geometry(self) -> BeamGeometry:
        return self.geometry.build()

    def build_trucks(self, geometry: BeamGeometry = None) -> Tuple[TruckLoad, ...]:
        geometry = geometry or self.build_geometry()
        if self.trucks is None:
            return default_trucks(geometry)
        return tuple(t.build(geometry) for t in self.trucks)

    def build_theta_s(self) -> ThetaS:
        return ThetaS.from_dict(self.theta_s)

    def digest(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()[:16]


def load_config(path) -> RunConfig:
    """Parse and validate a JSON run configuration (raises pydantic.ValidationError)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return RunConfig.model_validate_json(path.read_text(encoding="utf-8"))


def dump_config(config: RunConfig) -> str:
    return config.model_dump_json(indent=2)


# --- Dataset CSV ---

@dataclass
class Dataset:
    grid: SpaceTimeGrid
    lanes: Tuple[Lane, ...]
    y_obs: np.ndarray   # lane-major, time-major within a lane

    @property
    def n_lanes(self) -> int:
        return len(self.lanes)


def read_dataset(path) -> Dataset:
    """Load {sensor_x, t, lane, y_obs} rows; every lane must cover the full grid."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = set(DATASET_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"dataset is missing columns {sorted(missing)}")
        rows = [(float(r["sensor_x"]), float(r["t"]), Lane(r["lane"].strip().lower()), float(r["y_obs"]))
                for r in reader]
    if not rows:
        raise GridError("dataset is empty")

    x = np.unique([r[0] for r in rows])
    t = np.unique([r[1] for r in rows])
    lanes = tuple(lane for lane in Lane if any(r[2] is lane for r in rows))
    grid = SpaceTimeGrid(x, t)
    y = np.full((len(lanes), grid.n_t, grid.n_x), np.nan)
    for xi, ti, lane, value in rows:
        cell = (lanes.index(lane), int(np.searchsorted(t, ti)), int(np.searchsorted(x, xi)))
        if not np.isnan(y[cell]):
            raise GridError(f"duplicate observation at sensor_x={xi}, t={ti}, lane={lane.value}")
        y[cell] = value
    if np.isnan(y).any():
        raise GridError("dataset does not cover the full sensor x load-position grid for every lane")
    return Dataset(grid, lanes, y.ravel())


def dataset_rows(dataset: Dataset) -> List[List]:
    y = dataset.y_obs.reshape(dataset.n_lanes, dataset.grid.n_t, dataset.grid.n_x)
    rows = []
    for li, lane in enumerate(dataset.lanes):
        for k, t in enumerate(dataset.grid.t_coords):
            for j, x in enumerate(dataset.grid.x_coords):
                rows.append([x, t, lane.value, y[li, k, j]])
    return rows


def write_dataset(path, dataset: Dataset) -> Path:
    return write_csv_atomic(path, DATASET_COLUMNS, dataset_rows(dataset))


# --- Atomic writers ---

def _format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _write_atomic(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_csv_atomic(path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_format_cell(v) for v in row])
    return _write_atomic(path, buf.getvalue())


def write_dict_rows(path, rows: Sequence[Dict]) -> Path:
    header = list(rows[0].keys()) if rows else []
    return write_csv_atomic(path, header, [[r[h] for h in header] for r in rows])


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_json_atomic(path, data) -> Path:
    return _write_atomic(path, json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def read_json(path) -> Dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))
