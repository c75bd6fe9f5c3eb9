#!/usr/bin/env python3
"""
Twin-girder multi-span Euler-Bernoulli beam model.

Each girder is a chain of 2-node beam elements with DOFs (w, theta) per node,
w positive downward. Supports are pinned (w = 0) on both girders; rotational
springs sit at the first supports, vertical springs couple the girders at
regular stations. Output is bottom-fibre bending stress in MPa.
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from twinid_kernels import SpaceTimeGrid
from twinid_shared import (DEFAULT_AXLE_LOADS, DEFAULT_AXLE_SPACINGS, DEFAULT_C_BOTTOM,
                           DEFAULT_COUPLING_SPACING, DEFAULT_DECK_WIDTH, DEFAULT_E,
                           DEFAULT_GIRDER_SPACING, DEFAULT_I, DEFAULT_MAX_ELEMENT_LENGTH,
                           DEFAULT_SPANS, GeometryError)

KN = 1e3     # kN -> N
MPA = 1e-6   # Pa -> MPa
N_KR = 4


class Girder(int, Enum):
    LEFT = 0
    RIGHT = 1


class Lane(str, Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class SectionProperties:
    E: float = DEFAULT_E              # [Pa]
    I: float = DEFAULT_I              # [m^4]
    c_bottom: float = DEFAULT_C_BOTTOM  # neutral axis to bottom flange [m]


@dataclass(frozen=True)
class BeamGeometry:
    span_lengths: Tuple[float, ...] = DEFAULT_SPANS
    section: SectionProperties = field(default_factory=SectionProperties)
    section_segments: Tuple[Tuple[float, float, SectionProperties], ...] = ()
    max_element_length: float = DEFAULT_MAX_ELEMENT_LENGTH
    coupling_spacing: float = DEFAULT_COUPLING_SPACING
    spring_supports: Optional[Tuple[int, ...]] = None
    girder_spacing: float = DEFAULT_GIRDER_SPACING
    deck_width: float = DEFAULT_DECK_WIDTH

    def __post_init__(self):
        spans = tuple(float(s) for s in self.span_lengths)
        if not spans or any(not s > 0.0 for s in spans):
            raise GeometryError("span lengths must be positive")
        if not self.max_element_length > 0.0:
            raise GeometryError("max_element_length must be positive")
        if not self.girder_spacing > 0.0 or self.deck_width < self.girder_spacing:
            raise GeometryError("deck must be at least as wide as the girder spacing")
        object.__setattr__(self, "span_lengths", spans)
        if self.spring_supports is None:
            object.__setattr__(self, "spring_supports", tuple(range(min(N_KR, len(spans) + 1))))
        elif any(s < 0 or s > len(spans) for s in self.spring_supports):
            raise GeometryError(f"spring support index out of range 0..{len(spans)}")
        elif len(self.spring_supports) > N_KR:
            raise GeometryError(f"at most {N_KR} rotational springs are parametrized")
        L = sum(spans)
        for x0, x1, sec in self.section_segments:
            if not 0.0 <= x0 < x1 <= L:
                raise GeometryError(f"section segment [{x0}, {x1}] must be a nonempty interval inside [0, {L}]")
            if min(sec.E, sec.I, sec.c_bottom) <= 0.0:
                raise GeometryError("segment E, I and c_bottom must be positive")

    @property
    def support_positions(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.span_lengths)])

    @property
    def total_length(self) -> float:
        return float(sum(self.span_lengths))

    def span_bounds(self, span: int) -> Tuple[float, float]:
        s = self.support_positions
        return float(s[span]), float(s[span + 1])


@dataclass(frozen=True)
class ThetaS:
    log10_Kr: Tuple[float, ...] = (7.0, 7.0, 7.0, 7.0)   # kNm/rad
    log10_Kv: float = 4.0                                # kN/m

    NAMES = tuple(f"log10_Kr_{i + 1}" for i in range(N_KR)) + ("log10_Kv",)

    def __post_init__(self):
        object.__setattr__(self, "log10_Kr", tuple(float(v) for v in self.log10_Kr))
        if len(self.log10_Kr) != N_KR:
            raise GeometryError(f"expected {N_KR} rotational spring values, got {len(self.log10_Kr)}")

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.NAMES, self.log10_Kr + (float(self.log10_Kv),)))

    @classmethod
    def from_dict(cls, values: Dict[str, float], base: "ThetaS" = None) -> "ThetaS":
        merged = (base or cls()).as_dict()
        merged.update({k: float(v) for k, v in values.items() if k in cls.NAMES})
        return cls(tuple(merged[n] for n in cls.NAMES[:N_KR]), merged["log10_Kv"])


@dataclass(frozen=True)
class TruckLoad:
    axle_offsets: Tuple[float, ...] = tuple(np.concatenate([[0.0], np.cumsum(DEFAULT_AXLE_SPACINGS)]))
    axle_loads: Tuple[float, ...] = DEFAULT_AXLE_LOADS   # [kN]
    lane: Lane = Lane.RIGHT
    z: float = DEFAULT_GIRDER_SPACING / 2.0              # transverse position [m]

    def __post_init__(self):
        object.__setattr__(self, "axle_offsets", tuple(float(v) for v in self.axle_offsets))
        object.__setattr__(self, "axle_loads", tuple(float(v) for v in self.axle_loads))
        object.__setattr__(self, "lane", Lane(self.lane))
        if len(self.axle_offsets) != len(self.axle_loads):
            raise GeometryError("axle_offsets and axle_loads must have equal length")
        if any(p <= 0.0 for p in self.axle_loads):
            raise GeometryError("axle loads must be positive")
        if any(b < a for a, b in zip(self.axle_offsets, self.axle_offsets[1:])):
            raise GeometryError("axle offsets must be nondecreasing")

    def center_of_mass(self) -> float:
        """Distance of the load centroid behind the front axle."""
        w = np.asarray(self.axle_loads)
        return float(np.dot(w, self.axle_offsets) / w.sum())

    def scaled(self, factor: float) -> "TruckLoad":
        return TruckLoad(self.axle_offsets, tuple(factor * p for p in self.axle_loads), self.lane, self.z)


def default_trucks(geometry: BeamGeometry = None) -> Tuple[TruckLoad, TruckLoad]:
    """Controlled load test truck driven over each girder in turn."""
    half = (geometry or BeamGeometry()).girder_spacing / 2.0
    return TruckLoad(lane=Lane.LEFT, z=-half), TruckLoad(lane=Lane.RIGHT, z=half)


# --- Mesh ---

@dataclass(frozen=True)
class BeamMesh:
    node_x: np.ndarray
    support_nodes: np.ndarray
    sections: Tuple[SectionProperties, ...]

    @property
    def n_nodes(self) -> int:
        return self.node_x.size

    @property
    def n_elements(self) -> int:
        return self.node_x.size - 1

    def nearest_node(self, x: float) -> int:
        return int(np.argmin(np.abs(self.node_x - x)))

    def dof(self, girder: int, node: int, rotation: bool = False) -> int:
        return 2 * (girder * self.n_nodes + node) + int(rotation)


def build_mesh(geometry: BeamGeometry, extra_nodes: Sequence[float] = ()) -> BeamMesh:
    """Nodes at supports, section segment ends and any extra positions (e.g. sensors), plus an even fill."""
    L = geometry.total_length
    breaks = set(np.round(geometry.support_positions, 9))
    for x0, x1, _ in geometry.section_segments:
        breaks.update((round(float(x0), 9), round(float(x1), 9)))
    for x in extra_nodes:
        if not 0.0 <= x <= L:
            raise GeometryError(f"position {x} m lies outside the bridge [0, {L}]")
        breaks.add(round(float(x), 9))
    breaks = np.array(sorted(breaks))
    pieces = [breaks[:1]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        n_el = max(1, int(math.ceil((b - a) / geometry.max_element_length - 1e-9)))
        pieces.append(np.linspace(a, b, n_el + 1)[1:])
    node_x = np.concatenate(pieces)
    support_nodes = np.searchsorted(node_x, np.round(geometry.support_positions, 9))

    mids = 0.5 * (node_x[:-1] + node_x[1:])
    sections = []
    for xm in mids:
        sec = geometry.section
        for x0, x1, seg in geometry.section_segments:
            if x0 <= xm < x1:
                sec = seg
        sections.append(sec)
    return BeamMesh(node_x, support_nodes, tuple(sections))


def element_stiffness(E: float, I: float, Le: float) -> np.ndarray:
    c = E * I / Le ** 3
    return c * np.array([
        [12.0, 6.0 * Le, -12.0, 6.0 * Le],
        [6.0 * Le, 4.0 * Le ** 2, -6.0 * Le, 2.0 * Le ** 2],
        [-12.0, -6.0 * Le, 12.0, -6.0 * Le],
        [6.0 * Le, 2.0 * Le ** 2, -6.0 * Le, 4.0 * Le ** 2],
    ])


def coupling_nodes(geometry: BeamGeometry, mesh: BeamMesh) -> np.ndarray:
    """Spring stations every coupling_spacing, centred on the bridge."""
    L = geometry.total_length
    n = int(math.floor(L / geometry.coupling_spacing + 1e-9))
    start = 0.5 * (L - n * geometry.coupling_spacing)
    stations = start + geometry.coupling_spacing * np.arange(n + 1)
    return np.unique([mesh.nearest_node(x) for x in stations])


# --- Assembly and static solve ---

@dataclass
class StiffnessSystem:
    K: np.ndarray           # full (unconstrained) stiffness, both girders
    free: np.ndarray        # unconstrained DOF indices
    mesh: BeamMesh
    factor: tuple           # scipy cho_factor of K[free][:, free]

    @property
    def n_dof(self) -> int:
        return self.K.shape[0]

    def solve(self, F: np.ndarray) -> np.ndarray:
        """Displacements for load vector(s) F of shape (n_dof,) or (n_dof, k)."""
        F = np.asarray(F, dtype=float)
        u = np.zeros_like(F)
        u[self.free] = scipy.linalg.cho_solve(self.factor, F[self.free])
        return u


def assemble(geometry: BeamGeometry, theta_s: ThetaS, mesh: BeamMesh = None) -> StiffnessSystem:
    mesh = mesh or build_mesh(geometry)
    n_dof = 4 * mesh.n_nodes
    K = np.zeros((n_dof, n_dof))
    for girder in Girder:
        for e in range(mesh.n_elements):
            sec = mesh.sections[e]
            ke = element_stiffness(sec.E, sec.I, mesh.node_x[e + 1] - mesh.node_x[e])
            idx = [mesh.dof(girder, e), mesh.dof(girder, e, True),
                   mesh.dof(girder, e + 1), mesh.dof(girder, e + 1, True)]
            K[np.ix_(idx, idx)] += ke

        for kr, support in zip(theta_s.log10_Kr, geometry.spring_supports):
            r = mesh.dof(girder, mesh.support_nodes[support], True)
            K[r, r] += 10.0 ** kr * KN

    kv = 10.0 ** theta_s.log10_Kv * KN
    for node in coupling_nodes(geometry, mesh):
        a, b = mesh.dof(Girder.LEFT, node), mesh.dof(Girder.RIGHT, node)
        K[a, a] += kv
        K[b, b] += kv
        K[a, b] -= kv
        K[b, a] -= kv

    fixed = [mesh.dof(g, n) for g in Girder for n in mesh.support_nodes]
    free = np.setdiff1d(np.arange(n_dof), fixed)
    try:
        factor = scipy.linalg.cho_factor(K[np.ix_(free, free)], lower=True)
    except np.linalg.LinAlgError:
        raise GeometryError("constrained stiffness matrix is singular")
    return StiffnessSystem(K, free, mesh, factor)


# --- Loads ---

def lateral_load_function(z: float, geometry: BeamGeometry = None) -> Tuple[float, float]:
    """Linear split of a lane load between (left, right) girders.

    A load over a girder goes entirely to it; a load at the deck centre is
    shared equally.
    """
    geometry = geometry or BeamGeometry()
    if abs(z) > geometry.deck_width / 2.0 + 1e-12:
        raise GeometryError(f"transverse position z={z} m is outside the deck (width {geometry.deck_width} m)")
    right = 0.5 + z / geometry.girder_spacing
    return 1.0 - right, right


def load_matrix(geometry: BeamGeometry, mesh: BeamMesh, truck: TruckLoad,
                load_positions: Sequence[float]) -> np.ndarray:
    """Nodal force columns (N), one per front-axle position; axles off the bridge are ignored."""
    positions = np.asarray(load_positions, dtype=float)
    factors = lateral_load_function(truck.z, geometry)
    F = np.zeros((4 * mesh.n_nodes, positions.size))
    L = geometry.total_length
    for col, p in enumerate(positions):
        for offset, load in zip(truck.axle_offsets, truck.axle_loads):
            x = p - offset
            if x < 0.0 or x > L:
                continue
            node = mesh.nearest_node(x)
            for girder, f in zip(Girder, factors):
                if f != 0.0:
                    F[mesh.dof(girder, node), col] += load * KN * f
    return F


def bending_stress(mesh: BeamMesh, u: np.ndarray, girder: int, x: float) -> np.ndarray:
    """Bottom-fibre stress (MPa) at x from Hermite curvature: sigma = -E c w''."""
    e = int(np.clip(np.searchsorted(mesh.node_x, x, side="right") - 1, 0, mesh.n_elements - 1))
    x0, x1 = mesh.node_x[e], mesh.node_x[e + 1]
    Le = x1 - x0
    xi = (x - x0) / Le
    B = np.array([(-6.0 + 12.0 * xi) / Le ** 2, (-4.0 + 6.0 * xi) / Le,
                  (6.0 - 12.0 * xi) / Le ** 2, (-2.0 + 6.0 * xi) / Le])
    idx = [mesh.dof(girder, e), mesh.dof(girder, e, True), mesh.dof(girder, e + 1), mesh.dof(girder, e + 1, True)]
    sec = mesh.sections[e]
    curvature = B @ u[idx]
    return -sec.E * sec.c_bottom * curvature * MPA


# --- Model evaluation ---

class BeamModel:
    """Caches the mesh for a fixed geometry and sensor set; evaluation is pure in theta_s."""

    def __init__(self, geometry: BeamGeometry, sensor_x: Sequence[float] = (), girder: Girder = Girder.RIGHT):
        self.geometry = geometry
        self.sensor_x = np.asarray(sensor_x, dtype=float)
        self.girder = Girder(girder)
        self.mesh = build_mesh(geometry, extra_nodes=self.sensor_x)

    def stress_matrix(self, theta_s: ThetaS, truck: TruckLoad, load_positions: Sequence[float],
                      sensor_x: Sequence[float] = None, system: StiffnessSystem = None) -> np.ndarray:
        """Stress (MPa) of shape (n_positions, n_sensors)."""
        sensors = self.sensor_x if sensor_x is None else np.asarray(sensor_x, dtype=float)
        L = self.geometry.total_length
        if np.any(sensors < 0.0) or np.any(sensors > L):
            raise GeometryError(f"sensor positions must lie inside the bridge [0, {L}]")
        system = system or assemble(self.geometry, theta_s, self.mesh)
        u = system.solve(load_matrix(self.geometry, self.mesh, truck, load_positions))
        out = np.empty((u.shape[1], sensors.size))
        for j, x in enumerate(sensors):
            out[:, j] = bending_stress(self.mesh, u, self.girder, x)
        return out

    def response(self, theta_s: ThetaS, trucks: Sequence[TruckLoad], grid: SpaceTimeGrid) -> np.ndarray:
        """Lane-major concatenation of time-major influence-line blocks, length n_lanes * N."""
        system = assemble(self.geometry, theta_s, self.mesh)
        blocks = [self.stress_matrix(theta_s, truck, grid.t_coords, grid.x_coords, system).ravel()
                  for truck in trucks]
        return np.concatenate(blocks)


def influence_line(geometry: BeamGeometry, theta_s: ThetaS, truck: TruckLoad, sensor_x: float,
                   load_positions: Sequence[float], girder: Girder = Girder.RIGHT) -> np.ndarray:
    positions = np.asarray(load_positions, dtype=float)
    if positions.size > 1 and np.any(np.diff(positions) <= 0.0):
        raise GeometryError("load positions must be increasing")
    model = BeamModel(geometry, [sensor_x], girder)
    return model.stress_matrix(theta_s, truck, positions)[:, 0]


def model_response_grid(geometry: BeamGeometry, theta_s: ThetaS, trucks: Sequence[TruckLoad],
                        grid: SpaceTimeGrid, girder: Girder = Girder.RIGHT) -> np.ndarray:
    return BeamModel(geometry, grid.x_coords, girder).response(theta_s, trucks, grid)
