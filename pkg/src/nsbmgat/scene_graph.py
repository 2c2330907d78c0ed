"""Fixed-topology interaction graph around a subject vehicle.

Node slots are ``[subject, lead_left, lead_same, lead_right, lag_left,
lag_same, lag_right]``. The 11 edge slots are the six subject-neighbor edges
plus five chain edges linking neighbors; each edge is directed from the lower
slot index to the higher one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .trajectory import ROLES, NeighborSet, VehicleState, identify_neighbors

N_NODES = 7
N_EDGES = 11
D_NODE = 6
D_EDGE = 5
NODE_SLOTS = ("subject",) + ROLES

EDGE_INDEX = np.array([
    (0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6),
    (1, 2), (2, 3),    # lead_left - lead_same - lead_right
    (4, 5), (5, 6),    # lag_left - lag_same - lag_right
    (2, 5),            # lead_same - lag_same
])

# +1 where the node is the tail (low index) of an edge, -1 where it is the head
INCIDENCE = np.zeros((N_NODES, N_EDGES))
INCIDENCE[EDGE_INDEX[:, 0], np.arange(N_EDGES)] = 1.0
INCIDENCE[EDGE_INDEX[:, 1], np.arange(N_EDGES)] = -1.0


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2 * math.pi)
    if w <= 0:
        w += 2 * math.pi
    return w - math.pi


@dataclass(frozen=True)
class SceneGraph:
    nodes: np.ndarray       # (7, 6) speed, accel, heading, lane, x, y (x, y relative to subject)
    node_mask: np.ndarray   # (7,) bool
    edges: np.ndarray       # (11, 5) dv, da, dy, dx, dheading
    edge_mask: np.ndarray   # (11,) bool
    sample_id: str | None = None
    t: float | None = None

    @property
    def n_edges(self) -> int:
        return int(self.edge_mask.sum())

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "t": self.t,
            "nodes": np.round(self.nodes, 9).tolist(),
            "node_mask": self.node_mask.astype(int).tolist(),
            "edges": np.round(self.edges, 9).tolist(),
            "edge_mask": self.edge_mask.astype(int).tolist(),
            "edge_index": EDGE_INDEX.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SceneGraph:
        return cls(np.asarray(d["nodes"], dtype=float), np.asarray(d["node_mask"], dtype=bool),
                   np.asarray(d["edges"], dtype=float), np.asarray(d["edge_mask"], dtype=bool),
                   d.get("sample_id"), d.get("t"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def node_features(v: VehicleState, ref: VehicleState) -> np.ndarray:
    return np.array([v.speed, v.accel, v.heading, float(v.lane), v.x - ref.x, v.y - ref.y])


def edge_features(tail: VehicleState, head: VehicleState) -> np.ndarray:
    """Head-minus-tail relative kinematics; antisymmetric under endpoint swap."""
    return np.array([head.speed - tail.speed, head.accel - tail.accel, head.y - tail.y,
                     head.x - tail.x, wrap_angle(head.heading - tail.heading)])


def build_graph(frame, subject_id, neighbors: NeighborSet | None = None, sample_id=None,
                t=None, n_lanes: int | None = None) -> SceneGraph:
    by_id = {v.vehicle_id: v for v in frame}
    if subject_id not in by_id:
        raise ValueError("subject not in frame")
    if neighbors is None:
        neighbors = identify_neighbors(frame, subject_id, n_lanes)
    subj = by_id[subject_id]
    slot_veh: list[VehicleState | None] = [subj] + [
        by_id.get(neighbors[r]) if r in neighbors else None for r in ROLES]
    nodes = np.zeros((N_NODES, D_NODE))
    node_mask = np.zeros(N_NODES, dtype=bool)
    for i, v in enumerate(slot_veh):
        if v is not None:
            nodes[i] = node_features(v, subj)
            node_mask[i] = True
    edges = np.zeros((N_EDGES, D_EDGE))
    edge_mask = node_mask[EDGE_INDEX[:, 0]] & node_mask[EDGE_INDEX[:, 1]]
    for k, (a, b) in enumerate(EDGE_INDEX):
        if edge_mask[k]:
            edges[k] = edge_features(slot_veh[a], slot_veh[b])
    if t is None:
        t = subj.t
    return SceneGraph(nodes, node_mask, edges, edge_mask, sample_id, t)


@dataclass
class GraphBatch:
    nodes: np.ndarray       # (B, 7, 6)
    node_mask: np.ndarray   # (B, 7)
    edges: np.ndarray       # (B, 11, 5)
    edge_mask: np.ndarray   # (B, 11)

    def __len__(self) -> int:
        return self.nodes.shape[0]

    def take(self, idx) -> GraphBatch:
        return GraphBatch(self.nodes[idx], self.node_mask[idx], self.edges[idx],
                          self.edge_mask[idx])


def stack_graphs(graphs) -> GraphBatch:
    graphs = list(graphs)
    if not graphs:
        return GraphBatch(np.zeros((0, N_NODES, D_NODE)), np.zeros((0, N_NODES), dtype=bool),
                          np.zeros((0, N_EDGES, D_EDGE)), np.zeros((0, N_EDGES), dtype=bool))
    return GraphBatch(np.stack([g.nodes for g in graphs]), np.stack([g.node_mask for g in graphs]),
                      np.stack([g.edges for g in graphs]), np.stack([g.edge_mask for g in graphs]))


def as_batch(g) -> GraphBatch:
    if isinstance(g, GraphBatch):
        return g
    if isinstance(g, SceneGraph):
        return stack_graphs([g])
    return stack_graphs(g)
