"""Simulated missing-data patterns: point noise, sensor faults, propagated faults.

All parameters are constant across nodes and time, so the generating process
is stationary. Faults start at any cell with a fixed per-step probability,
last a uniformly drawn number of steps, and may copy their exact interval to
graph neighbours hop by hop. Point noise is applied on top, uniformly
everywhere (also inside fault intervals; invalidity is idempotent).
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .graphs import WeightedDigraph
from .rng import stream_rng


@dataclass(frozen=True)
class MaskConfig:
    eta: float = 0.0
    p_f: float = 0.0
    s_min: int = 1
    s_max: int = 1
    p_g: tuple[float, ...] = ()
    seed: int = 0

    def __post_init__(self):
        for name, p in (("eta", self.eta), ("p_f", self.p_f), *((f"p_g[{i}]", v) for i, v in enumerate(self.p_g))):
            if not (0.0 <= p <= 1.0):
                raise ContractError(f"{name} must be a probability, got {p}")
        if not (1 <= self.s_min <= self.s_max):
            raise ContractError("fault duration bounds must satisfy 1 <= s_min <= s_max")


@dataclass(frozen=True)
class FaultInterval:
    node: int
    channel: int
    start: int
    length: int
    origin: str  # "direct" or "propagated"


@dataclass
class SimulatedMask:
    mask: np.ndarray  # (T, N, C), 1 = valid
    faults: list[FaultInterval] = field(default_factory=list)

    @property
    def missing_fraction(self) -> float:
        return float(1.0 - self.mask.mean())


def simulate_point(shape: tuple[int, int, int], eta: float, rng: np.random.Generator) -> SimulatedMask:
    """Each cell is independently invalid with probability eta."""
    if not (0.0 <= eta <= 1.0):
        raise ContractError("eta must be a probability")
    mask = (rng.random(shape) >= eta).astype(np.float64)
    return SimulatedMask(mask=mask, faults=[])


def directed_hop_rings(graph: WeightedDigraph, max_hop: int) -> list[list[np.ndarray]]:
    """rings[i][k] holds the nodes at successor-distance exactly k+1 from node i."""
    succ = [graph.csr.rows(i) for i in range(graph.n)]
    rings: list[list[np.ndarray]] = []
    for i in range(graph.n):
        seen = {i}
        frontier = [i]
        per_hop = []
        for _ in range(max_hop):
            nxt = []
            for u in frontier:
                for v in succ[u]:
                    v = int(v)
                    if v not in seen:
                        seen.add(v)
                        nxt.append(v)
            per_hop.append(np.array(sorted(nxt), dtype=np.int64))
            frontier = nxt
        rings.append(per_hop)
    return rings


def simulate_block(
    shape: tuple[int, int, int],
    cfg: MaskConfig,
    graph: WeightedDigraph | None = None,
) -> SimulatedMask:
    """Point noise plus uniformly-timed sensor faults with optional propagation.

    Every direct fault copies its exact start and duration to each hop-k
    neighbour of its node independently with probability p_g[k-1]; for
    directed graphs, hops follow edge direction. Channels are independent.
    The same seed reproduces the mask bit for bit, and with p_f = 0 and no
    propagation the result equals `simulate_point` under the same seed policy.
    """
    if cfg.p_g and graph is None:
        raise ContractError("propagation probabilities given but no graph supplied")
    t_len, n_nodes, n_ch = shape
    rng = stream_rng(cfg.seed, "mask")
    invalid = rng.random(shape) < cfg.eta  # point noise drawn first

    faults: list[FaultInterval] = []
    if cfg.p_f > 0.0:
        rings = directed_hop_rings(graph, len(cfg.p_g)) if cfg.p_g else None
        starts = np.argwhere(rng.random(shape) < cfg.p_f)
        for t, i, c in starts:
            t, i, c = int(t), int(i), int(c)
            length = int(rng.integers(cfg.s_min, cfg.s_max + 1))
            faults.append(FaultInterval(node=i, channel=c, start=t, length=length, origin="direct"))
            invalid[t : t + length, i, c] = True
            if rings is not None:
                for k, p in enumerate(cfg.p_g):
                    for j in rings[i][k]:
                        if rng.random() < p:
                            j = int(j)
                            faults.append(
                                FaultInterval(node=j, channel=c, start=t, length=length, origin="propagated")
                            )
                            invalid[t : t + length, j, c] = True
    return SimulatedMask(mask=(~invalid).astype(np.float64), faults=faults)


def mask_statistics(mask: np.ndarray) -> dict:
    """Missing fraction overall and per node, streak histogram, dead steps."""
    mask = np.asarray(mask)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ContractError("mask must be binary")
    t_len, n_nodes, n_ch = mask.shape
    histogram: dict[int, int] = {}
    for i in range(n_nodes):
        for c in range(n_ch):
            run = 0
            for t in range(t_len):
                if mask[t, i, c] == 0.0:
                    run += 1
                elif run:
                    histogram[run] = histogram.get(run, 0) + 1
                    run = 0
            if run:
                histogram[run] = histogram.get(run, 0) + 1
    return {
        "missing_fraction": float(1.0 - mask.mean()),
        "per_node_missing": [float(1.0 - mask[:, i].mean()) for i in range(n_nodes)],
        "streak_histogram": {str(k): histogram[k] for k in sorted(histogram)},
        "fully_missing_steps": int(np.sum(mask.reshape(t_len, -1).max(axis=1) == 0.0)),
    }


def write_mask_csv(mask: np.ndarray, path) -> None:
    t_len, n_nodes, n_ch = mask.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["timestamp"] + [f"node{j}_ch{c}" for j in range(n_nodes) for c in range(n_ch)]
        )
        for t in range(t_len):
            writer.writerow([t] + [str(int(v)) for v in mask[t].ravel()])


def write_fault_log(sim: SimulatedMask, path) -> None:
    """One JSON object per fault interval, in generation order."""
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w") as fh:
        for f in sim.faults:
            fh.write(
                json.dumps(
                    {
                        "node": f.node,
                        "channel": f.channel,
                        "start": f.start,
                        "length": f.length,
                        "origin": f.origin,
                    }
                )
                + "\n"
            )
    os.replace(tmp, path)
