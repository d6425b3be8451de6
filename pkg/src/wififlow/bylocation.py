"""Transition matrices between buildings, their Ward clustering and the
dominant direction of flow between building pairs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .cluster import Dendrogram, cut_dendrogram, hac_ward, leaf_order
from .model import DayTrajectory, RegistryError

# Clock-time windows, half-open [from, to) in hours, keyed by departure time.
WINDOWS = {
    "Morning": (6, 10),
    "Midday": (11, 14),
    "Evening": (18, 22),
}
DOMINANT_THRESHOLD = 0.55
CUT_FRACTION = 0.75
HAC_INPUTS = ("dissimilarity", "row-vectors")


def in_window(t: int, window: str, tz_offset: int = 0, windows: Mapping = WINDOWS) -> bool:
    lo, hi = windows[window]
    sod = (t + tz_offset) % 86400
    return lo * 3600 <= sod < hi * 3600


def transition_counts(trajs: Sequence[DayTrajectory], window: str, nodes: Sequence[str],
                      tz_offset: int = 0, windows: Mapping = WINDOWS) -> np.ndarray:
    """N[i, j]: moves from node i to node j departing inside ``window``."""
    pos = {b: i for i, b in enumerate(nodes)}
    N = np.zeros((len(nodes), len(nodes)), dtype=np.int64)
    lo, hi = (h * 3600 for h in windows[window])
    for t in trajs:
        es = t.entries
        for x, y in zip(es, es[1:]):
            if x.node == y.node:
                continue
            sod = (x.end_time + tz_offset) % 86400
            if lo <= sod < hi:
                try:
                    N[pos[x.node], pos[y.node]] += 1
                except KeyError as exc:
                    raise RegistryError(f"unknown building {exc.args[0]!r}") from None
    return N


def transition_probability(N) -> np.ndarray:
    """Row-normalised off-diagonal counts with the diagonal set to 1.

    A node with no outgoing transitions gets an all-zero off-diagonal row.
    """
    N = np.asarray(N, dtype=np.int64)
    off = N.copy()
    np.fill_diagonal(off, 0)
    tot = off.sum(axis=1, keepdims=True)
    T = np.divide(off, tot, out=np.zeros(off.shape), where=tot > 0)
    np.fill_diagonal(T, 1.0)
    return T


def matrix_to_dissimilarity(T, hac_input: str = "dissimilarity") -> np.ndarray:
    """Turn a transition-probability matrix into a Ward input matrix.

    ``dissimilarity``: 1 minus the symmetrised off-diagonal probability.
    ``row-vectors``: squared Euclidean distance between rows of T.
    """
    T = np.asarray(T, dtype=float)
    if hac_input == "row-vectors":
        sq = np.einsum("ij,ij->i", T, T)
        D = np.maximum(sq[:, None] + sq[None, :] - 2.0 * T @ T.T, 0.0)
        D = (D + D.T) / 2
    elif hac_input == "dissimilarity":
        Tz = T.copy()
        np.fill_diagonal(Tz, 0.0)
        D = np.clip(1.0 - (Tz + Tz.T) / 2.0, 0.0, 1.0)
    else:
        raise ValueError(f"hac_input must be one of {HAC_INPUTS}")
    np.fill_diagonal(D, 0.0)
    return D


@dataclass
class LocationClustering:
    dendrogram: Dendrogram
    threshold: float
    labels: np.ndarray  # flat cluster per node, input order
    order: list  # leaf order (indices into input order)
    reordered: np.ndarray  # T with rows and columns permuted by ``order``


def cluster_locations(T, threshold: Optional[float] = None, cut_fraction: float = CUT_FRACTION,
                      hac_input: str = "dissimilarity") -> LocationClustering:
    """Ward HAC of the nodes; ``threshold`` defaults to ``cut_fraction`` of
    the highest merge."""
    T = np.asarray(T, dtype=float)
    dendro = hac_ward(matrix_to_dissimilarity(T, hac_input))
    if threshold is None:
        top = max(dendro.heights, default=0.0)
        threshold = cut_fraction * top
    labels = cut_dendrogram(dendro, threshold)
    order = leaf_order(dendro)
    return LocationClustering(dendro, float(threshold), labels, order, T[np.ix_(order, order)])


@dataclass(frozen=True)
class DominantEdge:
    source: str
    target: str
    probability: float
    window: str = ""


def dominant_directions(N, nodes: Sequence[str], threshold: float = DOMINANT_THRESHOLD,
                        window: str = "") -> list[DominantEdge]:
    """Directions carrying strictly more than ``threshold`` of a pair's
    two-way transitions."""
    N = np.asarray(N, dtype=np.int64)
    out = []
    n = len(nodes)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = int(N[i, j]), int(N[j, i])
            tot = a + b
            if tot == 0:
                continue
            if a / tot > threshold:
                out.append(DominantEdge(nodes[i], nodes[j], a / tot, window))
            elif b / tot > threshold:
                out.append(DominantEdge(nodes[j], nodes[i], b / tot, window))
    return out


@dataclass
class FlowReport:
    building: str
    inbound: dict = field(default_factory=dict)  # window -> [DominantEdge]
    outbound: dict = field(default_factory=dict)
    pattern: str = "mixed"

    def to_text(self) -> str:
        lines = [f"building: {self.building}", f"pattern: {self.pattern}"]
        for w in self.inbound:
            lines.append(f"[{w}]")
            for e in self.inbound[w]:
                lines.append(f"  in   {e.source} -> {e.target}  p={e.probability:.4f}")
            for e in self.outbound[w]:
                lines.append(f"  out  {e.source} -> {e.target}  p={e.probability:.4f}")
        return "\n".join(lines) + "\n"


def _majority(report: FlowReport, window: str) -> Optional[str]:
    n_in, n_out = len(report.inbound.get(window, [])), len(report.outbound.get(window, []))
    if n_in > n_out:
        return "in"
    if n_out > n_in:
        return "out"
    return None


def building_flow_report(edges: Mapping[str, Sequence[DominantEdge]], building: str,
                         registry=None) -> FlowReport:
    """Inflow/outflow of one building across the windows, with a coarse
    pattern label: reversal, continuous-target or mixed.

    ``edges`` maps window name to its dominant edges, earliest window
    first; the reversal test compares the first and last windows.
    """
    if registry is not None and building not in registry:
        raise RegistryError(f"unknown building {building!r}")
    rep = FlowReport(building)
    for w in list(edges) or WINDOWS:
        es = edges.get(w, [])
        rep.inbound[w] = [e for e in es if e.target == building]
        rep.outbound[w] = [e for e in es if e.source == building]
    names = list(edges) or list(WINDOWS)
    first, last = _majority(rep, names[0]), _majority(rep, names[-1])
    targets = [{e.target for e in rep.outbound[w]} for w in names]
    if {first, last} == {"in", "out"}:
        rep.pattern = "reversal"
    elif all(len(t) == 1 for t in targets) and len(set.union(*targets)) == 1:
        rep.pattern = "continuous-target"
    return rep
