"""Graph metrics over selected intervention pieces: IIC, betweenness, hubs."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np


class UndefinedCorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    id: int
    area: float  # ha; zero for margin arcs
    length: float
    plot_id: int
    farm_id: int


@dataclass(frozen=True)
class PieceGraph:
    nodes: tuple[Node, ...]
    edges: tuple[tuple[int, int], ...]  # node ids, i < j

    def __post_init__(self):
        ids = {n.id for n in self.nodes}
        for i, j in self.edges:
            if i == j:
                raise ValueError("self-loops are not allowed")
            if i not in ids or j not in ids:
                raise ValueError(f"edge ({i}, {j}) references a missing node")

    def adjacency(self) -> dict[int, list[int]]:
        adj = {n.id: [] for n in self.nodes}
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return adj


def _hops_from(adj, source) -> dict[int, int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        v = queue.popleft()
        for w in adj[v]:
            if w not in dist:
                dist[w] = dist[v] + 1
                queue.append(w)
    return dist


def iic_raw(graph: PieceGraph) -> float:
    """sum over ordered node pairs (self-pairs included) of a_i a_j / (1 + hops_ij)."""
    adj = graph.adjacency()
    area = {n.id: n.area for n in graph.nodes}
    total = 0.0
    for n in graph.nodes:
        if area[n.id] == 0:
            continue
        for j, hops in _hops_from(adj, n.id).items():
            total += area[n.id] * area[j] / (1.0 + hops)
    return total


def betweenness(graph: PieceGraph) -> dict[int, float]:
    """Unnormalised shortest-path betweenness (Brandes accumulation, undirected)."""
    adj = graph.adjacency()
    score = {v: 0.0 for v in adj}
    for s in adj:
        stack = []
        preds = {v: [] for v in adj}
        sigma = dict.fromkeys(adj, 0.0)
        sigma[s] = 1.0
        dist = {s: 0}
        queue = deque([s])
        while queue:
            v = queue.popleft()
            stack.append(v)
            for w in adj[v]:
                if w not in dist:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = dict.fromkeys(adj, 0.0)
        while stack:
            w = stack.pop()
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                score[w] += delta[w]
    # every unordered pair was counted from both endpoints
    return {v: c / 2.0 for v, c in score.items()}


def plot_scores(graph: PieceGraph, scores: dict[int, float]) -> dict[int, float]:
    out: dict[int, float] = {}
    for n in graph.nodes:
        out[n.plot_id] = out.get(n.plot_id, 0.0) + scores.get(n.id, 0.0)
    return out


def designate_hubs(graph: PieceGraph, agricultural_plot_ids, scores: dict[int, float] | None = None,
                   fraction: float = 0.10) -> set[int]:
    """Top ``fraction`` of agricultural plots by summed node betweenness; ties go to the lowest id."""
    plots = sorted(set(agricultural_plot_ids))
    if not plots:
        raise ValueError("need at least one agricultural plot")
    if scores is None:
        scores = betweenness(graph)
    per_plot = plot_scores(graph, scores)
    count = max(1, math.floor(fraction * len(plots) + 1e-9))
    ranked = sorted(plots, key=lambda p: (-per_plot.get(p, 0.0), p))
    return set(ranked[:count])


def classify_connections(graph: PieceGraph) -> dict[tuple[int, int], str]:
    farm = {n.id: n.farm_id for n in graph.nodes}
    return {(i, j): ("intra_farm" if farm[i] == farm[j] else "inter_farm") for i, j in graph.edges}


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson needs two equal-length sequences of at least 2 values")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation is undefined for zero variance")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


# -- CSV exports -------------------------------------------------------------------------------

def _csv(header, rows) -> str:
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def centrality_csv(graph: PieceGraph, scores: dict[int, float]) -> str:
    return _csv(("piece_id", "plot_id", "farm_id", "score"),
                [(n.id, n.plot_id, n.farm_id, repr(float(scores.get(n.id, 0.0)))) for n in graph.nodes])


def hubs_csv(per_plot: dict[int, float], hubs: set[int], plot_ids) -> str:
    return _csv(("plot_id", "score", "hub"),
                [(p, repr(float(per_plot.get(p, 0.0))), int(p in hubs)) for p in sorted(plot_ids)])


def edges_csv(classes: dict[tuple[int, int], str]) -> str:
    return _csv(("piece_i", "piece_j", "connection"), [(i, j, c) for (i, j), c in sorted(classes.items())])
