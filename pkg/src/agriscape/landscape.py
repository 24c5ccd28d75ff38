"""Landscape data model, synthetic Voronoi landscapes and GeoJSON I/O.

Plots are simple planar polygons in metres. A configuration bundles a group of
farms with their plots, the centroid distance matrix and the neighbour sets
used by the yield-effect model.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np
import shapely
from scipy.stats import truncnorm
from shapely.geometry import MultiPoint, Point, Polygon, box
from shapely.geometry.polygon import orient

from .params import CROPS, HABITATS

TOUCH_TOL = 1e-6  # metres; two geometries touch iff their distance is within this
SEED_JITTER = 1e-3  # metres; minimum separation between Voronoi seeds
YIELD_FLOOR = 0.5  # t/ha


class InvalidInputError(ValueError):
    pass


class LandscapeSchemaError(ValueError):
    """GeoJSON input does not follow the plot schema."""


class Kind(str, Enum):
    AGRICULTURAL = "agricultural"
    HABITAT = "habitat"


@dataclass(frozen=True)
class Plot:
    id: int
    farm_id: int
    kind: Kind
    label: str
    geometry: Polygon
    base_yield: float

    def __post_init__(self):
        if not isinstance(self.geometry, Polygon) or self.geometry.is_empty:
            raise InvalidInputError(f"plot {self.id}: geometry must be a non-empty Polygon")
        if not self.geometry.is_valid or self.geometry.area <= 0:
            raise InvalidInputError(f"plot {self.id}: polygon is not simple or has zero area")
        allowed = CROPS if self.kind is Kind.AGRICULTURAL else HABITATS
        if self.label not in allowed:
            raise InvalidInputError(f"plot {self.id}: label {self.label!r} not valid for {self.kind.value}")
        if self.kind is Kind.HABITAT and self.base_yield != 0:
            raise InvalidInputError(f"plot {self.id}: habitat plots have zero yield")
        if self.kind is Kind.AGRICULTURAL and self.base_yield < YIELD_FLOOR:
            raise InvalidInputError(f"plot {self.id}: agricultural yield below {YIELD_FLOOR}")

    @property
    def is_agricultural(self) -> bool:
        return self.kind is Kind.AGRICULTURAL

    @property
    def area(self) -> float:
        """Hectares."""
        return self.geometry.area / 10_000.0

    @property
    def perimeter(self) -> float:
        return self.geometry.length

    @property
    def centroid(self) -> tuple[float, float]:
        c = self.geometry.centroid
        return (c.x, c.y)


@dataclass(frozen=True)
class Farm:
    id: int
    plot_ids: tuple[int, ...]
    boundary: Polygon


@dataclass(frozen=True)
class LandscapeConfiguration:
    config_id: int
    farms: tuple[Farm, ...]
    plots: tuple[Plot, ...]
    distance_matrix: np.ndarray
    neighbor_sets: tuple[tuple[int, ...], ...]
    d_neib: float
    rng_seed: int = 0

    def plot(self, plot_id: int) -> Plot:
        return self.plots[plot_id]

    def farm(self, farm_id: int) -> Farm:
        for f in self.farms:
            if f.id == farm_id:
                return f
        raise KeyError(farm_id)

    @property
    def agricultural_ids(self) -> list[int]:
        return [p.id for p in self.plots if p.is_agricultural]

    @property
    def habitat_ids(self) -> list[int]:
        return [p.id for p in self.plots if not p.is_agricultural]

    def habitat_neighbors(self, plot_id: int) -> tuple[int, ...]:
        return tuple(j for j in self.neighbor_sets[plot_id] if not self.plots[j].is_agricultural)

    @cached_property
    def touches_habitat(self) -> np.ndarray:
        """Per plot: does it touch any existing habitat plot (other than itself)."""
        geoms = np.array([p.geometry for p in self.plots], dtype=object)
        hab = [p.id for p in self.plots if not p.is_agricultural]
        out = np.zeros(len(self.plots), dtype=bool)
        if not hab:
            return out
        tree = shapely.STRtree(geoms[hab])
        src, dst = tree.query(geoms, predicate="dwithin", distance=TOUCH_TOL)
        for i, k in zip(src, dst):
            if hab[k] != i:
                out[i] = True
        return out


@dataclass(frozen=True)
class GeneratorConfig:
    n_configs: int = 500
    farms_per_config: tuple[int, int] = (5, 10)
    plots_per_farm: tuple[int, int] = (5, 10)
    p_agricultural: float = 0.6
    p_habitat: float = 0.4
    # artifact defaults, roughly prairie-like: the source weights are not published
    crop_weights: dict[str, float] = field(default_factory=lambda: {
        "Spring wheat": 0.30, "Canola/rapeseed": 0.30, "Soybeans": 0.15,
        "Oats": 0.10, "Barley": 0.07, "Corn": 0.08,
    })
    habitat_weights: dict[str, float] = field(default_factory=lambda: {
        "Grassland": 0.30, "Wetland": 0.20, "Broadleaf": 0.15, "Shrubland": 0.12,
        "Water": 0.10, "Exposed land/barren": 0.08, "Coniferous": 0.05,
    })
    # (mean, sd) in t/ha; sampled from a normal truncated below at the yield floor
    yield_distributions: dict[str, tuple[float, float]] = field(default_factory=lambda: {
        "Spring wheat": (3.5, 0.7), "Barley": (3.6, 0.7), "Canola/rapeseed": (2.3, 0.5),
        "Corn": (8.5, 1.5), "Oats": (3.3, 0.7), "Soybeans": (2.7, 0.5),
    })
    yield_floor: float = YIELD_FLOOR
    extent: tuple[float, float] = (4000.0, 4000.0)
    d_neib: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        if self.n_configs < 1:
            raise InvalidInputError("n_configs must be >= 1")
        for name in ("farms_per_config", "plots_per_farm"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise InvalidInputError(f"{name} must be a nonempty range of positive integers")
        if not math.isclose(self.p_agricultural + self.p_habitat, 1.0, abs_tol=1e-12):
            raise InvalidInputError("p_agricultural + p_habitat must equal 1")
        if not 0 <= self.p_agricultural <= 1:
            raise InvalidInputError("p_agricultural must be a probability")
        for name, allowed in (("crop_weights", CROPS), ("habitat_weights", HABITATS)):
            w = getattr(self, name)
            if any(k not in allowed for k in w):
                raise InvalidInputError(f"{name}: unknown labels {set(w) - set(allowed)}")
            if any(v < 0 for v in w.values()) or sum(w.values()) <= 0:
                raise InvalidInputError(f"{name} must be nonnegative and normalizable")
        missing = [c for c, v in self.crop_weights.items() if v > 0 and c not in self.yield_distributions]
        if missing:
            raise InvalidInputError(f"no yield distribution for {missing}")
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise InvalidInputError("extent must be positive")

    @classmethod
    def from_dict(cls, data: dict | None) -> "GeneratorConfig":
        data = dict(data or {})
        for key in ("farms_per_config", "plots_per_farm", "extent"):
            if key in data:
                data[key] = tuple(data[key])
        if "yield_distributions" in data:
            data["yield_distributions"] = {k: tuple(v) for k, v in data["yield_distributions"].items()}
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidInputError(f"generator config: {exc}") from None


def voronoi_partition(boundary: Polygon, seeds) -> list:
    """Clip the Voronoi diagram of ``seeds`` to ``boundary``.

    Cell ``k`` is the one containing seed ``k``. Cells come back as Polygons, or
    MultiPolygons when a non-convex boundary splits a cell.
    """
    pts = [tuple(map(float, s)) for s in seeds]
    if not pts:
        raise InvalidInputError("at least one seed is required")
    for k, p in enumerate(pts):
        if not boundary.contains(Point(p)):
            raise InvalidInputError(f"seed {k} {p} is not strictly inside the boundary")
    if len(set(pts)) != len(pts):
        raise InvalidInputError("seeds must be pairwise distinct")
    if len(pts) == 1:
        return [boundary]
    regions = shapely.voronoi_polygons(MultiPoint(pts), extend_to=boundary, ordered=True)
    cells = []
    for k, region in enumerate(regions.geoms):
        cell = region.intersection(boundary)
        if not cell.contains(Point(pts[k])):
            raise InvalidInputError(f"Voronoi cell {k} lost its seed")
        if cell.geom_type == "GeometryCollection":
            cell = shapely.union_all([g for g in cell.geoms if g.geom_type in ("Polygon", "MultiPolygon")])
        cells.append(cell)
    return cells


def random_points_in(poly: Polygon, n: int, rng: np.random.Generator) -> list[tuple[float, float]]:
    """Uniform points strictly inside ``poly``, pairwise at least SEED_JITTER apart."""
    minx, miny, maxx, maxy = poly.bounds
    pts: list[tuple[float, float]] = []
    tries = 0
    while len(pts) < n:
        tries += 1
        if tries > 10_000 * max(n, 1):
            raise InvalidInputError("could not place seeds inside polygon")
        p = (rng.uniform(minx, maxx), rng.uniform(miny, maxy))
        if not poly.contains(Point(p)):
            continue
        if any(math.dist(p, q) < SEED_JITTER for q in pts):
            continue
        pts.append(p)
    return pts


def _clean_polygon(geom) -> Polygon:
    if geom.geom_type == "MultiPolygon":
        geom = max(geom.geoms, key=lambda g: g.area)
    return orient(Polygon(geom.exterior.coords), 1.0)


def _pick(rng: np.random.Generator, weights: dict[str, float]) -> str:
    labels = list(weights)
    w = np.array([weights[k] for k in labels], dtype=float)
    return labels[rng.choice(len(labels), p=w / w.sum())]


def generate_configuration(gen: GeneratorConfig, seed: int, config_id: int = 0) -> LandscapeConfiguration:
    rng = np.random.default_rng(seed)
    width, height = gen.extent
    area = box(0.0, 0.0, width, height)
    n_farms = int(rng.integers(gen.farms_per_config[0], gen.farms_per_config[1] + 1))
    farm_cells = voronoi_partition(area, random_points_in(area, n_farms, rng))

    farms: list[Farm] = []
    plots: list[Plot] = []
    for fid, cell in enumerate(farm_cells):
        cell = _clean_polygon(cell)
        n_plots = int(rng.integers(gen.plots_per_farm[0], gen.plots_per_farm[1] + 1))
        ids = []
        for geom in voronoi_partition(cell, random_points_in(cell, n_plots, rng)):
            pid = len(plots)
            if rng.random() < gen.p_agricultural:
                label = _pick(rng, gen.crop_weights)
                mean, sd = gen.yield_distributions[label]
                a = (gen.yield_floor - mean) / sd
                y = float(truncnorm.rvs(a, np.inf, loc=mean, scale=sd, random_state=rng))
                plots.append(Plot(pid, fid, Kind.AGRICULTURAL, label, _clean_polygon(geom),
                                  max(y, gen.yield_floor)))
            else:
                label = _pick(rng, gen.habitat_weights)
                plots.append(Plot(pid, fid, Kind.HABITAT, label, _clean_polygon(geom), 0.0))
            ids.append(pid)
        farms.append(Farm(fid, tuple(ids), cell))
    return build_configuration(config_id, farms, plots, gen.d_neib, rng_seed=seed)


def generate_configurations(gen: GeneratorConfig) -> list[LandscapeConfiguration]:
    return [generate_configuration(gen, gen.seed + k, config_id=k) for k in range(gen.n_configs)]


def centroid_distances(plots) -> np.ndarray:
    c = np.array([p.centroid for p in plots], dtype=float).reshape(-1, 2)
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, 0.0)
    return d


def compute_neighbors(config: LandscapeConfiguration, d_neib: float) -> tuple[tuple[int, ...], ...]:
    return _neighbors_from_matrix(config.distance_matrix, d_neib)


def _neighbors_from_matrix(dist: np.ndarray, d_neib: float) -> tuple[tuple[int, ...], ...]:
    if d_neib < 0 or math.isnan(d_neib):
        raise InvalidInputError("d_neib must be >= 0")
    n = dist.shape[0]
    return tuple(
        tuple(int(j) for j in np.nonzero(dist[i] <= d_neib)[0] if j != i) for i in range(n)
    )


def build_configuration(config_id, farms, plots, d_neib=1000.0, rng_seed=0) -> LandscapeConfiguration:
    plots = tuple(plots)
    if [p.id for p in plots] != list(range(len(plots))):
        raise InvalidInputError("plot ids must be 0..n-1 in order")
    dist = centroid_distances(plots)
    dist.flags.writeable = False
    return LandscapeConfiguration(
        config_id=int(config_id),
        farms=tuple(farms),
        plots=plots,
        distance_matrix=dist,
        neighbor_sets=_neighbors_from_matrix(dist, d_neib),
        d_neib=float(d_neib),
        rng_seed=int(rng_seed),
    )


def with_neighbors(config: LandscapeConfiguration, d_neib: float) -> LandscapeConfiguration:
    if d_neib == config.d_neib:
        return config
    return LandscapeConfiguration(config.config_id, config.farms, config.plots, config.distance_matrix,
                                  compute_neighbors(config, d_neib), float(d_neib), config.rng_seed)


# -- farm grouping -------------------------------------------------------------------------

@dataclass(frozen=True)
class FarmGrouping:
    groups: tuple[tuple[int, ...], ...]  # farm ids per group, in BFS order
    configurations: tuple[LandscapeConfiguration, ...]  # groups with min_size <= size <= max_size
    undersized: tuple[tuple[int, ...], ...]  # groups below min_size, kept for reporting


def farm_adjacency(farms) -> dict[int, list[int]]:
    geoms = np.array([f.boundary for f in farms], dtype=object)
    tree = shapely.STRtree(geoms)
    src, dst = tree.query(geoms, predicate="dwithin", distance=TOUCH_TOL)
    adj: dict[int, list[int]] = {f.id: [] for f in farms}
    for i, j in zip(src, dst):
        if i != j:
            adj[farms[i].id].append(farms[j].id)
    return {k: sorted(set(v)) for k, v in adj.items()}


def group_farms(farms, plots, min_size: int = 2, max_size: int = 10, d_neib: float = 1000.0) -> FarmGrouping:
    """Breadth-first grouping of touching farms into capped configurations."""
    farms = list(farms)
    by_id = {f.id: f for f in farms}
    plots_by_id = {p.id: p for p in plots}
    adj = farm_adjacency(farms)
    assigned: set[int] = set()
    groups = []
    for start in sorted(by_id):
        if start in assigned:
            continue
        group = [start]
        assigned.add(start)
        queue = deque([start])
        while queue and len(group) < max_size:
            cur = queue.popleft()
            for nb in adj[cur]:
                if nb not in assigned and len(group) < max_size:
                    assigned.add(nb)
                    group.append(nb)
                    queue.append(nb)
        groups.append(tuple(group))

    configs, small = [], []
    for group in groups:
        if len(group) < min_size:
            small.append(group)
            continue
        new_plots, new_farms = [], []
        for fid in group:
            f = by_id[fid]
            ids = []
            for pid in f.plot_ids:
                p = plots_by_id[pid]
                ids.append(len(new_plots))
                new_plots.append(Plot(len(new_plots), fid, p.kind, p.label, p.geometry, p.base_yield))
            new_farms.append(Farm(fid, tuple(ids), f.boundary))
        configs.append(build_configuration(len(configs), new_farms, new_plots, d_neib))
    return FarmGrouping(tuple(groups), tuple(configs), tuple(small))


# -- GeoJSON --------------------------------------------------------------------------------

def save_configuration(config: LandscapeConfiguration) -> bytes:
    features = []
    for p in config.plots:
        features.append({
            "type": "Feature",
            "geometry": {"type": "Polygon",
                         "coordinates": [[list(xy) for xy in p.geometry.exterior.coords]]},
            "properties": {"plot_id": p.id, "farm_id": p.farm_id, "kind": p.kind.value,
                           "label": p.label, "yield": p.base_yield},
        })
    doc = {"type": "FeatureCollection", "config_id": config.config_id,
           "rng_seed": config.rng_seed, "d_neib": config.d_neib, "features": features}
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def load_configuration(data: bytes | str, d_neib: float | None = None) -> LandscapeConfiguration:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise LandscapeSchemaError(f"malformed JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise LandscapeSchemaError("top level must be a GeoJSON FeatureCollection")
    feats = doc.get("features")
    if not isinstance(feats, list) or not feats:
        raise LandscapeSchemaError("FeatureCollection has no features")

    plots = []
    for idx, feat in enumerate(feats):
        where = f"feature {idx}"
        props = (feat or {}).get("properties") or {}
        for key in ("farm_id", "kind", "label", "yield"):
            if key not in props:
                raise LandscapeSchemaError(f"{where}: missing property {key!r}")
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise LandscapeSchemaError(f"{where}: geometry must be a Polygon")
        rings = geom.get("coordinates") or []
        if len(rings) != 1:
            raise LandscapeSchemaError(f"{where}: polygons with holes are not supported")
        try:
            poly = Polygon([(float(x), float(y)) for x, y in rings[0]])
        except (TypeError, ValueError):
            raise LandscapeSchemaError(f"{where}: bad coordinates") from None
        if not poly.is_valid or poly.area <= 0:
            raise LandscapeSchemaError(f"{where}: polygon is self-intersecting or degenerate")
        try:
            kind = Kind(props["kind"])
        except ValueError:
            raise LandscapeSchemaError(f"{where}: kind must be 'agricultural' or 'habitat'") from None
        y = float(props["yield"])
        y = max(y, YIELD_FLOOR) if kind is Kind.AGRICULTURAL else 0.0
        pid = props.get("plot_id", idx)
        try:
            plots.append((int(pid), Plot(int(pid), int(props["farm_id"]), kind, str(props["label"]), poly, y)))
        except InvalidInputError as exc:
            raise LandscapeSchemaError(f"{where}: {exc}") from None

    plots.sort(key=lambda t: t[0])
    if [pid for pid, _ in plots] != list(range(len(plots))):
        raise LandscapeSchemaError("plot_id values must be 0..n-1")
    plots = [p for _, p in plots]
    farms = []
    for fid in sorted({p.farm_id for p in plots}):
        members = [p for p in plots if p.farm_id == fid]
        boundary = shapely.union_all([p.geometry for p in members])
        farms.append(Farm(fid, tuple(p.id for p in members), boundary))
    d = float(d_neib if d_neib is not None else doc.get("d_neib", 1000.0))
    return build_configuration(doc.get("config_id", 0), farms, plots, d, doc.get("rng_seed", 0))
