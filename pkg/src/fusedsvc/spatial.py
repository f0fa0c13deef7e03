"""Real-data regionalization: k-means clustering and Voronoi adjacency.

Observation coordinates are clustered into regions with Lloyd's algorithm
(k-means++ seeding, multiple restarts); region adjacency is the Delaunay graph
of the cluster centroids, whose dual Voronoi cells share a boundary exactly
when the centroids are Delaunay neighbors.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.spatial import Delaunay, Voronoi
from scipy.spatial import QhullError

from .graphs import RegionGraph


@dataclass(frozen=True)
class GeoPoints:
    coordinates: np.ndarray      # (n, 2) lon/lat
    ids: tuple

    def __post_init__(self):
        coords = np.asarray(self.coordinates, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError("coordinates must be (n, 2)")
        if not np.isfinite(coords).all():
            raise ValueError("non-finite coordinates")
        coords.setflags(write=False)
        object.__setattr__(self, "coordinates", coords)

    def __len__(self) -> int:
        return len(self.coordinates)


def _kmeans_pp_init(coords, k, rng):
    n = len(coords)
    centroids = np.empty((k, 2))
    centroids[0] = coords[rng.integers(n)]
    d2 = np.sum((coords - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = coords[rng.integers(n)]
        else:
            centroids[j] = coords[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((coords - centroids[j]) ** 2, axis=1))
    return centroids


def _lloyd(coords, centroids, max_iter=300, tol=1e-12):
    k = len(centroids)
    prev_sse = np.inf
    assign = np.zeros(len(coords), dtype=int)
    for _ in range(max_iter):
        d2 = ((coords[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        sse = float(d2[np.arange(len(coords)), assign].sum())
        assert sse <= prev_sse + 1e-9, "Lloyd SSE must be non-increasing"
        for j in range(k):
            members = coords[assign == j]
            if len(members) == 0:
                # reseed empty cluster at the point farthest from its centroid
                far = int(d2[np.arange(len(coords)), assign].argmax())
                centroids[j] = coords[far]
            else:
                centroids[j] = members.mean(axis=0)
        if prev_sse - sse <= tol * max(prev_sse, 1.0):
            prev_sse = sse
            break
        prev_sse = sse
    return assign, centroids, prev_sse


def kmeans(points: GeoPoints, k: int, seed=0, restarts: int = 20) -> dict:
    """k-means with k-means++ seeding; best SSE over restarts is kept."""
    coords = points.coordinates
    if k > len(coords):
        raise ValueError(f"k={k} exceeds number of points {len(coords)}")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        init = _kmeans_pp_init(coords, k, rng)
        assign, cents, sse = _lloyd(coords, init.copy())
        if best is None or sse < best[2]:
            best = (assign, cents, sse)
    assign, cents, sse = best
    return {"assignments": assign + 1, "centroids": cents, "sse": sse}


def voronoi_adjacency(centroids: np.ndarray) -> RegionGraph:
    """Regions adjacent iff their Voronoi cells share a boundary, via Delaunay
    duality. Collinear degenerate inputs fall back to a nearest-neighbor chain
    along the principal axis, with a warning."""
    cents = np.asarray(centroids, dtype=float)
    m = len(cents)
    if m < 2:
        raise ValueError("need at least 2 centroids")
    if np.allclose(cents, cents[0]):
        raise ValueError("all centroids identical")
    if m == 2:
        return RegionGraph(2, ((2, 1),))
    try:
        tri = Delaunay(cents)
    except QhullError:
        warnings.warn("degenerate (collinear) centroids: "
                      "falling back to chain adjacency", stacklevel=2)
        centered = cents - cents.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        order = np.argsort(centered @ vt[0])
        edges = tuple((int(max(a, b)) + 1, int(min(a, b)) + 1)
                      for a, b in zip(order[:-1], order[1:]))
        return RegionGraph(m, edges)
    edges = set()
    for simplex in tri.simplices:
        for i in range(3):
            a, b = int(simplex[i]), int(simplex[(i + 1) % 3])
            edges.add((max(a, b) + 1, min(a, b) + 1))
    return RegionGraph(m, tuple(edges))


@dataclass(frozen=True)
class IngestResult:
    points: GeoPoints
    y: np.ndarray
    x: np.ndarray
    dropped: int
    columns: tuple


def ingest_csv(path, covariate_columns=None, drop_threshold: float = 0.5) -> IngestResult:
    """Read `id,lon,lat,y,x1,...,xp`; rows with missing required values are
    dropped (counted); more than drop_threshold dropped is a hard error."""
    df = pd.read_csv(path)
    required = ["id", "lon", "lat", "y"]
    missing_cols = [c for c in required if c not in df.columns]
    if missing_cols:
        raise ValueError(f"missing required columns {missing_cols}")
    if covariate_columns is None:
        covariate_columns = sorted(
            (c for c in df.columns if c.startswith("x") and c[1:].isdigit()),
            key=lambda c: int(c[1:]))
    if not covariate_columns:
        raise ValueError("no covariate columns found")
    used = required + list(covariate_columns)
    numeric = df[used[1:]].apply(pd.to_numeric, errors="coerce")
    ok = numeric.notna().all(axis=1)
    dropped = int((~ok).sum())
    if dropped > drop_threshold * len(df):
        raise ValueError(f"{dropped}/{len(df)} rows malformed or missing")
    kept = df[ok]
    numeric = numeric[ok]
    points = GeoPoints(numeric[["lon", "lat"]].to_numpy(), tuple(kept["id"]))
    return IngestResult(
        points=points,
        y=numeric["y"].to_numpy(),
        x=numeric[list(covariate_columns)].to_numpy(),
        dropped=dropped,
        columns=tuple(covariate_columns),
    )


def standardize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero-mean unit-variance columns; returns (standardized, means, sds)."""
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (x - mean) / sd, mean, sd


def _finite_voronoi_polygons(centroids: np.ndarray, pad: float = 0.25):
    """Voronoi cells clipped to a padded bounding box (plot-ready polygons)."""
    from shapely.geometry import Polygon, box

    cents = np.asarray(centroids, dtype=float)
    lo = cents.min(axis=0)
    hi = cents.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    bbox = box(lo[0] - pad * span[0], lo[1] - pad * span[1],
               hi[0] + pad * span[0], hi[1] + pad * span[1])
    vor = Voronoi(cents)
    center = cents.mean(axis=0)
    radius = float(np.max(np.linalg.norm(cents - center, axis=1)) + 10 * span.max())

    polygons = []
    for i in range(len(cents)):
        region = vor.regions[vor.point_region[i]]
        if -1 not in region:
            poly = Polygon(vor.vertices[region])
        else:
            # rebuild the unbounded cell by pushing its infinite ridges out
            ridges = []
            for (p1, p2), verts in zip(vor.ridge_points, vor.ridge_vertices):
                if i in (p1, p2):
                    ridges.append((p1, p2, verts))
            pts = [vor.vertices[v] for _, _, vv in ridges for v in vv if v != -1]
            for p1, p2, vv in ridges:
                if -1 not in vv:
                    continue
                v = [x for x in vv if x != -1][0]
                other = p2 if p1 == i else p1
                mid = 0.5 * (cents[i] + cents[other])
                normal = cents[other] - cents[i]
                tangent = np.array([-normal[1], normal[0]])
                tangent /= np.linalg.norm(tangent)
                direction = mid - center
                if direction @ tangent < 0:
                    tangent = -tangent
                pts.append(vor.vertices[v])
                pts.append(mid + tangent * radius)
            pts = np.array(pts)
            hullable = pts - pts.mean(axis=0)
            angles = np.arctan2(hullable[:, 1], hullable[:, 0])
            poly = Polygon(pts[np.argsort(angles)]).convex_hull
        polygons.append(poly.intersection(bbox))
    return polygons


def cells_geojson(centroids: np.ndarray, properties: list[dict] | None = None) -> dict:
    """FeatureCollection of Voronoi cell polygons, one feature per region.

    properties[i] (optional) is merged into feature i, e.g. fused-group labels
    per variable from a fitted solution.
    """
    polys = _finite_voronoi_polygons(centroids)
    features = []
    for i, poly in enumerate(polys):
        props = {"region": i + 1,
                 "centroid": [float(centroids[i][0]), float(centroids[i][1])]}
        if properties is not None:
            props.update(properties[i])
        geom = poly.__geo_interface__
        features.append({"type": "Feature", "geometry": geom, "properties": props})
    return {"type": "FeatureCollection", "features": features}


def group_properties(solution, graph) -> list[dict]:
    """Per-region fused-group ids and coefficient values for the group maps."""
    from .graphs import CoefficientGraph  # noqa: F401 - documentation import

    pt = graph.p_tilde
    m = graph.m_regions
    props = [dict() for _ in range(m)]
    by_var = solution.blocks_by_variable(graph)
    coefs = solution.xi_hat.reshape(m, pt)
    for j in range(1, pt + 1):
        label = {}
        for gid, regions in enumerate(sorted(by_var[j], key=min), start=1):
            for r in regions:
                label[r] = gid
        for r in range(1, m + 1):
            props[r - 1][f"group_x{j}"] = label.get(r, 0)   # 0 = coefficient zero
            props[r - 1][f"coef_x{j}"] = float(coefs[r - 1, j - 1])
    return props


def write_geojson(obj: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True)
