"""Template-trajectory planning on a learned cost map.

A fixed bank of templates (K-Means centroids of expert trajectories) is scored
by summing the cost map at each template's points; the negated sums feed a
softmax, giving a Boltzmann distribution over templates that trains with cross
entropy against the nearest-template label of the expert.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor
from .splat import BevGridSpec


@dataclass(frozen=True)
class Trajectory:
    points: np.ndarray  # (T, 3) columns x [m], y [m], t [s]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"trajectory points must be (T, 3), got {pts.shape}")
        if np.any(np.diff(pts[:, 2]) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def horizon(self) -> int:
        return self.points.shape[0]

    def xy(self) -> np.ndarray:
        return self.points[:, :2]


@dataclass(frozen=True)
class TemplateSet:
    templates: tuple[Trajectory, ...]

    def __post_init__(self):
        ts = tuple(self.templates)
        if len(ts) < 2:
            raise ValueError("a template set needs K >= 2")
        horizon = ts[0].horizon
        for t in ts:
            if t.horizon != horizon:
                raise ValueError("all templates must share the same horizon")
        object.__setattr__(self, "templates", ts)

    @property
    def k(self) -> int:
        return len(self.templates)

    @property
    def horizon(self) -> int:
        return self.templates[0].horizon

    def xy_array(self) -> np.ndarray:
        return np.stack([t.xy() for t in self.templates])  # (K, T, 2)


@dataclass
class PlanDistribution:
    probs: Tensor  # (K,), sums to 1

    def numpy(self) -> np.ndarray:
        return self.probs.data


def _flat_xy(trajectories) -> np.ndarray:
    horizon = trajectories[0].horizon
    for t in trajectories:
        if t.horizon != horizon:
            raise ValueError("all trajectories must share the same horizon")
    return np.stack([t.xy().reshape(-1) for t in trajectories])


def fit_templates(expert: list[Trajectory], k: int, seed: int,
                  max_iter: int = 100, tol: float = 1e-6) -> TemplateSet:
    """K-Means (k-means++ init, fixed seed) over flattened xy coordinates."""
    if len(expert) < k:
        raise ValueError(f"need at least k={k} trajectories, got {len(expert)}")
    data = _flat_xy(expert)
    rng = np.random.default_rng(seed)
    n = data.shape[0]

    centroids = np.empty((k, data.shape[1]))
    centroids[0] = data[rng.integers(n)]
    d2 = ((data - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = data[rng.integers(n)]
        else:
            centroids[i] = data[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((data - centroids[i]) ** 2).sum(axis=1))

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dists = ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(dists, axis=1)
        new_centroids = centroids.copy()
        for i in range(k):
            members = data[assign == i]
            if members.shape[0]:
                new_centroids[i] = members.mean(axis=0)
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break

    times = expert[0].points[:, 2]
    horizon = expert[0].horizon
    templates = tuple(
        Trajectory(np.column_stack([c.reshape(horizon, 2), times])) for c in centroids)
    return TemplateSet(templates)


def template_cell_indices(ts: TemplateSet, spec: BevGridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-cell flat index and in-grid mask per template point, both (K, T)."""
    xy = ts.xy_array()
    ix = np.floor((xy[..., 0] - spec.x_min) / spec.cell).astype(np.int64)
    iy = np.floor((xy[..., 1] - spec.y_min) / spec.cell).astype(np.int64)
    mask = (ix >= 0) & (ix < spec.nx) & (iy >= 0) & (iy < spec.ny)
    flat = np.where(mask, ix * spec.ny + iy, 0)
    return flat, mask


def _bilinear_weights(ts: TemplateSet, spec: BevGridSpec):
    """Four (index, weight) pairs per point for bilinear cost sampling.

    Not equivalent to nearest-cell lookup; behind the `bilinear` flag only.
    """
    xy = ts.xy_array()
    gx = (xy[..., 0] - spec.x_min) / spec.cell - 0.5
    gy = (xy[..., 1] - spec.y_min) / spec.cell - 0.5
    x0, y0 = np.floor(gx).astype(np.int64), np.floor(gy).astype(np.int64)
    fx, fy = gx - x0, gy - y0
    pairs = []
    for dx_, dy_, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx_, y0 + dy_
        ok = (xi >= 0) & (xi < spec.nx) & (yi >= 0) & (yi < spec.ny)
        pairs.append((np.where(ok, xi * spec.ny + yi, 0), np.where(ok, w, 0.0)))
    return pairs


def score_templates(cost_values: Tensor, spec: BevGridSpec, ts: TemplateSet,
                    bilinear: bool = False) -> PlanDistribution:
    """Boltzmann distribution over templates for one (1|B=1, 1, X, Y) cost map.

    Out-of-grid template points contribute zero cost; the gradient reaches
    exactly the cells a template touched.
    """
    shape = cost_values.data.shape
    if shape[-2] != spec.nx or shape[-1] != spec.ny or int(np.prod(shape[:-2])) != 1:
        raise engine.ShapeError(f"cost map {shape} does not match grid {spec.nx}x{spec.ny}")
    k, t = ts.k, ts.horizon
    flat_cost = engine.reshape(cost_values, (spec.nx * spec.ny, 1))
    dt = cost_values.data.dtype
    if bilinear:
        sampled = None
        for idx, w in _bilinear_weights(ts, spec):
            part = engine.mul(engine.gather_rows(flat_cost, idx.reshape(-1)),
                              Tensor(w.reshape(-1, 1).astype(dt)))
            sampled = part if sampled is None else engine.add(sampled, part)
    else:
        idx, mask = template_cell_indices(ts, spec)
        sampled = engine.mul(engine.gather_rows(flat_cost, idx.reshape(-1)),
                             Tensor(mask.reshape(-1, 1).astype(dt)))
    costs = engine.sum_(engine.reshape(sampled, (k, t)), axis=1)
    probs = engine.softmax(engine.neg(costs), axis=0)
    return PlanDistribution(probs=probs)


def plan_label(expert: Trajectory, ts: TemplateSet) -> int:
    """Nearest template by L2 on flattened xy; ties go to the lowest index."""
    if expert.horizon != ts.horizon:
        raise ValueError(f"expert horizon {expert.horizon} vs templates {ts.horizon}")
    diffs = ts.xy_array() - expert.xy()[None]
    return int(np.argmin((diffs ** 2).sum(axis=(1, 2))))


def planning_loss(dist: PlanDistribution, label: int) -> Tensor:
    k = dist.probs.data.shape[0]
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for K={k}")
    picked = engine.gather_rows(engine.reshape(dist.probs, (k, 1)), np.array([label]))
    return engine.neg(engine.sum_(engine.log(picked)))


def top_k_accuracy(dist, label: int, k: int) -> int:
    """1 if the label is among the k most probable templates (ties by index)."""
    probs = dist.numpy() if isinstance(dist, PlanDistribution) else np.asarray(dist)
    if k > probs.shape[0]:
        raise ValueError(f"k={k} exceeds K={probs.shape[0]}")
    ranking = np.argsort(-probs, kind="stable")
    return int(label in ranking[:k])


# ---------------------------------------------------------------------------
# template set text format: header "K T", then K*T rows "x y t"


def write_templates(path, ts: TemplateSet):
    with open(path, "w") as f:
        f.write(f"{ts.k} {ts.horizon}\n")
        for traj in ts.templates:
            for x, y, t in traj.points:
                f.write(f"{float(x)!r} {float(y)!r} {float(t)!r}\n")


def read_templates(path) -> TemplateSet:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 2:
            raise ValueError(f"template file {path}: bad header")
        k, horizon = int(header[0]), int(header[1])
        rows = np.loadtxt(f, dtype=np.float64).reshape(k, horizon, 3)
    return TemplateSet(tuple(Trajectory(r) for r in rows))
