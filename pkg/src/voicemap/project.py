"""Exact t-SNE for embedding inspection, plus CSV and scatter export.

This is the O(N^2) formulation on squared Euclidean distances: per-row
precision found by bisection against a target entropy, symmetrized joint
affinities, Student-t low-dimensional kernel, gradient descent with momentum
and early exaggeration. Corpus sizes here are a few hundred points, so the
quadratic cost is irrelevant and exactness makes the behavior testable.
"""

from dataclasses import dataclass
import csv
from pathlib import Path

import numpy as np

from . import font, viz

PERPLEXITY_TOL = 1e-5
MAX_SEARCH_ITERS = 64
EXAGGERATION_ITERS = 250
MOMENTUM_EARLY = 0.5
MOMENTUM_LATE = 0.8
INIT_STD = 1e-4

GENDER_COLORS = {"female": (31, 119, 180), "male": (255, 127, 14)}
STATUS_COLORS = {"healthy": (44, 160, 44), "organic": (214, 39, 40),
                 "inorganic": (148, 103, 189)}
FALLBACK_COLOR = (127, 127, 127)


class PerplexityError(ValueError):
    pass


@dataclass
class Projection:
    points: np.ndarray          # [n x 2]
    seed: int
    final_kl: float
    post_exaggeration_kl: float


def _entropy_bits(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def perplexity_search(distances, target_perplexity: float):
    """Find the precision whose conditional distribution hits the target.

    `distances` are squared distances from one point to every other point
    (self excluded). Returns (probabilities, beta). The bisection must land
    the entropy within PERPLEXITY_TOL bits of log2(target) in at most
    MAX_SEARCH_ITERS steps or it raises with the entropy it reached.
    """
    d = np.asarray(distances, dtype=np.float64).ravel()
    if d.size == 0:
        raise PerplexityError("need at least one neighbor distance")
    if target_perplexity < 1.0 or target_perplexity > d.size:
        raise PerplexityError(
            f"target perplexity {target_perplexity} outside [1, {d.size}]")
    target_h = np.log2(target_perplexity)
    shifted = d - d.min()   # exp argument <= 0, so no overflow
    beta = 1.0
    lo, hi = 0.0, np.inf
    h = np.nan
    for _ in range(MAX_SEARCH_ITERS):
        p = np.exp(-beta * shifted)
        p /= p.sum()
        h = _entropy_bits(p)
        if abs(h - target_h) <= PERPLEXITY_TOL:
            return p, beta
        if h > target_h:        # too flat, sharpen
            lo = beta
            beta = beta * 2.0 if not np.isfinite(hi) else 0.5 * (beta + hi)
        else:                   # too sharp, flatten
            hi = beta
            beta = 0.5 * (lo + beta)
    raise PerplexityError(
        f"no precision reached entropy {target_h:.6f} bits within "
        f"{MAX_SEARCH_ITERS} iterations; achieved entropy {h:.6f}")


def _pairwise_sq_distances(x: np.ndarray) -> np.ndarray:
    s = (x * x).sum(axis=1)
    d = s[:, None] + s[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def joint_affinities(embeddings: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized affinity matrix: nonnegative, zero diagonal, sums to 1."""
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    d = _pairwise_sq_distances(x)
    cond = np.zeros((n, n))
    idx = np.arange(n)
    for i in range(n):
        mask = idx != i
        cond[i, mask], _ = perplexity_search(d[i, mask], perplexity)
    return (cond + cond.T) / (2.0 * n)


def _student_t_numerators(y: np.ndarray) -> np.ndarray:
    q_num = 1.0 / (1.0 + _pairwise_sq_distances(y))
    np.fill_diagonal(q_num, 0.0)
    return q_num


def kl_divergence(p: np.ndarray, points: np.ndarray) -> float:
    """KL(P || Q) in nats for the Student-t kernel at `points`."""
    q_num = _student_t_numerators(np.asarray(points, dtype=np.float64))
    q = np.maximum(q_num / q_num.sum(), 1e-12)
    pm = np.maximum(p, 1e-12)
    return float(np.where(p > 0, p * np.log(pm / q), 0.0).sum())


def tsne(embeddings, perplexity: float = 30.0, iterations: int = 1000,
         learning_rate: float = 200.0, seed: int = 0,
         exaggeration: float = 12.0) -> Projection:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"embeddings must be [n x d], got shape {x.shape}")
    n = x.shape[0]
    if n < 5:
        raise ValueError(f"need at least 5 points, got {n}")
    if not perplexity < n / 3.0:
        raise ValueError(
            f"perplexity {perplexity} too large for {n} points (need < n/3)")
    if iterations < EXAGGERATION_ITERS:
        raise ValueError(f"need at least {EXAGGERATION_ITERS} iterations")
    if not np.isfinite(x).all():
        raise ValueError("embeddings must be finite")

    p = joint_affinities(x, perplexity)
    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, INIT_STD, size=(n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    post_exag_kl = np.nan
    for it in range(1, iterations + 1):
        p_eff = p * exaggeration if it <= EXAGGERATION_ITERS else p
        q_num = _student_t_numerators(y)
        q = q_num / q_num.sum()
        l = (p_eff - q) * q_num
        grad = 4.0 * ((np.diag(l.sum(axis=1)) - l) @ y)
        momentum = MOMENTUM_EARLY if it <= EXAGGERATION_ITERS else MOMENTUM_LATE
        # per-coordinate adaptive step: grow when the gradient opposes the
        # velocity, shrink when it agrees, never below 0.01
        opposed = velocity * grad < 0.0
        gains[opposed] += 0.2
        gains[~opposed] *= 0.8
        np.clip(gains, 0.01, None, out=gains)
        velocity = momentum * velocity - learning_rate * (gains * grad)
        y = y + velocity
        if not np.isfinite(y).all():
            raise FloatingPointError(
                f"embedding diverged at iteration {it}")
        y = y - y.mean(axis=0)
        if it == EXAGGERATION_ITERS:
            post_exag_kl = kl_divergence(p, y)
    return Projection(points=y, seed=seed, final_kl=kl_divergence(p, y),
                      post_exaggeration_kl=post_exag_kl)


def _scale_to_canvas(points: np.ndarray, size: int, margin: int):
    """Joint min-max scaling so relative geometry survives."""
    lo = points.min(axis=0)
    span = float(max(np.ptp(points, axis=0).max(), 1e-12))
    extent = size - 2 * margin - 1
    cols = margin + np.round((points[:, 0] - lo[0]) / span * extent).astype(int)
    rows = (size - 1 - margin
            - np.round((points[:, 1] - lo[1]) / span * extent).astype(int))
    return rows, cols


def scatter_image(points, labels, palette, size: int = 360,
                  margin: int = 24) -> viz.ComposedImage:
    """White canvas, 3x3 dots colored by label, legend at the top left."""
    pts = np.asarray(points, dtype=np.float64)
    labels = list(labels)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(labels) != pts.shape[0]:
        raise ValueError("points must be [n x 2] with one label per point")
    canvas = np.full((size, size, 3), 255, dtype=np.uint8)
    rows, cols = _scale_to_canvas(pts, size, margin)
    for r, c, lab in zip(rows, cols, labels):
        color = palette.get(lab, FALLBACK_COLOR)
        r0, r1 = max(r - 1, 0), min(r + 2, size)
        c0, c1 = max(c - 1, 0), min(c + 2, size)
        canvas[r0:r1, c0:c1] = color
    legend = [lab for lab in palette if lab in set(labels)]
    legend += sorted(set(labels) - set(palette))
    for k, lab in enumerate(legend):
        top = 4 + 10 * k
        canvas[top:top + 5, 4:9] = palette.get(lab, FALLBACK_COLOR)
        mask = font.render(lab)
        w = min(mask.shape[1], size - 12)
        canvas[top - 1:top + 6, 12:12 + w][mask[:, :w]] = 0
    return viz.ComposedImage(canvas)


def export_projection(projection: Projection, metas, out_dir,
                      stem: str = "projection") -> dict:
    """Write the point table and two colored scatters; returns the paths.

    `metas` supplies one (id, gender, status) triple per projected point,
    in point order.
    """
    metas = [tuple(m) for m in metas]
    if len(metas) != projection.points.shape[0]:
        raise ValueError(f"{len(metas)} metadata rows for "
                         f"{projection.points.shape[0]} points")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id", "x", "y", "gender", "status"])
        for (rec_id, gender, status), (px, py) in zip(metas, projection.points):
            writer.writerow([rec_id, f"{px:.6f}", f"{py:.6f}", gender, status])
    paths = {"csv": csv_path}
    for key, column, palette in (("by_gender", 1, GENDER_COLORS),
                                 ("by_status", 2, STATUS_COLORS)):
        image = scatter_image(projection.points,
                              [m[column] for m in metas], palette)
        png_path = out_dir / f"{stem}_{key}.png"
        viz.write_image(image, png_path)
        paths[key] = png_path
    return paths
