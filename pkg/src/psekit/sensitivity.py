"""Grid partitioning, leave-one-region-out sensitivity, PSR, correlations.

The sensitivity of a perturbed grid region is measured by removing the
region's perturbation from the adversarial image and recording the logit
change toward the true label (suppression, d0) and away from the target
label (promotion, dt); their sum s ranks how much a region contributes to
the misclassification. The promotion-suppression ratio r = log2(dt / d0)
categorizes each region.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_XI = 1e-3
SUPPRESSION = "suppression"
PROMOTION = "promotion"
BALANCED = "balanced"


@dataclass(frozen=True)
class GridPartition:
    """Row-major tiling of an HxW image plane into g-by-g blocks; edge blocks
    shrink when g does not divide H or W."""

    height: int
    width: int
    grid: int

    @property
    def rows(self) -> int:
        return -(-self.height // self.grid)

    @property
    def cols(self) -> int:
        return -(-self.width // self.grid)

    def __len__(self):
        return self.rows * self.cols

    def region_slices(self, i: int) -> tuple[slice, slice]:
        if not 0 <= i < len(self):
            raise ValueError(f"region index {i} out of range for {len(self)} regions")
        r, c = divmod(i, self.cols)
        return (slice(r * self.grid, min((r + 1) * self.grid, self.height)),
                slice(c * self.grid, min((c + 1) * self.grid, self.width)))

    def region_size(self, i: int) -> int:
        rs, cs = self.region_slices(i)
        return (rs.stop - rs.start) * (cs.stop - cs.start)

    def pixel_mask(self, region_indices) -> np.ndarray:
        """Binary HxW mask covering the union of the given regions."""
        mask = np.zeros((self.height, self.width), np.float32)
        for i in region_indices:
            rs, cs = self.region_slices(i)
            mask[rs, cs] = 1.0
        return mask

    def region_map(self) -> np.ndarray:
        """HxW array of region indices (used for grid-level renderings)."""
        out = np.empty((self.height, self.width), np.int64)
        for i in range(len(self)):
            rs, cs = self.region_slices(i)
            out[rs, cs] = i
        return out


def grid_partition(height: int, width: int, grid: int) -> GridPartition:
    if not 1 <= grid <= min(height, width):
        raise ValueError(f"grid side {grid} out of range [1, {min(height, width)}]")
    return GridPartition(height, width, grid)


@dataclass
class GridScores:
    """Per-region sensitivity scores of one adversarial example."""

    partition: GridPartition
    xi: float
    d0: np.ndarray            # logit change toward the true label
    dt: np.ndarray            # logit change away from the target label
    s: np.ndarray             # d0 + dt
    r: np.ndarray | None = None
    categories: list[str] | None = None
    norms: dict[str, np.ndarray] | None = None

    def to_csv(self, path) -> None:
        if self.r is None or self.norms is None:
            raise ValueError("scores incomplete: run psr() and grid_norms() first")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["region", "d0", "dt", "s", "r", "category", "l1", "l2", "linf"])
            for i in range(len(self.partition)):
                w.writerow([i, repr(float(self.d0[i])), repr(float(self.dt[i])),
                            repr(float(self.s[i])), repr(float(self.r[i])),
                            self.categories[i],
                            repr(float(self.norms["l1"][i])),
                            repr(float(self.norms["l2"][i])),
                            repr(float(self.norms["linf"][i]))])


def leave_one_out_scores(model, x0: np.ndarray, x_adv: np.ndarray, t0: int, t: int,
                         partition: GridPartition, xi: float = DEFAULT_XI) -> GridScores:
    """One forward pass per region, with that region's perturbation removed."""
    x0 = np.asarray(x0, np.float32)
    x_adv = np.asarray(x_adv, np.float32)
    pred_adv, logits_adv = model.predict(x_adv)
    pred_nat, _ = model.predict(x0)
    if pred_nat != t0 or pred_adv != t or t == t0:
        raise ValueError(
            f"label precondition violated: predict(x0)={pred_nat} (want t0={t0}), "
            f"predict(x_adv)={pred_adv} (want t={t})")
    m = len(partition)
    batch = np.repeat(x_adv[None], m, axis=0)
    for i in range(m):
        rs, cs = partition.region_slices(i)
        batch[i, :, rs, cs] = x0[:, rs, cs]
    logits = model.logits_batch(batch)
    d0 = np.maximum(logits[:, t0] - logits_adv[t0], xi).astype(np.float64)
    dt = np.maximum(logits_adv[t] - logits[:, t], xi).astype(np.float64)
    return GridScores(partition, xi, d0, dt, d0 + dt)


def psr(scores: GridScores) -> GridScores:
    """Fill in the promotion-suppression ratio and the +-1 categorization."""
    r = np.log2(scores.dt / scores.d0)
    cats = [SUPPRESSION if v < -1 else PROMOTION if v > 1 else BALANCED for v in r]
    scores.r = r
    scores.categories = cats
    return scores


def grid_norms(delta: np.ndarray, partition: GridPartition, p) -> np.ndarray:
    """Per-region norm of the perturbation (all channels of the region)."""
    delta = np.asarray(delta)
    out = np.empty(len(partition), np.float64)
    for i in range(len(partition)):
        rs, cs = partition.region_slices(i)
        block = delta[:, rs, cs].astype(np.float64).ravel()
        if p == 1:
            out[i] = np.abs(block).sum()
        elif p == 2:
            out[i] = math.sqrt(float((block * block).sum()))
        elif p in (np.inf, "inf"):
            out[i] = np.abs(block).max() if block.size else 0.0
        else:
            raise ValueError(f"unsupported norm order {p!r}")
    return out


def attach_norms(scores: GridScores, delta: np.ndarray) -> GridScores:
    scores.norms = {"l1": grid_norms(delta, scores.partition, 1),
                    "l2": grid_norms(delta, scores.partition, 2),
                    "linf": grid_norms(delta, scores.partition, np.inf)}
    return scores


def pearson(x, y) -> float:
    """Sample correlation; defined as 0 when either vector is constant."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("need at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    denom = math.sqrt(float((dx * dx).sum()) * float((dy * dy).sum()))
    if denom == 0.0:
        return 0.0
    return float((dx * dy).sum() / denom)


def kendall_tau_b(x, y) -> float:
    """Tie-corrected Kendall rank correlation by O(n^2) pair counting."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    n = x.size
    if n < 2:
        raise ValueError("need at least two points")
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(n, 1)
    px, py = sx[iu], sy[iu]
    concordant = int(((px * py) > 0).sum())
    discordant = int(((px * py) < 0).sum())
    ties_x = int((px == 0).sum())
    ties_y = int((py == 0).sum())
    n0 = n * (n - 1) // 2
    denom = math.sqrt((n0 - ties_x) * (n0 - ties_y))
    if denom == 0.0:
        return 0.0
    return (concordant - discordant) / denom


def top_fraction_regions(scores: GridScores, fraction: float = 0.7) -> np.ndarray:
    """Indices of the top `fraction` regions ranked by s (display filter)."""
    m = len(scores.s)
    k = max(1, int(math.ceil(fraction * m)))
    order = np.argsort(-scores.s, kind="stable")
    return np.sort(order[:k])
