"""Linear centered kernel alignment and layer-by-layer similarity matrices.

The estimator is the biased (plain centering) linear CKA evaluated in
feature space::

    CKA(X, Y) = ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F)

with ``Xc``, ``Yc`` column-centred. This equals the Gram-space HSIC ratio
and costs O(n d^2) instead of O(n^2 d).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, InvalidInputError

ESTIMATOR = "linear-biased"


@dataclass(frozen=True)
class FeatureMatrix:
    data: np.ndarray          # [n, d]
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise InvalidInputError(f"feature matrix must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise InvalidInputError("need at least two samples")
        if not np.isfinite(arr).all():
            raise InvalidInputError("feature matrix contains non-finite entries")
        object.__setattr__(self, "data", arr)

    @property
    def label(self) -> str:
        return ",".join(f"{k}={v}" for k, v in self.source.items()) or "?"


@dataclass
class CkaMatrix:
    values: np.ndarray        # [L_a, L_b], NaN where a layer was degenerate
    row_sources: list
    col_sources: list
    degenerate: list = field(default_factory=list)  # [(i, j, reason)]
    estimator: str = ESTIMATOR


def _as_matrix(x) -> np.ndarray:
    return x.data if isinstance(x, FeatureMatrix) else FeatureMatrix(x).data


def _centered(x: np.ndarray, name: str) -> np.ndarray:
    xc = x - x.mean(axis=0, keepdims=True)
    scale = np.abs(x).max()
    if scale == 0 or np.abs(xc).max() <= 1e-12 * scale:
        raise DegenerateInputError(f"{name} is constant across samples (zero after centering)")
    return xc


def linear_cka(x, y) -> float:
    """Linear CKA between two feature matrices over the same samples."""
    x, y = _as_matrix(x), _as_matrix(y)
    if x.shape[0] != y.shape[0]:
        raise InvalidInputError(f"sample count mismatch: {x.shape[0]} vs {y.shape[0]}")
    xc, yc = _centered(x, "X"), _centered(y, "Y")
    # rescale for floating-point headroom (max-abs first so tiny inputs do not
    # underflow when squared); CKA is scale invariant
    xc = xc / np.abs(xc).max()
    yc = yc / np.abs(yc).max()
    xc = xc / np.linalg.norm(xc)
    yc = yc / np.linalg.norm(yc)
    cross = np.linalg.norm(yc.T @ xc) ** 2
    norm_x = np.linalg.norm(xc.T @ xc)
    norm_y = np.linalg.norm(yc.T @ yc)
    return float(np.clip(cross / (norm_x * norm_y), 0.0, 1.0))


def cka_matrix(layers_a: Sequence, layers_b: Sequence) -> CkaMatrix:
    """Pairwise CKA; degenerate layers become NaN entries listed in ``degenerate``."""
    mats_a = [la if isinstance(la, FeatureMatrix) else FeatureMatrix(la) for la in layers_a]
    mats_b = [lb if isinstance(lb, FeatureMatrix) else FeatureMatrix(lb) for lb in layers_b]
    n = {m.data.shape[0] for m in mats_a + mats_b}
    if len(n) > 1:
        raise InvalidInputError(f"all layers must share the sample count, got {sorted(n)}")
    values = np.full((len(mats_a), len(mats_b)), np.nan)
    degenerate = []
    for i, a in enumerate(mats_a):
        for j, b in enumerate(mats_b):
            if a is b:
                try:
                    _centered(a.data, "X")
                    values[i, j] = 1.0
                except DegenerateInputError as exc:
                    degenerate.append((i, j, str(exc)))
                continue
            try:
                values[i, j] = linear_cka(a, b)
            except DegenerateInputError as exc:
                degenerate.append((i, j, str(exc)))
    return CkaMatrix(values, [m.source for m in mats_a], [m.source for m in mats_b], degenerate)


def write_cka_table(mat: CkaMatrix, path: str | Path) -> Path:
    """Long-format CSV: one row per (row source, column source) pair."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "row_source", "col_source", "cka", "estimator"])
        for i, rs in enumerate(mat.row_sources):
            for j, cs in enumerate(mat.col_sources):
                v = mat.values[i, j]
                w.writerow([i, j, _fmt(rs), _fmt(cs), "" if np.isnan(v) else repr(float(v)),
                            mat.estimator])
    return path


def _fmt(src: dict) -> str:
    return ";".join(f"{k}={v}" for k, v in src.items())


def plot_cka(mat: CkaMatrix, path: str | Path, title: str = "") -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.5 + 0.35 * len(mat.col_sources),
                                    1.2 + 0.35 * len(mat.row_sources)))
    im = ax.imshow(mat.values, vmin=0, vmax=1, cmap="magma", origin="upper")
    ax.set_xticks(range(len(mat.col_sources)))
    ax.set_xticklabels([str(s.get("b", j)) for j, s in enumerate(mat.col_sources)], fontsize=6)
    ax.set_yticks(range(len(mat.row_sources)))
    ax.set_yticklabels([str(s.get("b", i)) for i, s in enumerate(mat.row_sources)], fontsize=6)
    ax.set_xlabel(_axis_label(mat.col_sources))
    ax.set_ylabel(_axis_label(mat.row_sources))
    ax.set_title(title or f"linear CKA ({mat.estimator})", fontsize=8)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def _axis_label(sources) -> str:
    common = {k: v for k, v in (sources[0] if sources else {}).items()
              if k != "b" and all(s.get(k) == v for s in sources)}
    return "block  (" + _fmt(common).replace(";", ", ") + ")"


def quadrant_means(values: np.ndarray) -> tuple[float, float]:
    """Mean of the top-left (early x early) and bottom-right (late x late) quadrants."""
    n, m = values.shape
    h, w = n // 2, m // 2
    early = np.nanmean(values[:h, :w])
    late = np.nanmean(values[n - h:, m - w:])
    return float(early), float(late)
