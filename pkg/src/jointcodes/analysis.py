"""Diagnostics on learned latent spaces and appearance-swap decoding."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from . import autodiff as ad
from .data import Arrays
from .models import ModelParams, decoder_forward, encoder_forward

_WHICH = {"appearance": ("appearance", "rgb"), "structure_A": ("structure_A", "rgb"), "structure_B": ("structure_B", "depth")}


@dataclass
class EmbeddingTable:
    matrix: np.ndarray  # (N, d) eval-mode means
    appearance: np.ndarray  # (N,)
    structure: np.ndarray  # (N,)
    view_angle: np.ndarray  # (N,)

    def __post_init__(self):
        n = len(self.matrix)
        if not (len(self.appearance) == len(self.structure) == len(self.view_angle) == n):
            raise ValueError("EmbeddingTable: label count must equal row count")

    def __len__(self):
        return len(self.matrix)

    def labels(self, name: str) -> np.ndarray:
        if name in ("appearance", "appearance_class"):
            return self.appearance
        if name in ("structure", "structure_class"):
            return self.structure
        raise KeyError(f"unknown label {name!r}")


def encode_mu(params: ModelParams, which: str, images, chunk: int = 256) -> np.ndarray:
    rows = []
    for start in range(0, len(images), chunk):
        mu, _ = encoder_forward(params, which, images[start : start + chunk], "eval")
        rows.append(mu.data)
    return np.concatenate(rows, axis=0)


def extract_embeddings(params: ModelParams, data: Arrays, which: str) -> EmbeddingTable:
    """Eval-mode mean codes of one encoder, row-aligned with ``data``."""
    if which not in _WHICH:
        raise KeyError(f"which must be one of {sorted(_WHICH)}, got {which!r}")
    enc, field = _WHICH[which]
    images = getattr(data, field)
    if images.shape[-1] != params.config.image_size:
        raise ValueError(
            f"architecture mismatch: model expects {params.config.image_size}px images, data has {images.shape[-1]}px"
        )
    return EmbeddingTable(encode_mu(params, enc, images), data.appearance.copy(), data.structure.copy(), data.view_angle.copy())


def _matrix(t) -> np.ndarray:
    return t.matrix if isinstance(t, EmbeddingTable) else np.asarray(t, dtype=np.float64)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm row")
    return m / norms


def retrieval_accuracy(za, zb) -> float:
    """Top-1 cross-modal retrieval by cosine; ties count as misses."""
    a, b = _unit_rows(_matrix(za)), _unit_rows(_matrix(zb))
    if a.shape != b.shape:
        raise ValueError(f"retrieval_accuracy: shape mismatch {a.shape} vs {b.shape}")
    sim = a @ b.T
    diag = np.diag(sim).copy()
    np.fill_diagonal(sim, -np.inf)
    return float(np.mean(diag > sim.max(axis=1)))


def alignment(za, zs) -> float:
    """Mean squared cosine between paired rows."""
    a, s = _unit_rows(_matrix(za)), _unit_rows(_matrix(zs))
    if a.shape != s.shape:
        raise ValueError(f"alignment: shape mismatch {a.shape} vs {s.shape}")
    return float(np.mean(np.einsum("ij,ij->i", a, s) ** 2))


def matched_cosine(za, zb) -> float:
    a, b = _unit_rows(_matrix(za)), _unit_rows(_matrix(zb))
    return float(np.mean(np.einsum("ij,ij->i", a, b)))


def mean_appearance(table: EmbeddingTable, appearance_class: int) -> np.ndarray:
    rows = table.matrix[table.appearance == appearance_class]
    if len(rows) == 0:
        raise ValueError(f"no rows with appearance class {appearance_class}")
    return rows.mean(axis=0)


def swap_decode(params: ModelParams, rgb, z_a_override) -> np.ndarray:
    """Decode the structure code of ``rgb`` with a replacement appearance code.

    ``rgb`` is one (3, H, W) image or a batch; ``z_a_override`` a length-d
    vector (broadcast over the batch) or a (B, d) matrix.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    single = rgb.ndim == 3
    if single:
        rgb = rgb[None]
    z = np.asarray(z_a_override, dtype=np.float64)
    d = params.config.latent_dim
    if z.shape[-1] != d:
        raise ValueError(f"swap_decode: override has dimension {z.shape[-1]}, model latent_dim is {d}")
    if z.ndim == 1:
        z = np.repeat(z[None], len(rgb), axis=0)
    z_s, _ = encoder_forward(params, "structure_A", rgb, "eval")
    out = decoder_forward(params, ad.Tensor(z), z_s, "eval").data
    return out[0] if single else out


@dataclass
class LinearProbe:
    weights: np.ndarray  # (d + 1, K), last row is the bias
    classes: np.ndarray

    def predict(self, x) -> np.ndarray:
        x = _matrix(x)
        scores = np.hstack([x, np.ones((len(x), 1))]) @ self.weights
        return self.classes[np.argmax(scores, axis=1)]


def fit_probe(x, labels) -> LinearProbe:
    """Least-squares one-vs-rest linear classifier with bias."""
    x = _matrix(x)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("fit_probe: need at least 2 classes")
    targets = (labels[:, None] == classes[None]).astype(np.float64)
    xb = np.hstack([x, np.ones((len(x), 1))])
    w, *_ = np.linalg.lstsq(xb, targets, rcond=None)
    return LinearProbe(w, classes)


def linear_probe(table: EmbeddingTable, label: str, seed: int = 0, folds: int = 5) -> float:
    """Held-out accuracy of a linear probe, by seeded ``folds``-fold cross-validation.

    Every row is predicted exactly once by a probe that never saw it.
    """
    y = table.labels(label)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2 or counts.min() < 10:
        raise ValueError(f"linear_probe: need >= 2 classes with >= 10 rows each, got counts {dict(zip(classes, counts))}")
    perm = np.random.default_rng(seed).permutation(len(y))
    correct = 0
    for held in np.array_split(perm, folds):
        train = np.setdiff1d(perm, held)
        probe = fit_probe(table.matrix[train], y[train])
        correct += int(np.sum(probe.predict(table.matrix[held]) == y[held]))
    return correct / len(y)


def pca_project(table, k: int = 2):
    """Top-``k`` principal coordinates and explained-variance fractions.

    Each direction's sign is fixed so its largest-magnitude component is positive.
    """
    x = _matrix(table)
    n = len(x)
    if n <= k:
        raise ValueError(f"pca_project: need more than {k} rows, got {n}")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s**2
    if var.sum() == 0:
        raise ValueError("pca_project: data has zero variance")
    dirs = vt[:k].copy()
    if len(dirs) < k:
        dirs = np.vstack([dirs, np.zeros((k - len(dirs), x.shape[1]))])
    for r in range(len(dirs)):
        j = np.argmax(np.abs(dirs[r]))
        if dirs[r, j] < 0:
            dirs[r] = -dirs[r]
    frac = np.zeros(k)
    frac[: min(k, len(var))] = var[:k] / var.sum()
    return xc @ dirs.T, frac


# ---------------------------------------------------------------------------
# exports


def write_embedding_csv(path, table: EmbeddingTable, coords=None) -> None:
    """Row index, label columns, then either ``coords`` or the raw embedding."""
    values = table.matrix if coords is None else np.asarray(coords)
    prefix = "z" if coords is None else "pc"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "appearance_class", "structure_class", "view_angle"] + [f"{prefix}{j}" for j in range(values.shape[1])])
        for i in range(len(table)):
            w.writerow(
                [i, int(table.appearance[i]), int(table.structure[i]), repr(float(table.view_angle[i]))]
                + [repr(float(v)) for v in values[i]]
            )


_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def scatter_svg(coords, labels, title: str = "", size: int = 400) -> str:
    """Standalone SVG scatter plot, one circle per row colored by label."""
    xy = np.asarray(coords, dtype=np.float64)[:, :2]
    labels = np.asarray(labels)
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    margin = 20
    pts = margin + (xy - lo) / span * (size - 2 * margin)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{margin}" y="14" font-family="sans-serif" font-size="12">{escape(title)}</text>')
    classes = {c: k for k, c in enumerate(np.unique(labels))}
    for (px, py), lab in zip(pts, labels):
        color = _COLORS[classes[lab] % len(_COLORS)]
        out.append(f'<circle cx="{px:.2f}" cy="{size - py:.2f}" r="3" fill="{color}" fill-opacity="0.8"/>')
    out.append("</svg>")
    return "\n".join(out)
