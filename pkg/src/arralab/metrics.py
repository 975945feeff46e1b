"""Evaluation metrics: Fréchet feature distance, CLIP-score analog, MS-SSIM,
and the shape-world attribute oracle."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from arralab.corpus import (
    BACKGROUND,
    PALETTES,
    SHAPES,
    SceneObject,
    SceneSpec,
    cell_box,
    parse_caption,
    shape_mask,
)
from arralab.errors import ShapeError

# ---------------------------------------------------------------------------
# Fréchet distance


@dataclass
class FeatureSet:
    features: np.ndarray  # n x D
    source: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]


def _moments(fs: FeatureSet):
    x = fs.features
    if len(x) < 2:
        raise ValueError(f"feature set {fs.source!r} needs n >= 2, got {len(x)}")
    if not np.isfinite(x).all():
        raise ValueError(f"feature set {fs.source!r} holds non-finite values")
    if len(x) < x.shape[1] + 1:
        warnings.warn(
            f"feature set {fs.source!r}: n={len(x)} < D+1={x.shape[1] + 1}; covariance is singular",
            stacklevel=3,
        )
    return x.mean(0), np.atleast_2d(np.cov(x, rowvar=False))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureSet, b: FeatureSet, neg_tol: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The trace of the product root is taken from the eigenvalues of the
    symmetric matrix sqrt(S_a) S_b sqrt(S_a), which shares its spectrum with
    S_a S_b.
    """
    mu_a, s_a = _moments(a)
    mu_b, s_b = _moments(b)
    root_a = _psd_sqrt(s_a)
    m = root_a @ s_b @ root_a
    w = np.linalg.eigvalsh((m + m.T) / 2)
    if w.min() < -neg_tol:
        raise ValueError(f"covariance product has eigenvalue {w.min():.3g} < -{neg_tol}")
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu_a - mu_b
    d = float(diff @ diff + np.trace(s_a) + np.trace(s_b) - 2.0 * tr_sqrt)
    return max(d, 0.0)


# ---------------------------------------------------------------------------
# CLIP-score analog


@torch.no_grad()
def clip_score(encoder, vocab, images, captions) -> float:
    """Mean cosine between image CLS embeddings and caption embeddings."""
    if len(images) != len(captions):
        raise ValueError(f"{len(images)} images vs {len(captions)} captions")
    if len(captions) == 0:
        raise ValueError("clip_score of an empty set is undefined")
    from arralab.foundation import encode_text_global, global_features

    img = global_features(encoder, np.asarray(images, dtype=np.float32), "cls")
    txt = encode_text_global(encoder, vocab, list(captions))
    return float((img * txt).sum(-1).mean())


# ---------------------------------------------------------------------------
# MS-SSIM

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_C1, _C2 = 0.01**2, 0.03**2


def _gaussian(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Valid separable filtering of (H, W, C) over the two spatial axes."""
    from numpy.lib.stride_tricks import sliding_window_view

    k = len(g)
    x = np.tensordot(sliding_window_view(x, k, axis=0), g, axes=([-1], [0]))
    return np.tensordot(sliding_window_view(x, k, axis=1), g, axes=([-1], [0]))


def _ssim_parts(a, b, win: int, sigma: float):
    g = _gaussian(min(win, a.shape[0], a.shape[1]), sigma)
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    s_aa = _filter(a * a, g) - mu_a**2
    s_bb = _filter(b * b, g) - mu_b**2
    s_ab = _filter(a * b, g) - mu_a * mu_b
    cs = (2 * s_ab + _C2) / (s_aa + s_bb + _C2)
    lum = (2 * mu_a * mu_b + _C1) / (mu_a**2 + mu_b**2 + _C1)
    # per-channel means, averaged over channels at the end
    return (lum * cs).mean(axis=(0, 1)), cs.mean(axis=(0, 1))


def ms_ssim(a, b, scales: int = 3, win: int = 7, sigma: float = 1.5) -> float:
    """Multi-scale SSIM with the standard weights truncated to ``scales`` and
    renormalized; negative per-scale terms are clipped to 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("ms_ssim", {"a": a.shape, "b": b.shape})
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < 16:
        raise ValueError("ms_ssim needs images of side >= 16")
    w = np.asarray(MS_SSIM_WEIGHTS[:scales])
    w = w / w.sum()
    terms = []
    for s in range(scales):
        ssim, cs = _ssim_parts(a, b, win, sigma)
        terms.append(np.clip(ssim if s == scales - 1 else cs, 0.0, None))
        if s < scales - 1:
            h, wd = (a.shape[0] // 2) * 2, (a.shape[1] // 2) * 2
            a = a[:h, :wd].reshape(h // 2, 2, wd // 2, 2, -1).mean(axis=(1, 3))
            b = b[:h, :wd].reshape(h // 2, 2, wd // 2, 2, -1).mean(axis=(1, 3))
    per_channel = np.prod(np.stack(terms) ** w[:, None], axis=0)
    return float(per_channel.mean())


# ---------------------------------------------------------------------------
# attribute oracle

CONFIDENCE = 0.6


def _corr(m: np.ndarray, t: np.ndarray) -> float:
    m = m.astype(np.float64).ravel()
    t = t.astype(np.float64).ravel()
    if m.std() == 0 or t.std() == 0:
        return 0.0
    return float(np.corrcoef(m, t)[0, 1])


def detect_attributes(image, palette: str = "primary", threshold: float = CONFIDENCE) -> SceneSpec:
    """Classify each grid cell by nearest-palette-color masks correlated
    against the shape templates; weak cells are reported empty."""
    img = np.asarray(image, dtype=np.float64)
    canvas = img.shape[0]
    names = list(PALETTES[palette])
    refs = np.asarray([BACKGROUND] + [PALETTES[palette][c] for c in names])
    objects = []
    for cell in range(9):
        y0, x0, side = cell_box(cell, canvas)
        patch = img[y0 : y0 + side, x0 : x0 + side]
        nearest = ((patch[:, :, None, :] - refs) ** 2).sum(-1).argmin(-1)
        best, label = threshold, None
        for ci, color in enumerate(names, start=1):
            m = nearest == ci
            if not m.any():
                continue
            for shape in SHAPES:
                score = _corr(m, shape_mask(shape, side))
                if score >= best:
                    best, label = score, (shape, color)
        if label is not None:
            objects.append(SceneObject(cell, *label))
    return SceneSpec(tuple(objects), canvas)


def attribute_accuracy(images, captions, palette: str = "primary") -> dict:
    """Compare detected scenes with parsed captions.

    object_recall: fraction of caption objects found with exact attributes.
    position_accuracy: fraction of caption objects whose cell is occupied.
    color_accuracy: fraction of caption objects found with the right color.
    exact_match: fraction of images whose detected scene equals the caption.
    """
    if len(images) != len(captions):
        raise ValueError(f"{len(images)} images vs {len(captions)} captions")
    n_obj = found = placed = colored = exact = 0
    for img, cap in zip(images, captions):
        truth = parse_caption(cap, canvas=np.asarray(img).shape[0])
        got = detect_attributes(img, palette)
        by_cell = {o.cell: o for o in got.objects}
        for o in truth.objects:
            n_obj += 1
            d = by_cell.get(o.cell)
            if d is None:
                continue
            placed += 1
            colored += d.color == o.color
            found += d == o
        exact += got.objects == truth.objects
    n = max(len(captions), 1)
    return {
        "object_recall": found / max(n_obj, 1),
        "position_accuracy": placed / max(n_obj, 1),
        "color_accuracy": colored / max(n_obj, 1),
        "exact_match": exact / n,
    }
