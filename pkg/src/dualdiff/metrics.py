"""Distribution distances, overlap scores, and texture-fidelity measures.

Images are embedded as 29-dimensional handcrafted statistics (no pretrained
networks); the Fréchet / kernel-MMD machinery on top is the standard one.
"""
from __future__ import annotations

import numpy as np

FEATURE_DIM = 29


def _gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image.mean(axis=0)


def masked_peak_frequency(image: np.ndarray, mask: np.ndarray) -> float:
    """Dominant radial frequency (cycles per image width) inside the mask.

    The masked, mean-removed image is transformed and annulus total energy is
    maximized over integer radial bins 1..N/2; an all-zero spectrum reports
    bin 0. White noise peaks at the outermost (largest) annulus.
    """
    gray = _gray(image)
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 3:
        m = m[0]
    windowed = np.where(m, gray - gray[m].mean(), 0.0) if m.any() else gray - gray.mean()
    f = np.fft.fft2(windowed)
    energy = np.abs(f) ** 2
    n = gray.shape[0]
    fy = np.fft.fftfreq(gray.shape[0]) * n
    fx = np.fft.fftfreq(gray.shape[1]) * n
    rad = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    nmax = n // 2
    best_bin, best_energy = 0, 0.0
    for b in range(1, nmax + 1):
        e = energy[(rad >= b - 0.5) & (rad < b + 0.5)].sum()
        if e > best_energy:
            best_bin, best_energy = b, e
    return float(best_bin) if best_energy > 1e-12 else 0.0


def region_contrast(image: np.ndarray, mask: np.ndarray) -> float:
    """Mean intensity gap between the masked region and its complement."""
    gray = _gray(image)
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 3:
        m = m[0]
    if not m.any() or m.all():
        return 0.0
    return float(gray[m].mean() - gray[~m].mean())


def feature_vector(image: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """29-d handcrafted embedding: per-channel means/stds, an 8-bin gradient
    magnitude histogram, an 8-bin FFT radial-energy profile, masked texture
    frequency and contrast, and global/region intensity summaries."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    c = image.shape[0]
    means = np.zeros(3)
    stds = np.zeros(3)
    means[:min(c, 3)] = [image[i].mean() for i in range(min(c, 3))]
    stds[:min(c, 3)] = [image[i].std() for i in range(min(c, 3))]

    gray = _gray(image)
    gy, gx = np.gradient(gray)
    gmag = np.sqrt(gy ** 2 + gx ** 2)
    ghist, _ = np.histogram(np.clip(gmag, 0.0, 1.0), bins=8, range=(0.0, 1.0))
    ghist = ghist / max(gmag.size, 1)

    f = np.fft.fft2(gray - gray.mean())
    energy = np.abs(f) ** 2
    n = gray.shape[0]
    fy = np.fft.fftfreq(gray.shape[0]) * n
    fx = np.fft.fftfreq(gray.shape[1]) * n
    rad = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    nyq = n / 2
    edges = np.linspace(0.0, nyq + 1e-9, 9)
    radial = np.array([energy[(rad >= lo) & (rad < hi) & (rad > 0)].sum()
                       for lo, hi in zip(edges[:-1], edges[1:])])
    total = radial.sum()
    radial = radial / total if total > 0 else radial

    if mask is None:
        m2 = np.ones(gray.shape, dtype=bool)
    else:
        m2 = np.asarray(mask, dtype=bool)
        if m2.ndim == 3:
            m2 = m2[0]
    area = float(m2.mean())
    mean_in = float(gray[m2].mean()) if m2.any() else 0.0
    mean_out = float(gray[~m2].mean()) if not m2.all() else 0.0
    peak = masked_peak_frequency(image, m2)
    contrast = region_contrast(image, m2)

    vec = np.concatenate([
        means, stds, ghist, radial,
        [peak, contrast, gray.mean(), gray.std(), area, mean_in, mean_out],
    ])
    assert vec.shape == (FEATURE_DIM,)
    return vec


def feature_matrix(images, masks=None) -> np.ndarray:
    masks = masks if masks is not None else [None] * len(images)
    return np.stack([feature_vector(im, mk) for im, mk in zip(images, masks)])


# --------------------------------------------------------------------------
# Frechet distance
# --------------------------------------------------------------------------


def sqrtm_psd(mat: np.ndarray, clip_tol: float = 1e-10) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix via eigendecomposition;
    eigenvalues inside -clip_tol round-off are clamped to zero."""
    sym = 0.5 * (mat + mat.T)
    w, v = np.linalg.eigh(sym)
    if w.min() < -max(clip_tol, clip_tol * abs(w.max())):
        raise ValueError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def gaussian_frechet(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2))."""
    mu_a, mu_b = np.asarray(mu_a, float), np.asarray(mu_b, float)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    diff = float(((mu_a - mu_b) ** 2).sum())
    ra = sqrtm_psd(cov_a)
    cross = sqrtm_psd(ra @ cov_b @ ra)
    return diff + float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray,
                     allow_diagonal: bool = True) -> float:
    """Gaussian Frechet distance between two feature sets.

    Full covariances need at least d+1 samples per side; below that the
    computation falls back to diagonal covariances (or raises when the
    fallback is disallowed).
    """
    feats_a, feats_b = np.atleast_2d(feats_a), np.atleast_2d(feats_b)
    d = feats_a.shape[1]
    if feats_b.shape[1] != d:
        raise ValueError("feature dimensionality differs between sets")
    if min(len(feats_a), len(feats_b)) < 2:
        raise ValueError("need at least 2 samples per side")
    full = min(len(feats_a), len(feats_b)) >= d + 1
    if not full and not allow_diagonal:
        raise ValueError(f"need >= {d + 1} samples per side for full covariance")
    mu_a, mu_b = feats_a.mean(0), feats_b.mean(0)
    if full:
        return gaussian_frechet(mu_a, np.cov(feats_a, rowvar=False),
                                mu_b, np.cov(feats_b, rowvar=False))
    va = feats_a.var(0, ddof=1)
    vb = feats_b.var(0, ddof=1)
    return float(((mu_a - mu_b) ** 2).sum()
                 + ((np.sqrt(va) - np.sqrt(vb)) ** 2).sum())


# --------------------------------------------------------------------------
# Kernel MMD (KID)
# --------------------------------------------------------------------------


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel (x.y/d + 1)^3.

    The estimator may legitimately be slightly negative; it is reported as-is.
    """
    x, y = np.atleast_2d(feats_a), np.atleast_2d(feats_b)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValueError("need at least 2 samples per side")
    k_xx = _poly_kernel(x, x)
    k_yy = _poly_kernel(y, y)
    k_xy = _poly_kernel(x, y)
    sum_xx = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    sum_yy = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
    return float(sum_xx + sum_yy - 2.0 * k_xy.mean())


# --------------------------------------------------------------------------
# Segmentation overlap
# --------------------------------------------------------------------------


def dice_iou(pred: np.ndarray, true: np.ndarray) -> tuple[float, float]:
    """(Dice, IoU) of two binary masks; both 1.0 when both masks are empty."""
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(true, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    inter = float(np.logical_and(p, t).sum())
    ps, ts = float(p.sum()), float(t.sum())
    union = ps + ts - inter
    if ps + ts == 0:
        return 1.0, 1.0
    dice = 2.0 * inter / (ps + ts)
    iou = inter / union if union > 0 else 1.0
    return dice, iou


# --------------------------------------------------------------------------
# Diversity and texture fidelity
# --------------------------------------------------------------------------


def diversity(feats: np.ndarray) -> float:
    """Mean pairwise L2 distance between feature vectors (0 iff all equal)."""
    feats = np.atleast_2d(feats)
    n = len(feats)
    if n < 2:
        raise ValueError("diversity needs at least 2 images")
    total, pairs = 0.0, 0
    for i in range(n):
        d = np.linalg.norm(feats[i + 1:] - feats[i], axis=1)
        total += d.sum()
        pairs += len(d)
    return total / pairs


def texture_fidelity_parts(image, mask, gcfg) -> tuple[float, float]:
    """(frequency error in FFT bins, contrast error) against the dataset's
    canonical lesion texture."""
    m = np.asarray(mask)
    area = m.sum() if m.ndim == 2 else m[0].sum()
    if area < 16:
        raise ValueError("mask area below 16 pixels")
    freq_err = abs(masked_peak_frequency(image, mask) - gcfg.canonical_freq)
    contrast_err = abs(region_contrast(image, mask) - gcfg.canonical_contrast)
    return float(freq_err), float(contrast_err)


def texture_fidelity(image, mask, gcfg) -> float:
    """Sum of frequency and contrast errors; 0 only at the exact canonical
    texture. Lower is better."""
    f, c = texture_fidelity_parts(image, mask, gcfg)
    return f + c
