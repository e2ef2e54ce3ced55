"""Correlation-distillation and Charbonnier loss kernels with gradients.

Feature maps are (C, H, W) arrays.  A caller-supplied projection (the
1x1-convolution weight, identity when omitted) maps channels, positions are
flattened column-per-pixel, each column is L2-normalized, and the cosine
Gram matrix of the columns is compared between two maps under a smooth
square-root envelope:

    L = sqrt(|C_s - C_r|_F^2 + eps^2)

Per-column normalization makes the Gram matrix symmetric with unit
diagonal and entries in [-1, 1].  Gradients are analytic (chain rule
through the normalization and the Gram product) and are verified against
central finite differences in the test suite.

Combined-objective weights used by the downstream training recipe are
recorded here for reference only; nothing in this module applies them.
"""

import numpy as np

#: reference weights of the downstream five-term training objective
LOSS_WEIGHTS = (0.05, 1.00, 0.01, 0.05, 1.00)

_ZERO_COLUMN_TOL = 1e-12


class DegenerateFeatureError(ValueError):
    """A flattened feature column has (numerically) zero norm."""


def _check_feature(fmap, name="feature map"):
    f = np.asarray(fmap, dtype=float)
    if f.ndim != 3 or min(f.shape) < 1:
        raise ValueError(f"{name} must be (C, H, W) with all dims >= 1, got {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError(f"{name} contains non-finite values")
    return f


def project_and_flatten(fmap, proj=None):
    """Project channels with a (C', C) matrix and flatten to (C', H*W).

    Spatial positions become columns in row-major order; proj=None means
    identity (no channel mixing).
    """
    f = _check_feature(fmap)
    c, h, w = f.shape
    flat = f.reshape(c, h * w)
    if proj is None:
        return flat.copy()
    p = np.asarray(proj, dtype=float)
    if p.ndim != 2 or p.shape[1] != c:
        raise ValueError(f"projection shape {p.shape} incompatible with {c} channels")
    return p @ flat


def self_correlation(m):
    """Cosine-similarity Gram matrix of the columns of a (C', N) matrix."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    norms = np.linalg.norm(m, axis=0)
    if np.any(norms <= _ZERO_COLUMN_TOL):
        bad = int(np.argmax(norms <= _ZERO_COLUMN_TOL))
        raise DegenerateFeatureError(f"feature column {bad} has zero norm")
    u = m / norms
    corr = u.T @ u
    # kill rounding drift so the advertised invariants hold exactly enough
    corr = 0.5 * (corr + corr.T)
    np.clip(corr, -1.0, 1.0, out=corr)
    return corr


def _normalized_gram(fmap, proj):
    m = project_and_flatten(fmap, proj)
    norms = np.linalg.norm(m, axis=0)
    if np.any(norms <= _ZERO_COLUMN_TOL):
        bad = int(np.argmax(norms <= _ZERO_COLUMN_TOL))
        raise DegenerateFeatureError(f"feature column {bad} has zero norm")
    u = m / norms
    return m, u, norms, u.T @ u


def cd_loss(fs, fr, ps=None, pr=None, eps=1e-3):
    """Correlation-distillation loss between two feature maps.

    sqrt(|C_s - C_r|_F^2 + eps^2): equals eps exactly when the maps agree,
    and is symmetric in the two arguments.
    """
    fs = _check_feature(fs, "fs")
    fr = _check_feature(fr, "fr")
    if fs.shape[1:] != fr.shape[1:]:
        raise ValueError(f"spatial dims differ: {fs.shape[1:]} vs {fr.shape[1:]}")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    _, _, _, cs = _normalized_gram(fs, ps)
    _, _, _, cr = _normalized_gram(fr, pr)
    d = cs - cr
    return float(np.sqrt(np.sum(d * d) + eps * eps))


def cd_loss_grad(fs, fr, ps=None, pr=None, eps=1e-3):
    """Analytic gradients of cd_loss with respect to both feature maps.

    Returns (dL/dfs, dL/dfr), each shaped like its input.
    """
    fs = _check_feature(fs, "fs")
    fr = _check_feature(fr, "fr")
    if fs.shape[1:] != fr.shape[1:]:
        raise ValueError(f"spatial dims differ: {fs.shape[1:]} vs {fr.shape[1:]}")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    _, us, ns, cs = _normalized_gram(fs, ps)
    _, ur, nr, cr = _normalized_gram(fr, pr)
    d = cs - cr
    loss = np.sqrt(np.sum(d * d) + eps * eps)
    g = d / loss                       # dL/dC_s; dL/dC_r is its negation

    def back(u, norms, grad_c, proj, shape):
        # C = U^T U  =>  dL/dU = U (G + G^T); G is symmetric only up to
        # rounding, so keep the exact form
        du = u @ (grad_c + grad_c.T)
        # through per-column normalization: (I - u u^T)/n per column
        dm = (du - u * np.sum(u * du, axis=0)) / norms
        if proj is not None:
            dm = np.asarray(proj, dtype=float).T @ dm
        return dm.reshape(shape)

    gs = back(us, ns, g, ps, fs.shape)
    gr = back(ur, nr, -g, pr, fr.shape)
    return gs, gr


def charbonnier(a, b, eps=1e-3):
    """Elementwise-mean Charbonnier distance sqrt((a-b)^2 + eps^2)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    d = a - b
    return float(np.mean(np.sqrt(d * d + eps * eps)))
