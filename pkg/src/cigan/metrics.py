"""Evaluation metrics over classifier features: inception-style score, Frechet
distance between Gaussian feature fits, kernel two-sample MMD, PSNR, attribute
match rates, and a 2-D PCA export for latent-distribution plots."""

import numpy as np


def inception_score(prob_rows: np.ndarray, splits: int = 10) -> tuple:
    """exp of the mean KL(p(y|x) || marginal) per split; returns (mean, std)."""
    p = np.asarray(prob_rows, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("prob_rows must be a nonempty N x K matrix")
    if np.any(p < -1e-9):
        raise ValueError("probabilities must be nonnegative")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("each probability row must sum to 1")
    if splits < 1 or p.shape[0] % splits != 0:
        raise ValueError(f"splits={splits} must be >= 1 and divide N={p.shape[0]}")
    p = np.clip(p, 0.0, None)
    scores = []
    chunk = p.shape[0] // splits
    for i in range(splits):
        block = p[i * chunk:(i + 1) * chunk]
        marginal = block.mean(axis=0, keepdims=True)
        mask = block > 0
        kl = np.where(mask, block * (np.log(np.where(mask, block, 1.0)) - np.log(marginal)), 0.0)
        scores.append(np.exp(kl.sum(axis=1).mean()))
    scores = np.array(scores)
    return float(scores.mean()), float(scores.std())


class GaussianSummary:
    """Mean and covariance of a feature set, validated as numerically PSD."""

    def __init__(self, mean: np.ndarray, cov: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        if self.mean.ndim != 1 or self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("mean must be (d,), cov must be (d, d)")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")
        eig = np.linalg.eigvalsh(self.cov)
        if eig.min() < -1e-8 * max(1.0, float(eig.max())):
            raise ValueError(f"covariance is not PSD within tolerance (min eig {eig.min():g})")


def summarize_features(feats: np.ndarray) -> GaussianSummary:
    """Sample mean and unbiased covariance, symmetrized."""
    x = np.asarray(feats, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need an N x d matrix with N >= 2")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    cov = (cov + cov.T) / 2.0
    return GaussianSummary(mean, cov)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    eigval, eigvec = np.linalg.eigh((mat + mat.T) / 2.0)
    eigval = np.clip(eigval, 0.0, None)
    return (eigvec * np.sqrt(eigval)) @ eigvec.T


def fid(real: GaussianSummary, fake: GaussianSummary) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), via symmetric
    eigendecompositions with negative eigenvalues clipped at zero."""
    if real.mean.shape != fake.mean.shape:
        raise ValueError("dimension mismatch between summaries")
    diff = real.mean - fake.mean
    s1_half = _psd_sqrt(real.cov)
    inner = s1_half @ fake.cov @ s1_half
    eig = np.clip(np.linalg.eigvalsh((inner + inner.T) / 2.0), 0.0, None)
    trace_sqrt = np.sqrt(eig).sum()
    return float(diff @ diff + np.trace(real.cov) + np.trace(fake.cov) - 2.0 * trace_sqrt)


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """Median pairwise distance over the pooled sets (zero pairs excluded)."""
    pooled = np.concatenate([np.atleast_2d(a), np.atleast_2d(b)], axis=0).astype(np.float64)
    sq = np.sum((pooled[:, None, :] - pooled[None, :, :]) ** 2, axis=-1)
    dists = np.sqrt(sq[np.triu_indices(len(pooled), k=1)])
    positive = dists[dists > 0]
    if positive.size == 0:
        return 1.0
    return float(np.median(positive))


def mmd2(a: np.ndarray, b: np.ndarray, bandwidth: float) -> float:
    """Biased squared MMD with RBF kernel exp(-||u-v||^2 / (2 sigma^2))."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    x = np.atleast_2d(np.asarray(a, dtype=np.float64))
    y = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("both sample sets must be nonempty")

    def kernel_mean(u, v):
        sq = np.sum((u[:, None, :] - v[None, :, :]) ** 2, axis=-1)
        return np.exp(-sq / (2.0 * bandwidth ** 2)).mean()

    return float(kernel_mean(x, x) + kernel_mean(y, y) - 2.0 * kernel_mean(x, y))


def psnr(x: np.ndarray, x_rec: np.ndarray, data_range: float = 2.0) -> float:
    """10 log10(range^2 / MSE) in dB, capped at 100 for (near-)identical inputs."""
    x = np.asarray(x, dtype=np.float64)
    x_rec = np.asarray(x_rec, dtype=np.float64)
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_rec.shape}")
    mse = np.mean((x - x_rec) ** 2)
    if mse == 0.0:
        return 100.0
    return float(min(10.0 * np.log10(data_range ** 2 / mse), 100.0))


def attribute_match(pred_labels: np.ndarray, target_labels: np.ndarray) -> dict:
    """Per-head accuracies of predicted vs target attribute labels (N x 4 int
    arrays ordered shape/color/size/background) plus the all-heads match rate."""
    pred = np.asarray(pred_labels)
    target = np.asarray(target_labels)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 4:
        raise ValueError("predictions and targets must both be N x 4 label arrays")
    if pred.shape[0] == 0:
        raise ValueError("attribute match needs at least one sample")
    heads = ("shape", "color", "size", "background")
    eq = pred == target
    out = {h: float(eq[:, i].mean()) for i, h in enumerate(heads)}
    out["overall"] = float(eq.all(axis=1).mean())
    return out


def project_latents(a: np.ndarray, b: np.ndarray) -> tuple:
    """Top-2 PCA coordinates of the pooled sets: (coords_a, coords_b).

    Components are deterministically signed (largest-magnitude entry made
    positive). Rank-deficient inputs fall back to however many axes exist,
    with remaining columns zero.
    """
    x = np.atleast_2d(np.asarray(a, dtype=np.float64))
    y = np.atleast_2d(np.asarray(b, dtype=np.float64))
    pooled = np.concatenate([x, y], axis=0)
    if pooled.shape[0] < 3:
        raise ValueError("need at least 3 points in total")
    mean = pooled.mean(axis=0)
    centered = pooled - mean
    cov = centered.T @ centered / (pooled.shape[0] - 1)
    eigval, eigvec = np.linalg.eigh((cov + cov.T) / 2.0)
    order = np.argsort(eigval)[::-1]
    eigval, eigvec = eigval[order], eigvec[:, order]
    tol = max(1e-12, 1e-12 * max(eigval[0], 0.0))
    rank = int(np.sum(eigval > tol))
    coords = np.zeros((pooled.shape[0], 2))
    for k in range(min(2, rank)):
        comp = eigvec[:, k]
        j = int(np.argmax(np.abs(comp)))
        if comp[j] < 0:
            comp = -comp
        coords[:, k] = centered @ comp
    return coords[: x.shape[0]], coords[x.shape[0]:]
