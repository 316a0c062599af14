"""Gaussian class regions in the transformed semantic space, and the
complementary sampling of synthetic unknown class embeddings.

Every known class (seen or unseen) owns an isotropic Gaussian region
N(mu_c, alpha * I) where mu_c is the conditioning sampler's mean output for
its class embedding and alpha is one shared scale.  Unknown embeddings are
drawn on segments between pairs of region means, pushed outward by noise,
and rejected until they clear every region's `radius_multiplier` Mahalanobis
shell, so membership in the outer region holds by construction.

The symbol overloading in the source method (region covariance scale vs.
radius multiplier) is split here into `sigma_scale` and `radius_multiplier`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import networks as nets
from .errors import DegenerateGeometryError, DomainError, ValidationError
from .matio import as_matrix, write_matrix

UNKNOWN_LABEL = "UNKNOWN"

DEFAULT_RETRY_BUDGET = 1000


@dataclass(frozen=True)
class ClassRegion:
    """Region of influence N(mu, sigma_scale * I) of one known class."""

    class_id: str
    mu: np.ndarray  # (1, E)
    sigma_scale: float

    def __post_init__(self):
        if self.sigma_scale <= 0.0:
            raise DomainError(f"sigma_scale must be positive, got {self.sigma_scale}")


@dataclass(frozen=True)
class UnknownEmbedding:
    """One synthetic unknown class embedding plus its sampling provenance."""

    vector: np.ndarray  # (1, E)
    endpoints: tuple[str, str]
    t: float
    attempts: int


def default_sigma_scale(means: np.ndarray) -> float:
    """Region scale from the 25th percentile of pairwise mean distances.

    The standard deviation is set to a quarter of that distance so typical
    regions stay clear of each other.
    """
    means = as_matrix(means)
    n = means.shape[0]
    if n < 2:
        return 1.0
    dists = []
    for i in range(n):
        for j in range(i + 1, n):
            dists.append(float(np.linalg.norm(means[i] - means[j])))
    q = float(np.percentile(dists, 25))
    if q == 0.0:
        return 1.0
    return (0.25 * q) ** 2


def fit_class_regions(models: nets.ModelBundle, embeddings: dict[str, np.ndarray],
                      sigma_scale: float | None = None) -> list[ClassRegion]:
    """One region per known class, centered on the sampler's mean output."""
    if not embeddings:
        raise ValidationError("no class embeddings given")
    class_ids = sorted(embeddings.keys())
    rows = np.vstack([as_matrix(embeddings[c], rows=1) for c in class_ids])
    mu, _ = nets.sampler_forward(models.sampler, ad.constant(rows / models.embedding_scale))
    means = mu.value
    if sigma_scale is None:
        sigma_scale = default_sigma_scale(means)
    return [
        ClassRegion(class_id=c, mu=means[i:i + 1].copy(), sigma_scale=float(sigma_scale))
        for i, c in enumerate(class_ids)
    ]


def mahalanobis(v, region: ClassRegion) -> float:
    """With covariance alpha*I this reduces to ||v - mu|| / sqrt(alpha)."""
    v = as_matrix(v, rows=1, cols=region.mu.shape[1])
    return float(np.linalg.norm(v - region.mu) / np.sqrt(region.sigma_scale))


def _clears_all(v: np.ndarray, regions, radius_multiplier: float) -> bool:
    return all(mahalanobis(v, r) >= radius_multiplier for r in regions)


def complementary_sample(regions: list[ClassRegion], n_unknown: int,
                         radius_multiplier: float, seed: int = 0,
                         retry_budget: int = DEFAULT_RETRY_BUDGET) -> list[UnknownEmbedding]:
    """Draw synthetic unknown embeddings in the outer region.

    Each draw picks a uniform pair of region means, a point on the middle
    of the connecting segment (t in [0.25, 0.75]), displaces it by isotropic
    noise of scale radius_multiplier * sqrt(sigma_scale) capped at the
    segment length (samples must stay near the between-class geometry), and
    keeps it only if its Mahalanobis distance to every region is at least
    the radius multiplier.  Exceeding the retry budget means the regions
    cover all reachable space at that radius.
    """
    if len(regions) < 2:
        raise ValidationError("complementary sampling needs at least two regions")
    if radius_multiplier <= 1.0:
        raise ValidationError("radius_multiplier must exceed 1")
    if n_unknown < 0:
        raise ValidationError("n_unknown must be >= 0")
    rng = np.random.default_rng(seed)
    dim = regions[0].mu.shape[1]
    out: list[UnknownEmbedding] = []
    for _ in range(n_unknown):
        accepted = None
        for attempt in range(1, retry_budget + 1):
            i, j = rng.choice(len(regions), size=2, replace=False)
            a, b = regions[i], regions[j]
            t = float(rng.uniform(0.25, 0.75))
            segment = b.mu - a.mu
            base = a.mu + t * segment
            noise_scale = radius_multiplier * np.sqrt((a.sigma_scale + b.sigma_scale) / 2.0)
            noise_scale = min(noise_scale, float(np.linalg.norm(segment)))
            candidate = base + rng.standard_normal((1, dim)) * noise_scale
            if _clears_all(candidate, regions, radius_multiplier):
                accepted = UnknownEmbedding(
                    vector=candidate,
                    endpoints=(a.class_id, b.class_id),
                    t=t,
                    attempts=attempt,
                )
                break
        if accepted is None:
            raise DegenerateGeometryError(
                f"no point cleared all {len(regions)} regions at radius "
                f"{radius_multiplier} within {retry_budget} attempts"
            )
        out.append(accepted)
    return out


def generate_unknown_features(models: nets.ModelBundle, unknowns: list[UnknownEmbedding],
                              n_per_embedding: int, seed: int = 0):
    """Condition the generator on each unknown embedding; label rows UNKNOWN."""
    if n_per_embedding < 0:
        raise ValidationError("n_per_embedding must be >= 0")
    rng = np.random.default_rng(seed)
    chunks = []
    for emb in unknowns:
        if n_per_embedding == 0:
            continue
        s = np.repeat(as_matrix(emb.vector, rows=1, cols=models.embedding_dim),
                      n_per_embedding, axis=0)
        z = rng.standard_normal(s.shape)
        x = nets.generator_forward(models.generator, ad.constant(s), ad.constant(z)).value
        chunks.append(x * models.feature_scale)
    if not chunks:
        return np.zeros((0, models.feature_dim)), []
    feats = np.vstack(chunks)
    return feats, [UNKNOWN_LABEL] * feats.shape[0]


def export_unknown_embeddings(matrix_path, sidecar_path, unknowns: list[UnknownEmbedding]) -> None:
    """Matrix of embeddings plus line-delimited provenance records."""
    vectors = np.vstack([u.vector for u in unknowns]) if unknowns else np.zeros((0, 1))
    with open(matrix_path, "wb") as fh:
        write_matrix(fh, vectors)
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        for u in unknowns:
            fh.write(json.dumps(
                {"endpoints": list(u.endpoints), "t": u.t, "attempts": u.attempts},
                sort_keys=True,
            ) + "\n")
