"""
Attention Head Analysis

Two diagnostics computed from captured AttentionRecords:

- inter-head similarity: linear-kernel CKA between every pair of heads of a
  block, per image, averaged over images
- head mean distance: attention-weighted pixel distance between a query patch
  and the patches it attends to, averaged over queries and images

HSIC uses the biased centering-matrix estimator trace(K Hc L Hc) / (s - 1)^2.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from config.hardware_profiles import worker_count
from ml.errors import DegenerateInput, InvalidArgument
from ml.toy_vit import AttentionRecord


SYMMETRY_TOL = 1e-10

# hsic(K, K) below this fraction of (||K||_F / (s - 1))^2 counts as a constant representation
DEGENERATE_REL_TOL = 1e-20


@dataclass(frozen=True)
class GramMatrix:
    """s x s symmetric kernel matrix over s samples"""
    values: np.ndarray

    def __post_init__(self):
        values = self.values
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise InvalidArgument(f"Gram matrix must be square, got shape {values.shape}")
        scale = max(1.0, float(np.abs(values).max())) if values.size else 1.0
        if not np.allclose(values, values.T, rtol=0.0, atol=SYMMETRY_TOL * scale):
            raise InvalidArgument("Gram matrix is not symmetric")

    @classmethod
    def from_representation(cls, representation) -> 'GramMatrix':
        """Linear kernel X Xᵀ of an s x n representation (samples as rows)"""
        x = np.asarray(representation, dtype=np.float64)
        if x.ndim != 2:
            raise InvalidArgument(f"representation must be s x n, got shape {x.shape}")
        return cls(x @ x.T)

    @property
    def s(self) -> int:
        return self.values.shape[0]

    def centered(self) -> np.ndarray:
        """Hc K Hc"""
        k = self.values
        return k - k.mean(axis=0, keepdims=True) - k.mean(axis=1, keepdims=True) + k.mean()

    def is_psd(self, tol: float = 1e-8) -> bool:
        return bool(np.linalg.eigvalsh(self.values).min() >= -tol)


def gram(representation) -> GramMatrix:
    return GramMatrix.from_representation(representation)


def hsic(k: GramMatrix, l: GramMatrix) -> float:
    if k.s != l.s:
        raise InvalidArgument(f"Gram matrices cover {k.s} and {l.s} samples")
    if k.s < 2:
        raise InvalidArgument(f"hsic needs at least 2 samples, got {k.s}")
    # trace(K Hc L Hc) == sum((Hc K Hc) * L) for symmetric L
    return float(np.sum(k.centered() * l.values) / (k.s - 1) ** 2)


def _self_hsic(k: GramMatrix, name: str) -> float:
    value = hsic(k, k)
    floor = DEGENERATE_REL_TOL * (np.linalg.norm(k.values) / (k.s - 1)) ** 2
    if value <= floor:
        raise DegenerateInput(f"representation {name} is constant across samples")
    return value


def cka(x, y) -> float:
    """
    Linear-kernel CKA between two representations of the same s samples

    Args:
        x: s x n1 representation
        y: s x n2 representation

    Returns:
        hsic(K, L) / sqrt(hsic(K, K) * hsic(L, L)) in [0, 1]

    Raises:
        DegenerateInput: either representation is constant across samples
    """
    k, l = gram(x), gram(y)
    if k.s != l.s:
        raise InvalidArgument(f"representations cover {k.s} and {l.s} samples")
    if k.s < 3:
        raise InvalidArgument(f"cka needs at least 3 samples, got {k.s}")

    denominator = np.sqrt(_self_hsic(k, 'X') * _self_hsic(l, 'Y'))
    return max(0.0, hsic(k, l) / denominator)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _nan_to_none(values: np.ndarray):
    return [[None if np.isnan(v) else float(v) for v in row] for row in values] if values.ndim == 2 \
        else [None if np.isnan(v) else float(v) for v in values]


@dataclass
class HeadSimilarityReport:
    block: int
    matrix: np.ndarray
    images: int
    skipped_pairs: int = 0

    @property
    def heads(self) -> int:
        return self.matrix.shape[0]

    @property
    def per_head_mean(self) -> np.ndarray:
        """Mean CKA of each head to the other heads"""
        off_diagonal = self.matrix[~np.eye(self.heads, dtype=bool)].reshape(self.heads, self.heads - 1)
        return np.nanmean(off_diagonal, axis=1)

    @property
    def overall_mean(self) -> float:
        return float(np.nanmean(self.per_head_mean))

    def to_dict(self) -> Dict:
        return {
            'block': self.block,
            'images': self.images,
            'skipped_pairs': self.skipped_pairs,
            'cka': _nan_to_none(self.matrix),
            'per_head_mean': _nan_to_none(self.per_head_mean),
            'overall_mean': self.overall_mean,
        }

    def to_rows(self) -> List[Dict]:
        return [
            {'block': self.block, 'head': h, 'mean_cka': float(value)}
            for h, value in enumerate(self.per_head_mean)
        ]


@dataclass
class HeadDistanceReport:
    block: int
    distances: np.ndarray
    images: int
    skipped_queries: int = 0

    @property
    def block_mean(self) -> float:
        return float(np.nanmean(self.distances))

    def to_dict(self) -> Dict:
        return {
            'block': self.block,
            'images': self.images,
            'skipped_queries': self.skipped_queries,
            'mean_distance_px': _nan_to_none(self.distances),
            'block_mean_px': self.block_mean,
        }

    def to_rows(self) -> List[Dict]:
        return [
            {'block': self.block, 'head': h, 'mean_distance_px': float(value)}
            for h, value in enumerate(self.distances)
        ]


# ---------------------------------------------------------------------------
# Inter-head CKA
# ---------------------------------------------------------------------------

def _check_block(records: Sequence[AttentionRecord], block: int) -> None:
    if not records:
        raise InvalidArgument("head analysis needs at least one attention record")
    for record in records:
        if not 0 <= block < record.blocks:
            raise InvalidArgument(f"block {block} out of range for a {record.blocks}-block record")


def _image_cka(head_outputs: np.ndarray) -> Tuple[np.ndarray, int]:
    """Pairwise head CKA for one image; NaN where a pair was degenerate"""
    heads = head_outputs.shape[0]
    matrix = np.eye(heads)
    skipped = 0
    for a in range(heads):
        for b in range(a + 1, heads):
            try:
                value = cka(head_outputs[a], head_outputs[b])
            except DegenerateInput:
                value = np.nan
                skipped += 1
            matrix[a, b] = matrix[b, a] = value
    return matrix, skipped


def inter_head_cka(records: Sequence[AttentionRecord], block: int) -> HeadSimilarityReport:
    """
    Mean pairwise CKA between the heads of one block

    Each head is represented by its T x head_dim attention output with tokens
    as samples. CKA is computed per image and averaged over the images where
    the pair was not degenerate.
    """
    _check_block(records, block)
    shapes = {record.head_outputs[block].shape for record in records}
    if len(shapes) != 1:
        raise InvalidArgument(f"inconsistent head output shapes across records: {sorted(shapes)}")
    heads = next(iter(shapes))[0]
    if heads < 2:
        raise InvalidArgument("inter-head similarity needs at least 2 heads")

    with ThreadPoolExecutor(max_workers=worker_count()) as executor:
        results = list(executor.map(lambda r: _image_cka(r.head_outputs[block]), records))

    stacked = np.stack([matrix for matrix, _ in results])
    valid = ~np.isnan(stacked)
    counts = valid.sum(axis=0)
    totals = np.where(valid, stacked, 0.0).sum(axis=0)
    with np.errstate(invalid='ignore', divide='ignore'):
        matrix = np.where(counts > 0, totals / np.maximum(counts, 1), np.nan)
    np.fill_diagonal(matrix, 1.0)

    return HeadSimilarityReport(
        block=block,
        matrix=matrix,
        images=len(records),
        skipped_pairs=sum(skipped for _, skipped in results),
    )


# ---------------------------------------------------------------------------
# Mean attention distance
# ---------------------------------------------------------------------------

def patch_distances(grid: int, patch_size: int) -> np.ndarray:
    """N² x N² pixel distances between patch positions on an N x N grid"""
    coords = np.stack(np.divmod(np.arange(grid * grid), grid), axis=1).astype(np.float64)
    return patch_size * cdist(coords, coords)


def _image_distances(attention: np.ndarray, distances: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per head: sum of per-query expected distances and number of usable queries"""
    patches = attention[:, 1:, 1:]
    mass = patches.sum(axis=2)
    usable = mass > 0.0
    safe_mass = np.where(usable, mass, 1.0)
    expected = (patches * distances[None]).sum(axis=2) / safe_mass
    return np.where(usable, expected, 0.0).sum(axis=1), usable.sum(axis=1)


def head_mean_distance(records: Sequence[AttentionRecord], block: int, patch_size: int) -> HeadDistanceReport:
    """
    Attention-weighted mean pixel distance per head

    The class token has no pixel position: its row and column are dropped and
    each remaining row is renormalised to sum to 1. A query whose attention
    sits entirely on the class token is skipped and counted. Queries are
    weighted uniformly within an image, images uniformly across the set.
    """
    _check_block(records, block)
    if patch_size < 1:
        raise InvalidArgument(f"patch_size must be positive, got {patch_size}")

    attention = [np.asarray(record.attention[block], dtype=np.float64) for record in records]
    shapes = {a.shape for a in attention}
    if len(shapes) != 1:
        raise InvalidArgument(f"inconsistent attention shapes across records: {sorted(shapes)}")
    heads, tokens, _ = next(iter(shapes))
    grid = int(round(np.sqrt(tokens - 1)))
    if grid * grid != tokens - 1:
        raise InvalidArgument(f"{tokens} tokens is not a class token plus a square patch grid")

    distances = patch_distances(grid, patch_size)
    with ThreadPoolExecutor(max_workers=worker_count()) as executor:
        results = list(executor.map(lambda a: _image_distances(a, distances), attention))

    per_image = []
    skipped = 0
    for totals, usable in results:
        skipped += int((grid * grid - usable).sum())
        with np.errstate(invalid='ignore', divide='ignore'):
            per_image.append(np.where(usable > 0, totals / np.maximum(usable, 1), np.nan))

    stacked = np.stack(per_image)
    valid = ~np.isnan(stacked)
    counts = valid.sum(axis=0)
    with np.errstate(invalid='ignore', divide='ignore'):
        means = np.where(counts > 0, np.where(valid, stacked, 0.0).sum(axis=0) / np.maximum(counts, 1), np.nan)

    return HeadDistanceReport(block=block, distances=means, images=len(records), skipped_queries=skipped)
