"""Region embeddings, Gaussian-to-region membership and the semantic alignment loss."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera
from .errors import RegionFileError
from .gaussian import SEMANTIC_DIM, GaussianCloud
from .raster import Projection, project_cloud

log = logging.getLogger(__name__)

RAW_EMBEDDING_DIM = 512
_RECORD_KEYS = {"image_id", "bbox", "embedding"}


class EmbeddingProjector:
    """Fixed random map with orthonormal rows, R^raw_dim -> R^dim, set by its seed."""

    def __init__(self, seed: int, raw_dim: int = RAW_EMBEDDING_DIM, dim: int = SEMANTIC_DIM):
        self.seed = int(seed)
        self.raw_dim = raw_dim
        self.dim = dim
        rng = np.random.default_rng(self.seed)
        q, r = np.linalg.qr(rng.standard_normal((raw_dim, dim)))
        q *= np.sign(np.diag(r))  # make the factorization unique
        self.matrix = np.ascontiguousarray(q.T)

    def project(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-1] != self.raw_dim:
            raise RegionFileError(f"embedding dimension {raw.shape[-1]} does not match projector input {self.raw_dim}")
        v = self.matrix @ raw
        norm = np.linalg.norm(v)
        if not np.isfinite(norm) or norm == 0.0:
            raise RegionFileError("projected embedding has zero or non-finite norm")
        return v / norm


@dataclass
class SemanticRegion:
    image_id: str
    bbox: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max in pixels
    f_ref: np.ndarray  # (SEMANTIC_DIM,)
    raw_dim: int = RAW_EMBEDDING_DIM
    raw: np.ndarray | None = field(default=None, repr=False)  # source embedding, kept for re-serialization

    def clamped(self, width: int, height: int) -> "SemanticRegion":
        x0, y0, x1, y1 = self.bbox
        box = (min(max(x0, 0.0), width), min(max(y0, 0.0), height), min(max(x1, 0.0), width), min(max(y1, 0.0), height))
        return SemanticRegion(self.image_id, box, self.f_ref, self.raw_dim, self.raw)

    def record(self) -> dict:
        if self.raw is None:
            raise RegionFileError(f"region for {self.image_id} has no raw embedding to serialize")
        return {"image_id": self.image_id, "bbox": [float(v) for v in self.bbox], "embedding": [float(v) for v in self.raw]}


def _parse_record(i: int, rec) -> tuple[str, tuple[float, ...], np.ndarray]:
    if not isinstance(rec, dict) or set(rec) != _RECORD_KEYS:
        keys = sorted(rec) if isinstance(rec, dict) else type(rec).__name__
        raise RegionFileError(f"region record {i}: expected keys {sorted(_RECORD_KEYS)}, got {keys}")
    image_id = rec["image_id"]
    if not isinstance(image_id, str):
        raise RegionFileError(f"region record {i}: image_id must be a string")
    try:
        bbox = tuple(float(v) for v in rec["bbox"])
        emb = np.asarray(rec["embedding"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise RegionFileError(f"region record {i}: {exc}") from None
    if len(bbox) != 4 or not np.all(np.isfinite(bbox)):
        raise RegionFileError(f"region record {i}: bbox must be 4 finite numbers")
    if emb.ndim != 1 or not np.all(np.isfinite(emb)):
        raise RegionFileError(f"region record {i}: embedding must be a finite vector")
    return image_id, bbox, emb


def ingest_regions(path, projector: EmbeddingProjector, image_size: tuple[int, int] | None = None) -> list[SemanticRegion]:
    """Load region records and project their embeddings to unit ``f_ref`` targets.

    With ``image_size=(width, height)`` boxes are clamped to the image and a
    warning is logged for each clamp.  The result is ordered by image id, then
    file order.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise RegionFileError(f"cannot read region file {path}: {exc}") from None
    if not text.strip():
        return []
    try:
        records = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RegionFileError(f"region file {path} is not valid JSON: {exc}") from None
    if not isinstance(records, list):
        raise RegionFileError(f"region file {path} must hold a JSON list")

    grouped: dict[str, list[SemanticRegion]] = defaultdict(list)
    for i, rec in enumerate(records):
        image_id, bbox, emb = _parse_record(i, rec)
        if emb.size != projector.raw_dim:
            raise RegionFileError(f"region record {i}: embedding dimension {emb.size} != projector input {projector.raw_dim}")
        try:
            f_ref = projector.project(emb)
        except RegionFileError as exc:
            raise RegionFileError(f"region record {i}: {exc}") from None
        region = SemanticRegion(image_id, bbox, f_ref, emb.size, emb)
        if image_size is not None:
            clamped = region.clamped(*image_size)
            if clamped.bbox != region.bbox:
                log.warning("region record %d: bbox %s clamped to %s", i, region.bbox, clamped.bbox)
            region = clamped
        x0, y0, x1, y1 = region.bbox
        if not (x0 < x1 and y0 < y1):
            raise RegionFileError(f"region record {i}: degenerate bbox {region.bbox}")
        grouped[image_id].append(region)
    return [r for key in sorted(grouped) for r in grouped[key]]


def write_region_file(path, regions: list[SemanticRegion]) -> None:
    Path(path).write_text(json.dumps([r.record() for r in regions]))


def membership_from_projection(proj: Projection, region: SemanticRegion) -> np.ndarray:
    x0, y0, x1, y1 = region.bbox
    u, v = proj.means2d[:, 0], proj.means2d[:, 1]
    with np.errstate(invalid="ignore"):
        inside = proj.visible & (u > x0) & (u < x1) & (v > y0) & (v < y1)
    return np.flatnonzero(inside)


def region_membership(cloud: GaussianCloud, camera: Camera, region: SemanticRegion) -> np.ndarray:
    """Indices of Gaussians whose projected centre lies strictly inside the box."""
    return membership_from_projection(project_cloud(cloud, camera), region)


def semantic_loss(features, memberships, reduction: str = "sum") -> tuple[float, np.ndarray]:
    """Sum over regions of squared distances between member features and ``f_ref``.

    ``features`` is an (N, d) array or a GaussianCloud; ``memberships`` a list of
    ``(indices, f_ref)``.  Returns the loss and its gradient w.r.t. the features.
    With ``reduction="mean"`` each region's sum is divided by its member count.
    """
    if isinstance(features, GaussianCloud):
        features = features.semantic_features
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    grad = np.zeros_like(features)
    total = 0.0
    for idx, f_ref in memberships:
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            continue
        diff = features[idx] - np.asarray(f_ref)[None, :]
        scale = 1.0 / idx.size if reduction == "mean" else 1.0
        total += scale * float(np.sum(diff * diff))
        np.add.at(grad, idx, 2.0 * scale * diff)
    return total, grad
