"""SHOT point descriptors and descriptor-file import/export.

Per vertex: a weighted-covariance local reference frame with majority-rule
sign disambiguation, then histograms of cos(neighbor normal, frame z-axis)
over 32 spatial sectors (2 radial x 2 elevation x 8 azimuth) with linear
interpolation across adjacent cosine bins. With 10 bins the 320 values are
zero-padded to 352 columns. Rows are L2-normalized; vertices with an empty
support neighborhood yield zero rows and are counted in the result.

The support radius is a fraction of sqrt(total_area): a "5% of area"
support on a unit-area mesh is read as radius 0.05, the only reading with
length units. Externally computed descriptors can be imported instead.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import cacheio
from .errors import CacheError, DescriptorError
from .mesh import TriMesh, compute_metrics

__all__ = [
    "DescriptorMatrix",
    "compute_shot",
    "save_descriptors",
    "load_descriptors",
]

DESC_MAGIC = b"DESC1"
PADDED_DIM = 352  # published SHOT dimension for 10 cosine bins

AZIMUTH_SECTORS = 8
N_SECTORS = 2 * 2 * AZIMUTH_SECTORS  # radial x elevation x azimuth

_KIND_CODES = {"SHOT": 0, "external": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class DescriptorMatrix:
    values: np.ndarray  # (N, D)
    descriptor_kind: str  # "SHOT" | "external"
    config_hash: str
    empty_neighborhoods: int = 0

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def _config_hash(bins: int, radius_fraction: float) -> str:
    return hashlib.sha256(f"shot:bins={bins}:radius={radius_fraction!r}".encode()).hexdigest()[:16]


def _local_frame(offsets: np.ndarray, radius: float, distances: np.ndarray) -> np.ndarray:
    """Rows are the x, y, z axes of the reference frame at one vertex.

    Sign disambiguation: each axis points toward the majority of neighbors,
    with neighbors weighted by the same support weights as the covariance.
    (An unweighted head count ties with non-negligible probability on
    regular meshes, and a tie-break cannot be rotation invariant.) Neighbors
    within 1e-6 * radius of the dividing plane abstain: the sign of an
    exactly-zero projection is floating-point noise. Exact ties fall back
    to orienting toward global +z.
    """
    weights = radius - distances
    cov = (offsets * weights[:, None]).T @ offsets / weights.sum()
    _, vecs = np.linalg.eigh(cov)  # ascending eigenvalues
    x_axis = vecs[:, 2]
    z_axis = vecs[:, 0]

    for axis in (x_axis, z_axis):
        votes = offsets @ axis
        side = np.sign(votes)
        side[np.abs(votes) <= 1e-6 * radius] = 0.0
        balance = float(np.sum(weights * side))
        if balance < 0.0:
            axis *= -1.0
        elif balance == 0.0:
            # tie: orient toward global +z, then +y, then +x
            for comp in (2, 1, 0):
                if axis[comp] != 0.0:
                    if axis[comp] < 0.0:
                        axis *= -1.0
                    break
    y_axis = np.cross(z_axis, x_axis)
    return np.stack([x_axis, y_axis, z_axis])


def _axis_weights(u: np.ndarray, n_bins: int, wrap: bool):
    """Quadrilinear-interpolation helper: two (bin, weight) pairs per value.

    `u` is the value in continuous bin coordinates (bin centers at integers).
    Out-of-range side weights are dropped for clamped axes.
    """
    lower = np.floor(u).astype(np.int64)
    frac = u - lower
    upper = lower + 1
    w_lower = 1.0 - frac
    w_upper = frac
    if wrap:
        lower %= n_bins
        upper %= n_bins
    else:
        w_lower = np.where(lower < 0, 0.0, w_lower)
        w_upper = np.where(upper >= n_bins, 0.0, w_upper)
        lower = np.clip(lower, 0, n_bins - 1)
        upper = np.clip(upper, 0, n_bins - 1)
    return (lower, w_lower), (upper, w_upper)


def _accumulate(local: np.ndarray, dists: np.ndarray, cos_angle: np.ndarray,
                radius: float, bins: int) -> np.ndarray:
    """Distribute each neighbor over the 16 adjacent (sector, bin) cells.

    Linear interpolation along all four histogram axes (cosine, azimuth,
    elevation, radial, as in the reference descriptor) keeps every
    contribution continuous in the geometry: without it, neighbors sitting
    exactly on a sector boundary flip bins under rigid motions.
    """
    azimuth = np.arctan2(local[:, 1], local[:, 0])  # [-pi, pi]
    sin_elev = local[:, 2] / np.maximum(dists, 1e-300)

    cos_pairs = _axis_weights((cos_angle + 1.0) * 0.5 * bins - 0.5, bins, wrap=False)
    az_pairs = _axis_weights((azimuth + np.pi) * (AZIMUTH_SECTORS / (2.0 * np.pi)) - 0.5,
                             AZIMUTH_SECTORS, wrap=True)
    elev_pairs = _axis_weights(sin_elev + 0.5, 2, wrap=False)
    rad_pairs = _axis_weights(2.0 * dists / radius - 0.5, 2, wrap=False)

    row = np.zeros(N_SECTORS * bins)
    for rad_bin, w_r in rad_pairs:
        for elev_bin, w_e in elev_pairs:
            for az_bin, w_a in az_pairs:
                sector = (rad_bin * 2 + elev_bin) * AZIMUTH_SECTORS + az_bin
                for cos_bin, w_c in cos_pairs:
                    w = w_r * w_e * w_a * w_c
                    np.add.at(row, sector * bins + cos_bin, w)
    return row


def compute_shot(mesh: TriMesh, bins: int = 10, radius_fraction: float = 0.05) -> DescriptorMatrix:
    """SHOT descriptors for every vertex of the mesh.

    `radius_fraction` scales sqrt(total_area) to get the support radius.
    Output width is 32 * bins, zero-padded to 352 when bins == 10.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if not 0.0 < radius_fraction < 1.0:
        raise ValueError(f"radius_fraction must be in (0, 1), got {radius_fraction}")

    metrics = compute_metrics(mesh)
    if metrics.total_area <= 0.0:
        raise DescriptorError("mesh has zero total area; SHOT support radius is undefined")
    radius = radius_fraction * np.sqrt(metrics.total_area)
    normals = metrics.vertex_normals
    verts = mesh.vertices
    n = mesh.n_vertices

    raw_dim = N_SECTORS * bins
    out_dim = PADDED_DIM if bins == 10 else raw_dim
    values = np.zeros((n, out_dim))
    tree = cKDTree(verts)
    neighborhoods = tree.query_ball_point(verts, r=radius)

    empty = 0
    for i in range(n):
        nbrs = np.asarray([j for j in neighborhoods[i] if j != i], dtype=np.int64)
        if nbrs.size == 0:
            empty += 1
            continue
        offsets = verts[nbrs] - verts[i]
        dists = np.linalg.norm(offsets, axis=1)
        frame = _local_frame(offsets, radius, dists)
        local = offsets @ frame.T  # columns: x, y, z in the local frame

        cos_angle = np.clip(normals[nbrs] @ frame[2], -1.0, 1.0)
        row = _accumulate(local, dists, cos_angle, radius, bins)
        norm = np.linalg.norm(row)
        if norm > 0.0:
            values[i, :raw_dim] = row / norm
        else:
            empty += 1

    return DescriptorMatrix(values=values, descriptor_kind="SHOT",
                            config_hash=_config_hash(bins, radius_fraction),
                            empty_neighborhoods=empty)


def save_descriptors(desc: DescriptorMatrix, path, mesh_hash: bytes) -> None:
    """DESC1 container: N, D, kind byte, float32 row-major values, mesh hash."""
    n, d = desc.values.shape
    with cacheio.entry_lock(path), cacheio.atomic_write(path) as fh:
        fh.write(DESC_MAGIC)
        fh.write(struct.pack("<IIB", n, d, _KIND_CODES[desc.descriptor_kind]))
        cacheio.write_array(fh, desc.values.ravel(), np.float32)
        fh.write(mesh_hash)


def load_descriptors(path) -> tuple[DescriptorMatrix, bytes]:
    """Read a DESC1 file; externally produced files are tagged `external`."""
    with open(path, "rb") as fh:
        cacheio.expect_magic(fh, DESC_MAGIC, path)
        n = cacheio.read_u32(fh, path, "row count")
        d = cacheio.read_u32(fh, path, "descriptor dim")
        kind_code = struct.unpack("<B", cacheio.read_exact(fh, 1, path, "kind byte"))[0]
        if kind_code not in _KIND_NAMES:
            raise CacheError(f"{path}: unknown descriptor kind byte {kind_code}")
        values = cacheio.read_array(fh, np.float32, n * d, path, "values")
        digest = cacheio.read_exact(fh, cacheio.HASH_BYTES, path, "mesh hash")
        if fh.read(1):
            raise CacheError(f"{path}: trailing bytes after descriptor payload")
    bad = ~np.isfinite(values)
    if bad.any():
        raise DescriptorError(f"{path}: descriptor file contains NaN/Inf entries")
    return DescriptorMatrix(values=values.reshape(n, d).astype(np.float64),
                            descriptor_kind=_KIND_NAMES[kind_code],
                            config_hash="file"), digest
