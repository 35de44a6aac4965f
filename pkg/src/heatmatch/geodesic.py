"""Graph-shortest-path approximation of geodesic distances.

The graph contains every mesh edge plus, for each pair of triangles glued
along an edge, the diagonal connecting their two opposite vertices. Edge
weights are Euclidean lengths. Dijkstra over this augmented graph is a
deterministic, refinement-consistent approximation; exact polyhedral
geodesics are out of scope.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.csgraph as csgraph

from . import cacheio
from .errors import CacheError, GeodesicError
from .mesh import TriMesh

__all__ = [
    "GeodesicMatrix",
    "mesh_graph",
    "all_pairs_geodesic",
    "geodesic_rows",
    "save_geodesic",
    "load_geodesic",
]

GEOD_MAGIC = b"GEOD1"


@dataclass(frozen=True)
class GeodesicMatrix:
    values: np.ndarray  # (N, N) shortest-path lengths
    source_mesh_hash: bytes | None = None


def mesh_graph(mesh: TriMesh) -> sparse.csr_matrix:
    """Symmetric weighted graph: one-ring edges + opposite-vertex diagonals."""
    v = mesh.vertices
    f = mesh.faces

    halfedge_i = f[:, [0, 1, 2]].ravel()
    halfedge_j = f[:, [1, 2, 0]].ravel()
    opposite = f[:, [2, 0, 1]].ravel()

    edges = np.sort(np.stack([halfedge_i, halfedge_j], axis=1), axis=1)
    uniq, inverse, counts = np.unique(edges, axis=0, return_inverse=True, return_counts=True)

    rows = [uniq[:, 0]]
    cols = [uniq[:, 1]]

    # diagonals: interior edges are shared by exactly two triangles
    interior = np.flatnonzero(counts == 2)
    order = np.argsort(inverse, kind="stable")
    sorted_inverse = inverse[order]
    first = np.searchsorted(sorted_inverse, interior, side="left")
    opp_a = opposite[order[first]]
    opp_b = opposite[order[first + 1]]
    keep = opp_a != opp_b  # folded-over duplicate faces would self-connect
    rows.append(opp_a[keep])
    cols.append(opp_b[keep])

    i = np.concatenate(rows)
    j = np.concatenate(cols)
    w = np.linalg.norm(v[i] - v[j], axis=1)
    n = mesh.n_vertices
    graph = sparse.coo_matrix((w, (i, j)), shape=(n, n))
    graph = graph.maximum(graph.T)  # symmetric; duplicate entries collapse
    return graph.tocsr()


def _require_connected(graph: sparse.csr_matrix) -> None:
    n_comp, labels = csgraph.connected_components(graph, directed=False)
    if n_comp > 1:
        sizes = np.bincount(labels)
        raise GeodesicError(
            f"mesh is disconnected: {n_comp} components with sizes {sorted(sizes.tolist(), reverse=True)}"
        )


def all_pairs_geodesic(mesh: TriMesh) -> GeodesicMatrix:
    """Dense N x N matrix of graph geodesic distances (Dijkstra per source)."""
    graph = mesh_graph(mesh)
    _require_connected(graph)
    dist = csgraph.dijkstra(graph, directed=False)
    return GeodesicMatrix(values=dist)


def geodesic_rows(mesh: TriMesh, sources) -> np.ndarray:
    """Rows of the all-pairs matrix for the given source vertices."""
    sources = np.asarray(sources, dtype=np.int64)
    if sources.size == 0:
        return np.zeros((0, mesh.n_vertices))
    if sources.min() < 0 or sources.max() >= mesh.n_vertices:
        raise ValueError(f"source index out of range [0, {mesh.n_vertices})")
    graph = mesh_graph(mesh)
    _require_connected(graph)
    return csgraph.dijkstra(graph, directed=False, indices=sources)


def save_geodesic(geo: GeodesicMatrix, path, mesh_hash: bytes) -> None:
    """GEOD1 container: N, float32 row-major distances, mesh hash."""
    n = geo.values.shape[0]
    with cacheio.entry_lock(path), cacheio.atomic_write(path) as fh:
        fh.write(GEOD_MAGIC)
        fh.write(struct.pack("<I", n))
        cacheio.write_array(fh, geo.values.ravel(), np.float32)
        fh.write(mesh_hash)


def load_geodesic(path) -> tuple[GeodesicMatrix, bytes]:
    with open(path, "rb") as fh:
        cacheio.expect_magic(fh, GEOD_MAGIC, path)
        n = cacheio.read_u32(fh, path, "vertex count")
        values = cacheio.read_array(fh, np.float32, n * n, path, "distances").reshape(n, n)
        digest = cacheio.read_exact(fh, cacheio.HASH_BYTES, path, "mesh hash")
        if fh.read(1):
            raise CacheError(f"{path}: trailing bytes after geodesic payload")
    return GeodesicMatrix(values=values.astype(np.float64), source_mesh_hash=digest), digest
