"""Cotangent Laplace-Beltrami discretization and truncated spectral machinery.

The stiffness matrix uses the positive semi-definite convention (off-
diagonal entries negative, zero row sums); the mass matrix is barycentric
lumped vertex areas. Heat-kernel matrices come from the truncated closed
form K_t = Phi diag(exp(-lambda t)) Phi^T, which makes recomputing a kernel
at a new diffusion time a single dense multiply against cached eigenpairs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from . import cacheio
from .errors import CacheError, SpectralError
from .mesh import TriMesh

__all__ = [
    "LaplacianPair",
    "SpectralBasis",
    "HeatKernelMatrix",
    "build_laplacian",
    "eigendecompose",
    "heat_kernel",
    "select_time",
    "save_basis",
    "load_basis",
    "save_laplacian",
    "load_laplacian",
]

COT_CLAMP = 1e4            # survives near-degenerate triangles
DENSE_SOLVER_MAX_N = 2000  # above this, shift-invert iteration
EIGENVALUE_FLOOR = 1e-8    # numerical kernel of L squashed to exactly 0

SPEC_MAGIC = b"SPEC1"
LAPL_MAGIC = b"LAPL1"


@dataclass(frozen=True)
class LaplacianPair:
    """Stiffness L (sparse symmetric, L >= 0) and lumped mass diagonal."""

    stiffness: sparse.csr_matrix
    mass_diag: np.ndarray  # (N,), all entries > 0

    @property
    def n_vertices(self) -> int:
        return self.mass_diag.shape[0]


@dataclass(frozen=True)
class SpectralBasis:
    """Truncated generalized eigenpairs L phi = lambda A phi, A-orthonormal."""

    eigenvalues: np.ndarray     # (E,), ascending, nonnegative
    eigenfunctions: np.ndarray  # (N, E)
    mass_diag: np.ndarray       # (N,)

    @property
    def basis_size(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.eigenfunctions.shape[0]


@dataclass(frozen=True)
class HeatKernelMatrix:
    values: np.ndarray  # (N, N), symmetric
    time: float
    basis_size: int


def build_laplacian(mesh: TriMesh) -> LaplacianPair:
    """Cotangent stiffness and barycentric lumped mass for a triangle mesh.

    Off-diagonal stiffness for edge (i, j) is -(cot a_ij + cot b_ij)/2
    summed over incident triangles; the diagonal makes rows sum to zero.
    Cotangents are clamped to +-1e4 so zero-area faces cannot poison the
    spectrum. A vertex with no incident area is an error.
    """
    v = mesh.vertices
    f = mesh.faces
    n = mesh.n_vertices

    rows, cols, vals = [], [], []
    # angle at corner k faces edge (i, j); cot = dot / |cross| of the two edge vectors
    for (i, j, k) in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        e1 = v[f[:, i]] - v[f[:, k]]
        e2 = v[f[:, j]] - v[f[:, k]]
        cross_norm = np.linalg.norm(np.cross(e1, e2), axis=1)
        cot = np.einsum("ij,ij->i", e1, e2) / np.maximum(cross_norm, 1e-300)
        cot = np.clip(cot, -COT_CLAMP, COT_CLAMP)
        w = 0.5 * cot
        rows += [f[:, i], f[:, j]]
        cols += [f[:, j], f[:, i]]
        vals += [-w, -w]

    off = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    stiffness = off + sparse.diags(diag)

    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    face_areas = 0.5 * np.linalg.norm(cross, axis=1)
    mass = np.zeros(n)
    for k in range(3):
        np.add.at(mass, f[:, k], face_areas / 3.0)
    if np.any(mass <= 0.0):
        bad = int(np.flatnonzero(mass <= 0.0)[0])
        raise SpectralError(f"vertex {bad} has zero incident area (isolated or fully degenerate)")

    return LaplacianPair(stiffness=stiffness.tocsr(), mass_diag=mass)


def _fix_signs(phi: np.ndarray) -> np.ndarray:
    """Largest-magnitude entry of each column made positive (reproducible caches)."""
    idx = np.argmax(np.abs(phi), axis=0)
    flip = phi[idx, np.arange(phi.shape[1])] < 0
    phi[:, flip] *= -1.0
    return phi


def eigendecompose(lap: LaplacianPair, basis_size: int) -> SpectralBasis:
    """The `basis_size` algebraically smallest eigenpairs of L phi = lambda A phi.

    Dense symmetric solver up to 2000 vertices; shift-invert Lanczos around
    sigma ~ 0 beyond that (iteration cap 50 * basis_size). Eigenvalues come
    back ascending with the numerical kernel clamped to exactly zero, and
    eigenvectors are A-orthonormal with a deterministic sign convention.
    """
    n = lap.n_vertices
    E = int(basis_size)
    if not 1 <= E <= n:
        raise ValueError(f"basis size must be in [1, {n}], got {E}")

    n_comp, _ = csgraph.connected_components(lap.stiffness != 0, directed=False)
    if n_comp > 1:
        warnings.warn(
            f"mesh has {n_comp} connected components; expect {n_comp} near-zero eigenvalues",
            stacklevel=2,
        )

    if n <= DENSE_SOLVER_MAX_N or E >= n - 1:
        dense_l = lap.stiffness.toarray()
        dense_a = np.diag(lap.mass_diag)
        vals, vecs = scipy.linalg.eigh(dense_l, dense_a, subset_by_index=[0, E - 1])
    else:
        mass_mat = sparse.diags(lap.mass_diag).tocsc()
        # slightly negative shift keeps (L - sigma A) nonsingular despite the zero eigenvalue
        try:
            vals, vecs = spla.eigsh(
                lap.stiffness.tocsc(), k=E, M=mass_mat, sigma=-1e-2,
                which="LM", maxiter=50 * E,
            )
        except spla.ArpackNoConvergence as exc:
            got = len(exc.eigenvalues)
            raise SpectralError(
                f"eigensolver did not converge within {50 * E} iterations "
                f"({got}/{E} eigenpairs converged)"
            ) from exc

    order = np.argsort(vals)
    vals = vals[order]
    vecs = vecs[:, order]
    if vals[0] < -1e-6:
        raise SpectralError(f"negative eigenvalue {vals[0]:.3e}; Laplacian is not PSD")
    vals = np.where(np.abs(vals) < EIGENVALUE_FLOOR, 0.0, vals)

    # enforce exact A-orthonormal column scaling and the sign convention
    col_norms = np.sqrt(np.einsum("ij,i,ij->j", vecs, lap.mass_diag, vecs))
    vecs = vecs / col_norms
    vecs = _fix_signs(vecs)

    residual = lap.stiffness @ vecs - lap.mass_diag[:, None] * vecs * vals[None, :]
    rel = np.linalg.norm(residual, axis=0) / np.linalg.norm(vecs, axis=0)
    if np.max(rel) > 1e-5:
        raise SpectralError(
            f"eigenpair residual {np.max(rel):.3e} exceeds 1e-5 "
            f"(worst column {int(np.argmax(rel))})"
        )

    return SpectralBasis(eigenvalues=vals, eigenfunctions=np.ascontiguousarray(vecs),
                         mass_diag=lap.mass_diag.copy())


def heat_kernel(basis: SpectralBasis, t: float) -> HeatKernelMatrix:
    """Dense truncated heat kernel K_t = Phi diag(exp(-lambda t)) Phi^T."""
    if not t > 0.0:
        raise ValueError(f"diffusion time must be positive, got {t}")
    phi = basis.eigenfunctions
    weights = np.exp(-basis.eigenvalues * float(t))
    raw = (phi * weights) @ phi.T
    values = 0.5 * (raw + raw.T)  # exactly symmetric
    return HeatKernelMatrix(values=values, time=float(t), basis_size=basis.basis_size)


def _kernel_rows(basis: SpectralBasis, t: float, indices: np.ndarray) -> np.ndarray:
    phi = basis.eigenfunctions
    return (phi[indices] * np.exp(-basis.eigenvalues * t)) @ phi.T


def _mean_cv(basis: SpectralBasis, t: float, indices: np.ndarray) -> float:
    """Mean coefficient of variation of sampled heat-kernel rows (decreasing in t)."""
    rows = _kernel_rows(basis, t, indices)
    means = rows.mean(axis=1)
    stds = rows.std(axis=1)
    cv = np.where(means > 0.0, stds / np.maximum(np.abs(means), 1e-300), np.inf)
    return float(np.mean(cv))


TIME_BANDS = {"coarse": (0.5, 1.5), "fine": (3.0, 6.0)}
TIME_SEARCH_RANGE = (1e-6, 1e3)


def select_time(basis: SpectralBasis, sample_count: int, target: str, seed: int = 0) -> float:
    """Pick a diffusion time whose kernel rows hit a target spread.

    Bisects over t (log scale) until the mean coefficient of variation of
    `sample_count` uniformly sampled kernel rows lies in the target band:
    coarse [0.5, 1.5], fine [3.0, 6.0]. Large t flattens rows (CV -> 0), so
    fine times come out smaller than coarse ones.
    """
    if target not in TIME_BANDS:
        raise ValueError(f"target must be one of {sorted(TIME_BANDS)}, got {target!r}")
    n = basis.n_vertices
    if not 1 <= sample_count <= n:
        raise ValueError(f"sample_count must be in [1, {n}], got {sample_count}")
    lo_band, hi_band = TIME_BANDS[target]
    indices = np.random.default_rng(seed).choice(n, size=sample_count, replace=False)

    t_lo, t_hi = TIME_SEARCH_RANGE
    cv_lo = _mean_cv(basis, t_lo, indices)
    cv_hi = _mean_cv(basis, t_hi, indices)
    if cv_lo < lo_band:
        raise SpectralError(
            f"no diffusion time reaches the {target} band [{lo_band}, {hi_band}]: "
            f"coefficient of variation peaks at {cv_lo:.3f}; pass an explicit time instead"
        )
    if cv_hi > hi_band:
        raise SpectralError(
            f"no diffusion time reaches the {target} band [{lo_band}, {hi_band}]: "
            f"coefficient of variation stays above {cv_hi:.3f}; pass an explicit time instead"
        )
    if lo_band <= cv_lo <= hi_band:
        return t_lo
    if lo_band <= cv_hi <= hi_band:
        return t_hi

    for _ in range(200):
        t_mid = float(np.sqrt(t_lo * t_hi))
        cv = _mean_cv(basis, t_mid, indices)
        if lo_band <= cv <= hi_band:
            return t_mid
        if cv > hi_band:
            t_lo = t_mid  # still too concentrated; diffuse longer
        else:
            t_hi = t_mid
    raise SpectralError(
        f"bisection failed to land in the {target} band [{lo_band}, {hi_band}]; "
        "pass an explicit time instead"
    )


def save_basis(basis: SpectralBasis, path, mesh_hash: bytes) -> None:
    """SPEC1 container: N, E, eigenvalues, Phi (column-major), mass, mesh hash."""
    import struct

    with cacheio.entry_lock(path), cacheio.atomic_write(path) as fh:
        fh.write(SPEC_MAGIC)
        fh.write(struct.pack("<II", basis.n_vertices, basis.basis_size))
        cacheio.write_array(fh, basis.eigenvalues, np.float64)
        cacheio.write_array(fh, np.asfortranarray(basis.eigenfunctions).ravel(order="F"), np.float64)
        cacheio.write_array(fh, basis.mass_diag, np.float64)
        fh.write(mesh_hash)


def load_basis(path) -> tuple[SpectralBasis, bytes]:
    with open(path, "rb") as fh:
        cacheio.expect_magic(fh, SPEC_MAGIC, path)
        n = cacheio.read_u32(fh, path, "vertex count")
        E = cacheio.read_u32(fh, path, "basis size")
        vals = cacheio.read_array(fh, np.float64, E, path, "eigenvalues")
        phi = cacheio.read_array(fh, np.float64, n * E, path, "eigenfunctions").reshape((n, E), order="F")
        mass = cacheio.read_array(fh, np.float64, n, path, "mass diagonal")
        digest = cacheio.read_exact(fh, cacheio.HASH_BYTES, path, "mesh hash")
        if fh.read(1):
            raise CacheError(f"{path}: trailing bytes after basis payload")
    return SpectralBasis(eigenvalues=vals, eigenfunctions=np.ascontiguousarray(phi),
                         mass_diag=mass), digest


def save_laplacian(lap: LaplacianPair, path, mesh_hash: bytes) -> None:
    """LAPL1 container: N, nnz, COO triplets of the stiffness, mass, mesh hash."""
    import struct

    coo = lap.stiffness.tocoo()
    with cacheio.entry_lock(path), cacheio.atomic_write(path) as fh:
        fh.write(LAPL_MAGIC)
        fh.write(struct.pack("<IQ", lap.n_vertices, coo.nnz))
        cacheio.write_array(fh, coo.row, np.int32)
        cacheio.write_array(fh, coo.col, np.int32)
        cacheio.write_array(fh, coo.data, np.float64)
        cacheio.write_array(fh, lap.mass_diag, np.float64)
        fh.write(mesh_hash)


def load_laplacian(path) -> tuple[LaplacianPair, bytes]:
    import struct

    with open(path, "rb") as fh:
        cacheio.expect_magic(fh, LAPL_MAGIC, path)
        n = cacheio.read_u32(fh, path, "vertex count")
        nnz = struct.unpack("<Q", cacheio.read_exact(fh, 8, path, "nnz"))[0]
        rows = cacheio.read_array(fh, np.int32, nnz, path, "rows")
        cols = cacheio.read_array(fh, np.int32, nnz, path, "cols")
        vals = cacheio.read_array(fh, np.float64, nnz, path, "values")
        mass = cacheio.read_array(fh, np.float64, n, path, "mass diagonal")
        digest = cacheio.read_exact(fh, cacheio.HASH_BYTES, path, "mesh hash")
    stiffness = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    return LaplacianPair(stiffness=stiffness, mass_diag=mass), digest
