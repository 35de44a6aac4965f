"""Learning core: shared residual MLP, spectral projection, functional-map
solve, soft correspondence, the unsupervised distortion loss, its analytic
gradients, and Adam.

Both shapes of a pair run through the same parameters (siamese). All math
is float64; gradient correctness is validated against central finite
differences in the test suite, which needs the headroom.

Notation for one training pair (source s, target t):

    Y   = mlp(S)                          per-shape refined features
    F   = Phi_s^T A_s Y_s,  G = Phi_t^T A_t Y_t
    C   = G F^T (F F^T + ridge I)^-1      functional map
    raw = Psi C Phi_s^T A_s               mapped indicator functions
    P   = |raw| with unit-L2 columns,  Q = P o P   (column-stochastic)
    loss = ||K_s - Q^T K_t Q||_F^2 / N_s^2

Supervisor kernels K are required to be exactly symmetric (heat kernels are
by construction; geodesic matrices get symmetrized when wrapped), which the
backward pass exploits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import cacheio
from .errors import CacheError, TrainingError
from .mesh import TriMesh
from .spectral import SpectralBasis

__all__ = [
    "ResidualBlock",
    "NetworkParams",
    "AdamState",
    "ShapeBundle",
    "SoftCorrespondence",
    "init_params",
    "forward_features",
    "project",
    "solve_fmap",
    "soft_map",
    "distortion_loss",
    "backward",
    "pair_loss",
    "adam_step",
    "init_adam_state",
    "take_vertices",
    "save_checkpoint",
    "load_checkpoint",
]

PARAMS_MAGIC = b"PRMS1"
DEFAULT_RIDGE = 1e-6


@dataclass
class ResidualBlock:
    w1: np.ndarray  # (D, D)
    b1: np.ndarray  # (D,)
    w2: np.ndarray  # (D, D)
    b2: np.ndarray  # (D,)

    def zeros_like(self) -> "ResidualBlock":
        return ResidualBlock(np.zeros_like(self.w1), np.zeros_like(self.b1),
                             np.zeros_like(self.w2), np.zeros_like(self.b2))

    def tensors(self):
        return (self.w1, self.b1, self.w2, self.b2)


@dataclass
class NetworkParams:
    blocks: list[ResidualBlock]
    seed: int

    @property
    def layer_count(self) -> int:
        return len(self.blocks)

    @property
    def dim(self) -> int:
        return self.blocks[0].w1.shape[0]


@dataclass
class AdamState:
    first_moment: list[ResidualBlock]
    second_moment: list[ResidualBlock]
    step_count: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class SupervisorKernel:
    """Pairwise N x N training signal: a heat kernel K_t or geodesic matrix.

    The matrix is symmetrized on construction; the backward pass relies on
    exact symmetry.
    """

    matrix: np.ndarray
    kind: str  # "heat" | "geodesic"
    time: float | None = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"supervisor kernel must be square, got {m.shape}")
        if self.kind not in ("heat", "geodesic"):
            raise ValueError(f"kind must be 'heat' or 'geodesic', got {self.kind!r}")
        self.matrix = 0.5 * (m + m.T)


@dataclass
class ShapeBundle:
    """Everything the loss needs about one shape, with consistent vertex order."""

    basis: SpectralBasis
    descriptors: np.ndarray  # (N, D)
    supervisor: SupervisorKernel | None = None
    kind: str = "source"
    mesh: TriMesh | None = None

    def __post_init__(self):
        n = self.basis.n_vertices
        if self.descriptors.shape[0] != n:
            raise ValueError(f"descriptor rows {self.descriptors.shape[0]} != basis vertices {n}")
        if self.supervisor is not None and self.supervisor.matrix.shape[0] != n:
            raise ValueError(f"supervisor size {self.supervisor.matrix.shape[0]} != vertices {n}")

    @property
    def n_vertices(self) -> int:
        return self.basis.n_vertices


@dataclass
class SoftCorrespondence:
    fmap: np.ndarray        # (E, E)
    soft_map: np.ndarray    # (N_t, N_s), columns sum to 1
    pre_square: np.ndarray  # (N_t, N_s), L2-normalized |raw|
    zero_columns: int = 0   # columns that fell back to uniform


def init_params(dim: int, layer_count: int, seed: int) -> NetworkParams:
    """He-style init: weights ~ N(0, 2/D), biases zero, deterministic per seed."""
    if dim < 1:
        raise ValueError(f"descriptor dim must be >= 1, got {dim}")
    if layer_count < 1:
        raise ValueError(f"layer_count must be >= 1, got {layer_count}")
    rng = np.random.default_rng(seed)
    scale = np.sqrt(2.0 / dim)
    blocks = [
        ResidualBlock(
            w1=rng.normal(0.0, scale, (dim, dim)),
            b1=np.zeros(dim),
            w2=rng.normal(0.0, scale, (dim, dim)),
            b2=np.zeros(dim),
        )
        for _ in range(layer_count)
    ]
    return NetworkParams(blocks=blocks, seed=int(seed))


def _elu(z):
    return np.where(z > 0.0, z, np.expm1(np.minimum(z, 0.0)))


def _elu_deriv(z):
    return np.where(z > 0.0, 1.0, np.exp(np.minimum(z, 0.0)))


def _forward_cached(params: NetworkParams, x: np.ndarray):
    caches = []
    for blk in params.blocks:
        z = x @ blk.w1 + blk.b1
        h = _elu(z)
        caches.append((x, z, h))
        x = x + h @ blk.w2 + blk.b2
    return x, caches


def forward_features(params: NetworkParams, descriptors: np.ndarray) -> np.ndarray:
    """Row-wise residual blocks: x <- x + ELU(x W1 + b1) W2 + b2."""
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if descriptors.shape[1] != params.dim:
        raise ValueError(f"descriptor dim {descriptors.shape[1]} != network dim {params.dim}")
    out, _ = _forward_cached(params, descriptors)
    return out


def _backward_features(params: NetworkParams, caches, grad_out, grads):
    """Accumulate parameter gradients for one shape's MLP pass into `grads`."""
    g = grad_out
    for blk, gblk, (x, z, h) in zip(reversed(params.blocks), reversed(grads), reversed(caches)):
        gblk.b2 += g.sum(axis=0)
        gblk.w2 += h.T @ g
        gz = (g @ blk.w2.T) * _elu_deriv(z)
        gblk.b1 += gz.sum(axis=0)
        gblk.w1 += x.T @ gz
        g = g + gz @ blk.w1.T
    return g


def project(features: np.ndarray, basis: SpectralBasis) -> np.ndarray:
    """Spectral coefficients F = Phi^T A features (mass-weighted inner products)."""
    if features.shape[0] != basis.n_vertices:
        raise ValueError(f"feature rows {features.shape[0]} != basis vertices {basis.n_vertices}")
    return basis.eigenfunctions.T @ (basis.mass_diag[:, None] * features)


def solve_fmap(F: np.ndarray, G: np.ndarray, ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    """Least-squares functional map: C = G F^T (F F^T + ridge I)^-1."""
    if F.shape != G.shape:
        raise ValueError(f"coefficient shapes differ: {F.shape} vs {G.shape}")
    if ridge < 0.0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    E, D = F.shape
    if D < E:
        import warnings
        warnings.warn(f"underdetermined functional-map solve: D={D} < E={E}", stacklevel=2)
    M = F @ F.T + ridge * np.eye(E)
    try:
        C = scipy.linalg.solve(M, F @ G.T, assume_a="pos").T
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as exc:
        raise ValueError(
            f"F F^T + ridge I is numerically singular (ridge={ridge}); increase the ridge"
        ) from exc
    if not np.all(np.isfinite(C)):
        raise ValueError(
            f"functional-map solve produced non-finite entries (ridge={ridge}); increase the ridge"
        )
    return C


def soft_map(C: np.ndarray, source_basis: SpectralBasis,
             target_basis: SpectralBasis) -> SoftCorrespondence:
    """Column-stochastic soft correspondence from a functional map.

    raw = Psi C Phi^T A maps source indicator functions to the target;
    P is |raw| with unit-L2 columns, and Q = P o P assigns each source
    vertex a probability distribution over target vertices. Columns of
    raw that vanish entirely fall back to the uniform distribution.
    """
    if source_basis.basis_size != target_basis.basis_size:
        raise ValueError("source and target bases must share the truncation size")
    raw = (target_basis.eigenfunctions @ C) @ \
        (source_basis.eigenfunctions * source_basis.mass_diag[:, None]).T
    p = np.abs(raw)
    norms = np.linalg.norm(p, axis=0)
    zero_cols = norms == 0.0
    safe = np.where(zero_cols, 1.0, norms)
    p = p / safe
    n_t = p.shape[0]
    if zero_cols.any():
        p[:, zero_cols] = 1.0 / np.sqrt(n_t)  # keeps Q = P o P exact
    q = p * p
    return SoftCorrespondence(fmap=C, soft_map=q, pre_square=p,
                              zero_columns=int(zero_cols.sum()))


def distortion_loss(Q: np.ndarray, K_source: np.ndarray, K_target: np.ndarray) -> float:
    """(1 / N_s^2) * ||K_s - Q^T K_t Q||_F^2."""
    n_t, n_s = Q.shape
    if K_source.shape != (n_s, n_s):
        raise ValueError(f"source kernel shape {K_source.shape} != ({n_s}, {n_s})")
    if K_target.shape != (n_t, n_t):
        raise ValueError(f"target kernel shape {K_target.shape} != ({n_t}, {n_t})")
    residual = K_source - Q.T @ (K_target @ Q)
    return float(np.sum(residual * residual) / (n_s * n_s))


def pair_loss(params: NetworkParams, source: ShapeBundle, target: ShapeBundle,
              ridge: float = DEFAULT_RIDGE) -> tuple[float, SoftCorrespondence]:
    """Forward pass only: loss value and the soft correspondence."""
    if source.supervisor is None or target.supervisor is None:
        raise ValueError("both bundles need a supervisor kernel attached")
    y_s = forward_features(params, source.descriptors)
    y_t = forward_features(params, target.descriptors)
    F = project(y_s, source.basis)
    G = project(y_t, target.basis)
    C = solve_fmap(F, G, ridge)
    soft = soft_map(C, source.basis, target.basis)
    loss = distortion_loss(soft.soft_map, source.supervisor.matrix, target.supervisor.matrix)
    return loss, soft


def backward(params: NetworkParams, source: ShapeBundle, target: ShapeBundle,
             ridge: float = DEFAULT_RIDGE):
    """Loss plus analytic gradients of every weight and bias.

    Backpropagates through the kernel-distortion loss, the Hadamard square,
    the column normalization, |.| (subgradient 0 at exact zeros), the
    ridge-regularized map solve (differentiating w.r.t. both F and G), the
    spectral projection, and both siamese MLP passes.

    Returns (loss, grads, soft) with grads shaped like ``params.blocks``.
    """
    if source.supervisor is None or target.supervisor is None:
        raise ValueError("both bundles need a supervisor kernel attached")
    k_s = source.supervisor.matrix
    k_t = target.supervisor.matrix

    s_desc = np.asarray(source.descriptors, dtype=np.float64)
    t_desc = np.asarray(target.descriptors, dtype=np.float64)
    y_s, cache_s = _forward_cached(params, s_desc)
    y_t, cache_t = _forward_cached(params, t_desc)

    phi_s = source.basis.eigenfunctions
    phi_t = target.basis.eigenfunctions
    a_phi_s = phi_s * source.basis.mass_diag[:, None]  # A Phi
    a_phi_t = phi_t * target.basis.mass_diag[:, None]
    F = a_phi_s.T @ y_s
    G = a_phi_t.T @ y_t

    E = F.shape[0]
    M = F @ F.T + ridge * np.eye(E)
    try:
        cho = scipy.linalg.cho_factor(M)
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as exc:
        raise ValueError(
            f"F F^T + ridge I is numerically singular (ridge={ridge}); increase the ridge"
        ) from exc
    C = scipy.linalg.cho_solve(cho, F @ G.T).T

    raw = (phi_t @ C) @ a_phi_s.T
    p_un = np.abs(raw)
    norms = np.linalg.norm(p_un, axis=0)
    zero_cols = norms == 0.0
    safe = np.where(zero_cols, 1.0, norms)
    P = p_un / safe
    n_t = P.shape[0]
    if zero_cols.any():
        P[:, zero_cols] = 1.0 / np.sqrt(n_t)
    Q = P * P

    n_s = Q.shape[1]
    residual = k_s - Q.T @ (k_t @ Q)
    loss = float(np.sum(residual * residual) / (n_s * n_s))

    # d loss / dQ; k_t is exactly symmetric so the two chain terms merge
    gQ = (-2.0 / (n_s * n_s)) * (k_t @ (Q @ (residual + residual.T)))
    gP = 2.0 * P * gQ
    # column L2 normalization: gB_j = (gP_j - P_j <P_j, gP_j>) / ||b_j||
    col_dot = np.einsum("ij,ij->j", P, gP)
    gB = (gP - P * col_dot[None, :]) / safe
    if zero_cols.any():
        gB[:, zero_cols] = 0.0  # uniform fallback is locally constant
    g_raw = np.sign(raw) * gB

    gC = (phi_t.T @ g_raw) @ a_phi_s
    # C = G F^T M^-1:  dG = W M^-1 F;  dF = M^-1 W^T G - (U + U^T) F, U = C^T W M^-1
    w_minv = scipy.linalg.cho_solve(cho, gC.T).T  # W M^-1 (M symmetric)
    gG = w_minv @ F
    U = C.T @ w_minv
    gF = scipy.linalg.cho_solve(cho, gC.T) @ G - (U + U.T) @ F

    g_ys = a_phi_s @ gF
    g_yt = a_phi_t @ gG

    grads = [blk.zeros_like() for blk in params.blocks]
    _backward_features(params, cache_s, g_ys, grads)
    _backward_features(params, cache_t, g_yt, grads)

    for idx, gblk in enumerate(grads):
        for tensor in gblk.tensors():
            if not np.all(np.isfinite(tensor)):
                raise TrainingError(f"non-finite gradient in residual block {idx}")

    soft = SoftCorrespondence(fmap=C, soft_map=Q, pre_square=P,
                              zero_columns=int(zero_cols.sum()))
    return loss, grads, soft


def init_adam_state(params: NetworkParams, learning_rate: float = 0.001,
                    beta1: float = 0.9, beta2: float = 0.999,
                    epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        first_moment=[blk.zeros_like() for blk in params.blocks],
        second_moment=[blk.zeros_like() for blk in params.blocks],
        step_count=0,
        learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon,
    )


def adam_step(params: NetworkParams, grads: list[ResidualBlock], state: AdamState) -> None:
    """Standard Adam update with bias correction, in place."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for blk, gblk, mblk, vblk in zip(params.blocks, grads, state.first_moment,
                                     state.second_moment):
        for theta, g, m, v in zip(blk.tensors(), gblk.tensors(), mblk.tensors(),
                                  vblk.tensors()):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / correction1
            v_hat = v / correction2
            theta -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def take_vertices(bundle: ShapeBundle, indices: np.ndarray) -> ShapeBundle:
    """Bundle restricted/permuted to `indices` (vertex shuffling + subsampling)."""
    indices = np.asarray(indices, dtype=np.int64)
    basis = SpectralBasis(
        eigenvalues=bundle.basis.eigenvalues,
        eigenfunctions=bundle.basis.eigenfunctions[indices],
        mass_diag=bundle.basis.mass_diag[indices],
    )
    supervisor = None
    if bundle.supervisor is not None:
        supervisor = SupervisorKernel(
            matrix=bundle.supervisor.matrix[np.ix_(indices, indices)],
            kind=bundle.supervisor.kind,
            time=bundle.supervisor.time,
        )
    return ShapeBundle(basis=basis, descriptors=bundle.descriptors[indices],
                       supervisor=supervisor, kind=bundle.kind, mesh=None)


def _write_blocks(fh, blocks):
    for blk in blocks:
        for tensor in blk.tensors():
            cacheio.write_array(fh, tensor.ravel(), np.float64)


def _read_blocks(fh, layer_count, dim, path, what):
    blocks = []
    for _ in range(layer_count):
        w1 = cacheio.read_array(fh, np.float64, dim * dim, path, what).reshape(dim, dim)
        b1 = cacheio.read_array(fh, np.float64, dim, path, what)
        w2 = cacheio.read_array(fh, np.float64, dim * dim, path, what).reshape(dim, dim)
        b2 = cacheio.read_array(fh, np.float64, dim, path, what)
        blocks.append(ResidualBlock(w1, b1, w2, b2))
    return blocks


def save_checkpoint(params: NetworkParams, state: AdamState, path) -> None:
    """PRMS1 container: layer count, dim, seed, parameter tensors, Adam state."""
    with cacheio.entry_lock(path), cacheio.atomic_write(path) as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<IIq", params.layer_count, params.dim, params.seed))
        _write_blocks(fh, params.blocks)
        fh.write(struct.pack("<ddddQ", state.learning_rate, state.beta1, state.beta2,
                             state.epsilon, state.step_count))
        _write_blocks(fh, state.first_moment)
        _write_blocks(fh, state.second_moment)


def load_checkpoint(path) -> tuple[NetworkParams, AdamState]:
    with open(path, "rb") as fh:
        cacheio.expect_magic(fh, PARAMS_MAGIC, path)
        layer_count, dim, seed = struct.unpack("<IIq", cacheio.read_exact(fh, 16, path, "header"))
        blocks = _read_blocks(fh, layer_count, dim, path, "parameters")
        lr, b1, b2, eps, steps = struct.unpack(
            "<ddddQ", cacheio.read_exact(fh, 40, path, "optimizer header"))
        first = _read_blocks(fh, layer_count, dim, path, "first moment")
        second = _read_blocks(fh, layer_count, dim, path, "second moment")
        if fh.read(1):
            raise CacheError(f"{path}: trailing bytes after checkpoint payload")
    params = NetworkParams(blocks=blocks, seed=seed)
    state = AdamState(first_moment=first, second_moment=second, step_count=int(steps),
                      learning_rate=lr, beta1=b1, beta2=b2, epsilon=eps)
    return params, state
