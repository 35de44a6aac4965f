"""Run configuration, cache orchestration, training loop, inference,
evaluation driver, and the heat-vs-geodesic timing benchmark.

A run is fully determined by (config, seed, input files, thread-count
setting): pair sampling and vertex shuffling draw from a stateless
per-iteration RNG keyed by (seed, iteration), so an interrupted run resumed
from its last checkpoint replays the identical trajectory. Loss logs and
checkpoints contain no wall-clock data and are byte-identical across
repeated runs; timings live in the manifest.
"""

from __future__ import annotations

import json
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__, cacheio, corrnet, curriculum, descriptor, evaluation, geodesic, mesh, spectral
from .corrnet import ShapeBundle, SupervisorKernel
from .errors import CacheError, ConfigError, EvaluationError, ToolkitError, TrainingError

__all__ = [
    "RunConfig",
    "load_config",
    "precompute",
    "train",
    "infer",
    "evaluate",
    "bench_timing",
]

SUBSAMPLE_FULL_LIMIT = 3500   # below this, the loss sees every vertex by default
SUBSAMPLE_DEFAULT = 1500
MAX_TRAIN_VERTICES = 10000
VALIDATION_PAIR_CAP = 8


@dataclass
class RunConfig:
    train_dir: str | None = None
    val_dir: str | None = None
    test_dir: str | None = None
    ground_truth_dir: str | None = None
    basis_size: int = 150
    shot_bins: int = 10
    shot_radius_fraction: float = 0.05
    external_descriptor_dir: str | None = None
    layer_count: int = 7
    seed: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    schedule: curriculum.Schedule = field(
        default_factory=lambda: curriculum.Schedule(
            kind="decayed_heat", total_iterations=10000,
            stages=((0, 0.1), (5000, 0.01))))
    subsample: int | None = None
    ridge: float = 1e-6
    cache_dir: str = "cache"
    output_dir: str = "out"
    checkpoint_every: int = 1000
    validate_every: int = 250
    max_train_vertices: int = MAX_TRAIN_VERTICES


def _resolve(base: Path, value):
    if value is None:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def load_config(path) -> RunConfig:
    """Parse a YAML run config; relative paths resolve against the file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    base = path.parent

    data = raw.get("data", {}) or {}
    desc = raw.get("descriptor", {}) or {}
    net = raw.get("network", {}) or {}
    opt = raw.get("optimizer", {}) or {}
    sched = raw.get("schedule", {}) or {}

    known_top = {"data", "descriptor", "network", "optimizer", "schedule", "subsample",
                 "ridge", "basis_size", "cache_dir", "output_dir", "checkpoint_every",
                 "validate_every", "max_train_vertices"}
    unknown = set(raw) - known_top
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")

    try:
        schedule = curriculum.Schedule(
            kind=sched.get("kind", "decayed_heat"),
            total_iterations=int(sched.get("total_iterations", 10000)),
            stages=tuple(tuple(s) for s in sched.get("stages", ((0, 0.1), (5000, 0.01)))),
        )
        cfg = RunConfig(
            train_dir=_resolve(base, data.get("train_dir")),
            val_dir=_resolve(base, data.get("val_dir")),
            test_dir=_resolve(base, data.get("test_dir")),
            ground_truth_dir=_resolve(base, data.get("ground_truth_dir")),
            basis_size=int(raw.get("basis_size", 150)),
            shot_bins=int(desc.get("bins", 10)),
            shot_radius_fraction=float(desc.get("radius_fraction", 0.05)),
            external_descriptor_dir=_resolve(base, desc.get("external_dir")),
            layer_count=int(net.get("layer_count", 7)),
            seed=int(net.get("seed", 0)),
            learning_rate=float(opt.get("learning_rate", 0.001)),
            beta1=float(opt.get("beta1", 0.9)),
            beta2=float(opt.get("beta2", 0.999)),
            epsilon=float(opt.get("epsilon", 1e-8)),
            schedule=schedule,
            subsample=None if raw.get("subsample") is None else int(raw["subsample"]),
            ridge=float(raw.get("ridge", 1e-6)),
            cache_dir=_resolve(base, raw.get("cache_dir", "cache")),
            output_dir=_resolve(base, raw.get("output_dir", "out")),
            checkpoint_every=int(raw.get("checkpoint_every", 1000)),
            validate_every=int(raw.get("validate_every", 250)),
            max_train_vertices=int(raw.get("max_train_vertices", MAX_TRAIN_VERTICES)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    _check_ranges(cfg)
    return cfg


def _check_ranges(cfg: RunConfig) -> None:
    if cfg.basis_size < 1:
        raise ConfigError(f"basis_size must be >= 1, got {cfg.basis_size}")
    if cfg.layer_count < 1:
        raise ConfigError(f"layer_count must be >= 1, got {cfg.layer_count}")
    if cfg.shot_bins < 2:
        raise ConfigError(f"descriptor bins must be >= 2, got {cfg.shot_bins}")
    if not 0.0 < cfg.shot_radius_fraction < 1.0:
        raise ConfigError(
            f"descriptor radius_fraction must be in (0, 1), got {cfg.shot_radius_fraction}")
    if cfg.ridge < 0.0:
        raise ConfigError(f"ridge must be >= 0, got {cfg.ridge}")
    if cfg.subsample is not None and cfg.subsample < 2:
        raise ConfigError(f"subsample must be >= 2, got {cfg.subsample}")
    if cfg.learning_rate <= 0.0:
        raise ConfigError(f"learning_rate must be > 0, got {cfg.learning_rate}")
    if cfg.checkpoint_every < 1 or cfg.validate_every < 1:
        raise ConfigError("checkpoint_every and validate_every must be >= 1")


def _config_snapshot(cfg: RunConfig) -> dict:
    snap = {k: v for k, v in vars(cfg).items() if k != "schedule"}
    snap["schedule"] = {
        "kind": cfg.schedule.kind,
        "total_iterations": cfg.schedule.total_iterations,
        "stages": [list(s) for s in cfg.schedule.stages],
    }
    return snap


def list_meshes(directory) -> list[Path]:
    """Mesh files in a directory, sorted by name for deterministic ordering."""
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"mesh directory not found: {d}")
    found = sorted(p for p in d.iterdir() if p.suffix.lower() in (".off", ".ply"))
    if not found:
        raise ConfigError(f"no .off/.ply meshes in {d}")
    return found


class ShapeCache:
    """Per-mesh cache entries under cache_dir, keyed by source-file hash.

    Artifacts per mesh `<stem>`: `<stem>.norm.off` (unit-area mesh),
    `<stem>.lapl`, `<stem>.spec`, `<stem>.desc`, and `<stem>.geod` when a
    geodesic supervisor is required. A stale or corrupt entry is recomputed
    and overwritten with a logged warning.
    """

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = Path(cfg.cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)

    def paths(self, mesh_path: Path) -> dict:
        stem = mesh_path.stem
        return {
            "norm": self.dir / f"{stem}.norm.off",
            "lapl": self.dir / f"{stem}.lapl",
            "spec": self.dir / f"{stem}.spec",
            "desc": self.dir / f"{stem}.desc",
            "geod": self.dir / f"{stem}.geod",
        }

    def ensure(self, mesh_path: Path, need_geodesic: bool) -> dict:
        """Bring every required artifact up to date; report per-artifact status."""
        mesh_path = Path(mesh_path)
        digest = cacheio.file_sha256(mesh_path)
        paths = self.paths(mesh_path)
        status = {}

        normalized, status["norm"] = self._ensure_norm(mesh_path, digest, paths["norm"])
        lap, status["lapl"] = self._ensure_lapl(normalized, digest, paths["lapl"])
        basis, status["spec"] = self._ensure_spec(lap, digest, paths["spec"])
        _, status["desc"] = self._ensure_desc(normalized, mesh_path, digest, paths["desc"])
        if need_geodesic:
            _, status["geod"] = self._ensure_geod(normalized, digest, paths["geod"])
        return status

    def _fresh(self, path: Path, digest: bytes, loader):
        """(payload, status) — payload None if missing/stale/corrupt."""
        if not path.exists():
            return None, "computed"
        try:
            payload, stored = loader(path)
        except (CacheError, OSError) as exc:
            warnings.warn(f"cache entry {path} unreadable ({exc}); recomputing", stacklevel=2)
            return None, "recomputed"
        if stored != digest:
            return None, "recomputed"
        return payload, "cached"

    def _ensure_norm(self, mesh_path: Path, digest: bytes, out: Path):
        def loader(p):
            loaded = mesh.load_mesh(p)
            stored = bytes.fromhex(_read_sidecar(p))
            return loaded, stored

        payload, status = self._fresh(out, digest, loader)
        if payload is None:
            raw = mesh.load_mesh(mesh_path)
            if raw.n_vertices > self.cfg.max_train_vertices:
                raise ConfigError(
                    f"{mesh_path.name}: {raw.n_vertices} vertices exceeds the "
                    f"{self.cfg.max_train_vertices}-vertex cap; decimate the mesh first")
            payload = mesh.normalize_to_unit_area(raw)
            mesh.save_mesh(payload, out)
            _write_sidecar(out, digest.hex())
        return payload, status

    def _ensure_lapl(self, normalized, digest: bytes, out: Path):
        payload, status = self._fresh(out, digest, spectral.load_laplacian)
        if payload is None:
            payload = spectral.build_laplacian(normalized)
            spectral.save_laplacian(payload, out, digest)
        return payload, status

    def _ensure_spec(self, lap, digest: bytes, out: Path):
        def loader(p):
            basis, stored = spectral.load_basis(p)
            if basis.basis_size != self.cfg.basis_size:
                return None, b""  # force recompute on basis-size change
            return basis, stored

        payload, status = self._fresh(out, digest, loader)
        if payload is None:
            payload = spectral.eigendecompose(lap, self.cfg.basis_size)
            spectral.save_basis(payload, out, digest)
        return payload, status

    def _ensure_desc(self, normalized, mesh_path: Path, digest: bytes, out: Path):
        def loader(p):
            desc, stored = descriptor.load_descriptors(p)
            if desc.values.shape[0] != normalized.n_vertices:
                return None, b""
            return desc, stored

        payload, status = self._fresh(out, digest, loader)
        if payload is None:
            if self.cfg.external_descriptor_dir is not None:
                ext = Path(self.cfg.external_descriptor_dir) / f"{mesh_path.stem}.desc"
                if not ext.exists():
                    raise ConfigError(f"external descriptor file missing: {ext}")
                payload, _ = descriptor.load_descriptors(ext)
                if payload.values.shape[0] != normalized.n_vertices:
                    raise ConfigError(
                        f"{ext}: {payload.values.shape[0]} rows for a "
                        f"{normalized.n_vertices}-vertex mesh")
                payload = descriptor.DescriptorMatrix(
                    values=payload.values, descriptor_kind="external",
                    config_hash=payload.config_hash)
            else:
                payload = descriptor.compute_shot(
                    normalized, bins=self.cfg.shot_bins,
                    radius_fraction=self.cfg.shot_radius_fraction)
            descriptor.save_descriptors(payload, out, digest)
        return payload, status

    def _ensure_geod(self, normalized, digest: bytes, out: Path):
        payload, status = self._fresh(out, digest, geodesic.load_geodesic)
        if payload is None:
            payload = geodesic.all_pairs_geodesic(normalized)
            geodesic.save_geodesic(payload, out, digest)
        return payload, status

    def load_bundle(self, mesh_path: Path, with_geodesic: bool, kind: str = "source"):
        """ShapeBundle from cache (cache must be up to date; see ensure)."""
        paths = self.paths(Path(mesh_path))
        normalized = mesh.load_mesh(paths["norm"])
        basis, _ = spectral.load_basis(paths["spec"])
        desc, _ = descriptor.load_descriptors(paths["desc"])
        supervisor = None
        if with_geodesic:
            geo, _ = geodesic.load_geodesic(paths["geod"])
            supervisor = SupervisorKernel(matrix=geo.values, kind="geodesic")
        return ShapeBundle(basis=basis, descriptors=desc.values,
                           supervisor=supervisor, kind=kind, mesh=normalized)


def _read_sidecar(path: Path) -> str:
    return Path(str(path) + ".src").read_text().strip()


def _write_sidecar(path: Path, hex_digest: str) -> None:
    Path(str(path) + ".src").write_text(hex_digest + "\n")


def precompute(cfg: RunConfig) -> dict:
    """Populate every cache the configured run will touch; idempotent.

    Geodesic matrices are only computed when the schedule demands them.
    Returns a report: per-mesh artifact status plus summary counts.
    """
    dirs = [d for d in (cfg.train_dir, cfg.val_dir, cfg.test_dir) if d]
    if not dirs:
        raise ConfigError("config names no mesh directories")
    need_geodesic = cfg.schedule.kind == "geodesic"
    cache = ShapeCache(cfg)
    report = {"meshes": {}, "computed": 0, "cached": 0, "recomputed": 0}
    seen = set()
    for d in dirs:
        for mesh_path in list_meshes(d):
            if mesh_path in seen:
                continue
            seen.add(mesh_path)
            try:
                status = cache.ensure(mesh_path, need_geodesic=need_geodesic)
            except ToolkitError:
                raise
            except Exception as exc:
                raise CacheError(f"precompute failed for {mesh_path.name}: {exc}") from exc
            report["meshes"][mesh_path.name] = status
            for s in status.values():
                report[s] += 1
    return report


def _effective_subsample(cfg: RunConfig, n: int) -> int:
    if cfg.subsample is not None:
        return min(cfg.subsample, n)
    return n if n <= SUBSAMPLE_FULL_LIMIT else SUBSAMPLE_DEFAULT


def _iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


def _validation_pairs(bundles: list) -> list:
    if len(bundles) == 1:
        return [(bundles[0], bundles[0])]
    pairs = [(bundles[i], bundles[(i + 1) % len(bundles)]) for i in range(len(bundles))]
    return pairs[:VALIDATION_PAIR_CAP]


def _fixed_subsample(bundle: ShapeBundle, seed: int) -> ShapeBundle:
    n = bundle.n_vertices
    if n <= SUBSAMPLE_FULL_LIMIT:
        return bundle
    idx = np.random.default_rng([seed, 0x7A11DA7E]).choice(n, size=SUBSAMPLE_DEFAULT,
                                                           replace=False)
    return corrnet.take_vertices(bundle, idx)


def _write_loss_log(path: Path, entries) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,loss\n")
        for it, loss in entries:
            fh.write(f"{it},{loss:.17g}\n")


def _write_loss_svg(entries, validation, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.4, 3.6))
    its = [e[0] for e in entries]
    vals = [e[1] for e in entries]
    ax.plot(its, vals, lw=0.7, label="training loss")
    if validation:
        ax.plot([v[0] for v in validation], [v[1] for v in validation],
                "o-", ms=3, label="validation loss (initial time)")
    ax.set_xlabel("iteration")
    ax.set_ylabel("distortion loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def train(cfg: RunConfig, resume: bool = False) -> dict:
    """Unsupervised training over the configured mesh collection.

    Per iteration: sample an ordered pair (self pairs allowed), draw fresh
    independent vertex permutations for both shapes, restrict to the
    subsample, fetch the stage supervisor kernel, and run one
    forward/backward/Adam step. Aborts on NaN loss with a manifest
    snapshot; `resume=True` continues from the saved checkpoint.
    """
    if cfg.train_dir is None:
        raise ConfigError("config has no data.train_dir")
    t_start = time.perf_counter()
    precompute(cfg)
    t_precompute = time.perf_counter() - t_start

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = ShapeCache(cfg)
    need_geo = cfg.schedule.kind == "geodesic"

    train_paths = list_meshes(cfg.train_dir)
    bundles = [cache.load_bundle(p, with_geodesic=need_geo) for p in train_paths]
    dim = bundles[0].descriptors.shape[1]
    for p, b in zip(train_paths, bundles):
        if b.descriptors.shape[1] != dim:
            raise ConfigError(f"{p.name}: descriptor dim {b.descriptors.shape[1]} != {dim}")

    val_bundles = []
    if cfg.val_dir is not None:
        val_paths = list_meshes(cfg.val_dir)
        val_bundles = [_fixed_subsample(cache.load_bundle(p, with_geodesic=need_geo), cfg.seed)
                       for p in val_paths]

    checkpoint_path = out_dir / "checkpoint.prms"
    start_iteration = 0
    if resume and checkpoint_path.exists():
        params, adam = corrnet.load_checkpoint(checkpoint_path)
        if params.dim != dim:
            raise ConfigError(
                f"checkpoint dim {params.dim} does not match descriptors ({dim})")
        start_iteration = adam.step_count
    else:
        params = corrnet.init_params(dim, cfg.layer_count, cfg.seed)
        adam = corrnet.init_adam_state(params, learning_rate=cfg.learning_rate,
                                       beta1=cfg.beta1, beta2=cfg.beta2,
                                       epsilon=cfg.epsilon)

    manifest = {
        "version": __version__,
        "config": _config_snapshot(cfg),
        "seed": cfg.seed,
        "inputs": {p.name: cacheio.file_sha256(p).hex() for p in train_paths},
        "thread_env": {k: os.environ.get(k) for k in
                       ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")},
        "resumed_from": start_iteration if resume and start_iteration else None,
        "stage_changes": [],
        "validation": [],
        "timings": {"precompute_seconds": t_precompute},
    }

    kernel_caches = [dict() for _ in bundles]
    loss_log = []
    schedule = cfg.schedule
    prev_stage = None
    t_loop = time.perf_counter()

    def flush(final: bool):
        corrnet.save_checkpoint(params, adam, checkpoint_path)
        _write_loss_log(out_dir / "loss_log.csv", loss_log)
        manifest["timings"]["train_seconds"] = time.perf_counter() - t_loop
        manifest["iterations_completed"] = adam.step_count
        if loss_log:
            manifest["final_loss"] = loss_log[-1][1]
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
        if final and loss_log:
            _write_loss_svg(loss_log, manifest["validation"], out_dir / "loss_curve.svg")

    for iteration in range(start_iteration, schedule.total_iterations):
        stage = curriculum.stage_index(schedule, iteration)
        if prev_stage is not None and stage != prev_stage:
            manifest["stage_changes"].append(
                {"iteration": iteration, "time": schedule.stages[stage][1]})
        prev_stage = stage

        rng = _iteration_rng(cfg.seed, iteration)
        si, ti = int(rng.integers(len(bundles))), int(rng.integers(len(bundles)))
        source, target = bundles[si], bundles[ti]

        src_full = ShapeBundle(basis=source.basis, descriptors=source.descriptors,
                               supervisor=curriculum.kernel_at(schedule, iteration, source,
                                                               kernel_caches[si]),
                               kind="source")
        tgt_full = ShapeBundle(basis=target.basis, descriptors=target.descriptors,
                               supervisor=curriculum.kernel_at(schedule, iteration, target,
                                                               kernel_caches[ti]),
                               kind="target")

        perm_s = rng.permutation(src_full.n_vertices)
        perm_t = rng.permutation(tgt_full.n_vertices)
        k_s = _effective_subsample(cfg, src_full.n_vertices)
        k_t = _effective_subsample(cfg, tgt_full.n_vertices)
        src_view = corrnet.take_vertices(src_full, perm_s[:k_s])
        tgt_view = corrnet.take_vertices(tgt_full, perm_t[:k_t])

        loss, grads, _ = corrnet.backward(params, src_view, tgt_view, cfg.ridge)
        if not np.isfinite(loss):
            manifest["nan_abort"] = {"iteration": iteration, "pair": [si, ti]}
            flush(final=False)
            raise TrainingError(f"non-finite loss at iteration {iteration}; manifest saved")
        corrnet.adam_step(params, grads, adam)
        loss_log.append((iteration, loss))

        if val_bundles and (iteration + 1) % cfg.validate_every == 0:
            vloss = curriculum.validation_loss(params, _validation_pairs(val_bundles),
                                               schedule, cfg.ridge)
            manifest["validation"].append([iteration, vloss])

        if (iteration + 1) % cfg.checkpoint_every == 0:
            flush(final=False)

    flush(final=True)
    return {"checkpoint": str(checkpoint_path), "manifest": str(out_dir / "manifest.json"),
            "loss_log": str(out_dir / "loss_log.csv"),
            "final_loss": loss_log[-1][1] if loss_log else None}


def _pair_tag(source_path, target_path) -> str:
    return f"{Path(source_path).stem}__{Path(target_path).stem}"


def infer(cfg: RunConfig, checkpoint_path, source_path, target_path,
          out_dir=None, save_soft: bool = False) -> dict:
    """Single forward pass from checkpointed weights; no supervisor kernels.

    Caches for both meshes are built on demand. Writes the match file (one
    target index per source vertex) and optionally the dense soft map.
    """
    checkpoint_path = Path(checkpoint_path)
    if not checkpoint_path.exists():
        raise ConfigError(f"checkpoint not found: {checkpoint_path}")
    params, _ = corrnet.load_checkpoint(checkpoint_path)

    cache = ShapeCache(cfg)
    cache.ensure(Path(source_path), need_geodesic=False)
    cache.ensure(Path(target_path), need_geodesic=False)
    source = cache.load_bundle(source_path, with_geodesic=False, kind="source")
    target = cache.load_bundle(target_path, with_geodesic=False, kind="target")

    if source.descriptors.shape[1] != params.dim:
        raise ConfigError(
            f"checkpoint dim {params.dim} does not match cached descriptors "
            f"({source.descriptors.shape[1]}); recompute caches or retrain")
    if source.basis.basis_size != target.basis.basis_size:
        raise ConfigError("source and target caches disagree on basis size")

    y_s = corrnet.forward_features(params, source.descriptors)
    y_t = corrnet.forward_features(params, target.descriptors)
    fmap = corrnet.solve_fmap(corrnet.project(y_s, source.basis),
                              corrnet.project(y_t, target.basis), cfg.ridge)
    soft = corrnet.soft_map(fmap, source.basis, target.basis)
    point_map = evaluation.extract_matches(soft)

    result = {"matches": point_map, "soft": soft}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tag = _pair_tag(source_path, target_path)
        match_file = out_dir / f"matches__{tag}.txt"
        with open(match_file, "w") as fh:
            for idx in point_map.matches:
                fh.write(f"{idx}\n")
        result["match_file"] = str(match_file)
        if save_soft:
            soft_file = out_dir / f"soft__{tag}.npy"
            np.save(soft_file, soft.soft_map)
            result["soft_file"] = str(soft_file)
    return result


def load_ground_truth(path, n_source: int, n_target: int) -> np.ndarray:
    """One 0-based target index per line; line i is the match of source vertex i."""
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                values.append(int(line))
            except ValueError:
                raise EvaluationError(f"{path}:{lineno}: not an integer: {line!r}") from None
    gt = np.asarray(values, dtype=np.int64)
    if gt.shape[0] != n_source:
        raise EvaluationError(
            f"{path}: {gt.shape[0]} ground-truth entries for a {n_source}-vertex source")
    if gt.size and (gt.min() < 0 or gt.max() >= n_target):
        raise EvaluationError(f"{path}: ground-truth index out of range [0, {n_target})")
    return gt


def discover_test_pairs(cfg: RunConfig) -> list[tuple[Path, Path, Path]]:
    """(source_mesh, target_mesh, gt_file) triples from the ground-truth dir.

    Ground-truth files are named `<source_stem>__<target_stem>.txt`.
    """
    if cfg.test_dir is None or cfg.ground_truth_dir is None:
        raise ConfigError("evaluate needs data.test_dir and data.ground_truth_dir")
    by_stem = {p.stem: p for p in list_meshes(cfg.test_dir)}
    gt_dir = Path(cfg.ground_truth_dir)
    if not gt_dir.is_dir():
        raise ConfigError(f"ground-truth directory not found: {gt_dir}")
    pairs = []
    for gt_file in sorted(gt_dir.glob("*.txt")):
        parts = gt_file.stem.split("__")
        if len(parts) != 2:
            continue
        src, tgt = parts
        if src in by_stem and tgt in by_stem:
            pairs.append((by_stem[src], by_stem[tgt], gt_file))
    if not pairs:
        raise EvaluationError(
            f"no test pairs: no `<source>__<target>.txt` files in {gt_dir} match "
            f"meshes in {cfg.test_dir}")
    return pairs


def evaluate(cfg: RunConfig, checkpoint_path, out_dir=None) -> dict:
    """Geodesic-error curves for every test pair plus the vertex-pooled curve."""
    pairs = discover_test_pairs(cfg)
    out_dir = Path(out_dir if out_dir is not None else cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = ShapeCache(cfg)

    curves = {}
    summaries = {}
    pooled_errors = []
    for source_path, target_path, gt_file in pairs:
        tag = _pair_tag(source_path, target_path)
        result = infer(cfg, checkpoint_path, source_path, target_path)
        target_mesh = cache.load_bundle(target_path, with_geodesic=False).mesh
        gt = load_ground_truth(gt_file, result["matches"].matches.shape[0],
                               target_mesh.n_vertices)
        errors = evaluation.match_errors(result["matches"], gt, target_mesh)
        curve = evaluation.errors_to_curve(errors)
        curves[tag] = curve
        pooled_errors.append(errors)
        summaries[tag] = {"auc": curve.auc, "mean_error": float(np.mean(errors)),
                          "median_error": float(np.median(errors))}
        evaluation.write_curve_csv(curve, out_dir / f"curve__{tag}.csv")

    pooled = np.concatenate(pooled_errors)
    pooled_curve = evaluation.errors_to_curve(pooled)
    evaluation.write_curve_csv(pooled_curve, out_dir / "curve__pooled.csv")
    evaluation.write_summary_json(pooled_curve, pooled, out_dir / "summary__pooled.json")
    plot_curves = dict(curves)
    plot_curves["pooled"] = pooled_curve
    evaluation.write_curves_svg(plot_curves, out_dir / "curves.svg")

    summary = {"pooled": {"auc": pooled_curve.auc, "mean_error": float(np.mean(pooled)),
                          "median_error": float(np.median(pooled))},
               "pairs": summaries}
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    summary["out_dir"] = str(out_dir)
    return summary


def bench_timing(cfg: RunConfig, mesh_paths, diffusion_time: float = 0.1,
                 out_dir=None) -> list[dict]:
    """Wall-clock comparison: heat kernel from a cached basis vs
    eigendecomposition + kernel vs all-pairs graph geodesics.

    Writes a CSV table and a log-scale SVG. Ratios, not absolute times, are
    the meaningful output.
    """
    mesh_paths = [Path(p) for p in mesh_paths]
    if not mesh_paths:
        raise ConfigError("bench-timing needs at least one mesh")
    rows = []
    for path in mesh_paths:
        m = mesh.normalize_to_unit_area(mesh.load_mesh(path))
        t0 = time.perf_counter()
        lap = spectral.build_laplacian(m)
        basis = spectral.eigendecompose(lap, min(cfg.basis_size, m.n_vertices))
        t_eig = time.perf_counter() - t0

        t_kernel = min(_timed(lambda: spectral.heat_kernel(basis, diffusion_time))
                       for _ in range(3))
        t_geo = _timed(lambda: geodesic.all_pairs_geodesic(m))
        rows.append({"mesh": path.name, "n_vertices": m.n_vertices,
                     "heat_kernel_seconds": t_kernel,
                     "eigendecomposition_plus_kernel_seconds": t_eig + t_kernel,
                     "geodesic_seconds": t_geo})
    rows.sort(key=lambda r: r["n_vertices"])

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "timing.csv", "w") as fh:
            fh.write("mesh,n_vertices,heat_kernel_seconds,"
                     "eigendecomposition_plus_kernel_seconds,geodesic_seconds\n")
            for r in rows:
                fh.write(f"{r['mesh']},{r['n_vertices']},{r['heat_kernel_seconds']:.6g},"
                         f"{r['eigendecomposition_plus_kernel_seconds']:.6g},"
                         f"{r['geodesic_seconds']:.6g}\n")
        _write_timing_svg(rows, out_dir / "timing.svg")
    return rows


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def _write_timing_svg(rows, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = [r["n_vertices"] for r in rows]
    fig, ax = plt.subplots(figsize=(5.4, 4.0))
    ax.plot(n, [r["heat_kernel_seconds"] for r in rows], "o-", label="heat kernel (cached basis)")
    ax.plot(n, [r["eigendecomposition_plus_kernel_seconds"] for r in rows], "s-",
            label="eigendecomposition + kernel")
    ax.plot(n, [r["geodesic_seconds"] for r in rows], "^-", label="all-pairs geodesics")
    ax.set_yscale("log")
    ax.set_xlabel("vertices")
    ax.set_ylabel("seconds (log scale)")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
