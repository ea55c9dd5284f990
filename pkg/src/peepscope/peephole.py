"""Peephole extraction from a dense layer's input activations.

Three non-neural stages turn the input ``x`` of a dense layer ``y = W x + b``
into a probability vector over human-readable tags:

1. Dimensionality reduction. With ``A = [W | b] = P S Q^T``, the core vector
   is ``v = Q'^T [x; 1]`` where ``Q'`` holds the top-kappa right singular
   vectors. ``P S' v`` recovers the rank-kappa approximation of ``y``.
2. Statistical characterization. Core vectors are standardized and modeled
   with a full-covariance Gaussian mixture; the membership vector ``d`` holds
   the normalized component likelihoods.
3. Semantic mapping. A column-stochastic matrix ``U`` of empirical
   tag-given-cluster frequencies, counted on labeled examples, maps ``d`` to
   the peephole ``p = U d``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from peepscope.anomaly import KINDS, WHEEL_TAGS, AnomalyTag
from peepscope.errors import ArtifactError, ConfigError, NumericError
from peepscope.telemetry import Dataset

logger = logging.getLogger(__name__)

MAGIC = b"PPHL"
FORMAT_VERSION = 1
COV_REG = 1e-6
MAX_ITER = 500
TAG_SETS = {"kinds": KINDS, "wheels": WHEEL_TAGS}


# --------------------------------------------------------------------------- reduction


@dataclass(frozen=True)
class ReducedMap:
    """Top-kappa SVD triplet of ``A = [W | b]``.

    ``left`` and ``singular_values`` cover the full thin decomposition so
    truncation errors can be checked; ``q_prime`` holds only kappa columns.
    """

    q_prime: np.ndarray
    singular_values: np.ndarray
    left: np.ndarray
    kappa: int
    pipeline_id: str = ""

    @property
    def sigma_prime(self) -> np.ndarray:
        return self.singular_values[: self.kappa]

    @property
    def p_prime(self) -> np.ndarray:
        return self.left[:, : self.kappa]

    def approximation(self) -> np.ndarray:
        """Rank-kappa approximation ``P' S' Q'^T`` of A."""
        return (self.p_prime * self.sigma_prime) @ self.q_prime.T


def _complete_basis(partial: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """Extend orthonormal columns to ``n`` columns with a deterministic complement."""
    dim, k = partial.shape
    if k >= n:
        return partial
    rng = np.random.default_rng(seed)
    extra = rng.standard_normal((dim, n - k))
    extra -= partial @ (partial.T @ extra)
    extra -= partial @ (partial.T @ extra)
    q, _ = np.linalg.qr(extra)
    return np.hstack([partial, q])


def build_reduced_map(W: np.ndarray, b: np.ndarray | None, kappa: int) -> ReducedMap:
    """Thin SVD of ``[W | b]`` through the eigendecomposition of the smaller Gram matrix.

    Pass ``b=None`` to decompose ``W`` as given (it is then taken to be A).
    """
    W = np.asarray(W, dtype=np.float64)
    A = W if b is None else np.hstack([W, np.asarray(b, dtype=np.float64).reshape(-1, 1)])
    if A.ndim != 2 or not np.all(np.isfinite(A)):
        raise ConfigError("A must be a finite matrix")
    rows, cols = A.shape
    rank_bound = min(rows, cols)
    if not 1 <= kappa <= rank_bound:
        raise ConfigError(f"kappa={kappa} outside 1..{rank_bound}")
    wide = rows <= cols
    gram = A @ A.T if wide else A.T @ A
    try:
        evals, evecs = np.linalg.eigh(gram)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    order = np.argsort(evals)[::-1][:rank_bound]
    sigma = np.sqrt(np.clip(evals[order], 0.0, None))
    basis = evecs[:, order]
    # directions with (numerically) zero singular value cannot be mapped through A
    tol = max(rows, cols) * np.finfo(np.float64).eps * (sigma[0] if len(sigma) else 0.0)
    good = int(np.sum(sigma > tol))
    other = (A.T @ basis[:, :good]) / sigma[:good] if wide else (A @ basis[:, :good]) / sigma[:good]
    if wide:
        left, right = basis, _complete_basis(other, rank_bound)
    else:
        right, left = basis, _complete_basis(other, rank_bound)
    sigma = np.where(np.arange(rank_bound) < good, sigma, 0.0)
    return ReducedMap(np.ascontiguousarray(right[:, :kappa]), sigma, left, kappa)


def core_vector(x: np.ndarray, rmap: ReducedMap) -> np.ndarray:
    """``v = Q'^T [x; 1]`` for one activation vector or a stack of them."""
    x = np.asarray(x, dtype=np.float64)
    n_in = rmap.q_prime.shape[0] - 1
    if x.shape[-1] != n_in:
        raise ConfigError(f"activation has {x.shape[-1]} entries, map expects {n_in}")
    return x @ rmap.q_prime[:-1] + rmap.q_prime[-1]


# --------------------------------------------------------------------------- normalization


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray
    pipeline_id: str = ""


def fit_norm(vs: np.ndarray) -> NormStats:
    vs = np.asarray(vs, dtype=np.float64)
    if vs.ndim != 2 or len(vs) < 2:
        raise ConfigError("normalization needs at least two vectors")
    mean = vs.mean(axis=0)
    std = vs.std(axis=0)
    # relative test: a constant coordinate still shows rounding noise of order eps * |mean|
    degenerate = std < 1e-10 * np.maximum(1.0, np.abs(mean))
    std = np.where(degenerate, 1.0, std)
    return NormStats(mean, std, degenerate)


def normalize(v: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(v, dtype=np.float64) - stats.mean) / stats.std


def denormalize(v: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(v, dtype=np.float64) * stats.std + stats.mean


# --------------------------------------------------------------------------- GMM


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood: list[float] = field(default_factory=list)
    seed: int = 0
    pipeline_id: str = ""
    _chol: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def cholesky(self) -> np.ndarray:
        if self._chol is None:
            self._chol = _cholesky_all(self.covariances)
        return self._chol


def _cholesky_all(covs: np.ndarray) -> np.ndarray:
    out = np.empty_like(covs)
    eye = np.eye(covs.shape[1])
    for i, k in enumerate(covs):
        if not np.all(np.isfinite(k)):
            raise NumericError(f"covariance of component {i} is not finite")
        jitter = 0.0
        for attempt in range(6):
            try:
                out[i] = np.linalg.cholesky(k + jitter * eye)
                break
            except np.linalg.LinAlgError:
                jitter = COV_REG * 10.0**attempt
        else:
            raise NumericError(f"covariance of component {i} is singular even after regularization")
    return out


def _log_gauss(X: np.ndarray, means: np.ndarray, chols: np.ndarray, block: int = 2048) -> np.ndarray:
    """``log N(x | mu_i, K_i)`` for every point and component, shape (N, C).

    Uses precision factors ``L_i^{-T}`` so all components share one matrix
    product per block of rows.
    """
    n, dim = X.shape
    C = len(means)
    eye = np.eye(dim)
    prec = np.stack([solve_triangular(L, eye, lower=True, check_finite=False).T for L in chols])
    prec_cat = prec.transpose(1, 0, 2).reshape(dim, C * dim)
    shift = np.einsum("cd,cde->ce", means, prec)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chols, axis1=1, axis2=2)), axis=1)
    const = dim * math.log(2 * math.pi) + logdet
    out = np.empty((n, C))
    for lo in range(0, n, block):
        y = (X[lo : lo + block] @ prec_cat).reshape(-1, C, dim) - shift
        out[lo : lo + block] = -0.5 * (const + np.einsum("ncd,ncd->nc", y, y))
    return out


def _m_step(X: np.ndarray, resp: np.ndarray, reg: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, dim = X.shape
    nk = resp.sum(axis=0)
    dead = np.flatnonzero(nk < 1e-10)
    if len(dead):
        raise NumericError(f"GMM component {int(dead[0])} lost all support")
    weights = nk / n
    means = (resp.T @ X) / nk[:, None]
    covs = np.empty((len(nk), dim, dim))
    eye = np.eye(dim)
    sqrt_resp = np.sqrt(resp)
    for i in range(len(nk)):
        w = (X - means[i]) * sqrt_resp[:, i, None]
        cov = w.T @ w / nk[i]
        covs[i] = 0.5 * (cov + cov.T) + reg * eye
    return weights, means, covs


def _kmeans_pp(X: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [int(rng.integers(n))]
    d2 = np.sum((X - X[centers[0]]) ** 2, axis=1)
    for _ in range(1, C):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(idx)
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return X[centers]


def _em(X: np.ndarray, C: int, rng: np.random.Generator, reg: float, tol: float,
        max_iter: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[float]]:
    centers = _kmeans_pp(X, C, rng)
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(-1) if len(X) * C * X.shape[1] < 2e7 else \
        np.stack([np.sum((X - c) ** 2, axis=1) for c in centers], axis=1)
    resp = np.zeros((len(X), C))
    resp[np.arange(len(X)), np.argmin(d2, axis=1)] = 1.0
    weights, means, covs = _m_step(X, resp, reg)
    trace: list[float] = []
    for _ in range(max_iter):
        log_p = _log_gauss(X, means, _cholesky_all(covs)) + np.log(weights)
        norm = logsumexp(log_p, axis=1)
        ll = float(np.sum(norm))
        if not math.isfinite(ll):
            raise NumericError("GMM log-likelihood became non-finite")
        trace.append(ll)
        if len(trace) > 1 and trace[-1] - trace[-2] < tol * abs(trace[-1]):
            break
        resp = np.exp(log_p - norm[:, None])
        weights, means, covs = _m_step(X, resp, reg)
    return weights, means, covs, trace


def gmm_fit(X: np.ndarray, C: int, seed: int = 0, restarts: int = 3, reg: float = COV_REG,
            tol: float = 1e-6, max_iter: int = MAX_ITER) -> GmmModel:
    """Full-covariance EM from k-means++ starts; the best of ``restarts`` runs is kept.

    Each M-step adds ``reg * I`` to every covariance. A run stops when the
    log-likelihood gain falls below ``tol * |LL|`` or after ``max_iter``
    iterations.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ConfigError("GMM input must be (n_points, dim)")
    if C < 1:
        raise ConfigError("C must be at least 1")
    if C > len(X):
        raise ConfigError(f"C={C} exceeds the number of points ({len(X)})")
    if len(X) < C * (X.shape[1] + 1):
        logger.warning("only %d points for %d components in %d dimensions", len(X), C, X.shape[1])
    best = None
    failures = []
    for r in range(restarts):
        rng = np.random.default_rng([int(seed), r])
        try:
            result = _em(X, C, rng, reg, tol, max_iter)
        except NumericError as exc:
            failures.append(str(exc))
            logger.warning("EM restart %d failed: %s", r, exc)
            continue
        logger.debug("EM restart %d: %d iterations, LL %.6g", r, len(result[3]), result[3][-1])
        if best is None or result[3][-1] > best[3][-1]:
            best = result
    if best is None:
        raise NumericError("all EM restarts failed: " + "; ".join(failures))
    weights, means, covs, trace = best
    return GmmModel(weights, means, covs, trace, seed)


def log_gamma(v: np.ndarray, gmm: GmmModel) -> np.ndarray:
    """Log of each component's weighted density at ``v``; shape (..., C)."""
    v = np.asarray(v, dtype=np.float64)
    X = v.reshape(-1, gmm.dim)
    with np.errstate(divide="ignore"):
        out = _log_gauss(X, gmm.means, gmm.cholesky()) + np.log(gmm.weights)
    return out.reshape(v.shape[:-1] + (gmm.n_components,))


def membership_with_flag(v: np.ndarray, gmm: GmmModel) -> tuple[np.ndarray, np.ndarray]:
    """Membership vectors plus an out-of-distribution flag (all likelihoods vanished)."""
    lg = log_gamma(v, gmm)
    top = np.max(lg, axis=-1, keepdims=True)
    ood = ~np.isfinite(top[..., 0])
    safe_top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(invalid="ignore"):
        w = np.exp(lg - safe_top)
    w = np.where(ood[..., None], 1.0, np.nan_to_num(w, nan=0.0))
    d = w / w.sum(axis=-1, keepdims=True)
    return d, ood


def membership(v: np.ndarray, gmm: GmmModel) -> np.ndarray:
    return membership_with_flag(v, gmm)[0]


def assign_clusters(d: np.ndarray) -> np.ndarray:
    """Hard cluster assignment: argmax of d, ties to the lowest index."""
    return np.argmax(d, axis=-1)


# --------------------------------------------------------------------------- semantic mapping


@dataclass(frozen=True)
class PosteriorMatrix:
    """``U[i, j]`` estimates Pr{tag i | cluster j}; columns sum to one."""

    U: np.ndarray
    counts: np.ndarray
    vocabulary: tuple[str, ...]
    empty_columns: np.ndarray
    pipeline_id: str = ""

    @property
    def T(self) -> int:
        return self.U.shape[0]


def estimate_posterior(labels: Sequence[int], clusters: Sequence[int], T: int, C: int,
                       vocabulary: Sequence[str] | None = None) -> PosteriorMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    clusters = np.asarray(clusters, dtype=np.int64)
    if len(labels) == 0:
        raise ConfigError("cannot estimate the posterior from zero examples")
    if len(labels) != len(clusters):
        raise ConfigError("labels and cluster assignments differ in length")
    if labels.min() < 0 or labels.max() >= T or clusters.min() < 0 or clusters.max() >= C:
        raise ConfigError("label or cluster index out of range")
    counts = np.zeros((T, C), dtype=np.int64)
    np.add.at(counts, (labels, clusters), 1)
    totals = counts.sum(axis=0)
    empty = totals == 0
    U = np.where(empty, 1.0 / T, counts / np.where(empty, 1, totals))
    vocab = tuple(vocabulary) if vocabulary is not None else tuple(str(i) for i in range(T))
    if len(vocab) != T:
        raise ConfigError("vocabulary length must equal T")
    return PosteriorMatrix(U, counts, vocab, empty)


@dataclass(frozen=True)
class PeepholeReport:
    d: np.ndarray
    p: np.ndarray
    tag_index: int
    tag: str
    origin: int = -1
    out_of_distribution: bool = False

    @property
    def d_argmax(self) -> int:
        return int(np.argmax(self.d))


def _check_ids(*artifacts) -> None:
    ids = {a.pipeline_id for a in artifacts}
    if len(ids) != 1:
        raise ConfigError(f"artifacts come from different pipeline runs: {sorted(ids)}")


def peephole_vectors(x: np.ndarray, rmap: ReducedMap, stats: NormStats, gmm: GmmModel,
                     posterior: PosteriorMatrix) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch form of :func:`extract`: returns ``(d, p, ood)`` stacks."""
    _check_ids(rmap, stats, gmm, posterior)
    v = normalize(core_vector(x, rmap), stats)
    d, ood = membership_with_flag(v, gmm)
    p = d @ posterior.U.T
    return d, p, ood


def extract(x: np.ndarray, rmap: ReducedMap, stats: NormStats, gmm: GmmModel,
            posterior: PosteriorMatrix, origin: int = -1) -> PeepholeReport:
    """Peephole for one latent-layer input ``x``: v -> normalize -> d -> p = U d."""
    d, p, ood = peephole_vectors(np.asarray(x)[None], rmap, stats, gmm, posterior)
    k = int(np.argmax(p[0]))
    return PeepholeReport(d[0], p[0], k, posterior.vocabulary[k], origin, bool(ood[0]))


# --------------------------------------------------------------------------- pipeline


def tag_label(tag: AnomalyTag, tag_set: str) -> int:
    if tag_set == "kinds":
        return KINDS.index(tag.kind)
    if tag_set == "wheels":
        if tag.wheel is None:
            raise ConfigError("wheel tag set needs scenario II data (wheel-tagged chunks)")
        return int(tag.wheel)
    raise ConfigError(f"unknown tag set {tag_set!r}")


@dataclass
class PeepholePipeline:
    reduced_map: ReducedMap
    norm: NormStats
    gmm: GmmModel
    posterior: PosteriorMatrix
    tag_set: str
    pipeline_id: str
    model_hash: str
    meta: dict = field(default_factory=dict)

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return self.posterior.vocabulary

    def vectors(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return peephole_vectors(x, self.reduced_map, self.norm, self.gmm, self.posterior)

    def extract(self, x: np.ndarray, origin: int = -1) -> PeepholeReport:
        return extract(x, self.reduced_map, self.norm, self.gmm, self.posterior, origin)


def _stamp(obj, pid: str):
    if isinstance(obj, GmmModel):
        obj.pipeline_id = pid
        return obj
    return type(obj)(**{**obj.__dict__, "pipeline_id": pid})


def model_digest(model) -> str:
    """Content hash of a detector's parameters, standardization and threshold."""
    h = hashlib.sha256()
    for name, tensor in model.net.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    h.update(np.asarray(model.norm_mean, "<f8").tobytes())
    h.update(np.asarray(model.norm_std, "<f8").tobytes())
    h.update(struct.pack("<d", model.threshold))
    return h.hexdigest()


def flagged_core_vectors(model, ds: Dataset, rmap: ReducedMap) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scores, flags and core vectors (flagged chunks only) for a dataset."""
    from peepscope.autoencoder import iter_forward

    scores, cores = [], []
    for s, _, _, h in iter_forward(model, ds):
        scores.append(s)
        mask = s > model.threshold
        cores.append(core_vector(h[mask], rmap))
    scores_arr = np.concatenate(scores) if scores else np.empty(0)
    flags = scores_arr > model.threshold
    v = np.concatenate(cores) if cores else np.empty((0, rmap.kappa))
    return scores_arr, flags, v


def fit_pipeline(model, corrupted_val: Dataset, kappa: int = 50, C: int = 50, tag_set: str = "kinds",
                 seed: int = 0, model_hash: str | None = None, restarts: int = 3,
                 max_iter: int = MAX_ITER) -> PeepholePipeline:
    """Fit reduction, normalization, GMM and posterior on the detector-flagged chunks."""
    if corrupted_val.labels is None:
        raise ConfigError("fitting needs ground-truth tags")
    if tag_set not in TAG_SETS:
        raise ConfigError(f"tag set must be one of {sorted(TAG_SETS)}")
    if not math.isfinite(model.threshold):
        raise ConfigError("the detector has no threshold; choose one before fitting peepholes")
    vocabulary = TAG_SETS[tag_set]
    W, b = model.latent_layer()
    rmap = build_reduced_map(W, b, kappa)
    _, flags, v = flagged_core_vectors(model, corrupted_val, rmap)
    n_flagged = int(flags.sum())
    if n_flagged < C:
        raise ConfigError(f"only {n_flagged} chunks were flagged; need at least C={C} (try a smaller C)")
    labels = np.array([tag_label(t, tag_set) for t, f in zip(corrupted_val.labels, flags) if f])
    stats = fit_norm(v)
    vn = normalize(v, stats)
    gmm = gmm_fit(vn, C, seed=seed, restarts=restarts, max_iter=max_iter)
    clusters = assign_clusters(membership(vn, gmm))
    posterior = estimate_posterior(labels, clusters, len(vocabulary), C, vocabulary)

    model_hash = model_hash or model_digest(model)
    h = hashlib.sha256()
    h.update(model_hash.encode())
    h.update(json.dumps([kappa, C, tag_set, int(seed)]).encode())
    h.update(np.ascontiguousarray(corrupted_val.values).tobytes())
    pid = h.hexdigest()[:16]
    meta = {"n_fit": n_flagged, "n_total": len(corrupted_val), "seed": int(seed),
            "em_iterations": len(gmm.log_likelihood), "empty_clusters": int(posterior.empty_columns.sum())}
    return PeepholePipeline(_stamp(rmap, pid), _stamp(stats, pid), _stamp(gmm, pid), _stamp(posterior, pid),
                            tag_set, pid, model_hash, meta)


# --------------------------------------------------------------------------- persistence

_ARRAYS = ("q_prime", "singular_values", "left", "norm_mean", "norm_std", "norm_degenerate",
           "gmm_weights", "gmm_means", "gmm_covariances", "gmm_log_likelihood", "U", "counts", "empty_columns")


def _arrays(pl: PeepholePipeline) -> dict[str, np.ndarray]:
    return {
        "q_prime": pl.reduced_map.q_prime,
        "singular_values": pl.reduced_map.singular_values,
        "left": pl.reduced_map.left,
        "norm_mean": pl.norm.mean,
        "norm_std": pl.norm.std,
        "norm_degenerate": pl.norm.degenerate.astype(np.float64),
        "gmm_weights": pl.gmm.weights,
        "gmm_means": pl.gmm.means,
        "gmm_covariances": pl.gmm.covariances,
        "gmm_log_likelihood": np.asarray(pl.gmm.log_likelihood, dtype=np.float64),
        "U": pl.posterior.U,
        "counts": pl.posterior.counts.astype(np.float64),
        "empty_columns": pl.posterior.empty_columns.astype(np.float64),
    }


def save_pipeline(pl: PeepholePipeline, path: str | Path) -> str:
    arrays = _arrays(pl)
    manifest = {
        "kappa": pl.reduced_map.kappa,
        "C": pl.gmm.n_components,
        "tag_set": pl.tag_set,
        "vocabulary": list(pl.vocabulary),
        "pipeline_id": pl.pipeline_id,
        "model_hash": pl.model_hash,
        "gmm_seed": pl.gmm.seed,
        "meta": pl.meta,
        "arrays": [{"name": k, "shape": list(arrays[k].shape)} for k in _ARRAYS],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(arrays[k], dtype="<f8").tobytes() for k in _ARRAYS]
    data = b"".join(parts)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise ArtifactError(f"cannot write pipeline {path}: {exc}") from exc
    return hashlib.sha256(data).hexdigest()


def load_pipeline(path: str | Path) -> PeepholePipeline:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactError(f"cannot read pipeline {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise ArtifactError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 12:
        raise ArtifactError(f"{path}: truncated header")
    version, mlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported pipeline format version {version}")
    try:
        manifest = json.loads(data[12 : 12 + mlen].decode("utf-8"))
    except ValueError as exc:
        raise ArtifactError(f"{path}: malformed manifest: {exc}") from exc
    offset = 12 + mlen
    arrays = {}
    for entry in manifest["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise ArtifactError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data[offset:end], dtype="<f8").reshape(entry["shape"]).copy()
        offset = end
    if offset != len(data):
        raise ArtifactError(f"{path}: {len(data) - offset} trailing bytes")
    pid = manifest["pipeline_id"]
    rmap = ReducedMap(arrays["q_prime"], arrays["singular_values"], arrays["left"], manifest["kappa"], pid)
    stats = NormStats(arrays["norm_mean"], arrays["norm_std"], arrays["norm_degenerate"].astype(bool), pid)
    gmm = GmmModel(arrays["gmm_weights"], arrays["gmm_means"], arrays["gmm_covariances"],
                   arrays["gmm_log_likelihood"].tolist(), manifest["gmm_seed"], pid)
    posterior = PosteriorMatrix(arrays["U"], arrays["counts"].astype(np.int64), tuple(manifest["vocabulary"]),
                                arrays["empty_columns"].astype(bool), pid)
    return PeepholePipeline(rmap, stats, gmm, posterior, manifest["tag_set"], pid, manifest["model_hash"],
                            manifest.get("meta", {}))
