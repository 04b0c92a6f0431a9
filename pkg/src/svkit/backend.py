"""Embedding backend: centering, LDA, length norm, two-covariance PLDA.

The verification model treats an embedding x of speaker i as

    x = mu + y_i + e,   y_i ~ N(0, B),   e ~ N(0, W)

with a shared between-speaker covariance B and within-speaker
covariance W. Fitting is EM on per-speaker sufficient statistics; the
verification score of an (enroll, test) pair is the exact log-likelihood
ratio of the same-speaker hypothesis against independence, which is a
quadratic form in the two vectors.

Embeddings travel in an "XVEM" binary file (magic, u32 version, then
[u32 key-length, UTF-8 key, u32 dim, dim float64] records, all
little-endian); fitted backends in an "XVBK" container with a JSON
header, float64 blobs, and a sha256 checksum, like checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import FormatError, ShapeError

EMBEDDINGS_MAGIC = b"XVEM"
EMBEDDINGS_VERSION = 1
BACKEND_MAGIC = b"XVBK"
BACKEND_VERSION = 1

LENGTH_NORM_MODES = ("sqrt_dim", "unit")


def write_embeddings(path, ids, vectors):
    """Write id/vector records; vectors is (N, d) float64."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or len(ids) != vectors.shape[0]:
        raise ShapeError(f"need one id per row, got {len(ids)} ids and "
                         f"vectors {vectors.shape}")
    with open(path, "wb") as f:
        f.write(EMBEDDINGS_MAGIC)
        f.write(struct.pack("<I", EMBEDDINGS_VERSION))
        for key, vec in zip(ids, vectors):
            raw = key.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", vec.shape[0]))
            f.write(np.ascontiguousarray(vec, dtype="<f8").tobytes())


def read_embeddings(path):
    """Read an XVEM file; returns (ids, vectors)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != EMBEDDINGS_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != EMBEDDINGS_VERSION:
        raise FormatError(f"{path}: unsupported embeddings version {version}")
    pos = 8
    ids = []
    rows = []
    dim = None
    while pos < len(data):
        if pos + 4 > len(data):
            raise FormatError(f"{path}: truncated record header")
        (keylen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        key = data[pos : pos + keylen]
        if len(key) != keylen:
            raise FormatError(f"{path}: truncated key")
        pos += keylen
        if pos + 4 > len(data):
            raise FormatError(f"{path}: truncated record header")
        (d,) = struct.unpack_from("<I", data, pos)
        pos += 4
        end = pos + 8 * d
        if end > len(data):
            raise FormatError(f"{path}: truncated vector for "
                              f"{key.decode('utf-8', 'replace')!r}")
        if dim is None:
            dim = d
        elif d != dim:
            raise FormatError(f"{path}: mixed dims {dim} and {d}")
        ids.append(key.decode("utf-8"))
        rows.append(np.frombuffer(data[pos:end], dtype="<f8").copy())
        pos = end
    if not rows:
        raise FormatError(f"{path}: no records")
    return ids, np.stack(rows)


def _as_matrix(vectors):
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"expected (N, d) vectors, got {v.shape}")
    return v


def _group_by_label(vectors, labels):
    if len(labels) != vectors.shape[0]:
        raise ShapeError(f"{len(labels)} labels for {vectors.shape[0]} rows")
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    if len(groups) < 2:
        raise ValueError(f"need >= 2 speakers, got {len(groups)}")
    small = [lab for lab, idx in groups.items() if len(idx) < 2]
    if small:
        raise ValueError(f"every speaker needs >= 2 embeddings; offenders: "
                         f"{sorted(small)[:5]}")
    return {lab: np.array(idx) for lab, idx in sorted(groups.items())}


def fit_center(vectors):
    """Global mean of the rows."""
    return _as_matrix(vectors).mean(axis=0)


def lda_fit(vectors, labels, out_dim):
    """Linear discriminant projection via the generalized eigenproblem.

    Solves Sb v = lambda Sw v with a small ridge on the within-class
    scatter, keeps the out_dim leading eigenvectors (clamped to the rank
    bound num_classes - 1 and to the input dim, with a warning), and
    fixes each column's sign so its largest-magnitude entry is positive.
    Returns a (d, out_dim) matrix applied as x @ P.
    """
    x = _as_matrix(vectors)
    groups = _group_by_label(x, labels)
    n, d = x.shape
    if out_dim < 1:
        raise ValueError(f"out_dim must be >= 1, got {out_dim}")
    bound = min(d, len(groups) - 1)
    if out_dim > bound:
        warnings.warn(f"requested {out_dim} LDA dims, keeping {bound} "
                      f"(limited by min(dim, num_speakers - 1))")
        out_dim = bound
    mu = x.mean(axis=0)
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    for idx in groups.values():
        xc = x[idx]
        mc = xc.mean(axis=0)
        dev = xc - mc
        sw += dev.T @ dev
        gap = (mc - mu)[:, None]
        sb += len(idx) * (gap @ gap.T)
    ridge = max(1e-6 * np.trace(sw) / d, 1e-12)
    sw += ridge * np.eye(d)
    eigvals, eigvecs = scipy.linalg.eigh(sb, sw)
    order = np.argsort(eigvals)[::-1][:out_dim]
    proj = eigvecs[:, order]
    for j in range(proj.shape[1]):
        lead = np.argmax(np.abs(proj[:, j]))
        if proj[lead, j] < 0:
            proj[:, j] = -proj[:, j]
    return proj


def length_normalize(vectors, mode="sqrt_dim"):
    """Scale each row to a fixed radius: sqrt(d) (default) or 1."""
    if mode not in LENGTH_NORM_MODES:
        raise ValueError(f"mode must be one of {LENGTH_NORM_MODES}, "
                         f"got {mode!r}")
    single = np.asarray(vectors).ndim == 1
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    norms = np.sqrt((x * x).sum(axis=1))
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding cannot be length normalized")
    radius = np.sqrt(x.shape[1]) if mode == "sqrt_dim" else 1.0
    out = x * (radius / norms)[:, None]
    return out[0] if single else out


@dataclass
class PldaModel:
    """Two-covariance model: mean, between- and within-speaker covariance."""

    mu: np.ndarray
    between: np.ndarray
    within: np.ndarray
    loglik_history: list = field(default_factory=list)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.between = np.asarray(self.between, dtype=np.float64)
        self.within = np.asarray(self.within, dtype=np.float64)
        d = self.mu.shape[0]
        if self.between.shape != (d, d) or self.within.shape != (d, d):
            raise ShapeError("covariance shapes do not match the mean")
        for name, mat in (("between", self.between), ("within", self.within)):
            if not np.allclose(mat, mat.T, rtol=0, atol=1e-12):
                raise ValueError(f"{name} covariance is not symmetric")


def _symmetrize(mat):
    return 0.5 * (mat + mat.T)


def _speaker_stats(vectors, labels):
    groups = _group_by_label(vectors, labels)
    stats = []
    for idx in groups.values():
        xc = vectors[idx]
        mean = xc.mean(axis=0)
        dev = xc - mean
        stats.append((len(idx), mean, dev.T @ dev))
    return stats


def _marginal_loglik(stats, mu, between, within):
    """Exact log-likelihood of per-speaker blocks under the model.

    Uses the spectral split of the n-utterance block covariance into one
    (W + nB) factor along the mean direction and n-1 copies of W for the
    deviations.
    """
    d = mu.shape[0]
    sign_w, logdet_w = np.linalg.slogdet(within)
    if sign_w <= 0:
        raise ValueError("within covariance must be positive definite")
    w_inv = np.linalg.inv(within)
    cache = {}
    total = 0.0
    for n, mean, sdev in stats:
        if n not in cache:
            marg = within + n * between
            sign_m, logdet_m = np.linalg.slogdet(marg)
            if sign_m <= 0:
                raise ValueError("W + nB must be positive definite")
            cache[n] = (np.linalg.inv(marg), logdet_m)
        marg_inv, logdet_m = cache[n]
        gap = mean - mu
        total += -0.5 * (n * d * np.log(2.0 * np.pi)
                         + (n - 1) * logdet_w + logdet_m
                         + np.trace(w_inv @ sdev)
                         + n * gap @ marg_inv @ gap)
    return total


def plda_fit(vectors, labels, em_iters=10):
    """Fit the two-covariance model by EM on speaker statistics.

    Moment estimates seed the covariances; each iteration then updates
    (mu, B, W) in closed form from the speaker posteriors. The marginal
    log-likelihood is recorded before each iteration and once after the
    last, so loglik_history has em_iters + 1 non-decreasing entries.
    """
    x = _as_matrix(vectors)
    if em_iters < 1:
        raise ValueError(f"em_iters must be >= 1, got {em_iters}")
    stats = _speaker_stats(x, labels)
    n_total = sum(n for n, _, _ in stats)
    n_spk = len(stats)
    d = x.shape[1]

    mu = x.mean(axis=0)
    within = sum(sdev for _, _, sdev in stats) / max(n_total - n_spk, 1)
    within = _symmetrize(within) + 1e-6 * np.trace(within) / d * np.eye(d)
    means = np.stack([mean for _, mean, _ in stats])
    gaps = means - means.mean(axis=0)
    between = _symmetrize(gaps.T @ gaps / max(n_spk - 1, 1))
    between += 1e-6 * np.trace(between) / d * np.eye(d)

    history = []
    for _ in range(em_iters):
        history.append(_marginal_loglik(stats, mu, between, within))

        # E-step: posterior mean/cov of each speaker offset y_i; the
        # B(B + W/n)^-1 form stays valid when B is singular
        post = {}
        for n, _, _ in stats:
            if n not in post:
                g = np.linalg.inv(between + within / n)
                post[n] = (between @ g, between - between @ g @ between)
        y_sum = np.zeros(d)
        b_new = np.zeros((d, d))
        w_new = np.zeros((d, d))
        y_hats = []
        for n, mean, _ in stats:
            shrink, cov = post[n]
            y_hat = shrink @ (mean - mu)
            y_hats.append(y_hat)
            y_sum += n * y_hat
            b_new += np.outer(y_hat, y_hat) + cov
            w_new += n * cov

        # M-step
        sum_means = sum(n * mean for n, mean, _ in stats)
        mu_new = (sum_means - y_sum) / n_total
        for (n, mean, sdev), y_hat in zip(stats, y_hats):
            resid = mean - mu_new - y_hat
            w_new += sdev + n * np.outer(resid, resid)
        mu = mu_new
        between = _symmetrize(b_new / n_spk)
        within = _symmetrize(w_new / n_total)

    history.append(_marginal_loglik(stats, mu, between, within))
    return PldaModel(mu=mu, between=between, within=within,
                     loglik_history=history)


def _score_terms(model):
    """Precompute the quadratic-form matrices of the verification LLR."""
    b, w = model.between, model.within
    total = b + w
    total_inv = np.linalg.inv(total)
    cross = total - b @ total_inv @ b
    cross_inv = np.linalg.inv(cross)
    q = _symmetrize(total_inv - cross_inv)
    p = _symmetrize(total_inv @ b @ cross_inv)
    sign_t, logdet_t = np.linalg.slogdet(total)
    sign_c, logdet_c = np.linalg.slogdet(cross)
    if sign_t <= 0 or sign_c <= 0:
        raise ValueError("covariances do not form a valid score")
    const = 0.5 * (logdet_t - logdet_c)
    return q, p, const


def plda_score(model, enroll, test):
    """Log-likelihood ratio of same-speaker vs independent hypotheses."""
    e = np.asarray(enroll, dtype=np.float64) - model.mu
    t = np.asarray(test, dtype=np.float64) - model.mu
    if e.shape != model.mu.shape or t.shape != model.mu.shape:
        raise ShapeError(f"embedding dims {e.shape}/{t.shape} do not match "
                         f"the model dim {model.mu.shape}")
    q, p, const = _score_terms(model)
    return float(0.5 * e @ q @ e + 0.5 * t @ q @ t + e @ p @ t + const)


def score_trials(model, enroll_map, test_map, trials):
    """Score (enroll_id, test_id) pairs; returns one float per trial.

    enroll_map/test_map map ids to backend-transformed vectors. Missing
    ids raise KeyError with the offending id.
    """
    q, p, const = _score_terms(model)
    scores = []
    for enroll_id, test_id in trials:
        if enroll_id not in enroll_map:
            raise KeyError(f"enroll id {enroll_id!r} has no embedding")
        if test_id not in test_map:
            raise KeyError(f"test id {test_id!r} has no embedding")
        e = enroll_map[enroll_id] - model.mu
        t = test_map[test_id] - model.mu
        scores.append(float(0.5 * e @ q @ e + 0.5 * t @ q @ t
                            + e @ p @ t + const))
    return np.array(scores)


@dataclass
class BackendModel:
    """Centering, LDA projection, length norm, and PLDA in one bundle."""

    center: np.ndarray
    projection: np.ndarray
    length_norm: str
    plda: PldaModel

    def transform(self, vectors):
        """Map raw embeddings into the scoring space."""
        single = np.asarray(vectors).ndim == 1
        x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if x.shape[1] != self.center.shape[0]:
            raise ShapeError(f"embedding dim {x.shape[1]} != backend dim "
                             f"{self.center.shape[0]}")
        z = (x - self.center) @ self.projection
        z = length_normalize(z, self.length_norm)
        return z[0] if single else z


def fit_backend(vectors, labels, lda_dim=100, em_iters=10,
                length_norm="sqrt_dim"):
    """Fit the full chain on labeled training embeddings."""
    x = _as_matrix(vectors)
    center = fit_center(x)
    projection = lda_fit(x, labels, lda_dim)
    z = length_normalize((x - center) @ projection, length_norm)
    plda = plda_fit(z, labels, em_iters=em_iters)
    return BackendModel(center=center, projection=projection,
                        length_norm=length_norm, plda=plda)


def save_backend(path, backend):
    """Serialize a fitted backend with a sha256 checksum."""
    arrays = [
        ("center", backend.center),
        ("projection", backend.projection),
        ("plda.mu", backend.plda.mu),
        ("plda.between", backend.plda.between),
        ("plda.within", backend.plda.within),
    ]
    header = {
        "format": "xvbk",
        "length_norm": backend.length_norm,
        "loglik_history": list(map(float, backend.plda.loglik_history)),
        "arrays": [{"name": k, "shape": list(np.asarray(v).shape)}
                   for k, v in arrays],
    }
    payload = json.dumps(header, sort_keys=True,
                         separators=(",", ":")).encode("utf-8")
    digest = hashlib.sha256()
    with open(path, "wb") as f:
        def emit(chunk):
            digest.update(chunk)
            f.write(chunk)

        emit(BACKEND_MAGIC)
        emit(struct.pack("<II", BACKEND_VERSION, len(payload)))
        emit(payload)
        for _, arr in arrays:
            emit(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        f.write(digest.digest())


def load_backend(path):
    """Read an XVBK file back into a BackendModel."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 44 or data[:4] != BACKEND_MAGIC:
        raise FormatError(f"{path}: not a backend file")
    if hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise FormatError(f"{path}: checksum mismatch, file is corrupt")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != BACKEND_VERSION:
        raise FormatError(f"{path}: unsupported backend version {version}")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad backend header") from exc
    pos = 12 + hlen
    arrays = {}
    for meta in header["arrays"]:
        shape = tuple(meta["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = pos + 8 * count
        if end > len(data) - 32:
            raise FormatError(f"{path}: truncated array {meta['name']!r}")
        arrays[meta["name"]] = np.frombuffer(
            data[pos:end], dtype="<f8").reshape(shape).copy()
        pos = end
    needed = {"center", "projection", "plda.mu", "plda.between",
              "plda.within"}
    if set(arrays) != needed:
        raise FormatError(f"{path}: unexpected array set {sorted(arrays)}")
    plda = PldaModel(mu=arrays["plda.mu"], between=arrays["plda.between"],
                     within=arrays["plda.within"],
                     loglik_history=list(header.get("loglik_history", [])))
    return BackendModel(center=arrays["center"],
                        projection=arrays["projection"],
                        length_norm=header["length_norm"], plda=plda)
