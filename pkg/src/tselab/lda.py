"""Sparse linear discriminant analysis on speaker embeddings.

Fitting solves the generalized eigenproblem S_w^-1 S_b by Cholesky-whitening
the (shrinkage-regularized) within-class scatter and running a cyclic Jacobi
eigensolver on the whitened between-class scatter.  Keeping only the first
``l`` discriminants (l <= M-1 for M classes) trades retained variance for
generalization; the explained-variance ratio of each kept discriminant is
reported against all M-1 candidate eigenvalues.

The Jacobi solver is exact and dependency-free; it is intended for the
embedding dimensions this lab uses (tens to a few hundred), not for very
large matrices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedder import Embedding
from .errors import DataError, NumericalError, ShapeError

FILE_VERSION = "tse-lda-1"


@dataclass
class LabeledEmbeddingSet:
    """Embedding vectors with class labels; every class needs >= 2 samples."""

    vectors: np.ndarray  # [N, D]
    labels: list[str]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.labels) != self.vectors.shape[0]:
            raise DataError(f"need [N, D] vectors with N labels, got "
                            f"{self.vectors.shape} and {len(self.labels)} labels")
        counts: dict[str, int] = {}
        for lab in self.labels:
            counts[lab] = counts.get(lab, 0) + 1
        if len(counts) < 2:
            raise DataError(f"LDA needs >= 2 classes, have {len(counts)}")
        small = sorted(lab for lab, c in counts.items() if c < 2)
        if small:
            raise DataError(f"classes with < 2 samples: {small}")
        self.class_counts = counts

    @property
    def n_classes(self) -> int:
        return len(self.class_counts)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def from_embeddings(cls, embeddings: list[Embedding]) -> "LabeledEmbeddingSet":
        missing = [i for i, e in enumerate(embeddings) if e.speaker_id is None]
        if missing:
            raise DataError(f"embeddings without speaker ids at indices {missing[:5]}")
        return cls(vectors=np.stack([e.vector for e in embeddings]),
                   labels=[e.speaker_id for e in embeddings])


def scatter_matrices(dataset: LabeledEmbeddingSet) -> tuple[np.ndarray, np.ndarray]:
    """Within-class scatter S_w and between-class scatter S_b; their sum is
    the total scatter about the global mean."""
    x = dataset.vectors
    labels = np.asarray(dataset.labels)
    mean = x.mean(axis=0)
    dim = dataset.dim
    s_w = np.zeros((dim, dim))
    s_b = np.zeros((dim, dim))
    for lab in sorted(dataset.class_counts):
        members = x[labels == lab]
        mu_c = members.mean(axis=0)
        centered = members - mu_c
        s_w += centered.T @ centered
        offset = (mu_c - mean)[:, None]
        s_b += len(members) * (offset @ offset.T)
    return s_w, s_b


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14,
                max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi diagonalization of a symmetric matrix.

    Returns (eigenvalues, eigenvectors) with eigenvectors in columns,
    unordered.  Converges when the off-diagonal Frobenius mass falls below
    ``tol`` relative to the matrix norm.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"jacobi_eigh: matrix must be square, got {a.shape}")
    if np.max(np.abs(a - a.T)) > 1e-8 * max(1.0, np.max(np.abs(a))):
        raise ShapeError("jacobi_eigh: matrix is not symmetric")
    n = a.shape[0]
    v = np.eye(n)
    norm = max(np.linalg.norm(a), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a ** 2) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:  # theta^2 would overflow
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                app, aqq = a[p, p], a[q, q]
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
    return np.diag(a).copy(), v


@dataclass
class LdaTransform:
    """Fitted projection y = discriminants @ (x - global_mean)."""

    global_mean: np.ndarray            # [D]
    discriminants: np.ndarray          # [l, D] rows are projection directions
    eigenvalues: np.ndarray            # [l], non-increasing
    explained_variance_ratio: np.ndarray  # [l], against all M-1 candidates
    n_components: int
    dim_in: int
    shrinkage_eps: float

    def transform_vector(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim_in,):
            raise ShapeError(f"expected vector of dim {self.dim_in}, got {x.shape}")
        return self.discriminants @ (x - self.global_mean)


def fit_lda(dataset: LabeledEmbeddingSet, n_components: int,
            shrinkage_eps: float = 1e-4) -> LdaTransform:
    m, dim = dataset.n_classes, dataset.dim
    max_l = min(m - 1, dim)
    if not 1 <= n_components <= max_l:
        raise DataError(f"n_components must be in [1, {max_l}] for {m} classes "
                        f"in {dim}-D, got {n_components}")
    s_w, s_b = scatter_matrices(dataset)
    ridge = shrinkage_eps * np.trace(s_w) / dim
    s_w_reg = s_w + ridge * np.eye(dim)
    try:
        chol = np.linalg.cholesky(s_w_reg)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"within-class scatter not positive definite even "
                             f"after shrinkage {shrinkage_eps}: {exc}") from exc
    # whitened between-class scatter: L^-1 S_b L^-T
    half = np.linalg.solve(chol, s_b)
    whitened = np.linalg.solve(chol, half.T)
    whitened = 0.5 * (whitened + whitened.T)
    eigvals, eigvecs = jacobi_eigh(whitened)
    order = np.argsort(-eigvals, kind="stable")
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]

    n_candidates = max_l
    candidate_vals = np.maximum(eigvals[:n_candidates], 0.0)
    total = candidate_vals.sum()
    ratios = candidate_vals / total if total > 0 else np.zeros(n_candidates)

    # back-transform the kept eigenvectors: directions d_i = L^-T u_i are
    # S_w-orthonormal by construction
    directions = np.linalg.solve(chol.T, eigvecs[:, :n_components]).T  # [l, D]
    for row in directions:
        peak = np.argmax(np.abs(row))
        if row[peak] < 0:
            row *= -1.0
    return LdaTransform(
        global_mean=dataset.vectors.mean(axis=0),
        discriminants=directions,
        eigenvalues=eigvals[:n_components].copy(),
        explained_variance_ratio=ratios[:n_components].copy(),
        n_components=n_components,
        dim_in=dim,
        shrinkage_eps=float(shrinkage_eps),
    )


def transform(t: LdaTransform, e):
    """Project an Embedding (or bare vector) into the discriminant subspace."""
    if isinstance(e, Embedding):
        return Embedding(vector=t.transform_vector(e.vector),
                         kind=f"lda{t.n_components}", speaker_id=e.speaker_id)
    return t.transform_vector(e)


def save_lda(path, t: LdaTransform) -> None:
    payload = {
        "version": FILE_VERSION,
        "dim_in": t.dim_in,
        "dim_out": t.n_components,
        "global_mean": t.global_mean.tolist(),
        "discriminants": t.discriminants.reshape(-1).tolist(),  # row-major
        "eigenvalues": t.eigenvalues.tolist(),
        "explained_variance_ratio": t.explained_variance_ratio.tolist(),
        "shrinkage_eps": t.shrinkage_eps,
    }
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_lda(path) -> LdaTransform:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: truncated or malformed LDA file: {exc}") from exc
    if payload.get("version") != FILE_VERSION:
        raise DataError(f"{path}: unsupported LDA file version "
                        f"{payload.get('version')!r}, expected {FILE_VERSION!r}")
    dim_in = int(payload["dim_in"])
    dim_out = int(payload["dim_out"])
    disc = np.asarray(payload["discriminants"], dtype=np.float64)
    if disc.size != dim_in * dim_out:
        raise DataError(f"{path}: discriminant matrix truncated "
                        f"({disc.size} values for {dim_out}x{dim_in})")
    return LdaTransform(
        global_mean=np.asarray(payload["global_mean"], dtype=np.float64),
        discriminants=disc.reshape(dim_out, dim_in),
        eigenvalues=np.asarray(payload["eigenvalues"], dtype=np.float64),
        explained_variance_ratio=np.asarray(payload["explained_variance_ratio"],
                                            dtype=np.float64),
        n_components=dim_out,
        dim_in=dim_in,
        shrinkage_eps=float(payload["shrinkage_eps"]),
    )
