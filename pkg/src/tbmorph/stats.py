"""Statistical learning on transport-space embeddings.

Cohort embeddings form a data matrix with one column per subject. All models
run in a rank-reduced coordinate system obtained from the Gram matrix of the
centered columns (never materializing the full covariance), with an
orthonormal lift back to embedding space for visualization and synthesis.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, eigh, solve_triangular

from .errors import (
    ConstantCovariate,
    DegenerateLabels,
    EmptyCohort,
    GridMismatch,
    RankTooLarge,
    SingularPenalty,
)


@dataclass(eq=False)
class Cohort:
    """Data matrix X (features x subjects) plus per-subject metadata."""

    matrix: np.ndarray
    covariate: np.ndarray | None = None
    labels: np.ndarray | None = None
    subject_ids: list = field(default_factory=list)
    grid: object = None  # GridSpec of the source embeddings, when known

    def __post_init__(self):
        X = np.asarray(self.matrix, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] < 2:
            raise EmptyCohort("cohort needs a 2D matrix with at least 2 subjects")
        self.matrix = X
        if self.covariate is not None:
            v = np.asarray(self.covariate, dtype=np.float64).ravel()
            if v.size != self.K or not np.all(np.isfinite(v)):
                raise ValueError("covariate must be K finite scalars")
            self.covariate = v
        if self.labels is not None:
            lab = np.asarray(self.labels).ravel()
            if lab.size != self.K:
                raise ValueError("labels must have one entry per subject")
            self.labels = lab
        if not self.subject_ids:
            self.subject_ids = [f"s{i:03d}" for i in range(self.K)]

    @property
    def K(self) -> int:
        return self.matrix.shape[1]

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    def with_covariate(self, v) -> "Cohort":
        return Cohort(self.matrix, v, self.labels, list(self.subject_ids), self.grid)

    def with_labels(self, lab) -> "Cohort":
        return Cohort(self.matrix, self.covariate, lab, list(self.subject_ids), self.grid)


def cohort_from_embeddings(embeddings, covariate=None, labels=None,
                           subject_ids=None) -> Cohort:
    embeddings = list(embeddings)
    if not embeddings:
        raise EmptyCohort("no embeddings given")
    grid = embeddings[0].grid
    for e in embeddings[1:]:
        if e.grid != grid:
            raise GridMismatch("embeddings live on different grids")
    X = np.stack([e.as_vector() for e in embeddings], axis=1)
    return Cohort(X, covariate, labels, list(subject_ids or []), grid)


@dataclass
class Reduction:
    """Rank-r coordinates of a cohort with an orthonormal lift."""

    mean: np.ndarray          # (d,)
    basis: np.ndarray         # (d, r), orthonormal columns
    coords: np.ndarray        # (r, K), centered coordinates
    variances: np.ndarray     # (r,), eigenvalues of the 1/K covariance

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def project(self, x: np.ndarray) -> np.ndarray:
        return self.basis.T @ (x - self.mean)

    def lift(self, z: np.ndarray, add_mean: bool = True) -> np.ndarray:
        out = self.basis @ z
        return out + self.mean if add_mean else out


def reduce(cohort: Cohort, r: int | None = None) -> Reduction:
    """Top-r principal coordinates via the Gram matrix of centered columns.

    Directions with (numerically) zero variance are dropped, so the returned
    rank can be lower than requested. r defaults to K - 1, which is lossless
    for centered data.
    """
    X = cohort.matrix
    K = cohort.K
    if r is None:
        r = K - 1
    if not 1 <= r <= K - 1:
        raise RankTooLarge(f"rank must lie in [1, {K - 1}], got {r}")
    mean = X.mean(axis=1)
    Xc = X - mean[:, None]
    G = Xc.T @ Xc
    evals, evecs = np.linalg.eigh(G)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    tol = max(evals[0], 0.0) * 1e-12
    keep = int(np.count_nonzero(evals > tol))
    r = min(r, max(keep, 1))
    s = np.sqrt(evals[:r])
    basis = Xc @ (evecs[:, :r] / np.where(s > 0, s, 1.0))
    coords = basis.T @ Xc
    return Reduction(mean=mean, basis=basis, coords=coords,
                     variances=evals[:r] / K)


@dataclass
class PcaModel:
    """Principal directions of the cohort in embedding space."""

    mean: np.ndarray
    components: np.ndarray    # (d, r), orthonormal
    variances: np.ndarray     # (r,), descending

    @property
    def rank(self) -> int:
        return self.components.shape[1]

    def variance_share(self, i: int = 0) -> float:
        tot = float(self.variances.sum())
        return float(self.variances[i]) / tot if tot > 0 else 0.0


def pca(cohort: Cohort, r: int | None = None) -> PcaModel:
    """Eigendecomposition of the 1/K covariance, computed implicitly."""
    red = reduce(cohort, r)
    return PcaModel(mean=red.mean, components=red.basis,
                    variances=red.variances)


@dataclass
class DirectionResult:
    """A direction in embedding space with per-subject scores."""

    direction: np.ndarray     # (d,), unit length
    scores: np.ndarray        # (K,)
    statistic: float
    p_value: float | None = None
    reduced_direction: np.ndarray | None = None


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denominator = np.sqrt((a * a).sum() * (b * b).sum())
    if denominator == 0:
        return 0.0
    return float((a * b).sum() / denominator)


def correlation_direction(cohort: Cohort, r: int | None = None) -> DirectionResult:
    """Direction maximizing linear correlation with the covariate.

    In the reduced coordinates Z (columns centered) and with the centered
    covariate v, the maximizer of w.Zv / |w| is w = Zv, normalized. The
    statistic is the Pearson correlation between the projections and the
    covariate; it is nonnegative by construction.
    """
    if cohort.covariate is None:
        raise ValueError("cohort has no covariate")
    v = cohort.covariate - cohort.covariate.mean()
    if np.allclose(v, 0.0):
        raise ConstantCovariate("covariate has zero variance")
    red = reduce(cohort, r)
    w = red.coords @ v
    norm = np.linalg.norm(w)
    if norm == 0:
        # covariate orthogonal to the data: any direction scores r = 0
        w = np.zeros(red.rank)
        w[0] = 1.0
    else:
        w = w / norm
    scores = w @ red.coords
    stat = _pearson(scores, cohort.covariate)
    return DirectionResult(direction=red.lift(w, add_mean=False),
                           scores=scores, statistic=stat,
                           reduced_direction=w)


def _class_partition(labels: np.ndarray):
    classes = []
    for c in sorted(set(labels.tolist())):
        idx = np.nonzero(labels == c)[0]
        classes.append((c, idx))
    return classes


def _separation_statistic(scores: np.ndarray, labels: np.ndarray) -> float:
    """Standardized separation of class means along the scores.

    For two classes: |mean1 - mean0| / pooled within-class deviation. For
    more classes, the square root of the between/within variance ratio.
    """
    classes = _class_partition(labels)
    means = np.array([scores[idx].mean() for _, idx in classes])
    within = np.concatenate([scores[idx] - scores[idx].mean()
                             for _, idx in classes])
    pooled = np.sqrt(np.mean(within ** 2)) + 1e-30
    if len(classes) == 2:
        return float(abs(means[1] - means[0]) / pooled)
    return float(np.sqrt(np.mean((means - scores.mean()) ** 2)) / pooled)


def plda(cohort: Cohort, alpha: float, r: int | None = None) -> DirectionResult:
    """Penalized discriminant direction.

    Maximizes total scatter against penalized within-class scatter,
    w' S_T w / w' (S_W + alpha I) w, in the reduced coordinates; solved by
    Cholesky whitening of the penalized within matrix. Large alpha drives the
    direction to the first principal component.
    """
    if cohort.labels is None:
        raise DegenerateLabels("cohort has no labels")
    labels = cohort.labels
    classes = _class_partition(labels)
    if len(classes) < 2:
        raise DegenerateLabels("need at least two classes")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    red = reduce(cohort, r)
    Z = red.coords
    K = Z.shape[1]
    s_t = (Z @ Z.T) / K
    s_w = np.zeros_like(s_t)
    for _, idx in classes:
        Zc = Z[:, idx] - Z[:, idx].mean(axis=1, keepdims=True)
        s_w += Zc @ Zc.T
    penalized = s_w + alpha * np.eye(s_w.shape[0])
    try:
        L = cholesky(penalized, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularPenalty(
            "within-class scatter singular and alpha = 0") from exc
    if alpha == 0 and np.min(np.abs(np.diag(L))) < 1e-10 * np.max(np.abs(np.diag(L))):
        raise SingularPenalty("within-class scatter singular and alpha = 0")
    B = solve_triangular(L, s_t, lower=True)
    B = solve_triangular(L, B.T, lower=True).T
    B = 0.5 * (B + B.T)
    evals, evecs = eigh(B)
    y = evecs[:, -1]
    w = solve_triangular(L.T, y, lower=False)
    w = w / np.linalg.norm(w)
    scores = w @ Z
    # orient so the higher class label sits at higher scores
    if scores[labels == classes[-1][0]].mean() < scores[labels == classes[0][0]].mean():
        w = -w
        scores = -scores
    stat = _separation_statistic(scores, labels)
    return DirectionResult(direction=red.lift(w, add_mean=False),
                           scores=scores, statistic=stat,
                           reduced_direction=w)


def permutation_test(cohort: Cohort, statistic_fn, trials: int = 1000,
                     seed: int = 0, permute: str = "covariate") -> float:
    """Permutation p-value with the add-one estimator.

    Each trial permutes the covariate (or the labels) with an independent
    stream derived from the master seed and recomputes the statistic from
    scratch, so model selection is inside the null. Returns
    (1 + #{permuted >= observed}) / (trials + 1).
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    observed = statistic_fn(cohort)
    streams = np.random.SeedSequence(seed).spawn(trials)
    exceed = 0
    for stream in streams:
        rng = np.random.default_rng(stream)
        perm = rng.permutation(cohort.K)
        if permute == "covariate":
            shuffled = cohort.with_covariate(cohort.covariate[perm])
        elif permute == "labels":
            shuffled = cohort.with_labels(cohort.labels[perm])
        else:
            raise ValueError(f"unknown permutation target {permute!r}")
        if statistic_fn(shuffled) >= observed:
            exceed += 1
    return (1 + exceed) / (trials + 1)


def alpha_stability_scan(cohort: Cohort, alphas, r: int | None = None):
    """Angles between discriminant directions at consecutive penalty values.

    Returns a list of rows {alpha, angle_to_previous, excluded, note}. Values
    of alpha for which the eigenproblem is singular are excluded with a note
    rather than aborting the scan.
    """
    alphas = list(alphas)
    if len(alphas) < 2:
        raise ValueError("need at least two alpha values")
    rows = []
    prev_dir = None
    for a in alphas:
        row = {"alpha": float(a), "angle_to_previous": None,
               "excluded": False, "note": ""}
        try:
            res = plda(cohort, a, r)
        except SingularPenalty as exc:
            row["excluded"] = True
            row["note"] = str(exc)
            rows.append(row)
            continue
        if prev_dir is not None:
            cosang = abs(float(np.dot(res.reduced_direction, prev_dir)))
            row["angle_to_previous"] = float(np.arccos(min(1.0, cosang)))
        prev_dir = res.reduced_direction
        rows.append(row)
    return rows


def write_scan_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "angle_to_previous", "excluded", "note"])
        for row in rows:
            ang = "" if row["angle_to_previous"] is None else repr(row["angle_to_previous"])
            w.writerow([repr(row["alpha"]), ang, int(row["excluded"]), row["note"]])


def read_covariates_csv(path):
    """Covariate table: header subject_id,value[,label]."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["subject_id", "value"]:
            raise ValueError(
                "covariate CSV must start with header subject_id,value[,label]")
        has_label = len(header) >= 3 and header[2].strip() == "label"
        ids, values, labels = [], [], []
        for row in reader:
            if not row:
                continue
            ids.append(row[0].strip())
            values.append(float(row[1]))
            if has_label:
                labels.append(int(row[2]))
    return ids, np.asarray(values), (np.asarray(labels) if has_label else None)


def write_scores_csv(subject_ids, scores, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "score"])
        for sid, s in zip(subject_ids, scores):
            w.writerow([sid, repr(float(s))])
