"""Loss terms for partial-label training with a semi-supervised objective.

The pipeline: a disambiguation-free pre-training loss that spreads mass
uniformly over candidate labels; activation-value scoring to pick per-class
top-k pseudo-labeled instances; and the semi-supervised stage combining a
pseudo-supervised loss, a confidence-gated consistency regularizer between
weak and strong views, and a complementary penalty on non-candidate labels.

The three semantic variants replace sampling from N(a, lam*Sigma_y) by the
closed forms in :mod:`plsp.semstats`; ``mc_oracle_reg`` keeps the sampled
estimator around as an independent check.

Gradient flow: everything computed from a frozen snapshot (weak-branch
probabilities, pseudo labels, pseudo targets) enters as plain numpy constants;
only the strong-branch / un-augmented log-probabilities under the live
parameters carry gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ClassifierParams, FrozenClassifier, extract_features
from .pldata import PLDataset
from .semstats import (ClassCovStats, DEFAULT_BETA, probit_weak_probs)
from .tensorcore import Tensor, softmax

LOG_EPS = math.log(1e-12)


class DegenerateMassError(ValueError):
    """No candidate label carries probability mass."""


@dataclass
class PseudoSplit:
    labeled_idx: np.ndarray    # (m,) indices into the dataset
    labeled_y: np.ndarray      # (m,) committed pseudo labels
    unlabeled_idx: np.ndarray  # (n - m,) remaining indices

    @property
    def n_labeled(self) -> int:
        return len(self.labeled_idx)

    @property
    def n_unlabeled(self) -> int:
        return len(self.unlabeled_idx)

    def check(self, ds: PLDataset, k: int) -> None:
        joint = np.concatenate([self.labeled_idx, self.unlabeled_idx])
        if len(np.unique(joint)) != ds.n or len(joint) != ds.n:
            raise ValueError("split must partition the dataset")
        if not np.all(ds.candidates[self.labeled_idx, self.labeled_y]):
            raise ValueError("pseudo label outside its candidate set")
        if self.n_labeled and np.bincount(self.labeled_y, minlength=ds.l).max() > k:
            raise ValueError("per-class labeled count exceeds k")


@dataclass
class ConsistencyReport:
    value: float
    sigma_inc: np.ndarray      # per-class confident counts
    h_pass_rate: float
    skipped: int = 0           # degenerate-mass instances
    clamped: int = 0           # log-clamp events


@dataclass
class BatchLossReport:
    loss_sup: float
    reg_u: float
    loss_cl: float
    total: float
    sigma_inc: np.ndarray
    h_pass_rate: float
    skipped: int = 0
    clamped: int = 0


def cav_scores(z: np.ndarray) -> np.ndarray:
    """Activation-value score v = z * |z - 1| on raw logits."""
    z = np.asarray(z, dtype=np.float64)
    return z * np.abs(z - 1.0)


def masked_argmax(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row argmax restricted to mask (ties -> lowest index)."""
    restricted = np.where(mask, values, -np.inf)
    return restricted.argmax(axis=1)


def weak_cav_pseudo_labels(frozen: FrozenClassifier, x_weak: np.ndarray,
                           candidates: np.ndarray) -> np.ndarray:
    """Candidate-restricted activation-value argmax on the weak view."""
    return masked_argmax(cav_scores(frozen.logits_of(x_weak)), candidates)


def build_pseudo_split(ds: PLDataset, frozen: FrozenClassifier, k: int) -> PseudoSplit:
    """Per class, commit the k highest-scoring instances among those whose
    candidate-restricted activation-value argmax picked that class; the rest
    stay unlabeled. Ties break toward the lower instance index."""
    if k < 0:
        raise ValueError("k must be >= 0")
    z = frozen.logits_of(ds.flat_features())
    v = cav_scores(z)
    pseudo = masked_argmax(v, ds.candidates)
    chosen = np.zeros(ds.n, dtype=bool)
    if k > 0:
        for j in range(ds.l):
            members = np.flatnonzero(pseudo == j)
            if members.size == 0:
                continue
            order = members[np.lexsort((members, -v[members, j]))]
            chosen[order[:k]] = True
    labeled_idx = np.flatnonzero(chosen)
    return PseudoSplit(
        labeled_idx=labeled_idx,
        labeled_y=pseudo[labeled_idx],
        unlabeled_idx=np.flatnonzero(~chosen),
    )


def loss_df(log_probs: Tensor, candidates: np.ndarray) -> tuple[Tensor, int]:
    """Mean over the batch of the candidate-averaged negative log:
    (1/|C_i|) sum_{j in C_i} -log p_ij. Returns (loss, clamp count)."""
    candidates = np.asarray(candidates, dtype=bool)
    weights = candidates / candidates.sum(axis=1, keepdims=True)
    clamped = int(np.sum((log_probs.data < LOG_EPS) & candidates))
    safe = log_probs.maximum(LOG_EPS)
    batch = candidates.shape[0]
    return -(safe * weights).sum() / batch, clamped


def pseudo_target(p_weak: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Renormalize a weak-branch distribution over the candidate set."""
    p_weak = np.asarray(p_weak, dtype=np.float64)
    masked = np.where(candidates, p_weak, 0.0)
    mass = masked.sum()
    if mass <= 0.0:
        raise DegenerateMassError("candidate set carries zero probability mass")
    return masked / mass


def confidence_indicator(p_weak: np.ndarray, candidates: np.ndarray,
                         tau: np.ndarray) -> int:
    """1 iff the argmax confidence clears its class threshold and the argmax
    lies in the candidate set (argmax ties -> lowest index)."""
    p_weak = np.asarray(p_weak, dtype=np.float64)
    jmax = int(p_weak.argmax())
    tau = np.asarray(tau, dtype=np.float64)
    return int(p_weak[jmax] >= tau[jmax] and bool(candidates[jmax]))


# -- differentiable shifted-softmax machinery --------------------------------

def _quadratic_form(head: Tensor, cov: np.ndarray) -> Tensor:
    """Q[i, j] = (w_i - w_j)^T cov (w_i - w_j), differentiable in the head."""
    hc = head @ Tensor(cov)
    s = hc @ head.T
    d = (head * hc).sum(axis=1, keepdims=True)   # (l, 1)
    return d + d.T - s - s.T


def shifted_log_probs(head: Tensor, feats: Tensor, cov: np.ndarray,
                      lam: float) -> Tensor:
    """log of exp(z_j) / sum_j' exp(z_j' + lam/2 * Q[j', j]) for a batch.

    Row-max and shift-max constants are detached; they cancel exactly, so the
    value and gradient match the unshifted expression. lam == 0 reduces to
    log-softmax bit for bit (the quadratic term multiplies out to zeros).
    """
    z = feats @ head.T                               # (B, l)
    shift = _quadratic_form(head, cov) * (0.5 * lam)  # (l, l), rows j'
    m = z.data.max(axis=1, keepdims=True)
    kappa = float(shift.data.max())
    expz = (z - m).exp()
    gain = (shift - kappa).exp()
    den = (expz @ gain).log() + (m + kappa)
    return z - den


def loss_sup_semantic(params: ClassifierParams, stats: ClassCovStats,
                      x: np.ndarray, y: np.ndarray, lam: float) -> tuple[Tensor, int]:
    """Mean -log of the target's shifted-softmax probability on un-augmented
    features, covariance chosen by the committed pseudo label."""
    y = np.asarray(y)
    batch = len(y)
    if batch == 0:
        return Tensor(0.0), 0
    n_classes = params.n_classes
    pieces: list[Tensor] = []
    clamped = 0
    for cls in np.unique(y):
        grp = np.flatnonzero(y == cls)
        feats = extract_features(params, x[grp])
        z = feats @ params.head.T
        quad = _quadratic_form(params.head, stats.cov(int(cls)))
        col = np.zeros((n_classes, 1))
        col[int(cls), 0] = 1.0
        shift_col = ((quad @ Tensor(col)) * (0.5 * lam)).reshape(n_classes)
        den = (z + shift_col).logsumexp(axis=1)
        onehot = np.zeros((grp.size, n_classes))
        onehot[:, int(cls)] = 1.0
        log_p = (z * onehot).sum(axis=1) - den
        clamped += int(np.sum(log_p.data < LOG_EPS))
        pieces.append(-(log_p.maximum(LOG_EPS)).sum())
    total = pieces[0]
    for piece in pieces[1:]:
        total = total + piece
    return total / batch, clamped


def reg_consistency_semantic(params: ClassifierParams, frozen: FrozenClassifier,
                             stats: ClassCovStats, x_weak: np.ndarray,
                             x_strong: np.ndarray, candidates: np.ndarray,
                             lam: float, tau: np.ndarray,
                             beta: float = DEFAULT_BETA,
                             sem_labels: np.ndarray | None = None,
                             ) -> tuple[Tensor, ConsistencyReport]:
    """Confidence-gated KL between the frozen weak-branch target and the live
    strong-branch shifted softmax, averaged over the whole mini-batch.

    The weak side (closed-form expected softmax, pseudo target, gate h) is
    pure numpy under the frozen snapshot; gradients reach only the strong
    branch. Returns the loss tensor and per-class confident counts.
    """
    batch = len(x_strong)
    n_classes = frozen.n_classes
    empty = ConsistencyReport(0.0, np.zeros(n_classes, dtype=np.int64), 0.0)
    if batch == 0:
        return Tensor(0.0), empty
    candidates = np.asarray(candidates, dtype=bool)
    if sem_labels is None:
        sem_labels = weak_cav_pseudo_labels(frozen, x_weak, candidates)
    feats_weak = frozen.features(x_weak)

    p_weak = np.zeros((batch, n_classes))
    for cls in np.unique(sem_labels):
        grp = np.flatnonzero(sem_labels == cls)
        p_weak[grp] = probit_weak_probs(frozen.head, feats_weak[grp],
                                        stats.cov(int(cls)), lam, beta)

    tau = np.asarray(tau, dtype=np.float64)
    jmax = p_weak.argmax(axis=1)
    h = (p_weak[np.arange(batch), jmax] >= tau[jmax]) \
        & candidates[np.arange(batch), jmax]
    masked = np.where(candidates, p_weak, 0.0)
    mass = masked.sum(axis=1)
    valid = mass > 0.0
    targets = np.zeros_like(masked)
    targets[valid] = masked[valid] / mass[valid, None]

    weights = targets * (h & valid)[:, None]
    entropy = np.sum(np.where(weights > 0, weights * np.log(targets,
                     out=np.zeros_like(targets), where=targets > 0), 0.0))

    pieces: list[Tensor] = []
    clamped = 0
    for cls in np.unique(sem_labels):
        grp = np.flatnonzero(sem_labels == cls)
        if not np.any(weights[grp]):
            continue
        feats_strong = extract_features(params, x_strong[grp])
        log_ps = shifted_log_probs(params.head, feats_strong,
                                   stats.cov(int(cls)), lam)
        w = weights[grp]
        clamped += int(np.sum((log_ps.data < LOG_EPS) & (w > 0)))
        pieces.append((log_ps.maximum(LOG_EPS) * w).sum())
    if pieces:
        cross = pieces[0]
        for piece in pieces[1:]:
            cross = cross + piece
        value = (Tensor(entropy) - cross) / batch
    else:
        value = Tensor(0.0)

    report = ConsistencyReport(
        value=float(value.data),
        sigma_inc=np.bincount(sem_labels[h], minlength=n_classes).astype(np.int64),
        h_pass_rate=float(h.mean()),
        skipped=int(np.sum(~valid)),
        clamped=clamped,
    )
    return value, report


def loss_complementary_semantic(params: ClassifierParams, stats: ClassCovStats,
                                x: np.ndarray, candidates: np.ndarray,
                                sem_labels: np.ndarray, lam: float,
                                ) -> tuple[Tensor, int]:
    """Mean over the batch of sum_{j not in C_i} -log(1 - p_ij), with p the
    shifted softmax on un-augmented features (covariance by weak-view label)."""
    batch = len(x)
    if batch == 0:
        return Tensor(0.0), 0
    candidates = np.asarray(candidates, dtype=bool)
    non_candidates = (~candidates).astype(np.float64)
    pieces: list[Tensor] = []
    clamped = 0
    for cls in np.unique(sem_labels):
        grp = np.flatnonzero(sem_labels == cls)
        feats = extract_features(params, x[grp])
        log_ps = shifted_log_probs(params.head, feats, stats.cov(int(cls)), lam)
        one_minus = 1.0 - log_ps.exp()
        mask = non_candidates[grp]
        clamped += int(np.sum((one_minus.data < 1e-12) & (mask > 0)))
        pieces.append(-(one_minus.maximum(1e-12).log() * mask).sum())
    total = pieces[0]
    for piece in pieces[1:]:
        total = total + piece
    return total / batch, clamped


def total_objective(loss_sup: Tensor, reg_u: Tensor, loss_cl: Tensor,
                    gamma: float) -> Tensor:
    """gamma * (pseudo-supervised + consistency) + complementary."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return (loss_sup + reg_u) * gamma + loss_cl


def assemble_batch(loss_sup: Tensor, reg_u: Tensor, loss_cl: Tensor,
                   gamma: float, n_classes: int,
                   consistency: ConsistencyReport | None = None,
                   clamped: int = 0) -> tuple[Tensor, BatchLossReport]:
    """Combine the three terms and record their decomposition."""
    total = total_objective(loss_sup, reg_u, loss_cl, gamma)
    report = BatchLossReport(
        loss_sup=float(loss_sup.data),
        reg_u=float(reg_u.data),
        loss_cl=float(loss_cl.data),
        total=float(total.data),
        sigma_inc=(consistency.sigma_inc if consistency is not None
                   else np.zeros(n_classes, dtype=np.int64)),
        h_pass_rate=consistency.h_pass_rate if consistency is not None else 0.0,
        skipped=consistency.skipped if consistency is not None else 0,
        clamped=clamped + (consistency.clamped if consistency is not None else 0),
    )
    return total, report


# -- sampling oracle ---------------------------------------------------------

@dataclass
class McRegEstimate:
    value: float               # mean of h * KL over all K^2 draw pairs
    se: float                  # standard error of `value`
    strong_ce: float           # MC strong-branch cross entropy under the
    strong_ce_se: float        # closed-form pseudo target
    h_rate: float
    invalid_draws: int = 0


def mc_oracle_reg(params: ClassifierParams, frozen: FrozenClassifier,
                  stats: ClassCovStats, x_weak: np.ndarray, x_strong: np.ndarray,
                  candidates: np.ndarray, lam: float, tau: np.ndarray,
                  n_samples: int, rng: np.random.Generator,
                  beta: float = DEFAULT_BETA) -> McRegEstimate:
    """Sampled estimate of the single-instance consistency term.

    Draws ``n_samples`` semantic transforms per branch (weak under the frozen
    snapshot, strong under the live parameters, both with the weak-view
    label's covariance) and averages h * KL over all pairs. Also reports the
    strong-branch cross entropy under the closed-form pseudo target, which the
    shifted-softmax term must upper-bound. Test/verification use only.
    """
    from .semstats import sample_semantic  # local import keeps module load light

    if n_samples < 1:
        raise ValueError("need n_samples >= 1")
    candidates = np.asarray(candidates, dtype=bool)
    tau = np.asarray(tau, dtype=np.float64)
    sem_label = int(weak_cav_pseudo_labels(frozen, x_weak[None, :], candidates[None, :])[0])
    cov = stats.cov(sem_label)
    a_weak = frozen.features(x_weak[None, :])[0]
    a_strong = params.eval_features(x_strong[None, :])[0]

    draws_w = sample_semantic(a_weak, cov, lam, rng, size=n_samples)
    p_w = softmax(draws_w @ frozen.head.T, axis=1)
    jmax = p_w.argmax(axis=1)
    h = (p_w[np.arange(n_samples), jmax] >= tau[jmax]) & candidates[jmax]
    masked = np.where(candidates, p_w, 0.0)
    mass = masked.sum(axis=1)
    valid = mass > 0
    targets = np.zeros_like(masked)
    targets[valid] = masked[valid] / mass[valid, None]
    gate = h & valid

    draws_s = sample_semantic(a_strong, cov, lam, rng, size=n_samples)
    z_s = draws_s @ params.head.data.T
    log_ps = z_s - z_s.max(axis=1, keepdims=True)
    log_ps = log_ps - np.log(np.exp(log_ps).sum(axis=1, keepdims=True))
    log_ps = np.maximum(log_ps, LOG_EPS)

    ent = np.sum(np.where(targets > 0,
                          targets * np.log(targets, out=np.zeros_like(targets),
                                           where=targets > 0), 0.0), axis=1)
    gated_ent = np.where(gate, ent, 0.0)
    wbar = (targets * gate[:, None]).mean(axis=0)
    lbar = log_ps.mean(axis=0)
    value = gated_ent.mean() - wbar @ lbar

    # variance via the per-branch conditional means of the pair statistic
    cond_w = gated_ent - np.where(gate, targets @ lbar, 0.0)
    cond_s = gated_ent.mean() - log_ps @ wbar
    se = math.sqrt((cond_w.var(ddof=1) + cond_s.var(ddof=1)) / n_samples) \
        if n_samples > 1 else 0.0

    # strong-branch cross entropy under the closed-form target
    p_closed = probit_weak_probs(frozen.head, a_weak, cov, lam, beta)
    t_closed = pseudo_target(p_closed, candidates)
    ce_draws = -(log_ps @ t_closed)
    strong_ce = float(ce_draws.mean())
    strong_ce_se = float(ce_draws.std(ddof=1) / math.sqrt(n_samples)) \
        if n_samples > 1 else 0.0

    return McRegEstimate(
        value=float(value), se=float(se),
        strong_ce=strong_ce, strong_ce_se=strong_ce_se,
        h_rate=float(h.mean()), invalid_draws=int(np.sum(~valid)),
    )
