"""Two-stage training loop: disambiguation-free pre-training, then
semi-supervised optimization with per-epoch pseudo-split refresh.

Schedules: the semi-supervised weight gamma and the transformation strength
lam ramp linearly from 0 to their maxima over the epoch budget; per-class
confidence thresholds follow curriculum pseudo-labeling (classes producing
fewer confident predictions get lower thresholds), clamped to
[tau_floor, tau0].
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import augment
from .augment import AugmentSpec, derive_rng
from .model import ClassifierParams, init_classifier, snapshot_frozen
from .objective import (assemble_batch, build_pseudo_split,
                        loss_complementary_semantic, loss_df,
                        loss_sup_semantic, reg_consistency_semantic,
                        weak_cav_pseudo_labels)
from .pldata import PLDataset
from .semstats import ClassCovStats, DEFAULT_BETA, update_cov_stats
from .tensorcore import SgdConfig, SgdOptimizer, Tensor

# rng substream purposes
_TAG_INIT = 1
_TAG_PRETRAIN = 2
_TAG_BATCH = 3
_TAG_AUG_WEAK = 4
_TAG_AUG_STRONG = 5


@dataclass
class TrainConfig:
    gamma0: float = 1.0
    lambda0: float = 0.01
    tau0: float = 0.75
    k: int = 200
    pretrain_epochs: int = 10     # T0
    ss_epochs: int = 250          # T
    inner_iters: int = 200        # I
    batch_labeled: int = 64       # B_l
    batch_unlabeled: int = 256    # B_u
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    beta: float = DEFAULT_BETA
    tau_floor: float = 0.5
    seed: int = 0
    deterministic: bool = False
    hidden_dims: tuple[int, ...] = (128, 64)
    eig_floor: float = 0.0

    def __post_init__(self):
        if not 0.5 < self.tau0 <= 1.0:
            raise ValueError("tau0 must lie in (0.5, 1]")
        if self.gamma0 < 0 or self.lambda0 < 0:
            raise ValueError("gamma0 and lambda0 must be >= 0")
        for name in ("k", "pretrain_epochs", "ss_epochs", "inner_iters",
                     "batch_labeled", "batch_unlabeled"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.tau_floor <= self.tau0:
            raise ValueError("tau_floor must lie in [0, tau0]")

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.learning_rate, self.momentum, self.weight_decay)


@dataclass
class ScheduleState:
    epoch: int
    gamma: float
    lam: float
    tau: np.ndarray
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def schedule_gamma(t: int, total: int, gamma0: float) -> float:
    if total < 1:
        raise ValueError("epoch budget must be >= 1")
    return min(t / total * gamma0, gamma0)


def schedule_lambda(t: int, total: int, lambda0: float) -> float:
    return schedule_gamma(t, total, lambda0)


def update_tau(sigma: np.ndarray, tau0: float, tau_floor: float) -> np.ndarray:
    """Curriculum thresholds: tau_j = clamp(sigma_j / max(sigma) * tau0,
    tau_floor, tau0); all-zero counts keep every threshold at tau0."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("confident counts must be >= 0")
    top = sigma.max() if sigma.size else 0.0
    if top == 0:
        return np.full(sigma.shape, tau0)
    return np.clip(sigma / top * tau0, tau_floor, tau0)


class _Cycler:
    """Reshuffled cycling over a fixed index set."""

    def __init__(self, indices: np.ndarray, rng: np.random.Generator):
        self.indices = np.asarray(indices)
        self.rng = rng
        self.order = rng.permutation(self.indices)
        self.pos = 0

    def take(self, batch: int) -> np.ndarray:
        out: list[np.ndarray] = []
        need = batch
        while need > 0:
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(self.indices)
                self.pos = 0
            grab = min(need, len(self.order) - self.pos)
            out.append(self.order[self.pos:self.pos + grab])
            self.pos += grab
            need -= grab
        return np.concatenate(out)


def _draw_batch(indices: np.ndarray, batch: int, cycler: _Cycler | None,
                rng: np.random.Generator) -> np.ndarray:
    if indices.size == 0 or batch == 0:
        return np.zeros(0, dtype=np.int64)
    if indices.size < batch:
        return rng.choice(indices, size=batch, replace=True)
    assert cycler is not None
    return cycler.take(batch)


def _log_softmax(params: ClassifierParams, x: np.ndarray):
    from .model import extract_features
    feats = extract_features(params, x)
    z = feats @ params.head.T
    return z - z.logsumexp(axis=1, keepdims=True)


def _df_epoch(params: ClassifierParams, x: np.ndarray, candidates: np.ndarray,
              opt: SgdOptimizer, cycler: _Cycler, iters: int, batch: int) -> float:
    total = 0.0
    for _ in range(iters):
        idx = cycler.take(batch)
        loss, _ = loss_df(_log_softmax(params, x[idx]), candidates[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        total += float(loss.data)
    return total / max(iters, 1)


def pretrain(ds: PLDataset, params: ClassifierParams, config: TrainConfig,
             epochs: int | None = None, on_epoch=None) -> ClassifierParams:
    """Disambiguation-free stage: minimize the candidate-averaged negative log
    over uniformly reshuffled mini-batches. No augmentation."""
    epochs = config.pretrain_epochs if epochs is None else epochs
    if epochs == 0 or config.inner_iters == 0:
        return params
    x = ds.flat_features().astype(np.float64)
    rng = derive_rng(config.seed, _TAG_PRETRAIN)
    opt = SgdOptimizer(params.parameters(), config.sgd())
    for t in range(epochs):
        start = time.perf_counter()
        cycler = _Cycler(np.arange(ds.n), rng)
        mean_loss = _df_epoch(params, x, ds.candidates, opt, cycler,
                              config.inner_iters, config.batch_unlabeled)
        if on_epoch is not None:
            on_epoch(_df_metrics(t, mean_loss, params, ds, None,
                                 time.perf_counter() - start, config))
    return params


def train_df_baseline(ds: PLDataset, params: ClassifierParams, config: TrainConfig,
                      epochs: int, test_ds: PLDataset | None = None,
                      on_epoch=None) -> ClassifierParams:
    """Train with the disambiguation-free loss only, reporting per-epoch
    metrics; the ablation reference for the full objective."""
    x = ds.flat_features().astype(np.float64)
    rng = derive_rng(config.seed, _TAG_PRETRAIN)
    opt = SgdOptimizer(params.parameters(), config.sgd())
    for t in range(epochs):
        start = time.perf_counter()
        cycler = _Cycler(np.arange(ds.n), rng)
        mean_loss = _df_epoch(params, x, ds.candidates, opt, cycler,
                              config.inner_iters, config.batch_unlabeled)
        if on_epoch is not None:
            on_epoch(_df_metrics(t, mean_loss, params, ds, test_ds,
                                 time.perf_counter() - start, config))
    return params


def _evaluate_f1(params: ClassifierParams, ds: PLDataset | None) -> tuple[float, float]:
    if ds is None or ds.truth is None:
        return 0.0, 0.0
    from .evalcli import macro_micro_f1  # deferred: evalcli imports this module
    preds = params.predict(ds.flat_features().astype(np.float64))
    return macro_micro_f1(preds, ds.truth, ds.l)


def _df_metrics(epoch: int, mean_loss: float, params: ClassifierParams,
                ds: PLDataset, test_ds: PLDataset | None, seconds: float,
                config: TrainConfig) -> dict:
    train_macro, train_micro = _evaluate_f1(params, ds)
    test_macro, test_micro = _evaluate_f1(params, test_ds)
    return {
        "epoch": epoch,
        "loss_df": mean_loss, "loss_sup": 0.0, "reg_u": 0.0, "loss_cl": 0.0,
        "loss_total": mean_loss,
        "macro_f1": test_macro, "micro_f1": test_micro,
        "train_macro_f1": train_macro, "train_micro_f1": train_micro,
        "h_pass_rate": 0.0, "tau": [],
        "n_labeled": 0, "n_unlabeled": 0,
        "wall_clock_s": 0.0 if config.deterministic else seconds,
    }


def train_ss(ds: PLDataset, params: ClassifierParams, config: TrainConfig,
             test_ds: PLDataset | None = None,
             weak: AugmentSpec | None = None,
             strong: AugmentSpec | None = None,
             on_epoch=None) -> tuple[ClassifierParams, list[dict]]:
    """Semi-supervised stage over the pseudo-split, refreshed every epoch.

    Per inner iteration: draw a labeled and an unlabeled mini-batch, snapshot
    the parameters, generate weak/strong variants, fold the labeled batch's
    un-augmented features into the per-class covariance stats, evaluate the
    combined objective at the current (gamma, lam, tau), and take an SGD step.
    Confident counts accumulate over the epoch and set the next epoch's
    thresholds.
    """
    weak = weak or augment.weak_spec()
    strong = strong or augment.strong_spec()
    n_epochs = config.ss_epochs
    records: list[dict] = []
    if n_epochs == 0:
        return params, records
    l = ds.l
    x_flat = ds.flat_features().astype(np.float64)
    x_raw = ds.features.astype(np.float64)
    stats = ClassCovStats(l, params.feature_dim)
    state = ScheduleState(epoch=0, gamma=0.0, lam=0.0,
                          tau=np.full(l, config.tau0),
                          sigma=np.zeros(l, dtype=np.int64))
    opt = SgdOptimizer(params.parameters(), config.sgd())  # fresh momentum
    batch_rng = derive_rng(config.seed, _TAG_BATCH)

    for t in range(n_epochs):
        start = time.perf_counter()
        state.epoch = t
        state.gamma = schedule_gamma(t, n_epochs, config.gamma0)
        state.lam = schedule_lambda(t, n_epochs, config.lambda0)
        state.tau = update_tau(state.sigma, config.tau0, config.tau_floor)

        split = build_pseudo_split(ds, snapshot_frozen(params), config.k)
        split.check(ds, config.k)
        lab_cycler = (_Cycler(split.labeled_idx, batch_rng)
                      if split.n_labeled >= config.batch_labeled else None)
        unl_cycler = (_Cycler(split.unlabeled_idx, batch_rng)
                      if split.n_unlabeled >= config.batch_unlabeled else None)
        lab_y = np.zeros(ds.n, dtype=np.int64)
        lab_y[split.labeled_idx] = split.labeled_y

        sigma_epoch = np.zeros(l, dtype=np.int64)
        sums = {"loss_sup": 0.0, "reg_u": 0.0, "loss_cl": 0.0, "loss_total": 0.0,
                "h": 0.0}
        for c in range(config.inner_iters):
            lab = _draw_batch(split.labeled_idx, config.batch_labeled,
                              lab_cycler, batch_rng)
            unl = _draw_batch(split.unlabeled_idx, config.batch_unlabeled,
                              unl_cycler, batch_rng)
            frozen = snapshot_frozen(params)
            if unl.size:
                wk_rng = derive_rng(config.seed, _TAG_AUG_WEAK, t, c)
                st_rng = derive_rng(config.seed, _TAG_AUG_STRONG, t, c)
                x_w = augment.weak_batch(x_raw[unl], weak, wk_rng).reshape(unl.size, -1)
                x_s = augment.strong_batch(x_raw[unl], strong, st_rng).reshape(unl.size, -1)
            if lab.size:
                update_cov_stats(stats, params.eval_features(x_flat[lab]), lab_y[lab])

            loss_sup, sup_clamped = loss_sup_semantic(params, stats, x_flat[lab],
                                                      lab_y[lab], state.lam)
            consistency = None
            if unl.size:
                sem_labels = weak_cav_pseudo_labels(frozen, x_w, ds.candidates[unl])
                reg, consistency = reg_consistency_semantic(
                    params, frozen, stats, x_w, x_s, ds.candidates[unl],
                    state.lam, state.tau, config.beta, sem_labels)
                loss_cl, cl_clamped = loss_complementary_semantic(
                    params, stats, x_flat[unl], ds.candidates[unl],
                    sem_labels, state.lam)
            else:
                reg, loss_cl, cl_clamped = Tensor(0.0), Tensor(0.0), 0
            total, batch_report = assemble_batch(
                loss_sup, reg, loss_cl, state.gamma, l, consistency,
                clamped=sup_clamped + cl_clamped)
            opt.zero_grad()
            total.backward()
            opt.step()
            sigma_epoch += batch_report.sigma_inc
            sums["h"] += batch_report.h_pass_rate
            sums["loss_sup"] += batch_report.loss_sup
            sums["reg_u"] += batch_report.reg_u
            sums["loss_cl"] += batch_report.loss_cl
            sums["loss_total"] += batch_report.total

        state.sigma = sigma_epoch
        iters = max(config.inner_iters, 1)
        train_macro, train_micro = _evaluate_f1(params, ds)
        test_macro, test_micro = _evaluate_f1(params, test_ds)
        record = {
            "epoch": t,
            "loss_df": 0.0,
            "loss_sup": sums["loss_sup"] / iters,
            "reg_u": sums["reg_u"] / iters,
            "loss_cl": sums["loss_cl"] / iters,
            "loss_total": sums["loss_total"] / iters,
            "macro_f1": test_macro, "micro_f1": test_micro,
            "train_macro_f1": train_macro, "train_micro_f1": train_micro,
            "h_pass_rate": sums["h"] / iters,
            "tau": [float(v) for v in state.tau],
            "n_labeled": split.n_labeled, "n_unlabeled": split.n_unlabeled,
            "wall_clock_s": 0.0 if config.deterministic else time.perf_counter() - start,
        }
        records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return params, records


def new_classifier(ds: PLDataset, config: TrainConfig) -> ClassifierParams:
    rng = derive_rng(config.seed, _TAG_INIT)
    input_dim = int(np.prod(ds.feature_shape))
    return init_classifier(input_dim, tuple(config.hidden_dims), ds.l, rng)
