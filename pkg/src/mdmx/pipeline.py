"""Training pipeline: contrastive pretraining, OOD filtering and warmup, then rounds of MixEMatch.

All randomness comes from streams keyed by ``(seed, phase, epoch, ...)`` so a
run is a pure function of its config and data. Training functions receive a
:class:`~mdmx.datagen.TrainingData` (no ground truth); metrics that need the
truth are delegated to an optional :class:`~mdmx.evaluation.Evaluator`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment as aug
from ._rng import derive_seed, substream
from .contrastive import ntxent_loss
from .datagen import NoisyDataset, TrainingData
from .evaluation import Evaluator, MetricsRecord, write_metrics
from .losses import LossWeights, ce_loss, semi_loss, sce_loss
from .mixematch import MixParams, guess_labels, mixematch, refine_labels, softmax
from .nn import (
    DivergenceError,
    Model,
    OptState,
    backward,
    classify_fwd,
    encode,
    encode_fwd,
    init_model,
    predict_logits,
    project_fwd,
    save_checkpoint,
    sgd_step,
    zero_grads,
)
from .selection import (
    OodScores,
    SplitResult,
    clean_posterior,
    default_k,
    fit_gmm_1d,
    knn_ood_scores,
    lowest_loss_split,
    minmax,
    per_sample_losses,
    rank_desc,
    split_clean_noisy,
)

log = logging.getLogger(__name__)

# stream tags for derive_seed / substream
_INIT, _SSL_VIEWS, _SSL_ORDER, _WARM_VIEWS, _WARM_ORDER, _SEMI_VIEWS, _SEMI_ORDER, _SEMI_MIX, _PROBE = range(1, 10)

MAX_OOD_FRACTION = 0.9


class PipelineAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr_classifier: float = 0.1
    lr_backbone: float = 0.001
    lr_multiplier: float = 1.0
    ssl_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass(frozen=True)
class PipelineConfig:
    epochs_ssl: int = 200
    epochs_warmup: int = 20
    epochs_semi: int = 100
    rounds: int = 3
    ood_fraction_initial: float = 0.1
    ood_fraction_per_round: float = 0.05
    tau2: float = 0.3
    k: int = 0  # 0 selects min(100, N // 10)
    refresh_every: int = 5
    batch_size: int = 64
    ssl_batch_size: int = 128
    ssl_temperature: float = 0.5
    probe_epochs: int = 50
    warmup_freeze_backbone: bool = False
    gmm_max_iters: int = 200
    gmm_tol: float = 1e-6
    mix: MixParams = field(default_factory=MixParams)
    loss: LossWeights = field(default_factory=LossWeights)
    augment: aug.AugmentSpec = field(default_factory=aug.AugmentSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs_ssl", "epochs_warmup", "epochs_semi", "rounds", "k", "probe_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("refresh_every", "batch_size", "ssl_batch_size", "gmm_max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("ood_fraction_initial", "ood_fraction_per_round"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not 0.0 < self.tau2 < 1.0:
            raise ValueError("tau2 must lie in (0, 1)")

    @property
    def supervised_epochs(self) -> int:
        return self.epochs_warmup + self.rounds * self.epochs_semi

    def supervised_opt(self) -> OptState:
        o = self.optim
        return OptState(
            lr_classifier=o.lr_classifier * o.lr_multiplier,
            lr_backbone=o.lr_backbone * o.lr_multiplier,
            momentum=o.momentum,
            weight_decay=o.weight_decay,
            total_epochs=self.supervised_epochs,
        )

    def ssl_opt(self) -> OptState:
        o = self.optim
        return OptState(
            lr_classifier=0.0,
            lr_backbone=o.ssl_lr * o.lr_multiplier,
            momentum=o.momentum,
            weight_decay=o.weight_decay,
            total_epochs=self.epochs_ssl,
            trainable=("enc", "proj"),
        )


@dataclass
class RoundState:
    round: int
    ood_mask: np.ndarray
    ood_scores: OodScores | None = None
    split: SplitResult | None = None
    checkpoint: Path | None = None


@dataclass
class RunResult:
    model: Model
    history: list[MetricsRecord]
    rounds: list[RoundState]
    ssl_scores: OodScores | None = None
    ssl_model: Model | None = None


class _Recorder:
    """Collects metrics records and mirrors them to an optional JSONL stream."""

    def __init__(self, stream=None):
        self.history: list[MetricsRecord] = []
        self.stream = stream

    def add(self, record: MetricsRecord) -> None:
        self.history.append(record)
        if self.stream is not None:
            write_metrics(record, self.stream)


def _as_training(data) -> TrainingData:
    if isinstance(data, NoisyDataset):
        return data.training_view()
    return data


def feature_scale(data: TrainingData) -> np.ndarray:
    std = data.features.std(axis=0)
    return np.where(std > 0, std, 1.0)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _batches(order: np.ndarray, size: int):
    for start in range(0, order.shape[0], size):
        yield order[start:start + size]


# ---------------------------------------------------------------------------
# step 1: contrastive pretraining


def ssl_step(model: Model, view_a: np.ndarray, view_b: np.ndarray, tau: float):
    """Loss and gradients of NT-Xent on one batch of paired views."""
    b = view_a.shape[0]
    x = np.empty((2 * b, view_a.shape[1]))
    x[0::2], x[1::2] = view_a, view_b
    h, enc_cache = encode_fwd(model, x)
    z, proj_cache = project_fwd(model, h)
    loss, g_z = ntxent_loss(z, tau)
    grads, g_h = backward(model, proj_cache, g_z)
    backward(model, enc_cache, g_h, grads)
    return loss, grads


def pretrain_ssl(model: Model, data, config: PipelineConfig, recorder: _Recorder | None = None) -> Model:
    """Train encoder and projection head with NT-Xent on two strong views of every sample."""
    data = _as_training(data)
    if config.epochs_ssl == 0:
        return model
    opt = config.ssl_opt()
    scale = feature_scale(data)
    seed = config.seed
    n = len(data)
    for epoch in range(config.epochs_ssl):
        va, vb = aug.epoch_views(data.features, config.augment, scale, derive_seed(seed, _SSL_VIEWS), epoch,
                                 kinds=(aug.STRONG, aug.STRONG))
        order = substream(seed, _SSL_ORDER, epoch).permutation(n)
        total, count = 0.0, 0
        for idx in _batches(order, config.ssl_batch_size):
            if idx.shape[0] < 2:
                continue
            loss, grads = ssl_step(model, va[idx], vb[idx], config.ssl_temperature)
            if not math.isfinite(loss):
                raise DivergenceError(f"contrastive loss became {loss} at epoch {epoch}")
            sgd_step(model, opt, grads, epoch)
            total += loss * idx.shape[0]
            count += idx.shape[0]
        if recorder is not None:
            recorder.add(MetricsRecord(round=-1, epoch=epoch, l_self=total / max(count, 1)))
    return model


# ---------------------------------------------------------------------------
# step 2: OOD filtering and warmup


def select_ood(model: Model, data, config: PipelineConfig, round_index: int, previous: np.ndarray | None = None):
    """Grow the OOD mask by the top-scoring not-yet-excluded samples.

    Returns ``(mask, scores)``. Scores are KNN mean distances on the current
    encoder's embeddings. The mask never shrinks and is capped at 90% of N.
    """
    data = _as_training(data)
    n = len(data)
    mask = np.zeros(n, dtype=bool) if previous is None else previous.copy()
    k = config.k or default_k(n)
    scores = knn_ood_scores(encode(model, data.features), min(k, n - 1))
    fraction = config.ood_fraction_initial if round_index == 0 else config.ood_fraction_per_round
    n_new = int(math.ceil(fraction * n - 1e-9))
    cap = int(math.floor(MAX_OOD_FRACTION * n)) - int(mask.sum())
    if n_new > cap:
        log.warning("OOD mask would exceed %.0f%% of the data; excluding %d instead of %d",
                    100 * MAX_OOD_FRACTION, max(cap, 0), n_new)
        n_new = max(cap, 0)
    fresh = [i for i in rank_desc(scores.scores) if not mask[i]][:n_new]
    mask[fresh] = True
    return mask, scores


def supervised_step(model: Model, x: np.ndarray, targets: np.ndarray, loss_fn):
    h, enc_cache = encode_fwd(model, x)
    logits, clf_cache = classify_fwd(model, h)
    loss, g_logits = loss_fn(logits, targets)
    grads, g_h = backward(model, clf_cache, g_logits)
    backward(model, enc_cache, g_h, grads)
    return loss, grads


def _supervised_epoch(model, data, active, opt, config, epoch, loss_fn, view_tag, order_tag) -> float:
    scale = feature_scale(data)
    (view,) = aug.epoch_views(data.features, config.augment, scale, derive_seed(config.seed, view_tag), epoch,
                              kinds=(aug.WEAK,))
    targets = one_hot(data.labels, data.n_classes)
    order = active[substream(config.seed, order_tag, epoch).permutation(active.shape[0])]
    total = 0.0
    for idx in _batches(order, config.batch_size):
        loss, grads = supervised_step(model, view[idx], targets[idx], loss_fn)
        sgd_step(model, opt, grads, epoch)
        total += loss * idx.shape[0]
    return total / max(order.shape[0], 1)


def warmup(model: Model, data, mask: np.ndarray, config: PipelineConfig, opt: OptState,
           recorder: _Recorder | None = None, evaluator: Evaluator | None = None) -> Model:
    """Train the classifier (and the backbone at its low rate, unless frozen) with SCE on the given labels."""
    data = _as_training(data)
    if config.epochs_warmup == 0:
        return model
    active = np.flatnonzero(~mask)
    w = config.loss
    loss_fn = lambda z, t: sce_loss(z, t, w.sce_alpha, w.sce_beta, w.log_clip)  # noqa: E731
    saved = opt.trainable
    if config.warmup_freeze_backbone:
        opt.trainable = ("clf",)
    try:
        for epoch in range(config.epochs_warmup):
            loss = _supervised_epoch(model, data, active, opt, config, epoch, loss_fn, _WARM_VIEWS, _WARM_ORDER)
            if recorder is not None:
                recorder.add(MetricsRecord(
                    round=0, epoch=epoch, l_sup=loss,
                    test_acc=evaluator.test_accuracy(model) if evaluator else None,
                ))
    finally:
        opt.trainable = saved
    return model


# ---------------------------------------------------------------------------
# step 3: clean/noisy split and MixEMatch


def fit_split(model: Model, data, mask: np.ndarray, config: PipelineConfig) -> SplitResult:
    """GMM on min-max normalised losses of the active samples, thresholded at ``tau2``."""
    data = _as_training(data)
    active = ~mask
    losses = per_sample_losses(model, data.features, data.labels)
    norm = np.zeros_like(losses)
    norm[active] = minmax(losses[active])
    fit = fit_gmm_1d(norm[active], config.gmm_max_iters, config.gmm_tol)
    w = np.zeros_like(losses)
    w[active] = clean_posterior(fit, norm[active])
    split = split_clean_noisy(w, config.tau2, active)
    if split.clean_indices.shape[0] == 0:
        log.warning("no sample cleared tau2=%.3g; using the lowest-loss 10%% as clean", config.tau2)
        split = lowest_loss_split(losses, w, config.tau2, active)
    split.losses = losses
    return split


def lockstep_batches(n_x: int, n_u: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches into X and U, walking the longer set once and cycling the shorter."""
    perm_x = rng.permutation(n_x)
    perm_u = rng.permutation(n_u)
    longest = max(n_x, n_u)
    out = []
    for start in range(0, longest, batch_size):
        pos = np.arange(start, min(start + batch_size, longest))
        bx = perm_x[pos % n_x] if n_x else pos[:0]
        bu = perm_u[pos % n_u] if n_u else pos[:0]
        out.append((bx, bu))
    return out


@dataclass
class SemiStepResult:
    total: float
    l_sup: float
    l_unsup: float
    l_self: float
    grads: dict


def semi_step(model: Model, x_views, u_views, targets_x, targets_u, config: PipelineConfig,
              semi_epoch: float, rng: np.random.Generator, force_lambda: float | None = None) -> SemiStepResult:
    """Forward and backward pass of the semi-supervised objective on one batch.

    ``x_views`` / ``u_views`` are ``(strong1, strong2)`` pairs of arrays for the
    labeled and unlabeled samples; ``targets_*`` are per-sample soft targets.
    """
    xs1, xs2 = x_views
    us1, us2 = u_views
    bx, bu = xs1.shape[0], us1.shape[0]
    x_items = np.concatenate([xs1, xs2])
    u_items = np.concatenate([us1, us2])
    n_x = x_items.shape[0]

    h_pool, enc_cache = encode_fwd(model, np.concatenate([x_items, u_items]))
    z, proj_cache = project_fwd(model, h_pool)
    # interleave the two strong views of each sample for the contrastive term
    m = bx + bu
    view1 = np.concatenate([np.arange(bx), n_x + np.arange(bu)])
    view2 = np.concatenate([bx + np.arange(bx), n_x + bu + np.arange(bu)])
    pair_order = np.empty(2 * m, dtype=np.int64)
    pair_order[0::2], pair_order[1::2] = view1, view2

    mixed = mixematch(
        x_items, u_items, h_pool[:n_x], h_pool[n_x:],
        np.concatenate([targets_x, targets_x]), np.concatenate([targets_u, targets_u]),
        config.mix, rng, force_lambda=force_lambda,
    )
    h_in, enc_in_cache = encode_fwd(model, np.concatenate([mixed.x_inputs, mixed.u_inputs]))
    logits_in, clf_in_cache = classify_fwd(model, h_in)
    logits_emb, clf_emb_cache = classify_fwd(model, np.concatenate([mixed.x_embeddings, mixed.u_embeddings]))
    logits = {
        "x_in": logits_in[:n_x], "u_in": logits_in[n_x:],
        "x_emb": logits_emb[:n_x], "u_emb": logits_emb[n_x:],
    }
    res = semi_loss(logits, mixed, z[pair_order], config.loss, semi_epoch, config.ssl_temperature)

    grads = zero_grads(model)
    _, g_h_mixed = backward(model, clf_emb_cache, np.concatenate([res.grad_x_emb, res.grad_u_emb]), grads)
    g_h_pool = mixed.embedding_backward(g_h_mixed[:n_x], g_h_mixed[n_x:])
    _, g_h_in = backward(model, clf_in_cache, np.concatenate([res.grad_x_in, res.grad_u_in]), grads)
    backward(model, enc_in_cache, g_h_in, grads)
    g_z = np.zeros_like(z)
    g_z[pair_order] = res.grad_proj
    _, g_h_proj = backward(model, proj_cache, g_z, grads)
    backward(model, enc_cache, g_h_pool + g_h_proj, grads)
    return SemiStepResult(res.total, res.l_sup, res.l_unsup, res.l_self, grads)


def semi_epoch(model: Model, data, split: SplitResult, config: PipelineConfig, opt: OptState,
               sup_epoch: int, semi_index: int, force_lambda: float | None = None) -> dict:
    """One pass of MixEMatch training over the current clean (X) and noisy (U) sets.

    ``sup_epoch`` drives the learning-rate schedule, ``semi_index`` the
    unsupervised-weight ramp and the random streams.
    """
    data = _as_training(data)
    scale = feature_scale(data)
    w1, w2, s1, s2 = aug.epoch_views(data.features, config.augment, scale,
                                     derive_seed(config.seed, _SEMI_VIEWS), semi_index)
    X, U = split.clean_indices, split.noisy_indices
    y = one_hot(data.labels, data.n_classes)
    order_rng = substream(config.seed, _SEMI_ORDER, semi_index)
    mix_rng = substream(config.seed, _SEMI_MIX, semi_index)
    sums = {"total": 0.0, "l_sup": 0.0, "l_unsup": 0.0, "l_self": 0.0}
    batches = lockstep_batches(X.shape[0], U.shape[0], config.batch_size, order_rng)
    for bx, bu in batches:
        ix, iu = X[bx], U[bu]
        weak_x = (softmax(predict_logits(model, w1[ix])), softmax(predict_logits(model, w2[ix])))
        targets_x = refine_labels(y[ix], split.clean_probs[ix], weak_x)
        if iu.shape[0]:
            targets_u = guess_labels(model, w1[iu], w2[iu], config.mix.T)
        else:
            targets_u = np.zeros((0, data.n_classes))
        step = semi_step(model, (s1[ix], s2[ix]), (s1[iu], s2[iu]), targets_x, targets_u,
                         config, semi_index, mix_rng, force_lambda)
        for key in sums:
            val = getattr(step, key)
            if not math.isfinite(val):
                raise DivergenceError(f"{key} became {val}")
            sums[key] += val
        sgd_step(model, opt, step.grads, sup_epoch)
    return {k: v / max(len(batches), 1) for k, v in sums.items()}


# ---------------------------------------------------------------------------
# linear probe and baseline


def linear_probe(model: Model, data, epochs: int, lr: float = 0.1, batch_size: int = 64, seed: int = 0) -> Model:
    """Copy of ``model`` whose classifier is retrained with CE on frozen embeddings."""
    data = _as_training(data)
    probe = model.copy()
    probe.params["clf.W"] = init_model(data.dim, data.n_classes, derive_seed(seed, _PROBE), **_arch_kw(model)).params["clf.W"]
    probe.params["clf.b"] = np.zeros_like(probe.params["clf.b"])
    opt = OptState(lr_classifier=lr, lr_backbone=0.0, total_epochs=epochs, trainable=("clf",))
    h = encode(probe, data.features)
    targets = one_hot(data.labels, data.n_classes)
    for epoch in range(epochs):
        order = substream(seed, _PROBE, epoch).permutation(len(data))
        for idx in _batches(order, batch_size):
            logits, cache = classify_fwd(probe, h[idx])
            _, g = ce_loss(logits, targets[idx])
            grads, _ = backward(probe, cache, g)
            sgd_step(probe, opt, grads, epoch)
    return probe


def _arch_kw(model: Model) -> dict:
    a = model.arch
    return dict(hidden=a.hidden, d_h=a.d_h, proj_hidden=a.proj_hidden, d_z=a.d_z)


def new_model(data, config: PipelineConfig) -> Model:
    data = _as_training(data)
    return init_model(data.dim, data.n_classes, derive_seed(config.seed, _INIT))


def run_baseline(config: PipelineConfig, data, evaluator: Evaluator | None = None, metrics_stream=None) -> RunResult:
    """Supervised cross-entropy on every sample with the same model, optimizer and supervised epoch budget."""
    data = _as_training(data)
    rec = _Recorder(metrics_stream)
    model = new_model(data, config)
    opt = config.supervised_opt()
    active = np.arange(len(data))
    for epoch in range(config.supervised_epochs):
        loss = _supervised_epoch(model, data, active, opt, config, epoch, ce_loss, _WARM_VIEWS, _WARM_ORDER)
        rec.add(MetricsRecord(round=0, epoch=epoch, l_sup=loss,
                              test_acc=evaluator.test_accuracy(model) if evaluator else None))
    return RunResult(model, rec.history, [])


# ---------------------------------------------------------------------------
# full run


def run_full(config: PipelineConfig, data, evaluator: Evaluator | None = None,
             out_dir=None, metrics_stream=None, model: Model | None = None) -> RunResult:
    """Pretrain once, then ``rounds`` of {OOD selection, warmup (first round only), split, MixEMatch}.

    A checkpoint ``round_<i>.ckpt`` is written to ``out_dir`` after each
    round. If training diverges the last finite model is saved as
    ``diverged.ckpt`` and :class:`PipelineAbort` is raised; metrics written so
    far stay in the stream.
    """
    data = _as_training(data)
    out_dir = Path(out_dir) if out_dir is not None else None
    rec = _Recorder(metrics_stream)
    model = new_model(data, config) if model is None else model
    last_good = model.copy()
    rounds: list[RoundState] = []
    try:
        pretrain_ssl(model, data, config, rec)
        last_good = model.copy()
        ssl_model = model.copy()
        ssl_scores = knn_ood_scores(encode(model, data.features), min(config.k or default_k(len(data)), len(data) - 1))
        if config.rounds == 0:
            probe = linear_probe(model, data, config.probe_epochs, config.optim.lr_classifier, config.batch_size,
                                 derive_seed(config.seed, _PROBE))
            rec.add(MetricsRecord(
                round=0, epoch=0,
                test_acc=evaluator.test_accuracy(probe) if evaluator else None,
                ood_auroc=evaluator.ood_auroc(ssl_scores) if evaluator else None,
            ))
            if out_dir is not None:
                save_checkpoint(out_dir / "round_0.ckpt", probe, None, {"round": 0, "seed": config.seed})
            return RunResult(probe, rec.history, rounds, ssl_scores, ssl_model)

        opt = config.supervised_opt()
        mask = np.zeros(len(data), dtype=bool)
        sup_epoch = 0
        semi_index = 0
        for r in range(config.rounds):
            mask, scores = select_ood(model, data, config, r, mask)
            auroc = evaluator.ood_auroc(scores) if evaluator else None
            state = RoundState(r, mask.copy(), scores)
            if r == 0:
                warmup(model, data, mask, config, opt, rec, evaluator)
                sup_epoch += config.epochs_warmup
                last_good = model.copy()
            split = None
            for e in range(config.epochs_semi):
                if e % config.refresh_every == 0:
                    split = fit_split(model, data, mask, config)
                    quality = evaluator.selection(split) if evaluator else None
                    if state.split is None:
                        state.split = split
                comps = semi_epoch(model, data, split, config, opt, sup_epoch, semi_index)
                last_good = model.copy()
                rec.add(MetricsRecord(
                    round=r, epoch=sup_epoch,
                    l_sup=comps["l_sup"], l_unsup=comps["l_unsup"], l_self=comps["l_self"],
                    test_acc=evaluator.test_accuracy(model) if evaluator else None,
                    ood_auroc=auroc,
                    sel_p=quality.precision if quality else None,
                    sel_r=quality.recall if quality else None,
                ))
                sup_epoch += 1
                semi_index += 1
            if out_dir is not None:
                path = out_dir / f"round_{r}.ckpt"
                meta = {"round": r, "seed": config.seed, "sup_epoch": sup_epoch,
                        "ood_excluded": [int(i) for i in np.flatnonzero(mask)]}
                save_checkpoint(path, model, opt, meta)
                state.checkpoint = path
            rounds.append(state)
    except DivergenceError as exc:
        if out_dir is not None:
            save_checkpoint(out_dir / "diverged.ckpt", last_good, None, {"error": str(exc)})
        raise PipelineAbort(str(exc)) from exc
    return RunResult(model, rec.history, rounds, ssl_scores, ssl_model)
