"""Two-phase adversarial training with the evolving loss schedule, a
first-order meta-learning step per epoch, early stopping and checkpointing.

Loss routing: decoder 1 parameters are updated from L1 only, decoder 2
parameters from L2 only, and every shared parameter (encoders, embeddings)
receives the sum of both contributions.
"""

from __future__ import annotations

import logging
import sys
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, Tensor
from .errors import NonFiniteLoss, ShapeMismatch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 0.01
    meta_lr: float = 0.02
    epsilon: float = 1.05
    seed: int = 0
    use_self_condition: bool = True
    use_adversarial: bool = True
    use_maml: bool = True
    early_stop_patience: int = 3
    n_semantics: str = "epoch"      # or "iteration"
    weight_decay: float = 1e-5
    lr_decay: float = 0.5
    lr_decay_every_epochs: int = 1

    def __post_init__(self):
        if self.epsilon <= 1:
            raise ValueError("epsilon must be > 1 so the schedule decays")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.n_semantics not in ("epoch", "iteration"):
            raise ValueError(f"unknown n_semantics {self.n_semantics!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    mean_l1: float
    mean_l2: float
    val_score: float
    lr: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)   # list[EpochRecord]
    stop_reason: str = ""
    best_epoch: int = 0

    def to_dict(self, include_timing=True):
        # timing is excluded from on-disk artifacts so reruns with the same
        # seed produce byte-identical files
        recs = []
        for r in self.epochs:
            d = asdict(r)
            if not include_timing:
                d.pop("seconds")
            recs.append(d)
        return {"epochs": recs, "stop_reason": self.stop_reason,
                "best_epoch": self.best_epoch}


# -- losses -------------------------------------------------------------------


def loss_phase1(O1, O2, W):
    """Per-decoder reconstruction loss: Frobenius norm of the deviation over
    the window, averaged over the batch."""
    if O1.shape != W.shape or O2.shape != W.shape:
        raise ShapeMismatch("reconstruction/window shapes differ")
    return _mean_norm(O1 - W), _mean_norm(O2 - W)


def loss_adversarial(O2_hat, W):
    """The conditioned-reconstruction deviation, signed for the two sides of
    the min-max game: (+d for decoder 1, -d for decoder 2)."""
    if O2_hat.shape != W.shape:
        raise ShapeMismatch("reconstruction/window shapes differ")
    d = _mean_norm(O2_hat - W)
    return d, -d


def _mean_norm(diff):
    norms = ad.frobenius_norm(diff)
    if norms.ndim == 0:
        return norms
    return norms.mean()


def schedule_weight(n, eps):
    """eps^-n, the weight on the reconstruction term at schedule index n."""
    return float(eps) ** (-n)


def loss_combined(phase1, adv, n, eps, use_adversarial=True):
    """Weighted combination of reconstruction and adversarial terms.  With the
    adversarial toggle off the losses are the pure reconstruction terms."""
    p1, p2 = phase1
    if not use_adversarial:
        return p1, p2
    a1, a2 = adv
    w = schedule_weight(n, eps)
    L1 = p1 * w + a1 * (1.0 - w)
    L2 = p2 * w + a2 * (1.0 - w)
    return L1, L2


# -- gradient routing ---------------------------------------------------------


def _partition(path):
    if path.startswith("decoder1."):
        return "d1"
    if path.startswith("decoder2."):
        return "d2"
    return "shared"


def partitioned_grads(model, L1, L2):
    """Gradients with decoder1 driven by L1, decoder2 by L2, and shared
    parameters by L1 + L2.  Returns {path: array}."""
    store = model.params
    store.zero_grads()
    L1.backward()
    g1 = store.grads()
    store.zero_grads()
    L2.backward()
    g2 = store.grads()
    store.zero_grads()
    out = {}
    for path, p in store.items():
        a = g1[path] if g1[path] is not None else np.zeros_like(p.data)
        b = g2[path] if g2[path] is not None else np.zeros_like(p.data)
        part = _partition(path)
        if part == "d1":
            out[path] = a
        elif part == "d2":
            out[path] = b
        else:
            out[path] = a + b
    return out


def batch_groups(batch, batch_size):
    """Chunk a WindowBatch into (windows, contexts) groups whose contexts all
    share one length, so each group stacks into a dense array."""
    groups = []
    i = 0
    n = len(batch)
    while i < n:
        L = batch.contexts[i].shape[0]
        j = i
        while j < n and j - i < batch_size and batch.contexts[j].shape[0] == L:
            j += 1
        groups.append((batch.windows[i:j], np.stack(batch.contexts[i:j]),
                       batch.indices[i:j]))
        i = j
    return groups


def _batch_losses(model, W, C, cfg, n, training, rng):
    out = model.forward_two_phase(W, C, training=training, rng=rng,
                                  self_condition=cfg.use_self_condition)
    Wt = Tensor(W)
    phase1 = loss_phase1(out.O1, out.O2, Wt)
    adv = loss_adversarial(out.O2_hat, Wt)
    return loss_combined(phase1, adv, n, cfg.epsilon, cfg.use_adversarial)


# -- epoch / meta steps -------------------------------------------------------


def train_epoch(model, groups, cfg, opt, n_start, epoch, rng):
    """One pass over the batch groups.  Returns (mean L1, mean L2, next n)."""
    l1_sum = l2_sum = 0.0
    count = 0
    n = n_start
    for b, (W, C, _) in enumerate(groups):
        L1, L2 = _batch_losses(model, W, C, cfg, n, training=True, rng=rng)
        v1, v2 = float(L1.data), float(L2.data)
        if not (np.isfinite(v1) and np.isfinite(v2)):
            raise NonFiniteLoss(
                f"non-finite loss at epoch {epoch}, batch {b}: L1={v1}, L2={v2}",
                epoch=epoch, batch=b)
        grads = partitioned_grads(model, L1, L2)
        for path, p in model.params.items():
            p.grad = grads[path]
        opt.step()
        opt.zero_grad()
        l1_sum += v1 * W.shape[0]
        l2_sum += v2 * W.shape[0]
        count += W.shape[0]
        if cfg.n_semantics == "iteration":
            n += 1
    if cfg.n_semantics == "epoch":
        n += 1
    return l1_sum / count, l2_sum / count, n


def meta_update(store, grad_fn, alpha, beta):
    """First-order meta step: inner update theta' = theta - alpha*g(theta),
    outer update theta <- theta - beta*g(theta'), approximating the gradient
    at theta by the gradient evaluated at theta'."""
    theta = store.snapshot()
    g = grad_fn()
    inner = {k: theta[k] - alpha * g[k] for k in theta}
    store.load(inner)
    g_adapted = grad_fn()
    store.load({k: theta[k] - beta * g_adapted[k] for k in theta})


def maml_step(model, batch_group, cfg, n):
    """Meta-learn on one random batch using the combined loss at the current
    schedule index.  No-op when the toggle is off or meta_lr is zero."""
    if not cfg.use_maml or cfg.meta_lr == 0.0:
        return
    W, C, _ = batch_group

    def grad_fn():
        rng = np.random.default_rng(cfg.seed + 104729)
        L1, L2 = _batch_losses(model, W, C, cfg, n, training=True, rng=rng)
        return partitioned_grads(model, L1, L2)

    meta_update(model.params, grad_fn, cfg.lr, cfg.meta_lr)


def validation_score(model, val_batch, cfg, n):
    """Mean combined loss over the validation windows, dropout off."""
    if len(val_batch) == 0:
        return float("nan")
    total = 0.0
    count = 0
    with ad.no_grad():
        for W, C, _ in batch_groups(val_batch, cfg.batch_size):
            L1, L2 = _batch_losses(model, W, C, cfg, n, training=False, rng=None)
            total += 0.5 * (float(L1.data) + float(L2.data)) * W.shape[0]
            count += W.shape[0]
    return total / count


def fit(model, train_batch, val_batch, cfg, progress=True):
    """Run the full training loop; leaves the model at its best-epoch weights
    and returns the per-epoch report."""
    if len(train_batch) == 0:
        raise ValueError("training batch is empty")
    groups = batch_groups(train_batch, cfg.batch_size)
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                scheduler_decay=cfg.lr_decay,
                scheduler_interval=len(groups) * cfg.lr_decay_every_epochs)
    report = TrainReport()
    rng = np.random.default_rng(cfg.seed)
    meta_rng = np.random.default_rng(cfg.seed + 1)
    have_val = len(val_batch) > 0
    best_score = float("inf")
    best_params = model.params.snapshot()
    best_epoch = 0
    since_improve = 0
    n = 1
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        mean_l1, mean_l2, n_next = train_epoch(model, groups, cfg, opt, n, epoch, rng)
        if cfg.use_maml:
            pick = meta_rng.integers(len(groups))
            maml_step(model, groups[pick], cfg, n)
        n = n_next
        val = validation_score(model, val_batch, cfg, n) if have_val else float("nan")
        secs = time.perf_counter() - t0
        report.epochs.append(EpochRecord(epoch=epoch, mean_l1=mean_l1,
                                         mean_l2=mean_l2, val_score=val,
                                         lr=opt.lr, seconds=secs))
        if progress:
            print(f"epoch {epoch} | L1 {mean_l1:.6f} | L2 {mean_l2:.6f} | "
                  f"val {val:.6f} | lr {opt.lr:.6g} | secs {secs:.2f}",
                  file=sys.stderr)
        track = val if have_val else mean_l1
        if track < best_score:
            best_score = track
            best_params = model.params.snapshot()
            best_epoch = epoch
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= cfg.early_stop_patience:
                report.stop_reason = (
                    f"early stop: no improvement for {since_improve} epochs")
                break
    else:
        report.stop_reason = "completed all epochs"
    report.best_epoch = best_epoch
    model.params.load(best_params)
    return report
