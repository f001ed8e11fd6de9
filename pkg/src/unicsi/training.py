"""Multi-rate reconstruction losses, joint training and slice-wise fine-tuning.

For a latent size ``lam`` the reconstruction loss is the batch mean of
``||h - g_lam(f(h) * e_lam)||^2``; the joint objective weights these losses
by ``w_lam`` and sums them. Fine-tuning then walks the latent sizes in
ascending order, training only the last-layer rows that feed latent entries
``lam_{i-1} .. lam_i - 1`` together with decoder ``lam_i``.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TrainingError, UsageError
from .models import AeBundle, LambdaSet, pad_latent, reconstruct
from .neural import (
    MaskVector,
    ModelParams,
    apply_mask,
    backward,
    forward,
    init_optimizer,
    optimizer_step,
    predict,
)
from .pipeline import DelaySample, DelaySet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs_joint: int = 100
    epochs_per_substep: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    lambda_set: LambdaSet | None = None
    fine_tune: bool = False
    probe_size: int = 1024

    def __post_init__(self):
        if self.epochs_joint < 0 or self.epochs_per_substep < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1 or self.probe_size < 1:
            raise ValueError("batch_size and probe_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class LossReport:
    per_lambda: dict[int, float]
    total: float


@dataclass
class HistoryRow:
    epoch: int
    phase: str
    target_lambda: int | None
    report: LossReport


@dataclass
class History:
    rows: list[HistoryRow] = field(default_factory=list)

    def append(self, epoch, phase, target, report):
        self.rows.append(HistoryRow(epoch, phase, target, report))

    def totals(self) -> list[float]:
        return [r.report.total for r in self.rows]

    def write_csv(self, path: str | Path) -> None:
        lams = sorted(self.rows[0].report.per_lambda) if self.rows else []
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "phase", "target_lambda", *[f"D_{l}" for l in lams], "total"])
            for r in self.rows:
                w.writerow([r.epoch, r.phase, "" if r.target_lambda is None else r.target_lambda,
                            *[repr(r.report.per_lambda[l]) for l in lams], repr(r.report.total)])


def _as_matrix(batch) -> np.ndarray:
    if isinstance(batch, DelaySet):
        return batch.data
    if isinstance(batch, (list, tuple)) and batch and isinstance(batch[0], DelaySample):
        return np.stack([s.data for s in batch])
    return np.atleast_2d(np.asarray(batch, dtype=float))


def masked_loss(bundle: AeBundle, batch, lam: int) -> float:
    """Batch mean of the squared reconstruction error at latent size ``lam``."""
    x = _as_matrix(batch)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    r = reconstruct(bundle, x, lam) - x
    return float(np.mean(np.sum(r * r, axis=1)))


def total_loss(bundle: AeBundle, batch, ls: LambdaSet | None = None) -> LossReport:
    ls = ls or bundle.lambda_set
    per = {lam: masked_loss(bundle, batch, lam) for lam in ls}
    total = math.fsum(w * per[lam] for lam, w in zip(ls.lambdas, ls.weights))
    return LossReport(per, total)


def masked_reconstruction_loss(encoder: ModelParams, decoder: ModelParams, batch,
                               mask: MaskVector) -> float:
    """Batch mean of ``||h - g(f(h) * e_lam)||^2`` for a bare encoder/decoder pair.

    Unlike :func:`masked_loss` this accepts any ``0 <= lam <= lam_max``.
    """
    x = _as_matrix(batch)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    r = predict(decoder, apply_mask(predict(encoder, x), mask)) - x
    return float(np.mean(np.sum(r * r, axis=1)))


def loss_and_grads(bundle: AeBundle, x: np.ndarray, weights: dict[int, float]):
    """Weighted loss terms and parameter gradients for one batch.

    Returns:
        ``(per_lambda_losses, grads)``; ``grads`` maps the names used by
        :meth:`AeBundle.named_models` to per-layer ``(dW, db)`` lists. Only
        models that the requested terms depend on appear.
    """
    n = x.shape[0]
    losses: dict[int, float] = {}
    grads: dict[str, list] = {}

    def decoder_term(lam, z_in, w):
        y, c = forward(bundle.decoders[lam], z_in)
        r = y - x
        losses[lam] = float(np.mean(np.sum(r * r, axis=1)))
        g, g_in = backward(bundle.decoders[lam], (2.0 * w / n) * r, c)
        grads[f"decoder_{lam}"] = g
        return g_in

    if bundle.approach == "naive":
        for lam, w in weights.items():
            enc = bundle.encoder_for(lam)
            z, c = forward(enc, x)
            g_z = decoder_term(lam, z, w)
            grads[f"encoder_{lam}"] = backward(enc, g_z, c)[0]
        return losses, grads

    enc = bundle.encoders[0]
    lmax = bundle.lambda_max
    z, enc_cache = forward(enc, x)

    if bundle.approach == "masked":
        g_z = np.zeros_like(z)
        for lam, w in weights.items():
            m = MaskVector(lam, lmax)
            g_z += apply_mask(decoder_term(lam, apply_mask(z, m), w), m)
        grads["encoder"] = backward(enc, g_z, enc_cache)[0]
        return losses, grads

    # saldr: latents[k] is the output after k chained FCBs
    latents, caches = [z], []
    for fcb in bundle.fcbs:
        zz, c = forward(fcb, latents[-1])
        latents.append(zz)
        caches.append(c)
    desc = bundle.lambda_set.lambdas[::-1]
    g_lat = [np.zeros_like(l) for l in latents]
    for lam, w in weights.items():
        k = desc.index(lam)
        g_lat[k] += decoder_term(lam, pad_latent(latents[k], lmax), w)[:, :lam]
    deepest = max(desc.index(lam) for lam in weights)
    for k in range(deepest, 0, -1):
        fcb = bundle.fcbs[k - 1]
        g, g_prev = backward(fcb, g_lat[k], caches[k - 1])
        grads[f"fcb_{fcb.input_size}_{fcb.output_size}"] = g
        g_lat[k - 1] += g_prev
    grads["encoder"] = backward(enc, g_lat[0], enc_cache)[0]
    return losses, grads


def _term_weights(bundle: AeBundle, ls: LambdaSet) -> dict[int, float]:
    if bundle.approach == "naive":
        # independent pairs, each minimizing its own D(lam)
        return {lam: 1.0 for lam in ls}
    return dict(zip(ls.lambdas, ls.weights))


def _check_finite(losses: dict[int, float], epoch: int, phase: str) -> None:
    bad = {lam: v for lam, v in losses.items() if not math.isfinite(v)}
    if bad:
        raise TrainingError(
            f"non-finite loss during {phase} epoch {epoch}: {bad}",
            {"epoch": epoch, "phase": phase, "losses": losses},
        )


def _probe(data: np.ndarray, cfg: TrainConfig, probe) -> np.ndarray:
    if probe is not None:
        return _as_matrix(probe)
    return data[: cfg.probe_size]


def train_joint(bundle: AeBundle, dataset, cfg: TrainConfig, probe=None,
                callback: Callable | None = None) -> tuple[AeBundle, History]:
    """Mini-batch Adam on the weighted multi-rate loss.

    ``history`` holds a :class:`LossReport` on the probe set before training
    and after every epoch. The bundle is updated in place and returned.
    """
    x = _as_matrix(dataset)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    ls = cfg.lambda_set or bundle.lambda_set
    if tuple(ls.lambdas) != bundle.lambda_set.lambdas:
        raise UsageError("config lambda set does not match the bundle")
    probe_x = _probe(x, cfg, probe)
    models = bundle.named_models()
    opts = {name: init_optimizer(m, cfg.learning_rate) for name, m in models.items()}
    weights = _term_weights(bundle, ls)
    rng = np.random.default_rng(cfg.seed)

    history = History()
    history.append(0, "joint", None, total_loss(bundle, probe_x, ls))
    step = 0
    for epoch in range(1, cfg.epochs_joint + 1):
        order = rng.permutation(x.shape[0])
        for start in range(0, len(order), cfg.batch_size):
            xb = x[order[start:start + cfg.batch_size]]
            losses, grads = loss_and_grads(bundle, xb, weights)
            _check_finite(losses, epoch, "joint")
            for name, g in grads.items():
                optimizer_step(models[name], g, opts[name])
            step += 1
            if callback is not None:
                callback("joint", None, step, bundle)
        report = total_loss(bundle, probe_x, ls)
        _check_finite(report.per_lambda, epoch, "joint")
        history.append(epoch, "joint", None, report)
        log.debug("joint epoch %d total %.6g", epoch, report.total)
    return bundle, history


def fine_tune(bundle: AeBundle, dataset, cfg: TrainConfig, probe=None,
              callback: Callable | None = None,
              history: History | None = None) -> tuple[AeBundle, History]:
    """Second training step for a jointly trained masked bundle.

    Sub-step ``i`` trains encoder last-layer rows ``lam_{i-1}..lam_i - 1``
    and decoder ``lam_i`` on ``D(lam_i)``; every other parameter is frozen.
    ``callback(phase, target_lambda, step, bundle)`` runs after each
    optimizer step.
    """
    if bundle.approach != "masked":
        raise UsageError(f"fine-tuning applies to the masked approach, not {bundle.approach!r}")
    x = _as_matrix(dataset)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    ls = bundle.lambda_set
    probe_x = _probe(x, cfg, probe)
    enc = bundle.encoders[0]
    last = enc.layers[-1]
    history = history if history is not None else History()
    epoch = history.rows[-1].epoch if history.rows else 0
    rng = np.random.default_rng([cfg.seed, 1])
    step = 0
    saved = [l.trainable.copy() for l in enc.layers]
    try:
        prev = 0
        for lam in ls:
            enc.freeze()
            last.trainable[prev:lam] = True
            dec = bundle.decoders[lam]
            opt_e = init_optimizer(enc, cfg.learning_rate)
            opt_d = init_optimizer(dec, cfg.learning_rate)
            for _ in range(cfg.epochs_per_substep):
                epoch += 1
                order = rng.permutation(x.shape[0])
                for start in range(0, len(order), cfg.batch_size):
                    xb = x[order[start:start + cfg.batch_size]]
                    losses, grads = loss_and_grads(bundle, xb, {lam: 1.0})
                    _check_finite(losses, epoch, "finetune")
                    optimizer_step(enc, grads["encoder"], opt_e)
                    optimizer_step(dec, grads[f"decoder_{lam}"], opt_d)
                    step += 1
                    if callback is not None:
                        callback("finetune", lam, step, bundle)
                history.append(epoch, "finetune", lam, total_loss(bundle, probe_x, ls))
            prev = lam
    finally:
        for layer, mask in zip(enc.layers, saved):
            layer.trainable = mask
    return bundle, history


def train(bundle: AeBundle, dataset, cfg: TrainConfig, probe=None) -> tuple[AeBundle, History]:
    """Joint training, followed by fine-tuning when ``cfg.fine_tune`` is set."""
    bundle, history = train_joint(bundle, dataset, cfg, probe)
    if cfg.fine_tune:
        bundle, history = fine_tune(bundle, dataset, cfg, probe, history=history)
    return bundle, history


def fit_autoencoder(encoder: ModelParams, decoder: ModelParams, x: np.ndarray,
                    epochs: int, batch_size: int = 64, learning_rate: float = 1e-3,
                    seed: int = 0) -> list[float]:
    """Plain single-rate autoencoder training; returns per-epoch mean batch loss."""
    opt_e = init_optimizer(encoder, learning_rate)
    opt_d = init_optimizer(decoder, learning_rate)
    rng = np.random.default_rng(seed)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(x.shape[0])
        acc = []
        for start in range(0, len(order), batch_size):
            xb = x[order[start:start + batch_size]]
            z, ce = forward(encoder, xb)
            y, cd = forward(decoder, z)
            r = y - xb
            loss = float(np.mean(np.sum(r * r, axis=1)))
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch}", {"epoch": epoch})
            gd, gz = backward(decoder, (2.0 / xb.shape[0]) * r, cd)
            ge, _ = backward(encoder, gz, ce)
            optimizer_step(decoder, gd, opt_d)
            optimizer_step(encoder, ge, opt_e)
            acc.append(loss)
        curve.append(float(np.mean(acc)))
    return curve


def autoencoder_reconstruct(encoder: ModelParams, decoder: ModelParams, x: np.ndarray) -> np.ndarray:
    return predict(decoder, predict(encoder, x))
