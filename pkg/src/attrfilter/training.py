"""Training loops: setup-phase classifiers/speaker head and the filter itself."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import mi as mi_est
from .autodiff import Tensor
from .data import balanced_index_batches, shuffled_index_batches
from .model import (SEX_TO_INDEX, AttributeClassifier, FilterModel, SpeakerHead,
                    loss_adversarial, loss_diversity, loss_reconstruction, loss_total)
from .nn import Adam, OneCycleSchedule
from .seeding import stream

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    """A loss became non-finite during training."""


@dataclass
class ClassifierSchedule:
    epochs: int = 20
    batch_size: int = 64
    start_lr: float = 1e-5
    max_lr: float = 5e-5
    dropout: float = 0.3
    end_lr: float | None = None


@dataclass
class FilterSchedule:
    epochs: int = 100
    batch_size: int = 128
    start_lr: float = 8e-4
    max_lr: float = 0.01
    end_lr: float | None = None


def _attribute_labels(records, attribute_kind):
    if attribute_kind == "sex":
        labels = [r.sex for r in records]
        if any(l is None for l in labels):
            raise ValueError("records are missing sex labels")
        return np.array([SEX_TO_INDEX[l] for l in labels], dtype=np.int64)
    ages = [r.age for r in records]
    if any(a is None for a in ages):
        raise ValueError("records are missing age labels")
    return np.array(ages, dtype=np.float64)


def train_attribute_classifier(vectors, labels, attribute_kind, schedule, seed,
                               hidden=(128, 128)):
    """Train the 2x128 attribute classifier/regressor on plain arrays.

    Continuous labels are standardised on this training set; the statistics
    are stored on the classifier for destandardised predictions.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    if len(vectors) != len(labels):
        raise ValueError("vector/label count mismatch")
    clf = AttributeClassifier(vectors.shape[1], attribute_kind,
                              stream(seed, "classifier-init"),
                              dropout=schedule.dropout, hidden=hidden)
    if attribute_kind == "age":
        clf.label_mean = float(labels.mean())
        clf.label_std = float(labels.std()) or 1.0
        targets = (labels - clf.label_mean) / clf.label_std
    else:
        targets = labels.astype(np.int64)

    batch_rng = stream(seed, "classifier-batches")
    drop_rng = stream(seed, "classifier-dropout")
    optimizer = Adam(clf.parameters())
    n = len(vectors)
    steps_per_epoch = max(1, len(shuffled_index_batches(n, schedule.batch_size,
                                                        np.random.default_rng(0))))
    sched = OneCycleSchedule(schedule.start_lr, schedule.max_lr,
                             schedule.epochs * steps_per_epoch,
                             end_lr=schedule.end_lr)
    step = 0
    for _ in range(schedule.epochs):
        for idx in shuffled_index_batches(n, schedule.batch_size, batch_rng):
            x = Tensor(vectors[idx])
            pred = clf.forward(x, training=True, rng=drop_rng)
            if attribute_kind == "sex":
                loss = ad.cross_entropy(pred, targets[idx])
            else:
                loss = ad.mse(pred, targets[idx].reshape(-1, 1))
            if not np.isfinite(loss.values):
                raise NumericalFailure("classifier loss is not finite")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(sched.lr(step))
            step += 1
    return clf


def train_speaker_head(records, feature_dim, schedule, seed,
                       margin=0.2, scale=30.0):
    """Pretrain the AAM speaker head on original embeddings, then freeze it."""
    speakers = sorted({r.speaker_id for r in records})
    head = SpeakerHead(speakers, feature_dim, stream(seed, "speaker-head-init"))
    vectors = np.stack([r.vector for r in records])
    spk_idx = head.speaker_indices([r.speaker_id for r in records])
    optimizer = Adam([head.weight])
    batch_rng = stream(seed, "speaker-head-batches")
    n = len(records)
    steps_per_epoch = max(1, len(shuffled_index_batches(n, schedule.batch_size,
                                                        np.random.default_rng(0))))
    sched = OneCycleSchedule(schedule.start_lr, schedule.max_lr,
                             schedule.epochs * steps_per_epoch,
                             end_lr=schedule.end_lr)
    step = 0
    for _ in range(schedule.epochs):
        for idx in shuffled_index_batches(n, schedule.batch_size, batch_rng):
            loss = head.loss_aam(Tensor(vectors[idx]), spk_idx[idx], margin, scale)
            if not np.isfinite(loss.values):
                raise NumericalFailure("speaker head loss is not finite")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(sched.lr(step))
            head.renormalize()
            step += 1
    return head.freeze()


def train_filter(model, records, external_classifier, schedule, seed):
    """Train the filter on embedding records with the configured losses.

    The decoder is conditioned on the external classifier's logits for each
    original input. Discrete-attribute batches are class balanced. Returns
    the per-epoch history of loss components.
    """
    cfg = model.config
    if model.speaker_head is None:
        raise ValueError("attach a pretrained speaker head before training")
    vectors = np.stack([r.vector for r in records])
    spk_idx = model.speaker_head.speaker_indices([r.speaker_id for r in records])
    raw_labels = _attribute_labels(records, cfg.attribute_kind)
    if cfg.attribute_kind == "age":
        model.age_mean = float(raw_labels.mean())
        model.age_std = float(raw_labels.std()) or 1.0
        attr_labels = (raw_labels - model.age_mean) / model.age_std
    else:
        attr_labels = raw_labels
    ext_logits = external_classifier.logits(vectors)

    weights = {"reconstruction": cfg.alpha, "diversity": cfg.beta,
               "aam": cfg.gamma, "adversarial": cfg.delta, "mi": cfg.epsilon}
    optimizer = Adam(model.parameters())
    batch_rng = stream(seed, "filter-batches")
    drop_rng = stream(seed, "filter-dropout")
    gumbel_rng = stream(seed, "filter-gumbel")

    def epoch_batches(rng):
        if cfg.attribute_kind == "sex":
            return balanced_index_batches(attr_labels, schedule.batch_size, rng)
        return shuffled_index_batches(len(records), schedule.batch_size, rng)

    steps_per_epoch = len(epoch_batches(np.random.default_rng(0)))
    if steps_per_epoch == 0:
        raise ValueError("dataset too small for one batch")
    sched = OneCycleSchedule(schedule.start_lr, schedule.max_lr,
                             schedule.epochs * steps_per_epoch,
                             end_lr=schedule.end_lr)
    history = []
    step = 0
    for epoch in range(schedule.epochs):
        sums = {}
        batches = epoch_batches(batch_rng)
        for idx in batches:
            x_vals = vectors[idx]
            x = Tensor(x_vals)
            z = model.encode(x, training=True, rng=drop_rng)
            z_q, soft = model.quantize(z, training=True, rng=gumbel_rng)
            x_hat = model.condition_and_decode(z_q, Tensor(ext_logits[idx]),
                                               training=True, rng=drop_rng)
            components = {
                "reconstruction": loss_reconstruction(x_vals, x_hat),
                "diversity": loss_diversity(soft),
                "aam": model.speaker_head.loss_aam(x_hat, spk_idx[idx],
                                                   cfg.aam_margin, cfg.aam_scale),
            }
            if cfg.delta != 0.0:
                components["adversarial"] = loss_adversarial(
                    z_q, attr_labels[idx], model.adversarial, cfg.attribute_kind,
                    cfg.grl_lambda, training=True)
            if cfg.epsilon != 0.0:
                if cfg.attribute_kind == "sex":
                    components["mi"] = mi_est.mi_discrete_loss(
                        z_q, attr_labels[idx], cfg.mi_neighbors)
                else:
                    components["mi"] = mi_est.mi_continuous_loss(
                        z_q, attr_labels[idx].reshape(-1, 1), cfg.mi_neighbors)
            total = loss_total(components, weights)
            if not np.isfinite(total.values):
                raise NumericalFailure(f"total loss is not finite at step {step}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step(sched.lr(step))
            step += 1
            for name, t in components.items():
                sums[name] = sums.get(name, 0.0) + float(t.values)
            sums["total"] = sums.get("total", 0.0) + float(total.values)
        history.append({"epoch": epoch,
                        **{k: v / len(batches) for k, v in sums.items()}})
        log.info("epoch %d: %s", epoch,
                 " ".join(f"{k}={v / len(batches):.4f}" for k, v in sums.items()))
    return history
