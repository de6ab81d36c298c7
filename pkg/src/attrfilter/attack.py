"""Ignorant/informed attacker simulation with repeated-seed aggregation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .metrics import auprc, ccc, pcc, uar, zebra
from .model import SEX_TO_INDEX
from .training import ClassifierSchedule, train_attribute_classifier

REPORT_SCHEMA_VERSION = 1


@dataclass
class AttackerConfig:
    attribute_kind: str = "sex"
    epochs: int = 20
    batch_size: int = 64
    start_lr: float = 1e-5
    max_lr: float = 5e-5
    dropout: float = 0.3
    num_repeats: int = 25
    hidden: tuple = (128, 128)

    def __post_init__(self):
        if self.num_repeats < 1:
            raise ValueError("num_repeats must be >= 1")
        self.hidden = tuple(self.hidden)

    def schedule(self):
        return ClassifierSchedule(self.epochs, self.batch_size, self.start_lr,
                                  self.max_lr, self.dropout)


@dataclass
class AttackData:
    """Embeddings and labels for one attack evaluation.

    ``train_original`` feeds the ignorant attacker, ``train_transformed``
    (same rows, filtered) the informed one; both are tested on
    ``test_vectors`` which carry the same conditioning as the informed
    attacker's training data.
    """
    train_original: np.ndarray
    train_transformed: np.ndarray
    train_labels: list
    test_vectors: np.ndarray
    test_labels: list


def encode_labels(labels, attribute_kind):
    if attribute_kind == "sex":
        return np.array([SEX_TO_INDEX[l] for l in labels], dtype=np.int64)
    return np.asarray(labels, dtype=np.float64)


def train_attacker(config, vectors, labels, seed):
    """One attribute classifier under the attacker schedule, deterministic per seed."""
    return train_attribute_classifier(
        np.asarray(vectors, dtype=np.float64),
        encode_labels(labels, config.attribute_kind),
        config.attribute_kind, config.schedule(), seed, hidden=config.hidden)


def evaluate_attacker(clf, vectors, labels):
    """Metric dict for one trained attacker on a test set."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if clf.attribute_kind == "sex":
        y = encode_labels(labels, "sex")
        preds = clf.predict_labels(vectors)
        scores = clf.scores(vectors)
        d_ece, llr_max = zebra(scores, y == 1)
        return {"uar": uar(y, preds), "auprc": auprc(scores, y == 1),
                "d_ece": d_ece, "llr_max": llr_max}
    y = encode_labels(labels, "age")
    preds = clf.predict_values(vectors)
    return {"ccc": ccc(preds, y), "pcc": pcc(preds, y)}


@dataclass
class PrivacyReport:
    attribute_kind: str
    conditioning: str
    num_repeats: int
    results: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def add(self, attacker_kind, runs):
        """Aggregate a list of per-repeat metric dicts, ordered by seed."""
        agg = {}
        for metric in runs[0]:
            values = [r[metric] for r in runs]
            agg[metric] = {"mean": float(np.mean(values)),
                           "std": float(np.std(values)),
                           "values": [float(v) for v in values]}
        self.results[attacker_kind] = agg

    def to_json(self):
        return json.dumps({
            "schema_version": self.schema_version,
            "attribute_kind": self.attribute_kind,
            "conditioning": self.conditioning,
            "num_repeats": self.num_repeats,
            "results": self.results,
        }, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        if obj["schema_version"] != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {obj['schema_version']}")
        return cls(obj["attribute_kind"], obj["conditioning"],
                   obj["num_repeats"], obj["results"])


def run_attack_suite(data, config, seed, attackers=("ignorant", "informed"),
                     conditioning="mean"):
    """Train num_repeats attackers of each kind and aggregate their metrics."""
    if len(data.train_original) != len(data.train_labels):
        raise ValueError("train label/embedding count mismatch")
    report = PrivacyReport(config.attribute_kind, conditioning, config.num_repeats)
    train_sets = {"ignorant": data.train_original,
                  "informed": data.train_transformed}
    for kind in attackers:
        runs = []
        for r in range(config.num_repeats):
            clf = train_attacker(config, train_sets[kind], data.train_labels,
                                 seed + r)
            runs.append(evaluate_attacker(clf, data.test_vectors, data.test_labels))
        report.add(kind, runs)
    return report
