"""Embedding dataset I/O, synthetic data with planted structure, partitions,
balanced batching and conditioning-logit priors.

File format: UTF-8 lines, one JSON object per line with keys ``speaker_id``,
``utterance_id``, ``vector`` and optionally ``sex`` ("m"|"f") and ``age``.
Trial lists are text lines ``<label 0|1> <enroll_utt_id> <test_utt_id>``.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field, asdict

import numpy as np

from .seeding import stream

log = logging.getLogger(__name__)

SEXES = ("m", "f")


@dataclass
class EmbeddingRecord:
    speaker_id: str
    utterance_id: str
    vector: np.ndarray
    sex: str | None = None
    age: float | None = None

    def to_json(self):
        obj = {"speaker_id": self.speaker_id, "utterance_id": self.utterance_id,
               "vector": [float(v) for v in self.vector]}
        if self.sex is not None:
            obj["sex"] = self.sex
        if self.age is not None:
            obj["age"] = float(self.age)
        return json.dumps(obj)


@dataclass
class TrialPair:
    target: bool
    enroll_utt: str
    test_utt: str


def atomic_write_text(path, text):
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_embeddings(records, path):
    atomic_write_text(path, "".join(r.to_json() + "\n" for r in records))


def read_embeddings(path):
    records = []
    seen = set()
    dim = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                spk = str(obj["speaker_id"])
                utt = str(obj["utterance_id"])
                vec = np.asarray(obj["vector"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if vec.ndim != 1 or (dim is not None and vec.size != dim):
                raise ValueError(f"{path}:{lineno}: inconsistent vector dimension")
            dim = vec.size
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"{path}:{lineno}: non-finite vector values")
            if utt in seen:
                raise ValueError(f"{path}:{lineno}: duplicate utterance_id {utt!r}")
            seen.add(utt)
            sex = obj.get("sex")
            if sex is not None and sex not in SEXES:
                raise ValueError(f"{path}:{lineno}: sex must be one of {SEXES}")
            age = obj.get("age")
            records.append(EmbeddingRecord(spk, utt, vec, sex,
                                           None if age is None else float(age)))
    return records


def write_trials(trials, path):
    atomic_write_text(path, "".join(
        f"{int(t.target)} {t.enroll_utt} {t.test_utt}\n" for t in trials))


def read_trials(path):
    trials = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected '<0|1> <enroll> <test>'")
            trials.append(TrialPair(parts[0] == "1", parts[1], parts[2]))
    return trials


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    num_speakers: int = 350
    utterances_per_speaker: int = 20
    dim: int = 192
    speaker_spread: float = 1.0
    utterance_noise: float = 0.3
    attribute_strength: float = 0.8
    attribute_kind: str = "sex"
    speaker_rank: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.speaker_spread <= 0 or self.utterance_noise <= 0:
            raise ValueError("spread and noise must be positive")
        if self.attribute_strength < 0:
            raise ValueError("attribute strength must be >= 0")
        if self.attribute_kind not in ("sex", "age"):
            raise ValueError("attribute_kind must be 'sex' or 'age'")
        if not 1 <= self.speaker_rank < self.dim:
            raise ValueError("speaker_rank must be in [1, dim)")


def generate_synthetic(config):
    """Speaker clusters with a planted attribute direction.

    Speaker means live in a random rank-``speaker_rank`` subspace orthogonal
    to the attribute direction, so the signal along that axis is exactly the
    planted one: +-c for sex, ((age-50)/50)*c for age. The low rank mirrors
    the manifold structure of real embeddings and keeps the direction
    recoverable from a desk-scale number of held-out speakers. Returns
    (records, ground_truth_dict); deterministic per seed.
    """
    rng = stream(config.seed, "synthetic")
    u = rng.standard_normal(config.dim)
    u /= np.linalg.norm(u)
    basis = rng.standard_normal((config.dim, config.speaker_rank))
    basis -= np.outer(u, u @ basis)
    basis, _ = np.linalg.qr(basis)
    records = []
    speaker_means = {}
    attributes = {}
    for s in range(config.num_speakers):
        spk = f"spk{s:04d}"
        mean = config.speaker_spread * (basis @ rng.standard_normal(config.speaker_rank))
        speaker_means[spk] = mean
        if config.attribute_kind == "sex":
            sex = SEXES[s % 2]
            coeff = config.attribute_strength * (1.0 if sex == "f" else -1.0)
            age = None
        else:
            sex = None
            age = float(rng.uniform(20.0, 80.0))
            coeff = config.attribute_strength * (age - 50.0) / 50.0
        attributes[spk] = sex if sex is not None else age
        for t in range(config.utterances_per_speaker):
            noise = config.utterance_noise * rng.standard_normal(config.dim)
            vec = mean + noise + coeff * u
            records.append(EmbeddingRecord(
                spk, f"{spk}_utt{t:03d}", vec, sex, age))
    ground_truth = {
        "seed": config.seed,
        "config": asdict(config),
        "attribute_direction": [float(v) for v in u],
        "speaker_means": {k: [float(v) for v in m] for k, m in speaker_means.items()},
        "attributes": attributes,
    }
    return records, ground_truth


# ---------------------------------------------------------------------------
# partitions and trials


@dataclass
class PartitionSpec:
    partitions: dict = field(default_factory=dict)
    trials: list = field(default_factory=list)

    def speakers(self, name):
        return {r.speaker_id for r in self.partitions[name]}

    def validate(self):
        names = list(self.partitions)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                overlap = self.speakers(a) & self.speakers(b)
                if overlap:
                    raise ValueError(
                        f"partitions {a!r} and {b!r} share speakers: "
                        f"{sorted(overlap)[:5]}")
        return self


def make_partitions(records, ratios, seed, targets_per_speaker=10):
    """Speaker-disjoint splits by seeded shuffle.

    ``ratios`` maps partition name to either a speaker count (int) or a
    fraction of speakers (float <= 1). A balanced trial list is generated
    from the ``test_att`` partition when present.
    """
    rng = stream(seed, "partitions")
    speakers = sorted({r.speaker_id for r in records})
    rng.shuffle(speakers)
    counts = {}
    for name, r in ratios.items():
        counts[name] = int(r) if r > 1 or isinstance(r, int) else int(round(r * len(speakers)))
    total = sum(counts.values())
    if total > len(speakers):
        raise ValueError(f"requested {total} speakers, only {len(speakers)} available")
    by_speaker = {}
    for r in records:
        by_speaker.setdefault(r.speaker_id, []).append(r)
    spec = PartitionSpec()
    cursor = 0
    for name, cnt in counts.items():
        chosen = speakers[cursor:cursor + cnt]
        cursor += cnt
        part = [r for s in chosen for r in by_speaker[s]]
        spec.partitions[name] = part
    spec.validate()
    if "test_att" in spec.partitions:
        spec.trials = make_trials(spec.partitions["test_att"],
                                  stream(seed, "trials"), targets_per_speaker)
    return spec


def make_trials(records, rng, targets_per_speaker=10):
    """Balanced target/non-target cosine-scoring trials from one partition."""
    by_speaker = {}
    for r in records:
        by_speaker.setdefault(r.speaker_id, []).append(r.utterance_id)
    speakers = sorted(by_speaker)
    trials = []
    for spk in speakers:
        utts = by_speaker[spk]
        if len(utts) < 2:
            continue
        for _ in range(targets_per_speaker):
            a, b = rng.choice(len(utts), size=2, replace=False)
            trials.append(TrialPair(True, utts[a], utts[b]))
    n_nontargets = len(trials)
    for _ in range(n_nontargets):
        i, j = rng.choice(len(speakers), size=2, replace=False)
        ua = by_speaker[speakers[i]]
        ub = by_speaker[speakers[j]]
        trials.append(TrialPair(False, ua[rng.integers(len(ua))],
                                ub[rng.integers(len(ub))]))
    return trials


# ---------------------------------------------------------------------------
# batching


def balanced_index_batches(labels, batch_size, rng):
    """Index batches balanced per discrete label.

    Each batch holds batch_size/num_classes samples per class; incomplete
    trailing batches are dropped.
    """
    labels = np.asarray(labels)
    n = len(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("balanced batching needs at least two classes")
    if batch_size % len(classes) != 0:
        raise ValueError(f"batch size {batch_size} not divisible by {len(classes)} classes")
    per_class = batch_size // len(classes)
    pools = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        pools.append(idx)
    n_batches = min(len(p) for p in pools) // per_class
    dropped = n - n_batches * batch_size
    if dropped:
        log.info("balanced batching drops %d of %d samples this epoch", dropped, n)
    batches = []
    for b in range(n_batches):
        parts = [p[b * per_class:(b + 1) * per_class] for p in pools]
        batch = np.concatenate(parts)
        rng.shuffle(batch)
        batches.append(batch)
    return batches


def shuffled_index_batches(n, batch_size, rng, drop_last=True):
    idx = rng.permutation(n)
    batches = [idx[i:i + batch_size] for i in range(0, n, batch_size)]
    if drop_last and batches and len(batches[-1]) < batch_size:
        if len(batches) > 1:
            batches = batches[:-1]
    return batches


def balanced_batches(records, batch_size, attribute, seed):
    """Record batches; balanced per class for discrete attributes."""
    rng = stream(seed, "batches")
    if attribute == "sex":
        labels = [r.sex for r in records]
        if any(l is None for l in labels):
            raise ValueError("records missing sex labels")
        for idx in balanced_index_batches(labels, batch_size, rng):
            yield [records[i] for i in idx]
    else:
        for idx in shuffled_index_batches(len(records), batch_size, rng):
            yield [records[i] for i in idx]


# ---------------------------------------------------------------------------
# conditioning priors


@dataclass
class LogitPrior:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or np.any(self.std < 0):
            raise ValueError("prior mean/std must align and std must be >= 0")

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]))


def fit_logit_prior(logits_fn, records):
    """Per-dimension mean/std of classifier logits over a training set."""
    logits = np.asarray(logits_fn(np.stack([r.vector for r in records])))
    return LogitPrior(logits.mean(axis=0), logits.std(axis=0))


def sample_conditioning(prior, strategy, seed, n):
    """Conditioning logits: the prior mean replicated, or Gaussian draws."""
    if strategy == "mean":
        return np.tile(prior.mean, (n, 1))
    if strategy == "gaussian":
        rng = stream(seed, "conditioning")
        return prior.mean + prior.std * rng.standard_normal((n, prior.mean.size))
    raise ValueError(f"unknown conditioning strategy {strategy!r}")
