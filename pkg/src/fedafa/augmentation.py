"""Adversarial feature augmentation for local minority classes.

Features of a local majority (source) class are pushed toward a minority
(target) class by repeated unit-norm steps along the negative gradient of the
target-class loss, taken with respect to the feature vector while the
classifier stays frozen. Perturbed features whose target confidence clears the
drop probability are kept together with the source features they came from.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import Dataset, balanced_indices
from .model import classifier_logits, extract_features

GENERATED = "generated"
SOURCE = "source"

# Rows whose gradient norm falls below this are treated as stationary.
_ZERO_GRAD = 1e-12


@dataclass(frozen=True)
class AugmentationConfig:
    p_d: float = 0.5
    steps: int = 10
    step_size: Optional[float] = None  # None: 0.1 * mean feature norm of the client
    step_scale: float = 0.1
    max_attempts_per_slot: int = 5

    def __post_init__(self):
        if not 0 < self.p_d < 1:
            raise ValueError(f"p_d must lie in (0, 1), got {self.p_d}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.max_attempts_per_slot < 1:
            raise ValueError("max_attempts_per_slot must be >= 1")


@dataclass
class GeneratedFeatureSet:
    features: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray
    provenance: np.ndarray  # GENERATED / SOURCE per row
    num_classes: int
    quota: dict[int, int] = field(default_factory=dict)
    accepted: dict[int, int] = field(default_factory=dict)
    attempts: dict[int, int] = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)

    @classmethod
    def empty(cls, feature_dim: int, num_classes: int) -> "GeneratedFeatureSet":
        return cls(np.zeros((0, feature_dim)), np.zeros(0, dtype=np.int64), np.zeros(0),
                   np.zeros(0, dtype=object), num_classes)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def generated_mask(self) -> np.ndarray:
        return self.provenance == GENERATED

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def underfilled(self) -> dict[int, int]:
        return {c: q - self.accepted.get(c, 0) for c, q in self.quota.items() if self.accepted.get(c, 0) < q}

    def write_debug(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def source_class_probs(target: int, class_counts: Sequence[int]) -> Optional[np.ndarray]:
    """Selection probabilities over source classes for one target class.

    Weight of class s is max(0, n_s - n_t) / n_k; returns None when no class
    outnumbers the target.
    """
    counts = np.asarray(class_counts, dtype=np.float64)
    w = np.maximum(counts - counts[target], 0.0) / counts.sum()
    w[target] = 0.0
    total = w.sum()
    if total <= 0:
        return None
    return w / total


def select_source_class(target: int, class_counts: Sequence[int], rng: np.random.Generator) -> Optional[int]:
    """Draw a source class for ``target``; None means no eligible source."""
    p = source_class_probs(target, class_counts)
    if p is None:
        return None
    return int(rng.choice(len(p), p=p))


def perturb_batch(source: np.ndarray, targets: np.ndarray, classifier: Sequence[np.ndarray], steps: int,
                  step_size: float, check_unit: bool = True):
    """Perturb each row of ``source`` toward its own target class.

    Rows are independent: the gradient of the summed per-row loss w.r.t. one
    row is that row's own gradient. Returns ``(moved, confidence,
    iterations_used, degenerate)``.
    """
    h = np.array(source, dtype=np.float64, copy=True)
    n = len(h)
    targets = np.asarray(targets, dtype=np.int64)
    C = np.shape(classifier[-1])[0]
    y = ad.one_hot(targets, C)
    active = np.ones(n, dtype=bool)
    used = np.zeros(n, dtype=np.int64)
    degenerate = np.zeros(n, dtype=bool)
    for i in range(steps):
        if not active.any():
            break
        g = ad.Graph()
        h_t = g.tensor(h[active], requires_grad=True)
        # loss is a mean over rows; scaling does not change the normalized direction
        loss = ad.softmax_cross_entropy(classifier_logits(h_t, classifier), y[active])
        grad = ad.input_gradient(loss, h_t)
        norms = np.linalg.norm(grad, axis=1)
        moving = norms > _ZERO_GRAD
        idx = np.flatnonzero(active)
        if i == 0:
            degenerate[idx[~moving]] = True
        active[idx[~moving]] = False
        if not moving.any():
            break
        delta = -grad[moving] / norms[moving, None]
        if check_unit:
            unit = np.linalg.norm(delta, axis=1)
            assert np.all(np.abs(unit - 1.0) < 1e-6), f"perturbation direction norm {unit}"
        rows = idx[moving]
        h[rows] += step_size * delta
        used[rows] += 1
    conf = ad.softmax(classifier_logits(h, classifier).value)[np.arange(n), targets]
    return h, conf, used, degenerate


def perturb_to_target(source: np.ndarray, target: int, classifier: Sequence[np.ndarray], config: AugmentationConfig,
                      step_size: Optional[float] = None):
    """Move one feature vector toward class ``target``.

    Returns ``(moved, confidence, degenerate)``. ``degenerate`` is set when the
    gradient vanishes at the first step, in which case ``moved`` equals ``source``.
    """
    step = step_size if step_size is not None else config.step_size
    if step is None:
        step = config.step_scale * float(np.linalg.norm(source))
    moved, conf, _, degenerate = perturb_batch(np.atleast_2d(source), np.array([target]), classifier,
                                               config.steps, step)
    return moved[0], float(conf[0]), bool(degenerate[0])


def mean_feature_norm(features: np.ndarray) -> float:
    return float(np.linalg.norm(features, axis=1).mean()) if len(features) else 0.0


def augment_client(dataset: Dataset, extractor: Sequence[np.ndarray], classifier: Sequence[np.ndarray],
                   config: AugmentationConfig, rng: np.random.Generator,
                   features: Optional[np.ndarray] = None, debug: bool = False) -> GeneratedFeatureSet:
    """Build the generated feature set for one client.

    Each locally present class below the local maximum gets a quota of
    ``n_max - n_t`` features. Candidates (source class, source sample) are
    drawn up front for the whole attempt budget, so the random sequence does
    not depend on ``p_d``; the first ``quota`` candidates whose confidence
    exceeds ``p_d`` are accepted, each together with its source feature.
    """
    if features is None:
        features = extract_features(dataset.features, extractor)
    feat_dim = features.shape[1]
    C = dataset.num_classes
    counts = dataset.class_counts()
    out = GeneratedFeatureSet.empty(feat_dim, C)
    present = np.flatnonzero(counts)
    if len(present) < 2 or counts[present].min() == counts.max():
        return out

    step = config.step_size if config.step_size is not None else config.step_scale * mean_feature_norm(features)
    members = {int(c): np.flatnonzero(dataset.labels == c) for c in present}
    n_max = int(counts.max())
    gen_h, gen_y, gen_c, src_h, src_y, src_c = [], [], [], [], [], []

    for t in present:
        t = int(t)
        quota = n_max - int(counts[t])
        if quota == 0:
            continue
        p = source_class_probs(t, counts)
        if p is None:
            continue
        budget = config.max_attempts_per_slot * quota
        src_cls = rng.choice(C, size=budget, p=p)
        pick = np.floor(rng.random(budget) * counts[src_cls]).astype(np.int64)
        src_idx = np.array([members[int(s)][k] for s, k in zip(src_cls, pick)], dtype=np.int64)

        out.quota[t] = quota
        taken = 0
        tried = 0
        # process candidates in budget order, stop as soon as the quota fills
        while taken < quota and tried < budget:
            chunk = slice(tried, min(budget, tried + max(quota - taken, 8)))
            rows = src_idx[chunk]
            moved, conf, used, _ = perturb_batch(features[rows], np.full(len(rows), t), classifier,
                                                 config.steps, step)
            for j in range(len(rows)):
                if taken >= quota:
                    break
                tried += 1
                ok = bool(conf[j] > config.p_d)
                if debug:
                    out.log.append({"target_class": t, "source_class": int(src_cls[chunk][j]),
                                    "iterations_used": int(used[j]), "confidence": float(conf[j]),
                                    "accepted": ok})
                if ok:
                    taken += 1
                    gen_h.append(moved[j])
                    gen_y.append(t)
                    gen_c.append(conf[j])
                    s = int(src_cls[chunk][j])
                    src_h.append(features[rows[j]])
                    src_y.append(s)
                    src_c.append(np.nan)
        out.accepted[t] = taken
        out.attempts[t] = tried

    if gen_h:
        out.features = np.vstack([np.array(gen_h), np.array(src_h)])
        out.labels = np.array(gen_y + src_y, dtype=np.int64)
        out.confidence = np.array(gen_c + src_c, dtype=np.float64)
        out.provenance = np.array([GENERATED] * len(gen_h) + [SOURCE] * len(src_h), dtype=object)
    return out


def balanced_feature_batches(gen: GeneratedFeatureSet, batch_size: int,
                             rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Class-balanced (features, labels) batches over the classes present in ``gen``."""
    if len(gen) == 0:
        raise ValueError("generated feature set is empty; fall back to the original-data loss")
    for idx in balanced_indices(gen.labels, batch_size, rng):
        yield gen.features[idx], gen.labels[idx]
