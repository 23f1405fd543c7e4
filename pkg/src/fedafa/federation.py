"""Federated rounds, FedAvg aggregation and the personalization methods.

Every random decision draws from a private stream keyed by
``(seed, purpose, client, round)`` so results do not depend on the order in
which clients are processed, serially or in a thread pool.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .augmentation import (AugmentationConfig, GeneratedFeatureSet, augment_client,
                           balanced_feature_batches, mean_feature_norm)
from .data import Dataset, balanced_indices, random_oversample, shuffled_batches
from .model import (OptimizerState, SplitModel, classifier_logits, extract_features,
                    loss_and_grads, sgd_step)

log = logging.getLogger(__name__)

# rng stream purposes
SAMPLE_CLIENTS, LOCAL_TRAIN, FINETUNE, OVERSAMPLE, AUGMENT, GEN_BATCHES, ORI_BATCHES = range(1, 8)


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass
class ClientState:
    client_id: int
    train: Dataset
    test: Dataset

    @property
    def n_k(self) -> int:
        return len(self.train)

    @property
    def histogram(self) -> np.ndarray:
        return self.train.class_counts()


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def state(self) -> OptimizerState:
        return OptimizerState(self.lr, self.momentum, self.weight_decay)


@dataclass
class GlobalState:
    round: int
    model: SplitModel


def _train_steps(params: list[np.ndarray], split: int, dataset: Dataset,
                 batches: Iterable[np.ndarray], sgd: SGDConfig, train_extractor: bool = True) -> None:
    state = sgd.state()
    trainable = params if train_extractor else params[split:]
    for idx in batches:
        _, grads = loss_and_grads(params, split, dataset.features[idx], dataset.labels[idx],
                                  train_extractor=train_extractor)
        sgd_step(trainable, grads, state)


def _epochs(n: int, batch_size: int, epochs: int, rng: np.random.Generator):
    for _ in range(epochs):
        yield from shuffled_batches(n, batch_size, rng)


def client_update(client: ClientState, global_model: SplitModel, local_epochs: int, batch_size: int,
                  sgd: SGDConfig, rng: np.random.Generator):
    """Local FedAvg training on the raw shard. Returns ``(params, n_k)`` or None for an empty shard."""
    if client.n_k == 0:
        log.warning("client %d has an empty shard; skipped", client.client_id)
        return None
    params = [p.copy() for p in global_model.params]
    _train_steps(params, global_model.split, client.train,
                 _epochs(client.n_k, batch_size, local_epochs, rng), sgd)
    return params, client.n_k


def aggregate(updates: Sequence[tuple[Sequence[np.ndarray], int]]) -> list[np.ndarray]:
    """Sample-weighted average: sum_k n_k * params_k / sum_k n_k."""
    if not updates:
        raise ValueError("aggregate needs at least one update")
    shapes = [np.shape(p) for p in updates[0][0]]
    for params, _ in updates[1:]:
        if [np.shape(p) for p in params] != shapes:
            raise ValueError(f"parameter shape mismatch: {[np.shape(p) for p in params]} vs {shapes}")
    total = float(sum(n for _, n in updates))
    if total <= 0:
        raise ValueError("aggregate needs a positive total sample count")
    out = []
    for i in range(len(shapes)):
        acc = np.zeros(shapes[i])
        for params, n in updates:
            acc += n * np.asarray(params[i], dtype=np.float64)
        out.append(acc / total)
    return out


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_round(state: GlobalState, clients: Sequence[ClientState], clients_per_round: int,
              local_epochs: int, batch_size: int, sgd: SGDConfig, seed: int,
              workers: int = 1) -> tuple[GlobalState, list[int]]:
    """One FedAvg round: sample clients without replacement, train, aggregate."""
    r = state.round + 1
    m = min(clients_per_round, len(clients))
    chosen = sorted(stream(seed, SAMPLE_CLIENTS, r).choice(len(clients), size=m, replace=False).tolist())
    snapshot = state.model

    def work(k):
        c = clients[k]
        return client_update(c, snapshot, local_epochs, batch_size, sgd,
                             stream(seed, LOCAL_TRAIN, c.client_id, r))

    updates = [up for up in _map(work, chosen, workers) if up is not None]
    if not updates:
        return GlobalState(r, snapshot), chosen
    model = SplitModel(snapshot.layer_sizes, snapshot.boundary_index, aggregate(updates))
    return GlobalState(r, model), chosen


# -- personalization ------------------------------------------------------------

def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.ceil(n / batch_size))


def _finetune(model: SplitModel, dataset: Dataset, steps: int, batch_size: int, sgd: SGDConfig,
              rng: np.random.Generator) -> SplitModel:
    out = model.copy()

    def batches():
        done = 0
        while done < steps:
            for idx in shuffled_batches(len(dataset), batch_size, rng):
                if done == steps:
                    return
                done += 1
                yield idx

    if steps > 0 and len(dataset) > 0:
        _train_steps(out.params, out.split, dataset, batches(), sgd)
    return out


def personalize_fedavg_ft(client: ClientState, global_model: SplitModel, sgd: SGDConfig, steps: int,
                          batch_size: int, seed: int) -> SplitModel:
    """Fine-tune the whole global model on the client's raw shard for ``steps`` SGD steps."""
    return _finetune(global_model, client.train, steps, batch_size, sgd,
                     stream(seed, FINETUNE, client.client_id))


def personalize_ros(client: ClientState, global_model: SplitModel, sgd: SGDConfig, epochs: int,
                    batch_size: int, seed: int) -> SplitModel:
    """Randomly oversample local minority classes to the local maximum, then fine-tune."""
    data = random_oversample(client.train, stream(seed, OVERSAMPLE, client.client_id))
    steps = epochs * steps_per_epoch(len(data), batch_size)
    return _finetune(global_model, data, steps, batch_size, sgd, stream(seed, FINETUNE, client.client_id))


def personalize_local(client: ClientState, init: SplitModel, sgd: SGDConfig, epochs: int,
                      batch_size: int, seed: int) -> SplitModel:
    """Local-only baseline: train from ``init`` on the raw shard, no communication."""
    steps = epochs * steps_per_epoch(client.n_k, batch_size)
    return _finetune(init, client.train, steps, batch_size, sgd, stream(seed, FINETUNE, client.client_id))


@dataclass
class PersonalizationInfo:
    generated: list[int] = field(default_factory=list)   # generated features per epoch
    underfilled: list[dict] = field(default_factory=list)
    fallback_epochs: list[int] = field(default_factory=list)
    steps: int = 0


def afa_loss(head, gen_batch, ori_batch, lam: float) -> ad.Tensor:
    """``lam * generated_loss + (1 - lam) * original_loss``; the original loss alone
    when ``gen_batch`` is None. Both batches are (features, labels)."""
    h_ori, y_ori = ori_batch
    C = head[-1].shape[0]
    original = ad.softmax_cross_entropy(classifier_logits(ad.Tensor(h_ori), head), ad.one_hot(y_ori, C))
    if gen_batch is None:
        return original
    h_gen, y_gen = gen_batch
    generated = ad.softmax_cross_entropy(classifier_logits(ad.Tensor(h_gen), head), ad.one_hot(y_gen, C))
    return ad.add(ad.scale(generated, lam), ad.scale(original, 1.0 - lam))


def personalize_fedafa(client: ClientState, base_model: SplitModel, aug: AugmentationConfig, lam: float,
                       epochs: int, batch_size: int, sgd: SGDConfig, seed: int,
                       augment: bool = True, perturb_classifier: str = "personalized",
                       debug: bool = False) -> tuple[SplitModel, PersonalizationInfo]:
    """Train a personal classifier on top of ``base_model``'s frozen extractor.

    ``base_model`` is the global model for FedAFA and the client's fine-tuned
    model for the local-extractor ablation. Each epoch rebuilds the generated
    set, then takes class-balanced mini-batch steps on
    ``lam * generated_loss + (1 - lam) * original_loss``. Augmentation and both batch samplers
    use separate rng streams, so skipping augmentation leaves the original-data
    batches untouched.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"balance factor must lie in [0, 1], got {lam}")
    if perturb_classifier not in ("personalized", "global"):
        raise ValueError(f"perturb_classifier must be 'personalized' or 'global', got {perturb_classifier!r}")
    info = PersonalizationInfo()
    model = base_model.copy()
    extractor, classifier = model.extractor, model.classifier
    global_head = [p.copy() for p in base_model.classifier]
    data = client.train
    if len(data) == 0:
        return model, info
    feats = extract_features(data.features, extractor)
    counts = data.class_counts()
    present = int((counts > 0).sum())
    n_steps = steps_per_epoch(present * int(counts.max()), batch_size)
    ori_stream = balanced_indices(data.labels, batch_size, stream(seed, ORI_BATCHES, client.client_id))
    state = sgd.state()

    for epoch in range(epochs):
        gen: Optional[GeneratedFeatureSet] = None
        if augment:
            clf = classifier if perturb_classifier == "personalized" else global_head
            gen = augment_client(data, extractor, [p.copy() for p in clf], aug,
                                 stream(seed, AUGMENT, client.client_id, epoch), features=feats, debug=debug)
            info.generated.append(int(gen.generated_mask.sum()))
            info.underfilled.append(gen.underfilled)
            if len(gen) == 0:
                gen = None
                info.fallback_epochs.append(epoch)
        gen_stream = (balanced_feature_batches(gen, batch_size, stream(seed, GEN_BATCHES, client.client_id, epoch))
                      if gen is not None else None)
        for _ in range(n_steps):
            ori_idx = next(ori_stream)
            g = ad.Graph()
            head = [g.tensor(p, requires_grad=True) for p in classifier]
            loss = afa_loss(head, next(gen_stream) if gen_stream is not None else None,
                            (feats[ori_idx], data.labels[ori_idx]), lam)
            grads = ad.backward(loss)
            sgd_step(classifier, [grads[t] for t in head], state)
            info.steps += 1
    return model, info
