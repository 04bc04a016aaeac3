"""Server-side membership-inference red team.

Shadow models are trained on the server's own pool to mimic a cluster's
training regime (member-set size and optimisation budget). Their outputs on
members and non-members form an attack dataset; a logistic attack model is
fit on 80% of it and the balanced accuracy ``(TPR + TNR) / 2`` on the other
20% is the cluster's risk score.

Attack features are the descending-sorted probability vector followed by the
cross-entropy of the true label, so one attack model serves every class.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Protocol, Sequence

import numpy as np

from . import numkit
from .errors import InputError
from .numkit import Batch, Model, ModelSpec

log = logging.getLogger(__name__)

UNINFORMATIVE = 0.5

_SPLIT, _SHADOW_INIT, _SHADOW_BATCH, _ATTACK = 31, 32, 33, 34


class _Data(Protocol):
    features: np.ndarray
    labels: np.ndarray
    index: np.ndarray

    def __len__(self) -> int: ...

    def take(self, rows): ...


class _Pool(Protocol):
    data: _Data

    def __len__(self) -> int: ...


@dataclass(frozen=True)
class RedTeamSettings:
    attack_epochs: int = 60
    attack_batch_size: int = 64
    attack_learning_rate: float = 0.2
    attack_l2: float = 1e-4
    eval_fraction: float = 0.2


@dataclass(frozen=True)
class ShadowSplit:
    shadow_index: int
    in_set: _Data
    out_set: _Data

    def __post_init__(self) -> None:
        if np.intersect1d(self.in_set.index, self.out_set.index).size:
            raise InputError("shadow member and non-member sets overlap")


@dataclass(frozen=True)
class AttackExample:
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class AttackDataset:
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[AttackExample]:
        for x, y in zip(self.features, self.labels):
            yield AttackExample(x, int(y))

    def take(self, rows) -> AttackDataset:
        return AttackDataset(self.features[rows], self.labels[rows])


@dataclass(frozen=True)
class AttackModel:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray
    threshold: float = 0.5

    def member_probability(self, features: np.ndarray) -> np.ndarray:
        z = ((np.atleast_2d(features) - self.mean) / self.scale) @ self.weights + self.bias
        return 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free logistic

    def predict(self, features: np.ndarray) -> np.ndarray:
        return (self.member_probability(features) >= self.threshold).astype(np.int64)


@dataclass(frozen=True)
class RiskEstimate:
    risk: float
    attack: AttackModel | None
    member_set_size: int
    training_budget: int
    warning: str | None = None


@dataclass(frozen=True)
class MiaRiskTable:
    round: int
    risks: tuple[float, ...]
    attacks: tuple[AttackModel | None, ...]
    member_set_sizes: tuple[int, ...]
    budgets: tuple[int, ...]
    warnings: tuple[str, ...] = ()


@dataclass
class ShadowCache:
    """Checkpoints of shadow training so later, larger budgets resume instead of restarting.

    Resuming is exact: the batch stream of a shadow depends only on its key,
    so a checkpoint at step ``b`` equals a fresh run stopped at ``b``.
    """

    checkpoints: dict[tuple, dict[int, tuple[Model, dict]]] = field(default_factory=dict)

    def nearest(self, key: tuple, budget: int) -> tuple[int, Model, dict] | None:
        saved = self.checkpoints.get(key, {})
        usable = [b for b in saved if b <= budget]
        if not usable:
            return None
        b = max(usable)
        model, state = saved[b]
        return b, model, state

    def store(self, key: tuple, budget: int, model: Model, state: dict) -> None:
        self.checkpoints.setdefault(key, {})[budget] = (model, state)


def attack_features(model: Model, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Sorted (descending) class probabilities plus the true-label cross-entropy."""
    probs = numkit.predict_proba(model, features)
    labels = np.asarray(labels, dtype=np.int64)
    loss = -np.log(np.maximum(probs[np.arange(len(labels)), labels], numkit.LOG_CLAMP))
    return np.column_stack([-np.sort(-probs, axis=1), loss])


def shadow_split(pool: _Pool, shadow_index: int, member_set_size: int, seed: int) -> ShadowSplit:
    rng = np.random.default_rng([seed, _SPLIT, shadow_index, member_set_size])
    order = rng.permutation(len(pool))
    m = member_set_size
    return ShadowSplit(shadow_index, pool.data.take(order[:m]), pool.data.take(order[m : 2 * m]))


def _train_shadow(
    spec: ModelSpec,
    members: _Data,
    key: tuple,
    budget: int,
    batch_size: int,
    learning_rate: float,
    cache: ShadowCache | None,
) -> Model:
    seed, index, m, bs = key[0], key[1], key[2], key[3]
    start = cache.nearest(key, budget) if cache is not None else None
    if start is None:
        done = 0
        model = numkit.init_model(spec, np.random.default_rng([seed, _SHADOW_INIT, index]))
        rng = np.random.default_rng([seed, _SHADOW_BATCH, index, m, bs])
    else:
        done, model, state = start
        rng = np.random.default_rng()
        rng.bit_generator.state = state
    full = Batch(members.features, members.labels) if bs == m else None
    for _ in range(done, budget):
        if full is None:
            rows = rng.choice(m, size=bs, replace=False)
            batch = Batch(members.features[rows], members.labels[rows])
        else:
            batch = full
        model = numkit.sgd_step(model, numkit.batch_gradient(model, batch), learning_rate)
    if cache is not None and budget > done:
        cache.store(key, budget, model, rng.bit_generator.state)
    return model


def train_shadow_models(
    pool: _Pool,
    spec: ModelSpec,
    k: int,
    member_set_size: int,
    training_budget: int,
    seed: int,
    learning_rate: float = 0.1,
    batch_size: int | None = None,
    cache: ShadowCache | None = None,
) -> list[tuple[Model, ShadowSplit]]:
    """Train ``k`` shadows, each on its own ``member_set_size`` sample of the pool.

    ``batch_size`` defaults to the whole member set (full-batch steps).
    """
    if k < 1:
        raise InputError("k must be >= 1")
    if member_set_size < 1 or 2 * member_set_size > len(pool):
        raise InputError(f"pool of {len(pool)} cannot supply two disjoint sets of {member_set_size}")
    if training_budget < 0:
        raise InputError("training_budget must be >= 0")
    bs = member_set_size if batch_size is None else min(batch_size, member_set_size)
    if bs < 1:
        raise InputError("batch_size must be >= 1")
    shadows = []
    for i in range(k):
        split = shadow_split(pool, i, member_set_size, seed)
        key = (seed, i, member_set_size, bs, learning_rate, spec)
        model = _train_shadow(spec, split.in_set, key, training_budget, bs, learning_rate, cache)
        shadows.append((model, split))
    return shadows


def build_attack_dataset(shadows: Sequence[tuple[Model, ShadowSplit]]) -> AttackDataset:
    if not shadows:
        raise InputError("no shadow models")
    feats, labels = [], []
    for model, split in shadows:
        if len(split.in_set) == 0 or len(split.out_set) == 0:
            raise InputError("shadow split has an empty member or non-member set")
        for data, label in ((split.in_set, 1), (split.out_set, 0)):
            feats.append(attack_features(model, data.features, data.labels))
            labels.append(np.full(len(data), label, dtype=np.int64))
    return AttackDataset(np.vstack(feats), np.concatenate(labels))


def train_attack_model(
    examples: AttackDataset,
    seed: int,
    settings: RedTeamSettings = RedTeamSettings(),
) -> tuple[AttackModel, AttackDataset]:
    """Logistic regression by mini-batch SGD on a shuffled 80% split.

    Returns the model and the held-out 20% split.
    """
    if len(np.unique(examples.labels)) < 2:
        raise InputError("attack dataset needs both member and non-member examples")
    rng = np.random.default_rng([seed, _ATTACK])
    order = rng.permutation(len(examples))
    n_eval = max(1, int(round(settings.eval_fraction * len(examples))))
    fit, held = examples.take(order[n_eval:]), examples.take(order[:n_eval])
    if len(np.unique(fit.labels)) < 2:
        raise InputError("training split lost one of the labels")

    mean = fit.features.mean(axis=0)
    scale = fit.features.std(axis=0)
    scale[scale < 1e-12] = 1.0
    x = (fit.features - mean) / scale
    y = fit.labels.astype(np.float64)
    w = np.zeros(x.shape[1])
    b = 0.0
    bs = settings.attack_batch_size
    for epoch in range(settings.attack_epochs):
        lr = settings.attack_learning_rate / (1.0 + 0.1 * epoch)
        perm = rng.permutation(len(y))
        for start in range(0, len(y), bs):
            rows = perm[start : start + bs]
            p = 0.5 * (1.0 + np.tanh(0.5 * (x[rows] @ w + b)))
            err = p - y[rows]
            w -= lr * (x[rows].T @ err / len(rows) + settings.attack_l2 * w)
            b -= lr * float(err.mean())
    return AttackModel(w, b, mean, scale), held


def balanced_accuracy(member_predictions: np.ndarray, nonmember_predictions: np.ndarray) -> float:
    """(TPR + TNR) / 2 from binary member predictions on each population."""
    if len(member_predictions) == 0 or len(nonmember_predictions) == 0:
        raise InputError("both member and non-member sets must be non-empty")
    tpr = float(np.mean(np.asarray(member_predictions) == 1))
    tnr = float(np.mean(np.asarray(nonmember_predictions) == 0))
    return (tpr + tnr) / 2.0


def attack_accuracy(attack: AttackModel, examples: AttackDataset) -> float:
    pred = attack.predict(examples.features)
    return balanced_accuracy(pred[examples.labels == 1], pred[examples.labels == 0])


def run_red_team(
    target: Model,
    pool: _Pool,
    cluster_training_budget: int,
    cluster_member_size: int,
    k: int,
    seed: int,
    learning_rate: float = 0.1,
    batch_size: int | None = None,
    settings: RedTeamSettings = RedTeamSettings(),
    cache: ShadowCache | None = None,
) -> RiskEstimate:
    """Full shadow/attack pipeline for one cluster model; degrades to 0.5 instead of raising."""
    m = min(cluster_member_size, len(pool) // 2)
    if m < 1:
        msg = f"shadow pool of {len(pool)} too small for any member set"
        log.warning(msg)
        return RiskEstimate(UNINFORMATIVE, None, m, cluster_training_budget, msg)
    shadows = train_shadow_models(
        pool, target.spec, k, m, cluster_training_budget, seed, learning_rate, batch_size, cache
    )
    examples = build_attack_dataset(shadows)
    try:
        attack, held = train_attack_model(examples, seed + m + 7919 * cluster_training_budget, settings)
        risk = attack_accuracy(attack, held)
    except InputError as exc:
        log.warning("red team degraded: %s", exc)
        return RiskEstimate(UNINFORMATIVE, None, m, cluster_training_budget, str(exc))
    return RiskEstimate(risk, attack, m, cluster_training_budget)


def estimate_mia_risk(
    target: Model,
    pool: _Pool,
    cluster_training_budget: int,
    cluster_member_size: int,
    k: int = 3,
    seed: int = 0,
    **kwargs,
) -> float:
    return run_red_team(target, pool, cluster_training_budget, cluster_member_size, k, seed, **kwargs).risk


def assess_clusters(
    models: Sequence[Model],
    pool: _Pool,
    budgets: Sequence[int],
    member_sizes: Sequence[int],
    batch_sizes: Sequence[int],
    k: int,
    learning_rate: float,
    seed: int,
    round_index: int,
    settings: RedTeamSettings = RedTeamSettings(),
    cache: ShadowCache | None = None,
) -> MiaRiskTable:
    estimates = [
        run_red_team(model, pool, budget, size, k, seed, learning_rate, bs, settings, cache)
        for model, budget, size, bs in zip(models, budgets, member_sizes, batch_sizes)
    ]
    return MiaRiskTable(
        round_index,
        tuple(e.risk for e in estimates),
        tuple(e.attack for e in estimates),
        tuple(e.member_set_size for e in estimates),
        tuple(e.training_budget for e in estimates),
        tuple(e.warning for e in estimates if e.warning),
    )


def ground_truth_mia_accuracy(
    attack: AttackModel,
    target: Model,
    member_data: _Data,
    nonmember_data: _Data,
) -> float:
    """Balanced attack accuracy against the target's real members and held-out data."""
    if len(member_data) == 0 or len(nonmember_data) == 0:
        raise InputError("member and non-member data must be non-empty")
    members = attack.predict(attack_features(target, member_data.features, member_data.labels))
    others = attack.predict(attack_features(target, nonmember_data.features, nonmember_data.labels))
    return balanced_accuracy(members, others)
