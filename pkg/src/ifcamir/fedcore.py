"""Clustered federated training loop (IFCA and its privacy-aware variant).

Each round the server broadcasts the ``s`` cluster models together with their
latest membership-inference risk. Every client scores all models on one
mini-batch, picks a cluster, runs local SGD on a copy of that model and
submits it; the server averages submissions per cluster.

With ``algorithm="ifca"`` clients pick by loss alone. With ``"ifca-mir"`` they
minimise ``alpha * loss + beta * risk`` using their own profile weights.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal, Sequence

import numpy as np

from . import numkit, redteam
from .errors import InputError
from .numkit import Batch, Model, ModelSpec

if TYPE_CHECKING:
    from .datagen import ClientDataset, ShadowPool

log = logging.getLogger(__name__)

Algorithm = Literal["ifca", "ifca-mir"]
ALGORITHMS: tuple[str, ...] = ("ifca", "ifca-mir")
Init = Literal["random", "farthest-first"]
INITS: tuple[str, ...] = ("random", "farthest-first")
DEFAULT_RISK = 0.5

_INIT, _BATCH, _SEEDING = 21, 22, 23


@dataclass(frozen=True)
class ClientProfile:
    client_id: int
    alpha: float
    beta: float
    mia_threshold: float
    group: int = -1

    def __post_init__(self) -> None:
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise InputError("alpha and beta must lie in [0, 1]")
        if abs(self.alpha + self.beta - 1.0) > 1e-12:
            raise InputError("alpha + beta must equal 1")
        if not 0.5 <= self.mia_threshold <= 1.0:
            raise InputError("mia_threshold must lie in [0.5, 1.0]")


@dataclass(frozen=True)
class ClusterSet:
    models: tuple[Model, ...]
    risks: tuple[float, ...]
    round: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "risks", tuple(float(r) for r in self.risks))
        if len(self.models) != len(self.risks) or not self.models:
            raise InputError("need one risk per model and at least one model")
        if any(not 0.0 <= r <= 1.0 for r in self.risks):
            raise InputError("risks must lie in [0, 1]")

    @property
    def size(self) -> int:
        return len(self.models)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    client_ids: tuple[int, ...]
    assignment: tuple[int, ...]
    losses: np.ndarray  # (n, s) selection losses on each client's batch
    selected_loss: tuple[float, ...]
    selected_risk: tuple[float, ...]
    member_counts: tuple[int, ...]
    risks: tuple[float, ...]
    models: tuple[Model, ...]

    def __post_init__(self) -> None:
        if len(set(self.client_ids)) != len(self.client_ids):
            raise InputError("a client appears more than once in a round")
        if sum(self.member_counts) != len(self.client_ids):
            raise InputError("member counts do not sum to the number of clients")


@dataclass(frozen=True)
class TrainSettings:
    model_spec: ModelSpec
    algorithm: Algorithm = "ifca-mir"
    rounds: int = 50
    learning_rate: float = 0.1
    batch_size: int = 20
    local_steps: int = 1
    eval_period: int = 5
    shadow_count: int = 3
    seed: int = 0
    init: Init = "random"
    redteam: redteam.RedTeamSettings = field(default_factory=redteam.RedTeamSettings)

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise InputError(f"unknown algorithm {self.algorithm!r}")
        if self.init not in INITS:
            raise InputError(f"unknown init {self.init!r}")
        if self.rounds < 0:
            raise InputError("rounds must be >= 0")
        if self.batch_size < 1 or self.local_steps < 1 or self.eval_period < 1 or self.shadow_count < 1:
            raise InputError("batch_size, local_steps, eval_period and shadow_count must be >= 1")
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be positive")


@dataclass
class TrainingRun:
    settings: TrainSettings
    initial: ClusterSet
    rounds: list[RoundRecord]
    final: ClusterSet
    risk_tables: list[redteam.MiaRiskTable]
    step_counts: tuple[int, ...]
    seed: int
    shadow_cache: redteam.ShadowCache | None = field(default=None, repr=False, compare=False)
    completed: bool = True

    @property
    def final_assignment(self) -> tuple[int, ...]:
        if not self.rounds:
            raise InputError("run has no rounds")
        return self.rounds[-1].assignment

    def last_member_counts(self) -> tuple[int, ...]:
        """Per cluster, the member count of the latest round in which it had members."""
        counts = [0] * self.final.size
        for record in self.rounds:
            for j, c in enumerate(record.member_counts):
                if c:
                    counts[j] = c
        return tuple(counts)


def initial_clusters(spec: ModelSpec, s: int, seed: int) -> ClusterSet:
    models = [numkit.init_model(spec, np.random.default_rng([seed, _INIT, j])) for j in range(s)]
    return ClusterSet(models, [DEFAULT_RISK] * s, 0)


def farthest_first_clusters(
    clients: Sequence[ClientDataset],
    spec: ModelSpec,
    s: int,
    learning_rate: float,
    local_steps: int,
    seed: int,
) -> tuple[ClusterSet, tuple[int, ...]]:
    """Seed each cluster with a short local fit on one client, chosen farthest-first.

    Starting from a shared random model, the first seed client is the one worst
    served by a fit on a random client; every further seed is the client worst
    served by all seeds so far (loss on its full local data). Returns the
    cluster set and the seed client ids.
    """
    if not 1 <= s <= len(clients):
        raise InputError(f"cannot seed {s} clusters from {len(clients)} clients")
    base = numkit.init_model(spec, np.random.default_rng([seed, _INIT, 0]))
    batches = [Batch(c.data.features, c.data.labels) for c in clients]

    def fit(i: int) -> Model:
        return local_update(base, batches[i], learning_rate, local_steps)

    probe = fit(int(np.random.default_rng([seed, _SEEDING]).integers(len(clients))))
    worst = np.array([numkit.batch_loss(probe, b) for b in batches])
    chosen = [int(np.argmax(worst))]
    models = [fit(chosen[0])]
    worst = np.array([numkit.batch_loss(models[0], b) for b in batches])
    while len(models) < s:
        worst[chosen] = -np.inf
        i = int(np.argmax(worst))
        chosen.append(i)
        models.append(fit(i))
        worst = np.minimum(worst, [numkit.batch_loss(models[-1], b) for b in batches])
    return ClusterSet(models, [DEFAULT_RISK] * s, 0), tuple(clients[i].client_id for i in chosen)


def _check_scores(values: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InputError(f"{name} must be a non-empty list")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains NaN or infinite entries")
    return arr


def select_cluster(profile: ClientProfile, losses: Sequence[float], risks: Sequence[float]) -> int:
    """Smallest index minimising ``alpha * loss + beta * risk``."""
    f = _check_scores(losses, "losses")
    r = _check_scores(risks, "risks")
    if f.size != r.size:
        raise InputError("losses and risks differ in length")
    return int(np.argmin(profile.alpha * f + profile.beta * r))


def select_cluster_by_loss(losses: Sequence[float]) -> int:
    return int(np.argmin(_check_scores(losses, "losses")))


def local_update(model: Model, batch: Batch, learning_rate: float, num_steps: int = 1) -> Model:
    if num_steps < 1:
        raise InputError("num_steps must be >= 1")
    local = model
    for _ in range(num_steps):
        local = numkit.sgd_step(local, numkit.batch_gradient(local, batch), learning_rate)
    return local


def aggregate_cluster(previous: ClusterSet, submissions: Sequence[tuple[int, Model]]) -> list[Model]:
    """Unweighted mean per cluster; clusters without submissions keep their model."""
    buckets: list[list[np.ndarray]] = [[] for _ in range(previous.size)]
    spec = previous.models[0].spec
    for j, model in submissions:
        if not 0 <= j < previous.size:
            raise InputError(f"cluster id {j} out of range")
        if model.spec != spec:
            raise InputError("submitted model spec differs from the cluster spec")
        buckets[j].append(model.params)
    return [
        Model(spec, np.mean(bucket, axis=0)) if bucket else previous.models[j]
        for j, bucket in enumerate(buckets)
    ]


def client_batch(client: ClientDataset, batch_size: int, seed: int, round_index: int) -> Batch:
    n = len(client.data)
    if batch_size > n:
        raise InputError(f"batch_size {batch_size} exceeds client {client.client_id}'s {n} samples")
    rng = np.random.default_rng([seed, _BATCH, client.client_id, round_index])
    rows = rng.choice(n, size=batch_size, replace=False)
    return Batch(client.data.features[rows], client.data.labels[rows])


def run_round(
    state: ClusterSet,
    clients: Sequence[ClientDataset],
    profiles: Sequence[ClientProfile],
    settings: TrainSettings,
) -> tuple[ClusterSet, RoundRecord]:
    """One broadcast / select / local-update / aggregate cycle at round ``state.round``."""
    if len(clients) != len(profiles):
        raise InputError("one profile per client required")
    t = state.round
    risks = list(state.risks)
    assignment, submissions, losses, sel_loss, sel_risk = [], [], [], [], []
    for client, profile in zip(clients, profiles):
        if profile.client_id != client.client_id:
            raise InputError("profiles and clients are not aligned by client_id")
        batch = client_batch(client, settings.batch_size, settings.seed, t)
        row = [numkit.batch_loss(m, batch) for m in state.models]
        if settings.algorithm == "ifca":
            j = select_cluster_by_loss(row)
        else:
            j = select_cluster(profile, row, risks)
        submissions.append((j, local_update(state.models[j], batch, settings.learning_rate, settings.local_steps)))
        assignment.append(j)
        losses.append(row)
        sel_loss.append(row[j])
        sel_risk.append(risks[j])

    models = aggregate_cluster(state, submissions)
    counts = tuple(int(c) for c in np.bincount(assignment, minlength=state.size))
    record = RoundRecord(
        t,
        tuple(c.client_id for c in clients),
        tuple(assignment),
        np.asarray(losses),
        tuple(sel_loss),
        tuple(sel_risk),
        counts,
        tuple(risks),
        tuple(models),
    )
    return ClusterSet(models, risks, t + 1), record


def train(
    clients: Sequence[ClientDataset],
    profiles: Sequence[ClientProfile],
    pool: ShadowPool,
    num_clusters: int,
    settings: TrainSettings,
    deadline: float | None = None,
) -> TrainingRun:
    """Run ``settings.rounds`` rounds with full participation.

    The red team refreshes every cluster's risk at rounds ``t % eval_period == 0``
    (before clients select); in between, clients see the latest table.
    ``deadline`` is a ``time.monotonic()`` instant; once passed, training stops
    after the current round and the run is marked incomplete.
    """
    if not clients:
        raise InputError("no clients")
    if settings.init == "farthest-first":
        state, seeds = farthest_first_clusters(
            clients, settings.model_spec, num_clusters, settings.learning_rate, settings.local_steps, settings.seed
        )
        log.debug("seed clients %s", seeds)
    else:
        state = initial_clusters(settings.model_spec, num_clusters, settings.seed)
    initial = state
    samples_per_client = len(clients[0].data)
    steps = [0] * num_clusters
    last_members = [max(1, math.ceil(len(clients) / num_clusters))] * num_clusters
    records: list[RoundRecord] = []
    tables: list[redteam.MiaRiskTable] = []
    cache = redteam.ShadowCache()

    completed = True
    for t in range(settings.rounds):
        if deadline is not None and time.monotonic() > deadline:
            log.warning("deadline reached after %d of %d rounds", t, settings.rounds)
            completed = False
            break
        if t % settings.eval_period == 0:
            table = redteam.assess_clusters(
                state.models,
                pool,
                budgets=steps,
                member_sizes=[m * samples_per_client for m in last_members],
                batch_sizes=[m * settings.batch_size for m in last_members],
                k=settings.shadow_count,
                learning_rate=settings.learning_rate,
                seed=settings.seed,
                round_index=t,
                settings=settings.redteam,
                cache=cache,
            )
            tables.append(table)
            state = ClusterSet(state.models, table.risks, t)
        state, record = run_round(state, clients, profiles, settings)
        records.append(record)
        for j, c in enumerate(record.member_counts):
            if c:
                steps[j] += settings.local_steps
                last_members[j] = c
        log.debug("round %d assignment counts %s", t, record.member_counts)

    return TrainingRun(settings, initial, records, state, tables, tuple(steps), settings.seed, cache, completed)
