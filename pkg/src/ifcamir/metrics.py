"""Accuracy, group fairness, MIA violations and convergence diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import fedcore, numkit, redteam
from .datagen import MAJORITY, MINORITY, ClientDataset, Dataset, Population
from .errors import InputError
from .fedcore import ClientProfile, TrainingRun, TrainSettings
from .numkit import Model, ModelSpec


@dataclass(frozen=True)
class LabeledPrediction:
    label: int
    predicted: int
    sensitive: int
    cluster: int = -1


@dataclass(frozen=True)
class Predictions:
    """Column form of many ``LabeledPrediction`` rows."""

    labels: np.ndarray
    predicted: np.ndarray
    sensitive: np.ndarray
    cluster: np.ndarray

    def __post_init__(self) -> None:
        cols = [np.asarray(c, dtype=np.int64).reshape(-1) for c in (self.labels, self.predicted, self.sensitive, self.cluster)]
        if len({len(c) for c in cols}) != 1:
            raise InputError("prediction columns differ in length")
        if cols[2].size and not np.isin(cols[2], (0, 1)).all():
            raise InputError("sensitive attribute must be 0 or 1")
        for name, col in zip(("labels", "predicted", "sensitive", "cluster"), cols):
            object.__setattr__(self, name, col)

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_rows(cls, rows: Sequence[LabeledPrediction]) -> Predictions:
        return cls(
            np.array([r.label for r in rows], dtype=np.int64),
            np.array([r.predicted for r in rows], dtype=np.int64),
            np.array([r.sensitive for r in rows], dtype=np.int64),
            np.array([r.cluster for r in rows], dtype=np.int64),
        )

    @classmethod
    def concat(cls, parts: Sequence[Predictions]) -> Predictions:
        return cls(*(np.concatenate([getattr(p, k) for p in parts]) for k in ("labels", "predicted", "sensitive", "cluster")))


def _as_predictions(predictions) -> Predictions:
    if isinstance(predictions, Predictions):
        return predictions
    return Predictions.from_rows(list(predictions))


@dataclass(frozen=True)
class GroupAccuracy:
    overall: float
    by_group: dict[int, float]

    def get(self, group: int) -> float | None:
        return self.by_group.get(group)


def group_accuracy(predictions) -> GroupAccuracy:
    """Fraction correct per sensitive group and pooled; empty groups are absent."""
    p = _as_predictions(predictions)
    if len(p) == 0:
        raise InputError("no predictions")
    correct = p.labels == p.predicted
    by_group = {int(g): float(correct[p.sensitive == g].mean()) for g in np.unique(p.sensitive)}
    return GroupAccuracy(float(correct.mean()), by_group)


@dataclass(frozen=True)
class FairnessReport:
    dp_diff: float
    eo_diff: float | None
    eodds_diff: float | None
    positive_class: int


def _rate(mask: np.ndarray, hits: np.ndarray) -> float | None:
    return float(hits[mask].mean()) if mask.any() else None


def fairness_report(predictions, positive_class: int = 0) -> FairnessReport:
    """Demographic parity, equal opportunity and equalized odds gaps (one-vs-rest).

    Equalized odds is the larger of the TPR gap and the FPR gap. A term whose
    conditioning set is empty in either group is dropped; if nothing remains
    the metric is ``None``.
    """
    p = _as_predictions(predictions)
    if not ((p.sensitive == 0).any() and (p.sensitive == 1).any()):
        raise InputError("both sensitive groups must be present")
    pos_pred = p.predicted == positive_class
    pos_true = p.labels == positive_class
    s1, s0 = p.sensitive == 1, p.sensitive == 0

    dp = abs(_rate(s1, pos_pred) - _rate(s0, pos_pred))

    gaps = {}
    for name, cond in (("tpr", pos_true), ("fpr", ~pos_true)):
        a, b = _rate(s1 & cond, pos_pred), _rate(s0 & cond, pos_pred)
        gaps[name] = None if a is None or b is None else abs(a - b)
    present = [g for g in gaps.values() if g is not None]
    return FairnessReport(dp, gaps["tpr"], max(present) if present else None, positive_class)


@dataclass(frozen=True)
class ClientViolation:
    client_id: int
    threshold: float
    cluster: int
    violated: bool


@dataclass(frozen=True)
class ViolationReport:
    cluster_accuracy: tuple[float | None, ...]
    clients: tuple[ClientViolation, ...]

    @property
    def total(self) -> int:
        return sum(c.violated for c in self.clients)


def count_mia_violations(
    run: TrainingRun | Sequence[int],
    cluster_accuracy: Sequence[float | None],
    profiles: Sequence[ClientProfile],
) -> ViolationReport:
    """A client is violated iff its final cluster's MIA accuracy strictly exceeds its threshold."""
    assignment = run.final_assignment if isinstance(run, TrainingRun) else tuple(run)
    if len(assignment) != len(profiles):
        raise InputError("assignment and profiles differ in length")
    rows = []
    for profile, j in zip(profiles, assignment):
        acc = cluster_accuracy[j] if j < len(cluster_accuracy) else None
        if acc is None:
            raise InputError(f"cluster {j} has no MIA evaluation")
        rows.append(ClientViolation(profile.client_id, profile.mia_threshold, j, acc > profile.mia_threshold))
    return ViolationReport(tuple(cluster_accuracy), tuple(rows))


@dataclass(frozen=True)
class ConvergenceTrace:
    distances: np.ndarray  # (rounds + 1, s)
    mean_loss: np.ndarray  # (rounds,)


def convergence_trace(run: TrainingRun, reference_models: Sequence[Model]) -> ConvergenceTrace:
    """Euclidean distance of every cluster model to its reference, per round."""
    if len(reference_models) != run.initial.size:
        raise InputError("need one reference model per cluster")
    spec = run.initial.models[0].spec
    if any(m.spec != spec for m in reference_models):
        raise InputError("reference model spec differs from the run's spec")
    refs = np.stack([m.params for m in reference_models])
    snapshots = [run.initial.models] + [r.models for r in run.rounds]
    dist = np.array([[np.linalg.norm(m.params - refs[j]) for j, m in enumerate(ms)] for ms in snapshots])
    loss = np.array([float(np.mean(r.selected_loss)) for r in run.rounds])
    return ConvergenceTrace(dist, loss)


# -- run evaluation ----------------------------------------------------------


@dataclass
class RunEvaluation:
    accuracy: GroupAccuracy
    fairness: FairnessReport
    cluster_mia: tuple[float | None, ...]
    group_mia: dict[int, float | None]
    group_cluster: dict[int, int | None]
    violations: ViolationReport
    cluster_members: tuple[int, ...]
    red_team: redteam.MiaRiskTable


def client_predictions(population: Population, models: Sequence[Model], assignment: Sequence[int]) -> Predictions:
    """Each client's assigned model applied to its group's test set (S = 1 for majority)."""
    cache: dict[tuple[int, int], np.ndarray] = {}
    parts = []
    for client, j in zip(population.clients, assignment):
        test = population.test_sets[client.group]
        key = (client.group, j)
        if key not in cache:
            cache[key] = numkit.predict(models[j], test.features)
        n = len(test)
        parts.append(
            Predictions(test.labels, cache[key], np.full(n, int(client.group == MAJORITY)), np.full(n, j))
        )
    return Predictions.concat(parts)


def cluster_members(population: Population, assignment: Sequence[int], cluster: int) -> list[ClientDataset]:
    return [c for c, j in zip(population.clients, assignment) if j == cluster]


def nonmember_sample(population: Population, members: Sequence[ClientDataset]) -> Dataset:
    """Held-out points matching the members' group mix, capped by test-set size."""
    parts = []
    for group in (MINORITY, MAJORITY):
        count = sum(len(c) for c in members if c.group == group)
        if count:
            test = population.test_sets[group]
            parts.append(test.take(slice(0, min(count, len(test)))))
    return Dataset.concat(parts)


def evaluate_run(
    population: Population,
    run: TrainingRun,
    profiles: Sequence[ClientProfile],
    positive_class: int = 0,
) -> RunEvaluation:
    """Final-round accuracy, fairness and ground-truth MIA for a finished run.

    The attack model for each cluster comes from a fresh red-team pass that
    mimics the cluster's final training regime.
    """
    settings = run.settings
    assignment = run.final_assignment
    s = run.final.size
    spc = len(population.clients[0])
    counts = run.last_member_counts()
    table = redteam.assess_clusters(
        run.final.models,
        population.shadow_pool,
        budgets=run.step_counts,
        member_sizes=[max(c, 1) * spc for c in counts],
        batch_sizes=[max(c, 1) * settings.batch_size for c in counts],
        k=settings.shadow_count,
        learning_rate=settings.learning_rate,
        seed=settings.seed,
        round_index=settings.rounds,
        settings=settings.redteam,
        cache=run.shadow_cache,
    )

    cluster_mia: list[float | None] = []
    final_counts = []
    for j in range(s):
        members = cluster_members(population, assignment, j)
        final_counts.append(len(members))
        attack = table.attacks[j]
        if not members:
            cluster_mia.append(None)
        elif attack is None:
            cluster_mia.append(redteam.UNINFORMATIVE)
        else:
            member_data = Dataset.concat([c.data for c in members])
            cluster_mia.append(
                redteam.ground_truth_mia_accuracy(attack, run.final.models[j], member_data, nonmember_sample(population, members))
            )

    group_cluster: dict[int, int | None] = {}
    group_mia: dict[int, float | None] = {}
    groups = np.array(population.groups)
    for group in (MINORITY, MAJORITY):
        chosen = np.asarray(assignment)[groups == group]
        if chosen.size == 0:
            group_cluster[group] = group_mia[group] = None
            continue
        j = int(np.bincount(chosen, minlength=s).argmax())
        group_cluster[group] = j
        group_mia[group] = cluster_mia[j]

    preds = client_predictions(population, run.final.models, assignment)
    return RunEvaluation(
        accuracy=group_accuracy(preds),
        fairness=fairness_report(preds, positive_class),
        cluster_mia=tuple(cluster_mia),
        group_mia=group_mia,
        group_cluster=group_cluster,
        violations=count_mia_violations(assignment, cluster_mia, profiles),
        cluster_members=tuple(final_counts),
        red_team=table,
    )


# -- contraction probe -------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceProbe:
    """Synthetic clustered least-squares problem with known optima.

    Features have covariance ``diag(linspace(lam, smooth, dim))`` so each
    cluster's population loss is exactly ``lam``-strongly convex and
    ``smooth``-smooth. ``noise_free`` replaces random designs by exact ones
    (sample covariance equal to the population covariance, zero label noise).
    """

    optima: np.ndarray  # (s, dim)
    lam: float
    smooth: float
    min_fraction: float
    batch_size: int
    num_clients: int
    samples_per_client: int = 200
    noise_std: float = 0.05
    init_fraction: float = 1.0  # share of the admissible initialization radius
    slack_alpha: float = 0.25  # the "alpha" margin of the initialization condition
    noise_free: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        opt = np.atleast_2d(np.asarray(self.optima, dtype=np.float64))
        object.__setattr__(self, "optima", opt)
        if not 0 < self.lam <= self.smooth:
            raise InputError("need 0 < lambda <= L")
        if not 0 < self.min_fraction <= 1:
            raise InputError("min_fraction must lie in (0, 1]")
        if opt.shape[0] > 1 and self.separation <= 0:
            raise InputError("cluster optima must be distinct")
        if self.batch_size < 1 or self.batch_size > self.samples_per_client:
            raise InputError("batch_size must lie in [1, samples_per_client]")
        if self.noise_free and self.batch_size != self.samples_per_client:
            raise InputError("noise_free probes use full-batch steps")

    @property
    def num_clusters(self) -> int:
        return self.optima.shape[0]

    @property
    def dim(self) -> int:
        return self.optima.shape[1]

    @property
    def separation(self) -> float:
        s = self.num_clusters
        if s == 1:
            return math.inf
        return min(np.linalg.norm(self.optima[a] - self.optima[b]) for a in range(s) for b in range(a + 1, s))

    @property
    def contraction_bound(self) -> float:
        return 1.0 - self.min_fraction * self.lam / (8.0 * self.smooth)

    @property
    def init_radius(self) -> float:
        if self.num_clusters == 1:
            return 1.0
        return (0.5 - self.slack_alpha) * math.sqrt(self.lam / self.smooth) * self.separation

    def round_bound(self, eps: float) -> float:
        return 8.0 * self.smooth / (self.min_fraction * self.lam) * math.log(2.0 * self.separation / eps)

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec("linear-regression", self.dim)

    def cluster_sizes(self) -> list[int]:
        s, n = self.num_clusters, self.num_clients
        smallest = max(1, round(self.min_fraction * n)) if s > 1 else n
        rest = n - smallest
        if s > 1 and rest < (s - 1) * smallest:
            raise InputError("min_fraction too large for the number of clusters")
        sizes = [smallest] + [rest // (s - 1) + (1 if i < rest % (s - 1) else 0) for i in range(s - 1)] if s > 1 else [n]
        return sizes

    def build(self, seed: int) -> tuple[list[ClientDataset], list[int], list[Model]]:
        """Clients, their true cluster ids, and initial models inside the admissible radius."""
        rng = np.random.default_rng([seed, 41])
        scales = np.sqrt(np.linspace(self.lam, self.smooth, self.dim))
        clients, truth = [], []
        cid = 0
        for j, size in enumerate(self.cluster_sizes()):
            for _ in range(size):
                m = self.samples_per_client
                if self.noise_free:
                    q, _ = np.linalg.qr(rng.normal(size=(m, self.dim)))
                    x = q * math.sqrt(m) * scales
                    y = x @ self.optima[j]
                else:
                    x = rng.normal(size=(m, self.dim)) * scales
                    y = x @ self.optima[j] + self.noise_std * rng.normal(size=m)
                data = Dataset(x, y, np.full(m, j), np.arange(cid * m, (cid + 1) * m))
                clients.append(ClientDataset(cid, data, j, 0.0))
                truth.append(j)
                cid += 1
        inits = []
        for j in range(self.num_clusters):
            direction = rng.normal(size=self.dim)
            direction /= np.linalg.norm(direction)
            inits.append(Model(self.model_spec, self.optima[j] + self.init_fraction * self.init_radius * direction))
        return clients, truth, inits


@dataclass(frozen=True)
class ProbeSeedResult:
    seed: int
    distances: np.ndarray  # (rounds + 1, s)
    floor: np.ndarray  # per cluster
    mean_ratio: np.ndarray  # per cluster, pre-floor rounds
    final_fraction: np.ndarray  # final distance / initial distance
    assignment_correct: bool
    passed: bool


@dataclass(frozen=True)
class ProbeVerdict:
    bound: float
    slack: float
    seeds: tuple[ProbeSeedResult, ...]
    required_fraction: float
    passed: bool = field(init=False)

    def __post_init__(self) -> None:
        frac = sum(r.passed for r in self.seeds) / len(self.seeds)
        object.__setattr__(self, "passed", frac >= self.required_fraction)


def _mean_prefloor_ratio(trace: np.ndarray, floor: float) -> float:
    ratios = []
    for t in range(len(trace) - 1):
        if trace[t + 1] <= 2.0 * floor or trace[t] == 0.0:
            break
        ratios.append(trace[t + 1] / trace[t])
    if not ratios:
        # already at the floor after one round: the first step is the only contraction
        return float(trace[1] / trace[0]) if trace[0] > 0 else 0.0
    return float(np.mean(ratios))


def run_convergence_probe(
    probe: ConvergenceProbe,
    rounds: int,
    delta_confidence: float = 0.8,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    slack: float = 0.05,
    alpha: float = 1.0,
) -> ProbeVerdict:
    """Run the privacy-aware loop with lr = 1/L on the probe and check contraction.

    Clients see equal risks, so selection is loss-driven whatever ``alpha``.
    A seed passes when every cluster's mean pre-floor contraction ratio is at
    most ``bound + slack``, its final distance is under 10% of the initial one,
    and the distance stays within 3x the floor over the last 20% of rounds.
    """
    if rounds < 5:
        raise InputError("need at least 5 rounds")
    results = []
    for seed in seeds:
        clients, truth, inits = probe.build(seed)
        profiles = [ClientProfile(c.client_id, alpha, 1.0 - alpha, 0.5) for c in clients]
        settings = TrainSettings(
            probe.model_spec, "ifca-mir", rounds, 1.0 / probe.smooth, probe.batch_size, 1, seed=seed
        )
        state = fedcore.ClusterSet(inits, [redteam.UNINFORMATIVE] * probe.num_clusters, 0)
        snapshots = [np.stack([m.params for m in inits])]
        record = None
        for _ in range(rounds):
            state, record = fedcore.run_round(state, clients, profiles, settings)
            snapshots.append(np.stack([m.params for m in state.models]))
        dist = np.linalg.norm(np.stack(snapshots) - probe.optima[None], axis=2)
        tail = dist[-max(1, rounds // 5) :]
        floor = np.median(tail, axis=0)
        ratios = np.array([_mean_prefloor_ratio(dist[:, j], floor[j]) for j in range(probe.num_clusters)])
        final_fraction = dist[-1] / dist[0]
        settled = np.all(tail <= 3.0 * floor + 1e-12, axis=0)
        correct = record is not None and list(record.assignment) == truth
        passed = bool(correct and np.all(ratios <= probe.contraction_bound + slack) and np.all(final_fraction < 0.1) and settled.all())
        results.append(ProbeSeedResult(seed, dist, floor, ratios, final_fraction, correct, passed))
    return ProbeVerdict(probe.contraction_bound, slack, tuple(results), delta_confidence)
