"""Round loop of a simulated federation.

Each round every client trains locally from the broadcast model, the server
builds the round's sampling design from the clients' compressed gradients,
draws a selection, and aggregates the selected clients.  All N local updates
are computed because non-selected clients still report a compressed gradient
and the per-round variance diagnostic needs the whole population; the
communication tally counts only what would actually be uploaded.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import models
from .aggregation import aggregate
from .clustering import Clustering, cluster_clients, cluster_cohesions
from .compression import CompressionSpec, compress
from .dataset import (LabeledDataset, PartitionSpec, load_idx, partition,
                      synth_classification, train_test_split)
from .models import DivergenceError, ModelSpec, TrainConfig
from .selection import SamplingDesign, Scheme, make_design
from .seeding import derive_rng, derive_seed
from .variance_lab import mc_trace_variance

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("t", "accuracy", "loss", "variance_estimate", "n_selected", "wall_ms", "selected_ids")


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"
    n_samples: int = 6000
    n_features: int = 20
    n_classes: int = 10
    cluster_spread: float = 1.0
    test_fraction: float = 0.2
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    subset: int = 0  # keep only the first `subset` training samples; 0 keeps all

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx"):
            raise ValueError(f"unknown data kind {self.kind!r}")
        if self.kind == "idx" and not (self.train_images and self.train_labels):
            raise ValueError("idx data needs train_images and train_labels")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must be in [0, 1)")


@dataclass(frozen=True)
class RunConfig:
    n_clients: int = 100
    sampling_ratio: float = 0.1
    rounds: int = 100
    n_clusters: int = 0  # 0 means "same as m"
    compression_rate: float = 0.10
    scheme: str = "hybrid"
    model_kind: str = "logistic"
    train: TrainConfig = field(default_factory=TrainConfig)
    partition: str = "dirichlet"
    alpha: float = 0.1
    data: DataConfig = field(default_factory=DataConfig)
    target_accuracy: float | None = None
    master_seed: int = 0
    recluster_every: int = 1
    importance_norm: str = "centers"  # centers | raw
    allocation_stat: str = "cohesion"  # cohesion (as defined for clusters) | std (its square root)
    variance_probe_draws: int = 1000  # 0 disables the per-round diagnostic
    compression_max_iters: int = 100

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not 0 < self.sampling_ratio <= 1:
            raise ValueError("sampling_ratio must be in (0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        Scheme(self.scheme)
        if self.model_kind not in models.MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if self.n_clusters < 0 or self.n_clusters > self.n_clients:
            raise ValueError("n_clusters must be in [0, n_clients]")
        if not 0 < self.compression_rate <= 1:
            raise ValueError("compression_rate must be in (0, 1]")
        if self.recluster_every < 1:
            raise ValueError("recluster_every must be >= 1")
        if self.importance_norm not in ("centers", "raw"):
            raise ValueError("importance_norm must be 'centers' or 'raw'")
        if self.allocation_stat not in ("std", "cohesion"):
            raise ValueError("allocation_stat must be 'std' or 'cohesion'")
        if self.variance_probe_draws != 0 and self.variance_probe_draws < 1000:
            raise ValueError("variance_probe_draws must be 0 or >= 1000")
        PartitionSpec(self.n_clients, self.partition, self.alpha)

    @property
    def m(self) -> int:
        return max(math.floor(self.sampling_ratio * self.n_clients + 1e-9), 1)

    @property
    def clusters(self) -> int:
        return self.n_clusters or min(self.m, self.n_clients)

    def partition_spec(self) -> PartitionSpec:
        seed = int(derive_seed(self.master_seed, "partition").generate_state(1)[0])
        return PartitionSpec(self.n_clients, self.partition, self.alpha, seed)


@dataclass
class RoundMetrics:
    t: int
    test_accuracy: float
    train_loss: float
    m: int
    selected: tuple
    variance_estimate: float = float("nan")
    variance_se: float = float("nan")
    wall_time: float = 0.0
    uplink_floats: int = 0

    def same_trajectory(self, other: "RoundMetrics") -> bool:
        """Equality ignoring wall-clock time."""
        a, b = asdict(self), asdict(other)
        a.pop("wall_time"), b.pop("wall_time")
        return a == b or all(_eq_nan(a[k], b[k]) for k in a)


def _eq_nan(x, y) -> bool:
    if isinstance(x, float) and isinstance(y, float) and math.isnan(x) and math.isnan(y):
        return True
    return x == y


class RunDiverged(RuntimeError):
    def __init__(self, message: str, round_index: int, metrics: list):
        super().__init__(message)
        self.round_index = round_index
        self.metrics = metrics


def load_data(cfg: DataConfig, master_seed: int = 0):
    """Build ``(train, test)`` datasets from a data config."""
    if cfg.kind == "synthetic":
        seed = derive_seed(master_seed, "data")
        full = synth_classification(cfg.n_samples, cfg.n_features, cfg.n_classes, cfg.cluster_spread, seed)
        return train_test_split(full, cfg.test_fraction, seed.spawn(1)[0])
    train = load_idx(cfg.train_images, cfg.train_labels)
    if cfg.subset:
        train = train.subset(np.arange(min(cfg.subset, len(train))))
    if cfg.test_images and cfg.test_labels:
        test = load_idx(cfg.test_images, cfg.test_labels)
    else:
        train, test = train_test_split(train, cfg.test_fraction, derive_seed(master_seed, "data"))
    return train, test


def rounds_to_target(metrics, target: float):
    """1-based index of the first round with accuracy >= target, or None if never reached."""
    for i, row in enumerate(metrics):
        if row.test_accuracy >= target:
            return i + 1
    return None


def format_rounds(value, rounds: int) -> str:
    return f"{rounds}+" if value is None else str(value)


def estimate_round_variance(values, design: SamplingDesign, n_probe_draws: int = 1000, seed=0):
    """Monte Carlo ``Tr(V)`` of the aggregated update under a round's sampling design.

    ``values`` holds one row per client (all N of them).  Returns ``(estimate, std_err)``.
    """
    return mc_trace_variance(np.asarray(values, dtype=np.float64), design, n_probe_draws, seed)


def run(config: RunConfig, dataset, test_set: LabeledDataset, init=None, callback=None) -> list:
    """Train for ``config.rounds`` rounds (or until the target accuracy) and return per-round metrics.

    ``dataset`` is either a list of :class:`ClientShard` or a
    :class:`LabeledDataset`, which is then partitioned per ``config``.
    """
    if isinstance(dataset, LabeledDataset):
        shards = partition(dataset, config.partition_spec())
        n_features, n_classes = dataset.n_features, dataset.n_classes
    else:
        shards = list(dataset)
        n_features, n_classes = shards[0].data.n_features, shards[0].data.n_classes
    if len(shards) != config.n_clients:
        raise ValueError(f"config expects {config.n_clients} clients, got {len(shards)} shards")
    model = ModelSpec(config.model_kind, n_features, n_classes)
    scheme = Scheme(config.scheme)
    n, m, h = config.n_clients, config.m, config.clusters
    weights = np.array([s.weight for s in shards])
    comp = CompressionSpec(config.compression_rate, config.compression_max_iters)
    needs_features = scheme.clustered or scheme.uses_norms
    params = models.init_params(model, derive_rng(config.master_seed, "init")) if init is None else np.array(init)
    assignments = None
    metrics: list[RoundMetrics] = []
    for t in range(1, config.rounds + 1):
        tic = time.perf_counter()
        client_seed = int(derive_seed(config.master_seed, "client", t).generate_state(1)[0])
        train_cfg = replace(config.train, seed=client_seed)
        try:
            updates = [models.client_update(model, params, s, train_cfg) for s in shards]
        except DivergenceError as exc:
            raise RunDiverged(f"round {t}: {exc}", t, metrics) from exc
        raw = np.stack([u.raw_gradient for u in updates])

        clustering = stats = norms = None
        d_prime = 0
        if needs_features:
            feats = [compress(g, comp) for g in raw]
            x = np.stack([f.centers for f in feats])
            d_prime = x.shape[1]
            norms = np.array([f.centers_norm if config.importance_norm == "centers" else f.source_norm
                              for f in feats])
            if scheme.clustered:
                if assignments is None or (t - 1) % config.recluster_every == 0:
                    clustering = cluster_clients(x, h, derive_rng(config.master_seed, "clustering", t))
                    assignments = clustering.assignments
                else:
                    clustering = Clustering.from_assignments(assignments, x, h)
                cohesions = cluster_cohesions(x, clustering)
                stats = np.sqrt(cohesions) if config.allocation_stat == "std" else cohesions
        design = make_design(scheme, n_clients=n, m=m, clustering=clustering, stats=stats,
                             norms=norms, weights=weights)
        plan = design.sample(derive_rng(config.master_seed, "selection", t))
        by_id = {int(k): updates[int(k)] for k in np.unique(plan.chosen)}
        params = aggregate(plan, by_id, base=params).new_params

        var_est = var_se = float("nan")
        if config.variance_probe_draws:
            var_est, var_se = estimate_round_variance(
                raw, design, config.variance_probe_draws, derive_rng(config.master_seed, "monte_carlo", t))
        loss = float(weights @ np.array([u.start_loss for u in updates]))
        acc = models.accuracy(model, params, test_set)
        row = RoundMetrics(
            t=t, test_accuracy=acc, train_loss=loss, m=plan.m,
            selected=tuple(int(k) for k in plan.chosen),
            variance_estimate=float(var_est), variance_se=float(var_se),
            wall_time=time.perf_counter() - tic,
            uplink_floats=plan.m * model.dim + (n * d_prime if needs_features else 0),
        )
        metrics.append(row)
        if callback is not None:
            callback(row)
        if not math.isfinite(loss) or not np.all(np.isfinite(params)):
            raise RunDiverged(f"round {t}: non-finite loss or parameters", t, metrics)
        if config.target_accuracy is not None and acc >= config.target_accuracy:
            break
    return metrics


def metrics_to_csv(metrics) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for r in metrics:
        writer.writerow([
            r.t, repr(r.test_accuracy), repr(r.train_loss), repr(r.variance_estimate), r.m,
            f"{r.wall_time * 1000:.3f}", ";".join(str(k) for k in r.selected),
        ])
    return buf.getvalue()


def run_summary(config: RunConfig, metrics) -> dict:
    rtt = rounds_to_target(metrics, config.target_accuracy) if config.target_accuracy is not None else None
    return {
        "scheme": config.scheme,
        "master_seed": config.master_seed,
        "rounds_run": len(metrics),
        "rounds_to_target": format_rounds(rtt, config.rounds) if config.target_accuracy is not None else None,
        "target_accuracy": config.target_accuracy,
        "final_accuracy": metrics[-1].test_accuracy if metrics else None,
        "best_accuracy": max((r.test_accuracy for r in metrics), default=None),
        "mean_variance_estimate": _mean_finite([r.variance_estimate for r in metrics]),
        "uplink_floats": int(sum(r.uplink_floats for r in metrics)),
        "m": config.m,
        "n_clusters": config.clusters,
    }


def _mean_finite(values):
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else None


def summary_to_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True)
