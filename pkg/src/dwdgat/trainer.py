"""Cooperative training loop, grouped cross-validation, metrics and cost estimates."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import numerics as nx
from .cwg import ClassWeightGenerator, loss_classifier, loss_generator, mask_graphs, weight_transform
from .errors import ConfigError, NumericError
from .fusion import fuse_sample
from .gga import DGAT, GRAPH_MODES, build_graph
from .sga import centrality_pool

log = logging.getLogger(__name__)

METRIC_KEYS = ("accuracy", "balanced_accuracy", "f1_weighted", "specificity_macro")


@dataclass
class TrainConfig:
    n_rois: int = 90
    n_features: int = 22
    dim: int = 384
    depth: int = 12
    encoder_heads: int = 6
    graph_heads: int = 6
    n_classes: int = 3
    batch_size: int = 64
    epochs: int = 500
    learning_rate: float = 0.001
    dropout: float = 0.5
    alpha: float = 0.5
    seed: int = 231
    folds: int = 10
    graph_mode: str = "phenotype"
    use_cwg: bool = True
    cwg_fusion: str = "select"
    similarity: str = "centrality"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        for h in (self.encoder_heads, self.graph_heads):
            if h < 1 or self.dim % h:
                raise ConfigError(f"dim {self.dim} not divisible by head count {h}")
        if self.graph_mode not in GRAPH_MODES:
            raise ConfigError(f"unknown graph mode {self.graph_mode!r}; expected one of {GRAPH_MODES}")
        if min(self.n_rois, self.n_classes, self.depth, self.epochs, self.folds) < 1 or self.n_rois < 2:
            raise ConfigError("n_rois >= 2 and positive depth, classes, epochs, folds required")
        if not 0.0 <= self.dropout < 1.0 or self.learning_rate <= 0:
            raise ConfigError("dropout must lie in [0, 1) and learning_rate must be positive")

    @property
    def in_features(self) -> int:
        return self.n_features + 1

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config field {unknown[0]!r}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


PROFILES = {
    "mini": dict(n_rois=12, dim=8, depth=2, encoder_heads=2, graph_heads=2, batch_size=4),
    "desk": dict(n_rois=90, dim=32, depth=2, encoder_heads=4, graph_heads=4, batch_size=16),
    "paper": dict(),
}


def profile_config(name: str, **overrides) -> TrainConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}")
    return TrainConfig.from_dict({**PROFILES[name], **overrides})


# --------------------------------------------------------------------------
# data


@dataclass
class PreparedData:
    x1: np.ndarray  # (S, R, F')
    phenotypes: np.ndarray  # (S, P)
    labels: np.ndarray  # (S,)
    subjects: list[str]
    sample_ids: list[str]
    n_classes: int

    def __len__(self) -> int:
        return len(self.labels)


def prepare(cohort, similarity: str = "centrality") -> PreparedData:
    """Fuse and pool every sample of a cohort."""
    R = cohort.n_rois
    x1 = np.stack([centrality_pool(fuse_sample(s, cohort.template, R), similarity) for s in cohort.samples])
    return PreparedData(
        x1,
        np.stack([s.phenotype for s in cohort.samples]),
        cohort.labels(),
        [s.subject_id for s in cohort.samples],
        [s.sample_id for s in cohort.samples],
        cohort.n_classes,
    )


def onehot(labels, n_classes: int) -> torch.Tensor:
    return torch.nn.functional.one_hot(torch.as_tensor(labels, dtype=torch.long), n_classes).to(nx.DTYPE)


def batch_graph(mode: str, data: PreparedData, idx) -> torch.Tensor:
    a = build_graph(mode, phenotypes=data.phenotypes[idx], features=data.x1[idx], labels=data.labels[idx])
    return nx.as_tensor(a)


# --------------------------------------------------------------------------
# folds


@dataclass
class FoldSplit:
    """Sample indices (into the cohort order) on each side of one fold."""

    fold_id: int
    train_sample_ids: np.ndarray
    test_sample_ids: np.ndarray


def grouped_kfold(subjects: Sequence[str], k: int, seed: int) -> list[FoldSplit]:
    """K folds over subjects: every sample of a subject lands in the same fold."""
    subjects = list(subjects)
    unique = sorted(set(subjects))
    if k > len(unique):
        raise ConfigError(f"{k} folds requested but only {len(unique)} subjects")
    if k < 2:
        raise ConfigError("at least two folds are required")
    order = np.random.default_rng(seed).permutation(len(unique))
    groups = np.array_split(np.array(unique, dtype=object)[order], k)
    fold_of = {s: f for f, g in enumerate(groups) for s in g}
    which = np.array([fold_of[s] for s in subjects])
    return [
        FoldSplit(f, np.flatnonzero(which != f), np.flatnonzero(which == f)) for f in range(k)
    ]


# --------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    accuracy: float
    balanced_accuracy: float
    f1_weighted: float
    specificity_macro: float
    confusion_matrix: list[list[int]]

    def as_dict(self) -> dict:
        return asdict(self)


def confusion(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def evaluate(y_true, y_pred, n_classes: int | None = None, quiet: bool = False) -> MetricsReport:
    """ACC, BA (mean recall over present classes), support-weighted F1, macro one-vs-rest SPE.

    ``y_pred`` may be label indices (N,) or scores (N, C). Classes absent
    from ``y_true`` are left out of BA with a warning unless ``quiet``.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred)
    if y_pred.ndim == 2:
        y_pred = y_pred.argmax(axis=1)
    if y_true.size == 0:
        raise ConfigError("cannot evaluate an empty prediction set")
    if y_true.shape != y_pred.shape:
        raise ConfigError(f"{y_true.shape[0]} labels vs {y_pred.shape[0]} predictions")
    C = n_classes or int(max(y_true.max(), y_pred.max()) + 1)
    cm = confusion(y_true, y_pred, C)
    n = cm.sum()
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    present = support > 0
    if not present.all() and not quiet:
        log.warning("classes %s absent from the evaluated labels", np.flatnonzero(~present).tolist())
    recall = np.divide(tp, support, out=np.zeros(C), where=present)
    precision = np.divide(tp, predicted, out=np.zeros(C), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(C), where=denom > 0)
    negatives = n - support
    fp = predicted - tp
    spec = np.divide(negatives - fp, negatives, out=np.ones(C), where=negatives > 0)
    return MetricsReport(
        accuracy=float(tp.sum() / n),
        balanced_accuracy=float(recall[present].mean()),
        f1_weighted=float((f1 * support).sum() / n),
        specificity_macro=float(spec.mean()),
        confusion_matrix=cm.tolist(),
    )


# --------------------------------------------------------------------------
# training


def build_models(config: TrainConfig) -> tuple[DGAT, ClassWeightGenerator | None]:
    args = (
        config.n_rois,
        config.in_features,
        config.dim,
        config.depth,
        config.encoder_heads,
        config.graph_heads,
        config.n_classes,
        config.dropout,
    )
    model = DGAT(*args)
    gen = ClassWeightGenerator(*args, fusion=config.cwg_fusion) if config.use_cwg else None
    return model, gen


def iterate_batches(indices: np.ndarray, batch_size: int, rng: np.random.Generator | None = None):
    """ceil(n / batch_size) batches whose sizes differ by at most one.

    Even sizes avoid a tiny remainder batch, whose graph would give each
    sample almost no neighbours.
    """
    idx = np.asarray(indices)
    if rng is not None:
        idx = idx[rng.permutation(len(idx))]
    n_batches = -(-len(idx) // batch_size)
    yield from np.array_split(idx, n_batches) if n_batches else ()


def train_step(model, gen, opt_model, opt_gen, x1, adj, y, alpha: float) -> tuple[float, float]:
    """One batch of the cooperative update: generator first, then the classifier."""
    if gen is not None:
        masked = mask_graphs(adj, y)
        w1 = gen(x1, masked)
        scores, sga_logits = model(x1, adj)
        l3 = loss_generator(scores, y, w1, alpha)
        if not torch.isfinite(l3):
            raise NumericError(f"generator loss is {l3.item()}")
        opt_gen.zero_grad()
        l3.backward()
        nx.adam_step(opt_gen)
        with torch.no_grad():
            w2 = gen(x1, masked)
        _, R = weight_transform(w2)
        l3_value = l3.item()
    else:
        scores, sga_logits = model(x1, adj)
        R = torch.ones_like(scores)
        l3_value = math.nan
    l1 = loss_classifier(scores, y, R, sga_logits)
    if not torch.isfinite(l1):
        raise NumericError(f"classifier loss is {l1.item()}")
    opt_model.zero_grad()
    l1.backward()
    nx.adam_step(opt_model)
    return l1.item(), l3_value


def train_epoch(
    model,
    gen,
    opt_model,
    opt_gen,
    data: PreparedData,
    indices,
    config: TrainConfig,
    rng: np.random.Generator,
    epoch: int = 0,
) -> tuple[float, float]:
    """Runs every training batch once; returns the epoch-mean (L1, L3)."""
    model.train()
    if gen is not None:
        gen.train()
    l1s, l3s = [], []
    for b, idx in enumerate(iterate_batches(indices, config.batch_size, rng)):
        x1 = nx.as_tensor(data.x1[idx])
        adj = batch_graph(config.graph_mode, data, idx)
        y = onehot(data.labels[idx], config.n_classes)
        try:
            l1, l3 = train_step(model, gen, opt_model, opt_gen, x1, adj, y, config.alpha)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from None
        l1s.append(l1)
        l3s.append(l3)
    return float(np.mean(l1s)), float(np.mean(l3s))


@torch.no_grad()
def predict(model, data: PreparedData, indices, config: TrainConfig) -> np.ndarray:
    """Class scores for ``indices``, graph built per batch of ``batch_size``."""
    model.eval()
    out = []
    for idx in iterate_batches(indices, config.batch_size):
        scores, _ = model(nx.as_tensor(data.x1[idx]), batch_graph(config.graph_mode, data, idx))
        out.append(scores.numpy())
    return np.concatenate(out) if out else np.zeros((0, config.n_classes))


@dataclass
class FoldResult:
    fold_id: int
    best_epoch: int
    metrics: MetricsReport
    history: list[dict] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)
    test_labels: list[int] = field(default_factory=list)
    test_scores: list[list[float]] = field(default_factory=list)


def run_fold(config: TrainConfig, data: PreparedData, split: FoldSplit) -> FoldResult:
    seed = config.seed + split.fold_id
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model, gen = build_models(config)
    opt_model = nx.make_adam(model.parameters(), lr=config.learning_rate)
    opt_gen = nx.make_adam(gen.parameters(), lr=config.learning_rate) if gen is not None else None
    test = split.test_sample_ids
    y_test = data.labels[test]
    best = None
    history = []
    for epoch in range(1, config.epochs + 1):
        l1, l3 = train_epoch(model, gen, opt_model, opt_gen, data, split.train_sample_ids, config, rng, epoch)
        scores = predict(model, data, test, config)
        report = evaluate(y_test, scores, config.n_classes, quiet=epoch > 1)
        history.append(
            dict(
                epoch=epoch,
                mean_L1=l1,
                mean_L3=l3,
                test_accuracy=report.accuracy,
                test_balanced_accuracy=report.balanced_accuracy,
            )
        )
        if best is None or report.accuracy > best[1].accuracy:
            best = (epoch, report, scores)
        log.info("fold %d epoch %d L1 %.4f L3 %.4f acc %.3f", split.fold_id, epoch, l1, l3, report.accuracy)
    epoch, report, scores = best
    return FoldResult(
        split.fold_id,
        epoch,
        report,
        history,
        [data.sample_ids[i] for i in test],
        y_test.tolist(),
        scores.tolist(),
    )


def _run_fold_job(args):
    return run_fold(*args)


@dataclass
class ExperimentResult:
    config: TrainConfig
    folds: list[FoldResult]

    def summary(self) -> dict:
        out = {}
        for key in METRIC_KEYS:
            vals = np.array([getattr(f.metrics, key) for f in self.folds])
            out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    def mean(self, key: str) -> float:
        return self.summary()[key]["mean"]

    def mean_loss(self, epoch: int, key: str = "mean_L1") -> float:
        return float(np.mean([f.history[epoch - 1][key] for f in self.folds]))


def run_experiment(
    config: TrainConfig,
    data: PreparedData,
    graph_mode: str | None = None,
    out_dir=None,
    parallel_folds: int = 1,
    max_folds: int | None = None,
) -> ExperimentResult:
    """Grouped cross-validation of the full pipeline with the chosen adjacency construction.

    ``max_folds`` evaluates only the first folds of the ``config.folds`` partition.
    """
    if graph_mode is not None:
        config = replace(config, graph_mode=graph_mode)
    config.validate()
    if data.x1.shape[1:] != (config.n_rois, config.in_features):
        raise ConfigError(
            f"data has ROI matrices {data.x1.shape[1:]}, config expects ({config.n_rois}, {config.in_features})"
        )
    splits = grouped_kfold(data.subjects, config.folds, config.seed)[:max_folds]
    jobs = [(config, data, s) for s in splits]
    if parallel_folds > 1:
        with ProcessPoolExecutor(max_workers=parallel_folds) as pool:
            results = list(pool.map(_run_fold_job, jobs))
    else:
        results = [_run_fold_job(j) for j in jobs]
    result = ExperimentResult(config, results)
    if out_dir is not None:
        write_outputs(result, data, out_dir)
    return result


# --------------------------------------------------------------------------
# outputs


def metrics_document(result: ExperimentResult) -> dict:
    return {
        "graph_mode": result.config.graph_mode,
        "config": result.config.to_dict(),
        "folds": [
            {"fold": f.fold_id, "best_epoch": f.best_epoch, **f.metrics.as_dict()} for f in result.folds
        ],
        "summary": result.summary(),
    }


def write_outputs(result: ExperimentResult, data: PreparedData, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out / "metrics.json",
        "loss_history": out / "loss_history.csv",
        "roc_points": out / "roc_points.csv",
        "adjacency_heatmap": out / "adjacency_heatmap.csv",
        "cost_estimate": out / "cost_estimate.json",
    }
    paths["metrics"].write_text(json.dumps(metrics_document(result), indent=2, sort_keys=True) + "\n")

    with open(paths["loss_history"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "epoch", "mean_L1", "mean_L3", "test_accuracy", "test_balanced_accuracy"])
        for f in result.folds:
            for h in f.history:
                w.writerow([f.fold_id, h["epoch"], repr(h["mean_L1"]), repr(h["mean_L3"]),
                            repr(h["test_accuracy"]), repr(h["test_balanced_accuracy"])])

    with open(paths["roc_points"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "sample_id", "class", "score", "is_class"])
        for f in result.folds:
            probs = torch.softmax(torch.tensor(f.test_scores, dtype=nx.DTYPE), dim=1).numpy() if f.test_scores else []
            for sid, label, p in zip(f.test_ids, f.test_labels, probs):
                for c in range(result.config.n_classes):
                    w.writerow([f.fold_id, sid, c, repr(float(p[c])), int(label == c)])

    write_adjacency_heatmap(paths["adjacency_heatmap"], result.config, data)
    paths["cost_estimate"].write_text(json.dumps(estimate_cost(result.config).as_dict(), indent=2) + "\n")
    return paths


def write_adjacency_heatmap(path, config: TrainConfig, data: PreparedData, n: int | None = None) -> np.ndarray:
    """Dump the batch graph over the first ``batch_size`` samples, sorted by label."""
    idx = np.argsort(data.labels, kind="stable")[: n or config.batch_size]
    adj = batch_graph(config.graph_mode, data, idx).numpy()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *[f"s{j}" for j in range(len(idx))]])
        for lab, row in zip(data.labels[idx], adj):
            w.writerow([int(lab), *(repr(float(v)) for v in row)])
    return adj


# --------------------------------------------------------------------------
# cost estimate


def matmul_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


@dataclass
class CostEstimate:
    classifier_flops: int
    generator_flops: int
    classifier_activation_bytes: int
    generator_activation_bytes: int
    breakdown: dict[str, int]

    def as_dict(self) -> dict:
        return asdict(self)


def _encoder_flops(N, R, Fp, E, L, C) -> dict[str, int]:
    T = R + 1
    per_layer = (
        matmul_flops(T, E, 3 * E)  # qkv
        + 2 * matmul_flops(T, E, T)  # scores and weighted values, summed over heads
        + matmul_flops(T, E, E)  # output projection
        + matmul_flops(T, E, 4 * E)
        + matmul_flops(T, 4 * E, E)  # feed-forward
    )
    return {
        "sga_embedding": N * matmul_flops(R, Fp, E),
        "sga_encoder": N * L * per_layer,
        "sga_head": N * matmul_flops(1, E, C),
    }


def _gga_flops(N, E, C) -> dict[str, int]:
    out = {"gga_projection": 0, "gga_attention": 0}
    for e_in, e_out in ((E, 2 * E), (2 * E, 4 * E)):
        out["gga_projection"] += 3 * (matmul_flops(N, e_in, e_out) + N * N * e_out)
        out["gga_attention"] += N * 2 * matmul_flops(N, e_out, N)
    out["gga_fc"] = matmul_flops(N, 4 * E, 2 * E)
    out["gga_head"] = matmul_flops(N, 2 * E, C)
    return out


def estimate_cost(config: TrainConfig, batch: int | None = None) -> CostEstimate:
    """Forward FLOPs (2 per multiply-add) and activation memory (bytes, float64) for one batch.

    The graph stage projects once per node (N E^2) and rescales per sample
    (N^2 E); its attention costs N^3 E and is reported as ``gga_cubic``.
    """
    N = batch or config.batch_size
    R, Fp, E, L, C = config.n_rois, config.in_features, config.dim, config.depth, config.n_classes
    Hp, H = config.encoder_heads, config.graph_heads
    enc = _encoder_flops(N, R, Fp, E, L, C)
    gga = _gga_flops(N, E, C)
    mlp = N * (matmul_flops(1, C, 2 * C) + matmul_flops(1, 2 * C, C))
    classifier = sum(enc.values()) + sum(gga.values())
    generator = sum(enc.values()) + C * (sum(gga.values()) + mlp)

    T = R + 1
    enc_mem = N * R * (Fp + E) + L * (N * Hp * T * (T + E) + N * T * 4 * E)
    gga_mem = N * H * N * (N + 2 * E) + N * H * N * (N + 4 * E) + N * 2 * E
    classifier_mem = 8 * (enc_mem + gga_mem)
    generator_mem = 8 * (enc_mem + C * (gga_mem + N * 3 * C))
    breakdown = {**enc, **gga, "gga_cubic": gga["gga_attention"], "bn_mlp": mlp}
    return CostEstimate(classifier, generator, classifier_mem, generator_mem, breakdown)
