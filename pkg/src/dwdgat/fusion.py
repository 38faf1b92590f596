"""Fuse 1D ROI statistics, 2D ROI networks and 3D metric volumes into one
per-sample ROI feature matrix.

Column order of the fused matrix (documented, fixed)::

    surface_ratio,
    net:<network name>                       one per network, in input order
    <metric>:centroid, <metric>:mean, <metric>:max   one triple per metric

so ``F = 1 + n_networks + 3 * n_metrics``. Every entry lies in [0, 1].
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoiStatistics:
    centroid: tuple[float, float, float]
    centroid_weight: float
    mean_weight: float
    max_weight: float


def fuse_stat_vectors(surface, voxel) -> np.ndarray:
    """Surface-voxel count over total voxel count, per ROI."""
    surface = np.asarray(surface, dtype=np.float64)
    voxel = np.asarray(voxel, dtype=np.float64)
    if surface.shape != voxel.shape:
        raise ConfigError(f"stat vectors differ in length: {surface.shape} vs {voxel.shape}")
    empty = np.flatnonzero(voxel <= 0)
    if empty.size:
        raise DataError(f"ROI {int(empty[0]) + 1} has no voxels in the template")
    return surface / voxel


def reduce_network(net) -> np.ndarray:
    """Min-max scale the whole network, take L1 row norms, divide by the largest norm."""
    net = np.asarray(net, dtype=np.float64)
    if net.ndim != 2 or net.shape[0] != net.shape[1]:
        raise ConfigError(f"network must be square, got {net.shape}")
    if not np.isfinite(net).all():
        raise DataError("network contains non-finite entries")
    lo, hi = net.min(), net.max()
    if hi == lo:
        log.warning("constant network: emitting an all-zero vector")
        return np.zeros(net.shape[0])
    scaled = (net - lo) / (hi - lo)
    rows = np.abs(scaled).sum(axis=1)
    top = rows.max()
    return rows / top if top > 0 else rows


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _centroid_voxel(centroid, dims) -> tuple[int, int, int]:
    idx = round_half_away(centroid).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(dims) - 1)
    return tuple(int(v) for v in idx)


def roi_statistics(volume, template, r: int) -> RoiStatistics:
    """Weighted centroid, centroid weight, mean and max weight of ROI ``r``.

    A ROI whose weights sum to zero gets the unweighted centroid and a
    centroid weight of zero.
    """
    volume = np.asarray(volume, dtype=np.float64)
    template = np.asarray(template)
    if volume.shape != template.shape:
        raise ConfigError(f"volume {volume.shape} and template {template.shape} differ")
    coords = np.argwhere(template == r)
    if len(coords) == 0:
        raise DataError(f"ROI {r} is empty in the template")
    w = volume[tuple(coords.T)]
    mass = w.sum()
    if mass > 0:
        centroid = (coords * w[:, None]).sum(axis=0) / mass
        cw = float(volume[_centroid_voxel(centroid, volume.shape)])
    else:
        centroid = coords.mean(axis=0)
        cw = 0.0
    return RoiStatistics(tuple(float(c) for c in centroid), cw, float(w.mean()), float(w.max()))


def metric_statistics(volume, template, n_rois: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`roi_statistics` over ROIs ``1..n_rois``.

    Returns ``(centroids (R, 3), stats (R, 3))`` with stats columns
    (centroid weight, mean weight, max weight).
    """
    volume = np.asarray(volume, dtype=np.float64)
    template = np.asarray(template)
    if volume.shape != template.shape:
        raise ConfigError(f"volume {volume.shape} and template {template.shape} differ")
    labels = template.ravel().astype(np.int64)
    w = volume.ravel()
    size = n_rois + 1
    counts = np.bincount(labels, minlength=size)[1:size]
    if (counts == 0).any():
        raise DataError(f"ROI {int(np.flatnonzero(counts == 0)[0]) + 1} is empty in the template")
    grid = np.indices(volume.shape).reshape(3, -1).astype(np.float64)
    mass = np.bincount(labels, weights=w, minlength=size)[1:size]
    weighted = np.stack([np.bincount(labels, weights=g * w, minlength=size)[1:size] for g in grid], axis=1)
    plain = np.stack([np.bincount(labels, weights=g, minlength=size)[1:size] for g in grid], axis=1)
    zero = mass <= 0
    with np.errstate(invalid="ignore", divide="ignore"):
        centroids = np.where(zero[:, None], plain / counts[:, None], weighted / mass[:, None])
    idx = np.clip(round_half_away(centroids).astype(np.int64), 0, np.asarray(volume.shape) - 1)
    cw = np.where(zero, 0.0, volume[idx[:, 0], idx[:, 1], idx[:, 2]])
    maxw = np.zeros(size)
    inside = labels > 0
    np.maximum.at(maxw, labels[inside & (labels < size)], w[inside & (labels < size)])
    stats = np.stack([cw, mass / counts, maxw[1:size]], axis=1)
    return centroids, stats


def normalize_roi_statistics(stats) -> np.ndarray:
    """Divide centroid and mean weight by the ROI max, scale the max by the global max.

    ``stats`` is (R, 3): (centroid weight, mean weight, max weight).
    """
    stats = np.asarray(stats, dtype=np.float64)
    w, mean, top = stats[:, 0], stats[:, 1], stats[:, 2]
    out = np.zeros_like(stats)
    live = top > 0
    out[live, 0] = w[live] / top[live]
    out[live, 1] = mean[live] / top[live]
    peak = top.max() if len(top) else 0.0
    if peak > 0:
        out[:, 2] = top / peak
    else:
        log.warning("metric has zero signal in every ROI: emitting zeros")
    return out


def column_names(network_names: Sequence[str], metric_names: Sequence[str]) -> list[str]:
    cols = ["surface_ratio"]
    cols += [f"net:{n}" for n in network_names]
    for m in metric_names:
        cols += [f"{m}:centroid", f"{m}:mean", f"{m}:max"]
    return cols


def assemble_fused_matrix(stat_vec, network_vecs: Sequence, metric_triples: Sequence) -> np.ndarray:
    stat_vec = np.asarray(stat_vec, dtype=np.float64)
    n_rois = stat_vec.shape[0]
    parts = [stat_vec[:, None]]
    for i, v in enumerate(network_vecs):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (n_rois,):
            raise ConfigError(f"network vector {i} has shape {v.shape}, expected ({n_rois},)")
        parts.append(v[:, None])
    for i, t in enumerate(metric_triples):
        t = np.asarray(t, dtype=np.float64)
        if t.shape != (n_rois, 3):
            raise ConfigError(f"metric triple block {i} has shape {t.shape}, expected ({n_rois}, 3)")
        parts.append(t)
    return np.concatenate(parts, axis=1)


def fuse_sample(sample, template, n_rois: int | None = None) -> np.ndarray:
    """Full fusion of one :class:`dwdgat.datagen.Sample` into an (R, F) matrix."""
    n_rois = n_rois or len(sample.voxel)
    stat = fuse_stat_vectors(sample.surface, sample.voxel)
    nets = [reduce_network(sample.networks[k]) for k in sample.networks]
    triples = []
    for name, vol in sample.volumes.items():
        _, stats = metric_statistics(vol, template, n_rois)
        if (stats[:, 2] <= 0).any():
            r = int(np.flatnonzero(stats[:, 2] <= 0)[0]) + 1
            log.warning("sample %s metric %s: ROI %d has zero mass", sample.sample_id, name, r)
        triples.append(normalize_roi_statistics(stats))
    return assemble_fused_matrix(stat, nets, triples)


def write_fused_csv(path, matrix, columns: Sequence[str]) -> None:
    matrix = np.asarray(matrix)
    if matrix.shape[1] != len(columns):
        raise ConfigError(f"{len(columns)} column names for {matrix.shape[1]} columns")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["roi", *columns])
        for r, row in enumerate(matrix, start=1):
            writer.writerow([r, *(repr(float(v)) for v in row)])


def read_fused_csv(path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return np.array([[float(v) for v in row[1:]] for row in body]), header[1:]


def fused_columns_for(sample) -> list[str]:
    return column_names(list(sample.networks), list(sample.volumes))


def fuse_cohort(samples: Sequence, template, n_rois: int) -> np.ndarray:
    return np.stack([fuse_sample(s, template, n_rois) for s in samples]) if samples else np.zeros((0, n_rois, 0))
