"""Synthetic neuroimaging cohorts and their on-disk container.

A cohort has one block-partitioned template shared by all samples, and per
sample: named 3D metric volumes, named ROI networks, surface/voxel count
vectors and a phenotype vector. Subjects are observed at several timepoints
with a small drift between visits.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

METRIC_NAMES = ("FA", "MD", "L1", "RDD", "LDH-S", "LDH-K")
NETWORK_NAMES = ("FA", "FN", "FL")
PHENOTYPE_NAMES = ("sex", "age", "education", "race", "moca", "score2")

MAGIC = b"DWDGAT\0\0"
FORMAT_VERSION = 1


@dataclass
class CohortSpec:
    counts: list[int]
    timepoints: int = 3
    grid: tuple[int, int, int] = (24, 24, 24)
    n_rois: int = 90
    n_metrics: int = 6
    n_networks: int = 3
    phenotype_dim: int = 6
    rho: float = 0.8
    signal: float = 1.0
    noise: float = 0.25
    drift: float = 0.05
    seed: int = 231

    REQUIRED = ("counts", "rho", "signal", "seed")

    def __post_init__(self):
        self.counts = [int(c) for c in self.counts]
        self.grid = tuple(int(g) for g in self.grid)
        if len(self.counts) < 2 or min(self.counts) < 1:
            raise ConfigError("counts needs at least two classes with one subject each")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if self.signal < 0 or self.noise < 0:
            raise ConfigError("signal and noise must be nonnegative")
        if self.timepoints < 1 or self.n_rois < 2 or self.phenotype_dim < 1:
            raise ConfigError("timepoints >= 1, n_rois >= 2 and phenotype_dim >= 1 required")
        if self.n_metrics > len(METRIC_NAMES) or self.n_networks > len(NETWORK_NAMES):
            raise ConfigError("too many metrics or networks requested")
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ConfigError(f"grid must be three positive sizes, got {self.grid}")

    @property
    def n_classes(self) -> int:
        return len(self.counts)

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        missing = [k for k in cls.REQUIRED if k not in d]
        if missing:
            raise ConfigError(f"cohort spec is missing field {missing[0]!r}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown cohort spec field {unknown[0]!r}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


PROFILES = {
    "mini": dict(grid=(8, 8, 6), n_rois=12),
    "desk": dict(grid=(24, 24, 24), n_rois=90),
    "paper": dict(grid=(24, 24, 24), n_rois=90),
}


@dataclass
class Sample:
    subject_id: str
    timepoint: int
    label: int
    volumes: dict[str, np.ndarray]
    networks: dict[str, np.ndarray]
    surface: np.ndarray
    voxel: np.ndarray
    phenotype: np.ndarray

    @property
    def sample_id(self) -> str:
        return f"{self.subject_id}_m{self.timepoint:02d}"


@dataclass
class Cohort:
    template: np.ndarray
    samples: list[Sample] = field(default_factory=list)
    n_classes: int = 0

    @property
    def n_rois(self) -> int:
        return int(self.template.max()) if self.template.size else 0

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


def _factor3(r: int, grid) -> tuple[int, int, int]:
    """Most balanced a*b*c == r with each factor fitting its grid axis."""
    best = None
    for a in range(1, r + 1):
        if r % a:
            continue
        for b in range(1, r // a + 1):
            if (r // a) % b:
                continue
            c = r // a // b
            f = (a, b, c)
            if any(x > g for x, g in zip(f, grid)):
                continue
            score = max(x / g for x, g in zip(f, grid))
            if best is None or score < best[0]:
                best = (score, f)
    if best is None:
        raise ConfigError(f"grid {tuple(grid)} is too small to host {r} ROIs")
    return best[1]


def block_template(grid, n_rois: int) -> np.ndarray:
    """Partition the grid into ``n_rois`` contiguous boxes labelled 1..R."""
    a, b, c = _factor3(n_rois, grid)
    cuts = [np.array_split(np.arange(g), k) for g, k in zip(grid, (a, b, c))]
    tpl = np.zeros(grid, dtype=np.int64)
    label = 1
    for xs in cuts[0]:
        for ys in cuts[1]:
            for zs in cuts[2]:
                tpl[np.ix_(xs, ys, zs)] = label
                label += 1
    return tpl


def surface_fraction(template: np.ndarray, n_rois: int) -> np.ndarray:
    """Share of each ROI's voxels that touch another label or the grid edge."""
    padded = np.pad(template, 1, constant_values=-1)
    core = padded[1:-1, 1:-1, 1:-1]
    edge = np.zeros(template.shape, dtype=bool)
    for axis in range(3):
        for shift in (-1, 1):
            edge |= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1] != core
    counts = np.bincount(template.ravel(), minlength=n_rois + 1)[1:]
    surf = np.bincount(template.ravel(), weights=edge.ravel(), minlength=n_rois + 1)[1:]
    return surf / counts


def generate_cohort(spec: CohortSpec) -> Cohort:
    rng = np.random.default_rng(spec.seed)
    R, C = spec.n_rois, spec.n_classes
    tpl = block_template(spec.grid, R)
    voxel = np.bincount(tpl.ravel(), minlength=R + 1)[1:].astype(np.float64)
    surf_frac = surface_fraction(tpl, R)
    metrics = METRIC_NAMES[: spec.n_metrics]
    nets = NETWORK_NAMES[: spec.n_networks]

    # cohort-level structure, fixed by the seed
    base = rng.uniform(0.5, 2.0, size=(len(metrics), R))
    spatial = 1.0 + 0.1 * rng.standard_normal(spec.grid)
    n_marked = max(1, R // 6)
    marked = [rng.choice(R, size=n_marked, replace=False) for _ in range(C)]
    designated = [[m for m in range(len(metrics)) if m % C == c] or [c % len(metrics)] for c in range(C)]
    net_base = rng.uniform(0.0, 1.0, size=(len(nets), R, R))
    net_base = 0.5 * (net_base + net_base.transpose(0, 2, 1))
    net_scale = np.array([1.0, 1000.0, 80.0])[: len(nets)]
    protos = rng.standard_normal((C, spec.phenotype_dim))

    samples: list[Sample] = []
    for label, count in enumerate(spec.counts):
        for s in range(count):
            sid = f"c{label}s{s:03d}"
            subj_roi = 0.1 * rng.standard_normal((len(metrics), R))
            subj_net = 0.1 * rng.standard_normal((len(nets), R, R))
            subj_pheno = rng.standard_normal(spec.phenotype_dim)
            drift_dir = rng.standard_normal(spec.phenotype_dim)
            subj_surf = 1.0 + 0.05 * rng.standard_normal(R)
            for t in range(spec.timepoints):
                month = 12 * t
                drift = spec.drift * t
                roi_level = base * (1.0 + subj_roi + drift * 0.1)
                for m in designated[label]:
                    roi_level[m, marked[label]] += spec.signal * base[m, marked[label]]
                volumes = {}
                for m, name in enumerate(metrics):
                    mean = roi_level[m][tpl - 1] * spatial
                    vol = mean + spec.noise * base[m][tpl - 1] * rng.standard_normal(spec.grid)
                    volumes[name] = np.maximum(vol, 0.0)
                networks = {}
                for n, name in enumerate(nets):
                    a = net_base[n] * (1.0 + subj_net[n])
                    blk = marked[label]
                    a[np.ix_(blk, blk)] += spec.signal * 0.5
                    a = a + spec.noise * 0.2 * rng.standard_normal((R, R))
                    a = np.maximum(0.5 * (a + a.T), 0.0)
                    np.fill_diagonal(a, 0.0)
                    networks[name] = a * net_scale[n]
                surface = np.floor(voxel * np.clip(surf_frac * subj_surf, 0.0, 1.0))
                noise = subj_pheno + drift * drift_dir
                z = spec.rho * protos[label] + (1.0 - spec.rho) * noise
                samples.append(
                    Sample(sid, month, label, volumes, networks, surface, voxel.copy(), phenotype_columns(z))
                )
    return Cohort(tpl, samples, C)


def phenotype_columns(z: np.ndarray) -> np.ndarray:
    """Map a latent vector to phenotype-like columns.

    The first six entries become sex (+/-1), age, education, race (code in
    {-1, 0, 1}), and two clinical scores, all centred; extra entries pass
    through unchanged.
    """
    out = np.array(z, dtype=np.float64)
    if len(out) >= 1:
        out[0] = 1.0 if z[0] >= 0 else -1.0
    if len(out) >= 2:
        out[1] = 8.0 * z[1]
    if len(out) >= 3:
        out[2] = 3.0 * z[2]
    if len(out) >= 4:
        out[3] = float(np.clip(np.rint(z[3]), -1, 1))
    if len(out) >= 5:
        out[4] = 2.0 * z[4]
    if len(out) >= 6:
        out[5] = 5.0 * z[5]
    if not np.any(out):
        out[0] = 1.0
    return out


# --------------------------------------------------------------------------
# container format
#
#   MAGIC (8 bytes) | version u32 LE | manifest length u64 LE | manifest JSON | payload
#
# The payload is a concatenation of little-endian float64 arrays; the
# manifest lists every array with its record index, name, shape and offset.


def _records(cohort: Cohort):
    yield -1, "template", cohort.template.astype(np.float64)
    for i, s in enumerate(cohort.samples):
        for name, v in s.volumes.items():
            yield i, f"volume:{name}", v
        for name, v in s.networks.items():
            yield i, f"network:{name}", v
        yield i, "surface", s.surface
        yield i, "voxel", s.voxel
        yield i, "phenotype", s.phenotype


def dataset_bytes(cohort: Cohort) -> bytes:
    arrays, offset = [], 0
    chunks = []
    for rec, name, arr in _records(cohort):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        arrays.append({"record": rec, "name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format": "dwdgat-dataset",
        "version": FORMAT_VERSION,
        "n_classes": cohort.n_classes,
        "samples": [
            {"subject_id": s.subject_id, "timepoint": s.timepoint, "label": s.label} for s in cohort.samples
        ],
        "arrays": arrays,
        "payload_bytes": offset,
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(chunks)


def write_dataset(cohort: Cohort, path) -> str:
    """Write ``cohort`` to ``path``; returns the SHA-256 of the file contents."""
    data = dataset_bytes(cohort)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_dataset(path) -> Cohort:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a dataset file (bad header)")
    version, mlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    start = len(MAGIC) + 12
    try:
        manifest = json.loads(data[start : start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: manifest is corrupt ({exc})") from None
    payload = memoryview(data)[start + mlen :]

    template = None
    samples = [
        Sample(m["subject_id"], int(m["timepoint"]), int(m["label"]), {}, {}, None, None, None)
        for m in manifest["samples"]
    ]
    for a in manifest["arrays"]:
        rec, name, shape = a["record"], a["name"], tuple(a["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        end = a["offset"] + nbytes
        if end > len(payload):
            where = "template" if rec < 0 else f"record {rec}"
            raise DataError(f"{path}: truncated data in {where} ({name})")
        arr = np.frombuffer(payload[a["offset"] : end], dtype="<f8").reshape(shape).astype(np.float64)
        if rec < 0:
            template = arr.astype(np.int64)
            continue
        if rec >= len(samples):
            raise DataError(f"{path}: array {name} refers to missing record {rec}")
        s = samples[rec]
        kind, _, key = name.partition(":")
        if kind == "volume":
            s.volumes[key] = arr
        elif kind == "network":
            s.networks[key] = arr
        elif name in ("surface", "voxel", "phenotype"):
            setattr(s, name, arr)
        else:
            raise DataError(f"{path}: record {rec} has unknown array {name!r}")
    if template is None:
        raise DataError(f"{path}: template missing")
    for i, s in enumerate(samples):
        if s.surface is None or s.voxel is None or s.phenotype is None:
            raise DataError(f"{path}: record {i} is incomplete")
    return Cohort(template, samples, int(manifest["n_classes"]))


def dataset_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
