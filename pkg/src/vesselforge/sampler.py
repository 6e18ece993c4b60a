"""Training-stream assembly: source mixture, class sampling, and the two augmentation suites."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from vesselforge import compose, volume as vol
from vesselforge.rng import Rng

SOURCES = ("drand", "real", "flow")
EVAL_EXCLUDED = (1, 2, 3, 4)
# substreams of a stream position
SUB_SOURCE, SUB_CLASS, SUB_AUGMENT = 0, 1, 3


class SamplerError(RuntimeError):
    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class SourceWeights:
    drand: float = 0.7
    real: float = 0.2
    flow: float = 0.1

    def __post_init__(self):
        w = self.as_array()
        if np.any(w < 0):
            raise ValueError("source weights must be non-negative")
        if abs(float(w.sum()) - 1.0) > 1e-6:
            raise ValueError(f"source weights must sum to 1, got {float(w.sum())}")

    def as_array(self):
        return np.array([self.drand, self.real, self.flow], dtype=np.float64)

    @classmethod
    def parse(cls, text):
        parts = [float(p) for p in str(text).split(",")]
        if len(parts) != 3:
            raise ValueError("expected three comma-separated weights")
        return cls(*parts)


def sample_source(weights: SourceWeights, rng):
    """Categorical draw by inverse CDF on one uniform."""
    cdf = np.cumsum(weights.as_array())
    u = rng.random() * cdf[-1]
    return SOURCES[min(int(np.searchsorted(cdf, u, side="right")), len(SOURCES) - 1)]


@dataclass
class ClassCatalog:
    """Classes 1..23 of the real sources (0 is the synthetic class).

    ``counts`` maps class id to the number of available samples; excluded
    classes are never drawn. ``weights`` optionally overrides uniformity.
    """

    counts: dict = field(default_factory=lambda: {c: 1 for c in range(1, 24)})
    excluded: tuple = ()
    weights: Optional[dict] = None

    def available(self):
        return [c for c in sorted(self.counts) if c not in set(self.excluded) and self.counts[c] > 0]

    def probabilities(self):
        avail = self.available()
        if not avail:
            raise SamplerError("no-classes", "every class is excluded")
        if self.weights is None:
            w = np.ones(len(avail))
        else:
            w = np.array([float(self.weights.get(c, 0.0)) for c in avail])
            if w.sum() <= 0:
                raise SamplerError("no-classes", "class weights leave nothing to sample")
        return avail, w / w.sum()


def sample_class(catalog: ClassCatalog, rng):
    avail, p = catalog.probabilities()
    if len(avail) == 1:
        rng.random()  # keep one draw per call regardless of catalogue size
        return avail[0]
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return avail[min(int(np.searchsorted(cdf, u, side="right")), len(avail) - 1)]


# ---------------------------------------------------------------- augmentation


@dataclass
class OfflineTrainSpec:
    flip: bool = True
    rotate_deg: tuple = (0.0, 10.0)
    elastic_sigma: tuple = (10.0, 20.0)
    elastic_magnitude: tuple = (100.0, 500.0)
    elastic_spacing: int = 1
    zoom: tuple = (0.9, 1.3)


@dataclass
class FineTuneSpec:
    zoom: tuple = (1.0, 1.3)
    shear: tuple = (0.0, 0.4)
    flip: bool = True
    smooth_sigma: tuple = (0.0, 0.5)
    noise_mean: float = 0.3
    noise_sigma: tuple = (0.0, 0.01)
    noise_prob: float = 1.0
    histogram_points: tuple = (5, 10)


@dataclass
class AugmentationSpec:
    suite: str = "offline"
    offline: OfflineTrainSpec = field(default_factory=OfflineTrainSpec)
    finetune: FineTuneSpec = field(default_factory=FineTuneSpec)

    def validate(self):
        if self.suite not in ("offline", "finetune"):
            raise ValueError(f"unknown augmentation suite {self.suite!r}")


def rotation_matrix(axis, degrees):
    """Rotation by ``degrees`` in the plane orthogonal to ``axis`` (z, y, x ordering)."""
    a, b = {0: (1, 2), 1: (2, 0), 2: (0, 1)}[int(axis)]
    c, s = math.cos(math.radians(degrees)), math.sin(math.radians(degrees))
    m = np.eye(3)
    m[a, a], m[a, b], m[b, a], m[b, b] = c, -s, s, c
    return m


def shear_matrix(factors):
    """Unit lower/upper shear with ``factors`` for the (y|z), (x|z), (x|y) axis pairs."""
    m = np.eye(3)
    m[1, 0], m[2, 0], m[2, 1] = factors
    return m


def _flip_draws(flag, rng):
    flips = rng.random(3) < 0.5
    return tuple(int(a) for a in np.flatnonzero(flips)) if flag else ()


def _clip01(img):
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _augment_offline(img, label, spec: OfflineTrainSpec, rng):
    flips = _flip_draws(spec.flip, rng)
    axis = int(rng.integers(3))
    angle = float(rng.uniform(*spec.rotate_deg))
    sigma = float(rng.uniform(*spec.elastic_sigma))
    magnitude = float(rng.uniform(*spec.elastic_magnitude))
    noise = vol.elastic_noise(img.shape, spec.elastic_spacing, rng)
    zoom = float(rng.uniform(*spec.zoom))

    img = vol.flip_rotate(img, flips)
    label = vol.flip_rotate(label, flips)
    if angle != 0.0:
        rot = rotation_matrix(axis, angle)
        img, label = vol.affine_warp(img, rot), vol.affine_warp(label, rot)
    if magnitude > 0:
        control = vol.smooth_control_noise(noise, spec.elastic_spacing, sigma)
        img = vol.warp_control(img, control, magnitude)
        label = vol.warp_control(label, control, magnitude)
    img, label = vol.zoom(img, zoom), vol.zoom(label, zoom)
    return _clip01(img), label


def _augment_finetune(img, label, spec: FineTuneSpec, rng):
    zoom = float(rng.uniform(*spec.zoom))
    shear = rng.uniform(*spec.shear, size=3)
    flips = _flip_draws(spec.flip, rng)
    sigma = float(rng.uniform(*spec.smooth_sigma))
    apply_noise = bool(rng.random() < spec.noise_prob)
    noise_sigma = float(rng.uniform(*spec.noise_sigma))
    noise = rng.standard_normal(img.shape).astype(np.float32)
    n_points = int(rng.integers(spec.histogram_points[0], spec.histogram_points[1] + 1))
    xp, fp = compose.random_histogram_knots(n_points, 1.0, rng)

    img, label = vol.zoom(img, zoom), vol.zoom(label, zoom)
    if np.any(shear != 0):
        m = shear_matrix(shear)
        img, label = vol.affine_warp(img, m), vol.affine_warp(label, m)
    img, label = vol.flip_rotate(img, flips), vol.flip_rotate(label, flips)
    if sigma > 0:
        img = vol.gaussian_smooth(img, sigma)
    if apply_noise:
        img = _clip01(img + np.float32(spec.noise_mean) + noise * np.float32(noise_sigma))
    if spec.histogram_points[1] > 0:
        img = compose.histogram_remap(img, xp, fp)
    return _clip01(img), label


def augment(img, label, spec: AugmentationSpec, rng):
    """Apply the chosen suite; geometric steps move image and label together."""
    spec.validate()
    img = np.asarray(img, dtype=np.float32)
    label = np.asarray(label).astype(bool)
    if spec.suite == "offline":
        return _augment_offline(img, label, spec.offline, rng)
    return _augment_finetune(img, label, spec.finetune, rng)


def identity_offline_spec():
    return OfflineTrainSpec(flip=False, rotate_deg=(0.0, 0.0), elastic_magnitude=(0.0, 0.0), zoom=(1.0, 1.0))


def identity_finetune_spec():
    return FineTuneSpec(zoom=(1.0, 1.0), shear=(0.0, 0.0), flip=False, smooth_sigma=(0.0, 0.0), noise_prob=0.0, histogram_points=(2, 2))


# ---------------------------------------------------------------- stream


@dataclass
class SourceEntry:
    kind: str
    count: int
    directory: Optional[str] = None
    cls: Optional[int] = None
    loader: Optional[object] = None  # callable index -> (image, label[, cls])


@dataclass
class StreamItem:
    position: int
    source: str
    cls: int
    index: int
    augmented: bool
    image: Optional[np.ndarray] = None
    label: Optional[np.ndarray] = None

    def provenance(self):
        return {
            "position": self.position,
            "source": self.source,
            "class": self.cls,
            "tilde": self.source == "flow",
            "index": self.index,
            "augmented": self.augmented,
        }


class Registry:
    """Sources by kind. Real and flow sources are grouped per class id."""

    def __init__(self, entries=()):
        self.entries = list(entries)

    def of_kind(self, kind):
        return [e for e in self.entries if e.kind == kind]

    def for_class(self, kind, cls):
        return [e for e in self.of_kind(kind) if e.cls == cls]

    def catalog(self, kind, excluded=()):
        counts = {}
        for e in self.of_kind(kind):
            counts[e.cls] = counts.get(e.cls, 0) + e.count
        return ClassCatalog(counts=counts, excluded=tuple(excluded))


def load_manifest(path):
    """Manifest document: ``{"sources": [{"kind", "directory", "count", "class"}]}`` (JSON or YAML)."""
    from vesselforge.config import load_document

    doc = load_document(path)
    base = Path(path).parent
    entries = []
    for s in doc.get("sources", []):
        kind = s["kind"]
        if kind not in SOURCES:
            raise SamplerError("unregistered-source", f"unknown source kind {kind!r}")
        directory = s.get("directory")
        if directory is not None and not Path(directory).is_absolute():
            directory = str(base / directory)
        entries.append(SourceEntry(kind, int(s["count"]), directory, s.get("class")))
    return Registry(entries)


def plan_item(position, seed, registry: Registry, weights: SourceWeights, excluded=EVAL_EXCLUDED):
    """Provenance of stream position ``position``; depends only on ``(seed, position)``.

    The drand source has class 0. Real and flow sources draw a class uniformly
    from their non-excluded classes. The index is ``position mod count`` within
    the chosen source (and class), so a single-source stream cycles its indices.
    """
    r = Rng(int(seed), int(position))
    source = sample_source(weights, r.generator(SUB_SOURCE))
    entries = registry.of_kind(source)
    if not entries:
        raise SamplerError("unregistered-source", f"source {source!r} was drawn but is not registered")
    if source == "drand":
        cls = 0
        total = sum(e.count for e in entries)
    else:
        cls = sample_class(registry.catalog(source, excluded), r.generator(SUB_CLASS))
        total = sum(e.count for e in registry.for_class(source, cls))
    if total <= 0:
        raise SamplerError("unregistered-source", f"source {source!r} class {cls} has no samples")
    index = int(position) % total
    return StreamItem(int(position), source, int(cls), index, source == "real")


def stream_plan(seed, registry, weights, excluded=EVAL_EXCLUDED, start=0):
    """Infinite iterator of provenance records (no volumes are loaded)."""
    k = start
    while True:
        yield plan_item(k, seed, registry, weights, excluded)
        k += 1


def _resolve(registry, item):
    if item.source == "drand":
        entries = registry.of_kind("drand")
    else:
        entries = registry.for_class(item.source, item.cls)
    offset = item.index
    for e in entries:
        if offset < e.count:
            return e, offset
        offset -= e.count
    raise SamplerError("unregistered-source", f"index {item.index} outside registered range")


def materialise(item: StreamItem, registry: Registry, seed, spec: AugmentationSpec = None):
    """Load the image/label for ``item`` and apply offline augmentation to real samples only."""
    entry, local = _resolve(registry, item)
    if entry.loader is None:
        raise SamplerError("unregistered-source", f"source {entry.kind!r} has no loader")
    data = entry.loader(local)
    img, label = data[0], data[1]
    if item.augmented:
        spec = spec or AugmentationSpec("offline")
        img, label = augment(img, label, spec, Rng(int(seed), item.position).generator(SUB_AUGMENT))
    item.image, item.label = np.asarray(img, dtype=np.float32), np.asarray(label).astype(bool)
    return item


def build_epoch_stream(registry, weights, seed, excluded=EVAL_EXCLUDED, spec=None, start=0):
    """Infinite deterministic stream of materialised items; item k depends only on (seed, k)."""
    for item in stream_plan(seed, registry, weights, excluded, start):
        yield materialise(item, registry, seed, spec)


def directory_loader(directory):
    """Loader over the sorted ``*_img``/``*_label`` NIfTI pairs in a directory."""
    from vesselforge import nifti

    d = Path(directory)
    images = sorted(p for p in d.iterdir() if "_img." in p.name)

    def load(i):
        img_path = images[i]
        label_path = img_path.with_name(img_path.name.replace("_img.", "_label."))
        return nifti.read_volume(img_path)[0], nifti.read_volume(label_path)[0]

    return load, len(images)


def drand_loader(config):
    def load(i):
        img, label, _, _ = compose.generate_drand_pair(config, i)
        return img, label

    return load


def dumps_provenance(item):
    return json.dumps(item.provenance(), sort_keys=True)
