"""Parameter ledger for the domain-randomisation pipeline, plus run configuration.

All spatial quantities are in voxels at the 128^3 reference scale. Use
:func:`default_config` to obtain a ledger rescaled for another target size.
Configs round-trip losslessly through plain dicts (JSON/YAML) and hash
canonically via :func:`config_hash`.
"""

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

ARTIFACT_KINDS = ("bias_field", "gauss_noise", "gauss_smooth", "dropout", "shift", "hull", "identity")
GEOMETRIES = ("spheres", "voronoi", "none")
MERGE_MODES = ("add", "subtract", "replace")
CHAIN_STAGES = (
    "bias_field",
    "gauss_noise",
    "kspace_spikes",
    "contrast",
    "gauss_smooth",
    "rician_noise",
    "gibbs_noise",
    "gauss_sharpen",
    "histogram",
)


def _uniform(keys):
    return {k: 1.0 / len(keys) for k in keys}


def _check_range(name, rng, low=None, strict_low=False):
    lo, hi = rng
    if lo > hi:
        raise ValueError(f"{name}: empty range {rng}")
    if low is not None and (lo < low or (strict_low and lo == low)):
        raise ValueError(f"{name}: range {rng} must lie above {low}")


def _check_weights(name, weights, keys):
    unknown = set(weights) - set(keys)
    if unknown:
        raise ValueError(f"{name}: unknown keys {sorted(unknown)}")
    if any(w < 0 for w in weights.values()) or sum(weights.values()) <= 0:
        raise ValueError(f"{name}: weights must be non-negative with a positive sum")


@dataclass
class VesselTreeParams:
    bounds: tuple = (160, 160, 160)
    n_trees: tuple = (2, 6)
    steps: tuple = (40, 160)
    step_length: float = 1.0
    branch_prob: float = 0.03
    max_branches: int = 32
    radius: tuple = (1.5, 4.5)
    taper: float = 0.996
    min_radius: float = 1.0
    child_radius: tuple = (0.55, 0.9)
    branch_angle: tuple = (25.0, 75.0)
    tortuosity: float = 0.12
    min_fraction: float = 0.005
    max_fraction: float = 0.15
    max_extra_trees: int = 64
    direction: typing.Optional[tuple] = None
    start: typing.Optional[tuple] = None

    def validate(self):
        if min(self.bounds) < 16:
            raise ValueError("bounds must be at least 16^3")
        if self.min_radius < 1 or self.radius[0] < 1:
            raise ValueError("radius must be at least one voxel")
        _check_range("n_trees", self.n_trees, 1)
        _check_range("steps", self.steps, 1)
        _check_range("radius", self.radius)
        if not 0 <= self.min_fraction <= self.max_fraction <= 1:
            raise ValueError("need 0 <= min_fraction <= max_fraction <= 1")


@dataclass
class SpatialMaskTransformSpec:
    crop: tuple = (128, 128, 128)
    random_center: bool = True
    flip: bool = True
    rotate: bool = True
    dilation_radius: tuple = (0, 1)
    zoom: tuple = (0.8, 1.4)
    elastic_spacing: int = 8
    elastic_sigma: tuple = (8.0, 16.0)
    elastic_magnitude: tuple = (0.0, 48.0)
    smooth_sigma: tuple = (0.0, 0.6)
    smooth_threshold: float = 0.5

    def validate(self):
        _check_range("dilation_radius", self.dilation_radius, 0)
        _check_range("zoom", self.zoom, 0.0, strict_low=True)
        _check_range("elastic_sigma", self.elastic_sigma, 0)
        _check_range("elastic_magnitude", self.elastic_magnitude, 0)
        _check_range("smooth_sigma", self.smooth_sigma, 0)


@dataclass
class ArtifactSpec:
    weights: dict = field(default_factory=lambda: _uniform(ARTIFACT_KINDS))
    bias_amplitude: tuple = (0.2, 0.6)
    bias_degree: int = 3
    noise_sigma: tuple = (0.05, 0.3)
    smooth_sigma: tuple = (0.5, 1.5)
    dropout_max_fraction: float = 0.3
    dropout_radius: tuple = (2.0, 6.0)
    shift_max: int = 2

    def validate(self):
        _check_weights("artifact weights", self.weights, ARTIFACT_KINDS)
        if self.shift_max > 2 or self.shift_max < 0:
            raise ValueError("shift_max must be in [0, 2]")
        if not 0 <= self.dropout_max_fraction <= 1:
            raise ValueError("dropout_max_fraction must be in [0, 1]")


@dataclass
class BackgroundSpec:
    geometry_weights: dict = field(default_factory=lambda: _uniform(GEOMETRIES))
    n_spheres: tuple = (2, 16)
    sphere_radius: tuple = (4.0, 20.0)
    n_voronoi_seeds: tuple = (2, 12)
    plain_prob: float = 0.2
    plain_intensity: typing.Optional[float] = None
    perlin_octaves: tuple = (1, 4)
    perlin_base_freq: tuple = (1.0 / 64.0, 1.0 / 8.0)
    perlin_persistence: float = 0.5
    per_region: bool = True

    def validate(self):
        _check_weights("geometry weights", self.geometry_weights, GEOMETRIES)
        _check_range("sphere_radius", self.sphere_radius, 0.0, strict_low=True)
        if self.geometry_weights.get("voronoi", 0) > 0:
            _check_range("n_voronoi_seeds", self.n_voronoi_seeds, 2)
        if self.plain_intensity is not None and not 0 <= self.plain_intensity <= 1:
            raise ValueError("plain intensity must be in [0, 1]")
        _check_range("perlin_octaves", self.perlin_octaves, 1)
        _check_range("perlin_base_freq", self.perlin_base_freq, 0.0, strict_low=True)


@dataclass
class MergeSpec:
    mode_weights: dict = field(default_factory=lambda: _uniform(MERGE_MODES))
    delta: float = 0.1

    def validate(self):
        _check_weights("merge weights", self.mode_weights, MERGE_MODES)
        if not 0 < self.delta < 0.5:
            raise ValueError("delta must lie in (0, 0.5)")


@dataclass
class IntensityChainSpec:
    probs: dict = field(
        default_factory=lambda: {
            "bias_field": 0.5,
            "gauss_noise": 0.5,
            "kspace_spikes": 0.2,
            "contrast": 0.5,
            "gauss_smooth": 0.4,
            "rician_noise": 0.3,
            "gibbs_noise": 0.3,
            "gauss_sharpen": 0.3,
            "histogram": 0.5,
        }
    )
    bias_amplitude: tuple = (0.1, 0.5)
    bias_degree: int = 3
    noise_sigma: tuple = (0.0, 0.1)
    spike_count: tuple = (1, 3)
    spike_factor: tuple = (5.0, 20.0)
    gamma: tuple = (0.5, 2.0)
    smooth_sigma: tuple = (0.25, 1.5)
    smooth_shared_prob: float = 0.5
    rician_sigma: tuple = (0.0, 0.05)
    gibbs_cutoff: tuple = (0.4, 1.0)
    sharpen_alpha: tuple = (0.5, 3.0)
    sharpen_sigma: tuple = (0.5, 1.5)
    histogram_points: tuple = (5, 10)

    def validate(self):
        if set(self.probs) != set(CHAIN_STAGES):
            raise ValueError(f"chain probabilities must cover exactly {CHAIN_STAGES}")
        if any(not 0 <= p <= 1 for p in self.probs.values()):
            raise ValueError("chain probabilities must be in [0, 1]")
        _check_range("gibbs_cutoff", self.gibbs_cutoff, 0.0, strict_low=True)
        _check_range("histogram_points", self.histogram_points, 2)


@dataclass
class DrandConfig:
    shape: tuple = (128, 128, 128)
    tree: VesselTreeParams = field(default_factory=VesselTreeParams)
    spatial: SpatialMaskTransformSpec = field(default_factory=SpatialMaskTransformSpec)
    artifact: ArtifactSpec = field(default_factory=ArtifactSpec)
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    merge: MergeSpec = field(default_factory=MergeSpec)
    chain: IntensityChainSpec = field(default_factory=IntensityChainSpec)
    seed: int = 0
    patch_dir: typing.Optional[str] = None

    def validate(self):
        if tuple(self.spatial.crop) != tuple(self.shape):
            raise ValueError("spatial crop must equal the output shape")
        if self.patch_dir is None and any(b < c for b, c in zip(self.tree.bounds, self.shape)):
            raise ValueError("tree bounds must be at least the output shape")
        for part in (self.tree, self.spatial, self.artifact, self.background, self.merge, self.chain):
            part.validate()
        return self

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return from_dict(cls, data)

    def hash(self):
        return config_hash(self)


def default_config(size=128, seed=0):
    """Ledger defaults with spatial parameters rescaled to a ``size``^3 output."""
    s = size / 128.0
    cfg = DrandConfig(seed=seed)
    if size == 128:
        return cfg
    b = int(round(160 * s))
    cfg.shape = (size,) * 3
    cfg.tree = dataclasses.replace(
        cfg.tree,
        bounds=(b, b, b),
        steps=(max(int(40 * s), 4), max(int(160 * s), 8)),
        radius=(max(1.5 * s, 1.0), max(4.5 * s, 1.5)),
        taper=1.0 - (1.0 - cfg.tree.taper) / s,
    )
    cfg.spatial = dataclasses.replace(
        cfg.spatial,
        crop=(size,) * 3,
        elastic_spacing=max(int(round(8 * s)), 2),
        elastic_sigma=(8.0 * s, 16.0 * s),
        elastic_magnitude=(0.0, 48.0 * s),
    )
    cfg.artifact = dataclasses.replace(cfg.artifact, dropout_radius=(max(2.0 * s, 1.5), max(6.0 * s, 2.0)))
    cfg.background = dataclasses.replace(
        cfg.background,
        sphere_radius=(max(4.0 * s, 2.0), max(20.0 * s, 3.0)),
        perlin_base_freq=(1.0 / (64.0 * s), 1.0 / (8.0 * s)),
    )
    return cfg


@dataclass
class FlowConfig:
    field_kind: str = "mlp"
    hidden: int = 32
    time_dim: int = 8
    n_classes: int = 24
    steps: int = 1500
    lr: float = 0.05
    batch_size: int = 4
    sample_steps: int = 100


@dataclass
class RunConfig:
    drand: DrandConfig = field(default_factory=DrandConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    sampler: dict = field(default_factory=dict)
    seed: int = 0
    output: str = "out"

    def to_dict(self):
        return to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return from_dict(cls, data)

    def hash(self):
        return config_hash(self)


# ---------------------------------------------------------------- (de)serialisation


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if hasattr(value, "item"):  # numpy scalar
        return value.item()
    return value


def to_dict(obj):
    return _plain(obj)


def _coerce(tp, value):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        if value is None:
            return None
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return _coerce(args[0], value)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value)
    if tp is tuple or origin is tuple:
        return tuple(value)
    if tp is float and isinstance(value, int):
        return float(value)
    if tp is dict:
        return dict(value)
    return value


def from_dict(cls, data):
    data = dict(data or {})
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v) for k, v in data.items()}
    return cls(**kwargs)


def canonical_json(obj):
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


def config_hash(obj, length=16):
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:length]


def load_document(path):
    """Read a YAML or JSON document (JSON is valid YAML)."""
    text = Path(path).read_text()
    return yaml.safe_load(text) or {}


def save_document(path, data):
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(_plain(data), indent=2, sort_keys=True) + "\n")
    else:
        path.write_text(yaml.safe_dump(_plain(data), sort_keys=True))


def load_drand_config(path):
    doc = load_document(path)
    if "drand" in doc:
        doc = doc["drand"]
    return DrandConfig.from_dict(doc).validate()


def load_run_config(path):
    return RunConfig.from_dict(load_document(path))
