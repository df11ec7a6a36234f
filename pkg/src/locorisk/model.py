"""Day-encoder ResNet with a label head and a gradient-reversed domain head."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

FORMAT_VERSION = 1
_MAGIC = b"LRCKPT01"
N_BINS = 96


@dataclass(frozen=True)
class ArchitectureConfig:
    stem_kernel: int = 8
    stem_filters: int = 8
    n_units: int = 8
    unit_kernel_sizes: tuple = (1, 8, 1)
    unit_filters: tuple = (3, 3, 8)
    dropout_rate: float = 0.10
    descriptor_dim: int = 8
    label_classes: int = 2
    domain_classes: int = 2
    post_units_norm: str = "affine"

    def __post_init__(self):
        object.__setattr__(self, "unit_kernel_sizes", tuple(self.unit_kernel_sizes))
        object.__setattr__(self, "unit_filters", tuple(self.unit_filters))
        if len(self.unit_kernel_sizes) != len(self.unit_filters):
            raise ValueError("unit_kernel_sizes and unit_filters must have equal length")
        if self.unit_filters[-1] != self.stem_filters:
            raise ValueError("last unit conv must restore stem_filters channels for the residual add")
        if self.descriptor_dim != self.stem_filters:
            raise ValueError("descriptor_dim must equal stem_filters")
        if self.post_units_norm not in ("affine", "batchnorm"):
            raise ValueError("post_units_norm must be 'affine' or 'batchnorm'")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ModelParams:
    """All trainable tensors plus the architecture they belong to.

    ``tensors`` maps names to float arrays in a fixed insertion order;
    ``buffers`` holds non-trainable state (batch-norm running statistics).
    """

    config: ArchitectureConfig
    tensors: dict
    buffers: dict = field(default_factory=dict)

    def copy(self):
        return ModelParams(
            self.config,
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype):
        return ModelParams(
            self.config,
            {k: v.astype(dtype) for k, v in self.tensors.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    @property
    def n_parameters(self):
        return int(sum(v.size for v in self.tensors.values()))


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config: ArchitectureConfig | None = None, rng=None, dtype=np.float64) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, affines at (1, 0)."""
    config = config or ArchitectureConfig()
    rng = np.random.default_rng(rng)
    t = {}
    c = config.stem_filters
    t["stem.w"] = _uniform(rng, (config.stem_kernel, 1, c), config.stem_kernel, dtype)
    t["stem.b"] = np.zeros(c, dtype)
    for u in range(config.n_units):
        cin = c
        for j, (k, cout) in enumerate(zip(config.unit_kernel_sizes, config.unit_filters)):
            t[f"unit{u}.affine{j}.scale"] = np.ones(cin, dtype)
            t[f"unit{u}.affine{j}.shift"] = np.zeros(cin, dtype)
            t[f"unit{u}.conv{j}.w"] = _uniform(rng, (k, cin, cout), k * cin, dtype)
            t[f"unit{u}.conv{j}.b"] = np.zeros(cout, dtype)
            cin = cout
    t["post.scale"] = np.ones(c, dtype)
    t["post.shift"] = np.zeros(c, dtype)
    d = config.descriptor_dim
    t["label.w"] = _uniform(rng, (d, config.label_classes), d, dtype)
    t["label.b"] = np.zeros(config.label_classes, dtype)
    t["domain.w"] = _uniform(rng, (d, config.domain_classes), d, dtype)
    t["domain.b"] = np.zeros(config.domain_classes, dtype)
    buffers = {}
    if config.post_units_norm == "batchnorm":
        buffers = {"post.running_mean": np.zeros(c, dtype), "post.running_var": np.ones(c, dtype)}
    return ModelParams(config, t, buffers)


def as_graph_leaves(params: ModelParams, requires_grad=True) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.tensors.items()}


def _leaves(params):
    return params if not isinstance(params, ModelParams) else as_graph_leaves(params, False)


def forward_day_encoder(batch, params, training=False, rng=None, config=None, buffers=None):
    """Encode binned days ``(N, 96, 1)`` into ``(N, descriptor_dim)`` descriptors.

    ``params`` is either a :class:`ModelParams` (no gradients) or a dict of
    leaf tensors from :func:`as_graph_leaves`, in which case ``config`` must
    be given.
    """
    if isinstance(params, ModelParams):
        config = params.config
        buffers = params.buffers if buffers is None else buffers
    if config is None:
        raise ValueError("config is required when params is a dict of tensors")
    p = _leaves(params)
    x = ad.as_tensor(batch)
    if x.data.ndim != 3 or x.shape[2] != 1:
        raise ShapeError(f"day encoder expects (N, L, 1) input, got {x.shape}")
    h = ad.conv1d(x, p["stem.w"], p["stem.b"])
    for u in range(config.n_units):
        z = h
        for j in range(len(config.unit_kernel_sizes)):
            z = ad.affine_relu(z, p[f"unit{u}.affine{j}.scale"], p[f"unit{u}.affine{j}.shift"])
            z = ad.conv1d(z, p[f"unit{u}.conv{j}.w"], p[f"unit{u}.conv{j}.b"])
        h = ad.add(h, z)
        h = ad.dropout(h, config.dropout_rate, training, rng)
    if config.post_units_norm == "batchnorm":
        running = {"mean": buffers["post.running_mean"], "var": buffers["post.running_var"]}
        h = ad.batch_norm(h, p["post.scale"], p["post.shift"], running, training)
        buffers["post.running_mean"] = running["mean"]
        buffers["post.running_var"] = running["var"]
    else:
        h = ad.per_component_affine(h, p["post.scale"], p["post.shift"])
    return ad.mean_axis(h, 1)


def aggregate_user(daily):
    """Mean over the day axis of ``(N_batch, N_days, D)``."""
    daily = ad.as_tensor(daily)
    if daily.data.ndim != 3:
        raise ShapeError(f"aggregate_user expects (N_batch, N_days, D), got {daily.shape}")
    if daily.shape[1] == 0:
        raise ShapeError("aggregate_user needs at least one day per user")
    return ad.mean_axis(daily, 1)


def label_logits(user_desc, params):
    p = _leaves(params)
    return ad.dense(ad.as_tensor(user_desc), p["label.w"], p["label.b"])


def domain_logits(user_desc, params, lam):
    p = _leaves(params)
    return ad.dense(ad.gradient_reversal(ad.as_tensor(user_desc), lam), p["domain.w"], p["domain.b"])


def forward(weeks, params, lam=0.0, training=False, rng=None, config=None, buffers=None):
    """Full model on ``(B, N_days, 96)`` week arrays; returns (label_logits, domain_logits)."""
    weeks = np.asarray(weeks)
    if weeks.ndim != 3:
        raise ShapeError(f"expected (B, N_days, bins), got {weeks.shape}")
    b, nd, nb = weeks.shape
    if isinstance(params, ModelParams):
        config = params.config
        buffers = params.buffers if buffers is None else buffers
        params = as_graph_leaves(params, requires_grad=False)
    dtype = params["stem.w"].data.dtype
    days = weeks.reshape(b * nd, nb, 1).astype(dtype, copy=False)
    desc = forward_day_encoder(days, params, training, rng, config=config, buffers=buffers)
    user = aggregate_user(ad.reshape(desc, (b, nd, desc.shape[1])))
    return label_logits(user, params), domain_logits(user, params, lam)


def log_odds(logits):
    """Disease-vs-healthy log-odds from 2-class logits (column 1 = disease)."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    return z[..., 1] - z[..., 0]


def weekly_scores(params: ModelParams, weeks, batch_size=256):
    """Risk log-odds for each week of ``(B, 7, 96)``; evaluation mode."""
    weeks = np.asarray(weeks, dtype=np.float64)
    out = np.empty(len(weeks))
    for s in range(0, len(weeks), batch_size):
        lab, _ = forward(weeks[s:s + batch_size], params)
        out[s:s + batch_size] = log_odds(lab)
    return out


def risk_score(params: ModelParams, slices, window_weeks=None):
    """Subject risk score: mean weekly log-odds (trailing window if given)."""
    weeks = np.asarray(slices, dtype=np.float64)
    if weeks.ndim == 2:
        weeks = weeks[None]
    if len(weeks) == 0:
        raise ValueError("risk_score needs at least one week slice")
    scores = weekly_scores(params, weeks)
    if window_weeks is None:
        return float(scores.mean())
    return float(sliding_average_risk(scores, window_weeks)[-1])


def sliding_average_risk(weekly, window_weeks):
    """Trailing mean over the last ``min(k, available)`` weeks at each position."""
    weekly = np.asarray(weekly, dtype=np.float64)
    if weekly.size == 0:
        raise ValueError("empty weekly score series")
    k = int(window_weeks)
    if k < 1:
        raise ValueError("window_weeks must be >= 1")
    csum = np.concatenate([[0.0], np.cumsum(weekly)])
    idx = np.arange(1, weekly.size + 1)
    lo = np.maximum(idx - k, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def save_checkpoint(path, params: ModelParams, extra=None):
    """Write header JSON plus raw little-endian float64 arrays in manifest order."""
    manifest = []
    offset = 0
    arrays = list(params.tensors.items()) + [("buffer:" + k, v) for k, v in params.buffers.items()]
    for name, arr in arrays:
        nbytes = arr.size * 8
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "<f8",
        "architecture": asdict(params.config),
        "tensors": manifest,
    }
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    data = blob[16 + hlen:]
    config = ArchitectureConfig.from_dict(header["architecture"])
    tensors, buffers = {}, {}
    for entry in header["tensors"]:
        chunk = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise ValueError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        if entry["name"].startswith("buffer:"):
            buffers[entry["name"][7:]] = arr
        else:
            tensors[entry["name"]] = arr
    return ModelParams(config, tensors, buffers)
