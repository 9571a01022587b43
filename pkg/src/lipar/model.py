"""DWParNet / STParNet: three spatial branches, an LSTM branch and a fusion head.

Spatial branches take (N, 3, 9, 9) images and end in (N, C, 2, 2) maps that
are concatenated on channels (64 + 256 + 192 = 512) and fed to the fusion
head. The temporal branch takes the (27, N, 9) sequence view and returns
logits directly. STParNet's output is the mean of the fusion logits and the
temporal logits.

Parameters live in a flat ``name -> Tensor`` dict; the prefix before the
first dot (``branch1`` .. ``branch4``, ``fusion``) says which unit owns it.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import functional as F
from .autodiff.analytic import conv_param_count
from .autodiff.functional import BatchNormStats
from .autodiff.lstm import lstm_forward, lstm_param_count
from .autodiff.tensor import Tensor, no_grad

NUM_CLASSES = 5
SPATIAL = ("branch1", "branch2", "branch3")
TEMPORAL = "branch4"
FUSION = "fusion"
MB = float(2 ** 20)
BYTES_PER_VALUE = 4


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # pw | dw | conv | pool | dropout | linear | lstm
    name: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    bn: bool = False
    relu: bool = False
    out_hw: tuple = ()
    p: float = 0.0
    layers: int = 0


@dataclass(frozen=True)
class BranchSpec:
    name: str
    layers: tuple
    input_shape: tuple
    output_shape: tuple

    def to_dict(self):
        return {"name": self.name, "input_shape": list(self.input_shape), "output_shape": list(self.output_shape),
                "layers": [{k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(l).items()} for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        layers = tuple(LayerSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in l.items()}) for l in d["layers"])
        return cls(d["name"], layers, tuple(d["input_shape"]), tuple(d["output_shape"]))


def _pw(name, cin, cout):
    return LayerSpec("pw", name, cin, cout, kernel=1, bn=True, relu=True)


def _dw(name, ch, stride):
    return LayerSpec("dw", name, ch, ch, kernel=3, stride=stride, pad=1, relu=True)


def _pool(hw):
    return LayerSpec("pool", "pool", out_hw=hw)


def canonical_branches(variant="st", num_classes=NUM_CLASSES):
    """Layer schedules of every unit, spatial branches first, fusion last."""
    branches = [
        BranchSpec("branch1", (_pw("pw1", 3, 64), _dw("dw1", 64, 1), _pool((2, 2))), (3, 9, 9), (64, 2, 2)),
        BranchSpec("branch2", (_pw("pw1", 3, 128), _dw("dw1", 128, 2), _pw("pw2", 128, 256), _dw("dw2", 256, 2),
                               _pool((2, 2))), (3, 9, 9), (256, 2, 2)),
        BranchSpec("branch3", (_pw("pw1", 3, 32), _dw("dw1", 32, 1), _pw("pw2", 32, 96), _dw("dw2", 96, 2),
                               _pw("pw3", 96, 192), _dw("dw3", 192, 2), _pool((2, 2))), (3, 9, 9), (192, 2, 2)),
    ]
    if variant == "st":
        branches.append(BranchSpec("branch4", (
            LayerSpec("lstm", "lstm", 9, 32, layers=2),
            LayerSpec("linear", "head", 32, num_classes),
        ), (27, 9), (num_classes,)))
    elif variant != "dw":
        raise ValueError(f"unknown variant {variant!r}; expected 'st' or 'dw'")
    branches.append(BranchSpec(FUSION, (
        LayerSpec("conv", "conv", 512, 192, kernel=3, pad=1, bn=True, relu=True),
        _pool((1, 1)),
        LayerSpec("dropout", "dropout", p=0.5),
        LayerSpec("linear", "fc", 192, num_classes),
    ), (512, 2, 2), (num_classes,)))
    return tuple(branches)


@dataclass
class ModelParams:
    variant: str
    branches: tuple
    tensors: dict
    bn: dict
    seed: int = 0

    def spec(self, branch):
        name = branch_name(branch)
        for b in self.branches:
            if b.name == name:
                return b
        raise KeyError(f"model has no unit {name!r}")

    @property
    def unit_names(self):
        return tuple(b.name for b in self.branches)

    def unit_params(self, unit):
        prefix = branch_name(unit) + "."
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def trainable(self):
        return dict(self.tensors)

    def param_count(self, unit=None):
        items = self.tensors.values() if unit is None else self.unit_params(unit).values()
        return int(sum(t.size for t in items))

    def clone(self):
        tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()}
        bn = {}
        for k, s in self.bn.items():
            c = BatchNormStats(len(s.mean), s.momentum, s.eps)
            c.mean[...] = s.mean
            c.var[...] = s.var
            bn[k] = c
        return ModelParams(self.variant, self.branches, tensors, bn, self.seed)


def branch_name(branch):
    if isinstance(branch, int):
        if not 1 <= branch <= 4:
            raise ValueError(f"branch index must be 1..4, got {branch}")
        return f"branch{branch}"
    return str(branch)


# -- construction ------------------------------------------------------------

def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_params(branches, seed=0, variant="st"):
    rng = np.random.default_rng(seed)
    tensors, bn = {}, {}

    def add(name, arr):
        tensors[name] = Tensor(arr, requires_grad=True)

    for b in branches:
        for l in b.layers:
            key = f"{b.name}.{l.name}"
            if l.kind in ("pw", "conv"):
                fan_in = l.in_ch * l.kernel * l.kernel
                add(f"{key}.weight", _uniform(rng, np.sqrt(6.0 / fan_in), (l.out_ch, l.in_ch, l.kernel, l.kernel)))
                if not l.bn:
                    add(f"{key}.bias", np.zeros(l.out_ch, np.float32))
            elif l.kind == "dw":
                fan_in = l.kernel * l.kernel
                add(f"{key}.weight", _uniform(rng, np.sqrt(6.0 / fan_in), (l.out_ch, 1, l.kernel, l.kernel)))
                if not l.bn:
                    add(f"{key}.bias", np.zeros(l.out_ch, np.float32))
            elif l.kind == "linear":
                add(f"{key}.weight", _uniform(rng, np.sqrt(6.0 / l.in_ch), (l.out_ch, l.in_ch)))
                add(f"{key}.bias", np.zeros(l.out_ch, np.float32))
            elif l.kind == "lstm":
                bound = 1.0 / np.sqrt(l.out_ch)
                for i in range(l.layers):
                    fin = l.in_ch if i == 0 else l.out_ch
                    add(f"{key}.l{i}.weight", _uniform(rng, bound, (4 * l.out_ch, l.out_ch + fin)))
                    add(f"{key}.l{i}.bias", np.zeros(4 * l.out_ch, np.float32))
            if l.bn:
                add(f"{key}.bn.gamma", np.ones(l.out_ch, np.float32))
                add(f"{key}.bn.beta", np.zeros(l.out_ch, np.float32))
                bn[f"{key}.bn"] = BatchNormStats(l.out_ch)
    return ModelParams(variant, tuple(branches), tensors, bn, seed)


def build_stparnet(seed=0):
    return init_params(canonical_branches("st"), seed, "st")


def build_dwparnet(seed=0):
    return init_params(canonical_branches("dw"), seed, "dw")


def build_model(variant="st", seed=0):
    return build_stparnet(seed) if variant == "st" else build_dwparnet(seed) if variant == "dw" else \
        _bad_variant(variant)


def _bad_variant(variant):
    raise ValueError(f"unknown variant {variant!r}; expected 'st' or 'dw'")


# -- forward -----------------------------------------------------------------

def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def run_unit(params, spec, x, training=False, rng=None, trace=None):
    """Apply one unit's layer list. ``trace`` (a list) collects per-layer output sizes."""
    t = params.tensors
    for l in spec.layers:
        key = f"{spec.name}.{l.name}"
        if l.kind in ("pw", "conv", "dw"):
            groups = l.in_ch if l.kind == "dw" else 1
            x = F.conv2d(x, t[f"{key}.weight"], t.get(f"{key}.bias"), stride=l.stride, pad=l.pad, groups=groups)
            if l.bn:
                x = F.batch_norm2d(x, t[f"{key}.bn.gamma"], t[f"{key}.bn.beta"], params.bn[f"{key}.bn"], training)
            if l.relu:
                x = F.relu(x)
        elif l.kind == "pool":
            x = F.adaptive_avg_pool2d(x, l.out_hw)
        elif l.kind == "dropout":
            x = F.dropout(x, l.p, training, rng)
            continue
        elif l.kind == "linear":
            if x.ndim != 2:
                x = F.reshape(x, (x.shape[0], -1))
            x = F.linear(x, t[f"{key}.weight"], t[f"{key}.bias"])
        elif l.kind == "lstm":
            layers = [(t[f"{key}.l{i}.weight"], t[f"{key}.l{i}.bias"]) for i in range(l.layers)]
            seq, _ = lstm_forward(x, layers)
            if trace is not None:
                trace.extend([seq.size] * l.layers)
            x = F.getitem(seq, -1)
            continue
        else:
            raise ValueError(f"unknown layer kind {l.kind!r}")
        if trace is not None:
            trace.append(x.size)
    return x


def _check_spatial(x):
    if x.ndim != 4 or tuple(x.shape[1:]) != (3, 9, 9):
        raise ValueError(f"spatial branches expect (N, 3, 9, 9) input, got {tuple(x.shape)}")


def _check_temporal(x):
    if x.ndim != 3 or x.shape[0] != 27 or x.shape[2] != 9:
        raise ValueError(f"temporal branch expects (27, N, 9) input, got {tuple(x.shape)}")


def branch_forward(params, branch, batch, training=False, rng=None):
    """Run one branch on its own input view.

    Spatial branches map (N, 3, 9, 9) to (N, C, 2, 2); branch 4 maps the
    (27, N, 9) sequence to (N, 5) logits.
    """
    name = branch_name(branch)
    if name == FUSION:
        raise ValueError("use fusion_forward for the fusion head")
    spec = params.spec(name)
    x = _as_tensor(batch)
    if name == TEMPORAL:
        _check_temporal(x)
    else:
        _check_spatial(x)
    return run_unit(params, spec, x, training, rng)


def fusion_forward(params, features, training=False, rng=None):
    """Fusion head on channel-concatenated spatial features (N, 512, 2, 2)."""
    x = _as_tensor(features)
    spec = params.spec(FUSION)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ValueError(f"fusion head expects (N, {', '.join(map(str, spec.input_shape))}), got {tuple(x.shape)}")
    return run_unit(params, spec, x, training, rng)


def fuse_spatial(params, feature_maps, training=False, rng=None):
    return fusion_forward(params, F.concat(list(feature_maps), axis=1), training, rng)


def dwparnet_forward(params, images, training=False, rng=None):
    x = _as_tensor(images)
    _check_spatial(x)
    feats = [branch_forward(params, b, x, training, rng) for b in SPATIAL]
    return fuse_spatial(params, feats, training, rng)


def combine_logits(spatial_logits, temporal_logits):
    return F.average(spatial_logits, temporal_logits)


def stparnet_forward(params, images, sequences, training=False, rng=None):
    if params.variant != "st":
        raise ValueError("stparnet_forward needs a model with the temporal branch")
    x = _as_tensor(images)
    s = _as_tensor(sequences)
    _check_spatial(x)
    _check_temporal(s)
    if x.shape[0] != s.shape[1]:
        raise ValueError(f"image batch has {x.shape[0]} items but sequence batch has {s.shape[1]}")
    spatial = dwparnet_forward(params, x, training, rng)
    temporal = branch_forward(params, TEMPORAL, s, training, rng)
    return combine_logits(spatial, temporal)


def forward(params, images, sequences, training=False, rng=None):
    """Logits of whichever variant ``params`` holds."""
    if params.variant == "st":
        return stparnet_forward(params, images, sequences, training, rng)
    return dwparnet_forward(params, images, training, rng)


def predict_logits(params, images, sequences, batch_size=256):
    out = []
    with no_grad():
        for i in range(0, images.shape[0], batch_size):
            out.append(forward(params, images[i:i + batch_size], sequences[:, i:i + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, NUM_CLASSES), np.float32)


# -- size accounting ---------------------------------------------------------

@dataclass
class UnitSize:
    name: str
    param_count: int
    activation_count: float
    fwd_bwd_mb: float
    param_mb: float

    @property
    def total_mb(self):
        return self.fwd_bwd_mb + self.param_mb

    def to_dict(self):
        return {"name": self.name, "param_count": self.param_count, "activation_count": self.activation_count,
                "fwd_bwd_mb": self.fwd_bwd_mb, "param_mb": self.param_mb, "total_mb": self.total_mb}


@dataclass
class SizeReport:
    units: list
    batch_size: int
    total: UnitSize = field(init=False)

    def __post_init__(self):
        self.total = UnitSize(
            "total",
            sum(u.param_count for u in self.units),
            sum(u.activation_count for u in self.units),
            sum(u.fwd_bwd_mb for u in self.units),
            sum(u.param_mb for u in self.units),
        )

    def unit(self, name):
        for u in self.units:
            if u.name == name:
                return u
        raise KeyError(name)

    def to_dict(self):
        return {"batch_size": self.batch_size, "units": [u.to_dict() for u in self.units], "total": self.total.to_dict()}

    def table(self):
        head = f"{'unit':<10}{'fwd/bwd MB':>12}{'param MB':>11}{'total MB':>11}{'params':>10}"
        lines = [head, "-" * len(head)]
        for u in self.units + [self.total]:
            lines.append(f"{u.name:<10}{u.fwd_bwd_mb:>12.4f}{u.param_mb:>11.4f}{u.total_mb:>11.4f}{u.param_count:>10d}")
        return "\n".join(lines)


def analytic_param_count(spec):
    """Parameter count of a unit from its schedule alone."""
    total = 0
    for l in spec.layers:
        if l.kind in ("pw", "conv"):
            total += conv_param_count(l.kernel, l.in_ch, l.out_ch, 1) + (0 if l.bn else l.out_ch)
        elif l.kind == "dw":
            total += conv_param_count(l.kernel, l.in_ch, l.out_ch, l.in_ch) + (0 if l.bn else l.out_ch)
        elif l.kind == "linear":
            total += l.in_ch * l.out_ch + l.out_ch
        elif l.kind == "lstm":
            total += lstm_param_count(l.in_ch, l.out_ch, l.layers)
        if l.bn:
            total += 2 * l.out_ch
    return total


def size_report(params, batch_size=32):
    """Per-unit memory in MB (2**20 bytes) at 4 bytes per value.

    Activation size counts one output buffer per layer (batch-norm and ReLU
    act on their convolution's buffer; each LSTM layer's hidden sequence
    counts once), doubled for the backward pass. The trace runs on a
    reference batch and is reported per input item.
    """
    units = []
    with no_grad():
        for spec in params.branches:
            trace = []
            if spec.layers:
                if spec.name == TEMPORAL:
                    x = np.zeros((spec.input_shape[0], batch_size, spec.input_shape[1]), np.float32)
                else:
                    x = np.zeros((batch_size, *spec.input_shape), np.float32)
                run_unit(params, spec, Tensor(x), training=False, trace=trace)
            acts = sum(trace) / batch_size
            count = params.param_count(spec.name)
            units.append(UnitSize(spec.name, count, acts, 2 * BYTES_PER_VALUE * acts / MB, BYTES_PER_VALUE * count / MB))
    return SizeReport(units, batch_size)


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"LIPC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _descriptor(params):
    return {
        "variant": params.variant,
        "seed": params.seed,
        "branches": [b.to_dict() for b in params.branches],
        "bn": {k: {"momentum": s.momentum, "eps": s.eps} for k, s in sorted(params.bn.items())},
    }


def save_checkpoint(params, path):
    desc = json.dumps(_descriptor(params), sort_keys=True).encode("utf-8")
    named = {k: v.data for k, v in params.tensors.items()}
    for k, s in params.bn.items():
        named[f"{k}.running_mean"] = s.mean
        named[f"{k}.running_var"] = s.var
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(desc)), desc, struct.pack("<I", len(named))]
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    blob = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, dlen = struct.unpack("<HI", take(6))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        desc = json.loads(take(dlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt architecture block ({exc})") from None
    (count,) = struct.unpack("<I", take(4))
    named = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        named[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    branches = tuple(BranchSpec.from_dict(b) for b in desc["branches"])
    params = init_params(branches, desc["seed"], desc["variant"])
    for k, t in params.tensors.items():
        if k not in named or named[k].shape != t.shape:
            raise CheckpointError(f"{path}: missing or mis-shaped tensor {k!r}")
        t.data = named[k].copy()
    for k, s in params.bn.items():
        s.momentum = desc["bn"][k]["momentum"]
        s.eps = desc["bn"][k]["eps"]
        s.mean[...] = named[f"{k}.running_mean"]
        s.var[...] = named[f"{k}.running_var"]
    return params
