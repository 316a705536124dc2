"""Constructors for the VoxCNN and VoxResNet architectures.

Both builders take a ``cube`` edge length so the same tables can be shape-
checked at full scale (110) and run at desk scale (32 or smaller). Pooling
windows shrink automatically when the feature maps get too small.
"""

import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .network import (
    BatchNorm, Conv3D, Dense, Dropout, Flatten, MaxPool3D, Network, ReLU,
    SoftmaxOutput, VoxResBlock, init_params, load, save,
)

VOXCNN_FILTERS = (8, 16, 32, 64)
VOXCNN_HIDDEN = (128, 64)
VOXRESNET_HIDDEN = 128
FULL_CUBE = 110


def _pool_after(extent):
    return min(2, extent)


def build_voxcnn(num_classes=2, dropout_p=0.5, cube=FULL_CUBE, seed=0):
    """Four conv/relu/pool feature blocks, then a two-layer batchnorm+dropout classifier."""
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    layers = []
    channels, extent = 1, cube
    for filters in VOXCNN_FILTERS:
        w = _pool_after(extent)
        layers += [Conv3D(channels, filters, 3, 1, 1), ReLU(), MaxPool3D(w, w)]
        channels, extent = filters, (extent - w) // w + 1
    features = channels * extent ** 3
    layers.append(Flatten())
    width = features
    for hidden in VOXCNN_HIDDEN:
        layers += [Dense(width, hidden), BatchNorm(hidden), ReLU(), Dropout(dropout_p)]
        width = hidden
    layers += [Dense(width, num_classes), SoftmaxOutput()]
    meta = {"arch": "voxcnn", "num_classes": num_classes, "cube": cube, "dropout_p": dropout_p}
    net = Network(layers, (1, cube, cube, cube), rng_seed=seed, name="voxcnn", meta=meta)
    return init_params(net, seed)


def build_voxresnet(num_classes=2, cube=FULL_CUBE, seed=0):
    """Stem conv, three strided convs interleaved with six VoxRes blocks, pool, dense head."""
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    layers = [Conv3D(1, 32, 3, 1, 1), BatchNorm(32), ReLU()]
    channels, extent = 32, cube
    for filters in (64, 64, 128):
        layers.append(Conv3D(channels, filters, 3, 2, 1))
        extent = (extent + 2 - 3) // 2 + 1
        layers += [VoxResBlock(filters), VoxResBlock(filters)]
        channels = filters
    # 14^3 -> 2^3 at full scale; desk-scale cubes shrink the window to keep 2^3.
    w = max(1, extent // 2)
    layers += [BatchNorm(channels), ReLU(), MaxPool3D(w, w), Flatten()]
    pooled = (extent - w) // w + 1
    layers += [
        Dense(channels * pooled ** 3, VOXRESNET_HIDDEN), ReLU(),
        Dense(VOXRESNET_HIDDEN, num_classes), SoftmaxOutput(),
    ]
    meta = {"arch": "voxresnet", "num_classes": num_classes, "cube": cube}
    net = Network(layers, (1, cube, cube, cube), rng_seed=seed, name="voxresnet", meta=meta)
    return init_params(net, seed)


BUILDERS = {"voxcnn": build_voxcnn, "voxresnet": build_voxresnet}


def build(arch, num_classes=2, cube=FULL_CUBE, seed=0, dropout_p=0.5):
    if arch == "voxcnn":
        return build_voxcnn(num_classes, dropout_p=dropout_p, cube=cube, seed=seed)
    if arch == "voxresnet":
        return build_voxresnet(num_classes, cube=cube, seed=seed)
    raise ConfigError(f"unknown architecture {arch!r} (expected one of {sorted(BUILDERS)})")


@dataclass
class ArchitectureTable:
    name: str
    input_shape: tuple
    rows: list = field(default_factory=list)

    @property
    def total_params(self):
        return sum(r["params"] for r in self.rows)

    def kinds(self):
        return [r["kind"] for r in self.rows]

    def to_text(self):
        lines = [f"{self.name}  input={list(self.input_shape)}",
                 f"{'#':>3}  {'kind':<15} {'output':<20} {'params':>10}  spec"]
        for r in self.rows:
            lines.append(f"{r['index']:>3}  {r['kind']:<15} {str(r['output']):<20} {r['params']:>10}  {r['spec']}")
        lines.append(f"total params: {self.total_params}")
        return "\n".join(lines) + "\n"

    def to_records(self):
        return [dict(r, output=list(r["output"])) for r in self.rows]


def describe(net):
    """Layer table with per-layer output shapes and learnable parameter counts."""
    rows = []
    for i, (layer, shape) in enumerate(zip(net.layers, net.shapes)):
        count = sum(a.size for _, a in layer.named_tensors("", include_buffers=False))
        rows.append({"index": i, "kind": layer.kind, "output": tuple(shape),
                     "params": int(count), "spec": layer.spec_string()})
    return ArchitectureTable(net.name, net.input_shape, rows)


def save_model(net, path):
    """Save parameters plus a JSON sidecar (``<path>.json``) holding the builder arguments."""
    save(net, path)
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(dict(net.meta, arch_hash=f"{net.arch_hash():016x}"), fh, indent=2, sort_keys=True)


def load_model(path):
    with open(f"{path}.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    template = build(meta["arch"], meta["num_classes"], meta["cube"], 0, meta.get("dropout_p", 0.5))
    net = load(path, template)
    net.mode = "infer"
    return net


def zero_residual_branches(net):
    """Zero every convolution weight and bias inside VoxRes blocks (identity-skip probe)."""
    for layer in net.layers:
        if isinstance(layer, VoxResBlock):
            for sub in layer.branch:
                if isinstance(sub, Conv3D):
                    sub.params["weight"][...] = 0
                    sub.params["bias"][...] = 0
    return net


def spatial_trace(net):
    """Spatial extent after the input and after every downsampling layer."""
    extents = [net.input_shape[1]]
    for shape in net.shapes:
        if len(shape) == 4 and shape[1] != extents[-1]:
            extents.append(shape[1])
    return extents

