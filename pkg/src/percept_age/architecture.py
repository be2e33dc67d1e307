"""Network variants: declarative layer lists, parameters, forward pass.

Layer naming follows the Keras-style names of the original model
(``block5_conv3``, ``hidden_layer``, ``fc2``, ``predict_app``, ...).
Parameters are stored flat as ``"<layer>.weight"`` / ``"<layer>.bias"``.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataset import AGE_MAX, BASE_ATTRIBUTE_DIM, OBSERVER_ATTRIBUTE_DIM
from .tensor import ShapeError, Tensor


class ModelVariant(enum.Enum):
    CASE1 = "case1"
    CASE2_PRIME = "case2prime"
    CASE2 = "case2"
    CASE3 = "case3"
    CASE3_OBSERVER = "case3observer"

    @property
    def uses_attributes(self) -> bool:
        return self in (ModelVariant.CASE2, ModelVariant.CASE3, ModelVariant.CASE3_OBSERVER)

    @property
    def dual_head(self) -> bool:
        return self in (ModelVariant.CASE3, ModelVariant.CASE3_OBSERVER)

    @property
    def attribute_dim(self) -> int:
        if not self.uses_attributes:
            return 0
        return OBSERVER_ATTRIBUTE_DIM if self is ModelVariant.CASE3_OBSERVER else BASE_ATTRIBUTE_DIM


class Scale(enum.Enum):
    FULL = "full"
    DESK = "desk"


BACKBONE = "backbone"
NEW_LAYERS = "new"


@dataclass(frozen=True)
class _Dims:
    image: tuple[int, int, int]
    blocks: tuple[tuple[int, ...], ...]
    classifier_fc: int  # width of the two VGG fc layers kept by case 1
    reduction: int
    attr_hidden: int
    fusion: int
    attr_hidden2: int
    fc3: int


DIMS = {
    Scale.FULL: _Dims((224, 224, 3), ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512)),
                      classifier_fc=4096, reduction=512, attr_hidden=10, fusion=256, attr_hidden2=5, fc3=6),
    Scale.DESK: _Dims((32, 32, 1), ((8,), (16,), (32,)),
                      classifier_fc=64, reduction=64, attr_hidden=10, fusion=32, attr_hidden2=5, fc3=6),
}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv2d" | "dense"
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    weight_shape: tuple[int, ...]
    bias: bool
    group: str
    activation: str | None = None
    padding: str = "valid"
    pool_after: bool = False

    @property
    def param_count(self) -> int:
        n = int(np.prod(self.weight_shape))
        return n + (self.weight_shape[-1] if self.bias else 0)


@dataclass(frozen=True)
class NetworkSpec:
    variant: ModelVariant
    scale: Scale
    image_shape: tuple[int, int, int]
    attribute_dim: int
    layers: tuple[LayerSpec, ...]
    stacked_attribute_encoder: bool = False

    def layer(self, name: str) -> LayerSpec:
        for lay in self.layers:
            if lay.name == name:
                return lay
        raise KeyError(name)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for lay in self.layers:
            shapes[f"{lay.name}.weight"] = lay.weight_shape
            if lay.bias:
                shapes[f"{lay.name}.bias"] = (lay.weight_shape[-1],)
        return shapes

    def param_groups(self) -> dict[str, str]:
        groups = {}
        for lay in self.layers:
            groups[f"{lay.name}.weight"] = lay.group
            if lay.bias:
                groups[f"{lay.name}.bias"] = lay.group
        return groups


def _conv(name, in_shape, cout, k, padding, bias, group, activation, pool_after=False) -> LayerSpec:
    h, w, cin = in_shape
    if padding == "same":
        oh, ow = h, w
    else:
        oh, ow = h - k + 1, w - k + 1
    return LayerSpec(name, "conv2d", in_shape, (oh, ow, cout), (k, k, cin, cout), bias, group,
                     activation, padding, pool_after)


def _dense(name, n_in, n_out, group, activation, bias=True) -> LayerSpec:
    return LayerSpec(name, "dense", (n_in,), (n_out,), (n_in, n_out), bias, group, activation)


def build_spec(variant: ModelVariant | str, scale: Scale | str, stacked_attribute_encoder: bool = False) -> NetworkSpec:
    """Layer list for ``variant`` at ``scale``.

    ``stacked_attribute_encoder`` feeds ``hidden_layer_2`` from the output of
    ``hidden_layer`` instead of the raw attribute vector.  That wiring gives
    exactly 27,694,645 parameters for the full dual-head model; the default
    (raw attributes into both encoders) gives 27,694,660.
    """
    variant, scale = ModelVariant(variant), Scale(scale)
    d = DIMS[scale]
    layers: list[LayerSpec] = []
    shape = d.image
    for b, widths in enumerate(d.blocks, start=1):
        for c, cout in enumerate(widths, start=1):
            last = c == len(widths)
            lay = _conv(f"block{b}_conv{c}", shape, cout, 3, "same", True, BACKBONE, "relu", pool_after=last)
            layers.append(lay)
            shape = lay.out_shape
        shape = (shape[0] // 2, shape[1] // 2, shape[2])

    if variant is ModelVariant.CASE1:
        flat = int(np.prod(shape))
        layers += [
            _dense("fc1", flat, d.classifier_fc, BACKBONE, "relu"),
            _dense("fc2", d.classifier_fc, d.classifier_fc, BACKBONE, "relu"),
            _dense("predict", d.classifier_fc, 1, NEW_LAYERS, "sigmoid"),
        ]
    else:
        red = _conv("reduce_conv", shape, d.reduction, shape[0], "valid", True, NEW_LAYERS, "relu")
        layers.append(red)
        fused_in = d.reduction
        if variant.uses_attributes:
            layers.append(_dense("hidden_layer", variant.attribute_dim, d.attr_hidden, NEW_LAYERS, "relu"))
            fused_in += d.attr_hidden
        layers += [
            _dense("fc2", fused_in, d.fusion, NEW_LAYERS, "relu"),
            _dense("predict_app", d.fusion, 1, NEW_LAYERS, "sigmoid"),
        ]
        if variant.dual_head:
            layers += [
                _dense("hidden_layer_2", d.attr_hidden if stacked_attribute_encoder else variant.attribute_dim,
                       d.attr_hidden2, NEW_LAYERS, "relu"),
                _dense("fc3", 1 + d.attr_hidden2, d.fc3, NEW_LAYERS, "relu"),
                _dense("predict_real", d.fc3, 1, NEW_LAYERS, "sigmoid"),
            ]
    stacked = stacked_attribute_encoder and variant.dual_head
    spec = NetworkSpec(variant, scale, d.image, variant.attribute_dim, tuple(layers), stacked)
    _check_conformance(spec)
    return spec


def _check_conformance(spec: NetworkSpec) -> None:
    convs = [lay for lay in spec.layers if lay.kind == "conv2d"]
    for prev, nxt in zip(convs, convs[1:]):
        out = prev.out_shape
        if prev.pool_after:
            out = (out[0] // 2, out[1] // 2, out[2])
        if out != nxt.in_shape:
            raise ShapeError(f"{prev.name} -> {nxt.name}: {out} != {nxt.in_shape}")
    for lay in spec.layers:
        if lay.kind == "dense" and lay.weight_shape != (lay.in_shape[0], lay.out_shape[0]):
            raise ShapeError(f"{lay.name}: weight {lay.weight_shape} does not map {lay.in_shape}->{lay.out_shape}")


def count_trainable_params(spec: NetworkSpec) -> int:
    return sum(lay.param_count for lay in spec.layers)


@dataclass
class ModelParams:
    spec: NetworkSpec
    tensors: dict[str, Tensor]
    seed: int

    @property
    def variant(self) -> ModelVariant:
        return self.spec.variant

    @property
    def scale(self) -> Scale:
        return self.spec.scale

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: Tensor(v.data.copy(), name=k) for k, v in self.tensors.items()}, self.seed)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}


def _glorot_limit(shape: tuple[int, ...]) -> float:
    if len(shape) == 4:
        receptive = shape[0] * shape[1]
        fan_in, fan_out = receptive * shape[2], receptive * shape[3]
    else:
        fan_in, fan_out = shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(spec: NetworkSpec, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for lay in spec.layers:
        s = _glorot_limit(lay.weight_shape)
        tensors[f"{lay.name}.weight"] = Tensor(rng.uniform(-s, s, lay.weight_shape), name=f"{lay.name}.weight")
        if lay.bias:
            tensors[f"{lay.name}.bias"] = Tensor(np.zeros(lay.weight_shape[-1]), name=f"{lay.name}.bias")
    return ModelParams(spec, tensors, seed)


def build(variant: ModelVariant | str, scale: Scale | str = Scale.DESK, seed: int = 0,
          stacked_attribute_encoder: bool = False):
    """Return ``(NetworkSpec, ModelParams)`` with seeded Glorot-uniform weights, zero biases."""
    spec = build_spec(variant, scale, stacked_attribute_encoder)
    return spec, init_params(spec, seed)


def freeze_mask(spec: NetworkSpec, stage: int) -> set[str]:
    """Names trainable in ``stage``: new layers only (1) or everything (2)."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    groups = spec.param_groups()
    if stage == 2:
        return set(groups)
    return {name for name, g in groups.items() if g == NEW_LAYERS}


# ------------------------------------------------------------------ forward


@dataclass
class ForwardOutput:
    apparent: Tensor  # normalised sigmoid output, [B, 1] or [1]
    real: Tensor | None = None

    @property
    def apparent_pred(self) -> np.ndarray:
        return self.apparent.data.reshape(-1) * AGE_MAX

    @property
    def real_pred(self) -> np.ndarray | None:
        return None if self.real is None else self.real.data.reshape(-1) * AGE_MAX


def _apply(lay: LayerSpec, params: dict[str, Tensor], x: Tensor) -> Tensor:
    w = params[f"{lay.name}.weight"]
    b = params.get(f"{lay.name}.bias") if lay.bias else None
    if lay.kind == "conv2d":
        y = T.conv2d(x, w, b, stride=1, padding=lay.padding)
    else:
        y = T.dense(x, w, b)
    if lay.activation == "relu":
        y = T.relu(y)
    elif lay.activation == "sigmoid":
        y = T.sigmoid(y)
    if lay.pool_after:
        y = T.maxpool2(y)
    return y


def forward(params: ModelParams, image, attributes=None) -> ForwardOutput:
    """Run the variant's graph on one image ``[h,w,c]`` or a batch ``[B,h,w,c]``."""
    spec = params.spec
    p = params.tensors
    img = T.as_tensor(image)
    single = img.data.ndim == 3
    if img.shape[-3:] != spec.image_shape or img.data.ndim not in (3, 4):
        raise ShapeError(f"image shape {img.shape} does not match {spec.image_shape}")
    if single:
        img = Tensor(img.data[None])
    batch = img.shape[0]

    attrs = None
    if spec.variant.uses_attributes:
        if attributes is None:
            raise ShapeError(f"{spec.variant.value} requires an attribute vector")
        attrs = T.as_tensor(attributes)
        if attrs.data.ndim == 1:
            attrs = Tensor(attrs.data[None])
        if attrs.shape != (batch, spec.attribute_dim):
            raise ShapeError(f"attributes shape {attrs.shape} != ({batch}, {spec.attribute_dim})")
    elif attributes is not None:
        raise ShapeError(f"{spec.variant.value} takes no attribute input")

    layers = {lay.name: lay for lay in spec.layers}
    x = img
    for lay in spec.layers:
        if lay.kind != "conv2d" or lay.group != BACKBONE:
            continue
        x = _apply(lay, p, x)

    real = None
    if spec.variant is ModelVariant.CASE1:
        x = T.flatten_batch(x)
        for name in ("fc1", "fc2", "predict"):
            x = _apply(layers[name], p, x)
        app = x
    else:
        x = T.flatten_batch(_apply(layers["reduce_conv"], p, x))
        h1 = None
        if attrs is not None:
            h1 = _apply(layers["hidden_layer"], p, attrs)
            x = T.concat([x, h1])
        x = _apply(layers["fc2"], p, x)
        app = _apply(layers["predict_app"], p, x)
        if spec.variant.dual_head:
            h2 = _apply(layers["hidden_layer_2"], p, h1 if spec.stacked_attribute_encoder else attrs)
            r = _apply(layers["fc3"], p, T.concat([app, h2]))
            real = _apply(layers["predict_real"], p, r)

    if single:
        app = T.flatten(app)
        real = None if real is None else T.flatten(real)
    return ForwardOutput(app, real)


# --------------------------------------------------------------- checkpoints

MANIFEST = "manifest.json"


def save_params(params: ModelParams, directory, metadata: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one PTNS file per parameter."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "variant": params.variant.value,
        "scale": params.scale.value,
        "seed": params.seed,
        "stacked_attribute_encoder": params.spec.stacked_attribute_encoder,
        "layers": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
        "training": metadata or {},
    }
    for name, t in params.tensors.items():
        T.save_tensor(out / f"{name}.ptns", t.data)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_params(directory) -> tuple[ModelParams, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    spec = build_spec(manifest["variant"], manifest["scale"], manifest.get("stacked_attribute_encoder", False))
    expected = spec.param_shapes()
    tensors = {}
    for entry in manifest["layers"]:
        name = entry["name"]
        arr = T.load_tensor(directory / f"{name}.ptns")
        if name not in expected or tuple(arr.shape) != tuple(expected[name]):
            raise ShapeError(f"checkpoint tensor {name} {arr.shape} does not match the network")
        tensors[name] = Tensor(arr, name=name)
    missing = set(expected) - set(tensors)
    if missing:
        raise ShapeError(f"checkpoint lacks {sorted(missing)}")
    # keep spec order
    ordered = {k: tensors[k] for k in expected}
    return ModelParams(spec, ordered, manifest["seed"]), manifest.get("training", {})
