"""Network model: layer sequence, masks, init, feature extraction, save/load.

A model is an ordered list of conv / ReLU / 2x2-maxpool layers ending in the
feature-map stack consumed by the descriptor poolings. Conv weights carry an
explicit binary keep-mask so fine-tuning can tell "pruned" apart from
"currently zero"; biases are never masked.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import container
from .tensor import (GradientTape, ShapeError, conv2d_forward, maxpool2_forward,
                     relu_forward)


@dataclass
class ConvLayer:
    weights: np.ndarray   # [C_out, C_in, kH, kW] float64
    bias: np.ndarray      # [C_out] float64
    mask: np.ndarray      # bool, same shape as weights; True = keep
    stride: int = 1
    padding: int = 0

    def descriptor(self) -> dict:
        return {"kind": "conv", "channels": int(self.weights.shape[0]),
                "kernel": int(self.weights.shape[2]), "stride": self.stride,
                "padding": self.padding}


@dataclass
class ReLULayer:
    def descriptor(self) -> dict:
        return {"kind": "relu"}


@dataclass
class MaxPool2Layer:
    def descriptor(self) -> dict:
        return {"kind": "maxpool2"}


@dataclass
class NetworkModel:
    input_shape: tuple[int, int, int]
    layers: list
    meta: dict = field(default_factory=dict)

    def conv_layers(self) -> list[tuple[int, ConvLayer]]:
        """(layer index, layer) pairs for the conv layers, in order."""
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, ConvLayer)]

    def architecture(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "layers": [l.descriptor() for l in self.layers]}


def tinynet_architecture() -> dict:
    """Reference desk-scale architecture: three conv/conv/pool style blocks
    on 3x32x32 inputs, ending in 64x4x4 feature maps."""
    conv = lambda c: {"kind": "conv", "channels": c, "kernel": 3, "stride": 1, "padding": 1}
    relu = {"kind": "relu"}
    pool = {"kind": "maxpool2"}
    return {
        "input_shape": [3, 32, 32],
        "layers": [
            conv(16), relu, conv(16), relu, pool,
            conv(32), relu, conv(32), relu, pool,
            conv(64), relu, pool,
        ],
    }


def _check_chain(input_shape, layer_descs) -> None:
    if not layer_descs:
        raise ValueError("architecture needs at least one layer")
    if layer_descs[-1]["kind"] not in ("conv", "maxpool2"):
        raise ValueError("final layer must be conv or maxpool2: its output is the "
                         "feature-map stack the descriptors pool over")
    c, h, w = input_shape
    for i, desc in enumerate(layer_descs):
        kind = desc["kind"]
        if kind == "conv":
            k, s, p = desc["kernel"], desc.get("stride", 1), desc.get("padding", 0)
            if "in_channels" in desc and desc["in_channels"] != c:
                raise ShapeError(f"layer {i}: conv expects {desc['in_channels']} input "
                                 f"channels but receives {c}")
            if h + 2 * p < k or w + 2 * p < k:
                raise ShapeError(f"layer {i}: {h}x{w} input (padding {p}) smaller than "
                                 f"kernel {k}x{k}")
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
            c = desc["channels"]
        elif kind == "relu":
            pass
        elif kind == "maxpool2":
            if h % 2 or w % 2:
                raise ShapeError(f"layer {i}: maxpool2 needs even spatial dims, got {h}x{w}")
            h, w = h // 2, w // 2
        else:
            raise ValueError(f"layer {i}: unknown layer kind {kind!r}")
        if h < 1 or w < 1:
            raise ShapeError(f"layer {i}: spatial extent collapsed to {h}x{w}")


def init_network(architecture: dict, seed: int, name: str = "net") -> NetworkModel:
    """Build a model with He-scaled normal weights (std = sqrt(2 / fan_in)),
    zero biases, and all-ones masks. Deterministic for a fixed seed."""
    input_shape = tuple(int(d) for d in architecture["input_shape"])
    if len(input_shape) != 3:
        raise ShapeError(f"input shape must be (C,H,W), got {input_shape}")
    _check_chain(input_shape, architecture["layers"])
    rng = np.random.default_rng(seed)
    layers = []
    c_in = input_shape[0]
    for desc in architecture["layers"]:
        kind = desc["kind"]
        if kind == "conv":
            c_out, k = desc["channels"], desc["kernel"]
            fan_in = c_in * k * k
            weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
            layers.append(ConvLayer(weights=weights, bias=np.zeros(c_out),
                                    mask=np.ones((c_out, c_in, k, k), dtype=bool),
                                    stride=desc.get("stride", 1),
                                    padding=desc.get("padding", 0)))
            c_in = c_out
        elif kind == "relu":
            layers.append(ReLULayer())
        elif kind == "maxpool2":
            layers.append(MaxPool2Layer())
    return NetworkModel(input_shape=input_shape, layers=layers,
                        meta={"name": name, "seed": int(seed), "history": []})


def forward_features(model: NetworkModel, image: np.ndarray,
                     tape: GradientTape | None = None,
                     conv_inputs: list | None = None) -> np.ndarray:
    """Run the layer chain and return the final feature-map stack.

    `conv_inputs`, when given, collects (layer index, input activation) for
    every conv layer; the salience module uses this to gather activation
    statistics without a second forward implementation.
    """
    if tuple(image.shape) != tuple(model.input_shape):
        raise ShapeError(f"image shape {image.shape} != model input shape {model.input_shape}")
    h = image
    for i, layer in enumerate(model.layers):
        if isinstance(layer, ConvLayer):
            if conv_inputs is not None:
                conv_inputs.append((i, h))
            h = conv2d_forward(h, layer.weights, layer.bias, layer.stride, layer.padding, tape=tape)
        elif isinstance(layer, ReLULayer):
            h = relu_forward(h, tape=tape)
        elif isinstance(layer, MaxPool2Layer):
            h = maxpool2_forward(h, tape=tape)
        else:
            raise ValueError(f"layer {i}: unknown layer type {type(layer).__name__}")
    return h


def validate_masks(model: NetworkModel) -> None:
    """Mask/weight invariant: every masked-out position holds exactly 0."""
    for i, layer in model.conv_layers():
        if layer.mask.shape != layer.weights.shape:
            raise ShapeError(f"layer {i}: mask shape {layer.mask.shape} != "
                             f"weights shape {layer.weights.shape}")
        bad = np.flatnonzero(~layer.mask.reshape(-1) & (layer.weights.reshape(-1) != 0.0))
        if bad.size:
            raise ValueError(f"layer {i}: {bad.size} nonzero weights under a zero mask "
                             f"(first flat index {bad[0]})")


def clone_model(model: NetworkModel) -> NetworkModel:
    new_layers = []
    for layer in model.layers:
        if isinstance(layer, ConvLayer):
            new_layers.append(ConvLayer(weights=layer.weights.copy(), bias=layer.bias.copy(),
                                        mask=layer.mask.copy(), stride=layer.stride,
                                        padding=layer.padding))
        else:
            new_layers.append(type(layer)())
    return NetworkModel(input_shape=model.input_shape, layers=new_layers,
                        meta=copy.deepcopy(model.meta))


def save_model(model: NetworkModel, path: str) -> None:
    tensors = []
    for i, layer in model.conv_layers():
        tensors.append((f"layers.{i}.weights", layer.weights))
        tensors.append((f"layers.{i}.bias", layer.bias))
        tensors.append((f"layers.{i}.mask", layer.mask))
    payload = {"kind": "model", "architecture": model.architecture(), "metadata": model.meta}
    container.write_container(path, payload, tensors)


def load_model(path: str) -> NetworkModel:
    manifest, tensors = container.read_container(path)
    if manifest.get("kind") != "model":
        raise container.ContainerError(f"{path} holds {manifest.get('kind')!r}, not a model")
    arch = manifest["architecture"]
    input_shape = tuple(int(d) for d in arch["input_shape"])
    _check_chain(input_shape, arch["layers"])
    layers = []
    for i, desc in enumerate(arch["layers"]):
        kind = desc["kind"]
        if kind == "conv":
            layers.append(ConvLayer(weights=tensors[f"layers.{i}.weights"],
                                    bias=tensors[f"layers.{i}.bias"],
                                    mask=tensors[f"layers.{i}.mask"],
                                    stride=desc.get("stride", 1),
                                    padding=desc.get("padding", 0)))
        elif kind == "relu":
            layers.append(ReLULayer())
        elif kind == "maxpool2":
            layers.append(MaxPool2Layer())
        else:
            raise ValueError(f"layer {i}: unknown layer kind {kind!r}")
    model = NetworkModel(input_shape=input_shape, layers=layers,
                         meta=manifest.get("metadata", {}))
    validate_masks(model)  # reject files whose stored weights violate the masks
    return model
