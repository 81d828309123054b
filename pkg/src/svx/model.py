"""Model assembly: tensor naming schema, weight container IO, random init.

Weight files store already-folded convolution weights and biases (any
normalization is folded before saving), keyed by a flat name schema:

    backbone.stem.{weight,bias}
    backbone.stage{i}.down.{weight,bias}          i = 2..6
    backbone.stage{i}.block{j}.conv{1,2}.{weight,bias}
    head.group{g}.{cls,reg}.{weight,bias}
"""

from __future__ import annotations

import numpy as np

from . import formats
from .backbone import BackboneConfig, BackboneWeights, StageWeights
from .errors import MissingTensor, ShapeMismatch, UnknownTensor
from .head import GroupWeights, HeadConfig, HeadWeights
from .sparse import STRIDED, SUBMANIFOLD, ConvLayer
from .voxelize import FEATURE_CHANNELS


def tensor_spec(backbone_cfg: BackboneConfig, head_cfg: HeadConfig,
                in_channels: int = FEATURE_CHANNELS) -> dict[str, tuple[int, ...]]:
    """Expected tensor name -> shape map for a configuration."""
    dims = backbone_cfg.dims
    kb = (backbone_cfg.kernel_size,) * dims
    spec: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, kernel):
        spec[f"{name}.weight"] = kernel + (cin, cout)
        spec[f"{name}.bias"] = (cout,)

    ch = backbone_cfg.channels
    conv("backbone.stem", in_channels, ch[0], kb)
    prev = ch[0]
    for i in range(6):
        stage = i + 1
        if i > 0:
            conv(f"backbone.stage{stage}.down", prev, ch[i], kb)
            prev = ch[i]
        for j in range(backbone_cfg.blocks_per_stage):
            conv(f"backbone.stage{stage}.block{j}.conv1", prev, prev, kb)
            conv(f"backbone.stage{stage}.block{j}.conv2", prev, prev, kb)

    kh = (head_cfg.head_kernel,) * 2
    for g, classes in enumerate(head_cfg.class_groups):
        conv(f"head.group{g}.cls", ch[3], len(classes), kh)
        conv(f"head.group{g}.reg", ch[3], head_cfg.num_reg_channels, kh)
    return spec


def random_weights(backbone_cfg: BackboneConfig, head_cfg: HeadConfig, seed: int,
                   in_channels: int = FEATURE_CHANNELS) -> dict[str, np.ndarray]:
    """Deterministic He-scaled random weights with zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_spec(backbone_cfg, head_cfg, in_channels).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[:-1]))
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)
    return tensors


def build_weights(tensors: dict[str, np.ndarray], backbone_cfg: BackboneConfig,
                  head_cfg: HeadConfig,
                  in_channels: int = FEATURE_CHANNELS) -> tuple[BackboneWeights, HeadWeights]:
    """Validate a raw tensor map against the schema and assemble the model.

    Raises MissingTensor / UnknownTensor / ShapeMismatch with the offending
    tensor named.
    """
    spec = tensor_spec(backbone_cfg, head_cfg, in_channels)
    for name in spec:
        if name not in tensors:
            raise MissingTensor(f"weight file lacks tensor {name!r}")
    for name in tensors:
        if name not in spec:
            raise UnknownTensor(f"weight file has unexpected tensor {name!r}")
    for name, shape in spec.items():
        if tuple(tensors[name].shape) != shape:
            raise ShapeMismatch(
                f"tensor {name!r} has shape {tuple(tensors[name].shape)}, expected {shape}"
            )

    def conv(name, mode=SUBMANIFOLD, prune=0.0):
        return ConvLayer(tensors[f"{name}.weight"], tensors[f"{name}.bias"],
                         mode=mode, prune_ratio=prune, name=name)

    stages = []
    for i in range(6):
        stage = i + 1
        down = None
        if i > 0:
            ratio = backbone_cfg.prune_ratio if i in backbone_cfg.prune_stages else 0.0
            down = conv(f"backbone.stage{stage}.down", mode=STRIDED, prune=ratio)
        blocks = tuple(
            (conv(f"backbone.stage{stage}.block{j}.conv1"),
             conv(f"backbone.stage{stage}.block{j}.conv2"))
            for j in range(backbone_cfg.blocks_per_stage)
        )
        stages.append(StageWeights(down, blocks))
    backbone = BackboneWeights(conv("backbone.stem"), tuple(stages))

    groups = tuple(
        GroupWeights(conv(f"head.group{g}.cls"), conv(f"head.group{g}.reg"))
        for g in range(head_cfg.num_groups)
    )
    return backbone, HeadWeights(groups)


def save_weights(path, tensors: dict[str, np.ndarray]) -> None:
    formats.write_weights(path, tensors)


def load_weights(path, backbone_cfg: BackboneConfig, head_cfg: HeadConfig,
                 in_channels: int = FEATURE_CHANNELS) -> tuple[BackboneWeights, HeadWeights]:
    tensors = formats.read_weights(path)
    return build_weights(tensors, backbone_cfg, head_cfg, in_channels)
