"""Full network assembly: stems, blocks, transitions, compression, classifier.

Block b feeds its Stage-II concatenation through a channel-preserving 1x1
transition conv plus 2x2 average pooling into block b+1; the block input
concatenated with the Stage-II layers is globally pooled into the classifier.
The three two-stage variants swap which stage serves each of those two roles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .block import (
    BNUnit,
    CliqueBlockSpec,
    WeightStore,
    make_weight_store,
    stage1_forward,
    stage2_forward,
)
from .errors import ConfigError, DimensionError
from .ops import (
    BatchNormState,
    batchnorm,
    concat_channels,
    conv2d,
    dense,
    flatten,
    pool,
    relu,
    scale_channels,
    sigmoid,
)
from .optim import initialize_parameter
from .tensor import Parameter, Tensor

STEMS = ("cifar", "imagenet")
VARIANTS = ("I+I", "I+II", "II+II")
STEM_CHANNELS = 64


@dataclass(frozen=True)
class ModelConfig:
    """Declarative architecture description."""

    stem: str
    blocks: tuple[tuple[int, int], ...]  # (n_layers, k_filters) per block
    attention: bool = False
    bottleneck: bool = False
    compression: bool = False
    variant: str = "II+II"
    num_classes: int = 10
    dropout: float = 0.0
    input_channels: int = 3

    def validate(self) -> "ModelConfig":
        if self.stem not in STEMS:
            raise ConfigError(f"stem must be one of {STEMS}, got {self.stem!r}")
        if not self.blocks:
            raise ConfigError("blocks must be a nonempty list of (n_layers, k_filters)")
        for idx, entry in enumerate(self.blocks):
            if len(entry) != 2:
                raise ConfigError(f"blocks[{idx}] must be a (n_layers, k_filters) pair")
            n, k = entry
            if n < 2:
                raise ConfigError(f"blocks[{idx}].n_layers must be >= 2, got {n}")
            if k < 1:
                raise ConfigError(f"blocks[{idx}].k_filters must be >= 1, got {k}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")
        return self


_CONFIG_KEYS = {
    "stem", "blocks", "attention", "bottleneck", "compression",
    "variant", "num_classes", "dropout", "input_channels",
}


def config_from_dict(doc: dict) -> ModelConfig:
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    missing = {"stem", "blocks", "num_classes"} - set(doc)
    if missing:
        raise ConfigError(f"missing config keys: {sorted(missing)}")
    try:
        blocks = tuple((int(n), int(k)) for n, k in doc["blocks"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"blocks must be a list of [n_layers, k_filters] pairs: {exc}")
    cfg = ModelConfig(
        stem=doc["stem"],
        blocks=blocks,
        attention=bool(doc.get("attention", False)),
        bottleneck=bool(doc.get("bottleneck", False)),
        compression=bool(doc.get("compression", False)),
        variant=doc.get("variant", "II+II"),
        num_classes=int(doc["num_classes"]),
        dropout=float(doc.get("dropout", 0.0)),
        input_channels=int(doc.get("input_channels", 3)),
    )
    return cfg.validate()


def config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "stem": cfg.stem,
        "blocks": [[n, k] for n, k in cfg.blocks],
        "attention": cfg.attention,
        "bottleneck": cfg.bottleneck,
        "compression": cfg.compression,
        "variant": cfg.variant,
        "num_classes": cfg.num_classes,
        "dropout": cfg.dropout,
        "input_channels": cfg.input_channels,
    }


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return config_from_dict(doc)


@dataclass
class Transition:
    """1x1 conv (channel preserving) + optional channel attention + 2x2 avg pool."""

    bn: BNUnit
    conv: Parameter
    fc1_w: Parameter | None = None
    fc1_b: Parameter | None = None
    fc2_w: Parameter | None = None
    fc2_b: Parameter | None = None


@dataclass
class Compression:
    """1x1 conv halving the channels of a block feature on the loss path."""

    bn: BNUnit
    conv: Parameter


class Model:
    """A built CliqueNet: parameter registry plus the plan to run forward."""

    def __init__(self, config: ModelConfig, dtype=None):
        self.config = config
        self.dtype = dtype
        self._params: dict[str, Parameter] = {}
        self.stem_kernel: Parameter | None = None
        self.blocks: list[tuple[CliqueBlockSpec, WeightStore]] = []
        self.transitions: list[Transition] = []
        self.compressors: list[Compression] = []
        self.head_w: Parameter | None = None
        self.head_b: Parameter | None = None

    # -- registry ----------------------------------------------------------

    def register(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ConfigError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def param_dict(self) -> dict[str, Parameter]:
        return dict(self._params)

    def bn_states(self) -> dict[str, BatchNormState]:
        states: dict[str, BatchNormState] = {}
        for _, store in self.blocks:
            states.update(store.bn_states())
        for trans in self.transitions:
            states[trans.bn.gamma.name.rsplit("/", 1)[0]] = trans.bn.state
        for comp in self.compressors:
            states[comp.bn.gamma.name.rsplit("/", 1)[0]] = comp.bn.state
        return states

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Every tensor a checkpoint must carry: parameters + running stats."""
        table: dict[str, np.ndarray] = {n: p.data for n, p in self._params.items()}
        for prefix, state in self.bn_states().items():
            table[f"{prefix}/running_mean"] = state.running_mean
            table[f"{prefix}/running_var"] = state.running_var
        return table

    def forward(self, images: Tensor, mode: str, rng=None, capture: dict | None = None) -> Tensor:
        return model_forward(self, images, mode, rng, capture)


def block_in_channels(config: ModelConfig, index: int) -> int:
    """Channels entering block ``index`` (0-based): stem width for the first,
    else the previous block's transit width n*k."""
    if index == 0:
        return STEM_CHANNELS
    n_prev, k_prev = config.blocks[index - 1]
    return n_prev * k_prev


def build_model(config: ModelConfig, rng: np.random.Generator, dtype=None) -> Model:
    """Construct and initialize all parameters; deterministic for a fixed
    config and generator state."""
    config.validate()
    model = Model(config, dtype=dtype)

    def param(name: str, shape: tuple[int, ...], role: str) -> Parameter:
        p = Parameter(name, np.zeros(shape), role=role, dtype=dtype)
        initialize_parameter(p, rng)
        return model.register(p)

    def bn_unit(name: str, channels: int) -> BNUnit:
        gamma = param(f"{name}/gamma", (channels,), "bn_gamma")
        beta = param(f"{name}/beta", (channels,), "bn_beta")
        return BNUnit(gamma, beta, BatchNormState(channels, dtype=gamma.data.dtype))

    stem_k = 3 if config.stem == "cifar" else 7
    model.stem_kernel = param(
        "stem/conv", (STEM_CHANNELS, config.input_channels, stem_k, stem_k), "conv"
    )

    n_blocks = len(config.blocks)
    for b, (n, k) in enumerate(config.blocks):
        spec = CliqueBlockSpec(
            n_layers=n,
            k_filters=k,
            in_channels=block_in_channels(config, b),
            bottleneck=config.bottleneck,
            dropout_rate=config.dropout,
        )
        store = make_weight_store(spec, rng, prefix=f"block{b + 1}", dtype=dtype)
        for p in store.parameters():
            model.register(p)
        model.blocks.append((spec, store))

        if b < n_blocks - 1:
            width = n * k
            bn = bn_unit(f"transition{b + 1}/bn", width)
            conv = param(f"transition{b + 1}/conv", (width, width, 1, 1), "conv")
            trans = Transition(bn=bn, conv=conv)
            if config.attention:
                half = max(width // 2, 1)
                trans.fc1_w = param(f"transition{b + 1}/att_fc1/weight", (width, half), "dense_weight")
                trans.fc1_b = param(f"transition{b + 1}/att_fc1/bias", (half,), "dense_bias")
                trans.fc2_w = param(f"transition{b + 1}/att_fc2/weight", (half, width), "dense_weight")
                trans.fc2_b = param(f"transition{b + 1}/att_fc2/bias", (width,), "dense_bias")
            model.transitions.append(trans)

    pooled_width = 0
    for b, (n, k) in enumerate(config.blocks):
        feat = block_in_channels(config, b) + n * k
        if config.compression:
            out_c = feat // 2
            bn = bn_unit(f"compress{b + 1}/bn", feat)
            conv = param(f"compress{b + 1}/conv", (out_c, feat, 1, 1), "conv")
            model.compressors.append(Compression(bn=bn, conv=conv))
            pooled_width += out_c
        else:
            pooled_width += feat

    model.head_w = param("head/fc/weight", (pooled_width, config.num_classes), "dense_weight")
    model.head_b = param("head/fc/bias", (config.num_classes,), "dense_bias")
    return model


# ---------------------------------------------------------------------------
# forward pieces


def attentional_transition(
    x: Tensor,
    fc1_w: Tensor,
    fc1_b: Tensor,
    fc2_w: Tensor,
    fc2_b: Tensor,
) -> Tensor:
    """Channel attention: squeeze by global average, excite through a
    half-width relu layer and a full-width sigmoid layer, then rescale
    each channel. Output magnitude never exceeds the input's."""
    squeezed = flatten(pool(x, "global_avg"))
    hidden = relu(dense(squeezed, fc1_w, fc1_b))
    scores = sigmoid(dense(hidden, fc2_w, fc2_b))
    return scale_channels(x, scores)


def transition_forward(x: Tensor, trans: Transition, attentional: bool, mode: str) -> Tensor:
    """bn-relu-1x1 conv, optional attention, then 2x2 average pooling.

    The filter-wise multiplication sits after the convolution and before the
    down pooling."""
    y = batchnorm(x, trans.bn.gamma, trans.bn.beta, trans.bn.state, mode)
    y = relu(y)
    y = conv2d(y, trans.conv, stride=1, pad=0)
    if attentional:
        if trans.fc1_w is None:
            raise ConfigError("transition has no attention parameters")
        y = attentional_transition(y, trans.fc1_w, trans.fc1_b, trans.fc2_w, trans.fc2_b)
    return pool(y, "avg", window=2, stride=2)


def compression_head(x: Tensor, comp: Compression, mode: str) -> Tensor:
    """bn-relu-1x1 conv producing floor(C/2) channels; loss path only."""
    y = batchnorm(x, comp.bn.gamma, comp.bn.beta, comp.bn.state, mode)
    y = relu(y)
    return conv2d(y, comp.conv, stride=1, pad=0)


def stem_forward(model: Model, images: Tensor) -> Tensor:
    if model.config.stem == "cifar":
        return conv2d(images, model.stem_kernel, stride=1, pad=1)
    x = conv2d(images, model.stem_kernel, stride=2, pad=3)
    return pool(x, "max", window=3, stride=2, pad=1)


def spatial_schedule(config: ModelConfig, input_hw: tuple[int, int]) -> list[tuple[int, int]]:
    """Feature-map size at each block; raises when a transition would pool an
    odd or sub-2x2 map."""
    h, w = input_hw
    if h < 1 or w < 1:
        raise DimensionError(f"input resolution {h}x{w} is not positive")
    if config.stem == "imagenet":
        if h < 7 or w < 7:
            raise DimensionError(f"imagenet stem needs at least 7x7 input, got {h}x{w}")
        h = (h + 2 * 3 - 7) // 2 + 1
        w = (w + 2 * 3 - 7) // 2 + 1
        h = (h + 2 * 1 - 3) // 2 + 1
        w = (w + 2 * 1 - 3) // 2 + 1
    sizes = []
    for b in range(len(config.blocks)):
        sizes.append((h, w))
        if b < len(config.blocks) - 1:
            if h % 2 or w % 2 or h < 2 or w < 2:
                raise DimensionError(
                    f"block {b + 1} output {h}x{w} cannot be 2x2-average-pooled evenly"
                )
            h, w = h // 2, w // 2
    return sizes


def model_forward(
    model: Model,
    images: Tensor,
    mode: str,
    rng: np.random.Generator | None = None,
    capture: dict | None = None,
) -> Tensor:
    """Stem, blocks with per-variant stage selection, transitions, pooled
    block features, classifier logits."""
    config = model.config
    if images.ndim != 4:
        raise DimensionError(f"expected NCHW images, got {images.ndim}-d")
    if images.shape[1] != config.input_channels:
        raise DimensionError(
            f"model expects {config.input_channels} input channels, got {images.shape[1]}"
        )
    spatial_schedule(config, (images.shape[2], images.shape[3]))
    variant = config.variant

    x = stem_forward(model, images)
    pooled: list[Tensor] = []
    for b, (spec, store) in enumerate(model.blocks):
        stage1 = stage1_forward(spec, store, x, mode, rng)
        stage2 = None
        if variant != "I+I":
            stage2 = stage2_forward(spec, store, stage1, mode, rng)
        feature_stage = stage1 if variant in ("I+I", "I+II") else stage2
        transit_stage = stage1 if variant == "I+I" else stage2

        block_feature = concat_channels([x] + feature_stage)
        loss_feature = block_feature
        if config.compression:
            loss_feature = compression_head(block_feature, model.compressors[b], mode)
        pooled.append(pool(loss_feature, "global_avg"))

        if capture is not None:
            capture[f"block{b + 1}"] = {
                "x0": x,
                "stage1": stage1,
                "stage2": stage2,
                "block_feature": block_feature,
                "loss_feature": loss_feature,
            }
        if b < len(model.blocks) - 1:
            transit = concat_channels(transit_stage)
            x = transition_forward(transit, model.transitions[b], config.attention, mode)

    features = flatten(concat_channels(pooled))
    return dense(features, model.head_w, model.head_b)


# ---------------------------------------------------------------------------
# presets


@dataclass(frozen=True)
class Preset:
    config: ModelConfig
    input_hw: tuple[int, int]
    note: str = ""


def _cifar(blocks, attention=False, bottleneck=False, compression=False, note=""):
    return Preset(
        ModelConfig(
            stem="cifar",
            blocks=tuple(blocks),
            attention=attention,
            bottleneck=bottleneck,
            compression=compression,
            num_classes=10,
            dropout=0.2,
        ),
        (32, 32),
        note,
    )


def _imagenet(blocks, attention, note=""):
    return Preset(
        ModelConfig(
            stem="imagenet",
            blocks=tuple(blocks),
            attention=attention,
            bottleneck=True,
            compression=True,
            num_classes=1000,
            dropout=0.0,
        ),
        (224, 224),
        note,
    )


PRESETS: dict[str, Preset] = {
    "toy": Preset(
        ModelConfig(
            stem="cifar",
            blocks=((2, 4),),
            num_classes=2,
            dropout=0.0,
        ),
        (8, 8),
        "mini model for the 2-class synthetic smoke run",
    ),
    "cifar_36_12": _cifar([(4, 36)] * 3, note="3 blocks of 4 layers, 36 filters"),
    "cifar_64_15": _cifar([(5, 64)] * 3, note="3 blocks of 5 layers, 64 filters"),
    "cifar_80_15": _cifar([(5, 80)] * 3, note="3 blocks of 5 layers, 80 filters"),
    "cifar_80_18": _cifar([(6, 80)] * 3, note="3 blocks of 6 layers, 80 filters"),
    "cifar_150_30_ABC": _cifar(
        [(5, 150)] * 3,
        attention=True,
        bottleneck=True,
        compression=True,
        note="bottleneck variant; 5 clique layers per block, 150 filters",
    ),
    "imagenet_s0": _imagenet([(5, 36), (6, 64), (6, 100), (6, 80)], attention=False),
    "imagenet_s1": _imagenet([(5, 36), (6, 80), (6, 120), (6, 100)], attention=False),
    "imagenet_s2": _imagenet([(5, 36), (5, 80), (6, 150), (6, 120)], attention=True),
    "imagenet_s3": _imagenet([(6, 40), (6, 80), (6, 160), (6, 160)], attention=True),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"
        ) from None
