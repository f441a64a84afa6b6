"""The clique block: Stage-I initialization and Stage-II alternate updating.

A block with n layers owns n input kernels (block input to each layer) plus
n*(n-1) inter-layer kernels, one per ordered pair of distinct layers. An
inter-layer kernel from a lower to a higher index is applied once in Stage-I
and again in Stage-II; batchnorm parameters are never shared across stages
because the two stages see different bottom widths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .ops import BatchNormState, batchnorm, concat_channels, conv2d, dropout, relu
from .tensor import Parameter, Tensor
from .optim import initialize_parameter

Source = tuple[int, int]  # (0, 0) is the block input; (s, i) is layer i of stage s


@dataclass(frozen=True)
class CliqueBlockSpec:
    """Declarative description of one block."""

    n_layers: int
    k_filters: int
    in_channels: int
    bottleneck: bool = False
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.n_layers < 2:
            raise ConfigError(
                f"n_layers must be >= 2 (Stage-II is undefined below that), got {self.n_layers}"
            )
        if self.k_filters < 1:
            raise ConfigError(f"k_filters must be >= 1, got {self.k_filters}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


@dataclass(frozen=True)
class UpdateRow:
    """One propagation step: which sources feed which target with which kernels."""

    stage: int
    target: int
    bottom: tuple[Source, ...]
    weights: tuple[tuple[int, int], ...]


def propagation_schedule(n: int) -> list[UpdateRow]:
    """The full two-stage update schedule for a block with n layers.

    Stage-I row j concatenates the block input and layers 1..j-1; Stage-II
    row i concatenates the not-yet-updated Stage-I layers (ascending source
    index) followed by the already-updated Stage-II layers (ascending index),
    reusing kernel (m, i) or (l, i) respectively. The block input never
    appears in Stage-II.
    """
    rows: list[UpdateRow] = []
    for j in range(1, n + 1):
        bottom = ((0, 0),) + tuple((1, i) for i in range(1, j))
        weights = tuple((i, j) for i in range(j))
        rows.append(UpdateRow(1, j, bottom, weights))
    for i in range(1, n + 1):
        bottom = tuple((1, m) for m in range(i + 1, n + 1)) + tuple(
            (2, l) for l in range(1, i)
        )
        weights = tuple((m, i) for m in range(i + 1, n + 1)) + tuple(
            (l, i) for l in range(1, i)
        )
        rows.append(UpdateRow(2, i, bottom, weights))
    return rows


def _label_source(src: Source) -> str:
    if src == (0, 0):
        return "X_0"
    stage, idx = src
    return f"X_{idx}^({stage})"


def _label_set(items: Sequence[str]) -> str:
    return items[0] if len(items) == 1 else "{" + ", ".join(items) + "}"


def render_schedule(n: int) -> list[tuple[str, str, str, str]]:
    """Rows as (bottom, weights, top, feature) strings for table comparison."""
    rendered = []
    for row in propagation_schedule(n):
        bottom = _label_set([_label_source(s) for s in row.bottom])
        weights = _label_set([f"W_{i}{j}" for i, j in row.weights])
        top = _label_source((row.stage, row.target))
        rendered.append((bottom, weights, top, f"Stage-{'I' * row.stage}"))
    return rendered


@dataclass
class BNUnit:
    gamma: Parameter
    beta: Parameter
    state: BatchNormState


class WeightStore:
    """Per-block registry of shared conv kernels plus per-update batchnorms.

    ``kernels[(i, j)]`` is the kernel from layer i (0 = block input) into
    layer j; the same Parameter object is used at every graph position that
    applies it. In bottleneck mode those kernels are 1x1 and each target
    layer adds one 3x3 ``top_kernels[j]``, also shared across stages.
    """

    def __init__(self, spec: CliqueBlockSpec):
        self.spec = spec
        self.kernels: dict[tuple[int, int], Parameter] = {}
        self.top_kernels: dict[int, Parameter] = {}
        self.bn: dict[tuple[int, int], BNUnit] = {}
        self.bn_mid: dict[tuple[int, int], BNUnit] = {}

    def parameters(self) -> list[Parameter]:
        out = list(self.kernels.values()) + list(self.top_kernels.values())
        for group in (self.bn, self.bn_mid):
            for unit in group.values():
                out.extend((unit.gamma, unit.beta))
        return out

    def bn_states(self) -> dict[str, BatchNormState]:
        states = {}
        for unit in list(self.bn.values()) + list(self.bn_mid.values()):
            states[unit.gamma.name.rsplit("/", 1)[0]] = unit.state
        return states


def _bottom_channels(spec: CliqueBlockSpec, stage: int, target: int) -> int:
    if stage == 1:
        return spec.in_channels + (target - 1) * spec.k_filters
    return (spec.n_layers - 1) * spec.k_filters


def make_weight_store(
    spec: CliqueBlockSpec,
    rng: np.random.Generator,
    prefix: str = "block1",
    dtype=None,
) -> WeightStore:
    """Allocate and He-initialize the kernel set and batchnorm parameters."""
    n, k, c0 = spec.n_layers, spec.k_filters, spec.in_channels
    ksize = 1 if spec.bottleneck else 3
    store = WeightStore(spec)

    def kernel(name: str, out_c: int, in_c: int, size: int) -> Parameter:
        p = Parameter(name, np.zeros((out_c, in_c, size, size)), role="conv", dtype=dtype)
        initialize_parameter(p, rng)
        return p

    def bn_unit(name: str, channels: int) -> BNUnit:
        gamma = Parameter(f"{name}/gamma", np.ones(channels), role="bn_gamma", dtype=dtype)
        beta = Parameter(f"{name}/beta", np.zeros(channels), role="bn_beta", dtype=dtype)
        np_dtype = gamma.data.dtype
        return BNUnit(gamma, beta, BatchNormState(channels, dtype=np_dtype))

    for j in range(1, n + 1):
        store.kernels[(0, j)] = kernel(f"{prefix}/W_0_{j}", k, c0, ksize)
    for i in range(1, n + 1):
        for j in range(1, n + 1):
            if i != j:
                store.kernels[(i, j)] = kernel(f"{prefix}/W_{i}_{j}", k, k, ksize)
    if spec.bottleneck:
        for j in range(1, n + 1):
            store.top_kernels[j] = kernel(f"{prefix}/W_top_{j}", k, k, 3)
    for stage in (1, 2):
        for t in range(1, n + 1):
            width = _bottom_channels(spec, stage, t)
            store.bn[(stage, t)] = bn_unit(f"{prefix}/bn_s{stage}_t{t}", width)
            if spec.bottleneck:
                store.bn_mid[(stage, t)] = bn_unit(f"{prefix}/bn_mid_s{stage}_t{t}", k)
    return store


def conv_unit(
    bottom: Tensor,
    kernels: Sequence[Parameter],
    bn: BNUnit,
    mode: str,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.0,
    bottleneck: tuple[BNUnit, Parameter] | None = None,
) -> Tensor:
    """One update: batchnorm, relu, then one conv over the concatenated bottom.

    Concatenating the kernels along their input-channel axis makes the single
    conv equal to the sum of per-source convolutions. Dropout follows each
    convolution in train mode. With ``bottleneck`` the kernels are 1x1 and a
    second bn-relu-conv(3x3) maps the middle layer to the top layer.
    """
    expected = sum(kern.shape[1] for kern in kernels)
    if expected != bottom.shape[1]:
        raise DimensionError(
            f"conv_unit bottom has {bottom.shape[1]} channels but kernels "
            f"consume {expected}"
        )
    x = batchnorm(bottom, bn.gamma, bn.beta, bn.state, mode)
    x = relu(x)
    kcat = kernels[0] if len(kernels) == 1 else concat_channels(list(kernels))
    x = conv2d(x, kcat, stride=1, pad=kcat.shape[2] // 2)
    x = dropout(x, dropout_rate, mode, rng)
    if bottleneck is not None:
        mid_bn, top_kernel = bottleneck
        x = batchnorm(x, mid_bn.gamma, mid_bn.beta, mid_bn.state, mode)
        x = relu(x)
        x = conv2d(x, top_kernel, stride=1, pad=top_kernel.shape[2] // 2)
        x = dropout(x, dropout_rate, mode, rng)
    return x


def _run_stage(
    spec: CliqueBlockSpec,
    weights: WeightStore,
    stage: int,
    x0: Tensor | None,
    stage1: Sequence[Tensor] | None,
    mode: str,
    rng: np.random.Generator | None,
) -> list[Tensor]:
    outputs: dict[Source, Tensor] = {}
    if x0 is not None:
        outputs[(0, 0)] = x0
    if stage1 is not None:
        for i, t in enumerate(stage1, start=1):
            outputs[(1, i)] = t
    results: list[Tensor] = []
    for row in propagation_schedule(spec.n_layers):
        if row.stage != stage:
            continue
        parts = [outputs[src] for src in row.bottom]
        bottom = parts[0] if len(parts) == 1 else concat_channels(parts)
        kerns = [weights.kernels[key] for key in row.weights]
        extra = None
        if spec.bottleneck:
            extra = (weights.bn_mid[(stage, row.target)], weights.top_kernels[row.target])
        y = conv_unit(
            bottom,
            kerns,
            weights.bn[(stage, row.target)],
            mode,
            rng,
            spec.dropout_rate,
            extra,
        )
        outputs[(stage, row.target)] = y
        results.append(y)
    return results


def stage1_forward(
    spec: CliqueBlockSpec,
    weights: WeightStore,
    x0: Tensor,
    mode: str,
    rng: np.random.Generator | None = None,
) -> list[Tensor]:
    """Initialize layers 1..n from the block input, each seeing all earlier ones."""
    if x0.shape[1] != spec.in_channels:
        raise DimensionError(
            f"block input has {x0.shape[1]} channels, spec expects {spec.in_channels}"
        )
    return _run_stage(spec, weights, 1, x0, None, mode, rng)


def stage2_forward(
    spec: CliqueBlockSpec,
    weights: WeightStore,
    stage1: Sequence[Tensor],
    mode: str,
    rng: np.random.Generator | None = None,
) -> list[Tensor]:
    """Alternately re-update each layer from all other layers' freshest values.

    The block input takes no part here; kernels are the same Parameter
    objects Stage-I applied.
    """
    if len(stage1) != spec.n_layers:
        raise DimensionError(
            f"stage2_forward needs {spec.n_layers} Stage-I layers, got {len(stage1)}"
        )
    return _run_stage(spec, weights, 2, None, stage1, mode, rng)


@dataclass
class BlockOutputs:
    """Everything a block produces for the surrounding network."""

    x0: Tensor
    stage1: list[Tensor]
    stage2: list[Tensor]
    block_feature: Tensor  # x0 ++ stage2, pooled into the classifier path
    transit_feature: Tensor  # stage2 only, fed to the next block


def block_forward(
    spec: CliqueBlockSpec,
    weights: WeightStore,
    x0: Tensor,
    mode: str,
    rng: np.random.Generator | None = None,
) -> BlockOutputs:
    """Run both stages and assemble the block and transit features."""
    stage1 = stage1_forward(spec, weights, x0, mode, rng)
    stage2 = stage2_forward(spec, weights, stage1, mode, rng)
    block_feature = concat_channels([x0] + stage2)
    transit_feature = concat_channels(stage2)
    return BlockOutputs(x0, stage1, stage2, block_feature, transit_feature)
