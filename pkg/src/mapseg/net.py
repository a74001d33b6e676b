"""Fully convolutional network core: layer math, builders, executor, checkpoints.

All tensors are float64 numpy arrays.  Activations are (C, H, W); conv
weights are (out_ch, in_ch, k, k); transposed-convolution weights are
(in_ch, out_ch, k, k) so that the upsampling operation is exactly the
adjoint of conv_forward with the same tensor.  Backward passes are written
out explicitly per layer; there is no autodiff.

The full-scale builder reproduces a VGG-16-derived FCN in two variants:
the classic two-skip model and a three-skip modification that taps the
second pooling stage and splits the final upsampling kernel in two.  The
reduced "desk" family mirrors the same topology at a size that trains in
seconds on a CPU.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    FormatViolation,
    IncompatibleInputSize,
    IoFailure,
    NonFiniteInput,
    OddSpatialDim,
    ShapeMismatch,
    SpecMismatch,
)

Array = np.ndarray


# ---------------------------------------------------------------------------
# layer math


def _im2col(x_padded: Array, k: int, stride: int, out_h: int, out_w: int) -> Array:
    """(C, Hp, Wp) -> (C*k*k, out_h*out_w) column matrix."""
    windows = np.lib.stride_tricks.sliding_window_view(x_padded, (k, k), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (C, out_h, out_w, k, k)
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(x_padded.shape[0] * k * k, out_h * out_w)
    return np.ascontiguousarray(cols)


def _col2im(cols: Array, c: int, hp: int, wp: int, k: int, stride: int, out_h: int, out_w: int) -> Array:
    """Adjoint of _im2col: scatter-add columns back to a (C, Hp, Wp) array."""
    out = np.zeros((c, hp, wp))
    blocks = cols.reshape(c, k, k, out_h, out_w)
    for i in range(k):
        for j in range(k):
            out[:, i : i + (out_h - 1) * stride + 1 : stride, j : j + (out_w - 1) * stride + 1 : stride] += blocks[:, i, j]
    return out


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ShapeMismatch(f"conv geometry invalid: size={size} k={k} stride={stride} pad={pad}")
    return span // stride + 1


def conv_forward(x: Array, weights: Array, bias: Array, stride: int = 1, pad: int = 0) -> Array:
    """out[o,y,x] = bias[o] + sum_{c,i,j} w[o,c,i,j] * x_padded[c, y*s+i, x*s+j]."""
    if x.ndim != 3 or weights.ndim != 4 or weights.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"conv shapes: x {x.shape}, w {weights.shape}")
    o, c, k, k2 = weights.shape
    if k != k2 or bias.shape != (o,):
        raise ShapeMismatch(f"conv kernel/bias shapes: w {weights.shape}, b {bias.shape}")
    out_h = _conv_out_size(x.shape[1], k, stride, pad)
    out_w = _conv_out_size(x.shape[2], k, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, k, stride, out_h, out_w)
    out = weights.reshape(o, -1) @ cols + bias[:, None]
    return out.reshape(o, out_h, out_w)


def conv_backward(grad_out: Array, x: Array, weights: Array, stride: int = 1, pad: int = 0) -> tuple[Array, Array, Array]:
    """Gradients of conv_forward w.r.t. input, weights, bias."""
    o, c, k, _ = weights.shape
    out_h, out_w = grad_out.shape[1], grad_out.shape[2]
    if grad_out.shape[0] != o:
        raise ShapeMismatch("grad_out channels do not match weights")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, k, stride, out_h, out_w)
    go = grad_out.reshape(o, -1)
    grad_bias = go.sum(axis=1)
    grad_weights = (go @ cols.T).reshape(weights.shape)
    grad_cols = weights.reshape(o, -1).T @ go
    gxp = _col2im(grad_cols, c, xp.shape[1], xp.shape[2], k, stride, out_h, out_w)
    grad_x = gxp[:, pad : gxp.shape[1] - pad, pad : gxp.shape[2] - pad] if pad else gxp
    return grad_x, grad_weights, grad_bias


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: Array, x: Array) -> Array:
    # gradient at exactly 0 is defined as 0
    return grad_out * (x > 0)


def maxpool2(x: Array) -> tuple[Array, Array]:
    """2x2 max pooling with stride 2; returns (output, argmax cache).

    Ties resolve to the first position in row-major block scan order
    (top-left first).
    """
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise OddSpatialDim(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, arg[..., None], axis=3)[..., 0]
    return out, arg


def maxpool2_backward(grad_out: Array, arg: Array, input_shape: tuple[int, int, int]) -> Array:
    c, h, w = input_shape
    scatter = np.zeros((c, h // 2, w // 2, 4))
    np.put_along_axis(scatter, arg[..., None], grad_out[..., None], axis=3)
    return scatter.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)


def deconv_forward(x: Array, weights: Array, stride: int) -> Array:
    """Transposed convolution: the exact adjoint of conv_forward (pad 0).

    `weights` is (in_ch, out_ch, k, k); the output spatial size is
    (in - 1) * stride + k.  For all tensors u, v of matching shapes:
    <conv(u), v> == <u, deconv(v)> with the same weight tensor.
    """
    if x.ndim != 3 or weights.ndim != 4 or weights.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"deconv shapes: x {x.shape}, w {weights.shape}")
    cin, cout, k, k2 = weights.shape
    if k != k2 or stride < 1:
        raise ShapeMismatch("deconv kernel must be square, stride >= 1")
    h, w = x.shape[1], x.shape[2]
    out_h = (h - 1) * stride + k
    out_w = (w - 1) * stride + k
    grad_cols = weights.reshape(cin, -1).T @ x.reshape(cin, -1)
    return _col2im(grad_cols, cout, out_h, out_w, k, stride, h, w)


def deconv_backward(grad_out: Array, x: Array, weights: Array, stride: int) -> tuple[Array, Array]:
    """Gradients of deconv_forward w.r.t. input and weights (no bias)."""
    cin, cout, k, _ = weights.shape
    conv_view = weights  # same memory layout as a conv mapping cout -> cin
    grad_x = conv_forward(grad_out, conv_view, np.zeros(cin), stride=stride, pad=0)
    h, w = x.shape[1], x.shape[2]
    cols = _im2col(grad_out, k, stride, h, w)
    grad_weights = (x.reshape(cin, -1) @ cols.T).reshape(weights.shape)
    return grad_x, grad_weights


def dropout(x: Array, rate: float, seed: int, training_flag: bool) -> Array:
    """Inverted dropout: survivors scaled by 1/(1-rate); inference is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training_flag or rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate)


def center_crop(x: Array, target_hw: tuple[int, int]) -> tuple[Array, tuple[int, int]]:
    """Symmetric center crop; margins must be nonnegative and even."""
    th, tw = target_hw
    mh, mw = x.shape[1] - th, x.shape[2] - tw
    if mh < 0 or mw < 0 or mh % 2 or mw % 2:
        raise ShapeMismatch(f"cannot center-crop {x.shape[1:]} to {target_hw}")
    oy, ox = mh // 2, mw // 2
    return x[:, oy : oy + th, ox : ox + tw], (oy, ox)


def fuse_skip(upsampled: Array, skip_scores: Array) -> Array:
    """Center-crop the upsampled maps to the skip's size and add."""
    if upsampled.shape[0] != skip_scores.shape[0]:
        raise ShapeMismatch("fuse_skip channel counts differ")
    cropped, _ = center_crop(upsampled, skip_scores.shape[1:])
    return cropped + skip_scores


def softmax(scores: Array) -> Array:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    if not np.isfinite(scores).all():
        raise NonFiniteInput("softmax requires finite scores")
    shifted = scores - scores.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# initializers


def glorot_init(shape: tuple[int, ...], seed: int) -> Array:
    """Uniform on +-sqrt(6 / (fan_in + fan_out)) for conv-shaped tensors."""
    if len(shape) == 4:
        o, c, k, _ = shape
        fan_in, fan_out = c * k * k, o * k * k
    elif len(shape) == 2:
        fan_out, fan_in = shape
    else:
        raise ShapeMismatch(f"glorot_init expects a 2-D or 4-D shape, got {shape}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return np.random.default_rng(seed).uniform(-limit, limit, size=shape)


def bilinear_kernel_1d(size: int) -> Array:
    factor = (size + 1) // 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    return 1.0 - np.abs(np.arange(size) - center) / factor


def bilinear_init(shape: tuple[int, ...]) -> Array:
    """Separable bilinear interpolation weights on the channel diagonal.

    Applying a stride-s transposed convolution with this kernel (size 2s)
    to a constant map reproduces the constant in the interior.
    """
    if len(shape) != 4 or shape[0] != shape[1] or shape[2] != shape[3]:
        raise ShapeMismatch(f"bilinear_init expects (C, C, k, k), got {shape}")
    c, _, k, _ = shape
    f = bilinear_kernel_1d(k)
    kernel = np.outer(f, f)
    w = np.zeros(shape)
    for i in range(c):
        w[i, i] = kernel
    return w


# ---------------------------------------------------------------------------
# declarative network spec


_KINDS = ("conv", "relu", "maxpool2", "dropout", "deconv", "fuse_skip", "softmax", "crop_to_input")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    rate: float = 0.0
    source: str | None = None  # read input from a named tap instead of the main path
    save_as: str | None = None  # remember the output under this name
    skip_source: str | None = None  # fuse_skip: tap holding the skip scores
    init: str = "glorot"  # glorot | zero | bilinear

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "deconv") and (self.kernel < 1 or self.stride < 1):
            raise ValueError(f"{self.name}: kernel and stride must be >= 1")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"{self.name}: dropout rate must be in [0, 1)")
        if self.source is not None and self.save_as is None:
            raise ValueError(f"{self.name}: branch layers must save their output")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    class_count: int = 3
    input_channels: int = 3
    variant: str = "custom"

    def parametric_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind in ("conv", "deconv")]

    def validate(self, input_size: int) -> None:
        """Shape-check the layer graph for a square input of the given size."""
        sizes: dict[str, tuple[int, int]] = {}
        channels: dict[str, int] = {}
        cur_c, cur_s = self.input_channels, input_size
        for l in self.layers:
            src_c, src_s = (channels[l.source], sizes[l.source][0]) if l.source else (cur_c, cur_s)
            if l.kind == "conv":
                if l.in_channels != src_c:
                    raise IncompatibleInputSize(f"{l.name}: expects {l.in_channels} channels, gets {src_c}")
                try:
                    out_s = _conv_out_size(src_s, l.kernel, l.stride, l.pad)
                except ShapeMismatch as exc:
                    raise IncompatibleInputSize(str(exc)) from exc
                out_c = l.out_channels
            elif l.kind == "deconv":
                out_s = (src_s - 1) * l.stride + l.kernel
                out_c = l.out_channels
            elif l.kind == "maxpool2":
                if src_s % 2:
                    raise OddSpatialDim(f"{l.name}: odd spatial dim {src_s}")
                out_s, out_c = src_s // 2, src_c
            elif l.kind == "fuse_skip":
                if l.skip_source not in sizes:
                    raise IncompatibleInputSize(f"{l.name}: skip source {l.skip_source!r} not yet defined")
                skip_s = sizes[l.skip_source][0]
                margin = src_s - skip_s
                if margin < 0 or margin % 2:
                    raise IncompatibleInputSize(f"{l.name}: cannot crop {src_s} to {skip_s}")
                if channels[l.skip_source] != src_c:
                    raise IncompatibleInputSize(f"{l.name}: channel mismatch with skip")
                out_s, out_c = skip_s, src_c
            elif l.kind == "crop_to_input":
                margin = src_s - input_size
                if margin < 0 or margin % 2:
                    raise IncompatibleInputSize(f"{l.name}: cannot crop {src_s} to input size {input_size}")
                out_s, out_c = input_size, src_c
            else:  # relu, dropout, softmax
                out_s, out_c = src_s, src_c
            if l.save_as:
                sizes[l.save_as] = (out_s, out_s)
                channels[l.save_as] = out_c
            if l.source is None:
                cur_c, cur_s = out_c, out_s
        if cur_s != input_size:
            raise IncompatibleInputSize(f"output size {cur_s} != input size {input_size}")
        if cur_c != self.class_count:
            raise IncompatibleInputSize(f"output channels {cur_c} != class count {self.class_count}")

    def to_json(self) -> str:
        payload = {
            "variant": self.variant,
            "class_count": self.class_count,
            "input_channels": self.input_channels,
            "layers": [asdict(l) for l in self.layers],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        payload = json.loads(text)
        layers = tuple(LayerSpec(**l) for l in payload["layers"])
        return cls(
            layers=layers,
            class_count=payload["class_count"],
            input_channels=payload["input_channels"],
            variant=payload.get("variant", "custom"),
        )

    def spec_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass
class Network:
    spec: NetworkSpec
    params: dict[str, Array]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}


def count_parameters(net: Network) -> int:
    return int(sum(p.size for p in net.params.values()))


# ---------------------------------------------------------------------------
# builders


def _conv(name, cin, cout, k, pad=0, source=None, save_as=None, init="glorot") -> LayerSpec:
    return LayerSpec(kind="conv", name=name, in_channels=cin, out_channels=cout,
                     kernel=k, pad=pad, source=source, save_as=save_as, init=init)


def _deconv(name, c, k, stride) -> LayerSpec:
    return LayerSpec(kind="deconv", name=name, in_channels=c, out_channels=c,
                     kernel=k, stride=stride, init="bilinear")


def _backbone_block(layers, block_idx, cin, cout, n_convs, tap=False):
    c = cin
    for i in range(1, n_convs + 1):
        layers.append(_conv(f"conv{block_idx}_{i}", c, cout, 3, pad=1))
        layers.append(LayerSpec(kind="relu", name=f"relu{block_idx}_{i}"))
        c = cout
    layers.append(LayerSpec(kind="maxpool2", name=f"pool{block_idx}",
                            save_as=f"pool{block_idx}" if tap else None))
    return cout


def fcn_spec(variant: str, class_count: int = 3, dropout_rate: float = 0.5) -> NetworkSpec:
    """Layer graph for the two full-scale FCN variants.

    `fcn_2skip_original` fuses taps after the 4th and 3rd pooling stages and
    upsamples 8x in one step; `fcn_3skip_ours` additionally taps the 2nd
    pooling stage and splits the final 8x kernel into a 2x and a 4x stage,
    which removes slightly more parameters than the extra scoring layer adds.
    """
    if variant not in ("fcn_2skip_original", "fcn_3skip_ours"):
        raise ValueError(f"unknown variant {variant!r}")
    k = class_count
    layers: list[LayerSpec] = []
    c = 3
    vgg_blocks = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))
    for bi, (cout, n) in enumerate(vgg_blocks, start=1):
        c = _backbone_block(layers, bi, c, cout, n, tap=bi in (2, 3, 4))
    layers += [
        _conv("fc6", 512, 4096, 7, pad=3),
        LayerSpec(kind="relu", name="relu6"),
        LayerSpec(kind="dropout", name="drop6", rate=dropout_rate),
        _conv("fc7", 4096, 4096, 1),
        LayerSpec(kind="relu", name="relu7"),
        LayerSpec(kind="dropout", name="drop7", rate=dropout_rate),
        _conv("score_fr", 4096, k, 1, init="zero"),
        _deconv("upscore2", k, 4, 2),
        _conv("score_pool4", 512, k, 1, source="pool4", save_as="score_pool4", init="zero"),
        LayerSpec(kind="fuse_skip", name="fuse_pool4", skip_source="score_pool4"),
        _deconv("upscore_pool4", k, 4, 2),
        _conv("score_pool3", 256, k, 1, source="pool3", save_as="score_pool3", init="zero"),
        LayerSpec(kind="fuse_skip", name="fuse_pool3", skip_source="score_pool3"),
    ]
    if variant == "fcn_2skip_original":
        layers += [_deconv("upscore8", k, 16, 8)]
    else:
        layers += [
            _deconv("upscore_pool3", k, 4, 2),
            _conv("score_pool2", 128, k, 1, source="pool2", save_as="score_pool2", init="zero"),
            LayerSpec(kind="fuse_skip", name="fuse_pool2", skip_source="score_pool2"),
            _deconv("upscore4", k, 8, 4),
        ]
    layers += [
        LayerSpec(kind="crop_to_input", name="crop_final"),
        LayerSpec(kind="softmax", name="prob"),
    ]
    return NetworkSpec(layers=tuple(layers), class_count=k, input_channels=3, variant=variant)


def desk_spec(
    channels: tuple[int, ...] = (8, 16),
    convs_per_block: int = 2,
    head_channels: int = 32,
    class_count: int = 3,
    dropout_rate: float = 0.5,
) -> NetworkSpec:
    """Reduced FCN for desk-scale training: same topology, tiny channel counts.

    Every pooling stage except the last is tapped and fused back in during
    upsampling, mirroring the full model's skip structure.
    """
    k = class_count
    layers: list[LayerSpec] = []
    c = 3
    n_blocks = len(channels)
    for bi, cout in enumerate(channels, start=1):
        c = _backbone_block(layers, bi, c, cout, convs_per_block, tap=bi < n_blocks)
    layers += [
        _conv("head", c, head_channels, 3, pad=1),
        LayerSpec(kind="relu", name="relu_head"),
        LayerSpec(kind="dropout", name="drop_head", rate=dropout_rate),
        _conv("score_fr", head_channels, k, 1, init="zero"),
    ]
    for bi in range(n_blocks - 1, 0, -1):
        layers += [
            _deconv(f"upscore_to_pool{bi}", k, 4, 2),
            _conv(f"score_pool{bi}", channels[bi - 1], k, 1,
                  source=f"pool{bi}", save_as=f"score_pool{bi}", init="zero"),
            LayerSpec(kind="fuse_skip", name=f"fuse_pool{bi}", skip_source=f"score_pool{bi}"),
        ]
    layers += [
        _deconv("upscore_final", k, 4, 2),
        LayerSpec(kind="crop_to_input", name="crop_final"),
        LayerSpec(kind="softmax", name="prob"),
    ]
    return NetworkSpec(layers=tuple(layers), class_count=k, input_channels=3,
                       variant=f"desk_{'x'.join(map(str, channels))}_h{head_channels}")


def init_parameters(spec: NetworkSpec, seed: int = 0, init: str = "default") -> dict[str, Array]:
    """Allocate parameters for a spec.

    `init="default"` follows each layer's declared scheme (Glorot for
    feature convs, zeros for the 1x1 scoring convs so training starts from
    the coarse path, bilinear for upsampling kernels); `init="zeros"`
    allocates zero tensors, which is sufficient for counting and shape work.
    """
    params: dict[str, Array] = {}
    for i, l in enumerate(spec.layers):
        if l.kind == "conv":
            shape = (l.out_channels, l.in_channels, l.kernel, l.kernel)
            if init == "zeros" or l.init == "zero":
                w = np.zeros(shape)
            else:
                w = glorot_init(shape, seed=_derive_seed(seed, i))
            params[f"{l.name}.weight"] = w
            params[f"{l.name}.bias"] = np.zeros(l.out_channels)
        elif l.kind == "deconv":
            shape = (l.in_channels, l.out_channels, l.kernel, l.kernel)
            if init == "zeros":
                params[f"{l.name}.weight"] = np.zeros(shape)
            else:
                params[f"{l.name}.weight"] = bilinear_init(shape)
    return params


def build_network(
    variant: str,
    class_count: int = 3,
    input_size: int = 512,
    seed: int = 0,
    dropout_rate: float = 0.5,
    init: str = "default",
) -> Network:
    """Instantiate one of the named architectures, validated for input_size.

    Full-scale variants require input_size divisible by 32; the desk family
    requires divisibility by 2^(number of blocks).
    """
    if variant in ("fcn_2skip_original", "fcn_3skip_ours"):
        spec = fcn_spec(variant, class_count, dropout_rate)
    elif variant == "desk":
        spec = desk_spec(class_count=class_count, dropout_rate=dropout_rate)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    spec.validate(input_size)
    return Network(spec=spec, params=init_parameters(spec, seed=seed, init=init))


def build_desk_network(
    input_size: int = 64,
    channels: tuple[int, ...] = (8, 16),
    head_channels: int = 32,
    class_count: int = 3,
    dropout_rate: float = 0.5,
    seed: int = 0,
) -> Network:
    spec = desk_spec(channels=channels, head_channels=head_channels,
                     class_count=class_count, dropout_rate=dropout_rate)
    spec.validate(input_size)
    return Network(spec=spec, params=init_parameters(spec, seed=seed))


def _derive_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(index,))


# ---------------------------------------------------------------------------
# executor


def net_forward(net: Network, x: Array, training_flag: bool = False, seed: int = 0) -> tuple[Array, list]:
    """Run the layer graph; returns (class probability maps, activation cache)."""
    if x.ndim != 3 or x.shape[0] != net.spec.input_channels:
        raise ShapeMismatch(f"input must be ({net.spec.input_channels}, H, W), got {x.shape}")
    value = x
    saved: dict[str, Array] = {}
    cache: list[dict] = []
    input_hw = x.shape[1:]
    for i, l in enumerate(net.spec.layers):
        inp = saved[l.source] if l.source else value
        entry: dict = {"input_shape": inp.shape}
        if l.kind == "conv":
            out = conv_forward(inp, net.params[f"{l.name}.weight"], net.params[f"{l.name}.bias"], l.stride, l.pad)
            entry["x"] = inp
        elif l.kind == "deconv":
            out = deconv_forward(inp, net.params[f"{l.name}.weight"], l.stride)
            entry["x"] = inp
        elif l.kind == "relu":
            out = relu(inp)
            entry["x"] = inp
        elif l.kind == "maxpool2":
            out, arg = maxpool2(inp)
            entry["arg"] = arg
        elif l.kind == "dropout":
            if training_flag and l.rate > 0.0:
                rng = np.random.default_rng(_derive_seed(seed, i))
                mask = rng.random(inp.shape) >= l.rate
                out = inp * mask / (1.0 - l.rate)
                entry["mask"] = mask
            else:
                out = inp
        elif l.kind == "fuse_skip":
            skip = saved[l.skip_source]
            cropped, offsets = center_crop(inp, skip.shape[1:])
            out = cropped + skip
            entry["offsets"] = offsets
        elif l.kind == "crop_to_input":
            out, offsets = center_crop(inp, input_hw)
            entry["offsets"] = offsets
        elif l.kind == "softmax":
            out = softmax(inp)
        else:  # pragma: no cover - guarded by LayerSpec validation
            raise ValueError(f"unknown kind {l.kind}")
        if l.save_as:
            saved[l.save_as] = out
        if l.source is None:
            value = out
        cache.append(entry)
    return value, cache


def net_backward(net: Network, cache: list, grad_scores: Array) -> dict[str, Array]:
    """Backpropagate a gradient given w.r.t. the pre-softmax score maps.

    Because the loss gradient is already expressed at the score level
    (probabilities minus one-hot labels), the terminal softmax layer is
    pass-through here.
    """
    layers = net.spec.layers
    grads: dict[str, Array] = {name: np.zeros_like(p) for name, p in net.params.items()}
    g = grad_scores
    grad_saved: dict[str, Array] = {}
    for i in range(len(layers) - 1, -1, -1):
        l = layers[i]
        entry = cache[i]
        if l.kind == "softmax":
            if i != len(layers) - 1:
                raise ShapeMismatch("softmax must be the terminal layer")
            continue
        if l.source is not None:
            gout = grad_saved.pop(l.save_as, None)
            if gout is None:
                continue  # branch output never consumed
        else:
            gout = g
            if l.save_as and l.save_as in grad_saved:
                gout = gout + grad_saved.pop(l.save_as)

        if l.kind == "conv":
            gin, gw, gb = conv_backward(gout, entry["x"], net.params[f"{l.name}.weight"], l.stride, l.pad)
            grads[f"{l.name}.weight"] += gw
            grads[f"{l.name}.bias"] += gb
        elif l.kind == "deconv":
            gin, gw = deconv_backward(gout, entry["x"], net.params[f"{l.name}.weight"], l.stride)
            grads[f"{l.name}.weight"] += gw
        elif l.kind == "relu":
            gin = relu_backward(gout, entry["x"])
        elif l.kind == "maxpool2":
            gin = maxpool2_backward(gout, entry["arg"], entry["input_shape"])
        elif l.kind == "dropout":
            mask = entry.get("mask")
            gin = gout if mask is None else gout * mask / (1.0 - l.rate)
        elif l.kind == "fuse_skip":
            grad_saved[l.skip_source] = grad_saved.get(l.skip_source, 0) + gout
            gin = _uncrop(gout, entry["input_shape"], entry["offsets"])
        elif l.kind == "crop_to_input":
            gin = _uncrop(gout, entry["input_shape"], entry["offsets"])
        else:  # pragma: no cover
            raise ValueError(f"unknown kind {l.kind}")

        if l.source is not None:
            grad_saved[l.source] = grad_saved.get(l.source, 0) + gin
        else:
            g = gin
    return grads


def _uncrop(g: Array, full_shape: tuple[int, ...], offsets: tuple[int, int]) -> Array:
    out = np.zeros(full_shape)
    oy, ox = offsets
    out[:, oy : oy + g.shape[1], ox : ox + g.shape[2]] = g
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: Network, directory: str | Path, meta: dict | None = None) -> Path:
    """Checkpoint container: JSON manifest plus raw little-endian float64 arrays."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = list(net.params)
    manifest = {
        "spec": json.loads(net.spec.to_json()),
        "spec_hash": net.spec.spec_hash(),
        "params": [{"name": n, "shape": list(net.params[n].shape)} for n in names],
        "meta": meta or {},
    }
    try:
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        with open(directory / "params.bin", "wb") as f:
            for n in names:
                f.write(np.ascontiguousarray(net.params[n], dtype="<f8").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint in {directory}") from exc
    return directory


def load_checkpoint(directory: str | Path) -> tuple[Network, dict]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        blob = (directory / "params.bin").read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint in {directory}") from exc
    except json.JSONDecodeError as exc:
        raise FormatViolation(f"checkpoint manifest in {directory} is not valid JSON") from exc
    spec = NetworkSpec.from_json(json.dumps(manifest["spec"]))
    if spec.spec_hash() != manifest["spec_hash"]:
        raise SpecMismatch("checkpoint spec hash does not match its own spec")
    params: dict[str, Array] = {}
    offset = 0
    for rec in manifest["params"]:
        shape = tuple(rec["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
        params[rec["name"]] = arr
        offset += n * 8
    if offset != len(blob):
        raise FormatViolation("checkpoint parameter blob has trailing or missing bytes")
    return Network(spec=spec, params=params), manifest.get("meta", {})
