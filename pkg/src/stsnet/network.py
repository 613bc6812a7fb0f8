"""The six saliency network variants and their shared layer chain.

Every variant runs the same convolutional trunk:

    C(96,7,3) LRN P C(256,5,2) P C(512,3,1) C(512,5,2) C(512,5,2)
    C(256,7,3) C(128,11,5) C(32,11,5) C(1,13,6) D(8x8, s=4, p=2)

with a ReLU after each convolution except the last, stride 1 throughout,
and a final transposed convolution restoring the input resolution (two
ceiling-mode pools halve twice, the deconvolution upsamples by 4).

Variants:
  SSNet         appearance frame only
  TSNet         flow image only
  STSDirectNet  appearance and flow stacked into a 6-channel input
  STSAvgNet     pixelwise mean of an SSNet-style and a TSNet-style stream
  STSMaxNet     two streams merged by elementwise max at the fusion layer
  STSConvNet    two streams concatenated and mixed by a 1x1 filterbank

Channel widths may be scaled down by a rational factor to make training
practical on a CPU; kernel sizes, strides, paddings and the fusion
position are untouched, and the single-channel output stays fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import ops
from .errors import ShapeError, SpecError
from .ops import ConvParams, LRNParams

VARIANTS = ("SSNet", "TSNet", "STSDirectNet", "STSAvgNet", "STSMaxNet", "STSConvNet")
TWO_STREAM_FUSED = ("STSMaxNet", "STSConvNet")

# (filters, kernel, padding) per convolution, stride 1; the last entry's
# filter count is never width-scaled because it is the saliency channel.
CONV_GEOMETRY = (
    (96, 7, 3),
    (256, 5, 2),
    (512, 3, 1),
    (512, 5, 2),
    (512, 5, 2),
    (256, 7, 3),
    (128, 11, 5),
    (32, 11, 5),
    (1, 13, 6),
)
DECONV_KERNEL, DECONV_STRIDE, DECONV_PAD = 8, 4, 2
N_CONVS = len(CONV_GEOMETRY)
MAX_FUSION_LAYER = 7


@dataclass(frozen=True)
class LayerSpec:
    """One entry of the declarative layer chain."""

    kind: str  # conv | relu | lrn | pool | deconv
    d: int | None = None
    f: int | None = None
    p: int | None = None
    s: int = 1
    index: int | None = None  # 1-based conv index, convs only


@dataclass(frozen=True)
class NetworkSpec:
    variant: str
    fusion_layer: int = 5
    width_scale: Fraction = Fraction(1)
    input_size: tuple[int, int] = (320, 240)  # (W, H)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise SpecError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 1 <= self.fusion_layer <= MAX_FUSION_LAYER:
            raise SpecError(f"fusion_layer must be in 1..{MAX_FUSION_LAYER}, got {self.fusion_layer}")
        scale = Fraction(self.width_scale)
        if scale <= 0:
            raise SpecError(f"width_scale must be positive, got {self.width_scale}")
        object.__setattr__(self, "width_scale", scale)
        w, h = self.input_size
        if w < 4 or h < 4 or w % 4 or h % 4:
            raise SpecError(f"input_size must have both dims divisible by 4, got {self.input_size}")

    def scaled_channels(self, base: int, conv_index: int) -> int:
        if conv_index == N_CONVS:  # saliency output channel is fixed
            return base
        d = int(base * self.width_scale)
        if d < 1:
            raise SpecError(
                f"width_scale {self.width_scale} drives conv{conv_index} "
                f"({base} filters) below one channel"
            )
        return d

    def layer_chain(self) -> list[LayerSpec]:
        chain: list[LayerSpec] = []
        for i, (d, f, p) in enumerate(CONV_GEOMETRY, start=1):
            chain.append(LayerSpec("conv", d=self.scaled_channels(d, i), f=f, p=p, index=i))
            if i < N_CONVS:
                chain.append(LayerSpec("relu"))
            if i == 1:
                chain.append(LayerSpec("lrn"))
                chain.append(LayerSpec("pool", f=3, s=2))
            elif i == 2:
                chain.append(LayerSpec("pool", f=3, s=2))
        chain.append(LayerSpec("deconv", d=1, f=DECONV_KERNEL, p=DECONV_PAD, s=DECONV_STRIDE))
        return chain

    def split_chain(self) -> tuple[list[LayerSpec], list[LayerSpec]]:
        """Head (through the fusion conv's ReLU) and the shared tail."""
        chain = self.layer_chain()
        cut = None
        for pos, spec in enumerate(chain):
            if spec.kind == "conv" and spec.index == self.fusion_layer:
                cut = pos + 2  # conv + its relu
                break
        assert cut is not None
        return chain[:cut], chain[cut:]


# ---------------------------------------------------------------------------
# runtime layers
# ---------------------------------------------------------------------------

class _Conv:
    def __init__(self, name, params: ConvParams):
        self.name = name
        self.params = params

    def forward(self, x):
        return ops.conv2d(x, self.params), x

    def backward(self, cache, g):
        dx, dw, db = ops.conv2d_backward(cache, self.params, g)
        return dx, [(self.name + ".weight", dw), (self.name + ".bias", db)]

    def named_params(self):
        return [(self.name + ".weight", self.params.filters), (self.name + ".bias", self.params.bias)]


class _Deconv(_Conv):
    def forward(self, x):
        return ops.deconv2d(x, self.params), x

    def backward(self, cache, g):
        dx, dw, db = ops.deconv2d_backward(cache, self.params, g)
        return dx, [(self.name + ".weight", dw), (self.name + ".bias", db)]


class _Pool:
    def __init__(self, k, stride):
        self.k = k
        self.stride = stride

    def forward(self, x):
        out, argmax = ops.maxpool(x, self.k, self.stride)
        return out, (x.shape, argmax)

    def backward(self, cache, g):
        shape, argmax = cache
        return ops.maxpool_backward(shape, argmax, g), []

    def named_params(self):
        return []


class _LRN:
    def __init__(self, params: LRNParams):
        self.params = params

    def forward(self, x):
        return ops.lrn(x, self.params), x

    def backward(self, cache, g):
        return ops.lrn_backward(cache, g, self.params), []

    def named_params(self):
        return []


class _ReLU:
    def forward(self, x):
        return ops.relu(x), x

    def backward(self, cache, g):
        return ops.relu_backward(cache, g), []

    def named_params(self):
        return []


def _run(layers, x):
    caches = []
    for layer in layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def _run_backward(layers, caches, g, grads):
    for layer, cache in zip(reversed(layers), reversed(caches)):
        g, param_grads = layer.backward(cache, g)
        for name, value in param_grads:
            if name in grads:
                grads[name] += value
            else:
                grads[name] = value
    return g


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Model:
    """A built network: named parameter tensors plus the forward graph.

    Immutable during forward/predict; training mutates the parameter
    arrays in place through `parameters()`.
    """

    def __init__(self, spec: NetworkSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.streams: dict[str, list] = {}
        self.fusion_conv: _Conv | None = None
        self.tail: list = []
        self.appearance_mean = np.zeros(3, dtype=self.dtype)
        self.flow_mean = np.zeros(3, dtype=self.dtype)

    # -- construction ------------------------------------------------------

    @staticmethod
    def _init_conv(rng, name, spec: LayerSpec, d_in, dtype, deconv=False):
        fan_in = d_in * spec.f * spec.f
        w = (rng.standard_normal((spec.d, d_in, spec.f, spec.f)) / np.sqrt(fan_in)).astype(dtype)
        b = np.zeros(spec.d, dtype=dtype)
        params = ConvParams(w, b, padding=spec.p, stride=spec.s)
        return (_Deconv if deconv else _Conv)(name, params)

    @classmethod
    def _build_chain(cls, rng, prefix, specs, d_in, dtype):
        layers = []
        conv_i = 0
        for spec in specs:
            if spec.kind == "conv":
                conv_i = spec.index
                layers.append(cls._init_conv(rng, f"{prefix}.conv{conv_i}", spec, d_in, dtype))
                d_in = spec.d
            elif spec.kind == "deconv":
                layers.append(cls._init_conv(rng, f"{prefix}.deconv", spec, d_in, dtype, deconv=True))
                d_in = spec.d
            elif spec.kind == "relu":
                layers.append(_ReLU())
            elif spec.kind == "lrn":
                layers.append(_LRN(LRNParams()))
            elif spec.kind == "pool":
                layers.append(_Pool(spec.f, spec.s))
        return layers, d_in

    # -- parameter access ---------------------------------------------------

    def parameters(self):
        """Named parameter arrays in declaration order."""
        out = []
        for key in sorted(self.streams):
            for layer in self.streams[key]:
                out.extend(layer.named_params())
        if self.fusion_conv is not None:
            out.extend(self.fusion_conv.named_params())
        for layer in self.tail:
            out.extend(layer.named_params())
        return out

    def param_dict(self):
        return dict(self.parameters())

    # -- forward ------------------------------------------------------------

    def _check_inputs(self, appearance, flow_image):
        appearance = np.asarray(appearance, dtype=self.dtype)
        if appearance.ndim == 3:
            appearance = appearance[None]
        if appearance.ndim != 4 or appearance.shape[1] != 3:
            raise ShapeError(f"appearance must be (N, 3, H, W), got {appearance.shape}")
        h, w = appearance.shape[2:]
        if (w, h) != self.spec.input_size:
            raise ShapeError(
                f"appearance is {w}x{h}, model expects {self.spec.input_size[0]}x{self.spec.input_size[1]}"
            )
        if h % 4 or w % 4:
            raise ShapeError(f"input spatial dims must be divisible by 4, got {w}x{h}")
        if self.spec.variant == "SSNet":
            flow = None
        else:
            if flow_image is None:
                raise ShapeError(f"{self.spec.variant} requires a flow image input")
            flow = np.asarray(flow_image, dtype=self.dtype)
            if flow.ndim == 3:
                flow = flow[None]
            if flow.shape != appearance.shape:
                raise ShapeError(f"flow image shape {flow.shape} does not match appearance {appearance.shape}")
        app = appearance - self.appearance_mean[:, None, None]
        flo = None if flow is None else flow - self.flow_mean[:, None, None]
        return app, flo

    def forward(self, appearance, flow_image=None):
        """Predict an (N, 1, H, W) saliency map batch."""
        out, _ = self._forward_with_caches(appearance, flow_image)
        return out

    def _forward_with_caches(self, appearance, flow_image):
        app, flow = self._check_inputs(appearance, flow_image)
        v = self.spec.variant
        if v == "SSNet":
            out, c = _run(self.streams["s"], app)
            return out, {"s": c}
        if v == "TSNet":
            out, c = _run(self.streams["t"], flow)
            return out, {"t": c}
        if v == "STSDirectNet":
            stacked = ops.channel_concat(app, flow)
            out, c = _run(self.streams["st"], stacked)
            return out, {"st": c}
        if v == "STSAvgNet":
            out_s, c_s = _run(self.streams["s"], app)
            out_t, c_t = _run(self.streams["t"], flow)
            return 0.5 * (out_s + out_t), {"s": c_s, "t": c_t}
        if v == "STSMaxNet":
            head_s, c_s = _run(self.streams["s"], app)
            head_t, c_t = _run(self.streams["t"], flow)
            fused, selector = ops.elementwise_max(head_s, head_t)
            out, c_tail = _run(self.tail, fused)
            return out, {"s": c_s, "t": c_t, "fuse": selector, "tail": c_tail}
        # STSConvNet
        head_s, c_s = _run(self.streams["s"], app)
        head_t, c_t = _run(self.streams["t"], flow)
        stacked = ops.channel_concat(head_s, head_t)
        mixed, c_fuse = self.fusion_conv.forward(stacked)
        out, c_tail = _run(self.tail, mixed)
        return out, {"s": c_s, "t": c_t, "fuse": c_fuse, "d_head": head_s.shape[1], "tail": c_tail}

    def fusion_activations(self, appearance, flow_image):
        """Stream maps at the fusion point and the fused map (fused variants)."""
        if self.spec.variant not in TWO_STREAM_FUSED:
            raise SpecError(f"{self.spec.variant} has no fusion point")
        app, flow = self._check_inputs(appearance, flow_image)
        head_s, _ = _run(self.streams["s"], app)
        head_t, _ = _run(self.streams["t"], flow)
        if self.spec.variant == "STSMaxNet":
            fused, _ = ops.elementwise_max(head_s, head_t)
        else:
            fused, _ = self.fusion_conv.forward(ops.channel_concat(head_s, head_t))
        return head_s, head_t, fused

    # -- backward -----------------------------------------------------------

    def loss_and_grads(self, appearance, flow_image, target):
        """Euclidean loss and gradients for every named parameter."""
        pred, caches = self._forward_with_caches(appearance, flow_image)
        loss, g = euclidean_loss(pred, np.asarray(target, dtype=self.dtype), with_grad=True)
        grads: dict[str, np.ndarray] = {}
        v = self.spec.variant
        if v in ("SSNet", "TSNet", "STSDirectNet"):
            key = {"SSNet": "s", "TSNet": "t", "STSDirectNet": "st"}[v]
            _run_backward(self.streams[key], caches[key], g, grads)
        elif v == "STSAvgNet":
            _run_backward(self.streams["s"], caches["s"], 0.5 * g, grads)
            _run_backward(self.streams["t"], caches["t"], 0.5 * g, grads)
        elif v == "STSMaxNet":
            g_fused = _run_backward(self.tail, caches["tail"], g, grads)
            g_s, g_t = ops.elementwise_max_backward(caches["fuse"], g_fused)
            _run_backward(self.streams["s"], caches["s"], g_s, grads)
            _run_backward(self.streams["t"], caches["t"], g_t, grads)
        else:  # STSConvNet
            g_mixed = _run_backward(self.tail, caches["tail"], g, grads)
            g_stacked, fuse_grads = self.fusion_conv.backward(caches["fuse"], g_mixed)
            for name, value in fuse_grads:
                grads[name] = value
            g_s, g_t = ops.channel_concat_backward(g_stacked, caches["d_head"])
            _run_backward(self.streams["s"], caches["s"], g_s, grads)
            _run_backward(self.streams["t"], caches["t"], g_t, grads)
        return loss, grads

    def set_means(self, appearance_mean, flow_mean):
        self.appearance_mean = np.asarray(appearance_mean, dtype=self.dtype).reshape(3).copy()
        self.flow_mean = np.asarray(flow_mean, dtype=self.dtype).reshape(3).copy()


def build_network(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Construct and initialize a model for the given spec.

    Weights are zero-mean Gaussian with std 1/sqrt(fan-in), biases zero.
    The STSConvNet fusion filterbank starts as two stacked identity
    blocks, so at initialization the fused map equals the sum of the two
    stream maps. Deterministic for a fixed seed.
    """
    model = Model(spec, dtype=dtype)
    rng = np.random.default_rng(seed)
    v = spec.variant

    if v in ("SSNet", "TSNet", "STSDirectNet"):
        key = {"SSNet": "s", "TSNet": "t", "STSDirectNet": "st"}[v]
        d_in = 6 if v == "STSDirectNet" else 3
        model.streams[key], _ = Model._build_chain(rng, key, spec.layer_chain(), d_in, dtype)
    elif v == "STSAvgNet":
        model.streams["s"], _ = Model._build_chain(rng, "s", spec.layer_chain(), 3, dtype)
        model.streams["t"], _ = Model._build_chain(rng, "t", spec.layer_chain(), 3, dtype)
    else:
        head, tail = spec.split_chain()
        model.streams["s"], d_head = Model._build_chain(rng, "s", head, 3, dtype)
        model.streams["t"], _ = Model._build_chain(rng, "t", head, 3, dtype)
        if v == "STSConvNet":
            w = np.zeros((d_head, 2 * d_head, 1, 1), dtype=dtype)
            idx = np.arange(d_head)
            w[idx, idx, 0, 0] = 1.0
            w[idx, d_head + idx, 0, 0] = 1.0
            model.fusion_conv = _Conv("fusion", ConvParams(w, np.zeros(d_head, dtype=dtype)))
        model.tail, _ = Model._build_chain(rng, "tail", tail, d_head, dtype)
    return model


def euclidean_loss(pred, target, with_grad=False):
    """L = sum((pred - target)^2) / (2N) over all N elements.

    The gradient w.r.t. pred is (pred - target) / N. The sum accumulates
    in double precision regardless of the input dtype.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    n = diff.size
    loss = float(np.dot(diff.ravel().astype(np.float64), diff.ravel().astype(np.float64)) / (2 * n))
    if not with_grad:
        return loss
    return loss, diff / n
