"""Dual-path super-resolution segmentation network.

One shared 3D U-Net style encoder feeds two mirrored decoders: the mask
branch (LMSR) ends in a 1-channel logit map resized to twice the input
extents, the image branch (LISR) ends in a sub-pixel (pixel shuffle) head
producing the high-resolution image.  Each decoder stage uses a
scale-aware dilated convolution (SDC) block: parallel dilated convolutions
weighted voxel-wise by sigmoid gates and summed.
"""

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import (
    ConvSpec,
    Tensor,
    adaptive_avg_pool,
    add,
    concat,
    conv_nd,
    instance_norm,
    mul,
    no_grad,
    pixel_shuffle,
    relu,
    resize_linear,
    sigmoid,
)

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    width: int = 8
    levels: int = 3
    dilation_rates: Tuple[int, ...] = (1, 2, 3, 5)
    kernel: int = 3
    sdc: bool = True
    dsr: bool = True
    edsr_blocks: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "dilation_rates", tuple(int(r) for r in self.dilation_rates))
        if self.in_channels < 1 or self.width < 1 or self.levels < 1:
            raise ConfigError("in_channels, width and levels must be positive")
        if not self.dilation_rates or any(r < 1 for r in self.dilation_rates):
            raise ConfigError(f"dilation rates must be positive, got {self.dilation_rates}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    @property
    def maps_per_branch(self) -> int:
        return len(self.dilation_rates) * self.levels if self.sdc else 0

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["dilation_rates"] = list(self.dilation_rates)
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "ModelConfig":
        return cls(**d)


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal parameter container; attribute order defines parameter names."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{path}.{i}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Conv(Module):
    def __init__(self, in_ch, out_ch, kernel=3, dilation=1, bias=True, rank=3, dtype=np.float32):
        self.spec = ConvSpec.make(in_ch, out_ch, kernel, dilation, rank=rank)
        self.weight = Parameter(np.zeros((out_ch, in_ch) + self.spec.kernel, dtype=dtype))
        if bias:
            self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return conv_nd(x, self.weight, self.bias, self.spec)


class ConvNormReLU(Module):
    """conv (no bias, the norm removes it) -> instance norm -> relu."""

    def __init__(self, in_ch, out_ch, kernel=3, dtype=np.float32):
        self.spec = ConvSpec.make(in_ch, out_ch, kernel)
        self.weight = Parameter(np.zeros((out_ch, in_ch) + self.spec.kernel, dtype=dtype))

    def __call__(self, x):
        return relu(instance_norm(conv_nd(x, self.weight, None, self.spec)))


def _fused_conv(x: Tensor, convs: Sequence[Conv]) -> List[Tensor]:
    """Run convolutions that share geometry as one convolution, split by output channel."""
    if len(convs) == 1 or any(c.weight.ndim != c.spec.rank + 2 or c.bias.ndim != 1 for c in convs):
        # per-sample weights (finite-difference batches) are not fused
        return [c(x) for c in convs]
    weight = concat([c.weight for c in convs], axis=0)
    bias = concat([c.bias for c in convs], axis=0)
    first = convs[0].spec
    spec = replace(first, out_channels=sum(c.spec.out_channels for c in convs))
    out = conv_nd(x, weight, bias, spec)
    pieces, start = [], 0
    for c in convs:
        stop = start + c.spec.out_channels
        pieces.append(out[:, start:stop])
        start = stop
    return pieces


class SDCBlock(Module):
    """Scale-aware dilated convolution.

    ``out = sum_i sigmoid(gate_i(x)) * branch_i(x)`` where ``branch_i`` is a
    dilated convolution with rate ``rates[i]`` and ``gate_i`` a one-channel
    convolution.  The sigmoid maps (scale coefficient maps) of the most
    recent call are kept in ``last_maps``.
    """

    def __init__(self, in_ch, out_ch, rates=(1, 2, 3, 5), kernel=3, gate_kernel=3, dtype=np.float32):
        self.in_channels = in_ch
        self.rates = tuple(rates)
        self.branches = [Conv(in_ch, out_ch, kernel, r, dtype=dtype) for r in self.rates]
        self.gates = [Conv(in_ch, 1, gate_kernel, 1, dtype=dtype) for _ in self.rates]
        self.last_maps: List[Tensor] = []

    def branch_outputs(self, x: Tensor) -> Tuple[List[Tensor], List[Tensor]]:
        """Return (branch features, scale maps) without combining them."""
        if x.ndim < 3 or x.shape[1] != self.in_channels:
            raise ContractError(f"SDCBlock: input has shape {x.shape}, expected {self.in_channels} channels on axis 1")
        convs = list(self.branches) + list(self.gates)
        groups: Dict[Tuple, List[int]] = {}
        for i, c in enumerate(convs):
            key = (c.spec.kernel, c.spec.dilation, c.spec.padding, c.spec.stride)
            groups.setdefault(key, []).append(i)
        outputs: List[Optional[Tensor]] = [None] * len(convs)
        for members in groups.values():
            for i, y in zip(members, _fused_conv(x, [convs[i] for i in members])):
                outputs[i] = y
        m = len(self.rates)
        feats = outputs[:m]
        maps = [sigmoid(g) for g in outputs[m:]]
        return feats, maps

    def __call__(self, x: Tensor) -> Tensor:
        feats, maps = self.branch_outputs(x)
        self.last_maps = maps
        out = mul(maps[0], feats[0])
        for s, f in zip(maps[1:], feats[1:]):
            out = add(out, mul(s, f))
        return out


def sdc_forward(block: SDCBlock, x: Tensor) -> Tensor:
    return block(x)


class EncoderStage(Module):
    def __init__(self, in_ch, out_ch, downsample, dtype):
        self.downsample = downsample
        self.conv1 = ConvNormReLU(in_ch, out_ch, dtype=dtype)
        self.conv2 = ConvNormReLU(out_ch, out_ch, dtype=dtype)

    def __call__(self, x):
        if self.downsample:
            x = adaptive_avg_pool(x, tuple(s // 2 for s in x.shape[2:]))
        return self.conv2(self.conv1(x))


class DecoderStage(Module):
    """Upsample x2, concatenate the skip, conv-norm-relu, then SDC (or plain conv) -> norm -> relu."""

    def __init__(self, in_ch, skip_ch, out_ch, cfg: ModelConfig):
        dtype = cfg.np_dtype
        self.conv1 = ConvNormReLU(in_ch + skip_ch, out_ch, cfg.kernel, dtype=dtype)
        if cfg.sdc:
            self.sdc = SDCBlock(out_ch, out_ch, cfg.dilation_rates, cfg.kernel, dtype=dtype)
        else:
            self.conv2 = Conv(out_ch, out_ch, cfg.kernel, 1, dtype=dtype)

    def __call__(self, x, skip):
        x = resize_linear(x, skip.shape[2:])
        x = self.conv1(concat([x, skip], axis=1))
        block = self.sdc if hasattr(self, "sdc") else self.conv2
        return relu(instance_norm(block(x)))


class Decoder(Module):
    def __init__(self, widths, bottleneck, cfg: ModelConfig):
        self.stages = []
        in_ch = bottleneck
        for w in reversed(widths):
            self.stages.append(DecoderStage(in_ch, w, w, cfg))
            in_ch = w

    def __call__(self, x, skips):
        for stage, skip in zip(self.stages, reversed(skips)):
            x = stage(x, skip)
        return x

    def scale_maps(self) -> List[Tensor]:
        maps = []
        for stage in self.stages:
            if hasattr(stage, "sdc"):
                maps.extend(stage.sdc.last_maps)
        return maps


class ResBlock(Module):
    def __init__(self, ch, kernel, dtype):
        self.conv1 = Conv(ch, ch, kernel, dtype=dtype)
        self.conv2 = Conv(ch, ch, kernel, dtype=dtype)

    def __call__(self, x):
        return add(x, self.conv2(relu(self.conv1(x))))


class EDSRHead(Module):
    """Residual blocks with a global skip, then conv to ``C*r^3`` channels and pixel shuffle x2."""

    def __init__(self, ch, out_ch, blocks, kernel, dtype):
        self.blocks = [ResBlock(ch, kernel, dtype) for _ in range(blocks)]
        self.upconv = Conv(ch, out_ch * 8, kernel, dtype=dtype)

    def __call__(self, x):
        y = x
        for block in self.blocks:
            y = block(y)
        return pixel_shuffle(self.upconv(add(x, y)), 2)


@dataclass
class ForwardBundle:
    seg_logits_hr: Tensor
    sr_image_hr: Optional[Tensor] = None
    fa_feature_seg: Optional[Tensor] = None
    fa_feature_sr: Optional[Tensor] = None
    scale_maps_seg: List[Tensor] = field(default_factory=list)
    scale_maps_sr: List[Tensor] = field(default_factory=list)


class SSRNet(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        dtype = cfg.np_dtype
        w = cfg.width
        self.widths = [w * 2 ** min(i, 2) for i in range(cfg.levels)]
        self.encoder = []
        in_ch = cfg.in_channels
        for i, width in enumerate(self.widths):
            self.encoder.append(EncoderStage(in_ch, width, i > 0, dtype))
            in_ch = width
        self.bottleneck = EncoderStage(in_ch, in_ch, True, dtype)
        self.decoder_seg = Decoder(self.widths, in_ch, cfg)
        self.fa_conv_seg = Conv(w, w, cfg.kernel, dtype=dtype)
        self.seg_head = Conv(w, 1, 1, dtype=dtype)
        if cfg.dsr:
            self.decoder_sr = Decoder(self.widths, in_ch, cfg)
            self.fa_conv_sr = Conv(w, w, cfg.kernel, dtype=dtype)
            self.edsr_head = EDSRHead(w, cfg.in_channels, cfg.edsr_blocks, cfg.kernel, dtype)

    def check_input(self, x: Tensor):
        cfg = self.cfg
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise ContractError(f"SSRNet expects (N, {cfg.in_channels}, D, H, W) input, got {x.shape}")
        factor = 2**cfg.levels
        for axis, s in enumerate(x.shape[2:]):
            if s % factor:
                raise ConfigError(
                    f"spatial axis {axis} has extent {s}; every extent must be divisible by 2^{cfg.levels} = {factor}"
                )

    def encode(self, x: Tensor):
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        return self.bottleneck(x), skips

    def forward(self, x, with_sr: bool = True) -> ForwardBundle:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.cfg.np_dtype))
        self.check_input(x)
        hr = tuple(2 * s for s in x.shape[2:])
        bottom, skips = self.encode(x)

        # the affinity features sit on the main path right before each head
        fa_seg = relu(self.fa_conv_seg(self.decoder_seg(bottom, skips)))
        logits = resize_linear(self.seg_head(fa_seg), hr)
        bundle = ForwardBundle(logits, fa_feature_seg=fa_seg, scale_maps_seg=self.decoder_seg.scale_maps())

        if with_sr and self.cfg.dsr:
            fa_sr = relu(self.fa_conv_sr(self.decoder_sr(bottom, skips)))
            bundle.sr_image_hr = self.edsr_head(fa_sr)
            bundle.fa_feature_sr = fa_sr
            bundle.scale_maps_sr = self.decoder_sr.scale_maps()
        return bundle

    __call__ = forward

    def sdc_blocks(self, branch: str = "seg") -> List[SDCBlock]:
        decoder = self.decoder_seg if branch == "seg" else getattr(self, "decoder_sr", None)
        if decoder is None:
            return []
        return [s.sdc for s in decoder.stages if hasattr(s, "sdc")]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        from .errors import LoadError

        own = dict(self.named_parameters())
        missing = [n for n in own if n not in state]
        extra = [n for n in state if n not in own]
        if missing or extra:
            raise LoadError("checkpoint parameter names do not match the model", missing, extra)
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise LoadError(f"parameter {name} has shape {value.shape}, model expects {p.shape}")
            p.data = value.astype(self.cfg.np_dtype)
            p.grad = None
        return self

    def to(self, dtype) -> "SSRNet":
        """Cast every parameter to ``dtype`` ("float32"/"float64") in place of the current arrays."""
        name = np.dtype(dtype).name
        self.cfg = replace(self.cfg, dtype=name)
        for p in self.parameters():
            p.data = p.data.astype(name)
            p.grad = None
        return self


def forward(model: SSRNet, lr_image) -> ForwardBundle:
    return model.forward(lr_image)


def inference(model: SSRNet, lr_image) -> Tensor:
    """HR lesion probability from the mask path alone; the image path is never run."""
    with no_grad():
        bundle = model.forward(lr_image, with_sr=False)
        return sigmoid(bundle.seg_logits_hr)


def init_parameters(model: SSRNet, seed: int) -> SSRNet:
    """He-uniform conv weights (bound ``sqrt(6 / fan_in)``) and zero biases, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    dtype = model.cfg.np_dtype
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            p.data = np.zeros(p.shape, dtype=dtype)
        else:
            fan_in = int(np.prod(p.shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            p.data = rng.uniform(-bound, bound, size=p.shape).astype(dtype)
        p.grad = None
    return model


def build_model(cfg: ModelConfig = ModelConfig(), seed: int = 0) -> SSRNet:
    return init_parameters(SSRNet(cfg), seed)
