"""Network definitions for the five AAAE maps.

Layer tables are plain data (:class:`NetworkSpec`) so that they can be
written to and read from run configs; :func:`build_network` turns a table
into a ``torch.nn.Sequential``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from aaae.errors import ConfigurationError, InputError

LAYER_KINDS = ("conv", "tconv", "fc")
ACTIVATIONS = ("elu", "lrelu", "tanh", "none")
LEAKY_SLOPE = 0.1
INIT_STD = 0.01
# "normal": N(0, INIT_STD^2) weights, zero biases; "fan-in": U(+-1/sqrt(fan_in)) weights and biases
INIT_SCHEMES = ("normal", "fan-in")
# torch momentum 0.1 == running-average decay 0.9
BN_MOMENTUM = 0.1

ROLES = ("theta", "psi", "phi", "omega", "gamma")
ROLE_MODULES = {
    "theta": "encoder",
    "psi": "decoder",
    "phi": "approximator",
    "omega": "image_disc",
    "gamma": "code_critic",
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int | tuple[int, int, int]
    kernel: int = 0
    stride: int = 1
    batchnorm: bool = False
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.kind != "fc" and (self.kernel < 1 or self.stride < 1):
            raise ConfigurationError(f"{self.kind} layer needs kernel >= 1 and stride >= 1")
        if isinstance(self.out, (list, tuple)):
            if self.kind != "fc" or len(self.out) != 3:
                raise ConfigurationError("only fc layers may emit a (C, H, W) shape")
            object.__setattr__(self, "out", tuple(int(v) for v in self.out))


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes (without batch axis); validates composition."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            shape = _next_shape(shape, layer, i)
            out.append(shape)
        return out

    @property
    def output_shape(self) -> tuple[int, ...]:
        shapes = self.shapes()
        return shapes[-1] if shapes else self.input_shape

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [
                {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(layer).items()}
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        try:
            return cls(tuple(d["input_shape"]), tuple(LayerSpec(**layer) for layer in d["layers"]))
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed network spec: {exc}") from exc


def _same_pad(size, kernel, stride):
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _next_shape(shape, layer, index):
    if layer.kind == "fc":
        return layer.out if isinstance(layer.out, tuple) else (int(layer.out),)
    if len(shape) != 3:
        raise ConfigurationError(f"layer {index} ({layer.kind}) needs a (C, H, W) input, got {shape}")
    c, h, w = shape
    if layer.kind == "conv":
        if h < layer.stride or w < layer.stride:
            raise ConfigurationError(f"layer {index}: input {shape} too small for stride {layer.stride}")
        return (int(layer.out), math.ceil(h / layer.stride), math.ceil(w / layer.stride))
    if (layer.kernel - layer.stride) % 2 or layer.kernel < layer.stride:
        raise ConfigurationError(f"layer {index}: transposed conv needs even kernel - stride >= 0")
    return (int(layer.out), h * layer.stride, w * layer.stride)


@dataclass(frozen=True)
class ModelSpec:
    encoder: NetworkSpec
    decoder: NetworkSpec
    approximator: NetworkSpec
    image_disc: NetworkSpec
    code_critic: NetworkSpec
    code_dim: int = 128
    noise_dim: int = 64
    name: str = "custom"
    init: str = "normal"

    @property
    def data_shape(self) -> tuple[int, ...]:
        return self.encoder.input_shape

    def validate(self) -> ModelSpec:
        if self.init not in INIT_SCHEMES:
            raise ConfigurationError(f"init must be one of {INIT_SCHEMES}, got {self.init!r}")
        data = self.encoder.input_shape
        checks = [
            ("encoder output", self.encoder.output_shape, (self.code_dim,)),
            ("decoder input", self.decoder.input_shape, (self.code_dim,)),
            ("decoder output", self.decoder.output_shape, data),
            ("approximator input", self.approximator.input_shape, (self.noise_dim,)),
            ("approximator output", self.approximator.output_shape, (self.code_dim,)),
            ("image discriminator input", self.image_disc.input_shape, data),
            ("code critic input", self.code_critic.input_shape, (self.code_dim,)),
            ("code critic output", self.code_critic.output_shape, (1,)),
        ]
        for what, got, want in checks:
            if tuple(got) != tuple(want):
                raise ConfigurationError(f"{what} shape {tuple(got)} != expected {tuple(want)}")
        disc_out = self.image_disc.output_shape
        if disc_out[0] != 1:
            raise ConfigurationError(f"image discriminator must emit 1 channel, got {disc_out}")
        for net in ("image_disc", "code_critic"):
            if getattr(self, net).layers[-1].activation != "none":
                raise ConfigurationError(f"{net} must end with raw scores (no activation)")
        return self

    def to_dict(self) -> dict:
        d = {net: getattr(self, net).to_dict() for net in ROLE_MODULES.values()}
        d.update(code_dim=self.code_dim, noise_dim=self.noise_dim, name=self.name, init=self.init)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        nets = {net: NetworkSpec.from_dict(d[net]) for net in ROLE_MODULES.values()}
        return cls(**nets, code_dim=int(d["code_dim"]), noise_dim=int(d["noise_dim"]),
                   name=d.get("name", "custom"), init=d.get("init", "normal")).validate()


def image_spec(
    resolution=32,
    channels=3,
    code_dim=128,
    noise_dim=64,
    base_width=64,
    max_width=1024,
    latent_width=512,
    name=None,
    init="normal",
) -> ModelSpec:
    """Layer tables for square images, following the MNIST 32x32 table.

    Each extra doubling of resolution adds one stride-2 stage; channel widths
    double per stage and are capped at ``max_width``.
    """
    stages = int(math.log2(resolution)) - 1
    if resolution < 8 or 2 ** (stages + 1) != resolution:
        raise ConfigurationError(f"resolution must be a power of two >= 8, got {resolution}")
    widths = [min(base_width * 2**i, max_width) for i in range(stages + 1)]
    img = (channels, resolution, resolution)

    enc = [LayerSpec("conv", widths[0], 4, 1, True, "elu")]
    enc += [LayerSpec("conv", w, 4, 2, True, "elu") for w in widths[1:]]
    enc.append(LayerSpec("fc", code_dim))

    dec = [LayerSpec("fc", (widths[-1], 2, 2), batchnorm=True, activation="elu")]
    dec += [LayerSpec("tconv", w, 4, 2, True, "elu") for w in reversed(widths[:-1])]
    dec.append(LayerSpec("conv", channels, 3, 1, False, "tanh"))

    disc = [LayerSpec("conv", w, 4, 2, False, "lrelu") for w in widths[:-1]]
    disc.append(LayerSpec("conv", 1, 3, 1, False, "none"))

    approx = [LayerSpec("fc", latent_width, activation="elu") for _ in range(3)]
    approx.append(LayerSpec("fc", code_dim))
    critic = [LayerSpec("fc", latent_width, activation="lrelu") for _ in range(3)]
    critic.append(LayerSpec("fc", 1))

    return ModelSpec(
        encoder=NetworkSpec(img, tuple(enc)),
        decoder=NetworkSpec((code_dim,), tuple(dec)),
        approximator=NetworkSpec((noise_dim,), tuple(approx)),
        image_disc=NetworkSpec(img, tuple(disc)),
        code_critic=NetworkSpec((code_dim,), tuple(critic)),
        code_dim=code_dim,
        noise_dim=noise_dim,
        name=name or f"image-{resolution}",
        init=init,
    ).validate()


def vector_spec(data_dim=2, code_dim=8, noise_dim=8, hidden=128, depth=3, name="ring-2d",
                init="fan-in") -> ModelSpec:
    """Fully connected tables for low-dimensional point data.

    The decoder ends linear since point clouds are not confined to [-1, 1].
    """

    def mlp(width_out, act, last_act="none", bn=False):
        layers = [LayerSpec("fc", hidden, batchnorm=bn, activation=act) for _ in range(depth)]
        layers.append(LayerSpec("fc", width_out, activation=last_act))
        return tuple(layers)

    return ModelSpec(
        encoder=NetworkSpec((data_dim,), mlp(code_dim, "elu")),
        decoder=NetworkSpec((code_dim,), mlp(data_dim, "elu")),
        approximator=NetworkSpec((noise_dim,), mlp(code_dim, "elu")),
        image_disc=NetworkSpec((data_dim,), mlp(1, "lrelu")),
        code_critic=NetworkSpec((code_dim,), mlp(1, "lrelu")),
        code_dim=code_dim,
        noise_dim=noise_dim,
        name=name,
        init=init,
    ).validate()


PRESETS = {
    "mnist-32": lambda: image_spec(32, 3, name="mnist-32"),
    "generic-64": lambda: image_spec(64, 3, name="generic-64"),
    "ring-2d": lambda: vector_spec(),
}


def preset(name: str) -> ModelSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _activation(name):
    return {
        "elu": lambda: nn.ELU(alpha=1.0),
        "lrelu": lambda: nn.LeakyReLU(LEAKY_SLOPE),
        "tanh": nn.Tanh,
        "none": None,
    }[name]


def build_network(spec: NetworkSpec) -> nn.Sequential:
    shape = spec.input_shape
    mods = []
    for i, layer in enumerate(spec.layers):
        nxt = _next_shape(shape, layer, i)
        if layer.kind == "fc":
            if len(shape) > 1:
                mods.append(nn.Flatten())
            n_out = math.prod(nxt)
            mods.append(nn.Linear(math.prod(shape), n_out))
            if layer.batchnorm:
                mods.append(nn.BatchNorm1d(n_out, momentum=BN_MOMENTUM))
        elif layer.kind == "conv":
            _, top, bottom = _same_pad(shape[1], layer.kernel, layer.stride)
            _, left, right = _same_pad(shape[2], layer.kernel, layer.stride)
            if top == bottom and left == right:
                mods.append(nn.Conv2d(shape[0], nxt[0], layer.kernel, layer.stride, (top, left)))
            else:
                mods.append(nn.ZeroPad2d((left, right, top, bottom)))
                mods.append(nn.Conv2d(shape[0], nxt[0], layer.kernel, layer.stride))
        else:
            pad = (layer.kernel - layer.stride) // 2
            mods.append(nn.ConvTranspose2d(shape[0], nxt[0], layer.kernel, layer.stride, pad))
        if layer.kind != "fc" and layer.batchnorm:
            mods.append(nn.BatchNorm2d(nxt[0], momentum=BN_MOMENTUM))
        act = _activation(layer.activation)
        if act is not None:
            mods.append(act())
        if layer.kind == "fc" and len(nxt) == 3:
            mods.append(nn.Unflatten(1, nxt))
        shape = nxt
    return nn.Sequential(*mods)


class AAAE(nn.Module):
    """Container for encoder, decoder, approximator and the two critics.

    Parameter groups follow the usual naming: ``theta`` (encoder), ``psi``
    (decoder), ``phi`` (approximator), ``omega`` (image discriminator) and
    ``gamma`` (latent critic).
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec.validate()
        self.encoder = build_network(spec.encoder)
        self.decoder = build_network(spec.decoder)
        self.approximator = build_network(spec.approximator)
        self.image_disc = build_network(spec.image_disc)
        self.code_critic = build_network(spec.code_critic)

    @property
    def code_dim(self) -> int:
        return self.spec.code_dim

    @property
    def noise_dim(self) -> int:
        return self.spec.noise_dim

    def group(self, role: str) -> nn.Module:
        return getattr(self, ROLE_MODULES[role])

    def _check(self, t, shape, what):
        if not isinstance(t, torch.Tensor):
            raise InputError(f"{what}: expected a tensor, got {type(t).__name__}")
        if t.dim() != len(shape) + 1 or tuple(t.shape[1:]) != tuple(shape):
            raise InputError(f"{what}: expected shape (batch, {', '.join(map(str, shape))}), got {tuple(t.shape)}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x, self.spec.encoder.input_shape, "encode")
        return self.encoder(x)

    def decode(self, c: torch.Tensor) -> torch.Tensor:
        self._check(c, (self.code_dim,), "decode")
        return self.decoder(c)

    def approximate(self, z: torch.Tensor) -> torch.Tensor:
        self._check(z, (self.noise_dim,), "approximate")
        return self.approximator(z)

    def discriminate_image(self, x: torch.Tensor) -> torch.Tensor:
        """Raw per-patch scores (no sigmoid)."""
        self._check(x, self.spec.image_disc.input_shape, "discriminate_image")
        return self.image_disc(x)

    def discriminate_code(self, c: torch.Tensor) -> torch.Tensor:
        self._check(c, (self.code_dim,), "discriminate_code")
        return self.code_critic(c).reshape(-1)

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x))

    def sample(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode(self.approximate(z))


@torch.no_grad()
def reset_parameters(model: nn.Module, seed: int, scheme: str = "normal") -> None:
    """Weights ~ N(0, 0.01^2), biases 0; batch-norm scales start at 1.

    ``scheme="fan-in"`` draws weights and biases from U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    instead, which small fully connected nets need to escape the near-zero start.
    """
    gen = torch.Generator().manual_seed(int(seed))
    for mod in model.modules():
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            if scheme == "fan-in":
                fan_in = mod.weight[0].numel() if not isinstance(mod, nn.ConvTranspose2d) \
                    else mod.weight.shape[0] * mod.weight[0, 0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                mod.weight.uniform_(-bound, bound, generator=gen)
                if mod.bias is not None:
                    mod.bias.uniform_(-bound, bound, generator=gen)
                continue
            mod.weight.normal_(0.0, INIT_STD, generator=gen)
            if mod.bias is not None:
                mod.bias.zero_()
        elif isinstance(mod, (nn.BatchNorm1d, nn.BatchNorm2d)):
            mod.reset_running_stats()
            mod.weight.fill_(1.0)
            mod.bias.zero_()


def init_params(spec: ModelSpec | str, seed: int = 0) -> AAAE:
    if isinstance(spec, str):
        spec = preset(spec)
    model = AAAE(spec)
    reset_parameters(model, seed, spec.init)
    return model


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def weight_tensors(module: nn.Module) -> list[torch.Tensor]:
    return [
        m.weight for m in module.modules()
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear))
    ]


def bias_tensors(module: nn.Module) -> list[torch.Tensor]:
    return [
        m.bias for m in module.modules()
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)) and m.bias is not None
    ]


def state_digest(module: nn.Module) -> str:
    """SHA-256 over parameters and buffers, for update-scope audits."""
    h = hashlib.sha256()
    for name, t in list(module.named_parameters()) + list(module.named_buffers()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

