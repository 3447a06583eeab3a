"""Network zoo: pool/evaluation classifiers and the conditional GAN pair."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (ArchSpec, FeatureStack, GeneratorCheckpoint, ImageBatch,
                   ModelPoolSpec, derive_seed, torch_generator)


class ArchitectureError(ValueError):
    pass


def _activation(kind: str) -> nn.Module:
    return {"sigmoid": nn.Sigmoid, "relu": nn.ReLU, "leakyrelu": nn.LeakyReLU}[kind]()


def _norm(kind: str, channels: int, hw: tuple[int, int]) -> nn.Module:
    if kind == "none":
        return nn.Identity()
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "instance":
        return nn.GroupNorm(channels, channels, affine=True)
    if kind == "layer":
        return nn.LayerNorm([channels, *hw], elementwise_affine=True)
    groups = math.gcd(4, channels)
    return nn.GroupNorm(groups, channels, affine=True)


def _pool(kind: str) -> nn.Module:
    if kind == "max":
        return nn.MaxPool2d(2, 2)
    if kind == "avg":
        return nn.AvgPool2d(2, 2)
    return nn.Identity()


def init_normal_(module: nn.Module, generator: torch.Generator) -> None:
    """He-normal (fan-in) weights for conv/linear layers, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                fan_in, fan_out = nn.init._calculate_fan_in_and_fan_out(m.weight)
                # transposed-conv weights are stored [in, out, k, k]
                if isinstance(m, nn.ConvTranspose2d):
                    fan_in = fan_out
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


class ConvNet(nn.Module):
    """``depth`` blocks of conv3x3 -> norm -> activation -> 2x2 pool, then a linear head."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        c, h, w = spec.input_shape
        blocks = []
        for i in range(spec.depth):
            block = nn.Sequential(
                nn.Conv2d(c if i == 0 else spec.width, spec.width, 3, padding=1),
                _norm(spec.normalization, spec.width, (h, w)),
                _activation(spec.activation),
                _pool(spec.pooling),
            )
            blocks.append(block)
            if spec.pooling != "none":
                if h < 2 or w < 2:
                    raise ArchitectureError(
                        f"{spec.tag}: input {spec.input_shape[1:]} cannot be halved {spec.depth} times")
                h, w = h // 2, w // 2
        self.blocks = nn.ModuleList(blocks)
        self.classifier = nn.Linear(spec.width * h * w, spec.class_count)

    def forward_features(self, x):
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats, self.classifier(x.flatten(1))

    def forward(self, x):
        return self.forward_features(x)[1]


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, stride, spec: ArchSpec, hw):
        super().__init__()
        out_hw = (hw[0] // stride, hw[1] // stride)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = _norm(spec.normalization, cout, out_hw)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = _norm(spec.normalization, cout, out_hw)
        self.act = _activation(spec.activation)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False),
                                          _norm(spec.normalization, cout, out_hw))

    def forward(self, x):
        out = self.act(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.act(out + self.shortcut(x))


class ResNetSmall(nn.Module):
    """Shallow residual net: a stem then ``depth`` stages of one basic block each."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        c, h, w = spec.input_shape
        if h < 2 ** (spec.depth - 1) or w < 2 ** (spec.depth - 1):
            raise ArchitectureError(f"{spec.tag}: input {spec.input_shape[1:]} too small for {spec.depth} stages")
        self.stem = nn.Sequential(nn.Conv2d(c, spec.width, 3, 1, 1, bias=False),
                                  _norm(spec.normalization, spec.width, (h, w)),
                                  _activation(spec.activation))
        stages, cin = [], spec.width
        for i in range(spec.depth):
            cout = spec.width * 2 ** i
            stride = 1 if i == 0 else 2
            stages.append(_ResBlock(cin, cout, stride, spec, (h, w)))
            h, w, cin = h // stride, w // stride, cout
        self.stages = nn.ModuleList(stages)
        self.classifier = nn.Linear(cin, spec.class_count)

    def forward_features(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats, self.classifier(x.mean(dim=(2, 3)))

    def forward(self, x):
        return self.forward_features(x)[1]


def build_network(spec: ArchSpec, rng: np.random.Generator) -> nn.Module:
    if spec.input_shape is None or spec.class_count is None:
        raise ArchitectureError("ArchSpec must be bound to an input shape and class count")
    net = ConvNet(spec) if spec.family == "convnet" else ResNetSmall(spec)
    init_normal_(net, torch_generator(rng))
    net.spec = spec
    return net


def forward_with_features(net: nn.Module, batch: ImageBatch | torch.Tensor) -> FeatureStack:
    x = batch.pixels if isinstance(batch, ImageBatch) else batch
    expected = getattr(net, "spec", None)
    if expected is not None and tuple(x.shape[1:]) != tuple(expected.input_shape):
        raise ValueError(f"batch shape {tuple(x.shape[1:])} does not match network input {expected.input_shape}")
    feats, logits = net.forward_features(x)
    return FeatureStack(feats, logits)


def sample_model_pool(pool: ModelPoolSpec, rng: np.random.Generator, input_shape=None,
                      class_count=None) -> nn.Module:
    """Draw an architecture by weight and build it with a fresh initialization."""
    weights = np.array([w for _, w in pool.entries], dtype=float)
    idx = int(rng.choice(len(weights), p=weights / weights.sum()))
    spec = pool.entries[idx][0]
    if input_shape is not None:
        spec = spec.bind(input_shape, class_count)
    return build_network(spec, rng)


def count_params(net: nn.Module) -> int:
    return int(sum(p.numel() for p in net.parameters()))


def _check_image_shape(image_shape) -> tuple[int, int, int]:
    c, h, w = (int(v) for v in image_shape)
    if h != w or h < 8 or h & (h - 1):
        raise ArchitectureError(f"image sides must be equal powers of two >= 8, got {h}x{w}")
    return c, h, w


class ConditionalNorm(nn.Module):
    """Batch normalization whose scale and shift are looked up per class."""

    def __init__(self, channels: int, class_count: int):
        super().__init__()
        self.norm = nn.BatchNorm2d(channels, affine=False)
        self.gain = nn.Embedding(class_count, channels)
        self.bias = nn.Embedding(class_count, channels)
        nn.init.zeros_(self.gain.weight)
        nn.init.zeros_(self.bias.weight)

    def forward(self, x, y):
        g = 1.0 + self.gain(y)[:, :, None, None]
        return self.norm(x) * g + self.bias(y)[:, :, None, None]


class ConditionalGenerator(nn.Module):
    """Label embedding concatenated to the code, 4x4 seed, upsample+conv stages, tanh output."""

    def __init__(self, latent_dim: int, class_count: int, image_shape, width: int = 64):
        super().__init__()
        c, h, _ = _check_image_shape(image_shape)
        self.latent_dim, self.class_count, self.image_shape = latent_dim, class_count, (c, h, h)
        self.width = width
        n_up = int(math.log2(h)) - 2
        ch = width * 2 ** n_up
        self.embed = nn.Embedding(class_count, latent_dim)
        self.fc = nn.Linear(2 * latent_dim, ch * 16)
        self.norm0 = ConditionalNorm(ch, class_count)
        self.ups = nn.ModuleList()
        self.norms = nn.ModuleList()
        for _ in range(n_up):
            self.ups.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                          nn.Conv2d(ch, ch // 2, 3, 1, 1)))
            self.norms.append(ConditionalNorm(ch // 2, class_count))
            ch //= 2
        self.out = nn.Conv2d(ch, c, 3, 1, 1)

    def forward(self, codes, labels):
        x = self.fc(torch.cat([codes, self.embed(labels)], dim=1))
        x = F.relu(self.norm0(x.view(x.shape[0], -1, 4, 4), labels))
        for up, norm in zip(self.ups, self.norms):
            x = F.relu(norm(up(x), labels))
        return torch.tanh(self.out(x))


class ProjectionDiscriminator(nn.Module):
    """Strided conv encoder with a class-projection head, optionally spectrally normalised.

    Returns one real/fake logit per item.
    """

    def __init__(self, class_count: int, image_shape, width: int = 64, spectral_norm: bool = False):
        super().__init__()
        c, h, _ = _check_image_shape(image_shape)
        sn = nn.utils.parametrizations.spectral_norm if spectral_norm else (lambda m: m)
        layers = [sn(nn.Conv2d(c, width, 3, 1, 1)), nn.LeakyReLU(0.2)]
        ch = width
        while h > 4:
            layers += [sn(nn.Conv2d(ch, ch * 2, 4, 2, 1)), nn.LeakyReLU(0.2)]
            ch, h = ch * 2, h // 2
        self.body = nn.Sequential(*layers)
        self.linear = sn(nn.Linear(ch, 1))
        self.embed = sn(nn.Embedding(class_count, ch))

    def forward(self, images, labels):
        h = self.body(images).sum(dim=(2, 3))
        return self.linear(h).squeeze(1) + (self.embed(labels) * h).sum(dim=1)


def build_generator(latent_dim: int, class_count: int, image_shape, rng: np.random.Generator,
                    width: int = 64) -> ConditionalGenerator:
    gen = ConditionalGenerator(latent_dim, class_count, image_shape, width)
    g = torch_generator(rng)
    init_normal_(gen, g)
    with torch.no_grad():
        gen.embed.weight.normal_(0.0, 1.0, generator=g)
    return gen


def build_discriminator(class_count: int, image_shape, rng: np.random.Generator,
                        width: int = 64, spectral_norm: bool = False) -> ProjectionDiscriminator:
    # default layer init and spectral-norm power-iteration vectors draw from the
    # global torch generator, so construction runs under a forked, seeded state
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(rng))
        return ProjectionDiscriminator(class_count, image_shape, width, spectral_norm)


def generator_to_checkpoint(gen: ConditionalGenerator, stage: str, config_digest: str = "",
                            extra: dict | None = None) -> GeneratorCheckpoint:
    params = {k: v.detach().cpu().float().numpy().copy() for k, v in gen.state_dict().items()}
    return GeneratorCheckpoint(params=params, latent_dim=gen.latent_dim, class_count=gen.class_count,
                               image_shape=gen.image_shape, stage=stage, config_digest=config_digest,
                               generator_width=gen.width, extra=dict(extra or {}))


def generator_from_checkpoint(ckpt: GeneratorCheckpoint) -> ConditionalGenerator:
    gen = ConditionalGenerator(ckpt.latent_dim, ckpt.class_count, ckpt.image_shape, ckpt.generator_width)
    gen.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.params.items()})
    return gen
