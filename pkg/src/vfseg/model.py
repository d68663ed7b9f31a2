"""The split segmentation network.

Bottom party: VGG-style encoder whose five pooled stage outputs are each
flattened through a per-stage linear bottleneck and concatenated into one
short feature vector per sample. Top party: per-stage linear expanders
that rebuild the five pooled maps from that vector, then a transpose-conv
decoder that fuses them back up to a full-resolution logit map.

The only tensor crossing the party boundary is the (B, feature_count)
activation matrix on the way up and its gradient on the way down.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .nn import functional as F
from .nn.layers import BatchNorm2d, Conv2d, ConvTranspose2d, Linear, MaxPool2d, ReLU
from .nn.optim import NamedParam
from .nn.params import Tensor
from .presets import STAGES, ModelConfig


class Encoder:
    """Five stages of (conv 3x3 [+ bn] + relu) blocks, each ending in a 2x2
    stride-2 max pool whose output is kept as that stage's skip."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.stages: list[list] = []
        in_ch = cfg.in_channels
        for i in range(STAGES):
            blocks = []
            for j in range(cfg.stage_blocks[i]):
                prefix = f"enc.s{i}.b{j}"
                conv = Conv2d(f"{prefix}.conv", in_ch, cfg.stage_widths[i],
                              kernel=3, stride=1, pad=1, seed=seed)
                bn = BatchNorm2d(f"{prefix}.bn", cfg.stage_widths[i]) if cfg.batch_norm else None
                blocks.append((conv, bn, ReLU(f"{prefix}.relu")))
                in_ch = cfg.stage_widths[i]
            self.stages.append([blocks, MaxPool2d(f"enc.s{i}.pool", 2, 2)])

    def forward(self, images: Tensor, train: bool = True) -> list[Tensor]:
        if images.ndim != 4 or images.shape[1] != self.cfg.in_channels \
                or images.shape[2] != self.cfg.input_size or images.shape[3] != self.cfg.input_size:
            raise DimensionError(
                f"expected images (B, {self.cfg.in_channels}, {self.cfg.input_size}, "
                f"{self.cfg.input_size}), got {images.shape}"
            )
        x = images
        skips = []
        for blocks, pool in self.stages:
            for conv, bn, relu in blocks:
                x = conv.forward(x, train)
                if bn is not None:
                    x = bn.forward(x, train)
                x = relu.forward(x, train)
            x = pool.forward(x, train)
            skips.append(x)
        return skips

    def backward(self, grad_skips: list[Tensor]) -> Tensor:
        """grad_skips[i] is the gradient wrt stage i's pooled output. Stage
        outputs also feed the next stage, so contributions accumulate on the
        way back down. Returns the gradient wrt the input images."""
        grad = None
        for i in range(STAGES - 1, -1, -1):
            blocks, pool = self.stages[i]
            grad = grad_skips[i] if grad is None else grad + grad_skips[i]
            grad = pool.backward(grad)
            for conv, bn, relu in reversed(blocks):
                grad = relu.backward(grad)
                if bn is not None:
                    grad = bn.backward(grad)
                grad = conv.backward(grad)
        return grad

    def named_params(self) -> list[NamedParam]:
        out = []
        for blocks, _ in self.stages:
            for conv, bn, _ in blocks:
                out.extend(conv.named_params())
                if bn is not None:
                    out.extend(bn.named_params())
        return out

    def named_buffers(self) -> list[tuple[str, Tensor]]:
        out = []
        for blocks, _ in self.stages:
            for _, bn, _ in blocks:
                if bn is not None:
                    out.extend(bn.named_buffers())
        return out

    def zero_grad(self) -> None:
        for blocks, _ in self.stages:
            for conv, bn, _ in blocks:
                conv.zero_grad()
                if bn is not None:
                    bn.zero_grad()


class SkipCompressor:
    """Flatten each skip and project it to its segment of the boundary vector."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.linears = [
            Linear(f"comp.s{i}", cfg.skip_sizes()[i], cfg.segments[i], seed=seed)
            for i in range(STAGES)
        ]

    def forward(self, skips: list[Tensor], train: bool = True) -> Tensor:
        shapes = self.cfg.skip_shapes()
        parts = []
        for i, skip in enumerate(skips):
            if skip.shape[1:] != shapes[i]:
                raise DimensionError(
                    f"stage {i} skip shape {skip.shape[1:]} != expected {shapes[i]}"
                )
            parts.append(self.linears[i].forward(F.flatten(skip), train))
        return np.ascontiguousarray(np.concatenate(parts, axis=1))

    def backward(self, grad_feats: Tensor) -> list[Tensor]:
        offsets = self.cfg.segment_offsets()
        if grad_feats.ndim != 2 or grad_feats.shape[1] != self.cfg.feature_count:
            raise DimensionError(
                f"boundary gradient shape {grad_feats.shape} != (B, {self.cfg.feature_count})"
            )
        grads = []
        for i in range(STAGES):
            seg = np.ascontiguousarray(grad_feats[:, offsets[i]:offsets[i + 1]])
            flat = self.linears[i].backward(seg)
            grads.append(F.unflatten(flat, self.cfg.skip_shapes()[i]))
        return grads

    def named_params(self) -> list[NamedParam]:
        out = []
        for lin in self.linears:
            out.extend(lin.named_params())
        return out

    def zero_grad(self) -> None:
        for lin in self.linears:
            lin.zero_grad()


class SkipExpander:
    """Rebuild each pooled map from its segment via a linear layer + unflatten."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.linears = [
            Linear(f"exp.s{i}", cfg.segments[i], cfg.skip_sizes()[i], seed=seed)
            for i in range(STAGES)
        ]

    def forward(self, feats: Tensor, train: bool = True) -> list[Tensor]:
        offsets = self.cfg.segment_offsets()
        if feats.ndim != 2 or feats.shape[1] != self.cfg.feature_count:
            raise DimensionError(
                f"features shape {feats.shape} != (B, {self.cfg.feature_count})"
            )
        skips = []
        for i in range(STAGES):
            seg = np.ascontiguousarray(feats[:, offsets[i]:offsets[i + 1]])
            flat = self.linears[i].forward(seg, train)
            skips.append(F.unflatten(flat, self.cfg.skip_shapes()[i]))
        return skips

    def backward(self, grad_skips: list[Tensor]) -> Tensor:
        parts = [self.linears[i].backward(F.flatten(grad_skips[i])) for i in range(STAGES)]
        return np.ascontiguousarray(np.concatenate(parts, axis=1))

    def named_params(self) -> list[NamedParam]:
        out = []
        for lin in self.linears:
            out.extend(lin.named_params())
        return out

    def zero_grad(self) -> None:
        for lin in self.linears:
            lin.zero_grad()


class Decoder:
    """Five 2x stride-2 transpose-conv up-steps starting from the deepest
    rebuilt skip; after each of the first four, the next-shallower rebuilt
    skip is added through a 1x1 projection. A final 1x1 conv produces one
    logit channel at full resolution."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        w = cfg.stage_widths
        # Applied in order: up4 w4->w3, up3 w3->w2, up2 w2->w1, up1 w1->w0,
        # and finally up0 w0->w0 to reach full resolution.
        self.ups = []
        for i in range(STAGES - 1, 0, -1):
            self.ups.append(ConvTranspose2d(f"dec.up{i}", w[i], w[i - 1], 2, stride=2, seed=seed))
        self.ups.append(ConvTranspose2d("dec.up0", w[0], w[0], 2, stride=2, seed=seed))
        self.fuses = [Conv2d(f"dec.fuse{i}", w[i], w[i], kernel=1, seed=seed)
                      for i in range(STAGES - 1)]
        self.relus = [ReLU(f"dec.relu{i}") for i in range(STAGES)]
        self.head = Conv2d("dec.head", w[0], 1, kernel=1, seed=seed)

    def forward(self, skips: list[Tensor], train: bool = True) -> Tensor:
        shapes = self.cfg.skip_shapes()
        for i, skip in enumerate(skips):
            if skip.shape[1:] != shapes[i]:
                raise DimensionError(
                    f"stage {i} skip shape {skip.shape[1:]} != expected {shapes[i]}"
                )
        x = skips[STAGES - 1]
        for step in range(STAGES - 1):           # fuse stages 3, 2, 1, 0
            stage = STAGES - 2 - step
            x = self.ups[step].forward(x, train)
            x = x + self.fuses[stage].forward(skips[stage], train)
            x = self.relus[step].forward(x, train)
        x = self.ups[STAGES - 1].forward(x, train)
        x = self.relus[STAGES - 1].forward(x, train)
        return self.head.forward(x, train)

    def backward(self, grad_logits: Tensor) -> list[Tensor]:
        grad = self.head.backward(grad_logits)
        grad = self.relus[STAGES - 1].backward(grad)
        grad = self.ups[STAGES - 1].backward(grad)
        grad_skips: list[Tensor | None] = [None] * STAGES
        for step in range(STAGES - 2, -1, -1):
            stage = STAGES - 2 - step
            grad = self.relus[step].backward(grad)
            grad_skips[stage] = self.fuses[stage].backward(grad)
            grad = self.ups[step].backward(grad)
        grad_skips[STAGES - 1] = grad
        return grad_skips  # type: ignore[return-value]

    def named_params(self) -> list[NamedParam]:
        out = []
        for up in self.ups:
            out.extend(up.named_params())
        for fuse in self.fuses:
            out.extend(fuse.named_params())
        out.extend(self.head.named_params())
        return out

    def zero_grad(self) -> None:
        for up in self.ups:
            up.zero_grad()
        for fuse in self.fuses:
            fuse.zero_grad()
        self.head.zero_grad()


class BottomModel:
    """Image-holding party's shard: encoder + per-stage compressors."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.encoder = Encoder(cfg, seed)
        self.compressor = SkipCompressor(cfg, seed)

    def forward(self, images: Tensor, train: bool = True) -> Tensor:
        return self.compressor.forward(self.encoder.forward(images, train), train)

    def backward(self, grad_feats: Tensor) -> Tensor:
        return self.encoder.backward(self.compressor.backward(grad_feats))

    def named_params(self) -> list[NamedParam]:
        return self.encoder.named_params() + self.compressor.named_params()

    def named_buffers(self) -> list[tuple[str, Tensor]]:
        return self.encoder.named_buffers()

    def zero_grad(self) -> None:
        self.encoder.zero_grad()
        self.compressor.zero_grad()


class TopModel:
    """Label-holding party's shard: per-stage expanders + decoder."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.expander = SkipExpander(cfg, seed)
        self.decoder = Decoder(cfg, seed)

    def forward(self, feats: Tensor, train: bool = True) -> Tensor:
        return self.decoder.forward(self.expander.forward(feats, train), train)

    def backward(self, grad_logits: Tensor) -> Tensor:
        return self.expander.backward(self.decoder.backward(grad_logits))

    def named_params(self) -> list[NamedParam]:
        return self.expander.named_params() + self.decoder.named_params()

    def named_buffers(self) -> list[tuple[str, Tensor]]:
        return []

    def zero_grad(self) -> None:
        self.expander.zero_grad()
        self.decoder.zero_grad()
