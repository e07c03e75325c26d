"""Dual-cycled cross-view transformer network.

Front image -> front encoder -> X -> G -> X' -> cross-view attention (keys and
values from X) -> main decoder. X' also feeds the auxiliary transform decoder.
In training the top-view layout is encoded to X_bar, and both round trips
F(G(X)) and G(F(X_bar)) are produced for the cycle loss.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as nnf


@dataclass
class ModelConfig:
    input_hw: int = 256
    base_channels: int = 32
    encoder_stages: int = 4
    embed_dim: int = 128
    mlp_hidden: int = 256
    n_classes: int = 2
    attention_heads: int = 4
    blocks_per_stage: int = 1

    def __post_init__(self):
        if self.n_classes not in (2, 3):
            raise ValueError(f"n_classes must be 2 or 3, got {self.n_classes}")
        if self.encoder_stages < 1:
            raise ValueError("encoder_stages must be >= 1")
        if self.input_hw % (2 ** self.encoder_stages):
            raise ValueError(
                f"input_hw {self.input_hw} not divisible by 2^{self.encoder_stages}"
            )
        if self.embed_dim % self.attention_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by {self.attention_heads} heads"
            )
        for name in ("base_channels", "embed_dim", "mlp_hidden", "attention_heads", "blocks_per_stage"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def embed_hw(self) -> int:
        return self.input_hw // (2 ** self.encoder_stages)

    @property
    def embed_shape(self) -> tuple[int, int, int]:
        return (self.embed_dim, self.embed_hw, self.embed_hw)

    @property
    def flat_dim(self) -> int:
        return self.embed_dim * self.embed_hw ** 2

    def encoder_widths(self) -> list[int]:
        widths = [min(self.base_channels * 2 ** i, self.embed_dim) for i in range(self.encoder_stages)]
        widths[-1] = self.embed_dim
        return widths

    def decoder_widths(self) -> list[int]:
        enc = self.encoder_widths()
        return enc[-2::-1] + [self.base_channels] if len(enc) > 1 else [self.base_channels]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EmbeddingBundle:
    X: torch.Tensor
    X_prime: torch.Tensor
    X_dprime: torch.Tensor
    X_bar: Optional[torch.Tensor] = None
    X_bar_dprime: Optional[torch.Tensor] = None

    @property
    def has_top(self) -> bool:
        return self.X_bar is not None and self.X_bar_dprime is not None


@dataclass
class ModelOutput:
    main_logits: torch.Tensor
    aux_logits: torch.Tensor
    bundle: EmbeddingBundle
    attention: Optional[torch.Tensor] = None


class BasicBlock(nn.Module):
    """Two 3x3 convs with an identity (or 1x1 projection) shortcut."""

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x):
        out = nnf.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return nnf.relu(out + skip)


class ResidualEncoder(nn.Module):
    """Basic-block residual encoder; every stage halves the resolution."""

    def __init__(self, cfg: ModelConfig, in_channels: int = 3):
        super().__init__()
        self.in_channels = in_channels
        layers = []
        ch = in_channels
        for width in cfg.encoder_widths():
            layers.append(BasicBlock(ch, width, stride=2))
            for _ in range(cfg.blocks_per_stage - 1):
                layers.append(BasicBlock(width, width))
            ch = width
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x)


class ViewProjection(nn.Module):
    """Two fully-connected layers with a ReLU between them, acting on the
    fully flattened C x h x w embedding."""

    def __init__(self, embed_shape, hidden):
        super().__init__()
        self.embed_shape = tuple(embed_shape)
        dim = math.prod(self.embed_shape)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        if tuple(x.shape[1:]) != self.embed_shape:
            raise ValueError(f"projection expects (B, {self.embed_shape}), got {tuple(x.shape)}")
        flat = x.flatten(1)
        out = self.fc2(nnf.relu(self.fc1(flat)))
        return out.view(x.shape)

    @torch.no_grad()
    def set_linear_map(self, matrix: torch.Tensor) -> None:
        """Make the module compute ``x -> matrix @ x`` exactly, using
        ``relu(x) - relu(-x) = x``. Needs ``hidden >= 2 * dim``."""
        dim = self.fc1.in_features
        if self.fc1.out_features < 2 * dim:
            raise ValueError("set_linear_map needs hidden >= 2 * flattened dim")
        matrix = torch.as_tensor(matrix, dtype=self.fc1.weight.dtype)
        eye = torch.eye(dim, dtype=matrix.dtype)
        self.fc1.weight.zero_()
        self.fc1.weight[:dim] = eye
        self.fc1.weight[dim:2 * dim] = -eye
        self.fc1.bias.zero_()
        self.fc2.weight.zero_()
        self.fc2.weight[:, :dim] = matrix
        self.fc2.weight[:, dim:2 * dim] = -matrix
        self.fc2.bias.zero_()


class CrossViewAttention(nn.Module):
    """Multi-head cross attention: queries from X' tokens, keys and values
    from X tokens, learned positional embeddings on both token sets, output
    added back onto X'.

    Args:
        dim: channel count C (token width).
        heads: number of attention heads; must divide ``dim``.
        n_tokens: h*w, the number of spatial tokens per view.
    """

    def __init__(self, dim, heads, n_tokens):
        super().__init__()
        if dim % heads:
            raise ValueError(f"channels {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.pos_query = nn.Parameter(torch.randn(1, n_tokens, dim) * 0.02)
        self.pos_key = nn.Parameter(torch.randn(1, n_tokens, dim) * 0.02)
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        # no bias: an all-zero value input must give an all-zero update
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim, bias=False)

    def forward(self, x_prime, x, return_weights=False):
        if x_prime.shape != x.shape:
            raise ValueError(f"query/key shapes differ: {tuple(x_prime.shape)} vs {tuple(x.shape)}")
        b, c, h, w = x_prime.shape
        if c != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {c}")
        q_tok = x_prime.flatten(2).transpose(1, 2)
        k_tok = x.flatten(2).transpose(1, 2)
        d = c // self.heads

        def split(t):
            return t.view(b, -1, self.heads, d).transpose(1, 2)

        q = split(self.to_q(q_tok + self.pos_query))
        k = split(self.to_k(k_tok + self.pos_key))
        v = split(self.to_v(k_tok))
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.proj(out).transpose(1, 2).reshape(b, c, h, w)
        fused = x_prime + out
        return (fused, weights) if return_weights else fused


class LayoutDecoder(nn.Module):
    """Transposed-conv upsampling back to n_classes x H x W."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        stages = []
        ch = cfg.embed_dim
        for width in cfg.decoder_widths():
            stages.append(nn.Sequential(
                nn.ConvTranspose2d(ch, width, 4, 2, 1, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
                nn.Conv2d(width, width, 3, 1, 1, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
            ))
            ch = width
        self.stages = nn.Sequential(*stages)
        self.head = nn.Conv2d(ch, cfg.n_classes, 1)
        self.in_channels = cfg.embed_dim

    def forward(self, feat):
        if feat.dim() != 4 or feat.shape[1] != self.in_channels:
            raise ValueError(f"decoder expects (B, {self.in_channels}, h, w), got {tuple(feat.shape)}")
        return self.head(self.stages(feat))


class DCTNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.front_encoder = ResidualEncoder(cfg)
        self.top_encoder = ResidualEncoder(cfg)
        self.front_to_top = ViewProjection(cfg.embed_shape, cfg.mlp_hidden)   # G
        self.top_to_front = ViewProjection(cfg.embed_shape, cfg.mlp_hidden)   # F
        self.attention = CrossViewAttention(cfg.embed_dim, cfg.attention_heads, cfg.embed_hw ** 2)
        self.main_decoder = LayoutDecoder(cfg)
        self.aux_decoder = LayoutDecoder(cfg)

    def _check_input(self, t, what):
        hw = self.cfg.input_hw
        if t.dim() != 4 or t.shape[1] != 3 or t.shape[2] != hw or t.shape[3] != hw:
            raise ValueError(f"{what} must be (B, 3, {hw}, {hw}), got {tuple(t.shape)}")

    def encode_front(self, image):
        self._check_input(image, "image")
        # channels-last inputs crash the CPU conv backward in some torch builds
        return self.front_encoder(image.contiguous())

    def encode_top(self, layout):
        self._check_input(layout, "layout")
        return self.top_encoder(layout.contiguous())

    def project_front_to_top(self, x):
        return self.front_to_top(x)

    def project_top_to_front(self, x):
        return self.top_to_front(x)

    def cross_view_attend(self, x_prime, x, return_weights=False):
        return self.attention(x_prime, x, return_weights=return_weights)

    def decode_main(self, fused):
        return self.main_decoder(fused)

    def decode_aux(self, x_prime):
        return self.aux_decoder(x_prime)

    def _front_path(self, image, return_attention):
        x = self.encode_front(image)
        x_prime = self.project_front_to_top(x)
        x_dprime = self.project_top_to_front(x_prime)
        fused, weights = self.cross_view_attend(x_prime, x, return_weights=True)
        main = self.decode_main(fused)
        aux = self.decode_aux(x_prime)
        return x, x_prime, x_dprime, main, aux, (weights if return_attention else None)

    def forward_train(self, image, layout, return_attention=False) -> ModelOutput:
        if layout is None:
            raise ValueError("forward_train needs the top-view layout")
        x, x_prime, x_dprime, main, aux, attn = self._front_path(image, return_attention)
        x_bar = self.encode_top(layout)
        x_bar_dprime = self.project_front_to_top(self.project_top_to_front(x_bar))
        bundle = EmbeddingBundle(x, x_prime, x_dprime, x_bar, x_bar_dprime)
        return ModelOutput(main, aux, bundle, attn)

    def forward_infer(self, image, return_attention=False) -> ModelOutput:
        x, x_prime, x_dprime, main, aux, attn = self._front_path(image, return_attention)
        return ModelOutput(main, aux, EmbeddingBundle(x, x_prime, x_dprime), attn)

    def forward(self, image, layout=None, return_attention=False):
        if layout is None:
            return self.forward_infer(image, return_attention)
        return self.forward_train(image, layout, return_attention)
