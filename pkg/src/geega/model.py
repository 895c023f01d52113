"""Two-branch transformer encoder with graph-convolutional fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch
from torch import nn
from torch.nn import functional as F


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    blocks: int = 3
    heads: int = 8
    embed_dim: int = 512
    mlp_hidden: int = 1024
    dropout: float = 0.1
    patch: int = 8
    readout: str = "cls"

    def validate(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.readout not in ("cls", "mean"):
            raise ConfigError(f"readout must be 'cls' or 'mean', got {self.readout!r}")


@dataclass(frozen=True)
class GcnConfig:
    g1: int = 1024
    g2: int = 1536
    nodes: int = 6
    node_dim: int = 256
    out_dim: int = 512
    dropout: float = 0.1

    def validate(self):
        if self.g2 != self.nodes * self.node_dim:
            raise ConfigError(f"G2={self.g2} must equal N*F={self.nodes}*{self.node_dim}")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gcn: GcnConfig = field(default_factory=GcnConfig)
    head_hidden: int = 128
    fc_dropout: float = 0.25
    topo_channels: int = 5
    spectro_channels: int = 4
    image_size: int = 32
    use_topo: bool = True
    use_spectro: bool = True

    def validate(self):
        self.encoder.validate()
        self.gcn.validate()
        if not (self.use_topo or self.use_spectro):
            raise ConfigError("at least one domain branch must be enabled")
        if self.image_size % self.encoder.patch:
            raise ConfigError(f"patch size {self.encoder.patch} does not divide {self.image_size}")
        branches = int(self.use_topo) + int(self.use_spectro)
        if self.gcn.g1 != branches * self.encoder.embed_dim:
            raise ConfigError(f"G1={self.gcn.g1} must equal the concatenated embedding width "
                              f"{branches * self.encoder.embed_dim}")


def full_config(spectro_channels: int = 4) -> ModelConfig:
    return ModelConfig(spectro_channels=spectro_channels)


def desk_config(spectro_channels: int = 4, *, use_topo=True, use_spectro=True) -> ModelConfig:
    branches = int(use_topo) + int(use_spectro)
    return ModelConfig(
        encoder=EncoderConfig(blocks=1, heads=4, embed_dim=64, mlp_hidden=128),
        gcn=GcnConfig(g1=64 * branches, g2=64, nodes=4, node_dim=16, out_dim=32),
        spectro_channels=spectro_channels, use_topo=use_topo, use_spectro=use_spectro,
    )


def with_domains(cfg: ModelConfig, use_topo: bool, use_spectro: bool) -> ModelConfig:
    """Same configuration with branches switched; G1 follows the active branches."""
    branches = int(use_topo) + int(use_spectro)
    return replace(cfg, use_topo=use_topo, use_spectro=use_spectro,
                   gcn=replace(cfg.gcn, g1=branches * cfg.encoder.embed_dim))


class PatchTokenizer(nn.Module):
    """Flatten non-overlapping patches, project linearly, prepend a class token, add positions."""

    def __init__(self, channels, image_size, patch, dim):
        super().__init__()
        if image_size % patch:
            raise ConfigError(f"patch size {patch} does not divide {image_size}")
        self.patch = patch
        self.n_patches = (image_size // patch) ** 2
        self.proj = nn.Linear(channels * patch * patch, dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.n_patches + 1, dim))
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.pos_embed, std=0.02)

    def patches(self, x):
        b, c, h, w = x.shape
        p = self.patch
        x = x.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(b, (h // p) * (w // p), c * p * p)

    def forward(self, x):
        tok = self.proj(self.patches(x))
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, tok], dim=1) + self.pos_embed


class SelfAttention(nn.Module):
    def __init__(self, dim, heads, dropout):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)
        self.last_probs = None
        self.keep_probs = False

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // self.heads)
        probs = scores.softmax(dim=-1)
        if self.keep_probs:
            self.last_probs = probs.detach()
        out = (self.drop(probs) @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, heads, mlp_hidden, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_hidden), nn.GELU(), nn.Dropout(dropout),
            nn.Linear(mlp_hidden, dim), nn.Dropout(dropout),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, channels, image_size, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tokenizer = PatchTokenizer(channels, image_size, cfg.patch, cfg.embed_dim)
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.heads, cfg.mlp_hidden, cfg.dropout) for _ in range(cfg.blocks))
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def encode(self, tokens):
        if tokens.shape[-1] != self.cfg.embed_dim:
            raise ConfigError(f"token width {tokens.shape[-1]} != embed_dim {self.cfg.embed_dim}")
        for blk in self.blocks:
            tokens = blk(tokens)
        tokens = self.norm(tokens)
        return tokens[:, 0] if self.cfg.readout == "cls" else tokens[:, 1:].mean(dim=1)

    def forward(self, x):
        return self.encode(self.tokenizer(x))


def uniform_adjacency(n: int) -> torch.Tensor:
    return torch.full((n, n), 1.0 / n)


class GcnFusion(nn.Module):
    """Concatenated embeddings -> N graph nodes -> two GCN layers -> H features."""

    def __init__(self, cfg: GcnConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.lift = nn.Linear(cfg.g1, cfg.g2)
        bound = 1.0 / math.sqrt(cfg.node_dim)
        self.w1 = nn.Parameter(torch.empty(cfg.node_dim, cfg.node_dim).uniform_(-bound, bound))
        self.w2 = nn.Parameter(torch.empty(cfg.node_dim, cfg.node_dim).uniform_(-bound, bound))
        self.register_buffer("adjacency", uniform_adjacency(cfg.nodes))
        self.drop = nn.Dropout(cfg.dropout)
        self.out = nn.Linear(cfg.nodes * cfg.node_dim, cfg.out_dim)

    def layer(self, nodes, weight):
        # node transform, then neighbourhood aggregation through A
        return self.adjacency @ (nodes @ weight)

    def forward(self, *embeddings):
        x = torch.cat(embeddings, dim=-1)
        if x.shape[-1] != self.cfg.g1:
            raise ConfigError(f"concatenated width {x.shape[-1]} != G1={self.cfg.g1}")
        nodes = self.lift(x).reshape(-1, self.cfg.nodes, self.cfg.node_dim)
        nodes = self.drop(F.relu(self.layer(nodes, self.w1)))
        nodes = self.drop(F.relu(self.layer(nodes, self.w2)))
        return self.out(nodes.flatten(1))


class Head(nn.Module):
    def __init__(self, in_dim, hidden=128, dropout=0.25):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Dropout(dropout), nn.Linear(hidden, 1))

    def forward(self, x):
        return self.net(x)


@dataclass
class ForwardOutputs:
    e_gcn: torch.Tensor
    logits_gcn: torch.Tensor
    e_freq: torch.Tensor | None = None
    e_time_freq: torch.Tensor | None = None
    logits_topo: torch.Tensor | None = None
    logits_spectro: torch.Tensor | None = None


_COMPONENT_PREFIX = (
    ("topo_encoder.", "T_topo"),
    ("spectro_encoder.", "T_spectro"),
    ("gcn.", "GCN"),
    ("head_topo.", "head_topo"),
    ("head_spectro.", "head_spectro"),
    ("head_gcn.", "head_GCN"),
    ("centers_", "centers"),
)


class GEEGA(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.encoder.embed_dim
        if cfg.use_topo:
            self.topo_encoder = Encoder(cfg.topo_channels, cfg.image_size, cfg.encoder)
            self.head_topo = Head(d, cfg.head_hidden, cfg.fc_dropout)
            self.register_buffer("centers_topo", torch.zeros(2, d))
        if cfg.use_spectro:
            self.spectro_encoder = Encoder(cfg.spectro_channels, cfg.image_size, cfg.encoder)
            self.head_spectro = Head(d, cfg.head_hidden, cfg.fc_dropout)
            self.register_buffer("centers_spectro", torch.zeros(2, d))
        self.gcn = GcnFusion(cfg.gcn)
        self.head_gcn = Head(cfg.gcn.out_dim, cfg.head_hidden, cfg.fc_dropout)
        self.register_buffer("centers_gcn", torch.zeros(2, cfg.gcn.out_dim))

    @staticmethod
    def component_of(name: str) -> str:
        for prefix, tag in _COMPONENT_PREFIX:
            if name.startswith(prefix):
                return tag
        raise KeyError(name)

    def centers(self, site: str) -> torch.Tensor:
        return getattr(self, f"centers_{site}")

    def forward(self, topo=None, spectro=None) -> ForwardOutputs:
        embeddings = []
        out = {}
        if self.cfg.use_topo:
            e = self.topo_encoder(topo)
            out.update(e_freq=e, logits_topo=self.head_topo(e))
            embeddings.append(e)
        if self.cfg.use_spectro:
            e = self.spectro_encoder(spectro)
            out.update(e_time_freq=e, logits_spectro=self.head_spectro(e))
            embeddings.append(e)
        fused = self.gcn(*embeddings)
        return ForwardOutputs(e_gcn=fused, logits_gcn=self.head_gcn(fused), **out)
