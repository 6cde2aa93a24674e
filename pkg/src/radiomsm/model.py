"""ConvLSTM backbone with reconstruction, forecasting and segmentation heads.

Tensor layout throughout is batch-first, time-second:
tokens ``(N, T, C, rows, cols)``, features ``(N, T, hidden, rows, cols)``.
"""
from __future__ import annotations

import dataclasses
import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError

GATES = ("i", "f", "o", "g")


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    n_layers: int = 5
    kernel_size: int = 3
    in_channels: int = 1
    token_rows: int = 256
    token_width: int = 16
    n_tokens: int = 16
    seg_hidden: int = 32
    n_classes: int = 3
    peephole: bool = True
    readout_index: int = 0  # which output step of the 3-D head is the forecast

    @classmethod
    def for_params(cls, params, **overrides) -> "ModelConfig":
        """Config whose token geometry matches a :class:`SpectroParams`."""
        return cls(token_rows=params.sentence_rows, token_width=params.token_width,
                   n_tokens=params.n_tokens, **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM cell with optional Hadamard peephole connections.

    Input-to-gate and hidden-to-gate kernels are kept as separate tensors
    but applied as a single convolution over ``cat(x, h)``.
    """

    def __init__(self, in_channels, hidden, kernel_size=3, spatial=(256, 16), peephole=True):
        super().__init__()
        self.in_channels = in_channels
        self.hidden = hidden
        self.kernel_size = kernel_size
        self.spatial = tuple(spatial)
        k = kernel_size
        self.w_x = nn.Parameter(torch.zeros(4 * hidden, in_channels, k, k))
        self.w_h = nn.Parameter(torch.zeros(4 * hidden, hidden, k, k))
        self.bias = nn.Parameter(torch.zeros(4 * hidden))
        self.peephole = peephole
        if peephole:
            self.w_ci = nn.Parameter(torch.zeros(hidden, *spatial))
            self.w_cf = nn.Parameter(torch.zeros(hidden, *spatial))
            self.w_co = nn.Parameter(torch.zeros(hidden, *spatial))

    def zero_state(self, batch, like: torch.Tensor):
        h = like.new_zeros(batch, self.hidden, *self.spatial)
        return h, h.clone()

    def forward(self, x, state=None):
        if x.dim() != 4 or x.shape[1] != self.in_channels or tuple(x.shape[2:]) != self.spatial:
            raise DimensionError(
                f"cell expects (N, {self.in_channels}, {self.spatial[0]}, {self.spatial[1]}), got {tuple(x.shape)}"
            )
        if state is None:
            state = self.zero_state(x.shape[0], x)
        h, c = state
        if h.shape != c.shape or h.shape[1:] != (self.hidden, *self.spatial):
            raise DimensionError(f"state shapes {tuple(h.shape)} / {tuple(c.shape)} do not fit the cell")
        weight = torch.cat([self.w_x, self.w_h], dim=1)
        z = F.conv2d(torch.cat([x, h], dim=1), weight, self.bias, padding=self.kernel_size // 2)
        zi, zf, zo, zg = z.chunk(4, dim=1)
        if self.peephole:
            zi = zi + self.w_ci * c
            zf = zf + self.w_cf * c
        i = torch.sigmoid(zi)
        f = torch.sigmoid(zf)
        c_new = f * c + i * torch.tanh(zg)
        if self.peephole:
            zo = zo + self.w_co * c_new
        o = torch.sigmoid(zo)
        h_new = o * torch.tanh(c_new)
        return h_new, (h_new, c_new)


def convlstm_cell_forward(x, state, cell: ConvLSTMCell):
    """Single step; accepts an unbatched ``(C, rows, cols)`` input too."""
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
        if state is not None:
            state = tuple(s.unsqueeze(0) for s in state)
    h, (h, c) = cell(x, state)
    if unbatched:
        return h[0], (h[0], c[0])
    return h, (h, c)


class MSMConvLSTM(nn.Module):
    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        spatial = (cfg.token_rows, cfg.token_width)
        self.backbone = nn.ModuleList(
            ConvLSTMCell(cfg.in_channels if layer == 0 else cfg.hidden, cfg.hidden, cfg.kernel_size,
                         spatial, cfg.peephole)
            for layer in range(cfg.n_layers)
        )
        pad = cfg.kernel_size // 2
        self.msm_head = nn.Conv3d(cfg.hidden, 1, cfg.kernel_size, padding=pad)
        self.forecast_head = nn.Conv3d(cfg.hidden, 1, cfg.kernel_size, padding=pad)
        self.seg_head = nn.Sequential(
            nn.Conv2d(cfg.hidden, cfg.seg_hidden, cfg.kernel_size, padding=pad),
            nn.ReLU(),
            nn.Conv2d(cfg.seg_hidden, cfg.n_classes, cfg.kernel_size, padding=pad),
        )

    # -- backbone ---------------------------------------------------------

    def _as_tokens(self, tokens):
        if tokens.dim() == 4:
            tokens = tokens.unsqueeze(2)
        cfg = self.config
        if tokens.dim() != 5 or tuple(tokens.shape[2:]) != (cfg.in_channels, cfg.token_rows, cfg.token_width):
            raise DimensionError(
                f"expected tokens (N, T, {cfg.in_channels}, {cfg.token_rows}, {cfg.token_width}), "
                f"got {tuple(tokens.shape)}"
            )
        if tokens.shape[1] == 0:
            raise DimensionError("empty token sequence")
        return tokens

    def backbone_forward(self, tokens):
        """Run the stacked cells from zero state; returns the last layer's hidden sequence."""
        seq = self._as_tokens(tokens)
        n, t = seq.shape[:2]
        for layer, cell in enumerate(self.backbone):
            if layer > 0:
                seq = torch.relu(seq)
            state = cell.zero_state(n, seq)
            outs = []
            for step in range(t):
                h, state = cell(seq[:, step], state)
                outs.append(h)
            seq = torch.stack(outs, dim=1)
        return seq

    # -- heads ------------------------------------------------------------

    @staticmethod
    def _conv3d_tokens(head: nn.Conv3d, features):
        # (N, T, C, H, W) <-> (N, C, T, H, W)
        out = head(features.transpose(1, 2))
        return out.transpose(1, 2)

    def msm_head_forward(self, features):
        return self._conv3d_tokens(self.msm_head, features)

    def forecast_head_forward(self, features):
        out = self._conv3d_tokens(self.forecast_head, features)
        return out[:, self.config.readout_index]

    def segmentation_logits(self, features):
        n, t, c, h, w = features.shape
        if t != self.config.n_tokens:
            raise DimensionError(f"segmentation needs exactly {self.config.n_tokens} tokens, got {t}")
        image = features.permute(0, 2, 3, 1, 4).reshape(n, c, h, t * w)
        return self.seg_head(image)

    def segmentation_head_forward(self, features):
        return torch.softmax(self.segmentation_logits(features), dim=1)

    # -- task wrappers ----------------------------------------------------

    def reconstruct(self, tokens):
        return self.msm_head_forward(self.backbone_forward(tokens))

    def forecast(self, tokens):
        return self.forecast_head_forward(self.backbone_forward(tokens))

    def segment(self, tokens):
        return self.segmentation_head_forward(self.backbone_forward(tokens))

    def head_for(self, task: str) -> nn.Module:
        return {"msm": self.msm_head, "forecast": self.forecast_head, "segment": self.seg_head}[task]

    def trainability_mask(self) -> dict:
        return {name: p.requires_grad for name, p in self.named_parameters()}


def _fan_in(weight: torch.Tensor) -> int:
    return weight.shape[1] * math.prod(weight.shape[2:])


def init_weights(model: MSMConvLSTM, seed: int, scheme: str = "fan_in_uniform") -> MSMConvLSTM:
    """Kernels ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)); biases zero, forget-gate bias one.

    Peephole maps start at zero.
    """
    if scheme != "fan_in_uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if p.dim() >= 3 and not leaf.startswith("w_c"):
                bound = math.sqrt(6.0 / _fan_in(p))
                p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * (2 * bound) - bound)
            else:
                p.zero_()
        for cell in model.backbone:
            hid = cell.hidden
            cell.bias[hid:2 * hid] = 1.0
    return model


def build_model(config: Optional[ModelConfig] = None, seed: int = 0) -> MSMConvLSTM:
    return init_weights(MSMConvLSTM(config), seed)


def freeze_backbone(model: MSMConvLSTM) -> MSMConvLSTM:
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    for p in model.parameters():
        if not any(p is q for q in model.backbone.parameters()):
            p.requires_grad_(True)
    return model


def backbone_state(model: MSMConvLSTM) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items() if k.startswith("backbone.")}
