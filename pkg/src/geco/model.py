"""The dense-query counting network.

Tensors are channels-first inside the network: images ``(B, 3, H0, W0)``,
feature maps ``(B, C, h, w)``. Attention stages work on flattened tokens
``(B, h*w, d)``. The detection field is returned channels-last to match how
it is consumed downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import GecoConfig
from .errors import EmptyRegion, ShapeError

CHECKPOINT_FORMAT = "geco-checkpoint"
CHECKPOINT_VERSION = 1
BOX_HEAD_INIT = 0.05


@dataclass
class DetectionField:
    y_o: torch.Tensor  # (B, H, W, 1)
    y_bb: torch.Tensor  # (B, H, W, 4), tlrb fractions in [0, 1]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.y_o.shape[1:3])


def _log2(n: int) -> int:
    k = int(round(math.log2(n)))
    if 2 ** k != n or k < 2:
        raise ShapeError(f"stride {n} must be a power of two >= 4")
    return k


def sine_position_encoding(h: int, w: int, d: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding, ``(h*w, d)``; half the channels encode rows."""
    if d % 4:
        raise ShapeError(f"channel count {d} must be divisible by 4")
    quarter = d // 4
    freq = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w * 2 * math.pi
    ey = ys[:, None] * freq[None]
    ex = xs[:, None] * freq[None]
    ey = torch.cat([ey.sin(), ey.cos()], dim=1)[:, None, :].expand(h, w, 2 * quarter)
    ex = torch.cat([ex.sin(), ex.cos()], dim=1)[None, :, :].expand(h, w, 2 * quarter)
    return torch.cat([ey, ex], dim=-1).reshape(h * w, d).to(dtype)


class CrossAttention(nn.Module):
    """Multi-head attention plus a skip connection to the query.

    Inputs are layer-normalised before projection (pre-norm), so the skip
    path carries the raw query: ``out = q + Attn(norm(q), norm(k), norm(v))``.
    """

    def __init__(self, d: int, heads: int, norm: bool = True):
        super().__init__()
        if d % heads:
            raise ShapeError(f"d={d} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.norm_q = nn.LayerNorm(d) if norm else nn.Identity()
        self.norm_kv = nn.LayerNorm(d) if norm else nn.Identity()

    def forward(self, q, k, v, q_pos=None, k_pos=None):
        if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
            raise ShapeError(f"inconsistent attention inputs {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
        qn = self.norm_q(q)
        kn = self.norm_kv(k)
        vn = kn if v is k else self.norm_kv(v)
        if q_pos is not None:
            qn = qn + q_pos
        if k_pos is not None:
            kn = kn + k_pos
        b, n, d = q.shape
        m = k.shape[1]
        hd = d // self.heads
        qh = self.q_proj(qn).view(b, n, self.heads, hd).transpose(1, 2)
        kh = self.k_proj(kn).view(b, m, self.heads, hd).transpose(1, 2)
        vh = self.v_proj(vn).view(b, m, self.heads, hd).transpose(1, 2)
        attn = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        out = (attn @ vh).transpose(1, 2).reshape(b, n, d)
        return q + self.out_proj(out)


class Backbone(nn.Module):
    """Strided conv stack standing in for a large frozen image encoder.

    One block per factor of two up to ``r``; the stride-4 activation is
    projected to ``d_hq`` channels as the high-resolution skip feature.
    Borders are replicate-padded: zero padding turns the image edge into a
    contrast step that a trained model reads as an object corner.
    """

    def __init__(self, cfg: GecoConfig):
        super().__init__()
        n = _log2(cfg.r)
        self.r = cfg.r
        widths = []
        for i in range(n):
            stride = 2 ** (i + 1)
            widths.append(max(8, cfg.d_hq // 2) if stride == 2 else cfg.d_hq if stride == 4 else cfg.d)
        slope = cfg.negative_slope
        blocks, c_in = [], 3
        for c in widths:
            blocks.append(nn.Sequential(
                nn.Conv2d(c_in, c, 3, stride=2, padding=1, padding_mode="replicate"), nn.LeakyReLU(slope),
                nn.Conv2d(c, c, 3, padding=1, padding_mode="replicate"), nn.LeakyReLU(slope),
            ))
            c_in = c
        self.blocks = nn.ModuleList(blocks)
        self.proj = nn.Conv2d(widths[-1], cfg.d, 1)
        self.hq_proj = nn.Conv2d(widths[1], cfg.d_hq, 1)

    def forward(self, image):
        h0, w0 = image.shape[-2:]
        if h0 % self.r or w0 % self.r:
            raise ShapeError(f"image {h0}x{w0} not divisible by r={self.r}")
        x = image - 0.5
        hq = None
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i == 1:
                hq = self.hq_proj(x)
        return self.proj(x), hq


def roi_pool_weights(boxes: torch.Tensor, stride: int, h: int, w: int):
    """Per-box separable overlap weights over feature rows and columns.

    ``boxes`` is ``(B, k, 4)`` in pixels. Each cell's weight is the length of
    its overlap with the box in grid units; boxes that cover no cell after
    clipping fall back to the nearest cell.
    """
    g = boxes.detach().to(torch.float64) / stride

    def axis(lo, hi, size):
        edges = torch.arange(size, dtype=torch.float64)
        wts = (torch.minimum(hi[..., None], edges + 1) - torch.maximum(lo[..., None], edges)).clamp(min=0)
        empty = wts.sum(-1) <= 0
        if empty.any():
            centre = ((lo + hi) / 2).floor().clamp(0, size - 1).long()
            wts[empty] = F.one_hot(centre[empty], size).to(wts.dtype)
        return wts

    return axis(g[..., 1], g[..., 3], h), axis(g[..., 0], g[..., 2], w)


class GeCo(nn.Module):
    def __init__(self, cfg: Optional[GecoConfig] = None):
        super().__init__()
        cfg = cfg or GecoConfig()
        self.cfg = cfg
        d, slope = cfg.d, cfg.negative_slope
        self.backbone = Backbone(cfg)
        self.shape_mlp = nn.Sequential(nn.Linear(2, d), nn.LeakyReLU(slope), nn.Linear(d, d))
        self.zero_shot_prototype = nn.Parameter(torch.randn(1, d) * 0.1)
        self.zero_shot_attn = CrossAttention(d, cfg.heads, cfg.norm)
        self.generalize_attn = nn.ModuleList(CrossAttention(d, cfg.heads, cfg.norm) for _ in range(cfg.n_p))
        self.query_self_attn = nn.ModuleList(CrossAttention(d, cfg.heads, cfg.norm) for _ in range(cfg.n_q))
        self.query_cross_attn = nn.ModuleList(CrossAttention(d, cfg.heads, cfg.norm) for _ in range(cfg.n_q))
        n_up = _log2(cfg.r) - 1
        self.unpack = nn.ModuleList(
            nn.Conv2d(d + (cfg.d_hq if i == n_up - 1 else 0), d, 3, padding=1) for i in range(n_up)
        )
        self.objectness = nn.Conv2d(d, 1, 1)
        self.box_head = nn.Sequential(
            nn.Conv2d(d, d, 1), nn.LeakyReLU(slope),
            nn.Conv2d(d, d, 1), nn.LeakyReLU(slope),
            nn.Conv2d(d, 4, 1),
        )
        with torch.no_grad():
            self.box_head[-1].bias.fill_(math.log(BOX_HEAD_INIT / (1 - BOX_HEAD_INIT)))
        self._pos_cache = {}

    # stage-by-stage operations ------------------------------------------

    def backbone_encode(self, image):
        return self.backbone(image)

    def _pos(self, h, w, ref):
        key = (h, w, ref.dtype)
        if key not in self._pos_cache:
            self._pos_cache[key] = sine_position_encoding(h, w, self.cfg.d, ref.dtype)
        return self._pos_cache[key].to(ref.device)

    def extract_appearance_prototypes(self, f_i, exemplars):
        """RoI-average the feature map over each exemplar box, ``(B, k, d)``."""
        if exemplars.shape[1] < 1:
            raise EmptyRegion("at least one exemplar is required")
        h, w = f_i.shape[-2:]
        wy, wx = roi_pool_weights(exemplars, self.cfg.r, h, w)
        wy, wx = wy.to(f_i.dtype), wx.to(f_i.dtype)
        pooled = torch.einsum("bky,bkx,bdyx->bkd", wy, wx, f_i)
        return pooled / (wy.sum(-1) * wx.sum(-1))[..., None]

    def extract_shape_prototypes(self, exemplars, image_size):
        h0, w0 = image_size
        wh = torch.stack([(exemplars[..., 2] - exemplars[..., 0]) / w0,
                          (exemplars[..., 3] - exemplars[..., 1]) / h0], dim=-1)
        return self.shape_mlp(wh.to(self.zero_shot_prototype.dtype))

    def build_prototypes(self, f_i, exemplars=None, image_size=None):
        """Few-shot: appearance then shape rows, ``(B, 2k, d)``. Zero-shot: ``(B, 1, d)``."""
        if exemplars is None:
            tokens = f_i.flatten(2).transpose(1, 2)
            pz = self.zero_shot_prototype.expand(f_i.shape[0], 1, -1)
            return self.zero_shot_attn(pz, tokens, tokens)
        if image_size is None:
            image_size = (f_i.shape[-2] * self.cfg.r, f_i.shape[-1] * self.cfg.r)
        exemplars = exemplars.to(f_i.dtype)
        return torch.cat([self.extract_appearance_prototypes(f_i, exemplars),
                          self.extract_shape_prototypes(exemplars, image_size)], dim=1)

    def dqe_generalize(self, f_i, prototypes):
        """Spread prototype information to every location, no positional terms."""
        b, d, h, w = f_i.shape
        p = f_i.flatten(2).transpose(1, 2)
        for blk in self.generalize_attn:
            p = blk(p, prototypes, prototypes)
        return p.transpose(1, 2).reshape(b, d, h, w)

    def dqe_queries(self, f_i, generalized):
        b, d, h, w = f_i.shape
        pos = self._pos(h, w, f_i)
        feats = f_i.flatten(2).transpose(1, 2)
        q = generalized.flatten(2).transpose(1, 2)
        for sa, ca in zip(self.query_self_attn, self.query_cross_attn):
            adapted = sa(feats, feats, feats, pos, pos)
            q = ca(adapted, q, q, pos, pos)
        return q.transpose(1, 2).reshape(b, d, h, w)

    def dqd_unpack(self, q, f_hq):
        """Conv, leaky ReLU and 2x bilinear upsampling per stage; ``f_hq`` joins the last stage."""
        x = q
        last = len(self.unpack) - 1
        for i, conv in enumerate(self.unpack):
            if i == last:
                if f_hq.shape[-2:] != x.shape[-2:]:
                    raise ShapeError(f"high-res features {tuple(f_hq.shape[-2:])} do not match {tuple(x.shape[-2:])}")
                x = torch.cat([x, f_hq], dim=1)
            x = F.leaky_relu(conv(x), self.cfg.negative_slope)
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return x

    def heads(self, q_hr) -> DetectionField:
        y_o = F.leaky_relu(self.objectness(q_hr), self.cfg.negative_slope)
        y_bb = torch.sigmoid(self.box_head(q_hr))
        return DetectionField(y_o.permute(0, 2, 3, 1), y_bb.permute(0, 2, 3, 1))

    def forward(self, image, exemplars=None) -> DetectionField:
        """``image`` is ``(B, 3, H0, W0)``; ``exemplars`` is ``(B, k, 4)`` pixels or ``None``."""
        f_i, f_hq = self.backbone_encode(image)
        protos = self.build_prototypes(f_i, exemplars, tuple(image.shape[-2:]))
        generalized = self.dqe_generalize(f_i, protos)
        q = self.dqe_queries(f_i, generalized)
        return self.heads(self.dqd_unpack(q, f_hq))

    def zero_shot_parameters(self):
        return [self.zero_shot_prototype, *self.zero_shot_attn.parameters()]


def image_to_tensor(image, dtype=torch.float32) -> torch.Tensor:
    """``(H, W, 3)`` array in [0, 1] to a ``(1, 3, H, W)`` tensor."""
    return torch.as_tensor(np.ascontiguousarray(image), dtype=dtype).permute(2, 0, 1)[None]


def save_checkpoint(path, model: GeCo, extra: Optional[dict] = None) -> None:
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "state": state,
        "extra": extra or {},
    }, Path(path))


def load_checkpoint(path, cfg: Optional[GecoConfig] = None) -> GeCo:
    """Rebuild a model from a checkpoint; any shape disagreement raises ``ShapeError``."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    model = GeCo(cfg or GecoConfig.from_dict(blob["config"]))
    expected = {k: list(v.shape) for k, v in model.state_dict().items()}
    stored = blob["shapes"]
    bad = sorted(k for k in set(expected) | set(stored) if expected.get(k) != stored.get(k))
    if bad:
        raise ShapeError(f"checkpoint parameters mismatch: {bad}")
    model.load_state_dict(blob["state"])
    return model
