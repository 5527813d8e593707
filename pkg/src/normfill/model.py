"""Two-pathway completion network: color pathway, normal pathway, attention blend."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Conv2d, Module, Tensor
from .autodiff import functional as F
from .autodiff.nn import conv_param_count

Z_MAX = 80.0
VARIANTS = ("full", "no_normal", "no_attention", "no_dcu", "no_confidence")


class ConfigError(ValueError):
    pass


@dataclass
class DcuConfig:
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    blocks: int = 1
    guide_ch: int = 3
    sparse_ch: int = 2

    @property
    def n_scales(self) -> int:
        return len(self.widths)

    def validate(self) -> None:
        if self.n_scales < 1:
            raise ConfigError("need at least one scale")
        if any(w <= 0 for w in self.widths) or self.blocks < 0:
            raise ConfigError(f"widths must be positive, got {self.widths}")


@dataclass
class ModelConfig:
    dcu: DcuConfig = field(default_factory=DcuConfig)
    use_normal_pathway: bool = True
    use_attention: bool = True
    use_dcu_late_fusion: bool = True
    use_confidence: bool = True
    seed: int = 0

    def validate(self) -> None:
        self.dcu.validate()
        if not self.use_normal_pathway and self.use_attention:
            raise ConfigError("use_attention requires use_normal_pathway")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dcu"]["widths"] = list(self.dcu.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        dcu = dict(d.pop("dcu", {}))
        if "widths" in dcu:
            dcu["widths"] = tuple(int(w) for w in dcu["widths"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(dcu=DcuConfig(**dcu), **d)
        cfg.validate()
        return cfg


def make_variant(base: ModelConfig, name: str) -> ModelConfig:
    """Ablation presets. Only the named component is switched off."""
    flags = {
        "full": {},
        "no_normal": {"use_normal_pathway": False, "use_attention": False},
        "no_attention": {"use_attention": False},
        "no_dcu": {"use_dcu_late_fusion": False},
        "no_confidence": {"use_confidence": False},
    }
    if name not in flags:
        raise ConfigError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    on = {"use_normal_pathway": True, "use_attention": True, "use_dcu_late_fusion": True, "use_confidence": True}
    cfg = dataclasses.replace(base, **{**on, **flags[name]})
    cfg.validate()
    return cfg


@dataclass
class ModelOutput:
    depth: Optional[Tensor] = None
    depth_color: Optional[Tensor] = None
    depth_normal: Optional[Tensor] = None
    normals: Optional[Tensor] = None
    confidence: Optional[Tensor] = None
    w_color: Optional[Tensor] = None
    w_normal: Optional[Tensor] = None


# building blocks ------------------------------------------------------------


class ResBlock(Module):
    def __init__(self, width: int, rng):
        self.conv1 = Conv2d(width, width, 3, rng)
        self.conv2 = Conv2d(width, width, 3, rng, gain=1.0)

    def __call__(self, x: Tensor) -> Tensor:
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))

    @staticmethod
    def count(width: int) -> int:
        return 2 * conv_param_count(width, width, 3)


class Encoder(Module):
    """Full-resolution stem, then per scale a stride-2 conv and ResNet blocks.
    Returns features at 1, 1/2, ..., 1/2**n_scales."""

    def __init__(self, cin: int, widths: Sequence[int], blocks: int, rng):
        self.stem = Conv2d(cin, widths[0], 3, rng)
        self.down = []
        self.res = []
        prev = widths[0]
        for w in widths:
            self.down.append(Conv2d(prev, w, 3, rng, stride=2))
            self.res.append([ResBlock(w, rng) for _ in range(blocks)])
            prev = w
        # flatten for parameter discovery
        self.res_blocks = [b for group in self.res for b in group]

    def __call__(self, x: Tensor) -> List[Tensor]:
        x = F.relu(self.stem(x))
        feats = [x]
        for down, group in zip(self.down, self.res):
            x = F.relu(down(x))
            for block in group:
                x = block(x)
            feats.append(x)
        return feats

    @staticmethod
    def count(cin: int, widths: Sequence[int], blocks: int) -> int:
        n = conv_param_count(cin, widths[0], 3)
        prev = widths[0]
        for w in widths:
            n += conv_param_count(prev, w, 3) + blocks * ResBlock.count(w)
            prev = w
        return n


class UpProjection(Module):
    """Nearest 2x upsample, then 5x5 conv -> ReLU -> 3x3 conv, plus a parallel
    5x5 projection branch; the two are summed and rectified."""

    def __init__(self, cin: int, cout: int, rng):
        self.conv_a = Conv2d(cin, cout, 5, rng)
        self.conv_b = Conv2d(cout, cout, 3, rng, gain=1.0)
        self.proj = Conv2d(cin, cout, 5, rng, gain=1.0)
        self.cout = cout

    def __call__(self, x: Tensor) -> Tensor:
        # both 5x5 convs read the same upsampled input: run them as one
        w = F.concat((self.conv_a.weight, self.proj.weight), axis=0)
        b = F.concat((self.conv_a.bias, self.proj.bias), axis=0)
        both = F.upsample_conv2d(x, w, b)
        a, p = F.split_channels(both, (self.cout, self.cout))
        return F.relu(self.conv_b(F.relu(a)) + p)

    @staticmethod
    def count(cin: int, cout: int) -> int:
        return 2 * conv_param_count(cin, cout, 5) + conv_param_count(cout, cout, 3)


class DCU(Module):
    """Deep completion unit: guide features are concatenated into the decoder,
    sparse features are projected (1x1) and added.

    With ``late_fusion=False`` it degrades to a plain encoder-decoder over the
    channel-concatenated inputs (early fusion, U-Net skips)."""

    def __init__(self, cfg: DcuConfig, rng, late_fusion: bool = True):
        cfg.validate()
        self.late_fusion = late_fusion
        w = list(cfg.widths)
        n = len(w)
        if late_fusion:
            self.guide_enc = Encoder(cfg.guide_ch, w, cfg.blocks, rng)
            self.sparse_enc = Encoder(cfg.sparse_ch, w, cfg.blocks, rng)
            # sparse projections for levels n (bottleneck) .. 0 (full res)
            self.sparse_proj = [Conv2d(w[max(k - 1, 0)], w[max(k - 1, 0)], 1, rng, gain=1.0)
                                for k in range(n + 1)]
        else:
            self.enc = Encoder(cfg.guide_ch + cfg.sparse_ch, w, cfg.blocks, rng)
        self.ups = []
        cin = w[-1]
        for k in range(n, 0, -1):
            cout = w[k - 2] if k >= 2 else w[0]
            self.ups.append(UpProjection(cin, cout, rng))
            cin = 2 * cout
        self.out_channels = cin
        self.cfg = cfg

    def __call__(self, guide: Tensor, sparse: Tensor) -> Tensor:
        """Returns the last decoder feature map at input resolution."""
        n = self.cfg.n_scales
        h, w = guide.shape[2:]
        if h % 2 ** n or w % 2 ** n:
            raise ConfigError(f"input {h}x{w} not divisible by 2**{n}")
        if self.late_fusion:
            g = self.guide_enc(guide)
            s = self.sparse_enc(sparse)
            d = F.add_features(g[n], self.sparse_proj[n](s[n]))
            for i, up in enumerate(self.ups):
                lvl = n - 1 - i
                u = F.add_features(up(d), self.sparse_proj[lvl](s[lvl]))
                d = F.concat_channels(u, g[lvl])
        else:
            e = self.enc(F.concat_channels(guide, sparse))
            d = e[n]
            for i, up in enumerate(self.ups):
                lvl = n - 1 - i
                d = F.concat_channels(up(d), e[lvl])
        return d

    @staticmethod
    def count(cfg: DcuConfig, late_fusion: bool = True) -> int:
        w = list(cfg.widths)
        n = len(w)
        if late_fusion:
            total = Encoder.count(cfg.guide_ch, w, cfg.blocks) + Encoder.count(cfg.sparse_ch, w, cfg.blocks)
            total += sum(conv_param_count(w[max(k - 1, 0)], w[max(k - 1, 0)], 1) for k in range(n + 1))
        else:
            total = Encoder.count(cfg.guide_ch + cfg.sparse_ch, w, cfg.blocks)
        cin = w[-1]
        for k in range(n, 0, -1):
            cout = w[k - 2] if k >= 2 else w[0]
            total += UpProjection.count(cin, cout)
            cin = 2 * cout
        return total


class ScoreHead(Module):
    """Two 3x3 convs with ReLU and a linear 1x1 conv to one channel."""

    def __init__(self, cin: int, rng, width: int = 16):
        self.c1 = Conv2d(cin, width, 3, rng)
        self.c2 = Conv2d(width, width, 3, rng)
        self.c3 = Conv2d(width, 1, 1, rng, gain=1.0)

    def __call__(self, x: Tensor) -> Tensor:
        return self.c3(F.relu(self.c2(F.relu(self.c1(x)))))

    @staticmethod
    def count(cin: int, width: int = 16) -> int:
        return conv_param_count(cin, width, 3) + conv_param_count(width, width, 3) + conv_param_count(width, 1, 1)


class DepthHead(Module):
    """Softplus output scaled to meters; bias starts near a typical depth."""

    def __init__(self, cin: int, rng, init_depth: float = 20.0):
        self.conv = Conv2d(cin, 1, 3, rng, gain=0.1)
        self.conv.bias.data[:] = np.log(np.expm1(init_depth / Z_MAX))

    def __call__(self, x: Tensor) -> Tensor:
        return F.softplus(self.conv(x)) * Z_MAX


# pathways -----------------------------------------------------------------


class ColorPathway(Module):
    def __init__(self, cfg: ModelConfig, rng):
        dcu_cfg = dataclasses.replace(cfg.dcu, guide_ch=3, sparse_ch=2)
        self.dcu = DCU(dcu_cfg, rng, late_fusion=cfg.use_dcu_late_fusion)
        c = self.dcu.out_channels
        self.depth_head = DepthHead(c, rng)
        self.conf_head = Conv2d(c, 1, 3, rng, gain=1.0)
        self.score_head = ScoreHead(c, rng)

    def __call__(self, rgb: Tensor, sparse: Tensor, mask: Tensor, need_score: bool = True):
        feat = self.dcu(rgb, F.concat_channels(sparse, mask))
        depth = self.depth_head(feat)
        conf = F.sigmoid(self.conf_head(feat))
        score = self.score_head(feat) if need_score else None
        return depth, conf, score


class NormalPathway(Module):
    def __init__(self, cfg: ModelConfig, rng):
        a_cfg = dataclasses.replace(cfg.dcu, guide_ch=3, sparse_ch=2)
        b_cfg = dataclasses.replace(cfg.dcu, guide_ch=3, sparse_ch=2)
        self.dcu_normal = DCU(a_cfg, rng, late_fusion=cfg.use_dcu_late_fusion)
        self.normal_head = Conv2d(self.dcu_normal.out_channels, 3, 3, rng, gain=1.0)
        self.dcu_depth = DCU(b_cfg, rng, late_fusion=cfg.use_dcu_late_fusion)
        c = self.dcu_depth.out_channels
        self.depth_head = DepthHead(c, rng)
        self.score_head = ScoreHead(c, rng)

    def normals(self, rgb: Tensor, sparse: Tensor, mask: Tensor) -> Tensor:
        feat = self.dcu_normal(rgb, F.concat_channels(sparse, mask))
        return F.normalize_channels(self.normal_head(feat))

    def depth(self, normals: Tensor, sparse: Tensor, confidence: Tensor, need_score: bool = True):
        feat = self.dcu_depth(normals, F.concat_channels(sparse, confidence))
        depth = self.depth_head(feat)
        score = self.score_head(feat) if need_score else None
        return depth, score


def attention_integrate(depth_color: Tensor, depth_normal: Tensor, score_color: Tensor,
                        score_normal: Tensor):
    """Blend the two depth estimates with per-pixel softmax weights."""
    w_c, w_n = F.softmax_pair(score_color, score_normal)
    return w_c * depth_color + w_n * depth_normal, w_c, w_n


class DepthCompletionNet(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.color = ColorPathway(cfg, rng)
        self.normal = NormalPathway(cfg, rng) if cfg.use_normal_pathway else None

    @staticmethod
    def expected_parameter_count(cfg: ModelConfig) -> int:
        late = cfg.use_dcu_late_fusion
        dcu = DCU.count(dataclasses.replace(cfg.dcu, guide_ch=3, sparse_ch=2), late)
        c = 2 * cfg.dcu.widths[0]
        color = dcu + conv_param_count(c, 1, 3) * 2 + ScoreHead.count(c)
        if not cfg.use_normal_pathway:
            return color
        normal = 2 * dcu + conv_param_count(c, 3, 3) + conv_param_count(c, 1, 3) + ScoreHead.count(c)
        return color + normal

    def forward(self, batch: Dict[str, np.ndarray], need: Optional[Sequence[str]] = None) -> ModelOutput:
        """Run the network on a batch dict with ``rgb`` [B,3,H,W], ``sparse`` [B,1,H,W]
        in meters and ``mask`` [B,1,H,W].

        ``need`` limits evaluation to the listed ModelOutput fields (and whatever
        they depend on); ``None`` computes everything."""
        cfg = self.cfg
        need = set(need) if need is not None else {f.name for f in dataclasses.fields(ModelOutput)}
        rgb = Tensor(np.asarray(batch["rgb"]) - 0.5)
        sparse = Tensor(np.asarray(batch["sparse"]) / Z_MAX)
        mask = Tensor(batch["mask"])
        out = ModelOutput()

        want_final = bool(need & {"depth", "w_color", "w_normal"})
        if cfg.use_normal_pathway:
            blend = cfg.use_attention and want_final
            want_normal_depth = want_final or "depth_normal" in need
            want_normals = want_normal_depth or "normals" in need
            want_color = (blend or bool(need & {"depth_color", "confidence"})
                          or (want_normal_depth and cfg.use_confidence))
        else:
            blend = want_normal_depth = want_normals = False
            want_color = want_final or bool(need & {"depth_color", "confidence"})

        if want_color:
            out.depth_color, out.confidence, score_c = self.color(rgb, sparse, mask, need_score=blend)
        if want_normals:
            out.normals = self.normal.normals(rgb, sparse, mask)
        if want_normal_depth:
            conf = out.confidence if cfg.use_confidence else mask
            out.depth_normal, score_n = self.normal.depth(out.normals, sparse, conf, need_score=blend)
        if want_final:
            if not cfg.use_normal_pathway:
                out.depth = out.depth_color
            elif not cfg.use_attention:
                out.depth = out.depth_normal
            else:
                out.depth, out.w_color, out.w_normal = attention_integrate(
                    out.depth_color, out.depth_normal, score_c, score_n)
        return out

    __call__ = forward

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch; missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise ConfigError(f"shape mismatch for {k}: {arrays[k].shape} vs {p.shape}")
            p.data = np.array(arrays[k], dtype=p.data.dtype)
