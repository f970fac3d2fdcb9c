"""Shared two-stream network: visual and audio encoders, one linear
projection head per modality per objective, and the visually conditioned
mask decoder.

One model instance serves all three tasks; training may leave some heads
untouched (disabled objectives), but the architecture is always complete so
checkpoints are uniform.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError

SUPPORTED_DECODER_DEPTHS = (4, 8, 12, 16)
ARCHS = ("compact_cnn", "resnet18_shape")

# decoder up-block channel plan: 4 upsampling stages from the 4x4 bottleneck
DECODER_STAGE_CHANNELS = (64, 32, 16, 16)


@dataclass(frozen=True)
class ModelConfig:
    visual_arch: str = "compact_cnn"
    audio_arch: str = "compact_cnn"
    embed_dim: int = 512
    proj_dim: int = 512
    decoder_depth: int = 8
    temperature: float = 0.07
    pretrained_visual: bool = False
    width: int = 24              # compact_cnn stem channels
    image_size: int = 224
    audio_input_size: int = 128
    decoder_base_ch: int = 128
    mask_size: int = 64          # native resolution of the predicted mask
    audio_norm_mean: float = -11.0   # affine normalization of log-magnitude input
    audio_norm_std: float = 5.0

    def __post_init__(self):
        if self.visual_arch not in ARCHS or self.audio_arch not in ARCHS:
            raise ConfigurationError(
                f"unknown arch {self.visual_arch!r}/{self.audio_arch!r}, expected one of {ARCHS}"
            )
        if self.decoder_depth not in SUPPORTED_DECODER_DEPTHS:
            raise ConfigurationError(
                f"decoder_depth {self.decoder_depth} not in supported grid {SUPPORTED_DECODER_DEPTHS}"
            )
        if self.proj_dim <= 0 or self.embed_dim <= 0:
            raise ConfigurationError("embed_dim and proj_dim must be positive")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.image_size % 32 != 0 or self.audio_input_size % 32 != 0:
            raise ConfigurationError("input sizes must be divisible by the stride-32 encoders")


@dataclass
class VisualFeatureMap:
    """Batched spatial features, B x H' x W' x embed_dim (stride 32)."""

    grid: torch.Tensor

    @property
    def cells(self) -> int:
        return self.grid.shape[1] * self.grid.shape[2]


@dataclass
class AudioEmbedding:
    """Batched pooled audio features, B x embed_dim (pre-normalization)."""

    vector: torch.Tensor


@dataclass
class EmbeddingBundle:
    """All six projected views of a batch, each L2-normalized.

    a_glb/a_loc/a_mva: B x proj_dim. v_glb: B x proj_dim. V_loc/V_mva:
    B x cells x proj_dim.
    """

    a_glb: torch.Tensor
    a_loc: torch.Tensor
    a_mva: torch.Tensor
    v_glb: torch.Tensor
    V_loc: torch.Tensor
    V_mva: torch.Tensor

    def validate(self, atol: float = 1e-5) -> None:
        for name in ("a_glb", "a_loc", "a_mva", "v_glb"):
            norms = getattr(self, name).norm(dim=-1)
            if not torch.allclose(norms, torch.ones_like(norms), atol=atol):
                raise InputError(f"{name} is not unit-norm")
        for name in ("V_loc", "V_mva"):
            norms = getattr(self, name).norm(dim=-1)
            if not torch.allclose(norms, torch.ones_like(norms), atol=atol):
                raise InputError(f"{name} cells are not unit-norm")


def _conv_block(in_ch, out_ch, kernel, stride, padding, pad_mode="replicate"):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding,
                  padding_mode=pad_mode if padding else "zeros"),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class CompactBackbone(nn.Module):
    """Stride-32 feature extractor: a patchify stem plus 4 conv blocks.

    Replicate padding keeps spatially constant inputs spatially constant.
    Exposes the stride-8 and stride-16 maps for decoder skip connections.
    """

    def __init__(self, in_channels: int, width: int, embed_dim: int):
        super().__init__()
        self.stem = _conv_block(in_channels, width, 8, 8, 0)
        self.block1 = _conv_block(width, 2 * width, 3, 2, 1)
        self.block2 = _conv_block(2 * width, 4 * width, 3, 2, 1)
        self.block3 = _conv_block(4 * width, 8 * width, 3, 1, 1)
        self.block4 = _conv_block(8 * width, embed_dim, 1, 1, 0)
        self.skip_channels = {8: width, 16: 2 * width}  # keyed by stride

    def forward(self, x):
        feats = {}
        x = self.stem(x)
        feats[8] = x
        x = self.block1(x)
        feats[16] = x
        x = self.block2(x)
        x = self.block3(x)
        x = self.block4(x)
        return x, feats


class ResnetShapeBackbone(nn.Module):
    """The 18-layer residual configuration, stride 32, 512-channel output."""

    def __init__(self, in_channels: int, embed_dim: int, pretrained: bool):
        super().__init__()
        from torchvision.models import resnet18

        if pretrained:
            try:
                from torchvision.models import ResNet18_Weights
                net = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1)
            except Exception as exc:
                raise ConfigurationError(
                    f"pretrained visual weights unavailable in this environment: {exc}"
                )
        else:
            net = resnet18(weights=None)
        if in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2 = net.layer1, net.layer2
        self.layer3, self.layer4 = net.layer3, net.layer4
        self.adapter = nn.Identity() if embed_dim == 512 else nn.Conv2d(512, embed_dim, 1)
        self.skip_channels = {8: 128, 16: 256}

    def forward(self, x):
        feats = {}
        x = self.stem(x)
        x = self.layer1(x)
        x = self.layer2(x)
        feats[8] = x
        x = self.layer3(x)
        feats[16] = x
        x = self.layer4(x)
        return self.adapter(x), feats


def _make_backbone(arch: str, in_channels: int, cfg: ModelConfig, pretrained: bool):
    if arch == "compact_cnn":
        return CompactBackbone(in_channels, cfg.width, cfg.embed_dim)
    return ResnetShapeBackbone(in_channels, cfg.embed_dim, pretrained)


class _DecoderBlock(nn.Module):
    """One decoder stage: either a x2 transposed-conv upsample (optionally
    fusing an encoder skip at the new resolution) or a stride-1 refinement."""

    def __init__(self, in_ch: int, out_ch: int, upsample: bool, skip_ch: int = 0):
        super().__init__()
        self.upsample = upsample
        if upsample:
            self.conv = nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1)
        else:
            self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1, padding_mode="replicate")
        self.norm = nn.BatchNorm2d(out_ch)
        self.fuse = None
        if skip_ch:
            self.fuse = nn.Sequential(
                nn.Conv2d(out_ch + skip_ch, out_ch, 1),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            )

    def forward(self, x, skip=None):
        x = F.relu(self.norm(self.conv(x)))
        if self.fuse is not None:
            if skip is None:
                raise InputError("decoder block expects an encoder skip at this resolution")
            x = self.fuse(torch.cat([x, skip], dim=1))
        return x


class SeparationDecoder(nn.Module):
    """Mask head: bottleneck conditioning merge, `depth` up-blocks with
    4 upsampling stages spread evenly among them, sigmoid output.

    up_blocks is the introspection surface: its length equals the configured
    depth. Skip connections consume the audio encoder's stride-16 and
    stride-8 maps at the matching decoder resolutions.
    """

    def __init__(self, cfg: ModelConfig, skip_channels: dict):
        super().__init__()
        depth = cfg.decoder_depth
        if depth not in SUPPORTED_DECODER_DEPTHS:
            raise ConfigurationError(f"unsupported decoder depth {depth}")
        self.merge = nn.Sequential(
            nn.Conv2d(2 * cfg.embed_dim, cfg.decoder_base_ch, 1),
            nn.BatchNorm2d(cfg.decoder_base_ch),
            nn.ReLU(inplace=True),
        )
        every = depth // 4
        ch = cfg.decoder_base_ch
        stage = 0  # how many upsamples happened so far
        blocks = []
        self._skip_stage = {}  # block index -> encoder stride to fuse
        for i in range(depth):
            if (i + 1) % every == 0:
                out_ch = DECODER_STAGE_CHANNELS[stage]
                # decoder runs 4 -> 8 -> 16 -> 32 -> 64 for a 128 input, so
                # the first upsample lands on the encoder's stride-16 map
                # (8x8) and the second on its stride-8 map (16x16)
                skip_stride = {0: 16, 1: 8}.get(stage)
                skip_ch = skip_channels.get(skip_stride, 0) if skip_stride else 0
                blocks.append(_DecoderBlock(ch, out_ch, True, skip_ch))
                if skip_stride:
                    self._skip_stage[i] = skip_stride
                ch = out_ch
                stage += 1
            else:
                blocks.append(_DecoderBlock(ch, ch, False))
        self.up_blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(ch, 1, 1)

    def forward(self, bottleneck, conditioning, skips):
        b, _, h, w = bottleneck.shape
        cond = conditioning[:, :, None, None].expand(-1, -1, h, w)
        x = self.merge(torch.cat([bottleneck, cond], dim=1))
        for i, block in enumerate(self.up_blocks):
            skip = skips.get(self._skip_stage[i]) if i in self._skip_stage else None
            x = block(x, skip)
        return torch.clamp(torch.sigmoid(self.head(x)), 1e-6, 1.0 - 1e-6)


class UnifiedAVModel(nn.Module):
    """Two encoders, six projection heads, one separation decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.visual_backbone = _make_backbone(
            cfg.visual_arch, 3, cfg, cfg.pretrained_visual)
        self.audio_backbone = _make_backbone(cfg.audio_arch, 1, cfg, False)
        heads = {}
        for modality in ("a", "v"):
            for objective in ("glb", "loc", "mva"):
                heads[f"{modality}_{objective}"] = nn.Linear(cfg.embed_dim, cfg.proj_dim)
        self.heads = nn.ModuleDict(heads)
        self.decoder = SeparationDecoder(cfg, self.audio_backbone.skip_channels)

    # -- encoders ----------------------------------------------------------

    def encode_visual(self, images: torch.Tensor) -> VisualFeatureMap:
        """images: B x 3 x S x S (normalized) -> B x S/32 x S/32 x embed."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise InputError(f"expected B x 3 x H x W images, got {tuple(images.shape)}")
        if images.shape[2] != self.cfg.image_size or images.shape[3] != self.cfg.image_size:
            raise InputError(
                f"expected {self.cfg.image_size}px images, got {tuple(images.shape[2:])}"
            )
        feat, _ = self.visual_backbone(images)
        return VisualFeatureMap(feat.permute(0, 2, 3, 1).contiguous())

    def encode_audio(self, logspec: torch.Tensor) -> AudioEmbedding:
        """logspec: B x 1 x S x S log-magnitude grid -> pooled B x embed."""
        vec, _, _ = self._encode_audio_full(logspec)
        return AudioEmbedding(vec)

    def _encode_audio_full(self, logspec: torch.Tensor):
        if logspec.ndim != 4 or logspec.shape[1] != 1:
            raise InputError(f"expected B x 1 x H x W grids, got {tuple(logspec.shape)}")
        s = self.cfg.audio_input_size
        if logspec.shape[2] != s or logspec.shape[3] != s:
            raise InputError(f"expected {s}px audio grids, got {tuple(logspec.shape[2:])}")
        x = (logspec - self.cfg.audio_norm_mean) / self.cfg.audio_norm_std
        feat, skips = self.audio_backbone(x)
        pooled = feat.amax(dim=(2, 3))  # global max, mirroring the visual path
        return pooled, feat, skips

    # -- heads --------------------------------------------------------------

    def project(self, audio: AudioEmbedding, visual: VisualFeatureMap,
                mixed_visual: VisualFeatureMap | None = None,
                partner_audio: AudioEmbedding | None = None) -> EmbeddingBundle:
        """Apply all six heads; every output is L2-normalized.

        The global visual path max-pools the feature map before its head.
        V_mva comes from the mixed frame's map when one is given (training),
        else from the base frame (evaluation convenience); a_mva likewise
        projects the partner audio when provided.
        """
        a_vec = audio.vector
        grid = visual.grid
        b, h, w, d = grid.shape
        v_pooled = grid.reshape(b, h * w, d).amax(dim=1)

        mva_grid = mixed_visual.grid if mixed_visual is not None else grid
        mb = mva_grid.shape[0]
        mva_cells = mva_grid.reshape(mb, h * w, d)
        a_mva_src = partner_audio.vector if partner_audio is not None else a_vec

        return EmbeddingBundle(
            a_glb=F.normalize(self.heads["a_glb"](a_vec), dim=-1),
            a_loc=F.normalize(self.heads["a_loc"](a_vec), dim=-1),
            a_mva=F.normalize(self.heads["a_mva"](a_mva_src), dim=-1),
            v_glb=F.normalize(self.heads["v_glb"](v_pooled), dim=-1),
            V_loc=F.normalize(self.heads["v_loc"](grid.reshape(b, h * w, d)), dim=-1),
            V_mva=F.normalize(self.heads["v_mva"](mva_cells), dim=-1),
        )

    # -- separation ----------------------------------------------------------

    def separation_mask(self, mix_logspec: torch.Tensor,
                        visual_conditioning: torch.Tensor) -> torch.Tensor:
        """Predict the base source's mask for a mixture grid.

        visual_conditioning is the pooled (pre-head) visual feature of the
        base frame; returns B x 1 x mask_size x mask_size in (0, 1).
        """
        _, bottleneck, skips = self._encode_audio_full(mix_logspec)
        if visual_conditioning.ndim != 2 or visual_conditioning.shape[1] != self.cfg.embed_dim:
            raise InputError("conditioning must be B x embed_dim pooled visual features")
        return self.decoder(bottleneck, visual_conditioning, skips)

    def pooled_visual(self, visual: VisualFeatureMap) -> torch.Tensor:
        grid = visual.grid
        b, h, w, d = grid.shape
        return grid.reshape(b, h * w, d).amax(dim=1)


def build_model(cfg: ModelConfig) -> UnifiedAVModel:
    return UnifiedAVModel(cfg)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def head_parameter_names(objective: str) -> list[str]:
    """Checkpoint key prefixes owned by one objective's task heads.

    cl owns the global and local projection heads (recognition +
    localization), mva its two heads, mas the decoder.
    """
    if objective == "cl":
        return ["heads.a_glb.", "heads.a_loc.", "heads.v_glb.", "heads.v_loc."]
    if objective == "mva":
        return ["heads.a_mva.", "heads.v_mva."]
    if objective == "mas":
        return ["decoder."]
    raise InputError(f"unknown objective {objective!r}")


TASK_REQUIRED_PREFIXES = {
    # evaluation task -> parameter prefixes that must exist in a checkpoint
    "loc": ("heads.a_loc.", "heads.v_loc."),
    "recog": ("heads.a_glb.", "heads.v_glb."),
    "sep": ("decoder.",),
}
