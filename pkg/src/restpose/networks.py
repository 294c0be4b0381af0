"""Regressor g (image stack -> 85 body/camera parameters), the soft
silhouette rasterizer, and the reconstruction decoder d.

The regressor is a residual conv encoder plus an iterative error-feedback
head: T refinement steps, each predicting a parameter delta from [pooled
feature, current parameters]. The delta layer is zero-initialized, so a
fresh regressor returns its initialization unchanged.

Pixel convention: image coordinate (x, y) = (column, row); pixel centers
sit at integer coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .bodymodel import NUM_BETAS, NUM_JOINTS, Camera, Mesh, camera_from_output, project
from .errors import ConfigError, DimensionError

PARAM_DIM = NUM_JOINTS * 3 + NUM_BETAS + 3  # 72 + 10 + 3 = 85
IMAGE_SIZE = 224

MODALITY_CHANNELS = {"depth": 1, "ir": 1, "pm": 1, "rgb": 3}
LEVEL_MODALITIES = {
    0: ("depth", "ir"),
    1: ("depth", "ir", "pm"),
    2: ("depth", "ir", "pm", "rgb"),
}


def layout_channels(layout) -> int:
    try:
        return sum(MODALITY_CHANNELS[m] for m in layout)
    except KeyError as e:
        raise ConfigError(f"unknown modality in layout: {e.args[0]}") from e


@dataclass
class ImageStack:
    """Concatenated modality images, (C, 224, 224) in [0, 1]."""

    channels: Tensor
    layout: tuple

    def __post_init__(self):
        self.layout = tuple(self.layout)
        c = layout_channels(self.layout)
        if tuple(self.channels.shape) != (c, IMAGE_SIZE, IMAGE_SIZE):
            raise DimensionError(
                f"stack for layout {self.layout} must be ({c}, {IMAGE_SIZE}, {IMAGE_SIZE}), "
                f"got {tuple(self.channels.shape)}"
            )


@dataclass
class RegressorOutput:
    """84-dimensional body state plus camera head: theta (24,3), beta (10,),
    cam (s, tx, ty); 85 numbers total."""

    theta: Tensor
    beta: Tensor
    cam: Tensor

    @property
    def vector(self) -> Tensor:
        return torch.cat([self.theta.reshape(-1), self.beta.reshape(-1), self.cam.reshape(-1)])

    @classmethod
    def from_vector(cls, v) -> "RegressorOutput":
        v = torch.as_tensor(v).reshape(-1)
        if v.shape[0] != PARAM_DIM:
            raise DimensionError(f"parameter vector must have {PARAM_DIM} entries, got {v.shape[0]}")
        return cls(theta=v[:72].reshape(NUM_JOINTS, 3), beta=v[72:82], cam=v[82:85])

    def camera(self) -> Camera:
        return camera_from_output(self.theta, self.cam)


@dataclass
class DecoderOutput:
    depth_uncovered: Tensor  # (1, 224, 224)
    ir_uncovered: Tensor     # (1, 224, 224)


def _gn(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(8 if c % 8 == 0 else 1, c)


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1)
        self.n1 = _gn(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1)
        self.n2 = _gn(c_out)
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = nn.Conv2d(c_in, c_out, 1, stride)

    def forward(self, x):
        h = F.relu(self.n1(self.conv1(x)))
        h = self.n2(self.conv2(h))
        s = x if self.skip is None else self.skip(x)
        return F.relu(h + s)


@dataclass
class NetConfig:
    """Width configuration; `toy` fits the CPU budget, `paper` follows the
    published dimensions (2048-channel encoder features, 64-wide decoder)."""

    scale: str = "toy"
    ief_iters: int = 3
    head_hidden: int = 256

    @property
    def feature_channels(self) -> int:
        return 512 if self.scale == "toy" else 2048

    @property
    def decoder_width(self) -> int:
        return 16 if self.scale == "toy" else 64


class ToyEncoder(nn.Module):
    """Four residual stages, 224 -> 7, ending in 512 channels."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, 16, 3, 2, 1), _gn(16), nn.ReLU())
        self.stages = nn.Sequential(
            ResidualBlock(16, 32, 2),
            ResidualBlock(32, 64, 2),
            ResidualBlock(64, 128, 2),
            ResidualBlock(128, 256, 2),
        )
        self.proj = nn.Conv2d(256, 512, 1)

    def forward(self, x):
        return self.proj(self.stages(self.stem(x)))


class PaperEncoder(nn.Module):
    """ResNet-50 trunk (no classifier), 224 -> 7x7x2048."""

    def __init__(self, in_channels: int):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        net.conv1 = nn.Conv2d(in_channels, 64, 7, 2, 3, bias=False)
        self.trunk = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool,
            net.layer1, net.layer2, net.layer3, net.layer4,
        )

    def forward(self, x):
        return self.trunk(x)


class Regressor(nn.Module):
    """Shared regression model g for one fusion level."""

    def __init__(self, layout, config: NetConfig | None = None):
        super().__init__()
        self.config = config or NetConfig()
        self.layout = tuple(layout)
        c_in = layout_channels(self.layout)
        if self.config.scale == "toy":
            self.encoder = ToyEncoder(c_in)
        elif self.config.scale == "paper":
            self.encoder = PaperEncoder(c_in)
        else:
            raise ConfigError(f"unknown encoder scale: {self.config.scale}")
        feat = self.config.feature_channels
        hidden = self.config.head_hidden
        self.head = nn.Sequential(
            nn.Linear(feat + PARAM_DIM, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, PARAM_DIM),
        )
        # zero delta layer: a fresh regressor reproduces its initialization
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    def forward(self, images: Tensor, init_vec: Tensor) -> tuple[Tensor, Tensor]:
        feats = self.encoder(images)                  # (B, Cf, 7, 7)
        pooled = feats.mean(dim=(2, 3))               # (B, Cf)
        params = init_vec
        for _ in range(self.config.ief_iters):
            delta = self.head(torch.cat([pooled, params], dim=1))
            params = params + delta
        return params, feats


def build_regressor(layout, seed: int, config: NetConfig | None = None) -> Regressor:
    torch.manual_seed(seed)
    return Regressor(layout, config)


def regressor_forward(g: Regressor, images, init) -> tuple[RegressorOutput, Tensor]:
    """Run g on one image stack. Returns the refined 85-parameter output and
    the pre-pooling spatial feature map for the decoder."""
    if isinstance(images, ImageStack):
        if images.layout != g.layout:
            raise ConfigError(f"stack layout {images.layout} does not match regressor layout {g.layout}")
        x = images.channels
    else:
        x = torch.as_tensor(images)
        if x.shape[0] != layout_channels(g.layout):
            raise ConfigError(
                f"input has {x.shape[0]} channels, regressor layout {g.layout} "
                f"expects {layout_channels(g.layout)}"
            )
    init_vec = init.vector if isinstance(init, RegressorOutput) else torch.as_tensor(init).reshape(-1)
    if init_vec.shape[0] != PARAM_DIM:
        raise DimensionError(f"init vector must have {PARAM_DIM} entries")
    x = x.to(torch.float32).unsqueeze(0)
    params, feats = g(x, init_vec.to(torch.float32).unsqueeze(0))
    return RegressorOutput.from_vector(params[0]), feats[0]


# ---------------------------------------------------------------------------
# Soft silhouette rasterizer
# ---------------------------------------------------------------------------


def _signed_distance(tri: Tensor, pix: Tensor) -> Tensor:
    """Signed distance (positive inside) from pixels to triangles.

    tri (..., 3, 2) broadcast against pix (..., 2); returns (...,).
    """
    d2 = None
    crosses = []
    for i in range(3):
        a = tri[..., i, :]
        b = tri[..., (i + 1) % 3, :]
        e = b - a
        v = pix - a
        tt = ((v * e).sum(-1) / ((e * e).sum(-1) + 1e-12)).clamp(0, 1)
        dd = ((v - tt.unsqueeze(-1) * e) ** 2).sum(-1)
        d2 = dd if d2 is None else torch.minimum(d2, dd)
        crosses.append(e[..., 0] * v[..., 1] - e[..., 1] * v[..., 0])
    cr = torch.stack(crosses)
    # strict signs: a degenerate (collinear) triangle contains no pixel
    inside = ((cr > 0).all(0) | (cr < 0).all(0)).to(tri.dtype) * 2 - 1
    return inside * torch.sqrt(d2 + 1e-12)


def _select_best_faces(tri: Tensor, size: int, pad: float):
    """Windowed max scan (no gradients): for each covered pixel, the face
    with the largest signed distance. Returns (best_face, covered) numpy."""
    with torch.no_grad():
        t = tri.detach().to(torch.float32)
        F_ = t.shape[0]
        lo = torch.floor(t.amin(dim=1) - pad).to(torch.int64)      # (F, 2)
        ext = (t.amax(dim=1) - t.amin(dim=1)).max()
        W = int(math.ceil(float(ext) + 2 * pad)) + 2
        if W >= size:
            return None  # windows as large as the frame: caller uses dense path
        rng = torch.arange(W)
        px = (lo[:, 0:1] + rng).reshape(F_, 1, W).expand(F_, W, W).reshape(F_, W * W)
        py = (lo[:, 1:2] + rng).reshape(F_, W, 1).expand(F_, W, W).reshape(F_, W * W)
        pix = torch.stack([px, py], dim=-1).to(torch.float32)      # (F, W*W, 2)
        sd = _signed_distance(t.unsqueeze(1), pix)                 # (F, W*W)

        valid = (px >= 0) & (px < size) & (py >= 0) & (py < size)
        flat = (py * size + px)[valid]
        sdv = sd[valid]
        best_sd = torch.full((size * size,), -torch.inf)
        best_sd.index_reduce_(0, flat, sdv, "amax")
        covered = best_sd > -torch.inf
        # deterministic argmax: smallest face index among ties
        face_ids = torch.arange(F_).unsqueeze(1).expand(F_, W * W)[valid]
        hits = sdv >= best_sd[flat]
        best_face = torch.full((size * size,), torch.iinfo(torch.int64).max, dtype=torch.int64)
        best_face.index_reduce_(0, flat[hits], face_ids[hits], "amin")
        return best_face.numpy(), covered.numpy()


def rasterize_silhouette(
    vertices,
    faces,
    cam: Camera,
    size: int = IMAGE_SIZE,
    sharpness: float = 30.0,
    method: str = "auto",
) -> Tensor:
    """Soft body silhouette: per pixel, max over faces of
    sigmoid(sharpness * signed_distance_to_projected_triangle).

    Differentiable in the vertex positions and camera. `method` picks the
    implementation: "dense" scores every face against every pixel;
    "windowed" restricts each face to its bounding window and then
    re-evaluates only each pixel's best face with gradients (identical
    subgradient, far cheaper). "auto" chooses by problem size.
    """
    if sharpness <= 0:
        raise ConfigError("sharpness must be positive")
    verts = torch.as_tensor(vertices)
    if not verts.is_floating_point():
        verts = verts.to(torch.float32)
    faces_t = torch.as_tensor(faces, dtype=torch.int64)
    if faces_t.numel() == 0:
        return torch.zeros(size, size, dtype=verts.dtype)
    v2 = project(verts, cam)  # (N, 2) px
    tri = v2[faces_t]         # (F, 3, 2)

    if method == "auto":
        method = "windowed" if faces_t.shape[0] * size * size > 2_000_000 else "dense"

    if method == "windowed":
        pad = max(2.0, 40.0 / sharpness)
        sel = _select_best_faces(tri, size, pad)
        if sel is None:
            method = "dense"
        else:
            best_face, covered = sel
            # keep the output on the autograd graph even when nothing is hit
            out = torch.zeros(size * size, dtype=verts.dtype) + 0.0 * v2.sum()
            if covered.any():
                idx = np.nonzero(covered)[0]
                tri_sel = tri[torch.from_numpy(best_face[idx])]          # (P, 3, 2)
                ys = torch.as_tensor(idx // size, dtype=verts.dtype)
                xs = torch.as_tensor(idx % size, dtype=verts.dtype)
                pix = torch.stack([xs, ys], dim=-1)
                sd = _signed_distance(tri_sel, pix)
                out = out.index_put((torch.from_numpy(idx),), torch.sigmoid(sharpness * sd))
            return out.reshape(size, size)

    if method != "dense":
        raise ConfigError(f"unknown rasterizer method: {method}")
    ys, xs = torch.meshgrid(
        torch.arange(size, dtype=verts.dtype), torch.arange(size, dtype=verts.dtype), indexing="ij"
    )
    pix = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)  # (P, 2)
    acc = torch.full((size * size,), -1e9, dtype=verts.dtype)
    chunk = max(1, 4_000_000 // max(size * size, 1))
    for f0 in range(0, tri.shape[0], chunk):
        t = tri[f0 : f0 + chunk]                       # (C, 3, 2)
        sd = _signed_distance(t.unsqueeze(0), pix.unsqueeze(1))  # (P, C)
        acc = torch.maximum(acc, (sharpness * sd).max(dim=1).values)
    return torch.sigmoid(acc).reshape(size, size)


def hard_silhouette(soft: Tensor) -> Tensor:
    """Hard mask: threshold the soft silhouette at 0.5 (strictly greater)."""
    return (soft > 0.5).to(soft.dtype)


def scale_camera(cam: Camera, factor: float) -> Camera:
    """Camera for a rescaled image frame: multiplies s and t by factor."""
    s = torch.as_tensor(cam.s) * factor
    t = torch.as_tensor(cam.t) * factor
    return Camera(s=s, t=t, R=cam.R)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: out[c, h*r+i, w*r+j] = x[c*r^2 + i*r + j, h, w]."""
    if r < 1:
        raise ConfigError("pixel shuffle factor must be >= 1")
    t = torch.as_tensor(x)
    batched = t.dim() == 4
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4:
        raise DimensionError(f"pixel_shuffle expects (C, H, W) or (B, C, H, W), got {tuple(x.shape)}")
    if t.shape[1] % (r * r) != 0:
        raise DimensionError(f"channel count {t.shape[1]} not divisible by r^2 = {r * r}")
    out = F.pixel_shuffle(t, r)
    return out if batched else out.squeeze(0)


class _ShuffleUp(nn.Module):
    """conv3x3 to 4x channels followed by a x2 pixel shuffle."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, 4 * c_out, 3, 1, 1)

    def forward(self, x):
        return F.pixel_shuffle(F.relu(self.conv(x)), 2)


class Decoder(nn.Module):
    """Attention-based reconstruction decoder d.

    Branch 1: one stride-2 residual block on the mask-segmented depth/IR
    stack. Branch 2: encoder features through four conv + pixel-shuffle
    stages (x2 each, 7 -> 112). Both end at (width, 112, 112); the fusion
    trunk is a residual block, a pixel shuffle, and a final convolution
    producing the two uncovered 224x224 maps.
    """

    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        self.config = config or NetConfig()
        w = self.config.decoder_width
        feat = self.config.feature_channels
        self.branch_masked = ResidualBlock(2, w, stride=2)
        self.branch_feat = nn.Sequential(
            _ShuffleUp(feat, w), _ShuffleUp(w, w), _ShuffleUp(w, w), _ShuffleUp(w, w)
        )
        self.fuse = ResidualBlock(2 * w, w)
        w2 = max(w // 2, 4)
        self.up = nn.Conv2d(w, 4 * w2, 3, 1, 1)
        self.out_conv = nn.Conv2d(w2, 2, 3, 1, 1)

    def forward(self, masked: Tensor, feats: Tensor) -> Tensor:
        b1 = self.branch_masked(masked)        # (B, w, 112, 112)
        b2 = self.branch_feat(feats)           # (B, w, 112, 112)
        h = self.fuse(torch.cat([b1, b2], dim=1))
        h = F.pixel_shuffle(F.relu(self.up(h)), 2)  # (B, w2, 224, 224)
        return torch.sigmoid(self.out_conv(h))     # (B, 2, 224, 224)


def build_decoder(seed: int, config: NetConfig | None = None) -> Decoder:
    torch.manual_seed(seed)
    return Decoder(config)


def decoder_forward(d: Decoder, masked_depth, masked_ir, encoder_features) -> DecoderOutput:
    """Reconstruct uncovered depth and IR from the mask-segmented covered
    inputs plus the regressor's spatial features."""
    md = torch.as_tensor(masked_depth).to(torch.float32).reshape(1, IMAGE_SIZE, IMAGE_SIZE)
    mi = torch.as_tensor(masked_ir).to(torch.float32).reshape(1, IMAGE_SIZE, IMAGE_SIZE)
    feats = torch.as_tensor(encoder_features).to(torch.float32)
    if feats.dim() != 3:
        raise DimensionError(f"encoder features must be (C, h, w), got {tuple(feats.shape)}")
    stack = torch.stack([md, mi], dim=0).reshape(1, 2, IMAGE_SIZE, IMAGE_SIZE)
    out = d(stack, feats.unsqueeze(0))[0]
    return DecoderOutput(depth_uncovered=out[0:1], ir_uncovered=out[1:2])


def count_parameters(*modules: nn.Module) -> int:
    return sum(p.numel() for m in modules for p in m.parameters())
