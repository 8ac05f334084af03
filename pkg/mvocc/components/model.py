"""
Multi-view occupancy network: U-Net image encoder, geometry-aware point
features, mean / variance view aggregation and a conditioned occupancy decoder
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import EPS_DEPTH, ModelConfig
from .diffcore import Conv2d, CondNorm, Linear, ResidualBlock, bilinear_sample, binary_cross_entropy, global_avg_pool
from .errors import EmptyViewSet, PointBehindCamera, ShapeMismatch
from .geometry import camera_center, canonicalize, project, project_points, world_to_camera

logger = logging.getLogger(__name__)

MAX_ENCODER_CHANNELS = 256


@dataclass
class SampleBatch:
    """Model input: B samples with V views each and N query points each

    images: (B, V, H, W, 3) floats in [0, 1]
    rigs: B lists of V CameraRig
    points: (B, N, 3) world-frame query points
    labels: optional (B, N) occupancy in {0, 1}
    """
    images: np.ndarray
    rigs: list
    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.images.ndim != 5 or self.images.shape[-1] != 3:
            raise ShapeMismatch(f'images must be (B, V, H, W, 3), got {self.images.shape}')
        if self.points.ndim != 3 or self.points.shape[-1] != 3:
            raise ShapeMismatch(f'points must be (B, N, 3), got {self.points.shape}')
        if len(self.rigs) != self.images.shape[0] or any(len(r) != self.images.shape[1] for r in self.rigs):
            raise ShapeMismatch('one rig per view is required')
        if self.labels is not None and np.shape(self.labels) != self.points.shape[:2]:
            raise ShapeMismatch(f'labels {np.shape(self.labels)} vs points {self.points.shape[:2]}')


class UNetEncoder(nn.Module):
    """Contracting stride-2 conv stages, nearest upsampling with skip concatenation,
    1x1 head to feature_channels at full input resolution"""

    def __init__(self, feature_channels, depth=3, base=32):
        super().__init__()
        widths = [min(base * 2 ** level, MAX_ENCODER_CHANNELS) for level in range(depth + 1)]
        self.stem = Conv2d(3, widths[0])
        self.down = nn.ModuleList(
            nn.ModuleList([Conv2d(widths[level], widths[level + 1], stride=2),
                           Conv2d(widths[level + 1], widths[level + 1])])
            for level in range(depth)
        )
        self.up = nn.ModuleList(
            Conv2d(widths[level + 1] + widths[level], widths[level])
            for level in reversed(range(depth))
        )
        self.head = Conv2d(widths[0], feature_channels, kernel_size=1)

    def forward(self, x):
        x = F.relu(self.stem(x))
        skips = [x]
        for stride_conv, conv in self.down:
            x = F.relu(stride_conv(x))
            x = F.relu(conv(x))
            skips.append(x)
        skips.pop()
        for conv in self.up:
            x = F.interpolate(x, scale_factor=2, mode='nearest')
            x = F.relu(conv(torch.cat([x, skips.pop()], dim=1)))
        return self.head(x)


def point_feature(feature_map, p, rig, image_size=None, mask_behind=False):
    """Sample one view's feature map at the projection of world point(s) p

    With mask_behind=True, points behind the camera are sampled at texel (0, 0)
    and the call returns (c, in_front) instead of raising.

    Raises:
        PointBehindCamera: propagated from projection when mask_behind is False
    """
    points = np.atleast_2d(p)
    if mask_behind:
        uv, depth = project_points(points, rig)
        in_front = depth > EPS_DEPTH
    else:
        u, v, _ = project(points, rig)
        uv = np.stack([u, v], axis=-1)
    if image_size is not None and image_size != rig.intrinsics.width:
        uv = (uv + 0.5) * (image_size / rig.intrinsics.width) - 0.5
    if mask_behind:
        uv = np.where(in_front[:, None], uv, 0.0)
    c = bilinear_sample(feature_map, torch.as_tensor(uv, dtype=feature_map.dtype))
    if np.ndim(p) == 1:
        c = c[0]
    return (c, in_front) if mask_behind else c


def aggregate(gs, valid=None, mode='elementwise', dim=0):
    """Mean and dispersion of per-view features

    Args:
        gs: tensor with views along `dim`, or a list of per-view tensors
        valid: optional boolean tensor, gs.shape without the feature axis;
            invalid views are left out of both statistics
        mode: 'elementwise' (per-feature variance) or 'l2' (mean feature distance, width 1)

    Returns:
        tuple: (g_mean, g_var) with the view axis reduced
    """
    if isinstance(gs, (list, tuple)):
        if not gs:
            raise EmptyViewSet('aggregate needs at least one view')
        gs = torch.stack(list(gs), dim=dim)
    if gs.shape[dim] == 0:
        raise EmptyViewSet('aggregate needs at least one view')
    if valid is None:
        weights = torch.ones(gs.shape[:-1] + (1,), dtype=gs.dtype, device=gs.device)
    else:
        weights = valid.to(gs.dtype).unsqueeze(-1)
    count = weights.sum(dim=dim)
    if torch.any(count == 0):
        raise EmptyViewSet(f'{int((count == 0).sum())} point(s) are not in front of any view')
    g_mean = (weights * gs).sum(dim=dim) / count
    deviation = gs - g_mean.unsqueeze(dim)
    if mode == 'l2':
        distance = torch.sqrt((deviation ** 2).sum(dim=-1, keepdim=True) + 1e-12)
        # exact zero for a lone view
        distance = torch.where(deviation.abs().sum(dim=-1, keepdim=True) == 0, torch.zeros_like(distance), distance)
        g_var = (weights * distance).sum(dim=dim) / count
    else:
        g_var = (weights * deviation ** 2).sum(dim=dim) / count
    return g_mean, g_var


def global_feature(feature_maps):
    """Average over all spatial positions of all views: (V, F, H, W) -> (F,), (B, V, F, H, W) -> (B, F)"""
    if isinstance(feature_maps, (list, tuple)):
        if not feature_maps:
            raise EmptyViewSet('global_feature needs at least one view')
        feature_maps = torch.stack(list(feature_maps))
    if feature_maps.dim() == 3:
        feature_maps = feature_maps.unsqueeze(0)
    if feature_maps.shape[-4] == 0:
        raise EmptyViewSet('global_feature needs at least one view')
    return global_avg_pool(feature_maps).mean(dim=-2)


def occupancy_loss(probabilities, labels):
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]"""
    return binary_cross_entropy(probabilities, labels)


class MultiViewOccupancyNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        errors = config.validate()
        if errors:
            raise ShapeMismatch('; '.join(errors))
        self.config = config
        width = config.feature_channels
        self.encoder = UNetEncoder(width, config.encoder_depth, config.encoder_base)

        geo_in = width + (3 if config.variant == 'P' else 6)
        self.geo_lift = Linear(geo_in, config.hidden)
        self.geo_blocks = nn.ModuleList(ResidualBlock(config.hidden) for _ in range(config.g_blocks))

        cond_dim = None
        if config.variant == 'PCV':
            cond_dim = 1 if config.variance_mode == 'l2' else config.hidden
        self.decoder_blocks = nn.ModuleList(
            ResidualBlock(config.hidden, cond_dim=cond_dim, normalize=True, norm_mode=config.norm_mode)
            for _ in range(config.f_blocks)
        )
        self.out_norm = CondNorm(config.hidden, cond_dim, config.norm_mode)
        self.out_fc = Linear(config.hidden, 1)

    @property
    def dtype(self):
        return self.out_fc.weight.dtype

    def encode(self, images):
        """(M, H, W, 3) images in [0, 1] -> (M, F, S, S) feature maps, S = image_size"""
        x = torch.as_tensor(np.asarray(images), dtype=self.dtype).permute(0, 3, 1, 2)
        size = self.config.image_size
        if x.shape[-2:] != (size, size):
            x = F.interpolate(x, size=(size, size), mode='bilinear', align_corners=False)
        return self.encoder(x - 0.5)

    def encode_views(self, images):
        """(B, V, H, W, 3) -> (B, V, F, S, S)"""
        images = np.asarray(images)
        batch, views = images.shape[:2]
        maps = self.encode(images.reshape(batch * views, *images.shape[2:]))
        return maps.reshape(batch, views, *maps.shape[1:])

    def prepare_geometry(self, rigs, points):
        """Canonicalize every sample and gather per-view camera-frame geometry

        Returns:
            dict: canonical [(rigs, points)] per sample in float64 numpy, plus tensors
            p_cam (B, V, N, 3), centers (B, V, 3), p_frame (B, N, 3), valid (B, V, N)
        """
        canonical, cam_all, center_all, frame_all = [], [], [], []
        for sample_rigs, sample_points in zip(rigs, points):
            canon_rigs, canon_points = canonicalize(sample_rigs, sample_points, self.config.coordinate_mode)
            canonical.append((canon_rigs, canon_points))
            cam_all.append([world_to_camera(canon_points, rig.extrinsics) for rig in canon_rigs])
            center_all.append([camera_center(rig.extrinsics) for rig in canon_rigs])
            frame_all.append(canon_points)

        p_cam = np.asarray(cam_all)
        valid = p_cam[..., 2] > EPS_DEPTH
        if valid.shape[1] == 1 and not valid.all():
            raise PointBehindCamera(f'{int((~valid).sum())} query point(s) behind the only view')
        as_tensor = lambda a: torch.as_tensor(np.asarray(a), dtype=self.dtype)
        return {
            'canonical': canonical,
            'p_cam': as_tensor(p_cam),
            'centers': as_tensor(center_all),
            'p_frame': as_tensor(frame_all),
            'valid': torch.as_tensor(valid),
        }

    def point_features(self, maps, canonical):
        """maps (B, V, F, S, S) -> c (B, V, N, F) sampled at each view's projection"""
        batch, views = maps.shape[:2]
        if self.config.feature_extent == 'global':
            pooled = global_avg_pool(maps)
            n = len(canonical[0][1])
            return pooled.unsqueeze(2).expand(batch, views, n, pooled.shape[-1])
        size = self.config.image_size
        return torch.stack([
            torch.stack([point_feature(maps[b, v], points, rig, size, mask_behind=True)[0]
                         for v, rig in enumerate(rigs)])
            for b, (rigs, points) in enumerate(canonical)
        ])

    def geo_feature(self, c, p_cam, centers, p_frame):
        """g = g_theta([c, p]) for variant P, g_theta([c, p_cam, camera_center]) otherwise"""
        batch, views, n = c.shape[:3]
        if self.config.variant == 'P':
            x = torch.cat([c, p_frame.unsqueeze(1).expand(batch, views, n, 3)], dim=-1)
        else:
            x = torch.cat([c, p_cam, centers.unsqueeze(2).expand(batch, views, n, 3)], dim=-1)
        g = self.geo_lift(x)
        for block in self.geo_blocks:
            g = block(g)
        return g

    def predict_occupancy(self, g_mean, g_var, c_global):
        """f(g_mean + c_global, g_var) -> probabilities (B, N)"""
        x = g_mean + c_global.unsqueeze(-2)
        condition = g_var if self.config.variant == 'PCV' else None
        for block in self.decoder_blocks:
            x = block(x, condition)
        logits = self.out_fc(F.relu(self.out_norm(x, condition))).squeeze(-1)
        return torch.sigmoid(logits)

    def decode(self, maps, rigs, points):
        """Occupancy probabilities for query points given already-encoded views

        Args:
            maps: (B, V, F, S, S) encoder output
            rigs: B lists of V rigs in the world frame
            points: (B, N, 3) world-frame query points
        """
        geom = self.prepare_geometry(rigs, np.asarray(points, dtype=np.float64))
        c = self.point_features(maps, geom['canonical'])
        g = self.geo_feature(c, geom['p_cam'], geom['centers'], geom['p_frame'])
        g_mean, g_var = aggregate(g, geom['valid'], mode=self.config.variance_mode, dim=1)
        return self.predict_occupancy(g_mean, g_var, global_feature(maps))

    def forward(self, batch: SampleBatch):
        return self.decode(self.encode_views(batch.images), batch.rigs, batch.points)


def build_model(config: ModelConfig):
    model = MultiViewOccupancyNet(config)
    if config.dtype == 'float64':
        model = model.double()
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f'Built {config.variant} model ({config.coordinate_mode}-centric), {n_params:,} parameters')
    return model


class ModelField:
    """Point -> probability callable over one sample's views, for grid evaluation"""

    def __init__(self, model, images, rigs):
        self.model = model
        self.rigs = list(rigs)
        with torch.no_grad():
            self.maps = model.encode_views(np.asarray(images)[None])

    def __call__(self, points):
        with torch.no_grad():
            probs = self.model.decode(self.maps, [self.rigs], np.asarray(points)[None])
        return probs[0].cpu().numpy().astype(np.float64)
