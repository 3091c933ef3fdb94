# network.py
# Residual backbone, image-FPN, multi-scale projection, view pooling,
#   BEV-FPN and prediction heads

import math
import os
from dataclasses import dataclass, field
import torch
import torch.nn.functional as F
from torch import nn
from msmvd.config import MODEL_DEFAULTS
from msmvd.geometry import LEVELS, DEFAULT_HEIGHTS
from msmvd.lib.errors import ConfigError, ContractError, LoadError

CHECKPOINT_VERSION = 1

BACKBONES = {
    'resnet18' : {'stem' : 64, 'widths' : (64, 128, 256, 512), 'depths' : (2, 2, 2, 2), 'block' : 'basic'},
    'resnet34' : {'stem' : 64, 'widths' : (64, 128, 256, 512), 'depths' : (3, 4, 6, 3), 'block' : 'basic'},
    'resnet50' : {'stem' : 64, 'widths' : (64, 128, 256, 512), 'depths' : (3, 4, 6, 3), 'block' : 'bottleneck'},
    'resnet101' : {'stem' : 64, 'widths' : (64, 128, 256, 512), 'depths' : (3, 4, 23, 3), 'block' : 'bottleneck'},
    'small' : {'stem' : 16, 'widths' : (16, 32, 64, 128), 'depths' : (1, 1, 1, 1), 'block' : 'basic'},
}

@dataclass
class PyramidFeatures:
    space: str
    maps: dict

    def __getitem__(self, level: int) -> torch.Tensor:
        return self.maps[level]

    @property
    def levels(self) -> tuple:
        return tuple(sorted(self.maps))

    @property
    def shapes(self) -> dict:
        return {l : tuple(m.shape) for l, m in self.maps.items()}

@dataclass
class HeadOutputs:
    occupancy: dict
    offset: dict = None
    features: dict = field(default_factory = dict)

    @property
    def levels(self) -> tuple:
        return tuple(sorted(self.occupancy))

    def probabilities(self, level: int) -> torch.Tensor:
        return torch.sigmoid(self.occupancy[level])

def norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(32, channels), channels)

def conv3x3(cin: int, cout: int, stride: int = 1, bias: bool = False) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride = stride, padding = 1, bias = bias)

class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin: int, width: int, stride: int = 1):
        super().__init__()
        cout = width
        self.conv1 = conv3x3(cin, cout, stride)
        self.gn1 = norm(cout)
        self.conv2 = conv3x3(cout, cout)
        self.gn2 = norm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride = stride, bias = False), norm(cout))

    def forward(self, x):
        out = F.relu(self.gn1(self.conv1(x)))
        out = self.gn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)

class Bottleneck(nn.Module):
    """
    1x1 reduce, 3x3 (strided), 1x1 expand to 4 * width channels
    """
    expansion = 4

    def __init__(self, cin: int, width: int, stride: int = 1):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = nn.Conv2d(cin, width, 1, bias = False)
        self.gn1 = norm(width)
        self.conv2 = conv3x3(width, width, stride)
        self.gn2 = norm(width)
        self.conv3 = nn.Conv2d(width, cout, 1, bias = False)
        self.gn3 = norm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride = stride, bias = False), norm(cout))

    def forward(self, x):
        out = F.relu(self.gn1(self.conv1(x)))
        out = F.relu(self.gn2(self.conv2(out)))
        out = self.gn3(self.conv3(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)

BLOCKS = {'basic' : BasicBlock, 'bottleneck' : Bottleneck}

class Backbone(nn.Module):
    """
    Residual network with group normalization. Returns the outputs of the
        last three stages (strides 8, 16, 32) as levels 3, 4, 5; the
        stride-4 stage output is not used.
    """
    def __init__(self, variant: str = 'resnet18'):
        super().__init__()
        if variant not in BACKBONES:
            raise ConfigError(f'network.Backbone: unknown backbone {variant!r} (have {sorted(BACKBONES)})')
        arch = BACKBONES[variant]
        self.variant = variant
        self.conv1 = nn.Conv2d(3, arch['stem'], 7, stride = 2, padding = 3, bias = False)
        self.gn1 = norm(arch['stem'])
        self.maxpool = nn.MaxPool2d(3, stride = 2, padding = 1)
        block = BLOCKS[arch['block']]
        layers = []
        cin = arch['stem']
        for k, (width, depth) in enumerate(zip(arch['widths'], arch['depths'])):
            blocks = [block(cin, width, 1 if k == 0 else 2)]
            blocks += [block(width * block.expansion, width) for _ in range(depth - 1)]
            layers.append(nn.Sequential(*blocks))
            cin = width * block.expansion
        self.layer1, self.layer2, self.layer3, self.layer4 = layers
        self.channels = tuple(w * block.expansion for w in arch['widths'][1:])

    def forward(self, images: torch.Tensor) -> PyramidFeatures:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ContractError(f'network.Backbone: expected images of shape (N, 3, H, W), got {tuple(images.shape)}')
        h, w = images.shape[-2:]
        if h < 1 or w < 1 or h % 4 or w % 4:
            raise ConfigError(f'network.Backbone: image size {h}x{w} must be positive and divisible by 4')
        x = self.maxpool(F.relu(self.gn1(self.conv1(images))))
        x = self.layer1(x)
        f3 = self.layer2(x)
        f4 = self.layer3(f3)
        f5 = self.layer4(f4)
        return PyramidFeatures('image', {3 : f3, 4 : f4, 5 : f5})

def backbone_forward(backbone: Backbone, images: torch.Tensor) -> PyramidFeatures:
    return backbone(images)

class FuseBlock(nn.Module):
    """
    Concatenation fusion: 1x1 reduction of [x, other] followed by a residual refinement
    """
    def __init__(self, channels: int):
        super().__init__()
        self.reduce = nn.Conv2d(2 * channels, channels, 1)
        self.refine = nn.Sequential(conv3x3(channels, channels), norm(channels), nn.ReLU(inplace = True),
                                    conv3x3(channels, channels, bias = True))

    def forward(self, x, other):
        r = self.reduce(torch.cat([x, other], dim = 1))
        return r + self.refine(r)

class FeaturePyramid(nn.Module):
    """
    Lateral 1x1 projections to C channels, a top-down path and an optional
        bottom-up path, each fusing by concatenation. Used for both the
        image-space and the BEV-space pyramid; with `same_resolution` all
        levels share one spatial shape and the bottom-up path does not stride.
    """
    def __init__(self, in_channels: tuple, channels: int, *, bottom_up: bool = True, same_resolution: bool = False, levels = LEVELS):
        super().__init__()
        self.levels = tuple(levels)
        self.bottom_up = bottom_up
        self.lateral = nn.ModuleDict({str(l) : nn.Conv2d(c, channels, 1) for l, c in zip(self.levels, in_channels)})
        self.top_down = nn.ModuleDict({str(l) : FuseBlock(channels) for l in self.levels[:-1]})
        if bottom_up:
            stride = 1 if same_resolution else 2
            self.down = nn.ModuleDict({str(l) : conv3x3(channels, channels, stride, bias = True) for l in self.levels[1:]})
            self.bottom_up_fuse = nn.ModuleDict({str(l) : FuseBlock(channels) for l in self.levels[1:]})

    def forward(self, features: PyramidFeatures) -> PyramidFeatures:
        lateral = {l : self.lateral[str(l)](features[l]) for l in self.levels}
        td = {self.levels[-1] : lateral[self.levels[-1]]}
        for l in reversed(self.levels[:-1]):
            upper = F.interpolate(td[l + 1], size = lateral[l].shape[-2:], mode = 'nearest')
            td[l] = self.top_down[str(l)](lateral[l], upper)
        if not self.bottom_up:
            return PyramidFeatures(features.space, td)
        out = {self.levels[0] : td[self.levels[0]]}
        for l in self.levels[1:]:
            lower = self.down[str(l)](out[l - 1])
            if lower.shape[-2:] != td[l].shape[-2:]:
                raise ContractError(f'network.FeaturePyramid: level {l - 1} downsamples to {tuple(lower.shape[-2:])}, '
                                    f'level {l} has {tuple(td[l].shape[-2:])}')
            out[l] = self.bottom_up_fuse[str(l)](td[l], lower)
        return PyramidFeatures(features.space, out)

def _pyramid_forward(fpn: FeaturePyramid, features: PyramidFeatures, space: str) -> PyramidFeatures:
    if features.space != space:
        raise ContractError(f'network.{space}_fpn_forward: expected {space} features, got {features.space}')
    return fpn(features)

def image_fpn_forward(fpn: FeaturePyramid, features: PyramidFeatures) -> PyramidFeatures:
    return _pyramid_forward(fpn, features, 'image')

def bev_fpn_forward(fpn: FeaturePyramid, features: PyramidFeatures) -> PyramidFeatures:
    return _pyramid_forward(fpn, features, 'bev')

def sample_views(features: torch.Tensor, coords: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """
    Bilinear sampling of per-view feature maps (N, C, Hf, Wf) at BEV sampling
        grids coords (N, D, X, Y, 2) in feature pixels (u, v); masked and
        out-of-bounds cells are zero. Returns (N, D*C, X, Y), heights outermost.
    """
    n, c, hf, wf = features.shape
    _, d, x, y, _ = coords.shape
    coords = coords.to(features.dtype)
    scale = torch.tensor([2. / max(wf - 1, 1), 2. / max(hf - 1, 1)], dtype = features.dtype, device = features.device)
    normalized = (coords * scale - 1.).reshape(n, d * x, y, 2)
    sampled = F.grid_sample(features, normalized, mode = 'bilinear', padding_mode = 'zeros', align_corners = True)
    sampled = sampled.reshape(n, c, d, x, y) * mask.reshape(n, 1, d, x, y).to(features.dtype)
    return sampled.permute(0, 2, 1, 3, 4).reshape(n, d * c, x, y)

class MultiScaleProjection(nn.Module):
    """
    Projects each image-feature level into the BEV plane at every height and
        fuses the heights with a 1x1 convolution (shared over views, one per level)
    """
    def __init__(self, channels: int, levels = LEVELS, n_heights: int = len(DEFAULT_HEIGHTS)):
        super().__init__()
        self.levels = tuple(levels)
        self.n_heights = n_heights
        self.fuse = nn.ModuleDict({str(l) : nn.Conv2d(n_heights * channels, channels, 1) for l in self.levels})

    def forward(self, features: PyramidFeatures, grids: dict) -> PyramidFeatures:
        out = {}
        for l in self.levels:
            if l not in grids:
                raise ConfigError(f'network.MultiScaleProjection: no sampling grid for level {l}')
            coords, mask = grids[l]
            if coords.shape[0] != features[l].shape[0] or coords.shape[1] != self.n_heights:
                raise ContractError(f'network.MultiScaleProjection: level-{l} grids of shape {tuple(coords.shape)} '
                                    f'do not match {features[l].shape[0]} views x {self.n_heights} heights')
            out[l] = self.fuse[str(l)](sample_views(features[l], coords, mask))
        return PyramidFeatures('bev', out)

def msp_forward(msp: MultiScaleProjection, features: PyramidFeatures, grids: dict) -> PyramidFeatures:
    return msp(features, grids)

def pool_views(per_view: PyramidFeatures, mode: str = 'max') -> PyramidFeatures:
    """
    Reduce the view axis (dim 0) of every level to size 1
    """
    match mode:
        case 'max':
            pooled = {l : m.amax(dim = 0, keepdim = True) for l, m in per_view.maps.items()}
        case 'mean':
            pooled = {l : m.mean(dim = 0, keepdim = True) for l, m in per_view.maps.items()}
        case _:
            raise ConfigError(f'network.pool_views: pooling must be max or mean (got {mode!r})')
    return PyramidFeatures('bev', pooled)

class PredictionHead(nn.Module):
    def __init__(self, channels: int, out_channels: int, prior: float = None):
        super().__init__()
        self.body = nn.Sequential(conv3x3(channels, channels, bias = True), nn.ReLU(inplace = True),
                                  conv3x3(channels, channels, bias = True), nn.ReLU(inplace = True),
                                  conv3x3(channels, channels, bias = True), nn.ReLU(inplace = True))
        self.out = nn.Conv2d(channels, out_channels, 1)
        if prior is not None:
            nn.init.normal_(self.out.weight, std = 1e-3)
            nn.init.constant_(self.out.bias, math.log(prior / (1 - prior)))

    def forward(self, x):
        return self.out(self.body(x))

class Heads(nn.Module):
    def __init__(self, channels: int, levels, *, share: bool = True, use_offset: bool = True, prior: float = 0.01):
        super().__init__()
        self.levels = tuple(levels)
        self.share = share
        self.use_offset = use_offset
        keys = ['shared'] if share else [str(l) for l in self.levels]
        self.occupancy = nn.ModuleDict({k : PredictionHead(channels, 1, prior) for k in keys})
        self.offset = nn.ModuleDict({k : PredictionHead(channels, 2) for k in keys}) if use_offset else None

    def _key(self, level: int) -> str:
        return 'shared' if self.share else str(level)

    def forward(self, bev: PyramidFeatures) -> HeadOutputs:
        occupancy = {l : self.occupancy[self._key(l)](bev[l]) for l in self.levels}
        offset = None
        if self.use_offset:
            offset = {l : self.offset[self._key(l)](bev[l]) for l in self.levels}
        return HeadOutputs(occupancy, offset)

def heads_forward(heads: Heads, bev: PyramidFeatures) -> HeadOutputs:
    return heads(bev)

class MSMVD(nn.Module):
    """
    Multi-view detector over one frame of N views.

    mode:
        full      multi-scale projection + BEV-FPN + heads at levels 3, 4, 5
        msp_only  multi-scale projection + heads, no BEV-FPN
        baseline  projects the level-5 image feature onto the level-3 BEV
                  grid, one head at level 3
    """
    def __init__(self, *, backbone: str = 'resnet18', channels: int = 256, mode: str = 'full', pooling: str = 'max',
                 image_bottom_up: bool = True, bev_bottom_up: bool = True, share_heads: bool = True,
                 use_offset: bool = True, shared_bev_resolution: bool = False, head_prior: float = 0.01,
                 n_heights: int = len(DEFAULT_HEIGHTS)):
        super().__init__()
        if mode not in ('full', 'msp_only', 'baseline'):
            raise ConfigError(f'network.MSMVD: mode must be full, msp_only or baseline (got {mode!r})')
        if pooling not in ('max', 'mean'):
            raise ConfigError(f'network.MSMVD: pooling must be max or mean (got {pooling!r})')
        self.mode = mode
        self.pooling = pooling
        self.use_offset = use_offset
        self.backbone = Backbone(backbone)
        self.image_fpn = FeaturePyramid(self.backbone.channels, channels, bottom_up = image_bottom_up)
        if mode == 'baseline':
            self.projection_levels = (5,)
            self.output_levels = (3,)
            self.shared_bev_resolution = True
        else:
            self.projection_levels = LEVELS
            self.output_levels = LEVELS
            self.shared_bev_resolution = shared_bev_resolution
        self.msp = MultiScaleProjection(channels, self.projection_levels, n_heights)
        self.bev_fpn = None
        if mode == 'full':
            self.bev_fpn = FeaturePyramid((channels,) * 3, channels, bottom_up = bev_bottom_up,
                                          same_resolution = shared_bev_resolution)
        self.heads = Heads(channels, self.output_levels, share = share_heads, use_offset = use_offset, prior = head_prior)

    def forward(self, images: torch.Tensor, grids: dict, *, return_features: bool = False) -> HeadOutputs:
        raw = self.backbone(images)
        image = image_fpn_forward(self.image_fpn, raw)
        image = PyramidFeatures('image', {l : image[l] for l in self.projection_levels})
        views = self.msp(image, grids)
        bev = pool_views(views, self.pooling)
        if self.mode == 'baseline':
            bev = PyramidFeatures('bev', {3 : bev[5]})
        fused = bev if self.bev_fpn is None else bev_fpn_forward(self.bev_fpn, bev)
        outputs = self.heads(fused)
        if return_features:
            outputs.features = {'raw' : raw, 'image' : image, 'views' : views, 'bev' : bev, 'fused' : fused}
        return outputs

def build_model(model_cfg: dict = None, n_heights: int = len(DEFAULT_HEIGHTS)) -> MSMVD:
    cfg = dict(MODEL_DEFAULTS)
    if model_cfg:
        unknown = sorted(set(model_cfg) - set(MODEL_DEFAULTS))
        if unknown:
            raise ConfigError(f'network.build_model: unknown model options {unknown}')
        cfg.update(model_cfg)
    return MSMVD(n_heights = n_heights, **cfg)

def grids_to_torch(stacked: dict, device = None) -> dict:
    """
    datasets.stack_grids output -> tensors
    """
    return {l : (torch.as_tensor(c, device = device), torch.as_tensor(m, device = device)) for l, (c, m) in stacked.items()}

def load_backbone_weights(model: MSMVD, path: str | os.PathLike) -> tuple[list, list]:
    """
    Load a backbone state dict (keys with or without a 'backbone.' prefix).
    Returns (missing, unexpected) key lists; raises if no key matched.
    """
    if not os.path.exists(path):
        raise LoadError(f'network.load_backbone_weights: weights file {path} not found')
    state = torch.load(path, map_location = 'cpu', weights_only = True)
    if 'state_dict' in state:
        state = state['state_dict']
    state = {k[len('backbone.'):] if k.startswith('backbone.') else k : v for k, v in state.items()}
    own = model.backbone.state_dict()
    usable = {k : v for k, v in state.items() if k in own and own[k].shape == v.shape}
    if not usable:
        raise LoadError(f'network.load_backbone_weights: no parameter in {path} matches the {model.backbone.variant} backbone')
    result = model.backbone.load_state_dict(usable, strict = False)
    return list(result.missing_keys), sorted(set(state) - set(usable))

def save_checkpoint(path: str | os.PathLike, model: MSMVD, model_cfg: dict, grid_dict: dict, config_hash: str, **extra):
    payload = {
        'format_version' : CHECKPOINT_VERSION,
        'state_dict' : {k : v.detach().cpu() for k, v in model.state_dict().items()},
        'model' : dict(model_cfg),
        'grid' : grid_dict,
        'config_hash' : config_hash,
        **extra,
    }
    torch.save(payload, path)

def load_checkpoint(path: str | os.PathLike, device = 'cpu') -> tuple[MSMVD, dict]:
    if not os.path.exists(path):
        raise LoadError(f'network.load_checkpoint: checkpoint {path} not found')
    try:
        payload = torch.load(path, map_location = device, weights_only = False)
    except Exception as e:
        raise LoadError(f'network.load_checkpoint: cannot read {path} ({e})') from e
    if payload.get('format_version') != CHECKPOINT_VERSION:
        raise LoadError(f'network.load_checkpoint: {path} has format version {payload.get("format_version")}, expected {CHECKPOINT_VERSION}')
    n_heights = len(payload['grid']['heights']) if payload.get('grid') else len(DEFAULT_HEIGHTS)
    model = build_model(payload['model'], n_heights)
    model.load_state_dict(payload['state_dict'])
    return model.to(device), payload
