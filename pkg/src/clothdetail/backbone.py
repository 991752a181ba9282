"""Frozen VGG19 convolutional backbone and masked Gram signatures.

The backbone is never trained here: weights are ingested from a standard
state-dict file (`backbone.weights` in the config). When no pretrained file
is available, `init_reference_weights` writes a reproducible He-initialized
stand-in so the full pipeline stays runnable and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .embedding import laplacian_eigenmaps, separation_score
from .errors import ConfigError, DataError, EmptyContentError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# torchvision vgg19.features layout: name -> index of the module whose
# output the name denotes.
_VGG19_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
              512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]

LAYER_TABLE: dict[str, int] = {}
LAYER_CHANNELS: dict[str, int] = {}
LAYER_FACTOR: dict[str, int] = {}


def _build_tables() -> None:
    idx = 0
    block, conv_in_block = 1, 0
    factor = 1
    for item in _VGG19_CFG:
        if item == "M":
            LAYER_TABLE[f"pool{block}"] = idx
            factor *= 2
            LAYER_FACTOR[f"pool{block}"] = factor
            LAYER_CHANNELS[f"pool{block}"] = LAYER_CHANNELS[f"conv{block}_1"]
            idx += 1
            block += 1
            conv_in_block = 0
        else:
            conv_in_block += 1
            name = f"{block}_{conv_in_block}"
            LAYER_TABLE[f"conv{name}"] = idx
            LAYER_FACTOR[f"conv{name}"] = factor
            LAYER_CHANNELS[f"conv{name}"] = item
            idx += 1
            LAYER_TABLE[f"relu{name}"] = idx
            LAYER_FACTOR[f"relu{name}"] = factor
            LAYER_CHANNELS[f"relu{name}"] = item
            idx += 1


_build_tables()

DEFAULT_CONTENT_LAYERS = ("relu4_1",)
DEFAULT_STYLE_LAYERS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1")


def _make_features() -> nn.Sequential:
    layers: list[nn.Module] = []
    channels = 3
    for item in _VGG19_CFG:
        if item == "M":
            layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
        else:
            layers.append(nn.Conv2d(channels, item, kernel_size=3, padding=1))
            layers.append(nn.ReLU(inplace=False))
            channels = item
    return nn.Sequential(*layers)


def layer_index(name: str) -> int:
    try:
        return LAYER_TABLE[name]
    except KeyError:
        raise ConfigError(f"unknown backbone layer {name!r}") from None


def layer_spatial_factor(name: str) -> int:
    layer_index(name)
    return LAYER_FACTOR[name]


def init_reference_weights(path: Path | str, seed: int = 0) -> Path:
    """Write a deterministic He-initialized VGG19 feature state dict.

    Stand-in for the published classification weights; any torchvision
    vgg19 state dict file can be dropped in instead.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gen = torch.Generator().manual_seed(seed)
    net = _make_features()
    state = {}
    for key, tensor in net.state_dict().items():
        if key.endswith("weight"):
            fan_in = tensor.shape[1] * tensor.shape[2] * tensor.shape[3]
            std = (2.0 / fan_in) ** 0.5
            state[key] = torch.randn(tensor.shape, generator=gen, dtype=torch.float32) * std
        else:
            state[key] = torch.zeros_like(tensor)
    torch.save(state, path)
    return path


@dataclass
class FeatureStack:
    """Per-layer activations of one image, H_l x W_l x C_l each."""

    layers: dict[str, np.ndarray]
    provenance: str = ""


@dataclass
class GramSignature:
    """Masked channel-correlation matrices per style layer."""

    grams: dict[str, np.ndarray]          # layer -> (C, C) float64
    valid_pixel_counts: dict[str, int]    # layer -> R_l

    def flattened(self, layer: str) -> np.ndarray:
        try:
            return self.grams[layer].reshape(-1)
        except KeyError:
            raise ConfigError(f"signature has no layer {layer!r}") from None


class FeatureBackbone:
    """Frozen feature extractor over the VGG19 convolutional stack."""

    def __init__(self, weights_path: Path | str, device: str = "cpu"):
        weights_path = Path(weights_path)
        if not weights_path.exists():
            raise ConfigError(f"backbone weights file not found: {weights_path}")
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        state = {
            k.removeprefix("features."): v
            for k, v in state.items()
            if not k.startswith("classifier.")
        }
        net = _make_features()
        try:
            net.load_state_dict(state)
        except RuntimeError as exc:
            raise ConfigError(f"cannot load backbone weights: {exc}") from exc
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self.net = net.to(device)
        self.device = device
        mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
        self._mean = mean.to(device)
        self._std = std.to(device)

    def features(self, rgb: torch.Tensor, layers) -> dict[str, torch.Tensor]:
        """Differentiable forward pass; `rgb` is (B, 3, H, W) in [0, 1].

        The stack is truncated after the deepest requested layer.
        """
        wanted = {layer_index(name): name for name in layers}
        if not wanted:
            raise ConfigError("no layers requested")
        deepest = max(wanted)
        x = (rgb - self._mean) / self._std
        out: dict[str, torch.Tensor] = {}
        for idx, module in enumerate(self.net):
            x = module(x)
            if idx in wanted:
                out[wanted[idx]] = x
            if idx == deepest:
                break
        return out

    def extract_features(self, image: np.ndarray, layers) -> FeatureStack:
        """Inference-mode activations for one RGB-encoded image (H, W, 3)."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise DataError(f"expected (H, W, 3) image, got {image.shape}")
        with torch.inference_mode():
            tensor = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
            tensor = tensor.permute(2, 0, 1).unsqueeze(0).to(self.device)
            feats = self.features(tensor, layers)
        arrays = {
            name: t.squeeze(0).permute(1, 2, 0).cpu().numpy() for name, t in feats.items()
        }
        return FeatureStack(layers=arrays)


def downsample_mask(mask: np.ndarray, layer: str) -> np.ndarray:
    """Mask at a layer's resolution: a cell is valid when at least half of
    its receptive block is masked."""
    factor = layer_spatial_factor(layer)
    mask = np.asarray(mask, dtype=bool)
    if factor == 1:
        return mask.copy()
    h, w = mask.shape
    if h % factor or w % factor:
        raise DataError(f"mask {h}x{w} not divisible by layer factor {factor}")
    blocks = mask.reshape(h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(1, 3)) >= 0.5


def downsample_mask_t(mask: torch.Tensor, layer: str) -> torch.Tensor:
    """Torch batch variant of `downsample_mask`; mask is (B, 1, H, W) float."""
    factor = layer_spatial_factor(layer)
    if factor == 1:
        return (mask >= 0.5).float()
    pooled = torch.nn.functional.avg_pool2d(mask, factor)
    return (pooled >= 0.5).float()


def masked_grams_t(
    feats: dict[str, torch.Tensor], mask: torch.Tensor, layers
) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    """Batched masked Grams: G = (B m F)^T (B m F), rows zeroed off-mask.

    Returns ({layer: (B, C, C)}, {layer: (B,) valid-pixel counts}).
    """
    grams: dict[str, torch.Tensor] = {}
    counts: dict[str, torch.Tensor] = {}
    for name in layers:
        f = feats[name]
        b, c, h, w = f.shape
        m = downsample_mask_t(mask, name)
        counts[name] = m.sum(dim=(1, 2, 3))
        fm = (f * m).reshape(b, c, h * w)
        grams[name] = fm @ fm.transpose(1, 2)
    return grams, counts


def gram_masked(
    backbone: FeatureBackbone,
    image: np.ndarray,
    mask: np.ndarray,
    layers=DEFAULT_STYLE_LAYERS,
) -> GramSignature:
    """Masked Gram signature of one RGB-encoded image.

    Raises EmptyContentError when any requested layer has no valid pixels.
    """
    stack = backbone.extract_features(image, layers)
    return gram_from_stack(stack, mask, layers)


def gram_from_stack(stack: FeatureStack, mask: np.ndarray, layers) -> GramSignature:
    grams: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for name in layers:
        if name not in stack.layers:
            raise ConfigError(f"feature stack is missing layer {name!r}")
        feats = stack.layers[name].astype(np.float64)
        h, w, c = feats.shape
        m = downsample_mask(mask, name)
        r = int(m.sum())
        if r == 0:
            raise EmptyContentError(f"no valid pixels at layer {name}")
        rows = feats.reshape(h * w, c) * m.reshape(h * w, 1)
        grams[name] = rows.T @ rows
        counts[name] = r
    return GramSignature(grams=grams, valid_pixel_counts=counts)


def layer_separation_diagnostic(
    set_a: list[GramSignature],
    set_b: list[GramSignature],
    layer: str,
    k: int = 10,
) -> float:
    """How well two Gram populations separate at one layer, in [-1, 1].

    Flattens the Grams, embeds the pooled set into the plane with Laplacian
    eigenmaps, and scores the two-cluster labeling by its silhouette.
    """
    if len(set_a) < 2 or len(set_b) < 2:
        raise DataError("need at least 2 signatures per set")
    vectors = np.stack(
        [sig.flattened(layer) for sig in set_a] + [sig.flattened(layer) for sig in set_b]
    )
    labels = np.array([0] * len(set_a) + [1] * len(set_b))
    embedded = laplacian_eigenmaps(vectors, dim=2, k=k)
    return separation_score(embedded, labels)
