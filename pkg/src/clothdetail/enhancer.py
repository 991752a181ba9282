"""Detail enhancement network: residual U-net with per-material CIN.

The encoder (conv/IN/relu/maxpool x4) squeezes a 128x128 patch to an
8x8x256 latent; the decoder mirrors it with transposed convolutions, each
followed by conditional instance normalization whose scale/shift banks are
selected by the material label. Skip connections feed every encoder level
to its mirrored decoder level and the network output is a residual on the
input encoding.

Training matches coarse->fine patch pairs with a content loss on backbone
features plus a masked Gram style loss against per-material exemplar pools.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import (
    DEFAULT_CONTENT_LAYERS,
    DEFAULT_STYLE_LAYERS,
    FeatureBackbone,
    GramSignature,
    downsample_mask,
    gram_masked,
    masked_grams_t,
)
from .errors import DataError, EmptyContentError, NumericalError, ParameterError
from .materials import DEFAULT_MATERIALS, MaterialLabel
from .normal_maps import NormalMapFrame, resize_normal_map
from .patches import (
    PATCH_SIZE,
    Patch,
    augment,
    merge_patches,
    random_crop_pairs,
    regular_grid_crops,
)

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-5


class ConditionalInstanceNorm(nn.Module):
    """Instance normalization with material-indexed scale/shift banks."""

    def __init__(self, num_materials: int, channels: int):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(num_materials, channels))
        self.shift = nn.Parameter(torch.zeros(num_materials, channels))

    def forward(self, x: torch.Tensor, material) -> torch.Tensor:
        mu = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
        sigma = torch.sqrt(var + 1e-12).clamp(min=SIGMA_FLOOR)
        normalized = (x - mu) / sigma
        if material.dtype in (torch.int32, torch.int64):
            gamma = self.scale[material]
            eps = self.shift[material]
        else:  # soft condition: probability-weighted bank mix
            gamma = material @ self.scale
            eps = material @ self.shift
        return gamma[:, :, None, None] * normalized + eps[:, :, None, None]


def cin(x: torch.Tensor, gamma: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    """Functional CIN on one activation map (C, H, W) with per-channel
    gamma/shift vectors; population statistics, sigma floored."""
    mu = x.mean(dim=(1, 2), keepdim=True)
    var = x.var(dim=(1, 2), unbiased=False, keepdim=True)
    sigma = torch.sqrt(var + 1e-12).clamp(min=SIGMA_FLOOR)
    return gamma[:, None, None] * (x - mu) / sigma + shift[:, None, None]


class _EncoderBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = nn.InstanceNorm2d(c_out, affine=False)
        self.act = nn.ReLU()
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        skip = self.act(self.norm(self.conv(x)))
        return self.pool(skip), skip


class _DecoderBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, num_materials: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1)
        self.cin = ConditionalInstanceNorm(num_materials, c_out)
        self.act = nn.ReLU()

    def forward(self, x, material):
        return self.act(self.cin(self.up(x), material))


class EnhancerNet(nn.Module):
    """4-level residual U-net, 128^2 -> 8^2 -> 128^2."""

    def __init__(self, num_materials: int = len(DEFAULT_MATERIALS), base_width: int = 32):
        super().__init__()
        w = base_width
        widths = [w, 2 * w, 4 * w, 8 * w]
        self.num_materials = num_materials
        self.base_width = base_width
        self.enc1 = _EncoderBlock(3, widths[0])
        self.enc2 = _EncoderBlock(widths[0], widths[1])
        self.enc3 = _EncoderBlock(widths[1], widths[2])
        self.enc4 = _EncoderBlock(widths[2], widths[3])
        self.dec1 = _DecoderBlock(widths[3], widths[3], num_materials)
        self.dec2 = _DecoderBlock(widths[3] * 2, widths[2], num_materials)
        self.dec3 = _DecoderBlock(widths[2] * 2, widths[1], num_materials)
        self.dec4 = _DecoderBlock(widths[1] * 2, widths[0], num_materials)
        self.final = nn.Conv2d(widths[0] * 2, 3, 3, padding=1)
        nn.init.zeros_(self.final.weight)   # residual identity at init
        nn.init.zeros_(self.final.bias)

    def forward(self, rgb: torch.Tensor, material) -> torch.Tensor:
        """Residual in RGB encoding; `material` is (B,) long or (B, M) soft."""
        x, s1 = self.enc1(rgb)
        x, s2 = self.enc2(x)
        x, s3 = self.enc3(x)
        x, s4 = self.enc4(x)
        x = self.dec1(x, material)
        x = self.dec2(torch.cat([x, s4], dim=1), material)
        x = self.dec3(torch.cat([x, s3], dim=1), material)
        x = self.dec4(torch.cat([x, s2], dim=1), material)
        return self.final(torch.cat([x, s1], dim=1))


def apply_residual(
    signed_in: torch.Tensor, residual: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Post-process the network output into a valid normal patch.

    signed_in: (B, 3, H, W) signed input normals; residual in RGB units
    (added as 2r in signed space), components clamped, renormalized under
    the mask, background reset to the zero vector.
    """
    raw = (signed_in + 2.0 * residual).clamp(-1.0, 1.0)
    norm = raw.pow(2).sum(dim=1, keepdim=True).clamp(min=1e-24).sqrt()
    unit = raw / norm
    return torch.where(mask > 0.5, unit, torch.zeros_like(unit))


def patch_to_tensors(patch: Patch, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """(signed normals (1, 3, S, S), mask (1, 1, S, S)) tensors."""
    signed = torch.from_numpy(np.ascontiguousarray(patch.normals)).permute(2, 0, 1)[None]
    mask = torch.from_numpy(patch.mask.astype(np.float32))[None, None]
    return signed.to(dtype), mask.to(dtype)


def tensor_to_patch(signed: torch.Tensor, like: Patch) -> Patch:
    arr = signed[0].permute(1, 2, 0).detach().cpu().numpy().astype(np.float32)
    return Patch(
        normals=arr, mask=like.mask.copy(), origin=like.origin, source_scale=like.source_scale
    )


def signed_to_rgb(signed: torch.Tensor) -> torch.Tensor:
    return (signed + 1.0) * 0.5


def enhance_patch(net: EnhancerNet, patch: Patch, material: MaterialLabel) -> Patch:
    """Forward one patch through the enhancer."""
    net.eval()
    with torch.no_grad():
        signed, mask = patch_to_tensors(patch)
        idx = torch.tensor([material.index], dtype=torch.int64)
        # background is already the zero vector, i.e. neutral 0.5 gray in RGB
        residual = net(signed_to_rgb(signed), idx)
        out = apply_residual(signed, residual, mask)
    return tensor_to_patch(out, patch)


def enhance_frame(
    net: EnhancerNet,
    frame: NormalMapFrame,
    material: MaterialLabel,
    canonical_ppm: float,
    stride: int = 64,
    patch_size: int = PATCH_SIZE,
    batch_size: int = 8,
) -> NormalMapFrame:
    """Enhance a whole map: resize to the canonical pixel scale, run the
    overlapping patch grid, and average-merge the outputs."""
    work = resize_normal_map(frame, canonical_ppm)
    crops = regular_grid_crops(work, stride, patch_size)
    net.eval()
    out_patches: list[Patch] = []
    idx_template = torch.tensor([material.index], dtype=torch.int64)
    with torch.no_grad():
        for start in range(0, len(crops), batch_size):
            block = crops[start : start + batch_size]
            signed = torch.stack(
                [torch.from_numpy(np.ascontiguousarray(p.normals)).permute(2, 0, 1) for p in block]
            )
            mask = torch.stack(
                [torch.from_numpy(p.mask.astype(np.float32))[None] for p in block]
            )
            idx = idx_template.expand(len(block))
            residual = net(signed_to_rgb(signed), idx)
            out = apply_residual(signed, residual, mask)
            for i, patch in enumerate(block):
                arr = out[i].permute(1, 2, 0).cpu().numpy().astype(np.float32)
                out_patches.append(
                    Patch(arr, patch.mask.copy(), patch.origin, patch.source_scale)
                )
    merged = merge_patches(out_patches, work.shape, work.mask, work.pixels_per_meter)
    merged.frame_index = frame.frame_index
    return merged


# ---------------------------------------------------------------------------
# losses

def content_loss_t(
    feats_out: dict[str, torch.Tensor],
    feats_in: dict[str, torch.Tensor],
    layers=DEFAULT_CONTENT_LAYERS,
) -> torch.Tensor:
    """Half the summed squared feature difference, per sample: (B,)."""
    total = None
    for name in layers:
        diff = feats_out[name] - feats_in[name]
        term = diff.pow(2).sum(dim=(1, 2, 3)) / 2.0
        total = term if total is None else total + term
    return total


class StylePool:
    """Pooled exemplar Gram moments for one material.

    Stores K, sum_k G_k and sum_k ||G_k||^2 per layer so the style loss
    sum over exemplars costs O(C^2) regardless of pool size.
    """

    def __init__(self, layers):
        self.layers = tuple(layers)
        self.count = 0
        self.gram_sum: dict[str, torch.Tensor] = {}
        self.sq_sum: dict[str, float] = {}

    def add(self, signature: GramSignature) -> None:
        for name in self.layers:
            g = torch.from_numpy(signature.grams[name]).to(torch.float64)
            if name not in self.gram_sum:
                self.gram_sum[name] = g.clone()
                self.sq_sum[name] = float((g * g).sum())
            else:
                self.gram_sum[name] += g
                self.sq_sum[name] += float((g * g).sum())
        self.count += 1

    @classmethod
    def from_signatures(cls, signatures: list[GramSignature], layers) -> "StylePool":
        pool = cls(layers)
        for sig in signatures:
            pool.add(sig)
        return pool


def style_loss_t(
    grams_out: dict[str, torch.Tensor],
    counts_out: dict[str, torch.Tensor],
    pool: StylePool,
) -> torch.Tensor:
    """Per-sample pooled style loss: sum_k sum_l |G - G_k|^2 / (4 R_l^2)."""
    if pool.count == 0:
        raise DataError("style pool is empty")
    total = None
    for name in pool.layers:
        g = grams_out[name].to(torch.float64)
        r = counts_out[name].to(torch.float64)
        if (r == 0).any():
            raise EmptyContentError(f"patch has no valid pixels at layer {name}")
        gsum = pool.gram_sum[name].to(g.device)
        q = g.pow(2).sum(dim=(1, 2))
        inner = (g * gsum[None]).sum(dim=(1, 2))
        num = pool.count * q - 2.0 * inner + pool.sq_sum[name]
        term = num / (4.0 * r * r)
        total = term if total is None else total + term
    return total


def total_loss_t(
    rgb_out: torch.Tensor,
    rgb_in: torch.Tensor,
    mask: torch.Tensor,
    pool: StylePool,
    backbone: FeatureBackbone,
    w_content: float = 1.0,
    w_style: float = 1e4,
    content_layers=DEFAULT_CONTENT_LAYERS,
    style_layers=DEFAULT_STYLE_LAYERS,
    feats_in: dict[str, torch.Tensor] | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, content, style) per-sample tensors for RGB-encoded batches."""
    all_layers = tuple(dict.fromkeys(tuple(content_layers) + tuple(style_layers)))
    feats_out = backbone.features(rgb_out, all_layers)
    if feats_in is None:
        with torch.no_grad():
            feats_in = backbone.features(rgb_in, content_layers)
    content = content_loss_t(feats_out, feats_in, content_layers)
    grams, counts = masked_grams_t(feats_out, mask, style_layers)
    style = style_loss_t(grams, counts, pool)
    total = w_content * content + w_style * style
    return total, content, style


# numpy-facing single-patch operations -------------------------------------

def content_loss(
    out: Patch, inp: Patch, backbone: FeatureBackbone, layers=DEFAULT_CONTENT_LAYERS
) -> float:
    fo = backbone.extract_features(out.rgb(), layers)
    fi = backbone.extract_features(inp.rgb(), layers)
    total = 0.0
    for name in layers:
        diff = fo.layers[name].astype(np.float64) - fi.layers[name].astype(np.float64)
        total += float((diff**2).sum()) / 2.0
    return total


def style_loss(
    out: Patch,
    exemplars: list[GramSignature],
    backbone: FeatureBackbone,
    layers=DEFAULT_STYLE_LAYERS,
) -> float:
    """Masked Gram distance to every exemplar, 1/(4 R_l^2) weighting.

    Exemplar terms are combined with an exactly-rounded sum, so duplicating
    the exemplar list exactly doubles the loss.
    """
    if not exemplars:
        raise DataError("need at least one exemplar signature")
    sig = gram_masked(backbone, out.rgb(), out.mask, layers)
    terms = []
    for ex in exemplars:
        for name in layers:
            diff = sig.grams[name] - ex.grams[name]
            r = sig.valid_pixel_counts[name]
            terms.append(float((diff**2).sum()) / (4.0 * r * r))
    return math.fsum(terms)


def total_loss(
    out: Patch,
    inp: Patch,
    exemplars: list[GramSignature],
    backbone: FeatureBackbone,
    w_content: float = 1.0,
    w_style: float = 1e4,
    content_layers=DEFAULT_CONTENT_LAYERS,
    style_layers=DEFAULT_STYLE_LAYERS,
) -> float:
    return w_content * content_loss(out, inp, backbone, content_layers) + w_style * style_loss(
        out, exemplars, backbone, style_layers
    )


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainSettings:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.9
    w_content: float = 1.0
    w_style: float = 1e4
    content_layers: tuple[str, ...] = DEFAULT_CONTENT_LAYERS
    style_layers: tuple[str, ...] = DEFAULT_STYLE_LAYERS
    pool_size: int = 64
    pool_refresh_steps: int = 250
    checkpoint_interval: int = 500
    augment: bool = True
    min_mask_fraction: float = 0.01
    patch_size: int = PATCH_SIZE
    base_width: int = 32
    seed: int = 0
    joint_classifier: bool = False
    classifier_weight: float = 1.0


def collect_gram_pool(
    backbone: FeatureBackbone,
    patch_list: list[Patch],
    layers=DEFAULT_STYLE_LAYERS,
    batch_size: int = 8,
) -> StylePool:
    """Masked Gram signatures of a patch list, batched through the backbone."""
    pool = StylePool(layers)
    with torch.no_grad():
        for start in range(0, len(patch_list), batch_size):
            block = patch_list[start : start + batch_size]
            rgb = torch.stack(
                [torch.from_numpy(p.rgb()).permute(2, 0, 1) for p in block]
            )
            mask = torch.stack([torch.from_numpy(p.mask.astype(np.float32))[None] for p in block])
            feats = backbone.features(rgb, layers)
            grams, counts = masked_grams_t(feats, mask, layers)
            for i in range(len(block)):
                sig = GramSignature(
                    grams={n: grams[n][i].double().numpy() for n in layers},
                    valid_pixel_counts={n: int(counts[n][i]) for n in layers},
                )
                pool.add(sig)
    return pool


def _deep_coverage_ok(mask: np.ndarray, layers) -> bool:
    # a 1%-masked crop can still have zero valid cells at the deepest style
    # layer; such crops carry no style signal and are re-drawn
    return all(downsample_mask(mask, name).any() for name in layers)


def _sample_fine_patches(sequences, material_index, count, rng, settings) -> list[Patch]:
    candidates = [s for s in sequences if s.material.index == material_index]
    out: list[Patch] = []
    while len(out) < count:
        seq = candidates[int(rng.integers(len(candidates)))]
        frame = seq.fine[int(rng.integers(len(seq.fine)))]
        pairs = random_crop_pairs(
            frame, frame, 1, rng, settings.patch_size, settings.min_mask_fraction
        )
        if not _deep_coverage_ok(pairs[0][1].mask, settings.style_layers):
            continue
        out.append(pairs[0][1])
    return out


def _sample_training_batch(sequences, rng, settings):
    signed_in, masks, mats = [], [], []
    targets = []
    for _ in range(settings.batch_size):
        while True:
            seq = sequences[int(rng.integers(len(sequences)))]
            f = int(rng.integers(len(seq.fine)))
            coarse_patch, fine_patch = random_crop_pairs(
                seq.coarse[f],
                seq.fine[f],
                1,
                rng,
                settings.patch_size,
                settings.min_mask_fraction,
            )[0]
            if _deep_coverage_ok(fine_patch.mask, settings.style_layers):
                break
        if settings.augment:
            op = int(rng.integers(8))
            coarse_patch = augment(coarse_patch, op)
            fine_patch = augment(fine_patch, op)
        signed_in.append(torch.from_numpy(coarse_patch.normals).permute(2, 0, 1))
        masks.append(torch.from_numpy(coarse_patch.mask.astype(np.float32))[None])
        mats.append(seq.material.index)
        targets.append(fine_patch)
    return (
        torch.stack(signed_in),
        torch.stack(masks),
        torch.tensor(mats, dtype=torch.int64),
        targets,
    )


def _build_pools(sequences, backbone, rng, settings) -> dict[int, StylePool]:
    pools: dict[int, StylePool] = {}
    for material_index in sorted({s.material.index for s in sequences}):
        patch_list = _sample_fine_patches(
            sequences, material_index, settings.pool_size, rng, settings
        )
        pools[material_index] = collect_gram_pool(
            backbone, patch_list, settings.style_layers
        )
    return pools


def save_checkpoint(path: Path | str, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: Path | str) -> tuple[EnhancerNet, dict]:
    """Rebuild the network (and metadata) from a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    settings = payload["settings"]
    net = EnhancerNet(
        num_materials=len(payload["vocabulary"]), base_width=settings["base_width"]
    )
    net.load_state_dict(payload["model"])
    net.eval()
    return net, payload


def train_enhancer(
    sequences,
    backbone: FeatureBackbone,
    settings: TrainSettings,
    checkpoint_dir: Path | str | None = None,
    resume: dict | None = None,
    classifier_module=None,
):
    """Optimize the enhancer on (coarse, fine) patch pairs.

    `sequences` is a list of objects carrying .material, .coarse and .fine
    frame lists (see procedural.CorpusSequence). Returns (net, history,
    final_payload). History rows are (step, total, content, style) batch
    means. Raises NumericalError on a non-finite loss.
    """
    if not sequences:
        raise DataError("empty training corpus")
    for seq in sequences:
        if not seq.fine or not seq.coarse:
            raise DataError("every sequence needs coarse and fine frames")
    vocabulary = sequences[0].material.vocabulary
    torch.manual_seed(settings.seed)
    net = EnhancerNet(num_materials=len(vocabulary), base_width=settings.base_width)
    optimizer = torch.optim.Adam(
        net.parameters(),
        lr=settings.learning_rate,
        betas=(settings.beta1, settings.beta2),
    )
    clf = None
    if settings.joint_classifier:
        if classifier_module is None:
            raise ParameterError("joint training requested without a classifier module")
        clf = classifier_module
        optimizer.add_param_group({"params": clf.parameters()})
        if "relu4_1" not in settings.content_layers:
            raise ParameterError("joint training needs relu4_1 among the content layers")

    rng = np.random.default_rng(settings.seed)
    start_step = 0
    history: list[tuple[int, float, float, float]] = []
    if resume is not None:
        net.load_state_dict(resume["model"])
        optimizer.load_state_dict(resume["optimizer"])
        rng.bit_generator.state = resume["numpy_rng"]
        torch.set_rng_state(resume["torch_rng"])
        start_step = resume["step"]
        history = [tuple(row) for row in resume["history"]]
        if clf is not None and resume.get("classifier") is not None:
            clf.load_state_dict(resume["classifier"])

    pools: dict[int, StylePool] = {}
    net.train()

    def _payload(step: int) -> dict:
        return {
            "step": step,
            "model": net.state_dict(),
            "optimizer": optimizer.state_dict(),
            "settings": asdict(settings),
            "vocabulary": list(vocabulary),
            "history": history,
            "numpy_rng": rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "classifier": clf.state_dict() if clf is not None else None,
        }

    for step in range(start_step, settings.steps):
        if step % settings.pool_refresh_steps == 0 or not pools:
            pool_rng = np.random.default_rng([settings.seed, 7919, step])
            pools = _build_pools(sequences, backbone, pool_rng, settings)
        signed_in, mask, mats, fine_patches = _sample_training_batch(
            sequences, rng, settings
        )
        rgb_in = signed_to_rgb(signed_in)
        with torch.no_grad():
            feats_in = backbone.features(rgb_in, settings.content_layers)

        condition: torch.Tensor = mats
        ce = torch.zeros(())
        if clf is not None:
            pooled = feats_in["relu4_1"].mean(dim=(2, 3))
            probs = clf(pooled)
            ce = -(probs[torch.arange(len(mats)), mats].clamp(min=1e-12).log()).mean()
            condition = probs

        residual = net(rgb_in, condition)
        out = apply_residual(signed_in, residual, mask)
        rgb_out = signed_to_rgb(out)

        all_layers = tuple(
            dict.fromkeys(tuple(settings.content_layers) + tuple(settings.style_layers))
        )
        feats_out = backbone.features(rgb_out, all_layers)
        content = content_loss_t(feats_out, feats_in, settings.content_layers)
        grams, counts = masked_grams_t(feats_out, mask, settings.style_layers)
        style_terms = []
        for i in range(len(mats)):
            pool = pools[int(mats[i])]
            g_i = {n: grams[n][i : i + 1] for n in settings.style_layers}
            c_i = {n: counts[n][i : i + 1] for n in settings.style_layers}
            style_terms.append(style_loss_t(g_i, c_i, pool)[0])
        style = torch.stack(style_terms)
        total = (settings.w_content * content + settings.w_style * style).mean()
        if clf is not None:
            total = total + settings.classifier_weight * ce

        total_val = float(total)
        content_val = float(content.mean())
        style_val = float(style.mean())
        if not math.isfinite(total_val):
            raise NumericalError(
                f"non-finite loss at step {step}: total={total_val} "
                f"content={content_val} style={style_val}"
            )
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
        history.append((step, total_val, content_val, style_val))
        if step % 50 == 0:
            log.info(
                "step %d: total %.4f content %.4f style %.6f", step, total_val,
                content_val, style_val,
            )
        if checkpoint_dir is not None and (step + 1) % settings.checkpoint_interval == 0:
            save_checkpoint(
                Path(checkpoint_dir) / f"checkpoint_{step + 1:06d}.pt", _payload(step + 1)
            )

    net.eval()
    return net, history, _payload(settings.steps)


def smoothed_history(history, window: int = 25) -> list[float]:
    """Moving average of the total-loss column."""
    totals = [row[1] for row in history]
    out = []
    for i in range(len(totals)):
        lo = max(0, i - window + 1)
        out.append(sum(totals[lo : i + 1]) / (i + 1 - lo))
    return out
