"""Siamese correlation change detector.

A shared-weight convolutional encoder embeds reference and live frames; a
parameter-free correlation layer compares the deepest features over a
(2d+1)^2 displacement window; a decoder with skip connections upsamples back
to full resolution and emits one change logit per pixel.
"""
import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from . import imaging
from .errors import InsufficientDataError, InvalidInputError, LifecycleOrderError
from .knowledge_base import Detection

log = logging.getLogger(__name__)

WIDTHS = {"tiny": (16, 32, 64, 64), "small": (32, 64, 128, 128)}
DOWNSAMPLE = 16


def correlation_layer(feat_a, feat_b, max_disp):
    """Cost volume of channel-normalised dot products over a (2d+1)^2 window.

    Accepts (C, h, w) or (N, C, h, w) tensors. Channel ``k`` holds displacement
    ``(dy, dx) = (k // (2d+1) - d, k % (2d+1) - d)``; ``feat_b`` is zero padded.
    """
    if feat_a.shape != feat_b.shape:
        raise InvalidInputError(f"feature shapes differ: {tuple(feat_a.shape)} vs {tuple(feat_b.shape)}")
    if max_disp < 0:
        raise InvalidInputError("max displacement must be >= 0")
    squeeze = feat_a.dim() == 3
    if squeeze:
        feat_a, feat_b = feat_a[None], feat_b[None]
    n, c, h, w = feat_a.shape
    d = int(max_disp)
    padded = F.pad(feat_b, (d, d, d, d))
    out = []
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            shifted = padded[:, :, d + dy:d + dy + h, d + dx:d + dx + w]
            out.append((feat_a * shifted).sum(dim=1))
    vol = torch.stack(out, dim=1) / c
    return vol[0] if squeeze else vol


def _conv_bn(cin, cout, stride):
    return [nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class Encoder(nn.Module):
    def __init__(self, widths):
        super().__init__()
        blocks, cin = [], 3
        for w in widths:
            blocks.append(nn.Sequential(*_conv_bn(cin, w, 2), *_conv_bn(w, w, 1)))
            cin = w
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        feats = []
        for b in self.blocks:
            x = b(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    def __init__(self, widths, corr_channels):
        super().__init__()
        w1, w2, w3, w4 = widths
        d3, d2, d1, d0 = max(w3 // 2, 1), max(w2 // 2, 1), w1, max(w1 // 2, 1)
        self.bottleneck = nn.Sequential(*_conv_bn(2 * w4 + corr_channels, w4, 1))
        self.up3 = nn.Sequential(*_conv_bn(w4 + 2 * w3, d3, 1))
        self.up2 = nn.Sequential(*_conv_bn(d3 + 2 * w2, d2, 1))
        self.up1 = nn.Sequential(*_conv_bn(d2 + 2 * w1, d1, 1))
        self.up0 = nn.Sequential(nn.Conv2d(d1 + 6, d0, 3, 1, 1), nn.ReLU(inplace=True))
        self.head = nn.Conv2d(d0, 1, 1)

    @staticmethod
    def _up(x, skip):
        return F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)

    def forward(self, fa, fb, corr, images):
        x = self.bottleneck(torch.cat([fa[3], fb[3], corr], 1))
        x = self.up3(torch.cat([self._up(x, fa[2]), fa[2], fb[2]], 1))
        x = self.up2(torch.cat([self._up(x, fa[1]), fa[1], fb[1]], 1))
        x = self.up1(torch.cat([self._up(x, fa[0]), fa[0], fb[0]], 1))
        x = self.up0(torch.cat([self._up(x, images), images], 1))
        return self.head(x)


class DetectorModel(nn.Module):
    """Siamese encoder/decoder with a correlation layer at the deepest level."""

    def __init__(self, arch_scale="tiny", max_disp=2, widths=None):
        super().__init__()
        if max_disp < 0:
            raise InvalidInputError("max displacement must be >= 0")
        self.arch_scale = arch_scale
        self.widths = tuple(widths or WIDTHS[arch_scale])
        self.max_disp = int(max_disp)
        self.encoder = Encoder(self.widths)
        self.decoder = Decoder(self.widths, self.corr_channels)
        self.times_trained = 0
        self.loss_history = []

    @property
    def corr_channels(self):
        return (2 * self.max_disp + 1) ** 2

    def correlate(self, fa, fb):
        a = F.normalize(fa, dim=1)
        b = F.normalize(fb, dim=1)
        return correlation_layer(a, b, self.max_disp)

    def forward(self, reference, live):
        fa = self.encoder(reference)
        fb = self.encoder(live)
        corr = self.correlate(fa[3], fb[3])
        return self.decoder(fa, fb, corr, torch.cat([reference, live], 1))

    @property
    def freeze_flags(self):
        return {
            "encoder": not any(p.requires_grad for p in self.encoder.parameters()),
            "decoder": not any(p.requires_grad for p in self.decoder.parameters()),
        }


def build_model(scale="tiny", correlation_max_disp=2, rng_seed=0, widths=None):
    torch.manual_seed(rng_seed)
    model = DetectorModel(scale, correlation_max_disp, widths)
    model.eval()
    return model


def parameter_count(model):
    return sum(p.numel() for p in model.parameters())


def group_checksums(model):
    """SHA-256 over every parameter and buffer of the encoder and of the decoder."""
    out = {}
    for name in ("encoder", "decoder"):
        h = hashlib.sha256()
        for key, t in getattr(model, name).state_dict().items():
            h.update(key.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        out[name] = h.hexdigest()
    return out


@dataclass
class TrainConfig:
    iterations: int = 3000
    lr: float = 1e-4
    batch: int = 8
    optimizer: str = "adam"
    freeze_encoder: bool = False
    rng_seed: int = 0
    pos_weight_max: float = 100.0
    flip: bool = True
    shift: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise InvalidInputError("iterations must be >= 0")
        if self.lr <= 0:
            raise InvalidInputError("lr must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidInputError(f"unknown optimizer {self.optimizer!r}")


def to_tensor(images):
    arr = np.stack([np.asarray(i) for i in images]).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def stack_pairs(data):
    shapes = {s.reference.shape for s in data} | {s.live.shape for s in data}
    if len(shapes) != 1:
        raise InvalidInputError(f"training pairs must share one size, got {sorted(shapes)}")
    ref = to_tensor([s.reference for s in data])
    live = to_tensor([s.live for s in data])
    mask = torch.from_numpy(np.stack([s.mask for s in data]).astype(np.float32))[:, None]
    return ref, live, mask


def positive_weight(mask, clamp_max=100.0):
    pos = float(mask.sum())
    neg = float(mask.numel() - pos)
    if pos == 0:
        return clamp_max
    return float(np.clip(neg / pos, 1.0, clamp_max))


def pad_to_multiple(x, k=DOWNSAMPLE):
    h, w = x.shape[-2:]
    ph, pw = (-h) % k, (-w) % k
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x


def pixel_loss(model, ref, live, mask, pos_weight):
    h, w = ref.shape[-2:]
    logits = model(pad_to_multiple(ref), pad_to_multiple(live))[..., :h, :w]
    pw = torch.tensor(pos_weight, dtype=logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, mask, pos_weight=pw)


def shift_batch(x, dx, dy, mode):
    """Translate NCHW by (dx, dy); ``mode`` is "replicate" for images or "constant" for masks."""
    if dx == 0 and dy == 0:
        return x
    h, w = x.shape[-2:]
    p = max(abs(dx), abs(dy))
    padded = F.pad(x, (p, p, p, p), mode=mode)
    return padded[..., p - dy:p - dy + h, p - dx:p - dx + w]


def train(model, data, cfg):
    """Return a trained copy of ``model``; the input model is left untouched."""
    if not data:
        raise InsufficientDataError("no training pairs")
    if cfg.freeze_encoder and model.times_trained == 0:
        raise LifecycleOrderError("cannot freeze the encoder of a model that was never trained")
    model = copy.deepcopy(model)
    if cfg.iterations == 0:
        return model
    ref, live, mask = stack_pairs(data)
    pos_weight = positive_weight(mask, cfg.pos_weight_max)
    gen = torch.Generator().manual_seed(int(cfg.rng_seed))
    torch.manual_seed(int(cfg.rng_seed))

    model.encoder.requires_grad_(not cfg.freeze_encoder)
    model.decoder.requires_grad_(True)
    model.train()
    if cfg.freeze_encoder:
        # frozen encoder keeps its batch-norm running statistics too
        model.encoder.eval()
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.lr)
    else:
        opt = torch.optim.SGD(params, lr=cfg.lr, momentum=0.9)

    n = ref.shape[0]
    history = []
    for _ in range(cfg.iterations):
        idx = torch.randint(0, n, (min(cfg.batch, n),), generator=gen)
        r, l, m = ref[idx], live[idx], mask[idx]
        if cfg.flip and bool(torch.rand((), generator=gen) < 0.5):
            r, l, m = r.flip(-1), l.flip(-1), m.flip(-1)
        if cfg.shift:
            dx, dy = (int(v) for v in torch.randint(-cfg.shift, cfg.shift + 1, (2,), generator=gen))
            l, m = shift_batch(l, dx, dy, "replicate"), shift_batch(m, dx, dy, "constant")
        loss = pixel_loss(model, r, l, m, pos_weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    model.requires_grad_(True)
    model.eval()
    model.times_trained += 1
    model.loss_history = history
    log.info("trained %d iterations (freeze_encoder=%s), loss %.4f -> %.4f", cfg.iterations,
             cfg.freeze_encoder, np.mean(history[:10]), np.mean(history[-10:]))
    return model


@torch.no_grad()
def predict_batch(model, references, lives, batch=16):
    """Change probability maps for aligned (reference, live) pairs."""
    model.eval()
    out = []
    for i in range(0, len(references), batch):
        ref = to_tensor(references[i:i + batch])
        live = to_tensor(lives[i:i + batch])
        if ref.shape != live.shape:
            raise InvalidInputError("reference and live frames differ in size")
        h, w = ref.shape[-2:]
        logits = model(pad_to_multiple(ref), pad_to_multiple(live))[..., :h, :w]
        out.extend(torch.sigmoid(logits)[:, 0].numpy().astype(np.float32))
    return out


def predict(model, reference, live):
    reference, live = np.asarray(reference), np.asarray(live)
    if reference.shape != live.shape:
        raise InvalidInputError(f"reference {reference.shape} and live {live.shape} differ")
    return predict_batch(model, [reference], [live])[0]


EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def binarize(pmap, threshold=0.5, min_area=1):
    """Binary mask of ``pmap >= threshold`` keeping only 8-connected components of at least ``min_area`` px."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidInputError("threshold must lie in [0, 1]")
    labels, n = ndimage.label(np.asarray(pmap) >= threshold, structure=EIGHT_CONNECTED)
    if n == 0:
        return np.zeros(labels.shape, dtype=np.uint8)
    areas = np.bincount(labels.ravel())
    keep = areas >= min_area
    keep[0] = False
    return keep[labels].astype(np.uint8)


def binarize_and_extract(pmap, live, threshold=0.5, min_area=1, frame_id=""):
    """Detections for every 8-connected component of ``pmap >= threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidInputError("threshold must lie in [0, 1]")
    pmap = np.asarray(pmap)
    live = np.asarray(live)
    if pmap.shape != live.shape[:2]:
        raise InvalidInputError("probability map and live frame differ in size")
    labels, n = ndimage.label(pmap >= threshold, structure=EIGHT_CONNECTED)
    dets = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        comp = labels[sl] == k
        area = int(comp.sum())
        if area < min_area:
            continue
        ys, xs = sl
        dets.append(Detection(
            frame_id=frame_id,
            mask_crop=comp.astype(np.uint8),
            color_crop=live[sl].copy(),
            bbox=(xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start),
            area_px=area,
            score=float(pmap[sl][comp].mean()),
        ))
    return dets


def save_detector(directory, model, meta=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tmp = directory / "model.bin.tmp"
    torch.save(model.state_dict(), tmp)
    tmp.replace(directory / "model.bin")
    doc = {
        "arch_scale": model.arch_scale,
        "widths": list(model.widths),
        "max_disp": model.max_disp,
        "times_trained": model.times_trained,
        "checksums": group_checksums(model),
        **(meta or {}),
    }
    imaging.atomic_write_text(directory / "meta.json", json.dumps(doc, indent=1, sort_keys=True, default=str))


def load_detector(directory):
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    model = DetectorModel(meta["arch_scale"], meta["max_disp"], meta["widths"])
    model.load_state_dict(torch.load(directory / "model.bin", weights_only=True))
    model.times_trained = meta["times_trained"]
    model.eval()
    return model


def train_config_dict(cfg):
    return asdict(cfg)
