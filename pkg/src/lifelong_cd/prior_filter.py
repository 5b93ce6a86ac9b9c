"""Realism filter for generic object priors.

Object crops are turned into Sobel edge images at 224x224; a small CNN learns
to tell harvested in-domain objects (positives) from random background crops
(negatives). Generic priors it scores below the decision threshold are pruned.
"""
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import imaging
from .compositor import DETECTED, GENERIC
from .errors import InsufficientDataError, InvalidInputError

INPUT_SIZE = 224
POSITIVE = 1
NEGATIVE = 0

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


@dataclass(eq=False)
class EdgeSample:
    edge_image: np.ndarray
    label: int
    source_prior_id: str = None


def sobel_magnitude(gray):
    """Sobel gradient magnitude with replicate padding, scaled so the maximum is 1."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or gray.shape[0] < 3 or gray.shape[1] < 3:
        raise InvalidInputError(f"sobel needs a 2-D image of at least 3x3, got {gray.shape}")
    p = np.pad(gray, 1, mode="edge")
    h, w = gray.shape
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for i in range(3):
        for j in range(3):
            win = p[i:i + h, j:j + w]
            gx += SOBEL_X[i, j] * win
            gy += SOBEL_Y[i, j] * win
    mag = np.hypot(gx, gy)
    peak = mag.max()
    # tolerance for rounding noise on flat images
    if peak <= 1e-12:
        return np.zeros_like(mag)
    return mag / peak


def edge_image(crop, size=INPUT_SIZE):
    gray = imaging.to_gray(np.asarray(crop))
    ph, pw = max(0, 3 - gray.shape[0]), max(0, 3 - gray.shape[1])
    if ph or pw:
        gray = np.pad(gray, ((0, ph), (0, pw)), mode="edge")
    edges = sobel_magnitude(gray)
    return np.clip(imaging.resize_bilinear(edges, (size, size)), 0.0, 1.0).astype(np.float32)


def crop_and_edge(frame, bbox, label=POSITIVE, source_prior_id=None):
    """Crop ``bbox`` (x, y, w, h) from ``frame``, take Sobel edges, resize to 224x224."""
    frame = np.asarray(frame)
    x, y, w, h = bbox
    H, W = frame.shape[:2]
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > W or y + h > H:
        raise InvalidInputError(f"bbox {bbox} outside {W}x{H} frame")
    return EdgeSample(edge_image(frame[y:y + h, x:x + w]), label, source_prior_id)


def prior_edge_sample(prior):
    h, w = prior.shape
    return crop_and_edge(prior.sprite, (0, 0, w, h), POSITIVE, prior.id)


def build_filter_training_set(positives, negative_source, per_class, rng_seed=0):
    """Balanced edge set: ``per_class`` detection crops and ``per_class`` random crops.

    Negative crop sizes are drawn from the positive box sizes so that both
    classes share the same scale statistics.
    """
    if not positives:
        raise InsufficientDataError("filter training needs at least one positive detection")
    if not negative_source:
        raise InsufficientDataError("filter training needs negative source images")
    if per_class < 0:
        raise InvalidInputError("per_class must be >= 0")
    rng = np.random.default_rng(rng_seed)
    if per_class <= len(positives):
        pos_idx = rng.permutation(len(positives))[:per_class]
    else:
        pos_idx = rng.integers(0, len(positives), per_class)
    out = []
    for i in pos_idx:
        det = positives[int(i)]
        h, w = det.color_crop.shape[:2]
        out.append(crop_and_edge(det.color_crop, (0, 0, w, h), POSITIVE))
    for _ in range(per_class):
        det = positives[int(rng.integers(len(positives)))]
        img = np.asarray(negative_source[int(rng.integers(len(negative_source)))])
        H, W = img.shape[:2]
        h, w = det.color_crop.shape[:2]
        h, w = min(h, H), min(w, W)
        x = int(rng.integers(0, W - w + 1))
        y = int(rng.integers(0, H - h + 1))
        out.append(crop_and_edge(img, (x, y, w, h), NEGATIVE))
    return out


class FilterNet(nn.Module):
    """Four conv blocks, global average pool and a linear head producing one logit."""

    def __init__(self, widths=(8, 16, 32, 32)):
        super().__init__()
        layers, cin = [], 1
        for i, w in enumerate(widths):
            layers += [nn.Conv2d(cin, w, 3, 2 if i == 0 else 1, 1, bias=False), nn.BatchNorm2d(w),
                       nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            cin = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin, 1)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))[:, 0]


@dataclass(eq=False)
class FilterModel:
    net: FilterNet
    decision_threshold: float = 0.5
    trained_epochs: int = 0
    input_size: int = INPUT_SIZE
    rng_seed: int = 0
    training_set_hash: str = ""
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    loss_history: list = field(default_factory=list)

    @torch.no_grad()
    def predict_proba(self, edge_images):
        self.net.eval()
        if len(edge_images) == 0:
            return np.zeros(0)
        x = torch.from_numpy(np.stack(edge_images).astype(np.float32))[:, None]
        return torch.sigmoid(self.net(x)).numpy().astype(np.float64)

    def checksum(self):
        h = hashlib.sha256()
        for k, t in self.net.state_dict().items():
            h.update(k.encode())
            h.update(t.cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def _tensors(data):
    x = torch.from_numpy(np.stack([s.edge_image for s in data]).astype(np.float32))[:, None]
    y = torch.tensor([float(s.label) for s in data])
    return x, y


@torch.no_grad()
def _mean_loss(net, x, y):
    net.eval()
    return float(F.binary_cross_entropy_with_logits(net(x), y))


def training_set_hash(data):
    h = hashlib.sha256()
    for s in data:
        h.update(bytes([s.label]))
        h.update(s.edge_image.tobytes())
    return h.hexdigest()[:16]


def train_filter(data, epochs=10, lr=1e-3, batch=32, rng_seed=0, decision_threshold=0.5,
                 momentum=0.9, init_state=None):
    """SGD training of the realism classifier; ``init_state`` loads external weights first."""
    labels = {s.label for s in data}
    if labels != {POSITIVE, NEGATIVE}:
        raise InsufficientDataError("filter training needs both positive and negative samples")
    torch.manual_seed(rng_seed)
    net = FilterNet()
    if init_state is not None:
        net.load_state_dict(init_state)
    x, y = _tensors(data)
    model = FilterModel(net=net, decision_threshold=decision_threshold, rng_seed=rng_seed,
                        training_set_hash=training_set_hash(data))
    model.initial_loss = _mean_loss(net, x, y)
    gen = torch.Generator().manual_seed(int(rng_seed))
    opt = torch.optim.SGD(net.parameters(), lr=lr, momentum=momentum)
    for _ in range(epochs):
        net.train()
        order = torch.randperm(len(data), generator=gen)
        for i in range(0, len(data), batch):
            idx = order[i:i + batch]
            if len(idx) < 2:
                continue
            loss = F.binary_cross_entropy_with_logits(net(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.loss_history.append(_mean_loss(net, x, y))
        model.trained_epochs += 1
    net.eval()
    model.final_loss = model.loss_history[-1] if model.loss_history else model.initial_loss
    return model


def filter_priors(priors, model, threshold=None):
    """Split priors into (kept, removed); detected priors always stay."""
    thr = model.decision_threshold if threshold is None else threshold
    generic = [p for p in priors if p.provenance == GENERIC]
    probs = model.predict_proba([prior_edge_sample(p).edge_image for p in generic])
    score = {p.id: float(q) for p, q in zip(generic, probs)}
    kept, removed = [], []
    for p in priors:
        if p.provenance == DETECTED or score[p.id] >= thr:
            kept.append(p)
        else:
            removed.append(p)
    return kept, removed


def save_filter(directory, model):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tmp = directory / "model.bin.tmp"
    torch.save(model.net.state_dict(), tmp)
    tmp.replace(directory / "model.bin")
    meta = {"decision_threshold": model.decision_threshold, "epochs": model.trained_epochs,
            "seed": model.rng_seed, "training_set_hash": model.training_set_hash,
            "initial_loss": model.initial_loss, "final_loss": model.final_loss,
            "checksum": model.checksum()}
    imaging.atomic_write_text(directory / "meta.json", json.dumps(meta, indent=1, sort_keys=True))


def load_filter(directory):
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    net = FilterNet()
    net.load_state_dict(torch.load(directory / "model.bin", weights_only=True))
    net.eval()
    return FilterModel(net=net, decision_threshold=meta["decision_threshold"],
                       trained_epochs=meta["epochs"], rng_seed=meta["seed"],
                       training_set_hash=meta["training_set_hash"],
                       initial_loss=meta["initial_loss"], final_loss=meta["final_loss"])
