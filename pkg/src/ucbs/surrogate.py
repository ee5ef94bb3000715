"""Binary surrogate classifiers: backbone, head adaptation, fine-tuning, inference."""

from __future__ import annotations

import copy
import hashlib
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import FormatVersionError, TrainingDivergedError

CHECKPOINT_FORMAT = "ucbs-checkpoint"
CHECKPOINT_VERSION = 1


class SmallCNN(nn.Module):
    """Four conv blocks, global average pooling, linear head.

    The first convolution has no bias so that all-zero input regions produce
    exactly-zero activations after relu and max-pooling.
    """

    def __init__(self, num_classes=10, in_channels=3, widths=(16, 32, 64, 64)):
        super().__init__()
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.widths = tuple(widths)
        layers = []
        c_in = in_channels
        for i, c_out in enumerate(self.widths):
            block = [nn.Conv2d(c_in, c_out, 3, padding=1, bias=i > 0), nn.ReLU()]
            if i < len(self.widths) - 1:
                block.append(nn.MaxPool2d(2, ceil_mode=True))
            layers.append(nn.Sequential(*block))
            c_in = c_out
        self.blocks = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(c_in, num_classes)

    @property
    def feature_dim(self):
        return self.widths[-1]

    def features(self, x):
        return self.pool(self.blocks(x)).flatten(1)

    def forward(self, x):
        return self.head(self.features(x))

    def descriptor(self):
        return {"name": "SmallCNN", "num_classes": self.num_classes,
                "in_channels": self.in_channels, "widths": list(self.widths)}


def _to_tensor(images) -> torch.Tensor:
    if isinstance(images, np.ndarray) and images.ndim == 4:
        arr = images
    else:
        arr = np.stack([np.asarray(im) for im in images])
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 3, 1, 2)


class Classifier:
    """A torch backbone + linear head with a numpy (N, H, W, C) interface.

    ``target`` is the output index explained by metrics; for binary
    surrogates it is 1.
    """

    def __init__(self, net: nn.Module, input_size: int = 64, target: int = 1,
                 target_class=None, seed: Optional[int] = None, batch_size: int = 128):
        self.net = net.eval()
        self.input_size = input_size
        self.target = target
        self.target_class = target_class
        self.seed = seed
        self.batch_size = batch_size

    @property
    def class_count(self):
        return self.net.head.out_features

    def _check(self, arr):
        if arr.shape[1:3] != (self.input_size, self.input_size):
            raise ValueError(f"input is {arr.shape[1]}x{arr.shape[2]}, model expects "
                             f"{self.input_size}x{self.input_size}; resize with resize_image first")
        if arr.shape[3] != self.net.in_channels:
            raise ValueError(f"input has {arr.shape[3]} channels, model expects {self.net.in_channels}")

    def _run(self, images, fn):
        if len(images) == 0:
            return np.zeros((0, 0))
        arr = images if isinstance(images, np.ndarray) else np.stack([np.asarray(im) for im in images])
        self._check(arr)
        outs = []
        self.net.eval()
        with torch.no_grad():
            for s in range(0, len(arr), self.batch_size):
                outs.append(fn(_to_tensor(arr[s:s + self.batch_size])).double().numpy())
        return np.concatenate(outs)

    def logits(self, images) -> np.ndarray:
        """Pre-softmax outputs, shape (N, class_count)."""
        return self._run(images, self.net)

    def embeddings(self, images) -> np.ndarray:
        """Globally pooled penultimate activations, shape (N, feature_dim)."""
        return self._run(images, self.net.features)


SurrogateModel = Classifier


def make_base_model(num_classes=10, in_channels=3, input_size=64, seed=0, widths=(16, 32, 64, 64)):
    """A freshly initialised multi-class backbone standing in for a base model."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = SmallCNN(num_classes, in_channels, widths)
    return Classifier(net, input_size=input_size, target=0, seed=seed)


def adapt_to_binary(base: Classifier, target_class, seed: int = 0) -> Classifier:
    """Copy the backbone and attach a seeded 2-way head; index 1 is the target."""
    net = copy.deepcopy(base.net)
    d = net.head.in_features
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(d)
    head = nn.Linear(d, 2)
    with torch.no_grad():
        head.weight.copy_((torch.rand(2, d, generator=gen) * 2 - 1) * bound)
        head.bias.copy_((torch.rand(2, generator=gen) * 2 - 1) * bound)
    net.head = head
    net.num_classes = 2
    return Classifier(net, input_size=base.input_size, target=1, target_class=target_class, seed=seed)


def predict_logits(model: Classifier, image) -> np.ndarray:
    px = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    return model.logits(px[None])[0]


def embed(model: Classifier, image) -> np.ndarray:
    px = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    return model.embeddings(px[None])[0]


def state_checksum(net: nn.Module, exclude_prefix: Optional[str] = None) -> str:
    h = hashlib.sha256()
    for name, t in sorted(net.state_dict().items()):
        if exclude_prefix and name.startswith(exclude_prefix):
            continue
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def head_loss_and_grad(features, labels, weight, bias):
    """Mean cross-entropy of a linear head and its analytic gradient.

    features (N, D), labels (N,), weight (C, D), bias (C,); float64 numpy.
    Returns ``(loss, dW, db)``.
    """
    z = features @ weight.T + bias
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = -np.log(p[np.arange(n), labels]).mean()
    delta = p.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    return loss, delta.T @ features, delta.sum(axis=0)


@dataclass
class TrainingConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    epochs: int = 50
    learning_rate: float = 0.01
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainingLog:
    config: dict
    epochs: list = field(default_factory=list)
    initial_objective: Optional[dict] = None
    final_objective: Optional[dict] = None

    def to_dict(self):
        return asdict(self)


@dataclass
class AccuracyReport:
    loss: float
    accuracy: float
    n: int


PART_NAMES = ("originals", "superpixels", "ood")


def _part_tensors(data):
    parts = []
    for name, images, label in data.parts():
        x = _to_tensor(images) if images else None
        parts.append((name, x, label))
    return parts


def _weights(cfg):
    return (1.0, cfg.lambda1, cfg.lambda2)


def objective(model: Classifier, data, cfg: TrainingConfig) -> dict:
    """Weighted three-part cross-entropy evaluated over full parts (eval mode)."""
    terms = {}
    total = 0.0
    for (name, images, label), lam in zip(data.parts(), _weights(cfg)):
        if not images:
            terms[name] = None
            continue
        z = torch.from_numpy(model.logits(images))
        y = torch.full((len(images),), label, dtype=torch.long)
        terms[name] = float(F.cross_entropy(z, y))
        total += lam * terms[name]
    terms["total"] = total
    return terms


def evaluate_validation(model: Classifier, scenario) -> AccuracyReport:
    if len(scenario) == 0:
        raise ValueError(f"scenario {scenario.kind!r} is empty")
    images, labels = scenario.images_and_labels()
    z = model.logits(images)
    t = torch.from_numpy(z)
    y = torch.from_numpy(labels)
    loss = float(F.cross_entropy(t, y))
    acc = float((z.argmax(axis=1) == labels).mean())
    return AccuracyReport(loss=loss, accuracy=acc, n=len(labels))


def fine_tune(model: Classifier, data, cfg: TrainingConfig,
              validation: Sequence = ()) -> tuple[Classifier, TrainingLog]:
    """Minimise E_D[CE] + lambda1 E_DS[CE] + lambda2 E_Dout[CE] with SGD + momentum.

    Each batch draws a proportional chunk of every active part. Sample ``i``
    of part ``p`` is weighted ``lambda_p * n_batches / |p|`` so the mean of
    batch losses over an epoch is exactly the three-part objective. Parts
    with zero weight are left out of the batch stream entirely.
    """
    weights = _weights(cfg)
    parts = _part_tensors(data)
    if parts[0][1] is None:
        raise ValueError("the originals part of the dataset is empty")
    for (name, x, _), lam in zip(parts, weights):
        if lam > 0 and x is None:
            raise ValueError(f"part {name!r} is empty but its weight is {lam}")
    active = [i for i, ((_, x, _), lam) in enumerate(zip(parts, weights)) if lam > 0 and x is not None]
    sizes = {i: parts[i][1].shape[0] for i in active}
    for i in active:
        if tuple(parts[i][1].shape[2:]) != (model.input_size, model.input_size):
            raise ValueError(f"part {parts[i][0]!r} images are not {model.input_size}x{model.input_size}")

    model = Classifier(copy.deepcopy(model.net), model.input_size, model.target,
                       model.target_class, model.seed, model.batch_size)
    net = model.net
    opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    n_batches = math.ceil(sum(sizes.values()) / cfg.batch_size)

    log = TrainingLog(config=asdict(cfg))
    log.initial_objective = objective(model, data, cfg)

    for epoch in range(1, cfg.epochs + 1):
        net.train()
        chunks = {i: np.array_split(rng.permutation(sizes[i]), n_batches) for i in active}
        term_sums = {i: 0.0 for i in active}
        batch_loss_sum = 0.0
        for b in range(n_batches):
            xs, ys, ws, owner = [], [], [], []
            for i in active:
                idx = chunks[i][b]
                if len(idx) == 0:
                    continue
                xs.append(parts[i][1][torch.from_numpy(idx)])
                ys.append(torch.full((len(idx),), parts[i][2], dtype=torch.long))
                ws.append(torch.full((len(idx),), weights[i] * n_batches / sizes[i]))
                owner.extend([i] * len(idx))
            if not xs:
                continue
            x = torch.cat(xs)
            y = torch.cat(ys)
            w = torch.cat(ws)
            ce = F.cross_entropy(net(x), y, reduction="none")
            loss = (w * ce).sum()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_loss_sum += loss.item()
            ce_np = ce.detach().double().numpy()
            owner_np = np.asarray(owner)
            for i in active:
                term_sums[i] += float(ce_np[owner_np == i].sum())
        terms = {name: None for name in PART_NAMES}
        for i in active:
            terms[PART_NAMES[i]] = term_sums[i] / sizes[i]
        entry = {"epoch": epoch, "total": batch_loss_sum / n_batches, "terms": terms}
        if not math.isfinite(entry["total"]):
            raise TrainingDivergedError(epoch)
        net.eval()
        if validation:
            entry["validation"] = {sc.kind: evaluate_validation(model, sc).accuracy for sc in validation}
        log.epochs.append(entry)

    net.eval()
    log.final_objective = objective(model, data, cfg)
    return model, log


def save_checkpoint(model: Classifier, path):
    descriptor = model.net.descriptor() if hasattr(model.net, "descriptor") else None
    if descriptor is None:
        raise ValueError("only networks with an architecture descriptor can be checkpointed")
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": descriptor,
        "input_size": model.input_size,
        "target": model.target,
        "target_class": model.target_class,
        "seed": model.seed,
        "state_dict": {k: v.detach().clone() for k, v in model.net.state_dict().items()},
    }
    buf = io.BytesIO()
    torch.save(blob, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Classifier:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatVersionError(f"{path}: not a readable checkpoint ({exc})") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise FormatVersionError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise FormatVersionError(
            f"{path}: checkpoint version {blob.get('version')} unsupported (expected {CHECKPOINT_VERSION})")
    arch = blob["architecture"]
    if arch.get("name") != "SmallCNN":
        raise FormatVersionError(f"{path}: unknown architecture {arch.get('name')!r}")
    net = SmallCNN(arch["num_classes"], arch["in_channels"], tuple(arch["widths"]))
    net.load_state_dict(blob["state_dict"])
    return Classifier(net, input_size=blob["input_size"], target=blob["target"],
                      target_class=blob["target_class"], seed=blob["seed"])
