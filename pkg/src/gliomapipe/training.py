"""The encoder-decoder segmentation network, its training loop and slice-wise inference."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, NoTrainingDataError, ShapeError
from .nn import ops
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import Conv2d, ConvBlock, ConvTranspose2x2, Layer
from .nn.loss import DEFAULT_CLASS_WEIGHTS, softmax_weighted_ce
from .nn.optim import AdamState, adam_step
from .volume_io import SegmentationVolume, Study, extract_axial_slices

log = logging.getLogger(__name__)

# class index -> stored label, and the inverse lookup (label 3 never occurs)
CLASS_TO_LABEL = np.array([0, 1, 2, 4], dtype=np.uint8)
LABEL_TO_CLASS = np.array([0, 1, 2, 0, 3], dtype=np.int64)


@dataclass
class NetworkConfig:
    encoder_filters: List[int] = field(default_factory=lambda: [8, 16, 32, 64])
    levels: int = 4
    n_classes: int = 4
    input_channels: int = 4

    def __post_init__(self):
        self.encoder_filters = [int(f) for f in self.encoder_filters]
        if self.levels != len(self.encoder_filters):
            raise ConfigError(f"levels={self.levels} but {len(self.encoder_filters)} encoder filter counts given")
        if self.levels < 1 or min(self.encoder_filters) < 1:
            raise ConfigError("levels and filter counts must be positive")

    @property
    def expected_conv_layers(self) -> int:
        return 2 * (2 * self.levels + 1) + self.levels + 1


@dataclass
class TrainConfig:
    epochs: int = 30
    class_weights: Tuple[float, ...] = DEFAULT_CLASS_WEIGHTS
    lr: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    augment_hflip: bool = True
    lesion_slices_only: bool = True

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if len(self.class_weights) != 4 or min(self.class_weights) <= 0:
            raise ConfigError("class_weights must be four positive numbers")
        if self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("batch_size and lr must be positive")


class UNet:
    """U-shaped FCNN: ``levels`` x (ConvBlock, pool), a bottleneck ConvBlock,
    ``levels`` x (2x2 transposed conv, skip concat, ConvBlock), then a 1x1 conv.
    """

    def __init__(self, cfg: NetworkConfig, dtype=np.float32):
        self.cfg = cfg
        f = cfg.encoder_filters
        self.encoders = []
        c_prev = cfg.input_channels
        for c in f:
            self.encoders.append(ConvBlock(c_prev, c, dtype))
            c_prev = c
        self.bottleneck = ConvBlock(c_prev, 2 * c_prev, dtype)
        c_prev = 2 * c_prev
        self.upconvs, self.decoders = [], []
        for c in reversed(f):
            self.upconvs.append(ConvTranspose2x2(c_prev, c, dtype))
            self.decoders.append(ConvBlock(2 * c, c, dtype))
            c_prev = c
        self.head = Conv2d(c_prev, cfg.n_classes, 1, dtype)
        self._cache = None

    def named_layers(self) -> Iterator[Tuple[str, Layer]]:
        """All parametrized layers in graph order with stable names."""
        for i, block in enumerate(self.encoders):
            for name, layer in block.layers():
                yield f"enc{i}.{name}", layer
        for name, layer in self.bottleneck.layers():
            yield f"bottleneck.{name}", layer
        for i, (up, block) in enumerate(zip(self.upconvs, self.decoders)):
            yield f"up{i}", up
            for name, layer in block.layers():
                yield f"dec{i}.{name}", layer
        yield "head", self.head

    def conv_layers(self) -> List[Layer]:
        return [layer for _, layer in self.named_layers() if isinstance(layer, (Conv2d, ConvTranspose2x2))]

    def init(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for _, layer in self.named_layers():
            layer.init(rng)

    def parameters(self) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
        params, grads = {}, {}
        for lname, layer in self.named_layers():
            for pname, p, g in layer.named_params():
                params[f"{lname}.{pname}"] = p
                grads[f"{lname}.{pname}"] = g
        return params, grads

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"{lname}.{b}": arr for lname, layer in self.named_layers() for b, arr in layer.buffers.items()}

    def zero_grad(self) -> None:
        for _, layer in self.named_layers():
            layer.zero_grad()

    @property
    def divisor(self) -> int:
        return 2 ** self.cfg.levels

    def forward(self, x, training=True):
        h, w = x.shape[2:]
        if h % self.divisor or w % self.divisor:
            raise ShapeError(f"input {h}x{w} is not divisible by {self.divisor} (levels={self.cfg.levels})")
        skips, pools = [], []
        for block in self.encoders:
            x = block.forward(x, training)
            skips.append(x)
            x, argmax = ops.maxpool2x2_forward(x)
            pools.append(argmax)
        x = self.bottleneck.forward(x, training)
        splits = []
        for up, block, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x = up.forward(x, training)
            x, split = ops.concat_forward(skip, x)
            splits.append(split)
            x = block.forward(x, training)
        self._cache = (pools, splits)
        return self.head.forward(x, training)

    def backward(self, grad):
        pools, splits = self._cache
        grad = self.head.backward(grad)
        skip_grads = []
        for up, block, split in reversed(list(zip(self.upconvs, self.decoders, splits))):
            grad = block.backward(grad)
            g_skip, grad = ops.concat_backward(grad, split)
            skip_grads.append(g_skip)
            grad = up.backward(grad)
        # decoders were walked deepest-first, so skip_grads[i] belongs to encoder i
        grad = self.bottleneck.backward(grad)
        for i in reversed(range(len(self.encoders))):
            grad = ops.maxpool2x2_backward(grad, pools[i])
            grad = self.encoders[i].backward(grad + skip_grads[i])
        self._cache = None
        return grad


def build_network(cfg: Optional[NetworkConfig] = None, seed: int = 0, dtype=np.float32) -> UNet:
    net = UNet(cfg or NetworkConfig(), dtype)
    net.init(seed)
    return net


# --------------------------------------------------------------------------- checkpoints


def save_network(path, net: UNet, adam: Optional[AdamState] = None, seed: int = 0, epoch: int = 0) -> None:
    params, _ = net.parameters()
    tensors = {f"param/{k}": v for k, v in params.items()}
    tensors.update({f"buffer/{k}": v for k, v in net.buffers().items()})
    meta = {"kind": "gliomapipe-unet", "network": asdict(net.cfg), "seed": int(seed), "epoch": int(epoch)}
    if adam is not None:
        meta["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t}
        for k in params:
            if k in adam.m:
                tensors[f"adam_m/{k}"] = adam.m[k]
                tensors[f"adam_v/{k}"] = adam.v[k]
    save_checkpoint(path, tensors, meta)


def load_network(path) -> Tuple[UNet, dict, Optional[AdamState]]:
    tensors, meta = load_checkpoint(path)
    net = UNet(NetworkConfig(**meta["network"]))
    _load_state(net, {k: v for k, v in tensors.items() if not k.startswith("adam_")})
    adam = None
    if "adam" in meta:
        adam = AdamState(**meta["adam"])
        for k, v in tensors.items():
            if k.startswith("adam_m/"):
                adam.m[k[7:]] = v.copy()
            elif k.startswith("adam_v/"):
                adam.v[k[7:]] = v.copy()
    return net, meta, adam


def _state(net: UNet) -> Dict[str, np.ndarray]:
    params, _ = net.parameters()
    state = {f"param/{k}": v.copy() for k, v in params.items()}
    state.update({f"buffer/{k}": v.copy() for k, v in net.buffers().items()})
    return state


def _load_state(net: UNet, state: Dict[str, np.ndarray]) -> None:
    params, _ = net.parameters()
    targets = {f"param/{k}": v for k, v in params.items()}
    targets.update({f"buffer/{k}": v for k, v in net.buffers().items()})
    if set(targets) != set(state):
        raise ShapeError("checkpoint tensors do not match the network layout")
    for k, arr in targets.items():
        if arr.shape != state[k].shape:
            raise ShapeError(f"{k}: checkpoint shape {state[k].shape}, network shape {arr.shape}")
        arr[...] = state[k]


# --------------------------------------------------------------------------- training


def augment_hflip(images, labels, rng, p=0.5):
    """Mirror each sample along W with probability ``p``, images and labels alike."""
    images = images.copy()
    labels = labels.copy()
    flip = rng.random(images.shape[0]) < p
    images[flip] = images[flip][..., ::-1]
    labels[flip] = labels[flip][..., ::-1]
    return images, labels


def _pad_amounts(size: int, divisor: int) -> Tuple[int, int]:
    extra = -size % divisor
    return extra // 2, extra - extra // 2


def _pad_hw(x, divisor):
    (t, b), (l, r) = _pad_amounts(x.shape[-2], divisor), _pad_amounts(x.shape[-1], divisor)
    if not (t or b or l or r):
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(t, b), (l, r)]
    return np.pad(x, widths)


def collect_slices(studies: Sequence[Study], lesion_only: bool, divisor: int = 1):
    """Stack labelled axial slices of every study that has ground truth.

    Returns ``(images, classes)`` with shapes ``(S, 4, H, W)`` and ``(S, H, W)``.
    """
    images, classes = [], []
    for study in studies:
        if study.ground_truth is None:
            continue
        for _, x, plane in extract_axial_slices(study, lesion_only=lesion_only):
            images.append(x[0])
            classes.append(LABEL_TO_CLASS[plane])
    if not images:
        raise NoTrainingDataError("no labelled slices available for training")
    return _pad_hw(np.stack(images), divisor), _pad_hw(np.stack(classes), divisor)


@dataclass
class TrainingReport:
    epoch_losses: List[float] = field(default_factory=list)
    class_accuracy: List[List[float]] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)
    best_epoch: int = 0
    n_slices: int = 0


def _last_path(path: Path) -> Path:
    return path.with_name(path.name + ".last")


def train(net: UNet, studies: Sequence[Study], cfg: Optional[TrainConfig] = None,
          checkpoint_path=None, validation: Optional[Sequence[Study]] = None) -> TrainingReport:
    """Train ``net`` in place with Adam on weighted cross-entropy.

    After every epoch the current state is written to ``<checkpoint>.last`` and,
    when the epoch loss is the lowest so far, to ``checkpoint_path`` itself. On
    return the network holds the best-epoch weights.
    """
    cfg = cfg or TrainConfig()
    images, targets = collect_slices(studies, cfg.lesion_slices_only, net.divisor)
    val = collect_slices(validation, False, net.divisor) if validation else None
    rng = np.random.default_rng([cfg.seed, 1])
    adam = AdamState(lr=cfg.lr)
    params, grads = net.parameters()
    n_classes = net.cfg.n_classes
    report = TrainingReport(n_slices=len(images))
    best_loss, best_state = math.inf, None
    ckpt = Path(checkpoint_path) if checkpoint_path else None
    log.info("training on %d slices for %d epochs", len(images), cfg.epochs)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(images))
        losses, hits, counts = [], np.zeros(n_classes), np.zeros(n_classes)
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            xb, yb = images[idx], targets[idx]
            if cfg.augment_hflip:
                xb, yb = augment_hflip(xb, yb, rng)
            logits = net.forward(xb, training=True)
            loss, grad = softmax_weighted_ce(logits, yb, cfg.class_weights)
            net.zero_grad()
            net.backward(grad)
            adam_step(params, grads, adam)
            losses.append(loss)
            pred = logits.argmax(axis=1)
            for c in range(n_classes):
                sel = yb == c
                counts[c] += sel.sum()
                hits[c] += (pred[sel] == c).sum()
        epoch_loss = float(np.mean(losses))
        report.epoch_losses.append(epoch_loss)
        report.class_accuracy.append([float(h / n) if n else float("nan") for h, n in zip(hits, counts)])
        if val is not None:
            report.val_losses.append(evaluate_loss(net, val[0], val[1], cfg.class_weights))
        log.info("epoch %d loss %.5f", epoch, epoch_loss)

        if ckpt is not None:
            save_network(_last_path(ckpt), net, adam, cfg.seed, epoch)
        if epoch_loss < best_loss:
            best_loss, best_state = epoch_loss, _state(net)
            report.best_epoch = epoch
            if ckpt is not None:
                save_network(ckpt, net, adam, cfg.seed, epoch)

    _load_state(net, best_state)
    return report


def evaluate_loss(net: UNet, images, targets, class_weights=DEFAULT_CLASS_WEIGHTS, batch_size=8) -> float:
    """Weighted cross-entropy over a slice set in inference mode."""
    weights = np.asarray(class_weights, dtype=np.float64)
    total, norm = 0.0, 0.0
    for start in range(0, len(images), batch_size):
        yb = targets[start:start + batch_size]
        logits = net.forward(images[start:start + batch_size], training=False)
        loss, _ = softmax_weighted_ce(logits, yb, class_weights)
        w = weights[yb].sum()
        total += loss * w
        norm += w
    return total / norm


# --------------------------------------------------------------------------- inference


def predict_logits(net: UNet, images, batch_size: int = 8):
    """Inference-mode logits for ``(S, C, H, W)`` images of any H, W (zero-padded, then cropped)."""
    h, w = images.shape[-2:]
    (t, _), (l, _) = _pad_amounts(h, net.divisor), _pad_amounts(w, net.divisor)
    padded = _pad_hw(images, net.divisor)
    out = []
    for start in range(0, len(padded), batch_size):
        logits = net.forward(padded[start:start + batch_size], training=False)
        out.append(logits[:, :, t:t + h, l:l + w])
    return np.concatenate(out)


def segment_study(net: UNet, study: Study, batch_size: int = 8) -> SegmentationVolume:
    """Label every axial slice of ``study``; returns labels in {0, 1, 2, 4}."""
    stack = study.stacked()  # (4, nx, ny, nz)
    slices = np.ascontiguousarray(stack.transpose(3, 0, 1, 2))
    classes = predict_logits(net, slices, batch_size).argmax(axis=1)  # (nz, nx, ny)
    labels = CLASS_TO_LABEL[classes].transpose(1, 2, 0)
    return SegmentationVolume(labels, study.spacing)
