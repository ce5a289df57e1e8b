"""Small U-Net for membrane segmentation with injectable dropout.

Weights live in numpy arrays keyed by layer id; torch is used as the compute
engine (convolutions and autograd) with tensors rebuilt from those arrays, so
initialization, dropout masks, crop choices, and the Adam update are all
driven by seeded numpy streams and results are reproducible bit-for-bit on a
machine regardless of torch's own global RNG state.

Class convention: channel 0 is membrane (ground-truth label 0), channel 1 is
cell interior. Images are fed as intensities scaled to [0, 1].
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidSteps, NoLabels, ShapeError
from .images import GrayImage, LabelMap, ProbMap
from .rng import derive_seed, make_rng

__all__ = [
    "ModelConfig",
    "ModelParams",
    "TrainConfig",
    "set_compute_threads",
    "init_model",
    "train_steps",
    "predict",
    "predict_with_features",
    "predict_stochastic",
    "embed",
    "embed_images",
    "loss_and_grads",
    "save_checkpoint",
    "load_checkpoint",
]

_TORCH_READY = False
_TORCH_THREADS = 1


def set_compute_threads(n: int) -> None:
    """Cap engine worker threads; above 1 the reduction order may vary."""
    global _TORCH_THREADS, _TORCH_READY
    if n < 1:
        raise ValueError("thread count must be at least 1")
    _TORCH_THREADS = n
    if _TORCH_READY:
        import torch

        torch.set_num_threads(n)


def _torch():
    global _TORCH_READY
    import torch

    if not _TORCH_READY:
        torch.set_num_threads(_TORCH_THREADS)  # fixed order => reproducible sums
        _TORCH_READY = True
    return torch


@dataclass(frozen=True)
class ModelConfig:
    """U-Net shape: `depth` pooling stages, channels doubling from base."""

    depth: int = 3
    base_channels: int = 16
    num_classes: int = 2
    dropout_rate: float = 0.1
    input_size: int = 128

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2**self.depth

    def block_channels(self, stage: int) -> int:
        return self.base_channels * 2**stage

    def dropout_sites(self) -> tuple[str, ...]:
        encs = tuple(f"enc{d}" for d in range(self.depth))
        decs = tuple(f"dec{d}" for d in reversed(range(self.depth)))
        return encs + ("bottleneck",) + decs


def _layer_specs(config: ModelConfig):
    """(name, shape, fan_in) for every weight tensor, in forward order."""
    specs = []

    def conv(name, cin, cout, k):
        specs.append((f"{name}.weight", (cout, cin, k, k), cin * k * k))
        specs.append((f"{name}.bias", (cout,), cin * k * k))

    cin = 1
    for d in range(config.depth):
        ch = config.block_channels(d)
        conv(f"enc{d}.conv1", cin, ch, 3)
        conv(f"enc{d}.conv2", ch, ch, 3)
        cin = ch
    bott = config.bottleneck_channels
    conv("bottleneck.conv1", cin, bott, 3)
    conv("bottleneck.conv2", bott, bott, 3)
    upper = bott
    for d in reversed(range(config.depth)):
        ch = config.block_channels(d)
        # transposed conv stores (in, out, k, k)
        specs.append((f"dec{d}.up.weight", (upper, ch, 2, 2), upper * 4))
        specs.append((f"dec{d}.up.bias", (ch,), upper * 4))
        conv(f"dec{d}.conv1", 2 * ch, ch, 3)
        conv(f"dec{d}.conv2", ch, ch, 3)
        upper = ch
    conv("head", config.base_channels, config.num_classes, 1)
    return specs


@dataclass
class ModelParams:
    """Weights plus optimizer state; treat instances as immutable."""

    config: ModelConfig
    weights: dict[str, np.ndarray]
    opt_state: dict
    loss_history: tuple[float, ...] = ()

    def param_hash(self) -> str:
        """SHA-256 over the weights alone (optimizer state and history excluded)."""
        h = hashlib.sha256()
        for name in sorted(self.weights):
            arr = self.weights[name]
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(str(arr.dtype).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def n_parameters(self) -> int:
        return sum(int(a.size) for a in self.weights.values())

    def steps_trained(self) -> int:
        return int(self.opt_state.get("t", 0))


def _check_input_size(config: ModelConfig, size: int, what: str = "input_size"):
    stride = 2**config.depth
    if size % stride != 0 or size < stride:
        raise ShapeError(f"{what} {size} not divisible by 2^depth = {stride}")


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """He-normal convolution weights, zero biases; per-layer derived streams."""
    _check_input_size(config, config.input_size)
    weights = {}
    for name, shape, fan_in in _layer_specs(config):
        if name.endswith(".bias"):
            weights[name] = np.zeros(shape, dtype=np.float32)
        else:
            rng = make_rng(derive_seed(seed, "init", name))
            std = np.sqrt(2.0 / fan_in)
            weights[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    return ModelParams(config, weights, {"t": 0, "m": {}, "v": {}})


def _forward(torch, w, x, config: ModelConfig, masks=None, need_bottleneck=False,
             need_features=False):
    F = torch.nn.functional

    def drop(h, site):
        if masks is not None and site in masks:
            return h * masks[site]
        return h

    skips = []
    h = x
    for d in range(config.depth):
        h = F.relu(F.conv2d(h, w[f"enc{d}.conv1.weight"], w[f"enc{d}.conv1.bias"], padding=1))
        h = F.relu(F.conv2d(h, w[f"enc{d}.conv2.weight"], w[f"enc{d}.conv2.bias"], padding=1))
        h = drop(h, f"enc{d}")
        skips.append(h)
        h = F.max_pool2d(h, 2)
    h = F.relu(F.conv2d(h, w["bottleneck.conv1.weight"], w["bottleneck.conv1.bias"], padding=1))
    h = F.relu(F.conv2d(h, w["bottleneck.conv2.weight"], w["bottleneck.conv2.bias"], padding=1))
    bottleneck = h
    h = drop(h, "bottleneck")
    for d in reversed(range(config.depth)):
        h = F.conv_transpose2d(h, w[f"dec{d}.up.weight"], w[f"dec{d}.up.bias"], stride=2)
        h = torch.cat([skips[d], h], dim=1)
        h = F.relu(F.conv2d(h, w[f"dec{d}.conv1.weight"], w[f"dec{d}.conv1.bias"], padding=1))
        h = F.relu(F.conv2d(h, w[f"dec{d}.conv2.weight"], w[f"dec{d}.conv2.bias"], padding=1))
        h = drop(h, f"dec{d}")
    logits = F.conv2d(h, w["head.weight"], w["head.bias"])
    if need_bottleneck:
        return logits, bottleneck
    if need_features:
        return logits, h
    return logits


def _image_tensor(torch, image: GrayImage, dtype):
    arr = image.pixels.astype(np.float64) / 255.0
    return torch.from_numpy(arr).to(dtype)[None, None]


def _weight_tensors(torch, params: ModelParams, dtype, requires_grad=False):
    out = {}
    for name, arr in params.weights.items():
        # clone: .to() with a matching dtype would share the numpy buffer
        t = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype).clone()
        t.requires_grad_(requires_grad)
        out[name] = t
    return out


def _sample_masks(rng, config: ModelConfig, size: int, torch, dtype):
    """Inverted-dropout masks per site, in canonical site order."""
    p = config.dropout_rate
    masks = {}
    for site in config.dropout_sites():
        if site.startswith("enc"):
            stage = int(site[3:])
            ch, s = config.block_channels(stage), size // 2**stage
        elif site == "bottleneck":
            ch, s = config.bottleneck_channels, size // 2**config.depth
        else:
            stage = int(site[3:])
            ch, s = config.block_channels(stage), size // 2**stage
        keep = (rng.random((1, ch, s, s)) >= p).astype(np.float32) / (1.0 - p)
        masks[site] = torch.from_numpy(keep).to(dtype)
    return masks


@dataclass(frozen=True)
class TrainConfig:
    """Step budget, batching, and augmentation for gradient updates."""

    step_budget: int = 10000
    batch_size: int = 1
    learning_rate: float = 1e-3
    random_crop: bool = True
    flip_augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.step_budget < 1:
            raise InvalidSteps("step_budget must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def _target_classes(labels: np.ndarray) -> np.ndarray:
    return (labels != 0).astype(np.int64)  # class 0 = membrane


def _pick_window(rng, image: GrayImage, labels: LabelMap, config: ModelConfig,
                 train_cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    size = config.input_size
    h, w = image.pixels.shape
    if h < size or w < size:
        raise ShapeError(f"image {h}x{w} smaller than model input {size}")
    if (h, w) == (size, size):
        pix, lab = image.pixels, labels.labels
    elif train_cfg.random_crop:
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        pix = image.pixels[top : top + size, left : left + size]
        lab = labels.labels[top : top + size, left : left + size]
    else:
        pix, lab = image.pixels[:size, :size], labels.labels[:size, :size]
    if train_cfg.flip_augment:
        if rng.random() < 0.5:
            pix, lab = pix[:, ::-1], lab[:, ::-1]
        if rng.random() < 0.5:
            pix, lab = pix[::-1, :], lab[::-1, :]
    return np.ascontiguousarray(pix), np.ascontiguousarray(lab)


def train_steps(
    params: ModelParams,
    samples: Sequence[tuple[GrayImage, LabelMap]],
    train_cfg: TrainConfig,
    steps: int,
) -> ModelParams:
    """Apply exactly `steps` Adam updates of pixel cross-entropy; functional.

    The random stream is re-derived from (seed, global step index) at every
    update, so a budget split across consecutive calls matches a single call.
    """
    if steps == 0:
        raise InvalidSteps("0 gradient updates requested")
    if steps < 0:
        raise InvalidSteps(f"negative step count {steps}")
    if not samples:
        raise NoLabels("empty labeled set")
    for img, lab in samples:
        if lab is None:
            raise NoLabels("sample without ground truth in labeled set")
        if img.pixels.shape != lab.labels.shape:
            raise ShapeError("image/labels shape mismatch")
    torch = _torch()
    config = params.config
    dtype = torch.float32

    w = _weight_tensors(torch, params, dtype, requires_grad=True)
    m = {k: v.copy() for k, v in params.opt_state.get("m", {}).items()}
    v = {k: x.copy() for k, x in params.opt_state.get("v", {}).items()}
    for name, arr in params.weights.items():
        m.setdefault(name, np.zeros_like(arr))
        v.setdefault(name, np.zeros_like(arr))
    t = params.steps_trained()
    b1, b2, eps = 0.9, 0.999, 1e-8
    lr = train_cfg.learning_rate
    losses = []
    for _ in range(steps):
        # keyed by global step: splitting a budget across calls changes nothing
        rng = make_rng(derive_seed(train_cfg.seed, "train", t))
        batch_px, batch_lb = [], []
        for _ in range(train_cfg.batch_size):
            idx = int(rng.integers(0, len(samples)))
            pix, lab = _pick_window(rng, samples[idx][0], samples[idx][1], config, train_cfg)
            batch_px.append(pix.astype(np.float64) / 255.0)
            batch_lb.append(_target_classes(lab))
        x = torch.from_numpy(np.stack(batch_px)[:, None]).to(dtype)
        target = torch.from_numpy(np.stack(batch_lb))
        masks = (
            _sample_masks(rng, config, config.input_size, torch, dtype)
            if config.dropout_rate > 0
            else None
        )
        logits = _forward(torch, w, x, config, masks=masks)
        loss = torch.nn.functional.cross_entropy(logits, target)
        for tensor in w.values():
            tensor.grad = None
        loss.backward()
        losses.append(float(loss.detach()))
        t += 1
        with torch.no_grad():
            for name, tensor in w.items():
                g = tensor.grad.numpy().astype(np.float32)
                m[name] = b1 * m[name] + (1 - b1) * g
                v[name] = b2 * v[name] + (1 - b2) * g * g
                mhat = m[name] / (1 - b1**t)
                vhat = v[name] / (1 - b2**t)
                step = lr * mhat / (np.sqrt(vhat) + eps)
                tensor.copy_(torch.from_numpy(tensor.numpy() - step))
    new_weights = {name: w[name].detach().numpy().astype(np.float32) for name in w}
    return ModelParams(
        config,
        new_weights,
        {"t": t, "m": m, "v": v},
        params.loss_history + tuple(losses),
    )


def _prepare_image(params: ModelParams, image: GrayImage):
    h, w = image.pixels.shape
    if h != w:
        raise ShapeError(f"expected square input, got {h}x{w}")
    _check_input_size(params.config, h, "image size")
    return h


def predict(params: ModelParams, image: GrayImage) -> ProbMap:
    """Deterministic class probabilities (dropout disabled)."""
    torch = _torch()
    _prepare_image(params, image)
    with torch.no_grad():
        w = _weight_tensors(torch, params, torch.float32)
        x = _image_tensor(torch, image, torch.float32)
        logits = _forward(torch, w, x, params.config)
        probs = torch.softmax(logits, dim=1)[0].permute(1, 2, 0).numpy()
    return ProbMap(probs.astype(np.float32))


def predict_with_features(params: ModelParams, image: GrayImage) -> tuple[ProbMap, np.ndarray]:
    """Deterministic probabilities plus the pre-head decoder activation map.

    The feature map has shape (height, width, base_channels).
    """
    torch = _torch()
    _prepare_image(params, image)
    with torch.no_grad():
        w = _weight_tensors(torch, params, torch.float32)
        x = _image_tensor(torch, image, torch.float32)
        logits, feats = _forward(torch, w, x, params.config, need_features=True)
        probs = torch.softmax(logits, dim=1)[0].permute(1, 2, 0).numpy()
        fmap = feats[0].permute(1, 2, 0).numpy()
    return ProbMap(probs.astype(np.float32)), fmap.astype(np.float32)


def predict_stochastic(params: ModelParams, image: GrayImage, seed: int) -> ProbMap:
    """One dropout-on forward pass; masks are a pure function of the seed."""
    if params.config.dropout_rate == 0:
        return predict(params, image)
    torch = _torch()
    size = _prepare_image(params, image)
    rng = make_rng(derive_seed(seed, "dropout"))
    with torch.no_grad():
        w = _weight_tensors(torch, params, torch.float32)
        x = _image_tensor(torch, image, torch.float32)
        masks = _sample_masks(rng, params.config, size, torch, torch.float32)
        logits = _forward(torch, w, x, params.config, masks=masks)
        probs = torch.softmax(logits, dim=1)[0].permute(1, 2, 0).numpy()
    return ProbMap(probs.astype(np.float32))


def embed(params: ModelParams, image: GrayImage) -> np.ndarray:
    """Global spatial max of the bottleneck activation; length = bottleneck channels."""
    torch = _torch()
    _prepare_image(params, image)
    with torch.no_grad():
        w = _weight_tensors(torch, params, torch.float32)
        x = _image_tensor(torch, image, torch.float32)
        _, bottleneck = _forward(torch, w, x, params.config, need_bottleneck=True)
        vec = bottleneck[0].amax(dim=(1, 2)).numpy()
    return vec.astype(np.float32)


def embed_images(params: ModelParams, images: Sequence[GrayImage]) -> np.ndarray:
    """Per-image embeddings, computed independently (batch-context free)."""
    return np.stack([embed(params, img) for img in images])


def loss_and_grads(
    params: ModelParams,
    image: GrayImage,
    labels: LabelMap,
    masks: Optional[dict] = None,
    float64: bool = False,
):
    """Cross-entropy loss and analytic weight gradients for one image."""
    torch = _torch()
    dtype = torch.float64 if float64 else torch.float32
    w = _weight_tensors(torch, params, dtype, requires_grad=True)
    x = _image_tensor(torch, image, dtype)
    target = torch.from_numpy(_target_classes(labels.labels))[None]
    logits = _forward(torch, w, x, params.config, masks=masks)
    loss = torch.nn.functional.cross_entropy(logits, target)
    loss.backward()
    grads = {name: tensor.grad.numpy().copy() for name, tensor in w.items()}
    return float(loss.detach()), grads


CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path: str | Path) -> Path:
    """npz weight blob + JSON descriptor (architecture, hash, version)."""
    path = Path(path).with_suffix(".npz")  # np.savez appends .npz on its own
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"w/{k}": v for k, v in params.weights.items()}
    arrays.update({f"m/{k}": v for k, v in params.opt_state.get("m", {}).items()})
    arrays.update({f"v/{k}": v for k, v in params.opt_state.get("v", {}).items()})
    arrays["t"] = np.array(params.steps_trained(), dtype=np.int64)
    arrays["loss_history"] = np.asarray(params.loss_history, dtype=np.float64)
    np.savez(path, **arrays)
    descriptor = {
        "version": CHECKPOINT_VERSION,
        "config": {
            "depth": params.config.depth,
            "base_channels": params.config.base_channels,
            "num_classes": params.config.num_classes,
            "dropout_rate": params.config.dropout_rate,
            "input_size": params.config.input_size,
        },
        "param_hash": params.param_hash(),
        "steps_trained": params.steps_trained(),
    }
    path.with_suffix(".json").write_text(json.dumps(descriptor, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path).with_suffix(".npz")
    descriptor = json.loads(path.with_suffix(".json").read_text())
    data = np.load(path)
    weights, m, v = {}, {}, {}
    for key in data.files:
        if key.startswith("w/"):
            weights[key[2:]] = data[key]
        elif key.startswith("m/"):
            m[key[2:]] = data[key]
        elif key.startswith("v/"):
            v[key[2:]] = data[key]
    params = ModelParams(
        ModelConfig(**descriptor["config"]),
        weights,
        {"t": int(data["t"]), "m": m, "v": v},
        tuple(float(x) for x in data["loss_history"]),
    )
    if params.param_hash() != descriptor["param_hash"]:
        raise ValueError(f"{path}: weight blob does not match descriptor hash")
    return params
