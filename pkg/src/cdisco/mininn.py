"""Self-contained differentiable models and synthetic data generators.

Hand-written forward/backward passes for a small MLP and a CNN
(3x3 same-padding conv stages -> rectifier -> global average pooling
-> dense softmax head), plain SGD training, planted-pattern image and
tabular generators, and dump production for the discovery engine.
Everything is seeded and bit-reproducible.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericalError, ShapeError, ValidationError
from .store import ActivationDump
from .tensor import DenseTensor, LabeledBatch, read_tensor, write_tensor

PATTERN_NAMES = ("h_stripes", "v_stripes", "dots", "checkerboard")


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _he_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)


# ---------------------------------------------------------------------------
# MLP

class MlpModel:
    """Dense rectifier network; one hidden layer is the analyzed latent space."""

    def __init__(self, layer_sizes, seed: int = 0, analyzed_layer: int | None = None):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 3:
            raise ValidationError("need input, at least one hidden, and output")
        rng = np.random.default_rng(seed)
        self.layer_sizes = sizes
        self.weights = [
            _he_init(rng, sizes[i], (sizes[i], sizes[i + 1]))
            for i in range(len(sizes) - 1)]
        self.biases = [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)]
        # index of the hidden activation used as the latent space (1-based
        # over layers; default: the last hidden layer)
        self.analyzed_layer = analyzed_layer if analyzed_layer is not None \
            else len(sizes) - 2
        if not 1 <= self.analyzed_layer <= len(sizes) - 2:
            raise ValidationError(
                f"analyzed_layer {self.analyzed_layer} is not a hidden layer")

    @property
    def class_count(self) -> int:
        return self.layer_sizes[-1]

    @property
    def latent_dim(self) -> int:
        return self.layer_sizes[self.analyzed_layer]

    def _forward_cache(self, x: np.ndarray):
        acts = [x]
        pre = []
        h = x
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = z if i == n_layers - 1 else np.maximum(z, 0.0)
            acts.append(h)
        return pre, acts

    def forward(self, x) -> np.ndarray:
        """Softmax class probabilities, [n, K]."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.layer_sizes[0]:
            raise ShapeError(f"expected [n, {self.layer_sizes[0]}] input, got "
                             f"{x.shape}")
        _, acts = self._forward_cache(x)
        return _softmax(acts[-1])

    predict_proba = forward

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        _, acts = self._forward_cache(x)
        return acts[-1]

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def latent(self, x) -> np.ndarray:
        """Activations of the analyzed hidden layer, [n, d]."""
        x = np.asarray(x, dtype=np.float64)
        _, acts = self._forward_cache(x)
        return acts[self.analyzed_layer]

    def rectifier_inputs(self, x) -> list[np.ndarray]:
        """Pre-activations feeding a rectifier (the output layer has none)."""
        pre, _ = self._forward_cache(np.asarray(x, dtype=np.float64))
        return pre[:-1]

    def latent_gradient(self, x, class_id: int) -> np.ndarray:
        """d logit_class / d latent, per sample ([n, d], logit convention)."""
        if not 0 <= class_id < self.class_count:
            raise ValidationError(f"class {class_id} outside [0, "
                                  f"{self.class_count})")
        x = np.asarray(x, dtype=np.float64)
        pre, acts = self._forward_cache(x)
        n = x.shape[0]
        grad = np.tile(self.weights[-1][:, class_id], (n, 1))
        for layer in range(len(self.weights) - 2, self.analyzed_layer - 1, -1):
            grad = grad * (pre[layer][:, :] > 0)
            grad = grad @ self.weights[layer].T
        return grad

    def input_jacobian(self, x) -> DenseTensor:
        """Mean over samples of d latent / d input, [d, m]."""
        x = np.asarray(x, dtype=np.float64)
        pre, _ = self._forward_cache(x)
        m = self.layer_sizes[0]
        total = np.zeros((self.latent_dim, m))
        for i in range(x.shape[0]):
            jac = np.eye(m)
            for layer in range(self.analyzed_layer):
                jac = jac @ self.weights[layer]
                jac = jac * (pre[layer][i] > 0)[None, :]
            total += jac.T
        return DenseTensor.from_array(total / x.shape[0])

    def _train_step(self, xb: np.ndarray, yb: np.ndarray, lr: float) -> float:
        pre, acts = self._forward_cache(xb)
        probs = _softmax(acts[-1])
        n = xb.shape[0]
        loss = float(-np.mean(np.log(probs[np.arange(n), yb] + 1e-12)))
        delta = probs.copy()
        delta[np.arange(n), yb] -= 1.0
        delta /= n
        for layer in range(len(self.weights) - 1, -1, -1):
            gw = acts[layer].T @ delta
            gb = delta.sum(axis=0)
            if layer > 0:
                delta = (delta @ self.weights[layer].T) * (pre[layer - 1] > 0)
            self.weights[layer] -= lr * gw
            self.biases[layer] -= lr * gb
        return loss

    def parameters(self):
        for i in range(len(self.weights)):
            yield f"w{i}", self.weights[i]
            yield f"b{i}", self.biases[i]

    def config(self) -> dict:
        return {"type": "mlp", "layer_sizes": list(self.layer_sizes),
                "analyzed_layer": self.analyzed_layer}


# ---------------------------------------------------------------------------
# CNN

def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padding 3x3 convolution as nine shifted matmuls."""
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    padded = np.zeros((n, h + 2, wd + 2, cin), dtype=np.float64)
    padded[:, 1:-1, 1:-1, :] = x
    out = np.zeros((n, h, wd, cout), dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            patch = padded[:, dy:dy + h, dx:dx + wd, :].reshape(-1, cin)
            out += (patch @ w[dy, dx]).reshape(n, h, wd, cout)
    return out + b


def _conv3x3_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    padded = np.zeros((n, h + 2, wd + 2, cin), dtype=np.float64)
    padded[:, 1:-1, 1:-1, :] = x
    grad_w = np.zeros_like(w)
    grad_pad = np.zeros_like(padded)
    go = grad_out.reshape(-1, cout)
    for dy in range(3):
        for dx in range(3):
            patch = padded[:, dy:dy + h, dx:dx + wd, :].reshape(-1, cin)
            grad_w[dy, dx] = patch.T @ go
            grad_pad[:, dy:dy + h, dx:dx + wd, :] += \
                (go @ w[dy, dx].T).reshape(n, h, wd, cin)
    grad_b = grad_out.sum(axis=(0, 1, 2))
    return grad_w, grad_b, grad_pad[:, 1:-1, 1:-1, :]


class ConvModel:
    """Conv stages (3x3, stride 1, same padding) -> GAP -> dense softmax.

    The analyzed layer is the last conv stage after the rectifier,
    shaped [H, W, d].
    """

    def __init__(self, image_shape, channels, class_count: int, seed: int = 0,
                 layer_name: str = "conv_last"):
        self.image_shape = tuple(int(s) for s in image_shape)  # (H, W, C)
        if len(self.image_shape) != 3:
            raise ValidationError("image_shape must be (H, W, C)")
        chans = tuple(int(c) for c in channels)
        if not chans:
            raise ValidationError("need at least one conv stage")
        rng = np.random.default_rng(seed)
        self.channels = chans
        self.class_count = int(class_count)
        self.layer_name = layer_name
        self.conv_weights = []
        self.conv_biases = []
        cin = self.image_shape[2]
        for cout in chans:
            self.conv_weights.append(_he_init(rng, 9 * cin, (3, 3, cin, cout)))
            self.conv_biases.append(np.zeros(cout))
            cin = cout
        self.head_weights = _he_init(rng, chans[-1], (chans[-1], class_count))
        self.head_bias = np.zeros(class_count)

    @property
    def latent_dim(self) -> int:
        return self.channels[-1]

    def _forward_cache(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != self.image_shape:
            raise ShapeError(f"expected [n, {self.image_shape}] images, got "
                             f"{x.shape}")
        pre = []
        acts = [x]
        h = x
        for w, b in zip(self.conv_weights, self.conv_biases):
            z = _conv3x3(h, w, b)
            pre.append(z)
            h = np.maximum(z, 0.0)
            acts.append(h)
        pooled = h.mean(axis=(1, 2))
        logits = pooled @ self.head_weights + self.head_bias
        return pre, acts, pooled, logits

    def forward(self, x) -> np.ndarray:
        return _softmax(self._forward_cache(x)[3])

    predict_proba = forward

    def logits(self, x) -> np.ndarray:
        return self._forward_cache(x)[3]

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def spatial_features(self, x) -> np.ndarray:
        """Analyzed-layer activations, [n, H, W, d]."""
        return self._forward_cache(x)[1][-1]

    def rectifier_inputs(self, x) -> list[np.ndarray]:
        """Pre-activations feeding a rectifier (every conv stage has one)."""
        return self._forward_cache(x)[0]

    def pooled_features(self, x) -> np.ndarray:
        return self._forward_cache(x)[2]

    def latent_gradient_spatial(self, x, class_id: int) -> np.ndarray:
        """d logit_class / d analyzed activations, [n, H, W, d].

        The head reads the pooled features, so the gradient is the head
        row spread uniformly over the spatial positions.
        """
        if not 0 <= class_id < self.class_count:
            raise ValidationError(f"class {class_id} outside [0, "
                                  f"{self.class_count})")
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        h, w = self.image_shape[0], self.image_shape[1]
        row = self.head_weights[:, class_id] / (h * w)
        return np.broadcast_to(row, (n, h, w, row.size)).copy()

    def _train_step(self, xb: np.ndarray, yb: np.ndarray, lr: float) -> float:
        pre, acts, pooled, logits = self._forward_cache(xb)
        probs = _softmax(logits)
        n = xb.shape[0]
        loss = float(-np.mean(np.log(probs[np.arange(n), yb] + 1e-12)))
        delta = probs.copy()
        delta[np.arange(n), yb] -= 1.0
        delta /= n
        grad_head_w = pooled.T @ delta
        grad_head_b = delta.sum(axis=0)
        grad_pooled = delta @ self.head_weights.T
        h, w = self.image_shape[0], self.image_shape[1]
        grad_act = np.broadcast_to(
            grad_pooled[:, None, None, :] / (h * w), acts[-1].shape)
        grad_conv = []
        for stage in range(len(self.conv_weights) - 1, -1, -1):
            grad_z = grad_act * (pre[stage] > 0)
            gw, gb, grad_act = _conv3x3_backward(
                acts[stage], self.conv_weights[stage], grad_z)
            grad_conv.append((gw, gb))
        grad_conv.reverse()
        for stage, (gw, gb) in enumerate(grad_conv):
            self.conv_weights[stage] -= lr * gw
            self.conv_biases[stage] -= lr * gb
        self.head_weights -= lr * grad_head_w
        self.head_bias -= lr * grad_head_b
        return loss

    def parameters(self):
        for i in range(len(self.conv_weights)):
            yield f"conv{i}_w", self.conv_weights[i]
            yield f"conv{i}_b", self.conv_biases[i]
        yield "head_w", self.head_weights
        yield "head_b", self.head_bias

    def config(self) -> dict:
        return {"type": "conv", "image_shape": list(self.image_shape),
                "channels": list(self.channels),
                "class_count": self.class_count,
                "layer_name": self.layer_name}


# ---------------------------------------------------------------------------
# training

def train(model, data: LabeledBatch, epochs: int, lr: float, seed: int = 0,
          batch_size: int = 64) -> list[float]:
    """Plain minibatch SGD with cross-entropy; returns accuracy history.

    Raises NumericalError (naming the epoch) if the loss stops being
    finite. ``lr=0`` leaves the model bit-exactly unchanged.
    """
    if lr < 0:
        raise ValidationError(f"learning rate must be >= 0, got {lr}")
    x = data.features.array.astype(np.float64)
    y = np.asarray(data.labels)
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss = model._train_step(x[idx], y[idx], lr)
            if not math.isfinite(loss):
                raise NumericalError(f"training diverged at epoch {epoch}")
        history.append(float(np.mean(model.predict(x) == y)))
    return history


# ---------------------------------------------------------------------------
# synthetic images

@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-pattern image task description.

    Each sample is a texture patch at a random offset over Gaussian
    background noise. With ``decoy_amplitude > 0`` a patch of another
    class's pattern is planted on the opposite side: both amplitudes
    jitter per sample with overlapping ranges (the label always belongs
    to the stronger patch), so the model must weigh competing evidence
    instead of thresholding, and removing the main pattern flips the
    prediction to the decoy's class (mirroring natural images, where
    occluding one concept reveals others). ``superposition`` maps a
    class index to a pattern pair; samples of that class carry either
    pattern under the same label.
    """

    classes: tuple[str, ...]
    image_size: tuple[int, int] = (16, 16)
    patch_size: int = 8
    noise_std: float = 0.1
    amplitude: float = 1.0
    decoy_amplitude: float = 0.0
    amplitude_jitter: tuple[float, float] = (0.85, 1.2)
    decoy_margin: float = 0.15
    superposition: dict[int, tuple[str, str]] | None = None

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        for name in self.classes:
            if name not in PATTERN_NAMES:
                raise ValidationError(f"unknown pattern {name!r}")
        if self.superposition:
            for cls, pair in self.superposition.items():
                if not 0 <= cls < len(self.classes) or len(pair) != 2:
                    raise ValidationError("bad superposition pairing")
                for name in pair:
                    if name not in PATTERN_NAMES:
                        raise ValidationError(f"unknown pattern {name!r}")


def pattern_texture(kind: str, patch_size: int = 8) -> np.ndarray:
    """Texture tile for one pattern kind, scaled to roughly equal energy."""
    t = np.zeros((patch_size, patch_size), dtype=np.float64)
    yy, xx = np.mgrid[0:patch_size, 0:patch_size]
    if kind == "h_stripes":
        t[0::2, :] = 1.0
    elif kind == "v_stripes":
        t[:, 0::2] = 1.0
    elif kind == "dots":
        # isolated pixels; doubled amplitude keeps the pooled energy
        # comparable to the stripe patterns
        t[0::2, 0::2] = 2.0
    elif kind == "checkerboard":
        # signed 2x2 cells sum to zero over any 4x4 window, so neither
        # background noise nor a constant occlusion fill carries any
        # checkerboard evidence
        t[((yy // 2) + (xx // 2)) % 2 == 0] = 1.0
        t[((yy // 2) + (xx // 2)) % 2 == 1] = -1.0
    else:
        raise ValidationError(f"unknown pattern {kind!r}")
    return t


def gen_images(spec: SyntheticSpec, n_per_class: int, seed: int
               ) -> tuple[LabeledBatch, DenseTensor, tuple[str, ...]]:
    """Seeded planted-pattern images with per-sample ground-truth masks.

    Returns the batch, binary masks [N, H, W] marking the main patch,
    and the pattern kind drawn for each sample.
    """
    rng = np.random.default_rng(seed)
    h, w = spec.image_size
    ps = spec.patch_size
    if ps > min(h, w):
        raise ValidationError("patch larger than the image")
    k_count = len(spec.classes)
    lo, hi = spec.amplitude_jitter
    images, labels, masks, kinds = [], [], [], []
    for cls in range(k_count):
        options = [spec.classes[cls]]
        if spec.superposition and cls in spec.superposition:
            options = list(spec.superposition[cls])
        for _ in range(n_per_class):
            kind = options[int(rng.integers(0, len(options)))]
            img = rng.normal(0.0, spec.noise_std, (h, w))
            side = int(rng.integers(0, 2))
            main_x = 0 if side == 0 else w - ps
            main_y = int(rng.integers(0, h - ps + 1))
            main_amp = spec.amplitude * rng.uniform(lo, hi)
            img[main_y:main_y + ps, main_x:main_x + ps] += \
                main_amp * pattern_texture(kind, ps)
            if spec.decoy_amplitude > 0.0 and k_count > 1:
                # the weaker patch comes from a random other class; the
                # label stays with the stronger one by construction
                other = int(rng.integers(0, k_count - 1))
                decoy_kind = spec.classes[other if other < cls else other + 1]
                decoy_amp = spec.decoy_amplitude * rng.uniform(lo, hi)
                cap = main_amp - spec.decoy_margin * spec.amplitude
                decoy_amp = min(decoy_amp, cap)
                decoy_x = w - ps if side == 0 else 0
                decoy_y = int(rng.integers(0, h - ps + 1))
                if decoy_amp > 0.0:
                    img[decoy_y:decoy_y + ps, decoy_x:decoy_x + ps] += \
                        decoy_amp * pattern_texture(decoy_kind, ps)
            mask = np.zeros((h, w), dtype=np.float64)
            mask[main_y:main_y + ps, main_x:main_x + ps] = 1.0
            images.append(img[:, :, None])
            labels.append(cls)
            masks.append(mask)
            kinds.append(kind)
    batch = LabeledBatch(
        features=DenseTensor.from_array(np.stack(images)),
        labels=tuple(labels),
        class_count=k_count,
    )
    return batch, DenseTensor.from_array(np.stack(masks)), tuple(kinds)


def box_blur(image: np.ndarray, size: int = 5, passes: int = 2) -> np.ndarray:
    """Repeated box filter with edge padding; heavy smoothing for size 5+."""
    out = image.astype(np.float64)
    r = size // 2
    for _ in range(passes):
        padded = np.pad(out, ((r, r), (r, r), (0, 0)), mode="edge")
        acc = np.zeros_like(out)
        for dy in range(size):
            for dx in range(size):
                acc += padded[dy:dy + out.shape[0], dx:dx + out.shape[1]]
        out = acc / (size * size)
    return out


def corrupt_samples(batch: LabeledBatch, fraction: float, seed: int,
                    blur_size: int = 5, blur_passes: int = 2
                    ) -> tuple[LabeledBatch, tuple[int, ...]]:
    """Blur a random sample fraction heavily and flip their labels."""
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    n = batch.n
    count = max(1, int(round(fraction * n)))
    chosen = np.sort(rng.choice(n, size=count, replace=False))
    features = batch.features.array.copy()
    labels = list(batch.labels)
    for i in chosen:
        features[i] = box_blur(features[i], size=blur_size, passes=blur_passes)
        labels[i] = (labels[i] + 1) % batch.class_count
    new_batch = LabeledBatch(
        features=DenseTensor.from_array(features),
        labels=tuple(labels),
        class_count=batch.class_count,
        sample_ids=batch.sample_ids,
    )
    return new_batch, tuple(int(i) for i in chosen)


# ---------------------------------------------------------------------------
# synthetic tabular data

TABULAR_COEFFS = (1.5, -2.0, 1.0, -1.25, 0.75)


def gen_tabular(m_features: int, active_features, n: int, noise_std: float,
                seed: int) -> LabeledBatch:
    """Binary labels from a fixed linear threshold on the active features.

    All features are standard normal; only the active ones enter the
    label score (plus optional Gaussian label noise).
    """
    active = tuple(int(a) for a in active_features)
    if not active or len(active) > len(TABULAR_COEFFS):
        raise ValidationError(
            f"need 1..{len(TABULAR_COEFFS)} active features, got {len(active)}")
    for a in active:
        if not 0 <= a < m_features:
            raise ValidationError(f"active feature {a} outside [0, {m_features})")
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.0, (n, m_features))
    score = np.zeros(n)
    for coeff, a in zip(TABULAR_COEFFS, active):
        score += coeff * x[:, a]
    if noise_std > 0:
        score += rng.normal(0.0, noise_std, n)
    labels = (score > 0).astype(int)
    return LabeledBatch(
        features=DenseTensor.from_array(x),
        labels=tuple(int(v) for v in labels),
        class_count=2,
    )


def gen_sparse_features(n_features: int, n_per_class: int, seed: int,
                        superposed_pair: tuple[int, int] = (0, 1),
                        noise_std: float = 0.05
                        ) -> tuple[LabeledBatch, tuple[int, ...]]:
    """One-active-feature samples with one class covering two features.

    Class 0 samples activate either feature of ``superposed_pair``;
    class k >= 1 activates feature k+1. With more features than hidden
    units downstream, this forces latent superposition. Returns the
    batch and the active feature per sample.
    """
    if n_features < 3:
        raise ValidationError("need at least 3 features")
    a, b = superposed_pair
    if not (0 <= a < n_features and 0 <= b < n_features and a != b):
        raise ValidationError(f"bad superposed pair {superposed_pair}")
    rng = np.random.default_rng(seed)
    k_count = n_features - 1
    rows, labels, active = [], [], []
    others = [f for f in range(n_features) if f not in (a, b)]
    for cls in range(k_count):
        for _ in range(n_per_class):
            feat = (a if rng.random() < 0.5 else b) if cls == 0 \
                else others[cls - 1]
            x = rng.normal(0.0, noise_std, n_features)
            x[feat] += 1.0
            rows.append(x)
            labels.append(cls)
            active.append(feat)
    batch = LabeledBatch(
        features=DenseTensor.from_array(np.stack(rows)),
        labels=tuple(labels),
        class_count=k_count,
    )
    return batch, tuple(active)


# ---------------------------------------------------------------------------
# dumps and checkpoints

def make_dump(model, data: LabeledBatch, tracked_classes,
              include_spatial: bool = True) -> ActivationDump:
    """Produce an ActivationDump from a trained model on a batch.

    Convolutional models store per-class sensitivities pooled after the
    feature/gradient product; dense models store plain latent gradients
    of the class logits.
    """
    tracked = tuple(int(c) for c in tracked_classes)
    if not tracked:
        raise ValidationError("need at least one tracked class")
    x = data.features.array.astype(np.float64)
    if isinstance(model, ConvModel):
        spatial = model.spatial_features(x)
        pooled = spatial.mean(axis=(1, 2))
        per_class = []
        for cls in tracked:
            grad = model.latent_gradient_spatial(x, cls)
            per_class.append((spatial * grad).mean(axis=(1, 2)))
        gradients = np.stack(per_class, axis=1)
        return ActivationDump(
            layer_name=model.layer_name,
            pooled=DenseTensor.from_array(pooled),
            gradients=DenseTensor.from_array(gradients),
            tracked_classes=tracked,
            labels=data.labels,
            sample_ids=data.sample_ids,
            class_count=data.class_count,
            spatial=DenseTensor.from_array(spatial) if include_spatial else None,
            gradient_content="pooled_product",
        )
    if isinstance(model, MlpModel):
        pooled = model.latent(x)
        per_class = [model.latent_gradient(x, cls) for cls in tracked]
        gradients = np.stack(per_class, axis=1)
        return ActivationDump(
            layer_name=f"hidden_{model.analyzed_layer}",
            pooled=DenseTensor.from_array(pooled),
            gradients=DenseTensor.from_array(gradients),
            tracked_classes=tracked,
            labels=data.labels,
            sample_ids=data.sample_ids,
            class_count=data.class_count,
            gradient_content="latent_gradient",
        )
    raise ValidationError(f"unsupported model type {type(model).__name__}")


def save_model(model, dir_path) -> None:
    """Checkpoint: architecture manifest plus one CDAD file per tensor."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for name, arr in model.parameters():
        write_tensor(DenseTensor.from_array(arr), root / f"{name}.cdad")
        names.append(name)
    manifest = dict(model.config())
    manifest["tensors"] = names
    (root / "model.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_model(dir_path):
    root = Path(dir_path)
    manifest_path = root / "model.json"
    if not manifest_path.is_file():
        raise ValidationError(f"{root}: model.json not found")
    manifest = json.loads(manifest_path.read_text())
    kind = manifest.get("type")
    if kind == "mlp":
        model = MlpModel(manifest["layer_sizes"],
                         analyzed_layer=manifest.get("analyzed_layer"))
    elif kind == "conv":
        model = ConvModel(manifest["image_shape"], manifest["channels"],
                          manifest["class_count"],
                          layer_name=manifest.get("layer_name", "conv_last"))
    else:
        raise ValidationError(f"unknown model type {kind!r}")
    tensors = {}
    for name in manifest["tensors"]:
        path = root / f"{name}.cdad"
        if not path.is_file():
            raise ValidationError(f"{root}: missing tensor {name!r}")
        tensors[name] = read_tensor(path).array.astype(np.float64)
    for name, arr in model.parameters():
        if name not in tensors:
            raise ValidationError(f"checkpoint missing tensor {name!r}")
        if tensors[name].shape != arr.shape:
            raise ValidationError(f"tensor {name!r} shape mismatch")
        arr[...] = tensors[name]
    return model
