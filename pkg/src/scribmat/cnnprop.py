"""Per-image CNN label propagation with its own forward/backward passes.

A small two-branch network is trained from scratch on each session's
confidently labeled superpixels: a visual branch (three strided 3x3
convolutions, global average pooling, linear embedding) over the
superpixel's bounding-box patch, and a spatial branch (one linear layer)
over the patch center. The 256-d embeddings are summed, rectified and
mapped to class scores. Only foreground/background are supervised.
Gradients are computed analytically; no autograd framework is used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .labelstate import LabelClass

CHECKPOINT_MAGIC = b"SSCN"
CHECKPOINT_VERSION = 1

HARVEST_CONFIDENCE = 0.9
# Confidence gate for the net update. None re-splits every unlabeled
# superpixel: chain propagation is local, so a same-class island far from
# its scribbles ends up confidently wrong and a gate would block the only
# mechanism able to repair it. The unknown mass and hard labels are
# preserved either way.
UPDATE_GATE = None


class HarvestError(Exception):
    """Training set cannot be formed (a class has no samples)."""


@dataclass
class PatchSample:
    patch: np.ndarray  # (3, P, P) in [0,1]
    center: np.ndarray  # (2,) normalized (x, y)
    label: LabelClass  # FOREGROUND or BACKGROUND


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-2
    decay: float = 0.9
    momentum: float = 0.9
    # Nets trained on a few dozen clean patches saturate and report ~1.0 on
    # genuinely ambiguous inputs (soft-transition patches); smoothing keeps
    # the output probabilities calibrated enough for thresholding.
    label_smoothing: float = 0.1
    seed: int = 0
    full_batch: bool = False  # deterministic single-batch mode for tests

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not (0.0 <= self.label_smoothing < 0.5):
            raise ValueError("label smoothing must lie in [0, 0.5)")


@dataclass
class NetSpec:
    patch: int = 32
    channels: tuple = (16, 32, 64)
    embed: int = 256
    classes: int = 2
    kernel: int = 3
    stride: int = 2
    pad: int = 1


def _im2col(x, k, s, p):
    n, c, h, w = x.shape
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
    return cols.reshape(n, c * k * k, ho * wo), (ho, wo)


def _col2im(dcols, xshape, k, s, p, ho, wo):
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    dcols = dcols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, i, j]
    return dxp[:, :, p : p + h, p : p + w]


class PropNet:
    """Two-branch classifier over (patch, center) pairs.

    Parameters live in `params` in declaration order; `grads` mirrors it
    after a backward pass.
    """

    def __init__(self, spec=None, seed=0):
        self.spec = spec or NetSpec()
        rng = np.random.default_rng(seed)
        s = self.spec
        self.param_names = []
        self.params = {}
        c_in = 3
        for i, c_out in enumerate(s.channels):
            fan_in = c_in * s.kernel * s.kernel
            self._add(f"conv{i}_w", rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, s.kernel, s.kernel)))
            self._add(f"conv{i}_b", np.zeros(c_out))
            c_in = c_out
        self._add("vis_w", rng.normal(0.0, np.sqrt(2.0 / c_in), (s.embed, c_in)))
        self._add("vis_b", np.zeros(s.embed))
        # Zero start for the spatial shortcut: a 2-d linear path can memorize
        # sample positions long before the conv stack learns appearance, and
        # that solution generalizes terribly. Starting at zero lets position
        # contribute only what appearance cannot explain.
        self._add("spa_w", np.zeros((s.embed, 2)))
        self._add("spa_b", np.zeros(s.embed))
        self._add("head_w", rng.normal(0.0, np.sqrt(2.0 / s.embed), (s.classes, s.embed)))
        self._add("head_b", np.zeros(s.classes))
        self.grads = {}

    def _add(self, name, value):
        self.param_names.append(name)
        self.params[name] = value

    def forward(self, patches, centers, keep_cache=False):
        """patches (N,3,P,P), centers (N,2) -> probabilities (N, classes).

        Inputs are shifted to be zero-centered before the first layer.
        """
        s = self.spec
        cache = {"convs": []}
        x = patches - 0.5
        centers = centers - 0.5
        for i in range(len(s.channels)):
            cols, (ho, wo) = _im2col(x, s.kernel, s.stride, s.pad)
            w = self.params[f"conv{i}_w"]
            b = self.params[f"conv{i}_b"]
            z = np.einsum("fk,nkp->nfp", w.reshape(w.shape[0], -1), cols)
            z = z.reshape(x.shape[0], w.shape[0], ho, wo) + b[None, :, None, None]
            a = np.maximum(z, 0.0)
            cache["convs"].append({"x_shape": x.shape, "cols": cols, "ho": ho, "wo": wo, "z": z})
            x = a
        gap = x.mean(axis=(2, 3))
        cache["gap_in_shape"] = x.shape
        vis = gap @ self.params["vis_w"].T + self.params["vis_b"]
        spa = centers @ self.params["spa_w"].T + self.params["spa_b"]
        fused = vis + spa
        hidden = np.maximum(fused, 0.0)
        logits = hidden @ self.params["head_w"].T + self.params["head_b"]
        shifted = logits - logits.max(axis=1, keepdims=True)
        expv = np.exp(shifted)
        probs = expv / expv.sum(axis=1, keepdims=True)
        if keep_cache:
            cache.update(gap=gap, fused=fused, hidden=hidden, probs=probs, centers=centers)
            self._cache = cache
        return probs

    def backward(self, targets, smoothing=0.0):
        """Cross-entropy gradient for the last cached forward pass.

        targets: (N,) integer class indices, optionally label-smoothed.
        Fills self.grads and returns the mean loss.
        """
        cache = self._cache
        probs = cache["probs"]
        n, k = probs.shape
        soft = np.full((n, k), smoothing / k)
        soft[np.arange(n), targets] += 1.0 - smoothing
        loss = -np.mean(np.sum(soft * np.log(probs + 1e-300), axis=1))

        dlogits = (probs - soft) / n

        self.grads["head_w"] = dlogits.T @ cache["hidden"]
        self.grads["head_b"] = dlogits.sum(axis=0)
        dhidden = dlogits @ self.params["head_w"]
        dfused = dhidden * (cache["fused"] > 0.0)

        self.grads["vis_w"] = dfused.T @ cache["gap"]
        self.grads["vis_b"] = dfused.sum(axis=0)
        self.grads["spa_w"] = dfused.T @ cache["centers"]
        self.grads["spa_b"] = dfused.sum(axis=0)

        dgap = dfused @ self.params["vis_w"]
        shp = cache["gap_in_shape"]
        dx = np.broadcast_to(
            dgap[:, :, None, None] / (shp[2] * shp[3]), shp
        ).copy()

        s = self.spec
        for i in reversed(range(len(s.channels))):
            conv = cache["convs"][i]
            dz = dx * (conv["z"] > 0.0)
            dzf = dz.reshape(dz.shape[0], dz.shape[1], -1)
            w = self.params[f"conv{i}_w"]
            self.grads[f"conv{i}_w"] = np.einsum("nfp,nkp->fk", dzf, conv["cols"]).reshape(w.shape)
            self.grads[f"conv{i}_b"] = dz.sum(axis=(0, 2, 3))
            dcols = np.einsum("fk,nfp->nkp", w.reshape(w.shape[0], -1), dzf)
            dx = _col2im(dcols, conv["x_shape"], s.kernel, s.stride, s.pad, conv["ho"], conv["wo"])
        return loss

    def loss_on(self, patches, centers, targets, smoothing=0.0):
        probs = self.forward(patches, centers)
        n, k = probs.shape
        soft = np.full((n, k), smoothing / k)
        soft[np.arange(n), targets] += 1.0 - smoothing
        return -np.mean(np.sum(soft * np.log(probs + 1e-300), axis=1))


def samples_to_arrays(samples):
    patches = np.stack([s.patch for s in samples])
    centers = np.stack([s.center for s in samples])
    targets = np.array([0 if s.label == LabelClass.FOREGROUND else 1 for s in samples])
    return patches, centers, targets


def forward(net, samples):
    patches, centers, _ = samples_to_arrays(samples)
    return net.forward(patches, centers)


def train(net, samples, cfg):
    """Minibatch SGD with per-epoch learning-rate decay. Returns the net
    and the per-epoch mean loss curve.

    Harvested sets are often heavily imbalanced (one sparse class), so the
    minority class is oversampled to parity when building each epoch's
    order; full-batch mode passes over the samples as-is.
    """
    patches, centers, targets = samples_to_arrays(samples)
    if len(set(targets.tolist())) < 2:
        raise HarvestError("training set must contain both classes")
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    velocity = {name: np.zeros_like(net.params[name]) for name in net.param_names}
    curve = []
    for _ in range(cfg.epochs):
        if cfg.full_batch:
            order = np.arange(len(samples))
            bs = len(samples)
        else:
            order = rng.permutation(_balanced_indices(targets, rng))
            bs = cfg.batch_size
        losses = []
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            net.forward(patches[idx], centers[idx], keep_cache=True)
            loss = net.backward(targets[idx], smoothing=cfg.label_smoothing)
            if not np.isfinite(loss):
                raise ArithmeticError(f"non-finite training loss: {loss}")
            for name in net.param_names:
                velocity[name] = cfg.momentum * velocity[name] - lr * net.grads[name]
                net.params[name] += velocity[name]
            losses.append(loss)
        curve.append(float(np.mean(losses)))
        lr *= cfg.decay
    return net, curve


def _balanced_indices(targets, rng):
    """Sample indices with the minority class repeated up to parity."""
    classes, counts = np.unique(targets, return_counts=True)
    top = counts.max()
    parts = []
    for cls, count in zip(classes, counts):
        idx = np.nonzero(targets == cls)[0]
        if count < top:
            idx = np.concatenate([idx, rng.choice(idx, size=top - count, replace=True)])
        parts.append(idx)
    return np.concatenate(parts)


def extract_patch(img, bbox, size):
    """Bounding-box region resampled to (3, size, size) with bilinear
    interpolation."""
    x0, y0, x1, y1 = bbox
    ys = y0 + (np.arange(size) + 0.5) * (y1 - y0 + 1) / size - 0.5
    xs = x0 + (np.arange(size) + 0.5) * (x1 - x0 + 1) / size - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    coords = np.stack([gy.ravel(), gx.ravel()])
    out = np.empty((3, size, size))
    for c in range(3):
        out[c] = ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest").reshape(
            size, size
        )
    return out


def harvest_training_set(ps, sp, img, confidence=HARVEST_CONFIDENCE, patch_size=32):
    """Patches for every hard foreground/background superpixel plus every
    unlabeled one whose pf or pb reaches the confidence bar. Hard-unknown
    superpixels are excluded; `confidence=None` harvests scribbled
    superpixels only. Raises HarvestError if a class is empty."""
    samples = []
    pf, pb = ps.probs[:, 0], ps.probs[:, 1]
    for i in range(sp.n):
        hard = ps.hard.get(i)
        if hard == LabelClass.UNKNOWN:
            continue
        if hard is not None:
            label = hard
        elif confidence is None:
            continue
        elif pf[i] >= confidence:
            label = LabelClass.FOREGROUND
        elif pb[i] >= confidence:
            label = LabelClass.BACKGROUND
        else:
            continue
        samples.append(
            PatchSample(
                patch=extract_patch(img, sp.bboxes[i], patch_size),
                center=sp.centroids[i].copy(),
                label=label,
            )
        )
    have = {s.label for s in samples}
    if LabelClass.FOREGROUND not in have or LabelClass.BACKGROUND not in have:
        missing = [c.value for c in (LabelClass.FOREGROUND, LabelClass.BACKGROUND) if c not in have]
        raise HarvestError(f"no training samples for class(es): {','.join(missing)}")
    return samples


def predict_and_update(net, ps, sp, img, gate=UPDATE_GATE, patch_size=None):
    """Re-split the foreground/background mass of unlabeled superpixels
    using the trained net; the unknown mass pu is preserved and hard labels
    are untouched. A numeric `gate` restricts the update to superpixels
    whose current confidence is below it. Returns a new state."""
    patch_size = patch_size or net.spec.patch
    out = ps.copy()
    targets = [i for i in ps.unlabeled if gate is None or ps.probs[i].max() < gate]
    if not targets:
        return out
    patches = np.stack([extract_patch(img, sp.bboxes[i], patch_size) for i in targets])
    centers = np.stack([sp.centroids[i] for i in targets])
    q = net.forward(patches, centers)
    for row, i in enumerate(targets):
        pu = out.probs[i, 2]
        out.probs[i, 0] = q[row, 0] * (1.0 - pu)
        out.probs[i, 1] = q[row, 1] * (1.0 - pu)
    return out


def save_checkpoint(path, net):
    """Flat binary checkpoint: magic, version, then every parameter tensor
    as little-endian float32 in declaration order."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint32(CHECKPOINT_VERSION).astype("<u4").tobytes())
        for name in net.param_names:
            fh.write(net.params[name].astype("<f4").tobytes())


def load_checkpoint(path, net):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic: {magic!r}")
        version = np.frombuffer(fh.read(4), dtype="<u4")[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {version}")
        for name in net.param_names:
            shape = net.params[name].shape
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError("checkpoint truncated")
            net.params[name] = np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)
    return net
