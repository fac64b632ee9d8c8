"""Toy-scale training: loss, reverse-mode gradients, SGD with momentum, augmentation.

The loss is the familiar grid-anchor compromise: sum-squared error on the
box parameterization, squared error pulling objectness toward the prior's
overlap with its target (and toward zero everywhere else), and softmax
cross-entropy on the class logits of the responsible anchor. The responsible
anchor for a target is the prior with the highest width/height IoU against
it; the objectness target is that same overlap value, which keeps the loss
an exact, finitely-differentiable function of the raw tensor - the analytic
gradients here are checked against central differences in 64-bit mode.

Everything is deterministic given the seed: sample order, augmentation
draws, and the ordered per-sample gradient reduction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import netgraph as ng
from . import tensor_core as tc
from .detect_head import AnchorSet
from .errors import DivergenceError, ShapeError

__all__ = [
    "SGDConfig",
    "LossWeights",
    "Sample",
    "TrainResult",
    "lr_at",
    "yolo_loss",
    "encode_targets",
    "init_weights",
    "backward",
    "sgd_step",
    "augment",
    "train",
    "conv2d_backward",
    "batchnorm_backward",
    "relu_backward",
    "maxpool2x2_backward",
    "upsample2x_backward",
    "concat_backward",
]


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    total_epochs: int = 160
    lr_drops: tuple[int, ...] = (60, 90)  # divide lr by 10 at these epochs


@dataclass(frozen=True)
class LossWeights:
    coord: float = 5.0
    obj: float = 1.0
    noobj: float = 0.5
    cls: float = 1.0


@dataclass(frozen=True)
class Sample:
    """One training image with normalized (class, cx, cy, w, h) targets."""

    image: np.ndarray  # (3, H, W), float in [0, 1]
    targets: tuple[tuple[int, float, float, float, float], ...] = ()

    def __post_init__(self):
        tc.check_chw(self.image, "sample image")
        for t in self.targets:
            cls, cx, cy, w, h = t
            if cls < 0:
                raise ValueError(f"target class must be >= 0, got {cls}")
            if not (0.0 <= cx < 1.0 and 0.0 <= cy < 1.0):
                raise ValueError(f"target center must lie in [0, 1), got ({cx}, {cy})")
            if not (0.0 < w <= 1.0 and 0.0 < h <= 1.0):
                raise ValueError(f"target size must lie in (0, 1], got ({w}, {h})")


def lr_at(epoch: int, cfg: SGDConfig) -> float:
    """Step schedule: base lr divided by 10 at each configured drop epoch."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    return cfg.lr * 0.1 ** sum(epoch >= d for d in cfg.lr_drops)


# -- loss ----------------------------------------------------------------------


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _wh_iou(w1: float, h1: float, w2: float, h2: float) -> float:
    inter = min(w1, w2) * min(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


def yolo_loss(
    raw: np.ndarray,
    targets,
    anchors: AnchorSet,
    lw: LossWeights = LossWeights(),
) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to one head's raw tensor.

    Targets are (class, cx, cy, w, h) with everything normalized to [0, 1].
    When two targets land on the same (anchor, cell), the later one wins.
    """
    b = len(anchors)
    n, sh, sw = raw.shape
    if n % b:
        raise ValueError(f"{n} channels not divisible by {b} priors")
    boxes = raw.reshape(b, n // b, sh, sw)
    per = boxes.shape[1]
    c = per - 5
    if c < 1:
        raise ValueError(f"head with {n} channels and {b} priors has no class logits")
    priors = anchors.scaled((sh, sw))

    sig_to = _sigmoid(boxes[:, 4])
    obj_target = np.zeros_like(sig_to)
    obj_weight = np.full_like(sig_to, lw.noobj)

    assigned: dict[tuple[int, int, int], tuple] = {}
    for t in targets:
        cls, cx, cy, w, h = int(t[0]), float(t[1]), float(t[2]), float(t[3]), float(t[4])
        if cls >= c:
            raise ValueError(f"target class {cls} outside {c}-class head")
        col, row = int(cx * sw), int(cy * sh)
        if not (0 <= col < sw and 0 <= row < sh):
            raise ValueError(f"target center ({cx}, {cy}) falls outside the {sh}x{sw} grid")
        tw_c, th_c = w * sw, h * sh
        overlaps = [_wh_iou(tw_c, th_c, pw, ph) for pw, ph in priors]
        bi = int(np.argmax(overlaps))
        enc = (
            cx * sw - col,
            cy * sh - row,
            math.log(tw_c / priors[bi][0]),
            math.log(th_c / priors[bi][1]),
            cls,
            overlaps[bi],
        )
        assigned[(bi, row, col)] = enc

    loss = 0.0
    grad = np.zeros_like(raw).reshape(b, per, sh, sw)

    for (bi, row, col), (ex, ey, ew, eh, cls, ov) in assigned.items():
        obj_target[bi, row, col] = ov
        obj_weight[bi, row, col] = lw.obj
        v = boxes[bi, :, row, col]
        sx, sy = float(_sigmoid(v[0:1])[0]), float(_sigmoid(v[1:2])[0])
        rx, ry = sx - ex, sy - ey
        rw, rh = float(v[2]) - ew, float(v[3]) - eh
        loss += lw.coord * (rx * rx + ry * ry + rw * rw + rh * rh)
        grad[bi, 0, row, col] = lw.coord * 2.0 * rx * sx * (1.0 - sx)
        grad[bi, 1, row, col] = lw.coord * 2.0 * ry * sy * (1.0 - sy)
        grad[bi, 2, row, col] = lw.coord * 2.0 * rw
        grad[bi, 3, row, col] = lw.coord * 2.0 * rh
        logits = v[5:]
        zmax = logits.max()
        e = np.exp(logits - zmax)
        soft = e / e.sum()
        loss += lw.cls * float(-(logits[cls] - zmax) + np.log(e.sum()))
        gcls = lw.cls * soft
        gcls[cls] -= lw.cls
        grad[bi, 5:, row, col] = gcls

    diff = sig_to - obj_target
    loss += float((obj_weight * diff * diff).sum())
    grad[:, 4] = obj_weight * 2.0 * diff * sig_to * (1.0 - sig_to)
    return float(loss), grad.reshape(raw.shape)


def encode_targets(
    targets,
    anchors: AnchorSet,
    grid_hw: tuple[int, int],
    num_classes: int,
    class_margin: float = 40.0,
    dtype=np.float64,
) -> np.ndarray:
    """Raw tensor whose coord and class terms are (numerically) zero under the loss."""
    sh, sw = grid_hw
    b = len(anchors)
    raw = np.zeros((b * (5 + num_classes), sh, sw), dtype=dtype).reshape(b, 5 + num_classes, sh, sw)
    priors = anchors.scaled((sh, sw))
    for cls, cx, cy, w, h in targets:
        col, row = int(cx * sw), int(cy * sh)
        tw_c, th_c = w * sw, h * sh
        overlaps = [_wh_iou(tw_c, th_c, pw, ph) for pw, ph in priors]
        bi = int(np.argmax(overlaps))
        fx = np.clip(cx * sw - col, 1e-9, 1 - 1e-9)
        fy = np.clip(cy * sh - row, 1e-9, 1 - 1e-9)
        raw[bi, 0, row, col] = math.log(fx / (1 - fx))
        raw[bi, 1, row, col] = math.log(fy / (1 - fy))
        raw[bi, 2, row, col] = math.log(tw_c / priors[bi][0])
        raw[bi, 3, row, col] = math.log(th_c / priors[bi][1])
        raw[bi, 5 + int(cls), row, col] = class_margin
    return raw.reshape(-1, sh, sw)


# -- kernel adjoints -----------------------------------------------------------


def conv2d_backward(
    x: np.ndarray,
    w: tc.ConvWeights,
    dy: np.ndarray,
    stride: int = 1,
    pad: str = "same",
    cols: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dweights, dbias) of conv2d given upstream dy."""
    _, oh, ow, ph, pw = tc._conv_geometry(x, w, stride, pad)
    k, s = w.kernel, stride
    if dy.shape != (w.out_channels, oh, ow):
        raise ShapeError(f"dy shape {dy.shape} != conv output {(w.out_channels, oh, ow)}")
    if cols is None:
        if k == 1 and s == 1:
            cols = x.reshape(w.in_channels, -1)
        else:
            cols = tc.im2col(tc.pad_input(x, ph, pw), k, s, oh, ow)
    dy_flat = dy.reshape(w.out_channels, -1)
    dw = (dy_flat @ cols.T).reshape(w.weights.shape)
    db = dy_flat.sum(axis=1)
    dcols = w.weights.reshape(w.out_channels, -1).T @ dy_flat  # (C*k*k, oh*ow)
    if k == 1 and s == 1:
        return dcols.reshape(x.shape), dw, db
    c, h, wd = x.shape
    dxp = np.zeros((c, h + ph[0] + ph[1], wd + pw[0] + pw[1]), dtype=x.dtype)
    dslab = dcols.reshape(c, k, k, oh, ow)
    for ky in range(k):
        for kx in range(k):
            dxp[:, ky : ky + (oh - 1) * s + 1 : s, kx : kx + (ow - 1) * s + 1 : s] += dslab[:, ky, kx]
    return dxp[:, ph[0] : ph[0] + h, pw[0] : pw[0] + wd], dw, db


def batchnorm_backward(x: np.ndarray, p: tc.BNParams, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dgamma, dbeta); running statistics are constants here."""
    inv = 1.0 / np.sqrt(p.var + x.dtype.type(p.eps))
    xhat = (x - p.mean[:, None, None]) * inv[:, None, None]
    dgamma = (dy * xhat).sum(axis=(1, 2))
    dbeta = dy.sum(axis=(1, 2))
    dx = dy * (p.gamma * inv)[:, None, None]
    return dx, dgamma, dbeta


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def maxpool2x2_backward(x: np.ndarray, dy: np.ndarray, pooled: np.ndarray | None = None) -> np.ndarray:
    """Route dy to the first maximum of each 2x2 window (row-major tie-break).

    ``pooled`` is the forward output; passing it saves recomputing the max.
    """
    if pooled is None:
        pooled = tc.maxpool2x2(x)
    a, b = x[:, 0::2, 0::2], x[:, 0::2, 1::2]
    c, d = x[:, 1::2, 0::2], x[:, 1::2, 1::2]
    ka = a == pooled
    kb = (b == pooled) & ~ka
    kc = (c == pooled) & ~(ka | kb)
    kd = (d == pooled) & ~(ka | kb | kc)
    dx = np.zeros_like(x)
    dx[:, 0::2, 0::2] = dy * ka
    dx[:, 0::2, 1::2] = dy * kb
    dx[:, 1::2, 0::2] = dy * kc
    dx[:, 1::2, 1::2] = dy * kd
    return dx


def upsample2x_backward(dy: np.ndarray) -> np.ndarray:
    c, h2, w2 = dy.shape
    return dy.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4))


def concat_backward(dy: np.ndarray, channel_sizes) -> list[np.ndarray]:
    edges = np.cumsum([0] + list(channel_sizes))
    if edges[-1] != dy.shape[0]:
        raise ShapeError(f"concat grad: {dy.shape[0]} channels vs parts {list(channel_sizes)}")
    return [dy[a:b] for a, b in zip(edges[:-1], edges[1:])]


# -- whole-graph backward --------------------------------------------------------


def backward(
    spec: ng.NetworkSpec,
    weights: ng.WeightStore,
    acts: dict[str, np.ndarray],
    detect_grads: dict[str, np.ndarray],
    caches: dict[str, dict] | None = None,
) -> dict[str, object]:
    """Parameter gradients for every conv/bn node, given per-head output grads.

    ``acts`` is the dict :func:`mffd.netgraph.forward` returned; ``caches``
    (from the same forward call) lets conv layers reuse their im2col work.
    Gradient containers mirror the weight containers: ``ConvWeights`` holds
    (dweights, dbias) and ``BNParams`` holds (dgamma, dbeta) with zero
    mean/var slots.
    """
    adj: dict[str, np.ndarray] = {}
    for nid, g in detect_grads.items():
        if spec.node(nid).kind != "detect":
            raise ValueError(f"{nid!r} is not a detect node")
        adj[nid] = g.copy()
    grads: dict[str, object] = {}
    for n in reversed(spec.nodes):
        dy = adj.pop(n.id, None)
        if dy is None or n.kind == "input":
            continue

        def send(nid: str, g: np.ndarray):
            if nid in adj:
                adj[nid] += g
            else:
                adj[nid] = g

        if n.kind in ("conv", "detect"):
            cols = None
            if caches is not None and n.id in caches:
                cols = caches[n.id].get("cols")
            dx, dw, db = conv2d_backward(acts[n.inputs[0]], weights[n.id], dy, n.stride, "same", cols)
            grads[n.id] = tc.ConvWeights(dw, db)
            send(n.inputs[0], dx)
        elif n.kind == "bn":
            dx, dgamma, dbeta = batchnorm_backward(acts[n.inputs[0]], weights[n.id], dy)
            grads[n.id] = tc.BNParams(dgamma, dbeta, np.zeros_like(dgamma), np.zeros_like(dgamma))
            send(n.inputs[0], dx)
        elif n.kind == "relu":
            send(n.inputs[0], relu_backward(acts[n.inputs[0]], dy))
        elif n.kind == "maxpool":
            send(n.inputs[0], maxpool2x2_backward(acts[n.inputs[0]], dy, pooled=acts[n.id]))
        elif n.kind == "upsample":
            send(n.inputs[0], upsample2x_backward(dy))
        elif n.kind == "concat":
            parts = concat_backward(dy, [acts[i].shape[0] for i in n.inputs])
            for nid, g in zip(n.inputs, parts):
                send(nid, g)
    return grads


# -- parameter updates -----------------------------------------------------------


def _leaves(node_kind: str, params) -> list[np.ndarray]:
    if node_kind in ("conv", "detect"):
        return [params.weights, params.bias]
    return [params.gamma, params.beta]  # bn: running stats are not trained


OBJECTNESS_BIAS_INIT = -4.0  # sigmoid(-4) ~ 0.018: the no-object sea starts quiet


def init_weights(spec: ng.NetworkSpec, seed: int = 0, dtype=np.float32) -> ng.WeightStore:
    """He-style uniform conv init (+-sqrt(6 / (M * k * k))), identity batch norm.

    The bound keeps second moments roughly constant through conv + ReLU
    stacks, so deep stacks neither vanish nor blow up at initialization.
    Detection heads are linear read-outs, not signal carriers, so they get
    the smaller +-sqrt(1 / (M * k * k)) bound, and their objectness bias
    starts at :data:`OBJECTNESS_BIAS_INIT`. Both choices shrink the huge
    first-iteration no-object gradient that can otherwise kill narrow
    bottleneck layers for good.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    shapes = ng.infer_shapes(spec)
    store: ng.WeightStore = {}
    for n in ng.parameterized_nodes(spec):
        if n.kind == "bn":
            store[n.id] = tc.BNParams.identity(shapes[n.id][0], dtype=dtype)
            continue
        fan_in = shapes[n.inputs[0]][0] * n.k * n.k
        bound = math.sqrt((1.0 if n.kind == "detect" else 6.0) / fan_in)
        w = rng.uniform(-bound, bound, size=(n.out_channels, shapes[n.inputs[0]][0], n.k, n.k))
        bias = np.zeros(n.out_channels, dtype=dtype)
        if n.kind == "detect":
            bias[4 :: 5 + n.classes] = OBJECTNESS_BIAS_INIT
        store[n.id] = tc.ConvWeights(w.astype(dtype), bias)
    return store


def zero_like_store(spec: ng.NetworkSpec, store: ng.WeightStore) -> dict:
    out = {}
    for n in ng.parameterized_nodes(spec):
        p = store[n.id]
        if n.kind == "bn":
            z = np.zeros_like(p.gamma)
            out[n.id] = tc.BNParams(z.copy(), z.copy(), z.copy(), z.copy())
        else:
            out[n.id] = tc.ConvWeights(np.zeros_like(p.weights), np.zeros_like(p.bias))
    return out


def sgd_step(
    spec: ng.NetworkSpec,
    weights: ng.WeightStore,
    grads: dict,
    velocity: dict,
    lr: float,
    cfg: SGDConfig,
):
    """v <- momentum * v - lr * (g + weight_decay * w); w <- w + v. In place."""
    for n in ng.parameterized_nodes(spec):
        if n.id not in grads:
            continue
        for w, g, v in zip(_leaves(n.kind, weights[n.id]), _leaves(n.kind, grads[n.id]), _leaves(n.kind, velocity[n.id])):
            v *= cfg.momentum
            v -= lr * (g + cfg.weight_decay * w)
            w += v


# -- augmentation -----------------------------------------------------------------


def _rgb_to_hsv(rgb: np.ndarray):
    r, g, b = rgb[0], rgb[1], rgb[2]
    maxc = np.max(rgb, axis=0)
    minc = np.min(rgb, axis=0)
    v = maxc
    c = maxc - minc
    s = np.divide(c, maxc, out=np.zeros_like(c), where=maxc > 0)
    safe = np.where(c > 0, c, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.select([maxc == r, maxc == g], [bc - gc, 2.0 + rc - bc], default=4.0 + gc - rc)
    h = np.where(c > 0, (h / 6.0) % 1.0, 0.0)
    return h, s, v


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    # channel c = V - V*S*max(0, min(k, 4-k, 1)) with k = (n_c + 6H) mod 6
    h6 = h * 6.0
    vs = v * s
    out = np.empty((3,) + h.shape, dtype=v.dtype)
    for ch, n in enumerate((5.0, 3.0, 1.0)):
        k = (n + h6) % 6.0
        out[ch] = v - vs * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
    return out


def photometric(image: np.ndarray, hue_shift: float, sat_scale: float, val_scale: float) -> np.ndarray:
    """Shift hue (fraction of the circle) and scale saturation/value, clipped to [0, 1]."""
    h, s, v = _rgb_to_hsv(image.astype(np.float32, copy=False))
    h = (h + np.float32(hue_shift)) % 1.0
    s = np.clip(s * np.float32(sat_scale), 0.0, 1.0)
    v = np.clip(v * np.float32(val_scale), 0.0, 1.0)
    return _hsv_to_rgb(h, s, v)


def hflip(s: Sample) -> Sample:
    image = s.image[:, :, ::-1].copy()
    targets = tuple((cls, 1.0 - cx, cy, w, h) for cls, cx, cy, w, h in s.targets)
    return Sample(image, targets)


_LOG_1_5 = math.log(1.5)


def augment(s: Sample, rng_seed: int) -> Sample:
    """Hue/saturation/value jitter plus a fair-coin horizontal flip.

    Hue shifts by up to +-0.1 of the circle; saturation and value scale by
    log-uniform factors in [1/1.5, 1.5]. Same seed, same result.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(rng_seed)))
    hue = rng.uniform(-0.1, 0.1)
    sat = math.exp(rng.uniform(-_LOG_1_5, _LOG_1_5))
    val = math.exp(rng.uniform(-_LOG_1_5, _LOG_1_5))
    flip = rng.random() < 0.5
    out = Sample(photometric(s.image, hue, sat, val), s.targets)
    return hflip(out) if flip else out


# -- training loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    weights: ng.WeightStore
    log: list[str]
    iterations: int
    final_loss: float


def train(
    spec: ng.NetworkSpec,
    data,
    cfg: SGDConfig = SGDConfig(),
    lw: LossWeights = LossWeights(),
    seed: int = 0,
    do_augment: bool = True,
    weights: ng.WeightStore | None = None,
    checkpoint_dir=None,
    max_iterations: int | None = None,
    progress=None,
) -> TrainResult:
    """Seeded SGD over ``data`` (a sequence of :class:`Sample`).

    Emits one ``"iter epoch lr loss"`` log line per batch. Raises
    :class:`DivergenceError` the moment the loss stops being finite.
    ``max_iterations`` cuts the run short for fixed-iteration experiments.
    """
    if len(data) == 0:
        raise ValueError("training needs at least one sample")
    anchors = AnchorSet(spec.anchors)
    heads = spec.detect_nodes()
    if weights is None:
        weights = init_weights(spec, seed)
    velocity = zero_like_store(spec, weights)
    order_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 1))))
    log: list[str] = []
    it = 0
    last_loss = math.nan
    stop = False
    for epoch in range(cfg.total_epochs):
        lr = lr_at(epoch, cfg)
        order = order_rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            accum: dict[str, object] | None = None
            loss_sum = 0.0
            for idx in batch:
                s = data[int(idx)]
                if do_augment:
                    aug_seed = int(np.random.SeedSequence((seed, 2, epoch, int(idx))).generate_state(1)[0])
                    s = augment(s, aug_seed)
                caches: dict[str, dict] = {}
                acts = ng.forward(spec, weights, s.image, caches)
                det_grads = {}
                for head in heads:
                    loss, g = yolo_loss(acts[head.id], s.targets, anchors, lw)
                    det_grads[head.id] = g
                    loss_sum += loss
                sample_grads = backward(spec, weights, acts, det_grads, caches)
                if accum is None:
                    accum = sample_grads
                else:
                    for nid, g in sample_grads.items():
                        for a, b in zip(_leaves(spec.node(nid).kind, accum[nid]), _leaves(spec.node(nid).kind, g)):
                            a += b
            scale = 1.0 / len(batch)
            last_loss = loss_sum * scale
            if not math.isfinite(last_loss):
                raise DivergenceError(f"loss diverged at iteration {it} (epoch {epoch}): {last_loss}")
            for nid, g in accum.items():
                for a in _leaves(spec.node(nid).kind, g):
                    a *= scale
            sgd_step(spec, weights, accum, velocity, lr, cfg)
            it += 1
            log.append(f"{it} {epoch} {lr:g} {last_loss:.6f}")
            if progress is not None:
                progress(it, epoch, last_loss)
            if max_iterations is not None and it >= max_iterations:
                stop = True
                break
        if checkpoint_dir is not None:
            from . import cli_io

            cli_io.save_weights(f"{checkpoint_dir}/epoch_{epoch:04d}.weights", spec, weights)
        if stop:
            break
    return TrainResult(weights, log, it, float(last_loss))
