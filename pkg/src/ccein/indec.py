"""Tiny CNN over scene patches and Grad-CAM explanations of its decisions."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .optim import Adam
from .scenario import CellKind, WorldMap, render_patch


class PatchClass(enum.IntEnum):
    VICTIM = 0
    OBSTACLE = 1
    SUPPLY = 2
    CLEAR = 3


CENTER_KIND = {
    PatchClass.VICTIM: CellKind.VICTIM,
    PatchClass.OBSTACLE: CellKind.OBSTACLE,
    PatchClass.SUPPLY: CellKind.SUPPLY,
    PatchClass.CLEAR: CellKind.FREE,
}


@dataclass(frozen=True)
class CNNShape:
    c1: int = 8
    c2: int = 16
    k1: int = 3
    k2: int = 3
    classes: int = 4

    def blocks(self) -> list[tuple[str, tuple[int, ...]]]:
        return [
            ("w1", (self.c1, 1, self.k1, self.k1)),
            ("b1", (self.c1,)),
            ("w2", (self.c2, self.c1, self.k2, self.k2)),
            ("b2", (self.c2,)),
            ("wf", (self.classes, self.c2)),
            ("bf", (self.classes,)),
        ]

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.blocks())


def unpack(shape: CNNShape, params: np.ndarray) -> dict[str, np.ndarray]:
    if params.shape != (shape.size,):
        raise ValueError(f"expected {shape.size} parameters, got {params.shape}")
    out, i = {}, 0
    for name, s in shape.blocks():
        n = int(np.prod(s))
        out[name] = params[i:i + n].reshape(s)
        i += n
    return out


@dataclass
class TinyCNN:
    shape: CNNShape
    params: np.ndarray

    @classmethod
    def create(cls, seed: int = 0, shape: CNNShape = CNNShape()) -> "TinyCNN":
        rng = np.random.default_rng(seed)
        params = np.zeros(shape.size)
        w = unpack(shape, params)
        for name, s in shape.blocks():
            if name.startswith("w"):
                fan_in = int(np.prod(s[1:]))
                w[name][...] = rng.standard_normal(s) * np.sqrt(2.0 / fan_in)
        return cls(shape, params)

    def copy(self) -> "TinyCNN":
        return TinyCNN(self.shape, self.params.copy())


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N, H, W, C*k*k) with zero 'same' padding."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((n, h, w, c, k, k))
    for dy in range(k):
        for dx in range(k):
            cols[..., dy, dx] = xp[:, :, dy:dy + h, dx:dx + w].transpose(0, 2, 3, 1)
    return cols.reshape(n, h, w, c * k * k)


def _col2im(cols: np.ndarray, c: int, k: int) -> np.ndarray:
    """Adjoint of ``_im2col``."""
    n, h, w, _ = cols.shape
    p = k // 2
    cols = cols.reshape(n, h, w, c, k, k)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for dy in range(k):
        for dx in range(k):
            xp[:, :, dy:dy + h, dx:dx + w] += cols[..., dy, dx].transpose(0, 3, 1, 2)
    return xp[:, :, p:p + h, p:p + w]


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cols = _im2col(x, w.shape[-1])
    out = cols @ w.reshape(w.shape[0], -1).T + b  # (N, H, W, F)
    return out.transpose(0, 3, 1, 2), cols


@dataclass
class Cache:
    x: np.ndarray
    cols1: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    cols2: np.ndarray
    z2: np.ndarray
    a2: np.ndarray  # conv2 activations, the Grad-CAM layer
    pooled: np.ndarray


def _as_batch(patch: np.ndarray) -> np.ndarray:
    x = np.asarray(patch, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != x.shape[2] or x.shape[1] < 1:
        raise ValueError("patches must be square")
    return x[:, None]


def forward_batch(net: TinyCNN, patches: np.ndarray) -> tuple[np.ndarray, Cache]:
    w = unpack(net.shape, net.params)
    x = _as_batch(patches)
    z1, cols1 = _conv(x, w["w1"], w["b1"])
    a1 = np.maximum(z1, 0.0)
    z2, cols2 = _conv(a1, w["w2"], w["b2"])
    a2 = np.maximum(z2, 0.0)
    pooled = a2.mean(axis=(2, 3))
    logits = pooled @ w["wf"].T + w["bf"]
    return logits, Cache(x, cols1, z1, a1, cols2, z2, a2, pooled)


def forward(net: TinyCNN, patch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits and conv2 activations (C, H, W) for one patch."""
    patch = np.asarray(patch, dtype=float)
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1] or patch.shape[0] < 8:
        raise ValueError("patch must be square with side >= 8")
    logits, cache = forward_batch(net, patch)
    return logits[0], cache.a2[0]


def backward(net: TinyCNN, cache: Cache, d_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Parameter gradient and d/dA of the conv2 activations, given dL/dlogits."""
    s = net.shape
    w = unpack(s, net.params)
    grad = np.zeros_like(net.params)
    g = unpack(s, grad)
    g["wf"][...] = d_logits.T @ cache.pooled
    g["bf"][...] = d_logits.sum(axis=0)
    hw = cache.a2.shape[2] * cache.a2.shape[3]
    d_pooled = d_logits @ w["wf"]
    d_a2 = np.broadcast_to((d_pooled / hw)[:, :, None, None], cache.a2.shape).copy()
    d_z2 = d_a2 * (cache.z2 > 0)
    dz2 = d_z2.transpose(0, 2, 3, 1)  # (N, H, W, F)
    g["w2"][...] = np.einsum("nhwf,nhwk->fk", dz2, cache.cols2).reshape(w["w2"].shape)
    g["b2"][...] = dz2.sum(axis=(0, 1, 2))
    d_cols2 = dz2 @ w["w2"].reshape(s.c2, -1)
    d_a1 = _col2im(d_cols2, s.c1, s.k2)
    d_z1 = d_a1 * (cache.z1 > 0)
    dz1 = d_z1.transpose(0, 2, 3, 1)
    g["w1"][...] = np.einsum("nhwf,nhwk->fk", dz1, cache.cols1).reshape(w["w1"].shape)
    g["b1"][...] = dz1.sum(axis=(0, 1, 2))
    return grad, d_a2


def activation_gradient(net: TinyCNN, patch: np.ndarray, cls: int) -> np.ndarray:
    """dy_c/dA^k for the conv2 activations of one patch, shape (C, H, W)."""
    logits, cache = forward_batch(net, patch)
    d = np.zeros_like(logits)
    d[0, cls] = 1.0
    return backward(net, cache, d)[1][0]


def cross_entropy(net: TinyCNN, patches: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    logits, cache = forward_batch(net, patches)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = float(-logp[np.arange(n), labels].mean())
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    grad, _ = backward(net, cache, d / n)
    return loss, grad


def accuracy(net: TinyCNN, patches: np.ndarray, labels: np.ndarray) -> float:
    logits, _ = forward_batch(net, patches)
    return float(np.mean(logits.argmax(axis=1) == labels))


def bilinear_resize(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling with aligned corners (corner samples map to corners)."""
    h, w = grid.shape
    H, W = size
    if (h, w) == (H, W):
        return grid.copy()
    ys = np.linspace(0.0, h - 1.0, H) if H > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, W) if W > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bot = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def grad_cam_raw(net: TinyCNN, patch: np.ndarray, cls: int) -> np.ndarray:
    """Weighted activation sum before the ReLU, on the conv2 grid."""
    if not 0 <= cls < net.shape.classes:
        raise ValueError(f"class {cls} out of range")
    _, a2 = forward(net, patch)
    alpha = activation_gradient(net, patch, cls).mean(axis=(1, 2))
    return np.tensordot(alpha, a2, axes=1)


def grad_cam(net: TinyCNN, patch: np.ndarray, cls: int) -> np.ndarray:
    """Heatmap in [0, 1] with the patch's shape; an all-zero map stays zero."""
    cam = np.maximum(grad_cam_raw(net, patch, cls), 0.0)
    cam = bilinear_resize(cam, np.asarray(patch).shape)
    peak = cam.max()
    return cam / peak if peak > 0 else cam


# -- synthetic data and training ----------------------------------------------


def synthetic_patch(cls: PatchClass, rng: np.random.Generator, radius: int = 7, distractors: int = 6) -> np.ndarray:
    """Render a patch with a labelled centre object among collapsed-building clutter."""
    side = 2 * radius + 1
    cells = [[CellKind.FREE] * side for _ in range(side)]
    spots = [i for i in range(side * side) if i != radius * side + radius]
    for i in rng.choice(spots, size=rng.integers(0, distractors + 1), replace=False):
        cells[i // side][i % side] = CellKind.COLLAPSED
    cells[radius][radius] = CENTER_KIND[cls]
    wm = WorldMap(side, side, tuple(tuple(r) for r in cells))
    return render_patch(wm, (radius, radius), radius)


def make_dataset(n: int, seed: int, radius: int = 7, classes: tuple[PatchClass, ...] = tuple(PatchClass)):
    rng = np.random.default_rng(seed)
    labels = np.array([classes[i % len(classes)] for i in range(n)], dtype=int)
    rng.shuffle(labels)
    patches = np.stack([synthetic_patch(PatchClass(c), rng, radius) for c in labels])
    return patches, labels


def train_tiny(
    net: TinyCNN,
    patches: np.ndarray,
    labels: np.ndarray,
    steps: int = 2000,
    *,
    lr: float = 1e-2,
    batch: int = 64,
    seed: int = 0,
    target_accuracy: float | None = None,
) -> tuple[TinyCNN, list[float]]:
    """Minibatch Adam on cross-entropy; stops early once ``target_accuracy`` holds."""
    rng = np.random.default_rng(seed)
    opt = Adam(lr=lr)
    net = net.copy()
    losses = []
    n = len(labels)
    for step in range(steps):
        idx = rng.choice(n, size=min(batch, n), replace=False)
        loss, grad = cross_entropy(net, patches[idx], labels[idx])
        losses.append(loss)
        net.params = opt.step(net.params, grad)
        if target_accuracy is not None and step % 50 == 49 and accuracy(net, patches, labels) >= target_accuracy:
            break
    return net, losses


def train_classifier(seed: int = 0, samples: int = 2000, steps: int = 2000) -> TinyCNN:
    """The classifier explanations are computed for, rebuilt from its seed."""
    patches, labels = make_dataset(samples, seed)
    net, _ = train_tiny(TinyCNN.create(seed), patches, labels, steps, seed=seed)
    return net


CNN_FORMAT = "ccein-cnn 1"


def dumps_cnn(net: TinyCNN) -> str:
    s = net.shape
    lines = [CNN_FORMAT, f"shape {s.c1} {s.c2} {s.k1} {s.k2} {s.classes}", f"params {len(net.params)}"]
    lines.extend(repr(float(v)) for v in net.params)
    return "\n".join(lines) + "\n"


def loads_cnn(text: str) -> TinyCNN:
    lines = text.splitlines()
    if lines[0] != CNN_FORMAT:
        raise ValueError(f"not a classifier file: {lines[0]!r}")
    shape = CNNShape(*(int(v) for v in lines[1].split()[1:]))
    n = int(lines[2].split()[1])
    params = np.array([float(v) for v in lines[3:3 + n]])
    if len(params) != shape.size:
        raise ValueError("parameter count does not match the classifier shape")
    return TinyCNN(shape, params)


# -- plain-text image output --------------------------------------------------


def to_pgm(image: np.ndarray, scale: int = 1) -> str:
    """Plain (P2) graymap of values in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    if scale > 1:
        img = np.kron(img, np.ones((scale, scale)))
    pix = np.rint(img * 255.0).astype(int)
    h, w = pix.shape
    rows = [" ".join(str(v) for v in row) for row in pix]
    return f"P2\n{w} {h}\n255\n" + "\n".join(rows) + "\n"


def overlay(heatmap: np.ndarray, patch: np.ndarray, scale: int = 1) -> tuple[str, str]:
    """(base, overlay) graymaps; the heatmap brightens the base towards white."""
    base = np.clip(np.asarray(patch, dtype=float), 0.0, 1.0)
    if heatmap.shape != base.shape:
        raise ValueError("heatmap and patch shapes differ")
    blended = base + (1.0 - base) * heatmap
    return to_pgm(base, scale), to_pgm(blended, scale)


def heatmap_csv(heatmap: np.ndarray) -> str:
    lines = ["row,col,value"]
    for (r, c), v in np.ndenumerate(heatmap):
        lines.append(f"{r},{c},{v:.12f}")
    return "\n".join(lines) + "\n"


def center_mass_wins(heatmap: np.ndarray, size: int = 3) -> bool:
    """Is the centre size x size block heavier than every border block of that size?"""
    h, w = heatmap.shape
    cy, cx = h // 2, w // 2
    r = size // 2
    center = heatmap[cy - r:cy + r + 1, cx - r:cx + r + 1].sum()
    border = []
    for y in range(0, h - size + 1):
        for x in range(0, w - size + 1):
            if y == 0 or x == 0 or y == h - size or x == w - size:
                border.append(heatmap[y:y + size, x:x + size].sum())
    return bool(center > max(border))
