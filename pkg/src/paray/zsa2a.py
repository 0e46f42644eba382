"""Zero-shot artifact removal from randomly perturbed reconstructions.

Two (or more) reconstructions from random detector subsets are fed to a tiny
convolutional artifact predictor ``g``::

    conv3x3(1->C) -> ReLU -> conv3x3(C->C) -> ReLU -> conv1x1(C->1)

trained so that ``recon_i - g(recon_i)`` predicts ``recon_j`` (residual loss)
and the corrected images agree (consistency loss). The trained network is
then applied to the reconstruction from all detectors:
``clean = recon - g(recon)``.

Gradients are derived by hand (reverse mode through the three layers) and
the optimiser is Adam with a step-decay learning rate. Images are processed
channels-last and convolutions are done by im2col + matmul.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import TrainingDivergedError
from .perturb import MapTarget, Plane, random_subset, reconstruct_target, subset_raw
from .ubp import axis_index

log = logging.getLogger(__name__)

OFFSETS = [(dy, dx) for dy in range(3) for dx in range(3)]
DEFAULT_CHANNELS = 48


@dataclass
class NetworkParams:
    """Weights in matmul layout: ``w1`` (9, C), ``w2`` (9*C, C), ``w3`` (C, 1).

    Rows of the 3x3 kernels are ordered (kernel offset, input channel) with the
    offset running over (dy, dx) in row-major order.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @property
    def channels(self):
        return self.b1.shape[0]

    @property
    def dtype(self):
        return self.w1.dtype

    def arrays(self):
        return [getattr(self, f.name) for f in fields(self)]

    @property
    def n_params(self):
        return sum(a.size for a in self.arrays())

    def map(self, fn, *others):
        return NetworkParams(*(fn(a, *(getattr(o, f.name) for o in others))
                               for a, f in zip(self.arrays(), fields(self))))

    def astype(self, dtype):
        return self.map(lambda a: a.astype(dtype))

    def copy(self):
        return self.map(np.copy)

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, vec, channels, dtype=None):
        shapes = _shapes(channels)
        if vec.size != sum(int(np.prod(s)) for s in shapes):
            raise ValueError(f"flat vector of size {vec.size} does not fit C={channels}")
        out, pos = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(np.array(vec[pos:pos + n], dtype=dtype or vec.dtype).reshape(s))
            pos += n
        return cls(*out)


def _shapes(c):
    return [(9, c), (c,), (9 * c, c), (c,), (c, 1), (1,)]


def zero_network(channels=DEFAULT_CHANNELS, dtype=np.float64):
    return NetworkParams(*(np.zeros(s, dtype=dtype) for s in _shapes(channels)))


def init_network(channels=DEFAULT_CHANNELS, seed=0, dtype=np.float64):
    """He-uniform kernels (bound ``sqrt(6/fan_in)``) and zero biases."""
    if channels < 1:
        raise ValueError("channels must be >= 1")
    rng = np.random.default_rng(seed)
    p = zero_network(channels, np.float64)
    for w in (p.w1, p.w2, p.w3):
        bound = np.sqrt(6.0 / w.shape[0])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return p.astype(dtype)


# --- convolution plumbing -------------------------------------------------

def _im2col(x):
    """(B, H, W, C) -> (B*H*W, 9*C) patches of the zero-padded input."""
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((b, h, w, 9, c), dtype=x.dtype)
    for k, (dy, dx) in enumerate(OFFSETS):
        cols[:, :, :, k, :] = xp[:, dy:dy + h, dx:dx + w, :]
    return cols.reshape(b * h * w, 9 * c)


def _col2im(dcols, shape):
    """Adjoint of :func:`_im2col`."""
    b, h, w, c = shape
    dcols = dcols.reshape(b, h, w, 9, c)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for k, (dy, dx) in enumerate(OFFSETS):
        dxp[:, dy:dy + h, dx:dx + w, :] += dcols[:, :, :, k, :]
    return dxp[:, 1:-1, 1:-1, :]


def _forward(params, x):
    """Batched forward pass on (B, H, W) images; returns output and backward cache."""
    b, h, w = x.shape
    c = params.channels
    cols1 = _im2col(x[..., None])
    z1 = cols1 @ params.w1
    z1 += params.b1
    h1 = np.maximum(z1, 0)
    cols2 = _im2col(h1.reshape(b, h, w, c))
    z2 = cols2 @ params.w2
    z2 += params.b2
    h2 = np.maximum(z2, 0)
    out = h2 @ params.w3
    out += params.b3
    return out.reshape(b, h, w), (x.shape, cols1, z1, cols2, z2, h2)


def _backward(params, cache, dout):
    shape, cols1, z1, cols2, z2, h2 = cache
    b, h, w = shape
    c = params.channels
    dout = dout.reshape(-1, 1)
    dw3 = h2.T @ dout
    db3 = dout.sum(axis=0)
    dz2 = dout @ params.w3.T
    dz2 *= z2 > 0
    dw2 = cols2.T @ dz2
    db2 = dz2.sum(axis=0)
    dh1 = _col2im(dz2 @ params.w2.T, (b, h, w, c)).reshape(-1, c)
    dz1 = dh1 * (z1 > 0)
    dw1 = cols1.T @ dz1
    db1 = dz1.sum(axis=0)
    return NetworkParams(dw1, db1, dw2, db2, dw3, db3)


def _as_stack(images, dtype):
    stack = np.stack([np.asarray(im) for im in images]).astype(dtype, copy=False)
    if stack.ndim != 3:
        raise ValueError("images must be 2-D")
    return stack


def forward(params, image):
    """Apply the artifact predictor to one 2-D image (returns same-shape array)."""
    x = np.asarray(image)
    if x.ndim != 2:
        raise ValueError("forward expects a single-channel 2-D image")
    if not np.all(np.isfinite(x)):
        raise ValueError("input image contains non-finite values")
    out, _ = _forward(params, x[None].astype(params.dtype, copy=False))
    return out[0]


# --- losses ----------------------------------------------------------------

def _mse(d):
    return np.mean(d * d)


def pair_loss(r1, r2, g1, g2):
    """The two-subset loss written out directly: returns (total, residual, consistency)."""
    residual = 0.5 * (_mse(r1 - g1 - r2) + _mse(r2 - g2 - r1))
    consistency = _mse((r1 - g1) - (r2 - g2))
    return residual + consistency, residual, consistency


def subset_loss(recons, outputs):
    """K-subset loss: residual and consistency averaged over ordered pairs i != j.

    For K = 2 this reproduces :func:`pair_loss` bit for bit.
    """
    k = len(recons)
    if k < 2:
        raise ValueError("need at least two reconstructions")
    corrected = [recons[i] - outputs[i] for i in range(k)]
    pairs = [(i, j) for i in range(k) for j in range(k) if i != j]
    residual = sum(_mse(corrected[i] - recons[j]) for i, j in pairs) / len(pairs)
    consistency = sum(_mse(corrected[i] - corrected[j]) for i, j in pairs) / len(pairs)
    return residual + consistency, residual, consistency


def _loss_grad_outputs(x, g):
    """d(total)/d(outputs) for stacked recons ``x`` and network outputs ``g`` (K, H, W)."""
    k = x.shape[0]
    n = x[0].size
    c = x - g
    n_pairs = k * (k - 1)
    resid = (k - 1) * c - (x.sum(axis=0) - x)
    cons = k * c - c.sum(axis=0)
    dc = (2.0 * resid + 4.0 * cons) / (n_pairs * n)
    return -dc


def _check_same_shape(images):
    shapes = {np.shape(im) for im in images}
    if len(shapes) != 1:
        raise ValueError(f"reconstructions differ in shape: {sorted(shapes)}")


def loss(params, *recons):
    """(total, residual, consistency) for two or more reconstructions."""
    _check_same_shape(recons)
    x = _as_stack(recons, params.dtype)
    g, _ = _forward(params, x)
    return subset_loss(list(x), list(g))


def gradients(params, *recons):
    """Gradient of the total loss w.r.t. every parameter."""
    _check_same_shape(recons)
    x = _as_stack(recons, params.dtype)
    g, cache = _forward(params, x)
    return _backward(params, cache, _loss_grad_outputs(x, g))


def _loss_and_gradients(params, x):
    g, cache = _forward(params, x)
    terms = subset_loss(list(x), list(g))
    return terms, _backward(params, cache, _loss_grad_outputs(x, g))


# --- optimisation ------------------------------------------------------------

@dataclass
class TrainConfig:
    iterations: int = 3000
    lr: float = 0.01
    step_size: int = 1000
    gamma: float = 0.6
    seed: int = 0
    k_subsets: int = 2
    channels: int = DEFAULT_CHANNELS

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")
        if self.k_subsets < 2:
            raise ValueError("k_subsets must be >= 2")

    def learning_rate(self, iteration):
        return self.lr * self.gamma ** (iteration // self.step_size)

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: NetworkParams
    v: NetworkParams
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params):
        return cls(params.map(np.zeros_like), params.map(np.zeros_like))

    def update(self, params, grads, lr):
        """In-place Adam step on ``params``."""
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for p, g, m, v in zip(params.arrays(), grads.arrays(), self.m.arrays(), self.v.arrays()):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainedModel:
    params: NetworkParams
    mean: float
    std: float
    config: TrainConfig
    history: np.ndarray = field(default=None, repr=False)  # rows: iteration, lr, residual, consistency, total

    def normalize(self, image):
        return (np.asarray(image, dtype=np.float64) - self.mean) / self.std


HISTORY_COLUMNS = ("iteration", "lr", "residual", "consistency", "total")


def train(recons, config=None, dtype=np.float32, callback=None):
    """Fit the artifact predictor to two or more subset reconstructions.

    Inputs are normalised jointly to zero mean and unit variance; every
    iteration is one full-image Adam step. The returned history has one row
    per iteration plus a final row evaluated after the last update.
    """
    config = config or TrainConfig()
    if len(recons) < 2:
        raise ValueError("need at least two reconstructions")
    _check_same_shape(recons)
    stack = np.stack([np.asarray(r, dtype=np.float64) for r in recons])
    if not np.all(np.isfinite(stack)):
        raise ValueError("reconstructions contain non-finite values")
    mean = float(stack.mean())
    std = float(stack.std())
    if std == 0:
        std = 1.0
    x = ((stack - mean) / std).astype(dtype)

    params = init_network(config.channels, config.seed, dtype)
    adam = AdamState.like(params)
    history = np.zeros((config.iterations + 1, len(HISTORY_COLUMNS)))
    for it in range(config.iterations):
        lr = config.learning_rate(it)
        (total, residual, consistency), grads = _loss_and_gradients(params, x)
        if not np.isfinite(total):
            raise TrainingDivergedError(it, total)
        history[it] = (it, lr, residual, consistency, total)
        adam.update(params, grads, lr)
        if callback is not None:
            callback(it, history[it])
    final = subset_loss(list(x), list(_forward(params, x)[0]))
    if not np.isfinite(final[0]):
        raise TrainingDivergedError(config.iterations, final[0])
    history[-1] = (config.iterations, config.learning_rate(config.iterations), final[1], final[2], final[0])
    return TrainedModel(params, mean, std, config, history)


def remove_artifacts(model, recon, shape=None):
    """Return ``(clean, artifact)`` with ``clean = recon - artifact``.

    The network works in float32; the recon is taken at float32 precision and
    ``clean`` is formed in float64 so that ``clean + artifact`` reproduces it
    exactly.
    """
    r32 = np.asarray(recon, dtype=np.float32)
    if shape is not None and r32.shape != tuple(shape):
        raise ValueError(f"recon shape {r32.shape} differs from training shape {tuple(shape)}")
    r = r32.astype(np.float64)
    g = forward(model.params.astype(np.float32), (r - model.mean) / model.std)
    artifact = (np.float32(model.std) * g.astype(np.float32)).astype(np.float64)
    clean = r - artifact
    artifact = r - clean
    return clean, artifact


# --- pipeline ------------------------------------------------------------------

@dataclass
class ZSA2AResult:
    recon: np.ndarray
    clean: np.ndarray
    artifact: np.ndarray
    subsets: list
    models: list


def _clean_images(subset_images, full_image, config, dtype):
    model = train(subset_images, config, dtype=dtype)
    clean, artifact = remove_artifacts(model, full_image, shape=np.shape(subset_images[0]))
    return clean, artifact, model


def run_zsa2a(raw, array, target, m, config=None, threads=1, slice_axis="z", dtype=np.float32):
    """Full pipeline on one target.

    ``target`` is a :class:`Plane` (one slice), a :class:`MapTarget` (MAP image)
    or a grid (volume: every slice along ``slice_axis`` is cleaned by its own
    network, seeded ``config.seed ^ slice_index``).
    """
    config = config or TrainConfig()
    if not 1 <= m < raw.n_channels:
        raise ValueError(f"subset size must satisfy 1 <= m < {raw.n_channels}, got {m}")
    subsets = [random_subset(raw.n_channels, m, config.seed + i) for i in range(config.k_subsets)]
    sub_images = [reconstruct_target(*subset_raw(raw, array, s), target, threads) for s in subsets]
    # rounded to the network's float32 input so that clean + artifact == recon holds exactly
    recon = reconstruct_target(raw, array, target, threads).astype(np.float32).astype(np.float64)
    if isinstance(target, (Plane, MapTarget)):
        clean, artifact, model = _clean_images(sub_images, recon, config, dtype)
        return ZSA2AResult(recon, clean, artifact, subsets, [model])

    ax = axis_index(slice_axis)
    n_slices = recon.shape[ax]

    def one(idx):
        cfg = TrainConfig(**{**config.to_dict(), "seed": config.seed ^ idx})
        imgs = [np.take(s, idx, axis=ax) for s in sub_images]
        return _clean_images(imgs, np.take(recon, idx, axis=ax), cfg, dtype)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(n_slices)))
    else:
        results = []
        for idx in range(n_slices):
            results.append(one(idx))
            log.info("slice %d/%d cleaned", idx + 1, n_slices)
    clean = np.stack([r[0] for r in results], axis=ax)
    artifact = np.stack([r[1] for r in results], axis=ax)
    return ZSA2AResult(recon, clean, artifact, subsets, [r[2] for r in results])
