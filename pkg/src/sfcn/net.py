"""Shape fully convolutional network: layers, skip architecture, loss and SGD.

All layers work on activations stored in *slot order* (see ``graphops``):
row ``r`` of a level-``p`` activation belongs to slot ``r`` of pooling level
``p``. Fake slots are kept at zero by every layer, so values written into
them never reach a real output or a parameter gradient.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .graphops import FAKE, ShapeTables
from .npzio import save_npz

logger = logging.getLogger(__name__)

POOL = 4
BN_EPS = 1e-5


class NumericalError(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass(frozen=True)
class NetworkSpec:
    n_labels: int
    in_channels: int
    widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    fc_width: int = 1024
    K: int = 8
    dropout: float = 0.5
    batch_norm: bool = True

    @property
    def pool_layers(self) -> int:
        return len(self.widths)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ParamStore:
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    bn_state: dict[str, np.ndarray]
    epoch: int = 0
    seed: int = 0

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.velocity.items()},
            {k: v.copy() for k, v in self.bn_state.items()},
            self.epoch,
            self.seed,
        )


def decays(name: str) -> bool:
    """Weight decay applies to weight tensors only, not biases or BN parameters."""
    return name.endswith(".w")


def init_params(spec: NetworkSpec, seed: int = 0) -> ParamStore:
    """Fan-in scaled uniform weights, zero biases, deconvs as x4 nearest-neighbour upsamplers."""
    rng = np.random.default_rng(seed)
    n = spec.n_labels
    p: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in, gain):
        bound = np.sqrt(gain / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    c_in = spec.in_channels
    for i, c_out in enumerate(spec.widths):
        p[f"conv{i}.w"] = uniform((spec.K, c_in, c_out), spec.K * c_in, 6.0)
        p[f"conv{i}.b"] = np.zeros(c_out)
        c_in = c_out
    if spec.batch_norm:
        p["bn.gamma"] = np.ones(spec.widths[0])
        p["bn.beta"] = np.zeros(spec.widths[0])
    p["fc6.w"] = uniform((c_in, spec.fc_width), c_in, 6.0)
    p["fc6.b"] = np.zeros(spec.fc_width)
    p["fc7.w"] = uniform((spec.fc_width, spec.fc_width), spec.fc_width, 6.0)
    p["fc7.b"] = np.zeros(spec.fc_width)
    p["score.w"] = uniform((spec.fc_width, n), spec.fc_width, 3.0)
    p["score.b"] = np.zeros(n)
    for i, c in enumerate(spec.widths):
        p[f"proj{i}.w"] = uniform((c, n), c, 3.0)
        p[f"proj{i}.b"] = np.zeros(n)
        p[f"deconv{i}.w"] = np.tile(np.eye(n), (POOL, 1, 1))

    velocity = {k: np.zeros_like(v) for k, v in p.items()}
    bn_state = {}
    if spec.batch_norm:
        bn_state = {"mean": np.zeros(spec.widths[0]), "var": np.ones(spec.widths[0])}
    return ParamStore(p, velocity, bn_state, 0, seed)


# ---------------------------------------------------------------------------
# layers


def conv_forward(table: np.ndarray, x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Row convolution: ``out[r] = b + sum_k w[k].T @ x[table[r, k]]``.

    FAKE entries read as zero vectors; all-FAKE rows produce zero output.
    """
    S, K = table.shape
    if w.shape[0] != K or w.shape[1] != x.shape[1]:
        raise ValueError(f"kernel {w.shape} does not match table width {K} / input {x.shape}")
    padded = np.vstack([x, np.zeros((1, x.shape[1]), dtype=x.dtype)])
    gathered = padded[np.where(table == FAKE, len(x), table)].reshape(S, -1)
    out = gathered @ w.reshape(-1, w.shape[2]) + b
    out[table[:, 0] == FAKE] = 0.0
    return out, gathered


def conv_backward(table: np.ndarray, gathered: np.ndarray, w: np.ndarray, dout: np.ndarray, scatter=None):
    real = table[:, 0] != FAKE
    dout = dout * real[:, None]
    dw = (gathered.T @ dout).reshape(w.shape)
    db = dout.sum(axis=0)
    dg = (dout @ w.reshape(-1, w.shape[2]).T).reshape(-1, w.shape[1])
    if scatter is not None:
        dx = scatter @ dg
    else:
        flat = table.ravel()
        keep = flat != FAKE
        dx = np.zeros((len(table), w.shape[1]), dtype=dg.dtype)
        np.add.at(dx, flat[keep], dg[keep])
    return dx, dw, db


def pool_forward(x: np.ndarray, mask: np.ndarray):
    """Max over consecutive groups of four slots; fake slots contribute 0.

    Returns the pooled rows and the winning child index per output entry,
    with -1 where a fake slot won (no gradient is routed there).
    """
    S, C = x.shape
    if S % POOL:
        raise ValueError("row count must be divisible by 4")
    vals = np.where(mask[:, None], x, 0.0).reshape(S // POOL, POOL, C)
    arg = vals.argmax(axis=1)
    out = np.take_along_axis(vals, arg[:, None, :], axis=1)[:, 0, :]
    m4 = mask.reshape(S // POOL, POOL)
    arg = np.where(np.take_along_axis(m4, arg, axis=1), arg, -1)
    return out, arg


def pool_backward(dout: np.ndarray, arg: np.ndarray) -> np.ndarray:
    P, C = dout.shape
    dx = np.zeros((P, POOL, C), dtype=dout.dtype)
    valid = arg >= 0
    rows, cols = np.nonzero(valid)
    dx[rows, arg[rows, cols], cols] = dout[rows, cols]
    return dx.reshape(P * POOL, C)


def deconv_forward(x: np.ndarray, w: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Transposed convolution along rows, kernel height 4, stride 4: ``out[4r+k] = x[r] @ w[k]``."""
    out = np.einsum("rc,kcd->rkd", x, w).reshape(len(x) * POOL, w.shape[2])
    return out * mask[:, None]


def deconv_backward(x: np.ndarray, w: np.ndarray, mask: np.ndarray, dout: np.ndarray):
    d4 = (dout * mask[:, None]).reshape(len(x), POOL, -1)
    dw = np.einsum("rc,rkd->kcd", x, d4)
    dx = np.einsum("rkd,kcd->rc", d4, w)
    return dx, dw


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-node 1x1 transform; fake rows stay zero."""
    return (x @ w + b) * mask[:, None]


def dense_backward(x: np.ndarray, w: np.ndarray, mask: np.ndarray, dout: np.ndarray):
    dout = dout * mask[:, None]
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def bn_forward(x, gamma, beta, mask, train=True, running=None):
    """Batch normalization over the real rows of one shape."""
    real = x[mask]
    if train:
        if len(real) == 0:
            raise ValueError("batch normalization over zero real rows")
        mu, var = real.mean(axis=0), real.var(axis=0)
    else:
        mu, var = running["mean"], running["var"]
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv
    out = (gamma * xhat + beta) * mask[:, None]
    return out, (xhat, inv, mu, var)


def bn_backward(dout, gamma, mask, cache):
    xhat, inv, _, _ = cache
    m = mask[:, None]
    dout = dout * m
    n = mask.sum()
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * m * (dxhat * xhat).sum(axis=0))
    return dx * m, dgamma, dbeta


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability p, else 1/(1-p)."""
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_loss(scores: np.ndarray, labels: np.ndarray):
    """Summed (unnormalized) per-face cross entropy and its gradient."""
    z = scores - scores.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    idx = np.arange(len(labels))
    loss = float((logsum - z[idx, labels]).sum())
    grad = np.exp(z - logsum[:, None])
    grad[idx, labels] -= 1.0
    return loss, grad


# ---------------------------------------------------------------------------
# network


def forward(spec: NetworkSpec, store: ParamStore, st: ShapeTables, x: np.ndarray,
            train: bool = False, rng: np.random.Generator | None = None):
    """Scores (h x n) for one shape plus the cache needed by ``backward``."""
    if st.pool_layers != spec.pool_layers:
        raise ValueError(f"tables have {st.pool_layers} levels, network expects {spec.pool_layers}")
    if x.shape != (st.h, spec.in_channels):
        raise ValueError(f"input shape {x.shape} != ({st.h}, {spec.in_channels})")
    P = spec.pool_layers
    prm = store.params
    cache: dict = {"blocks": [], "train": train}

    a = np.zeros((len(st.masks[0]), spec.in_channels), dtype=x.dtype)
    a[st.input_slots] = x
    pools = []
    for i in range(P):
        mask = st.masks[i]
        z, gathered = conv_forward(st.tables[i], a, prm[f"conv{i}.w"], prm[f"conv{i}.b"])
        blk = {"gathered": gathered}
        if i == 0 and spec.batch_norm:
            z, bn_cache = bn_forward(z, prm["bn.gamma"], prm["bn.beta"], mask, train=train, running=store.bn_state)
            blk["bn"] = bn_cache
            if train:
                m = 0.9
                store.bn_state["mean"] = m * store.bn_state["mean"] + (1 - m) * bn_cache[2]
                store.bn_state["var"] = m * store.bn_state["var"] + (1 - m) * bn_cache[3]
        blk["z"] = z
        r = relu(z)
        a, arg = pool_forward(r, mask)
        blk["arg"] = arg
        cache["blocks"].append(blk)
        pools.append(a)

    top = st.masks[P]
    drop = spec.dropout if train and spec.dropout > 0 else 0.0
    if drop and rng is None:
        raise ValueError("training with dropout needs an rng")
    fc = {}
    h6 = dense_forward(a, prm["fc6.w"], prm["fc6.b"], top)
    d6 = dropout_mask(h6.shape, drop, rng) if drop else None
    a6 = relu(h6) * d6 if drop else relu(h6)
    h7 = dense_forward(a6, prm["fc7.w"], prm["fc7.b"], top)
    d7 = dropout_mask(h7.shape, drop, rng) if drop else None
    a7 = relu(h7) * d7 if drop else relu(h7)
    s = dense_forward(a7, prm["score.w"], prm["score.b"], top)
    fc.update(a5=a, h6=h6, d6=d6, a6=a6, h7=h7, d7=d7, a7=a7)
    cache["fc"] = fc

    s = s + dense_forward(pools[P - 1], prm[f"proj{P - 1}.w"], prm[f"proj{P - 1}.b"], top)
    ups = []
    for i in range(P - 1, -1, -1):
        ups.append(s)
        s = deconv_forward(s, prm[f"deconv{i}.w"], st.masks[i])
        if i > 0:
            s = s + dense_forward(pools[i - 1], prm[f"proj{i - 1}.w"], prm[f"proj{i - 1}.b"], st.masks[i])
    cache["ups"] = ups
    cache["pools"] = pools
    return s[st.input_slots], cache


def backward(spec: NetworkSpec, store: ParamStore, st: ShapeTables, cache: dict, dscores: np.ndarray):
    """Exact parameter gradients for the scores' upstream gradient ``dscores`` (h x n)."""
    if not cache or "blocks" not in cache:
        raise ValueError("backward called without forward state")
    P = spec.pool_layers
    prm = store.params
    g: dict[str, np.ndarray] = {}
    pools, ups, fc = cache["pools"], cache["ups"], cache["fc"]

    ds = np.zeros((len(st.masks[0]), spec.n_labels), dtype=dscores.dtype)
    ds[st.input_slots] = dscores
    dpools = [None] * P
    # walk the skip chain from the finest level upwards
    for i in range(P):
        s_in = ups[P - 1 - i]
        if i > 0:
            dx, g[f"proj{i - 1}.w"], g[f"proj{i - 1}.b"] = dense_backward(
                pools[i - 1], prm[f"proj{i - 1}.w"], st.masks[i], ds)
            dpools[i - 1] = dx
        ds, g[f"deconv{i}.w"] = deconv_backward(s_in, prm[f"deconv{i}.w"], st.masks[i], ds)

    top = st.masks[P]
    dx, g[f"proj{P - 1}.w"], g[f"proj{P - 1}.b"] = dense_backward(pools[P - 1], prm[f"proj{P - 1}.w"], top, ds)
    dpools[P - 1] = dx
    da7, g["score.w"], g["score.b"] = dense_backward(fc["a7"], prm["score.w"], top, ds)
    if fc["d7"] is not None:
        da7 = da7 * fc["d7"]
    dh7 = relu_backward(fc["h7"], da7)
    da6, g["fc7.w"], g["fc7.b"] = dense_backward(fc["a6"], prm["fc7.w"], top, dh7)
    if fc["d6"] is not None:
        da6 = da6 * fc["d6"]
    dh6 = relu_backward(fc["h6"], da6)
    da, g["fc6.w"], g["fc6.b"] = dense_backward(fc["a5"], prm["fc6.w"], top, dh6)

    da = da + dpools[P - 1]
    for i in range(P - 1, -1, -1):
        blk = cache["blocks"][i]
        dr = pool_backward(da, blk["arg"])
        dz = relu_backward(blk["z"], dr)
        if "bn" in blk:
            dz, g["bn.gamma"], g["bn.beta"] = bn_backward(dz, prm["bn.gamma"], st.masks[0], blk["bn"])
        dx, g[f"conv{i}.w"], g[f"conv{i}.b"] = conv_backward(
            st.tables[i], blk["gathered"], prm[f"conv{i}.w"], dz, st.scatter_matrix(i))
        if i > 0:
            da = dx + dpools[i - 1]
    return g


def loss_and_grads(spec, store, st, x, labels, rng=None, train=True):
    scores, cache = forward(spec, store, st, x, train=train, rng=rng)
    loss, dscores = softmax_loss(scores, labels)
    return loss, backward(spec, store, st, cache, dscores)


def predict(spec: NetworkSpec, store: ParamStore, st: ShapeTables, x: np.ndarray) -> np.ndarray:
    """Per-face label distribution (h x n) in inference mode."""
    scores, _ = forward(spec, store, st, x, train=False)
    return softmax(scores)


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
             momentum: float = 0.9, weight_decay: float = 1e-3) -> None:
    """Momentum SGD in place: ``v = m*v - lr*(g + wd*w)``, ``w += v``."""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient for {name}")
    for name, grad in grads.items():
        w = store.params[name]
        if weight_decay and decays(name):
            grad = grad + weight_decay * w
        v = store.velocity[name]
        v *= momentum
        v -= lr * grad
        w += v


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 3e-6
    momentum: float = 0.9
    weight_decay: float = 1e-3
    lr_steps: tuple[float, ...] = (0.6, 0.85)
    lr_gamma: float = 0.1
    seed: int = 0
    clip_norm: float | None = None

    def lr_at(self, epoch: int) -> float:
        drops = sum(epoch >= int(round(f * self.epochs)) for f in self.lr_steps)
        return self.lr * self.lr_gamma**drops


@dataclass
class TrainingSample:
    tables: ShapeTables
    x: np.ndarray
    labels: np.ndarray


@dataclass
class TrainResult:
    store: ParamStore
    losses: list[float] = field(default_factory=list)


def train(samples: list[TrainingSample], spec: NetworkSpec, config: TrainConfig,
          store: ParamStore | None = None, callback=None) -> TrainResult:
    """Whole-shape momentum SGD, one shape per step, seeded shuffling.

    ``losses`` holds the summed loss over all shapes per epoch.
    """
    for s in samples:
        if s.labels.min() < 0 or s.labels.max() >= spec.n_labels:
            raise ValueError(f"label outside [0, {spec.n_labels})")
    rng = np.random.default_rng(config.seed)
    store = store or init_params(spec, config.seed)
    result = TrainResult(store)
    for epoch in range(store.epoch, config.epochs):
        lr = config.lr_at(epoch)
        total = 0.0
        for k in rng.permutation(len(samples)):
            s = samples[k]
            loss, grads = loss_and_grads(spec, store, s.tables, s.x, s.labels, rng=rng)
            if not np.isfinite(loss):
                raise NumericalError(f"loss diverged at epoch {epoch}")
            if config.clip_norm:
                norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > config.clip_norm:
                    grads = {n: g * (config.clip_norm / norm) for n, g in grads.items()}
            sgd_step(store, grads, lr, config.momentum, config.weight_decay)
            total += loss
        store.epoch = epoch + 1
        result.losses.append(total)
        if callback is not None:
            callback(epoch, total)
    return result


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | os.PathLike, spec: NetworkSpec, store: ParamStore) -> None:
    """``.npz`` with a JSON ``header`` (version, spec, spec hash, epoch, seed)
    followed by ``param/<name>``, ``velocity/<name>`` and ``bn/<name>`` arrays."""
    header = {
        "version": CHECKPOINT_VERSION,
        "spec": asdict(spec),
        "spec_hash": spec.digest(),
        "epoch": store.epoch,
        "seed": store.seed,
    }
    arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
    for k, v in sorted(store.params.items()):
        arrays[f"param/{k}"] = v
    for k, v in sorted(store.velocity.items()):
        arrays[f"velocity/{k}"] = v
    for k, v in sorted(store.bn_state.items()):
        arrays[f"bn/{k}"] = v
    save_npz(path, arrays)


def load_checkpoint(path: str | os.PathLike) -> tuple[NetworkSpec, ParamStore]:
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        sd = header["spec"]
        sd["widths"] = tuple(sd["widths"])
        spec = NetworkSpec(**sd)
        if spec.digest() != header["spec_hash"]:
            raise ValueError("checkpoint spec hash mismatch")
        groups: dict[str, dict] = {"param": {}, "velocity": {}, "bn": {}}
        for key in z.files:
            if "/" in key:
                grp, name = key.split("/", 1)
                groups[grp][name] = z[key]
    store = ParamStore(groups["param"], groups["velocity"], groups["bn"], header["epoch"], header["seed"])
    return spec, store
