"""Toy differentiable occupancy predictor and its training regimes.

One shared backbone (affine -> dataset-specific norm -> ramp -> 6-neighborhood
mean -> affine) feeds one classification head per dataset. Training regimes:
``single``, ``pretrain_finetune``, ``direct_merge`` (one head over the
amalgamated label union), and ``mdt`` (per-dataset heads, balanced sampling).
Everything is float64 with exact analytic gradients and plain gradient
descent.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .align import NormState, dsnorm_backward, dsnorm_forward, dsnorm_update_shared
from .core import OccupancyGrid, ScoreGrid, rng_stream

REGIMES = ("single", "pretrain_finetune", "direct_merge", "mdt")
NUM_INPUT_FEATURES = 5

# statistic-set ids of the baseline regimes (shared plain normalization)
MERGED_STATS_ID = "merged"
PLAIN_STATS_ID = "plain"

MCKPT_MAGIC = b"MCKP"
MCKPT_VERSION = 1


class UnknownDataset(KeyError):
    pass


class DimMismatch(ValueError):
    pass


class DivergedLoss(ArithmeticError):
    pass


@dataclass
class ModelParams:
    """Backbone weights plus one classification head per registered dataset."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    heads: dict  # dataset_id -> (weight (hidden, classes), bias (classes,))

    @property
    def hidden(self):
        return self.w1.shape[1]

    def head(self, dataset_id):
        try:
            return self.heads[dataset_id]
        except KeyError:
            raise UnknownDataset(dataset_id) from None

    def copy(self):
        return ModelParams(
            w1=self.w1.copy(),
            b1=self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2.copy(),
            heads={k: (w.copy(), b.copy()) for k, (w, b) in self.heads.items()},
        )


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "mdt"
    epochs: int = 40
    batch_size: int = 4
    lr: float = 0.05
    seed: int = 0
    hidden: int = 8
    stride: int = 2
    pretrain_epochs: int = 20
    weight_rule: str = "inverse_frequency"  # or "uniform"
    weight_clip: tuple = (0.1, 10.0)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.weight_rule not in ("inverse_frequency", "uniform"):
            raise ValueError(f"unknown weight rule {self.weight_rule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def init_params(head_sizes, hidden, seed):
    """Seed-deterministic parameter initialization; one head per dataset."""
    rng = rng_stream(seed, "init")
    w1 = rng.normal(0.0, 1.0 / np.sqrt(NUM_INPUT_FEATURES), (NUM_INPUT_FEATURES, hidden))
    b1 = np.zeros(hidden)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, hidden))
    b2 = np.zeros(hidden)
    heads = {}
    for ds in head_sizes:
        heads[ds] = (
            rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, head_sizes[ds])),
            np.zeros(head_sizes[ds]),
        )
    return ModelParams(w1=w1, b1=b1, w2=w2, b2=b2, heads=heads)


_COUNT_CACHE = {}


def _neighbor_counts(dims):
    dims = tuple(dims)
    cached = _COUNT_CACHE.get(dims)
    if cached is not None:
        return cached
    cnt = np.ones(dims)
    for ax in range(3):
        pad = np.ones(dims)
        sl_lo = [slice(None)] * 3
        sl_lo[ax] = slice(0, 1)
        pad[tuple(sl_lo)] = 0.0
        cnt += pad
        pad = np.ones(dims)
        sl_hi = [slice(None)] * 3
        sl_hi[ax] = slice(dims[ax] - 1, dims[ax])
        pad[tuple(sl_hi)] = 0.0
        cnt += pad
    _COUNT_CACHE[dims] = cnt
    return cnt


def _stencil_sum(x, spatial_from=0):
    """Sum over each voxel and its in-grid 6-neighborhood; symmetric operator.

    Spatial axes are ``spatial_from .. spatial_from + 2``, so a whole batch of
    volumes can be shifted at once.
    """
    out = x.copy()
    for ax in range(spatial_from, spatial_from + 3):
        lo = [slice(None)] * x.ndim
        hi = [slice(None)] * x.ndim
        lo[ax] = slice(1, None)
        hi[ax] = slice(None, -1)
        out[tuple(hi)] += x[tuple(lo)]
        out[tuple(lo)] += x[tuple(hi)]
    return out


def neighbor_mean(x, counts=None):
    """Mean of each voxel with its in-grid 6-neighbors (border-aware)."""
    if counts is None:
        counts = _neighbor_counts(x.shape[:3])
    return _stencil_sum(x) / counts[..., None]


def neighbor_mean_transpose(g, counts=None):
    if counts is None:
        counts = _neighbor_counts(g.shape[:3])
    return _stencil_sum(g / counts[..., None])


def forward(features, dataset_id, params, norm_state, mode="train",
            update_stats=None, return_cache=False):
    """Score every voxel of one (D, H, W, 5) feature volume.

    The volume is a batch on its own for normalization purposes; use
    batch_forward for multi-scene batches with joint batch statistics.
    """
    out, caches = batch_forward(
        [features], dataset_id, params, norm_state, mode=mode, update_stats=update_stats
    )
    scores = out[0]
    grid = ScoreGrid(dims=scores.shape[:3], num_classes=scores.shape[3], scores=scores)
    if return_cache:
        return grid, caches
    return grid


def _scene_slices(volumes):
    """Per-scene (dims, row-slice) bookkeeping for a possibly mixed batch."""
    slices = []
    start = 0
    for v in volumes:
        if v.ndim != 4 or v.shape[3] != NUM_INPUT_FEATURES:
            raise DimMismatch(f"feature volume shape {v.shape} lacks {NUM_INPUT_FEATURES} features")
        n = int(np.prod(v.shape[:3]))
        slices.append((v.shape[:3], slice(start, start + n)))
        start += n
    return slices


def _neighbor_mean_batch(flat, slices, hidden, transpose=False):
    """Apply the 6-neighborhood mean (or its adjoint) scene by scene on the
    concatenated voxel rows; scenes may have different grid dims."""
    out = np.empty_like(flat)
    for dims, sl in slices:
        counts = _neighbor_counts(dims)[..., None]
        block = flat[sl].reshape(dims + (hidden,))
        if transpose:
            res = _stencil_sum(block / counts)
        else:
            res = _stencil_sum(block) / counts
        out[sl] = res.reshape(-1, hidden)
    return out


def batch_forward(volumes, dataset_id, params, norm_state, mode="train", update_stats=None,
                  head_id=None):
    """Forward a batch of feature volumes through backbone + one head.

    Scenes in the batch may have different grid dims (a directly-merged
    stream mixes datasets); the normalization statistics are taken over all
    voxels of all scenes jointly. ``head_id`` selects a classification head
    other than the normalization dataset's own (used when reading several
    heads off one backbone pass). Returns per-volume score arrays plus the
    cache needed for backward.
    """
    head_w, head_b = params.head(dataset_id if head_id is None else head_id)
    slices = _scene_slices(volumes)
    x = np.concatenate(
        [v.reshape(-1, NUM_INPUT_FEATURES) for v in volumes], axis=0
    )
    z1 = x @ params.w1 + params.b1
    z2, norm_cache = dsnorm_forward(
        z1, dataset_id, norm_state, mode=mode, update_stats=update_stats, return_cache=True
    )
    a3 = np.maximum(z2, 0.0)
    z4 = _neighbor_mean_batch(a3, slices, params.hidden)
    z5 = z4 @ params.w2 + params.b2
    scores = z5 @ head_w + head_b
    outs = [
        scores[sl].reshape(dims + (head_w.shape[1],)) for dims, sl in slices
    ]
    cache = {
        "x": x,
        "z2": z2,
        "norm": norm_cache,
        "slices": slices,
        "z4": z4,
        "z5": z5,
    }
    return outs, cache


def loss_ce(scores, gt, class_weights):
    """Weighted softmax cross-entropy averaged over voxels.

    Accepts a ScoreGrid (or raw (D, H, W, C) array) against an OccupancyGrid
    (or raw label array). Returns the scalar loss and its gradient with
    respect to the scores: (softmax - onehot) * weight / N per voxel.
    """
    raw = scores.scores if isinstance(scores, ScoreGrid) else np.asarray(scores, dtype=np.float64)
    labels = gt.labels if isinstance(gt, OccupancyGrid) else np.asarray(gt)
    if raw.shape[:3] != labels.shape:
        raise DimMismatch(f"score dims {raw.shape[:3]} != label dims {labels.shape}")
    num_classes = raw.shape[3]
    flat = raw.reshape(-1, num_classes)
    y = labels.reshape(-1).astype(np.int64)
    n = y.size
    w = np.asarray(class_weights, dtype=np.float64)
    shifted = flat - flat.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    p = expv / expv.sum(axis=1, keepdims=True)
    wv = w[y]
    loss = float(np.sum(wv * -np.log(np.maximum(p[np.arange(n), y], 1e-300))) / n)
    grad = p * wv[:, None]
    grad[np.arange(n), y] -= wv
    grad /= n
    return loss, grad.reshape(raw.shape)


@dataclass
class Grads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    heads: dict
    gamma: np.ndarray
    beta: np.ndarray


def batch_loss(volumes, gts, dataset_id, params, norm_state, class_weights, mode="train"):
    """Pure sum-reduced batch loss (no stat updates); the finite-difference
    reference for backward()."""
    outs, _ = batch_forward(volumes, dataset_id, params, norm_state, mode=mode, update_stats=False)
    total = 0.0
    for out, gt in zip(outs, gts):
        li, _ = loss_ce(out, gt, class_weights)
        total += li
    return total


def backward(volumes, gts, dataset_id, params, norm_state, class_weights,
             mode="train", update_stats=None, head_id=None):
    """Analytic gradients of the sum-reduced batch loss.

    Heads other than the trained one receive exact zero gradients; the
    dataset's running statistics are refreshed (not differentiated) unless
    ``update_stats`` is False.
    """
    outs, cache = batch_forward(
        volumes, dataset_id, params, norm_state, mode=mode, update_stats=update_stats,
        head_id=head_id,
    )
    trained_head = dataset_id if head_id is None else head_id
    head_w, head_b = params.head(trained_head)
    total = 0.0
    gscores = []
    for out, gt in zip(outs, gts):
        li, gi = loss_ce(out, gt, class_weights)
        total += li
        gscores.append(gi.reshape(-1, head_w.shape[1]))
    g = np.concatenate(gscores, axis=0)
    z5 = cache["z5"]
    gw_head = z5.T @ g
    gb_head = g.sum(axis=0)
    gz5 = g @ head_w.T
    z4 = cache["z4"]
    gw2 = z4.T @ gz5
    gb2 = gz5.sum(axis=0)
    gz4 = gz5 @ params.w2.T
    ga3 = _neighbor_mean_batch(gz4, cache["slices"], params.hidden, transpose=True)
    gz2 = ga3 * (cache["z2"] > 0.0)
    gz1, ggamma, gbeta = dsnorm_backward(gz2, cache["norm"], norm_state)
    gw1 = cache["x"].T @ gz1
    gb1 = gz1.sum(axis=0)
    heads = {}
    for ds, (w, b) in params.heads.items():
        if ds == trained_head:
            heads[ds] = (gw_head, gb_head)
        else:
            heads[ds] = (np.zeros_like(w), np.zeros_like(b))
    return total, Grads(w1=gw1, b1=gb1, w2=gw2, b2=gb2, heads=heads, gamma=ggamma, beta=gbeta)


def sgd_step(params, norm_state, grads, dataset_id, lr):
    params.w1 -= lr * grads.w1
    params.b1 -= lr * grads.b1
    params.w2 -= lr * grads.w2
    params.b2 -= lr * grads.b2
    w, b = params.heads[dataset_id]
    gw, gb = grads.heads[dataset_id]
    params.heads[dataset_id] = (w - lr * gw, b - lr * gb)
    dsnorm_update_shared(norm_state, grads.gamma, grads.beta, lr)


def class_weights_from_counts(counts, clip=(0.1, 10.0), ref=16.0):
    """Inverse-frequency weights clipped to the given band.

    The normalizer is a fixed reference constant rather than the head's class
    count, so heads of different widths (for instance an amalgamated union
    head) train toward the same empty-vs-occupied operating point. Absent
    classes get the upper clip.
    """
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    w = np.full(counts.size, clip[1])
    present = counts > 0
    w[present] = total / (ref * counts[present])
    return np.clip(w, clip[0], clip[1])


def merged_batches(sizes, batch_size, seed):
    """Plain merged-dataset schedule: one shuffled pass over the union of all
    samples, chunked into batches that freely mix datasets."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pool = [(ds, i) for ds in sizes for i in range(sizes[ds])]
    rng = rng_stream(seed, "sampler/merged")
    order = rng.permutation(len(pool))
    batches = []
    for lo in range(0, len(pool), batch_size):
        chunk = [pool[k] for k in order[lo : lo + batch_size]]
        batches.append(chunk)
    return batches


def balanced_batches(sizes, batch_size, seed):
    """Round-robin single-dataset batch schedule covering one epoch.

    ``sizes`` is an ordered mapping dataset_id -> sample count. Every batch
    draws all its samples from one dataset; datasets alternate in order.
    Within a dataset, indices are a seeded permutation; shorter datasets wrap
    around with fresh permutations to match the longest and their extra draws
    are flagged as repeats. The largest dataset is covered exactly once.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ids = list(sizes)
    if not ids:
        return []
    longest = max(sizes.values())
    n_batches = -(-longest // batch_size)
    slot_sizes = [batch_size] * (n_batches - 1) + [longest - batch_size * (n_batches - 1)]
    streams = {}
    flags = {}
    for ds in ids:
        size = sizes[ds]
        rng = rng_stream(seed, f"sampler/{ds}")
        idx = []
        while len(idx) < longest:
            idx.extend(rng.permutation(size).tolist())
        streams[ds] = np.asarray(idx[:longest], dtype=np.int64)
        flags[ds] = np.arange(longest) >= size
    schedule = []
    pos = {ds: 0 for ds in ids}
    for b in range(n_batches):
        for ds in ids:
            take = slot_sizes[b]
            lo = pos[ds]
            schedule.append((ds, streams[ds][lo : lo + take], flags[ds][lo : lo + take]))
            pos[ds] = lo + take
    return schedule


@dataclass
class TrainData:
    """Prepared training stream for one dataset: per-scene feature volumes and
    coarse ground-truth label arrays over the same lattice."""

    features: list
    labels: list
    num_classes: int
    empty_id: int = 0
    coarse_dims: tuple = field(default=())
    voxel_size: float = 0.0
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels must pair up")
        if self.features and not self.coarse_dims:
            self.coarse_dims = tuple(self.features[0].shape[:3])

    def __len__(self):
        return len(self.features)


@dataclass
class TrainResult:
    params: ModelParams
    norm_state: NormState
    log: list  # rows: dict(epoch, dataset, loss, iou, miou)
    weights: dict
    block_offsets: dict = None  # amalgamated-union label offsets (direct_merge)


def _epoch_metrics(data, norm_id, head_id, params, norm_state, weights):
    """Eval-mode loss plus geometric IoU / mIoU of argmax labels on the
    training scenes (confusion tallied over full coarse grids)."""
    from .metrics import ConfusionMatrix, geometric_iou, miou

    cm = ConfusionMatrix(num_classes=data.num_classes)
    total = 0.0
    # eval mode uses stored stats, so one big batch gives per-scene results
    outs, _ = batch_forward(
        data.features, norm_id, params, norm_state, mode="eval", head_id=head_id
    )
    for out, labels in zip(outs, data.labels):
        li, _ = loss_ce(out, labels, weights)
        total += li
        cm.add_arrays(np.argmax(out, axis=3), labels)
    return (
        total / max(len(data), 1),
        geometric_iou(cm, empty_id=data.empty_id),
        miou(cm, empty_id=data.empty_id),
    )


def train(regime, datasets, config, norm_eps=1e-5, norm_momentum=0.1):
    """Train under one of the four regimes; deterministic in config.seed.

    ``datasets`` is an ordered mapping dataset_id -> TrainData, already
    prepared (range-aligned for mdt, raw otherwise; direct_merge data must
    already carry labels in the amalgamated union space). Regime wiring:

    * single / mdt: dataset-specific statistics and heads, balanced
      single-dataset batches;
    * direct_merge: one amalgamated head, one plain statistic set, shuffled
      batches that freely mix the merged datasets;
    * pretrain_finetune: per-dataset heads but one plain statistic set (the
      baseline model has ordinary batch normalization), source phase then
      target phase.

    Raises DivergedLoss when the loss stops being finite.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if regime == "single" and len(datasets) != 1:
        raise ValueError("single regime expects exactly one dataset")
    if regime == "pretrain_finetune" and len(datasets) != 2:
        raise ValueError("pretrain_finetune expects (source, target)")
    ids = list(datasets)
    if regime == "direct_merge":
        union = {datasets[ds].num_classes for ds in ids}
        if len(union) != 1:
            raise ValueError("direct_merge data must share the amalgamated class count")
        head_route = {ds: MERGED_STATS_ID for ds in ids}
        norm_route = {ds: MERGED_STATS_ID for ds in ids}
        head_sizes = {MERGED_STATS_ID: union.pop()}
        norm_ids = [MERGED_STATS_ID]
    elif regime == "pretrain_finetune":
        head_route = {ds: ds for ds in ids}
        norm_route = {ds: PLAIN_STATS_ID for ds in ids}
        head_sizes = {ds: datasets[ds].num_classes for ds in ids}
        norm_ids = [PLAIN_STATS_ID]
    else:
        head_route = {ds: ds for ds in ids}
        norm_route = {ds: ds for ds in ids}
        head_sizes = {ds: datasets[ds].num_classes for ds in ids}
        norm_ids = ids
    params = init_params(head_sizes, config.hidden, config.seed)
    norm_state = NormState(config.hidden, norm_ids, eps=norm_eps, momentum=norm_momentum)
    weights = {}
    for head_id in head_sizes:
        stacked = [
            l.reshape(-1)
            for ds in ids
            if head_route[ds] == head_id
            for l in datasets[ds].labels
        ]
        if config.weight_rule == "uniform":
            weights[head_id] = np.ones(head_sizes[head_id])
        else:
            counts = np.bincount(
                np.concatenate(stacked) if stacked else np.zeros(0, dtype=np.int64),
                minlength=head_sizes[head_id],
            )
            weights[head_id] = class_weights_from_counts(counts, clip=config.weight_clip)
    log = []

    def step(batch, epoch):
        # batch: list of (dataset_id, scene_index); single-dataset for the
        # balanced schedule, possibly mixed for direct merging
        vols = [datasets[ds].features[i] for ds, i in batch]
        gts = [datasets[ds].labels[i] for ds, i in batch]
        norm_id = norm_route[batch[0][0]]
        head_id = head_route[batch[0][0]]
        loss, grads = backward(
            vols, gts, norm_id, params, norm_state, weights[head_id], head_id=head_id
        )
        if not np.isfinite(loss):
            raise DivergedLoss(f"non-finite loss at epoch {epoch}")
        sgd_step(params, norm_state, grads, head_id, config.lr)

    def log_epoch(epoch):
        for ds in ids:
            if not len(datasets[ds]):
                continue
            l, iou, mi = _epoch_metrics(
                datasets[ds], norm_route[ds], head_route[ds], params, norm_state,
                weights[head_route[ds]],
            )
            log.append({"epoch": epoch, "dataset": ds, "loss": l, "iou": iou, "miou": mi})

    def run_phase(active_ids, epochs, epoch_base):
        for e in range(epochs):
            epoch = epoch_base + e
            sizes = {ds: len(datasets[ds]) for ds in active_ids if len(datasets[ds])}
            if not sizes:
                continue
            epoch_seed = config.seed + 7919 * epoch
            if regime == "direct_merge":
                batches = merged_batches(sizes, config.batch_size, seed=epoch_seed)
            else:
                batches = [
                    [(ds, i) for i in idxs]
                    for ds, idxs, _ in balanced_batches(sizes, config.batch_size, seed=epoch_seed)
                ]
            for batch in batches:
                step(batch, epoch)
            log_epoch(epoch)

    if regime == "pretrain_finetune":
        run_phase([ids[0]], config.pretrain_epochs, 0)
        run_phase([ids[1]], config.epochs, config.pretrain_epochs)
    else:
        run_phase(ids, config.epochs, 0)
    return TrainResult(params=params, norm_state=norm_state, log=log, weights=weights)


def save_checkpoint(path, params, norm_state):
    """Write MCKPT v1: magic | version | named f64 tensors | per-dataset
    NormState blobs."""
    tensors = [
        ("backbone.w1", params.w1),
        ("backbone.b1", params.b1),
        ("backbone.w2", params.w2),
        ("backbone.b2", params.b2),
        ("norm.gamma", norm_state.gamma),
        ("norm.beta", norm_state.beta),
        ("norm.eps", np.array([norm_state.eps])),
        ("norm.momentum", np.array([norm_state.momentum])),
    ]
    for ds in params.heads:
        w, b = params.heads[ds]
        tensors.append((f"head.{ds}.w", w))
        tensors.append((f"head.{ds}.b", b))
    blob = [struct.pack("<4sH", MCKPT_MAGIC, MCKPT_VERSION), struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr, dtype=np.float64)
        nb = name.encode()
        blob.append(struct.pack("<H", len(nb)))
        blob.append(nb)
        blob.append(struct.pack("<B", arr.ndim))
        blob.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blob.append(arr.astype("<f8").tobytes(order="C"))
    states = norm_state.dataset_ids()
    blob.append(struct.pack("<H", len(states)))
    for ds in states:
        st = norm_state.stats(ds)
        nb = ds.encode()
        blob.append(struct.pack("<H", len(nb)))
        blob.append(nb)
        blob.append(struct.pack("<I", norm_state.num_features))
        blob.append(st["mean"].astype("<f8").tobytes())
        blob.append(st["var"].astype("<f8").tobytes())
        blob.append(struct.pack("<Q", st["count"]))
    data = b"".join(blob)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MCKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {data[:4]!r}")
    version = struct.unpack_from("<H", data, 4)[0]
    if version != MCKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 6
    (n_tensors,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(n_tensors):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
        tensors[name] = arr
    (n_states,) = struct.unpack_from("<H", data, off)
    off += 2
    ds_ids = []
    stats = {}
    for _ in range(n_states):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        ds = data[off : off + nlen].decode()
        off += nlen
        (nf,) = struct.unpack_from("<I", data, off)
        off += 4
        mean = np.frombuffer(data, dtype="<f8", count=nf, offset=off).copy()
        off += 8 * nf
        var = np.frombuffer(data, dtype="<f8", count=nf, offset=off).copy()
        off += 8 * nf
        (count,) = struct.unpack_from("<Q", data, off)
        off += 8
        ds_ids.append(ds)
        stats[ds] = {"mean": mean, "var": var, "count": count}
    norm_state = NormState(
        tensors["norm.gamma"].size,
        [],
        eps=float(tensors["norm.eps"][0]),
        momentum=float(tensors["norm.momentum"][0]),
    )
    norm_state.gamma = tensors["norm.gamma"]
    norm_state.beta = tensors["norm.beta"]
    for ds in ds_ids:
        norm_state.register(ds)
        norm_state._stats[ds] = stats[ds]
    head_ids = [
        name[len("head.") : -len(".w")] for name in tensors
        if name.startswith("head.") and name.endswith(".w")
    ]
    heads = {ds: (tensors[f"head.{ds}.w"], tensors[f"head.{ds}.b"]) for ds in head_ids}
    params = ModelParams(
        w1=tensors["backbone.w1"],
        b1=tensors["backbone.b1"],
        w2=tensors["backbone.w2"],
        b2=tensors["backbone.b2"],
        heads=heads,
    )
    return params, norm_state
