"""Per-vertex latent table + MLP decoder predicting transfer coefficients.

The decoder input is ``[z | albedo | n | wo]`` where ``z`` is the barycentric
blend of the three vertex latents of the shaded triangle. Hidden layers use
ReLU, the output layer is linear (coefficients are signed). Everything is
plain numpy with hand-written reverse mode; batches are small enough that
BLAS does the heavy lifting.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .sh import SHVector, n_coeffs

log = logging.getLogger(__name__)

CKPT_MAGIC = b"NPRTCKPT"
CKPT_VERSION = 1
CKPT_HEADER = struct.Struct("<8sIIIIIIQQQII")
N_GEOM_INPUTS = 9


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# -- parameters -------------------------------------------------------------------------


class VertexLatentTable:
    """One ``d``-vector per scene vertex."""

    def __init__(self, values: np.ndarray):
        values = np.asarray(values)
        if values.ndim != 2:
            raise ModelError("latent table must be (n_vertices, d)")
        if not np.all(np.isfinite(values)):
            raise ModelError("latent table has non-finite entries")
        self.values = values

    @classmethod
    def random(cls, n_vertices: int, d: int, rng: np.random.Generator, scale=0.1, dtype=np.float32):
        return cls(rng.uniform(-scale, scale, size=(n_vertices, d)).astype(dtype))

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.values.shape[0]

    @property
    def nbytes(self) -> int:
        """Stored size: 4 bytes per latent entry."""
        return self.n_vertices * self.d * 4

    def interpolate(self, idx, bary) -> np.ndarray:
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_vertices):
            raise IndexError(f"vertex index out of range [0, {self.n_vertices})")
        bary = np.asarray(bary, dtype=self.values.dtype)
        return np.einsum("...a,...ad->...d", bary, self.values[idx])

    def scatter(self, idx, bary, gz) -> np.ndarray:
        """Dense gradient of the table given d(loss)/dz per record."""
        g = np.zeros_like(self.values)
        contrib = np.asarray(bary, dtype=g.dtype)[..., None] * gz[:, None, :]
        np.add.at(g, np.asarray(idx).reshape(-1), contrib.reshape(-1, self.d))
        return g


def interpolate_latent(table: VertexLatentTable, i, lam) -> np.ndarray:
    return table.interpolate(i, lam)


class DecoderNetwork:
    """Fully connected ReLU network; ``weights[j]`` has shape (fan_in, fan_out)."""

    def __init__(self, weights: list, biases: list):
        if len(weights) != len(biases) or not weights:
            raise ModelError("need one bias per weight matrix")
        for j, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ModelError(f"layer {j}: weight {w.shape} / bias {b.shape} inconsistent")
            if j and weights[j - 1].shape[1] != w.shape[0]:
                raise ModelError(f"layer {j}: expects {w.shape[0]} inputs, previous layer gives {weights[j - 1].shape[1]}")
        self.weights = list(weights)
        self.biases = list(biases)

    @classmethod
    def create(cls, sizes, rng: np.random.Generator, dtype=np.float32) -> "DecoderNetwork":
        ws, bs = [], []
        for j, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            # He init for ReLU layers, LeCun for the linear head
            lim = math.sqrt((6.0 if j < len(sizes) - 2 else 3.0) / a)
            ws.append(rng.uniform(-lim, lim, size=(a, b)).astype(dtype))
            bs.append(np.zeros(b, dtype=dtype))
        return cls(ws, bs)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x: np.ndarray, keep: bool = False):
        if x.shape[-1] != self.sizes[0]:
            raise ModelError(f"network takes {self.sizes[0]} inputs, got {x.shape[-1]}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if j < last:
                np.maximum(h, 0, out=h)
            if keep:
                acts.append(h)
        return (h, acts) if keep else h

    def backward(self, acts: list, gout: np.ndarray):
        """Returns (param grads in ``params()`` order, grad wrt the input)."""
        grads = [None] * (2 * len(self.weights))
        g = gout
        for j in range(len(self.weights) - 1, -1, -1):
            if j < len(self.weights) - 1:
                g = g * (acts[j + 1] > 0)
            grads[2 * j] = acts[j].T @ g
            grads[2 * j + 1] = g.sum(axis=0)
            g = g @ self.weights[j].T
        return grads, g


# -- model ------------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch: int = 2048
    lr: float = 1e-4
    iterations: int = 50_000
    milestones: tuple = (0.6, 0.85)
    gamma: float = 0.33
    seed: int = 0
    d: int = 7
    hidden: int = 128
    layers: int = 3
    latent_init: float = 0.1
    holdout: float = 0.1
    object_specific: bool = False
    log_every: int = 100
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch < 1 or not self.lr > 0 or self.iterations < 0:
            raise ValueError("batch >= 1, lr > 0 and iterations >= 0 required")
        if not 0 <= self.holdout < 1:
            raise ValueError("holdout fraction must be in [0, 1)")
        self.milestones = tuple(self.milestones)

    def lr_at(self, it: int) -> float:
        """MultiStep schedule: multiply by ``gamma`` at each milestone fraction."""
        k = sum(it >= int(m * self.iterations) for m in self.milestones)
        return self.lr * self.gamma**k


class NeuralTransferModel:
    """Latent table plus one decoder (scene-specific) or one per object."""

    def __init__(self, table: VertexLatentTable, nets: list, L: int, vertex_object=None, config: dict | None = None,
                 iteration: int = 0):
        self.table = table
        self.nets = list(nets)
        self.L = L
        K3 = 3 * n_coeffs(L)
        for net in self.nets:
            if net.sizes[0] != table.d + N_GEOM_INPUTS or net.sizes[-1] != K3:
                raise ModelError(f"decoder sizes {net.sizes} do not fit d={table.d}, L={L}")
        if vertex_object is None:
            vertex_object = np.zeros(table.n_vertices, dtype=np.int64)
        self.vertex_object = np.asarray(vertex_object, dtype=np.int64)
        if len(self.nets) > 1 and self.vertex_object.max() >= len(self.nets):
            raise ModelError("vertex_object refers to a missing decoder")
        self.config = config or {}
        self.iteration = iteration

    @property
    def d(self) -> int:
        return self.table.d

    @property
    def n_vertices(self) -> int:
        return self.table.n_vertices

    @property
    def dtype(self):
        return self.table.values.dtype

    @classmethod
    def create(cls, n_vertices: int, L: int, cfg: TrainConfig, vertex_object=None) -> "NeuralTransferModel":
        rng = np.random.default_rng(cfg.seed)
        dt = np.dtype(cfg.dtype)
        table = VertexLatentTable.random(n_vertices, cfg.d, rng, cfg.latent_init, dt)
        sizes = [cfg.d + N_GEOM_INPUTS] + [cfg.hidden] * cfg.layers + [3 * n_coeffs(L)]
        n_nets = 1
        if cfg.object_specific:
            if vertex_object is None:
                raise ModelError("object-specific decoders need the vertex -> object map")
            n_nets = int(np.max(vertex_object)) + 1
        nets = [DecoderNetwork.create(sizes, rng, dt) for _ in range(n_nets)]
        return cls(table, nets, L, vertex_object if cfg.object_specific else None, {"train": asdict(cfg)})

    def params(self) -> list[np.ndarray]:
        return [p for net in self.nets for p in net.params()] + [self.table.values]

    def _route(self, idx):
        if len(self.nets) == 1:
            return [(self.nets[0], slice(None))]
        obj = self.vertex_object[np.asarray(idx)[:, 0]]
        return [(net, np.nonzero(obj == o)[0]) for o, net in enumerate(self.nets)]

    def inputs(self, z, albedo, n, wo) -> np.ndarray:
        dt = self.dtype
        return np.concatenate([z.astype(dt, copy=False), np.asarray(albedo, dt), np.asarray(n, dt), np.asarray(wo, dt)],
                              axis=-1)

    def predict(self, idx, bary, wo, n, albedo, chunk: int = 65536) -> np.ndarray:
        """Transfer coefficients for many shading points, shape (m, 3, K)."""
        idx = np.asarray(idx).reshape(-1, 3)
        m = idx.shape[0]
        out = np.empty((m, 3 * n_coeffs(self.L)), dtype=self.dtype)
        for s in range(0, m, chunk):
            sl = slice(s, min(m, s + chunk))
            z = self.table.interpolate(idx[sl], np.asarray(bary).reshape(-1, 3)[sl])
            x = self.inputs(z, np.asarray(albedo).reshape(-1, 3)[sl], np.asarray(n).reshape(-1, 3)[sl],
                            np.asarray(wo).reshape(-1, 3)[sl])
            for net, rows in self._route(idx[sl]):
                out[sl][rows] = net.forward(x[rows])
        return out.reshape(m, 3, -1)

    def save(self, path, optimizer: "Adam | None" = None) -> Path:
        return save_checkpoint(self, path, optimizer)


def decode(network: DecoderNetwork, z, wo, n, alpha) -> SHVector:
    """Single-point forward pass with input ``[z | alpha | n | wo]``."""
    dt = network.weights[0].dtype
    x = np.concatenate([np.asarray(z, dt), np.asarray(alpha, dt), np.asarray(n, dt), np.asarray(wo, dt)])
    y = network.forward(x[None, :])[0]
    if y.size % 3:
        raise ModelError("network output is not a multiple of 3")
    return SHVector(y.astype(np.float64).reshape(3, -1))


# -- loss -------------------------------------------------------------------------------


@dataclass
class Batch:
    idx: np.ndarray
    bary: np.ndarray
    wo: np.ndarray
    n: np.ndarray
    albedo: np.ndarray
    t: np.ndarray

    def __len__(self):
        return len(self.idx)

    @classmethod
    def from_records(cls, rec, dtype=np.float32) -> "Batch":
        return cls(np.asarray(rec["idx"], np.int64), *(np.asarray(rec[k], dtype) for k in ("bary", "wo", "n", "albedo")),
                   np.asarray(rec["t"], dtype).reshape(len(rec), -1))


@dataclass
class Gradients:
    nets: list
    latents: np.ndarray

    def flat(self) -> list[np.ndarray]:
        return [g for gs in self.nets for g in gs] + [self.latents]


def _model_of(network, table, L=None) -> NeuralTransferModel:
    if isinstance(network, NeuralTransferModel):
        return network
    L = L if L is not None else math.isqrt(network.sizes[-1] // 3) - 1
    return NeuralTransferModel(table, [network], L)


def loss_and_gradients(network, table: VertexLatentTable | None, batch: Batch):
    """Mean absolute error over records and coefficients, and its exact gradients.

    ``network`` may be a :class:`DecoderNetwork` (paired with ``table``) or a
    whole :class:`NeuralTransferModel`. The subgradient of |r| at r = 0 is 0.
    """
    model = _model_of(network, table)
    if len(batch) == 0:
        raise ValueError("empty batch")
    tab = model.table
    z = tab.interpolate(batch.idx, batch.bary)
    x = model.inputs(z, batch.albedo, batch.n, batch.wo)
    total = batch.t.size
    loss = 0.0
    gx = np.zeros_like(x)
    net_grads = []
    for net, rows in model._route(batch.idx):
        xr = x[rows]
        if len(xr) == 0:
            net_grads.append([np.zeros_like(p) for p in net.params()])
            continue
        y, acts = net.forward(xr, keep=True)
        r = y - batch.t[rows]
        loss += float(np.abs(r).sum(dtype=np.float64))
        gy = np.sign(r) * np.asarray(1.0 / total, dtype=y.dtype)
        gs, gin = net.backward(acts, gy)
        net_grads.append(gs)
        gx[rows] = gin
    glat = tab.scatter(batch.idx, batch.bary, gx[:, :tab.d])
    return loss / total, Gradients(net_grads, glat)


# -- optimiser --------------------------------------------------------------------------


class Adam:
    def __init__(self, params: list, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        step = lr * math.sqrt(c2) / c1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (step * m / (np.sqrt(v) + self.eps * math.sqrt(c2))).astype(p.dtype, copy=False)


# -- checkpoints ------------------------------------------------------------------------


def save_checkpoint(model: NeuralTransferModel, path, optimizer: Adam | None = None) -> Path:
    """Little-endian float32 layout: header, layer sizes, decoder(s), latents, [Adam moments]."""
    path = Path(path)
    blob = json.dumps(model.config, sort_keys=True, default=str).encode()
    sizes = model.nets[0].sizes
    has_opt = optimizer is not None
    seed = int(model.config.get("train", {}).get("seed", 0)) & (2**64 - 1)
    hdr = CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, model.d, model.L, len(sizes), len(model.nets), int(has_opt),
                           model.iteration, model.n_vertices, seed, len(blob), optimizer.t if has_opt else 0)
    with open(path, "wb") as fh:
        fh.write(hdr)
        fh.write(np.asarray(sizes, "<u4").tobytes())
        fh.write(blob)
        fh.write(model.vertex_object.astype("<u4").tobytes())
        for p in model.params():
            fh.write(p.astype("<f4").tobytes())
        if has_opt:
            for arr in optimizer.m + optimizer.v:
                fh.write(arr.astype("<f4").tobytes())
    return path


def load_checkpoint(path, with_optimizer: bool = False):
    """Returns the model, or (model, Adam | None) when ``with_optimizer``."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < CKPT_HEADER.size:
        raise ModelError(f"{path}: truncated checkpoint")
    magic, ver, d, L, n_sizes, n_nets, has_opt, it, nv, _seed, bl, opt_t = CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC or ver != CKPT_VERSION:
        raise ModelError(f"{path}: not a checkpoint (magic {magic!r}, version {ver})")
    off = CKPT_HEADER.size
    sizes = np.frombuffer(raw, "<u4", n_sizes, off).astype(int).tolist()
    off += 4 * n_sizes
    config = json.loads(raw[off:off + bl].decode())
    off += bl
    vobj = np.frombuffer(raw, "<u4", nv, off).astype(np.int64)
    off += 4 * nv
    dt = np.dtype(config.get("train", {}).get("dtype", "float32"))

    def take(shape):
        nonlocal off
        cnt = int(np.prod(shape))
        if off + 4 * cnt > len(raw):
            raise ModelError(f"{path}: truncated checkpoint payload")
        a = np.frombuffer(raw, "<f4", cnt, off).astype(dt).reshape(shape)
        off += 4 * cnt
        return a

    shapes = []
    for _ in range(n_nets):
        for a, b in zip(sizes[:-1], sizes[1:]):
            shapes += [(a, b), (b,)]
    shapes.append((nv, d))
    arrays = [take(s) for s in shapes]
    nets = []
    for k in range(n_nets):
        ps = arrays[k * 2 * (len(sizes) - 1):(k + 1) * 2 * (len(sizes) - 1)]
        nets.append(DecoderNetwork(ps[0::2], ps[1::2]))
    model = NeuralTransferModel(VertexLatentTable(arrays[-1]), nets, L, vobj if n_nets > 1 else None, config, it)
    if not with_optimizer:
        return model
    opt = None
    if has_opt:
        opt = Adam(model.params())
        opt.m = [take(s) for s in shapes]
        opt.v = [take(s) for s in shapes]
        opt.t = opt_t
    return model, opt


# -- training ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: NeuralTransferModel
    train_loss: float
    holdout_l1: float | None
    mean_abs_t: float
    history: list = field(default_factory=list)
    train_ids: np.ndarray | None = None
    holdout_ids: np.ndarray | None = None


def split_records(n: int, holdout: float, seed: int):
    """Disjoint (train, held-out) record ids; the held-out share is ``holdout``."""
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    k = int(round(n * holdout))
    if k >= n:
        k = n - 1
    return np.sort(perm[k:]), np.sort(perm[:k])


def evaluate_l1(model: NeuralTransferModel, batch: Batch, chunk: int = 65536) -> float:
    total = 0.0
    for s in range(0, len(batch), chunk):
        sl = slice(s, s + chunk)
        y = model.predict(batch.idx[sl], batch.bary[sl], batch.wo[sl], batch.n[sl], batch.albedo[sl])
        total += float(np.abs(y.reshape(len(y), -1) - batch.t[sl]).sum(dtype=np.float64))
    return total / batch.t.size


def train(dataset, scene, config: TrainConfig, log_path=None, resume=None, progress=None) -> TrainResult:
    """Jointly optimise latents and decoder(s) with Adam on the L1 loss.

    ``dataset`` is a :class:`~neuralprt.baker.Dataset` (or anything with
    ``records``, ``L`` and ``n_vertices``). ``resume`` is a checkpoint path;
    its iteration counter and optimiser moments are continued.
    """
    if dataset.n_vertices != scene.n_vertices:
        raise ModelError(f"dataset has {dataset.n_vertices} vertices, scene has {scene.n_vertices}")
    dt = np.dtype(config.dtype)
    vobj = np.zeros(scene.n_vertices, dtype=np.int64)
    for o, off in enumerate(scene.mesh_vertex_offset[:-1]):
        vobj[off:scene.mesh_vertex_offset[o + 1]] = o
    if resume is not None:
        model, opt = load_checkpoint(resume, with_optimizer=True)
        if model.n_vertices != scene.n_vertices or model.L != dataset.L:
            raise ModelError("checkpoint does not match the dataset/scene")
        opt = opt or Adam(model.params())
        opt.params = model.params()
    else:
        model = NeuralTransferModel.create(scene.n_vertices, dataset.L, config, vobj)
        opt = Adam(model.params())
    model.config["train"] = asdict(config)

    recs = dataset.records
    n = len(recs)
    train_ids, hold_ids = split_records(n, config.holdout, config.seed)
    if len(train_ids) == 0:
        raise ModelError("dataset has no training records")
    data = Batch.from_records(recs, dt)
    mean_abs_t = float(np.mean(np.abs(data.t[train_ids]), dtype=np.float64))
    rng = np.random.default_rng([config.seed, 0xBA7C, model.iteration])

    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "a" if resume is not None else "w", newline="")
        writer = csv.writer(fh)
        if resume is None:
            writer.writerow(["iteration", "wall_clock", "loss"])
    history = []
    t0 = time.perf_counter()
    loss = float("nan")
    try:
        start = model.iteration
        for it in range(start, config.iterations):
            pick = train_ids[rng.integers(0, len(train_ids), config.batch)]
            b = Batch(data.idx[pick], data.bary[pick], data.wo[pick], data.n[pick], data.albedo[pick], data.t[pick])
            loss, grads = loss_and_gradients(model, None, b)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at iteration {it} (lr {config.lr_at(it):g})")
            opt.step(grads.flat(), config.lr_at(it))
            model.iteration = it + 1
            if it % config.log_every == 0 or it + 1 == config.iterations:
                history.append((it, loss))
                if writer is not None:
                    writer.writerow([it, f"{time.perf_counter() - t0:.3f}", f"{loss:.8g}"])
                if progress is not None:
                    progress(it, loss)
    finally:
        if fh is not None:
            fh.close()
    hold = None
    if len(hold_ids):
        hb = Batch(data.idx[hold_ids], data.bary[hold_ids], data.wo[hold_ids], data.n[hold_ids], data.albedo[hold_ids],
                   data.t[hold_ids])
        hold = evaluate_l1(model, hb)
    model.config["result"] = {"holdout_l1": hold, "mean_abs_t": mean_abs_t}
    model._optimizer = opt
    return TrainResult(model, loss, hold, mean_abs_t, history, train_ids, hold_ids)
