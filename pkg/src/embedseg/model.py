"""A small per-pixel embedding predictor and its training loop.

The net is a stack of same-padding 3x3 convolutions with rectifier
nonlinearities between stages, one independent net per modality, trained
with Adam under a linear warmup followed by stepwise exponential decay.
Updated parameters are additionally tracked by a bias-corrected exponential
moving average exposed for evaluation. Everything is float64 numpy with
hand-written backprop so gradients can be checked against finite
differences.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .fields import EmbeddingMap, Frame, FrameGroup
from .loss import LossConfig, total_loss_and_grad
from .rng import philox
from .sampling import SamplerConfig, sample_group


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2.5e-4
    warmup_steps: int = 50
    decay_factor: float = 1.2
    decay_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 500
    batch: int = 1
    seed: int = 0
    ema_decay: float = 0.999

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValueError("lr must be > 0")
        if self.decay_factor < 1.0:
            raise ValueError("decay_factor must be >= 1")
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be >= 1")


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear ramp to cfg.lr over warmup_steps, then divide by decay_factor
    every decay_every post-warmup steps."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if cfg.decay_every <= 0:
        return cfg.lr
    k = (step - cfg.warmup_steps) // cfg.decay_every
    return cfg.lr / cfg.decay_factor ** k


def _pad1(x):
    h, w, c = x.shape
    out = np.zeros((h + 2, w + 2, c), dtype=np.float64)
    out[1:-1, 1:-1] = x
    return out


def _conv_same(x, weight, bias):
    h, w, cin = x.shape
    cout = weight.shape[3]
    xp = _pad1(x)
    acc = np.zeros((h * w, cout), dtype=np.float64)
    for dr in range(3):
        for dc in range(3):
            acc += xp[dr:dr + h, dc:dc + w].reshape(h * w, cin) @ weight[dr, dc]
    return acc.reshape(h, w, cout) + bias


def _conv_same_backward(x, weight, dout):
    h, w, cin = x.shape
    cout = weight.shape[3]
    xp = _pad1(x)
    dxp = np.zeros_like(xp)
    dflat = dout.reshape(h * w, cout)
    dweight = np.zeros_like(weight)
    for dr in range(3):
        for dc in range(3):
            patch = xp[dr:dr + h, dc:dc + w].reshape(h * w, cin)
            dweight[dr, dc] = patch.T @ dflat
            dxp[dr:dr + h, dc:dc + w] += (dflat @ weight[dr, dc].T).reshape(h, w, cin)
    dbias = dflat.sum(axis=0)
    return dweight, dbias, dxp[1:-1, 1:-1]


class ToyNet:
    """Stacked 3x3 same-padding convolutions, input h x w x k -> h x w x c."""

    def __init__(self, in_channels: int, hidden=(8, 16), out_channels: int = 32, seed: int = 0):
        self.in_channels = int(in_channels)
        self.hidden = tuple(int(h) for h in hidden)
        self.out_channels = int(out_channels)
        self.seed = int(seed)
        widths = (self.in_channels, *self.hidden, self.out_channels)
        rng = philox(seed, 7)
        self.weights = []
        self.biases = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            # scaled uniform fan-in; biases nonzero so an all-zero input patch
            # still yields a usable (non-degenerate) embedding at init
            limit = math.sqrt(3.0 / (9 * cin))
            self.weights.append(rng.uniform(-limit, limit, size=(3, 3, cin, cout)))
            self.biases.append(rng.uniform(-limit / 3.0, limit / 3.0, size=cout))

    def parameters(self) -> list[np.ndarray]:
        out = []
        for wgt, b in zip(self.weights, self.biases):
            out.append(wgt)
            out.append(b)
        return out

    def set_parameters(self, params) -> None:
        expect = self.parameters()
        if len(params) != len(expect):
            raise ValueError("parameter count mismatch")
        for k, arr in enumerate(params):
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != expect[k].shape:
                raise ValueError("parameter shape mismatch")
        self.weights = [np.array(params[2 * i], dtype=np.float64)
                        for i in range(len(self.weights))]
        self.biases = [np.array(params[2 * i + 1], dtype=np.float64)
                       for i in range(len(self.biases))]

    def arch(self) -> dict:
        return {"in_channels": self.in_channels, "hidden": list(self.hidden),
                "out_channels": self.out_channels, "seed": self.seed}

    def forward_with_cache(self, image):
        x = image.data if isinstance(image, EmbeddingMap) else np.asarray(image, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ValueError(f"expected h x w x {self.in_channels} input, got shape {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("non-finite value in network input")
        activations = [x]
        last = len(self.weights) - 1
        for k, (wgt, b) in enumerate(zip(self.weights, self.biases)):
            pre = _conv_same(activations[-1], wgt, b)
            activations.append(pre if k == last else np.maximum(pre, 0.0))
        return activations[-1], activations

    def forward(self, image) -> EmbeddingMap:
        out, _ = self.forward_with_cache(image)
        return EmbeddingMap(out)

    def backward(self, activations, dout) -> list[np.ndarray]:
        """Parameter gradients for cached activations; mirrors parameters()."""
        grads = [None] * (2 * len(self.weights))
        delta = dout
        for k in range(len(self.weights) - 1, -1, -1):
            if k != len(self.weights) - 1:
                delta = delta * (activations[k + 1] > 0.0)
            dw, db, delta = _conv_same_backward(activations[k], self.weights[k], delta)
            grads[2 * k] = dw
            grads[2 * k + 1] = db
        return grads


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)


@dataclass(eq=False)
class TrainResult:
    nets: dict
    ema: dict            # modality -> list of raw (un-debiased) EMA arrays
    ema_steps: int
    ema_decay: float
    history: list

    def ema_net(self, modality: str) -> ToyNet:
        """Copy of the net carrying bias-corrected EMA parameters."""
        net = self.nets[modality]
        clone = ToyNet(net.in_channels, net.hidden, net.out_channels, net.seed)
        corr = 1.0 - self.ema_decay ** max(self.ema_steps, 1)
        clone.set_parameters([a / corr for a in self.ema[modality]])
        return clone


def train(groups, loss_cfg: LossConfig, sampler_cfg: SamplerConfig, train_cfg: TrainConfig,
          embed_channels: int = 32, hidden=(8, 16), nets=None) -> TrainResult:
    """Optimize per-modality nets against the contrastive objective.

    Each step forwards every frame of the next group (cycling), samples the
    cross-frame union, backpropagates the analytic loss gradient to the
    parameters, and applies Adam under the warmup/decay schedule. Fully
    deterministic given the seeds in the three configs.
    """
    groups = list(groups)
    if not groups:
        raise ValueError("no training groups")
    if nets is None:
        nets = {}
        modality_order = []
        for g in groups:
            for f in g.frames:
                if f.modality not in nets:
                    nets[f.modality] = ToyNet(f.embedding.channels, hidden, embed_channels,
                                              seed=train_cfg.seed + 101 * len(modality_order))
                    modality_order.append(f.modality)
    optimizers = {m: Adam(net.parameters(), train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
                  for m, net in nets.items()}
    ema = {m: [np.zeros_like(p) for p in net.parameters()] for m, net in nets.items()}
    history = []
    for step in range(train_cfg.steps):
        grad_bucket = {m: [np.zeros_like(p) for p in net.parameters()]
                       for m, net in nets.items()}
        losses = []
        for b in range(train_cfg.batch):
            group = groups[(step * train_cfg.batch + b) % len(groups)]
            pred_frames = []
            caches = []
            for frame in group.frames:
                out, cache = nets[frame.modality].forward_with_cache(frame.embedding)
                pred_frames.append(Frame(frame.modality, frame.time_index,
                                         EmbeddingMap(out), frame.labels))
                caches.append(cache)
            pred_group = FrameGroup(tuple(pred_frames), consistent_ids=group.consistent_ids)
            sset = sample_group(pred_group, sampler_cfg, stream=step * train_cfg.batch + b)
            result = total_loss_and_grad(pred_group, sset, loss_cfg)
            if not np.isfinite(result.total):
                raise RuntimeError(
                    f"training diverged at step {step}: total={result.total!r}, "
                    f"contrastive={result.contrastive!r}, regularizer={result.regularizer!r}")
            by_frame = [[] for _ in pred_group.frames]
            for k, s in enumerate(sset.samples):
                by_frame[s.frame_index].append(k)
            for fi, frame in enumerate(pred_group.frames):
                upstream = result.grad_field[fi].copy()
                if by_frame[fi]:
                    rows = np.array([sset.samples[k].pixel[0] for k in by_frame[fi]])
                    cols = np.array([sset.samples[k].pixel[1] for k in by_frame[fi]])
                    np.add.at(upstream, (rows, cols), result.grad_samples[by_frame[fi]])
                grads = nets[frame.modality].backward(caches[fi], upstream)
                bucket = grad_bucket[frame.modality]
                for k, g in enumerate(grads):
                    bucket[k] += g
            losses.append(result)
        lr = lr_at(train_cfg, step)
        for modality, net in nets.items():
            params = net.parameters()
            grads = [g / train_cfg.batch for g in grad_bucket[modality]]
            if not all(np.isfinite(g).all() for g in grads):
                raise RuntimeError(f"training diverged at step {step}: non-finite gradient")
            optimizers[modality].step(params, grads, lr)
            d = train_cfg.ema_decay
            for k, p in enumerate(params):
                ema[modality][k] = d * ema[modality][k] + (1.0 - d) * p
        history.append({
            "step": step,
            "lr": lr,
            "contrastive": float(np.mean([r.contrastive for r in losses])),
            "regularizer": float(np.mean([r.regularizer for r in losses])),
            "total": float(np.mean([r.total for r in losses])),
        })
    return TrainResult(nets=nets, ema=ema, ema_steps=train_cfg.steps,
                       ema_decay=train_cfg.ema_decay, history=history)


_CKPT_MAGIC = b"NET1"


def save_checkpoint(path, nets, ema=None, ema_steps=0, ema_decay=0.999, extra=None) -> None:
    """Parameter blobs in an EMB1-style container plus a JSON sidecar."""
    entries = []
    for modality in sorted(nets):
        for k, arr in enumerate(nets[modality].parameters()):
            entries.append((f"{modality}/p{k}", arr))
        if ema is not None:
            for k, arr in enumerate(ema[modality]):
                entries.append((f"ema/{modality}/p{k}", arr))
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    meta = {
        "modalities": {m: nets[m].arch() for m in sorted(nets)},
        "has_ema": ema is not None,
        "ema_steps": ema_steps,
        "ema_decay": ema_decay,
    }
    if extra:
        meta["extra"] = extra
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (nets, ema or None, meta)."""
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} in checkpoint")
    (count,) = struct.unpack_from("<I", blob, 4)
    offset = 8
    blobs = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + nlen].decode("utf-8")
        offset += nlen
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) * 8
        if offset + size > len(blob):
            raise FormatError("truncated checkpoint payload")
        blobs[name] = np.frombuffer(blob[offset:offset + size], dtype="<f8").reshape(shape).copy()
        offset += size
    nets = {}
    ema = {} if meta.get("has_ema") else None
    for modality, arch in meta["modalities"].items():
        net = ToyNet(arch["in_channels"], tuple(arch["hidden"]), arch["out_channels"],
                     arch["seed"])
        n_params = len(net.parameters())
        net.set_parameters([blobs[f"{modality}/p{k}"] for k in range(n_params)])
        nets[modality] = net
        if ema is not None:
            ema[modality] = [blobs[f"ema/{modality}/p{k}"] for k in range(n_params)]
    return nets, ema, meta
