"""End-to-end multimodal model: early fusion, VSC, TCN, projection heads, classifier.

Forward for a batch of B samples::

    g      = mask_t * text_proj(text) + mask_a * audio_proj(audio)          (B x d)
    merged = compress(frames_b, g_b)                   per sample, L_b x d
    video  = mask_v * tcn([layer_norm(merged_b)])                           (B x c)
    logits = classifier([g, video])                                         (B x C)
    anchor = relu(anchor_head(g)),  target = relu(target_head(video))       (B x p)

The VSC partition is treated as fixed routing: gradients reach the frame
values through the merge coefficients but never through the threshold test.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import vsc
from .contrastive import ProjectionHead, contrastive_grad, contrastive_loss
from .data import Dataset, sample_frames
from .errors import ConfigError, ShapeError
from .numerics import LinearLayer, layer_norm, layer_norm_backward, softmax_cross_entropy
from .tcn import TcnStack

MODALITIES = ("text", "audio", "video")
LN_EPS = 1e-5


@dataclass
class TcnConfig:
    channels: list[int] = field(default_factory=lambda: [16, 16, 16])
    kernel_size: int = 3
    dilations: list[int] = field(default_factory=lambda: [1, 2, 4])
    pooling: str = "last"
    residual: bool = False

    def __post_init__(self):
        if not self.channels or len(self.channels) != len(self.dilations):
            raise ConfigError("model.tcn.channels and model.tcn.dilations must be non-empty and of equal length")
        if self.kernel_size < 1 or min(self.dilations) < 1 or min(self.channels) < 1:
            raise ConfigError("model.tcn sizes must be >= 1")
        if self.pooling not in ("last", "mean"):
            raise ConfigError(f"model.tcn.pooling must be 'last' or 'mean', got {self.pooling!r}")

    @property
    def receptive_field(self) -> int:
        return 1 + sum((self.kernel_size - 1) * d for d in self.dilations)


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ConfigError("model.optimizer: need lr >= 0, beta1/beta2 in [0, 1), eps > 0")


@dataclass
class ModelConfig:
    text_dim: int = 16
    audio_dim: int = 16
    visual_dim: int = 16
    proj_dim: int = 128
    num_classes: int = 3
    frame_count: int = 15
    vsc: vsc.VscConfig = field(default_factory=vsc.VscConfig)
    tcn: TcnConfig = field(default_factory=TcnConfig)
    layer_norm: bool = False
    alpha_ce: float = 1.0
    beta_cl: float = 0.1
    tau_cl: float = 0.07
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    modalities: list[str] = field(default_factory=lambda: list(MODALITIES))

    def __post_init__(self):
        for name in ("text_dim", "audio_dim", "visual_dim", "proj_dim", "num_classes", "frame_count", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("model.epochs must be >= 0")
        if self.alpha_ce < 0 or self.beta_cl < 0 or self.alpha_ce + self.beta_cl <= 0:
            raise ConfigError("model.alpha_ce and model.beta_cl must be >= 0 with a positive sum")
        if not self.tau_cl > 0:
            raise ConfigError("model.tau_cl must be > 0")
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown or not self.modalities:
            raise ConfigError(f"model.modalities must be a non-empty subset of {MODALITIES}, got {self.modalities}")
        if self.beta_cl > 0 and self.batch_size < 2:
            raise ConfigError("contrastive loss needs batch_size >= 2 when beta_cl > 0")


@dataclass
class LossBreakdown:
    l_ce: float
    l_cl: float
    total: float
    alpha_ce: float
    beta_cl: float

    @classmethod
    def combine(cls, l_ce: float, l_cl: float, alpha_ce: float, beta_cl: float) -> "LossBreakdown":
        return cls(l_ce, l_cl, alpha_ce * l_ce + beta_cl * l_cl, alpha_ce, beta_cl)

    def to_dict(self) -> dict:
        return {"l_ce": self.l_ce, "l_cl": self.l_cl, "total": self.total,
                "alpha_ce": self.alpha_ce, "beta_cl": self.beta_cl}


@dataclass
class Batch:
    text: np.ndarray     # B x q_t
    audio: np.ndarray    # B x q_a
    frames: np.ndarray   # B x frame_count x d
    labels: np.ndarray   # B

    def __len__(self):
        return len(self.labels)


def make_batch(ds: Dataset, frame_count: int, indices=None) -> Batch:
    recs = ds.records if indices is None else [ds.records[i] for i in indices]
    if not recs:
        raise ShapeError("no samples")
    return Batch(
        text=np.stack([r.text for r in recs]),
        audio=np.stack([r.audio for r in recs]),
        frames=np.stack([sample_frames(r.frames, frame_count) for r in recs]),
        labels=np.array([r.label for r in recs], dtype=np.int64),
    )


@dataclass
class Forward:
    logits: np.ndarray
    g: np.ndarray
    video: np.ndarray
    anchor: np.ndarray
    target: np.ndarray
    partitions: list[vsc.PartitionResult]
    tokens: list[np.ndarray]   # TCN inputs (after optional layer norm)


def combined_loss(logits, labels, anchor, target, cfg: ModelConfig) -> LossBreakdown:
    l_ce, _ = softmax_cross_entropy(logits, labels)
    if len(labels) >= 2:
        l_cl, _ = contrastive_loss(anchor, target, labels, cfg.tau_cl)
    elif cfg.beta_cl > 0:
        raise ConfigError("contrastive loss needs a batch of at least 2 when beta_cl > 0")
    else:
        l_cl = 0.0
    return LossBreakdown.combine(l_ce, l_cl, cfg.alpha_ce, cfg.beta_cl)


class Adam:
    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        c = self.cfg
        self.t += 1
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            mhat = m / (1 - c.beta1 ** self.t)
            vhat = v / (1 - c.beta2 ** self.t)
            p -= c.lr * mhat / (np.sqrt(vhat) + c.eps)


class Model:
    """Parameters, optimizer state and RNG for one training run.

    Layers cache activations between forward and backward, so an instance is
    single-writer.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        init_rng = np.random.default_rng(cfg.seed)
        d = cfg.visual_dim
        self.text_proj = LinearLayer.init(cfg.text_dim, d, init_rng)
        self.audio_proj = LinearLayer.init(cfg.audio_dim, d, init_rng)
        self.ln_gain = np.ones(d)
        self.ln_shift = np.zeros(d)
        t = cfg.tcn
        self.tcn = TcnStack.build(d, t.channels, t.kernel_size, t.dilations, init_rng,
                                  pooling=t.pooling, residual=t.residual)
        c = self.tcn.out_channels
        self.anchor_head = ProjectionHead.init(d, cfg.proj_dim, init_rng)
        self.target_head = ProjectionHead.init(c, cfg.proj_dim, init_rng)
        self.classifier = LinearLayer.init(d + c, cfg.num_classes, init_rng)
        self.optimizer = Adam(cfg.optimizer)
        # separate stream for batch shuffling so init and data order are independent
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.step = 0
        self._mask = {m: float(m in cfg.modalities) for m in MODALITIES}

    def params(self) -> dict[str, np.ndarray]:
        out = {
            "text_proj.weight": self.text_proj.weight, "text_proj.bias": self.text_proj.bias,
            "audio_proj.weight": self.audio_proj.weight, "audio_proj.bias": self.audio_proj.bias,
        }
        if self.cfg.layer_norm:
            out["ln.gain"] = self.ln_gain
            out["ln.shift"] = self.ln_shift
        out.update(self.tcn.params())
        out.update({
            "anchor_head.weight": self.anchor_head.linear.weight, "anchor_head.bias": self.anchor_head.linear.bias,
            "target_head.weight": self.target_head.linear.weight, "target_head.bias": self.target_head.linear.bias,
            "classifier.weight": self.classifier.weight, "classifier.bias": self.classifier.bias,
        })
        return out

    def early_fuse(self, text, audio) -> np.ndarray:
        cfg = self.cfg
        text = np.asarray(text, dtype=np.float64)
        audio = np.asarray(audio, dtype=np.float64)
        if text.shape[-1] != cfg.text_dim or audio.shape[-1] != cfg.audio_dim:
            raise ShapeError(f"text/audio widths {text.shape[-1]}/{audio.shape[-1]} "
                             f"!= configured {cfg.text_dim}/{cfg.audio_dim}")
        return (self._mask["text"] * self.text_proj.forward(text)
                + self._mask["audio"] * self.audio_proj.forward(audio))

    def forward(self, batch: Batch, routings=None) -> Forward:
        """Run the pipeline; ``routings`` (list of ``(relevant, merge_map)``) pins the VSC partition."""
        cfg = self.cfg
        if batch.frames.ndim != 3 or batch.frames.shape[1] != cfg.frame_count:
            raise ShapeError(f"expected {cfg.frame_count} frames per sample, got frames of shape {batch.frames.shape}")
        if batch.frames.shape[2] != cfg.visual_dim:
            raise ShapeError(f"frame width {batch.frames.shape[2]} != visual_dim {cfg.visual_dim}")
        g = self.early_fuse(batch.text, batch.audio)
        parts, tokens = [], []
        for b in range(len(batch)):
            if routings is None:
                p = vsc.compress(batch.frames[b], g[b], cfg.vsc)
            else:
                rel, mm = routings[b]
                merged = vsc.replay_merges(batch.frames[b], rel, mm, cfg.vsc.alpha)
                p = vsc.PartitionResult(list(rel), [i for i, _ in mm], np.array([]), merged, list(mm))
            parts.append(p)
            tok = p.merged
            if cfg.layer_norm:
                tok = layer_norm(tok, self.ln_gain, self.ln_shift, LN_EPS)
            tokens.append(tok)
        video = self._mask["video"] * self.tcn.forward_batch(tokens)
        logits = self.classifier.forward(np.concatenate([g, video], axis=1))
        anchor = self.anchor_head.forward(g)
        target = self.target_head.forward(video)
        return Forward(logits, g, video, anchor, target, parts, tokens)

    def loss(self, batch: Batch, routings=None) -> tuple[LossBreakdown, Forward]:
        fwd = self.forward(batch, routings)
        return combined_loss(fwd.logits, batch.labels, fwd.anchor, fwd.target, self.cfg), fwd

    def backward(self, batch: Batch, fwd: Forward) -> dict[str, np.ndarray]:
        """Gradients of the combined loss for the forward pass that produced ``fwd``."""
        cfg = self.cfg
        d = cfg.visual_dim
        _, dlogits = softmax_cross_entropy(fwd.logits, batch.labels)
        dwc, dbc, dcat = self.classifier.backward(cfg.alpha_ce * dlogits)
        dg = dcat[:, :d].copy()
        dvideo = dcat[:, d:].copy()
        grads = {"classifier.weight": dwc, "classifier.bias": dbc}

        if len(batch) >= 2:
            da, dt = contrastive_grad(fwd.anchor, fwd.target, batch.labels, cfg.tau_cl)
        else:
            da = dt = np.zeros_like(fwd.anchor)
        dw, db, dg_a = self.anchor_head.backward(cfg.beta_cl * da)
        grads["anchor_head.weight"], grads["anchor_head.bias"] = dw, db
        dg += dg_a
        dw, db, dv_t = self.target_head.backward(cfg.beta_cl * dt)
        grads["target_head.weight"], grads["target_head.bias"] = dw, db
        dvideo += dv_t

        tcn_grads, dtokens = self.tcn.backward_batch(self._mask["video"] * dvideo)
        grads.update(tcn_grads)
        if cfg.layer_norm:
            dgain = np.zeros(d)
            dshift = np.zeros(d)
            for p, dtok in zip(fwd.partitions, dtokens):
                _, dgn, dsh = layer_norm_backward(dtok, p.merged, self.ln_gain, LN_EPS)
                dgain += dgn
                dshift += dsh
            grads["ln.gain"], grads["ln.shift"] = dgain, dshift

        for name, layer in (("text", self.text_proj), ("audio", self.audio_proj)):
            dw, db, _ = layer.backward(self._mask[name] * dg)
            grads[f"{name}_proj.weight"], grads[f"{name}_proj.bias"] = dw, db
        return grads

    def train_step(self, batch: Batch) -> LossBreakdown:
        lb, fwd = self.loss(batch)
        grads = self.backward(batch, fwd)
        self.optimizer.step(self.params(), grads)
        self.step += 1
        return lb

    def predict(self, batch: Batch) -> np.ndarray:
        return np.argmax(self.forward(batch).logits, axis=1)


def check_dataset(ds: Dataset, cfg: ModelConfig):
    want = (cfg.num_classes, cfg.text_dim, cfg.audio_dim, cfg.visual_dim)
    have = (ds.num_classes, ds.text_dim, ds.audio_dim, ds.frame_dim)
    if want != have:
        raise ConfigError(f"data header (classes, text, audio, frame dims) = {have} "
                          f"does not match model config {want}")


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + size] for i in range(0, n, size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        # a lone trailing sample cannot form a contrastive batch
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def train_epoch(ds: Dataset, model: Model) -> LossBreakdown:
    cfg = model.cfg
    if len(ds) == 0:
        raise ConfigError("cannot train on an empty shard")
    if cfg.beta_cl > 0 and (cfg.batch_size < 2 or len(ds) < 2):
        raise ConfigError("contrastive loss needs batches of at least 2 samples when beta_cl > 0")
    ce = cl = 0.0
    for idx in _batches(len(ds), cfg.batch_size, model.rng):
        lb = model.train_step(make_batch(ds, cfg.frame_count, idx))
        ce += lb.l_ce * len(idx)
        cl += lb.l_cl * len(idx)
    return LossBreakdown.combine(ce / len(ds), cl / len(ds), cfg.alpha_ce, cfg.beta_cl)


def fit(ds: Dataset, model: Model, epochs: int | None = None, on_epoch=None) -> list[LossBreakdown]:
    history = []
    for e in range(model.cfg.epochs if epochs is None else epochs):
        lb = train_epoch(ds, model)
        history.append(lb)
        if on_epoch is not None:
            on_epoch(e, lb)
    return history
