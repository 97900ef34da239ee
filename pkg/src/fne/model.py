"""Toy bi-encoder, the two-direction triplet loss with analytic gradients, and
the SGD training loop that wires tracker, sampler and memory banks together.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from fne import sampler
from fne.datagen import PairedDataset
from fne.embedding import row_norms
from fne.errors import FneError, MalformedInputError
from fne.memory import MemoryBank, momentum_update
from fne.sampler import FneConfig
from fne.stats import DistributionTracker


class Encoder:
    """Linear map ``W x + b``, or ``W2 tanh(W1 x + b1) + b2`` when
    ``hidden_dim > 0``."""

    def __init__(self, params: list[np.ndarray]):
        if len(params) not in (2, 4):
            raise ValueError("encoder takes 2 (linear) or 4 (hidden layer) tensors")
        self.params = [np.array(p, dtype=np.float64) for p in params]

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, hidden_dim: int = 0) -> Encoder:
        if hidden_dim:
            w1 = rng.standard_normal((hidden_dim, d_in)) / np.sqrt(d_in)
            w2 = rng.standard_normal((d_out, hidden_dim)) / np.sqrt(hidden_dim)
            return cls([w1, np.zeros(hidden_dim), w2, np.zeros(d_out)])
        return cls([rng.standard_normal((d_out, d_in)) / np.sqrt(d_in), np.zeros(d_out)])

    @property
    def d_in(self) -> int:
        return self.params[0].shape[1]

    @property
    def d_out(self) -> int:
        return self.params[-1].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.params[0].shape[0] if len(self.params) == 4 else 0

    def copy(self) -> Encoder:
        return Encoder([p.copy() for p in self.params])

    def forward(self, x: np.ndarray):
        """Encode rows of ``x``; returns ``(outputs, cache)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise MalformedInputError(f"encoder expects inputs of length {self.d_in}")
        if len(self.params) == 2:
            w, b = self.params
            return x @ w.T + b, (x,)
        w1, b1, w2, b2 = self.params
        h = np.tanh(x @ w1.T + b1)
        return h @ w2.T + b2, (x, h)

    def backward(self, cache, grad_out: np.ndarray) -> list[np.ndarray]:
        if len(self.params) == 2:
            (x,) = cache
            return [grad_out.T @ x, grad_out.sum(axis=0)]
        x, h = cache
        w2 = self.params[2]
        grad_pre = (grad_out @ w2) * (1.0 - h * h)
        return [grad_pre.T @ x, grad_pre.sum(axis=0), grad_out.T @ h, grad_out.sum(axis=0)]


def encode(encoder: Encoder, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out, _ = encoder.forward(x[None, :] if single else x)
    return out[0] if single else out


def triplet_loss_fne(s_pos: float, s_neg_text: float, s_neg_image: float, margin: float) -> float:
    return max(0.0, margin - s_pos + s_neg_text) + max(0.0, margin - s_pos + s_neg_image)


def _rowwise_cos(a: np.ndarray, b: np.ndarray, na: np.ndarray, nb: np.ndarray):
    """Row-paired cosine and its gradients with respect to both rows."""
    s = np.einsum("ij,ij->i", a, b) / (na * nb)
    ga = b / (na * nb)[:, None] - (s / (na * na))[:, None] * a
    gb = a / (na * nb)[:, None] - (s / (nb * nb))[:, None] * b
    return s, ga, gb


class BatchLoss(NamedTuple):
    loss: np.ndarray
    s_pos: np.ndarray
    active_text: np.ndarray
    active_image: np.ndarray
    grad_image: np.ndarray
    grad_text: np.ndarray
    grad_neg_text: np.ndarray
    grad_neg_image: np.ndarray


def batch_loss_backward(v, w, w_neg, v_neg, margin: float) -> BatchLoss:
    """Per-row triplet loss and gradients for B (image, text) anchors.

    Row ``b`` pairs image ``v[b]`` with its caption ``w[b]``; ``w_neg[b]`` is
    the negative caption drawn for the image anchor and ``v_neg[b]`` the
    negative image drawn for the text anchor. A hinge sitting exactly at zero
    is treated as inactive.
    """
    v, w, w_neg, v_neg = (np.asarray(x, dtype=np.float64) for x in (v, w, w_neg, v_neg))
    nv, nw = row_norms(v, "anchor_image"), row_norms(w, "positive_text")
    nwn, nvn = row_norms(w_neg, "neg_text"), row_norms(v_neg, "neg_image")

    s_pos, gpos_v, gpos_w = _rowwise_cos(v, w, nv, nw)
    s_nt, gnt_v, gnt_wn = _rowwise_cos(v, w_neg, nv, nwn)
    s_ni, gni_vn, gni_w = _rowwise_cos(v_neg, w, nvn, nw)

    h_text = margin - s_pos + s_nt
    h_image = margin - s_pos + s_ni
    act_t = h_text > 0.0
    act_i = h_image > 0.0
    loss = np.where(act_t, h_text, 0.0) + np.where(act_i, h_image, 0.0)

    at = act_t[:, None].astype(np.float64)
    ai = act_i[:, None].astype(np.float64)
    grad_v = at * (gnt_v - gpos_v) - ai * gpos_v
    grad_w = ai * (gni_w - gpos_w) - at * gpos_w
    return BatchLoss(loss, s_pos, act_t, act_i, grad_v, grad_w, at * gnt_wn, ai * gni_vn)


@dataclass
class LossOutput:
    loss: float
    grad_anchor_image: np.ndarray
    grad_positive_text: np.ndarray
    grad_neg_text: np.ndarray | None
    grad_neg_image: np.ndarray | None


def loss_backward(anchor_image, positive_text, neg_text, neg_image, margin: float) -> LossOutput:
    """Loss and exact gradients for one anchor pair.

    Gradients for a negative are ``None`` when its hinge is inactive.
    """
    out = batch_loss_backward(
        *(np.atleast_2d(x) for x in (anchor_image, positive_text, neg_text, neg_image)),
        margin,
    )
    return LossOutput(
        float(out.loss[0]),
        out.grad_image[0],
        out.grad_text[0],
        out.grad_neg_text[0] if out.active_text[0] else None,
        out.grad_neg_image[0] if out.active_image[0] else None,
    )


@dataclass
class TrainConfig:
    margin: float = 0.2
    learning_rate: float = 3.0
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    lr_decay_epochs: list[int] = field(default_factory=lambda: [25, 35])
    lr_decay_factor: float = 0.1
    embed_dim: int = 16
    hidden_dim: int = 0
    momentum: float = 0.995
    bank_capacity: int = 8192
    clear_banks_each_epoch: bool = False
    min_ready_count: int = 1000
    sigma_floor: float = 1e-6
    reset_stats_each_epoch: bool = True
    stats_source: str = "pool"

    def __post_init__(self):
        if not 0.0 < self.margin < 2.0:
            raise ValueError(f"margin must lie in (0, 2), got {self.margin}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size <= 0 or self.embed_dim <= 0 or self.hidden_dim < 0:
            raise ValueError("batch_size and embed_dim must be positive")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.bank_capacity < self.batch_size:
            raise ValueError("bank_capacity must be at least batch_size")
        if self.stats_source not in ("pool", "batch"):
            raise ValueError("stats_source must be 'pool' or 'batch'")
        self.lr_decay_epochs = [int(e) for e in self.lr_decay_epochs]

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``; decays once per listed epoch
        that has been reached."""
        n = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.learning_rate * self.lr_decay_factor**n

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent streams per purpose so one consumer cannot shift another."""
    names = ("init", "shuffle", "sample")
    children = np.random.SeedSequence([seed, 0x464E45]).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


@dataclass
class TrainState:
    image_encoder: Encoder
    text_encoder: Encoder
    image_key: Encoder
    text_key: Encoder
    image_bank: MemoryBank
    text_bank: MemoryBank
    tracker: DistributionTracker
    epoch: int = 0
    step: int = 0

    @classmethod
    def initial(cls, dataset: PairedDataset, cfg: TrainConfig, rng: np.random.Generator) -> TrainState:
        img = Encoder.init(dataset.image_view.shape[1], cfg.embed_dim, rng, cfg.hidden_dim)
        txt = Encoder.init(dataset.text_view.shape[1], cfg.embed_dim, rng, cfg.hidden_dim)
        return cls(
            img, txt, img.copy(), txt.copy(),
            MemoryBank(cfg.bank_capacity, cfg.embed_dim),
            MemoryBank(cfg.bank_capacity, cfg.embed_dim),
            DistributionTracker(cfg.min_ready_count, cfg.sigma_floor),
        )


class StepRecord(NamedTuple):
    epoch: int
    step: int
    loss: float
    mu_pos: float
    sigma_pos: float
    mu_neg: float
    sigma_neg: float
    tracker_ready: bool
    fn_sample_rate: float


LOG_COLUMNS = StepRecord._fields


@dataclass
class EpochLog:
    steps: list[StepRecord] = field(default_factory=list)
    # (anchor item, negative item) in image-index space, both directions
    samples: list[tuple[int, int]] = field(default_factory=list)
    sample_ready: list[bool] = field(default_factory=list)


class TrainingError(FneError):
    pass


def _cosine_block(q: np.ndarray, c: np.ndarray) -> np.ndarray:
    qn = q / row_norms(q, "queries")[:, None]
    cn = c / row_norms(c, "candidates")[:, None]
    return np.clip(qn @ cn.T, -1.0, 1.0)


def train_step(state: TrainState, dataset: PairedDataset, texts: np.ndarray, lr: float,
               cfg: TrainConfig, fne_cfg: FneConfig, rng: np.random.Generator,
               log: EpochLog) -> StepRecord:
    images = dataset.pair_of[texts]
    B = texts.size
    v, v_cache = state.image_encoder.forward(dataset.image_view[images])
    w, w_cache = state.text_encoder.forward(dataset.text_view[texts])
    v_key, _ = state.image_key.forward(dataset.image_view[images])
    w_key, _ = state.text_key.forward(dataset.text_view[texts])

    # image anchors pick among captions, text anchors among images
    cand_t_ids = np.concatenate([texts, state.text_bank.ids])
    cand_t_emb = np.concatenate([w, state.text_bank.embeddings])
    cand_i_ids = np.concatenate([images, state.image_bank.ids])
    cand_i_emb = np.concatenate([v, state.image_bank.embeddings])
    valid_t = dataset.pair_of[cand_t_ids][None, :] != images[:, None]
    valid_i = cand_i_ids[None, :] != images[:, None]

    s_pos = np.einsum("ij,ij->i", v, w) / (row_norms(v) * row_norms(w))
    sim_t = _cosine_block(v, cand_t_emb)
    sim_i = _cosine_block(w, cand_i_emb)

    if cfg.stats_source == "batch":
        obs_t, obs_i = valid_t.copy(), valid_i.copy()
        obs_t[:, B:] = False
        obs_i[:, B:] = False
    else:
        obs_t, obs_i = valid_t, valid_i
    state.tracker.observe_batch(s_pos, sim_t, obs_t)
    state.tracker.observe_batch(s_pos, sim_i, obs_i)
    snap = state.tracker.snapshot()

    pick_t, used_t = sampler.select_rows(sim_t, valid_t, s_pos, snap, fne_cfg, rng)
    pick_i, used_i = sampler.select_rows(sim_i, valid_i, s_pos, snap, fne_cfg, rng)

    out = batch_loss_backward(v, w, cand_t_emb[pick_t], cand_i_emb[pick_i], cfg.margin)
    grad_v = out.grad_image / B
    grad_w = out.grad_text / B
    # only in-batch negatives carry gradient; bank rows are constants
    in_t = pick_t < B
    np.add.at(grad_w, pick_t[in_t], out.grad_neg_text[in_t] / B)
    in_i = pick_i < B
    np.add.at(grad_v, pick_i[in_i], out.grad_neg_image[in_i] / B)

    if lr:
        for enc, cache, g in ((state.image_encoder, v_cache, grad_v),
                              (state.text_encoder, w_cache, grad_w)):
            grads = enc.backward(cache, g)
            enc.params = [p - lr * gp for p, gp in zip(enc.params, grads)]
    state.image_key.params = momentum_update(
        state.image_key.params, state.image_encoder.params, cfg.momentum)
    state.text_key.params = momentum_update(
        state.text_key.params, state.text_encoder.params, cfg.momentum)
    state.image_bank.enqueue_batch(images, v_key)
    state.text_bank.enqueue_batch(texts, w_key)

    neg_items = np.concatenate([dataset.pair_of[cand_t_ids[pick_t]], cand_i_ids[pick_i]])
    anchors = np.concatenate([images, images])
    log.samples.extend(zip(anchors.tolist(), neg_items.tolist()))
    log.sample_ready.extend([snap.ready] * (2 * B))
    if dataset.has_clusters:
        c = dataset.cluster_of
        fn = (c[anchors] == c[neg_items]) & (anchors != neg_items)
        fn_rate = float(fn.mean())
    else:
        fn_rate = float("nan")

    state.step += 1
    return StepRecord(state.epoch, state.step, float(out.loss.mean()), snap.mu_pos,
                      snap.sigma_pos, snap.mu_neg, snap.sigma_neg, snap.ready, fn_rate)


def train_epoch(state: TrainState, dataset: PairedDataset, cfg: TrainConfig,
                fne_cfg: FneConfig, rngs: dict[str, np.random.Generator]) -> EpochLog:
    """One pass over all annotated pairs in shuffled mini-batches."""
    if dataset.n_texts == 0:
        raise MalformedInputError("dataset has no pairs")
    if state.epoch > 0:
        if cfg.reset_stats_each_epoch:
            state.tracker.new_epoch()
        if cfg.clear_banks_each_epoch:
            state.image_bank.clear()
            state.text_bank.clear()
    lr = cfg.lr_at(state.epoch)
    order = rngs["shuffle"].permutation(dataset.n_texts)
    log = EpochLog()
    for b, start in enumerate(range(0, order.size, cfg.batch_size)):
        try:
            rec = train_step(state, dataset, order[start:start + cfg.batch_size], lr,
                             cfg, fne_cfg, rngs["sample"], log)
        except FneError as exc:
            raise TrainingError(f"epoch {state.epoch} batch {b}: {exc}") from exc
        log.steps.append(rec)
    state.epoch += 1
    return log


def train(dataset: PairedDataset, cfg: TrainConfig, fne_cfg: FneConfig,
          epoch_callback=None) -> tuple[TrainState, list[EpochLog]]:
    rngs = make_rngs(cfg.seed)
    state = TrainState.initial(dataset, cfg, rngs["init"])
    logs = []
    for _ in range(cfg.epochs):
        log = train_epoch(state, dataset, cfg, fne_cfg, rngs)
        logs.append(log)
        if epoch_callback is not None:
            epoch_callback(state, log)
    return state, logs
