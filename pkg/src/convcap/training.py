"""Teacher-forced training: Adam with global-norm gradient clipping,
per-epoch augmentation and caption re-selection, checkpointing, and a
JSON-lines loss log.

The per-sequence forwards in convcap.models are the reference semantics;
for throughput the trainer packs a whole batch into one graph. Convolutional
batches concatenate sequences along time with K-1 zero separator rows
(re-zeroed after every layer), so each position sees exactly the same causal
window as the per-sequence path. LSTM batches step all sequences together as
[B, *] rows. Both paths are covered by equivalence tests against the
reference forwards.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from convcap import tensor as T
from convcap.errors import ConfigError, DataError, NumericError
from convcap.image import AugmentPolicy, apply_policy, encode_images, FeatureSet, POLICIES
from convcap.models import Model, ModelConfig, attention_layer, init_model, save_checkpoint
from convcap.tensor import Tensor
from convcap.text import (CaptionDataset, TrainingPair, Vocabulary, dev_pairs,
                          select_training_captions, stable_id_hash)


@dataclass
class TrainConfig:
    batch_size: int | None = None     # default 10 for conv decoders, 32 for lstm
    epochs: int = 50
    learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 5.0
    seed: int = 0
    augment: str = "none"
    checkpoint_every: int = 0         # 0 keeps only best + final
    stop_accuracy: float | None = None
    accuracy_check_every: int = 10

    def validate(self):
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.augment not in POLICIES:
            raise ConfigError(f"unknown augment policy {self.augment!r}")
        return self

    def resolved_batch_size(self, model_cfg: ModelConfig) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 32 if model_cfg.decoder == "lstm" else 10


class AdamOptimizer:
    """Adam with bias correction over a model's parameter list."""

    def __init__(self, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            m_hat = self.m[i] / (1 - b1 ** self.step_count)
            v_hat = self.v[i] / (1 - b2 ** self.step_count)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def clip_global_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(factor)
    return norm


# ---------------------------------------------------------------------------
# Batched graphs

def _conv_packed(model: Model, batch):
    """Pack a conv batch along time with K-1 zero separator rows per pair.

    Returns (logits, packed targets, packed mask, content row indices).
    """
    cfg = model.cfg
    sep = cfg.kernel - 1
    dtype = model.params["embedding"].data.dtype

    ids, targets, mask, content = [], [], [], []
    pos = 0
    for pair, _ in batch:
        ids.extend([0] * sep)
        targets.extend([0] * sep)
        mask.extend([0] * sep)
        pos += sep
        ids.extend(int(x) for x in pair.input_ids)
        targets.extend(int(x) for x in pair.target_ids)
        mask.extend(int(x) for x in pair.mask)
        content.extend(range(pos, pos + len(pair.input_ids)))
        pos += len(pair.input_ids)
    ids = np.asarray(ids, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.int64)
    n = ids.size

    keep = np.ones(n, dtype=dtype)
    if sep:
        keep_rows = np.zeros(n, dtype=bool)
        keep_rows[content] = True
        keep = keep_rows.astype(dtype)

    emb = T.mul(T.embedding(model.params["embedding"], ids),
                Tensor(np.broadcast_to(keep[:, None], (n, cfg.emb_dim)).copy()))

    pooled = np.stack([feats[1] for _, feats in batch]).astype(dtype)   # [B, F]
    selector = _build_selector(batch, sep, n, dtype)
    img = T.matmul(Tensor(selector), T.matmul(Tensor(pooled), model.params["img_proj"]))

    h = T.concat_last([emb, img])                                       # [N, 2E]
    keep_h = Tensor(np.broadcast_to(keep[:, None], (n, cfg.hidden)).copy())
    for layer in range(1, cfg.num_layers + 1):
        z = T.glu(T.conv1d_causal(h, model.params[f"conv{layer}_w"],
                                  model.params[f"conv{layer}_b"]))
        z = T.mul(z, keep_h)
        if cfg.decoder == "conv_attention":
            parts = []
            row = 0
            for pair, feats in batch:
                zeros = Tensor(np.zeros((sep, cfg.hidden), dtype=dtype))
                lo = row + sep
                hi = lo + len(pair.input_ids)
                att = attention_layer(T.slice_rows(z, lo, hi), feats[0],
                                      model.params[f"attn{layer}_q"],
                                      model.params[f"attn{layer}_v"])
                parts.extend([zeros, att] if sep else [att])
                row = hi
            z = T.concat_rows(parts)
        h = z if layer == 1 else T.add(z, h)

    logits = T.add(T.matmul(h, model.params["out_w"]),
                   T.repeat_row(_bias_row(model), n))
    return logits, targets, mask, np.asarray(content)


def _build_selector(batch, sep, n, dtype):
    sel = np.zeros((n, len(batch)), dtype=dtype)
    pos = 0
    for b, (pair, _) in enumerate(batch):
        pos += sep
        sel[pos:pos + len(pair.input_ids), b] = 1.0
        pos += len(pair.input_ids)
    return sel


def _bias_row(model):
    return _param_row(model.params["out_b"])


def _param_row(p: Tensor) -> Tensor:
    """Reshape a 1-d parameter to [1, N], routing gradients back to it."""
    view = Tensor(p.data.reshape(1, -1))
    view.requires_grad = p.requires_grad
    view._prev = (p,)

    def back(g):
        if p.requires_grad:
            p._accumulate(g.reshape(p.data.shape))

    view._backward = back
    return view


def _lstm_batched(model: Model, batch):
    """Step all sequences of the batch together; returns
    (per-step logits tensors, targets [B, T], mask [B, T])."""
    cfg = model.cfg
    dtype = model.params["embedding"].data.dtype
    ids = np.stack([p.input_ids for p, _ in batch])
    targets = np.stack([p.target_ids for p, _ in batch])
    mask = np.stack([p.mask for p, _ in batch])
    b = len(batch)

    pooled = Tensor(np.stack([f[1] for _, f in batch]).astype(dtype))
    h0 = T.tanh(T.matmul(pooled, model.params["init_h"]))
    c0 = T.tanh(T.matmul(pooled, model.params["init_c"]))
    states = [(h0, c0) for _ in range(cfg.num_layers)]

    h_dim = cfg.hidden
    t_max = int(mask.sum(axis=0).nonzero()[0].max()) + 1 if mask.any() else 0
    step_logits = []
    for t in range(t_max):
        x = T.embedding(model.params["embedding"], ids[:, t])
        for layer in range(1, cfg.num_layers + 1):
            h_prev, c_prev = states[layer - 1]
            pre = T.add(T.add(T.matmul(x, model.params[f"lstm{layer}_wx"]),
                              T.matmul(h_prev, model.params[f"lstm{layer}_wh"])),
                        T.repeat_row(_param_row(model.params[f"lstm{layer}_b"]), b))
            i = T.sigmoid(T.slice_last(pre, 0, h_dim))
            f = T.sigmoid(T.slice_last(pre, h_dim, 2 * h_dim))
            o = T.sigmoid(T.slice_last(pre, 2 * h_dim, 3 * h_dim))
            g = T.tanh(T.slice_last(pre, 3 * h_dim, 4 * h_dim))
            c = T.add(T.mul(f, c_prev), T.mul(i, g))
            x = T.mul(o, T.tanh(c))
            states[layer - 1] = (x, c)
        logits_t = T.add(T.matmul(x, model.params["out_w"]),
                         T.repeat_row(_bias_row(model), b))
        step_logits.append(logits_t)
    return step_logits, targets, mask


def batch_loss(model: Model, batch) -> Tensor:
    """Mean masked cross-entropy over every masked position of the batch."""
    if not batch:
        raise ValueError("batch must be nonempty")
    if model.cfg.decoder == "lstm":
        step_logits, targets, mask = _lstm_batched(model, batch)
        total = int(mask.sum())
        if total == 0:
            raise ValueError("batch has no masked positions")
        loss = None
        for t, logits_t in enumerate(step_logits):
            m_t = int(mask[:, t].sum())
            if m_t == 0:
                continue
            part = T.scale(T.cross_entropy_masked(logits_t, targets[:, t], mask[:, t]),
                           m_t / total)
            loss = part if loss is None else T.add(loss, part)
        return loss
    logits, targets, mask, _ = _conv_packed(model, batch)
    return T.cross_entropy_masked(logits, targets, mask)


def batch_accuracy(model: Model, batch) -> tuple[int, int]:
    """(correct, total) argmax matches over masked positions."""
    if model.cfg.decoder == "lstm":
        step_logits, targets, mask = _lstm_batched(model, batch)
        correct = total = 0
        for t, logits_t in enumerate(step_logits):
            sel = mask[:, t] == 1
            correct += int((logits_t.data[sel].argmax(axis=1) == targets[sel, t]).sum())
            total += int(sel.sum())
        return correct, total
    logits, targets, mask, _ = _conv_packed(model, batch)
    sel = mask == 1
    correct = int((logits.data[sel].argmax(axis=1) == targets[sel]).sum())
    return correct, int(sel.sum())


def teacher_forced_accuracy(model: Model, pairs, features: FeatureSet,
                            batch_size: int = 32) -> float:
    correct = total = 0
    for lo in range(0, len(pairs), batch_size):
        batch = [(p, (features.regions[p.image_id], features.pooled[p.image_id]))
                 for p in pairs[lo:lo + batch_size]]
        c, t = batch_accuracy(model, batch)
        correct += c
        total += t
    return correct / total if total else 0.0


def training_step(model: Model, opt: AdamOptimizer, batch,
                  grad_clip_norm: float = 5.0) -> float:
    """One optimization step; returns the pre-update loss."""
    loss = batch_loss(model, batch)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite training loss {value!r} at step {opt.step_count + 1}")
    model.zero_grad()
    loss.backward()
    clip_global_norm(model.parameters(), grad_clip_norm)
    opt.step()
    return value


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)
    best_epoch: int | None = None
    final_path: str = ""
    best_path: str = ""


def _epoch_features(dataset: CaptionDataset, images, policy: AugmentPolicy,
                    seed: int, epoch: int, grid: int, dim: int,
                    feature_seed: int) -> FeatureSet:
    """Features for one epoch: train images get a fresh augmentation draw."""
    train_ids = set(dataset.ids("train"))
    out = {}
    for image_id, img in images.items():
        if policy.kind != "none" and image_id in train_ids:
            rng = np.random.default_rng([seed, epoch, stable_id_hash(image_id)])
            img = apply_policy(img, policy, rng)
        out[image_id] = img
    return encode_images(out, grid=grid, dim=dim, seed=feature_seed)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: CaptionDataset,
          vocab: Vocabulary, out_dir, *, features: FeatureSet = None,
          images: dict = None, feature_grid: int = 4, feature_seed: int = 0,
          log_fn=None) -> TrainResult:
    """Run the full training loop and write checkpoints + train_log.jsonl."""
    model_cfg.validate()
    train_cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if features is None and images is None:
        raise DataError("train needs either precomputed features or raw images")
    policy = AugmentPolicy(train_cfg.augment)
    if policy.kind != "none" and images is None:
        if log_fn:
            log_fn("warning: augmentation policy set but no raw images given; "
                   "training on static features")
        policy = AugmentPolicy("none")
    if features is None:
        features = encode_images(images, grid=feature_grid, dim=model_cfg.feature_dim,
                                 seed=feature_seed)
    _check_feature_coverage(dataset, features, model_cfg)
    if not dataset.split("train"):
        raise DataError("dataset has no training split")

    model = init_model(model_cfg)
    opt = AdamOptimizer(model.parameters(), lr=train_cfg.learning_rate,
                        beta1=train_cfg.adam_beta1, beta2=train_cfg.adam_beta2,
                        eps=train_cfg.adam_eps)
    batch_size = train_cfg.resolved_batch_size(model_cfg)
    held_out = dev_pairs(dataset, vocab, model_cfg.max_len, split="dev")

    result = TrainResult(model=model)
    result.final_path = str(out_dir / "final.ckpt")
    best_loss = np.inf
    log_path = out_dir / "train_log.jsonl"
    start = time.monotonic()

    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(train_cfg.epochs):
            rng = np.random.default_rng([train_cfg.seed, epoch])
            if policy.kind != "none":
                epoch_feats = _epoch_features(dataset, images, policy, train_cfg.seed,
                                              epoch, feature_grid, model_cfg.feature_dim,
                                              feature_seed)
            else:
                epoch_feats = features

            pairs = select_training_captions(dataset, vocab, model_cfg.max_len, rng)
            order = rng.permutation(len(pairs))
            losses = []
            for lo in range(0, len(order), batch_size):
                batch = [(pairs[i], (epoch_feats.regions[pairs[i].image_id],
                                     epoch_feats.pooled[pairs[i].image_id]))
                         for i in order[lo:lo + batch_size]]
                losses.append(training_step(model, opt, batch, train_cfg.grad_clip_norm))

            record = {"epoch": epoch, "mean_loss": float(np.mean(losses)),
                      "wall_time": time.monotonic() - start}
            if held_out:
                dev_loss = _split_loss(model, held_out, features, batch_size)
                record["dev_loss"] = dev_loss
                if dev_loss < best_loss:
                    best_loss = dev_loss
                    result.best_epoch = epoch
                    result.best_path = str(out_dir / "best.ckpt")
                    save_checkpoint(model, result.best_path)
            result.history.append(record)
            log.write(json.dumps(record) + "\n")
            log.flush()
            if log_fn:
                log_fn(f"epoch {epoch}: loss {record['mean_loss']:.4f}")

            if train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
                ckpt_dir = out_dir / "checkpoints"
                ckpt_dir.mkdir(exist_ok=True)
                save_checkpoint(model, ckpt_dir / f"epoch_{epoch:04d}.ckpt")

            if (train_cfg.stop_accuracy is not None
                    and (epoch + 1) % train_cfg.accuracy_check_every == 0):
                acc = teacher_forced_accuracy(model, pairs, epoch_feats, batch_size)
                if acc >= train_cfg.stop_accuracy:
                    if log_fn:
                        log_fn(f"stopping at epoch {epoch}: accuracy {acc:.4f}")
                    break

    save_checkpoint(model, result.final_path)
    return result


def _split_loss(model, pairs, features, batch_size):
    total_loss = 0.0
    total_mask = 0
    for lo in range(0, len(pairs), batch_size):
        batch = [(p, (features.regions[p.image_id], features.pooled[p.image_id]))
                 for p in pairs[lo:lo + batch_size]]
        weight = sum(int(p.mask.sum()) for p, _ in batch)
        total_loss += batch_loss(model, batch).item() * weight
        total_mask += weight
    return total_loss / total_mask if total_mask else 0.0


def _check_feature_coverage(dataset, features, model_cfg):
    missing = [i for i in dataset.ids() if i not in features]
    if missing:
        raise DataError(f"features missing for {len(missing)} images, e.g. {missing[:3]}")
    if features.dim != model_cfg.feature_dim:
        raise DataError(f"feature dim {features.dim} != model feature_dim {model_cfg.feature_dim}")
    if model_cfg.decoder == "conv_attention" and features.num_regions != model_cfg.regions:
        raise DataError(f"feature regions {features.num_regions} != model regions {model_cfg.regions}")
