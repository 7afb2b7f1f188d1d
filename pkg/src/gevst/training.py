"""Optimization: cross-entropy phase, self-critical phase, checkpoints.

XE teacher-forces the FIRST ground-truth caption of each sample (the second
stays a metric/reward reference; two distinct teacher targets would make the
first diverging token irreducibly ambiguous). SCST draws one multinomial
caption per sample, uses the greedy caption as baseline, and minimizes
-(r_sampled - r_greedy) * sum log p(sampled tokens) with per-sentence
CIDEr-D rewards against both references.

XE follows the Noam learning rate d^-0.5 * min(step^-0.5, step*warmup^-1.5)
(warmup = warmup_epochs in steps); SCST instead runs at the small constant
scst_lr — policy-gradient updates at the warmup schedule's rate wreck a
converged model — while resuming the step count stored in the checkpoint.
Both phases share Adam(beta2=0.98, eps=1e-9, bias-corrected), global-norm
gradient clipping at 5.0, batch-mean losses, a fixed shuffle stream per
epoch, and best-checkpoint selection by validation CIDEr-D every val_every
epochs.

Checkpoints are one compact JSON header line (config, vocabulary, trained
step count, parameter manifest of name/shape/offset) followed by the raw
little-endian float64 arrays in manifest order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .config import TrainConfig, config_from_dict
from .data import BOS_ID, EOS_ID, PAD_ID, Vocabulary, build_vocab, corpus_texts, split_train_val, tokenize
from .decoder import beam_search, greedy_decode
from .errors import ConfigError, ContractError, ParseError, SchemaError, TrainingDiverged
from .model import caption_logits, encode_sample, init_model, make_step_fn
from .nn import Tensor, log_softmax, named_parameters
from .tensor import Tape, no_grad
from . import tensor as T


def noam_lr(step, d_model, warmup_steps):
    """Peaks exactly at step == warmup_steps, then decays as step^-0.5."""
    if warmup_steps < 1:
        raise ConfigError(f"warmup_steps must be >= 1, got {warmup_steps}")
    if step < 1:
        raise ContractError(f"schedule step must be >= 1, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


class Adam:
    """Bias-corrected Adam over a fixed named-parameter list."""

    def __init__(self, params_obj, beta1=0.9, beta2=0.98, eps=1e-9):
        self.named = list(named_parameters(params_obj))
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for _, t in self.named]
        self.v = [np.zeros_like(t.data) for _, t in self.named]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (_, p) in enumerate(self.named):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            p.data = p.data - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def zero_grads(self):
        for _, p in self.named:
            p.grad = None


def clip_gradients(params_obj, max_norm):
    """Scale all grads so the global norm is at most max_norm; returns the norm."""
    grads = [t.grad for _, t in named_parameters(params_obj) if t.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


# ------------------------------------------------------------------ losses


def teacher_pair(vocab: Vocabulary, caption):
    """(decoder input ids, target ids) for one caption."""
    ids = vocab.encode(caption)
    return [BOS_ID] + ids, ids + [EOS_ID]


def xe_loss(logits, target_ids):
    """Mean over non-pad positions of -log softmax probability of the target."""
    t_len, v = logits.data.shape
    targets = np.asarray(target_ids, dtype=np.int64)
    if targets.shape != (t_len,):
        raise ContractError(f"{t_len} logit rows vs targets shape {targets.shape}")
    live = targets != PAD_ID
    count = int(live.sum())
    if count == 0:
        raise ContractError("all-pad target sequence")
    weight = np.zeros((t_len, v))
    weight[np.arange(t_len)[live], targets[live]] = 1.0 / count
    return T.mul(T.total_sum(T.mul(log_softmax(logits), Tensor(weight))), -1.0)


def sequence_logprob(logits, ids):
    """Summed log-probability of `ids` under rows of `logits` (row t -> ids[t])."""
    t_len, v = logits.data.shape
    idx = np.asarray(ids, dtype=np.int64)
    if idx.shape != (t_len,):
        raise ContractError(f"{t_len} logit rows vs {idx.shape} ids")
    weight = np.zeros((t_len, v))
    weight[np.arange(t_len), idx] = 1.0
    return T.total_sum(T.mul(log_softmax(logits), Tensor(weight)))


def reinforce_loss(logp_sum, advantage):
    """Self-critical surrogate: -(advantage) * log-prob; zero advantage, zero grad."""
    return T.mul(logp_sum, -float(advantage))


# ------------------------------------------------------------- evaluation


def caption_tokens(vocab, ids):
    """Generated-id list -> token list (EOS and friends dropped)."""
    return tokenize(vocab.decode(ids))


def greedy_caption(params, cfg, vocab, sample):
    branch = encode_sample(params, cfg, sample, vocab)
    ids, logprob = greedy_decode(make_step_fn(params, cfg, branch), max_len=cfg.max_len)
    return caption_tokens(vocab, ids), logprob


def beam_caption(params, cfg, vocab, sample, beam=None):
    branch = encode_sample(params, cfg, sample, vocab)
    ids, logprob, _ = beam_search(make_step_fn(params, cfg, branch), beam=beam or cfg.beam, max_len=cfg.max_len)
    return caption_tokens(vocab, ids), logprob


def references_of(samples):
    return [[tokenize(c) for c in s.gt_captions] for s in samples]


def corpus_cider(params, cfg, vocab, samples):
    if not samples:
        return 0.0
    cands = [greedy_caption(params, cfg, vocab, s)[0] for s in samples]
    score, _ = metrics.cider_d(cands, references_of(samples))
    return score


def token_accuracy(params, cfg, vocab, samples):
    """Teacher-forcing accuracy on the first gt caption, plus mean XE loss."""
    hits = total = 0
    loss_sum = 0.0
    with no_grad():
        for s in samples:
            branch = encode_sample(params, cfg, s, vocab)
            inputs, targets = teacher_pair(vocab, s.gt_captions[0])
            logits = caption_logits(params, cfg, branch, inputs)
            loss_sum += xe_loss(logits, targets).item()
            pred = logits.data.argmax(axis=1)
            live = np.asarray(targets) != PAD_ID
            hits += int((pred[live] == np.asarray(targets)[live]).sum())
            total += int(live.sum())
    return hits / max(1, total), loss_sum / max(1, len(samples))


# ---------------------------------------------------------------- training


@dataclass
class TrainOutcome:
    params: object
    vocab: Vocabulary
    cfg: TrainConfig
    curve: list  # (epoch, value) pairs; loss for XE, mean sampled reward for SCST
    best_snapshot: dict  # name -> array copy at the best validation point
    best_epoch: int
    best_val: float
    trained_steps: int
    diagnostics: dict = field(default_factory=dict)


def _snapshot(params_obj):
    return {name: t.data.copy() for name, t in named_parameters(params_obj)}


def restore_snapshot(params_obj, snap):
    for name, t in named_parameters(params_obj):
        t.data = snap[name].copy()


def _epoch_rng(seed, tag, epoch):
    return np.random.default_rng(np.random.SeedSequence([seed, tag, epoch]))


def _batches(order, size):
    for i in range(0, len(order), size):
        yield order[i : i + size]


def train_xe(samples, cfg: TrainConfig, epochs=None, params=None, vocab=None,
             start_step=0, log=None, stop_fn=None):
    """Cross-entropy phase. `epochs` overrides cfg.xe_epochs; `stop_fn(epoch,
    loss)` may end training early (used by convergence-style experiments)."""
    train, val = split_train_val(samples)
    if vocab is None:
        vocab = build_vocab(corpus_texts(train), cfg.min_count)
    if params is None:
        params = init_model(cfg, len(vocab), np.random.default_rng(np.random.SeedSequence([cfg.seed, 11])))
    epochs = cfg.xe_epochs if epochs is None else epochs

    steps_per_epoch = max(1, math.ceil(len(train) / cfg.batch_size))
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    opt = Adam(params)
    opt.t = 0
    step = start_step

    curve = []
    best_snapshot, best_epoch, best_val = _snapshot(params), 0, -1.0
    clip_events = 0

    for epoch in range(1, epochs + 1):
        order = _epoch_rng(cfg.seed, 101, epoch).permutation(len(train))
        loss_total = 0.0
        for batch in _batches(order, cfg.batch_size):
            opt.zero_grads()
            with Tape() as tape:
                acc = None
                for idx in batch:
                    s = train[int(idx)]
                    branch = encode_sample(params, cfg, s, vocab)
                    inputs, targets = teacher_pair(vocab, s.gt_captions[0])
                    loss = xe_loss(caption_logits(params, cfg, branch, inputs), targets)
                    acc = loss if acc is None else T.add(acc, loss)
                batch_loss = T.mul(acc, 1.0 / len(batch))
                tape.backward(batch_loss)
            value = batch_loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"XE loss became {value} at epoch {epoch}")
            loss_total += value * len(batch)
            if clip_gradients(params, cfg.grad_clip) > cfg.grad_clip:
                clip_events += 1
            step += 1
            opt.step(noam_lr(step, cfg.d_model, warmup_steps) * cfg.lr_scale)
        epoch_loss = loss_total / len(train)
        curve.append((epoch, epoch_loss))
        if log:
            log(f"epoch {epoch}: loss {epoch_loss:.6f}")

        if epoch % cfg.val_every == 0 or epoch == epochs:
            pool = val if val else train
            score = corpus_cider(params, cfg, vocab, pool)
            if score > best_val:
                best_snapshot, best_epoch, best_val = _snapshot(params), epoch, score
        if stop_fn and stop_fn(epoch, epoch_loss):
            if best_epoch < epoch:
                pool = val if val else train
                score = corpus_cider(params, cfg, vocab, pool)
                if score > best_val:
                    best_snapshot, best_epoch, best_val = _snapshot(params), epoch, score
            break

    return TrainOutcome(params, vocab, cfg, curve, best_snapshot, best_epoch, best_val,
                        trained_steps=step, diagnostics={"clip_events": clip_events})


def scst_rollouts(params, cfg, vocab, sample, rng):
    """(sampled ids, greedy ids) from the current policy, tapeless."""
    branch = encode_sample(params, cfg, sample, vocab)
    step_fn = make_step_fn(params, cfg, branch)
    greedy_ids, _ = greedy_decode(step_fn, max_len=cfg.max_len)
    ids = [BOS_ID]
    sampled = []
    for _ in range(cfg.max_len):
        lp = step_fn(ids)
        tok = int(rng.choice(len(lp), p=np.exp(lp)))
        sampled.append(tok)
        ids.append(tok)
        if tok == EOS_ID:
            break
    return sampled, greedy_ids


def train_scst(samples, cfg: TrainConfig, params, vocab, epochs=None, start_step=0, log=None):
    """Self-critical phase from an XE-trained model."""
    train, val = split_train_val(samples)
    epochs = cfg.scst_epochs if epochs is None else epochs
    refs = references_of(train)
    scorer = metrics.CiderScorer(refs)
    ref_by_id = {s.id: r for s, r in zip(train, refs)}

    opt = Adam(params)
    step = start_step

    curve = []
    best_snapshot, best_epoch, best_val = _snapshot(params), 0, -1.0
    zero_reward_epochs = 0

    for epoch in range(1, epochs + 1):
        order = _epoch_rng(cfg.seed, 202, epoch).permutation(len(train))
        sample_rng = _epoch_rng(cfg.seed, 303, epoch)
        reward_total = 0.0
        for batch in _batches(order, cfg.batch_size):
            opt.zero_grads()
            with Tape() as tape:
                acc = None
                for idx in batch:
                    s = train[int(idx)]
                    sampled, greedy_ids = scst_rollouts(params, cfg, vocab, s, sample_rng)
                    r_s = scorer.sentence(caption_tokens(vocab, sampled), ref_by_id[s.id])
                    r_g = scorer.sentence(caption_tokens(vocab, greedy_ids), ref_by_id[s.id])
                    reward_total += r_s
                    advantage = r_s - r_g
                    if advantage == 0.0:
                        continue
                    branch = encode_sample(params, cfg, s, vocab)
                    logits = caption_logits(params, cfg, branch, [BOS_ID] + sampled[:-1])
                    loss = reinforce_loss(sequence_logprob(logits, sampled), advantage)
                    acc = loss if acc is None else T.add(acc, loss)
                if acc is None:
                    continue
                batch_loss = T.mul(acc, 1.0 / len(batch))
                tape.backward(batch_loss)
            if not math.isfinite(batch_loss.item()):
                raise TrainingDiverged(f"SCST loss became non-finite at epoch {epoch}")
            clip_gradients(params, cfg.grad_clip)
            step += 1
            opt.step(cfg.scst_lr)
        mean_reward = reward_total / len(train)
        curve.append((epoch, mean_reward))
        if mean_reward == 0.0:
            zero_reward_epochs += 1
        if log:
            log(f"epoch {epoch}: mean sampled reward {mean_reward:.4f}")

        if epoch % cfg.val_every == 0 or epoch == epochs:
            pool = val if val else train
            score = corpus_cider(params, cfg, vocab, pool)
            if score > best_val:
                best_snapshot, best_epoch, best_val = _snapshot(params), epoch, score

    diagnostics = {}
    if zero_reward_epochs == epochs and epochs > 0:
        diagnostics["warning"] = "reward was identically zero for every epoch"
    return TrainOutcome(params, vocab, cfg, curve, best_snapshot, best_epoch, best_val,
                        trained_steps=step, diagnostics=diagnostics)


# ------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "gevst-checkpoint-v1"


def save_checkpoint(path, cfg: TrainConfig, vocab: Vocabulary, params, trained_steps=0, snapshot=None):
    """JSON header line + little-endian float64 arrays in manifest order."""
    manifest = []
    chunks = []
    offset = 0
    values = snapshot if snapshot is not None else {n: t.data for n, t in named_parameters(params)}
    for name, t in named_parameters(params):
        arr = np.ascontiguousarray(values[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": cfg.to_dict(),
        "vocab": vocab.id_to_token,
        "trained_steps": int(trained_steps),
        "params": manifest,
        "data_bytes": offset,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")
        for c in chunks:
            f.write(c)


def load_checkpoint(path):
    """Returns (cfg, vocab, params, trained_steps); forward passes reproduce
    the saved model bit-identically."""
    with open(path, "rb") as f:
        header_line = f.readline()
        blob = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ParseError("checkpoint header is not valid JSON", line=1) from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"unrecognized checkpoint format {header.get('format')!r}")
    for key in ("config", "vocab", "params"):
        if key not in header:
            raise SchemaError(f"checkpoint header missing field {key!r}")
    cfg = config_from_dict(header["config"])
    vocab = Vocabulary(list(header["vocab"]))
    params = init_model(cfg, len(vocab), np.random.default_rng(0))
    by_name = dict(named_parameters(params))
    listed = set()
    for entry in header["params"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in by_name:
            raise SchemaError(f"checkpoint names unknown parameter {name!r}")
        t = by_name[name]
        if t.data.shape != shape:
            raise SchemaError(f"parameter {name!r}: checkpoint shape {shape} != model shape {t.data.shape}")
        n = t.data.size
        raw = blob[offset : offset + 8 * n]
        if len(raw) != 8 * n:
            raise ParseError(f"checkpoint truncated while reading {name!r}")
        t.data = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        listed.add(name)
    missing = set(by_name) - listed
    if missing:
        raise SchemaError(f"checkpoint missing parameters: {sorted(missing)[:3]}...")
    return cfg, vocab, params, int(header.get("trained_steps", 0))


def write_curve(path, rows, value_name="value"):
    with open(path, "w") as f:
        f.write(f"epoch,{value_name}\n")
        for epoch, value in rows:
            f.write(f"{epoch},{value!r}\n")
