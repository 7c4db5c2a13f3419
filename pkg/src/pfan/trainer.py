"""Hardest-negative triplet loss, Adam training loop and checkpoints.

Checkpoint layout (all integers little-endian)::

    b"PFANCKPT" | u16 version | u8 precision (0 = f64, 1 = f32) | u32 tensor count
    per tensor:  u32 name length | name (UTF-8) | u32 ndim | ndim * u32 extents | payload
    u32 metadata length | metadata (canonical JSON: config, epoch, step, rng state, losses)

Adam moment estimates are stored as tensors named ``adam.m.<param>`` and
``adam.v.<param>`` so a resumed run continues exactly.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import ADAM_BETAS, ADAM_EPS, TrainConfig, canonical_json
from .errors import ConfigError, ConfigMismatchError, CorruptFileError, NumericError
from .model import PFAN, param_shapes
from .numerics import GradTape, Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PFANCKPT"
CKPT_VERSION = 1


def triplet_loss_hardest(scores, margin):
    """Sum over matched pairs of the hinge against the hardest row and column negatives.

    ``scores`` is a square (B, B) Tensor with positive pairs on the diagonal.
    """
    b = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] != b:
        raise ConfigError(f"triplet loss needs a square score matrix, got {scores.shape}")
    if b < 2:
        raise ConfigError("triplet loss needs at least two pairs")
    eye = np.eye(b, dtype=bool)
    diag = nx.sum(nx.mul(scores, Tensor(eye.astype(scores.dtype))), axis=1)
    # push the diagonal below every off-diagonal entry before taking maxima
    shift = 2.0 * float(np.abs(scores.data).max()) + 1.0
    masked = nx.add(scores, Tensor(np.where(eye, -shift, 0.0).astype(scores.dtype)))
    hardest_caption = nx.max(masked, axis=1)  # image p against captions q != p
    hardest_image = nx.max(masked, axis=0)  # caption p against images q != p
    cost_c = nx.relu(nx.add(nx.sub(hardest_caption, diag), margin))
    cost_i = nx.relu(nx.add(nx.sub(hardest_image, diag), margin))
    return nx.add(nx.sum(cost_c), nx.sum(cost_i))


class Adam:
    def __init__(self, params, lr, betas=ADAM_BETAS, eps=ADAM_EPS):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads):
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** t)
            v_hat = self.v[name] / (1 - b2 ** t)
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.data = (p.data - update).astype(p.dtype)


def clip_gradients(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if total > max_norm:
        factor = max_norm / total
        grads = {k: g * g.dtype.type(factor) for k, g in grads.items()}
    return grads, total


def make_batches(dataset, batch_size, rng):
    """Caption positions grouped so that no image appears twice in a batch.

    Captions are dealt in rounds (the r-th caption of every image), each
    round shuffled and cut into batches; a trailing singleton joins the
    previous batch of its round.
    """
    per_image = {}
    for q, cap in enumerate(dataset.captions):
        per_image.setdefault(cap.image_id, []).append(q)
    for qs in per_image.values():
        rng.shuffle(qs)
    rounds = max(len(qs) for qs in per_image.values())
    batches = []
    for r in range(rounds):
        members = [qs[r] for qs in per_image.values() if r < len(qs)]
        rng.shuffle(members)
        chunk = [members[i:i + batch_size] for i in range(0, len(members), batch_size)]
        if len(chunk) > 1 and len(chunk[-1]) == 1:
            chunk[-2].extend(chunk.pop())
        batches.extend(c for c in chunk if len(c) >= 2)
    return batches


def batch_loss(model, dataset, positions, token_ids, direction=None):
    images = [dataset.images[dataset.image_pos[dataset.captions[q].image_id]] for q in positions]
    scores = model.scores(model.batch(images), [token_ids[q] for q in positions], direction)
    return triplet_loss_hardest(scores, model.config.margin)


@dataclass
class TrainState:
    model: PFAN
    optimizer: Adam
    rng: np.random.Generator
    epoch: int = 0
    losses: list = field(default_factory=list)


def new_state(config, vocab_size):
    model = PFAN.create(config, vocab_size)
    # batch order uses its own stream so it does not depend on the parameter count
    rng = np.random.default_rng([config.seed, 1])
    return TrainState(model, Adam(model.params, config.lr), rng)


def train_epoch(state, dataset, token_ids=None):
    """One pass over the data; returns the mean batch loss."""
    model, cfg = state.model, state.model.config
    token_ids = token_ids if token_ids is not None else dataset.token_ids(cfg.max_tokens)
    batches = make_batches(dataset, cfg.batch_size, state.rng)
    if not batches:
        raise ConfigError("dataset yields no batch with at least two pairs")
    total = 0.0
    for positions in batches:
        try:
            with GradTape() as tape:
                loss = batch_loss(model, dataset, positions, token_ids)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError("non-finite loss")
            grads = tape.gradient(loss, model.params)
        except NumericError as exc:
            exc.batch = [dataset.captions[q].image_id for q in positions]
            exc.epoch = state.epoch
            raise
        grads, _ = clip_gradients(grads, cfg.grad_clip)
        state.optimizer.step(grads)
        total += value
    state.epoch += 1
    mean_loss = total / len(batches)
    state.losses.append(mean_loss)
    return mean_loss


def full_loss(model, dataset, direction=None):
    """Triplet loss over the whole dataset as one batch (first caption per image)."""
    token_ids = dataset.token_ids(model.config.max_tokens)
    seen, positions = set(), []
    for q, cap in enumerate(dataset.captions):
        if cap.image_id not in seen:
            seen.add(cap.image_id)
            positions.append(q)
    return batch_loss(model, dataset, positions, token_ids, direction).item()


def train(config, dataset, epochs=None, state=None, callback=None):
    state = state or new_state(config, len(dataset.vocab))
    token_ids = dataset.token_ids(config.max_tokens)
    target = config.epochs if epochs is None else epochs
    while state.epoch < target:
        loss = train_epoch(state, dataset, token_ids)
        log.info("epoch %d loss %.6f", state.epoch, loss)
        if callback is not None and callback(state, loss) is False:
            break
        if config.early_stop and loss == 0.0:
            break
    return state


# checkpoints ---------------------------------------------------------------------


def _pack_tensor(name, arr, dtype):
    raw_name = name.encode("utf-8")
    out = [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<I", arr.ndim)]
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())
    return b"".join(out)


def save_checkpoint(path, state):
    model, opt = state.model, state.optimizer
    cfg = model.config
    dtype = np.float64 if cfg.precision == "double" else np.float32
    tensors = [(k, p.data) for k, p in model.params.items()]
    tensors += [(f"adam.m.{k}", v) for k, v in opt.m.items()]
    tensors += [(f"adam.v.{k}", v) for k, v in opt.v.items()]
    meta = {
        "config": cfg.to_dict(),
        "epoch": state.epoch,
        "adam_step": opt.step_count,
        "rng_state": state.rng.bit_generator.state,
        "losses": state.losses,
    }
    body = [CKPT_MAGIC, struct.pack("<HBI", CKPT_VERSION, 0 if dtype == np.float64 else 1, len(tensors))]
    body += [_pack_tensor(name, arr, dtype) for name, arr in tensors]
    raw_meta = canonical_json(meta).encode("utf-8")
    body += [struct.pack("<I", len(raw_meta)), raw_meta]
    Path(path).write_bytes(b"".join(body))


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CorruptFileError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def read_checkpoint(path):
    """Raw contents: (tensors dict, metadata dict)."""
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CorruptFileError(f"checkpoint not found: {path}") from None
    rd = _Reader(raw, path)
    if rd.take(8) != CKPT_MAGIC:
        raise CorruptFileError(f"{path}: not a checkpoint (bad magic)")
    version, flag, count = rd.unpack("<HBI")
    if version != CKPT_VERSION:
        raise CorruptFileError(f"{path}: unsupported checkpoint version {version}")
    if flag not in (0, 1):
        raise CorruptFileError(f"{path}: bad precision flag {flag}")
    dtype = np.dtype("<f8" if flag == 0 else "<f4")
    tensors = {}
    for _ in range(count):
        (nlen,) = rd.unpack("<I")
        try:
            name = rd.take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptFileError(f"{path}: bad tensor name") from None
        (ndim,) = rd.unpack("<I")
        shape = rd.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(rd.take(size * dtype.itemsize), dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    (mlen,) = rd.unpack("<I")
    try:
        meta = json.loads(rd.take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptFileError(f"{path}: unreadable metadata") from None
    if rd.pos != len(raw):
        raise CorruptFileError(f"{path}: trailing bytes after metadata")
    return tensors, meta


def load_checkpoint(path, config=None):
    """Rebuild the training state; ``config`` (if given) must agree on every shape-defining field."""
    tensors, meta = read_checkpoint(path)
    try:
        saved = TrainConfig.from_dict(meta["config"])
    except (KeyError, ConfigError) as exc:
        raise CorruptFileError(f"{path}: bad config block ({exc})") from None
    if config is not None:
        diff = {k: (v, saved.structure()[k]) for k, v in config.structure().items() if saved.structure()[k] != v}
        if diff:
            detail = ", ".join(f"{k}: expected {a}, checkpoint has {b}" for k, (a, b) in diff.items())
            raise ConfigMismatchError(f"{path}: {detail}")
        if config.precision != saved.precision:
            raise ConfigMismatchError(f"{path}: precision {saved.precision} != {config.precision}")
    cfg = config or saved
    if "word_embedding" not in tensors:
        raise CorruptFileError(f"{path}: missing word_embedding")
    shapes = param_shapes(cfg, tensors["word_embedding"].shape[1])
    params = {}
    for name, shape in shapes.items():
        if name not in tensors:
            raise CorruptFileError(f"{path}: missing tensor {name}")
        if tensors[name].shape != shape:
            raise ConfigMismatchError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {shape}")
        params[name] = Tensor(tensors[name].copy(), requires_grad=True, name=name)
    model = PFAN(cfg, params)
    opt = Adam(params, cfg.lr)
    opt.step_count = int(meta.get("adam_step", 0))
    for name in params:
        if f"adam.m.{name}" in tensors:
            opt.m[name] = tensors[f"adam.m.{name}"].copy()
            opt.v[name] = tensors[f"adam.v.{name}"].copy()
    rng = np.random.default_rng()
    if "rng_state" in meta:
        rng.bit_generator.state = meta["rng_state"]
    return TrainState(model, opt, rng, int(meta.get("epoch", 0)), list(meta.get("losses", [])))
