"""Frozen toy decoder-only transformer with named LoRA injection points.

The model is the stand-in for a pretrained LM: ``init_base_lm`` first runs a
short, seeded generic-pretraining pass on an unlabeled rule mixture (no task
identifiers, random per-sample parameters), then freezes every weight. A
purely random frozen net cannot be steered by low-rank q/v adapters, so this
pass is what makes desk-scale adapter training meaningful. Everything is
deterministic given (config, seed).

Adapters apply at the query and value projections of each attention block:
``h = W0 x + s * B^T (A x)``. An adapter entry may hold 2-d (shared across
the batch) or 3-d (stacked per-example) A/B tensors.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from . import taskgen
from .errors import ConfigError, ContractError, ShapeError
from .optim import Adam, clip_global_norm
from .serial import fingerprint64
from .tensor import (
    Tensor,
    backward,
    cross_entropy,
    gather_rows,
    layer_norm,
    matmul,
    silu,
    softmax,
)

if TYPE_CHECKING:  # adapters are duck-typed to avoid a module cycle
    from .lora import AdapterSet


@dataclass(frozen=True)
class BaseLMConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq: int = 32
    target_modules: tuple = ("q_proj", "v_proj")
    module_dims: dict = field(default_factory=dict)  # name -> (d_in, d_out)
    pretrain_steps: int = 1500
    pretrain_batch: int = 24
    pretrain_lr: float = 1.5e-3

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not self.target_modules:
            raise ConfigError("target_modules must be non-empty")
        if len(set(self.target_modules)) != len(self.target_modules):
            raise ConfigError("target_modules must be unique")
        dims = dict(self.module_dims)
        for m in self.target_modules:
            dims.setdefault(m, (self.d_model, self.d_model))
        object.__setattr__(self, "module_dims", dims)

    def canonical(self) -> str:
        mods = ",".join(
            f"{m}:{self.module_dims[m][0]}:{self.module_dims[m][1]}"
            for m in self.target_modules
        )
        return (
            f"v{self.vocab_size};d{self.d_model};L{self.n_layers};h{self.n_heads};"
            f"ff{self.d_ff};s{self.max_seq};mods={mods};"
            f"pt{self.pretrain_steps},{self.pretrain_batch},{self.pretrain_lr!r}"
        )

    def fingerprint(self) -> int:
        return fingerprint64(self.canonical())


class BaseLM:
    def __init__(self, config: BaseLMConfig, weights: dict):
        self.config = config
        self.weights = weights  # name -> Tensor, all frozen

    def parameters(self) -> list:
        return list(self.weights.values())

    def param_count(self) -> int:
        return sum(t.size for t in self.weights.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(self.weights[name].data.tobytes())
        return h.hexdigest()


def _param_shapes(config: BaseLMConfig) -> list:
    c = config
    shapes = [("tok_emb", (c.vocab_size, c.d_model)), ("pos_emb", (c.max_seq, c.d_model))]
    for i in range(c.n_layers):
        shapes += [
            (f"l{i}.ln1_g", (c.d_model,)),
            (f"l{i}.ln1_b", (c.d_model,)),
            (f"l{i}.q_proj", (c.d_model, c.d_model)),
            (f"l{i}.k_proj", (c.d_model, c.d_model)),
            (f"l{i}.v_proj", (c.d_model, c.d_model)),
            (f"l{i}.o_proj", (c.d_model, c.d_model)),
            (f"l{i}.ln2_g", (c.d_model,)),
            (f"l{i}.ln2_b", (c.d_model,)),
            (f"l{i}.w1", (c.d_ff, c.d_model)),
            (f"l{i}.b1", (c.d_ff,)),
            (f"l{i}.w2", (c.d_model, c.d_ff)),
            (f"l{i}.b2", (c.d_model,)),
        ]
    shapes += [("ln_f_g", (c.d_model,)), ("ln_f_b", (c.d_model,)), ("w_out", (c.vocab_size, c.d_model))]
    return shapes


def expected_param_count(config: BaseLMConfig) -> int:
    return sum(int(np.prod(s)) for _, s in _param_shapes(config))


def _fresh_weights(config: BaseLMConfig, rng: np.random.Generator) -> dict:
    weights = {}
    for name, shape in _param_shapes(config):
        leaf = name.split(".")[-1]
        if leaf.startswith("ln") or leaf in ("b1", "b2") or name.startswith("ln_f"):
            data = np.ones(shape) if name.endswith("_g") else np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        weights[name] = Tensor(data, requires_grad=True)
    return weights


def forward(
    lm: BaseLM,
    tokens: np.ndarray,
    adapters: Optional["AdapterSet"] = None,
    embed_noise: np.ndarray | None = None,
) -> Tensor:
    """Causal LM logits (batch, seq, vocab); optional LoRA on q/v projections."""
    c = lm.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    bsz, seq = tokens.shape
    if seq > c.max_seq:
        raise ShapeError(f"sequence length {seq} exceeds max_seq {c.max_seq}")
    if tokens.max() >= c.vocab_size or tokens.min() < 0:
        raise IndexError(f"token id out of range for vocab {c.vocab_size}")
    w = lm.weights

    x = gather_rows(w["tok_emb"], tokens) + gather_rows(w["pos_emb"], np.arange(seq))
    if embed_noise is not None:
        x = x + Tensor(embed_noise)

    heads, dk = c.n_heads, c.d_model // c.n_heads
    causal = np.triu(np.full((seq, seq), -1e30), k=1)

    for i in range(c.n_layers):
        h = layer_norm(x, w[f"l{i}.ln1_g"], w[f"l{i}.ln1_b"])
        q = _project(h, w[f"l{i}.q_proj"], adapters, "q_proj", i)
        k = _project(h, w[f"l{i}.k_proj"], None, "k_proj", i)
        v = _project(h, w[f"l{i}.v_proj"], adapters, "v_proj", i)

        q = q.reshape(bsz, seq, heads, dk).permute(0, 2, 1, 3)
        k = k.reshape(bsz, seq, heads, dk).permute(0, 2, 1, 3)
        v = v.reshape(bsz, seq, heads, dk).permute(0, 2, 1, 3)
        scores = matmul(q, k.permute(0, 1, 3, 2)) * (1.0 / math.sqrt(dk)) + Tensor(causal)
        att = matmul(softmax(scores), v)
        att = att.permute(0, 2, 1, 3).reshape(bsz, seq, c.d_model)
        x = x + matmul(att, w[f"l{i}.o_proj"].permute(1, 0))

        h = layer_norm(x, w[f"l{i}.ln2_g"], w[f"l{i}.ln2_b"])
        ff = silu(matmul(h, w[f"l{i}.w1"].permute(1, 0)) + w[f"l{i}.b1"])
        x = x + matmul(ff, w[f"l{i}.w2"].permute(1, 0)) + w[f"l{i}.b2"]

    x = layer_norm(x, w["ln_f_g"], w["ln_f_b"])
    return matmul(x, w["w_out"].permute(1, 0))


def _project(h: Tensor, w0: Tensor, adapters, module: str, layer: int) -> Tensor:
    base = matmul(h, w0.permute(1, 0))
    if adapters is None:
        return base
    pair = adapters.entries.get((module, layer))
    if pair is None:
        return base
    a, b = pair.A, pair.B
    d_in, d_out = w0.shape[1], w0.shape[0]
    if a.shape[-1] != d_in or b.shape[-1] != d_out or a.shape[-2] != b.shape[-2]:
        raise ShapeError(
            f"adapter dims {a.shape}/{b.shape} do not fit ({module}, layer {layer}) "
            f"of size {d_out}x{d_in}"
        )
    if a.ndim == 2:
        low = matmul(h, a.permute(1, 0))
        branch = matmul(low, b)
    elif a.ndim == 3:  # per-example stacked adapters
        low = matmul(h, a.permute(0, 2, 1))
        branch = matmul(low, b)
    else:
        raise ShapeError(f"adapter rank tensors must be 2-d or 3-d, got {a.shape}")
    return base + branch * pair.scaling


def prepare_batch(examples, max_seq: int):
    """Pack (xs, ys) pairs into input/target/mask arrays for the SFT loss."""
    seqs = [list(xs) + [taskgen.SEP] + list(ys) + [taskgen.EOS] for xs, ys in examples]
    width = max(len(s) for s in seqs)
    if width > max_seq + 1:
        raise ShapeError(f"packed example length {width} exceeds max_seq+1 {max_seq + 1}")
    tokens = np.full((len(seqs), width), taskgen.PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width - 1))
    for r, (s, (xs, ys)) in enumerate(zip(seqs, examples)):
        tokens[r, : len(s)] = s
        start = len(xs)  # predictions from the SEP position onward
        mask[r, start : start + len(ys) + 1] = 1.0
    return tokens[:, :-1], tokens[:, 1:], mask


def sft_loss(
    lm: BaseLM,
    batch,
    adapters: Optional["AdapterSet"] = None,
    neftune_alpha: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean masked cross-entropy over completion tokens; base weights stay frozen."""
    inputs, targets, mask = batch
    noise = None
    if neftune_alpha > 0.0:
        if rng is None:
            raise ContractError("neftune noise requires a generator")
        seq, d = inputs.shape[1], lm.config.d_model
        scale = neftune_alpha / math.sqrt(seq * d)
        noise = rng.uniform(-scale, scale, size=(inputs.shape[0], seq, d))
    logits = forward(lm, inputs, adapters, embed_noise=noise)
    vocab = lm.config.vocab_size
    return cross_entropy(
        logits.reshape(-1, vocab), targets.reshape(-1), mask.reshape(-1)
    )


def greedy_decode(
    lm: BaseLM,
    prompts: list,
    adapters: Optional["AdapterSet"] = None,
    max_new: int | None = None,
) -> list:
    """Greedy completions after SEP, stopping per row at EOS. Pure inference."""
    c = lm.config
    out: dict[int, list] = {}
    by_len: dict[int, list] = {}
    for idx, xs in enumerate(prompts):
        by_len.setdefault(len(xs), []).append(idx)
    for plen, idxs in sorted(by_len.items()):
        seqs = np.array(
            [list(prompts[i]) + [taskgen.SEP] for i in idxs], dtype=np.int64
        )
        cap = max_new if max_new is not None else c.max_seq - seqs.shape[1]
        cap = min(cap, c.max_seq - seqs.shape[1])
        done = np.zeros(len(idxs), dtype=bool)
        emitted: list[list[int]] = [[] for _ in idxs]
        for _ in range(cap):
            logits = forward(lm, seqs, adapters).data
            nxt = logits[:, -1, :].argmax(axis=1)
            for r, tok in enumerate(nxt):
                if not done[r]:
                    if tok == taskgen.EOS:
                        done[r] = True
                    else:
                        emitted[r].append(int(tok))
            if done.all():
                break
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        for r, idx in enumerate(idxs):
            out[idx] = emitted[r] if done[r] else None  # None: never terminated
    return [out[i] for i in range(len(prompts))]


_INIT_CACHE: dict = {}


def init_base_lm(config: BaseLMConfig, seed: int, use_cache: bool = True) -> BaseLM:
    """Deterministic frozen model for (config, seed); see module docstring."""
    for m in config.target_modules:
        if m not in ("q_proj", "v_proj"):
            raise ConfigError(f"forward path has no injection point named {m!r}")
        if config.module_dims[m] != (config.d_model, config.d_model):
            raise ConfigError(
                f"runnable models need square {m} dims matching d_model; "
                f"got {config.module_dims[m]} (non-square configs are for counting only)"
            )
    key = (config.canonical(), seed)
    if use_cache and key in _INIT_CACHE:
        return _INIT_CACHE[key]

    rng = np.random.default_rng(seed)
    weights = _fresh_weights(config, rng)
    params = list(weights.values())
    opt = Adam(params)
    lm = BaseLM(config, weights)
    total = config.pretrain_steps
    warm = max(1, int(0.05 * total))
    for step in range(total):
        examples = taskgen.pretrain_mixture_batch(rng, config.pretrain_batch)
        batch = prepare_batch(examples, config.max_seq)
        loss = sft_loss(lm, batch)
        opt.zero_grad()
        backward(loss)
        clip_global_norm(params, 1.0)
        frac = step / warm if step < warm else (total - step) / (total - warm)
        opt.step(config.pretrain_lr * max(frac, 0.02))
    for p in params:
        p.requires_grad = False
        p.grad = None

    if use_cache:
        _INIT_CACHE[key] = lm
    return lm
