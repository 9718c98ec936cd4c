"""CLIP-style dual encoder: a ViT with a class token and a causal text transformer.

Both towers are pre-LayerNorm transformers.  The vision tower pools the class
token, the text tower pools the end-of-sequence position; each applies a
final LayerNorm and a linear projection into the shared embedding space.

Prompt injection is driven by a *plan*: a sequence indexed by layer whose
entry 0 holds the initial prompt rows (``(B, c, width)`` or ``(c, width)``)
and whose later entries either replace the prompt rows entering that layer
(a Tensor), transform the current prompt rows (a callable), or leave them
alone (``None``).  Text prompts are prepended, vision prompts appended, and
prompt rows never receive positional embeddings.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .errors import (
    ConfigurationError,
    ContractViolation,
    DegenerateContrastiveError,
    DepthError,
    FrozenParameterError,
)
from .optim import Adam

PlanEntry = Union[Tensor, Callable[[Tensor], Tensor], None]


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 8
    patch_size: int = 4
    channels: int = 1
    vocab_size: int = 48
    max_text_len: int = 8
    d_v: int = 16
    d_t: int = 16
    d: int = 16
    L: int = 4
    heads: int = 2
    mlp_ratio: int = 2
    pos_reserve: int = 8

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def m(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    def validate(self) -> "EncoderConfig":
        for name, value in asdict(self).items():
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigurationError(f"encoder.{name} must be an integer, got {value!r}")
            if value < (0 if name == "pos_reserve" else 1):
                raise ConfigurationError(f"encoder.{name} must be positive, got {value}")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"encoder.image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        for name in ("d_v", "d_t"):
            if getattr(self, name) % self.heads:
                raise ConfigurationError(f"encoder.{name} must be divisible by heads={self.heads}")
        if self.vocab_size < 3:
            raise ConfigurationError("encoder.vocab_size must cover <pad>, <unk>, <eos>")
        return self


def _block_shapes(width: int, mlp_ratio: int) -> dict[str, tuple[int, ...]]:
    hidden = width * mlp_ratio
    return {
        "ln1.g": (width,),
        "ln1.b": (width,),
        "attn.w_qkv": (width, 3 * width),
        "attn.b_qkv": (3 * width,),
        "attn.w_out": (width, width),
        "attn.b_out": (width,),
        "ln2.g": (width,),
        "ln2.b": (width,),
        "mlp.w1": (width, hidden),
        "mlp.b1": (hidden,),
        "mlp.w2": (hidden, width),
        "mlp.b2": (width,),
    }


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "vision.patch_embed.w": (cfg.patch_dim, cfg.d_v),
        "vision.patch_embed.b": (cfg.d_v,),
        "vision.class_token": (cfg.d_v,),
        "vision.pos": (cfg.m + 1 + cfg.pos_reserve, cfg.d_v),
    }
    for i in range(cfg.L):
        for k, s in _block_shapes(cfg.d_v, cfg.mlp_ratio).items():
            shapes[f"vision.layers.{i}.{k}"] = s
    shapes.update({
        "vision.ln_post.g": (cfg.d_v,),
        "vision.ln_post.b": (cfg.d_v,),
        "vision.proj": (cfg.d_v, cfg.d),
        "text.word_embed": (cfg.vocab_size, cfg.d_t),
        "text.pos": (cfg.max_text_len + cfg.pos_reserve, cfg.d_t),
    })
    for i in range(cfg.L):
        for k, s in _block_shapes(cfg.d_t, cfg.mlp_ratio).items():
            shapes[f"text.layers.{i}.{k}"] = s
    shapes.update({
        "text.ln_final.g": (cfg.d_t,),
        "text.ln_final.b": (cfg.d_t,),
        "text.proj": (cfg.d_t, cfg.d),
        "logit_scale": (1,),
    })
    return shapes


def _fan_in(name: str, shape: tuple[int, ...], shapes: dict[str, tuple[int, ...]]) -> int:
    if len(shape) == 2:
        return shape[0]
    # a bias shares the fan-in of its weight
    stem, _, leaf = name.rpartition(".")
    weight = {"b_qkv": "w_qkv", "b_out": "w_out", "b1": "w1", "b2": "w2", "b": "w"}.get(leaf)
    return shapes[f"{stem}.{weight}"][0]


@dataclass
class DualEncoderParams:
    config: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)
    frozen: bool = False

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def leaves(self) -> list[Tensor]:
        return list(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    @classmethod
    def init(cls, cfg: EncoderConfig, seed: int = 0, requires_grad: bool = True) -> "DualEncoderParams":
        cfg.validate()
        rng = np.random.default_rng(seed)
        shapes = param_shapes(cfg)
        tensors = {}
        for name, shape in shapes.items():
            leaf = name.rsplit(".", 1)[-1]
            if name == "logit_scale":
                data = np.full(shape, math.log(1 / 0.07))
            elif leaf == "g" and ".ln" in name:
                data = np.ones(shape)
            elif leaf == "b" and ".ln" in name:
                data = np.zeros(shape)
            elif name.endswith(("class_token", ".pos", "word_embed")):
                data = rng.normal(0.0, 0.02, size=shape)
            else:
                bound = 1.0 / math.sqrt(_fan_in(name, shape, shapes))
                data = rng.uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(data, requires_grad=requires_grad, name=name)
        return cls(cfg, tensors)

    @classmethod
    def from_arrays(cls, cfg: EncoderConfig, arrays: dict[str, np.ndarray], prefix: str = "") -> "DualEncoderParams":
        cfg.validate()
        tensors = {}
        for name, shape in param_shapes(cfg).items():
            key = prefix + name
            if key not in arrays:
                raise ContractViolation(f"checkpoint is missing {key}")
            if arrays[key].shape != shape:
                raise ContractViolation(f"{key}: checkpoint shape {arrays[key].shape} != expected {shape}")
            tensors[name] = Tensor(arrays[key], name=name)
        return cls(cfg, tensors)


def freeze(params: DualEncoderParams) -> DualEncoderParams:
    """Freeze every backbone leaf in place; the returned handle is ``params``."""
    for t in params.tensors.values():
        t.freeze()
    params.frozen = True
    return params


def fingerprint(params: DualEncoderParams) -> str:
    return checkpoint.digest(params.arrays())


def save_params(params: DualEncoderParams, path, prefix: str = "") -> None:
    checkpoint.save(path, {prefix + k: v for k, v in params.arrays().items()})


def load_params(cfg: EncoderConfig, path, prefix: str = "") -> DualEncoderParams:
    return DualEncoderParams.from_arrays(cfg, checkpoint.load(path), prefix)


# ----------------------------------------------------------------------------
# transformer pieces


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ w
    return y if b is None else y + b


def _attention(x: Tensor, P: dict[str, Tensor], pre: str, heads: int, mask) -> tuple[Tensor, np.ndarray]:
    B, n, width = x.shape
    dh = width // heads
    qkv = _linear(x, P[pre + "attn.w_qkv"], P[pre + "attn.b_qkv"])
    qkv = qkv.reshape(B, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    probs = ad.softmax_last_axis_masked(scores, mask)
    out = (probs @ v).transpose(0, 2, 1, 3).reshape(B, n, width)
    return _linear(out, P[pre + "attn.w_out"], P[pre + "attn.b_out"]), probs.data


def _block(x: Tensor, P: dict[str, Tensor], pre: str, heads: int, mask) -> tuple[Tensor, np.ndarray]:
    h, attn = _attention(ad.layernorm(x, P[pre + "ln1.g"], P[pre + "ln1.b"]), P, pre, heads, mask)
    x = x + h
    hid = ad.gelu(_linear(ad.layernorm(x, P[pre + "ln2.g"], P[pre + "ln2.b"]), P[pre + "mlp.w1"], P[pre + "mlp.b1"]))
    x = x + _linear(hid, P[pre + "mlp.w2"], P[pre + "mlp.b2"])
    return x, attn


@dataclass
class EncoderOutput:
    embedding: Tensor  # (B, d)
    layer_trace: list[Tensor]  # per-layer token states, entry 0 is the input sequence
    last_attention: np.ndarray  # (B, heads, T, T) from the final layer
    n_prompts: int
    prompt_inputs: list[Tensor]  # prompt rows entering each layer that had an injection


def _batch_prompts(p: Tensor, B: int) -> Tensor:
    if p.ndim == 2:
        return ad.expand(p, (B,) + p.shape)
    if p.ndim != 3 or p.shape[0] != B:
        raise ContractViolation(f"prompt rows of shape {p.shape} do not match batch {B}")
    return p


def _check_plan(plan: Sequence[PlanEntry] | None, L: int, width: int) -> int:
    if not plan:
        return 0
    if len(plan) > L:
        raise DepthError(f"prompt plan has {len(plan)} injection layers but encoder has L={L}")
    first = plan[0]
    if first is None:
        if any(p is not None for p in plan[1:]):
            raise ContractViolation("prompt plan injects at depth > 0 without initial prompts")
        return 0
    if not isinstance(first, Tensor):
        raise ContractViolation("prompt plan entry 0 must be a Tensor")
    if first.shape[-1] != width:
        raise ContractViolation(f"prompt width {first.shape[-1]} != encoder width {width}")
    return first.shape[-2]


def _run_tower(x, P, pre, cfg, plan, c, prompt_slice, mask):
    trace = [x]
    injected = []
    attn = None
    for i in range(cfg.L):
        entry = plan[i] if plan and i < len(plan) else None
        if i > 0 and entry is not None:
            cur = x[prompt_slice]
            new = entry(cur) if callable(entry) and not isinstance(entry, Tensor) else _batch_prompts(entry, x.shape[0])
            if new.shape != cur.shape:
                raise ContractViolation(f"layer {i} prompt rows {new.shape} != {cur.shape}")
            x = _replace_prompts(x, new, prompt_slice)
            injected.append(new)
        x, attn = _block(x, P, f"{pre}.layers.{i}.", cfg.heads, mask)
        trace.append(x)
    return x, trace, attn, injected


def _replace_prompts(x: Tensor, new: Tensor, prompt_slice) -> Tensor:
    sl = prompt_slice[1]
    if sl.start == 0:
        return ad.concat([new, x[:, sl.stop :]], axis=1)
    # vision prompts sit at the tail of the sequence
    return ad.concat([x[:, : sl.start], new], axis=1)


# ----------------------------------------------------------------------------
# vision tower


def patchify(images, cfg: EncoderConfig) -> np.ndarray:
    """Integer pixel grids ``(B, H, W[, C])`` in 0..255 -> ``(B, m, patch_dim)`` floats."""
    x = np.asarray(images, dtype=np.float64)
    if cfg.channels == 1 and x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or x.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ContractViolation(
            f"image batch shape {np.shape(images)} does not match "
            f"{cfg.image_size}x{cfg.image_size}x{cfg.channels}"
        )
    B, g, p = x.shape[0], cfg.grid, cfg.patch_size
    x = x.reshape(B, g, p, g, p, cfg.channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * g, cfg.patch_dim) / 255.0


def vision_forward(params: DualEncoderParams, images, plan: Sequence[PlanEntry] | None = None) -> EncoderOutput:
    """Batched image encoder; ``images`` is ``(B, H, W)`` (or with channels)."""
    cfg, P = params.config, params.tensors
    patches = Tensor(patchify(images, cfg))
    B, m = patches.shape[0], cfg.m
    c = _check_plan(plan, cfg.L, cfg.d_v)
    pos = P["vision.pos"]
    E = _linear(patches, P["vision.patch_embed.w"], P["vision.patch_embed.b"]) + pos[1 : m + 1]
    z = ad.expand((P["vision.class_token"] + pos[0]).reshape(1, 1, cfg.d_v), (B, 1, cfg.d_v))
    parts = [z, E]
    if c:
        parts.append(_batch_prompts(plan[0], B))
    x = ad.concat(parts, axis=1)
    sl = (slice(None), slice(1 + m, 1 + m + c))
    x, trace, attn, injected = _run_tower(x, P, "vision", cfg, plan, c, sl, None)
    pooled = ad.layernorm(x[:, 0], P["vision.ln_post.g"], P["vision.ln_post.b"])
    emb = pooled @ P["vision.proj"]
    return EncoderOutput(emb, trace, attn, c, ([plan[0]] if c else []) + injected)


def encode_image(params: DualEncoderParams, image, injected_prompts: Sequence[PlanEntry] | None = None):
    """Single image -> (embedding ``(d,)``, layer trace, final-layer attention)."""
    out = vision_forward(params, np.asarray(image)[None], injected_prompts)
    return out.embedding[0], [t[0] for t in out.layer_trace], out.last_attention[0]


# ----------------------------------------------------------------------------
# text tower


def _causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=np.int8))


def text_forward(params: DualEncoderParams, ids, eos_index, plan: Sequence[PlanEntry] | None = None) -> EncoderOutput:
    """Batched text encoder over token ids ``(B, n)`` with per-row ``eos_index``."""
    cfg, P = params.config, params.tensors
    ids = np.asarray(ids, dtype=np.int64)
    eos = np.asarray(eos_index, dtype=np.int64).reshape(-1)
    if ids.ndim != 2 or ids.shape[1] > cfg.max_text_len:
        raise ContractViolation(f"token batch shape {ids.shape} exceeds max_text_len={cfg.max_text_len}")
    B, n = ids.shape
    if eos.shape != (B,) or np.any(eos < 0) or np.any(eos >= n):
        raise ContractViolation(f"eos_index {eos.tolist()} out of range for length {n}")
    c = _check_plan(plan, cfg.L, cfg.d_t)
    W = ad.embedding_lookup(P["text.word_embed"], ids) + P["text.pos"][:n]
    x = ad.concat([_batch_prompts(plan[0], B), W], axis=1) if c else W
    mask = _causal_mask(c + n)
    sl = (slice(None), slice(0, c))
    x, trace, attn, injected = _run_tower(x, P, "text", cfg, plan, c, sl, mask)
    pooled = x[np.arange(B), c + eos]
    pooled = ad.layernorm(pooled, P["text.ln_final.g"], P["text.ln_final.b"])
    emb = pooled @ P["text.proj"]
    return EncoderOutput(emb, trace, attn, c, ([plan[0]] if c else []) + injected)


def encode_text(params: DualEncoderParams, tokens, injected_prompts: Sequence[PlanEntry] | None = None):
    """Single :class:`~dmdp.data.TokenSeq` -> (embedding, layer trace, final-layer attention)."""
    out = text_forward(params, [tokens.ids], [tokens.eos_index], injected_prompts)
    return out.embedding[0], [t[0] for t in out.layer_trace], out.last_attention[0]


# ----------------------------------------------------------------------------
# contrastive pretraining


def contrastive_loss(sim_logits: Tensor) -> Tensor:
    """Symmetric cross-entropy over a ``(B, B)`` image-text logit matrix."""
    if sim_logits.ndim != 2 or sim_logits.shape[0] != sim_logits.shape[1]:
        raise ContractViolation(f"similarity matrix must be square, got {sim_logits.shape}")
    B = sim_logits.shape[0]
    if B < 2:
        raise DegenerateContrastiveError("contrastive loss needs a batch of at least 2")
    labels = np.arange(B)
    return (ad.cross_entropy_with_logits(sim_logits, labels)
            + ad.cross_entropy_with_logits(sim_logits.transpose(1, 0), labels)) * 0.5


def contrastive_sample_losses(sim: np.ndarray) -> np.ndarray:
    """Per-pair symmetric loss; its mean equals :func:`contrastive_loss`."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.shape[0] < 2:
        raise DegenerateContrastiveError("contrastive loss needs a batch of at least 2")

    def nll(z):
        z = z - z.max(axis=1, keepdims=True)
        return np.log(np.exp(z).sum(axis=1)) - np.diag(z)

    return 0.5 * (nll(sim) + nll(sim.T))


def similarity_logits(params: DualEncoderParams, img_emb: Tensor, txt_emb: Tensor) -> Tensor:
    """Cosine similarities scaled by ``exp(logit_scale)``."""
    sims = ad.l2_normalize(img_emb) @ ad.l2_normalize(txt_emb).transpose(1, 0)
    return sims * ad.exp(params["logit_scale"])


@dataclass
class PretrainResult:
    params: DualEncoderParams
    loss_curve: list[float]


def contrastive_pretrain(
    params: DualEncoderParams,
    pairs,
    epochs: int = 50,
    lr: float = 3e-3,
    seed: int = 0,
    batch_size: int = 16,
) -> PretrainResult:
    """Fit the backbone to aligned image-text pairs with a CLIP-style loss.

    ``pairs`` needs ``images``, ``token_ids`` and ``eos_index`` arrays of equal
    length.  Returns the (mutated) params and the mean loss of each epoch.
    """
    if params.frozen:
        raise FrozenParameterError("cannot pretrain a frozen backbone")
    N = len(pairs.images)
    if N == 0:
        raise ContractViolation("contrastive_pretrain: empty corpus")
    if batch_size < 2 or N < 2:
        raise DegenerateContrastiveError("contrastive pretraining needs batches of at least 2 pairs")
    leaves = params.leaves()
    for t in leaves:
        t.requires_grad = True
    opt = Adam(leaves)
    rng = np.random.default_rng(seed)
    images = np.asarray(pairs.images)
    ids = np.asarray(pairs.token_ids)
    eos = np.asarray(pairs.eos_index)
    curve = []
    total = epochs * max(1, N // batch_size)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(N)
        losses = []
        for s in range(0, N - 1, batch_size):
            idx = order[s : s + batch_size]
            if len(idx) < 2:
                continue
            opt.zero_grad()
            img = vision_forward(params, images[idx]).embedding
            txt = text_forward(params, ids[idx], eos[idx]).embedding
            loss = contrastive_loss(similarity_logits(params, img, txt))
            ad.backward(loss)
            opt.step(lr * 0.5 * (1 + math.cos(math.pi * min(step, total) / total)))
            params["logit_scale"].data[:] = np.clip(params["logit_scale"].data, 0.0, math.log(100.0))
            losses.append(loss.item())
            step += 1
        curve.append(float(np.mean(losses)))
    return PretrainResult(params, curve)


def embed_pairs(params: DualEncoderParams, images, ids, eos, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Prompt-free image and text embeddings as plain arrays."""
    imgs, txts = [], []
    for s in range(0, len(images), batch_size):
        imgs.append(vision_forward(params, images[s : s + batch_size]).embedding.data)
        txts.append(text_forward(params, ids[s : s + batch_size], eos[s : s + batch_size]).embedding.data)
    return np.concatenate(imgs), np.concatenate(txts)


def retrieval_at_1(params: DualEncoderParams, pairs) -> float:
    """Image-to-text top-1 retrieval; a hit is a retrieved text with the same content key."""
    img, txt = embed_pairs(params, np.asarray(pairs.images), np.asarray(pairs.token_ids), np.asarray(pairs.eos_index))
    img /= np.linalg.norm(img, axis=1, keepdims=True)
    txt /= np.linalg.norm(txt, axis=1, keepdims=True)
    best = np.argmax(img @ txt.T, axis=1)
    keys = np.asarray(pairs.keys)
    return float(np.mean(keys[best] == keys))
