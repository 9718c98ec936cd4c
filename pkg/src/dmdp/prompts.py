"""Gated, modality-disentangled deep prompts on a frozen dual encoder.

A :class:`PromptBank` holds every trainable tensor.  :func:`dmdp_forward`
runs one batch through both towers:

1. prompt-free frozen embeddings give the per-sample modality weight ``r``;
2. the gate ``g = tanh(tau)`` scales the first-layer text prompts;
3. first-layer prompts are ``r * g * P_T0`` (text) and
   ``(1 - r) * H_0(g * P_T0)`` (vision);
4. before text layer ``i`` (``1 <= i < S``) the outgoing prompt rows are
   rescaled by sharing tokens, and the vision prompt rows are replaced by
   ``H_i`` of those text rows times the vision sharing tokens;
5. deeper layers carry prompt rows untouched; the class/eos poolings are
   concatenated into a linear classifier.

The ablation variants reuse the same schedule with one piece swapped out.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import DualEncoderParams, EncoderConfig, text_forward, vision_forward
from .errors import ConfigurationError, ContractViolation, DepthError


class Variant(str, enum.Enum):
    DMDP = "DMDP"
    UPT = "UPT"
    IPT = "IPT"
    NO_GATE = "NO_GATE"
    NO_WEIGHTMOD = "NO_WEIGHTMOD"
    V_TO_T = "V_TO_T"


@dataclass(frozen=True)
class PromptConfig:
    c: int = 2
    S: int = 9
    variant: Variant = Variant.DMDP
    gate_prior_init: float = 0.5
    init_std: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))

    def capped(self, L: int) -> "PromptConfig":
        return replace(self, S=min(self.S, L))

    def validate(self, enc: EncoderConfig) -> "PromptConfig":
        if self.c < 1:
            raise ConfigurationError(f"prompt.c must be >= 1, got {self.c}")
        if self.S < 1:
            raise ConfigurationError(f"prompt.S must be >= 1, got {self.S}")
        if self.S > enc.L:
            raise DepthError(f"prompt.S={self.S} exceeds encoder depth L={enc.L}")
        if self.variant is Variant.UPT and enc.d_t != enc.d_v:
            raise ConfigurationError(f"UPT needs d_t == d_v, got d_t={enc.d_t}, d_v={enc.d_v}")
        if self.c > enc.pos_reserve:
            raise ConfigurationError(f"prompt.c={self.c} exceeds encoder.pos_reserve={enc.pos_reserve}")
        return self


def bank_shapes(cfg: PromptConfig, enc: EncoderConfig) -> dict[str, tuple[int, ...]]:
    c, S, dt, dv, d = cfg.c, cfg.S, enc.d_t, enc.d_v, enc.d
    v = cfg.variant
    shapes: dict[str, tuple[int, ...]] = {}
    if v is Variant.UPT:
        shapes["P0"] = (c, dt)
        for i in range(1, S):
            shapes[f"share.{i}"] = (c, dt)
    else:
        if v is not Variant.V_TO_T:
            shapes["P_T0"] = (c, dt)
        if v in (Variant.IPT, Variant.V_TO_T):
            shapes["P_V0"] = (c, dv)
        for i in range(1, S):
            shapes[f"share_T.{i}"] = (c, dt)
        for i in range(1, S):
            shapes[f"share_V.{i}"] = (c, dv)
        if v is Variant.V_TO_T:
            for i in range(S):
                shapes[f"Hr.{i}.w"] = (dv, dt)
                shapes[f"Hr.{i}.b"] = (dt,)
        elif v is not Variant.IPT:
            for i in range(S):
                shapes[f"H.{i}.w"] = (dt, dv)
                shapes[f"H.{i}.b"] = (dv,)
    if v is not Variant.NO_GATE:
        shapes["tau"] = (1,)
    if v is not Variant.NO_WEIGHTMOD:
        shapes["weightmod.w"] = (2 * d,)
        shapes["weightmod.b"] = (1,)
    shapes["classifier.w"] = (2 * d, 2)
    shapes["classifier.b"] = (2,)
    return shapes


@dataclass
class PromptBank:
    config: PromptConfig
    enc: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def leaves(self) -> list[Tensor]:
        return list(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def clone(self) -> "PromptBank":
        return PromptBank(self.config, self.enc, {
            k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name) for k, t in self.tensors.items()
        })

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "bank.") -> None:
        for k, t in self.tensors.items():
            key = prefix + k
            if key not in arrays:
                raise ConfigurationError(f"checkpoint lacks {key} required by variant {self.config.variant.value}")
            if arrays[key].shape != t.shape:
                raise ConfigurationError(f"{key}: shape {arrays[key].shape} != {t.shape}")
            t.data[...] = arrays[key]
        extra = sorted(k for k in arrays if k.startswith(prefix) and k[len(prefix):] not in self.tensors)
        if extra:
            raise ConfigurationError(f"checkpoint has leaves {extra} not used by variant {self.config.variant.value}")

    @classmethod
    def init(cls, cfg: PromptConfig, enc: EncoderConfig, seed: int = 0) -> "PromptBank":
        cfg.validate(enc)
        rng = np.random.default_rng([seed, 7])
        tensors = {}
        for name, shape in bank_shapes(cfg, enc).items():
            head = name.split(".")[0]
            if name == "tau":
                data = np.full(shape, float(cfg.gate_prior_init))
            elif head in ("P0", "P_T0", "P_V0"):
                data = rng.normal(0.0, cfg.init_std, size=shape)
            elif head in ("share", "share_T", "share_V"):
                # centred on the multiplicative identity so carried prompts survive at init
                data = 1.0 + rng.normal(0.0, cfg.init_std, size=shape)
            else:
                fan_in = shape[0] if len(shape) == 2 or name.endswith(".w") else _bias_fan_in(name, enc)
                bound = 1.0 / math.sqrt(fan_in)
                data = rng.uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(cfg, enc, tensors)


def _bias_fan_in(name: str, enc: EncoderConfig) -> int:
    if name.startswith("H."):
        return enc.d_t
    if name.startswith("Hr."):
        return enc.d_v
    return 2 * enc.d


# ----------------------------------------------------------------------------
# building blocks


def gate_value(tau: Tensor) -> Tensor:
    """``g = (e^tau - e^-tau) / (e^tau + e^-tau)``, i.e. ``tanh(tau)``."""
    return ad.tanh(tau)


def modality_weight(bank: PromptBank, i_frozen, t_frozen) -> Tensor:
    """Per-sample ``r = sigmoid(w . [i~ || t~] + b)`` from prompt-free embeddings."""
    i_frozen = np.atleast_2d(np.asarray(i_frozen, dtype=np.float64))
    t_frozen = np.atleast_2d(np.asarray(t_frozen, dtype=np.float64))
    w = bank["weightmod.w"]
    if i_frozen.shape != t_frozen.shape or i_frozen.shape[1] * 2 != w.shape[0]:
        raise ContractViolation(
            f"modality_weight: embeddings {i_frozen.shape}/{t_frozen.shape} vs weights {w.shape}"
        )
    x = Tensor(np.concatenate([i_frozen, t_frozen], axis=1))
    return ad.sigmoid(x @ w.reshape(w.shape[0], 1) + bank["weightmod.b"]).reshape(x.shape[0])


def share_prompts(carried: Tensor, share_tokens: Tensor) -> Tensor:
    """Elementwise rescaling of carried prompt rows by sharing tokens."""
    if carried.shape[-2:] != share_tokens.shape:
        raise ContractViolation(f"share_prompts: carried {carried.shape} vs share tokens {share_tokens.shape}")
    return carried * share_tokens


def project_prompts(weight: Tensor, bias: Tensor, text_prompts: Tensor) -> Tensor:
    """Row-wise affine map ``x @ W + b`` from one tower's width to the other's."""
    if text_prompts.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ContractViolation(f"project_prompts: rows {text_prompts.shape} vs map {weight.shape}/{bias.shape}")
    return ad.affine_rows(text_prompts, weight, bias)


def _per_sample(r: Tensor) -> Tensor:
    return r.reshape(r.shape[0], 1, 1)


def first_layer_prompts(bank: PromptBank, g: Tensor | None, r: Tensor) -> tuple[Tensor, Tensor]:
    """First-layer prompt rows ``(Q_T0, Q_V0)``, each ``(B, c, width)``.

    Gate first, then project, then modality-weight.  ``g=None`` means an
    ungated variant; ``r`` is a ``(B,)`` tensor.
    """
    v = bank.config.variant
    rr = _per_sample(r)
    one_minus = 1.0 - rr

    def gated(p: Tensor) -> Tensor:
        return p if g is None else p * g

    if v is Variant.UPT:
        gp = gated(bank["P0"])
        return gp * rr, gp * one_minus
    if v is Variant.IPT:
        return gated(bank["P_T0"]) * rr, gated(bank["P_V0"]) * one_minus
    if v is Variant.V_TO_T:
        gp = gated(bank["P_V0"])
        return project_prompts(bank["Hr.0.w"], bank["Hr.0.b"], gp) * rr, gp * one_minus
    gp = gated(bank["P_T0"])
    return gp * rr, project_prompts(bank["H.0.w"], bank["H.0.b"], gp) * one_minus


# ----------------------------------------------------------------------------
# full forward


@dataclass
class ForwardResult:
    logits: Tensor
    r: np.ndarray
    g: float
    image_embedding: Tensor
    text_embedding: Tensor
    vision_attention: np.ndarray
    text_attention: np.ndarray
    n_prompts: int


def frozen_features(frozen: DualEncoderParams, images, ids, eos) -> tuple[np.ndarray, np.ndarray]:
    """Prompt-free embeddings ``(i~, t~)`` as arrays."""
    return vision_forward(frozen, images).embedding.data, text_forward(frozen, ids, eos).embedding.data


def _check_bank(bank: PromptBank, cfg: PromptConfig, enc: EncoderConfig) -> None:
    if cfg.S > enc.L:
        raise DepthError(f"prompt depth S={cfg.S} exceeds encoder depth L={enc.L}")
    if bank.config.variant is not cfg.variant or bank.config.c != cfg.c or bank.config.S != cfg.S:
        raise ConfigurationError(
            f"bank built for {bank.config.variant.value} (c={bank.config.c}, S={bank.config.S}) "
            f"used with {cfg.variant.value} (c={cfg.c}, S={cfg.S})"
        )
    if set(bank.tensors) != set(bank_shapes(cfg, enc)):
        raise ConfigurationError(f"bank leaves do not match variant {cfg.variant.value}")


def dmdp_forward(frozen: DualEncoderParams, bank: PromptBank, cfg: PromptConfig, images, ids, eos,
                 features: tuple[np.ndarray, np.ndarray] | None = None) -> ForwardResult:
    """Logits ``(B, 2)`` for a batch; ``features`` may carry cached ``(i~, t~)``."""
    enc = frozen.config
    _check_bank(bank, cfg, enc)
    v, S = cfg.variant, cfg.S
    B = len(ids)

    if "tau" in bank:
        g = gate_value(bank["tau"])
        g_val = float(g.data[0])
    else:
        g, g_val = None, 1.0
    if "weightmod.w" in bank:
        i_t, t_t = features if features is not None else frozen_features(frozen, images, ids, eos)
        r = modality_weight(bank, i_t, t_t)
    else:
        r = Tensor(np.full(B, 0.5))
    q_t0, q_v0 = first_layer_prompts(bank, g, r)

    if v is Variant.V_TO_T:
        carried: dict[int, Tensor] = {}
        v_plan = [q_v0] + [_sharer(bank["share_V." + str(i)], carried, i) for i in range(1, S)]
        vis = vision_forward(frozen, images, v_plan)
        t_plan = [q_t0] + [
            project_prompts(bank[f"Hr.{i}.w"], bank[f"Hr.{i}.b"], carried[i]) * bank[f"share_T.{i}"]
            for i in range(1, S)
        ]
        txt = text_forward(frozen, ids, eos, t_plan)
    elif v in (Variant.IPT, Variant.UPT):
        st = "share." if v is Variant.UPT else "share_T."
        sv = "share." if v is Variant.UPT else "share_V."
        txt = text_forward(frozen, ids, eos, [q_t0] + [_sharer(bank[st + str(i)]) for i in range(1, S)])
        vis = vision_forward(frozen, images, [q_v0] + [_sharer(bank[sv + str(i)]) for i in range(1, S)])
    else:
        carried = {}
        t_plan = [q_t0] + [_sharer(bank["share_T." + str(i)], carried, i) for i in range(1, S)]
        txt = text_forward(frozen, ids, eos, t_plan)
        v_plan = [q_v0] + [
            project_prompts(bank[f"H.{i}.w"], bank[f"H.{i}.b"], carried[i]) * bank[f"share_V.{i}"]
            for i in range(1, S)
        ]
        vis = vision_forward(frozen, images, v_plan)

    feats = ad.concat([vis.embedding, txt.embedding], axis=-1)
    logits = feats @ bank["classifier.w"] + bank["classifier.b"]
    return ForwardResult(logits, r.data.copy(), g_val, vis.embedding, txt.embedding,
                         vis.last_attention, txt.last_attention, cfg.c)


def _sharer(tokens: Tensor, record: dict | None = None, layer: int | None = None):
    def apply(cur: Tensor) -> Tensor:
        out = share_prompts(cur, tokens)
        if record is not None:
            record[layer] = out
        return out

    return apply


def variant_forward(variant: Variant | str, frozen: DualEncoderParams, bank: PromptBank, cfg: PromptConfig,
                    images, ids, eos, features=None) -> Tensor:
    """Logits for an explicitly named variant; the bank must match it."""
    cfg = replace(cfg, variant=Variant(variant))
    return dmdp_forward(frozen, bank, cfg, images, ids, eos, features).logits
