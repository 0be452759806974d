"""Code encoder, projector and LoRA-adapted causal decoder, plus the chat template.

Shape chain for one sample: code ids (T1,) -> encoder features (T1, d)
-> projector (T1, k) -> spliced into the text embeddings at the CODE_SLOT
position -> decoder over T1 + T2 - 1 positions. The public ``encode_code``
and ``project`` helpers return the column-major (d, T1) / (k, T1) layout.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContextOverflowError, DimensionError, InputError, RenderError
from .layers import Block, LayerNorm, Linear, Module
from .numerics import Parameter, Tensor
from .tokenizer import Tokenizer

STAGES = ("pretrain", "finetune")
CODE_MODES = ("encoder", "inline")
ATTN_TARGETS = ("wq", "wk", "wv", "wo")


@dataclass
class ModelConfig:
    vocab_size: int = 512
    enc_dim: int = 64
    enc_layers: int = 2
    enc_heads: int = 4
    llm_dim: int = 128
    proj_hidden: int = 256
    dec_layers: int = 4
    dec_heads: int = 4
    context_length: int = 512
    max_code_tokens: int = 1000
    feature_layer: int = -2
    mlp_ratio: int = 4
    lora_rank: int = 16
    lora_alpha: float = 16.0
    code_mode: str = "encoder"
    init_std: float = 0.02
    head_init_std: float = 0.1
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.code_mode not in CODE_MODES:
            raise ConfigError(f"code_mode must be one of {CODE_MODES}")
        if not -self.enc_layers <= self.feature_layer <= -1:
            raise ConfigError(f"feature_layer {self.feature_layer} outside [-{self.enc_layers}, -1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Projector, context and LoRA sizes of the full-size 7B setup."""
        base = dict(proj_hidden=4096, context_length=2048, lora_rank=64, lora_alpha=64.0, max_code_tokens=1000)
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------- components


class CodeEncoder(Module):
    """Bidirectional transformer over code tokens."""

    def __init__(self, cfg: ModelConfig, rng):
        dt = np.dtype(cfg.dtype)
        d = cfg.enc_dim
        self.tok_emb = Parameter((rng.standard_normal((cfg.vocab_size, d)) * cfg.init_std).astype(dt))
        self.pos_emb = Parameter((rng.standard_normal((cfg.max_code_tokens, d)) * cfg.init_std).astype(dt))
        self.blocks = [Block(d, cfg.enc_heads, rng, dt, causal=False, mlp_ratio=cfg.mlp_ratio, std=cfg.init_std)
                       for _ in range(cfg.enc_layers)]
        self._feature_block = cfg.enc_layers + cfg.feature_layer

    @property
    def capacity(self) -> int:
        return self.pos_emb.shape[0]

    def hidden_states(self, ids, mask, n_blocks: int | None = None) -> list[Tensor]:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids, mask = ids[None], np.ones((1, ids.shape[0]), dtype=bool)
        t = ids.shape[1]
        if t == 0:
            raise InputError("empty code sequence")
        if t > self.pos_emb.shape[0]:
            raise DimensionError(f"{t} code tokens exceed encoder capacity {self.pos_emb.shape[0]}")
        x = nx.add(nx.embedding_lookup(self.tok_emb, ids), nx.embedding_lookup(self.pos_emb, np.arange(t)))
        states = []
        for block in self.blocks[: len(self.blocks) if n_blocks is None else n_blocks]:
            x = block(x, key_mask=mask)
            states.append(x)
        return states

    def features(self, ids, mask) -> Tensor:
        """Hidden states of the configured feature block, (B, T1, d)."""
        return self.hidden_states(ids, mask, self._feature_block + 1)[self._feature_block]

    def final(self, ids, mask) -> Tensor:
        return self.hidden_states(ids, mask)[-1]


class Projector(Module):
    """Two affine maps with GELU between them, applied column-wise."""

    def __init__(self, cfg: ModelConfig, rng):
        dt = np.dtype(cfg.dtype)
        self.fc1 = Linear(cfg.enc_dim, cfg.proj_hidden, rng, dt, std=cfg.init_std)
        self.fc2 = Linear(cfg.proj_hidden, cfg.llm_dim, rng, dt, std=cfg.init_std)

    def __call__(self, z: Tensor) -> Tensor:
        return self.fc2(nx.gelu(self.fc1(z)))


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        dt = np.dtype(cfg.dtype)
        k = cfg.llm_dim
        self.tok_emb = Parameter((rng.standard_normal((cfg.vocab_size, k)) * cfg.init_std).astype(dt))
        self.pos_emb = Parameter((rng.standard_normal((cfg.context_length, k)) * cfg.init_std).astype(dt))
        self.blocks = [Block(k, cfg.dec_heads, rng, dt, causal=True, mlp_ratio=cfg.mlp_ratio, std=cfg.init_std)
                       for _ in range(cfg.dec_layers)]
        self.ln_f = LayerNorm(k, dt)
        self.lm_head = Linear(k, cfg.vocab_size, rng, dt, bias=False, std=cfg.head_init_std)

    def __call__(self, h: Tensor, key_mask=None) -> Tensor:
        t = h.shape[1]
        if t > self.pos_emb.shape[0]:
            raise ContextOverflowError(f"sequence of {t} exceeds context {self.pos_emb.shape[0]}")
        x = nx.add(h, nx.embedding_lookup(self.pos_emb, np.arange(t)))
        for block in self.blocks:
            x = block(x, key_mask=key_mask)
        return self.lm_head(self.ln_f(x))


# ---------------------------------------------------------------- template


@dataclass
class MultimodalSequence:
    """One rendered conversation in text coordinates.

    ``text_ids`` holds exactly one CODE_SLOT; ``code_ids`` are the truncated
    code tokens that replace it. ``loss_mask[i]`` marks text position ``i``
    as a prediction target (answer tokens and their EOS).
    """
    text_ids: list[int]
    code_ids: list[int]
    loss_mask: list[bool]
    answer_spans: list[tuple[int, int]]
    slot_index: int
    dropped_turns: int = 0

    @property
    def code_len(self) -> int:
        return len(self.code_ids)

    def __len__(self) -> int:
        return len(self.text_ids) - 1 + len(self.code_ids)

    def expanded(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per expanded position: source kind (0 text, 1 code), source index, mask."""
        s = self.slot_index
        t2 = len(self.text_ids)
        t1 = len(self.code_ids)
        kind = np.concatenate([np.zeros(s, np.int8), np.ones(t1, np.int8), np.zeros(t2 - s - 1, np.int8)])
        src = np.concatenate([np.arange(s), np.arange(t1), np.arange(s + 1, t2)])
        lm = np.asarray(self.loss_mask, dtype=bool)
        mask = np.concatenate([lm[:s], np.zeros(t1, bool), lm[s + 1:]])
        return kind, src, mask

    def expanded_ids(self) -> np.ndarray:
        """Token id per expanded position; code positions carry their code token."""
        s = self.slot_index
        return np.asarray(self.text_ids[:s] + list(self.code_ids) + self.text_ids[s + 1:], dtype=np.int64)


def encode_code_ids(tokenizer: Tokenizer, code: str, max_code_tokens: int) -> list[int]:
    if not code:
        raise InputError("empty code")
    ids = tokenizer.encode(code)
    if not ids:
        raise InputError("code produced no tokens")
    if max_code_tokens <= 0:
        raise ConfigError("max_code_tokens must be positive")
    return ids[:max_code_tokens]


def _turn_tokens(tokenizer: Tokenizer, question: str, answer: str | None, first: bool):
    tk = tokenizer
    head = [tk.bos_id, tk.human_id, tk.code_slot_id] if first else [tk.human_id]
    ids = head + tk.encode(question) + [tk.assistant_id]
    mask = [False] * len(ids)
    if answer is None:
        return ids, mask, None
    ans = tk.encode(answer) + [tk.eos_id]
    span = (len(ids), len(ids) + len(ans))
    return ids + ans, mask + [True] * len(ans), span


def render_conversation(turns: Sequence[tuple[str, str]], code: str, tokenizer: Tokenizer,
                        max_code_tokens: int, context_length: int, turn_limit: int | None = None,
                        open_final: bool = False) -> MultimodalSequence:
    """Lay out BOS HUMAN CODE_SLOT q ASSISTANT a EOS [HUMAN q ASSISTANT a EOS]...

    Oldest turns are dropped while the expanded length exceeds the context;
    the code block and the final turn are never cut. ``open_final`` renders
    the last turn as a prompt ending at ASSISTANT (for generation).
    """
    turns = list(turns)
    if not turns:
        raise InputError("conversation has no turns")
    if turn_limit is not None:
        turns = turns[:turn_limit]
    code_ids = encode_code_ids(tokenizer, code, max_code_tokens)
    dropped = 0
    while True:
        text: list[int] = []
        mask: list[bool] = []
        spans = []
        n = len(turns) - dropped
        for i, (q, a) in enumerate(turns[dropped:]):
            final = i == n - 1
            ids, m, span = _turn_tokens(tokenizer, q, None if (final and open_final) else a, first=i == 0)
            if span is not None:
                spans.append((span[0] + len(text), span[1] + len(text)))
            text += ids
            mask += m
        total = len(text) - 1 + len(code_ids)
        if total <= context_length:
            break
        if n == 1:
            raise ContextOverflowError(f"rendered length {total} exceeds context {context_length}")
        dropped += 1
    if text.count(tokenizer.code_slot_id) != 1:
        raise RenderError("rendered conversation must contain exactly one CODE_SLOT")
    return MultimodalSequence(text, code_ids, mask, spans, text.index(tokenizer.code_slot_id), dropped)


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    code_ids: np.ndarray      # (B, T1max)
    code_mask: np.ndarray     # (B, T1max)
    text_ids: np.ndarray      # (B, T2max + 1); last column always PAD
    expanded_ids: np.ndarray  # (B, T)
    gather: np.ndarray        # (B, T) rows into [text rows; code rows]
    key_mask: np.ndarray      # (B, T)
    targets: np.ndarray       # (B, T) next-token ids
    loss_mask: np.ndarray     # (B, T) whether the next token is a target

    @property
    def size(self) -> int:
        return self.gather.shape[0]


def collate(seqs: Sequence[MultimodalSequence], pad_id: int) -> Batch:
    """Right-pad a list of rendered sequences into one batch."""
    if not seqs:
        raise InputError("empty batch")
    b = len(seqs)
    t1 = max(max(s.code_len for s in seqs), 1)
    t2 = max(len(s.text_ids) for s in seqs) + 1
    t = max(len(s) for s in seqs)
    code_ids = np.full((b, t1), pad_id, np.int64)
    code_mask = np.zeros((b, t1), bool)
    text_ids = np.full((b, t2), pad_id, np.int64)
    exp_ids = np.full((b, t), pad_id, np.int64)
    gather = np.empty((b, t), np.int64)
    key_mask = np.zeros((b, t), bool)
    targets = np.zeros((b, t), np.int64)
    loss_mask = np.zeros((b, t), bool)
    n_text_rows = b * t2
    for i, s in enumerate(seqs):
        code_ids[i, : s.code_len] = s.code_ids
        code_mask[i, : s.code_len] = True
        text_ids[i, : len(s.text_ids)] = s.text_ids
        kind, src, mask = s.expanded()
        n = len(s)
        gather[i, :n] = np.where(kind == 1, n_text_rows + i * t1 + src, i * t2 + src)
        gather[i, n:] = i * t2 + t2 - 1
        ids = s.expanded_ids()
        exp_ids[i, :n] = ids
        key_mask[i, :n] = True
        targets[i, : n - 1] = ids[1:]
        loss_mask[i, : n - 1] = mask[1:]
    targets[~loss_mask] = 0
    return Batch(code_ids, code_mask, text_ids, exp_ids, gather, key_mask, targets, loss_mask)


# ---------------------------------------------------------------- model


class VulQAModel(Module):
    def __init__(self, cfg: ModelConfig, tokenizer: Tokenizer):
        if tokenizer.vocab_size != cfg.vocab_size:
            raise ConfigError(f"tokenizer vocab {tokenizer.vocab_size} != model vocab {cfg.vocab_size}")
        rng = np.random.default_rng(cfg.seed)
        self.config = cfg
        self.encoder = CodeEncoder(cfg, rng)
        self.projector = Projector(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self._tokenizer = tokenizer
        self._lora_rng = np.random.default_rng([cfg.seed, 1])
        self._zero_code = False
        self.stages_done: list[str] = []
        self.assign_names()

    @property
    def tokenizer(self) -> Tokenizer:
        return self._tokenizer

    @property
    def inline_code(self) -> bool:
        return self.config.code_mode == "inline"

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def set_zero_code(self, flag: bool) -> None:
        """Force the projector output to zero (modal-splice probe)."""
        self._zero_code = bool(flag)

    def lora_modules(self) -> dict[str, Linear]:
        return {name: m for name, m in self.named_modules() if isinstance(m, Linear) and m.has_lora}

    # -- column-layout helpers ----------------------------------------------

    def encode_code(self, code: str, max_code_tokens: int | None = None) -> np.ndarray:
        """Feature-layer code embedding, shape (d, T1)."""
        n = self.config.max_code_tokens if max_code_tokens is None else max_code_tokens
        ids = encode_code_ids(self.tokenizer, code, n)
        with nx.no_grad():
            z = self.encoder.features(np.asarray(ids)[None], np.ones((1, len(ids)), bool))
        return z.data[0].T.copy()

    def project(self, z_v) -> Tensor:
        """Map (d, T1) code features to (k, T1) language-space columns."""
        z = z_v if isinstance(z_v, Tensor) else Tensor(np.asarray(z_v, dtype=self.dtype))
        if z.ndim != 2 or z.shape[0] != self.config.enc_dim:
            raise DimensionError(f"expected ({self.config.enc_dim}, T1) input, got {z.shape}")
        return nx.transpose(self.projector(nx.transpose(z)))

    def render(self, turns, code: str, max_code_tokens: int | None = None, turn_limit: int | None = None,
               open_final: bool = False) -> MultimodalSequence:
        n = self.config.max_code_tokens if max_code_tokens is None else max_code_tokens
        return render_conversation(turns, code, self.tokenizer, n, self.config.context_length,
                                   turn_limit=turn_limit, open_final=open_final)

    # -- forward --------------------------------------------------------------

    def embed(self, batch: Batch) -> Tensor:
        """Spliced input embeddings H, shape (B, T, k)."""
        dec = self.decoder
        k = self.config.llm_dim
        if self.inline_code:
            return nx.embedding_lookup(dec.tok_emb, batch.expanded_ids)
        text = nx.embedding_lookup(dec.tok_emb, batch.text_ids)
        z = self.encoder.features(batch.code_ids, batch.code_mask)
        hv = self.projector(z)
        if self._zero_code:
            hv = nx.scale(hv, 0.0)
        rows = nx.concat([nx.reshape(text, (-1, k)), nx.reshape(hv, (-1, k))], axis=0)
        return nx.embedding_lookup(rows, batch.gather)

    def logits(self, batch: Batch) -> Tensor:
        return self.decoder(self.embed(batch), key_mask=batch.key_mask)

    def forward_loss(self, batch: Batch | MultimodalSequence) -> Tensor:
        if isinstance(batch, MultimodalSequence):
            batch = collate([batch], self.tokenizer.pad_id)
        return nx.cross_entropy(self.logits(batch), batch.targets, batch.loss_mask)


def forward_loss(model: VulQAModel, seq) -> Tensor:
    return model.forward_loss(seq)


# ---------------------------------------------------------------- LoRA & stages


def default_lora_targets(model: VulQAModel) -> list[str]:
    return [f"decoder.blocks.{i}.attn.{w}" for i in range(len(model.decoder.blocks)) for w in ATTN_TARGETS]


def lora_attach(model: VulQAModel, targets: Iterable[str] | None = None, r: int | None = None,
                alpha: float | None = None) -> VulQAModel:
    """Attach zero-initialised adapters in place; the forward pass is unchanged."""
    targets = list(default_lora_targets(model) if targets is None else targets)
    if len(set(targets)) != len(targets):
        raise ConfigError("duplicate LoRA target")
    r = model.config.lora_rank if r is None else r
    alpha = model.config.lora_alpha if alpha is None else alpha
    mods = []
    for name in targets:
        mod = model.get_submodule(name)
        if not isinstance(mod, Linear):
            raise ConfigError(f"LoRA target {name!r} is not a 2-D linear weight")
        if mod.has_lora:
            raise ConfigError(f"adapter already attached to {name!r}")
        mods.append(mod)
    for mod in mods:
        mod.attach_lora(r, alpha, model._lora_rng)
    model.assign_names()
    return model


def lora_merge(model: VulQAModel) -> VulQAModel:
    """Fold every adapter into its base weight and drop the adapter."""
    for mod in model.lora_modules().values():
        mod.merge_lora()
    model.assign_names()
    return model


def set_stage_freeze(model: VulQAModel, stage: str) -> dict[str, bool]:
    """pretrain: projector only. finetune: projector + LoRA (LoRA only in inline mode)."""
    if stage not in STAGES:
        raise ConfigError(f"stage must be one of {STAGES}")
    for p in model.parameters().values():
        p.trainable = False
    if not model.inline_code:
        for p in model.projector.parameters().values():
            p.trainable = True
    if stage == "finetune":
        for mod in model.lora_modules().values():
            mod.lora_A.trainable = True
            mod.lora_B.trainable = True
    return {name: p.trainable for name, p in model.named_parameters()}


def trainable_parameters(model: Module) -> list[Parameter]:
    return [p for p in model.parameters().values() if p.trainable]


# ---------------------------------------------------------------- generation


@dataclass
class DecodeConfig:
    max_new_tokens: int = 64
    strategy: str = "greedy"
    top_k: int = 10
    temperature: float = 1.0
    seed: int = 0
    max_code_tokens: int | None = None

    def __post_init__(self):
        if self.strategy not in ("greedy", "top_k"):
            raise ConfigError("strategy must be 'greedy' or 'top_k'")


def generate(model: VulQAModel, code: str, question: str, decode_config: DecodeConfig | None = None,
             history: Sequence[tuple[str, str]] = ()) -> str:
    """Continue after ASSISTANT until EOS, max_new_tokens, or the context limit."""
    ids = generate_ids(model, code, question, decode_config, history)
    return model.tokenizer.decode(ids, skip_special=True)


def generate_ids(model: VulQAModel, code: str, question: str, decode_config: DecodeConfig | None = None,
                 history: Sequence[tuple[str, str]] = ()) -> list[int]:
    cfg = decode_config or DecodeConfig()
    if cfg.max_new_tokens <= 0:
        return []
    tok = model.tokenizer
    seq = model.render(list(history) + [(question, "")], code, cfg.max_code_tokens, open_final=True)
    context = model.config.context_length
    banned = np.ones(model.config.vocab_size, bool)
    banned[: tok.n_learned] = False
    banned[tok.eos_id] = False
    rng = np.random.default_rng(cfg.seed)
    out: list[int] = []
    k = model.config.llm_dim
    with nx.no_grad():
        prompt = model.embed(collate([seq], tok.pad_id)).data[0, : len(seq)]
        rows = [prompt]
        length = len(seq)
        while len(out) < cfg.max_new_tokens and length < context:
            h = np.concatenate(rows, axis=0)[None]
            logits = model.decoder(Tensor(h), key_mask=None).data[0, -1].astype(np.float64)
            logits[banned] = -np.inf
            if cfg.strategy == "greedy":
                nxt = int(np.argmax(logits))
            else:
                kk = min(cfg.top_k, int((~banned).sum()))
                cand = np.argpartition(-logits, kk - 1)[:kk]
                cand = cand[np.argsort(-logits[cand], kind="stable")]
                z = logits[cand] / max(cfg.temperature, 1e-6)
                p = np.exp(z - z.max())
                nxt = int(cand[rng.choice(kk, p=p / p.sum())])
            if nxt == tok.eos_id:
                break
            out.append(nxt)
            rows.append(model.decoder.tok_emb.data[nxt][None].reshape(1, k))
            length += 1
    return out
