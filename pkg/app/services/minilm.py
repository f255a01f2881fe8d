"""
Miniature decoder-only language model

Pre-norm causal transformer with learned positions. Adapted collaborative
embeddings enter in two places:
  * embedding replacement: rows at the USER_EMBED / ITEM_EMBED positions of the
    prompt embedding are replaced by a_u / a_i
  * per-layer injection: at those two positions every layer adds W_{q,k,v} a to its
    query/key/value projections, using the layer's own (frozen) projection weights
"""
import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.config.settings import LmConfig
from app.services.numerics import DTYPE, Rng
from app.services.tokenizer import PromptInstance, Vocabulary
from app.utils.errors import ContextOverflowError, NumericsError

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100


@dataclass
class Injection:
    """Reserved positions (B,) and adapted embeddings (B, h) for a batch"""
    user_pos: torch.Tensor
    item_pos: torch.Tensor
    a_u: torch.Tensor
    a_i: torch.Tensor

    def dense(self, seq_len: int) -> torch.Tensor:
        """(B, T, h) tensor holding a_u / a_i at the reserved rows, zero elsewhere"""
        batch, hidden = self.a_u.shape
        rows = torch.arange(batch)
        out = torch.zeros(batch, seq_len, hidden, dtype=self.a_u.dtype)
        out = out.index_put((rows, self.user_pos), self.a_u)
        return out.index_put((rows, self.item_pos), self.a_i)


class DecoderLayer(nn.Module):
    def __init__(self, hidden: int, num_heads: int, ff_mult: int = 4):
        super().__init__()
        if hidden % num_heads:
            raise ValueError(f"hidden size {hidden} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.ln_attn = nn.LayerNorm(hidden, dtype=DTYPE)
        self.w_q = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.w_k = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.w_v = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.w_o = nn.Linear(hidden, hidden, dtype=DTYPE)
        self.ln_ff = nn.LayerNorm(hidden, dtype=DTYPE)
        self.ff_in = nn.Linear(hidden, ff_mult * hidden, dtype=DTYPE)
        self.ff_out = nn.Linear(ff_mult * hidden, hidden, dtype=DTYPE)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, t, h = x.shape
        return x.view(b, t, self.num_heads, h // self.num_heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, injected: Optional[torch.Tensor] = None) -> torch.Tensor:
        b, t, h = x.shape
        normed = self.ln_attn(x)
        q, k, v = self.w_q(normed), self.w_k(normed), self.w_v(normed)
        if injected is not None:
            # f(x) += W a at the reserved positions (rows of `injected` are zero elsewhere)
            q = q + F.linear(injected, self.w_q.weight)
            k = k + F.linear(injected, self.w_k.weight)
            v = v + F.linear(injected, self.w_v.weight)
        q, k, v = self._heads(q), self._heads(k), self._heads(v)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(h // self.num_heads)
        causal = torch.ones(t, t, dtype=torch.bool).triu(diagonal=1)
        att = torch.softmax(att.masked_fill(causal, float("-inf")), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, h)
        x = x + self.w_o(y)
        return x + self.ff_out(F.gelu(self.ff_in(self.ln_ff(x))))


class MiniLm(nn.Module):
    """Decoder-only LM over the byte vocabulary"""

    def __init__(self, vocab: Vocabulary, config: Optional[LmConfig] = None, rng: Optional[Rng] = None):
        super().__init__()
        self.vocab = vocab
        self.config = config or LmConfig()
        c = self.config
        self.hidden = c.hidden
        self.max_context = c.max_context
        self.tok_emb = nn.Embedding(len(vocab), c.hidden, dtype=DTYPE)
        self.pos_emb = nn.Embedding(c.max_context, c.hidden, dtype=DTYPE)
        self.layers = nn.ModuleList([DecoderLayer(c.hidden, c.num_heads, c.ff_mult) for _ in range(c.num_layers)])
        self.ln_out = nn.LayerNorm(c.hidden, dtype=DTYPE)
        self.head = nn.Linear(c.hidden, len(vocab), bias=False, dtype=DTYPE)
        self.frozen = False
        self._init_parameters(rng or Rng(0))

    def _init_parameters(self, rng: Rng) -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif p.dim() == 1:
                    p.fill_(1.0)  # layer-norm gains
                else:
                    p.copy_(rng.normal(tuple(p.shape), self.config.init_std))

    def freeze(self) -> "MiniLm":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def parameter_hash(self) -> str:
        return tensor_digest({k: v for k, v in self.state_dict().items()})

    def embed_tokens(self, token_ids: torch.Tensor) -> torch.Tensor:
        """Token + position embedding, (B, T) -> (B, T, h)"""
        t = token_ids.shape[-1]
        if t > self.max_context:
            raise ContextOverflowError(f"sequence of {t} tokens exceeds the {self.max_context}-token context")
        return self.tok_emb(token_ids) + self.pos_emb(torch.arange(t))

    def forward(self, embeddings: torch.Tensor, injection: Optional[Injection] = None) -> torch.Tensor:
        """(B, T, h) input embeddings -> (B, T, |V|) logits"""
        t = embeddings.shape[1]
        if t > self.max_context:
            raise ContextOverflowError(f"sequence of {t} tokens exceeds the {self.max_context}-token context")
        injected = None if injection is None else injection.dense(t)
        x = embeddings
        for layer in self.layers:
            x = layer(x, injected)
        return self.head(self.ln_out(x))

    def logits(self, token_ids: torch.Tensor) -> torch.Tensor:
        """Plain forward from token ids (no replacement, no injection)"""
        return self(self.embed_tokens(token_ids))


def tensor_digest(tensors: Dict[str, torch.Tensor]) -> str:
    """sha256 over names, shapes and float64 bytes in sorted-name order"""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().to(DTYPE).contiguous()
        h.update(name.encode("utf-8"))
        h.update(str(tuple(t.shape)).encode("utf-8"))
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def _check_adapted(lm: MiniLm, a: torch.Tensor, what: str) -> None:
    if a.shape[-1] != lm.hidden:
        raise NumericsError(f"{what} has dimension {a.shape[-1]}, expected {lm.hidden}")
    if not bool(torch.isfinite(a).all()):
        raise NumericsError(f"{what} contains non-finite entries")


def replace_rows(embeddings: torch.Tensor, user_pos: torch.Tensor, item_pos: torch.Tensor,
                 a_u: torch.Tensor, a_i: torch.Tensor) -> torch.Tensor:
    """Batched E' : rows at the reserved positions become a_u / a_i"""
    rows = torch.arange(embeddings.shape[0])
    out = embeddings.index_put((rows, user_pos), a_u)
    return out.index_put((rows, item_pos), a_i)


def embed_prompt(lm: MiniLm, prompt: PromptInstance, a_u: torch.Tensor, a_i: torch.Tensor,
                 token_ids: Optional[Sequence[int]] = None) -> torch.Tensor:
    """l x h prompt embedding with the USER/ITEM rows replaced (not added to)"""
    _check_adapted(lm, a_u, "a_u")
    _check_adapted(lm, a_i, "a_i")
    ids = torch.tensor([list(prompt.token_ids if token_ids is None else token_ids)], dtype=torch.long)
    emb = lm.embed_tokens(ids)
    pos = lambda p: torch.tensor([p], dtype=torch.long)  # noqa: E731
    return replace_rows(emb, pos(prompt.user_pos), pos(prompt.item_pos), a_u.view(1, -1), a_i.view(1, -1))[0]


def forward_injected(lm: MiniLm, embeddings: torch.Tensor, a_u: torch.Tensor, a_i: torch.Tensor,
                     prompt: PromptInstance, inject: bool = True) -> torch.Tensor:
    """
    Single-sequence forward over E' (l x h) with per-layer Q/K/V injection at the
    reserved positions; `inject=False` is the "w/o injection" ablation
    """
    if not all(bool(torch.isfinite(p).all()) for p in lm.parameters()):
        raise NumericsError("language model parameters are not finite")
    injection = None
    if inject:
        injection = Injection(torch.tensor([prompt.user_pos]), torch.tensor([prompt.item_pos]),
                              a_u.view(1, -1), a_i.view(1, -1))
    return lm(embeddings.unsqueeze(0), injection)[0]


@dataclass
class PromptBatch:
    """Right-padded prompt(+target) sequences; causal masking keeps pads invisible to real tokens"""
    token_ids: torch.Tensor
    targets: torch.Tensor
    user_pos: torch.Tensor
    item_pos: torch.Tensor
    explain_pos: torch.Tensor


def collate(prompts: Sequence[PromptInstance], vocab: Vocabulary, full_sequence: bool = False) -> PromptBatch:
    """
    Stack prompts into a batch. `targets[b, t]` is the token predicted at position t,
    set only strictly after EXPLAIN_POS unless `full_sequence` (language-model pretraining)
    """
    seqs = [p.sequence() for p in prompts]
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), vocab.pad_id, dtype=torch.long)
    targets = torch.full((len(seqs), width), IGNORE_INDEX, dtype=torch.long)
    for b, (p, seq) in enumerate(zip(prompts, seqs)):
        ids[b, :len(seq)] = torch.tensor(seq, dtype=torch.long)
        start = 0 if full_sequence else p.explain_pos
        for t in range(start, len(seq) - 1):
            targets[b, t] = seq[t + 1]
    return PromptBatch(
        ids, targets,
        torch.tensor([p.user_pos for p in prompts], dtype=torch.long),
        torch.tensor([p.item_pos for p in prompts], dtype=torch.long),
        torch.tensor([p.explain_pos for p in prompts], dtype=torch.long),
    )


def nll_from_targets(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over sequences of the summed token-level negative log-likelihood"""
    if not bool((targets != IGNORE_INDEX).any()):
        raise NumericsError("empty target")
    logp = torch.log_softmax(logits, dim=-1)
    mask = targets != IGNORE_INDEX
    picked = logp.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    return -torch.where(mask, picked, torch.zeros_like(picked)).sum(dim=-1).mean()


def nll_loss(logits: torch.Tensor, prompt: PromptInstance) -> torch.Tensor:
    """NLL of one sequence's target tokens (positions after EXPLAIN_POS); logits are (l_total, |V|)"""
    if not prompt.target_ids:
        raise NumericsError("empty target")
    seq = prompt.sequence()
    targets = torch.full((len(seq),), IGNORE_INDEX, dtype=torch.long)
    for t in range(prompt.explain_pos, len(seq) - 1):
        targets[t] = seq[t + 1]
    return nll_from_targets(logits.unsqueeze(0), targets.unsqueeze(0))
