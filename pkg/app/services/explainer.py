"""
Explanation Generator
Pretrains the miniature LM, trains the collaborative adapter against the frozen LM
and decodes explanations for (user, item) pairs
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch
from tqdm import tqdm

from app.config.settings import AblationConfig, AdapterTrainConfig, DecodeConfig, PretrainConfig
from app.models.records import Profile, TrainingLog
from app.services.adapter import AdapterPair
from app.services.corpus import zero_shot_user_embedding
from app.services.graph_cf import EmbeddingTable
from app.services.minilm import (
    Injection,
    MiniLm,
    collate,
    embed_prompt,
    forward_injected,
    nll_from_targets,
    replace_rows,
    tensor_digest,
)
from app.services.numerics import Rng
from app.services.text_backend import split_words, truncate_words
from app.services.tokenizer import PROMPT_PLACEHOLDERS, BOS, PAD, PromptInstance, Vocabulary, build_prompt
from app.utils.errors import DataError, DivergenceError, FrozenParameterError

logger = logging.getLogger(__name__)

ABLATION_VARIANTS: Dict[str, AblationConfig] = {
    "full": AblationConfig(profiles=True, injection=True),
    "no-profile": AblationConfig(profiles=False, injection=True),
    "no-injection": AblationConfig(profiles=True, injection=False),
    "no-both": AblationConfig(profiles=False, injection=False),
}


def variant_name(ablation: AblationConfig) -> str:
    return next(name for name, v in ABLATION_VARIANTS.items() if v == ablation)


@dataclass
class CollaborativeEmbeddings:
    """Final tokenizer embeddings addressed by raw ids"""
    final_user: torch.Tensor
    final_item: torch.Tensor
    user_index: Dict[Any, int]
    item_index: Dict[Any, int]
    item_degree: List[int]

    @classmethod
    def from_table(cls, table: EmbeddingTable, user_ids: Sequence[Any], item_ids: Sequence[Any],
                   item_degree: Sequence[int]) -> "CollaborativeEmbeddings":
        return cls(table.final_user.detach(), table.final_item.detach(),
                   {raw: k for k, raw in enumerate(user_ids)}, {raw: k for k, raw in enumerate(item_ids)},
                   list(item_degree))

    @property
    def dim(self) -> int:
        return self.final_user.shape[1]

    def digest(self) -> str:
        return tensor_digest({"final_user": self.final_user, "final_item": self.final_item})

    def item(self, item_id: Any) -> torch.Tensor:
        if item_id not in self.item_index:
            raise DataError(f"unknown item {item_id!r}")
        return self.final_item[self.item_index[item_id]]

    def user(self, user_id: Any, known_items: Optional[Sequence[Any]] = None,
             zero_shot: bool = False) -> torch.Tensor:
        """Trained embedding, or the one-step propagation rule for an unseen user when allowed"""
        if user_id in self.user_index:
            return self.final_user[self.user_index[user_id]]
        if not zero_shot:
            raise DataError(f"unknown user {user_id!r} (zero-shot rule disabled)")
        known = [self.item_index[i] for i in (known_items or []) if i in self.item_index]
        if not known:
            raise DataError(f"zero-shot user {user_id!r} has no known items in the tokenizer")
        return zero_shot_user_embedding(self.final_item, self.item_degree, known)


@dataclass
class Example:
    prompt: PromptInstance
    e_u: torch.Tensor
    e_i: torch.Tensor


def prompt_for(vocab: Vocabulary, user_id: Any, item_id: Any, user_profiles: Dict[Any, Profile],
               item_profiles: Dict[Any, Profile], include_profiles: bool = True,
               explanation: Optional[str] = None, template: Optional[str] = None) -> PromptInstance:
    profiles = None
    if include_profiles and user_id in user_profiles and item_id in item_profiles:
        profiles = (user_profiles[user_id].text, item_profiles[item_id].text)
    return build_prompt(vocab, user_id, item_id, profiles, template, include_profiles, explanation)


def build_examples(vocab: Vocabulary, explanations: Dict[Tuple[Any, Any], str], embeddings: CollaborativeEmbeddings,
                   user_profiles: Dict[Any, Profile], item_profiles: Dict[Any, Profile],
                   include_profiles: bool = True, template: Optional[str] = None) -> List[Example]:
    """Training examples for pairs whose user and item both have trained embeddings"""
    examples, skipped = [], 0
    for (u, i), text in explanations.items():
        if u not in embeddings.user_index or i not in embeddings.item_index:
            skipped += 1
            continue
        prompt = prompt_for(vocab, u, i, user_profiles, item_profiles, include_profiles, text, template)
        examples.append(Example(prompt, embeddings.user(u), embeddings.item(i)))
    if skipped:
        logger.warning("Skipped %d pairs without tokenizer embeddings", skipped)
    return examples


def _sample_batch(n: int, batch_size: int, rng: Rng) -> List[int]:
    return sorted(int(k) for k in rng.choice(n, size=min(batch_size, n), replace=False))


HELDOUT_STREAM = 1


def split_corpus(corpus: Sequence[PromptInstance], heldout_fraction: float,
                 seed: int = 0) -> Tuple[List[PromptInstance], List[PromptInstance]]:
    """Seeded (train, held-out) partition; floor(fraction * n) sequences are held out"""
    n_held = int(heldout_fraction * len(corpus))
    if n_held == 0:
        return list(corpus), []
    held = set(_sample_batch(len(corpus), n_held, Rng(seed).spawn(HELDOUT_STREAM)))
    return ([p for k, p in enumerate(corpus) if k not in held],
            [p for k, p in enumerate(corpus) if k in held])


def heldout_lm_nll(lm: MiniLm, prompts: Sequence[PromptInstance], batch_size: int = 32) -> float:
    """Mean per-sequence next-token NLL over whole sequences, as in pretraining"""
    if not prompts:
        raise DataError("no sequences to evaluate")
    was_training = lm.training
    lm.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(prompts), batch_size):
            chunk = prompts[start:start + batch_size]
            batch = collate(chunk, lm.vocab, full_sequence=True)
            total += nll_from_targets(lm.logits(batch.token_ids), batch.targets).item() * len(chunk)
    lm.train(was_training)
    return total / len(prompts)


def pretrain_lm(lm: MiniLm, corpus: Sequence[PromptInstance], config: Optional[PretrainConfig] = None,
                seed: int = 0, progress: bool = False) -> Tuple[MiniLm, TrainingLog]:
    """
    Next-token training over whole prompt+explanation sequences with the reserved
    tokens' own learned embeddings; the LM is frozen afterwards

    A seeded `heldout_fraction` slice of the corpus is kept out of training and its
    NLL is recorded before the first and after the last step.
    """
    config = config or PretrainConfig()
    if lm.frozen:
        raise FrozenParameterError("language model is already frozen")
    if not corpus:
        raise DataError("empty pretraining corpus")
    train, heldout = split_corpus(corpus, config.heldout_fraction, seed)
    rng = Rng(seed)
    optimizer = torch.optim.Adam(lm.parameters(), lr=config.lr)
    log = TrainingLog()
    if heldout:
        log.append_heldout(step=0, loss=heldout_lm_nll(lm, heldout), sequences=len(heldout))
    lm.train()
    for step in tqdm(range(config.steps), desc="pretrain-lm", disable=not progress):
        batch = collate([train[k] for k in _sample_batch(len(train), config.batch_size, rng)], lm.vocab,
                        full_sequence=True)
        optimizer.zero_grad()
        loss = nll_from_targets(lm.logits(batch.token_ids), batch.targets)
        if not bool(torch.isfinite(loss)):
            logger.error("Language model diverged at step %d", step)
            raise DivergenceError(0, step, loss.item())
        loss.backward()
        optimizer.step()
        log.append(step=step, loss=loss.item())
        if step % 50 == 0:
            logger.info("pretrain step %d nll %.4f", step, loss.item())
    log.stopped_epoch = 0
    if heldout:
        log.append_heldout(step=config.steps, loss=heldout_lm_nll(lm, heldout), sequences=len(heldout))
        logger.info("held-out nll %.4f -> %.4f on %d sequences", log.heldout[0]["loss"], log.heldout[-1]["loss"],
                    len(heldout))
    lm.eval()
    lm.freeze()
    return lm, log


def _batch_loss(lm: MiniLm, adapters: AdapterPair, examples: Sequence[Example], inject: bool,
                rng: Optional[Rng] = None) -> torch.Tensor:
    batch = collate([e.prompt for e in examples], lm.vocab)
    a_u, a_i = adapters(torch.stack([e.e_u for e in examples]), torch.stack([e.e_i for e in examples]), rng)
    emb = replace_rows(lm.embed_tokens(batch.token_ids), batch.user_pos, batch.item_pos, a_u, a_i)
    injection = Injection(batch.user_pos, batch.item_pos, a_u, a_i) if inject else None
    return nll_from_targets(lm(emb, injection), batch.targets)


def heldout_nll(lm: MiniLm, adapters: AdapterPair, examples: Sequence[Example], inject: bool = True,
                batch_size: int = 32) -> float:
    """Mean per-explanation NLL with the adapters in inference mode"""
    if not examples:
        raise DataError("no examples to evaluate")
    adapters.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            total += _batch_loss(lm, adapters, chunk, inject).item() * len(chunk)
    return total / len(examples)


def train_adapter(lm: MiniLm, adapters: AdapterPair, examples: Sequence[Example], embeddings: CollaborativeEmbeddings,
                  config: Optional[AdapterTrainConfig] = None, ablation: Optional[AblationConfig] = None,
                  seed: int = 0, progress: bool = False) -> Tuple[AdapterPair, TrainingLog]:
    """
    Minimise the explanation NLL over the adapter parameters only

    The LM parameter hash and the tokenizer embedding hash are taken before and after;
    any difference is a hard failure.
    """
    config = config or AdapterTrainConfig()
    ablation = ablation or AblationConfig()
    if not lm.frozen or any(p.requires_grad for p in lm.parameters()):
        raise FrozenParameterError("language model must be frozen before adapter training")
    if not examples:
        raise DataError("no training examples")
    lm_hash, gnn_hash = lm.parameter_hash(), embeddings.digest()

    rng = Rng(seed)
    optimizer = torch.optim.Adam(adapters.parameters(), lr=config.lr)
    log = TrainingLog()
    adapters.train()
    for step in tqdm(range(config.steps), desc="train-adapter", disable=not progress):
        chunk = [examples[k] for k in _sample_batch(len(examples), config.batch_size, rng)]
        optimizer.zero_grad()
        loss = _batch_loss(lm, adapters, chunk, ablation.injection, rng)
        if not bool(torch.isfinite(loss)):
            logger.error("Adapter training diverged at step %d", step)
            raise DivergenceError(0, step, loss.item())
        loss.backward()
        optimizer.step()
        log.append(step=step, loss=loss.item(), injection=ablation.injection, profiles=ablation.profiles)
        if step % 50 == 0:
            logger.info("adapter step %d nll %.4f", step, loss.item())
    adapters.eval()

    if lm.parameter_hash() != lm_hash:
        raise FrozenParameterError("frozen parameter modified: language model hash changed during adapter training")
    if embeddings.digest() != gnn_hash:
        raise FrozenParameterError("frozen parameter modified: tokenizer embeddings changed during adapter training")
    log.stopped_epoch = 0
    return adapters, log


def _banned_ids(vocab: Vocabulary) -> List[int]:
    return [vocab.id_of(t) for t in (BOS, PAD) + PROMPT_PLACEHOLDERS]


def generate(lm: MiniLm, adapters: AdapterPair, e_u: torch.Tensor, e_i: torch.Tensor, prompt: PromptInstance,
             decode: Optional[DecodeConfig] = None, seed: int = 0, inject: bool = True) -> str:
    """
    Decode from EXPLAIN_POS until EOS, the word cap or the context limit

    Greedy decoding takes the arg-max (lowest id on ties); sampled decoding draws from
    softmax(logits / temperature) with a generator seeded by `seed`. Reserved tokens
    other than EOS are never emitted.
    """
    decode = decode or DecodeConfig()
    if prompt.target_ids:
        raise DataError("generation prompt must not carry a target")
    rng = Rng(seed)
    adapters.eval()
    banned = _banned_ids(lm.vocab)
    eos = lm.vocab.eos_id
    generated: List[int] = []
    with torch.no_grad():
        a_u, a_i = adapters(e_u.view(1, -1), e_i.view(1, -1))
        a_u, a_i = a_u[0], a_i[0]
        while prompt.length + len(generated) < lm.max_context:
            ids = prompt.token_ids + generated
            emb = embed_prompt(lm, prompt, a_u, a_i, ids)
            logits = forward_injected(lm, emb, a_u, a_i, prompt, inject)[-1].clone()
            logits[banned] = float("-inf")
            if decode.mode == "greedy":
                next_id = int(torch.argmax(logits))
            else:
                probs = torch.softmax(logits / decode.temperature, dim=-1).numpy()
                next_id = int(rng.choice(len(probs), p=probs / probs.sum()))
            if next_id == eos:
                break
            generated.append(next_id)
            if len(split_words(lm.vocab.decode(generated))) > decode.max_words:
                break
    return truncate_words(lm.vocab.decode(generated), decode.max_words)


def explain_pair(lm: MiniLm, adapters: AdapterPair, embeddings: CollaborativeEmbeddings, user_id: Any, item_id: Any,
                 user_profiles: Dict[Any, Profile], item_profiles: Dict[Any, Profile],
                 decode: Optional[DecodeConfig] = None, ablation: Optional[AblationConfig] = None, seed: int = 0,
                 known_items: Optional[Sequence[Any]] = None, zero_shot: bool = False,
                 template: Optional[str] = None) -> str:
    """Look up (or derive) the collaborative embeddings of a pair and decode its explanation"""
    ablation = ablation or AblationConfig()
    e_u = embeddings.user(user_id, known_items, zero_shot)
    e_i = embeddings.item(item_id)
    prompt = prompt_for(lm.vocab, user_id, item_id, user_profiles, item_profiles, ablation.profiles,
                        template=template)
    return generate(lm, adapters, e_u, e_i, prompt, decode, seed, ablation.injection)
