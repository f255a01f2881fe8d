import pytest
import torch

from app.config.settings import (
    AblationConfig,
    AdapterConfig,
    AdapterTrainConfig,
    DecodeConfig,
    GraphConfig,
    LmConfig,
    PretrainConfig,
    SynthConfig,
)
from app.services.adapter import AdapterPair
from app.services.corpus import synthesize_dataset, zero_shot_user_embedding
from app.services.evaluation import TokenOverlapScorer, usr
from app.services.explainer import (
    ABLATION_VARIANTS,
    CollaborativeEmbeddings,
    build_examples,
    explain_pair,
    generate,
    heldout_lm_nll,
    heldout_nll,
    pretrain_lm,
    prompt_for,
    split_corpus,
    train_adapter,
    variant_name,
)
from app.services.graph_cf import SplitSpec, build_graph, train_tokenizer
from app.services.minilm import MiniLm
from app.services.numerics import Rng
from app.services.text_backend import split_words
from app.services.tokenizer import USER_EMBED, Vocabulary, build_prompt
from app.utils.errors import DataError, FrozenParameterError

SHORT_TEMPLATE = "U <USER_EMBED> I <ITEM_EMBED> E<EXPLAIN_POS>"


@pytest.fixture
def embeddings():
    rng = Rng(20)
    return CollaborativeEmbeddings(rng.normal((3, 4), 0.5), rng.normal((3, 4), 0.5),
                                   {"u0": 0, "u1": 1, "u2": 2}, {"i0": 0, "i1": 1, "i2": 2}, [2, 1, 3])


@pytest.fixture
def adapters():
    return AdapterPair(4, 16, AdapterConfig(num_experts=2), Rng(0))


@pytest.fixture
def examples(vocab, embeddings):
    refs = {("u0", "i0"): "quiet and warm", ("u1", "i1"): "fast and cheap", ("u2", "i2"): "cozy and sleek"}
    return build_examples(vocab, refs, embeddings, {}, {}, template=SHORT_TEMPLATE)


def _corpus(vocab):
    return [build_prompt(vocab, k, k, template=SHORT_TEMPLATE, explanation=text)
            for k, text in enumerate(["quiet and warm", "fast and cheap", "cozy and sleek"])]


def _steer(lm, favoured, banned=()):
    """Make the LM's next-token logits constant: `favoured` ids get their weight, `banned` ids -50"""
    with torch.no_grad():
        lm.ln_out.weight.zero_()
        lm.ln_out.bias.zero_()
        lm.ln_out.bias[0] = 1.0
        lm.head.weight.zero_()
        for token, logit in favoured.items():
            lm.head.weight[token, 0] = logit
        for token in banned:
            lm.head.weight[token, 0] = -50.0


def test_variant_names_cover_the_ablation_grid():
    assert set(ABLATION_VARIANTS) == {"full", "no-profile", "no-injection", "no-both"}
    assert variant_name(AblationConfig()) == "full"
    assert variant_name(AblationConfig(profiles=False, injection=False)) == "no-both"


def test_pretrain_with_zero_lr_keeps_weights_and_freezes(tiny_lm, vocab):
    before = tiny_lm.parameter_hash()
    lm, log = pretrain_lm(tiny_lm, _corpus(vocab), PretrainConfig(steps=3, batch_size=2, lr=0.0))
    assert lm.parameter_hash() == before
    assert lm.frozen
    assert [e["step"] for e in log.entries] == [0, 1, 2]


def test_pretrain_loss_curve_is_seeded(vocab, tiny_lm_config):
    config = PretrainConfig(steps=4, batch_size=3, lr=1e-2)
    _, first = pretrain_lm(MiniLm(vocab, tiny_lm_config, Rng(1)), _corpus(vocab), config, seed=5)
    _, second = pretrain_lm(MiniLm(vocab, tiny_lm_config, Rng(1)), _corpus(vocab), config, seed=5)
    assert first.to_jsonl() == second.to_jsonl()
    assert first.entries[-1]["loss"] < first.entries[0]["loss"]


WORDS = ["quiet", "warm", "fast", "cheap", "cozy", "sleek", "bright", "calm"]


def _word_corpus(vocab, n=20):
    return [build_prompt(vocab, k, k, template=SHORT_TEMPLATE,
                         explanation=f"{WORDS[k % 8]} and {WORDS[(3 * k + 1) % 8]}") for k in range(n)]


def test_split_corpus_is_seeded_and_disjoint(vocab):
    corpus = _word_corpus(vocab)
    train, held = split_corpus(corpus, 0.25, seed=2)
    assert len(held) == 5 and len(train) == 15
    assert {id(p) for p in train}.isdisjoint(id(p) for p in held)
    again = split_corpus(corpus, 0.25, seed=2)[1]
    assert [p.user_id for p in again] == [p.user_id for p in held]
    assert split_corpus(corpus, 0.0)[1] == []
    assert split_corpus(corpus[:3], 0.1)[1] == []


def test_pretraining_lowers_heldout_nll(vocab, tiny_lm):
    corpus = _word_corpus(vocab)
    held = split_corpus(corpus, 0.25, seed=0)[1]
    before = heldout_lm_nll(tiny_lm, held)
    config = PretrainConfig(steps=30, batch_size=8, lr=1e-2, heldout_fraction=0.25)
    lm, log = pretrain_lm(tiny_lm, corpus, config, seed=0)
    assert [e["step"] for e in log.heldout] == [0, 30]
    assert log.heldout[0]["loss"] == pytest.approx(before, abs=1e-12)
    assert log.heldout[1]["loss"] < log.heldout[0]["loss"]
    assert log.heldout[1]["loss"] == pytest.approx(heldout_lm_nll(lm, held), abs=1e-12)
    assert log.to_jsonl().count('"phase": "heldout"') == 2
    with pytest.raises(DataError):
        heldout_lm_nll(lm, [])


def test_pretrain_preconditions(tiny_lm, vocab):
    with pytest.raises(DataError):
        pretrain_lm(tiny_lm, [])
    tiny_lm.freeze()
    with pytest.raises(FrozenParameterError):
        pretrain_lm(tiny_lm, _corpus(vocab))


def test_embedding_lookup_and_zero_shot_rule(embeddings):
    assert torch.equal(embeddings.user("u1"), embeddings.final_user[1])
    with pytest.raises(DataError):
        embeddings.item("nope")
    with pytest.raises(DataError, match="zero-shot rule disabled"):
        embeddings.user("stranger", ["i0"])
    derived = embeddings.user("stranger", ["i0", "i2", "unknown"], zero_shot=True)
    assert torch.allclose(derived, zero_shot_user_embedding(embeddings.final_item, [2, 1, 3], [0, 2]))
    with pytest.raises(DataError):
        embeddings.user("stranger", ["unknown"], zero_shot=True)


def test_build_examples_skips_pairs_without_embeddings(vocab, embeddings, caplog):
    refs = {("u0", "i0"): "ok", ("ghost", "i0"): "ok", ("u1", "missing"): "ok"}
    built = build_examples(vocab, refs, embeddings, {}, {}, template=SHORT_TEMPLATE)
    assert [(e.prompt.user_id, e.prompt.item_id) for e in built] == [("u0", "i0")]
    assert "Skipped 2" in caplog.text


def test_prompt_for_uses_profiles_only_when_both_exist(vocab):
    from app.models.records import Profile

    users = {"u": Profile(subject="user", subject_id="u", text="likes jazz", provenance="template")}
    items = {"i": Profile(subject="item", subject_id="i", text="vinyl shop", provenance="template")}
    with_p = prompt_for(vocab, "u", "i", users, items)
    assert with_p.include_profiles
    assert not prompt_for(vocab, "u", "other", users, items).include_profiles
    assert not prompt_for(vocab, "u", "i", users, items, include_profiles=False).include_profiles


def test_adapter_training_respects_the_freeze_contract(tiny_lm, adapters, examples, embeddings):
    tiny_lm.freeze()
    lm_hash, gnn_hash = tiny_lm.parameter_hash(), embeddings.digest()
    before = {k: v.clone() for k, v in adapters.named_tensors().items()}
    trained, log = train_adapter(tiny_lm, adapters, examples, embeddings,
                                 AdapterTrainConfig(steps=3, batch_size=2, lr=1e-2),
                                 AblationConfig(injection=False), seed=1)
    assert tiny_lm.parameter_hash() == lm_hash
    assert embeddings.digest() == gnn_hash
    assert any(not torch.equal(before[k], v) for k, v in trained.named_tensors().items())
    assert len(log.entries) == 3
    assert all(e["injection"] is False and e["profiles"] is True for e in log.entries)
    assert not trained.training


def test_adapter_training_requires_a_frozen_lm(tiny_lm, adapters, examples, embeddings):
    with pytest.raises(FrozenParameterError):
        train_adapter(tiny_lm, adapters, examples, embeddings)


def test_changed_frozen_tables_are_a_hard_failure(tiny_lm, adapters, examples, embeddings, monkeypatch):
    tiny_lm.freeze()
    digests = iter(["before", "after"])
    monkeypatch.setattr(embeddings, "digest", lambda: next(digests))
    with pytest.raises(FrozenParameterError, match="frozen parameter modified"):
        train_adapter(tiny_lm, adapters, examples, embeddings, AdapterTrainConfig(steps=1, batch_size=1))


def test_heldout_nll_is_deterministic_and_batch_invariant(tiny_lm, adapters, examples):
    tiny_lm.freeze()
    whole = heldout_nll(tiny_lm, adapters, examples)
    assert heldout_nll(tiny_lm, adapters, examples, batch_size=1) == pytest.approx(whole, abs=1e-10)
    assert heldout_nll(tiny_lm, adapters, examples, inject=False) != whole
    with pytest.raises(DataError):
        heldout_nll(tiny_lm, adapters, [])


def test_greedy_and_seeded_sampled_decoding_are_repeatable(tiny_lm, adapters, embeddings, vocab):
    prompt = build_prompt(vocab, "u0", "i0", template=SHORT_TEMPLATE)
    e_u, e_i = embeddings.user("u0"), embeddings.item("i0")
    greedy = DecodeConfig(mode="greedy", max_words=50)
    assert generate(tiny_lm, adapters, e_u, e_i, prompt, greedy) == generate(tiny_lm, adapters, e_u, e_i, prompt,
                                                                              greedy)
    sampled = DecodeConfig(mode="sampled", temperature=1.5)
    first = generate(tiny_lm, adapters, e_u, e_i, prompt, sampled, seed=3)
    assert first == generate(tiny_lm, adapters, e_u, e_i, prompt, sampled, seed=3)
    assert len(split_words(first)) <= 50


def test_word_cap_stops_decoding(tiny_lm, adapters, embeddings, vocab):
    _steer(tiny_lm, {ord("a"): 30.0, ord(" "): 30.0}, banned=[vocab.eos_id])
    prompt = build_prompt(vocab, "u0", "i0", template=SHORT_TEMPLATE)
    text = generate(tiny_lm, adapters, embeddings.user("u0"), embeddings.item("i0"), prompt,
                    DecodeConfig(mode="sampled", max_words=10), seed=0)
    assert len(split_words(text)) == 10
    assert set(text) <= {"a", " "}


def test_reserved_tokens_are_never_emitted(tiny_lm, adapters, embeddings, vocab):
    _steer(tiny_lm, {vocab.id_of(USER_EMBED): 100.0, vocab.bos_id: 90.0, ord("z"): 5.0})
    prompt = build_prompt(vocab, "u0", "i0", template=SHORT_TEMPLATE)
    text = generate(tiny_lm, adapters, embeddings.user("u0"), embeddings.item("i0"), prompt)
    assert text == "z" * (tiny_lm.max_context - prompt.length)


def test_eos_ends_generation(tiny_lm, adapters, embeddings, vocab):
    _steer(tiny_lm, {vocab.eos_id: 10.0})
    prompt = build_prompt(vocab, "u0", "i0", template=SHORT_TEMPLATE)
    assert generate(tiny_lm, adapters, embeddings.user("u0"), embeddings.item("i0"), prompt) == ""


def test_generation_prompt_must_not_carry_a_target(tiny_lm, adapters, embeddings, vocab):
    prompt = build_prompt(vocab, "u0", "i0", template=SHORT_TEMPLATE, explanation="leak")
    with pytest.raises(DataError):
        generate(tiny_lm, adapters, embeddings.user("u0"), embeddings.item("i0"), prompt)


def test_explain_pair_serves_zero_shot_users(tiny_lm, adapters, embeddings):
    _steer(tiny_lm, {ord("o"): 10.0, ord("k"): 9.0, tiny_lm.vocab.eos_id: 1.0})
    text = explain_pair(tiny_lm, adapters, embeddings, "newcomer", "i1", {}, {}, DecodeConfig(max_words=5),
                        known_items=["i0", "i1"], zero_shot=True, template=SHORT_TEMPLATE)
    assert text == "o" * (tiny_lm.max_context - len(Vocabulary().encode(SHORT_TEMPLATE)) - 1)
    with pytest.raises(DataError):
        explain_pair(tiny_lm, adapters, embeddings, "newcomer", "i1", {}, {}, known_items=["i0"],
                     template=SHORT_TEMPLATE)


@pytest.mark.slow
def test_adapter_learns_planted_explanations():
    ds = synthesize_dataset(0, SynthConfig(num_users=60, num_items=60, groups=2))
    graph = build_graph([(r.user_id, r.item_id) for r in ds.records], SplitSpec(0.1, 0.0, 0))
    table, _ = train_tokenizer(graph, GraphConfig(dim=32, batch_size=256, lr=1e-2, max_epochs=60), seed=0)
    embeddings = CollaborativeEmbeddings.from_table(table, graph.user_ids, graph.item_ids,
                                                    graph.item_degree().tolist())

    vocab = Vocabulary()
    refs = {r.key: ds.explanation(r.user_id, r.item_id) for r in ds.records}
    keys = sorted(refs)
    heldout_keys = set(keys[::10])
    train_refs = {k: v for k, v in refs.items() if k not in heldout_keys}
    examples = build_examples(vocab, train_refs, embeddings, {}, {}, template=SHORT_TEMPLATE)

    heldout_refs = {k: refs[k] for k in heldout_keys}
    heldout = build_examples(vocab, heldout_refs, embeddings, {}, {}, template=SHORT_TEMPLATE)
    assert len(heldout) >= 50

    lm = MiniLm(vocab, LmConfig(hidden=64, num_layers=2, num_heads=4, max_context=256), Rng(0))
    lm, pre_log = pretrain_lm(lm, [e.prompt for e in examples], PretrainConfig(steps=200, heldout_fraction=0.0),
                              seed=0)
    assert pre_log.entries[-1]["loss"] <= 0.5 * pre_log.entries[0]["loss"]

    pairs = sorted(heldout_keys)[:50]
    nll, overlap = {}, {}
    scorer = TokenOverlapScorer()
    for variant in ("full", "no-injection"):
        ablation = ABLATION_VARIANTS[variant]
        adapters = AdapterPair(embeddings.dim, lm.hidden, AdapterConfig(), Rng(0))
        initial = heldout_nll(lm, adapters, examples, ablation.injection)
        adapters, _ = train_adapter(lm, adapters, examples, embeddings, AdapterTrainConfig(steps=300), ablation, seed=0)
        if variant == "full":
            assert heldout_nll(lm, adapters, examples, ablation.injection) <= 0.7 * initial
        nll[variant] = heldout_nll(lm, adapters, heldout, ablation.injection)

        texts = [explain_pair(lm, adapters, embeddings, u, i, {}, {}, ablation=ablation, template=SHORT_TEMPLATE)
                 for u, i in pairs]
        assert all(len(split_words(t)) <= 50 for t in texts)
        if variant == "full":
            assert usr(texts) >= 0.9
        overlap[variant] = sum(scorer.score(refs[k], t) for k, t in zip(pairs, texts)) / len(pairs)

    assert nll["full"] <= nll["no-injection"]
    assert overlap["full"] >= overlap["no-injection"]
