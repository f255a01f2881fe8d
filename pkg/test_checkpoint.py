import pytest
import torch

from app.config.settings import AdapterConfig, GraphConfig
from app.services.adapter import AdapterPair
from app.services.checkpoint import (
    load_gnn_checkpoint,
    load_lm_checkpoint,
    load_unified_checkpoint,
    save_gnn_checkpoint,
    save_lm_checkpoint,
    save_unified_checkpoint,
)
from app.services.graph_cf import build_graph, init_embedding_table, SplitSpec, train_tokenizer
from app.services.numerics import Rng
from app.utils.errors import CheckpointError
from conftest import random_interactions


def _flip_last_byte(path):
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))


@pytest.fixture
def string_graph():
    edges = [("ann", "b1"), ("ann", "b2"), ("bo", "b2"), ("bo", "b3"), ("cy", "b1"), ("cy", "b3")]
    return build_graph(edges, SplitSpec(0.0, 0.0, 0))


def test_gnn_checkpoint_round_trip(tmp_path, string_graph):
    table = init_embedding_table(3, 3, 4, 2, Rng(0)).refresh(string_graph)
    path = save_gnn_checkpoint(tmp_path / "gnn.safetensors", table, string_graph, epoch=7,
                               rng_state=Rng(3).get_state())
    ckpt = load_gnn_checkpoint(path)
    assert torch.equal(ckpt.table.final_user, table.final_user)
    assert torch.equal(ckpt.table.layer0_item, table.layer0_item)
    assert ckpt.user_ids == ["ann", "bo", "cy"]
    assert ckpt.item_index == {"b1": 0, "b2": 1, "b3": 2}
    assert ckpt.item_degree == [2, 2, 2]
    assert ckpt.epoch == 7
    assert ckpt.table.num_layers == 2


def test_gnn_checkpoint_header_is_byte_stable(tmp_path, string_graph):
    table = init_embedding_table(3, 3, 4, 1, Rng(0))
    a = save_gnn_checkpoint(tmp_path / "a.safetensors", table, string_graph)
    b = save_gnn_checkpoint(tmp_path / "b.safetensors", table, string_graph)
    assert a.read_bytes() == b.read_bytes()


def test_corrupted_gnn_checkpoint_is_rejected(tmp_path, string_graph):
    path = save_gnn_checkpoint(tmp_path / "gnn.safetensors", init_embedding_table(3, 3, 4, 1, Rng(0)), string_graph)
    _flip_last_byte(path)
    with pytest.raises(CheckpointError, match="hash mismatch"):
        load_gnn_checkpoint(path)


def test_truncated_or_missing_checkpoint(tmp_path, string_graph):
    with pytest.raises(CheckpointError, match="not found"):
        load_gnn_checkpoint(tmp_path / "absent.safetensors")
    path = save_gnn_checkpoint(tmp_path / "gnn.safetensors", init_embedding_table(3, 3, 4, 1, Rng(0)), string_graph)
    path.write_bytes(path.read_bytes()[:20])
    with pytest.raises(CheckpointError):
        load_gnn_checkpoint(path)


def test_lm_checkpoint_round_trip_keeps_frozen_flag(tmp_path, tiny_lm):
    tiny_lm.freeze()
    restored = load_lm_checkpoint(save_lm_checkpoint(tmp_path / "lm.safetensors", tiny_lm))
    assert restored.frozen
    assert restored.parameter_hash() == tiny_lm.parameter_hash()
    assert restored.vocab.special_ids == tiny_lm.vocab.special_ids
    assert restored.config == tiny_lm.config


def test_corrupted_lm_checkpoint_is_rejected(tmp_path, tiny_lm):
    path = save_lm_checkpoint(tmp_path / "lm.safetensors", tiny_lm)
    _flip_last_byte(path)
    with pytest.raises(CheckpointError):
        load_lm_checkpoint(path)


def test_format_confusion_is_rejected(tmp_path, tiny_lm):
    path = save_lm_checkpoint(tmp_path / "lm.safetensors", tiny_lm)
    with pytest.raises(CheckpointError, match="expected 'explainrec-gnn'"):
        load_gnn_checkpoint(path)


def test_unified_checkpoint_round_trip_and_gnn_hash_check(tmp_path, tiny_lm):
    tiny_lm.freeze()
    config = AdapterConfig(num_experts=3, shared=False)
    adapters = AdapterPair(4, 16, config, Rng(2))
    path = save_unified_checkpoint(tmp_path / "unified.safetensors", tiny_lm, adapters, config,
                                   gnn_hash="abc123", run_config={"seed": 5})

    ckpt = load_unified_checkpoint(path, expected_gnn_hash="abc123")
    assert ckpt.gnn_hash == "abc123"
    assert ckpt.run_config == {"seed": 5}
    assert ckpt.adapter_config == config
    assert not ckpt.adapters.training
    for name, tensor in adapters.named_tensors().items():
        assert torch.equal(ckpt.adapters.named_tensors()[name], tensor)
    assert ckpt.lm.parameter_hash() == tiny_lm.parameter_hash()

    with pytest.raises(CheckpointError, match="gnn hash mismatch"):
        load_unified_checkpoint(path, expected_gnn_hash="other")


def test_gnn_checkpoint_stores_the_consumed_rng_state(tmp_path):
    graph = build_graph(random_interactions(Rng(8), 10, 10, 0.4), SplitSpec(0.3, 0.0, 8))
    config = GraphConfig(dim=4, num_layers=1, batch_size=8, lr=0.01, max_epochs=4, patience=10, recall_k=2)
    table, log = train_tokenizer(graph, config, seed=3)
    path = save_gnn_checkpoint(tmp_path / "gnn.safetensors", table, graph, log.best_epoch, log.rng_state)

    stored = load_gnn_checkpoint(path).rng_state
    assert stored == log.rng_state
    assert stored != Rng(3).get_state()

    # the restored generator continues where training left off
    resumed, reference = Rng(0), Rng(0)
    resumed.set_state(stored)
    reference.set_state(log.rng_state)
    assert resumed.random(6).tolist() == reference.random(6).tolist()
    assert resumed.random(6).tolist() != Rng(3).random(6).tolist()
