"""
Checkpoint Service
Versioned safetensors containers for the tokenizer, the language model and the unified model

All descriptive fields live under one metadata key ("explainrec") as a sorted-key JSON string,
which keeps the file header byte-stable across runs.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from app.config.settings import AdapterConfig, LmConfig
from app.services.adapter import AdapterPair
from app.services.graph_cf import EmbeddingTable, InteractionGraph
from app.services.minilm import MiniLm, tensor_digest
from app.services.tokenizer import Vocabulary
from app.utils.errors import CheckpointError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
GNN_FORMAT, LM_FORMAT, UNIFIED_FORMAT = "explainrec-gnn", "explainrec-lm", "explainrec-unified"

PathLike = Union[str, Path]


def _write(path: PathLike, tensors: Dict[str, torch.Tensor], meta: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().contiguous().clone() for k, v in tensors.items()}
    save_file(tensors, str(path), metadata={"explainrec": json.dumps(meta, sort_keys=True)})
    logger.info("Wrote %s checkpoint %s", meta["format"], path)
    return path


def _read(path: PathLike, expected_format: str):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as f:
            meta = json.loads((f.metadata() or {})["explainrec"])
            tensors = {k: f.get_tensor(k) for k in f.keys()}
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if meta.get("format") != expected_format:
        raise CheckpointError(f"{path} is a {meta.get('format')!r} checkpoint, expected {expected_format!r}")
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('version')}")
    return tensors, meta


def table_digest(table: EmbeddingTable) -> str:
    tensors = {"layer0_user": table.layer0_user, "layer0_item": table.layer0_item}
    if table.final_user is not None:
        tensors.update(final_user=table.final_user, final_item=table.final_item)
    return tensor_digest(tensors)


@dataclass
class GnnCheckpoint:
    table: EmbeddingTable
    user_ids: List[Any]
    item_ids: List[Any]
    item_degree: List[int]
    epoch: Optional[int]
    rng_state: Optional[Dict[str, Any]]
    table_hash: str

    @property
    def user_index(self) -> Dict[Any, int]:
        return {raw: k for k, raw in enumerate(self.user_ids)}

    @property
    def item_index(self) -> Dict[Any, int]:
        return {raw: k for k, raw in enumerate(self.item_ids)}


def save_gnn_checkpoint(path: PathLike, table: EmbeddingTable, graph: InteractionGraph,
                        epoch: Optional[int] = None, rng_state: Optional[Dict[str, Any]] = None) -> Path:
    if table.final_user is None:
        table.refresh(graph)
    meta = {
        "format": GNN_FORMAT,
        "version": FORMAT_VERSION,
        "d": table.dim,
        "num_layers": table.num_layers,
        "num_users": graph.num_users,
        "num_items": graph.num_items,
        "epoch": epoch,
        "rng_state": rng_state,
        "user_index": graph.user_ids,
        "item_index": graph.item_ids,
        "item_degree": graph.item_degree().tolist(),
        "table_hash": table_digest(table),
    }
    tensors = {
        "layer0_user": table.layer0_user, "layer0_item": table.layer0_item,
        "final_user": table.final_user, "final_item": table.final_item,
    }
    return _write(path, tensors, meta)


def load_gnn_checkpoint(path: PathLike) -> GnnCheckpoint:
    tensors, meta = _read(path, GNN_FORMAT)
    table = EmbeddingTable(tensors["layer0_user"], tensors["layer0_item"], meta["num_layers"],
                           tensors["final_user"], tensors["final_item"])
    if table_digest(table) != meta["table_hash"]:
        raise CheckpointError(f"{path}: embedding hash mismatch (corrupted checkpoint)")
    return GnnCheckpoint(table, meta["user_index"], meta["item_index"], meta["item_degree"],
                         meta.get("epoch"), meta.get("rng_state"), meta["table_hash"])


def _lm_meta(lm: MiniLm) -> Dict[str, Any]:
    return {
        "vocab": lm.vocab.to_dict(),
        "lm_config": lm.config.model_dump(mode="json"),
        "frozen": lm.frozen,
        "lm_hash": lm.parameter_hash(),
    }


def _restore_lm(tensors: Dict[str, torch.Tensor], meta: Dict[str, Any], path: PathLike) -> MiniLm:
    lm = MiniLm(Vocabulary.from_dict(meta["vocab"]), LmConfig.model_validate(meta["lm_config"]))
    state = {k[len("lm."):]: v for k, v in tensors.items() if k.startswith("lm.")}
    try:
        lm.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: language model tensors do not match the stored config: {e}") from e
    if lm.parameter_hash() != meta["lm_hash"]:
        raise CheckpointError(f"{path}: language model hash mismatch (corrupted checkpoint)")
    if meta.get("frozen"):
        lm.freeze()
    return lm


def save_lm_checkpoint(path: PathLike, lm: MiniLm) -> Path:
    meta = {"format": LM_FORMAT, "version": FORMAT_VERSION, **_lm_meta(lm)}
    return _write(path, {f"lm.{k}": v for k, v in lm.state_dict().items()}, meta)


def load_lm_checkpoint(path: PathLike) -> MiniLm:
    tensors, meta = _read(path, LM_FORMAT)
    return _restore_lm(tensors, meta, path)


@dataclass
class UnifiedCheckpoint:
    lm: MiniLm
    adapters: AdapterPair
    adapter_config: AdapterConfig
    gnn_hash: str
    run_config: Dict[str, Any]


def save_unified_checkpoint(path: PathLike, lm: MiniLm, adapters: AdapterPair, adapter_config: AdapterConfig,
                            gnn_hash: str, run_config: Dict[str, Any]) -> Path:
    meta = {
        "format": UNIFIED_FORMAT,
        "version": FORMAT_VERSION,
        **_lm_meta(lm),
        "adapter_config": adapter_config.model_dump(mode="json"),
        "adapter_dims": [adapters.user.d_in, adapters.user.d_out],
        "gnn_hash": gnn_hash,
        "run_config": run_config,
    }
    tensors = {f"lm.{k}": v for k, v in lm.state_dict().items()}
    tensors.update({f"adapter.{k}": v for k, v in adapters.named_tensors().items()})
    return _write(path, tensors, meta)


def load_unified_checkpoint(path: PathLike, expected_gnn_hash: Optional[str] = None) -> UnifiedCheckpoint:
    tensors, meta = _read(path, UNIFIED_FORMAT)
    lm = _restore_lm(tensors, meta, path)
    if expected_gnn_hash is not None and meta["gnn_hash"] != expected_gnn_hash:
        raise CheckpointError(f"{path}: trained against a different tokenizer checkpoint (gnn hash mismatch)")
    adapter_config = AdapterConfig.model_validate(meta["adapter_config"])
    d_in, d_out = meta["adapter_dims"]
    adapters = AdapterPair(d_in, d_out, adapter_config)
    adapters.load_tensors({k[len("adapter."):]: v for k, v in tensors.items() if k.startswith("adapter.")})
    adapters.eval()
    return UnifiedCheckpoint(lm, adapters, adapter_config, meta["gnn_hash"], meta["run_config"])
