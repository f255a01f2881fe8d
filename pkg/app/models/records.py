"""
Record models shared by the services and the CLI
"""
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator

Id = Union[int, str]


class DatasetRecord(BaseModel):
    """One (user, item) interaction with its review and item metadata"""
    model_config = ConfigDict(extra="ignore")

    user_id: Id
    item_id: Id
    review: str = ""
    rating: Optional[float] = None
    meta: Dict[str, Any] = Field(default_factory=dict)
    side: Dict[str, Any] = Field(default_factory=dict)

    @property
    def key(self):
        return (self.user_id, self.item_id)


class Profile(BaseModel):
    subject: Literal["user", "item"]
    subject_id: Id
    text: str
    provenance: Literal["template", "external"]

    @field_validator("text")
    @classmethod
    def _non_empty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("profile text must be non-empty")
        return v


class ExplanationRecord(BaseModel):
    user_id: Id
    item_id: Id
    text: Optional[str] = None
    reference: Optional[str] = None
    provenance: str = "generated"
    seed: Optional[int] = None
    error: Optional[str] = None
    scores: Dict[str, float] = Field(default_factory=dict)

    @property
    def key(self):
        return (self.user_id, self.item_id)


class PairRequest(BaseModel):
    user_id: Id
    item_id: Id
    items: List[Id] = Field(default_factory=list)  # known interactions for zero-shot users


class ScoreRow(BaseModel):
    user_id: Id
    item_id: Id
    scorer: str
    score: Optional[float] = None
    failed: bool = False
    error: Optional[str] = None


class TrainingLog(BaseModel):
    """Per-epoch / per-step entries of a training run"""
    entries: List[Dict[str, Any]] = Field(default_factory=list)
    heldout: List[Dict[str, Any]] = Field(default_factory=list)
    stopped_epoch: Optional[int] = None
    best_epoch: Optional[int] = None
    rng_state: Optional[Dict[str, Any]] = None

    def append(self, **entry: Any) -> None:
        self.entries.append(entry)

    def append_heldout(self, **entry: Any) -> None:
        self.heldout.append(entry)

    def to_jsonl(self) -> str:
        rows = self.entries + [dict(e, phase="heldout") for e in self.heldout]
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in rows)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path


def write_jsonl(path: Union[str, Path], rows: List[BaseModel]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row.model_dump(mode="json"), sort_keys=True) + "\n")
    return path
