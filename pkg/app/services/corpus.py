"""
Corpus Service
Dataset ingestion, profile generation, ground-truth explanation distillation,
synthetic datasets and sparsity / zero-shot splits
"""
import json
import logging
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import ValidationError

from app.config.settings import SynthConfig
from app.models.records import DatasetRecord, ExplanationRecord, Profile, write_jsonl
from app.services.graph_cf import _id_key
from app.services.numerics import Rng
from app.services.text_backend import DISTILL, ITEM_PROFILE, USER_PROFILE, TextGenBackend, truncate_words
from app.services.tokenizer import load_template
from app.utils.errors import BackendError, DataError, MalformedRecordError

logger = logging.getLogger(__name__)

MAX_EXPLANATION_WORDS = 50

DEFAULT_ASPECTS = (
    "quiet", "sturdy", "compact", "bright", "durable", "elegant", "portable", "cheap",
    "fast", "warm", "crisp", "smooth", "rugged", "vivid", "cozy", "sleek",
)
DEFAULT_PERSONAS = ("gamer", "reader", "traveler", "cook", "student", "runner", "painter", "gardener")

PathLike = Union[str, Path]


# ---------------------------------------------------------------- ingestion

@dataclass
class LoadedDataset:
    records: List[DatasetRecord]
    duplicates: int = 0


def load_dataset(path: PathLike) -> LoadedDataset:
    """
    Parse a JSON Lines dataset file

    Duplicate (user_id, item_id) pairs keep the last occurrence; the number of
    duplicates is reported.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    records: "OrderedDict[Tuple[Any, Any], DatasetRecord]" = OrderedDict()
    duplicates = 0
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = DatasetRecord.model_validate(json.loads(line))
            except json.JSONDecodeError as e:
                raise MalformedRecordError(str(path), line_number, f"invalid JSON: {e.msg}") from e
            except ValidationError as e:
                raise MalformedRecordError(str(path), line_number, str(e.errors()[0]["msg"])) from e
            if record.key in records:
                duplicates += 1
            records[record.key] = record
    if duplicates:
        logger.warning("%s: %d duplicate (user, item) pairs, kept the last occurrence", path, duplicates)
    logger.info("Loaded %d records from %s", len(records), path)
    return LoadedDataset(list(records.values()), duplicates)


def save_dataset(path: PathLike, records: Sequence[DatasetRecord]) -> Path:
    return write_jsonl(path, list(records))


def dataset_stats(records: Sequence[DatasetRecord]) -> Dict[str, int]:
    return {
        "users": len({r.user_id for r in records}),
        "items": len({r.item_id for r in records}),
        "interactions": len(records),
    }


# ---------------------------------------------------------------- profiles

@dataclass
class ItemInfo:
    item_id: Any
    meta: Dict[str, Any]
    reviews: List[Tuple[Any, str]]  # (user_id, review) sorted by user id


def collect_items(records: Sequence[DatasetRecord]) -> Dict[Any, ItemInfo]:
    items: Dict[Any, ItemInfo] = {}
    for r in records:
        info = items.setdefault(r.item_id, ItemInfo(r.item_id, {}, []))
        info.meta.update(r.meta)
        if r.review.strip():
            info.reviews.append((r.user_id, r.review))
    for info in items.values():
        info.reviews.sort(key=lambda ur: _id_key(ur[0]))
    return dict(sorted(items.items(), key=lambda kv: _id_key(kv[0])))


def sample_items(ids: Sequence[Any], sample_size: int, rng: Rng) -> List[Any]:
    """Seeded sample without replacement, returned in id order; everything when sample_size >= len(ids)"""
    ordered = sorted(ids, key=_id_key)
    if sample_size >= len(ordered):
        return ordered
    picks = rng.choice(len(ordered), size=sample_size, replace=False)
    return [ordered[int(k)] for k in sorted(picks)]


def _format_metadata(meta: Dict[str, Any]) -> str:
    return "; ".join(f"{k}: {v}" for k, v in sorted(meta.items()))


def generate_item_profile(backend: TextGenBackend, item: ItemInfo, template: Optional[str] = None,
                          review_sample: int = 3, seed: int = 0, max_words: int = 40) -> Profile:
    """Item profile from the item prompt filled with metadata and sampled reviews"""
    rng = Rng(seed)
    if len(item.reviews) > review_sample:
        picks = sorted(int(k) for k in rng.choice(len(item.reviews), size=review_sample, replace=False))
        reviews = [item.reviews[k][1] for k in picks]
    else:
        reviews = [r for _, r in item.reviews]
    template = load_template("item_profile_prompt.txt") if template is None else template
    prompt = template.replace("{metadata}", _format_metadata(item.meta)).replace("{reviews}", " / ".join(reviews))
    completion = backend.complete(ITEM_PROFILE, prompt, {"metadata": item.meta, "reviews": reviews}, max_words, seed)
    return Profile(subject="item", subject_id=item.item_id, text=completion.text, provenance=completion.provenance)


def generate_user_profile(backend: TextGenBackend, user_id: Any, item_profiles: Dict[Any, Profile],
                          template: Optional[str] = None, sample_size: int = 5, seed: int = 0,
                          max_words: int = 40) -> Profile:
    """User profile from a seeded sample of the profiles of the items the user interacted with"""
    if not item_profiles:
        raise DataError(f"user {user_id!r} has no interacted items with a profile")
    chosen = sample_items(list(item_profiles), sample_size, Rng(seed))
    texts = [item_profiles[i].text for i in chosen]
    template = load_template("user_profile_prompt.txt") if template is None else template
    prompt = template.replace("{item_profiles}", "\n".join(f"- {t}" for t in texts))
    completion = backend.complete(USER_PROFILE, prompt, {"item_profiles": texts}, max_words, seed)
    return Profile(subject="user", subject_id=user_id, text=completion.text, provenance=completion.provenance)


def build_profiles(backend: TextGenBackend, records: Sequence[DatasetRecord], sample_size: int = 5,
                   seed: int = 0) -> Tuple[Dict[Any, Profile], Dict[Any, Profile]]:
    """Item profiles for every item, then user profiles from the users' item profiles"""
    items = collect_items(records)
    item_profiles = {i: generate_item_profile(backend, info, seed=seed) for i, info in items.items()}
    per_user: Dict[Any, Dict[Any, Profile]] = {}
    for r in records:
        per_user.setdefault(r.user_id, {})[r.item_id] = item_profiles[r.item_id]
    user_profiles = {
        u: generate_user_profile(backend, u, per_user[u], sample_size=sample_size, seed=seed)
        for u in sorted(per_user, key=_id_key)
    }
    logger.info("Generated %d item and %d user profiles", len(item_profiles), len(user_profiles))
    return item_profiles, user_profiles


def save_profiles(path: PathLike, profiles: Sequence[Profile]) -> Path:
    return write_jsonl(path, list(profiles))


def load_profiles(path: PathLike) -> List[Profile]:
    with open(path, "r", encoding="utf-8") as f:
        return [Profile.model_validate(json.loads(line)) for line in f if line.strip()]


# ---------------------------------------------------------------- distillation

def distill_explanation(backend: TextGenBackend, review: str, template: Optional[str] = None,
                        max_words: int = MAX_EXPLANATION_WORDS, seed: int = 0) -> str:
    """Ground-truth explanation from the review text alone, capped at max_words"""
    if not review.strip():
        raise DataError("cannot distill an explanation from an empty review")
    template = load_template("distill_prompt.txt") if template is None else template
    prompt = template.replace("{max_words}", str(max_words)).replace("{review}", review)
    completion = backend.complete(DISTILL, prompt, {"review": review}, max_words, seed)
    return truncate_words(completion.text, max_words)


@dataclass
class DistillResult:
    explanations: List[ExplanationRecord]
    skipped: List[Tuple[Any, Any, str]] = field(default_factory=list)


def distill_batch(backend: TextGenBackend, records: Sequence[DatasetRecord], max_in_flight: int = 4,
                  max_words: int = MAX_EXPLANATION_WORDS, seed: int = 0) -> DistillResult:
    """Distill many reviews with bounded concurrency; output follows input order, failures are skipped"""

    def work(record: DatasetRecord):
        try:
            return distill_explanation(backend, record.review, max_words=max_words, seed=seed), None
        except (BackendError, DataError) as e:
            return None, str(e)

    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        outcomes = list(pool.map(work, records))

    result = DistillResult([])
    for record, (text, error) in zip(records, outcomes):
        if error is not None:
            logger.warning("Skipped explanation for (%s, %s): %s", record.user_id, record.item_id, error)
            result.skipped.append((record.user_id, record.item_id, error))
            continue
        result.explanations.append(ExplanationRecord(user_id=record.user_id, item_id=record.item_id, text=text,
                                                     provenance="distilled"))
    return result


def save_explanations(path: PathLike, rows: Sequence[ExplanationRecord]) -> Path:
    return write_jsonl(path, list(rows))


def load_explanations(path: PathLike) -> List[ExplanationRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"explanations file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return [ExplanationRecord.model_validate(json.loads(line)) for line in f if line.strip()]


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticDataset:
    records: List[DatasetRecord]
    user_group: List[int]
    item_group: List[int]  # -1 for background items
    item_aspects: List[Tuple[str, str]]
    personas: List[str]

    def structure(self) -> Dict[str, Any]:
        return {
            "user_group": self.user_group,
            "item_group": self.item_group,
            "item_aspects": [list(a) for a in self.item_aspects],
            "personas": self.personas,
        }

    def explanation(self, user: int, item: int) -> str:
        """Planted explanation wording: a function of (user group, item aspects)"""
        a1, a2 = self.item_aspects[item]
        return f"{a1} and {a2}, great for a {self.personas[self.user_group[user]]}."


def synthesize_dataset(seed: int = 0, config: Optional[SynthConfig] = None,
                       aspects: Sequence[str] = DEFAULT_ASPECTS) -> SyntheticDataset:
    """
    Block-structured interactions with templated reviews

    The first `group_item_fraction` of the items are split evenly into `groups` blocks;
    users in group g interact with block-g items with probability in_group_prob and with
    every other item (other blocks and background items) with probability cross_group_prob.
    """
    c = config or SynthConfig()
    m, n, groups = c.num_users, c.num_items, c.groups
    if min(m, n, groups) < 1:
        raise DataError("num_users, num_items and groups must all be >= 1")
    grouped = int(round(c.group_item_fraction * n))
    if groups > m or groups > grouped:
        raise DataError(f"{groups} groups is inconsistent with {m} users / {grouped} grouped items")
    if len(aspects) < 2:
        raise DataError("need at least two aspect words")

    rng = Rng(seed)
    user_group = [u * groups // m for u in range(m)]
    item_group = [i * groups // grouped if i < grouped else -1 for i in range(n)]
    pairs = list(permutations(aspects, 2))
    order = rng.permutation(len(pairs))
    item_aspects = [pairs[order[i % len(pairs)]] for i in range(n)]
    personas = [DEFAULT_PERSONAS[g] if g < len(DEFAULT_PERSONAS) else f"fan{g}" for g in range(groups)]
    categories = [f"group-{g}" for g in range(groups)]

    dataset = SyntheticDataset([], user_group, item_group, item_aspects, personas)
    draws = rng.random((m, n))
    for u in range(m):
        probs = np.array([c.in_group_prob if item_group[i] == user_group[u] else c.cross_group_prob for i in range(n)])
        chosen = list(np.flatnonzero(draws[u] < probs))
        if not chosen:
            chosen = [item_group.index(user_group[u])]
        for i in chosen:
            i = int(i)
            dataset.records.append(DatasetRecord(
                user_id=u,
                item_id=i,
                review=dataset.explanation(u, i).capitalize(),
                rating=5.0 if item_group[i] == user_group[u] else 3.0,
                meta={
                    "title": f"Item {i:03d}",
                    "category": categories[item_group[i]] if item_group[i] >= 0 else "misc",
                    "aspects": list(item_aspects[i]),
                },
                side={"group": user_group[u]},
            ))
    logger.info("Synthesized %d interactions (%d users, %d items, %d groups)", len(dataset.records), m, n, groups)
    return dataset


# ---------------------------------------------------------------- splits

def partition_records(records: Sequence[DatasetRecord], test_fraction: float = 0.1,
                      seed: int = 0) -> Tuple[List[DatasetRecord], List[DatasetRecord]]:
    """Per-user seeded train/test partition; every user keeps at least one train record"""
    by_user: Dict[Any, List[DatasetRecord]] = {}
    for r in records:
        by_user.setdefault(r.user_id, []).append(r)
    rng = Rng(seed)
    train, test = [], []
    for u in sorted(by_user, key=_id_key):
        rows = sorted(by_user[u], key=lambda r: _id_key(r.item_id))
        order = rng.permutation(len(rows))
        n_test = min(int(math.floor(test_fraction * len(rows))), len(rows) - 1)
        for rank, k in enumerate(order):
            (test if rank < n_test else train).append(rows[k])
    return train, test


@dataclass
class SparsitySplit:
    """
    `zero_shot` holds every edge of the zero-shot users; the ones drawn from the train
    partition form their known history, the test ones are the pairs to explain
    """
    train: List[DatasetRecord]
    bins: Dict[str, List[DatasetRecord]]
    bin_users: Dict[str, List[Any]]
    zero_shot: List[DatasetRecord]
    zero_shot_users: List[Any]
    zero_shot_test: List[DatasetRecord] = field(default_factory=list)
    zero_shot_history: Dict[Any, List[Any]] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def split_keys(self) -> Dict[str, List[Tuple[Any, Any]]]:
        keys = {name: [r.key for r in rows] for name, rows in self.bins.items()}
        keys["zero-shot"] = [r.key for r in self.zero_shot_test]
        return keys

    def manifest(self) -> Dict[str, Any]:
        return {
            "bins": {name: [[r.user_id, r.item_id] for r in rows] for name, rows in self.bins.items()},
            "bin_users": self.bin_users,
            "zero_shot": [[r.user_id, r.item_id] for r in self.zero_shot],
            "zero_shot_test": [[r.user_id, r.item_id] for r in self.zero_shot_test],
            "zero_shot_history": [[u, items] for u, items in self.zero_shot_history.items()],
            "zero_shot_users": self.zero_shot_users,
            "train_size": len(self.train),
            "warnings": self.warnings,
        }


def split_keys_from_manifest(manifest: Dict[str, Any]) -> Dict[str, List[Tuple[Any, Any]]]:
    keys = {name: [tuple(k) for k in rows] for name, rows in manifest["bins"].items()}
    keys["zero-shot"] = [tuple(k) for k in manifest.get("zero_shot_test", [])]
    return keys


def sparsity_split(train: Sequence[DatasetRecord], test: Sequence[DatasetRecord], bins: int = 5,
                   zero_shot_fraction: float = 0.0, seed: int = 0) -> SparsitySplit:
    """
    Bucket test users by their train frequency into `bins` equal-count bins (tst1 = rarest)
    and carve out zero-shot users whose every interaction leaves the training data
    """
    test_users = sorted({r.user_id for r in test}, key=_id_key)
    n_zero = int(math.floor(zero_shot_fraction * len(test_users)))
    rng = Rng(seed)
    zero_users = sorted((test_users[int(k)] for k in rng.choice(len(test_users), size=n_zero, replace=False)),
                        key=_id_key) if n_zero else []
    zero_set = set(zero_users)

    kept_train = [r for r in train if r.user_id not in zero_set]
    zero_shot = [r for r in list(train) + list(test) if r.user_id in zero_set]
    frequency: Dict[Any, int] = {}
    for r in kept_train:
        frequency[r.user_id] = frequency.get(r.user_id, 0) + 1

    ranked = sorted((u for u in test_users if u not in zero_set), key=lambda u: (frequency.get(u, 0), _id_key(u)))
    names = [f"tst{k + 1}" for k in range(bins)]
    distinct = sorted({frequency.get(u, 0) for u in ranked})
    warnings: List[str] = []
    if ranked and len(distinct) < bins:
        message = f"only {len(distinct)} distinct train frequencies for {bins} bins; bins merged"
        logger.warning(message)
        warnings.append(message)
        groups = [[u for u in ranked if frequency.get(u, 0) == f] for f in distinct]
        groups += [[] for _ in range(bins - len(groups))]
    else:
        groups = [list(chunk) for chunk in np.array_split(np.array(ranked, dtype=object), bins)]

    bin_users = {name: list(users) for name, users in zip(names, groups)}
    user_bin = {u: name for name, users in bin_users.items() for u in users}
    bin_rows: Dict[str, List[DatasetRecord]] = {name: [] for name in names}
    for r in test:
        if r.user_id in user_bin:
            bin_rows[user_bin[r.user_id]].append(r)
    history: Dict[Any, List[Any]] = {u: [] for u in zero_users}
    for r in train:
        if r.user_id in zero_set:
            history[r.user_id].append(r.item_id)
    history = {u: sorted(items, key=_id_key) for u, items in history.items()}
    zero_test = [r for r in test if r.user_id in zero_set]
    return SparsitySplit(kept_train, bin_rows, bin_users, zero_shot, zero_users, zero_test, history, warnings)


def zero_shot_user_embedding(final_item: torch.Tensor, item_degree: Sequence[int],
                             items: Sequence[int]) -> torch.Tensor:
    """
    Inference-time embedding for a user unseen in training: one LightGCN step over the
    final embeddings of the items the user is known to have interacted with,
    e_u = sum_i e_i / sqrt(|N_u| |N_i|)
    """
    items = sorted(set(int(i) for i in items))
    if not items:
        raise DataError("zero-shot user has no known interacted items")
    weights = torch.tensor([1.0 / math.sqrt(len(items) * max(int(item_degree[i]), 1)) for i in items],
                           dtype=final_item.dtype)
    return (weights.unsqueeze(1) * final_item[items]).sum(dim=0)
