"""
Evaluation Service
Unique sentence ratio, pluggable per-pair scorers, mean/std aggregation and split reports
"""
import io
import json
import logging
import math
import re
import shlex
import subprocess
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

from rich.console import Console
from rich.table import Table

from app.models.records import ScoreRow
from app.services.text_backend import split_words
from app.utils.errors import DataError, ScorerError

logger = logging.getLogger(__name__)

OVERALL, ZERO_SHOT = "overall", "zero-shot"
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
_TOKEN = re.compile(r"\w+")

PathLike = Union[str, Path]
Key = Tuple[Any, Any]


def normalize_text(text: str) -> str:
    """Trim, collapse internal whitespace, casefold"""
    return " ".join(split_words(text)).casefold()


def usr(texts: Sequence[str], granularity: Literal["explanation", "sentence"] = "explanation") -> float:
    """
    Unique sentence ratio: distinct normalized texts over total texts

    With granularity="sentence" every explanation is first split at sentence-final
    punctuation and the ratio is taken over sentences.
    """
    if not texts:
        raise DataError("USR of an empty explanation list")
    if granularity == "sentence":
        units = [s for t in texts for s in _SENTENCE_END.split(t.strip()) if s.strip()]
    elif granularity == "explanation":
        units = list(texts)
    else:
        raise ValueError(f"unknown USR granularity {granularity!r}")
    if not units:
        raise DataError("USR of an empty explanation list")
    normalized = [normalize_text(u) for u in units]
    return len(set(normalized)) / len(normalized)


# ---------------------------------------------------------------- scorers

class ScorerPlugin(ABC):
    """Scores a candidate text against its reference"""
    name = "abstract"
    direction: Literal["higher-better", "lower-better"] = "higher-better"

    @abstractmethod
    def score(self, reference: str, candidate: str) -> float:
        ...

    def score_many(self, pairs: Sequence[Tuple[str, str]]) -> List[float]:
        return [self.score(r, c) for r, c in pairs]


class TokenOverlapScorer(ScorerPlugin):
    """Jaccard overlap of casefolded word sets; a stand-in for semantic scorers"""
    name = "token_overlap"
    direction = "higher-better"

    def score(self, reference: str, candidate: str) -> float:
        ref = set(_TOKEN.findall(reference.casefold()))
        cand = set(_TOKEN.findall(candidate.casefold()))
        if not ref and not cand:
            return 1.0
        return len(ref & cand) / len(ref | cand)


class ExternalProcessScorer(ScorerPlugin):
    """
    Runs `command` once per batch: JSON Lines {"reference", "candidate"} on stdin,
    one float per line on stdout. A non-zero exit fails the whole batch.
    """

    def __init__(self, command: Sequence[str], name: str = "external",
                 direction: Literal["higher-better", "lower-better"] = "higher-better", timeout: float = 600.0):
        self.command = list(command)
        self.name = name
        self.direction = direction
        self.timeout = timeout

    def score_many(self, pairs: Sequence[Tuple[str, str]]) -> List[float]:
        payload = "".join(json.dumps({"reference": r, "candidate": c}) + "\n" for r, c in pairs)
        try:
            proc = subprocess.run(self.command, input=payload, capture_output=True, text=True,
                                  timeout=self.timeout, check=False)
        except (OSError, subprocess.TimeoutExpired) as e:
            raise ScorerError(f"scorer {self.name!r} could not run: {e}") from e
        if proc.returncode != 0:
            raise ScorerError(f"scorer {self.name!r} exited with status {proc.returncode}: {proc.stderr.strip()}")
        lines = [line for line in proc.stdout.splitlines() if line.strip()]
        if len(lines) != len(pairs):
            raise ScorerError(f"scorer {self.name!r} returned {len(lines)} scores for {len(pairs)} pairs")
        try:
            return [float(line) for line in lines]
        except ValueError as e:
            raise ScorerError(f"scorer {self.name!r} wrote a non-numeric score: {e}") from e

    def score(self, reference: str, candidate: str) -> float:
        return self.score_many([(reference, candidate)])[0]


SCORERS = {TokenOverlapScorer.name: TokenOverlapScorer}


def make_scorer(spec: str) -> ScorerPlugin:
    """`token_overlap` or `cmd:<shell-split command>` for an external process scorer"""
    if spec in SCORERS:
        return SCORERS[spec]()
    if spec.startswith("cmd:"):
        return ExternalProcessScorer(shlex.split(spec[4:]), name=spec[4:].split()[0])
    raise ScorerError(f"unknown scorer {spec!r}")


class ScorePair(NamedTuple):
    user_id: Any
    item_id: Any
    reference: str
    candidate: str


def score_set(plugin: ScorerPlugin, pairs: Sequence[ScorePair], max_workers: int = 1) -> List[ScoreRow]:
    """
    One row per pair in input order; a failing pair yields a failed row

    Process-backed scorers are called once for the whole set, so one failure
    marks every row failed.
    """
    if isinstance(plugin, ExternalProcessScorer):
        try:
            scores: List[Any] = plugin.score_many([(p.reference, p.candidate) for p in pairs])
            errors: List[Optional[str]] = [None] * len(pairs)
        except ScorerError as e:
            logger.warning("%s", e)
            scores, errors = [None] * len(pairs), [str(e)] * len(pairs)
    else:
        def work(pair: ScorePair):
            try:
                value = float(plugin.score(pair.reference, pair.candidate))
                if not math.isfinite(value):
                    return None, f"non-finite score {value}"
                return value, None
            except Exception as e:  # plugins are third-party code
                return None, f"{type(e).__name__}: {e}"

        with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
            outcomes = list(pool.map(work, pairs))
        scores = [s for s, _ in outcomes]
        errors = [e for _, e in outcomes]

    rows = [
        ScoreRow(user_id=p.user_id, item_id=p.item_id, scorer=plugin.name, score=s, failed=e is not None, error=e)
        for p, s, e in zip(pairs, scores, errors)
    ]
    failures = sum(r.failed for r in rows)
    if failures:
        logger.warning("Scorer %s failed on %d/%d pairs", plugin.name, failures, len(rows))
    return rows


@dataclass
class Aggregate:
    mean: float
    std: float
    count: int
    failures: int = 0


def aggregate(rows: Sequence[ScoreRow]) -> Dict[str, Aggregate]:
    """Population mean and std per scorer (two-pass, exactly rounded sums)"""
    by_scorer: Dict[str, List[ScoreRow]] = {}
    for r in rows:
        by_scorer.setdefault(r.scorer, []).append(r)
    out: Dict[str, Aggregate] = {}
    for name in sorted(by_scorer):
        values = [r.score for r in by_scorer[name] if not r.failed]
        failures = len(by_scorer[name]) - len(values)
        if not values:
            raise ScorerError(f"scorer {name!r} has no successful rows")
        mean = math.fsum(values) / len(values)
        var = math.fsum((v - mean) ** 2 for v in values) / len(values)
        out[name] = Aggregate(mean, math.sqrt(var), len(values), failures)
    return out


# ---------------------------------------------------------------- reports

@dataclass
class SplitReport:
    split: str
    pairs: int
    usr: Optional[float]
    scores: Dict[str, Aggregate] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "split": self.split,
            "pairs": self.pairs,
            "usr": self.usr,
            "scores": {k: vars(v) for k, v in sorted(self.scores.items())},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SplitReport":
        return cls(data["split"], data["pairs"], data["usr"],
                   {k: Aggregate(**v) for k, v in data.get("scores", {}).items()})


@dataclass
class Report:
    tables: List[SplitReport]

    def table(self, split: str) -> SplitReport:
        return next(t for t in self.tables if t.split == split)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(t.to_dict(), sort_keys=True) + "\n" for t in self.tables)

    def write(self, jsonl_path: PathLike, text_path: Optional[PathLike] = None) -> Path:
        jsonl_path = Path(jsonl_path)
        jsonl_path.parent.mkdir(parents=True, exist_ok=True)
        jsonl_path.write_text(self.to_jsonl(), encoding="utf-8")
        if text_path is not None:
            Path(text_path).write_text(render_report(self), encoding="utf-8")
        return jsonl_path


def _split_report(name: str, keys: Sequence[Key], texts: Dict[Key, str], rows: Sequence[ScoreRow]) -> SplitReport:
    keyset = set(keys)
    split_rows = [r for r in rows if (r.user_id, r.item_id) in keyset]
    split_texts = [texts[k] for k in keys if k in texts]
    scores: Dict[str, Aggregate] = {}
    for scorer in sorted({r.scorer for r in split_rows}):
        mine = [r for r in split_rows if r.scorer == scorer]
        try:
            scores.update(aggregate(mine))
        except ScorerError:
            scores[scorer] = Aggregate(math.nan, math.nan, 0, len(mine))
    return SplitReport(name, len(split_texts), usr(split_texts) if split_texts else None, scores)


def report(rows: Sequence[ScoreRow], texts: Dict[Key, str],
           splits: Optional[Dict[str, Sequence[Key]]] = None) -> Report:
    """
    One table for all pairs, then one per named split (tst1..tst5, zero-shot)

    `texts` maps (user_id, item_id) to the generated explanation; USR is computed
    over the split's generated texts.
    """
    tables = [_split_report(OVERALL, list(texts), texts, rows)]
    for name, keys in (splits or {}).items():
        tables.append(_split_report(name, list(keys), texts, rows))
    return Report(tables)


def load_report(path: PathLike) -> Report:
    with open(path, "r", encoding="utf-8") as f:
        return Report([SplitReport.from_dict(json.loads(line)) for line in f if line.strip()])


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None or math.isnan(value) else f"{value:.4f}"


def render_report(rep: Report, title: str = "Explanation quality") -> str:
    scorers = sorted({name for t in rep.tables for name in t.scores})
    table = Table(title=title)
    table.add_column("split")
    table.add_column("pairs", justify="right")
    table.add_column("USR", justify="right")
    for name in scorers:
        table.add_column(name, justify="right")
        table.add_column(f"{name}_std", justify="right")
    for t in rep.tables:
        cells = [t.split, str(t.pairs), _fmt(t.usr)]
        for name in scorers:
            agg = t.scores.get(name)
            cells += [_fmt(agg.mean if agg else None), _fmt(agg.std if agg else None)]
        table.add_row(*cells)
    console = Console(file=io.StringIO(), width=120, record=True)
    console.print(table)
    return console.export_text()


def render_variants(reports: Dict[str, Report], split: str = OVERALL) -> str:
    """Side-by-side overall numbers for the ablation variants"""
    scorers = sorted({name for r in reports.values() for t in r.tables for name in t.scores})
    table = Table(title=f"Ablation variants ({split})")
    table.add_column("variant")
    table.add_column("USR", justify="right")
    for name in scorers:
        table.add_column(name, justify="right")
    for variant, rep in reports.items():
        t = rep.table(split)
        table.add_row(variant, _fmt(t.usr), *[_fmt(t.scores[n].mean if n in t.scores else None) for n in scorers])
    console = Console(file=io.StringIO(), width=120, record=True)
    console.print(table)
    return console.export_text()
