"""
Command-line entry point

    python -m app.main [--config run.yaml] [--seed N] [--set key=value ...] COMMAND

Every command reads and writes fixed file names under the run directory
(`data.output_dir`) and drops the resolved run_config.yaml next to its outputs.
"""
import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import typer

from app.config.settings import RunConfig, load_run_config
from app.models.records import ExplanationRecord, PairRequest, write_jsonl
from app.services.adapter import AdapterPair
from app.services.checkpoint import (
    load_gnn_checkpoint,
    load_lm_checkpoint,
    load_unified_checkpoint,
    save_gnn_checkpoint,
    save_lm_checkpoint,
    save_unified_checkpoint,
)
from app.services.corpus import (
    build_profiles,
    dataset_stats,
    distill_batch,
    generate_user_profile,
    load_dataset,
    load_explanations,
    load_profiles,
    partition_records,
    save_dataset,
    save_explanations,
    save_profiles,
    sparsity_split,
    split_keys_from_manifest,
    synthesize_dataset,
)
from app.services.evaluation import ScorePair, load_report, make_scorer, render_report, render_variants, report, score_set
from app.services.explainer import (
    ABLATION_VARIANTS,
    CollaborativeEmbeddings,
    build_examples,
    explain_pair,
    heldout_nll,
    pretrain_lm,
    prompt_for,
    train_adapter,
    variant_name,
)
from app.services.graph_cf import SplitSpec, build_graph, train_tokenizer
from app.services.minilm import MiniLm
from app.services.numerics import Rng
from app.services.text_backend import make_backend
from app.services.tokenizer import Vocabulary
from app.utils.errors import ConfigError, DataError, PipelineError
from app.utils.logging import setup_logging

logger = logging.getLogger(__name__)

app = typer.Typer(add_completion=False, no_args_is_help=True,
                  help="Collaborative-embedding explanation pipeline (split, train, generate, evaluate)")

RUN_CONFIG = "run_config.yaml"


def handle_errors(fn: Callable) -> Callable:
    """Map pipeline errors to their pinned exit codes"""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PipelineError as e:
            logger.error("%s", e)
            raise typer.Exit(code=e.exit_code)

    return wrapper


class RunPaths:
    """Fixed layout of a run directory"""

    def __init__(self, root: Path, variant: str = "full"):
        self.root = Path(root)
        self.data = self.root / "data"
        self.split = self.root / "split"
        self.gnn = self.root / "gnn"
        self.lm = self.root / "lm"
        self.variant = self.root / variant

    @property
    def dataset(self) -> Path:
        return self.data / "dataset.jsonl"

    @property
    def train(self) -> Path:
        return self.split / "train.jsonl"

    @property
    def test(self) -> Path:
        return self.split / "test.jsonl"

    @property
    def manifest(self) -> Path:
        return self.split / "split_manifest.json"

    @property
    def profiles(self) -> Path:
        return self.split / "profiles.jsonl"

    @property
    def references(self) -> Path:
        return self.split / "explanations.jsonl"

    @property
    def pairs(self) -> Path:
        return self.split / "pairs.jsonl"

    @property
    def gnn_checkpoint(self) -> Path:
        return self.gnn / "gnn.safetensors"

    @property
    def lm_checkpoint(self) -> Path:
        return self.lm / "lm.safetensors"

    @property
    def unified_checkpoint(self) -> Path:
        return self.variant / "unified.safetensors"

    @property
    def generated(self) -> Path:
        return self.variant / "generated.jsonl"


def _paths(config: RunConfig) -> RunPaths:
    return RunPaths(Path(config.data.output_dir), variant_name(config.ablation))


def _progress() -> bool:
    return sys.stderr.isatty()


def _write_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def _read_json(path: Path) -> Any:
    if not path.exists():
        raise DataError(f"file not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _profile_maps(path: Path) -> Tuple[Dict[Any, Any], Dict[Any, Any]]:
    if not path.exists():
        logger.warning("No profiles at %s; prompts will omit them", path)
        return {}, {}
    profiles = load_profiles(path)
    users = {p.subject_id: p for p in profiles if p.subject == "user"}
    items = {p.subject_id: p for p in profiles if p.subject == "item"}
    return users, items


def _reference_map(path: Path) -> Dict[Tuple[Any, Any], str]:
    return {r.key: r.text for r in load_explanations(path) if r.text is not None}


def _embeddings(path: Path) -> Tuple[CollaborativeEmbeddings, str]:
    ckpt = load_gnn_checkpoint(path)
    return CollaborativeEmbeddings.from_table(ckpt.table, ckpt.user_ids, ckpt.item_ids, ckpt.item_degree), ckpt.table_hash


@app.callback()
def main(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, "--config", help="YAML run configuration"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Global seed"),
    overrides: Optional[List[str]] = typer.Option(None, "--set", help="Dotted override, e.g. graph.lr=0.01"),
    run_dir: Optional[Path] = typer.Option(None, "--run-dir", help="Output directory (data.output_dir)"),
    no_profiles: bool = typer.Option(False, "--no-profiles", help="Ablation: prompts without profiles"),
    no_injection: bool = typer.Option(False, "--no-injection", help="Ablation: no per-layer injection"),
    zero_shot: bool = typer.Option(False, "--zero-shot", help="Embed unseen users with the inference-time rule"),
    log_level: Optional[str] = typer.Option(None, "--log-level"),
):
    setup_logging(log_level)
    try:
        resolved = load_run_config(config, list(overrides or []))
    except ConfigError as e:
        logger.error("%s", e)
        raise typer.Exit(code=e.exit_code)
    if seed is not None:
        resolved.seed = seed
    if run_dir is not None:
        resolved.data.output_dir = str(run_dir)
    if no_profiles:
        resolved.ablation.profiles = False
    if no_injection:
        resolved.ablation.injection = False
    if zero_shot:
        resolved.zero_shot = True
    ctx.obj = resolved


@app.command()
@handle_errors
def synth(ctx: typer.Context, out: Optional[Path] = typer.Option(None, help="Dataset path to write")):
    """Write a block-structured synthetic review dataset"""
    config: RunConfig = ctx.obj
    paths = _paths(config)
    target = out or paths.dataset
    dataset = synthesize_dataset(config.seed, config.synth)
    save_dataset(target, dataset.records)
    _write_json(target.parent / "structure.json", dataset.structure())
    config.dump(target.parent / RUN_CONFIG)
    typer.echo(f"{len(dataset.records)} interactions -> {target}")


@app.command()
@handle_errors
def split(ctx: typer.Context, dataset: Optional[Path] = typer.Option(None, help="Dataset JSON Lines file")):
    """Train/test partition, sparsity bins, zero-shot users, profiles and ground-truth explanations"""
    config: RunConfig = ctx.obj
    paths = _paths(config)
    source = dataset or (Path(config.data.dataset) if config.data.dataset else paths.dataset)
    records = load_dataset(source).records
    train, test = partition_records(records, config.split.test_fraction, config.seed)
    sp = sparsity_split(train, test, config.split.bins, config.split.zero_shot_fraction, config.seed)

    save_dataset(paths.train, sp.train)
    save_dataset(paths.test, test)
    manifest = sp.manifest()
    manifest["stats"] = {"all": dataset_stats(records), "train": dataset_stats(sp.train)}
    _write_json(paths.manifest, manifest)

    backend = make_backend(config.backend)
    item_profiles, user_profiles = build_profiles(backend, sp.train, config.backend.profile_sample_size, config.seed)
    for u, history in sp.zero_shot_history.items():
        known = {i: item_profiles[i] for i in history if i in item_profiles}
        if known:
            user_profiles[u] = generate_user_profile(backend, u, known, sample_size=config.backend.profile_sample_size,
                                                     seed=config.seed)
    save_profiles(paths.profiles, list(item_profiles.values()) + list(user_profiles.values()))

    distilled = distill_batch(backend, records, config.backend.max_in_flight, config.decode.max_words, config.seed)
    references = [r.model_copy(update={"reference": r.text}) for r in distilled.explanations]
    save_explanations(paths.references, references)

    pairs = [PairRequest(user_id=r.user_id, item_id=r.item_id) for rows in sp.bins.values() for r in rows]
    pairs += [PairRequest(user_id=r.user_id, item_id=r.item_id, items=sp.zero_shot_history[r.user_id])
              for r in sp.zero_shot_test]
    write_jsonl(paths.pairs, pairs)
    config.dump(paths.split / RUN_CONFIG)
    sizes = {name: len(rows) for name, rows in sp.bins.items()}
    typer.echo(f"train {len(sp.train)}, bins {sizes}, zero-shot {len(sp.zero_shot_test)}, "
               f"skipped explanations {len(distilled.skipped)}")


@app.command("train-gnn")
@handle_errors
def train_gnn(ctx: typer.Context, dataset: Optional[Path] = typer.Option(None, help="Training interactions")):
    """Train the LightGCN tokenizer with Recall@K early stopping"""
    config: RunConfig = ctx.obj
    paths = _paths(config)
    records = load_dataset(dataset or paths.train).records
    spec = SplitSpec(config.split.validation_fraction, 0.0, config.seed)
    graph = build_graph([(r.user_id, r.item_id) for r in records], spec)
    table, log = train_tokenizer(graph, config.graph, config.seed, progress=_progress())
    save_gnn_checkpoint(paths.gnn_checkpoint, table, graph, log.best_epoch, log.rng_state)
    log.write(paths.gnn / "train_log.jsonl")
    config.dump(paths.gnn / RUN_CONFIG)
    typer.echo(f"best epoch {log.best_epoch}, stopped at {log.stopped_epoch} -> {paths.gnn_checkpoint}")


@app.command("pretrain-lm")
@handle_errors
def pretrain(ctx: typer.Context):
    """Pretrain the miniature LM on the templated training corpus, then freeze it"""
    config: RunConfig = ctx.obj
    paths = _paths(config)
    train_keys = [r.key for r in load_dataset(paths.train).records]
    references = _reference_map(paths.references)
    users, items = _profile_maps(paths.profiles)
    vocab = Vocabulary()
    corpus = [prompt_for(vocab, u, i, users, items, config.ablation.profiles, references[(u, i)])
              for u, i in train_keys if (u, i) in references]
    lm = MiniLm(vocab, config.lm, Rng(config.seed))
    lm, log = pretrain_lm(lm, corpus, config.pretrain, config.seed, progress=_progress())
    save_lm_checkpoint(paths.lm_checkpoint, lm)
    log.write(paths.lm / "pretrain_log.jsonl")
    config.dump(paths.lm / RUN_CONFIG)
    typer.echo(f"nll {log.entries[0]['loss']:.4f} -> {log.entries[-1]['loss']:.4f}" if log.entries else "no steps")
    if len(log.heldout) == 2:
        typer.echo(f"held-out nll {log.heldout[0]['loss']:.4f} -> {log.heldout[1]['loss']:.4f}")


@app.command("train-adapter")
@handle_errors
def train_adapter_cmd(ctx: typer.Context):
    """Train the collaborative adapter against the frozen LM and tokenizer"""
    config: RunConfig = ctx.obj
    paths = _paths(config)
    embeddings, gnn_hash = _embeddings(paths.gnn_checkpoint)
    lm = load_lm_checkpoint(paths.lm_checkpoint)
    references = _reference_map(paths.references)
    users, items = _profile_maps(paths.profiles)
    train_keys = {r.key for r in load_dataset(paths.train).records}
    train_refs = {k: v for k, v in references.items() if k in train_keys}
    examples = build_examples(lm.vocab, train_refs, embeddings, users, items, config.ablation.profiles)

    adapters = AdapterPair(embeddings.dim, lm.hidden, config.adapter, Rng(config.seed))
    adapters, log = train_adapter(lm, adapters, examples, embeddings, config.adapter_train, config.ablation,
                                  config.seed, progress=_progress())
    save_unified_checkpoint(paths.unified_checkpoint, lm, adapters, config.adapter, gnn_hash,
                            config.model_dump(mode="json"))
    log.write(paths.variant / "adapter_log.jsonl")

    test_refs = {r.key: references[r.key] for r in load_dataset(paths.test).records if r.key in references}
    heldout = build_examples(lm.vocab, test_refs, embeddings, users, items, config.ablation.profiles)
    if heldout:
        _write_json(paths.variant / "heldout.json",
                    {"nll": heldout_nll(lm, adapters, heldout, config.ablation.injection), "pairs": len(heldout)})
    config.dump(paths.variant / RUN_CONFIG)
    typer.echo(f"adapter nll {log.entries[0]['loss']:.4f} -> {log.entries[-1]['loss']:.4f}" if log.entries
               else "no steps")


@app.command()
@handle_errors
def generate(ctx: typer.Context, pairs: Optional[Path] = typer.Option(None, help="Pairs JSON Lines file")):
    """Explain every requested (user, item) pair"""
    config: RunConfig = ctx.obj
    paths = _paths(config)
    embeddings, gnn_hash = _embeddings(paths.gnn_checkpoint)
    unified = load_unified_checkpoint(paths.unified_checkpoint, expected_gnn_hash=gnn_hash)
    users, items = _profile_maps(paths.profiles)
    source = pairs or (Path(config.data.pairs) if config.data.pairs else paths.pairs)
    if not source.exists():
        raise DataError(f"pairs file not found: {source}")
    with open(source, "r", encoding="utf-8") as f:
        requests = [PairRequest.model_validate(json.loads(line)) for line in f if line.strip()]

    rows: List[ExplanationRecord] = []
    for req in requests:
        try:
            text = explain_pair(unified.lm, unified.adapters, embeddings, req.user_id, req.item_id, users, items,
                                config.decode, config.ablation, config.seed, req.items, config.zero_shot)
            rows.append(ExplanationRecord(user_id=req.user_id, item_id=req.item_id, text=text, seed=config.seed))
        except DataError as e:
            logger.warning("(%s, %s): %s", req.user_id, req.item_id, e)
            rows.append(ExplanationRecord(user_id=req.user_id, item_id=req.item_id, seed=config.seed, error=str(e)))
    write_jsonl(paths.generated, rows)
    config.dump(paths.variant / RUN_CONFIG)
    failed = sum(r.error is not None for r in rows)
    typer.echo(f"{len(rows) - failed} explanations, {failed} errors -> {paths.generated}")


def _evaluate_file(generated_path: Path, references: Dict[Tuple[Any, Any], str], splits: Dict[str, List[Tuple]],
                   scorers: List[str], out_dir: Path):
    generated = [r for r in load_explanations(generated_path) if r.text is not None and r.error is None]
    missing = [r.key for r in generated if r.key not in references]
    if missing:
        raise DataError(f"{len(missing)} generated pairs have no reference: {missing[:10]}")
    texts = {r.key: r.text for r in generated}
    pairs = [ScorePair(u, i, references[(u, i)], t) for (u, i), t in texts.items()]
    rows = [row for spec in scorers for row in score_set(make_scorer(spec), pairs)]
    rep = report(rows, texts, splits)
    rep.write(out_dir / "report.jsonl", out_dir / "report.txt")
    write_jsonl(out_dir / "scores.jsonl", rows)
    return load_report(out_dir / "report.jsonl")


@app.command()
@handle_errors
def evaluate(
    ctx: typer.Context,
    explanations: Optional[Path] = typer.Option(None, help="Generated explanations (default: every variant)"),
    references: Optional[Path] = typer.Option(None, help="Ground-truth explanations"),
    scorer: Optional[List[str]] = typer.Option(None, help="token_overlap or cmd:<command>"),
):
    """Score generations against references per split (overall, tst1..tst5, zero-shot)"""
    config: RunConfig = ctx.obj
    paths = _paths(config)
    ref_path = references or (Path(config.data.references) if config.data.references else paths.references)
    ref_map = _reference_map(ref_path)
    splits = split_keys_from_manifest(_read_json(paths.manifest)) if paths.manifest.exists() else {}
    scorers = list(scorer or ["token_overlap"])

    if explanations is not None:
        targets = {explanations.parent.name: explanations}
    else:
        targets = {name: paths.root / name / "generated.jsonl" for name in ABLATION_VARIANTS
                   if (paths.root / name / "generated.jsonl").exists()}
    if not targets:
        raise DataError(f"no generated explanations under {paths.root}")

    reports = {}
    for name, path in targets.items():
        reports[name] = _evaluate_file(path, ref_map, splits, scorers, path.parent)
        config.dump(path.parent / RUN_CONFIG)
        typer.echo(render_report(reports[name], title=f"Explanation quality ({name})"))
    if len(reports) > 1:
        side_by_side = render_variants(reports)
        (paths.root / "variants.txt").write_text(side_by_side, encoding="utf-8")
        typer.echo(side_by_side)


if __name__ == "__main__":
    app()
