"""Config-driven four-stage pipeline with content-addressed caching.

Stages: (1) source the catalog, embeddings, and interactions (synthesize or
ingest), (2) fit codebooks and assign SIDs, (3) diagnostics report, (4) corpus
export and baseline training plus evaluation. Each stage is skipped when its
config and input hashes match the manifest and its outputs exist. If a cached
upstream artifact was edited on disk behind the manifest's back, the consuming
stage refuses to run rather than silently building on it; --force recomputes
everything.

Cache keys are content hashes of inputs plus the stage's config subsection.
Worker counts are excluded from the keys and never change artifact bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

from . import corpus as corpus_mod
from . import diagnostics, recommender, rq, synthgen
from .datamodel import (
    ids_path_for,
    k_core_filter,
    leave_last_out_split,
    load_embeddings,
    load_interactions,
    load_items,
    save_interactions,
    save_items,
    write_embeddings,
)

log = logging.getLogger("sidforge.pipeline")

MANIFEST_FORMAT = "sidforge-manifest-v1"
ENV_PREFIX = "SIDFORGE_"

DEFAULT_CONFIG = {
    "pipeline": {"mode": "synth", "output_dir": "sidforge_out", "workers": 1, "kcore": 0},
    "inputs": {"items": None, "embeddings": None, "interactions": None},
    "synth": None,
    "rq": {
        "levels": 3,
        "codebook_sizes": [64, 32, 16],
        "kmeans_max_iters": 50,
        "kmeans_rel_tol": 1e-4,
        "seed": 0,
        "normalize_inputs": False,
    },
    "corpus": {"n": 1000, "max_history": 20, "seed": 0},
    "eval": {
        "ks": [5, 10],
        "beam_size": 20,
        "order": 3,
        "alpha": 0.1,
        "include_validation": True,
        "ngram_include_validation": False,
    },
    "diagnostics": {"probe_seed": 0, "run_probe": True, "sim_curve": True},
    "stages": {"source": True, "tokenize": True, "diagnose": True, "corpus": True, "eval": True},
}


class StageRefusal(RuntimeError):
    """A cached input no longer matches its recorded hash."""

    def __init__(self, stage: int, name: str, message: str):
        super().__init__(f"stage {stage} ({name}): {message}")
        self.stage = stage
        self.name = name


class StageFailure(RuntimeError):
    """A stage could not produce its artifacts."""

    def __init__(self, stage: int, name: str, message: str):
        super().__init__(f"stage {stage} ({name}): {message}")
        self.stage = stage
        self.name = name


@dataclass(frozen=True)
class ArtifactPaths:
    items: Path
    embeddings: Path
    embedding_ids: Path
    interactions: Path
    model: Path
    assignment: Path
    diagnostics_json: Path
    diagnostics_table: Path
    corpus: Path
    vocabulary: Path
    ngram: Path
    metrics_json: Path
    metrics_csv: Path
    manifest: Path

    @classmethod
    def in_dir(cls, out_dir: Path) -> "ArtifactPaths":
        emb = out_dir / "embeddings.emb"
        return cls(
            items=out_dir / "items.jsonl",
            embeddings=emb,
            embedding_ids=ids_path_for(emb),
            interactions=out_dir / "interactions.tsv",
            model=out_dir / "model.rq",
            assignment=out_dir / "sids.jsonl",
            diagnostics_json=out_dir / "diagnostics.json",
            diagnostics_table=out_dir / "diagnostics.txt",
            corpus=out_dir / "corpus.jsonl",
            vocabulary=out_dir / "sid_vocab.txt",
            ngram=out_dir / "ngram.json",
            metrics_json=out_dir / "metrics.json",
            metrics_csv=out_dir / "metrics.csv",
            manifest=out_dir / "manifest.json",
        )


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_hash(obj) -> str:
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def atomic_write(path, writer) -> None:
    """Run writer against a temp path, then rename over the target, so readers
    never observe a partial file and failures leave no debris."""
    tmp = Path(str(path) + ".tmp")
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        tmp.unlink(missing_ok=True)


def _write_embeddings_atomic(emb, path) -> None:
    tmp = Path(str(path) + ".tmp")
    try:
        write_embeddings(emb, tmp)
        os.replace(ids_path_for(tmp), ids_path_for(path))
        os.replace(tmp, path)
    finally:
        tmp.unlink(missing_ok=True)
        ids_path_for(tmp).unlink(missing_ok=True)


def _write_json_atomic(obj, path) -> None:
    atomic_write(
        path,
        lambda tmp: Path(tmp).write_text(
            json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        ),
    )


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def apply_env_overrides(cfg: dict, env=None) -> dict:
    """Overlay SIDFORGE_<SECTION>_<KEY> environment variables; values are
    parsed as JSON when possible, otherwise kept as strings."""
    if env is None:
        env = os.environ
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in cfg.items()}
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        section, _, key = name[len(ENV_PREFIX):].partition("_")
        section = section.lower()
        key = key.lower()
        if section not in out or not key:
            log.warning("ignoring unrecognized override %s", name)
            continue
        if out[section] is None:
            out[section] = {}
        if not isinstance(out[section], dict):
            log.warning("ignoring override %s for non-section key", name)
            continue
        raw = env[name]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[section][key] = value
    return out


def load_config(path=None, env=None) -> dict:
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULT_CONFIG.items()}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise ValueError("pipeline config must be a JSON object")
        cfg = _merge(cfg, file_cfg)
    return apply_env_overrides(cfg, env)


def _read_manifest(path: Path) -> dict:
    if not path.exists():
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError):
        log.warning("unreadable manifest at %s; treating all stages as stale", path)
        return {}
    if manifest.get("format") != MANIFEST_FORMAT:
        return {}
    return manifest


class _Runner:
    def __init__(self, old_manifest: dict, force: bool):
        self.old_stages = {} if force else dict(old_manifest.get("stages", {}))
        self.new_stages = dict(self.old_stages)
        self.ledger: dict[str, str] = {}
        self.summary: dict[str, str] = {}
        self.force = force

    def run(self, number: int, name: str, cfg_hash: str, input_paths, output_paths, compute):
        input_hashes: dict[str, str] = {}
        for path in input_paths:
            key = str(path)
            exists = Path(path).exists()
            if key in self.ledger:
                actual = sha256_file(path) if exists else None
                if actual != self.ledger[key]:
                    raise StageRefusal(
                        number,
                        name,
                        f"cached input {path} no longer matches its recorded hash; "
                        f"use --force to rebuild",
                    )
                input_hashes[key] = self.ledger[key]
            elif exists:
                input_hashes[key] = sha256_file(path)
            else:
                raise StageFailure(number, name, f"missing input file {path}")
        entry = self.old_stages.get(name)
        hit = (
            not self.force
            and entry is not None
            and entry.get("config_hash") == cfg_hash
            and entry.get("input_files") == input_hashes
            and all(Path(p).exists() for p in output_paths)
        )
        if hit:
            output_hashes = dict(entry["output_files"])
        else:
            try:
                compute()
            except (StageRefusal, StageFailure):
                raise
            except Exception as exc:
                raise StageFailure(number, name, str(exc)) from exc
            output_hashes = {str(p): sha256_file(p) for p in output_paths}
        self.ledger.update(output_hashes)
        self.new_stages[name] = {
            "config_hash": cfg_hash,
            "input_files": input_hashes,
            "output_files": output_hashes,
        }
        self.summary[name] = "cache-hit" if hit else "ran"


def _load_model_and_assignment(paths: ArtifactPaths):
    model = rq.load_model(paths.model)
    assign = rq.load_assignment(paths.assignment)
    if assign.model_hash != model.model_hash():
        raise ValueError("assignment was produced by a different model")
    return model, assign


def run_pipeline(cfg: dict, force: bool = False):
    """Execute the enabled stages; returns (exit_status, summary). A nonzero
    status is the number of the stage that failed or refused."""
    pipe = cfg["pipeline"]
    out_dir = Path(pipe["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = ArtifactPaths.in_dir(out_dir)
    workers = int(pipe.get("workers", 1))
    kcore = int(pipe.get("kcore", 0) or 0)
    mode = pipe.get("mode", "synth")
    stages_on = cfg["stages"]
    runner = _Runner(_read_manifest(paths.manifest), force)
    summary: dict = {"output_dir": str(out_dir), "stages": runner.summary}

    def source_compute():
        if mode == "synth":
            if not cfg.get("synth"):
                raise ValueError("pipeline.mode is 'synth' but the synth section is empty")
            scfg = synthgen.SynthConfig.from_dict(cfg["synth"])
            catalog, emb, labels = synthgen.generate_catalog(scfg)
            interactions = synthgen.generate_interactions(catalog, labels, scfg)
        elif mode == "ingest":
            inputs = cfg["inputs"]
            catalog = load_items(inputs["items"])
            emb = load_embeddings(inputs["embeddings"])
            interactions = load_interactions(inputs["interactions"])
            unknown = [i for i in emb.item_ids if i not in catalog]
            if unknown:
                raise ValueError(f"{len(unknown)} embedding ids missing from the item file")
        else:
            raise ValueError(f"unknown pipeline.mode {mode!r}")
        if kcore >= 1:
            interactions = k_core_filter(interactions, kcore)
        atomic_write(paths.items, lambda tmp: save_items(catalog, tmp))
        _write_embeddings_atomic(emb, paths.embeddings)
        atomic_write(paths.interactions, lambda tmp: save_interactions(interactions, tmp))

    def tokenize_compute():
        emb = load_embeddings(paths.embeddings)
        rq_cfg = cfg["rq"]
        model = rq.fit_codebooks(
            emb,
            rq.RqConfig(
                levels=int(rq_cfg["levels"]),
                codebook_sizes=tuple(rq_cfg["codebook_sizes"]),
                kmeans_max_iters=int(rq_cfg["kmeans_max_iters"]),
                kmeans_rel_tol=float(rq_cfg["kmeans_rel_tol"]),
                seed=int(rq_cfg["seed"]),
                normalize_inputs=bool(rq_cfg["normalize_inputs"]),
            ),
            workers=workers,
        )
        assign = rq.assign_all(model, emb, workers=workers)
        atomic_write(paths.model, lambda tmp: rq.save_model(model, tmp))
        atomic_write(paths.assignment, lambda tmp: rq.save_assignment(assign, tmp))

    def diagnose_compute():
        model, assign = _load_model_and_assignment(paths)
        dcfg = cfg["diagnostics"]
        emb = load_embeddings(paths.embeddings) if dcfg.get("sim_curve", True) else None
        labels = None
        if dcfg.get("run_probe", True):
            catalog = load_items(paths.items)
            labels = {rec.item_id: rec.category for rec in catalog}
        report = diagnostics.build_report(
            assign,
            model,
            emb=emb,
            labels=labels,
            probe_seed=int(dcfg.get("probe_seed", 0)),
            workers=workers,
        )
        _write_json_atomic(diagnostics.report_to_dict(report), paths.diagnostics_json)
        atomic_write(
            paths.diagnostics_table,
            lambda tmp: Path(tmp).write_text(
                diagnostics.render_table(report) + "\n", encoding="utf-8"
            ),
        )

    def corpus_compute():
        model, assign = _load_model_and_assignment(paths)
        catalog = load_items(paths.items)
        split = leave_last_out_split(load_interactions(paths.interactions))
        ccfg = cfg["corpus"]
        records, _stats = corpus_mod.sample_corpus(
            split,
            catalog,
            assign,
            n=int(ccfg["n"]),
            seed=int(ccfg["seed"]),
            max_history=int(ccfg["max_history"]),
            model=model,
        )
        atomic_write(paths.corpus, lambda tmp: corpus_mod.write_corpus(records, tmp))
        atomic_write(paths.vocabulary, lambda tmp: corpus_mod.write_sid_vocabulary(model, tmp))

    def eval_compute():
        model, assign = _load_model_and_assignment(paths)
        split = leave_last_out_split(load_interactions(paths.interactions))
        ecfg = cfg["eval"]
        sizes = model.effective_sizes
        ngram = recommender.train_ngram(
            split,
            assign,
            sizes,
            order=int(ecfg["order"]),
            alpha=float(ecfg["alpha"]),
            include_validation=bool(ecfg.get("ngram_include_validation", False)),
        )
        trie = rq.build_trie(assign)
        ks = tuple(int(k) for k in ecfg["ks"])
        report = recommender.evaluate(
            ngram,
            split,
            assign,
            trie,
            sizes,
            ks=ks,
            beam_size=int(ecfg["beam_size"]),
            include_validation=bool(ecfg.get("include_validation", True)),
        )
        popular = recommender.popularity_ranking(
            split, assign, include_validation=bool(ecfg.get("include_validation", True))
        )
        pop_report = recommender.evaluate_static_ranking(popular, split, assign, ks=ks)
        atomic_write(paths.ngram, lambda tmp: recommender.save_ngram(ngram, tmp))
        _write_json_atomic(
            {"ngram": report.to_dict(), "popularity": pop_report.to_dict()},
            paths.metrics_json,
        )
        atomic_write(paths.metrics_csv, lambda tmp: recommender.write_metrics_csv(report, tmp))

    try:
        if stages_on.get("source", True):
            source_inputs = []
            s1_cfg = {"mode": mode, "kcore": kcore, "synth": cfg.get("synth")}
            if mode == "ingest":
                s1_cfg["inputs"] = cfg["inputs"]
                source_inputs = [
                    p
                    for p in (
                        cfg["inputs"].get("items"),
                        cfg["inputs"].get("embeddings"),
                        cfg["inputs"].get("interactions"),
                    )
                    if p
                ]
            runner.run(
                1,
                "source",
                config_hash(s1_cfg),
                source_inputs,
                [paths.items, paths.embeddings, paths.embedding_ids, paths.interactions],
                source_compute,
            )
        if stages_on.get("tokenize", True):
            runner.run(
                2,
                "tokenize",
                config_hash({"rq": cfg["rq"]}),
                [paths.embeddings, paths.embedding_ids],
                [paths.model, paths.assignment],
                tokenize_compute,
            )
        if stages_on.get("diagnose", True):
            runner.run(
                3,
                "diagnose",
                config_hash({"diagnostics": cfg["diagnostics"]}),
                [paths.model, paths.assignment, paths.embeddings, paths.items],
                [paths.diagnostics_json, paths.diagnostics_table],
                diagnose_compute,
            )
        if stages_on.get("corpus", True):
            runner.run(
                4,
                "corpus",
                config_hash({"corpus": cfg["corpus"]}),
                [paths.model, paths.assignment, paths.items, paths.interactions],
                [paths.corpus, paths.vocabulary],
                corpus_compute,
            )
        if stages_on.get("eval", True):
            runner.run(
                4,
                "eval",
                config_hash({"eval": cfg["eval"]}),
                [paths.model, paths.assignment, paths.interactions],
                [paths.ngram, paths.metrics_json, paths.metrics_csv],
                eval_compute,
            )
    except StageRefusal as refusal:
        log.error("%s", refusal)
        summary["error"] = str(refusal)
        return refusal.stage, summary
    except StageFailure as failure:
        log.error("%s", failure)
        summary["error"] = str(failure)
        return failure.stage, summary

    _write_json_atomic(
        {"format": MANIFEST_FORMAT, "stages": runner.new_stages}, paths.manifest
    )
    return 0, summary
