"""Command-line entry points.

Every subcommand is a thin wrapper over one module operation. Machine-readable
JSON goes to stdout; logs and human-readable tables go to stderr. Commands
that draw random numbers require an explicit --seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import diagnostics, pipeline, recommender, rq, synthgen
from .datamodel import (
    CatalogError,
    EmbeddingIOError,
    EmbeddingSet,
    InteractionError,
    k_core_filter,
    leave_last_out_split,
    load_embeddings,
    load_interactions,
    load_items,
    save_interactions,
    save_items,
)

log = logging.getLogger("sidforge.cli")

_KNOWN_ERRORS = (
    CatalogError,
    EmbeddingIOError,
    InteractionError,
    rq.RqError,
    synthgen.SynthError,
    diagnostics.DiagnosticsError,
    corpus_mod.CorpusError,
    recommender.RecommenderError,
    ValueError,
    OSError,
)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _parse_ks(text: str) -> tuple[int, ...]:
    ks = tuple(int(part) for part in text.split(",") if part.strip())
    if not ks:
        raise ValueError(f"no cutoffs in {text!r}")
    return ks


def _parse_sizes(text: str) -> tuple[int, ...]:
    sizes = tuple(int(part) for part in text.split(",") if part.strip())
    if not sizes:
        raise ValueError(f"no codebook sizes in {text!r}")
    return sizes


def _load_split(path, kcore: int):
    interactions = load_interactions(path)
    if kcore >= 1:
        interactions = k_core_filter(interactions, kcore)
    return leave_last_out_split(interactions)


def _cmd_synth(args) -> int:
    cfg = synthgen.load_synth_config(args.config)
    if args.seed is not None:
        cfg = synthgen.SynthConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    catalog, emb, labels = synthgen.generate_catalog(cfg)
    interactions = synthgen.generate_interactions(catalog, labels, cfg)
    if args.kcore >= 1:
        interactions = k_core_filter(interactions, args.kcore)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = pipeline.ArtifactPaths.in_dir(out_dir)
    pipeline.atomic_write(paths.items, lambda tmp: save_items(catalog, tmp))
    pipeline._write_embeddings_atomic(emb, paths.embeddings)
    pipeline.atomic_write(paths.interactions, lambda tmp: save_interactions(interactions, tmp))
    _emit(
        {
            "items": len(catalog),
            "users": len(interactions.by_user()),
            "events": len(interactions.events),
            "dim": emb.dim,
            "categories": cfg.num_categories,
            "paths": {
                "items": str(paths.items),
                "embeddings": str(paths.embeddings),
                "interactions": str(paths.interactions),
            },
        }
    )
    return 0


def _cmd_ingest(args) -> int:
    catalog = load_items(args.items)
    emb = load_embeddings(args.embeddings)
    interactions = load_interactions(args.interactions)
    unknown = [i for i in emb.item_ids if i not in catalog]
    if unknown:
        raise CatalogError(f"{len(unknown)} embedding ids missing from the item file")
    raw_events = len(interactions.events)
    if args.kcore >= 1:
        interactions = k_core_filter(interactions, args.kcore)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = pipeline.ArtifactPaths.in_dir(out_dir)
    pipeline.atomic_write(paths.items, lambda tmp: save_items(catalog, tmp))
    pipeline._write_embeddings_atomic(emb, paths.embeddings)
    pipeline.atomic_write(paths.interactions, lambda tmp: save_interactions(interactions, tmp))
    _emit(
        {
            "items": len(catalog),
            "embeddings": emb.count,
            "events_in": raw_events,
            "events_kept": len(interactions.events),
            "users_kept": len(interactions.by_user()),
            "kcore": args.kcore,
        }
    )
    return 0


def _cmd_fit(args) -> int:
    emb = load_embeddings(args.embeddings)
    cfg = rq.RqConfig(
        levels=args.levels,
        codebook_sizes=_parse_sizes(args.sizes),
        kmeans_max_iters=args.max_iters,
        kmeans_rel_tol=args.tol,
        seed=args.seed,
        normalize_inputs=args.normalize,
    )
    model = rq.fit_codebooks(emb, cfg, workers=args.workers)
    pipeline.atomic_write(args.out, lambda tmp: rq.save_model(model, tmp))
    _emit(
        {
            "model_hash": model.model_hash(),
            "levels": model.levels,
            "dim": model.dim,
            "configured_sizes": list(cfg.codebook_sizes),
            "effective_sizes": list(model.effective_sizes),
            "final_mse": [stats.mse_trace[-1] for stats in model.fit_stats],
            "path": str(args.out),
        }
    )
    return 0


def _cmd_encode(args) -> int:
    model = rq.load_model(args.model)
    emb = load_embeddings(args.embeddings)
    assign = rq.assign_all(model, emb, workers=args.workers)
    pipeline.atomic_write(args.out, lambda tmp: rq.save_assignment(assign, tmp))
    _emit(
        {
            "items": len(assign),
            "distinct_sids": len(assign.distinct_sids()),
            "model_hash": assign.model_hash,
            "path": str(args.out),
        }
    )
    return 0


def _cmd_decode(args) -> int:
    model = rq.load_model(args.model)
    tokens = rq.parse_sid(args.sid, model)
    vector = rq.decode(model, tokens, depth=args.depth)
    result = {"sid": rq.render_sid(tokens), "tokens": list(tokens), "dim": model.dim}
    if args.out:
        out_emb = EmbeddingSet([result["sid"]], vector[None, :].astype(np.float32))
        pipeline._write_embeddings_atomic(out_emb, Path(args.out))
        result["path"] = str(args.out)
    else:
        result["vector"] = [float(v) for v in vector]
    _emit(result)
    return 0


def _cmd_diagnose(args) -> int:
    model = rq.load_model(args.model)
    assign = rq.load_assignment(args.assignment)
    if assign.model_hash != model.model_hash():
        raise rq.RqError("assignment was produced by a different model")
    emb = load_embeddings(args.embeddings) if args.embeddings else None
    labels = None
    if args.items:
        if args.probe_seed is None:
            raise ValueError("--probe-seed is required when --items is given")
        catalog = load_items(args.items)
        labels = {rec.item_id: rec.category for rec in catalog}
    report = diagnostics.build_report(
        assign,
        model,
        emb=emb,
        labels=labels,
        probe_seed=args.probe_seed,
        workers=args.workers,
    )
    payload = diagnostics.report_to_dict(report)
    if args.out:
        pipeline._write_json_atomic(payload, args.out)
    if args.table:
        print(diagnostics.render_table(report), file=sys.stderr)
    _emit(payload)
    return 0


def _cmd_recon_curve(args) -> int:
    model = rq.load_model(args.model)
    emb = load_embeddings(args.embeddings)
    curve = diagnostics.reconstruction_curve(model, emb, h_max=args.h_max, workers=args.workers)
    payload = {
        "sims": {str(h): curve.sims[h] for h in sorted(curve.sims)},
        "n_items": curve.n_items,
        "n_zero_norm_originals": curve.n_zero_norm_originals,
        "zero_recon_counts": {str(h): curve.zero_recon_counts[h] for h in sorted(curve.zero_recon_counts)},
    }
    if args.out:
        pipeline._write_json_atomic(payload, args.out)
    _emit(payload)
    return 0


def _cmd_corpus(args) -> int:
    catalog = load_items(args.items)
    assign = rq.load_assignment(args.assignment)
    model = rq.load_model(args.model) if args.model else None
    if model is not None and assign.model_hash != model.model_hash():
        raise rq.RqError("assignment was produced by a different model")
    if args.vocab_out and model is None:
        raise ValueError("--vocab-out needs --model")
    split = _load_split(args.interactions, args.kcore)
    records, stats = corpus_mod.sample_corpus(
        split,
        catalog,
        assign,
        n=args.n,
        seed=args.seed,
        max_history=args.max_history,
        model=model,
    )
    pipeline.atomic_write(args.out, lambda tmp: corpus_mod.write_corpus(records, tmp))
    if args.chat_out:
        pipeline.atomic_write(
            args.chat_out, lambda tmp: corpus_mod.write_chat_corpus(records, tmp)
        )
    if args.vocab_out:
        pipeline.atomic_write(
            args.vocab_out, lambda tmp: corpus_mod.write_sid_vocabulary(model, tmp)
        )
    _emit(stats)
    return 0


def _cmd_train_baseline(args) -> int:
    model = rq.load_model(args.model)
    assign = rq.load_assignment(args.assignment)
    split = _load_split(args.interactions, args.kcore)
    ngram = recommender.train_ngram(
        split,
        assign,
        model.effective_sizes,
        order=args.order,
        alpha=args.alpha,
        include_validation=args.include_validation,
    )
    pipeline.atomic_write(args.out, lambda tmp: recommender.save_ngram(ngram, tmp))
    _emit(
        {
            "order": ngram.order,
            "alpha": ngram.alpha,
            "vocab_size": ngram.vocab_size,
            "contexts": len(ngram.counts),
            "path": str(args.out),
        }
    )
    return 0


def _cmd_eval(args) -> int:
    model = rq.load_model(args.model)
    assign = rq.load_assignment(args.assignment)
    if assign.model_hash != model.model_hash():
        raise rq.RqError("assignment was produced by a different model")
    ngram = recommender.load_ngram(args.ngram)
    split = _load_split(args.interactions, args.kcore)
    trie = rq.build_trie(assign)
    sizes = model.effective_sizes
    ks = _parse_ks(args.k)
    include_validation = not args.exclude_validation
    report = recommender.evaluate(
        ngram,
        split,
        assign,
        trie,
        sizes,
        ks=ks,
        beam_size=args.beam,
        include_validation=include_validation,
        keep_ranks=args.ranks_out is not None,
        unconstrained=args.unconstrained,
    )
    payload = report.to_dict()
    if args.baseline:
        popular = recommender.popularity_ranking(
            split, assign, include_validation=include_validation
        )
        pop_report = recommender.evaluate_static_ranking(popular, split, assign, ks=ks)
        payload["popularity"] = pop_report.to_dict()
    if args.ranks_out:
        pipeline._write_json_atomic(dict(sorted(report.per_user_ranks.items())), args.ranks_out)
    if args.out:
        pipeline._write_json_atomic(payload, args.out)
    if args.csv:
        pipeline.atomic_write(args.csv, lambda tmp: recommender.write_metrics_csv(report, tmp))
    _emit(payload)
    return 0


def _cmd_report(args) -> int:
    payload: dict = {}
    if args.diagnostics:
        with open(args.diagnostics, "r", encoding="utf-8") as fh:
            diag = json.load(fh)
        payload["diagnostics"] = diag
        print(
            "Collision {:.2f}%  Unique {:.2f}%  Util. {:.2f}%  Entropy {:.4f}".format(
                diag["collision_rate"] * 100.0,
                diag["unique_ratio"] * 100.0,
                diag["utilization"] * 100.0,
                diag["prefix_entropy"],
            ),
            file=sys.stderr,
        )
    if args.metrics:
        with open(args.metrics, "r", encoding="utf-8") as fh:
            metrics = json.load(fh)
        payload["metrics"] = metrics
        for model_name, values in sorted(metrics.items()):
            if not isinstance(values, dict):
                continue
            cells = "  ".join(
                f"{key} {values[key]:.4f}"
                for key in sorted(values)
                if key.startswith(("HR@", "NDCG@"))
            )
            print(f"{model_name}: {cells}", file=sys.stderr)
    if not payload:
        raise ValueError("nothing to report; pass --diagnostics and/or --metrics")
    _emit(payload)
    return 0


def _cmd_pipeline(args) -> int:
    cfg = pipeline.load_config(args.config)
    if args.output_dir:
        cfg["pipeline"]["output_dir"] = args.output_dir
    if args.workers is not None:
        cfg["pipeline"]["workers"] = args.workers
    status, summary = pipeline.run_pipeline(cfg, force=args.force)
    _emit(summary)
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sidforge",
        description="Semantic-ID codebooks, diagnostics, corpus export, and evaluation.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic catalog and interaction log")
    p.add_argument("--config", required=True, help="synthetic-config JSON file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--kcore", type=int, default=0, help="k-core filter (0 = off)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("ingest", help="validate and normalize external inputs")
    p.add_argument("--items", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--interactions", required=True)
    p.add_argument("--kcore", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("fit", help="fit residual-quantization codebooks")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--levels", type=int, required=True)
    p.add_argument("--sizes", required=True, help="comma-separated codebook sizes")
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--normalize", action="store_true", help="unit-normalize inputs first")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("encode", help="assign a SID to every embedding")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="assignment JSONL to write")
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", help="reconstruct the vector for a SID string")
    p.add_argument("--model", required=True)
    p.add_argument("--sid", required=True, help='e.g. "<a_239><b_112><c_7>"')
    p.add_argument("--depth", type=int, default=None, help="truncate to this many levels")
    p.add_argument("--out", default=None, help="binary embedding file to write")
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("diagnose", help="SID quality report")
    p.add_argument("--model", required=True)
    p.add_argument("--assignment", required=True)
    p.add_argument("--embeddings", default=None, help="enables the reconstruction curve")
    p.add_argument("--items", default=None, help="enables the category probe")
    p.add_argument("--probe-seed", type=int, default=None, help="required with --items")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=None, help="also write the JSON report here")
    p.add_argument("--table", action="store_true", help="print a table to stderr")
    p.set_defaults(func=_cmd_diagnose)

    p = sub.add_parser("recon-curve", help="cosine similarity by reconstruction depth")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--h-max", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_recon_curve)

    p = sub.add_parser("corpus", help="sample the conversational training corpus")
    p.add_argument("--items", required=True)
    p.add_argument("--assignment", required=True)
    p.add_argument("--interactions", required=True)
    p.add_argument("--model", default=None, help="validates SIDs; needed for --vocab-out")
    p.add_argument("--kcore", type=int, default=0)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--max-history", type=int, default=20)
    p.add_argument("--out", required=True, help="JSONL corpus to write")
    p.add_argument("--chat-out", default=None, help="rendered chat-text file")
    p.add_argument("--vocab-out", default=None, help="SID token vocabulary file")
    p.set_defaults(func=_cmd_corpus)

    p = sub.add_parser("train-baseline", help="train the n-gram sequence baseline")
    p.add_argument("--model", required=True)
    p.add_argument("--assignment", required=True)
    p.add_argument("--interactions", required=True)
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--include-validation", action="store_true")
    p.add_argument("--kcore", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_baseline)

    p = sub.add_parser("eval", help="next-item evaluation with constrained beam search")
    p.add_argument("--model", required=True)
    p.add_argument("--assignment", required=True)
    p.add_argument("--interactions", required=True)
    p.add_argument("--ngram", required=True)
    p.add_argument("--beam", type=int, default=20)
    p.add_argument("--k", default="5,10", help="comma-separated cutoffs")
    p.add_argument("--exclude-validation", action="store_true")
    p.add_argument("--unconstrained", action="store_true")
    p.add_argument("--baseline", action="store_true", help="also score the popularity ranking")
    p.add_argument("--kcore", type=int, default=0)
    p.add_argument("--ranks-out", default=None, help="per-user rank dump (JSON)")
    p.add_argument("--out", default=None)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="echo saved reports as JSON plus stderr tables")
    p.add_argument("--diagnostics", default=None)
    p.add_argument("--metrics", default=None)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("pipeline", help="run the cached four-stage pipeline")
    p.add_argument("--config", default=None, help="pipeline config JSON")
    p.add_argument("--output-dir", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--force", action="store_true", help="ignore the cache and rebuild")
    p.set_defaults(func=_cmd_pipeline)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except _KNOWN_ERRORS as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
