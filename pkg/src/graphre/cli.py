"""Command-line entry point: ingest, augment, build-graphs, train, eval, report.

Exit codes: 0 ok, 2 validation failure, 3 I/O failure, 4 generation client
exhausted, 5 missing artifact / incomplete grid, 6 non-finite training loss.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

from graphre.config import ConfigError, PipelineConfig, write_run_metadata

log = logging.getLogger("graphre")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_CLIENT = 4
EXIT_MISSING = 5
EXIT_NONFINITE = 6


class CLIError(RuntimeError):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _csv_list(raw: Optional[str]) -> Optional[list[str]]:
    if raw is None:
        return None
    return [x.strip() for x in raw.split(",") if x.strip()]


def _load_config(args, flags: dict) -> PipelineConfig:
    try:
        return PipelineConfig.load(args.config, args.set or (), flags)
    except ConfigError as exc:
        raise CLIError(str(exc), EXIT_IO) from exc


# --- ingest ------------------------------------------------------------------


def _split_from_name(path: Path) -> Optional[str]:
    m = re.search(r"(train|dev|test)", path.stem)
    return m.group(1) if m else None


def cmd_ingest(args) -> int:
    from graphre import corpus as C

    cfg = _load_config(args, {"paths.raw": args.crossre_dir, "paths.corpus": args.out})
    started = _dt.datetime.now()
    out_dir = cfg.path("corpus")

    jobs: list[tuple[Path, str, Optional[str]]] = []
    if args.inputs:
        if not args.domain:
            raise CLIError("--domain is required with explicit input files", EXIT_VALIDATION)
        for p in args.inputs:
            jobs.append((Path(p), args.domain, args.split or _split_from_name(Path(p))))
    else:
        raw_dir = cfg.path("raw")
        if not raw_dir.is_dir():
            raise CLIError(f"raw data directory {raw_dir} not found", EXIT_IO)
        for dom in C.DOMAINS if not args.domain else [args.domain]:
            for split in C.SPLITS:
                for ext in (".json", ".jsonl"):
                    p = raw_dir / f"{dom}-{split}{ext}"
                    if p.exists():
                        jobs.append((p, dom, split))
                        break
        if not jobs:
            raise CLIError(f"no <domain>-<split>.json files under {raw_dir}", EXIT_IO)

    outputs: dict[tuple[str, str], list] = {}
    violations: list = []
    for path, domain, split in jobs:
        try:
            domain = C.normalize_domain(domain)
            records = list(C.iter_jsonl(path))
        except OSError as exc:
            raise CLIError(f"cannot read {path}: {exc}", EXIT_IO) from exc
        except C.CorpusError as exc:
            raise CLIError(str(exc), EXIT_VALIDATION) from exc
        docs = []
        for i, rec in enumerate(records):
            try:
                if args.format == "canonical":
                    doc = C.parse_document({**rec, "split": rec.get("split", split)}, domain)
                else:
                    doc = C.parse_upstream_record(rec, domain, split)
            except C.CorpusError as exc:
                violations.append(C.Violation(type(exc).__name__, f"{path.name}:{i + 1}", str(exc)))
                continue
            if not doc.doc_id:
                doc = dataclasses.replace(doc, doc_id=f"{domain}-{split or 'x'}-{i}")
            docs.append(doc)
        violations.extend(C.validate_corpus(docs))
        outputs.setdefault((domain, split or "train"), []).extend(docs)

    if violations:
        for v in violations:
            print(f"violation: {v}", file=sys.stderr)
        if not args.lenient:
            raise CLIError(f"{len(violations)} validation violation(s)", EXIT_VALIDATION)

    all_docs = [d for docs in outputs.values() for d in docs]
    stats = C.corpus_stats(dataclasses.replace(d, split=d.split or "train") for d in all_docs)
    for domain, _ in outputs:
        stats.setdefault(domain, C.DomainStats())
    try:
        for (domain, split), docs in outputs.items():
            C.write_corpus(C.corpus_file(out_dir, domain, split), docs)
        C.atomic_write_text(out_dir / "stats.tsv", C.format_stats_table(stats, sep="\t"))
    except OSError as exc:
        raise CLIError(f"cannot write corpus: {exc}", EXIT_IO) from exc
    print(C.format_stats_table(stats), end="")
    write_run_metadata(out_dir, "ingest", cfg, started, {"violations": [str(v) for v in violations]})
    return EXIT_OK


# --- augment -----------------------------------------------------------------


def cmd_augment(args) -> int:
    from graphre import augment as A
    from graphre import corpus as C

    cfg = _load_config(
        args,
        {
            "paths.corpus": args.corpus,
            "paths.augmented": args.out,
            "paths.cache": args.cache_dir,
            "augment.offline": True if args.offline else None,
            "augment.fixtures": args.fixtures,
            "augment.fallback": False if args.no_fallback else None,
            "augment.model": args.model,
            "augment.temperature": args.temperature,
            "augment.retries": args.retries,
            "augment.concurrency": args.concurrency,
        },
    )
    started = _dt.datetime.now()
    acfg = cfg.section("augment")
    src, dst = cfg.path("corpus"), cfg.path("augmented")
    files = sorted(src.glob("*.jsonl")) if src.is_dir() else []
    if not files:
        raise CLIError(f"no corpus files under {src}", EXIT_MISSING)

    if acfg["offline"]:
        fixtures = acfg.get("fixtures")
        if fixtures and not Path(fixtures).is_absolute():
            fixtures = cfg.root / fixtures
        try:
            client = A.MockClient(path=fixtures) if fixtures else A.MockClient()
        except OSError as exc:
            raise CLIError(f"cannot read fixtures: {exc}", EXIT_IO) from exc
        source = "mock"
    else:
        try:
            client = A.ChatCompletionsClient(
                model=acfg["model"],
                api_key_env=acfg["api_key_env"],
                base_url=acfg["base_url"],
                temperature=acfg["temperature"],
            )
        except A.ClientUnavailable as exc:
            raise CLIError(str(exc), EXIT_CLIENT) from exc
        source = "generated"

    policy = A.GenerationPolicy(
        retries=int(acfg["retries"]),
        fallback=bool(acfg["fallback"]),
        concurrency=int(acfg["concurrency"]),
        use_cache=not args.no_cache,
    )
    cache = A.SupportCache(cfg.path("cache"))
    stats = A.AugmentStats()
    for path in files:
        docs = C.read_corpus(path)
        try:
            out = A.augment_documents(docs, client, policy, cache, source, stats)
        except A.ClientUnavailable as exc:
            raise CLIError(str(exc), EXIT_CLIENT) from exc
        C.write_corpus(dst / path.name, out)
    print(f"augmented {len(files)} file(s): {json.dumps(stats.sources, sort_keys=True)}; client calls: {stats.client_calls}")
    write_run_metadata(
        dst,
        "augment",
        cfg,
        started,
        {
            "sources": stats.sources,
            "client_calls": stats.client_calls,
            "generation": {"model": acfg["model"], "temperature": acfg["temperature"], "system_prompt": None},
        },
    )
    return EXIT_OK


# --- build-graphs ------------------------------------------------------------


def cmd_build_graphs(args) -> int:
    from graphre import corpus as C
    from graphre.graph import build_graph, dump_graph

    cfg = _load_config(args, {"paths.corpus": args.corpus})
    started = _dt.datetime.now()
    src = cfg.path("corpus")
    out = Path(args.out) if args.out else cfg.path("runs").parent / "graphs"
    files = sorted(src.glob("*.jsonl")) if src.is_dir() else []
    if not files:
        raise CLIError(f"no corpus files under {src}", EXIT_MISSING)
    summary = ["doc_id\tnodes\tedges\tentities"]
    for path in files:
        for i, doc in enumerate(C.read_corpus(path)):
            g = build_graph(doc)
            name = re.sub(r"[^\w.-]", "_", doc.doc_id or f"{path.stem}-{i}")
            dump_graph(g, out / path.stem / name)
            summary.append(f"{doc.doc_id}\t{g.num_nodes}\t{len(g.edge_list())}\t{len(doc.entities)}")
    C.atomic_write_text(out / "graphs.tsv", "\n".join(summary) + "\n")
    print(f"wrote {len(summary) - 1} graph(s) to {out}")
    write_run_metadata(out, "build-graphs", cfg, started)
    return EXIT_OK


# --- train / eval ------------------------------------------------------------


def _run_configs(cfg: PipelineConfig):
    from graphre.encode import EncoderConfig
    from graphre.evaluation import RunConfig
    from graphre.model import GraphConfig

    t = cfg.section("training")
    enc = {k: v for k, v in cfg.section("encoder").items()}
    out = []
    for domain in t["domains"]:
        for fusion in t["fusions"]:
            out.append(
                RunConfig(
                    encoder=EncoderConfig(**enc),
                    graph=GraphConfig(fusion=fusion, **cfg.section("graph")),
                    domain=domain,
                    train_domain=t.get("train_domain"),
                    seed=int(t["seed"]),
                    epochs=int(t["epochs"]),
                    lr_encoder=float(t["lr_encoder"]),
                    lr_head=float(t["lr_head"]),
                    batch_size=int(t["batch_size"]),
                    augmented=bool(t["augmented"]),
                    threshold=float(t["threshold"]),
                    multi_label=bool(t["multi_label"]),
                    max_grad_norm=float(t["max_grad_norm"]),
                )
            )
    return out


def _training_corpus(cfg: PipelineConfig, explicit: Optional[str]) -> Path:
    if explicit:
        return Path(explicit)
    if cfg.section("training")["augmented"] and cfg.path("augmented").is_dir():
        return cfg.path("augmented")
    return cfg.path("corpus")


def cmd_train(args) -> int:
    from graphre.corpus import load_domain
    from graphre.evaluation import NonFiniteLoss, cell_dir, train

    cfg = _load_config(
        args,
        {
            "encoder.model_name": args.encoder,
            "training.fusions": _csv_list(args.fusion),
            "training.domains": _csv_list(args.domain),
            "training.epochs": args.epochs,
            "training.seed": args.seed,
            "paths.runs": args.out,
        },
    )
    started = _dt.datetime.now()
    corpus_dir = _training_corpus(cfg, args.corpus)
    runs = cfg.path("runs")
    results = []
    for rc in _run_configs(cfg):
        splits = load_domain(corpus_dir, rc.train_domain or rc.domain)
        if not splits.get("train"):
            raise CLIError(f"no training split for {rc.train_domain or rc.domain} under {corpus_dir}", EXIT_MISSING)
        eval_splits = None
        if rc.train_domain and rc.train_domain != rc.domain:
            target = load_domain(corpus_dir, rc.domain)
            eval_splits = {k: v for k, v in target.items() if k in ("dev", "test")}
        out = cell_dir(runs, rc.cell)
        try:
            res = train(rc, splits, out, eval_splits)
        except NonFiniteLoss as exc:
            raise CLIError(f"non-finite loss in {'/'.join(rc.cell)}: {exc}", EXIT_NONFINITE) from exc
        except ValueError as exc:
            raise CLIError(str(exc), EXIT_VALIDATION) from exc
        score = res.metrics.get("test_macro_f1")
        results.append({"cell": list(rc.cell), "test_macro_f1": score})
        print(f"{'/'.join(rc.cell)}\ttest Macro-F1 {score:.2f}" if score is not None else "/".join(rc.cell))
    write_run_metadata(runs, "train", cfg, started, {"corpus": str(corpus_dir), "results": results})
    return EXIT_OK


def cmd_eval(args) -> int:
    from graphre.corpus import atomic_write_text, load_domain
    from graphre.evaluation import per_label_f1, predict, macro_f1, write_predictions
    from graphre.model import featurize_all, load_checkpoint
    from graphre.relclf import DecodePolicy

    cfg = _load_config(args, {})
    started = _dt.datetime.now()
    run = Path(args.run)
    ckpt = run / "checkpoint"
    if not (ckpt / "model.pt").exists():
        raise CLIError(f"no checkpoint under {run}", EXIT_MISSING)
    metrics_path = run / "metrics.json"
    meta = json.loads(metrics_path.read_text()) if metrics_path.exists() else {}
    domain = args.domain or meta.get("cell", {}).get("domain")
    if not domain:
        raise CLIError("cannot tell which domain to evaluate; pass --domain", EXIT_MISSING)
    train_cfg = meta.get("config", {})
    corpus_dir = Path(args.corpus) if args.corpus else _training_corpus(cfg, None)
    docs = load_domain(corpus_dir, domain).get(args.split)
    if docs is None:
        raise CLIError(f"no {args.split} split for {domain} under {corpus_dir}", EXIT_MISSING)
    if not train_cfg.get("augmented", True):
        docs = [d.with_support(None) for d in docs]

    model, tokenizer, enc_cfg, graph_cfg = load_checkpoint(ckpt)
    feats = featurize_all(docs, tokenizer, enc_cfg.max_length)
    policy = DecodePolicy(
        args.threshold if args.threshold is not None else train_cfg.get("threshold", 0.5),
        train_cfg.get("multi_label", True),
    )
    preds, golds, dump = predict(model, feats, policy)
    score = macro_f1(preds, golds)
    out = Path(args.out) if args.out else run
    write_predictions(out / f"predictions.{args.split}.jsonl", dump)
    record = {
        "cell": meta.get("cell", {"domain": domain, "fusion": graph_cfg.fusion, "encoder": enc_cfg.model_name}),
        "split": args.split,
        f"{args.split}_macro_f1": score,
        "threshold": policy.threshold,
        "per_label": per_label_f1(preds, golds),
    }
    atomic_write_text(out / f"eval.{args.split}.json", json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"{domain} {args.split} Macro-F1 {score:.2f} ({len(dump)} pairs)")
    write_run_metadata(out, "eval", cfg, started, {"run": str(run), "corpus": str(corpus_dir)})
    return EXIT_OK


# --- report ------------------------------------------------------------------


def _read_cells_tsv(path: Path) -> list[tuple[str, str, str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    try:
        return [(r["encoder"], r["fusion"].lower(), r["domain"].lower(), float(r["macro_f1"])) for r in rows]
    except KeyError as exc:
        raise CLIError(f"{path}: missing column {exc}", EXIT_VALIDATION) from exc


def cmd_report(args) -> int:
    from graphre import corpus as C
    from graphre.evaluation import MissingCell, ResultsTable, label_distribution_report, read_metric_records
    from graphre.gnn import FUSION_METHODS

    cfg = _load_config(args, {"paths.runs": args.runs, "paths.reports": args.out})
    started = _dt.datetime.now()
    rep = cfg.section("report")
    split = args.split or rep["split"]
    domains = _csv_list(args.domains) or rep.get("domains") or list(C.DOMAINS)
    fusions = _csv_list(args.fusions) or rep.get("fusions") or list(FUSION_METHODS)
    out = cfg.path("reports")

    if args.cells:
        records = _read_cells_tsv(Path(args.cells))
    else:
        runs = cfg.path("runs")
        if not runs.is_dir():
            raise CLIError(f"runs directory {runs} not found", EXIT_MISSING)
        records = read_metric_records(runs, split)
    table = ResultsTable.from_records(
        [r for r in records if r[1] in fusions and r[2] in domains], domains, fusions
    )
    if not table.cells:
        raise CLIError("no results to report", EXIT_MISSING)
    try:
        text = table.to_text()
    except MissingCell as exc:
        print("missing cells:", file=sys.stderr)
        for cell in exc.missing:
            print("  " + "/".join(cell), file=sys.stderr)
        raise CLIError(f"{len(exc.missing)} missing cell(s)", EXIT_MISSING) from exc

    C.atomic_write_text(out / "results.txt", text)
    C.atomic_write_text(out / "results.tsv", table.to_tsv())
    C.atomic_write_text(out / "results.json", table.to_json())
    figures = rep.get("figures", True) and not args.no_figures
    if figures:
        from graphre.plotting import plot_results_table

        plot_results_table(table, out / "results.png")
    if args.corpus:
        docs = []
        for path in sorted(Path(args.corpus).glob("*.jsonl")):
            docs.extend(C.read_corpus(path))
        present = [d for d in domains if any(doc.domain == d for doc in docs)]
        counts = {d: label_distribution_report(docs, d) for d in present}
        lines = ["label\t" + "\t".join(C.DOMAIN_TITLES[d] for d in present)]
        lines += [lab + "\t" + "\t".join(str(counts[d][lab]) for d in present) for lab in C.LABELS]
        lines.append("total\t" + "\t".join(str(sum(counts[d].values())) for d in present))
        C.atomic_write_text(out / "label_distribution.tsv", "\n".join(lines) + "\n")
        if figures and present:
            from graphre.plotting import plot_label_distribution

            plot_label_distribution(counts, out / "label_distribution.png")
    print(text, end="")
    write_run_metadata(out, "report", cfg, started, {"split": split})
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphre", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="YAML pipeline config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted)")
        return p

    p = common(sub.add_parser("ingest", help="convert CrossRE files into the canonical corpus"))
    p.add_argument("inputs", nargs="*", help="raw files (otherwise <domain>-<split>.json under --crossre-dir)")
    p.add_argument("--crossre-dir")
    p.add_argument("--domain")
    p.add_argument("--split", choices=["train", "dev", "test"])
    p.add_argument("--format", choices=["upstream", "canonical"], default="upstream")
    p.add_argument("--out")
    p.add_argument("--lenient", action="store_true", help="skip invalid records instead of failing")
    p.set_defaults(func=cmd_ingest)

    p = common(sub.add_parser("augment", help="attach LLM support paragraphs"))
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--cache-dir")
    p.add_argument("--offline", action="store_true", help="use the mock client")
    p.add_argument("--fixtures", help="canned paragraphs for --offline (JSON: sentence hash -> text)")
    p.add_argument("--no-fallback", action="store_true")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--model")
    p.add_argument("--temperature", type=float)
    p.add_argument("--retries", type=int)
    p.add_argument("--concurrency", type=int)
    p.set_defaults(func=cmd_augment)

    p = common(sub.add_parser("build-graphs", help="dump document graphs for inspection"))
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.set_defaults(func=cmd_build_graphs)

    p = common(sub.add_parser("train", help="train one or more (domain, fusion) cells"))
    p.add_argument("--corpus")
    p.add_argument("--out", help="runs directory")
    p.add_argument("--encoder")
    p.add_argument("--fusion", help="comma-separated fusion methods")
    p.add_argument("--domain", help="comma-separated domains")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a trained cell"))
    p.add_argument("--run", required=True, help="cell directory written by train")
    p.add_argument("--corpus")
    p.add_argument("--domain")
    p.add_argument("--split", default="test", choices=["train", "dev", "test"])
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("report", help="render the results grid"))
    p.add_argument("--runs")
    p.add_argument("--cells", help="long-format TSV: encoder, fusion, domain, macro_f1")
    p.add_argument("--out")
    p.add_argument("--split")
    p.add_argument("--domains")
    p.add_argument("--fusions")
    p.add_argument("--corpus", help="also write per-label distribution for this corpus")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
