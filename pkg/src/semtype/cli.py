"""Command-line entry point. Each stage reads and writes files in ``--out``.

Exit codes: 0 ok, 1 internal error, 2 config/input error, 3 backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .annotate import STRATEGIES, AnnotationRun, annotate
from .core import SemtypeError
from .dictionary import (
    DEFAULT_SEED_CLASSES,
    DataDictionary,
    LearnError,
    LearnerConfig,
    learn_dictionary,
)
from .evaluate import (
    FLAT,
    HIERARCHICAL,
    MetricsReport,
    evaluate,
    gap_report,
    ground_truth_of,
    strategy_comparison,
)
from .grammar import DecodeConfig, emit_gbnf, parse_gbnf
from .ingest import DatasetManifest, dataset_stats, load_all, table_stream
from .llm import (
    BackendError,
    CapabilityUnsupported,
    LocalBackend,
    MockBackend,
    MockScript,
    RemoteBackend,
    RequestLog,
    ToyModel,
    Vocabulary,
)
from .ontology import (
    BatchConfig,
    BuildReport,
    build_ontology,
    load_mapping,
    load_ontology,
    map_ground_truth,
    save_mapping,
    save_ontology,
)

log = logging.getLogger("semtype")

DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"
TOY_MERGES = ("Semantic-type::", "PROPERTY::", "::")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_BACKEND = 0, 1, 2, 3

# Flags that do not affect artifacts and are left out of config snapshots.
_UNSNAPSHOTTED = {"out", "func", "verbose", "request_log"}


class InputError(SemtypeError):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--manifest", help="dataset manifest (YAML/JSON)")
    p.add_argument("--delimiter", default=None, help="table field delimiter (default ,)")
    p.add_argument("--out", default="out", help="artifact directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-k", type=int, default=5)
    p.add_argument("--backend", choices=("mock", "remote", "local"), default="mock")
    p.add_argument("--script", help="mock backend script (YAML)")
    p.add_argument("--toy-seed", type=int, default=0, help="mock toy model weight seed")
    p.add_argument("--endpoint", default=DEFAULT_ENDPOINT)
    p.add_argument("--model", default="gpt-3.5-turbo")
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--budget", type=int, default=None, help="max backend requests")
    p.add_argument("--request-log", default=None, help="append-only JSONL request log")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="semtype", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"semtype {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", parents=[common], help="dataset statistics")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("learn-dict", parents=[common], help="learn the data dictionary")
    p.add_argument("--quiescence-window", type=int, default=5)
    p.add_argument("--seed-classes", default=",".join(DEFAULT_SEED_CLASSES))
    p.set_defaults(func=cmd_learn_dict)

    p = sub.add_parser("build-ontology", parents=[common], help="induce superclasses")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-depth", type=int, default=3)
    p.set_defaults(func=cmd_build_ontology)

    p = sub.add_parser("gen-grammar", parents=[common], help="compile ontology to GBNF")
    p.set_defaults(func=cmd_gen_grammar)

    p = sub.add_parser("annotate", parents=[common], help="annotate columns")
    p.add_argument("--strategy", choices=STRATEGIES, required=True)
    p.add_argument("--decode", choices=("beam", "greedy"), default="beam")
    p.add_argument("--beam-width", type=int, default=4)
    p.add_argument("--max-tokens", type=int, default=256)
    p.add_argument("--include-tree", action="store_true",
                   help="gcd: show the serialized tree in the prompt")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("evaluate", parents=[common], help="score an annotation run")
    p.add_argument("--strategy", choices=STRATEGIES, required=True)
    p.add_argument("--mode", choices=(FLAT, HIERARCHICAL), default=HIERARCHICAL)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", parents=[common], help="rank strategies by macro F1")
    p.add_argument("--mode", choices=(FLAT, HIERARCHICAL), default=HIERARCHICAL)
    p.add_argument("--reports", nargs="*", default=None,
                   help="STRATEGY=metrics.json pairs (default: all in --out)")
    p.add_argument("--baseline", default="flat")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gap", parents=[common], help="difference between two metric reports")
    p.add_argument("a", help="NAME=metrics.json")
    p.add_argument("b", help="NAME=metrics.json")
    p.set_defaults(func=cmd_gap)
    return parser


# -- helpers ------------------------------------------------------------------


def _manifest(args) -> DatasetManifest:
    if not args.manifest:
        raise InputError("--manifest is required")
    return DatasetManifest.load(args.manifest, args.delimiter)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(args, stage: str) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in _UNSNAPSHOTTED}
    path = _out(args) / f"{stage}.config.json"
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(path: Path, what: str, stage: str) -> Path:
    if not path.is_file():
        raise InputError(f"{what} not found at {path}; run `semtype {stage}` first")
    return path


def make_backend(args):
    request_log = RequestLog(args.request_log) if args.request_log else None
    common = {"budget": args.budget, "concurrency": args.concurrency, "request_log": request_log}
    if args.backend == "mock":
        script = MockScript.load(args.script) if args.script else MockScript()
        toy = ToyModel(Vocabulary.byte_level(TOY_MERGES), seed=args.toy_seed)
        return MockBackend(script, toy_model=toy, **common)
    if args.backend == "remote":
        return RemoteBackend(args.endpoint, args.model, **common)
    return LocalBackend.from_pretrained(args.model, **common)


def _parse_named(spec: str) -> tuple[str, Path]:
    name, sep, path = spec.partition("=")
    if not sep:
        path, name = spec, Path(spec).stem
    return name, Path(path)


# -- commands -----------------------------------------------------------------


def cmd_stats(args) -> int:
    stats = dataset_stats(_manifest(args), workers=args.concurrency)
    print(stats.render())
    return EXIT_OK


def cmd_learn_dict(args) -> int:
    manifest = _manifest(args)
    seeds = tuple(s.strip() for s in args.seed_classes.split(",") if s.strip())
    config = LearnerConfig(seeds, args.sample_k, args.quiescence_window, args.seed)
    backend = make_backend(args)
    out = _out(args)
    try:
        dictionary, trace = learn_dictionary(backend, table_stream(manifest, args.seed), config)
    except LearnError as exc:
        (out / "learn_trace.tsv").write_text(exc.trace.to_lines(), encoding="utf-8")
        raise
    dictionary.save(out / "dictionary.json")
    (out / "learn_trace.tsv").write_text(trace.to_lines(), encoding="utf-8")
    _snapshot(args, "learn-dict")
    state = "quiesced" if trace.quiesced else "stream exhausted before quiescence"
    print(f"{len(dictionary)} classes after {len(trace.entries)} tables ({state})")
    return EXIT_OK


def cmd_build_ontology(args) -> int:
    out = _out(args)
    dictionary = DataDictionary.load(_require(out / "dictionary.json", "dictionary", "learn-dict"))
    backend = make_backend(args)
    report = BuildReport()
    ontology = build_ontology(backend, dictionary, BatchConfig(args.batch_size, args.max_depth),
                              report)
    gt_labels: list[str] = []
    if args.manifest:
        manifest = _manifest(args)
        gt_labels = manifest.labels() or sorted(
            {lab for t in load_all(manifest, args.concurrency)
             for lab in (t.ground_truth or {}).values()}
        )
    result = map_ground_truth(backend, ontology, gt_labels) if gt_labels else None
    if result is not None:
        ontology = ontology.with_mapping(result.mapping)
    save_ontology(ontology, out / "ontology.txt")
    save_mapping(ontology, out / "gt_mapping.tsv")
    _snapshot(args, "build-ontology")
    print(f"{len(ontology)} nodes, {len(ontology.leaves())} leaves")
    if result is not None:
        print(f"ground-truth mapping coverage {result.coverage:.1%}"
              + (f"; unmapped: {', '.join(result.unmapped)}" if result.unmapped else ""))
    return EXIT_OK


def _load_tree(out: Path):
    ontology = load_ontology(_require(out / "ontology.txt", "ontology", "build-ontology"))
    mapping = out / "gt_mapping.tsv"
    return load_mapping(ontology, mapping) if mapping.is_file() else ontology


def cmd_gen_grammar(args) -> int:
    out = _out(args)
    text = emit_gbnf(_load_tree(out))
    parse_gbnf(text)
    (out / "grammar.gbnf").write_text(text, encoding="utf-8")
    _snapshot(args, "gen-grammar")
    print(f"wrote {out / 'grammar.gbnf'}")
    return EXIT_OK


def cmd_annotate(args) -> int:
    out = _out(args)
    manifest = _manifest(args)
    backend = make_backend(args)
    ontology = None
    label_space: list[str] = []
    if args.strategy == "flat":
        label_space = manifest.labels()
        if not label_space and (out / "dictionary.json").is_file():
            label_space = DataDictionary.load(out / "dictionary.json").names()
        if not label_space:
            raise InputError("flat strategy needs a manifest label_space or a dictionary")
    else:
        ontology = _load_tree(out)
    if args.strategy == "gcd":
        if not backend.supports_distribution:
            raise CapabilityUnsupported(
                f"--backend {args.backend} does not expose token probabilities"
            )
        grammar_path = _require(out / "grammar.gbnf", "grammar", "gen-grammar")
        if grammar_path.read_text(encoding="utf-8") != emit_gbnf(ontology):
            raise InputError("grammar.gbnf is stale; rerun `semtype gen-grammar`")
    decode = DecodeConfig(args.decode, args.beam_width, args.max_tokens, 0.0, args.seed)
    tables = load_all(manifest, args.concurrency)
    run = annotate(args.strategy, backend, tables, label_space=label_space, ontology=ontology,
                   decode=decode, sample_k=args.sample_k, seed=args.seed,
                   include_tree=args.include_tree)
    run.save(out / f"run_{args.strategy}.jsonl", ontology)
    _snapshot(args, f"annotate-{args.strategy}")
    abstains = sum(p.abstained for p in run.predictions)
    print(f"{args.strategy}: {len(run.predictions)} columns, {abstains} abstains, "
          f"{run.request_count} requests")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = _out(args)
    manifest = _manifest(args)
    tree = _load_tree(out) if (out / "ontology.txt").is_file() else None
    ontology = tree if args.mode == HIERARCHICAL else None
    if args.mode == HIERARCHICAL and tree is None:
        raise InputError("hierarchical mode needs ontology.txt; run `semtype build-ontology`")
    run_path = _require(out / f"run_{args.strategy}.jsonl", "annotation run", "annotate")
    run = AnnotationRun.load(run_path, tree)
    truth = ground_truth_of(load_all(manifest, args.concurrency))
    report = evaluate(run, truth, args.mode, ontology, dataset=manifest.name)
    stem = f"metrics_{args.strategy}_{args.mode}"
    report.save(out / f"{stem}.json")
    text = report.render(args.strategy)
    (out / f"{stem}.txt").write_text(text + "\n", encoding="utf-8")
    _snapshot(args, f"evaluate-{args.strategy}-{args.mode}")
    print(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    out = _out(args)
    if args.reports:
        pairs = [_parse_named(s) for s in args.reports]
    else:
        suffix = f"_{args.mode}.json"
        pairs = [
            (p.name[len("metrics_"):-len(suffix)], p)
            for p in sorted(out.glob(f"metrics_*{suffix}"))
        ]
    runs = []
    for name, path in pairs:
        if not path.is_file():
            raise InputError(f"metrics file {path} not found")
        runs.append((name, MetricsReport.load(path)))
    comparison = strategy_comparison(runs, args.baseline)
    text = comparison.render()
    (out / f"comparison_{args.mode}.txt").write_text(text + "\n", encoding="utf-8")
    (out / f"comparison_{args.mode}.json").write_text(
        json.dumps(comparison.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_gap(args) -> int:
    (name_a, path_a), (name_b, path_b) = _parse_named(args.a), _parse_named(args.b)
    for p in (path_a, path_b):
        if not p.is_file():
            raise InputError(f"metrics file {p} not found")
    gap = gap_report(MetricsReport.load(path_a), MetricsReport.load(path_b), name_a, name_b)
    print(gap.render())
    return EXIT_OK


INPUT_ERRORS = (FileNotFoundError, ValueError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (BackendError, LearnError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except SemtypeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
