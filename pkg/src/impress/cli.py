"""Command-line entry point.

Exit status: 0 on success, 1 on user error (bad flags, missing or invalid
input files), 2 on internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from impress import evaluation as ev
from impress.catalog import FixtureSearchClient, HttpSearchClient, build_catalog, load_spcs, load_store, save_store
from impress.config import AppConfig, ConfigError, load_config, make_gateway
from impress.pipeline import Pipeline, conversation_from_json
from impress.service import response_body

logger = logging.getLogger("impress")


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _ks(text: str) -> list[int]:
    try:
        ks = sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not ks or ks[0] < 1:
        raise argparse.ArgumentTypeError("k values must be >= 1")
    return ks


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--mock", help="mock-backend fixture (JSON); routes all model traffic offline")
    common.add_argument("--seed", type=int, help="base seed for all randomness")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", help="labeled conversations (JSONL)")
    data.add_argument("--catalog", help="catalog directory")
    data.add_argument("--k", type=_ks, default=list(ev.DEFAULT_KS), help="cutoffs, e.g. 1,3,5")
    data.add_argument("--out", help="report directory")
    data.add_argument("--workers", type=int, default=1, help="conversations evaluated concurrently")

    p = _Parser(prog="impress", description="Implicit SPC recommendations for support conversations.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("init-demo", parents=[common], help="write an offline demo workspace")
    s.add_argument("directory")

    s = sub.add_parser("build-catalog", parents=[common], help="build and embed the catalog DBs")
    s.add_argument("--spcs", help="SPC list (JSON)")
    s.add_argument("--search-fixtures", help="directory of canned search results")
    s.add_argument("--no-web", action="store_true", help="skip the web-search DBs")
    s.add_argument("--out", help="catalog directory to write")

    s = sub.add_parser("recommend", parents=[common], help="recommend SPCs for conversations")
    s.add_argument("--conversation", required=True, help="conversation JSON or JSONL file")
    s.add_argument("--catalog", help="catalog directory")

    sub.add_parser("eval", parents=[common, data], help="evaluate a labeled dataset")
    sub.add_parser("ablate-db", parents=[common, data], help="catalog-DB ablation (11 configurations)")
    sub.add_parser("ablate-bootstrap", parents=[common, data], help="bootstrap-iteration ablation (0..3)")
    sub.add_parser("length-sweep", parents=[common, data], help="metrics by conversation prefix length")

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic labeled dataset")
    s.add_argument("--scenarios", required=True)
    s.add_argument("--personas", help="persona distributions (JSON)")
    s.add_argument("--n", type=int, default=1, help="conversations per scenario")
    s.add_argument("--max-exchanges", type=int, default=4)
    s.add_argument("--out", required=True, help="output JSONL (manifest.json is written next to it)")

    s = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    s.add_argument("--catalog")
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    return p


def _config(args) -> AppConfig:
    cfg = load_config(args.config)
    if args.mock:
        cfg = dataclasses.replace(cfg, mock_fixture=args.mock)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, pipeline=dataclasses.replace(cfg.pipeline, base_seed=args.seed))
    return cfg


def _need(value, flag: str):
    if not value:
        raise UserError(f"{flag} is required (flag or config)")
    return value


def _pipeline(cfg: AppConfig, catalog: str | None) -> Pipeline:
    catalog = _need(catalog or cfg.path("catalog_dir"), "--catalog")
    if not Path(catalog, "universe.json").exists():
        raise UserError(f"{catalog} is not a catalog directory")
    store = load_store(catalog)
    return Pipeline.from_store(store, make_gateway(cfg), cfg.chat, cfg.embedding, cfg.pipeline)


def _cmd_build_catalog(args, cfg: AppConfig) -> int:
    try:
        spcs = load_spcs(_need(args.spcs or cfg.path("spcs"), "--spcs"))
    except (ValueError, KeyError) as e:
        raise UserError(f"bad SPC list: {e}") from e
    out = _need(args.out or cfg.path("catalog_dir"), "--out")
    client = None
    if not args.no_web:
        fixtures = args.search_fixtures or cfg.path("search_fixtures")
        if fixtures:
            client = FixtureSearchClient(fixtures)
        elif cfg.search_endpoint:
            client = HttpSearchClient(cfg.search_endpoint)
        else:
            raise UserError("web-search DBs need --search-fixtures or search.endpoint (or pass --no-web)")
    store, report = build_catalog(spcs, make_gateway(cfg), cfg.chat, cfg.embedding, client, cfg.results_per_query)
    save_store(store, out)
    Path(out, "build_report.json").write_text(json.dumps(report.entries, indent=2) + "\n")
    print(f"catalog: {len(spcs)} SPCs, {len(store.sources)} sources, {store.n_vectors()} vectors -> {out}")
    if report.entries:
        print(f"{len(report.entries)} gaps recorded in build_report.json")
    return 0


def _read_conversation_file(path: str):
    text = Path(path).read_text()
    try:
        objs = [json.loads(text)]
    except json.JSONDecodeError:
        objs = [json.loads(line) for line in text.splitlines() if line.strip()]
    try:
        return [conversation_from_json(o)[0] for o in objs]
    except (ValueError, KeyError, TypeError) as e:
        raise UserError(f"{path}: {e}") from e


def _cmd_recommend(args, cfg: AppConfig) -> int:
    pipeline = _pipeline(cfg, args.catalog)
    for conv in _read_conversation_file(args.conversation):
        rec = pipeline.recommend(conv)
        print(json.dumps(response_body(rec, pipeline, conv.conversation_id), indent=2))
    return 0


EXPERIMENTS = {
    "eval": lambda ds, p, a, did: [ev.evaluate_dataset(ds, p, a.k, did, "All DBs", a.workers)],
    "ablate-db": lambda ds, p, a, did: ev.run_db_ablation(ds, p, a.k, did, a.workers),
    "ablate-bootstrap": lambda ds, p, a, did: ev.run_bootstrap_ablation(ds, p, a.k, did, max_workers=a.workers),
    "length-sweep": lambda ds, p, a, did: ev.length_sensitivity_sweep(ds, p, a.k, did, a.workers),
}


def _cmd_experiment(args, cfg: AppConfig) -> int:
    pipeline = _pipeline(cfg, args.catalog)
    dataset_path = _need(args.dataset or cfg.path("dataset"), "--dataset")
    try:
        dataset = ev.load_dataset(dataset_path, [s.spc_id for s in pipeline.store.universe])
    except ValueError as e:
        raise UserError(str(e)) from e
    if not dataset:
        raise UserError(f"{dataset_path} holds no conversations")
    out = Path(_need(args.out or cfg.path("report_dir"), "--out"))
    reports = EXPERIMENTS[args.command](dataset, pipeline, args, Path(dataset_path).stem)
    fp = cfg.fingerprint()
    paths = ev.emit_report(reports, out, args.command, fp)
    ev.emit_overhead(ev.measure_overhead(ev.traces_of(reports)), out, fp)
    print(ev.metrics_table(reports), end="")
    print(f"config fingerprint {fp}; reports in {paths['csv'].parent}")
    return 0


def _cmd_simulate(args, cfg: AppConfig) -> int:
    from impress.simgen import (
        DEFAULT_PERSONA_DISTRIBUTIONS,
        generate_dataset,
        load_persona_distributions,
        load_scenarios,
        write_dataset,
    )

    scenarios = load_scenarios(args.scenarios)
    dists = load_persona_distributions(args.personas) if args.personas else DEFAULT_PERSONA_DISTRIBUTIONS
    sims, manifest = generate_dataset(
        scenarios,
        dists,
        make_gateway(cfg),
        cfg.simulation,
        cfg.simulation,
        args.n,
        cfg.pipeline.base_seed,
        args.max_exchanges,
    )
    write_dataset(args.out, sims, manifest)
    print(f"{len(sims)} conversations -> {args.out} ({manifest.rejection_count} rejections, {len(manifest.failures)} failures)")
    return 0


def _cmd_serve(args, cfg: AppConfig) -> int:
    import uvicorn

    from impress.service import create_app

    app = create_app(_pipeline(cfg, args.catalog), cfg.fingerprint(), cfg.request_timeout_s)
    uvicorn.run(app, host=args.host or cfg.host, port=args.port or cfg.port)
    return 0


def _cmd_init_demo(args, cfg: AppConfig) -> int:
    from impress.toy import write_demo

    root = write_demo(args.directory)
    print(f"demo workspace written to {root}; try: impress build-catalog --config {root}/config.yaml")
    return 0


COMMANDS = {
    "init-demo": _cmd_init_demo,
    "build-catalog": _cmd_build_catalog,
    "recommend": _cmd_recommend,
    "eval": _cmd_experiment,
    "ablate-db": _cmd_experiment,
    "ablate-bootstrap": _cmd_experiment,
    "length-sweep": _cmd_experiment,
    "simulate": _cmd_simulate,
    "serve": _cmd_serve,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not args.command:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, _config(args))
    except (UserError, ConfigError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"impress {args.command}: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception("internal error")
        print(f"impress {args.command}: internal error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
