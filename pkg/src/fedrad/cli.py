"""Command-line entry point.

    fedrad gen --config exp.json          generate the site datasets
    fedrad validate <site-dir> ...        data-readiness validation
    fedrad characterize --config exp.json descriptive statistics per site
    fedrad train-local --config exp.json  standalone per-site models
    fedrad train-sim --config exp.json    simulated federated training
    fedrad serve --config exp.json        live federated server (TCP)
    fedrad join --site <dir> --server h:p live federated client
    fedrad evaluate --config exp.json     score scenario variants on test sets
    fedrad rank --in metrics.csv          rank aggregation over the scores
    fedrad report --config exp.json       join all artifacts into one bundle

Exit codes: 0 success, 1 usage or configuration error, 2 validation
failures, 3 experiment aborted (resumable; the checkpoint path is printed).
Set FEDRAD_LOG=error|warn|info|debug to control logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import experiment as exp
from . import siteio
from .dataset import site_statistics
from .evalrank import (ModelRegistry, Scenario, rank, rank_summary_dict,
                       run_scenario, write_ranks_csv)
from .fedproto import ExperimentAborted, run_client, run_server
from .fingerprint import average_fingerprints, compute_fingerprint, derive_config
from .metrics import read_metrics_csv, summarize, write_metrics_csv
from .simnet import run_simulated
from .transport import TcpServerTransport, connect_tcp
from .validation import validate_site_dir

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_ABORTED = 3

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = _LOG_LEVELS.get(os.environ.get("FEDRAD_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load_config(path: str) -> exp.ExperimentConfig:
    try:
        return exp.load_config(Path(path))
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as err:
        raise SystemExit(f"fedrad: cannot load config {path}: {err}")


def _out_dir(config: exp.ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args) -> int:
    config = _load_config(args.config)
    out = _out_dir(config)
    exp.generate_all(config, out)
    exp.save_config(config, out / "experiment.json")
    print(f"generated {len(config.sites)} site datasets under {exp.sites_dir(out)}")
    print(f"experiment digest: {config.digest}")
    return EXIT_OK


def cmd_validate(args) -> int:
    if args.config:
        config = _load_config(args.config)
        site_dirs = [exp.site_dir(Path(config.output_dir), s) for s in config.site_ids]
    else:
        site_dirs = [Path(d) for d in args.site_dirs]
    if not site_dirs:
        print("fedrad validate: no site directories given", file=sys.stderr)
        return EXIT_USAGE

    reports = []
    any_failed = False
    for d in site_dirs:
        report = validate_site_dir(d)
        reports.append(report.to_dict())
        status = "ok" if report.all_passed else f"{report.n_failed} FAILED"
        print(f"{report.site_id}: {len(report.sample_pass)} samples, {status}")
        for f in report.findings:
            print(f"  {f.sample_id}: {f.code.value}: {f.detail}")
        any_failed = any_failed or not report.all_passed
    if args.json:
        Path(args.json).write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    return EXIT_VALIDATION if any_failed else EXIT_OK


def cmd_characterize(args) -> int:
    config = _load_config(args.config)
    out = _out_dir(config)
    stats = []
    for sid in config.site_ids:
        ds = siteio.load_site_dataset(exp.site_dir(out, sid))
        stats.append(site_statistics(ds).to_dict())
        cc = stats[-1]["class_cc_counts"]
        means = {c: round(v["mean"], 2) for c, v in cc.items() if v}
        print(f"{sid}: voxel volume {stats[-1]['voxel_volume_mm3']['mean']:.3f} mm3, "
              f"mean CC count per class {means}")
    doc = {"experiment": config.digest, "sites": stats}
    path = out / "characteristics.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train_local(args) -> int:
    config = _load_config(args.config)
    out = _out_dir(config)
    datasets = exp.load_all(config, out)
    locals_ = exp.train_local_models(config, datasets)
    try:
        registry = exp.load_registry(out, config.digest)
    except (FileNotFoundError, ValueError):
        registry = ModelRegistry()
    registry.locals = locals_
    path = exp.save_registry(registry, out, config.digest)
    print(f"trained {len(locals_)} local models -> {path}")
    return EXIT_OK


def cmd_train_sim(args) -> int:
    config = _load_config(args.config)
    if config.transport != exp.TRANSPORT_SIM:
        print(f"fedrad train-sim: config transport is {config.transport!r}; "
              "use 'fedrad serve'/'fedrad join' for tcp", file=sys.stderr)
        return EXIT_USAGE
    out = _out_dir(config)
    datasets = exp.load_all(config, out)
    needed = exp.needed_model_kinds(config)

    registry = ModelRegistry()
    registry.locals = exp.train_local_models(config, datasets)

    links = exp.zero_fault_links(config)
    if "fed" in needed or args.fed_always:
        params = exp.server_params(config, exp.checkpoints_dir(out, "main"))
        result = run_simulated(params, datasets, links,
                               per_batch_seconds=config.per_batch_seconds,
                               resume=Path(args.resume) if args.resume else None)
        (out / "timing.csv").write_text(result.timing.to_csv(config.digest))
        if result.aborted:
            print(f"experiment aborted at round {result.abort_round}: "
                  f"{result.abort_reason}")
            print(f"resume from checkpoint: {result.checkpoint_file}")
            return EXIT_ABORTED
        registry.fed = exp.TrainedModel(weights=result.final_weights,
                                        feature_config=result.derived.feature_config)

    if "fed_leave_out" in needed:
        for held_out in config.site_ids:
            sub = exp.leave_out_config(config, held_out)
            sub_data = {s: datasets[s] for s in sub.site_ids}
            sub_links = exp.zero_fault_links(sub)
            sub_params = exp.server_params(sub, exp.checkpoints_dir(out, f"loo-{held_out}"))
            result = run_simulated(sub_params, sub_data, sub_links,
                                   per_batch_seconds=sub.per_batch_seconds)
            if result.aborted:
                print(f"leave-out run ({held_out}) aborted: {result.abort_reason}")
                print(f"resume from checkpoint: {result.checkpoint_file}")
                return EXIT_ABORTED
            registry.fed_leave_out[held_out] = exp.TrainedModel(
                weights=result.final_weights,
                feature_config=result.derived.feature_config)

    path = exp.save_registry(registry, out, config.digest)
    print(f"trained models: {sorted(registry.locals)} local"
          + (", fed" if registry.fed else "")
          + (f", {len(registry.fed_leave_out)} leave-out" if registry.fed_leave_out else "")
          + f" -> {path}")
    return EXIT_OK


def cmd_serve(args) -> int:
    config = _load_config(args.config)
    out = _out_dir(config)
    # load up front: the fed model's feature config is derived from the site
    # data after training, and a missing dataset should fail before serving
    datasets = exp.load_all(config, out)
    host, _, port = args.bind.partition(":")
    listener = TcpServerTransport(host or "127.0.0.1", int(port or 0))
    print(f"listening on {listener.address[0]}:{listener.address[1]}", flush=True)
    params = exp.server_params(config, exp.checkpoints_dir(out, "main"))
    try:
        weights = run_server(params, listener,
                             resume=Path(args.resume) if args.resume else None)
    except ExperimentAborted as abort:
        print(f"experiment aborted at round {abort.round_index}: {abort.reason}")
        if abort.checkpoint_path:
            print(f"resume from checkpoint: {abort.checkpoint_path}")
        return EXIT_ABORTED
    finally:
        listener.close()
    try:
        registry = exp.load_registry(out, config.digest)
    except (FileNotFoundError, ValueError):
        registry = ModelRegistry()
    # The derived feature config is a pure function of the site data; rebuild
    # it so the stored fed model is directly usable for evaluation.
    fp_avg = average_fingerprints(
        [compute_fingerprint(datasets[s].train) for s in config.site_ids])
    derived = derive_config(fp_avg, config.seed, config.train)
    registry.fed = exp.TrainedModel(weights=weights,
                                    feature_config=derived.feature_config)
    exp.save_registry(registry, out, config.digest)
    print(f"federated training complete; checkpoints in {exp.checkpoints_dir(out, 'main')}")
    return EXIT_OK


def cmd_join(args) -> int:
    site_path = Path(args.site)
    dataset = siteio.load_site_dataset(site_path)
    host, _, port = args.server.partition(":")
    expected_digest = None
    if args.config:
        expected_digest = _load_config(args.config).digest
    try:
        conn = connect_tcp(host, int(port))
    except OSError as err:
        print(f"fedrad join: cannot reach {args.server}: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        run_client(dataset, conn, expected_digest=expected_digest,
                   model_out=site_path / "final_model.frwt")
    except ExperimentAborted as abort:
        print(f"site {dataset.site_id}: aborted: {abort.reason}")
        return EXIT_ABORTED
    print(f"site {dataset.site_id}: final model saved to {site_path / 'final_model.frwt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _load_config(args.config)
    out = _out_dir(config)
    datasets = exp.load_all(config, out)
    try:
        registry = exp.load_registry(out, config.digest)
    except (FileNotFoundError, ValueError) as err:
        print(f"fedrad evaluate: {err}", file=sys.stderr)
        return EXIT_USAGE
    scenario_names = [args.scenario] if args.scenario else list(config.scenarios)
    for name in scenario_names:
        scenario = Scenario(name)
        try:
            result = run_scenario(scenario, datasets, registry)
        except KeyError as err:
            print(f"fedrad evaluate: {err}", file=sys.stderr)
            return EXIT_USAGE
        edir = exp.eval_dir(out, name)
        edir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(edir / "metrics.csv", result.records, config.digest)
        print(f"{name}: wrote {edir / 'metrics.csv'} "
              f"({sum(len(r) for r in result.records.values())} records)")
    return EXIT_OK


def cmd_rank(args) -> int:
    in_path = Path(args.input)
    records, digest = read_metrics_csv(in_path)
    scenario = Scenario(args.scenario)
    values = {}
    for (model, site), recs in records.items():
        summary = summarize(recs, site)
        for metric, mean in summary.means.items():
            values[(model, site, metric)] = mean
    table = rank(values, allow_missing=scenario is Scenario.GEN_WITHOUT_LOCAL)
    out_dir = Path(args.out_dir) if args.out_dir else in_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    write_ranks_csv(out_dir / "ranks.csv", table, digest)
    (out_dir / "summary.json").write_text(
        json.dumps(rank_summary_dict(table, digest), indent=2, sort_keys=True) + "\n")
    best = table.ordered_models()[0]
    print(f"{args.scenario}: best model {best} "
          f"(overall rank {table.overall[best]:.2f}); wrote {out_dir / 'ranks.csv'}")
    return EXIT_OK


def _read_digest_comment(path: Path) -> str | None:
    with open(path) as f:
        first = f.readline().strip()
    if first.startswith("# experiment="):
        return first.split("=", 1)[1]
    return None


def cmd_report(args) -> int:
    config = _load_config(args.config)
    out = _out_dir(config)
    report: dict = {"experiment": config.digest, "name": config.name,
                    "config": config.to_dict(), "scenarios": {}}

    for name in config.scenarios:
        edir = exp.eval_dir(out, name)
        summary_path = edir / "summary.json"
        metrics_path = edir / "metrics.csv"
        if not summary_path.exists() or not metrics_path.exists():
            print(f"fedrad report: missing artifacts for scenario {name!r} "
                  f"(run evaluate and rank first)", file=sys.stderr)
            return EXIT_USAGE
        summary = json.loads(summary_path.read_text())
        for artifact, found in ((summary_path, summary.get("experiment")),
                                (metrics_path, _read_digest_comment(metrics_path))):
            if found != config.digest:
                print(f"fedrad report: {artifact} belongs to experiment "
                      f"{str(found)[:12]}..., expected {config.digest[:12]}...",
                      file=sys.stderr)
                return EXIT_USAGE
        report["scenarios"][name] = summary

    timing_path = out / "timing.csv"
    if timing_path.exists():
        if _read_digest_comment(timing_path) != config.digest:
            print(f"fedrad report: {timing_path} belongs to a different experiment",
                  file=sys.stderr)
            return EXIT_USAGE
        report["timing_csv"] = timing_path.name

    characteristics = out / "characteristics.json"
    if characteristics.exists():
        doc = json.loads(characteristics.read_text())
        if doc.get("experiment") != config.digest:
            print(f"fedrad report: {characteristics} belongs to a different experiment",
                  file=sys.stderr)
            return EXIT_USAGE
        report["characteristics"] = doc["sites"]

    path = out / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedrad",
                                     description="desk-scale federated training and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate site datasets")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("validate", help="validate persisted site datasets")
    p.add_argument("site_dirs", nargs="*", metavar="site-dir")
    p.add_argument("--config")
    p.add_argument("--json", help="write the full report to this file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("characterize", help="descriptive statistics per site")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_characterize)

    p = sub.add_parser("train-local", help="train standalone per-site models")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train_local)

    p = sub.add_parser("train-sim", help="run federated training on the simulated network")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint file to resume the main run from")
    p.add_argument("--fed-always", action="store_true",
                   help="train the federated model even if no scenario needs it")
    p.set_defaults(func=cmd_train_sim)

    p = sub.add_parser("serve", help="run the federated server over TCP")
    p.add_argument("--config", required=True)
    p.add_argument("--bind", default="127.0.0.1:7713", metavar="HOST:PORT")
    p.add_argument("--resume", help="checkpoint file to resume from")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("join", help="join a federated experiment as one site")
    p.add_argument("--site", required=True, metavar="SITE-DIR")
    p.add_argument("--server", required=True, metavar="HOST:PORT")
    p.add_argument("--config", help="experiment config to verify the server's digest against")
    p.set_defaults(func=cmd_join)

    p = sub.add_parser("evaluate", help="score scenario variants on every site's test set")
    p.add_argument("--config", required=True)
    p.add_argument("--scenario", choices=[s.value for s in Scenario])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rank", help="aggregate metric scores into model rankings")
    p.add_argument("--in", dest="input", required=True, metavar="METRICS.CSV")
    p.add_argument("--scenario", required=True, choices=[s.value for s in Scenario])
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("report", help="join metrics, ranks, and timing into one bundle")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit as err:
        if isinstance(err.code, str):
            print(err.code, file=sys.stderr)
            return EXIT_USAGE
        raise
    except (ValueError, KeyError, FileNotFoundError) as err:
        print(f"fedrad: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
