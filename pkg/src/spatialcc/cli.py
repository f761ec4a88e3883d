"""Command-line interface.

Subcommands: ``fit`` (sample the posterior and write draws, summaries,
diagnostics and a replay manifest), ``predict`` (profile and
relative-deprivation tables from stored draws), ``simulate`` (the
simulation study), and ``graph`` (connectivity check, scaling factor,
Moran's I). All inputs and outputs are delimited text plus a JSON
manifest. Exit codes: 0 success, 1 usage or config error, 2 runtime
failure, 3 convergence-gate failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import diagnostics as diag_mod
from . import predict as predict_mod
from .data import (DataError, Schema, assemble, load_dataset, sampling_correction)
from .graph import (AdjacencyGraph, GraphError, connected_components, grid_graph,
                    load_edge_list, morans_i, morans_i_null_expectation,
                    scaling_factor)
from .posterior import ModelConfig, ModelError, Posterior
from .sampler import (SamplerConfig, SamplingError, read_chain_csv, run_chains,
                      stack_draws, write_chain_csv)
from .simulation import StudyConfig, run_study

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_GATE = 3


class ConfigError(ValueError):
    pass


def _require(cfg: dict, key: str, kind=None):
    if key not in cfg:
        raise ConfigError(f"config is missing {key!r}")
    value = cfg[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"config field {key!r} has the wrong type")
    return value


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _write_rows(path, rows: list[dict]) -> None:
    if not rows:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("")
        return
    fields = list(rows[0].keys())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v
                             for v in (row[f] for f in fields)])


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def build_graph(cfg: dict) -> AdjacencyGraph | None:
    section = cfg.get("graph")
    if not section:
        return None
    if "lattice" in section:
        rows, cols = section["lattice"]
        return grid_graph(int(rows), int(cols))
    if "edge_list" in section:
        roster = None
        if section.get("roster"):
            with open(section["roster"], "r", encoding="utf-8") as fh:
                roster = [line.strip() for line in fh if line.strip()]
        return load_edge_list(section["edge_list"], roster=roster)
    raise ConfigError("graph section needs 'lattice' or 'edge_list'")


def _corrections(cfg: dict, records) -> tuple[dict | object, list[str]]:
    prevalence = _require(cfg, "prevalence", dict)
    mode = prevalence.get("mode", "global")
    large_names: list[str] = []
    for r in records:
        name = r.large_area if r.large_area is not None else "all"
        if name not in large_names:
            large_names.append(name)
    counts = {name: [0, 0] for name in large_names}
    for r in records:
        name = r.large_area if r.large_area is not None else "all"
        counts[name][0 if r.y == 1 else 1] += 1
    if mode == "global":
        pi = float(_require(prevalence, "pi"))
        n1 = sum(c[0] for c in counts.values())
        n_u = sum(c[1] for c in counts.values())
        return sampling_correction(n1, n_u, pi), large_names
    if mode == "per_large_area":
        pis = _require(prevalence, "pi", dict)
        corrections = {}
        for name in large_names:
            if name not in pis:
                raise ConfigError(f"no prevalence for large area {name!r}")
            n1, n_u = counts[name]
            if n1 == 0 or n_u == 0:
                raise ConfigError(
                    f"large area {name!r} needs at least one case and one "
                    "unlabeled record for a per-area correction")
            corrections[name] = sampling_correction(n1, n_u, float(pis[name]))
        return corrections, large_names
    raise ConfigError(f"unknown prevalence mode {mode!r}")


def prepare_fit_inputs(cfg: dict):
    """Shared by fit and predict: load, assemble, and fingerprint data."""
    data_cfg = _require(cfg, "data", dict)
    schema_cfg = _require(data_cfg, "schema", dict)
    schema = Schema(
        label=_require(schema_cfg, "label", str),
        covariates=tuple(_require(schema_cfg, "covariates", list)),
        small_area=schema_cfg.get("small_area"),
        large_area=schema_cfg.get("large_area"),
    )
    loaded = load_dataset(_require(data_cfg, "path", str), schema,
                          delimiter=data_cfg.get("delimiter", ","))
    graph = build_graph(cfg)
    formula = _require(cfg, "formula", list)
    corrections, large_names = _corrections(cfg, loaded.records)
    if graph is not None:
        small_names = list(graph.names)
    else:
        small_names = []
        for r in loaded.records:
            if r.small_area not in small_names:
                small_names.append(r.small_area)
    data = assemble(loaded.records, formula, small_names, corrections,
                    large_area_names=large_names)
    model_cfg = cfg.get("model", {})
    model = ModelConfig(
        contamination=bool(model_cfg.get("contamination", True)),
        spatial=bool(model_cfg.get("spatial", True)),
        large_area=bool(model_cfg.get("large_area", True)),
        intercept_scale=float(model_cfg.get("intercept_scale", 10.0)),
        slope_scale=float(model_cfg.get("slope_scale", 1.0)),
        soft_sum_sd_per_area=float(model_cfg.get("soft_sum_sd_per_area", 0.01)),
        sigma_prior=model_cfg.get("sigma_prior", "half_normal"),
    )
    if model.spatial and graph is None:
        raise ConfigError("spatial layer enabled but no graph supplied")
    return loaded, data, graph, model


def data_fingerprint(data) -> str:
    h = hashlib.sha256()
    for arr in (data.y, data.design.X, data.small_area_id, data.large_area_id,
                data.log_offset, data.theta1):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(",".join(data.design.columns).encode())
    return h.hexdigest()


def _sampler_config(cfg: dict, seed_override=None, jobs=None) -> SamplerConfig:
    s = cfg.get("sampler", {})
    return SamplerConfig(
        n_chains=int(s.get("n_chains", 4)),
        n_iter=int(s.get("n_iter", 2000)),
        n_warmup=int(s.get("n_warmup", 1000)),
        thin=int(s.get("thin", 1)),
        seed=int(seed_override if seed_override is not None else s.get("seed", 0)),
        max_treedepth=int(s.get("max_treedepth", 10)),
        target_accept=float(s.get("target_accept", 0.8)),
        init_radius=float(s.get("init_radius", 2.0)),
        n_jobs=int(jobs if jobs is not None else s.get("n_jobs", default_jobs())),
    )


def default_jobs() -> int:
    return int(os.environ.get("SPATIALCC_JOBS", "1"))


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    out_dir = args.output_dir or cfg.get("output_dir")
    if not out_dir:
        raise ConfigError("no output directory (config output_dir or --output-dir)")
    os.makedirs(out_dir, exist_ok=True)

    t0 = time.time()
    loaded, data, graph, model = prepare_fit_inputs(cfg)
    sampler_cfg = _sampler_config(cfg, seed_override=args.seed, jobs=args.jobs)
    posterior = Posterior(data, graph, model)
    t_prep = time.time() - t0

    t0 = time.time()
    chains = run_chains(posterior, sampler_cfg)
    t_sample = time.time() - t0

    for k, chain in enumerate(chains, start=1):
        write_chain_csv(chain, os.path.join(out_dir, f"chain_{k}.csv"))

    report = diag_mod.summarize(stack_draws(chains), chains[0].columns,
                                n_divergent=sum(c.n_divergent for c in chains))
    rows = diag_mod.report_to_rows(report)
    _write_rows(os.path.join(out_dir, "diagnostics.csv"), rows)
    _write_rows(os.path.join(out_dir, "summary.csv"),
                [{k: row[k] for k in ("parameter", "mean", "sd", "median",
                                      "q5", "q95", "rhat_max", "ess_bulk",
                                      "ess_tail")} for row in rows])

    gate_cfg = cfg.get("gate", {})
    passed, messages = report.gate(
        fail_above=float(gate_cfg.get("fail_above", 1.05)),
        warn_above=float(gate_cfg.get("warn_above", 1.01)))

    manifest = {
        "tool": "spatialcc", "version": __version__,
        "command": "fit",
        "config": cfg,
        "seed": sampler_cfg.seed,
        "chain_seeds": [[sampler_cfg.seed, k] for k in range(sampler_cfg.n_chains)],
        "input_hashes": {cfg["data"]["path"]: _sha256_file(cfg["data"]["path"])},
        "data_fingerprint": data_fingerprint(data),
        "n_records": data.n,
        "n_dropped": loaded.n_dropped,
        "timings": {"prepare_s": t_prep, "sample_s": t_sample},
        "telemetry": {
            "divergent_post_warmup": [c.n_divergent for c in chains],
            "divergent_warmup": [c.n_divergent_warmup for c in chains],
            "step_size": [c.step_size for c in chains],
            "log_clamps": posterior.n_log_clamps,
        },
        "gate": {"passed": passed, "messages": messages},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)

    for message in messages:
        print(message, file=sys.stderr)
    if not passed and gate_cfg.get("enforce", True):
        print("convergence gate FAILED", file=sys.stderr)
        return EXIT_GATE
    print(f"fit complete: {len(chains)} chains -> {out_dir}")
    return EXIT_OK


def _read_draws_dir(draws_dir):
    chains = []
    columns = None
    k = 1
    while True:
        path = os.path.join(draws_dir, f"chain_{k}.csv")
        if not os.path.exists(path):
            break
        matrix, cols = read_chain_csv(path)
        columns = cols
        chains.append(matrix)
        k += 1
    if not chains:
        raise ConfigError(f"no chain_<k>.csv files under {draws_dir}")
    return np.vstack(chains), columns


def cmd_predict(args) -> int:
    cfg = load_config(args.config)
    out_dir = args.output_dir or cfg.get("output_dir")
    if not out_dir:
        raise ConfigError("no output directory (config output_dir or --output-dir)")
    os.makedirs(out_dir, exist_ok=True)

    manifest_path = os.path.join(args.draws, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ConfigError(f"draws directory {args.draws} has no manifest.json")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)

    _, data, _, _ = prepare_fit_inputs(cfg)
    fingerprint = data_fingerprint(data)
    if manifest.get("data_fingerprint") != fingerprint:
        raise ConfigError("manifest mismatch: draws were fitted on different data")

    draws, columns = _read_draws_dir(args.draws)
    beta = predict_mod.extract_block(draws, columns, "beta")

    pred_cfg = cfg.get("predict", {})
    binaries = pred_cfg.get("binaries")
    age_name = pred_cfg.get("age")
    if not binaries or not age_name:
        raise ConfigError("predict section needs 'binaries' and 'age'")
    cov_idx = {c: j for j, c in enumerate(data.design.columns)}
    if age_name not in cov_idx:
        raise ConfigError(f"age column {age_name!r} not in the design")
    max_age = float(np.max(data.design.X[:, cov_idx[age_name]]
                           * data.std_info.sd[cov_idx[age_name]]
                           + data.std_info.mean[cov_idx[age_name]]))
    ages = predict_mod.age_grid(max_age, min_age=float(pred_cfg.get("age_min", 18)),
                                size=int(pred_cfg.get("n_ages", 10)))
    profiles = predict_mod.enumerate_profiles(binaries, age_name, ages)
    table = predict_mod.profile_table(beta, profiles, data.std_info,
                                      covariate_order=[*binaries, age_name])
    _write_rows(os.path.join(out_dir, "profiles.csv"), table)

    dep_cfg = pred_cfg.get("deprivation", {})
    coledu = dep_cfg.get("coledu", "coledu")
    lowstat = dep_cfg.get("lowstat", "lowstat")
    means = {name: float(data.std_info.mean[cov_idx[name]])
             for name in data.design.columns[1:] if ":" not in name}
    try:
        scen = predict_mod.relative_deprivation_scenarios(
            beta, data.std_info, means, coledu=coledu, lowstat=lowstat,
            hypothetical_n=int(dep_cfg.get("hypothetical_n", 10000)))
        _write_rows(os.path.join(out_dir, "deprivation.csv"), scen)
    except predict_mod.PredictError as exc:
        print(f"deprivation table skipped: {exc}", file=sys.stderr)

    print(f"prediction tables -> {out_dir} ({len(table)} profiles)")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    out_dir = args.output_dir or cfg.get("output_dir")
    if not out_dir:
        raise ConfigError("no output directory (config output_dir or --output-dir)")
    os.makedirs(out_dir, exist_ok=True)

    sampler_cfg = cfg.get("m3_sampler", {})
    m3 = SamplerConfig(
        n_chains=int(sampler_cfg.get("n_chains", 4)),
        n_iter=int(sampler_cfg.get("n_iter", 4000)),
        n_warmup=int(sampler_cfg.get("n_warmup", 2667)),
        thin=int(sampler_cfg.get("thin", 4)),
        seed=0,
        max_treedepth=int(sampler_cfg.get("max_treedepth", 10)),
        target_accept=float(sampler_cfg.get("target_accept", 0.8)),
    )
    study = StudyConfig(
        n_sims=int(cfg.get("n_sims", 200)),
        seed=int(args.seed if args.seed is not None else cfg.get("seed", 0)),
        n_range=tuple(cfg.get("n_range", (100, 2000))),
        pi_rare=tuple(cfg.get("pi_rare", (1e-6, 0.1))),
        pi_moderate=tuple(cfg.get("pi_moderate", (0.1, 0.5))),
        pi_hat_range=tuple(cfg.get("pi_hat_range", (0.01, 0.99))),
        maps=tuple(cfg.get("maps", ("lattice5", "lattice8", "lattice10"))),
        models=tuple(cfg.get("models", ("m1", "m2", "m3"))),
        m3_sampler=m3,
        n_jobs=int(args.jobs if args.jobs is not None else cfg.get("n_jobs", default_jobs())),
    )
    t0 = time.time()
    rows = run_study(study)
    elapsed = time.time() - t0
    _write_rows(os.path.join(out_dir, "study.csv"), rows)
    seeds = sorted({(row["sim"], row["seed"]) for row in rows})
    _write_rows(os.path.join(out_dir, "seeds.csv"),
                [{"sim": s, "seed": sd} for s, sd in seeds])
    _write_rows(os.path.join(out_dir, "trend_summary.csv"), trend_summary(rows))
    manifest = {
        "tool": "spatialcc", "version": __version__, "command": "simulate",
        "config": cfg, "n_rows": len(rows), "elapsed_s": elapsed,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"study complete: {len(rows)} rows in {elapsed:.1f}s -> {out_dir}")
    return EXIT_OK


def trend_summary(rows: list[dict]) -> list[dict]:
    """Mean scores by (model, quantity, prevalence bucket) for trend plots."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        bucket = "rare" if row["pi"] <= 0.1 else "moderate"
        groups.setdefault((row["model"], row["quantity"], bucket), []).append(row)
    out = []
    for (model, quantity, bucket), members in sorted(groups.items()):
        out.append({
            "model": model, "quantity": quantity, "pi_bucket": bucket,
            "n_sims": len(members),
            "mean_rmse_paper": float(np.mean([m["rmse_paper"] for m in members])),
            "mean_abs_bias": float(np.mean([abs(m["bias"]) for m in members])),
        })
    return out


def _graph_from_args(args) -> AdjacencyGraph:
    if args.lattice:
        rows, cols = (int(v) for v in args.lattice.lower().split("x"))
        return grid_graph(rows, cols)
    if args.edges:
        return load_edge_list(args.edges)
    raise ConfigError("graph command needs --edges FILE or --lattice RxC")


def cmd_graph(args) -> int:
    g = _graph_from_args(args)
    if args.graph_cmd == "check":
        comps = connected_components(g)
        print(f"{len(comps)} component{'s' if len(comps) != 1 else ''}; "
              f"{g.n_nodes} nodes, {g.n_edges} edges")
        for i, comp in enumerate(comps[:10]):
            if len(comps) > 1:
                print(f"  component {i}: {sorted(g.names[j] for j in comp)[:8]} ...")
        return EXIT_OK
    if args.graph_cmd == "scale":
        print(repr(scaling_factor(g)))
        return EXIT_OK
    if args.graph_cmd == "moran":
        values = np.loadtxt(args.values, ndmin=1)
        observed = morans_i(values, g)
        null = morans_i_null_expectation(values.size)
        print(f"morans_i {observed!r}")
        print(f"null_expectation {null!r}")
        return EXIT_OK
    raise ConfigError(f"unknown graph subcommand {args.graph_cmd!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatialcc",
        description="Bayesian contaminated case-control models with spatial effects")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="sample the posterior and write artifacts")
    p_fit.add_argument("--config", required=True)
    p_fit.add_argument("--output-dir")
    p_fit.add_argument("--seed", type=int)
    p_fit.add_argument("--jobs", type=int)
    p_fit.set_defaults(func=cmd_fit)

    p_pred = sub.add_parser("predict", help="profile tables from stored draws")
    p_pred.add_argument("--config", required=True)
    p_pred.add_argument("--draws", required=True)
    p_pred.add_argument("--output-dir")
    p_pred.set_defaults(func=cmd_predict)

    p_sim = sub.add_parser("simulate", help="run the simulation study")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--output-dir")
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--jobs", type=int)
    p_sim.set_defaults(func=cmd_simulate)

    p_graph = sub.add_parser("graph", help="adjacency utilities")
    p_graph.add_argument("graph_cmd", choices=["check", "scale", "moran"])
    p_graph.add_argument("--edges")
    p_graph.add_argument("--lattice")
    p_graph.add_argument("--values")
    p_graph.set_defaults(func=cmd_graph)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, GraphError, ModelError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SamplingError, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
