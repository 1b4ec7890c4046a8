"""Batch CLI: synth | build-graph | propagate | visits | features | match |
lift | report. One JSON config drives every stage; each stage writes its
artifacts plus a manifest with input hashes, parameters, and seeds."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    DataError,
    DegenerateError,
    artifact_path,
    load_config,
    stage_seed,
    write_manifest,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DEGENERATE = 4


def _grid_config(cfg):
    from .geo import GeoPoint, GridConfig

    grid = cfg["grid"]
    return GridConfig(
        grid["delta_lat"], grid["delta_lon"], GeoPoint(grid["origin_lat"], grid["origin_lon"])
    )


def _hit_rule(cfg):
    from .geo import GeoPoint
    from .visits import ParcelRule, RadiusRule

    hit = cfg["hit"]
    if hit["variant"] == "radius":
        return RadiusRule(hit["radius_m"])
    if hit["variant"] == "parcel":
        if not hit.get("parcel"):
            raise ConfigError("hit.variant=parcel requires hit.parcel vertices")
        return ParcelRule(tuple(GeoPoint(lat, lon) for lat, lon in hit["parcel"]))
    # Stochastic rules are fitted from observed near-radius hit distances.
    return None


def _kernel(cfg):
    from .lift import make_kernel

    return make_kernel(cfg["kernel_m"])


# --- stages -------------------------------------------------------------------


def cmd_synth(cfg) -> dict:
    from .synth import ScenarioSpec, generate

    if not cfg["synth"]:
        raise ConfigError("synth stage requires a 'synth' section in the config")
    params = dict(cfg["synth"])
    params.setdefault("seed", stage_seed(cfg["seed"], "synth"))
    params.setdefault("flight_start_epoch", cfg["flight"]["start_epoch"])
    params.setdefault("flight_days", cfg["flight"]["days"])
    if "source_mix" in params:
        params["source_mix"] = tuple(params["source_mix"])
    if "bbox" in params:
        params["bbox"] = tuple(params["bbox"])
    try:
        spec = ScenarioSpec(**params)
    except TypeError as exc:
        raise ConfigError(f"bad synth parameters: {exc}") from exc
    spec.validate()
    campaign = generate(spec)
    paths = campaign.write(cfg["out_dir"])
    manifest = write_manifest(cfg, "synth", {}, params)
    return {"stage": "synth", "artifacts": paths, "manifest": manifest,
            "impressions": len(campaign.impressions)}


def cmd_build_graph(cfg) -> dict:
    from .graph import build_graph, load_locations_jsonl, save_graph

    loc_path = artifact_path(cfg, "locations", "locations.jsonl")
    if not os.path.exists(loc_path):
        raise DataError(f"locations file {loc_path!r} does not exist")
    try:
        locations = load_locations_jsonl(loc_path, k=cfg["grid"]["keywords"])
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    graph = build_graph(
        locations, _grid_config(cfg), cfg["grid"]["edge_threshold_m"], k=cfg["grid"]["keywords"]
    )
    out = artifact_path(cfg, "graph", "graph.json")
    os.makedirs(cfg["out_dir"], exist_ok=True)
    save_graph(graph, out)
    manifest = write_manifest(cfg, "build-graph", {"locations": loc_path}, dict(cfg["grid"]))
    return {"stage": "build-graph", "artifacts": {"graph": out}, "manifest": manifest,
            "nodes": len(graph), "edges": len(graph.edge_set())}


def cmd_propagate(cfg) -> dict:
    from .graph import SmoothingParams, iterate, load_graph, save_graph

    graph_path = artifact_path(cfg, "graph", "graph.json")
    if not os.path.exists(graph_path):
        raise DataError(f"graph file {graph_path!r} does not exist")
    graph = load_graph(graph_path)
    prop = cfg["propagate"]
    params = SmoothingParams.uniform(
        graph.k, prop["lambda"], prop["mu"], prop["nu"]
    )
    steps = int(prop["steps"])
    if steps < 1:
        raise ConfigError("propagate.steps must be >= 1")
    visits_path = cfg["paths"].get("visits_by_location")
    visits = None
    if visits_path:
        with open(visits_path, "r", encoding="utf-8") as fh:
            visits = [json.load(fh)] * steps
    graph = iterate(graph, steps, params, visits_per_step=visits)
    out = artifact_path(cfg, "graph_propagated", "graph_propagated.json")
    save_graph(graph, out)
    inputs = {"graph": graph_path}
    if visits_path:
        inputs["visits_by_location"] = visits_path
    manifest = write_manifest(cfg, "propagate", inputs, prop)
    return {"stage": "propagate", "artifacts": {"graph_propagated": out}, "manifest": manifest,
            "steps": steps}


def _load_impressions(cfg):
    from .storage import read_impressions_csv

    imp_path = artifact_path(cfg, "impressions", "impressions.csv")
    imp, device_ids = read_impressions_csv(imp_path)
    return imp_path, imp, device_ids


def cmd_visits(cfg) -> dict:
    from .graph import load_graph
    from .pipeline import compute_activity, visits_from_impressions
    from .storage import device_exposure, write_devices_csv, write_series_csv
    from .visits import SiteIndex, fit_stochastic

    imp_path, imp, device_ids = _load_impressions(cfg)
    graph_path = artifact_path(cfg, "graph", "graph.json")
    if not os.path.exists(graph_path):
        raise DataError(f"graph file {graph_path!r} does not exist (run build-graph)")
    graph = load_graph(graph_path)
    index = SiteIndex(graph)
    rule = _hit_rule(cfg)
    hit_params = dict(cfg["hit"])
    if rule is None:  # stochastic: fit the bands from observed hit distances
        from .visits import FittingError, RadiusRule

        r = cfg["hit"]["stochastic_r_m"]
        has_loc = ~np.isnan(imp.lat)
        site, dist = index.nearest(imp.lat[has_loc], imp.lon[has_loc])
        samples = dist[(site >= 0) & (dist <= 3.0 * r)]
        try:
            rule = fit_stochastic(samples, r)
            hit_params["fitted"] = {
                "ig_mu": rule.ig_mu,
                "ig_lam": rule.ig_lam,
                "logn_mu": rule.logn_mu,
                "logn_sigma": rule.logn_sigma,
                "jump_at_r": rule.jump_at_r,
                "jump_at_band": rule.jump_at_band,
            }
        except FittingError:
            rule = RadiusRule(r)
            hit_params["fitted"] = "fallback-radius"
    n = len(device_ids)
    exposed = device_exposure(imp, n)
    table = compute_activity(imp, n, exposed, cfg["flight"]["start_epoch"])
    table.device_ids = device_ids
    counts, stats = visits_from_impressions(
        imp,
        index,
        rule,
        n,
        cfg["flight"]["start_epoch"],
        cfg["flight"]["days"],
        lump_window_s=cfg["hit"]["lump_window_s"],
        lump_threshold=cfg["hit"]["lump_threshold"],
    )
    series_path = artifact_path(cfg, "series", "series.csv")
    devices_path = artifact_path(cfg, "devices", "devices.csv")
    write_series_csv(series_path, counts, device_ids)
    write_devices_csv(devices_path, device_ids, table)
    manifest = write_manifest(
        cfg, "visits", {"impressions": imp_path, "graph": graph_path},
        {**hit_params, "flight": cfg["flight"]},
    )
    return {"stage": "visits", "artifacts": {"series": series_path, "devices": devices_path},
            "manifest": manifest, "stats": stats}


def cmd_features(cfg) -> dict:
    from .geo import GeoPoint
    from .graph import combine, load_graph
    from .profiles import (
        ImpressionFeatureBundle,
        UserProfile,
        derive_features,
        load_priors_jsonl,
        save_profiles_jsonl,
        update_profile,
    )
    from .matching import FeatureMatrix, save_features_csv
    from .storage import device_exposure

    imp_path, imp, device_ids = _load_impressions(cfg)
    graph_path = artifact_path(cfg, "graph_propagated", "graph_propagated.json")
    if not os.path.exists(graph_path):
        graph_path = artifact_path(cfg, "graph", "graph.json")
    if not os.path.exists(graph_path):
        raise DataError(f"graph file {graph_path!r} does not exist")
    graph = load_graph(graph_path)
    combined = combine(graph)
    priors_path = cfg["paths"].get("priors")
    inputs = {"impressions": imp_path, "graph": graph_path}
    priors_by_device: dict[str, list] = {}
    if priors_path:
        try:
            for rec in load_priors_jsonl(priors_path):
                priors_by_device.setdefault(rec.device_id, []).append(rec)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        inputs["priors"] = priors_path
    prof_cfg = cfg["profile"]
    profiles = []
    vectors = np.zeros((len(device_ids), graph.k))
    for row, dev in enumerate(device_ids):
        mask = imp.dev == row
        points = [
            GeoPoint(float(la), float(lo))
            for la, lo in zip(imp.lat[mask], imp.lon[mask])
            if not np.isnan(la)
        ]
        bundle = derive_features(
            points, graph, combined, cfg["hit"]["radius_m"], prof_cfg["gamma_f"], prof_cfg["gamma_g"]
        )
        profile = UserProfile.new(dev, graph.k, prof_cfg["rho"])
        for rec in sorted(priors_by_device.get(dev, []), key=lambda r: r.step):
            profile = update_profile(
                profile, rec, ImpressionFeatureBundle(np.zeros(graph.k), np.zeros(graph.k)),
                prof_cfg["gamma_f"], prof_cfg["gamma_g"],
            )
        profile = update_profile(
            profile, None, bundle, prof_cfg["gamma_f"], prof_cfg["gamma_g"]
        )
        profiles.append(profile)
        vectors[row] = profile.keywords
    profiles_path = artifact_path(cfg, "profiles", "profiles.jsonl")
    save_profiles_jsonl(profiles, profiles_path)
    exposed = device_exposure(imp, len(device_ids))
    features_path = artifact_path(cfg, "features_derived", "features_derived.csv")
    save_features_csv(
        features_path,
        FeatureMatrix(vectors, exposed.astype(np.int8), np.asarray(device_ids)),
    )
    manifest = write_manifest(cfg, "features", inputs, prof_cfg)
    return {"stage": "features", "artifacts": {"profiles": profiles_path, "features": features_path},
            "manifest": manifest, "devices": len(device_ids)}


def _aligned_features(cfg, table):
    from .matching import FeatureMatrix, load_features_csv

    feat_path = artifact_path(cfg, "features", "features.csv")
    if not os.path.exists(feat_path):
        raise DataError(f"features file {feat_path!r} does not exist")
    fm_file = load_features_csv(feat_path)
    row_of = {dev: i for i, dev in enumerate(fm_file.device_ids.tolist())}
    try:
        order = np.array([row_of[dev] for dev in table.device_ids], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"features file is missing device {exc.args[0]!r}") from exc
    fm = FeatureMatrix(
        fm_file.x[order], table.exposed.astype(np.int8), np.asarray(table.device_ids)
    )
    if cfg["matching"]["time_features"]:
        from .matching import add_time_features

        fm = add_time_features(
            fm, table.first_seen, table.active_days, cfg["flight"]["days"]
        )
    return feat_path, fm


def _load_counts_and_table(cfg):
    from .storage import read_devices_csv, read_series_csv

    devices_path = artifact_path(cfg, "devices", "devices.csv")
    series_path = artifact_path(cfg, "series", "series.csv")
    table = read_devices_csv(devices_path)
    counts = read_series_csv(series_path, table.device_ids, cfg["flight"]["days"])
    return devices_path, series_path, table, counts


def cmd_match(cfg) -> dict:
    from .pipeline import build_match_inputs, matched_report

    devices_path, series_path, table, counts = _load_counts_and_table(cfg)
    feat_path, fm = _aligned_features(cfg, table)
    m = cfg["matching"]
    seed = stage_seed(cfg["seed"], "match")
    kernel = _kernel(cfg)
    try:
        inputs = build_match_inputs(fm, counts, table, kernel, seed=seed)
        report, result = matched_report(
            inputs,
            kernel,
            cfg["flight"]["days"],
            method=m["method"],
            balanced=m["balanced"],
            caliper=m["caliper"],
            caliper_width=m["caliper_width"],
            k=m["k"],
            seed=seed,
            total_visits=float(counts.sum()),
            bootstrap_b=cfg["bootstrap_b"],
            max_iter=m["max_iter"],
        )
    except ValueError as exc:
        raise DegenerateError(str(exc)) from exc
    from .storage import write_json

    match_path = artifact_path(cfg, "match", "match.json")
    write_json(match_path, {"result": result, "report": report.to_dict()})
    manifest = write_manifest(
        cfg, "match",
        {"devices": devices_path, "series": series_path, "features": feat_path},
        {**m, "kernel_m": cfg["kernel_m"]},
    )
    return {"stage": "match", "artifacts": {"match": match_path}, "manifest": manifest,
            "clusters": report.metadata["n_clusters"], "lift": report.lift}


def cmd_lift(cfg) -> dict:
    from .pipeline import run_balanced, run_general
    from .storage import write_json

    devices_path, series_path, table, counts = _load_counts_and_table(cfg)
    kernel = _kernel(cfg)
    seed = stage_seed(cfg["seed"], "lift")
    try:
        general = run_general(counts, table, kernel, bootstrap_b=cfg["bootstrap_b"], seed=seed)
        payload = {"general": general.to_dict()}
        if cfg["mode"] == "balanced":
            balanced = run_balanced(counts, table, kernel, bootstrap_b=cfg["bootstrap_b"], seed=seed)
            payload["balanced"] = balanced.to_dict()
    except ValueError as exc:
        raise DegenerateError(str(exc)) from exc
    match_path = artifact_path(cfg, "match", "match.json")
    if os.path.exists(match_path):
        with open(match_path, "r", encoding="utf-8") as fh:
            payload["matched"] = json.load(fh)["report"]
    lift_path = artifact_path(cfg, "lift", "lift.json")
    write_json(lift_path, payload)
    manifest = write_manifest(
        cfg, "lift", {"devices": devices_path, "series": series_path},
        {"kernel_m": cfg["kernel_m"], "mode": cfg["mode"], "bootstrap_b": cfg["bootstrap_b"]},
    )
    return {"stage": "lift", "artifacts": {"lift": lift_path}, "manifest": manifest,
            "lift": payload["general"]["lift"]}


def cmd_report(cfg) -> dict:
    from .lift import display_transform
    from .storage import write_json

    lift_path = artifact_path(cfg, "lift", "lift.json")
    if not os.path.exists(lift_path):
        raise DataError(f"lift file {lift_path!r} does not exist (run lift)")
    with open(lift_path, "r", encoding="utf-8") as fh:
        lift_payload = json.load(fh)
    report = {
        "version": __version__,
        "seed": cfg["seed"],
        "mode": cfg["mode"],
        "reports": lift_payload,
    }
    report_path = artifact_path(cfg, "report", "report.json")
    write_json(report_path, report)
    epochs = lift_payload["general"]["per_epoch"]
    csv_path = artifact_path(cfg, "report_epochs", "report_epochs.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,lift,lift_display,n_exposed,n_control\n")
        lifts = display_transform([row["lift"] for row in epochs])
        for row, disp in zip(epochs, lifts):
            fh.write(
                f"{row['epoch']},{row['lift']!r},{float(disp)!r},"
                f"{row['n_exposed']},{row['n_control']}\n"
            )
    manifest = write_manifest(cfg, "report", {"lift": lift_path}, {})
    return {"stage": "report", "artifacts": {"report": report_path, "epochs": csv_path},
            "manifest": manifest}


COMMANDS = {
    "synth": cmd_synth,
    "build-graph": cmd_build_graph,
    "propagate": cmd_propagate,
    "visits": cmd_visits,
    "features": cmd_features,
    "match": cmd_match,
    "lift": cmd_lift,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="visitlift",
        description="Measure the visit lift of a location-based ad campaign.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=os.environ.get("VISITLIFT_CONFIG"),
                       help="JSON config path (or VISITLIFT_CONFIG)")
        p.add_argument("--out-dir", help="output directory override")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--threads", type=int, help="worker cap override")
        p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                       help="dotted-path config override, e.g. matching.method=\"kmeans\"")
    return parser


def _parse_overrides(args) -> dict:
    overrides: dict = {}
    if args.out_dir:
        overrides["out_dir"] = args.out_dir
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=JSON, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = overrides
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return overrides


def _emit_error(code: int, kind: str, exc: Exception) -> None:
    sys.stderr.write(
        json.dumps({"error": {"code": code, "kind": kind, "message": str(exc)}}, sort_keys=True)
        + "\n"
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _parse_overrides(args))
        os.makedirs(cfg["out_dir"], exist_ok=True)
        summary = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        _emit_error(EXIT_CONFIG, "config", exc)
        return EXIT_CONFIG
    except DataError as exc:
        _emit_error(EXIT_DATA, "data", exc)
        return EXIT_DATA
    except DegenerateError as exc:
        _emit_error(EXIT_DEGENERATE, "degenerate", exc)
        return EXIT_DEGENERATE
    except (ValueError, KeyError, OSError) as exc:
        _emit_error(EXIT_DATA, "data", exc)
        return EXIT_DATA
    sys.stdout.write(json.dumps(summary, sort_keys=True, default=str) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
