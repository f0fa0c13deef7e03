"""Command-line surface: simulate / fit / regions / replay.

Every command writes a run manifest (full resolved config, seeds, versions,
outputs) next to its outputs; `replay <manifest>` re-runs the recorded command
and reproduces the data outputs byte-for-byte.

Exit codes: 0 success, 2 usage, 3 data/schema, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np
import pandas as pd

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class DataError(Exception):
    pass


def _versions() -> dict:
    import scipy

    from . import __version__

    return {
        "fusedsvc": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": ".".join(map(str, sys.version_info[:3])),
    }


def _write_manifest(out_dir, command, config, seeds, outputs):
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "versions": _versions(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "outputs": sorted(outputs),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def cmd_simulate(args) -> int:
    from .experiments import ExperimentConfig, run_experiment, summarize
    from .posterior import PosteriorControls

    os.makedirs(args.out, exist_ok=True)
    config = ExperimentConfig(
        case_id=args.case,
        setting=args.setting,
        sigma2=args.sigma2,
        n_replicates=args.reps,
        n_test_multiplier=args.n_test_mult,
        base_seed=args.seed,
        arms=tuple(args.arms),
        posterior=PosteriorControls(burn_in=args.burn_in, n_keep=args.draws,
                                    thinning=args.thin),
        grid_size=args.grid_size,
        predictive=args.predictive,
        jobs=args.jobs,
    )
    result = run_experiment(config)
    if result.n_completed == 0:
        raise RuntimeError(f"all replicates failed: {result.failures[:3]}")

    per_path = os.path.join(args.out, "per_replicate.csv")
    result.per_replicate_frame().to_csv(per_path, index=False)
    summary_path = os.path.join(args.out, "summary.csv")
    summarize([result]).to_csv(summary_path, index=False)
    outputs = [per_path, summary_path]
    if result.failures:
        fail_path = os.path.join(args.out, "failures.json")
        with open(fail_path, "w") as fh:
            json.dump([{"replicate": r, "error": e} for r, e in result.failures],
                      fh, indent=2)
        outputs.append(fail_path)
    cfg = {k: (list(v) if isinstance(v, tuple) else v)
           for k, v in vars(args).items() if k not in ("func", "manifest")}
    _write_manifest(args.out, "simulate", cfg, {"base_seed": args.seed}, outputs)
    return 0


def _load_fit_inputs(args):
    from .graphs import RegionGraph
    from .model import dataset_from_csv

    if not os.path.exists(args.graph):
        raise DataError(f"graph file not found: {args.graph}")
    if not os.path.exists(args.data):
        raise DataError(f"data file not found: {args.data}")
    with open(args.graph) as fh:
        graph = RegionGraph.from_json(fh.read())
    sigma2 = None if args.sigma2 == "estimate" else float(args.sigma2)
    try:
        dataset = dataset_from_csv(args.data, graph, sigma2=sigma2,
                                   intercept=args.intercept)
    except (ValueError, KeyError) as err:
        raise DataError(str(err)) from err
    if dataset.psi.max() > graph.m_regions:
        raise DataError("region ids in data exceed graph m_regions")
    return dataset


def cmd_fit(args) -> int:
    from .criteria import CriterionReport  # noqa: F401
    from .model import estimate_sigma2
    from .posterior import PosteriorControls
    from .selection import (CriterionEvaluator, SearchSpec, search_model1,
                            search_model2, select_model, trajectory_rows)
    from .solver import solution_to_dict

    os.makedirs(args.out, exist_ok=True)
    dataset = _load_fit_inputs(args)
    estimate_mode = args.sigma2 == "estimate"
    if estimate_mode:
        # pilot variance from OLS residuals, refined once after selection
        from .model import residuals

        X = dataset.design()
        ols, *_ = np.linalg.lstsq(X, dataset.y, rcond=None)
        dof = max(dataset.n - dataset.p, 1)
        r = dataset.y - X @ ols
        dataset = dataset.with_sigma2(max(float(r @ r / dof), 1e-8))

    controls = PosteriorControls(burn_in=args.burn_in, n_keep=args.draws,
                                 thinning=args.thin)

    def run_selection(ds):
        evaluator = CriterionEvaluator(ds, controls, base_seed=args.seed,
                                       predictive=args.predictive)
        spec1 = SearchSpec(model_class=1, grid_size=args.grid_size,
                           lambda1_enabled=args.lambda1)
        spec2 = SearchSpec(model_class=2, grid_size=args.grid_size,
                           lambda1_enabled=args.lambda1)
        if args.criterion == "piic2":
            sel = select_model(ds, spec1, spec2, "piic2", evaluator)
            res = sel["result1"] if sel["chosen"] == 1 else sel["result2"]
            chosen = sel["chosen"]
        elif args.model == 1:
            res = search_model1(ds, SearchSpec(**{**spec1.__dict__,
                                                  "criterion": args.criterion}),
                                evaluator)
            chosen = 1
        else:
            res = search_model2(ds, SearchSpec(**{**spec2.__dict__,
                                                  "criterion": args.criterion}),
                                evaluator)
            chosen = 2
        return evaluator, res, chosen

    evaluator, res, chosen = run_selection(dataset)
    solution = res.best_report.diagnostics["solution"]
    if estimate_mode:
        dataset = dataset.with_sigma2(max(estimate_sigma2(dataset, solution), 1e-8))
        evaluator, res, chosen = run_selection(dataset)
        solution = res.best_report.diagnostics["solution"]

    graph_c = evaluator._solver.problem.graph
    sol_path = os.path.join(args.out, "solution.json")
    with open(sol_path, "w") as fh:
        json.dump(solution_to_dict(solution, graph_c), fh, indent=2, sort_keys=True)
    crit_path = os.path.join(args.out, "criterion.json")
    rep = res.best_report
    with open(crit_path, "w") as fh:
        json.dump({
            "criterion": args.criterion,
            "model_class": chosen,
            "neg_log_pred_sum": rep.neg_log_pred_sum,
            "waic_penalty": rep.waic_penalty,
            "j3_count": rep.j3_count,
            "waic": rep.waic,
            "piic1": rep.piic1,
            "trace_term": rep.trace_term,
            "piic2": rep.piic2,
            "lambda1": list(rep.lambda_weights.lambda1),
            "lambda2": list(rep.lambda_weights.lambda2),
            "sigma2": dataset.sigma2,
            "predictive": rep.diagnostics.get("predictive"),
        }, fh, indent=2, sort_keys=True)
    traj_path = os.path.join(args.out, "trajectory.csv")
    pd.DataFrame(trajectory_rows(res)).to_csv(traj_path, index=False)

    outputs = [sol_path, crit_path, traj_path]
    if args.centroids:
        from .spatial import cells_geojson, group_properties, write_geojson

        cents = pd.read_csv(args.centroids)[["lon", "lat"]].to_numpy(dtype=float)
        if len(cents) != dataset.m_regions:
            raise DataError("centroid count does not match graph regions")
        geo_path = os.path.join(args.out, "groups.geojson")
        write_geojson(cells_geojson(cents, group_properties(solution, graph_c)),
                      geo_path)
        outputs.append(geo_path)

    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "manifest")}
    _write_manifest(args.out, "fit", cfg, {"seed": args.seed}, outputs)
    return 0


def cmd_regions(args) -> int:
    from .spatial import cells_geojson, ingest_csv, kmeans, voronoi_adjacency, write_geojson

    os.makedirs(args.out, exist_ok=True)
    if not os.path.exists(args.points):
        raise DataError(f"points file not found: {args.points}")
    try:
        ingest = ingest_csv(args.points)
    except ValueError as err:
        raise DataError(str(err)) from err
    if args.k > len(ingest.points):
        raise DataError(f"k={args.k} exceeds {len(ingest.points)} points")
    km = kmeans(ingest.points, args.k, seed=args.seed)
    graph = voronoi_adjacency(km["centroids"])

    graph_path = os.path.join(args.out, "graph.json")
    with open(graph_path, "w") as fh:
        fh.write(graph.to_json())
    assign_path = os.path.join(args.out, "assignments.csv")
    pd.DataFrame({
        "id": ingest.points.ids,
        "region": km["assignments"],
    }).to_csv(assign_path, index=False)
    cent_path = os.path.join(args.out, "centroids.csv")
    pd.DataFrame({
        "region": np.arange(1, args.k + 1),
        "lon": km["centroids"][:, 0],
        "lat": km["centroids"][:, 1],
    }).to_csv(cent_path, index=False)
    geo_path = os.path.join(args.out, "cells.geojson")
    write_geojson(cells_geojson(km["centroids"]), geo_path)

    outputs = [graph_path, assign_path, cent_path, geo_path]
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "manifest")}
    _write_manifest(args.out, "regions", cfg, {"seed": args.seed}, outputs)
    return 0


def cmd_replay(args) -> int:
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    command = manifest["command"]
    cfg = dict(manifest["config"])
    if args.out:
        cfg["out"] = args.out
    argv = [command]
    for key, val in cfg.items():
        if key == "arms":
            argv += ["--arms"] + [str(v) for v in val]
            continue
        flag = "--" + key.replace("_", "-")
        if isinstance(val, bool):
            if val:
                argv.append(flag)
        elif val is not None:
            argv += [flag, str(val)]
    return main(argv)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusedsvc",
        description="Spatially varying coefficients via the generalized fused "
                    "lasso with WAIC/PIIC hyperparameter selection.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    sim = sub.add_parser("simulate", help="Monte-Carlo criterion comparison")
    sim.add_argument("--case", type=int, required=True, choices=range(1, 9))
    sim.add_argument("--setting", type=int, default=1, choices=(1, 2))
    sim.add_argument("--sigma2", type=float, default=1.0)
    sim.add_argument("--reps", type=int, default=100)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", default="simulate_out")
    sim.add_argument("--arms", nargs="+", default=["waic1", "piic1", "waic2", "piic2"])
    sim.add_argument("--grid-size", type=int, default=20)
    sim.add_argument("--burn-in", type=int, default=400)
    sim.add_argument("--draws", type=int, default=1200)
    sim.add_argument("--thin", type=int, default=1)
    sim.add_argument("--n-test-mult", type=int, default=1)
    sim.add_argument("--predictive", choices=("mcmc", "plugin"), default="mcmc")
    sim.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="fit one dataset with criterion selection")
    fit.add_argument("--data", required=True)
    fit.add_argument("--graph", required=True)
    fit.add_argument("--model", type=int, default=1, choices=(1, 2))
    fit.add_argument("--criterion", default="piic1",
                     choices=("waic", "piic1", "piic2"))
    fit.add_argument("--sigma2", default="estimate",
                     help="positive number or 'estimate'")
    fit.add_argument("--intercept", action="store_true")
    fit.add_argument("--lambda1", action="store_true",
                     help="enable the sparsity penalty search")
    fit.add_argument("--grid-size", type=int, default=20)
    fit.add_argument("--burn-in", type=int, default=2000)
    fit.add_argument("--draws", type=int, default=5000)
    fit.add_argument("--thin", type=int, default=2)
    fit.add_argument("--predictive", choices=("mcmc", "plugin"), default="mcmc")
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--centroids", default=None,
                     help="centroid CSV (region,lon,lat) for group-map GeoJSON")
    fit.add_argument("--out", default="fit_out")
    fit.set_defaults(func=cmd_fit)

    reg = sub.add_parser("regions", help="cluster points into regions")
    reg.add_argument("--points", required=True)
    reg.add_argument("--k", type=int, required=True)
    reg.add_argument("--seed", type=int, default=0)
    reg.add_argument("--out", default="regions_out")
    reg.set_defaults(func=cmd_regions)

    rep = sub.add_parser("replay", help="re-run a recorded manifest")
    rep.add_argument("manifest")
    rep.add_argument("--out", default=None)
    rep.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    sigma2 = getattr(args, "sigma2", None)
    if isinstance(sigma2, str) and sigma2 != "estimate":
        try:
            float(sigma2)
        except ValueError:
            print(json.dumps({"error": "usage",
                              "message": "--sigma2 must be a number or 'estimate'"}),
                  file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except DataError as err:
        print(json.dumps({"error": "data", "message": str(err)}), file=sys.stderr)
        return EXIT_DATA
    except Exception as err:  # noqa: BLE001 - numerical/unexpected failures
        print(json.dumps({"error": type(err).__name__, "message": str(err)}),
              file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
