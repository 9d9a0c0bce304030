import argparse
import logging
import os
import sys

import numpy as np
import pandas as pd

from rtwin.errors import RtwinError, ValidationError
from rtwin.grid_core import GridShape, load_cohort, load_dose, load_patient, save_dose, save_patient
from rtwin.phantom import generate_cohort
from rtwin.settings import config, export_config, import_config
from rtwin.surrogate import (
    FeatureConfig,
    KernelSurrogate,
    init_params,
    load_params,
    save_params,
    train,
    write_loss_trajectory,
)
from rtwin.twin_loop import CohortBenchmark, run_scenario, trajectory_frame, write_scenario
from rtwin.uq_metrics import (
    DvhMetricSpec,
    bands_frame,
    curves_frame,
    dose_score,
    dvh,
    dvh_band,
    dvh_score,
    ensemble_stats,
    uncertainty_summary,
)
from rtwin.utils import cprint, get_rtwin_version, print_frame, resolve_threads, system_summary

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


def _grid(engine_config) -> GridShape:
    return GridShape(*engine_config.phantom.shape, engine_config.phantom.voxel_dims)


def _role_names(engine_config) -> dict:
    return {"target_names": engine_config.io.target_names, "oar_names": engine_config.io.oar_names}


def _is_patient_dir(path: str) -> bool:
    return os.path.exists(os.path.join(path, config.CT_FILE)) or os.path.exists(
        os.path.join(path, config.DOSE_FILE)
    )


def _patient_dirs(path: str) -> list[tuple[str, str]]:
    """(id, directory) pairs: path itself when it is one patient, else its sub-directories."""
    if not os.path.isdir(path):
        raise ValidationError(f"Directory {path} does not exist")
    if _is_patient_dir(path):
        return [(os.path.basename(os.path.normpath(path)), path)]
    return [
        (name, os.path.join(path, name))
        for name in sorted(os.listdir(path))
        if os.path.isdir(os.path.join(path, name))
    ]


def _parse_specs(text: str | None):
    if not text:
        return None
    return [DvhMetricSpec.parse(item.strip()) for item in text.split(",") if item.strip()]


def cmd_train(args, engine_config, threads: int) -> int:
    """
    fn: cmd_train
    Description: Trains the surrogate on a cohort and writes parameters plus the loss trajectory
    Args:
        args (Namespace): cohort or phantoms, out, loss_csv, init_params
        engine_config (EngineConfig): validated configuration
        threads (int): worker threads
    return:
        int: exit status
    """
    training = engine_config.training
    feature_cfg = engine_config.feature_config()
    if args.cohort:
        cohort = load_cohort(args.cohort, _grid(engine_config), **_role_names(engine_config))
    elif args.phantoms:
        cohort = generate_cohort(
            engine_config.phantom_spec(), args.phantoms, engine_config.phantom.cohort_seed, threads, args.progress
        )
    else:
        raise ValidationError("train needs --cohort DIR or --phantoms N")

    if args.init_params:
        params = load_params(args.init_params)
        feature_cfg = FeatureConfig.from_names(params.names, feature_cfg.distance_scale)
    else:
        params = init_params(
            feature_cfg.names, training.dropout_rate, engine_config.engine.seed, training.init_low, training.init_high
        )
    trained, losses = train(params, cohort, engine_config.train_config(), feature_cfg=feature_cfg, progress=args.progress)

    save_params(trained, args.out)
    loss_csv = args.loss_csv or f"{os.path.splitext(args.out)[0]}_loss.csv"
    write_loss_trajectory(losses, loss_csv)
    reduction = losses[0] / losses[-1] if losses[-1] > 0 else float("inf")
    print_frame(
        pd.DataFrame(
            [{"patients": len(cohort), "initial_loss": losses[0], "final_loss": losses[-1], "reduction": reduction}]
        ),
        title="Training",
    )
    cprint(f"Parameters written to {args.out}, loss trajectory to {loss_csv}")
    return EXIT_OK


def cmd_predict(args, engine_config, threads: int) -> int:
    """
    Writes dose.csv and dvh.csv per patient; with --stochastic K > 1 dose.csv
    holds the ensemble mean and dose_std.csv, ensemble_stats.csv and
    dvh_band.csv are added.
    """
    surrogate = KernelSurrogate.from_params(
        load_params(args.params), engine_config.features.distance_scale, threads
    )
    if args.seeds:
        seeds = [int(seed) for seed in args.seeds.split(",")]
    else:
        seeds = list(engine_config.engine.seed * 100_003 + np.arange(args.stochastic))
    rows = []
    for patient_id, patient_dir in _patient_dirs(args.patient):
        record = load_patient(patient_dir, _grid(engine_config), **_role_names(engine_config))
        features = surrogate.featurize(record)
        out_dir = args.out if _is_patient_dir(args.patient) else os.path.join(args.out, patient_id)
        os.makedirs(out_dir, exist_ok=True)
        rois = [(name, mask) for name, mask in record.rois.items() if not mask.is_empty()]
        if len(seeds) > 1:
            ensemble = surrogate.ensemble(features, seeds)
            stats = ensemble_stats(ensemble)
            dose = stats.mean
            save_dose(dose, os.path.join(out_dir, config.DOSE_FILE))
            save_dose(stats.std, os.path.join(out_dir, "dose_std.csv"))
            pd.DataFrame(
                [{"roi": name, "mean_std_gy": uncertainty_summary(stats, mask)} for name, mask in rois],
                columns=["roi", "mean_std_gy"],
            ).to_csv(os.path.join(out_dir, "ensemble_stats.csv"), index=False)
            if rois:
                bands_frame([dvh_band(ensemble, mask, name=name) for name, mask in rois]).to_csv(
                    os.path.join(out_dir, "dvh_band.csv"), index=False
                )
            target_std = uncertainty_summary(stats, record.target_union())
        else:
            dose = surrogate.predict(features, seeds[0] if args.seeds else None)
            save_dose(dose, os.path.join(out_dir, config.DOSE_FILE))
            target_std = 0.0
        if rois:
            curves_frame([dvh(dose, mask, name=name) for name, mask in rois]).to_csv(
                os.path.join(out_dir, "dvh.csv"), index=False
            )
        rows.append({"patient": patient_id, "members": len(seeds), "target_std_gy": target_std})
    if not rows:
        raise ValidationError(f"No patients found under {args.patient}")
    print_frame(pd.DataFrame(rows), title="Predictions")
    return EXIT_OK


def cmd_score(args, engine_config, threads: int) -> int:
    """Scores predicted doses against reference patients; writes per-patient rows plus mean/std."""
    specs = _parse_specs(args.metrics)
    rows, skipped = [], []
    for patient_id, ref_dir in _patient_dirs(args.ref):
        record = load_patient(ref_dir, _grid(engine_config), **_role_names(engine_config))
        if record.reference_dose is None:
            logging.warning(f"Patient {patient_id} has no reference dose, skipped")
            skipped.append(patient_id)
            continue
        pred_dir = args.pred if _is_patient_dir(args.pred) and _is_patient_dir(args.ref) else os.path.join(args.pred, patient_id)
        pred = load_dose(os.path.join(pred_dir, config.DOSE_FILE), record.shape)
        rows.append(
            {
                "patient": patient_id,
                "dose_score": dose_score(pred, record.reference_dose, record.feasible),
                "dvh_score": dvh_score(pred, record.reference_dose, record, specs),
            }
        )
    if not rows:
        raise ValidationError(f"No scorable patients under {args.ref}")
    report = CohortBenchmark(pd.DataFrame(rows), tuple(skipped))
    report.to_csv(args.out)
    print_frame(report.table, title="Scores")
    if skipped:
        cprint(f"[yellow]{len(skipped)} patients skipped without a reference dose[/yellow]")
    return EXIT_OK


def cmd_simulate(args, engine_config, threads: int) -> int:
    """Runs the closed-loop scenario and writes fraction logs and plot-ready CSVs."""
    if args.fractions:
        shifts = tuple(s for s in engine_config.scenario.shifts if int(s["fraction"]) <= args.fractions)
        engine_config = engine_config.with_overrides(scenario={"n_fractions": args.fractions, "shifts": shifts})
    params = load_params(args.params) if args.params else None
    spec = engine_config.scenario_spec(params=params)
    logs = run_scenario(spec, threads=threads, progress=args.progress)
    out_dir = args.out or engine_config.io.output_dir
    paths = write_scenario(logs, out_dir)
    print_frame(trajectory_frame(logs), title="Scenario trajectory")
    cprint(f"{len(logs)} fractions simulated in {sum(log.duration for log in logs):.1f} s; wrote {', '.join(paths)}")
    return EXIT_OK


def cmd_phantom(args, engine_config, threads: int) -> int:
    """Generates a synthetic cohort as patient directories."""
    n = args.n or engine_config.phantom.cohort_size
    seed = engine_config.phantom.cohort_seed if args.cohort_seed is None else args.cohort_seed
    cohort = generate_cohort(engine_config.phantom_spec(), n, seed, threads, args.progress)
    for record in cohort:
        save_patient(record, os.path.join(args.out, record.id))
    cprint(f"{len(cohort)} phantoms written to {args.out}")
    return EXIT_OK


def cmd_config(args, engine_config, threads: int) -> int:
    if args.export:
        path = export_config(engine_config, args.export, overwrite=args.force)
        cprint(f"Configuration exported to {path}")
    else:
        cprint(f"Configuration {engine_config.source or '(built-in defaults)'} is valid")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "score": cmd_score,
    "simulate": cmd_simulate,
    "phantom": cmd_phantom,
    "config": cmd_config,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="rtwin radiotherapy digital-twin CLI")
    parser.add_argument(
        "--config",
        default=None,
        help=f"Engine configuration YAML (default: $RTWIN_CONFIG or {config.DEFAULT_CONFIG_FILE})",
    )
    parser.add_argument("--seed", type=int, default=None, help="Override the global seed")
    parser.add_argument(
        "--threads", type=int, default=None, help="Worker threads (0 means one per physical core)"
    )
    parser.add_argument("--debug", default=False, action="store_true", help="Enable debugging")
    parser.add_argument("--verbose", default=False, action="store_true", help="Enable verbose mode")
    parser.add_argument(
        "--log", default=False, action="store_true", help=f"Log to {config.RTWIN_LOG_FILE} instead of stderr"
    )
    parser.add_argument("--version", action="version", version=f"rtwin v{get_rtwin_version()}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    train_parser = subparsers.add_parser("train", help="Train the dose surrogate")
    train_parser.add_argument("--cohort", help="Directory of patient sub-directories")
    train_parser.add_argument("--phantoms", type=int, help="Train on N generated phantoms instead")
    train_parser.add_argument("--out", required=True, help="Output parameter CSV")
    train_parser.add_argument("--loss-csv", help="Loss trajectory CSV (default: <out>_loss.csv)")
    train_parser.add_argument("--init-params", help="Start from a saved parameter file")

    predict_parser = subparsers.add_parser("predict", help="Predict doses with a trained surrogate")
    predict_parser.add_argument("--params", required=True, help="Parameter CSV")
    predict_parser.add_argument("--patient", required=True, help="Patient directory or cohort directory")
    predict_parser.add_argument("--out", required=True, help="Output directory")
    predict_parser.add_argument("--stochastic", type=int, default=1, help="Number of dropout passes K")
    predict_parser.add_argument("--seeds", help="Comma-separated dropout seeds (must be distinct)")

    score_parser = subparsers.add_parser("score", help="Dose and DVH scores against references")
    score_parser.add_argument("--pred", required=True, help="Predicted dose directory")
    score_parser.add_argument("--ref", required=True, help="Reference patient directory")
    score_parser.add_argument("--out", default="scores.csv", help="Output score CSV")
    score_parser.add_argument("--metrics", help="DVH metrics, e.g. 'PTV:D95,SpinalCord:D_0.1cc'")

    simulate_parser = subparsers.add_parser("simulate", help="Run the closed-loop scenario")
    simulate_parser.add_argument("--out", help="Output directory (default: io.output_dir)")
    simulate_parser.add_argument("--fractions", type=int, help="Override the number of fractions")
    simulate_parser.add_argument("--params", help="Use saved surrogate parameters instead of planning-time training")

    phantom_parser = subparsers.add_parser("phantom", help="Generate a synthetic cohort")
    phantom_parser.add_argument("--out", required=True, help="Output cohort directory")
    phantom_parser.add_argument("--n", type=int, help="Number of phantoms")
    phantom_parser.add_argument("--cohort-seed", type=int, help="Jitter seed")

    config_parser = subparsers.add_parser("config", help="Validate or export the configuration")
    config_parser.add_argument("--export", help="Write the effective configuration to this YAML file")
    config_parser.add_argument("--force", default=False, action="store_true", help="Overwrite an existing file")
    return parser


def _setup_logging(args):
    if args.debug:
        log_level = logging.DEBUG
    elif args.verbose:
        log_level = logging.INFO
    else:
        log_level = logging.WARNING

    if args.log:
        os.makedirs(config.LOG_FOLDER, exist_ok=True)
        logging.basicConfig(
            format="%(asctime)s - %(levelname)s - %(filename)s:%(lineno)s - %(message)s",
            level=log_level,
            filename=config.RTWIN_LOG_FILE,
        )
    else:
        logging.basicConfig(
            format="%(asctime)s - %(levelname)s - %(filename)s:%(lineno)s - %(message)s",
            level=log_level,
        )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args)
    args.progress = args.verbose or args.debug
    logging.info(system_summary())
    try:
        engine_config = import_config(args.config)
        if args.seed is not None:
            engine_config = engine_config.with_overrides(engine={"seed": args.seed})
        threads = resolve_threads(engine_config.engine.threads if args.threads is None else args.threads)
        return COMMANDS[args.command](args, engine_config, threads)
    except ValidationError as exc:
        cprint(f"[bold red]Invalid input:[/bold red] {exc}")
        return EXIT_VALIDATION
    except (RtwinError, OSError) as exc:
        cprint(f"[bold red]Error:[/bold red] {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\nExiting rtwin")
        sys.exit()
