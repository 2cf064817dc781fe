"""Command-line entry point of the popularity fusion toolkit.

    python app.py synth      --config run.toml
    python app.py train      --config run.toml --workers 4
    python app.py predict    --config run.toml --model runs/latest/model.pfa
    python app.py evaluate | ablate | importance | featurize ...

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 internal error.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from ablation import ablation_run
from artifact_io import read_artifact, write_artifact
from data_loader import apply_imputation, fit_imputation
from ensemble import EnsembleModel, ensemble_predict, train_ensemble
from evaluation import evaluate_predictions, modality_importance, permutation_importance, rank_importances
from feature_builder import build_features, fit_feature_pipeline
from pipeline_errors import ConfigError, DataError, PipelineError
from pipeline_stages import StageRunner, load_dataset, score, split_holdout
from pseudo_labeling import pseudo_label_loop
from run_config import RunManifest, load_config, with_overrides
from synthetic_data import generate, labeled_oracle_bound, write_dataset
from visualization import write_distribution

logger = logging.getLogger(__name__)

COMMANDS = ("synth", "featurize", "train", "predict", "evaluate", "ablate", "importance")


def _load_model(config, override=None):
    path = Path(override) if override else config.model_path()
    if not path.exists():
        raise ConfigError("paths.model", f"{path} does not exist (train first or pass --model)")
    return EnsembleModel.from_sections(read_artifact(path)), path


def _labeled_split(config, posts):
    labeled = [p for p in posts if p.has_label]
    return split_holdout(labeled, config.ensemble.holdout_fraction, config.seed)


def cmd_synth(config, args, manifest):
    synth = config.synth if args.seed is None else replace(config.synth, seed=args.seed)

    def run_synth(_):
        dataset = generate(synth)
        paths = write_dataset(dataset, config.resolve("posts").parent, synth)
        for name, path in paths.items():
            manifest.add_artifact(name, path)
        return dataset, {
            "posts": len(dataset.posts), "labeled": len(dataset.labeled),
            "oracle_src_bound": labeled_oracle_bound(dataset),
        }

    StageRunner(["synth"], manifest).run({"synth": run_synth})


def cmd_featurize(config, args, manifest):
    out = config.out_dir()

    def run_featurize(results):
        posts, tables = results["load"]
        labeled = np.array([p.has_label for p in posts])
        if not labeled.any():
            raise DataError("featurize needs labeled posts to fit preprocessing on")
        stats = fit_imputation(posts, config.imputation, labeled)
        imputed, report = apply_imputation(posts, stats)
        training = [p for p, flag in zip(imputed, labeled) if flag]
        pipeline = fit_feature_pipeline(training, tables, config.features, config.seed)
        matrix = build_features(imputed, tables, config.features, pipeline)
        out.mkdir(parents=True, exist_ok=True)
        matrix.to_frame().to_csv(out / "features.csv", index=False)
        report.to_frame().to_csv(out / "imputation.csv", index=False)
        manifest.add_artifact("features", out / "features.csv")
        manifest.add_artifact("imputation", out / "imputation.csv")
        return matrix, {"rows": matrix.n_rows, "columns": matrix.n_cols, "imputed": report.total}

    StageRunner(["load", "featurize"], manifest).run({
        "load": lambda _: (load_dataset(config), None),
        "featurize": run_featurize,
    })


def cmd_train(config, args, manifest):
    out = config.out_dir()
    ensemble_config = config.ensemble_config()
    disabled = ["pseudo"] if config.pseudo.max_iterations <= 1 else []

    def run_split(results):
        posts, _ = results["load"]
        train, holdout = _labeled_split(config, posts)
        unlabeled = [p for p in posts if not p.has_label]
        return (train, holdout, unlabeled), {"train": len(train), "holdout": len(holdout), "unlabeled": len(unlabeled)}

    def run_train(results):
        _, tables = results["load"]
        train, _, _ = results["split"]
        model = train_ensemble(train, tables, ensemble_config, config.seed, workers=config.run.workers)
        return model, {"validation_mae": model.validation_mae(), "validation_src": model.validation_src()}

    def run_pseudo(results):
        _, tables = results["load"]
        train, _, unlabeled = results["split"]
        model, report = pseudo_label_loop(
            train, unlabeled, tables, ensemble_config, config.pseudo, config.seed,
            workers=config.run.workers, base_model=results["train"],
        )
        out.mkdir(parents=True, exist_ok=True)
        report.to_jsonl(out / "pseudo_report.jsonl")
        manifest.add_artifact("pseudo_report", out / "pseudo_report.jsonl")
        return model, {"selected": report.total_selected, "iterations": len(report.iterations)}

    def run_export(results):
        _, tables = results["load"]
        _, holdout, _ = results["split"]
        model = results.get("pseudo", results["train"])
        write_artifact(config.model_path(), model.to_sections())
        manifest.add_artifact("model", config.model_path())
        manifest.diagnostics["fold_weights"] = model.weights.tolist()
        manifest.diagnostics["fold_metrics"] = [f.metrics for f in model.folds]
        if holdout:
            src, error, _ = score(model, holdout, tables)
        else:
            src, error = model.validation_src(), model.validation_mae()
        return (src, error), {"src": src, "mae": error, "scored_on": "holdout" if holdout else "out-of-fold"}

    results = StageRunner(["load", "split", "train", "pseudo", "export"], manifest, disabled).run({
        "load": lambda _: (load_dataset(config), None),
        "split": run_split,
        "train": run_train,
        "pseudo": run_pseudo,
        "export": run_export,
    })
    src, error = results["export"]
    return f"SRC={src:.4f} MAE={error:.4f}"


def cmd_predict(config, args, manifest):
    out = config.out_dir()

    def run_predict(results):
        posts, tables = results["load"]
        model, path = _load_model(config, args.model)
        yhat = ensemble_predict(model, posts, tables)
        out.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame({"post_id": [p.post_id for p in posts], "prediction": yhat})
        frame.to_csv(out / "predictions.csv", index=False, float_format="%.6f")
        manifest.add_artifact("predictions", out / "predictions.csv")
        return frame, {"rows": len(frame), "model": str(path)}

    StageRunner(["load", "predict"], manifest).run({
        "load": lambda _: (load_dataset(config), None),
        "predict": run_predict,
    })


def cmd_evaluate(config, args, manifest):
    out = config.out_dir()

    def run_evaluate(results):
        posts, tables = results["load"]
        labeled = [p for p in posts if p.has_label]
        if config.paths.predictions:
            frame = pd.read_csv(config.resolve("predictions"), dtype={"post_id": str})
            by_id = dict(zip(frame["post_id"], frame["prediction"]))
            missing = [p.post_id for p in labeled if p.post_id not in by_id]
            if missing:
                raise DataError(f"{len(missing)} labeled posts have no prediction, e.g. {missing[0]}")
            scored = labeled
            yhat = np.array([by_id[p.post_id] for p in scored], dtype=np.float64)
        else:
            model, _ = _load_model(config, args.model)
            _, holdout = _labeled_split(config, posts)
            scored = holdout or labeled
            yhat = ensemble_predict(model, scored, tables)
        y = np.array([p.label for p in scored], dtype=np.float64)
        report = evaluate_predictions(y, yhat, config.evaluate.bins)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(report.to_json()), encoding="utf-8")
        write_distribution(report.histogram, report.density, out / "histogram.csv", out / "density.csv")
        for name in ("metrics.json", "histogram.csv", "density.csv"):
            manifest.add_artifact(name.split(".")[0], out / name)
        return report, report.to_json()

    StageRunner(["load", "evaluate"], manifest).run({
        "load": lambda _: (load_dataset(config), None),
        "evaluate": run_evaluate,
    })


def cmd_ablate(config, args, manifest):
    out = config.out_dir()

    def run_ablate(results):
        posts, tables = results["load"]
        table = ablation_run(
            config.ensemble_config(), config.pseudo, config.evaluate.ablations, posts, tables, config.seed,
            config.ensemble.holdout_fraction, config.run.workers,
        )
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / "ablation.csv", index=False)
        manifest.add_artifact("ablation", out / "ablation.csv")
        return table, {"variants": len(table)}

    StageRunner(["load", "ablate"], manifest).run({
        "load": lambda _: (load_dataset(config), None),
        "ablate": run_ablate,
    })


def cmd_importance(config, args, manifest):
    out = config.out_dir()

    def run_importance(results):
        posts, tables = results["load"]
        model, _ = _load_model(config, args.model)
        train, holdout = _labeled_split(config, posts)
        importances = permutation_importance(
            model, holdout or train, tables, config.evaluate.importance_repeats, config.seed, config.run.workers,
        )
        out.mkdir(parents=True, exist_ok=True)
        rank_importances(importances, config.evaluate.top_features).to_csv(out / "importance.csv", index=False)
        modality_importance(importances).to_csv(out / "modality_importance.csv", index=False)
        manifest.add_artifact("importance", out / "importance.csv")
        manifest.add_artifact("modality_importance", out / "modality_importance.csv")
        return importances, {"columns": len(importances)}

    StageRunner(["load", "importance"], manifest).run({
        "load": lambda _: (load_dataset(config), None),
        "importance": run_importance,
    })


HANDLERS = {
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "importance": cmd_importance,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="popfusion", description="Multimodal popularity prediction pipeline")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--seed", type=int, help="override [run].seed")
    parser.add_argument("--workers", type=int, help="override [run].workers")
    parser.add_argument("--out", help="override [run].out_dir")
    parser.add_argument("--model", help="model artifact for predict/evaluate/importance")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    stage = "config"
    try:
        config = with_overrides(load_config(args.config), args.seed, args.workers, args.out)
        stage = args.command
        manifest = RunManifest.start(args.command, config)
        try:
            final_line = HANDLERS[args.command](config, args, manifest)
        finally:
            # failed runs keep their manifest so the failing stage is on record
            manifest.write(config.out_dir() / f"{args.command}_manifest.json")
    except PipelineError as e:
        print(f"error[{getattr(e, 'stage', stage)}]: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception("unexpected failure")
        print(f"error[{stage}]: {e}", file=sys.stderr)
        return 4
    if final_line:
        print(final_line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
