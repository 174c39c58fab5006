"""
Application layer: wires the processing modules into the pipeline steps the
command line exposes (gen-data, train, score, eval, detect, ablate, benchmark).

Every step takes a resolved RunConfig and explicit paths; reports come back as
plain dictionaries ready for JSON rendering.
"""

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pandas as pd

from backend.src.config import TOOLKIT_NAME, TOOLKIT_VERSION
from backend.src.errors import ConfigError
from backend.src.processing.baselines import (
    iforest_fit,
    iforest_score,
    lof_fit,
    lof_score,
    mahalanobis_fit,
    mahalanobis_score,
    maxlogit_score,
    msp_score,
    odin_score,
    require_fitted,
)
from backend.src.processing.data import (
    SPLIT_TAGS,
    generate_id,
    generate_ood,
    load_csv,
    load_logits_csv,
    load_scores_csv,
    save_csv,
    split_by_counts,
    split_dataset,
    write_scores_csv,
)
from backend.src.processing.energy import Decision, JointEnergyDetector, free_energy, joint_energy
from backend.src.processing.metrics import ScoreSet, evaluate
from backend.src.processing.model import Trainer, load_model, measure_block_lipschitz, save_model
from backend.src.processing.spectral import lipschitz_bounds
from backend.src.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1

# === METHODS ===
METHODS = (
    "snojoe",
    "jointenergy",
    "free-energy",
    "msp",
    "maxlogit",
    "odin",
    "mahalanobis",
    "lof",
    "iforest",
)
FEATURE_METHODS = ("mahalanobis", "lof", "iforest")

# Child-seed indices of the master seed beyond the per-L ablation seeds
IFOREST_SEED_INDEX = 1000


# --- REPORTS ---
def build_report(report_type, config, body):
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "report_type": report_type,
        "toolkit": {"name": TOOLKIT_NAME, "version": TOOLKIT_VERSION},
        "master_seed": config.master_seed,
        "config": config.to_dict(),
    }
    doc.update(body)
    return doc


def render_json(doc):
    """Serialize a report; raises before anything is written if a value is not finite."""
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


# === GEN-DATA ===
def gen_data(config, out_dir):
    """Write ID train/val/test and OOD CSVs; returns [(path, sha256)]."""
    os.makedirs(out_dir, exist_ok=True)
    spec = config.data.synthetic_spec()
    id_data = split_dataset(generate_id(spec), tuple(config.data.split_fractions), seed=spec.seed)
    written = []
    for tag in SPLIT_TAGS:
        part = id_data.subset(tag)
        paths = (os.path.join(out_dir, f"id_{tag}_features.csv"), os.path.join(out_dir, f"id_{tag}_labels.csv"))
        written.extend(zip(paths, save_csv(part, *paths)))
    ood = generate_ood(spec, samples=config.data.ood_samples)
    paths = (os.path.join(out_dir, "ood_features.csv"), os.path.join(out_dir, "ood_labels.csv"))
    written.extend(zip(paths, save_csv(ood, *paths)))
    return written


# === TRAIN ===
def train_model(config, features_path, labels_path, model_path, log_path=None, progress=False):
    dataset = load_csv(features_path, labels_path)
    if dataset.num_labels == 0:
        raise ConfigError("training needs a labels file")
    model_config = config.model.model_config(dataset.input_dim, dataset.num_labels)
    trainer = Trainer(model_config, progress=progress)
    model = trainer.fit(dataset.features, dataset.labels)
    save_model(model, model_path)
    if log_path:
        log = pd.DataFrame({"epoch": np.arange(1, len(trainer.epoch_losses) + 1), "loss": trainer.epoch_losses})
        log.to_csv(log_path, index=False, float_format="%.17g", lineterminator="\n")
        logger.info("Loss log written to %s", log_path)
    return model, trainer.epoch_losses


# === SCORE ===
def fit_auxiliaries(method, model, fit_features, fit_labels, config):
    """Fit the feature-space detector of `method` on the model's penultimate features."""
    if method not in FEATURE_METHODS:
        return None
    Z = model.forward(fit_features).penultimate
    m = config.methods
    if method == "mahalanobis":
        return mahalanobis_fit(Z, fit_labels, m.mahalanobis_ridge)
    if method == "lof":
        return lof_fit(Z, m.lof_k)
    return iforest_fit(Z, m.iforest_trees, m.iforest_subsample, seed=derive_seed(config.master_seed, IFOREST_SEED_INDEX))


def score_logits(method, logits, config):
    """Scores computable from logits alone."""
    m = config.methods
    if method in ("snojoe", "jointenergy"):
        return np.atleast_1d(joint_energy(logits))
    if method == "free-energy":
        return np.atleast_1d(free_energy(logits))
    if method == "msp":
        return np.atleast_1d(msp_score(logits))
    if method == "maxlogit":
        return np.atleast_1d(maxlogit_score(logits))
    if method == "odin":
        if m.odin_epsilon > 0:
            raise ConfigError("ODIN with epsilon > 0 needs a model, not precomputed logits")
        return np.atleast_1d(odin_score(lambda z: z, logits, m.odin_temperature, 0.0))
    raise ConfigError(f"method '{method}' cannot score from logits alone")


def score_features(method, model, X, config, auxiliary=None):
    if method not in METHODS:
        raise ConfigError(f"unknown method '{method}', expected one of {METHODS}")
    if method == "snojoe" and model.config.sn_layers == 0:
        logger.warning("[WARNING] 'snojoe' on a model trained without spectral normalization")
    if method == "jointenergy" and model.config.sn_layers > 0:
        logger.warning("[WARNING] 'jointenergy' on a spectrally normalized model")
    m = config.methods
    if method == "odin":
        return np.atleast_1d(odin_score(model, X, m.odin_temperature, m.odin_epsilon))
    forward = model.forward(X)
    if method == "mahalanobis":
        return mahalanobis_score(require_fitted(method, auxiliary), forward.penultimate)
    if method == "lof":
        return lof_score(require_fitted(method, auxiliary), forward.penultimate)
    if method == "iforest":
        return iforest_score(require_fitted(method, auxiliary), forward.penultimate)
    return score_logits(method, forward.logits, config)


def score_file(config, method, input_path, out_path, model_path=None, fit_features=None,
               fit_labels=None, input_is_logits=False):
    if method not in METHODS:
        raise ConfigError(f"unknown method '{method}', expected one of {METHODS}")
    if input_is_logits:
        scores = score_logits(method, load_logits_csv(input_path), config)
    else:
        if model_path is None:
            raise ConfigError("scoring features needs --model")
        model = load_model(model_path)
        auxiliary = None
        if method in FEATURE_METHODS:
            if fit_features is None or fit_labels is None:
                require_fitted(method, None)
            fit = load_csv(fit_features, fit_labels)
            auxiliary = fit_auxiliaries(method, model, fit.features, fit.labels, config)
        X = load_csv(input_path).features
        scores = score_features(method, model, X, config, auxiliary)
    checksum = write_scores_csv(scores, out_path)
    logger.info("Wrote %d %s scores to %s", len(scores), method, out_path)
    return scores, checksum


# === EVAL / DETECT ===
def eval_files(config, id_scores_path, ood_scores_path, method_name="unnamed"):
    scores = ScoreSet(load_scores_csv(id_scores_path), load_scores_csv(ood_scores_path), method_name)
    report = evaluate(scores, config.methods.target_tpr, seed=config.master_seed, flip_aupr=config.methods.flip_aupr)
    return build_report("detection", config, {"report": report.to_dict()})


def detect_file(config, model_path, calibration_path, input_path, out_path):
    detector = JointEnergyDetector(load_model(model_path))
    threshold = detector.calibrate(load_csv(calibration_path).features, config.methods.target_tpr)
    scores, decisions = detector.decide(load_csv(input_path).features)
    write_scores_csv(scores, out_path, decisions)
    flagged = sum(1 for d in decisions if d is Decision.OUT)
    logger.info("%d of %d rows flagged out-of-distribution", flagged, len(decisions))
    return threshold, decisions


# === ABLATION / BENCHMARK ===
def benchmark_data(config):
    """ID train/val/test split plus one OOD set per configured regime."""
    d = config.data
    counts = (d.train_samples, d.val_samples, d.test_samples)
    spec = d.synthetic_spec(samples=sum(counts))
    id_data = split_by_counts(generate_id(spec), counts, seed=spec.seed)
    splits = {tag: id_data.subset(tag) for tag in SPLIT_TAGS}
    ood = {mode: generate_ood(d.synthetic_spec(ood_mode=mode), samples=d.ood_samples) for mode in d.ood_modes}
    return splits, ood


def train_and_evaluate(config, train, id_test, ood, sn_layers, seed, progress=False):
    """One ablation point: train with `sn_layers`, joint-energy scores, metrics, Lipschitz measurement."""
    model_config = config.model.model_config(train.input_dim, train.num_labels, sn_layers=sn_layers, seed=seed)
    model = Trainer(model_config, progress=progress).fit(train.features, train.labels)
    scores = ScoreSet(joint_energy(model(id_test.features)), joint_energy(model(ood.features)), "jointenergy")
    report = evaluate(scores, config.methods.target_tpr, seed=seed, flip_aupr=config.methods.flip_aupr)

    partners = make_rng(seed, "pairs").permutation(len(id_test))
    alpha = float(np.max(measure_block_lipschitz(model, id_test.features, id_test.features[partners])))
    lower = upper = None
    if 0 < alpha <= 1:
        bounds = lipschitz_bounds(alpha, model_config.num_blocks + 1)
        lower, upper = bounds.lower, bounds.upper
    return {
        "sn_layers": int(sn_layers),
        "seed": int(seed),
        "fpr95": report.fpr95,
        "auroc": report.auroc,
        "aupr": report.aupr,
        "tau": report.tau,
        "max_block_lipschitz": alpha,
        "lipschitz_lower": lower,
        "lipschitz_upper": upper,
    }


def _ablation_point(args):
    return train_and_evaluate(*args)


def run_ablation(config, layers, jobs=1, progress=False):
    layers = sorted(set(int(l) for l in layers))
    if not layers:
        raise ConfigError("ablation needs at least one layer count")
    limit = config.model.num_blocks + 1
    if layers[0] < 0 or layers[-1] > limit:
        raise ConfigError(f"layer counts must lie in 0..{limit} for {config.model.num_blocks} blocks")
    splits, ood_sets = benchmark_data(config)
    ood = ood_sets[config.data.ood_modes[0]]
    points = [
        (config, splits["train"], splits["test"], ood, L, derive_seed(config.master_seed, L), progress and jobs == 1)
        for L in layers
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_ablation_point, points))
    else:
        rows = [_ablation_point(p) for p in points]
    return build_report("ablation", config, {"ood_mode": config.data.ood_modes[0], "rows": rows})


def run_benchmark(config, progress=False):
    """All nine methods against every configured OOD regime."""
    splits, ood_sets = benchmark_data(config)
    train, test = splits["train"], splits["test"]
    sn_layers = config.model.sn_layers
    master = config.master_seed

    def fit(layers):
        model_config = config.model.model_config(
            train.input_dim, train.num_labels, sn_layers=layers, seed=derive_seed(master, layers)
        )
        return Trainer(model_config, progress=progress).fit(train.features, train.labels)

    plain = fit(0)
    normalized = fit(sn_layers) if sn_layers > 0 else plain
    if sn_layers == 0:
        logger.warning("[WARNING] model.sn_layers is 0: 'snojoe' equals 'jointenergy' in this benchmark")
    auxiliaries = {
        method: fit_auxiliaries(method, plain, train.features, train.labels, config) for method in FEATURE_METHODS
    }

    results = []
    for mode, ood in ood_sets.items():
        for method in METHODS:
            model = normalized if method == "snojoe" else plain
            aux = auxiliaries.get(method)
            scores = ScoreSet(
                score_features(method, model, test.features, config, aux),
                score_features(method, model, ood.features, config, aux),
                method,
            )
            report = evaluate(scores, config.methods.target_tpr, seed=master, flip_aupr=config.methods.flip_aupr)
            results.append({"ood_mode": mode, **report.to_dict()})
    return build_report("benchmark", config, {"results": results})
