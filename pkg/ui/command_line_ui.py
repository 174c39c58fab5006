import argparse

from backend.src.app import METHODS
from backend.src.config import CONFIG_ENV_VAR, TOOLKIT_NAME, TOOLKIT_VERSION
from backend.src.processing.data import OOD_MODES


def _int_list(text):
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")


def _mode_list(text):
    modes = [part.strip() for part in text.split(",") if part.strip()]
    bad = [m for m in modes if m not in OOD_MODES]
    if bad or not modes:
        raise argparse.ArgumentTypeError(f"OOD modes must be drawn from {OOD_MODES}, got {text!r}")
    return modes


def _float_list(text):
    try:
        return [float(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


class CommandLineUI:
    """
    Builds the argument parser. Every sub-command parser is kept as an
    attribute so the application can attach its handler to it.

    Flags that mirror a RunConfig field are recorded in `self.override_keys`
    (argparse dest -> "section.key"); unset flags stay None and leave the
    config file value alone.
    """

    def __init__(self):
        self.override_keys = {}
        self.parser = argparse.ArgumentParser(
            prog=TOOLKIT_NAME,
            description="Spectral-normalized joint-energy OOD detection for multi-label classifiers.",
        )
        self.parser.add_argument("--version", action="version", version=f"{TOOLKIT_NAME} {TOOLKIT_VERSION}")
        self.parser.add_argument(
            "--config", metavar="PATH", help=f"YAML run config (default: ${CONFIG_ENV_VAR} when set)"
        )
        self.parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], default=None)
        self.parser.add_argument("--quiet", action="store_true", help="disable progress bars")
        self._override(self.parser, "--seed", "master_seed", int, "master seed for derived seeds")

        commands = self.parser.add_subparsers(dest="command", metavar="COMMAND")
        commands.required = True

        # --- gen-data ---
        self.gen_data_parser = commands.add_parser("gen-data", help="write synthetic ID and OOD CSVs")
        self.gen_data_parser.add_argument("--out-dir", required=True)
        self._data_flags(self.gen_data_parser)

        # --- train ---
        self.train_parser = commands.add_parser("train", help="train the residual multi-label classifier")
        self.train_parser.add_argument("--features", required=True)
        self.train_parser.add_argument("--labels", required=True)
        self.train_parser.add_argument("--model-out", required=True)
        self.train_parser.add_argument("--loss-log", help="per-epoch loss CSV")
        self._model_flags(self.train_parser)

        # --- score ---
        self.score_parser = commands.add_parser("score", help="score rows with one detection method")
        self.score_parser.add_argument("--method", required=True, choices=METHODS)
        self.score_parser.add_argument("--input", required=True, help="features CSV (or logits CSV with --input-logits)")
        self.score_parser.add_argument("--out", required=True)
        self.score_parser.add_argument("--model")
        self.score_parser.add_argument("--input-logits", action="store_true", help="input holds logits, not features")
        self.score_parser.add_argument("--fit-features", "--fit-data", dest="fit_features",
                                       help="ID features the feature-space methods are fitted on")
        self.score_parser.add_argument("--fit-labels")
        self._method_flags(self.score_parser)

        # --- eval ---
        self.eval_parser = commands.add_parser("eval", help="FPR95 / AUROC / AUPR of two score files")
        self.eval_parser.add_argument("--id-scores", required=True)
        self.eval_parser.add_argument("--ood-scores", required=True)
        self.eval_parser.add_argument("--method-name", default="unnamed")
        self.eval_parser.add_argument("--out", help="report path (default: stdout)")
        self._override(self.eval_parser, "--tpr", "methods.target_tpr", float)
        self._override(self.eval_parser, "--flip-aupr", "methods.flip_aupr", None, "report AUPR with OOD positive")

        # --- detect ---
        self.detect_parser = commands.add_parser("detect", help="calibrate tau and flag OOD rows")
        self.detect_parser.add_argument("--model", required=True)
        self.detect_parser.add_argument("--calibration", required=True, help="held-out ID features CSV")
        self.detect_parser.add_argument("--input", required=True)
        self.detect_parser.add_argument("--out", required=True)
        self._override(self.detect_parser, "--tpr", "methods.target_tpr", float)

        # --- ablate ---
        self.ablate_parser = commands.add_parser("ablate", help="sweep the number of normalized layers")
        self.ablate_parser.add_argument("--layers", type=_int_list, default=[0, 1, 2, 3])
        self.ablate_parser.add_argument("--jobs", type=int, default=1)
        self.ablate_parser.add_argument("--out", help="report path (default: stdout)")
        self._data_flags(self.ablate_parser)
        self._model_flags(self.ablate_parser)
        self._override(self.ablate_parser, "--tpr", "methods.target_tpr", float)

        # --- benchmark ---
        self.benchmark_parser = commands.add_parser("benchmark", help="all methods against every OOD regime")
        self.benchmark_parser.add_argument("--out", help="report path (default: stdout)")
        self._data_flags(self.benchmark_parser)
        self._model_flags(self.benchmark_parser)
        self._method_flags(self.benchmark_parser)
        self._override(self.benchmark_parser, "--tpr", "methods.target_tpr", float)

    def _override(self, parser, flag, key, kind, help_text=None):
        dest = flag.lstrip("-").replace("-", "_")
        if kind is None:
            parser.add_argument(flag, dest=dest, action="store_const", const=True, default=None, help=help_text)
        else:
            parser.add_argument(flag, dest=dest, type=kind, default=None, help=help_text)
        self.override_keys[dest] = key

    def _data_flags(self, parser):
        self._override(parser, "--num-labels", "data.num_labels", int)
        self._override(parser, "--input-dim", "data.input_dim", int)
        self._override(parser, "--samples", "data.samples", int)
        self._override(parser, "--label-prob", "data.label_prob", float)
        self._override(parser, "--noise-sigma", "data.noise_sigma", float)
        self._override(parser, "--prototype-scale", "data.prototype_scale", float)
        self._override(parser, "--data-seed", "data.seed", int)
        self._override(parser, "--ood-mode", "data.ood_mode", str)
        self._override(parser, "--ood-modes", "data.ood_modes", _mode_list, "comma-separated OOD regimes")
        self._override(parser, "--shift-magnitude", "data.shift_magnitude", float)
        self._override(parser, "--ood-samples", "data.ood_samples", int)
        self._override(parser, "--split-fractions", "data.split_fractions", _float_list, "train,val,test")
        self._override(parser, "--train-samples", "data.train_samples", int)
        self._override(parser, "--val-samples", "data.val_samples", int)
        self._override(parser, "--test-samples", "data.test_samples", int)

    def _model_flags(self, parser):
        self._override(parser, "--hidden-dim", "model.hidden_dim", int)
        self._override(parser, "--num-blocks", "model.num_blocks", int)
        self._override(parser, "--sn-layers", "model.sn_layers", int)
        self._override(parser, "--learning-rate", "model.learning_rate", float)
        self._override(parser, "--epochs", "model.epochs", int)
        self._override(parser, "--batch-size", "model.batch_size", int)
        self._override(parser, "--model-seed", "model.seed", int)

    def _method_flags(self, parser):
        self._override(parser, "--odin-temperature", "methods.odin_temperature", float)
        self._override(parser, "--odin-epsilon", "methods.odin_epsilon", float)
        self._override(parser, "--mahalanobis-ridge", "methods.mahalanobis_ridge", float)
        self._override(parser, "--lof-k", "methods.lof_k", int)
        self._override(parser, "--iforest-trees", "methods.iforest_trees", int)
        self._override(parser, "--iforest-subsample", "methods.iforest_subsample", int)
        self._override(parser, "--flip-aupr", "methods.flip_aupr", None, "report AUPR with OOD positive")

    def parse(self, argv=None):
        return self.parser.parse_args(argv)

    def overrides(self, args):
        """{"section.key": value} for every config flag given on the command line."""
        return {
            key: getattr(args, dest)
            for dest, key in self.override_keys.items()
            if getattr(args, dest, None) is not None
        }
