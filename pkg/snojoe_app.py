import logging
import sys

# --- IMPORT BACKEND MODULES ---
from backend.src import app as pipeline
from backend.src.config import load_run_config
from backend.src.errors import SnojoeError
# Command line and report rendering:
from ui.command_line_ui import CommandLineUI
from ui.report_ui import ReportUI

logger = logging.getLogger("snojoe")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class SnojoeApp:
    def __init__(self, argv=None, stdout=None):
        # --- A. Build the interface ---
        self.ui = CommandLineUI()
        self.reports = ReportUI(stdout)

        # --- B. Connect sub-commands to their handlers ---
        self.ui.gen_data_parser.set_defaults(handler=self.gen_data)
        self.ui.train_parser.set_defaults(handler=self.train)
        self.ui.score_parser.set_defaults(handler=self.score)
        self.ui.eval_parser.set_defaults(handler=self.evaluate)
        self.ui.detect_parser.set_defaults(handler=self.detect)
        self.ui.ablate_parser.set_defaults(handler=self.ablate)
        self.ui.benchmark_parser.set_defaults(handler=self.benchmark)

        self.args = self.ui.parse(argv)
        self.config = None

    # --- SETUP ---

    def _init_config(self):
        config = load_run_config(self.args.config)
        return config.with_overrides(self.ui.overrides(self.args))

    def _init_logging(self):
        logging.basicConfig(level=(self.args.log_level or "INFO"), format=LOG_FORMAT, stream=sys.stderr, force=True)

    def _apply_config_log_level(self):
        if self.args.log_level is None:
            logging.getLogger().setLevel(str(self.config.log_level).upper())

    @property
    def progress(self):
        return not self.args.quiet and sys.stderr.isatty()

    def run(self):
        """Run the selected command; returns the process exit code."""
        try:
            self._init_logging()
            self.config = self._init_config()
            self._apply_config_log_level()
            self.args.handler()
        except SnojoeError as e:
            logger.error("[ERROR] %s", e)
            return e.exit_code
        except (OSError, ValueError) as e:
            logger.error("[ERROR] %s", e)
            return 1
        return 0

    # --- COMMANDS ---

    def gen_data(self):
        written = pipeline.gen_data(self.config, self.args.out_dir)
        self.reports.show_files(written)

    def train(self):
        _, losses = pipeline.train_model(
            self.config, self.args.features, self.args.labels, self.args.model_out,
            log_path=self.args.loss_log, progress=self.progress,
        )
        logger.info("Model written to %s (final loss %.6f)", self.args.model_out, losses[-1] if losses else float("nan"))

    def score(self):
        pipeline.score_file(
            self.config, self.args.method, self.args.input, self.args.out,
            model_path=self.args.model, fit_features=self.args.fit_features,
            fit_labels=self.args.fit_labels, input_is_logits=self.args.input_logits,
        )

    def evaluate(self):
        doc = pipeline.eval_files(self.config, self.args.id_scores, self.args.ood_scores, self.args.method_name)
        self.reports.emit(doc, self.args.out)

    def detect(self):
        pipeline.detect_file(self.config, self.args.model, self.args.calibration, self.args.input, self.args.out)

    def ablate(self):
        doc = pipeline.run_ablation(self.config, self.args.layers, jobs=self.args.jobs, progress=self.progress)
        self.reports.emit(doc, self.args.out)

    def benchmark(self):
        doc = pipeline.run_benchmark(self.config, progress=self.progress)
        self.reports.emit(doc, self.args.out)


def main(argv=None):
    return SnojoeApp(argv).run()


if __name__ == "__main__":
    sys.exit(main())
