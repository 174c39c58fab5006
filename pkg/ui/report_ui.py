import logging
import sys

import pandas as pd

from backend.src.app import render_json

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = {
    "detection": ["method_name", "fpr95", "auroc", "aupr", "tau"],
    "ablation": ["sn_layers", "fpr95", "auroc", "aupr", "max_block_lipschitz"],
    "benchmark": ["ood_mode", "method_name", "fpr95", "auroc", "aupr"],
}


class ReportUI:
    """Renders reports: JSON to a file or stdout, a readable summary table to the log."""

    def __init__(self, stream=None):
        self.stream = stream or sys.stdout

    def emit(self, doc, out_path=None):
        # rendered in full before anything is written
        text = render_json(doc)
        if out_path:
            with open(out_path, "w", encoding="utf-8") as fh:
                fh.write(text)
            logger.info("Report written to %s", out_path)
        else:
            self.stream.write(text)
            self.stream.flush()
        self.summary(doc)
        return text

    def summary(self, doc):
        kind = doc.get("report_type")
        if kind == "detection":
            rows = [doc["report"]]
        elif kind == "ablation":
            rows = doc["rows"]
        elif kind == "benchmark":
            rows = doc["results"]
        else:
            return None
        table = pd.DataFrame(rows, columns=SUMMARY_COLUMNS[kind]).to_string(index=False, float_format="%.4f")
        logger.info("%s summary:\n%s", kind, table)
        return table

    def show_files(self, written):
        """One `sha256  path` line per written file."""
        for path, checksum in written:
            self.stream.write(f"{checksum}  {path}\n")
        self.stream.flush()
