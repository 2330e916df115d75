import argparse
import json
import logging
import os
import sys
from typing import Dict, Optional

from dotenv import load_dotenv

load_dotenv()

# Add root to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from eval.metrics import (  # noqa: E402
    EvalReport, evaluate, mcnemar_test, predict_recordings, render_markdown, report_from_predictions,
)
from services.data.ingest import load_recordings  # noqa: E402
from services.errors import DataError  # noqa: E402
from services.model.checkpoint import load_checkpoint  # noqa: E402

logger = logging.getLogger(__name__)


def write_report(report: EvalReport, report_path: str, title: str = "Evaluation Report") -> Dict[str, str]:
    """JSON at ``report_path`` and a Markdown summary next to it."""
    md_path = os.path.splitext(report_path)[0] + ".md"
    try:
        os.makedirs(os.path.dirname(report_path) or ".", exist_ok=True)
        with open(report_path, "w") as f:
            f.write(report.model_dump_json(indent=2))
        with open(md_path, "w") as f:
            f.write(render_markdown(report, title))
    except OSError as e:
        raise DataError(f"cannot write report {report_path}: {e}") from e
    return {"report": report_path, "markdown": md_path}


def run_eval(model_path: str, data_dir: str, report_path: str, expected_config: Optional[Dict] = None) -> EvalReport:
    logger.info("Evaluating %s on %s", model_path, data_dir)
    model = load_checkpoint(model_path, expected_config)
    cycles = load_recordings(data_dir)
    report = evaluate(model, cycles)
    write_report(report, report_path)
    logger.info("Macc %.4f (sens %.4f, spec %.4f), avg domain accuracy %.4f",
                report.macc, report.sensitivity, report.specificity, report.avg_domain_accuracy)
    return report


def run_compare(model_a: str, model_b: str, data_dir: str, report_path: str) -> Dict:
    """Both checkpoints on one dataset, with McNemar's test on their recording-level predictions."""
    cycles = load_recordings(data_dir)
    tables = [predict_recordings(load_checkpoint(path), cycles) for path in (model_a, model_b)]
    statistic, p_value = mcnemar_test(tables[0]["label"], tables[0]["prediction"], tables[1]["prediction"])
    reports = [report_from_predictions(t["label"], t["prediction"], t["domain"]) for t in tables]
    result = {
        "model_a": {"path": model_a, **reports[0].model_dump(mode="json")},
        "model_b": {"path": model_b, **reports[1].model_dump(mode="json")},
        "mcnemar": {"statistic": statistic, "p_value": p_value},
    }
    os.makedirs(os.path.dirname(report_path) or ".", exist_ok=True)
    with open(report_path, "w") as f:
        json.dump(result, f, indent=2)
    return result


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--model", required=True)
    parser.add_argument("--data", required=True)
    parser.add_argument("--report", default="reports/eval_report.json")
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO)
    result = run_eval(args.model, args.data, args.report)
    print("\nResults:", result.model_dump_json(indent=2))
