"""Command line for data generation, training, evaluation and analysis.

Every subcommand accepts ``--config FILE`` (KEY=value lines, keys named after the
long flags) and writes a manifest.json into its output directory. Explicit flags
win over the config file, which wins over built-in defaults.
"""
import argparse
import json
import logging
import os
import subprocess
import sys
from datetime import datetime, timezone
from importlib import metadata
from typing import Dict, List, Optional, Sequence

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, Field

load_dotenv()

# Add root to sys.path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "../..")))

import pandas as pd  # noqa: E402

from eval.metrics import evaluate  # noqa: E402
from eval.run_eval import run_compare, run_eval, write_report  # noqa: E402
from services.data.cycles import Label, split_by_recording  # noqa: E402
from services.data.ingest import export_dataset, load_recordings  # noqa: E402
from services.data.synth import PRESETS, build_preset, generate_preset  # noqa: E402
from services.dsp.fir import freq_response  # noqa: E402
from services.errors import ConfigurationError, PcgError  # noqa: E402
from services.frontend.filterbank import effective_taps, write_kernel_export  # noqa: E402
from services.frontend.kernels import FrontendKind, default_kernel_length  # noqa: E402
from services.interpret.gradcam_export import export_gradcam_batch  # noqa: E402
from services.interpret.snapshots import (  # noqa: E402
    SnapshotRecorder, gammatone_param_trace, load_snapshots, save_snapshot, snapshot_filters,
)
from services.model.branched_cnn import BranchedCnn, BranchedCnnConfig  # noqa: E402
from services.model.checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from services.observability.langfuse_client import flush  # noqa: E402
from services.settings import get_settings  # noqa: E402
from services.training.train import TrainConfig, train  # noqa: E402

logger = logging.getLogger("pcg")

PACKAGE = "pcg-tconv"
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class RunManifest(BaseModel):
    command: str
    config: Dict = Field(default_factory=dict)
    seed: Optional[int] = None
    version: str
    git_commit: Optional[str] = None
    started_at: str
    finished_at: Optional[str] = None
    outputs: Dict[str, str] = Field(default_factory=dict)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _version() -> str:
    try:
        return metadata.version(PACKAGE)
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _git_commit() -> Optional[str]:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def write_manifest(out_dir: str, args: argparse.Namespace, started_at: str, outputs: Dict[str, str]) -> str:
    config = {k: v for k, v in vars(args).items() if k not in ("handler", "config")}
    manifest = RunManifest(
        command=args.command,
        config=json.loads(json.dumps(config, default=str)),
        seed=getattr(args, "seed", None),
        version=_version(),
        git_commit=_git_commit(),
        started_at=started_at,
        finished_at=_now(),
        outputs=outputs,
    )
    path = os.path.join(out_dir, "manifest.json")
    os.makedirs(out_dir, exist_ok=True)
    with open(path, "w") as f:
        f.write(manifest.model_dump_json(indent=2))
    return path


def _out_dir(args) -> str:
    return args.out or os.path.join(get_settings().output_root, args.command)


def _parse_counts(counts: str):
    """'N' or 'N/M' -> (normal, abnormal) cycles per domain."""
    try:
        parts = [int(p) for p in str(counts).split("/")]
    except ValueError:
        raise ConfigurationError(f"--cycles-per-domain expects N or N/M, got {counts!r}") from None
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or min(parts) < 0:
        raise ConfigurationError(f"--cycles-per-domain expects N or N/M, got {counts!r}")
    return parts[0], parts[1]


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> Dict[str, str]:
    if args.preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {args.preset!r}; expected one of {', '.join(PRESETS)}")
    n_normal, n_abnormal = _parse_counts(args.cycles_per_domain)
    preset = build_preset(args.preset, args.domains, n_normal, n_abnormal)
    cycles = generate_preset(preset, seed=args.seed, cycles_per_recording=args.cycles_per_recording,
                             workers=args.workers)
    out = _out_dir(args)
    paths = export_dataset(cycles, out)
    logger.info("Wrote %d cycles (%s preset, %d domains) to %s", len(cycles), args.preset, args.domains, out)
    return paths


def model_config_from_args(args) -> BranchedCnnConfig:
    kind = FrontendKind.parse(args.frontend)
    return BranchedCnnConfig.build(
        frontend_kind=kind,
        frontend_K=args.K if args.K is not None else default_kernel_length(kind),
        dropout_p=args.dropout,
        freeze_frontend=args.freeze_frontend,
        init_seed=args.seed,
    )


def cmd_train(args) -> Dict[str, str]:
    model_config = model_config_from_args(args)
    train_config = TrainConfig.build(
        batch_size=args.batch,
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        dbt=args.dbt,
        reference_domain=args.reference_domain,
        iterations_per_epoch=args.iterations_per_epoch,
        snapshot_every=args.snapshot_every,
        prefetch=args.prefetch,
    )
    cycles = load_recordings(args.data)
    val_cycles = None
    if args.val_fraction > 0:
        cycles, val_cycles = split_by_recording(cycles, args.val_fraction, seed=args.seed)

    out = _out_dir(args)
    snapshot_dir = os.path.join(out, "snapshots")
    recorder = SnapshotRecorder(snapshot_dir, every=train_config.snapshot_every, final_epoch=train_config.epochs)
    model = BranchedCnn(model_config)
    result = train(cycles, model, train_config, val_cycles=val_cycles, on_epoch_end=recorder)

    paths = {
        "model": save_checkpoint(result.model, os.path.join(out, "model.json"),
                                 extra={"best_epoch": result.best_epoch, "train_config": train_config.model_dump()}),
        "trace": result.trace.write_jsonl(os.path.join(out, "trace.jsonl")),
        "snapshots": snapshot_dir,
    }
    if val_cycles:
        paths.update(write_report(evaluate(result.model, val_cycles), os.path.join(out, "val_report.json"),
                                  "Validation Report"))
    return paths


def cmd_eval(args) -> Dict[str, str]:
    expected = {}
    if args.frontend:
        expected["frontend_kind"] = FrontendKind.parse(args.frontend).value
    if args.K is not None:
        expected["frontend_K"] = args.K
    report_path = args.report or os.path.join(_out_dir(args), "eval_report.json")
    run_eval(args.model, args.data, report_path, expected_config=expected or None)
    return {"report": report_path, "markdown": os.path.splitext(report_path)[0] + ".md"}


def cmd_analyze(args) -> Dict[str, str]:
    model = load_checkpoint(args.model)
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    paths = {"kernels": write_kernel_export(model.frontend, os.path.join(out, "kernels.json"), args.n_fft)}
    fs = model.config.sample_rate_hz
    for i, kernel in enumerate(model.frontend.kernels):
        taps = effective_taps(kernel)
        resp = freq_response(taps, max(args.n_fft, 2 * len(taps)))
        frame = pd.DataFrame({
            "bin": range(resp.magnitude.size),
            "freq_hz": resp.freq_hz(fs),
            "magnitude": resp.magnitude,
            "phase_rad": resp.phase_rad,
            "group_delay": resp.group_delay_samples,
        })
        path = os.path.join(out, f"kernel_{i}_response.csv")
        frame.to_csv(path, index=False)
        paths[f"kernel_{i}"] = path
    snap = snapshot_filters(model, epoch=args.epoch)
    paths["snapshot"] = save_snapshot(snap, out)
    logger.info("Front-end %s, max phase residual %.3g rad", snap.kind, snap.max_residual)

    if args.snapshots:
        snaps = load_snapshots(args.snapshots)
        audit = pd.DataFrame([{"epoch": s.epoch, "max_residual": s.max_residual} for s in snaps])
        paths["phase_audit"] = os.path.join(out, "phase_audit.csv")
        audit.to_csv(paths["phase_audit"], index=False)
        if model.config.frontend_kind is FrontendKind.GAMMATONE:
            paths["gammatone_trace"] = os.path.join(out, "gammatone_trace.csv")
            gammatone_param_trace(snaps).to_csv(paths["gammatone_trace"], index=False)
    return paths


def cmd_gradcam(args) -> Dict[str, str]:
    model = load_checkpoint(args.model)
    cycles = load_recordings(args.data)
    if args.label:
        wanted = Label.parse(args.label)
        cycles = [c for c in cycles if c.label is wanted]
    written = export_gradcam_batch(model, cycles[:args.n], _out_dir(args))
    return {os.path.basename(p): p for p in written}


def cmd_compare(args) -> Dict[str, str]:
    report_path = args.report or os.path.join(_out_dir(args), "compare_report.json")
    result = run_compare(args.model_a, args.model_b, args.data, report_path)
    logger.info("McNemar statistic %.3f, p=%.4g", result["mcnemar"]["statistic"], result["mcnemar"]["p_value"])
    return {"report": report_path}


# ---------------------------------------------------------------- parser

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="KEY=value file mirroring the long flags")
    p.add_argument("--out", help="output directory (default: $PCG_OUTPUT_ROOT/<command>)")
    p.add_argument("--log-level", default="INFO", type=str.upper,
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="DEBUG shows per-iteration losses")


def _add_model_flags(p: argparse.ArgumentParser, defaults: bool = True):
    p.add_argument("--frontend", default="type1" if defaults else None,
                   help="free, type1..type4, zerophase or gammatone")
    p.add_argument("--K", type=int, default=None, help="front-end kernel length (default 61, or 60 for even kinds)")


class CommandParser(argparse.ArgumentParser):
    """Subcommand parser that keeps the actions its own options created."""

    def __init__(self, *args, **kwargs):
        self.options: Dict[str, argparse.Action] = {}
        super().__init__(*args, **kwargs)

    def add_argument(self, *args, **kwargs) -> argparse.Action:
        action = super().add_argument(*args, **kwargs)
        self.options[action.dest] = action
        return action


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcg", description="Learnable FIR front-ends for heart sound classification")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CommandParser)
    parser.commands = sub.choices

    p = sub.add_parser("gen-data", help="generate a synthetic multi-domain dataset")
    _add_common(p)
    p.add_argument("--preset", default="balanced", help=", ".join(PRESETS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domains", type=int, default=2)
    p.add_argument("--cycles-per-domain", default="100/100", help="N or N/M normal/abnormal cycles per domain")
    p.add_argument("--cycles-per-recording", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train the branched CNN")
    _add_common(p)
    p.add_argument("--data", required=True)
    _add_model_flags(p)
    p.add_argument("--dbt", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--reference-domain", type=int, default=None)
    p.add_argument("--iterations-per-epoch", type=int, default=None)
    p.add_argument("--snapshot-every", type=int, default=10)
    p.add_argument("--prefetch", type=int, default=2)
    p.add_argument("--freeze-frontend", action="store_true", help="keep the initial band-pass kernels fixed")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="report JSON path")
    _add_model_flags(p, defaults=False)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("analyze", help="export learned filters and phase audits")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--snapshots", help="snapshot directory of a training run")
    p.add_argument("--n-fft", type=int, default=1024)
    p.add_argument("--epoch", type=int, default=0, help="epoch label for the exported snapshot")
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("gradcam", help="export Grad-CAM maps")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--label", help="only cycles with this label (normal/abnormal)")
    p.set_defaults(handler=cmd_gradcam)

    p = sub.add_parser("compare", help="McNemar's test between two checkpoints")
    _add_common(p)
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="comparison JSON path")
    p.set_defaults(handler=cmd_compare)
    return parser


def _coerce_bool(key: str, value: str) -> bool:
    text = str(value).strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise ConfigurationError(f"config key {key!r}: expected a boolean, got {value!r}")


def _coerce_value(key: str, value: str, action: argparse.Action):
    try:
        converted = action.type(value) if action.type else value
    except (TypeError, ValueError):
        raise ConfigurationError(f"config key {key!r}: invalid value {value!r}") from None
    if action.choices is not None and converted not in action.choices:
        raise ConfigurationError(f"config key {key!r}: expected one of {sorted(action.choices)}, got {value!r}")
    return converted


def apply_config_file(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    """Load --config values as subcommand defaults so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    if not os.path.exists(known.config):
        raise ConfigurationError(f"config file not found: {known.config}")
    sub = parser.commands.get(known.command)
    if sub is None:
        return
    actions = sub.options
    defaults = {}
    for key, value in dotenv_values(known.config).items():
        dest = key.strip().lstrip("-").replace("-", "_")
        if dest not in actions:
            dest = dest.lower()
        if dest not in actions or dest in ("help", "config"):
            raise ConfigurationError(f"config file {known.config}: unknown key {key!r} for '{known.command}'")
        action = actions[dest]
        defaults[dest] = _coerce_bool(key, value) if action.nargs == 0 else _coerce_value(key, value, action)
        action.required = False
    sub.set_defaults(**defaults)


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        logging.getLogger().setLevel(args.log_level)
        started = _now()
        outputs = args.handler(args)
        manifest_dir = _out_dir(args)
        if args.command in ("eval", "compare") and getattr(args, "report", None):
            manifest_dir = os.path.dirname(args.report) or "."
        write_manifest(manifest_dir, args, started, outputs)
    except PcgError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    finally:
        flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
