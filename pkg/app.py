"""
WeedPilot - command-line entry point.

    python app.py <subcommand> [options]

Subcommands: gen-data, ingest, split, augment-preview, train, export,
optimize, eval, bench, simulate. Every subcommand writes machine-readable
outputs into --out-dir and appends to run_log.jsonl there.

Exit codes: 0 success, 1 operational failure (JSON error on stderr), 2 usage.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from checkpoint import load_checkpoint, save_checkpoint
from dataset import (
    CorpusSpec,
    SampleStore,
    build_manifest,
    default_taxonomy,
    generate_synthetic_corpus,
    load_sample_image,
    read_manifest_jsonl,
    stratified_split,
    field_counts,
    write_manifest_jsonl,
)
from engine import FrozenModel, InferenceEngine, fold_batchnorm, freeze, prediction_from_probs
from errors import ConfigError, WeedPilotError
from fieldsim import OracleClassifier, load_scenario, medium_density_field, simulate_run
from imageops import augment, preview_grid, resize, to_model_input, write_png
from log_manager import RunLog
from metrics import benchmark_inference, build_eval_report
from models import (
    AugmentationPolicy,
    ClockMode,
    Role,
    RunConfig,
    SprayPolicy,
    TrainConfig,
)
from network import build_micro_mobilenet
from pdf_exporter import write_eval_pdf
from pipeline import run_pipeline
from reports import (
    write_confusion_csv,
    write_eval_workbook,
    write_event_csv,
    write_f1_csv,
    write_f1_html,
    write_json,
)
from training import Trainer, sample_seed, write_train_log

logger = logging.getLogger(__name__)

DETERMINISTIC_ENV = "WEEDPILOT_DETERMINISTIC"

# Fixed run-directory layout.
MANIFEST_FILE = "manifest.jsonl"
SPLIT_FILE = "split.jsonl"
TRAIN_LOG_FILE = "train_log.csv"
CKPT_FILE = "ckpt.wpck"
FROZEN_FILE = "frozen.wpck"
FOLDED_FILE = "folded.wpck"
EVAL_FILE = "eval.json"
BENCH_FILE = "bench.json"
SIM_FILE = "sim_report.json"
EVENTS_FILE = "sim_events.csv"
RUN_LOG_FILE = "run_log.jsonl"
PREVIEW_FILE = "augment_preview.png"


# ============================================================================
# ARGUMENT PARSING
# ============================================================================

class _UsageParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns the exit code."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(2)


# subcommand -> {option dest: default}
OPTION_DEFAULTS: Dict[str, Dict[str, Any]] = {}


def _opt(sub: argparse.ArgumentParser, command: str, flag: str, default: Any = None, **kw: Any) -> None:
    """Subcommand option whose default is applied after the config file."""
    dest = flag.lstrip("-").replace("-", "_")
    OPTION_DEFAULTS.setdefault(command, {})[dest] = default
    sub.add_argument(flag, dest=dest, default=argparse.SUPPRESS, **kw)


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help="Master seed (default 0)")
    common.add_argument("--data-dir", type=Path, help="Input directory (class folders or an earlier run)")
    common.add_argument("--out-dir", type=Path, help="Run directory for outputs (default ./run)")
    common.add_argument("--width-mult", type=float, help="Model width multiplier (default 0.25)")
    common.add_argument("--lr", type=float, help="Initial learning rate (default 1e-4)")
    common.add_argument("--batch", type=int, help="Batch size (default 32)")
    common.add_argument("--fps", type=float, help="Camera frame rate (default 10)")
    common.add_argument("--threshold", type=float, help="Spray confidence threshold (default 0.5)")
    common.add_argument("--scenario", type=Path, help="Field scenario JSON")
    common.add_argument("--input-size", help="Model input HxW (default 224x384)")
    common.add_argument("--image-size", help="Generated image / camera frame HxW (default 224x384)")
    common.add_argument("--config", type=Path, help="JSON file with defaults for any option")
    common.add_argument("--deterministic", action="store_true", help=f"Same as {DETERMINISTIC_ENV}=1")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    OPTION_DEFAULTS.clear()
    common = _common_flags()
    parser = _UsageParser(prog="weedpilot", description="Weed classification and field spraying pipeline",
                          parents=[common])
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_UsageParser)

    p = subs.add_parser("gen-data", parents=[common], help="Generate the synthetic 16-class corpus")
    _opt(p, "gen-data", "--per-class", 100, type=int, help="Images per class for the uniform profile")
    _opt(p, "gen-data", "--profile", "uniform", choices=["uniform", "field"])
    _opt(p, "gen-data", "--scale", 1.0, type=float, help="Scale factor for the field profile")
    _opt(p, "gen-data", "--render", False, action="store_true", help="Also write PNGs in class folders")

    p = subs.add_parser("ingest", parents=[common], help="Build a manifest from class folders in --data-dir")

    p = subs.add_parser("split", parents=[common], help="Stratified 60/20/20 split")
    _opt(p, "split", "--k", 5, type=int, help="Fold count")
    _opt(p, "split", "--fold", 0, type=int, help="Active fold (validation block rotation)")
    _opt(p, "split", "--manifest", None, type=Path)

    p = subs.add_parser("augment-preview", parents=[common], help="PNG grid of augmented samples")
    _opt(p, "augment-preview", "--samples", 4, type=int)
    _opt(p, "augment-preview", "--n", 6, type=int, help="Augmentations per sample")
    _opt(p, "augment-preview", "--manifest", None, type=Path)

    p = subs.add_parser("train", parents=[common], help="Train the micro MobileNetV2 classifier")
    _opt(p, "train", "--epochs", 30, type=int)
    _opt(p, "train", "--split-file", None, type=Path)
    _opt(p, "train", "--workers", 4, type=int)
    _opt(p, "train", "--no-augment", False, action="store_true")
    _opt(p, "train", "--full", False, action="store_true", help="Full-depth block table")

    p = subs.add_parser("export", parents=[common], help="Freeze a checkpoint for inference")
    _opt(p, "export", "--ckpt", None, type=Path)

    p = subs.add_parser("optimize", parents=[common], help="Fold batch norm into the preceding layers")
    p.add_argument("ckpt_path", nargs="?", default=argparse.SUPPRESS)
    OPTION_DEFAULTS["optimize"] = {"ckpt_path": None}

    p = subs.add_parser("eval", parents=[common], help="Per-class metrics on a split role")
    _opt(p, "eval", "--ckpt", None, type=Path)
    _opt(p, "eval", "--role", "test", choices=[r.value for r in Role])
    _opt(p, "eval", "--split-file", None, type=Path)
    _opt(p, "eval", "--bench", False, action="store_true", help="Attach a latency benchmark")
    _opt(p, "eval", "--xlsx", False, action="store_true")
    _opt(p, "eval", "--pdf", False, action="store_true")
    _opt(p, "eval", "--html", False, action="store_true", help="Plotly F1 chart")

    p = subs.add_parser("bench", parents=[common], help="Latency of the unfolded and folded models")
    _opt(p, "bench", "--ckpt", None, type=Path)
    _opt(p, "bench", "--frames", 100, type=int)
    _opt(p, "bench", "--warmup", 5, type=int)
    _opt(p, "bench", "--pipeline-frames", 0, type=int, help="Also run the wall-clock pipeline")

    p = subs.add_parser("simulate", parents=[common], help="Drive the field simulator")
    _opt(p, "simulate", "--ckpt", None, type=Path)
    _opt(p, "simulate", "--oracle", False, action="store_true", help="Ground-truth classifier")
    _opt(p, "simulate", "--length", 15.0, type=float, help="Row length for the generated field (m)")
    _opt(p, "simulate", "--strong-light", False, action="store_true")
    _opt(p, "simulate", "--speed", None, type=float)
    _opt(p, "simulate", "--duration", None, type=float)
    _opt(p, "simulate", "--tank", 1000.0, type=float)
    _opt(p, "simulate", "--service-ms", 47.78, type=float, help="Virtual inference time per frame")
    _opt(p, "simulate", "--measured-latency", False, action="store_true")
    return parser


# ============================================================================
# CONFIGURATION
# ============================================================================

_GLOBAL_KEYS = {"seed", "data_dir", "out_dir", "width_mult", "lr", "batch", "fps",
                "threshold", "scenario", "input_size", "image_size", "deterministic"}


def resolve_config(args: argparse.Namespace, environ: Optional[Dict[str, str]] = None) -> RunConfig:
    """defaults < --config file < command-line flags; the env var can only switch determinism on."""
    environ = os.environ if environ is None else environ
    flags = vars(args).copy()
    command = flags.pop("command")
    config_path = flags.pop("config", None)
    flags.pop("verbose", None)

    values: Dict[str, Any] = {}
    options: Dict[str, Any] = dict(OPTION_DEFAULTS.get(command, {}))
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {config_path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {config_path} must hold a JSON object")
        loaded = {k.replace("-", "_"): v for k, v in loaded.items()}
        options.update({k: v for k, v in loaded.pop("options", {}).items() if k in options})
        options.update({k: v for k, v in loaded.items() if k in options})
        values.update({k: v for k, v in loaded.items() if k in _GLOBAL_KEYS})

    for key, value in flags.items():
        if key in _GLOBAL_KEYS:
            if key == "deterministic" and not value:
                continue
            values[key] = value
        else:
            options[key] = value
    if environ.get(DETERMINISTIC_ENV, "").strip() in ("1", "true", "yes"):
        values["deterministic"] = True

    try:
        return RunConfig(command=command, options=options, **values)
    except ValueError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def _opt_path(cfg: RunConfig, key: str, fallback: Path) -> Path:
    value = cfg.options.get(key)
    return Path(value) if value else fallback


def _input_path(cfg: RunConfig, name: str) -> Path:
    """An input artifact: --data-dir wins if it holds the file, else the run directory."""
    if cfg.data_dir is not None and (cfg.data_dir / name).exists():
        return cfg.data_dir / name
    return cfg.out_dir / name


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_gen_data(cfg: RunConfig, run_log: RunLog) -> Dict[str, Any]:
    taxonomy = default_taxonomy()
    h, w = cfg.image_size
    if cfg.options["profile"] == "field":
        spec = CorpusSpec(counts=field_counts(taxonomy, cfg.options["scale"]), height=h, width=w)
    else:
        spec = CorpusSpec.uniform(cfg.options["per_class"], height=h, width=w)
    manifest = generate_synthetic_corpus(spec, cfg.seed, taxonomy)
    path = cfg.out_dir / MANIFEST_FILE
    write_manifest_jsonl(path, manifest)
    if cfg.options["render"]:
        for i, sample in enumerate(manifest.samples):
            folder = cfg.out_dir / "images" / taxonomy.classes[sample.class_id].dirname
            folder.mkdir(parents=True, exist_ok=True)
            write_png(str(folder / f"{i:06d}.png"), load_sample_image(sample, taxonomy.negative_class_id))
    return {"manifest": str(path), "samples": len(manifest.samples),
            "per_class_counts": {taxonomy.name(k): v for k, v in sorted(manifest.per_class_counts.items())}}


def cmd_ingest(cfg: RunConfig, run_log: RunLog) -> Dict[str, Any]:
    if cfg.data_dir is None:
        raise ConfigError("ingest needs --data-dir with one folder per class")
    manifest = build_manifest(cfg.data_dir, default_taxonomy())
    path = cfg.out_dir / MANIFEST_FILE
    write_manifest_jsonl(path, manifest)
    return {"manifest": str(path), "samples": len(manifest.samples), "skipped": manifest.skipped}


def cmd_split(cfg: RunConfig, run_log: RunLog) -> Dict[str, Any]:
    source = _opt_path(cfg, "manifest", _input_path(cfg, MANIFEST_FILE))
    manifest, _ = read_manifest_jsonl(source)
    assignment = stratified_split(manifest, k=cfg.options["k"], seed=cfg.seed, fold=cfg.options["fold"])
    path = cfg.out_dir / SPLIT_FILE
    write_manifest_jsonl(path, manifest, assignment)
    counts = {role.value: len(assignment.indices(role)) for role in Role}
    logger.info(f"✅ Split written to {path}: {counts}")
    return {"split": str(path), "counts": counts, "k": cfg.options["k"], "fold": cfg.options["fold"]}


def _load_split(cfg: RunConfig, key: str = "split_file"):
    path = _opt_path(cfg, key, _input_path(cfg, SPLIT_FILE))
    manifest, assignment = read_manifest_jsonl(path, seed=cfg.seed)
    if assignment is None:
        raise ConfigError(f"{path} carries no split roles; run 'split' first")
    return manifest, assignment


def cmd_augment_preview(cfg: RunConfig, run_log: RunLog) -> Dict[str, Any]:
    source = _opt_path(cfg, "manifest", _input_path(cfg, MANIFEST_FILE))
    manifest, _ = read_manifest_jsonl(source)
    policy = AugmentationPolicy()
    rng = np.random.default_rng(cfg.seed)
    count = min(cfg.options["samples"], len(manifest.samples))
    chosen = sorted(int(i) for i in rng.choice(len(manifest.samples), size=count, replace=False))
    h, w = cfg.image_size
    rows = []
    for idx in chosen:
        image = resize(load_sample_image(manifest.samples[idx], manifest.taxonomy.negative_class_id), w, h)
        rows.append([image] + [augment(image, policy, sample_seed(cfg.seed, j, idx)) for j in range(cfg.options["n"])])
    path = cfg.out_dir / PREVIEW_FILE
    write_png(str(path), preview_grid(rows))
    return {"preview": str(path), "samples": chosen}


def cmd_train(cfg: RunConfig, run_log: RunLog) -> Dict[str, Any]:
    manifest, assignment = _load_split(cfg)
    h, w = cfg.input_size
    graph, params = build_micro_mobilenet(cfg.width_mult, len(manifest.taxonomy), (3, h, w), cfg.seed,
                                          full=cfg.options["full"])
    config = TrainConfig(
        batch_size=cfg.batch, lr_init=cfg.lr, max_epochs=cfg.options["epochs"], seed=cfg.seed,
        workers=cfg.options["workers"], deterministic=cfg.deterministic,
    )
    policy = AugmentationPolicy.identity() if cfg.options["no_augment"] else AugmentationPolicy()
    ckpt_path = cfg.out_dir / CKPT_FILE

    def echo(row) -> None:
        run_log.write("epoch", cfg.command, **row.model_dump(mode="json"))

    trainer = Trainer(manifest, assignment, graph, params, config, policy, checkpoint_path=ckpt_path, on_epoch=echo)
    ckpt, log = trainer.fit()
    save_checkpoint(ckpt.graph, ckpt.params, ckpt.meta, ckpt_path)
    write_train_log(cfg.out_dir / TRAIN_LOG_FILE, log)
    return {"checkpoint": str(ckpt_path), "epochs": len(log), "best": ckpt.meta}


def cmd_export(cfg: RunConfig, run_log: RunLog) -> Dict[str, Any]:
    source = _opt_path(cfg, "ckpt", _input_path(cfg, CKPT_FILE))
    frozen = freeze(load_checkpoint(source))
    path = cfg.out_dir / FROZEN_FILE
    save_checkpoint(frozen.graph, frozen.params, frozen.meta, path)
    logger.info(f"✅ Frozen checkpoint written to {path}")
    return {"frozen": str(path), "parameters": frozen.params.count()}


def cmd_optimize(cfg: RunConfig, run_log: RunLog) -> Dict[str, Any]:
    default = _input_path(cfg, FROZEN_FILE)
    if not default.exists():
        default = _input_path(cfg, CKPT_FILE)
    source = _opt_path(cfg, "ckpt_path", default)
    ckpt = load_checkpoint(source)
    graph, params = fold_batchnorm(ckpt.graph, ckpt.params)
    path = cfg.out_dir / FOLDED_FILE
    save_checkpoint(graph, params, {**ckpt.meta, "folded_from": source.name}, path)
    return {"folded": str(path), "parameters_before": ckpt.params.count(), "parameters_after": params.count()}


def _model_ckpt(cfg: RunConfig) -> Path:
    """Explicit --ckpt, else the most optimized checkpoint in the run."""
    if cfg.options.get("ckpt"):
        return Path(cfg.options["ckpt"])
    for name in (FOLDED_FILE, FROZEN_FILE, CKPT_FILE):
        path = _input_path(cfg, name)
        if path.exists():
            return path
    raise ConfigError(f"no checkpoint found in {cfg.out_dir}; run 'train' first")


def _engine(cfg: RunConfig) -> InferenceEngine:
    return InferenceEngine.from_checkpoint(load_checkpoint(_model_ckpt(cfg)), default_taxonomy())


def _bench_frames(cfg: RunConfig, engine: FrozenModel, count: int = 8) -> List[np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    h, w = engine.input_hw
    return [rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8) for _ in range(count)]


def cmd_eval(cfg: RunConfig, run_log: RunLog) -> Dict[str, Any]:
    manifest, assignment = _load_split(cfg)
    engine = _engine(cfg)
    role = Role(cfg.options["role"])
    indices = assignment.indices(role)
    if not indices:
        raise ConfigError(f"split has no '{role.value}' samples")
    store = SampleStore(manifest, engine.input_hw, assignment, forbid_test=False, cache=False)
    predictions: List[int] = []
    for start in range(0, len(indices), cfg.batch):
        chunk = indices[start:start + cfg.batch]
        probs = engine.predict_batch(to_model_input([store.get(i) for i in chunk]))
        predictions.extend(prediction_from_probs(p, engine.taxonomy).class_id for p in probs)
    labels = [store.label(i) for i in indices]

    benchmark = None
    if cfg.options["bench"] and cfg.deterministic:
        logger.warning("⚠️ Benchmark skipped: wall-clock values are not written in deterministic mode")
    elif cfg.options["bench"]:
        benchmark = benchmark_inference(engine, _bench_frames(cfg, engine))
    report = build_eval_report(predictions, labels, engine.taxonomy, engine.parameter_count(),
                               engine.working_set_bytes(1), role.value, benchmark)
    write_json(cfg.out_dir / EVAL_FILE, report)
    write_confusion_csv(cfg.out_dir / "confusion.csv", report.confusion, engine.taxonomy)
    write_f1_csv(cfg.out_dir / "f1.csv", report)
    if cfg.options["html"]:
        write_f1_html(cfg.out_dir / "f1.html", report)
    if cfg.options["xlsx"]:
        write_eval_workbook(cfg.out_dir / "eval.xlsx", report, engine.taxonomy)
    if cfg.options["pdf"]:
        write_eval_pdf(cfg.out_dir / "eval.pdf", report)
    logger.info(f"✅ {role.value}: avg class accuracy {report.avg_class_accuracy:.4f}, "
                f"overall {report.overall_accuracy:.4f} over {report.n_samples} samples")
    return {"eval": str(cfg.out_dir / EVAL_FILE), "avg_class_accuracy": report.avg_class_accuracy,
            "overall_accuracy": report.overall_accuracy}


def cmd_bench(cfg: RunConfig, run_log: RunLog) -> Dict[str, Any]:
    ckpt = load_checkpoint(_model_ckpt(cfg))
    taxonomy = default_taxonomy()
    runners: List[FrozenModel] = []
    if not ckpt.graph.folded:
        runners.append(FrozenModel(ckpt.graph, ckpt.params, taxonomy))
    runners.append(InferenceEngine.from_checkpoint(ckpt, taxonomy))
    frames = _bench_frames(cfg, runners[0])
    results = {r.name: benchmark_inference(r, frames, cfg.options["warmup"], cfg.options["frames"]).model_dump(mode="json")
               for r in runners}
    payload: Dict[str, Any] = {"runners": results}

    n_pipeline = cfg.options["pipeline_frames"]
    if n_pipeline:
        engine = runners[-1]
        stats = run_pipeline((frames[i % len(frames)] for i in range(n_pipeline)), engine,
                             fps=cfg.fps, clock=ClockMode.WALL)
        payload["pipeline"] = {**stats.model_dump(mode="json"), "fps": cfg.fps, "drop_rate": stats.drop_rate}
    write_json(cfg.out_dir / BENCH_FILE, payload)
    return {"bench": str(cfg.out_dir / BENCH_FILE),
            "mean_ms": {name: r["latency_ms"]["mean"] for name, r in results.items()}}


def cmd_simulate(cfg: RunConfig, run_log: RunLog) -> Dict[str, Any]:
    taxonomy = default_taxonomy()
    opts = cfg.options
    if cfg.scenario is not None:
        field_map = load_scenario(cfg.scenario, taxonomy)
    else:
        length = opts["length"]
        strong = (length * 2 / 3, length * 0.8) if opts["strong_light"] else None
        field_map = medium_density_field(cfg.seed, length, strong_light=strong)
    classifier = OracleClassifier(taxonomy) if opts["oracle"] else _engine(cfg)
    policy = SprayPolicy(threshold=cfg.threshold)
    service = None if opts["measured_latency"] and not cfg.deterministic else opts["service_ms"]
    result = simulate_run(
        field_map, classifier, policy, taxonomy,
        speed_mps=opts["speed"], duration_s=opts["duration"], seed=cfg.seed, fps=cfg.fps,
        frame_size=cfg.image_size, service_time_ms=service, tank_ml=opts["tank"],
    )
    write_json(cfg.out_dir / SIM_FILE, result.report)
    write_event_csv(cfg.out_dir / EVENTS_FILE, result.events, taxonomy)
    return {"report": str(cfg.out_dir / SIM_FILE), "patch_accuracy": result.report.patch_accuracy,
            "herbicide_ml": result.report.herbicide_ml}


COMMANDS: Dict[str, Callable[[RunConfig, RunLog], Dict[str, Any]]] = {
    "gen-data": cmd_gen_data,
    "ingest": cmd_ingest,
    "split": cmd_split,
    "augment-preview": cmd_augment_preview,
    "train": cmd_train,
    "export": cmd_export,
    "optimize": cmd_optimize,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "simulate": cmd_simulate,
}


# ============================================================================
# MAIN
# ============================================================================

def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse, resolve the configuration, run one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _setup_logging(getattr(args, "verbose", False))

    command = args.command
    try:
        cfg = resolve_config(args)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        run_log = RunLog(cfg.out_dir / RUN_LOG_FILE, deterministic=cfg.deterministic)
        run_log.write_config(command, cfg.model_dump(mode="json"))
        logger.info(f"🚀 {command} -> {cfg.out_dir}")
        outcome = COMMANDS[command](cfg, run_log)
        run_log.write_outcome(command, "ok", **outcome)
    except (WeedPilotError, OSError, ValueError) as e:
        logger.error(f"❌ {command} failed: {e}")
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e), "command": command}) + "\n")
        return 1
    logger.info(f"✅ {command} done")
    return 0


if __name__ == "__main__":
    sys.exit(main())
