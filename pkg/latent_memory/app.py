"""
Main application entry point: command line for pretraining, benchmark generation,
adapter training, evaluation and reporting
"""
import argparse
from dataclasses import dataclass, field, asdict
from datetime import datetime
import json
import logging
from pathlib import Path
import sys

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from config import (
    APP_NAME, APP_VERSION, LOGS_DIR, LOG_LEVEL, LOG_FORMAT, DATA_DIR, RUNS_DIR, MEMORY_METHODS,
    CAPACITY_CONDITIONS, MANIFEST_FILE, ADAPTER_FILE, TRAIN_LOG_FILE, BACKBONE_FILE, CORPUS_FILE,
    registry_url
)
from database.db import DatabaseManager
from modules.adapters import MemoryAdapter, describe_methods
from modules.backbone import Backbone, BackboneConfig
from modules.benchgen import BenchConfig, generate, export, ingest, pretraining_corpus
from modules.evaluation import run_protocol
from modules.memory import MemoryMethod
from modules.pretraining import PretrainConfig, pretrain
from modules.reports import ReportGenerator
from modules.registry import RunRegistryManager
from modules.tokenizer import WordTokenizer
from modules.training import TrainConfig, type1_train
from utils.errors import ConfigError, ValidationError, SnapshotMismatchError, ContextLengthError
from utils.hashing import digest_file

# Configure logging
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL),
    format=LOG_FORMAT,
    handlers=[
        logging.FileHandler(LOGS_DIR / "app.log"),
        logging.StreamHandler()
    ]
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILED = 2

USER_ERRORS = (ConfigError, ValidationError, SnapshotMismatchError, ContextLengthError, FileNotFoundError)


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """Prints usage and exits with the validation-error code on bad flags"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


@dataclass
class RunConfig:
    """Resolved configuration of one CLI invocation; echoed into the manifest"""
    subcommand: str
    method: str = "baseline"
    capacity: str = "1x"
    seed: int = 0
    backbone: str = str(DATA_DIR / BACKBONE_FILE)
    corpus: str = str(DATA_DIR / CORPUS_FILE)
    adapter: str = ""
    runs_dir: str = str(RUNS_DIR)
    out: str = ""
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in MEMORY_METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {MEMORY_METHODS}")
        if self.capacity not in CAPACITY_CONDITIONS:
            raise ConfigError(f"unknown capacity {self.capacity!r}; expected one of {CAPACITY_CONDITIONS}")

    @property
    def run_name(self):
        return f"{self.method}_{self.capacity}_{self.seed}"

    @property
    def run_dir(self):
        return Path(self.runs_dir) / self.run_name


# Flags that are not RunConfig fields go to overrides under these keys
OVERRIDE_FLAGS = {
    'pretrain': ['steps', 'learning_rate', 'batch_size', 'held_out', 'sequences', 'layers', 'd_model', 'heads',
                 'context', 'vocab'],
    'gen-bench': ['dialogues', 'sessions', 'turns_per_session', 'entities', 'attributes',
                  'distractor_rate', 'overwrite_rate', 'lag_profile'],
    'train-adapter': ['epochs', 'learning_rate', 'max_steps', 'batch_size', 'grad_accumulation',
                      'window_turns', 'patience', 'untrained'],
    'eval': ['max_answer_tokens', 'limit'],
    'report': ['runs', 'describe'],
}


def build_parser():
    parser = ArgumentParser(prog="latent-memory", description=f"{APP_NAME} v{APP_VERSION}")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=ArgumentParser)

    def common(p, method=False):
        p.add_argument("--config", help="JSON file with run configuration; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if method:
            p.add_argument("--method", choices=MEMORY_METHODS)
            p.add_argument("--capacity", choices=CAPACITY_CONDITIONS)
            p.add_argument("--backbone")
            p.add_argument("--corpus", help="corpus JSON: {schema_version, dialogues} or a bare list of dialogues")
            p.add_argument("--adapter")
            p.add_argument("--runs-dir", dest="runs_dir")

    p = sub.add_parser("pretrain", help="pretrain the tiny backbone")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--held-out", dest="held_out", type=int)
    p.add_argument("--sequences", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--context", type=int)
    p.add_argument("--vocab", type=int)

    p = sub.add_parser("gen-bench", help="generate the synthetic benchmark corpus")
    common(p)
    p.add_argument("--dialogues", type=int)
    p.add_argument("--sessions", type=int)
    p.add_argument("--turns-per-session", dest="turns_per_session", type=int)
    p.add_argument("--entities", type=int)
    p.add_argument("--attributes", type=int)
    p.add_argument("--distractor-rate", dest="distractor_rate", type=float)
    p.add_argument("--overwrite-rate", dest="overwrite_rate", type=float)
    p.add_argument("--lag-profile", dest="lag_profile", type=int, nargs="+",
                   help="questions per lag bucket, one count per bucket")

    p = sub.add_parser("train-adapter", help="Type-1 training of a memory adapter")
    common(p, method=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--grad-accumulation", dest="grad_accumulation", type=int)
    p.add_argument("--window-turns", dest="window_turns", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--untrained", action="store_true", default=None,
                   help="save the freshly initialised adapter as a control")

    p = sub.add_parser("eval", help="forgetting-curve and knowledge evaluation")
    common(p, method=True)
    p.add_argument("--max-answer-tokens", dest="max_answer_tokens", type=int)
    p.add_argument("--limit", type=int, help="evaluate only the first N dialogues")

    p = sub.add_parser("report", help="merged table across registered runs")
    common(p)
    p.add_argument("--runs-dir", dest="runs_dir")
    p.add_argument("--runs", nargs="+", help="run names to merge (default: all)")
    p.add_argument("--describe", action="store_true", default=None, help="print the method design table")
    return parser


def resolve_config(args):
    """File values first, then flags; unknown file keys are rejected"""
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            values = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(values, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")

    allowed_overrides = set(OVERRIDE_FLAGS[args.subcommand])
    fields = set(RunConfig.__dataclass_fields__) - {'subcommand', 'overrides'}
    unknown = set(values) - fields - allowed_overrides
    if unknown:
        raise ConfigError(f"unknown configuration keys for {args.subcommand}: {sorted(unknown)}")

    for key, value in vars(args).items():
        if key in ('config', 'subcommand') or value is None:
            continue
        values[key] = value

    base = {k: v for k, v in values.items() if k in fields}
    overrides = {k: v for k, v in values.items() if k in allowed_overrides}
    return RunConfig(subcommand=args.subcommand, overrides=overrides, **base)


def write_manifest(path, run_config, inputs, extra=None):
    manifest = {
        'app_version': APP_VERSION,
        'created_at': datetime.utcnow().isoformat(timespec='seconds'),
        'config': asdict(run_config),
        'inputs': inputs,
    }
    manifest.update(extra or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding='utf-8')
    logger.info(f"Manifest written to {path}")


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------

def cmd_pretrain(rc):
    o = rc.overrides
    tokenizer = WordTokenizer.from_lexicon()
    defaults = BackboneConfig()
    backbone_config = BackboneConfig(
        n_layers=o.get('layers', defaults.n_layers), d_model=o.get('d_model', defaults.d_model),
        n_heads=o.get('heads', defaults.n_heads), vocab_size=o.get('vocab', defaults.vocab_size),
        max_context=o.get('context', defaults.max_context),
    )
    cfg = PretrainConfig(seed=rc.seed, **{k: o[k] for k in ('steps', 'learning_rate', 'batch_size', 'held_out')
                                          if k in o})
    kwargs = {'n_sequences': o['sequences']} if 'sequences' in o else {}
    sequences = pretraining_corpus(tokenizer, seed=rc.seed, **kwargs)
    backbone, losses = pretrain(backbone_config, sequences, cfg, tokenizer)
    out = Path(rc.out or rc.backbone)
    backbone.save(out, {'pretrain': cfg.to_dict()})
    write_manifest(out.with_name(out.stem + "_" + MANIFEST_FILE), rc, {'backbone': backbone.digest()},
                   {'pretrain': cfg.to_dict(), 'final_loss': losses[-1] if losses else None})
    print(f"backbone written to {out} ({backbone.weights.parameter_count()} parameters)")


def cmd_gen_bench(rc):
    o = rc.overrides
    mapping = {
        'dialogues': 'n_dialogues', 'sessions': 'n_sessions', 'turns_per_session': 'turns_per_session',
        'entities': 'n_entities', 'attributes': 'n_attributes', 'distractor_rate': 'distractor_rate',
        'overwrite_rate': 'overwrite_rate', 'lag_profile': 'lag_profile',
    }
    config = BenchConfig(seed=rc.seed, **{mapping[k]: v for k, v in o.items() if k in mapping})
    dialogues = generate(config)
    out = Path(rc.out or rc.corpus)
    digest = export(dialogues, out, config)
    write_manifest(out.with_name(out.stem + "_" + MANIFEST_FILE), rc, {'corpus': digest},
                   {'bench': config.to_dict(), 'dialogues': len(dialogues)})
    print(f"corpus written to {out} (sha256 {digest})")


def _load_inputs(rc):
    backbone_path = _require(rc.backbone, "backbone checkpoint")
    corpus_path = _require(rc.corpus, "corpus file")
    backbone = Backbone.load(backbone_path)
    dialogues = ingest(corpus_path, backbone.tokenizer)
    inputs = {'backbone': digest_file(backbone_path), 'corpus': digest_file(corpus_path)}
    return backbone, dialogues, inputs


def cmd_train_adapter(rc):
    if rc.method == "baseline":
        raise ConfigError("the stateless baseline has no adapter to train")
    o = rc.overrides
    backbone, dialogues, inputs = _load_inputs(rc)
    adapter = MemoryAdapter.build(rc.method, backbone.config, rc.capacity, rc.seed)
    run_dir = rc.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig(seed=rc.seed, **{k: v for k, v in o.items() if k in TrainConfig.__dataclass_fields__})
    history = None
    if o.get('untrained'):
        adapter.freeze()
        logger.info(f"Saving untrained {adapter.method.label} adapter as a control")
    else:
        log_path = run_dir / TRAIN_LOG_FILE
        if log_path.exists():
            log_path.unlink()
        adapter, history = type1_train(backbone, adapter, dialogues, cfg, log_path=log_path)
    out = Path(rc.out or rc.adapter or run_dir / ADAPTER_FILE)
    adapter.save(out, {'trained': history is not None})
    extra = {'train': cfg.to_dict(), 'parameters': adapter.parameter_count(), 'adapter_digest': adapter.digest()}
    if history is not None:
        extra.update({'best_epoch': history.best_epoch, 'best_val_loss': history.best_val_loss,
                      'val_losses': history.val_losses, 'stopped_early': history.stopped_early})
    write_manifest(run_dir / MANIFEST_FILE, rc, inputs, extra)
    print(f"{adapter.method.label} adapter ({rc.capacity}) written to {out}")


def cmd_eval(rc):
    o = rc.overrides
    backbone, dialogues, inputs = _load_inputs(rc)
    if o.get('limit'):
        dialogues = dialogues[:o['limit']]
    run_dir = rc.run_dir
    if rc.method == "baseline":
        adapter = MemoryAdapter.build("baseline", backbone.config, rc.capacity, rc.seed)
    else:
        adapter = MemoryAdapter.load(_require(rc.adapter or run_dir / ADAPTER_FILE, "adapter checkpoint"))
        if adapter.method is not MemoryMethod.parse(rc.method) or adapter.dims.capacity != rc.capacity:
            raise ConfigError(
                f"adapter is {adapter.method.value} {adapter.dims.capacity}, run asks for {rc.method} {rc.capacity}"
            )
    kwargs = {'max_answer_tokens': o['max_answer_tokens']} if o.get('max_answer_tokens') else {}
    result = run_protocol(backbone, adapter, dialogues, **kwargs)

    reports = ReportGenerator(RunRegistryManager())
    try:
        summary = reports.write_run_outputs(run_dir, result, {
            'method': rc.method, 'capacity': rc.capacity, 'seed': rc.seed, 'corpus_hash': inputs['corpus'],
        })
        reports.registry.register_run(
            rc.run_name, rc.method, rc.capacity, rc.seed, inputs['corpus'], result.summary, result.questions,
            adapter_hash=adapter.digest(), backbone_hash=backbone.digest(), run_dir=run_dir,
        )
    finally:
        reports.close_session()
    inputs['adapter'] = adapter.digest()
    write_manifest(run_dir / MANIFEST_FILE, rc, inputs, {'summary': {
        k: summary[k] for k in ('retained_pct', 'delta_k', 'questions')
    }})
    print(f"{adapter.method.label} {rc.capacity}: retained {summary['retained_pct']:.2f}%  "
          f"delta K {summary['delta_k']:.2f}  ({summary['questions']} questions)")


def cmd_report(rc):
    o = rc.overrides
    if o.get('describe'):
        for row in describe_methods(capacity=rc.capacity):
            print(f"{row['method']:<5}{row['name']:<30}{row['injection']:<26}{row['write_mechanism']:<36}"
                  f"{row['memory_cost']:<10}{row['trained_parameters']:>10}")
        return
    reports = ReportGenerator(RunRegistryManager())
    try:
        rows = reports.merged_table(o.get('runs'))
        if not rows:
            print("no registered runs")
            return
        print(reports.format_table(rows))
        registry = reports.registry
        runs = registry.get_runs_by_names(o['runs']) if o.get('runs') else registry.get_all_runs()
        inputs = {r.name: {'corpus': r.corpus_hash, 'adapter': r.adapter_hash, 'backbone': r.backbone_hash,
                           'seed': r.seed} for r in runs}
        if rc.out:
            out = Path(rc.out)
            out.write_text(reports.export_to_csv(rows), encoding='utf-8')
            logger.info(f"Merged table written to {out}")
            manifest_path = out.with_name(out.stem + "_" + MANIFEST_FILE)
        else:
            manifest_path = Path(rc.runs_dir) / ("report_" + MANIFEST_FILE)
        write_manifest(manifest_path, rc, inputs, {'rows': len(rows)})
    finally:
        reports.close_session()


COMMANDS = {
    'pretrain': cmd_pretrain,
    'gen-bench': cmd_gen_bench,
    'train-adapter': cmd_train_adapter,
    'eval': cmd_eval,
    'report': cmd_report,
}


def main(argv=None):
    """Run one subcommand; returns the process exit code"""
    try:
        args = build_parser().parse_args(argv)
        rc = resolve_config(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:
        # --help
        return EXIT_OK if not e.code else EXIT_INVALID
    except USER_ERRORS as e:
        logger.error(str(e))
        return EXIT_INVALID

    try:
        logger.info(f"Starting {APP_NAME} v{APP_VERSION}: {rc.subcommand}")
        DatabaseManager.initialize(registry_url(rc.runs_dir))
        COMMANDS[rc.subcommand](rc)
        return EXIT_OK
    except USER_ERRORS as e:
        logger.error(f"{rc.subcommand} failed: {e}")
        return EXIT_INVALID
    except Exception as e:
        logger.critical(f"{rc.subcommand} failed: {e}", exc_info=True)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
