"""Command-line front end: ``herbgen <subcommand> ...``.

Every subcommand writes its artifacts plus a ``manifest.json`` (inputs,
effective config, content digests) into ``--out-dir``. Configurable
subcommands read an optional canonical-JSON ``--config`` file; explicit flags
override file values, and unknown keys are rejected.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from herbgen import __version__
from herbgen.errors import DataError, NumericError, UsageError

logger = logging.getLogger("herbgen")

MANIFEST_SCHEMA = "herbgen.manifest/1"
_MODEL_KEYS = ("hidden_size", "num_layers", "num_heads", "ff_multiplier", "tie_output", "init_std", "ln_eps")
_TRAIN_KEYS = ("batch_size", "epochs", "lr", "seed", "max_len", "mask_rate", "knowledge_mode",
               "eval_every", "max_grad_norm", "knowledge_positions")
PHASE_DEFAULTS = {
    "pretrain": {"epochs": 15, "batch_size": 32, "max_len": 512, "num_layers": 12},
    "finetune": {"epochs": 40, "batch_size": 16, "max_len": 256, "num_layers": 6},
}


# -- config plumbing -----------------------------------------------------------

def _field_defaults(cls, keys: Sequence[str] | None = None) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if keys is not None and f.name not in keys:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
    return out


def _defaults(command: str) -> dict[str, Any]:
    from herbgen.generation import GenerationConfig
    from herbgen.model import ModelConfig
    from herbgen.synth import SynthSpec
    from herbgen.training import TrainConfig

    if command == "synth":
        return _field_defaults(SynthSpec)
    if command == "generate":
        return _field_defaults(GenerationConfig)
    if command in PHASE_DEFAULTS:
        out = {**_field_defaults(ModelConfig, _MODEL_KEYS), **_field_defaults(TrainConfig, _TRAIN_KEYS)}
        return {**out, **PHASE_DEFAULTS[command]}
    return {}


# flags whose default is None need an explicit type
_NONE_TYPES = {"max_grad_norm": float, "max_herb_len": int}


def _add_config_flags(parser: argparse.ArgumentParser, command: str) -> None:
    parser.add_argument("--config", type=Path, help="canonical JSON config file")
    for key, default in _defaults(command).items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            parser.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None,
                                help=f"default {default}")
        elif isinstance(default, tuple):
            kind = type(default[0]) if default else str
            nargs = 2 if kind is int else "+"
            parser.add_argument(flag, dest=key, type=kind, nargs=nargs, default=None,
                                help=f"default {' '.join(map(str, default))}")
        else:
            kind = _NONE_TYPES.get(key, type(default))
            parser.add_argument(flag, dest=key, type=kind, default=None, help=f"default {default}")


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def effective_config(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then the config file, then explicit flags."""
    defaults = _defaults(command)
    cfg = dict(defaults)
    if getattr(args, "config", None) is not None:
        path = args.config
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise DataError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise UsageError(f"{path}: unknown config keys {unknown}")
        cfg.update({k: _coerce(k, v, defaults[k]) for k, v in loaded.items()})
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = _coerce(key, value, defaults[key])
    logger.info("effective config: %s", canonical_json(cfg))
    return cfg


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    if not Path(path).is_file():
        raise DataError(f"{what} file not found: {path}")
    return Path(path)


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict[str, Path | None],
                   outputs: Sequence[str]) -> Path:
    """Manifest with file names (not absolute paths) so reruns elsewhere compare equal."""
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": {k: {"name": Path(p).name, "sha256": sha256_file(p)} for k, p in sorted(inputs.items()) if p},
        "outputs": {name: sha256_file(out_dir / name) for name in sorted(outputs)},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    return path


def _read_lines(path: Path) -> list[str]:
    return [line.rstrip("\n") for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _model_config(cfg: dict, vocab_size: int):
    from herbgen.model import ModelConfig

    return ModelConfig(vocab_size=vocab_size, max_len=cfg["max_len"], **{k: cfg[k] for k in _MODEL_KEYS})


def _train_config(cfg: dict, phase: str):
    from herbgen.training import TrainConfig

    return TrainConfig(phase=phase, **{k: cfg[k] for k in _TRAIN_KEYS})


def _load_vocab_registry(vocab_path: Path, herbs_path: Path | None):
    from herbgen.vocab import EntityRegistry, Vocabulary, load_herb_list

    vocab = Vocabulary.load(vocab_path)
    registry = EntityRegistry.build(load_herb_list(herbs_path), vocab) if herbs_path else None
    return vocab, registry


# -- subcommands ----------------------------------------------------------------

def cmd_build_vocab(args: argparse.Namespace) -> int:
    from herbgen.training import load_records
    from herbgen.vocab import build_vocabulary, load_herb_list

    herbs_path = _require(args.herbs, "herbs")
    corpus_paths = [_require(p, "corpus") for p in args.corpus]
    dataset_paths = [_require(p, "dataset") for p in args.dataset or []]
    lines = [line for p in corpus_paths for line in _read_lines(p)]
    for p in dataset_paths:
        lines.extend(r.symptom for r in load_records(p))
    vocab, registry, n_dup = build_vocabulary(lines, load_herb_list(herbs_path))
    if n_dup:
        logger.warning("%d duplicate herb entries ignored", n_dup)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    logger.info("vocabulary: %d tokens, %d herbs", len(vocab), len(registry))
    inputs = {"herbs": herbs_path, **{f"corpus{i}": p for i, p in enumerate(corpus_paths)},
              **{f"dataset{i}": p for i, p in enumerate(dataset_paths)}}
    write_manifest(out, "build-vocab", {}, inputs, ["vocab.txt"])
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    from herbgen.synth import SynthSpec, generate_world, write_world

    cfg = effective_config("synth", args)
    world = generate_world(SynthSpec(**cfg))
    out = Path(args.out_dir)
    paths = write_world(world, out)
    logger.info("world: %d herbs, %d examples, splits %s", len(world.herbs), len(world.records),
                {k: len(v) for k, v in world.splits.items()})
    write_manifest(out, "synth", cfg, {}, [p.name for p in paths.values()])
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    from herbgen.training import TrainingLog, pretrain

    cfg = effective_config("pretrain", args)
    corpus_path = _require(args.corpus, "corpus")
    vocab_path = _require(args.vocab, "vocab")
    herbs_path = _require(args.herbs, "herbs") if args.herbs else None
    valid_path = _require(args.valid_corpus, "valid-corpus") if args.valid_corpus else None
    vocab, registry = _load_vocab_registry(vocab_path, herbs_path)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = TrainingLog(out / "pretrain_log.jsonl")
    result = pretrain(_read_lines(corpus_path), vocab, registry, _model_config(cfg, len(vocab)),
                      _train_config(cfg, "pretrain"),
                      valid_corpus=_read_lines(valid_path) if valid_path else (), out_dir=out, log=log)
    logger.info("best pretraining epoch: %d", result.best_epoch)
    write_manifest(out, "pretrain", cfg,
                   {"corpus": corpus_path, "vocab": vocab_path, "herbs": herbs_path, "valid_corpus": valid_path},
                   ["pretrain_best.ckpt", "pretrain_last.ckpt", "pretrain_log.jsonl"])
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    from herbgen.kg import load_kg
    from herbgen.model import load_checkpoint
    from herbgen.training import TrainingLog, finetune, load_records

    cfg = effective_config("finetune", args)
    train_path = _require(args.train, "train")
    vocab_path = _require(args.vocab, "vocab")
    herbs_path = _require(args.herbs, "herbs")
    valid_path = _require(args.valid, "valid") if args.valid else None
    kg_path = _require(args.kg, "kg") if args.kg else None
    init_path = _require(args.init, "init") if args.init else None
    vocab, registry = _load_vocab_registry(vocab_path, herbs_path)
    kg = load_kg(kg_path) if kg_path else None
    init = load_checkpoint(init_path) if init_path else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = TrainingLog(out / "finetune_log.jsonl")
    result = finetune(load_records(train_path), vocab, registry, kg, _model_config(cfg, len(vocab)),
                      _train_config(cfg, "finetune"), init=init,
                      valid=load_records(valid_path) if valid_path else (), out_dir=out, log=log)
    logger.info("best fine-tuning epoch: %d", result.best_epoch)
    write_manifest(out, "finetune", cfg,
                   {"train": train_path, "vocab": vocab_path, "herbs": herbs_path, "valid": valid_path,
                    "kg": kg_path, "init": init_path},
                   ["finetune_best.ckpt", "finetune_last.ckpt", "finetune_log.jsonl"])
    return 0


def _read_symptoms(path: Path) -> list[str]:
    if path.suffix != ".jsonl":
        return _read_lines(path)
    out = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        try:
            out.append(str(json.loads(line)["symptom"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: expected an object with a 'symptom' field") from exc
    return out


def cmd_generate(args: argparse.Namespace) -> int:
    from herbgen.generation import GenerationConfig, Generator
    from herbgen.kg import load_kg
    from herbgen.model import Transformer, load_checkpoint
    from herbgen.vocab import EntityRegistry, Vocabulary

    cfg = effective_config("generate", args)
    gen_config = GenerationConfig(**cfg)
    ckpt_path = _require(args.checkpoint, "checkpoint")
    input_path = _require(args.input, "input")
    kg_path = _require(args.kg, "kg") if args.kg else None
    params = load_checkpoint(ckpt_path)
    if "vocab" not in params.meta:
        raise DataError(f"{ckpt_path}: checkpoint carries no vocabulary")
    vocab = Vocabulary.from_tokens(params.meta["vocab"])
    registry = EntityRegistry.build(params.meta.get("herbs", []), vocab)
    mode = params.meta.get("knowledge_mode", "none")
    kg = None
    if gen_config.knowledge_at_inference and mode != "none":
        if kg_path is None:
            raise UsageError(f"checkpoint was trained with knowledge_mode={mode!r}; pass --kg "
                             "or --no-knowledge-at-inference")
        kg = load_kg(kg_path)
    symptoms = _read_symptoms(input_path)
    generator = Generator(Transformer(params), vocab, registry, kg, max_len=params.config.max_len,
                          positions=params.meta.get("knowledge_positions", "sequential"))
    outputs = generator.generate_many(symptoms, gen_config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "generations.jsonl", "w", encoding="utf-8") as fh:
        for s, herbs in zip(symptoms, outputs):
            row = {"symptom": s, "herbs": herbs, "strategy": gen_config.strategy, "seed": gen_config.seed}
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    write_manifest(out, "generate", cfg, {"checkpoint": ckpt_path, "input": input_path, "kg": kg_path},
                   ["generations.jsonl"])
    return 0


def _read_herb_rows(path: Path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        try:
            obj = json.loads(line)
            rows.append({"symptom": obj.get("symptom"), "herbs": [str(h) for h in obj["herbs"]]})
        except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
            raise DataError(f"{path}:{lineno}: expected an object with a 'herbs' list") from exc
    return rows


def cmd_evaluate(args: argparse.Namespace) -> int:
    from herbgen.metrics import build_report, write_report

    gen_path = _require(args.generations, "generations")
    ref_path = _require(args.reference, "reference")
    generated, reference = _read_herb_rows(gen_path), _read_herb_rows(ref_path)
    if len(generated) != len(reference):
        raise DataError(f"{len(generated)} generations vs {len(reference)} references")
    rows = []
    for i, (g, r) in enumerate(zip(generated, reference)):
        if g["symptom"] is not None and r["symptom"] is not None and g["symptom"] != r["symptom"]:
            raise DataError(f"line {i + 1}: generation and reference describe different symptoms")
        row = {"generated": g["herbs"], "reference": r["herbs"]}
        if r["symptom"] is not None:
            row["symptom"] = r["symptom"]
        rows.append(row)
    report = build_report(rows)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "report.json", out / "report.csv")
    for name in ("macro", "micro"):
        pct = report[name]["percent"]
        print(f"{name}: P={pct['precision']:.2f} R={pct['recall']:.2f} F1={pct['f1']:.2f}")
    write_manifest(out, "evaluate", {}, {"generations": gen_path, "reference": ref_path},
                   ["report.json", "report.csv"])
    return 0


# -- parser --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="herbgen", description="Knowledge-guided herb prescription generation.")
    parser.add_argument("--version", action="version", version=f"herbgen {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP threads")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("build-vocab", help="character vocabulary from corpus lines and a herb list")
    p.add_argument("--corpus", type=Path, nargs="+", required=True, help="plain-text corpus files")
    p.add_argument("--dataset", type=Path, nargs="*", help="JSON-lines datasets whose symptoms join the vocabulary")
    p.add_argument("--herbs", type=Path, required=True, help="herb list, one name per line")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("synth", help="emit a synthetic world (herbs, KG, corpus, dataset, splits)")
    _add_config_flags(p, "synth")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="whole-entity masked language model pretraining")
    _add_config_flags(p, "pretrain")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--valid-corpus", type=Path)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--herbs", type=Path, help="herb list for whole-entity masking")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="symptom-to-prescription fine-tuning")
    _add_config_flags(p, "finetune")
    p.add_argument("--train", type=Path, required=True, help="JSON-lines records {symptom, herbs}")
    p.add_argument("--valid", type=Path)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--herbs", type=Path, required=True)
    p.add_argument("--kg", type=Path, help="knowledge graph TSV (head, relation, tail)")
    p.add_argument("--init", type=Path, help="pretrained checkpoint")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("generate", help="decode prescriptions for symptom texts")
    _add_config_flags(p, "generate")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="JSON-lines with 'symptom' or plain text lines")
    p.add_argument("--kg", type=Path)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="precision / recall / F1 of generations against references")
    p.add_argument("--generations", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s", force=True)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be at least 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except NumericError as exc:
        print(f"herbgen: numeric failure: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"herbgen: data error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"herbgen: data error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ValueError, TypeError) as exc:
        print(f"herbgen: usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
