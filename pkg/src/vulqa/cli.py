"""Command-line entry point: ``vulqa <subcommand> [options]``.

Config precedence is defaults < ``--config`` JSON file < ``--set key=value``
overrides < dedicated flags (``--seed``, ``--max-code-tokens``). Every run
writes ``resolved_config.json`` into its output directory, logs JSON lines
to stderr, and on failure prints one JSON error object to stderr and exits
with a code from ``EXIT_CODES``.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .errors import (CheckpointError, ConfigError, ContextOverflowError, GenerationFailure, InputError,
                     MissingCheckpointError, ParseError, StatsError, ValidationError, VulQAError)

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "usage": 2,
    "config": 3,
    "missing": 4,
    "schema": 5,
    "checkpoint": 6,
    "generation": 7,
    "input": 8,
}

SUBCOMMANDS = ("tokenizer-train", "pretrain", "finetune", "generate", "evaluate", "qagen", "stats",
               "classify-train", "classify-eval", "ablate")


class UsageError(Exception):
    pass


def _exit_kind(exc: BaseException) -> str:
    if isinstance(exc, UsageError):
        return "usage"
    if isinstance(exc, (MissingCheckpointError, FileNotFoundError)):
        return "missing"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, (ParseError, ValidationError)):
        return "schema"
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, GenerationFailure):
        return "generation"
    if isinstance(exc, (InputError, StatsError, ContextOverflowError, VulQAError)):
        return "input"
    return "internal"


# ---------------------------------------------------------------- logging


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {"ts": round(record.created, 3), "level": record.levelname.lower(), "logger": record.name}
        if isinstance(record.msg, dict):
            payload.update(record.msg)
        else:
            payload["event"] = "log"
            payload["message"] = record.getMessage()
        return json.dumps(payload, sort_keys=True, default=str)


def _setup_logging(level: str) -> logging.Logger:
    root = logging.getLogger("vulqa")
    root.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root.addHandler(handler)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))
    root.propagate = False
    return root


def _event(log: logging.Logger, event: str, **fields) -> None:
    log.info({"event": event, **fields})


# ---------------------------------------------------------------- config


def default_config() -> dict:
    from .classifier import ClassifierConfig
    from .model import DecodeConfig, ModelConfig
    from .trainer import StageConfig

    return {
        "seed": 0,
        "model": ModelConfig().to_dict(),
        "tokenizer": {"vocab_size": 512, "min_frequency": 2},
        "pretrain": StageConfig(stage="pretrain").to_dict(),
        "finetune": StageConfig(stage="finetune").to_dict(),
        "decode": asdict(DecodeConfig()),
        "classifier": {**ClassifierConfig().to_dict(), "balance": True},
        "qagen": {"parallelism": 1, "turn_cap": None, "timeout": 60.0, "retries": 2, "max_tokens": 1024,
                  "temperature": 0.2},
    }


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for key, val in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            _merge(base[key], val, f"{path}{key}.")
        else:
            base[key] = val
    return base


def _parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise UsageError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.strip().split("."), val


def resolve_config(args) -> dict:
    cfg = default_config()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            _merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    for item in args.set or []:
        keys, val = _parse_override(item)
        node = cfg
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
        node[keys[-1]] = val
    if args.seed is not None:
        cfg["seed"] = args.seed
    seed = cfg["seed"]
    for section in ("model", "pretrain", "finetune", "decode", "classifier"):
        cfg[section]["seed"] = seed
    if getattr(args, "max_code_tokens", None) is not None:
        n = args.max_code_tokens
        cfg["pretrain"]["max_code_tokens"] = n
        cfg["finetune"]["max_code_tokens"] = n
        cfg["decode"]["max_code_tokens"] = n
        cfg["classifier"]["max_code_tokens"] = n
    return cfg


def _stage_cfg(cfg: dict, stage: str, **extra):
    from .trainer import StageConfig

    d = dict(cfg[stage])
    d.update(extra)
    d["stage"] = stage
    return StageConfig.from_dict(d)


def _decode_cfg(cfg: dict):
    from .model import DecodeConfig

    return DecodeConfig(**cfg["decode"])


def _model_cfg(cfg: dict):
    from .model import ModelConfig

    return ModelConfig.from_dict(cfg["model"])


# ---------------------------------------------------------------- helpers


def _require_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing required {what}")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _checkpoint_arg(args) -> str:
    if not args.checkpoint:
        raise MissingCheckpointError(f"{args.command} needs --checkpoint")
    return args.checkpoint


def _load_tokenizer(path):
    from .tokenizer import Tokenizer

    return Tokenizer.load(_require_file(path, "--tokenizer"))


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))
    return path


def _texts_from_file(path: Path) -> list[str]:
    """Every string a tokenizer should see: JSONL fields or the raw file."""
    if path.suffix != ".jsonl":
        return [path.read_text(encoding="utf-8")]
    texts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: malformed JSON: {exc.msg}", line=lineno) from None
            for key in ("code", "summary", "description"):
                if isinstance(obj.get(key), str):
                    texts.append(obj[key])
            for turn in obj.get("turns", []) or []:
                if isinstance(turn, dict):
                    texts += [v for v in (turn.get("q"), turn.get("a")) if isinstance(v, str)]
    return texts


def _loss_outputs(out: Path, series: dict, figures: bool) -> dict:
    from .reporting import write_loss_report

    return write_loss_report(series, out, figures=figures)


# ---------------------------------------------------------------- subcommands


def cmd_tokenizer_train(args, cfg, out: Path, log) -> dict:
    from .tokenizer import train_bpe

    if not args.input:
        raise UsageError("tokenizer-train needs at least one --input file")
    texts = []
    for p in args.input:
        texts += _texts_from_file(_require_file(p, "--input"))
    tok = train_bpe(texts, cfg["tokenizer"]["vocab_size"], cfg["tokenizer"]["min_frequency"])
    path = out / "tokenizer.json"
    tok.save(path)
    _event(log, "tokenizer_trained", merges=len(tok.merges), vocab_size=tok.vocab_size, path=str(path))
    return {"tokenizer": str(path), "merges": len(tok.merges)}


def _train_stage(args, cfg, out: Path, log, stage: str) -> dict:
    from .checkpoint import load_model
    from .data import build_pretrain_corpus, load_finetune_corpus, read_pairs
    from .model import VulQAModel
    from .trainer import run_stage

    if stage == "pretrain" and args.pairs:
        build = build_pretrain_corpus(read_pairs(_require_file(args.pairs, "--pairs")))
        corpus = build.samples
        _event(log, "pretrain_corpus", samples=len(corpus), skipped=build.skipped)
    else:
        corpus = load_finetune_corpus(_require_file(args.corpus, "--corpus"))
    scfg = _stage_cfg(cfg, stage, from_scratch=bool(getattr(args, "from_scratch", False)))
    if stage == "finetune" and args.checkpoint is None and not scfg.from_scratch:
        raise MissingCheckpointError("finetune needs --checkpoint from the pretrain stage (or --from-scratch)")
    if args.checkpoint:
        model = load_model(args.checkpoint)
    else:
        model = VulQAModel(_model_cfg(cfg), _load_tokenizer(args.tokenizer))
    _event(log, "stage_start", stage=stage, samples=len(corpus), **{k: v for k, v in scfg.to_dict().items()
                                                                   if k in ("epochs", "batch_size", "lr")})
    report = run_stage(model, corpus, scfg, out_dir=out)
    for i, loss in enumerate(report.losses):
        if i % max(1, args.log_every) == 0 or i == len(report.losses) - 1:
            _event(log, "step", stage=stage, step=i + 1, loss=loss)
    _write_json(out / "train_report.json", report.to_json())
    files = _loss_outputs(out, {stage: report.losses}, not args.no_figures)
    _event(log, "stage_done", stage=stage, steps=report.steps, final_loss=report.losses[-1] if report.losses else None,
           checkpoint=report.checkpoints[-1])
    return {"checkpoint": report.checkpoints[-1], "steps": report.steps, **files}


def cmd_pretrain(args, cfg, out, log) -> dict:
    return _train_stage(args, cfg, out, log, "pretrain")


def cmd_finetune(args, cfg, out, log) -> dict:
    return _train_stage(args, cfg, out, log, "finetune")


def cmd_generate(args, cfg, out, log) -> dict:
    from .checkpoint import load_model
    from .model import generate

    model = load_model(_checkpoint_arg(args))
    code_path = _require_file(args.code, "--code")
    if not args.question:
        raise UsageError("generate needs --question")
    answer = generate(model, code_path.read_text(encoding="utf-8"), args.question, _decode_cfg(cfg))
    print(answer)
    _write_json(out / "generation.json", {"question": args.question, "answer": answer, "code": str(code_path)})
    return {"answer": answer}


def cmd_evaluate(args, cfg, out, log) -> dict:
    from .checkpoint import load_model
    from .data import load_finetune_corpus
    from .metrics import evaluate_corpus, format_table
    from .reporting import write_metric_report

    model = load_model(_checkpoint_arg(args))
    test = load_finetune_corpus(_require_file(args.corpus, "--corpus"))
    report = evaluate_corpus(model, test, _decode_cfg(cfg))
    name = args.name or "model"
    files = write_metric_report({name: report}, out, figures=not args.no_figures)
    print(format_table({name: report}))
    _event(log, "evaluated", rows=report.n, skipped=report.skipped, **report.values())
    return files


def cmd_qagen(args, cfg, out, log) -> dict:
    from .data import write_jsonl
    from .qagen import HttpGeneratorClient, OfflineTemplateClient, generate_dataset

    src = _require_file(args.input, "--input")
    records = []
    with open(src, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ParseError(f"malformed JSON: {exc.msg}", line=lineno) from None
    q = cfg["qagen"]
    offline = os.environ.get("LLAVUL_OFFLINE") == "1" or not args.endpoint
    if offline:
        client = OfflineTemplateClient()
    else:
        client = HttpGeneratorClient(args.endpoint, timeout=q["timeout"], retries=q["retries"],
                                     max_tokens=q["max_tokens"], temperature=q["temperature"])
    _event(log, "qagen_start", records=len(records), client="offline" if offline else "http")
    samples, report = generate_dataset(records, client, q["turn_cap"], q["parallelism"])
    path = out / "qa.jsonl"
    write_jsonl(samples, path)
    _write_json(out / "qagen_report.json", report.to_json())
    _event(log, "qagen_done", succeeded=report.succeeded, failed=report.failed, skipped=report.skipped,
           retries=report.retries)
    return {"corpus": str(path), "succeeded": report.succeeded, "failed": report.failed}


def cmd_stats(args, cfg, out, log) -> dict:
    from .data import compute_stats, load_finetune_corpus

    corpus = load_finetune_corpus(_require_file(args.corpus, "--corpus"))
    stats = compute_stats(corpus, _load_tokenizer(args.tokenizer))
    _write_json(out / "stats.json", stats.to_json())
    print(stats.to_table(args.name or "Dataset"))
    return stats.to_json()


def cmd_classify_train(args, cfg, out, log) -> dict:
    from .checkpoint import load_model
    from .classifier import (ClassifierConfig, ClassifierHead, balance_corpus, encoder_from_model, new_encoder,
                             save_classifier, train_classifier)
    from .data import load_labeled_corpus

    corpus = load_labeled_corpus(_require_file(args.corpus, "--corpus"))
    ccfg_d = dict(cfg["classifier"])
    balance = ccfg_d.pop("balance", True)
    ccfg = ClassifierConfig.from_dict(ccfg_d)
    if balance:
        corpus = balance_corpus(corpus, ccfg.seed)
    if args.checkpoint:
        model = load_model(args.checkpoint)
        encoder, tokenizer, mcfg = encoder_from_model(model), model.tokenizer, model.config
    else:
        mcfg = _model_cfg(cfg)
        tokenizer = _load_tokenizer(args.tokenizer)
        encoder = new_encoder(mcfg)
    head = ClassifierHead(mcfg.enc_dim, mcfg.seed, mcfg.dtype)
    report = train_classifier(encoder, head, corpus, ccfg, tokenizer)
    path = save_classifier(encoder, head, tokenizer, mcfg, out / "classifier.ckpt",
                           extra={"max_code_tokens": ccfg.max_code_tokens})
    _write_json(out / "train_report.json", report.to_json())
    files = _loss_outputs(out, {"classifier": report.losses}, not args.no_figures)
    _event(log, "classifier_trained", steps=report.steps, samples=len(corpus), checkpoint=str(path))
    return {"checkpoint": str(path), "steps": report.steps, **files}


def cmd_classify_eval(args, cfg, out, log) -> dict:
    from .checkpoint import read_checkpoint
    from .classifier import evaluate_classifier, load_classifier
    from .data import load_labeled_corpus, write_jsonl
    from .reporting import plot_classification, write_tsv

    encoder, head, tokenizer, _ = load_classifier(_checkpoint_arg(args))
    header, _, _ = read_checkpoint(args.checkpoint)
    max_tokens = cfg["classifier"]["max_code_tokens"]
    if args.max_code_tokens is None:
        max_tokens = header.get("extra", {}).get("max_code_tokens", max_tokens)
    corpus = load_labeled_corpus(_require_file(args.corpus, "--corpus"))
    preds, metrics = evaluate_classifier(encoder, head, corpus, tokenizer, max_tokens)
    write_jsonl(preds, out / "predictions.jsonl")
    _write_json(out / "classification.json", metrics)
    write_tsv(out / "classification.tsv", list(metrics), [[float(v) for v in metrics.values()]])
    if not args.no_figures:
        plot_classification(metrics, out / "classification.png")
    print("\t".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    _event(log, "classifier_evaluated", n=len(preds), **metrics)
    return metrics


def cmd_ablate(args, cfg, out, log) -> dict:
    from .data import build_pretrain_corpus, load_finetune_corpus, read_pairs
    from .metrics import format_table
    from .reporting import write_loss_report, write_metric_report
    from .trainer import ablation_run

    if not args.variants:
        raise UsageError("ablate needs --variants")
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    train = load_finetune_corpus(_require_file(args.corpus, "--corpus"))
    test = load_finetune_corpus(_require_file(args.test, "--test"))
    pre = build_pretrain_corpus(read_pairs(_require_file(args.pairs, "--pairs"))).samples if args.pairs else None
    result = ablation_run(train, test, variants, _model_cfg(cfg), _load_tokenizer(args.tokenizer),
                          _stage_cfg(cfg, "pretrain"), _stage_cfg(cfg, "finetune"), pre, _decode_cfg(cfg))
    files = write_metric_report(result.reports, out, stem="ablation", figures=not args.no_figures)
    series = {f"{v}/{r.stage}": r.losses for v, reps in result.train_reports.items() for r in reps}
    files.update({f"loss_{k}": v for k, v in write_loss_report(series, out, figures=not args.no_figures).items()})
    _write_json(out / "ablation_training.json", result.to_json()["training"])
    print(format_table(result.reports))
    for name, rep in result.reports.items():
        _event(log, "variant_done", variant=name, **rep.values())
    return files


HANDLERS = {
    "tokenizer-train": cmd_tokenizer_train, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "generate": cmd_generate, "evaluate": cmd_evaluate, "qagen": cmd_qagen, "stats": cmd_stats,
    "classify-train": cmd_classify_train, "classify-eval": cmd_classify_eval, "ablate": cmd_ablate,
}


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. finetune.lr=3e-3 (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default: runs/<subcommand>)")
    common.add_argument("--max-code-tokens", type=int, dest="max_code_tokens")
    common.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    common.add_argument("--log-level", default="info")

    parser = _Parser(prog="vulqa", description="Code-vulnerability question answering pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("tokenizer-train", parents=[common], help="train the BPE tokenizer")
    p.add_argument("--input", action="append", help="JSONL corpus or plain text file (repeatable)")

    for name in ("pretrain", "finetune"):
        p = sub.add_parser(name, parents=[common], help=f"run the {name} stage")
        p.add_argument("--corpus", help="conversation JSONL")
        p.add_argument("--tokenizer")
        p.add_argument("--checkpoint", help="model checkpoint to continue from")
        p.add_argument("--log-every", type=int, default=10)
        if name == "pretrain":
            p.add_argument("--pairs", help="code-summary pairs JSONL (alternative to --corpus)")
        else:
            p.add_argument("--from-scratch", action="store_true",
                           help="allow fine-tuning without a pretrain checkpoint")

    p = sub.add_parser("generate", parents=[common], help="answer one question about a code file")
    p.add_argument("--checkpoint")
    p.add_argument("--code")
    p.add_argument("--question")

    p = sub.add_parser("evaluate", parents=[common], help="score generations on a test corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--name")

    p = sub.add_parser("qagen", parents=[common], help="generate multi-turn QA from code + descriptions")
    p.add_argument("--input")
    p.add_argument("--endpoint")

    p = sub.add_parser("stats", parents=[common], help="dataset statistics table")
    p.add_argument("--corpus")
    p.add_argument("--tokenizer")
    p.add_argument("--name")

    p = sub.add_parser("classify-train", parents=[common], help="fine-tune encoder + binary head")
    p.add_argument("--corpus")
    p.add_argument("--tokenizer")
    p.add_argument("--checkpoint", help="initialise the encoder from a model checkpoint")

    p = sub.add_parser("classify-eval", parents=[common], help="classify a labelled corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")

    p = sub.add_parser("ablate", parents=[common], help="train and score ablation variants")
    p.add_argument("--corpus")
    p.add_argument("--test")
    p.add_argument("--pairs")
    p.add_argument("--tokenizer")
    p.add_argument("--variants", help="comma list, e.g. full,truncated_code:100,only_pretraining")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    log = _setup_logging("info")
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(f"a subcommand is required: {', '.join(SUBCOMMANDS)}")
        log = _setup_logging(args.log_level)
        cfg = resolve_config(args)
        out = Path(args.out or Path("runs") / args.command)
        out.mkdir(parents=True, exist_ok=True)
        snapshot = {"command": args.command, "argv": argv, "config": copy.deepcopy(cfg)}
        _write_json(out / "resolved_config.json", snapshot)
        t0 = time.perf_counter()
        _event(log, "start", command=args.command, seed=cfg["seed"], out=str(out))
        result = HANDLERS[args.command](args, cfg, out, log)
        _event(log, "done", command=args.command, seconds=round(time.perf_counter() - t0, 3),
               result=result if isinstance(result, dict) else None)
        return EXIT_CODES["ok"]
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - converted to an error record
        kind = _exit_kind(exc)
        code = EXIT_CODES[kind]
        err = {"event": "error", "kind": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        if kind == "internal":
            log.debug("traceback", exc_info=True)
        return code


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
