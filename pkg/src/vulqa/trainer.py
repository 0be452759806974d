"""Two-stage training (projector alignment, then LoRA fine-tuning) and ablations."""
from __future__ import annotations

import copy
import logging
import re
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import save_model
from .errors import ConfigError, ContextOverflowError, InputError
from .metrics import MetricReport, evaluate_corpus
from .model import (DecodeConfig, ModelConfig, MultimodalSequence, VulQAModel, collate, lora_attach,
                    set_stage_freeze, trainable_parameters)

log = logging.getLogger(__name__)

STOP_WINDOW = 10

STAGE_DEFAULTS = {
    "pretrain": {"epochs": 1, "batch_size": 10},
    "finetune": {"epochs": 3, "batch_size": 5},
}


@dataclass
class StageConfig:
    stage: str = "pretrain"
    epochs: int | None = None
    batch_size: int | None = None
    lr: float = 2e-5
    weight_decay: float = 0.0
    seed: int = 0
    max_code_tokens: int = 1000
    turn_limit: int | None = None
    max_steps: int | None = None
    grad_clip: float | None = None
    grad_accum: int = 1
    checkpoint_every: int | None = None
    from_scratch: bool = False
    stop_loss: float | None = None  # stop once the mean of the last STOP_WINDOW step losses drops below this

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ConfigError(f"stage must be one of {sorted(STAGE_DEFAULTS)}")
        defaults = STAGE_DEFAULTS[self.stage]
        if self.epochs is None:
            self.epochs = defaults["epochs"]
        if self.batch_size is None:
            self.batch_size = defaults["batch_size"]
        if self.batch_size < 1 or self.epochs < 1 or self.grad_accum < 1:
            raise ConfigError("epochs, batch_size and grad_accum must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown stage config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    stage: str
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    epochs_run: int = 0
    wall_time: float = 0.0
    trainable_parameters: int = 0
    skipped_overflow: int = 0
    checkpoints: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def build_batches(items: Sequence, batch_size: int, seed: int, epoch: int = 0) -> Iterator[list]:
    """Shuffle with a seed derived from (seed, epoch) and cut into batches."""
    order = np.random.default_rng([seed, epoch]).permutation(len(items))
    for start in range(0, len(order), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]


def render_corpus(model: VulQAModel, corpus, max_code_tokens: int,
                  turn_limit: int | None = None) -> tuple[list[MultimodalSequence], int]:
    seqs, skipped = [], 0
    for sample in corpus:
        try:
            seqs.append(model.render(sample.turns, sample.code, max_code_tokens, turn_limit=turn_limit))
        except ContextOverflowError:
            skipped += 1
    if skipped:
        log.warning("skipped %d samples that exceed the context window", skipped)
    return seqs, skipped


def run_stage(model: VulQAModel, corpus, cfg: StageConfig, out_dir=None) -> TrainReport:
    """Train one stage in place; returns the loss series and checkpoint paths.

    Fine-tuning refuses to start on a model that has not been through
    pretraining unless ``cfg.from_scratch`` is set.
    """
    if not corpus:
        raise InputError("empty training corpus")
    if cfg.stage == "finetune":
        if "pretrain" not in model.stages_done and not cfg.from_scratch and not model.inline_code:
            raise ConfigError("fine-tuning needs a pretrained (stage-1) model or from_scratch=True")
        if not model.lora_modules():
            lora_attach(model)
    expected = set_stage_freeze(model, cfg.stage)
    params = trainable_parameters(model)
    if not params:
        raise ConfigError(f"no trainable parameters for stage {cfg.stage}")
    seqs, skipped = render_corpus(model, corpus, cfg.max_code_tokens, cfg.turn_limit)
    if not seqs:
        raise InputError("every sample overflowed the context window")
    opt = nx.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    report = TrainReport(stage=cfg.stage, skipped_overflow=skipped,
                         trainable_parameters=int(sum(p.data.size for p in params)))
    pad = model.tokenizer.pad_id
    out_dir = Path(out_dir) if out_dir is not None else None
    t0 = time.perf_counter()
    micro = 0
    done = False
    for epoch in range(cfg.epochs):
        for batch in build_batches(seqs, cfg.batch_size, cfg.seed, epoch):
            loss = model.forward_loss(collate(batch, pad))
            scaled = nx.scale(loss, 1.0 / cfg.grad_accum) if cfg.grad_accum > 1 else loss
            scaled.backward()
            micro += 1
            if micro % cfg.grad_accum:
                continue
            if cfg.grad_clip:
                nx.clip_grad_norm(params, cfg.grad_clip)
            for name, p in model.named_parameters():
                if p.trainable != expected.get(name, False):
                    raise ConfigError(f"freeze contract violated for {name}")
            opt.step()
            opt.zero_grad()
            model.zero_grad()
            report.losses.append(float(loss.data))
            report.steps += 1
            if out_dir is not None and cfg.checkpoint_every and report.steps % cfg.checkpoint_every == 0:
                path = out_dir / f"{cfg.stage}-step{report.steps}.ckpt"
                save_model(model, path)
                report.checkpoints.append(str(path))
            if cfg.max_steps is not None and report.steps >= cfg.max_steps:
                done = True
                break
            if cfg.stop_loss is not None and report.steps >= STOP_WINDOW \
                    and float(np.mean(report.losses[-STOP_WINDOW:])) < cfg.stop_loss:
                done = True
                break
        report.epochs_run = epoch + 1
        if done:
            break
    model.zero_grad()
    model.stages_done.append(cfg.stage)
    report.wall_time = time.perf_counter() - t0
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{cfg.stage}.ckpt"
        save_model(model, path)
        report.checkpoints.append(str(path))
    return report


# ---------------------------------------------------------------- ablation

VARIANT_RE = re.compile(r"^(full|only_pretraining|only_llm_text_inline|truncated_code[:(](\d+)\)?)$")


def parse_variant(name: str) -> tuple[str, int | None]:
    m = VARIANT_RE.match(name.strip())
    if not m:
        raise ConfigError(f"unknown ablation variant {name!r}")
    if m.group(2) is not None:
        n = int(m.group(2))
        if n <= 0:
            raise ConfigError("truncated_code needs a positive token count")
        return "truncated_code", n
    return m.group(1), None


@dataclass
class AblationResult:
    reports: dict[str, MetricReport]
    train_reports: dict[str, list[TrainReport]]

    def to_json(self) -> dict:
        return {
            "variants": {k: v.to_json() for k, v in self.reports.items()},
            "training": {k: [r.to_json() for r in rs] for k, rs in self.train_reports.items()},
        }


def ablation_run(corpus, test_set, variants: Sequence[str], model_cfg: ModelConfig, tokenizer,
                 pretrain_cfg: StageConfig | None = None, finetune_cfg: StageConfig | None = None,
                 pretrain_corpus=None, decode_config: DecodeConfig | None = None) -> AblationResult:
    """Train and evaluate each variant with identical seeds and schedules."""
    parsed = [(v, *parse_variant(v)) for v in variants]
    pre_cfg = pretrain_cfg or StageConfig(stage="pretrain")
    fine_cfg = finetune_cfg or StageConfig(stage="finetune")
    pre_corpus = corpus if pretrain_corpus is None else pretrain_corpus
    decode_config = decode_config or DecodeConfig()
    stage1_cache: dict[int, tuple[VulQAModel, TrainReport]] = {}

    def stage1(max_tokens: int):
        if max_tokens not in stage1_cache:
            m = VulQAModel(copy.deepcopy(model_cfg), tokenizer)
            rep = run_stage(m, pre_corpus, _with(pre_cfg, max_code_tokens=max_tokens))
            stage1_cache[max_tokens] = (m, rep)
        return stage1_cache[max_tokens]

    reports: dict[str, MetricReport] = {}
    trains: dict[str, list[TrainReport]] = {}
    for label, kind, n in parsed:
        max_tokens = n if kind == "truncated_code" else fine_cfg.max_code_tokens
        dcfg = _with(decode_config, max_code_tokens=max_tokens)
        if kind == "only_llm_text_inline":
            m = VulQAModel(ModelConfig.from_dict({**model_cfg.to_dict(), "code_mode": "inline"}), tokenizer)
            rep = run_stage(m, corpus, _with(fine_cfg, max_code_tokens=max_tokens, from_scratch=True))
            trains[label] = [rep]
        else:
            base, rep1 = stage1(n if kind == "truncated_code" else pre_cfg.max_code_tokens)
            m = copy.deepcopy(base)
            trains[label] = [rep1]
            if kind != "only_pretraining":
                trains[label].append(run_stage(m, corpus, _with(fine_cfg, max_code_tokens=max_tokens)))
        reports[label] = evaluate_corpus(m, test_set, dcfg)
    return AblationResult(reports, trains)


def _with(cfg, **changes):
    new = copy.copy(cfg)
    for k, v in changes.items():
        setattr(new, k, v)
    return new
