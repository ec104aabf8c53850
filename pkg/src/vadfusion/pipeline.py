"""Two-phase training orchestration.

Phase A trains each unimodal tower with Gaussian NLL (AdamW, two learning
rates: backbone vs heads, cosine schedule with linear warmup, early stopping
on validation average CCC). Phase B freezes the towers (enforced by parameter
checksums) and trains (a) the inconsistency classifier on BCE + margin loss
with Youden-J threshold selection, and (b) the fusion tower on supervised NLL
plus the agreement objective, on consistent pairs only.

Determinism: fixed seed + fixed thread count reproduce initialization, batch
order, dropout masks, and therefore run logs and checkpoints bit-for-bit on
the same machine.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    config_from_kv,
    config_to_kv,
    load_checkpoint,
    load_into_module,
    params_checksum,
    save_module,
)
from .fusion import FusionConfig, FusionTower, InconsistencyClassifier, decide
from .label_alignment import BetaParams, invert_label
from .lexicon import VadLexicon, load_toy_lexicon
from .losses import classifier_loss, fusion_loss, gaussian_nll
from .metrics import EvalReport, binary_metrics, regression_report, youden_threshold
from .prosody import load_wav
from .synthdata import PairRecord, read_manifest
from .towers import (
    GaussianVad,
    SpeechTower,
    TextTower,
    TowerConfig,
    load_precomputed_features,
    speech_inputs,
    text_inputs,
)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 5
    lr_backbone: float = 2e-5
    lr_heads: float = 1e-4
    lr_classifier: float = 1e-3
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    schedule: str = "cosine"
    seed: int = 0
    grad_clip: float = 5.0
    margin: float = 0.9
    lambda_margin: float = 0.15
    lambda_agree: float = 1.0
    threads: int = 4

    def __post_init__(self):
        if min(self.batch_size, self.max_epochs, self.patience, self.threads) <= 0:
            raise ValueError("batch_size, max_epochs, patience, threads must be positive")
        if not (0.0 <= self.warmup_fraction <= 0.5):
            raise ValueError(f"warmup_fraction must be in [0, 0.5], got {self.warmup_fraction}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def default_train_config(phase: str, **overrides) -> TrainConfig:
    """Per-phase batch-size defaults: 16 for towers/fusion, 32 for classifier."""
    base = {"phase_a": 16, "classifier": 32, "fusion": 16}[phase]
    overrides.setdefault("batch_size", base)
    return TrainConfig(**overrides)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: dict[str, float]
    val_metric: float
    lr: float


@dataclass
class RunLog:
    config_echo: dict[str, str] = field(default_factory=dict)
    param_groups: dict[str, str] = field(default_factory=dict)
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    extras: dict = field(default_factory=dict)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"type": "meta", "config": self.config_echo,
                                 "param_groups": self.param_groups},
                                sort_keys=True) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps({"type": "epoch", "epoch": rec.epoch,
                                     "train_loss": rec.train_loss,
                                     "val_metric": rec.val_metric,
                                     "lr": rec.lr}, sort_keys=True) + "\n")
            fh.write(json.dumps({"type": "summary", "best_epoch": self.best_epoch,
                                 "stopped_early": self.stopped_early,
                                 "extras": self.extras}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunLog":
        log = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                if rec["type"] == "meta":
                    log.config_echo = rec["config"]
                    log.param_groups = rec["param_groups"]
                elif rec["type"] == "epoch":
                    log.epochs.append(EpochRecord(rec["epoch"], rec["train_loss"],
                                                  rec["val_metric"], rec["lr"]))
                else:
                    log.best_epoch = rec["best_epoch"]
                    log.stopped_early = rec["stopped_early"]
                    log.extras = rec.get("extras", {})
        return log


def setup_run(cfg: TrainConfig) -> None:
    torch.manual_seed(cfg.seed)
    torch.set_num_threads(cfg.threads)


def lr_lambda(total_steps: int, warmup_fraction: float, schedule: str):
    warmup = max(1, int(round(warmup_fraction * total_steps)))

    def fn(step: int) -> float:
        if schedule == "constant":
            return 1.0
        if step < warmup:
            return step / warmup
        progress = (step - warmup) / max(1, total_steps - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    return fn


class EarlyStopper:
    """Strict-improvement early stopping: stop once the gap between the
    current epoch and the best epoch reaches `patience`."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_metric = -math.inf
        self.best_epoch = 0

    def update(self, epoch: int, metric: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if metric > self.best_metric:
            self.best_metric = metric
            self.best_epoch = epoch
            return True, False
        return False, (epoch - self.best_epoch) >= self.patience


# ---------------------------------------------------------------------------
# dataset

@dataclass
class PairExample:
    record: PairRecord
    mel: torch.Tensor | None = None          # (T, n_mels) or None
    prosody: torch.Tensor | None = None      # (T, 2)
    precomputed: torch.Tensor | None = None  # (T, D) adapter path
    token_ids: torch.Tensor | None = None    # (Tt,)
    priors: torch.Tensor | None = None       # (Tt, 3)


class PairDataset:
    """Loads a manifest and caches all deterministic front-end features."""

    def __init__(self, manifest_path, tower_cfg: TowerConfig,
                 lex: VadLexicon | None = None, need_speech: bool = True,
                 need_text: bool = True):
        manifest_path = Path(manifest_path)
        self.root = manifest_path.parent
        self.records = read_manifest(manifest_path)
        if not self.records:
            raise ValueError(f"{manifest_path}: empty manifest")
        self.tower_cfg = tower_cfg
        lex = lex or load_toy_lexicon()
        self.examples: list[PairExample] = []
        for r in self.records:
            ex = PairExample(record=r)
            if need_speech:
                if "::" in r.speech_ref:
                    feat_dir, _, utt = r.speech_ref.partition("::")
                    seq = load_precomputed_features(self.root / feat_dir, utt,
                                                    expected_width=tower_cfg.d_model)
                    ex.precomputed = seq.frames
                    ex.prosody = torch.zeros(seq.frames.shape[0], 2)
                else:
                    w = load_wav(self.root / r.speech_ref)
                    ex.mel, ex.prosody = speech_inputs(w, tower_cfg)
            if need_text:
                if not r.tokens:
                    raise ValueError(f"record {r.id}: empty token sequence")
                ex.token_ids, ex.priors = text_inputs(r.tokens, tower_cfg, lex)
            self.examples.append(ex)

    def __len__(self):
        return len(self.records)

    def speech_batch(self, idxs) -> dict:
        exs = [self.examples[i] for i in idxs]
        t_max = max(ex.prosody.shape[0] for ex in exs)
        use_pre = exs[0].precomputed is not None
        width = (self.tower_cfg.d_model if use_pre else self.tower_cfg.n_mels)
        feats = torch.zeros(len(exs), t_max, width)
        pros = torch.zeros(len(exs), t_max, 2)
        mask = torch.zeros(len(exs), t_max, dtype=torch.bool)
        for i, ex in enumerate(exs):
            src = ex.precomputed if use_pre else ex.mel
            t = src.shape[0]
            feats[i, :t] = src
            pros[i, :t] = ex.prosody
            mask[i, :t] = True
        key = "precomputed" if use_pre else "mel"
        return {key: feats, "prosody": pros, "mask": mask}

    def text_batch(self, idxs) -> dict:
        exs = [self.examples[i] for i in idxs]
        t_max = max(ex.token_ids.shape[0] for ex in exs)
        ids = torch.zeros(len(exs), t_max, dtype=torch.long)
        priors = torch.full((len(exs), t_max, 3), 0.5)
        mask = torch.zeros(len(exs), t_max, dtype=torch.bool)
        for i, ex in enumerate(exs):
            t = ex.token_ids.shape[0]
            ids[i, :t] = ex.token_ids
            priors[i, :t] = ex.priors
            mask[i, :t] = True
        return {"ids": ids, "priors": priors, "mask": mask}

    def labels(self, idxs) -> tuple[torch.Tensor, torch.Tensor]:
        """(targets (B,3), labeled mask (B,)); unlabeled rows are zeros."""
        target = torch.zeros(len(idxs), 3)
        labeled = torch.zeros(len(idxs), dtype=torch.bool)
        for i, idx in enumerate(idxs):
            vad = self.records[idx].vad
            if vad is not None:
                target[i] = torch.tensor([vad.v, vad.a, vad.d])
                labeled[i] = True
        return target, labeled

    def consistency(self, idxs) -> torch.Tensor:
        ys = []
        for idx in idxs:
            y = self.records[idx].consistency
            if y is None:
                raise ValueError(f"record {self.records[idx].id}: missing consistency label")
            ys.append(float(y))
        return torch.tensor(ys)

    def epoch_order(self, seed: int, epoch: int) -> list[list[int]]:
        rng = np.random.default_rng((seed, epoch))
        return list(rng.permutation(len(self.records)))

    def batches(self, seed: int, epoch: int, batch_size: int):
        order = self.epoch_order(seed, epoch)
        for i in range(0, len(order), batch_size):
            yield [int(j) for j in order[i: i + batch_size]]

    def eval_batches(self, batch_size: int):
        for i in range(0, len(self.records), batch_size):
            yield list(range(i, min(i + batch_size, len(self.records))))


# ---------------------------------------------------------------------------
# phase A

def phase_a_param_groups(tower: torch.nn.Module) -> tuple[list[dict], dict[str, str]]:
    """Backbone (encoder/Conformer/FiLM/embedding) vs heads (projection,
    pooling, prediction); the assignment table goes into the run log."""
    backbone, heads, table = [], [], {}
    for name, p in tower.named_parameters():
        group = "backbone" if name.split(".")[0] in ("encoder", "blocks", "film") else "heads"
        table[name] = group
        (backbone if group == "backbone" else heads).append(p)
    return backbone, heads, table


@dataclass
class TrainResult:
    checkpoint: Path
    runlog: RunLog
    runlog_path: Path
    best_metric: float
    tau_star: float | None = None


def _tower_forward(tower, dataset: PairDataset, idxs, modality: str):
    if modality == "speech":
        batch = dataset.speech_batch(idxs)
        if "precomputed" in batch:
            return tower(None, batch["prosody"], batch["mask"],
                         precomputed=batch["precomputed"])
        return tower(batch["mel"], batch["prosody"], batch["mask"])
    batch = dataset.text_batch(idxs)
    return tower(batch["ids"], batch["priors"], batch["mask"])


def _validate_tower(tower, dataset: PairDataset, modality: str,
                    batch_size: int) -> tuple[float, np.ndarray]:
    tower.eval()
    preds, golds = [], []
    with torch.no_grad():
        for idxs in dataset.eval_batches(batch_size):
            _, mu, _, _ = _tower_forward(tower, dataset, idxs, modality)
            target, labeled = dataset.labels(idxs)
            preds.append(mu[labeled].numpy())
            golds.append(target[labeled].numpy())
    tower.train()
    pred = np.concatenate(preds)
    gold = np.concatenate(golds)
    report = regression_report(pred, gold)
    return report.ccc["avg"], pred


def train_phase_a(modality: str, train_manifest, val_manifest,
                  tower_cfg: TowerConfig, train_cfg: TrainConfig,
                  lex: VadLexicon | None = None, out_dir=".") -> TrainResult:
    if modality not in ("speech", "text"):
        raise ValueError(f"modality must be speech or text, got {modality!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    setup_run(train_cfg)
    lex = lex or load_toy_lexicon()

    tower = SpeechTower(tower_cfg) if modality == "speech" else TextTower(tower_cfg)
    train_set = PairDataset(train_manifest, tower_cfg, lex,
                            need_speech=modality == "speech",
                            need_text=modality == "text")
    val_set = PairDataset(val_manifest, tower_cfg, lex,
                          need_speech=modality == "speech",
                          need_text=modality == "text")
    if not any(r.vad is not None for r in train_set.records):
        raise ValueError("phase A requires VAD labels on the training manifest")

    backbone, heads, table = phase_a_param_groups(tower)
    optimizer = torch.optim.AdamW(
        [{"params": backbone, "lr": train_cfg.lr_backbone},
         {"params": heads, "lr": train_cfg.lr_heads}],
        betas=(0.9, 0.999), eps=1e-8, weight_decay=train_cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_set) / train_cfg.batch_size)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lr_lambda(train_cfg.max_epochs * steps_per_epoch,
                             train_cfg.warmup_fraction, train_cfg.schedule))

    log = RunLog(config_echo={**config_to_kv(train_cfg), **config_to_kv(tower_cfg),
                              "modality": modality},
                 param_groups=table)
    stopper = EarlyStopper(train_cfg.patience)
    best_state = None
    stopped_early = False
    for epoch in range(1, train_cfg.max_epochs + 1):
        tower.train()
        losses = []
        for idxs in train_set.batches(train_cfg.seed, epoch, train_cfg.batch_size):
            target, labeled = train_set.labels(idxs)
            if not labeled.all():
                raise ValueError("phase A batch contains unlabeled records")
            _, mu, log_var, _ = _tower_forward(tower, train_set, idxs, modality)
            loss = gaussian_nll(mu, log_var, target)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite training loss at epoch {epoch}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(tower.parameters(), train_cfg.grad_clip)
            optimizer.step()
            scheduler.step()
            losses.append(float(loss.detach()))
        val_metric, _ = _validate_tower(tower, val_set, modality, train_cfg.batch_size)
        log.epochs.append(EpochRecord(epoch, {"nll": float(np.mean(losses))},
                                      val_metric, optimizer.param_groups[1]["lr"]))
        improved, stop = stopper.update(epoch, val_metric)
        if improved:
            best_state = copy.deepcopy(tower.state_dict())
        elif stop:
            stopped_early = True
            break

    tower.load_state_dict(best_state)
    log.best_epoch = stopper.best_epoch
    log.stopped_early = stopped_early
    log.extras = {"best_val_ccc": stopper.best_metric}
    ckpt = out_dir / f"{modality}_tower.ckpt"
    save_module(ckpt, tower, tower_cfg, kind=f"{modality}_tower")
    runlog_path = out_dir / f"{modality}_tower_runlog.jsonl"
    log.save(runlog_path)
    return TrainResult(ckpt, log, runlog_path, stopper.best_metric)


# ---------------------------------------------------------------------------
# phase B shared plumbing

def load_tower(path, modality: str):
    tensors, config_kv, kind, _ = load_checkpoint(path)
    cfg = config_from_kv(TowerConfig, config_kv)
    tower = SpeechTower(cfg) if modality == "speech" else TextTower(cfg)
    load_into_module(path, tower, expected_kind=f"{modality}_tower")
    return tower, cfg


def freeze(module: torch.nn.Module) -> str:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return params_checksum(module)


@dataclass
class FrozenPairFeatures:
    """Cached frozen-tower outputs for every record of a manifest."""

    seq_s: list[torch.Tensor]
    seq_t: list[torch.Tensor]
    mu_s: torch.Tensor
    lv_s: torch.Tensor
    mu_t: torch.Tensor
    lv_t: torch.Tensor

    def pair_batch(self, idxs):
        d = self.seq_s[0].shape[-1]
        dt = self.seq_t[0].shape[-1]
        ts = max(self.seq_s[i].shape[0] for i in idxs)
        tt = max(self.seq_t[i].shape[0] for i in idxs)
        s = torch.zeros(len(idxs), ts, d)
        t = torch.zeros(len(idxs), tt, dt)
        mask_s = torch.zeros(len(idxs), ts, dtype=torch.bool)
        mask_t = torch.zeros(len(idxs), tt, dtype=torch.bool)
        for row, i in enumerate(idxs):
            ls, lt = self.seq_s[i].shape[0], self.seq_t[i].shape[0]
            s[row, :ls] = self.seq_s[i]
            t[row, :lt] = self.seq_t[i]
            mask_s[row, :ls] = True
            mask_t[row, :lt] = True
        return s, mask_s, t, mask_t


def extract_frozen_features(dataset: PairDataset, speech_tower, text_tower,
                            batch_size: int = 64) -> FrozenPairFeatures:
    seq_s, seq_t, mu_s, lv_s, mu_t, lv_t = [], [], [], [], [], []
    with torch.no_grad():
        for idxs in dataset.eval_batches(batch_size):
            sb = dataset.speech_batch(idxs)
            if "precomputed" in sb:
                _, mu, lv, seq = speech_tower(None, sb["prosody"], sb["mask"],
                                              precomputed=sb["precomputed"])
            else:
                _, mu, lv, seq = speech_tower(sb["mel"], sb["prosody"], sb["mask"])
            for row, i in enumerate(idxs):
                t_len = int(sb["mask"][row].sum())
                seq_s.append(seq[row, :t_len].clone())
            mu_s.append(mu)
            lv_s.append(lv)
            tb = dataset.text_batch(idxs)
            _, mu, lv, seq = text_tower(tb["ids"], tb["priors"], tb["mask"])
            for row, i in enumerate(idxs):
                t_len = int(tb["mask"][row].sum())
                seq_t.append(seq[row, :t_len].clone())
            mu_t.append(mu)
            lv_t.append(lv)
    return FrozenPairFeatures(seq_s, seq_t,
                              torch.cat(mu_s), torch.cat(lv_s),
                              torch.cat(mu_t), torch.cat(lv_t))


# ---------------------------------------------------------------------------
# phase B: classifier

def train_phase_b_classifier(pairs_train, pairs_val, speech_ckpt, text_ckpt,
                             train_cfg: TrainConfig, fusion_cfg: FusionConfig | None = None,
                             lex: VadLexicon | None = None, out_dir=".") -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    setup_run(train_cfg)
    lex = lex or load_toy_lexicon()

    speech_tower, s_cfg = load_tower(speech_ckpt, "speech")
    text_tower, t_cfg = load_tower(text_ckpt, "text")
    sum_before = freeze(speech_tower) + freeze(text_tower)

    if fusion_cfg is None:
        fusion_cfg = FusionConfig(d_in_speech=s_cfg.d_model, d_in_text=t_cfg.d_model,
                                  d_proj=min(256, s_cfg.d_model))
    classifier = InconsistencyClassifier(fusion_cfg)

    train_set = PairDataset(pairs_train, s_cfg, lex)
    val_set = PairDataset(pairs_val, s_cfg, lex)
    y_train = train_set.consistency(range(len(train_set)))
    if len(torch.unique(y_train)) < 2:
        raise ValueError("classifier training data contains a single class")

    feats_train = extract_frozen_features(train_set, speech_tower, text_tower)
    feats_val = extract_frozen_features(val_set, speech_tower, text_tower)
    y_val_inc = 1.0 - val_set.consistency(range(len(val_set))).numpy()

    optimizer = torch.optim.AdamW(classifier.parameters(), lr=train_cfg.lr_classifier,
                                  betas=(0.9, 0.999), eps=1e-8,
                                  weight_decay=train_cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_set) / train_cfg.batch_size)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lr_lambda(train_cfg.max_epochs * steps_per_epoch,
                             train_cfg.warmup_fraction, train_cfg.schedule))

    def val_scores() -> np.ndarray:
        classifier.eval()
        scores = []
        with torch.no_grad():
            for idxs in val_set.eval_batches(train_cfg.batch_size):
                s, ms, t, mt = feats_val.pair_batch(idxs)
                p, _ = classifier(s, ms, t, mt)
                scores.append(p.numpy())
        classifier.train()
        return np.concatenate(scores)

    log = RunLog(config_echo={**config_to_kv(train_cfg), **config_to_kv(fusion_cfg),
                              "phase": "classifier"},
                 param_groups={n: "classifier" for n, _ in classifier.named_parameters()})
    stopper = EarlyStopper(train_cfg.patience)
    best_state = None
    stopped_early = False
    for epoch in range(1, train_cfg.max_epochs + 1):
        classifier.train()
        losses, bces, margins = [], [], []
        for idxs in train_set.batches(train_cfg.seed, epoch, train_cfg.batch_size):
            y = train_set.consistency(idxs)
            s, ms, t, mt = feats_train.pair_batch(idxs)
            p_inc, pair = classifier(s, ms, t, mt)
            lv = classifier_loss(p_inc, y, pair.pooled_s, pair.pooled_t,
                                 m=train_cfg.margin, lambda_margin=train_cfg.lambda_margin)
            if not torch.isfinite(lv.total):
                raise RuntimeError(f"non-finite classifier loss at epoch {epoch}")
            optimizer.zero_grad(set_to_none=True)
            lv.total.backward()
            torch.nn.utils.clip_grad_norm_(classifier.parameters(), train_cfg.grad_clip)
            optimizer.step()
            scheduler.step()
            scalars = lv.scalars()
            losses.append(scalars["total"])
            bces.append(scalars["bce"])
            margins.append(scalars["margin"])
        scores = val_scores()
        tau = youden_threshold(scores, y_val_inc)
        f1 = binary_metrics(scores, y_val_inc, tau)["f1"]
        log.epochs.append(EpochRecord(
            epoch,
            {"total": float(np.mean(losses)), "bce": float(np.mean(bces)),
             "margin": float(np.mean(margins))},
            f1, optimizer.param_groups[0]["lr"]))
        improved, stop = stopper.update(epoch, f1)
        if improved:
            best_state = copy.deepcopy(classifier.state_dict())
        elif stop:
            stopped_early = True
            break

    classifier.load_state_dict(best_state)
    scores = val_scores()
    tau_star = youden_threshold(scores, y_val_inc)

    sum_after = params_checksum(speech_tower) + params_checksum(text_tower)
    if sum_after != sum_before:
        raise RuntimeError("frozen tower parameters changed during classifier training")

    log.best_epoch = stopper.best_epoch
    log.stopped_early = stopped_early
    log.extras = {"best_val_f1": stopper.best_metric, "tau_star": tau_star,
                  "tower_checksum": sum_after}
    ckpt = out_dir / "classifier.ckpt"
    save_module(ckpt, classifier, fusion_cfg, kind="classifier")
    runlog_path = out_dir / "classifier_runlog.jsonl"
    log.save(runlog_path)
    return TrainResult(ckpt, log, runlog_path, stopper.best_metric, tau_star=tau_star)


# ---------------------------------------------------------------------------
# phase B: fusion

def train_phase_b_fusion(fusion_train, fusion_val, speech_ckpt, text_ckpt,
                         train_cfg: TrainConfig, fusion_cfg: FusionConfig | None = None,
                         lex: VadLexicon | None = None, out_dir=".") -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    setup_run(train_cfg)
    lex = lex or load_toy_lexicon()

    speech_tower, s_cfg = load_tower(speech_ckpt, "speech")
    text_tower, t_cfg = load_tower(text_ckpt, "text")
    sum_before = freeze(speech_tower) + freeze(text_tower)

    if fusion_cfg is None:
        fusion_cfg = FusionConfig(d_in_speech=s_cfg.d_model, d_in_text=t_cfg.d_model,
                                  d_proj=min(256, s_cfg.d_model))
    tower = FusionTower(fusion_cfg)

    train_set = PairDataset(fusion_train, s_cfg, lex)
    val_set = PairDataset(fusion_val, s_cfg, lex)
    for r in train_set.records + val_set.records:
        if r.consistency == 0:
            raise ValueError(f"fusion training admits only consistent pairs; "
                             f"record {r.id} has y=0")
    n_labeled = sum(r.vad is not None for r in train_set.records)
    if n_labeled == 0 and train_cfg.lambda_agree == 0.0:
        raise ValueError("no labeled records and lambda_agree == 0: nothing to learn")

    feats_train = extract_frozen_features(train_set, speech_tower, text_tower)
    feats_val = extract_frozen_features(val_set, speech_tower, text_tower)

    optimizer = torch.optim.AdamW(tower.parameters(), lr=train_cfg.lr_heads,
                                  betas=(0.9, 0.999), eps=1e-8,
                                  weight_decay=train_cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_set) / train_cfg.batch_size)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lr_lambda(train_cfg.max_epochs * steps_per_epoch,
                             train_cfg.warmup_fraction, train_cfg.schedule))

    def validate() -> float:
        tower.eval()
        preds, golds = [], []
        with torch.no_grad():
            for idxs in val_set.eval_batches(train_cfg.batch_size):
                s, ms, t, mt = feats_val.pair_batch(idxs)
                mu, _, _ = tower(s, ms, t, mt)
                target, labeled = val_set.labels(idxs)
                preds.append(mu[labeled].numpy())
                golds.append(target[labeled].numpy())
        tower.train()
        return regression_report(np.concatenate(preds), np.concatenate(golds)).ccc["avg"]

    log = RunLog(config_echo={**config_to_kv(train_cfg), **config_to_kv(fusion_cfg),
                              "phase": "fusion"},
                 param_groups={n: "fusion" for n, _ in tower.named_parameters()})
    stopper = EarlyStopper(train_cfg.patience)
    best_state = None
    stopped_early = False
    for epoch in range(1, train_cfg.max_epochs + 1):
        tower.train()
        totals, nlls, agrees = [], [], []
        for idxs in train_set.batches(train_cfg.seed, epoch, train_cfg.batch_size):
            s, ms, t, mt = feats_train.pair_batch(idxs)
            target, labeled = train_set.labels(idxs)
            mu_f, lv_f, _ = tower(s, ms, t, mt)
            lv = fusion_loss(mu_f, lv_f, target, labeled,
                             feats_train.mu_s[idxs], feats_train.lv_s[idxs],
                             feats_train.mu_t[idxs], feats_train.lv_t[idxs],
                             lambda_agree=train_cfg.lambda_agree)
            if not torch.isfinite(lv.total):
                raise RuntimeError(f"non-finite fusion loss at epoch {epoch}")
            optimizer.zero_grad(set_to_none=True)
            lv.total.backward()
            torch.nn.utils.clip_grad_norm_(tower.parameters(), train_cfg.grad_clip)
            optimizer.step()
            scheduler.step()
            scalars = lv.scalars()
            totals.append(scalars["total"])
            nlls.append(scalars["nll"])
            agrees.append(scalars["agree"])
        val_metric = validate()
        log.epochs.append(EpochRecord(
            epoch,
            {"total": float(np.mean(totals)), "nll": float(np.mean(nlls)),
             "agree": float(np.mean(agrees))},
            val_metric, optimizer.param_groups[0]["lr"]))
        improved, stop = stopper.update(epoch, val_metric)
        if improved:
            best_state = copy.deepcopy(tower.state_dict())
        elif stop:
            stopped_early = True
            break

    tower.load_state_dict(best_state)
    sum_after = params_checksum(speech_tower) + params_checksum(text_tower)
    if sum_after != sum_before:
        raise RuntimeError("frozen tower parameters changed during fusion training")

    log.best_epoch = stopper.best_epoch
    log.stopped_early = stopped_early
    log.extras = {"best_val_ccc": stopper.best_metric, "tower_checksum": sum_after}
    ckpt = out_dir / "fusion.ckpt"
    save_module(ckpt, tower, fusion_cfg, kind="fusion")
    runlog_path = out_dir / "fusion_runlog.jsonl"
    log.save(runlog_path)
    return TrainResult(ckpt, log, runlog_path, stopper.best_metric)


# ---------------------------------------------------------------------------
# inference

@dataclass
class PredictionResult:
    id: str
    p_inc: float
    decision: str
    speech: GaussianVad
    text: GaussianVad
    fused: GaussianVad | None = None
    gates: tuple[float, float] | None = None
    native: dict | None = None

    def as_dict(self) -> dict:
        out = {
            "id": self.id,
            "p_inc": self.p_inc,
            "decision": self.decision,
            "speech": {"mu": self.speech.mu.tolist(),
                       "log_var": self.speech.log_var.tolist()},
            "text": {"mu": self.text.mu.tolist(),
                     "log_var": self.text.log_var.tolist()},
        }
        if self.fused is not None:
            out["fused"] = {"mu": self.fused.mu.tolist(),
                            "log_var": self.fused.log_var.tolist()}
            out["gates"] = list(self.gates)
        if self.native is not None:
            out["native"] = self.native
        return out


class Predictor:
    """Loads all checkpoints once and scores pairs end to end."""

    def __init__(self, speech_ckpt, text_ckpt, classifier_ckpt, fusion_ckpt,
                 tau: float, lex: VadLexicon | None = None):
        self.speech_tower, self.s_cfg = load_tower(speech_ckpt, "speech")
        self.text_tower, self.t_cfg = load_tower(text_ckpt, "text")
        freeze(self.speech_tower)
        freeze(self.text_tower)

        _, kv, _, _ = load_checkpoint(classifier_ckpt)
        fusion_cfg = config_from_kv(FusionConfig, kv)
        self.classifier = InconsistencyClassifier(fusion_cfg)
        load_into_module(classifier_ckpt, self.classifier, expected_kind="classifier")
        freeze(self.classifier)

        _, kv, _, _ = load_checkpoint(fusion_ckpt)
        self.fusion = FusionTower(config_from_kv(FusionConfig, kv))
        load_into_module(fusion_ckpt, self.fusion, expected_kind="fusion")
        freeze(self.fusion)

        self.tau = tau
        self.lex = lex or load_toy_lexicon()

    def predict_record(self, record: PairRecord, root: Path | None = None,
                       alignment: tuple[dict, dict] | None = None
                       ) -> PredictionResult:
        root = Path(root) if root is not None else Path(".")
        with torch.no_grad():
            if "::" in record.speech_ref:
                feat_dir, _, utt = record.speech_ref.partition("::")
                seq = load_precomputed_features(root / feat_dir, utt,
                                                expected_width=self.s_cfg.d_model)
                pros = torch.zeros(1, seq.frames.shape[0], 2)
                mask = torch.ones(1, seq.frames.shape[0], dtype=torch.bool)
                _, mu_s, lv_s, seq_s = self.speech_tower(
                    None, pros, mask, precomputed=seq.frames[None])
            else:
                w = load_wav(root / record.speech_ref)
                mel, pros = speech_inputs(w, self.s_cfg)
                mask = torch.ones(1, mel.shape[0], dtype=torch.bool)
                _, mu_s, lv_s, seq_s = self.speech_tower(mel[None], pros[None], mask)
            mask_s = torch.ones(1, seq_s.shape[1], dtype=torch.bool)

            ids, priors = text_inputs(record.tokens, self.t_cfg, self.lex)
            mask_t = torch.ones(1, ids.shape[0], dtype=torch.bool)
            _, mu_t, lv_t, seq_t = self.text_tower(ids[None], priors[None], mask_t)

            p_inc, _ = self.classifier(seq_s, mask_s, seq_t, mask_t)
            p_inc = float(p_inc[0])
            decision = decide(p_inc, self.tau)

            fused = gates = None
            if decision == "consistent":
                mu_f, lv_f, (g_s, g_t) = self.fusion(seq_s, mask_s, seq_t, mask_t)
                fused = GaussianVad.from_tensors(mu_f[0], lv_f[0])
                gates = (float(g_s[0]), float(g_t[0]))

        result = PredictionResult(
            id=record.id, p_inc=p_inc, decision=decision,
            speech=GaussianVad.from_tensors(mu_s[0], lv_s[0]),
            text=GaussianVad.from_tensors(mu_t[0], lv_t[0]),
            fused=fused, gates=gates,
        )
        if alignment is not None:
            src_params, tgt_params = alignment
            result.native = {
                name: _to_native(gv, src_params, tgt_params)
                for name, gv in (("speech", result.speech), ("text", result.text),
                                 ("fused", result.fused))
                if gv is not None
            }
        return result


def _to_native(gv: GaussianVad, src_params: dict[str, BetaParams],
               tgt_params: dict[str, BetaParams]) -> list[float]:
    dims = ("v", "a", "d")
    out = []
    for k, dim in enumerate(dims):
        clipped = float(np.clip(gv.mu[k], tgt_params[dim].lo, tgt_params[dim].hi))
        out.append(invert_label(clipped, src_params[dim], tgt_params[dim]))
    return out


# ---------------------------------------------------------------------------
# evaluation entry points

def evaluate_tower(ckpt, manifest, modality: str, lex: VadLexicon | None = None,
                   batch_size: int = 64) -> EvalReport:
    tower, cfg = load_tower(ckpt, modality)
    freeze(tower)
    dataset = PairDataset(manifest, cfg, lex or load_toy_lexicon(),
                          need_speech=modality == "speech",
                          need_text=modality == "text")
    preds, golds = [], []
    with torch.no_grad():
        for idxs in dataset.eval_batches(batch_size):
            _, mu, _, _ = _tower_forward(tower, dataset, idxs, modality)
            target, labeled = dataset.labels(idxs)
            preds.append(mu[labeled].numpy())
            golds.append(target[labeled].numpy())
    return regression_report(np.concatenate(preds), np.concatenate(golds))


def evaluate_classifier(speech_ckpt, text_ckpt, classifier_ckpt, manifest,
                        tau: float, lex: VadLexicon | None = None,
                        batch_size: int = 64) -> tuple[EvalReport, dict]:
    speech_tower, s_cfg = load_tower(speech_ckpt, "speech")
    text_tower, _ = load_tower(text_ckpt, "text")
    freeze(speech_tower)
    freeze(text_tower)
    _, kv, _, _ = load_checkpoint(classifier_ckpt)
    classifier = InconsistencyClassifier(config_from_kv(FusionConfig, kv))
    load_into_module(classifier_ckpt, classifier, expected_kind="classifier")
    freeze(classifier)

    dataset = PairDataset(manifest, s_cfg, lex or load_toy_lexicon())
    feats = extract_frozen_features(dataset, speech_tower, text_tower, batch_size)
    scores = []
    with torch.no_grad():
        for idxs in dataset.eval_batches(batch_size):
            s, ms, t, mt = feats.pair_batch(idxs)
            p, _ = classifier(s, ms, t, mt)
            scores.append(p.numpy())
    scores = np.concatenate(scores)
    y_inc = 1.0 - dataset.consistency(range(len(dataset))).numpy()
    report = EvalReport(binary=binary_metrics(scores, y_inc, tau), tau_star=tau)
    dump = {"ids": [r.id for r in dataset.records],
            "scores": scores.tolist(), "labels_inconsistent": y_inc.tolist()}
    return report, dump


def evaluate_fusion(speech_ckpt, text_ckpt, fusion_ckpt, manifest,
                    lex: VadLexicon | None = None, batch_size: int = 64
                    ) -> tuple[EvalReport, dict]:
    speech_tower, s_cfg = load_tower(speech_ckpt, "speech")
    text_tower, _ = load_tower(text_ckpt, "text")
    freeze(speech_tower)
    freeze(text_tower)
    _, kv, _, _ = load_checkpoint(fusion_ckpt)
    tower = FusionTower(config_from_kv(FusionConfig, kv))
    load_into_module(fusion_ckpt, tower, expected_kind="fusion")
    freeze(tower)

    dataset = PairDataset(manifest, s_cfg, lex or load_toy_lexicon())
    feats = extract_frozen_features(dataset, speech_tower, text_tower, batch_size)
    preds, golds, gate_rows = [], [], []
    with torch.no_grad():
        for idxs in dataset.eval_batches(batch_size):
            s, ms, t, mt = feats.pair_batch(idxs)
            mu, _, (g_s, g_t) = tower(s, ms, t, mt)
            target, labeled = dataset.labels(idxs)
            preds.append(mu[labeled].numpy())
            golds.append(target[labeled].numpy())
            gate_rows.extend(zip(g_s.tolist(), g_t.tolist()))
    report = regression_report(np.concatenate(preds), np.concatenate(golds))
    dump = {"ids": [r.id for r in dataset.records],
            "gates": [list(g) for g in gate_rows]}
    return report, dump
