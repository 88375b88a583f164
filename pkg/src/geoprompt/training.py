"""Two-stage schedule: prompt learning against frozen towers, then group-cycled image training."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import (CheckpointError, load_checkpoint, load_module, module_hash,
                         module_tensors, save_checkpoint, tensor_hash)
from .encoders import (ImageEncoderConfig, PromptBank, TextEncoder, TextEncoderConfig,
                       build_image_encoder, check_tower_dims, encode_images,
                       encode_prompted_text, freeze_all, freeze_layers,
                       trainable_parameter_count)
from .geodata import (GeoClass, GeoRecord, GroupKey, PartitionConfig, assign_class,
                      build_groups, load_images, load_manifest, split_validation)
from .losses import (LossConfig, image_to_text_loss, lmcl_loss, mine_triplets,
                     smoothed_cross_entropy, stage2_loss, text_to_image_loss, triplet_loss)
from .retrieval import EmbeddingDump, embed, knn_search, recall_at_n

logger = logging.getLogger(__name__)


class InvariantError(RuntimeError):
    """A frozen component changed during training."""


@dataclass
class Stage1Config:
    epochs: int = 480
    batch_size: int = 512
    lr: float = 0.01
    images_per_class: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.images_per_class < 0:
            raise ValueError(f"invalid stage-1 config {self}")


@dataclass
class Stage2Config:
    epochs: int = 64
    batch_size: int = 32
    encoder_lr: float = 1e-4
    head_lr: float = 0.01
    iterations_per_group: int = 10000
    groups_in_cycle: int = 8
    frozen_layer_count: int = 0
    images_per_class: int = 4
    use_prompts: bool = True
    augment: bool = True
    lr_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self) -> None:
        if (self.epochs < 0 or self.batch_size < 1 or self.encoder_lr <= 0 or self.head_lr <= 0
                or self.iterations_per_group < 1 or self.groups_in_cycle < 1
                or self.images_per_class < 1 or self.frozen_layer_count < 0
                or self.lr_schedule not in ("constant", "cosine")):
            raise ValueError(f"invalid stage-2 config {self}")

    def lr_factor(self, step: int) -> float:
        """Multiplier on both learning rates at global step ``step``."""
        if self.lr_schedule == "constant":
            return 1.0
        total = max(1, self.epochs * self.iterations_per_group)
        return 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


# --------------------------------------------------------------------------- data


@dataclass
class TrainingData:
    classes: List[GeoClass]
    train: List[GeoRecord]
    train_labels: np.ndarray
    train_images: torch.Tensor
    database: List[GeoRecord]
    database_images: np.ndarray
    val: List[GeoRecord]
    val_images: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def prepare_data(manifest: str | os.PathLike, part: PartitionConfig, val_fraction: float = 0.1,
                 seed: int = 0) -> TrainingData:
    records = load_manifest(manifest, part)
    train = [r for r in records if r.split == "train"]
    if not train:
        raise ValueError(f"{manifest}: no train records")
    classes = sorted({assign_class(r, part) for r in train})
    index = {c: i for i, c in enumerate(classes)}
    labels = np.array([index[assign_class(r, part)] for r in train], dtype=np.int64)
    database = [r for r in records if r.split == "database"]
    val, _ = split_validation([r for r in records if r.split == "query"], val_fraction, seed)
    return TrainingData(classes, train, labels, torch.from_numpy(load_images(train)),
                        database, load_images(database), val, load_images(val))


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def pk_batch(labels: np.ndarray, pool: Sequence[int], batch_size: int, per_class: int,
             rng: np.random.Generator) -> np.ndarray:
    """Sample ``batch_size // per_class`` classes from ``pool`` with ``per_class`` images each.

    With fewer classes than requested the per-class count grows to fill the batch;
    the remainder goes one extra image each to the first chosen classes.
    """
    pool = np.asarray(sorted(pool))
    p = max(1, min(len(pool), batch_size // per_class))
    chosen = rng.choice(pool, size=p, replace=False)
    idx = []
    for i, c in enumerate(chosen):
        k = max(per_class, batch_size // p + (i < batch_size % p))
        members = np.flatnonzero(labels == c)
        idx.append(rng.choice(members, size=k, replace=len(members) < k))
    return np.concatenate(idx)


_YIQ = torch.tensor([[0.299, 0.587, 0.114],
                     [0.596, -0.274, -0.322],
                     [0.211, -0.523, 0.312]])


def augment_batch(images: torch.Tensor, rng: np.random.Generator, brightness: float = 0.3,
                  hue_degrees: float = 60.0, max_shift: int = 2) -> torch.Tensor:
    """Per-sample brightness scaling, chroma rotation and a small translation."""
    b = len(images)
    scale = torch.from_numpy(rng.uniform(1 - brightness, 1 + brightness, b)).float()
    theta = torch.from_numpy(np.radians(rng.uniform(-hue_degrees, hue_degrees, b))).float()
    rot = torch.zeros(b, 3, 3)
    rot[:, 0, 0] = 1.0
    rot[:, 1, 1], rot[:, 1, 2] = torch.cos(theta), -torch.sin(theta)
    rot[:, 2, 1], rot[:, 2, 2] = torch.sin(theta), torch.cos(theta)
    mix = torch.linalg.inv(_YIQ) @ rot @ _YIQ
    out = torch.einsum("bij,bjhw->bihw", mix, images) * scale.view(b, 1, 1, 1)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(b, 2))
    out = torch.stack([torch.roll(x, (int(dy), int(dx)), dims=(1, 2))
                       for x, (dy, dx) in zip(out, shifts)])
    return out.clamp(0.0, 1.0)


class TrainLog:
    """Line-oriented CSV training log; ``rows`` keeps an in-memory copy."""

    def __init__(self, path: Optional[str | os.PathLike], components: Sequence[str]):
        self.header = ["stage", "epoch", "group", "step", "loss_total",
                       *[f"loss_{c}" for c in components], "lr"]
        self.rows: List[List[Any]] = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", encoding="utf-8", newline="")
            self._writer = csv.writer(self._fh, lineterminator="\n")
            self._writer.writerow(self.header)

    def write(self, *row: Any) -> None:
        row = [f"{v:.8g}" if isinstance(v, float) else v for v in row]
        self.rows.append(row)
        if self._fh:
            self._writer.writerow(row)

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


# --------------------------------------------------------------------------- stage 1


@dataclass
class Towers:
    image: nn.Module
    text: TextEncoder
    bank: PromptBank


def init_towers(img_cfg: ImageEncoderConfig, txt_cfg: TextEncoderConfig, num_classes: int,
                seed: int) -> Towers:
    check_tower_dims(img_cfg, txt_cfg)
    torch.manual_seed(seed)
    image = build_image_encoder(img_cfg)
    text = TextEncoder(txt_cfg)
    bank = PromptBank(num_classes, txt_cfg.width)
    return Towers(image, text, bank)


@dataclass
class Stage1Result:
    bank: PromptBank
    image_features: torch.Tensor
    epoch_losses: List[float] = field(default_factory=list)
    log: Optional[TrainLog] = None


def run_stage1(data: TrainingData, towers: Towers, cfg: Stage1Config,
               loss_cfg: LossConfig = LossConfig(),
               log_path: Optional[str | os.PathLike] = None) -> Stage1Result:
    """Optimise only the prompt context against frozen image and text towers."""
    freeze_all(towers.image)
    freeze_all(towers.text)
    towers.text.eval()
    hashes = (module_hash(towers.image), module_hash(towers.text))

    # the train split goes through the frozen image tower exactly once
    feats = encode_images(towers.image, data.train_images)
    labels = torch.from_numpy(data.train_labels)
    log = TrainLog(log_path, ["it", "ti"])
    result = Stage1Result(towers.bank, feats, log=log)
    if cfg.epochs == 0:
        log.close()
        return result

    opt = torch.optim.Adam(towers.bank.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        if cfg.images_per_class:
            n_batches = max(1, len(labels) // cfg.batch_size)
            batches = [pk_batch(data.train_labels, range(data.num_classes), cfg.batch_size,
                                cfg.images_per_class, rng) for _ in range(n_batches)]
        else:
            batches = shuffled_batches(len(labels), cfg.batch_size, rng)
        total = 0.0
        lr = opt.param_groups[0]["lr"]
        for b in batches:
            b = torch.from_numpy(b)
            text = encode_prompted_text(towers.text, labels[b], towers.bank)
            l_it = image_to_text_loss(feats[b], text, loss_cfg.tau, loss_cfg.normalize)
            l_ti = text_to_image_loss(feats[b], text, labels[b], loss_cfg.tau, loss_cfg.normalize)
            loss = l_it + l_ti
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.write("stage1", epoch, -1, step, loss.item(), l_it.item(), l_ti.item(), lr)
            total += loss.item() * len(b)
            step += 1
        sched.step()
        result.epoch_losses.append(total / sum(len(b) for b in batches))
        logger.debug("stage1 epoch %d loss %.4f", epoch, result.epoch_losses[-1])
    log.close()

    if (module_hash(towers.image), module_hash(towers.text)) != hashes:
        raise InvariantError("stage 1 modified a frozen encoder tower")
    return result


@dataclass
class TextFeatureCache:
    rows: torch.Tensor
    provenance: str = ""

    def __post_init__(self) -> None:
        self.rows = self.rows.detach().clone()
        self.rows.requires_grad_(False)

    @property
    def hash(self) -> str:
        return tensor_hash({"rows": self.rows})


def build_text_cache(bank: PromptBank, text_encoder: TextEncoder, num_classes: int,
                     provenance: str = "") -> TextFeatureCache:
    if bank.num_classes != num_classes:
        raise ValueError(f"prompt bank holds {bank.num_classes} classes, expected {num_classes}")
    text_encoder.eval()
    with torch.no_grad():
        rows = encode_prompted_text(text_encoder, torch.arange(num_classes), bank)
    return TextFeatureCache(rows, provenance)


# --------------------------------------------------------------------------- stage 2


def validation_recall(encoder: nn.Module, data: TrainingData, loss_cfg: LossConfig,
                      thresholds_n: Sequence[int] = (1, 5), radius: float = 25.0):
    q = EmbeddingDump([r.image_id for r in data.val], embed(encoder, data.val_images,
                                                             loss_cfg.normalize))
    db = EmbeddingDump([r.image_id for r in data.database],
                       embed(encoder, data.database_images, loss_cfg.normalize))
    ranked = knn_search(q, db, min(max(thresholds_n), db.count))
    return recall_at_n(ranked, data.val, data.database, thresholds_n, radius)


def group_cycle(partition, n: int) -> List[GroupKey]:
    """First ``n`` trainable groups (>= 2 classes), largest first."""
    keys = []
    for k in partition.ordered_keys():
        if len(partition.groups[k]) < 2:
            logger.warning("skipping group %s with %d class(es)", k, len(partition.groups[k]))
            continue
        keys.append(k)
    if n > len(keys):
        raise ValueError(f"groups_in_cycle={n} exceeds the {len(keys)} trainable groups")
    return keys[:n]


def visit_sequence(epochs: int, groups_in_cycle: int, start_epoch: int = 0) -> List[int]:
    return [e % groups_in_cycle for e in range(start_epoch, epochs)]


def new_heads(partition, cycle: Sequence[GroupKey], dim: int, seed: int) -> Dict[GroupKey, nn.Parameter]:
    heads = {}
    gen = torch.Generator().manual_seed(seed + 7919)
    for k in cycle:
        w = torch.empty(len(partition.groups[k]), dim)
        bound = (6.0 / (w.shape[0] + w.shape[1])) ** 0.5
        heads[k] = nn.Parameter(w.uniform_(-bound, bound, generator=gen))
    return heads


def head_name(k: GroupKey) -> str:
    return "head.{}_{}_{}".format(*k)


@dataclass
class Stage2Result:
    encoder: nn.Module
    heads: Dict[GroupKey, nn.Parameter]
    cycle: List[GroupKey]
    next_epoch: int
    val_r1: List[float] = field(default_factory=list)
    val_reports: list = field(default_factory=list)
    visits: List[int] = field(default_factory=list)
    steps_per_group: Dict[GroupKey, int] = field(default_factory=dict)
    trainable_params: int = 0
    log: Optional[TrainLog] = None


def run_stage2(data: TrainingData, encoder: nn.Module, cache: Optional[TextFeatureCache],
               part: PartitionConfig, cfg: Stage2Config, loss_cfg: LossConfig = LossConfig(),
               log_path: Optional[str | os.PathLike] = None,
               heads: Optional[Dict[GroupKey, nn.Parameter]] = None, start_epoch: int = 0,
               validate: bool = True,
               thresholds_n: Sequence[int] = (1, 5), radius: float = 25.0) -> Stage2Result:
    """Train the image tower one group per epoch, cycling through ``groups_in_cycle`` groups.

    ``cache`` is None for the prompt-free baseline, which drops the text term.
    ``val_r1[0]`` is the recall before training; entry e + 1 follows epoch e.
    """
    if cfg.use_prompts and cache is None:
        raise ValueError("use_prompts is set but no text feature cache was given")
    if cache is not None and cache.rows.shape[0] != data.num_classes:
        raise ValueError(f"text cache has {cache.rows.shape[0]} rows for {data.num_classes} classes")
    partition = build_groups(data.classes, part)
    cycle = group_cycle(partition, cfg.groups_in_cycle)
    class_idx = {c: i for i, c in enumerate(data.classes)}
    dim = encoder.cfg.output_dim
    heads = heads if heads is not None else new_heads(partition, cycle, dim, cfg.seed)
    freeze = freeze_layers(encoder, cfg.frozen_layer_count)
    cache_hash = cache.hash if cache is not None else None

    enc_params = [p for p in encoder.parameters() if p.requires_grad]
    enc_opt = torch.optim.Adam(enc_params, lr=cfg.encoder_lr) if enc_params else None
    head_opts = {k: torch.optim.Adam([heads[k]], lr=cfg.head_lr) for k in cycle}
    use_ce = cfg.use_prompts and cache is not None and loss_cfg.weight_ce != 0
    weights = (loss_cfg.weight_ce, loss_cfg.weight_cos, loss_cfg.weight_triplet)

    log = TrainLog(log_path, ["ce", "cos", "triplet"])
    result = Stage2Result(encoder, heads, cycle, start_epoch, log=log,
                          trainable_params=trainable_parameter_count(encoder))
    result.steps_per_group = {k: 0 for k in cycle}
    if validate:
        rep = validation_recall(encoder, data, loss_cfg, thresholds_n, radius)
        result.val_reports.append(rep)
        result.val_r1.append(rep.r_at_n[min(rep.r_at_n)])

    images = data.train_images
    step = start_epoch * cfg.iterations_per_group
    for epoch in range(start_epoch, cfg.epochs):
        gi = epoch % len(cycle)
        key = cycle[gi]
        members = [class_idx[c] for c in partition.groups[key]]
        local = {g: i for i, g in enumerate(members)}
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        encoder.train()
        for it in range(cfg.iterations_per_group):
            idx = pk_batch(data.train_labels, members, cfg.batch_size, cfg.images_per_class, rng)
            y_global = torch.from_numpy(data.train_labels[idx])
            y = torch.tensor([local[int(g)] for g in y_global])
            batch = images[torch.from_numpy(idx)]
            if cfg.augment:
                batch = augment_batch(batch, rng)
            feats = encoder(batch)
            zero = feats.sum() * 0.0
            # text term spans every class; the margin head only the current group
            l_ce = (smoothed_cross_entropy(feats, cache.rows, y_global, loss_cfg.epsilon,
                                           loss_cfg.tau, loss_cfg.normalize) if use_ce else zero)
            l_cos = lmcl_loss(feats, y, heads[key], loss_cfg.lmcl_scale, loss_cfg.lmcl_margin)
            emb = nn.functional.normalize(feats, dim=1) if loss_cfg.normalize else feats
            triples = mine_triplets(emb, y, loss_cfg.mining, loss_cfg.triplet_distance, rng)
            if triples:
                a, p, n = (torch.tensor(t) for t in zip(*triples))
                l_tri = triplet_loss(emb[a], emb[p], emb[n], loss_cfg.triplet_margin,
                                     loss_cfg.triplet_distance)
            else:
                l_tri = zero
            loss = stage2_loss(l_ce, l_cos, l_tri, weights)
            factor = cfg.lr_factor(step)
            if enc_opt:
                enc_opt.param_groups[0]["lr"] = cfg.encoder_lr * factor
            head_opts[key].param_groups[0]["lr"] = cfg.head_lr * factor
            if enc_opt:
                enc_opt.zero_grad()
            head_opts[key].zero_grad()
            loss.backward()
            if enc_opt:
                enc_opt.step()
            head_opts[key].step()
            log.write("stage2", epoch, gi, step, loss.item(), l_ce.item(), l_cos.item(),
                      l_tri.item(), cfg.encoder_lr * factor)
            step += 1
            result.steps_per_group[key] += 1
        result.visits.append(gi)
        result.next_epoch = epoch + 1
        if validate:
            rep = validation_recall(encoder, data, loss_cfg, thresholds_n, radius)
            result.val_reports.append(rep)
            result.val_r1.append(rep.r_at_n[min(rep.r_at_n)])
            logger.info("stage2 epoch %d group %s R@1 %.3f", epoch, key, result.val_r1[-1])
    log.close()
    encoder.eval()

    if cache is not None and cache.hash != cache_hash:
        raise InvariantError("stage 2 modified the frozen text feature cache")
    frozen = set(freeze.affected_parameter_names)
    assert all(not p.requires_grad for n, p in encoder.named_parameters() if n in frozen)
    return result


# --------------------------------------------------------------------------- checkpoints


def _classes_json(classes: Sequence[GeoClass]) -> List[List[int]]:
    return [[c.e, c.n, c.h] for c in classes]


def save_stage1(path, towers: Towers, classes: Sequence[GeoClass], config: Dict[str, Any],
                seed: int) -> str:
    tensors = {**module_tensors(towers.image, "image"), **module_tensors(towers.text, "text"),
               "prompt.context": towers.bank.context.detach()}
    return save_checkpoint(path, tensors, config, seed, "stage1",
                           {"classes": _classes_json(classes)})


def load_stage1(path, img_cfg: Optional[ImageEncoderConfig] = None,
                txt_cfg: Optional[TextEncoderConfig] = None) -> Tuple[Towers, List[GeoClass], Dict]:
    """Rebuild both towers and the prompt bank; explicit configs must match the file."""
    ckpt = load_checkpoint(path)
    if ckpt["kind"] != "stage1":
        raise CheckpointError(f"{path}: expected a stage1 checkpoint, found {ckpt['kind']}")
    saved_img = ImageEncoderConfig(**ckpt["config"]["image_encoder"])
    saved_txt = TextEncoderConfig(**ckpt["config"]["text_encoder"])
    for given, saved in ((img_cfg, saved_img), (txt_cfg, saved_txt)):
        if given is not None and given != saved:
            raise CheckpointError(f"{path}: architecture {saved} does not match {given}")
    classes = [GeoClass(*c) for c in ckpt["extra"]["classes"]]
    towers = init_towers(saved_img, saved_txt, len(classes), ckpt["seed"])
    load_module(towers.image, ckpt["tensors"], "image")
    load_module(towers.text, ckpt["tensors"], "text")
    ctx = ckpt["tensors"]["prompt.context"]
    if tuple(ctx.shape) != tuple(towers.bank.context.shape):
        raise CheckpointError(f"{path}: prompt shape {tuple(ctx.shape)} mismatch")
    with torch.no_grad():
        towers.bank.context.copy_(ctx)
    return towers, classes, ckpt


def save_stage2(path, result: Stage2Result, classes: Sequence[GeoClass], config: Dict[str, Any],
                seed: int, cache_hash: Optional[str] = None) -> str:
    tensors = module_tensors(result.encoder, "image")
    for k, w in result.heads.items():
        tensors[head_name(k)] = w.detach()
    extra = {"classes": _classes_json(classes), "cursor": {"next_epoch": result.next_epoch},
             "cycle": [list(k) for k in result.cycle], "val_r1": result.val_r1,
             "text_cache_hash": cache_hash, "trainable_params": result.trainable_params}
    return save_checkpoint(path, tensors, config, seed, "stage2", extra)


def load_stage2(path, img_cfg: Optional[ImageEncoderConfig] = None):
    """Returns (encoder, heads, next_epoch, checkpoint dict)."""
    ckpt = load_checkpoint(path)
    if ckpt["kind"] != "stage2":
        raise CheckpointError(f"{path}: expected a stage2 checkpoint, found {ckpt['kind']}")
    saved = ImageEncoderConfig(**ckpt["config"]["image_encoder"])
    if img_cfg is not None and img_cfg != saved:
        raise CheckpointError(f"{path}: architecture {saved} does not match {img_cfg}")
    torch.manual_seed(0)
    encoder = build_image_encoder(saved)
    load_module(encoder, ckpt["tensors"], "image")
    heads = {tuple(int(x) for x in name[5:].split("_")): nn.Parameter(t.clone())
             for name, t in ckpt["tensors"].items() if name.startswith("head.")}
    return encoder, heads, ckpt["extra"]["cursor"]["next_epoch"], ckpt


def config_echo(**sections) -> Dict[str, Any]:
    return {k: dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
            for k, v in sections.items()}
