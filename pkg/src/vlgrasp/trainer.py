"""Training, evaluation and prediction for the three task variants.

* ``res`` - referring segmentation, trained with the text-to-pixel contrastive loss.
* ``rgs`` - mask plus grasp quality / angle / width maps (contrastive + smooth-L1).
* ``rga`` - affordance stack trained from executed grasps with the motion loss.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .archive import load_arrays, save_arrays
from .backbone import Tokenizer, assert_frozen, snapshot
from .datasynth import (SceneSample, affordance_labels, grasp_outcome, gt_grasp_maps, object_masks, relabel)
from .errors import AuditError, ConfigError, DatasetError, DivergenceError, EvaluationError, InputError
from .grasp import (GraspMaps, GraspRectangle, PredictionRecord, extract_top_n, jacquard_at_n, rga_select)
from .losses import clamp_probability, site_labels, smooth_l1_maps, text_to_pixel_contrastive
from .metrics import MetricsReport, aggregate, grounding_accuracy, mask_counts, param_report
from .model import GroundingModel, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "vlgrasp-checkpoint"
OPTIMIZERS = ("adam", "adamw")
SCHEDULES = ("step", "poly", "constant")


@dataclass(frozen=True)
class TrainConfig:
    task: str = "res"
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: str = "adam"
    lr: float = 5e-5
    schedule: str = "step"
    decay_epoch: int = 35  # step schedule: lr is multiplied by decay_factor from this epoch on
    decay_factor: float = 0.1
    poly_power: float = 0.9
    epochs: int = 50
    batch_size: int = 16
    max_steps: Optional[int] = None  # stop after this many optimizer steps
    seed: int = 0
    weight_decay: float = 1e-2  # AdamW only
    grad_clip: float = 1.0
    loss_weights: dict = field(default_factory=lambda: {"mask": 1.0, "grasp": 1.0, "motion": 1.0})
    without_depth: bool = False  # ablation: rgs / rga without the depth branch
    audit_every: int = 0  # > 0: check the frozen backbone every N steps (debug)
    checkpoint_every: int = 0  # > 0: write a checkpoint every N epochs into the output dir
    text_length: int = 20
    # rga: simulated executed grasps per scene and the share aimed at the target
    rga_actions: int = 32
    rga_target_share: float = 0.5
    rga_relabel: bool = True
    # rga: every this many steps, execute each scene's current best grasp and
    # add the outcome to the action set (0 = offline actions only)
    rga_online_every: int = 0

    def __post_init__(self):
        if self.model.task != self.task:
            object.__setattr__(self, "model", replace(self.model, task=self.task))
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigError("epochs, batch_size and lr must be positive")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ConfigError("max_steps must be positive")
        if self.text_length != self.model.backbone.text_length:
            raise ConfigError("text_length differs from the backbone's text length")
        if self.task in ("rgs", "rga") and not self.model.use_depth and not self.without_depth:
            raise ConfigError(f"{self.task} needs a depth-enabled adapter unless without_depth is set")
        if self.rga_online_every < 0:
            raise ConfigError("rga_online_every must be >= 0")
        if self.without_depth and self.model.use_depth:
            raise ConfigError("without_depth contradicts adapter.use_depth")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["loss_weights"] = dict(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown training config keys: {sorted(extra)}")
        model = d.pop("model", {})
        task = d.get("task", model.get("task", "res"))
        model = ModelConfig.from_dict({**model, "task": task})
        weights = {"mask": 1.0, "grasp": 1.0, "motion": 1.0, **d.pop("loss_weights", {})}
        try:
            return cls(model=model, loss_weights=weights, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Closed-form per-epoch learning rate (epochs counted from 0)."""
    if config.schedule == "step":
        return config.lr * (config.decay_factor if epoch >= config.decay_epoch else 1.0)
    if config.schedule == "poly":
        return config.lr * (1.0 - min(epoch, config.epochs) / config.epochs) ** config.poly_power
    return config.lr


# --------------------------------------------------------------------------- data

@dataclass
class TaskData:
    """Tensors for a list of samples (one row per training item)."""

    image: torch.Tensor  # (M, 3, H, W)
    depth: torch.Tensor  # (M, H, W)
    tokens: torch.Tensor  # (M, L)
    valid: torch.Tensor  # (M, L)
    mask: torch.Tensor  # (M, H, W) bool
    grasp: Optional[dict] = None  # rgs targets
    actions: Optional[torch.Tensor] = None  # rga: (A, 5) rows of (item, x, y, k, success)
    items: Optional[list] = None  # rga: the scene behind each row

    def __len__(self):
        return self.image.shape[0]


def check_task_schema(samples: Sequence[SceneSample], task: str) -> None:
    if not samples:
        raise DatasetError("empty dataset")
    for s in samples:
        if task in ("rgs",) and not s.grasps:
            raise ConfigError(f"sample {s.sample_id!r} has no grasp rectangles; cannot train or evaluate {task}")
        if task == "rga" and (s.instances is None or not s.objects):
            raise ConfigError(f"sample {s.sample_id!r} has no instance labels; cannot train or evaluate rga")


def _encode_inputs(samples, tokenizer):
    image = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).float()
    depth = torch.from_numpy(np.stack([s.depth for s in samples])).float()
    toks = [tokenizer(s.expression) for s in samples]
    tokens = torch.from_numpy(np.stack([t[0] for t in toks]))
    valid = torch.from_numpy(np.stack([t[1] for t in toks]))
    mask = torch.from_numpy(np.stack([s.mask for s in samples]))
    return image, depth, tokens, valid, mask


def grasp_targets(samples, max_width: float) -> dict:
    q, s2, c2, wn, valid = [], [], [], [], []
    for s in samples:
        maps, v = gt_grasp_maps(s)
        q.append(maps.quality)
        s2.append(np.sin(2 * maps.angle))
        c2.append(np.cos(2 * maps.angle))
        wn.append(maps.width / max_width)
        valid.append(v)
    t = lambda a, dt=torch.float32: torch.from_numpy(np.stack(a)).to(dt)
    return {"quality": t(q), "sin2": t(s2), "cos2": t(c2), "width_norm": t(wn), "valid": t(valid, torch.bool)}


def simulate_actions(samples, config: TrainConfig, rng: np.random.Generator):
    """Offline stand-in for online grasp collection.

    Each scene gets ``rga_actions`` executed grasps: a share aimed at random
    pixels of the referred target, the rest at other objects or the table. An
    action succeeds when it lands on the referred object and the gripper
    orientation is compatible with one of its grasps. Successful grasps of the
    wrong object are relabeled with an expression naming that object.
    """
    items, actions = [], []
    for s in samples:
        masks = object_masks(s)
        own = len(items)
        items.append(s)
        relabeled = {}
        h, w = s.mask.shape
        for _ in range(config.rga_actions):
            k = int(rng.integers(6))
            if rng.random() < config.rga_target_share:
                ys, xs = np.nonzero(s.mask)
            else:
                pick = int(rng.integers(len(masks) + 1))
                if pick == len(masks):
                    ys, xs = np.mgrid[0:h, 0:w]
                    ys, xs = ys.ravel(), xs.ravel()
                else:
                    ys, xs = np.nonzero(masks[pick])
            j = int(rng.integers(len(xs)))
            x, y = int(xs[j]), int(ys[j])
            obj, ok = grasp_outcome(s, x, y, k)
            if obj == s.target or obj is None or not config.rga_relabel:
                actions.append((own, x, y, k, int(ok and obj == s.target)))
                continue
            if not ok:
                actions.append((own, x, y, k, 0))
                continue
            if obj not in relabeled:
                text = relabel(s, obj, rng)
                if text is None:
                    actions.append((own, x, y, k, 0))
                    continue
                relabeled[obj] = len(items)
                items.append(replace(s, expression=text, target=obj, mask=masks[obj]))
            actions.append((own, x, y, k, 0))
            actions.append((relabeled[obj], x, y, k, 1))
    return items, torch.tensor(actions, dtype=torch.long).reshape(-1, 5)


def prepare(samples, config: TrainConfig, tokenizer: Tokenizer, rng=None) -> TaskData:
    check_task_schema(samples, config.task)
    items, actions = list(samples), None
    if config.task == "rga":
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        items, actions = simulate_actions(samples, config, rng)
    image, depth, tokens, valid, mask = _encode_inputs(items, tokenizer)
    grasp = grasp_targets(items, config.model.heads.max_width) if config.task == "rgs" else None
    return TaskData(image, depth, tokens, valid, mask, grasp, actions, items if config.task == "rga" else None)


# --------------------------------------------------------------------------- losses

def motion_loss_many(q_g: torch.Tensor, actions: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Mean motion loss over executed actions; ``actions`` rows are (b, x, y, k, success)."""
    b, x, y, k, ok = actions.unbind(1)
    p = clamp_probability(q_g[b, k, y, x], eps)
    return torch.where(ok.bool(), -torch.log(p), -torch.log1p(-p)).mean()


@torch.no_grad()
def collect_online(model: GroundingModel, data: TaskData, batch_size: int = 32) -> torch.Tensor:
    """Execute the current best grasp of every orientation channel on every item.

    The channel-wise maxima include the greedy pose ``rga_select`` would pick,
    so every spurious peak the policy would act on gets an outcome. Returns the
    new action rows.
    """
    was_training = model.training
    model.eval()
    rows = []
    for i in range(0, len(data), batch_size):
        idx = torch.arange(i, min(i + batch_size, len(data)))
        depth = data.depth[idx] if model.config.use_depth else None
        q = model(data.image[idx], data.tokens[idx], data.valid[idx], depth)
        w = q.shape[-1]
        best = q.flatten(2).argmax(2)  # (B, N), first maximum in row-major order per channel
        for b, j in enumerate(idx.tolist()):
            item = data.items[j]
            for k, f in enumerate(best[b].tolist()):
                y, x = divmod(f, w)
                obj, ok = grasp_outcome(item, x, y, k)
                rows.append((j, x, y, k, int(ok and obj == item.target)))
    model.train(was_training)
    return torch.tensor(rows, dtype=torch.long).reshape(-1, 5)


def batch_loss(model: GroundingModel, data: TaskData, idx: torch.Tensor, config: TrainConfig) -> torch.Tensor:
    depth = data.depth[idx] if config.model.use_depth else None
    out = model(data.image[idx], data.tokens[idx], data.valid[idx], depth)
    w = config.loss_weights
    if config.task == "rga":
        sel = torch.isin(data.actions[:, 0], idx)
        acts = data.actions[sel].clone()
        remap = torch.full((len(data),), -1, dtype=torch.long)
        remap[idx] = torch.arange(len(idx))
        acts[:, 0] = remap[acts[:, 0]]
        if acts.shape[0] == 0:
            return out.sum() * 0.0
        return w.get("motion", 1.0) * motion_loss_many(out, acts)
    labels = site_labels(data.mask[idx])
    loss = w.get("mask", 1.0) * text_to_pixel_contrastive(out.mask_logits4, labels)
    if config.task == "rgs":
        tgt = {k: v[idx] for k, v in data.grasp.items()}
        target = _Maps(tgt["quality"], tgt["sin2"], tgt["cos2"], tgt["width_norm"])
        loss = loss + w.get("grasp", 1.0) * smooth_l1_maps(out, target, tgt["valid"])
    return loss


@dataclass
class _Maps:
    quality: torch.Tensor
    sin2: torch.Tensor
    cos2: torch.Tensor
    width_norm: torch.Tensor


# --------------------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: TrainConfig
    state: dict  # name -> numpy array (the full model, backbone included)
    frozen: list  # names of frozen (backbone) parameters
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)  # per-step loss
    vocabulary: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)  # e.g. the raw config file

    @classmethod
    def from_model(cls, model: GroundingModel, config: TrainConfig, tokenizer: Tokenizer, **kw) -> "Checkpoint":
        state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        frozen = sorted(model.parameter_registry().frozen)
        return cls(config, state, frozen, vocabulary=list(tokenizer.vocabulary), **kw)

    def build_model(self) -> GroundingModel:
        model = GroundingModel(self.config.model)
        missing = set(model.state_dict()) ^ set(self.state)
        if missing:
            raise DatasetError(f"checkpoint does not match the model: {sorted(missing)[:4]}")
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.state.items()})
        model.eval()
        return model

    def tokenizer(self) -> Tokenizer:
        return Tokenizer(self.vocabulary or None, self.config.text_length)

    def save(self, path) -> Path:
        meta = {
            "kind": CHECKPOINT_KIND,
            "config": self.config.to_dict(),
            "frozen": self.frozen,
            "tunable": sorted(set(self.state) - set(self.frozen) - _buffers(self.state, self.frozen)),
            "epoch": self.epoch,
            "step": self.step,
            "history": self.history,
            "vocabulary": self.vocabulary,
            "extra": self.extra,
        }
        return save_arrays(path, self.state, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != CHECKPOINT_KIND:
            raise DatasetError(f"{path}: not a checkpoint (kind={meta.get('kind')!r})")
        config = TrainConfig.from_dict(meta["config"])
        return cls(config, arrays, list(meta["frozen"]), meta["epoch"], meta["step"], list(meta["history"]),
                   list(meta["vocabulary"]), dict(meta.get("extra", {})))


def _buffers(state, frozen):
    return {k for k in state if k not in frozen and ("running_" in k or "num_batches" in k)}


# --------------------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: GroundingModel
    history: list
    seconds: float


def _check_frozen(model, snap, step):
    if not assert_frozen(model.backbone, snap):
        raise AuditError(f"frozen backbone parameters changed by step {step}")


def _optimizer(model, config):
    params = [p for p in model.parameters() if p.requires_grad]
    if config.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    return torch.optim.Adam(params, lr=config.lr)


def train(config: TrainConfig, samples: Sequence[SceneSample], out_dir=None, tokenizer: Optional[Tokenizer] = None,
          on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Train the task model; only adapter, decoder and head parameters move.

    Deterministic given ``config.seed`` (single process, fixed thread count).
    Raises :class:`DivergenceError` on a non-finite loss.
    """
    start = time.perf_counter()
    tokenizer = tokenizer or Tokenizer(length=config.text_length)
    if tokenizer.length != config.text_length:
        raise ConfigError("tokenizer length differs from the config")
    data = prepare(samples, config, tokenizer, np.random.default_rng(config.seed))
    torch.manual_seed(config.seed)
    model = GroundingModel(config.model)
    model.train()
    frozen_snap = snapshot(model.backbone)
    opt = _optimizer(model, config)
    gen = torch.Generator().manual_seed(config.seed)

    history, step, epoch = [], 0, 0
    out_dir = Path(out_dir) if out_dir is not None else None
    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = torch.randperm(len(data), generator=gen)
        for i in range(0, len(order), config.batch_size):
            idx = order[i: i + config.batch_size]
            loss = batch_loss(model, data, idx, config)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss.item()} at step {step} (epoch {epoch}, lr {lr:g})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            value = float(loss.detach())
            history.append(value)
            if on_step is not None:
                on_step(step, value)
            step += 1
            if config.task == "rga" and config.rga_online_every and step % config.rga_online_every == 0:
                data.actions = torch.cat([data.actions, collect_online(model, data)])
            if config.audit_every and step % config.audit_every == 0:
                _check_frozen(model, frozen_snap, step)
            if config.max_steps is not None and step >= config.max_steps:
                break
        log.info("epoch %d lr %.3g loss %.4f", epoch, lr, history[-1])
        if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            Checkpoint.from_model(model, config, tokenizer, epoch=epoch + 1, step=step,
                                  history=list(history)).save(out_dir / f"checkpoint_epoch{epoch + 1:04d}.npz")
        if config.max_steps is not None and step >= config.max_steps:
            break

    _check_frozen(model, frozen_snap, step)
    model.eval()
    ckpt = Checkpoint.from_model(model, config, tokenizer, epoch=epoch + 1, step=step, history=history)
    if out_dir is not None:
        ckpt.save(out_dir / "checkpoint.npz")
    return TrainResult(ckpt, model, history, time.perf_counter() - start)


# --------------------------------------------------------------------------- inference

@dataclass
class SampleOutput:
    """Numpy outputs for one sample."""

    mask_prob: Optional[np.ndarray] = None  # (H, W)
    grasp_maps: Optional[GraspMaps] = None
    affordance: Optional[np.ndarray] = None  # (H, W, N)


@torch.no_grad()
def run_model(model: GroundingModel, samples: Sequence[SceneSample], tokenizer: Tokenizer,
              batch_size: int = 16) -> list[SampleOutput]:
    model.eval()
    outs = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i: i + batch_size]
        image, depth, tokens, valid, _ = _encode_inputs(chunk, tokenizer)
        out = model(image, tokens, valid, depth if model.config.use_depth else None)
        for b in range(len(chunk)):
            if model.task == "res":
                outs.append(SampleOutput(mask_prob=torch.sigmoid(out.mask_logits[b]).numpy()))
            elif model.task == "rgs":
                maps = GraspMaps(out.quality[b].numpy(), out.angle[b].numpy(), out.width[b].numpy())
                outs.append(SampleOutput(torch.sigmoid(out.mask_logits[b]).numpy(), maps))
            else:
                outs.append(SampleOutput(affordance=out[b].permute(1, 2, 0).numpy()))
    return outs


def to_record(sample_id: str, output: SampleOutput, depth=None, top_n: Optional[int] = None) -> PredictionRecord:
    cands, pose = [], None
    if output.grasp_maps is not None:
        cands = extract_top_n(output.grasp_maps, top_n)
    if output.affordance is not None:
        if depth is None:
            raise InputError("rga poses need the depth map")
        pose = rga_select(output.affordance, depth)
    return PredictionRecord(sample_id, cands, pose)


def evaluate_predictions(task: str, samples: Sequence[SceneSample], masks=None, records=None,
                         registry=None) -> MetricsReport:
    """Metrics from already-made predictions.

    ``masks`` are binary (H, W) arrays for res/rgs; ``records`` are
    :class:`PredictionRecord` objects carrying grasp candidates (rgs) or the
    selected pose (rga).
    """
    if not samples:
        raise EvaluationError("no samples to evaluate")
    n = len(samples)
    kw = {}
    if task in ("res", "rgs"):
        if masks is None or len(masks) != n:
            raise EvaluationError("need one predicted mask per sample")
        ious, inters, unions = [], [], []
        for m, s in zip(masks, samples):
            if np.shape(m) != s.mask.shape:
                raise EvaluationError(f"mask shape {np.shape(m)} vs {s.mask.shape} for {s.sample_id!r}")
            i, u = mask_counts(m, s.mask)
            inters.append(i)
            unions.append(u)
            ious.append(1.0 if u == 0 else i / u)
        seg = aggregate(ious, inters, unions)
        kw.update(miou=seg.miou, oiou=seg.oiou, prec_50=seg.prec[0.5], prec_70=seg.prec[0.7], prec_90=seg.prec[0.9])
    if task in ("rgs", "rga"):
        if records is None or len(records) != n:
            raise EvaluationError("need one prediction record per sample")
    if task == "rgs":
        j1, jany = [], []
        for r, s in zip(records, samples):
            if not s.grasps:
                raise EvaluationError(f"sample {s.sample_id!r} has no ground-truth grasps")
            j1.append(bool(r.candidates) and jacquard_at_n(r.candidates, s.grasps, 1))
            jany.append(bool(r.candidates) and jacquard_at_n(r.candidates, s.grasps, None))
        kw.update(j_at_1=float(np.mean(j1)), j_at_any=float(np.mean(jany)))
    if task == "rga":
        ground, success = [], []
        for r, s in zip(records, samples):
            if r.rga_pose is None:
                raise EvaluationError(f"record {r.sample_id!r} has no selected pose")
            p = r.rga_pose
            ground.append(grounding_accuracy((p.x, p.y), s.mask))
            labels = s.affordance
            if labels is None:
                if s.target < 0 or not s.objects:
                    raise EvaluationError(f"sample {s.sample_id!r} has no affordance labels")
                labels = affordance_labels(s.objects[s.target], s.mask.shape)
            h, w = s.mask.shape
            success.append(0 <= p.y < h and 0 <= p.x < w and bool(labels[p.y, p.x, p.k]))
        kw.update(grounding_accuracy=float(np.mean(ground)), grasp_success=float(np.mean(success)))
    if task not in ("res", "rgs", "rga"):
        raise EvaluationError(f"unknown task {task!r}")
    if registry is not None:
        rep = param_report(registry)
        kw.update(tunable_params=rep.tunable, frozen_params=rep.frozen, param_ratio_percent=rep.ratio_percent)
    return MetricsReport(task=task, samples=n, **kw)


def evaluate(source, samples: Sequence[SceneSample], task: Optional[str] = None,
             tokenizer: Optional[Tokenizer] = None) -> MetricsReport:
    """Evaluate a :class:`Checkpoint` or a model on ``samples``; deterministic."""
    if isinstance(source, Checkpoint):
        model, tokenizer = source.build_model(), tokenizer or source.tokenizer()
    else:
        model, tokenizer = source, tokenizer or Tokenizer(length=source.config.backbone.text_length)
    task = task or model.task
    if task != model.task:
        raise EvaluationError(f"model was trained for {model.task!r}, asked to evaluate {task!r}")
    try:
        check_task_schema(samples, task)
    except (ConfigError, DatasetError) as exc:
        raise EvaluationError(str(exc)) from exc
    outputs = run_model(model, samples, tokenizer)
    threshold = model.config.heads.mask_threshold
    masks = [o.mask_prob > threshold for o in outputs] if task in ("res", "rgs") else None
    records = None
    if task in ("rgs", "rga"):
        records = [to_record(s.sample_id, o, s.depth) for s, o in zip(samples, outputs)]
    return evaluate_predictions(task, samples, masks, records, model.parameter_registry())


# --------------------------------------------------------------------------- prediction

def _to_uint8(image):
    return (np.clip(image, 0.0, 1.0) * 255).round().astype(np.uint8)


def _overlay_mask(image, mask, color=(255, 40, 40), alpha=0.5):
    base = _to_uint8(image).astype(np.float32)
    m = mask[..., None].astype(np.float32) * alpha
    return (base * (1 - m) + np.array(color, np.float32) * m).round().astype(np.uint8)


def _draw_rect(draw, rect, color):
    pts = [tuple(map(float, p)) for p in rect.corners()]
    # jaws (short edges) in the highlight color, the rest thin
    draw.line([pts[0], pts[1]], fill=(255, 255, 255), width=1)
    draw.line([pts[2], pts[3]], fill=(255, 255, 255), width=1)
    draw.line([pts[1], pts[2]], fill=color, width=2)
    draw.line([pts[3], pts[0]], fill=color, width=2)


def _heatmap(values):
    v = np.clip(values, 0.0, 1.0)
    return np.stack([v, 0.2 * np.ones_like(v), 1.0 - v], axis=-1)


def predict(checkpoint: Checkpoint, image: np.ndarray, expression: str, depth: Optional[np.ndarray] = None,
            out_dir=None, sample_id: str = "input", model: Optional[GroundingModel] = None):
    """Run one (image, expression[, depth]) through a checkpoint.

    ``image`` is (H, W, 3) in [0, 1] at the checkpoint's image size. Returns the
    prediction record and the list of overlay files written to ``out_dir``.
    """
    from PIL import Image, ImageDraw

    cfg = checkpoint.config.model
    size = cfg.backbone.image_size
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (*size, 3):
        raise InputError(f"image must be {size[0]}x{size[1]}x3, got {image.shape}")
    if cfg.use_depth and depth is None:
        raise InputError("this checkpoint uses depth; pass a depth map")
    if depth is None:
        depth = np.ones(size, dtype=np.float32)
    depth = np.asarray(depth, dtype=np.float32)
    if depth.shape != tuple(size):
        raise InputError(f"depth must be {size[0]}x{size[1]}, got {depth.shape}")
    model = model or checkpoint.build_model()
    dummy_mask = np.ones(size, dtype=bool)
    sample = SceneSample(image, depth, expression, dummy_mask, [], sample_id=sample_id)
    output = run_model(model, [sample], checkpoint.tokenizer())[0]
    record = to_record(sample_id, output, depth)

    files = []
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if output.mask_prob is not None:
            mask = output.mask_prob > cfg.heads.mask_threshold
            im = Image.fromarray(_overlay_mask(image, mask))
            if record.candidates:
                draw = ImageDraw.Draw(im)
                _draw_rect(draw, record.candidates[0][0], (40, 220, 40))
                files.append(out / f"{sample_id}_grasp.png")
                im.save(files[-1])
            else:
                files.append(out / f"{sample_id}_mask.png")
                im.save(files[-1])
        if output.affordance is not None:
            for k in range(output.affordance.shape[-1]):
                heat = 0.5 * image + 0.5 * _heatmap(output.affordance[..., k])
                files.append(out / f"{sample_id}_affordance_{30 * k:03d}deg.png")
                Image.fromarray(_to_uint8(heat)).save(files[-1])
            p = record.rga_pose
            im = Image.fromarray(_to_uint8(image))
            _draw_rect(ImageDraw.Draw(im), GraspRectangle(p.x, p.y, p.theta, 12.0), (40, 220, 40))
            files.append(out / f"{sample_id}_pose.png")
            im.save(files[-1])
    return record, files
