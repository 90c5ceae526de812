"""RMSProp training of the multi-task and baseline networks, fold by fold."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import loss as L
from . import metrics as M
from . import network as N
from .tensor import backward

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss or gradients stopped being finite."""


@dataclass
class TrainConfig:
    epochs: int = 50
    lr0: float = 1e-3
    decay: float = 0.95
    alpha: float = 0.99
    eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0
    loss_form: str = "precision"
    select_on: str = "test"
    augment: bool = True
    target_spacing_mm: float = D.TARGET_SPACING_MM
    # std (mm^2) of Gaussian noise added to training area labels; 0 = clean
    area_label_noise_mm2: float = 0.0
    folds: tuple[int, ...] = (0, 1, 2, 3, 4)
    net: N.NetConfig = field(default_factory=N.NetConfig)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_form not in L.FORMS:
            raise ValueError(f"loss form must be one of {L.FORMS}")
        if self.select_on not in ("test", "train"):
            raise ValueError("select_on must be 'test' or 'train'")
        if any(not 0 <= f < D.N_FOLDS for f in self.folds):
            raise ValueError(f"fold ids must be in 0..{D.N_FOLDS - 1}")
        self.net.validate()


def lr_at_epoch(epoch: int, lr0: float = 1e-3, decay: float = 0.95) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * decay ** epoch


def rmsprop_step(param: np.ndarray, grad: np.ndarray, v: np.ndarray, lr: float,
                 alpha: float = 0.99, eps: float = 1e-8) -> None:
    """In-place update: v <- a*v + (1-a)*g^2; param <- param - lr*g/(sqrt(v)+eps)."""
    if param.shape != grad.shape or param.shape != v.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, v {v.shape}")
    v *= alpha
    v += (1.0 - alpha) * grad * grad
    param -= lr * grad / (np.sqrt(v) + eps)


class RMSProp:
    def __init__(self, net: N.UNet, alpha: float = 0.99, eps: float = 1e-8):
        self.net = net
        self.alpha, self.eps = alpha, eps
        self.v = {name: np.zeros(p.shape) for name, p in net.named_parameters()}

    def step(self, lr: float) -> None:
        for name, p in self.net.named_parameters():
            if p.grad is not None:
                rmsprop_step(p.data, p.grad, self.v[name], lr, self.alpha, self.eps)

    def state(self) -> dict[str, np.ndarray]:
        return {f"v:{k}": v for k, v in self.v.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k in self.v:
            self.v[k] = state[f"v:{k}"].copy()


# ---------------------------------------------------------------- data prep


@dataclass
class PreparedSplit:
    images: np.ndarray  # (N, S, S)
    masks: np.ndarray  # (N, S, S) uint8
    areas: np.ndarray  # (N,) mm^2, possibly with label noise
    samples: list[D.SliceSample]


def _to_arrays(samples) -> PreparedSplit:
    return PreparedSplit(np.stack([s.image for s in samples]),
                         np.stack([s.mask for s in samples]),
                         np.array([s.area_mm2 for s in samples]), list(samples))


def _preprocessed(dataset: D.Dataset, patients, cfg: TrainConfig) -> list[D.SliceSample]:
    keep = set(patients)
    return [D.preprocess(s, cfg.net.input_size, cfg.target_spacing_mm)
            for s in dataset.samples if s.patient_id in keep]


def prepare_test(dataset: D.Dataset, fold: D.FoldSplit, cfg: TrainConfig) -> PreparedSplit:
    return _to_arrays(_preprocessed(dataset, fold.test, cfg))


def prepare_fold(dataset: D.Dataset, fold: D.FoldSplit, cfg: TrainConfig):
    """Preprocess both splits; augment (offline) and optionally noise the training split."""
    train = _preprocessed(dataset, fold.train, cfg)
    test = _preprocessed(dataset, fold.test, cfg)
    if cfg.augment:
        train = D.augment_all(train, seed=cfg.seed * 1000 + fold.fold_id)
    tr = _to_arrays(train)
    if cfg.area_label_noise_mm2 > 0:
        z = np.random.default_rng([cfg.seed, fold.fold_id, 7]).standard_normal(len(train))
        tr.areas = tr.areas + cfg.area_label_noise_mm2 * z
    return tr, _to_arrays(test)


# --------------------------------------------------------------- evaluation


def volume_predictions(net: N.UNet, split: PreparedSplit, slice_thickness_mm: float = 1.0):
    """Per volume: gold Mask3D, post-processed prediction, per-slice regression areas."""
    probs, areas = N.predict(net, split.images)
    out = []
    by_vol: dict[tuple[str, int], list[int]] = {}
    for i, s in enumerate(split.samples):
        by_vol.setdefault((s.patient_id, s.phase_index), []).append(i)
    for key in sorted(by_vol):
        idx = sorted(by_vol[key], key=lambda i: split.samples[i].slice_index)
        sp = split.samples[idx[0]].spacing_mm
        spacing = (slice_thickness_mm, sp[1], sp[0])
        gold = M.stack_slices([split.masks[i] for i in idx], spacing)
        raw = M.stack_slices([M.binarize(probs[i]) for i in idx], spacing)
        pred = M.largest_connected_component(raw)
        reg = None if areas is None else areas[idx]
        out.append((key, idx, gold, pred, reg))
    return out


def mean_volume_dice(net: N.UNet, split: PreparedSplit) -> float:
    vols = volume_predictions(net, split)
    return float(np.mean([M.dice(pred, gold) for _, _, gold, pred, _ in vols]))


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    best_net: N.UNet
    final_net: N.UNet
    best_dice: float
    best_epoch: int
    log: list[dict]
    fold: D.FoldSplit


def _copy_params(net: N.UNet) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in net.params.items()}


def _clone(net: N.UNet, params: dict[str, np.ndarray]) -> N.UNet:
    twin = type(net)(net.config)
    for k, p in twin.params.items():
        p.data = params[k].copy()
    return twin


def train_fold(dataset: D.Dataset, fold: D.FoldSplit, cfg: TrainConfig, multi_task: bool = True,
               out_dir=None, resume: bool = False, prepared=None) -> TrainResult:
    """Train one fold, keeping the parameters with the best selection Dice.

    With ``out_dir`` the per-epoch log (``log.jsonl``), the best checkpoint
    and a resumable ``last.ckpt`` are written there.
    """
    cfg.validate()
    train, test = prepared if prepared is not None else prepare_fold(dataset, fold, cfg)
    select = test if cfg.select_on == "test" else _to_arrays(
        [s for s in train.samples[: len(train.samples) // (3 if cfg.augment else 1)]])
    net = N.build(cfg.net) if multi_task else N.build_single_task(cfg.net)
    opt = RMSProp(net, cfg.alpha, cfg.eps)
    log: list[dict] = []
    best_dice, best_epoch, best_params = -1.0, -1, _copy_params(net)
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / "last.ckpt").is_file():
            start, best_dice, best_epoch, best_params, log = _resume(net, opt, out)
            logger.info("fold %d: resuming after epoch %d", fold.fold_id, start - 1)

    n = len(train.images)
    extra = {"fold": fold.fold_id, "test_patients": list(fold.test), "loss_form": cfg.loss_form}
    for epoch in range(start, cfg.epochs):
        lr = lr_at_epoch(epoch, cfg.lr0, cfg.decay)
        order = np.random.default_rng([cfg.seed, fold.fold_id, epoch]).permutation(n)
        sums = {"l1": 0.0, "l2": 0.0}
        n_batches = 0
        for b, start_i in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[start_i:start_i + cfg.batch_size])
            terms = _train_step(net, opt, train, idx, lr, cfg, multi_task, epoch, b)
            for k, v in terms.items():
                sums[k] += v
            n_batches += 1
        sel_dice = mean_volume_dice(net, select)
        test_dice = sel_dice if select is test else mean_volume_dice(net, test)
        rec = {"epoch": epoch, "lr": lr, "l1": sums["l1"] / n_batches if multi_task else None,
               "l2": sums["l2"] / n_batches,
               "s1": net.params["s1"].item() if multi_task else None,
               "s2": net.params["s2"].item() if multi_task else None,
               "test_dice": test_dice}
        if cfg.select_on != "test":
            rec["selection_dice"] = sel_dice
        log.append(rec)
        if sel_dice > best_dice:
            best_dice, best_epoch, best_params = sel_dice, epoch, _copy_params(net)
            if out is not None:
                N.save_checkpoint(out / "best.ckpt", net, epoch=epoch, best_dice=best_dice, extra=extra)
        if out is not None:
            with open(out / "log.jsonl", "w") as fp:
                fp.writelines(json.dumps(r, sort_keys=True) + "\n" for r in log)
            N.save_checkpoint(out / "last.ckpt", net, epoch=epoch, best_dice=best_dice,
                              extra={**extra, "best_epoch": best_epoch}, state=opt.state())
        logger.info("fold %d epoch %d lr %.3g l2 %.4f dice %.4f", fold.fold_id, epoch, lr,
                    rec["l2"], test_dice)
    return TrainResult(_clone(net, best_params), net, best_dice, best_epoch, log, fold)


def _resume(net, opt, out: Path):
    last, header, state = N.load_checkpoint(out / "last.ckpt")
    for k, p in net.params.items():
        p.data = last.params[k].data
    opt.load_state(state)
    epoch = header["epoch"]
    best_epoch = header["extra"]["best_epoch"]
    best_dice = header["best_dice"]
    best_net, _, _ = N.load_checkpoint(out / "best.ckpt")
    with open(out / "log.jsonl") as fp:
        log = [json.loads(line) for line in fp][: epoch + 1]
    return epoch + 1, best_dice, best_epoch, _copy_params(best_net), log


def _train_step(net, opt, train: PreparedSplit, idx, lr, cfg, multi_task, epoch, b) -> dict:
    net.zero_grad()
    where = f"epoch {epoch}, batch {b}, slices {[train.samples[i].key for i in idx]}"
    try:
        logits, area = net.forward_logits(train.images[idx, None])
        l2 = L.ce_loss_logits(logits, train.masks[idx, None])
        if multi_task:
            l1 = L.mad_loss(area, train.areas[idx])
            total = L.joint_loss(l1, l2, L.LossState(net.s1, net.s2, cfg.loss_form)).total_tensor
        else:
            l1, total = None, l2
    except FloatingPointError as exc:
        raise TrainingDivergedError(f"non-finite forward pass at {where}: {exc}") from exc
    if not math.isfinite(total.item()):
        raise TrainingDivergedError(f"NaN/Inf loss at {where}")
    backward(total)
    for name, p in net.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDivergedError(f"non-finite gradient for {name} at {where}")
    opt.step(lr)
    return {"l1": l1.item() if l1 is not None else 0.0, "l2": l2.item()}


def learned_uncertainty_report(log: list[dict], form: str = "precision") -> tuple[float, float, float]:
    """Final (s1, s2) and the segmentation:regression weight ratio they imply."""
    if not log or log[-1].get("s1") is None:
        raise ValueError("log has no learned uncertainties (baseline run?)")
    s1, s2 = log[-1]["s1"], log[-1]["s2"]
    return s1, s2, L.effective_weight_ratio(L.LossState(s1, s2, form))


# ----------------------------------------------------------- cross-validation


@dataclass
class FoldEvaluation:
    volume_rows: list[dict]
    slice_rows: list[dict]


def evaluate_fold(net: N.UNet, test: PreparedSplit, method: str, slice_thickness_mm: float = 1.0) -> FoldEvaluation:
    """Per-volume SegScores and per-slice areas for one trained network on its test split."""
    vrows, srows = [], []
    for (pid, phase), idx, gold, pred, reg in volume_predictions(net, test, slice_thickness_mm):
        sc = M.evaluate_volume(pred, gold)
        vrows.append({"patient": pid, "phase": phase, "method": method, **asdict(sc)})
        for j, i in enumerate(idx):
            s = test.samples[i]
            row = {"patient": pid, "phase": phase, "slice": s.slice_index,
                   "area_true_mm2": s.area_mm2,
                   "area_seg_mm2": M.mask_area(pred.voxels[j], s.spacing_mm)}
            if reg is not None:
                row["area_reg_mm2"] = float(reg[j])
            srows.append(row)
    return FoldEvaluation(vrows, srows)


def _fold_job(args):
    dataset, fold, cfg, multi_task, out_dir, resume = args
    res = train_fold(dataset, fold, cfg, multi_task, out_dir=out_dir, resume=resume)
    return res


def cross_validate(dataset: D.Dataset, cfg: TrainConfig, multi_task: bool = True, out_dir=None,
                   resume: bool = False, jobs: int = 1) -> tuple[list[TrainResult], FoldEvaluation]:
    """Train the configured folds and score every test patient with its fold's best network."""
    cfg.validate()
    folds = D.split_folds(dataset.patient_ids, cfg.seed)
    for f in folds:
        if set(f.train) & set(f.test):
            raise AssertionError(f"fold {f.fold_id}: train and test patients overlap")
    chosen = [folds[k] for k in cfg.folds]
    root = Path(out_dir) if out_dir is not None else None
    jobs_args = [(dataset, f, cfg, multi_task,
                  None if root is None else root / f"fold{f.fold_id}", resume) for f in chosen]
    if jobs > 1 and len(chosen) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_fold_job, jobs_args))
    else:
        results = [_fold_job(a) for a in jobs_args]
    method = "mtn" if multi_task else "unet"
    vrows, srows = [], []
    for res in results:
        test = prepare_test(dataset, res.fold, cfg)
        ev = evaluate_fold(res.best_net, test, method, dataset.slice_thickness_mm)
        vrows += ev.volume_rows
        srows += ev.slice_rows
    return results, FoldEvaluation(vrows, srows)
