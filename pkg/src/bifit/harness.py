"""Training, evaluation, inference, the ablation grid, and the benchmark.

Everything here is plain single-process orchestration over the model and
data modules: load clips into memory, iterate steps, write CSV/JSON
artifacts, and keep every run a pure function of its seed.
"""

from __future__ import annotations

import glob
import json
import os
import time

import numpy as np
import torch
import torch.nn.functional as F

from . import data as datamod
from .checkpoint import load_checkpoint, restore_rng_state, rng_state_blob, save_checkpoint
from .config import RunConfig
from .errors import CheckpointError, DatasetIOError, InputError, NumericError
from .losses import GroundTruth, training_loss
from .metrics import MetricsReport, contour_accuracy, intersection_union, \
    region_similarity, summarize
from .model import BifitModel, build_model
from .optim import LearningRateSchedule, MomentOptimizer
from .transformer import InterFrameLayer, ifi_flop_count

LOSS_CSV_HEADER = "step,lr,loss,matched,negatives,positive_index,clip_id"

# J&F reached by the full-scale reference system's ablation rows, attached to
# ablation.csv so the toy-scale direction can be compared against it.
REFERENCE_JF = {
    "baseline": 54.0, "+vewl": 55.8, "+lewv": 55.1,
    "+bvlim": 57.1, "+ifi": 55.3, "full": 59.9,
    "full_attention_ffn": 58.7, "full_dynamic_text": 58.0,
    "full_ratio_2to1": 57.1, "full_ratio_1to2": 58.2,
}


def _dtype(cfg: RunConfig):
    return torch.float64 if cfg.run.precision == 64 else torch.float32


class ClipStore:
    """All clips of one split, fully materialized in memory."""

    def __init__(self, records: list[dict], dtype):
        self.records = records
        self.dtype = dtype
        self.frames: list[torch.Tensor] = []
        self.masks: list[np.ndarray] = []
        self.ids: list[torch.Tensor] = []
        self.gts: list[GroundTruth] = []
        for rec in records:
            video, masks = datamod.load_clip(rec)
            self.frames.append(torch.from_numpy(video).to(dtype))
            self.masks.append(masks)
            self.ids.append(torch.from_numpy(np.asarray(rec["token_ids"], dtype=np.int64)))
            self.gts.append(GroundTruth(
                torch.tensor(rec["visibility"], dtype=dtype),
                torch.tensor(rec["boxes"], dtype=dtype),
                torch.from_numpy(np.stack(masks)).to(dtype),
            ))

    def __len__(self) -> int:
        return len(self.records)


def ensure_dataset(cfg: RunConfig) -> tuple[str, str]:
    """Return (train_dir, val_dir), generating any split that is missing."""
    root = cfg.paths.data_root
    train_dir = os.path.join(root, "train")
    val_dir = os.path.join(root, "val")
    if not os.path.isfile(os.path.join(train_dir, "manifest.jsonl")):
        datamod.build_split(cfg.data, train_dir, cfg.data.train_clips, 0)
    if not os.path.isfile(os.path.join(val_dir, "manifest.jsonl")):
        datamod.build_split(cfg.data, val_dir, cfg.data.val_clips, 500_000)
    return train_dir, val_dir


def upsample_logits(mask_logits: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinearly upsample [T, N, h, w] logits to the frame resolution.

    Masks are supervised at full resolution rather than at the stride-4 grid:
    the interpolated level set can then land between grid cells, which is what
    lets small shapes keep a tight contour.
    """
    return F.interpolate(mask_logits, size=size, mode="bilinear", align_corners=False)


def clip_training_loss(model: BifitModel, store: ClipStore, index: int, cfg: RunConfig):
    """Forward one clip and sum the matching loss over supervised layers."""
    outputs = model(store.frames[index], store.ids[index])
    layers = outputs if cfg.loss.aux_losses else outputs[-1:]
    gt = store.gts[index]
    size = gt.masks.shape[-2:]
    total = None
    parts = {}
    for out in layers:
        loss, parts = training_loss(gt, out.probs, out.boxes,
                                    upsample_logits(out.mask_logits, size), cfg.loss,
                                    cfg.loss.supervise_negatives)
        total = loss if total is None else total + loss
    return total, parts


def train(cfg: RunConfig, train_dir: str, out_dir: str,
          resume: str = "", quiet: bool = True) -> dict:
    """Run the optimization loop; returns the trained model and artifacts.

    Writes loss.csv and checkpoint_<step>.bin files under out_dir. A
    non-finite loss aborts with the step, clip, and loss components.
    """
    os.makedirs(out_dir, exist_ok=True)
    store = ClipStore(datamod.read_dataset(train_dir), _dtype(cfg))
    if len(store) == 0:
        raise DatasetIOError(f"no clips in {train_dir}")
    order_rng = np.random.default_rng(cfg.run.seed)
    model = build_model(cfg, seed=cfg.run.seed)
    params = [(n, p) for n, p in model.named_parameters()]
    opt = MomentOptimizer(params, cfg.optim)
    schedule = LearningRateSchedule(cfg.optim, cfg.optim.steps)
    start_step = 0
    if resume:
        _, ck_step, tensors, rng_blob = load_checkpoint(resume)
        _load_model_tensors(model, tensors)
        opt.load_state(tensors)
        restore_rng_state(rng_blob, order_rng)
        start_step = ck_step
    history: list[str] = []
    loss_path = os.path.join(out_dir, "loss.csv")
    mode = "a" if resume and os.path.exists(loss_path) else "w"
    with open(loss_path, mode) as log:
        if mode == "w":
            log.write(LOSS_CSV_HEADER + "\n")
        for step in range(start_step + 1, cfg.optim.steps + 1):
            index = int(order_rng.integers(0, len(store)))
            lr = schedule.at(step - 1)
            opt.zero_grad()
            loss, parts = clip_training_loss(model, store, index, cfg)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at step {step} on clip "
                    f"{store.records[index]['clip_id']}: {parts}")
            loss.backward()
            if cfg.optim.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_([p for _, p in params], cfg.optim.grad_clip)
            opt.step(lr)
            row = (f"{step},{lr:.8g},{value:.10g},{parts['matched']:.10g},"
                   f"{parts['negatives']:.10g},{parts['positive_index']},"
                   f"{store.records[index]['clip_id']}")
            history.append(row)
            log.write(row + "\n")
            if not quiet and step % cfg.run.log_every == 0:
                print(f"step {step}/{cfg.optim.steps}  lr {lr:.2g}  loss {value:.4f}")
            if cfg.run.checkpoint_every > 0 and step % cfg.run.checkpoint_every == 0 \
                    and step != cfg.optim.steps:
                _save(out_dir, cfg, step, model, opt, order_rng)
    final = _save(out_dir, cfg, cfg.optim.steps, model, opt, order_rng)
    return {"model": model, "checkpoint": final, "history": history}


def _save(out_dir: str, cfg: RunConfig, step: int, model: BifitModel,
          opt: MomentOptimizer, order_rng) -> str:
    tensors = {f"model.{n}": p for n, p in model.state_dict().items()}
    tensors.update(opt.state_tensors())
    path = os.path.join(out_dir, f"checkpoint_{step}.bin")
    save_checkpoint(path, cfg, step, tensors, rng_state_blob(order_rng))
    return path


def _load_model_tensors(model: BifitModel, tensors: dict) -> None:
    state = {}
    for name, tensor in tensors.items():
        if name.startswith("model."):
            state[name[len("model."):]] = tensor
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:4]} ...")
    model.load_state_dict(state)


def load_model(path: str) -> tuple[BifitModel, RunConfig]:
    cfg, _, tensors, _ = load_checkpoint(path)
    cfg.validate()
    model = build_model(cfg, seed=cfg.run.seed)
    _load_model_tensors(model, tensors)
    model.eval()
    return model, cfg


@torch.no_grad()
def predict_clip(model: BifitModel, frames: torch.Tensor, ids: torch.Tensor):
    """Select the best sequence: (masks [T,H,W] bool, score, boxes [T,4], index)."""
    out = model(frames, ids)[-1]
    scores = out.probs.mean(dim=0)                      # [N]
    best = int(torch.nonzero(scores == scores.max())[0, 0])
    full = upsample_logits(out.mask_logits[:, best:best + 1], frames.shape[1:3])
    masks = (torch.sigmoid(full.squeeze(1)) > 0.5).cpu().numpy()
    return masks, float(scores[best]), out.boxes[:, best].cpu().numpy(), best


def aggregate_clip_metrics(pairs) -> MetricsReport:
    """Frame-level metric aggregation over (pred [T,H,W], gt [T,H,W]) pairs."""
    js, fs, inters, unions = [], [], [], []
    for pred, gt in pairs:
        for t in range(gt.shape[0]):
            js.append(region_similarity(pred[t], gt[t]))
            fs.append(contour_accuracy(pred[t], gt[t]))
            i, u = intersection_union(pred[t], gt[t])
            inters.append(i)
            unions.append(u)
    return summarize(js, fs, inters, unions)


def evaluate_model(model: BifitModel, store: ClipStore) -> MetricsReport:
    model.eval()
    pairs = []
    for i in range(len(store)):
        masks, _, _, _ = predict_clip(model, store.frames[i], store.ids[i])
        pairs.append((masks, store.masks[i]))
    return aggregate_clip_metrics(pairs)


def evaluate(checkpoint_path: str, dataset_dir: str, out_dir: str | None = None) -> MetricsReport:
    model, cfg = load_model(checkpoint_path)
    store = ClipStore(datamod.read_dataset(dataset_dir), _dtype(cfg))
    report = evaluate_model(model, store)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
            fh.write(report.to_json() + "\n")
        with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
            fh.write(report.csv_header() + "\n" + report.csv_row() + "\n")
    return report


def infer(checkpoint_path: str, clip_dir: str, expression: str, out_dir: str) -> dict:
    """Segment one directory of frames with a free-form phrase; writes masks
    plus result.json and returns the result record."""
    model, cfg = load_model(checkpoint_path)
    frame_paths = sorted(glob.glob(os.path.join(clip_dir, "frame_*.ppm")))
    if not frame_paths:
        raise InputError(f"no frame_*.ppm files in {clip_dir}")
    video = np.stack([datamod.read_ppm(p) for p in frame_paths])
    frames = torch.from_numpy(video).to(_dtype(cfg))
    ids = torch.from_numpy(datamod.tokenize(expression))
    masks, score, boxes, _ = predict_clip(model, frames, ids)
    os.makedirs(out_dir, exist_ok=True)
    for t in range(masks.shape[0]):
        datamod.write_pbm(os.path.join(out_dir, f"mask_{t:03d}.pbm"), masks[t])
    result = {"expression": expression, "score": score,
              "boxes": [[float(v) for v in b] for b in boxes],
              "frames": len(frame_paths)}
    with open(os.path.join(out_dir, "result.json"), "w") as fh:
        json.dump(result, fh, indent=2)
    return result


COMPONENT_ROWS = [
    # label, vewl, lewv, ifi
    ("baseline", False, False, False),
    ("+vewl", True, False, False),
    ("+lewv", False, True, False),
    ("+bvlim", True, True, False),
    ("+ifi", False, False, True),
    ("full", True, True, True),
]

VARIANT_ROWS = [
    # label, config overrides applied on top of the full model
    ("full_attention_ffn", {"fusion": "attention_ffn"}),
    ("full_dynamic_text", {"vewl_text": "dynamic"}),
    ("full_ratio_2to1", {"ifi_ratio": "2:1"}),
    ("full_ratio_1to2", {"ifi_ratio": "1:2"}),
]


def ablation_rows(cfg: RunConfig) -> list[tuple[str, dict]]:
    rows = [(label, {"vewl_enabled": v, "lewv_enabled": l, "ifi_enabled": i})
            for label, v, l, i in COMPONENT_ROWS]
    if cfg.run.ablation_rows == "all":
        rows.extend(VARIANT_ROWS)
    return rows


def ablate(cfg: RunConfig, train_dir: str, val_dir: str, out_dir: str,
           quiet: bool = True) -> list[dict]:
    """Train/evaluate the flag grid over several seeds; writes ablation.csv."""
    os.makedirs(out_dir, exist_ok=True)
    val_store = ClipStore(datamod.read_dataset(val_dir), _dtype(cfg))
    results = []
    for label, overrides in ablation_rows(cfg):
        values = []
        for s in range(cfg.run.ablation_seeds):
            variant = cfg.copy()
            for key, value in overrides.items():
                setattr(variant.model, key, value)
            variant.validate()
            variant.run.seed = cfg.run.seed + s
            variant.optim.steps = cfg.run.ablation_steps
            run_dir = os.path.join(out_dir, f"{label.replace('+', 'with_')}_seed{s}")
            outcome = train(variant, train_dir, run_dir, quiet=quiet)
            report = evaluate_model(outcome["model"], val_store)
            values.append(report.jf)
            if not quiet:
                print(f"{label} seed {variant.run.seed}: J&F {report.jf:.4f}")
        results.append({
            "label": label, "values": values,
            "mean": float(np.mean(values)), "min": min(values), "max": max(values),
            "reference_jf": REFERENCE_JF.get(label),
        })
    seeds = cfg.run.ablation_seeds
    with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
        cols = ",".join(f"seed{s}_jf" for s in range(seeds))
        fh.write(f"row,{cols},mean_jf,min_jf,max_jf,reference_jf\n")
        for row in results:
            vals = ",".join(f"{v:.6f}" for v in row["values"])
            ref = "" if row["reference_jf"] is None else f"{row['reference_jf']:.1f}"
            fh.write(f"{row['label']},{vals},{row['mean']:.6f},"
                     f"{row['min']:.6f},{row['max']:.6f},{ref}\n")
    return results


def bench(cfg: RunConfig, out_dir: str,
          frame_range=tuple(range(2, 17)), channel_range=(32, 64, 128),
          queries: int = 5, repeats: int = 3) -> dict:
    """Tabulate interaction-layer cost and fit the two-term model.

    Returns {"rows": [...], "a": ..., "b": ..., "max_rel_err": ...} and
    writes bench.csv; the fit regresses the exact multiply-accumulate count
    on (C^2*T*N, C*(T*N)^2).
    """
    os.makedirs(out_dir, exist_ok=True)
    heads = cfg.model.heads
    rows = []
    for c in channel_range:
        layer = InterFrameLayer(c, heads, 4 * c)
        layer.eval()
        for t in frame_range:
            x = torch.randn(t, queries, c)
            with torch.no_grad():
                layer(x)  # warm up
                times = []
                for _ in range(repeats):
                    start = time.perf_counter()
                    layer(x)
                    times.append(time.perf_counter() - start)
            rows.append({"frames": t, "queries": queries, "channels": c,
                         "flops": ifi_flop_count(t, queries, c, heads),
                         "seconds": min(times)})
    design = np.array([[r["channels"] ** 2 * r["frames"] * r["queries"],
                        r["channels"] * (r["frames"] * r["queries"]) ** 2]
                       for r in rows], dtype=np.float64)
    target = np.array([r["flops"] for r in rows], dtype=np.float64)
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    fitted = design @ coef
    rel_err = float(np.max(np.abs(fitted - target) / target))
    with open(os.path.join(out_dir, "bench.csv"), "w") as fh:
        fh.write("frames,queries,channels,flops,seconds,fitted_flops\n")
        for r, f in zip(rows, fitted):
            fh.write(f"{r['frames']},{r['queries']},{r['channels']},"
                     f"{r['flops']},{r['seconds']:.6g},{f:.6g}\n")
    summary = {"a": float(coef[0]), "b": float(coef[1]), "max_rel_err": rel_err}
    with open(os.path.join(out_dir, "bench_fit.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return {"rows": rows, **summary}


def newest_checkpoint(out_dir: str) -> str:
    paths = glob.glob(os.path.join(out_dir, "checkpoint_*.bin"))
    if not paths:
        raise CheckpointError(f"no checkpoint_*.bin under {out_dir}")
    return max(paths, key=lambda p: int(p.rsplit("_", 1)[1].split(".")[0]))
