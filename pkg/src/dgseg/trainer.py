"""Training loop: learning-rate schedule, one optimization step over all loss terms,
checkpoint/resume and the per-step metrics log.
"""
from __future__ import annotations

import csv
import functools
import json
import logging
import math
from dataclasses import astuple, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .config import RunConfig
from .datapipe import PairedBatcher, ToyConfig, ToyData, collate, load_dataset, synth_toy
from .embed import ProjectedGrid, random_subsample, take, uniform_subsample
from .errors import ConfigError, ParameterError, TrainingDivergedError
from .evalreport import Report, evaluate_domains
from .losses import LossTerms, LossWeights, scr_loss, sce_loss, seg_ce, wce_loss
from .netgraph import (
    NetworkAssembly,
    config_digest,
    conv_backbone,
    load_checkpoint,
    load_module_arrays,
    module_arrays,
    save_checkpoint,
    save_inference_checkpoint,
    strip_for_inference,
)
from .wilddict import ContentStore

log = logging.getLogger(__name__)

METRIC_FIELDS = ("iter", "lr", "l_orig", "l_sce", "l_wce", "l_sel", "l_scr", "total")


def poly_lr(iteration: int, total: int, base: float, power: float = 0.9) -> float:
    if not 0 <= iteration <= total:
        raise ParameterError(f"iteration {iteration} outside [0, {total}]")
    return base * (1 - iteration / total) ** power


# ---------------------------------------------------------------------------
# construction


def build_assembly(cfg: RunConfig) -> NetworkAssembly:
    m = cfg.model
    return NetworkAssembly(
        conv_backbone(m.widths, m.norm),
        num_classes=cfg.data.num_classes,
        proj_dim=m.proj_dim,
        proj_hidden=m.proj_hidden or None,
        fs_hooks=m.fs_hooks,
        fs_depth=m.fs_depth,
        fs_mode=m.fs_mode,
        fs_eps=m.fs_eps,
    )


def build_optimizer(cfg: RunConfig, params) -> torch.optim.Optimizer:
    t = cfg.trainer
    if t.optimizer == "adam":
        return torch.optim.Adam(params, lr=t.base_lr, betas=tuple(t.adam_betas), weight_decay=t.weight_decay)
    return torch.optim.SGD(params, lr=t.base_lr, momentum=t.momentum, weight_decay=t.weight_decay)


@functools.lru_cache(maxsize=4)
def _cached_toy(seed: int, toy_fields: tuple) -> ToyData:
    return synth_toy(seed, ToyConfig(*toy_fields))


def toy_data(cfg: RunConfig) -> ToyData:
    fields_ = astuple(cfg.toy.toy_config())
    return _cached_toy(cfg.toy.seed, fields_)


def load_datasets(cfg: RunConfig):
    """``(source, wild, eval_domains)`` for the configured data kind."""
    d = cfg.data
    if d.kind == "toy":
        toy = toy_data(cfg)
        return toy.source, toy.wild, toy.eval_domains()
    if not d.source or not d.wild:
        raise ConfigError("data.source and data.wild are required for folder data")
    mapping = d.mapping or None
    source = load_dataset(d.source, mapping, "source", d.ignore_id)
    wild = load_dataset(d.wild, None, "wild", d.ignore_id)
    return source, wild, eval_datasets(cfg)


def eval_datasets(cfg: RunConfig) -> dict:
    d = cfg.data
    if d.kind == "toy":
        return toy_data(cfg).eval_domains()
    out = {}
    for entry in d.eval:
        if "=" not in entry:
            raise ConfigError(f"data.eval entry {entry!r} is not name=path")
        name, path = entry.split("=", 1)
        out[name.strip()] = load_dataset(path.strip(), d.mapping or None, "eval", d.ignore_id)
    return out


@dataclass
class TrainState:
    cfg: RunConfig
    assembly: NetworkAssembly
    optimizer: torch.optim.Optimizer
    store: ContentStore
    batcher: PairedBatcher
    fs_generator: torch.Generator
    sample_rng: np.random.Generator
    iteration: int = 0
    history: list = field(default_factory=list)


def init_state(cfg: RunConfig, source_ds, wild_ds) -> TrainState:
    seed = cfg.trainer.seed
    torch.manual_seed(seed)
    assembly = build_assembly(cfg)
    optimizer = build_optimizer(cfg, assembly.parameters())
    streams = np.random.SeedSequence(seed).spawn(3)
    batcher = PairedBatcher(
        source_ds, wild_ds, np.random.default_rng(streams[0]), cfg.trainer.batch_size, cfg.data.crop_size,
        (cfg.data.scale_min, cfg.data.scale_max), cfg.data.ignore_id,
    )
    fs_generator = torch.Generator().manual_seed(int(streams[1].generate_state(1)[0]))
    return TrainState(
        cfg, assembly, optimizer, ContentStore(cfg.model.proj_dim, cfg.trainer.store_capacity), batcher,
        fs_generator, np.random.default_rng(streams[2]),
    )


# ---------------------------------------------------------------------------
# one step


def _sample_pair(state: TrainState, src: ProjectedGrid, sty: ProjectedGrid, n: int):
    if state.cfg.trainer.sampling == "random":
        a = random_subsample(src, n, n, state.sample_rng)
    else:
        a = uniform_subsample(src, n, n)
    return a, take(sty, a.index_map, n, n)


def _sample_one(state: TrainState, grid: ProjectedGrid, n: int) -> ProjectedGrid:
    if state.cfg.trainer.sampling == "random":
        return random_subsample(grid, n, n, state.sample_rng)
    return uniform_subsample(grid, n, n)


def labels_at(labels: torch.Tensor, index_map: np.ndarray, grid_h: int, grid_w: int) -> torch.Tensor:
    """Label under each projected-grid position, ``[N, len(index_map)]``."""
    h, w = labels.shape[-2:]
    rows = np.floor((index_map[:, 0] + 0.5) * h / grid_h).astype(np.int64)
    cols = np.floor((index_map[:, 1] + 0.5) * w / grid_w).astype(np.int64)
    return labels[..., torch.as_tensor(rows), torch.as_tensor(cols)]


def _mean_over_images(values):
    kept = [v for v, n in values if n > 0]
    if not kept:
        return values[0][0] * 0.0
    return torch.stack(kept).mean()


def compute_terms(state: TrainState, x_src, y_src, x_wild) -> tuple[LossTerms, dict]:
    cfg = state.cfg
    w: LossWeights = cfg.losses
    t = cfg.trainer
    ignore = cfg.data.ignore_id
    out = state.assembly.forward_training(x_src, x_wild, generator=state.fs_generator)

    # store push precedes retrieval so the store is never empty when queried
    wild = _sample_one(state, out.proj_wild, t.store_grid)
    state.store.push(wild.pixels().reshape(-1, wild.channels))

    terms = LossTerms(weights=w)
    terms.l_orig = seg_ce(out.logits_src, y_src, ignore, from_logits=True)

    with torch.set_grad_enabled(torch.is_grad_enabled() and w.cel > 0):
        anchors, positives = _sample_pair(state, out.proj_src, out.proj_stylized, t.anchor_grid)
        lab = labels_at(y_src, anchors.index_map, out.proj_src.height, out.proj_src.width)
        a_pix, p_pix = anchors.pixels(), positives.pixels()
        sce, wce = [], []
        for b in range(a_pix.shape[0]):
            sce.append(sce_loss(a_pix[b], p_pix[b], lab[b], t.tau, ignore, return_count=True))
            wce.append(wce_loss(a_pix[b], p_pix[b], lab[b], state.store, t.tau, ignore, return_count=True))
        terms.l_sce, terms.l_wce = _mean_over_images(sce), _mean_over_images(wce)
        if w.cel == 0:
            terms.l_sce, terms.l_wce = terms.l_sce.detach(), terms.l_wce.detach()

    with torch.set_grad_enabled(torch.is_grad_enabled() and w.sel > 0):
        terms.l_sel = seg_ce(out.logits_stylized, y_src, ignore, from_logits=True)
        if w.sel == 0:
            terms.l_sel = terms.l_sel.detach()
    with torch.set_grad_enabled(torch.is_grad_enabled() and w.scr > 0):
        terms.l_scr = scr_loss(out.logits_src, out.logits_stylized, from_logits=True)
        if w.scr == 0:
            terms.l_scr = terms.l_scr.detach()
    return terms, {"outputs": out}


def _zero_weighted_total(terms: LossTerms):
    """Weighted sum that skips zero-weight terms, so they cannot reach the gradient even as 0 * nan."""
    w = terms.weights
    total = 0.0
    for weight, value in ((w.orig, terms.l_orig), (w.cel, terms.l_cel), (w.sel, terms.l_sel), (w.scr, terms.l_scr)):
        if weight > 0:
            total = total + weight * value
    return total


def train_step(state: TrainState, pairs, cfg: RunConfig | None = None) -> LossTerms:
    """Forward all branches, update the store, compute every term and take one optimizer step."""
    cfg = cfg or state.cfg
    t = cfg.trainer
    lr = poly_lr(min(state.iteration, t.total_iters), t.total_iters, t.base_lr, t.power) if t.total_iters else t.base_lr
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.assembly.train()
    x_src, y_src, x_wild = collate(pairs)
    terms, _ = compute_terms(state, x_src, y_src, x_wild)
    values = terms.as_floats()
    if not all(math.isfinite(v) for v in values.values()):
        snapshot = {"iteration": state.iteration, "lr": lr, **values}
        raise TrainingDivergedError(f"non-finite loss at iteration {state.iteration}: {values}", snapshot)
    total = _zero_weighted_total(terms)
    state.optimizer.zero_grad(set_to_none=True)
    if torch.is_tensor(total) and total.requires_grad:
        total.backward()
    state.optimizer.step()
    row = {"iter": state.iteration, "lr": lr, **values}
    state.history.append(row)
    state.iteration += 1
    return terms


# ---------------------------------------------------------------------------
# checkpoints


def _optimizer_payload(opt: torch.optim.Optimizer):
    sd = opt.state_dict()
    arrays, scalars = {}, {}
    for idx, st in sd["state"].items():
        for key, value in st.items():
            if torch.is_tensor(value):
                arrays[f"optim.{idx}.{key}"] = value.detach().cpu().numpy().copy()
            else:
                scalars[f"{idx}.{key}"] = value
    return arrays, {"param_groups": sd["param_groups"], "scalars": scalars}


def _load_optimizer(opt: torch.optim.Optimizer, arrays, meta) -> None:
    state: dict = {}
    for k, v in arrays.items():
        if k.startswith("optim."):
            _, idx, key = k.split(".", 2)
            state.setdefault(int(idx), {})[key] = torch.from_numpy(v.copy())
    for k, v in meta["scalars"].items():
        idx, key = k.split(".", 1)
        state.setdefault(int(idx), {})[key] = v
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def _model_meta(cfg: RunConfig, assembly: NetworkAssembly, iteration: int) -> dict:
    return {
        "iteration": iteration,
        "config_digest": config_digest(cfg.as_dict()),
        "num_classes": assembly.num_classes,
        "hook_names": assembly.backbone.hook_names,
        "fs_hooks": list(assembly.fs_hooks),
        "config": cfg.as_dict(),
    }


def save_training_state(path, state: TrainState) -> Path:
    arrays = module_arrays(state.assembly, "model.")
    arrays.update({f"store.{k}": v for k, v in state.store.state_arrays().items()})
    arrays["rng.fs_generator"] = state.fs_generator.get_state().numpy().copy()
    opt_arrays, opt_meta = _optimizer_payload(state.optimizer)
    arrays.update(opt_arrays)
    meta = _model_meta(state.cfg, state.assembly, state.iteration)
    meta.update(kind="training", optimizer=opt_meta, batcher=state.batcher.state(),
                sample_rng=state.sample_rng.bit_generator.state)
    return save_checkpoint(path, arrays, meta)


def restore_training_state(state: TrainState, path) -> TrainState:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "training":
        raise ConfigError(f"{path} is not a training checkpoint")
    load_module_arrays(state.assembly, arrays, "model.")
    state.store.load_state_arrays({k[len("store."):]: v for k, v in arrays.items() if k.startswith("store.")})
    state.fs_generator.set_state(torch.from_numpy(arrays["rng.fs_generator"].copy()))
    _load_optimizer(state.optimizer, arrays, meta["optimizer"])
    state.batcher.load_state(meta["batcher"])
    state.sample_rng.bit_generator.state = meta["sample_rng"]
    state.iteration = int(meta["iteration"])
    return state


def load_inference_model(path):
    """Stripped segmenter from either a training or an inference checkpoint."""
    arrays, meta = load_checkpoint(path)
    cfg = config_mod.from_dict(meta["config"])
    assembly = build_assembly(cfg)
    if meta.get("kind") == "inference":
        load_module_arrays(assembly.segmenter(), arrays, "model.")
    else:
        load_module_arrays(assembly, arrays, "model.")
    return strip_for_inference(assembly), cfg, meta


def load_assembly(path) -> tuple[NetworkAssembly, RunConfig, dict]:
    arrays, meta = load_checkpoint(path)
    cfg = config_mod.from_dict(meta["config"])
    assembly = build_assembly(cfg)
    target = assembly if meta.get("kind") == "training" else assembly.segmenter()
    load_module_arrays(target, arrays, "model.")
    return assembly, cfg, meta


# ---------------------------------------------------------------------------
# full run


@dataclass
class RunResult:
    out_dir: Path
    final_checkpoint: Path
    last_state: Path
    metrics: Path
    state: TrainState
    report: Report | None = None


def _format_row(row: dict) -> list[str]:
    return [str(row["iter"])] + [f"{row[k]:.9g}" for k in METRIC_FIELDS[1:]]


def _open_metrics(path: Path, start_iter: int):
    kept = []
    if start_iter > 0 and path.exists():
        with open(path, newline="") as fh:
            kept = [r for r in csv.DictReader(fh) if int(r["iter"]) < start_iter]
    fh = open(path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(METRIC_FIELDS)
    for r in kept:
        writer.writerow([r[k] for k in METRIC_FIELDS])
    return fh, writer


def run_training(cfg: RunConfig, out_dir, *, resume_from=None, evaluate: bool = True,
                 datasets=None, progress_every: int = 100) -> RunResult:
    """Run ``trainer.total_iters`` steps, writing metrics, checkpoints and the stripped final model."""
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(config_mod.dumps(cfg))
    source, wild, domains = datasets if datasets is not None else load_datasets(cfg)
    state = init_state(cfg, source, wild)
    if resume_from is not None:
        restore_training_state(state, resume_from)
        log.info("resumed from %s at iteration %d", resume_from, state.iteration)
    t = cfg.trainer
    if state.iteration == 0:
        save_training_state(out_dir / "checkpoints" / "ckpt_000000.npz", state)
    metrics_path = out_dir / "metrics.csv"
    fh, writer = _open_metrics(metrics_path, state.iteration)
    try:
        while state.iteration < t.total_iters:
            train_step(state, state.batcher.next_batch())
            writer.writerow(_format_row(state.history[-1]))
            if progress_every and state.iteration % progress_every == 0:
                fh.flush()
                log.info("iter %d total %.4f", state.iteration, state.history[-1]["total"])
            if t.checkpoint_every and state.iteration % t.checkpoint_every == 0:
                save_training_state(out_dir / "checkpoints" / f"ckpt_{state.iteration:06d}.npz", state)
    finally:
        fh.close()
    last = save_training_state(out_dir / "last.npz", state)
    model = strip_for_inference(state.assembly)
    final = save_inference_checkpoint(out_dir / "final.npz", model, _model_meta(cfg, state.assembly, state.iteration))
    report = None
    if evaluate and domains:
        report = evaluate_domains(model, domains, cfg.data.num_classes, cfg.data.ignore_id)
        report.write(out_dir)
    (out_dir / "run.json").write_text(json.dumps({"iterations": state.iteration}, indent=2) + "\n")
    return RunResult(out_dir, final, last, metrics_path, state, report)
