"""End-to-end inference, training, evaluation and ablation harnesses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import cgsr, metrics
from .cam import CamMap, multi_scale_analysis
from .cgsr import PromptSet, binarize_coarse_mask, generate_prompts, refine
from .data import ManipSample, RunConfig
from .imgproc import BinaryMask, Image
from .model import DualBranchModel, EpochStats, train_epoch
from .tensor import OptimState


@dataclass
class LocalizationResult:
    score: float
    cam: CamMap
    coarse: BinaryMask
    prompts: Optional[PromptSet]
    mask: BinaryMask
    refine_error: Optional[str] = None


def analyze_image(
    model: DualBranchModel,
    image: Image,
    scales=(64, 96, 128),
    rho: float = 0.4,
    prompt_mode: str = "box+point",
    refiner: str = "none",
    remote_url: Optional[str] = None,
) -> LocalizationResult:
    """Full localization pipeline for one image: multi-scale fused CAM,
    coarse mask, prompts, refinement.

    An empty coarse mask short-circuits to an empty prediction: no prompts
    are invented. Null prompt mode keeps the coarse mask as the prediction.
    """
    cam, score = multi_scale_analysis(model, image, scales)
    coarse = binarize_coarse_mask(cam, rho, image.width, image.height)
    if prompt_mode == "null" or coarse.count == 0:
        return LocalizationResult(score, cam, coarse, None, BinaryMask(coarse.data.copy()))
    prompts = generate_prompts(cam, coarse, prompt_mode)
    result = refine(image, prompts, coarse, refiner, remote_url=remote_url)
    return LocalizationResult(score, cam, coarse, prompts, result.mask, result.error)


def mean_localization_f1(
    model: DualBranchModel,
    samples: list[ManipSample],
    degrade: Optional[Callable[[Image], Image]] = None,
    **analyze_kwargs,
) -> float:
    """Mean per-image F1 over the manipulated samples (which carry masks)."""
    scores = []
    for s in samples:
        if s.label != 1 or s.mask is None:
            continue
        img = degrade(s.image) if degrade is not None else s.image
        res = analyze_image(model, img, **analyze_kwargs)
        scores.append(metrics.pixel_f1(res.mask, s.mask))
    if not scores:
        raise ValueError("no manipulated samples with ground truth to evaluate")
    return float(np.mean(scores))


def evaluate_dataset(
    model: DualBranchModel, samples: list[ManipSample], **analyze_kwargs
) -> dict:
    """Detection AUC over all samples plus mean localization F1 over the
    manipulated ones."""
    scores, labels, f1s = [], [], []
    for s in samples:
        res = analyze_image(model, s.image, **analyze_kwargs)
        scores.append(res.score)
        labels.append(s.label)
        if s.label == 1 and s.mask is not None:
            f1s.append(metrics.pixel_f1(res.mask, s.mask))
    out = {"n_images": len(samples)}
    if 0 in labels and 1 in labels:
        out["i_auc"] = metrics.image_auc(scores, labels)
    if f1s:
        out["p_f1"] = float(np.mean(f1s))
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def fit(
    samples: list[ManipSample],
    cfg: RunConfig,
    epochs: Optional[int] = None,
    log: Optional[Callable[[int, EpochStats], None]] = None,
) -> tuple[DualBranchModel, list[EpochStats]]:
    """Train a fresh model on (image, label) pairs; masks are never touched."""
    model = DualBranchModel(cfg.model_config(), seed=cfg.seed)
    state = OptimState(lr=cfg.lr, weight_decay=cfg.wd)
    dataset = [(s.image, s.label) for s in samples]
    history: list[EpochStats] = []
    for epoch in range(epochs if epochs is not None else cfg.epochs):
        stats = train_epoch(model, dataset, state, seed=cfg.seed, epoch=epoch, batch_size=cfg.batch)
        state.lr *= cfg.lr_decay
        history.append(stats)
        if log is not None:
            log(epoch, stats)
    return model, history


def _analyze_kwargs(cfg: RunConfig, prompt_mode=None, refiner=None) -> dict:
    return {
        "scales": cfg.scales,
        "rho": cfg.rho,
        "prompt_mode": prompt_mode if prompt_mode is not None else cfg.prompt_mode,
        "refiner": refiner if refiner is not None else cfg.refiner,
        "remote_url": cfg.remote_url,
    }


# ---------------------------------------------------------------------------
# ablation harnesses
# ---------------------------------------------------------------------------


def _eval_row(model, val, cfg, use_cgsr: bool) -> dict:
    if use_cgsr:
        refiner = cfg.refiner if cfg.refiner != "none" else "region"
        kwargs = _analyze_kwargs(cfg, refiner=refiner)
    else:
        kwargs = _analyze_kwargs(cfg, prompt_mode="null", refiner="none")
    return evaluate_dataset(model, val, **kwargs)


def ablate_cabl(train, val, cfg: RunConfig, epochs: Optional[int] = None) -> list[dict]:
    """2x2 table: boundary-aware blocks on/off, refinement on/off."""
    from dataclasses import replace

    rows = []
    models = {}
    for use_cabl in (False, True):
        depth = cfg.blocks if use_cabl else 0
        sub = replace(cfg, cabl_depth=depth)
        models[use_cabl], _ = fit(train, sub, epochs=epochs)
    for use_cabl in (False, True):
        for use_cgsr in (False, True):
            row = {"cabl": use_cabl, "cgsr": use_cgsr}
            row.update(_eval_row(models[use_cabl], val, cfg, use_cgsr))
            rows.append(row)
    return rows


def ablate_depth(train, val, cfg: RunConfig, depths=None, epochs: Optional[int] = None) -> list[dict]:
    """Boundary-aware blocks applied to the first k blocks, k over the
    first-third / two-thirds / all regimes by default."""
    from dataclasses import replace

    if depths is None:
        l = cfg.blocks
        depths = sorted({max(1, l // 3), max(1, (2 * l) // 3), l})
    rows = []
    for depth in depths:
        sub = replace(cfg, cabl_depth=int(depth))
        model, _ = fit(train, sub, epochs=epochs)
        row = {"blocks": f"1-{int(depth)}"}
        row.update(_eval_row(model, val, cfg, use_cgsr=False))
        rows.append(row)
    return rows


def ablate_operator(train, val, cfg: RunConfig, epochs: Optional[int] = None) -> list[dict]:
    """Sobel vs Prewitt edge operators, both metric sets reported."""
    from dataclasses import replace

    rows = []
    for op in ("prewitt", "sobel"):
        sub = replace(cfg, edge_operator=op)
        model, _ = fit(train, sub, epochs=epochs)
        row = {"operator": op}
        row.update(_eval_row(model, val, cfg, use_cgsr=False))
        rows.append(row)
    return rows


def ablate_prompts(val, model: DualBranchModel, cfg: RunConfig) -> list[dict]:
    """Table of mean P-F1 per prompt mode (null / point / box / box+point)."""
    refiner = cfg.refiner if cfg.refiner != "none" else "region"
    return cgsr.ablate_prompt_modes(
        val,
        model,
        refiner,
        scales=cfg.scales,
        rho=cfg.rho,
        remote_url=cfg.remote_url,
    )
