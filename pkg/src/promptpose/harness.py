"""Training loop, evaluation modes, PCK metric, checkpointing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import auxgen, corpus, detector, objective, prototype
from .encoder import build_encoder_bundle, pool_text
from .errors import (CheckpointError, ConfigError, EvaluationError,
                     NumericError)

EVAL_MODES = ("zero_shot", "k_shot", "k_shot_with_text")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PCKConfig:
    rho: float = 0.1

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")


def pck_correct(pred, gt, bbox, cfg=PCKConfig()):
    """True iff the prediction lies within rho * max(bbox edges) of GT."""
    if bbox[2] <= 0 or bbox[3] <= 0:
        raise ValueError("bbox edges must be positive")
    dist = math.hypot(pred[0] - gt[0], pred[1] - gt[1])
    return dist <= cfg.rho * max(bbox[2], bbox[3])


@dataclass
class RunConfig:
    """Everything a training or evaluation run needs, JSON-serializable."""

    encoder: str = "toy"
    encoder_seed: int = 0
    dim: int = 32
    patch: int = 8
    train_episodes: int = 40000
    eval_episodes: int = 1000
    k_shot: int = 1
    n_max: int = 8
    lambda1: float = 1.0
    lambda2: float = 0.002
    lambda3: float = 0.002
    tau: float = 0.05
    lr_adapter: float = 1e-4
    lr_encoder: float = 1e-5
    ftc_repetitions: int = 3
    ftc_eta: int = 1
    ftc_alpha: float = 0.01
    bootstrap_steps: int = 10000
    seed: int = 0
    llm_mode: str = "mock"
    llm_cache: str | None = None
    sigma_vkr: float = 1.0
    sigma_gt: float = 2.0
    upsampler: str = "bilinear"  # "bilinear" | "learned"
    use_visual_prompts: bool = True
    use_aux_keypoints: bool = True
    use_texts: bool = True
    use_aux_texts: bool = True
    use_vv_loss: bool = False
    vt_cross_species: bool = False
    text_template: str = corpus.DEFAULT_TEXT_TEMPLATE
    checkpoint_every: int = 0
    log_path: str | None = None
    audit_path: str | None = None

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown config key: {key!r}")
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)

    def architecture_digest(self):
        arch = {k: getattr(self, k)
                for k in ("encoder", "encoder_seed", "dim", "patch", "upsampler")}
        return hashlib.sha256(
            json.dumps(arch, sort_keys=True).encode()).hexdigest()

    def ftc(self):
        return auxgen.FTCConfig(repetitions=self.ftc_repetitions,
                                eta=self.ftc_eta, alpha=self.ftc_alpha)


class KeypointModel(torch.nn.Module):
    """Encoders, adapters, class-agnostic decoder, and upsampler in one module."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.bundle = build_encoder_bundle(cfg.encoder, seed=cfg.encoder_seed,
                                           dim=cfg.dim, patch=cfg.patch)
        self.image_encoder = self.bundle.image_encoder
        self.visual_adapter = self.bundle.visual_adapter
        self.text_adapter = self.bundle.text_adapter
        self.decoder = detector.HeatmapDecoder(cfg.dim)
        self.up = detector.LearnedUpsampler() if cfg.upsampler == "learned" else None

    # -- feature extraction ------------------------------------------------
    def query_features(self, image, adapted=True):
        return self.bundle.encode_image(image, adapted=adapted)

    def text_vector(self, text, adapted=True):
        return pool_text(self.bundle.encode_text(text, adapted=adapted))

    # -- prototypes ---------------------------------------------------------
    def visual_prototypes(self, ds, episode):
        protos = []
        feature_maps = [self.query_features(corpus.load_image(ds, s))
                        for s in episode.supports]
        for n in episode.keypoint_ids:
            vkrs = [prototype.extract_vkr(fm, s.keypoints[n][:2],
                                          self.cfg.sigma_vkr, source=(k, n))
                    for k, (s, fm) in enumerate(zip(episode.supports, feature_maps))]
            protos.append(prototype.build_vkp(vkrs, keypoint_id=n))
        return protos

    def textual_prototypes(self, episode):
        return [prototype.build_tkp([self.text_vector(text)], keypoint_id=n)
                for n, text in zip(episode.keypoint_ids, episode.texts)]

    # -- heatmaps -----------------------------------------------------------
    def heatmaps(self, protos, xq, modality):
        maps = []
        for proto in protos:
            h = detector.decode(detector.correlate(proto, xq), self.decoder)
            maps.append(detector.upsample(h, self.up))
        return detector.HeatmapGroup(modality=modality, maps=tuple(maps))

    def forward_episode(self, ds, episode, use_visual=None, use_textual=None):
        """Run one episode; returns per-modality groups, the fusion, and protos."""
        use_visual = (len(episode.supports) > 0) if use_visual is None else use_visual
        use_textual = bool(episode.texts) if use_textual is None else use_textual
        xq = self.query_features(corpus.load_image(ds, episode.query))
        out = {"query_features": xq, "visual": None, "textual": None,
               "vkp": None, "tkp": None}
        if use_visual and episode.supports:
            out["vkp"] = self.visual_prototypes(ds, episode)
            out["visual"] = self.heatmaps(out["vkp"], xq, "visual")
        if use_textual and episode.texts:
            out["tkp"] = self.textual_prototypes(episode)
            out["textual"] = self.heatmaps(out["tkp"], xq, "textual")
        out["fused"] = detector.fuse(out["visual"], out["textual"])
        return out

    def predict(self, group):
        stride = float(self.image_encoder.patch)
        return [detector.heatmap_to_coords(h, stride) for h in group.maps]

    def zero_shot_detector(self, ds, query_instance):
        """Closure mapping simple text prompts to coordinate predictions."""
        xq = self.query_features(corpus.load_image(ds, query_instance))
        stride = float(self.image_encoder.patch)

        def detect(prompts):
            coords = []
            for i, text in enumerate(prompts):
                tkp = prototype.build_tkp([self.text_vector(text)], keypoint_id=i)
                h = detector.decode(detector.correlate(tkp, xq), self.decoder)
                h = detector.upsample(h, self.up)
                coords.append(detector.heatmap_to_coords(h, stride))
            return coords

        return detect


def gt_for_points(model, points, grid_side):
    """Ground-truth heatmap group at upsampled resolution for pixel points."""
    side = grid_side * 2
    cell = model.image_encoder.patch / 2.0
    spec = detector.GaussianSpec(sigma_gt=model.cfg.sigma_gt)
    maps = tuple(detector.gt_heatmap(p, spec, side, cell, upsample_factor=2)
                 for p in points)
    return detector.HeatmapGroup(modality="gt", maps=maps)


def evaluate(model, ds, mode, episodes, split, rng, pck=PCKConfig(), k=1,
             n_max=8):
    """Mean PCK (x100) over sampled episodes; pure in (model, ds, mode, seed)."""
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown eval mode: {mode!r}")
    if episodes < 1:
        raise EvaluationError("need at least one evaluation episode")
    if split == "base":
        allowed = ds.schema.base_ids
    elif split == "novel":
        allowed = ds.schema.novel_ids
    elif split == "all":
        allowed = None
    else:
        raise ConfigError(f"unknown keypoint split: {split!r}")
    k_eff = 0 if mode == "zero_shot" else k
    hits = total = 0
    with torch.no_grad():
        for _ in range(episodes):
            ep = corpus.sample_episode(ds, k_eff, n_max, rng, allowed_ids=allowed,
                                       template=model.cfg.text_template)
            use_visual = mode in ("k_shot", "k_shot_with_text")
            use_textual = mode in ("zero_shot", "k_shot_with_text")
            out = model.forward_episode(ds, ep, use_visual, use_textual)
            preds = model.predict(out["fused"])
            for n, pred in zip(ep.keypoint_ids, preds):
                hits += pck_correct(pred, ep.query.keypoints[n][:2],
                                    ep.query.bbox, pck)
                total += 1
    if total == 0:
        raise EvaluationError("evaluation produced no keypoints")
    return 100.0 * hits / total


class _JsonlWriter:
    def __init__(self, path):
        self.path = path
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            open(path, "w").close()

    def write(self, record):
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record) + "\n")


def _episode_loss(model, ds, episode, cfg, gateway, paths, rng, step):
    """Heatmap loss (main + auxiliary) and the prototype sets for one episode."""
    out = model.forward_episode(ds, episode,
                                use_visual=cfg.use_visual_prompts,
                                use_textual=cfg.use_texts)
    grid_side = out["query_features"].side
    gt_points = [episode.query.keypoints[n][:2] for n in episode.keypoint_ids]

    visual_maps = list(out["visual"].maps) if out["visual"] else []
    visual_gts = list(gt_points) if out["visual"] else []
    text_maps = list(out["textual"].maps) if out["textual"] else []
    text_gts = list(gt_points) if out["textual"] else []

    audit = []
    if (cfg.use_aux_keypoints or cfg.use_aux_texts) and episode.supports and paths:
        adapted = step >= cfg.bootstrap_steps
        support = episode.supports[0]
        support_image = corpus.load_image(ds, support)
        # The training branch always uses the current adapted features;
        # FTC similarity uses original features until the bootstrap step.
        support_fm = model.query_features(support_image)
        ftc_fm = support_fm if adapted else model.query_features(support_image,
                                                                 adapted=False)
        ctx = auxgen.FeatureContext(
            support_feature_map=ftc_fm,
            text_feature_fn=lambda t: model.text_vector(
                t, adapted=adapted).detach(),
            feature_source="adapted" if adapted else "original",
            sigma=cfg.sigma_vkr,
            support_mask=corpus.load_mask(ds, support),
            query_mask=corpus.load_mask(ds, episode.query))
        for path in paths(episode.species):
            if not set(path.endpoint_ids) <= set(episode.keypoint_ids):
                continue
            pair = auxgen.make_auxiliary_pair(episode, path, cfg.ftc(), gateway,
                                              ctx, rng)
            if pair is None:
                continue
            audit.append(pair.provenance)
            xq = out["query_features"]
            if cfg.use_aux_keypoints:
                vkr = prototype.extract_vkr(support_fm, pair.support_point,
                                            cfg.sigma_vkr)
                proto = prototype.build_vkp([vkr])
                h = detector.upsample(
                    detector.decode(detector.correlate(proto, xq), model.decoder),
                    model.up)
                visual_maps.append(h)
                visual_gts.append(pair.query_point)
            if cfg.use_aux_texts and pair.text is not None:
                text = cfg.text_template.format(keypoint=pair.text,
                                                category=episode.species)
                tkp = prototype.build_tkp([model.text_vector(text)])
                h = detector.upsample(
                    detector.decode(detector.correlate(tkp, xq), model.decoder),
                    model.up)
                text_maps.append(h)
                text_gts.append(pair.query_point)

    terms = []
    for maps, gts, modality in ((visual_maps, visual_gts, "visual"),
                                (text_maps, text_gts, "textual")):
        if maps:
            group = detector.HeatmapGroup(modality=modality, maps=tuple(maps))
            gt = gt_for_points(model, gts, grid_side)
            terms.append(objective.heatmap_loss(
                group if modality == "visual" else None,
                group if modality == "textual" else None, gt))
    lkp = sum(terms) / len(terms) if terms else torch.tensor(0.0)
    return lkp, out, audit


def train(cfg, ds, gateway=None, paths=None, model=None):
    """Train on episode pairs; returns the trained model.

    ``paths`` maps a species name to its predefined interpolation paths.
    Aborts with diagnostics on divergence (non-finite loss).
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = KeypointModel(cfg)
    loss_cfg = objective.LossConfig(lambda1=cfg.lambda1, lambda2=cfg.lambda2,
                                    lambda3=cfg.lambda3, tau=cfg.tau)
    groups = [{"params": list(model.visual_adapter.parameters())
               + list(model.text_adapter.parameters())
               + list(model.decoder.parameters())
               + (list(model.up.parameters()) if model.up is not None else []),
               "lr": cfg.lr_adapter}]
    if model.bundle.finetune_projection:
        groups.append({"params": model.image_encoder.finetunable_parameters(),
                       "lr": cfg.lr_encoder})
    opt = torch.optim.Adam(groups)
    log = _JsonlWriter(cfg.log_path)
    audit_log = _JsonlWriter(cfg.audit_path)
    paths = paths or (lambda species: [])

    allowed = ds.schema.base_ids  # novel keypoints are never trained on
    loss_history = []
    for step in range(cfg.train_episodes):
        pair = corpus.sample_episode_pair(ds, max(cfg.k_shot, 1), cfg.n_max, rng,
                                          allowed_ids=allowed,
                                          template=cfg.text_template)
        lkps, tkps, vkps = [], [], []
        audits = []
        for ep in (pair.first, pair.second):
            lkp, out, audit = _episode_loss(model, ds, ep, cfg, gateway, paths,
                                            rng, step)
            lkps.append(lkp)
            audits.extend(audit)
            if out["tkp"]:
                tkps.append(out["tkp"])
            if out["vkp"]:
                vkps.append(out["vkp"])
        lkp = sum(lkps) / len(lkps)

        zero = torch.tensor(0.0, dtype=torch.float64)
        ltt = (objective.contrastive_tt(tkps[0], tkps[1], cfg.tau)
               if len(tkps) == 2 and len(tkps[0]) > 0 else zero)
        lvt = zero
        if cfg.lambda3 > 0 and vkps and tkps:
            if cfg.vt_cross_species and len(vkps) == 2 and len(tkps) == 2:
                lvt = 0.5 * (objective.contrastive_vt(vkps[0], tkps[1], cfg.tau)
                             + objective.contrastive_vt(vkps[1], tkps[0], cfg.tau))
            else:
                pairs = [(v, t) for v, t in zip(vkps, tkps)]
                lvt = sum(objective.contrastive_vt(v, t, cfg.tau)
                          for v, t in pairs) / len(pairs)
        total = objective.total_loss(lkp, ltt, lvt, loss_cfg)
        if cfg.use_vv_loss and len(vkps) == 2:
            total = total + cfg.lambda2 * objective.contrastive_tt(
                vkps[0], vkps[1], cfg.tau)

        if not torch.isfinite(total):
            raise NumericError(
                f"training diverged at step {step}: loss={float(total)!r}, "
                f"lkp={float(lkp)!r}")
        opt.zero_grad()
        total.backward()
        opt.step()

        loss_history.append(float(total.detach()))
        log.write({"step": step, "loss": loss_history[-1],
                   "lkp": float(lkp.detach()) if torch.is_tensor(lkp) else float(lkp),
                   "ltt": float(ltt.detach()), "lvt": float(lvt.detach())})
        for prov in audits:
            audit_log.write({"step": step, **_jsonable(prov)})
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 \
                and cfg.log_path:
            save_checkpoint(model, cfg, step + 1,
                            cfg.log_path + f".ckpt{step + 1}.pt")

    model.loss_history = loss_history
    return model


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def save_checkpoint(model, cfg, step, path):
    torch.save({"version": CHECKPOINT_VERSION,
                "state_dict": model.state_dict(),
                "config": cfg.to_dict(),
                "digest": cfg.architecture_digest(),
                "step": step}, path)


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; fails loudly on any mismatch."""
    blob = torch.load(path, weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version: {blob.get('version')}")
    cfg = RunConfig.from_dict(blob["config"])
    if cfg.architecture_digest() != blob["digest"]:
        raise CheckpointError("checkpoint digest does not match its config")
    model = KeypointModel(cfg)
    try:
        model.load_state_dict(blob["state_dict"], strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"architecture mismatch: {e}") from e
    return model, cfg, blob["step"]
