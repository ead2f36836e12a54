"""Command-line orchestration: dataset creation, the three training stages,
generation, evaluation protocols, and slice rendering.

Every command works inside a run directory (--out). Outputs of each stage are
the inputs of the next; a command never mutates an earlier stage's outputs,
and its own partial outputs are removed if it fails. Exit codes: 0 success,
1 runtime failure, 2 usage error, 3 config or stage-dependency error.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoints import CheckpointError, load_checkpoint, save_checkpoint
from .config import (ConfigError, RunConfig, apply_overrides, build_config,
                     config_snapshot, load_config, resolved_text)
from .contrastive import (ClipModel, ClipTrainConfig, default_prompt_pairs,
                          map_at_k, rank_gallery, recall_at_k, relevance_sets,
                          train_clip, zero_shot_classify)
from .diffusion import (DiffusionTrainConfig, GuidanceConfig, build_schedule,
                        train_diffusion)
from .evalsuite import (BackboneTrainConfig, classify, data_utility_experiment,
                        extract_slices, features_2d, features_3d, fid_2_5d,
                        fid_3d, metric_row, permutation_null, train_backbone_2d,
                        train_backbone_3d, train_factual_classifier)
from .phantoms import class_names, make_corpus, read_manifest
from .pipeline import generate_volumes
from .textenc import (TextEncoder, Vocabulary, batch_tokenize, build_vocab,
                      encode_reports)
from .unet import DenoiserUNet
from .vae import (LatentCache, VaeTrainConfig, VolumeVae, precompute_latents,
                  train_vae)
from .visionenc import VisionEncoder
from .volumes import load_volume, save_volume

_STAGE_OFFSET = {"clip": 1, "vae": 2, "diffusion": 3, "generate": 4,
                 "classifier": 5, "utility": 6, "unaligned": 7, "backbone": 8}


class StageDependencyError(RuntimeError):
    """A command was run before the stage that produces its inputs."""

    def __init__(self, command: str, missing: str, producer: str):
        super().__init__(
            f"{command}: missing {missing}; run `{producer}` first")


def stage_seed(base: int, stage: str) -> int:
    return int(np.random.SeedSequence(
        [int(base), _STAGE_OFFSET[stage]]).generate_state(1)[0] % (2 ** 31))


def _torch_dtype(cfg: RunConfig) -> torch.dtype:
    return torch.float64 if cfg.dtype == "float64" else torch.float32


# ---------------------------------------------------------------------------
# run-directory layout

def corpus_dir(out: Path) -> Path:
    return out / "corpus"


def artifact(out: Path, name: str) -> Path:
    return out / name


def _require(path: Path, command: str, producer: str) -> Path:
    if not path.exists():
        raise StageDependencyError(command, str(path), producer)
    return path


class OutputTracker:
    """Records paths a command creates so they can be removed on failure."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path: Path) -> Path:
        self.paths.append(Path(path))
        return path

    def cleanup(self) -> None:
        for path in self.paths:
            if path.is_dir():
                shutil.rmtree(path, ignore_errors=True)
            elif path.exists():
                path.unlink()


# ---------------------------------------------------------------------------
# model construction and checkpoint round trips

def text_descriptor(cfg: RunConfig, vocab_size: int) -> dict:
    return {"vocab_size": vocab_size, "max_len": cfg.max_text_len,
            "width": cfg.encoder_width, "layers": cfg.encoder_layers,
            "heads": cfg.encoder_heads, "out_dim": cfg.embed_dim}


def vision_descriptor(cfg: RunConfig) -> dict:
    g = cfg.grid_size
    return {"volume_shape": [g, g, g], "patch": cfg.patch_size,
            "width": cfg.encoder_width, "layers": cfg.encoder_layers,
            "heads": cfg.encoder_heads, "out_dim": cfg.embed_dim}


def vae_descriptor(cfg: RunConfig) -> dict:
    return {"latent_channels": 4, "base_width": cfg.vae_base_width}


def denoiser_descriptor(cfg: RunConfig) -> dict:
    return {"latent_channels": 4, "base_width": cfg.unet_base_width,
            "context_dim": cfg.embed_dim, "heads": cfg.encoder_heads,
            "blocks_per_level": 2}


def build_clip(cfg: RunConfig, vocab_size: int) -> ClipModel:
    text = TextEncoder(vocab_size, max_len=cfg.max_text_len,
                       width=cfg.encoder_width, layers=cfg.encoder_layers,
                       heads=cfg.encoder_heads, out_dim=cfg.embed_dim)
    g = cfg.grid_size
    vision = VisionEncoder(volume_shape=(g, g, g), patch=cfg.patch_size,
                           width=cfg.encoder_width, layers=cfg.encoder_layers,
                           heads=cfg.encoder_heads, out_dim=cfg.embed_dim)
    return ClipModel(text, vision, tau_init=cfg.tau_init).to(_torch_dtype(cfg))


def build_vae(cfg: RunConfig) -> VolumeVae:
    return VolumeVae(latent_channels=4,
                     base_width=cfg.vae_base_width).to(_torch_dtype(cfg))


def build_denoiser(cfg: RunConfig) -> DenoiserUNet:
    return DenoiserUNet(latent_channels=4, base_width=cfg.unet_base_width,
                        context_dim=cfg.embed_dim, heads=cfg.encoder_heads,
                        blocks_per_level=2).to(_torch_dtype(cfg))


def load_clip(out: Path, cfg: RunConfig, command: str
              ) -> tuple[ClipModel, Vocabulary]:
    vocab_path = _require(artifact(out, "vocab.txt"), command, "train-clip")
    ckpt_path = _require(artifact(out, "clip.pt"), command, "train-clip")
    vocab = Vocabulary.load(vocab_path)
    payload = load_checkpoint(ckpt_path, "clip",
                              {"text": text_descriptor(cfg, len(vocab.tokens())),
                               "vision": vision_descriptor(cfg),
                               "tau_init": cfg.tau_init})
    model = build_clip(cfg, len(vocab.tokens()))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, vocab


def load_vae(out: Path, cfg: RunConfig, command: str) -> VolumeVae:
    path = _require(artifact(out, "vae.pt"), command, "train-vae")
    payload = load_checkpoint(path, "vae", vae_descriptor(cfg))
    model = build_vae(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def load_denoiser(out: Path, cfg: RunConfig, command: str) -> DenoiserUNet:
    path = _require(artifact(out, "denoiser.pt"), command, "train-diffusion")
    payload = load_checkpoint(path, "denoiser", denoiser_descriptor(cfg))
    model = build_denoiser(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


# ---------------------------------------------------------------------------
# corpus access

def load_corpus(out: Path, cfg: RunConfig, command: str):
    """Returns (records, volumes tensor (N, g, g, g), labels (N, K) array)."""
    manifest = _require(corpus_dir(out) / "manifest.jsonl", command, "make-data")
    records = read_manifest(manifest)
    vols = np.stack([load_volume(corpus_dir(out) / r["volume"]).voxels
                     for r in records])
    labels = np.array([r["labels"] for r in records], dtype=np.int64)
    volumes = torch.as_tensor(vols, dtype=_torch_dtype(cfg))
    return records, volumes, labels


def train_test_split(records, volumes, labels, cfg: RunConfig):
    n_train = len(records) - cfg.holdout_size
    train = (records[:n_train], volumes[:n_train], labels[:n_train])
    test = (records[n_train:], volumes[n_train:], labels[n_train:])
    return train, test


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# commands

def cmd_make_data(cfg: RunConfig, args, out: Path, tracker: OutputTracker):
    target = corpus_dir(out)
    tracker.add(target)
    g = cfg.grid_size
    make_corpus(target, cfg.corpus_size, cfg.num_classes, (g, g, g),
                cfg.seed, cfg.prevalence)
    print(f"wrote {cfg.corpus_size} phantoms under {target}")


def cmd_train_clip(cfg: RunConfig, args, out: Path, tracker: OutputTracker):
    records, volumes, labels = load_corpus(out, cfg, "train-clip")
    (train_records, train_volumes, _), _ = train_test_split(
        records, volumes, labels, cfg)
    texts = [r["text"] for r in train_records]
    vocab = build_vocab(texts)
    vocab_path = tracker.add(artifact(out, "vocab.txt"))
    vocab.save(vocab_path)

    seed = stage_seed(cfg.seed, "clip")
    torch.manual_seed(seed)
    model = build_clip(cfg, len(vocab.tokens()))
    ids, masks = batch_tokenize(texts, vocab, cfg.max_text_len)
    train_config = ClipTrainConfig(
        epochs=cfg.clip_epochs, batch_size=cfg.clip_batch_size,
        learning_rate=cfg.clip_lr, weight_decay=cfg.weight_decay, seed=seed)
    history = train_clip(model, train_volumes, ids, masks, train_config)
    ckpt = tracker.add(artifact(out, "clip.pt"))
    save_checkpoint(ckpt, "clip",
                    {"text": text_descriptor(cfg, len(vocab.tokens())),
                     "vision": vision_descriptor(cfg),
                     "tau_init": cfg.tau_init},
                    model.state_dict(), config_snapshot(cfg))
    print(f"clip: {len(history)} epochs, final loss {history[-1]:.4f}")


def cmd_train_vae(cfg: RunConfig, args, out: Path, tracker: OutputTracker):
    records, volumes, labels = load_corpus(out, cfg, "train-vae")
    (_, train_volumes, _), _ = train_test_split(records, volumes, labels, cfg)
    seed = stage_seed(cfg.seed, "vae")
    torch.manual_seed(seed)
    model = build_vae(cfg)
    train_config = VaeTrainConfig(
        epochs=cfg.vae_epochs, batch_size=cfg.vae_batch_size,
        learning_rate=cfg.vae_lr, kl_weight=cfg.kl_weight,
        kl_warmup_fraction=cfg.kl_warmup_fraction, seed=seed)
    history = train_vae(model, train_volumes, train_config)
    ckpt = tracker.add(artifact(out, "vae.pt"))
    save_checkpoint(ckpt, "vae", vae_descriptor(cfg), model.state_dict(),
                    config_snapshot(cfg))
    print(f"vae: {len(history)} epochs, final recon {history[-1]['recon']:.4f}")


def cmd_cache_latents(cfg: RunConfig, args, out: Path, tracker: OutputTracker):
    records, volumes, labels = load_corpus(out, cfg, "cache-latents")
    (train_records, train_volumes, _), _ = train_test_split(
        records, volumes, labels, cfg)
    vae = load_vae(out, cfg, "cache-latents")
    cache = precompute_latents(vae, [r["id"] for r in train_records],
                               train_volumes, batch_size=cfg.eval_batch_size)
    path = tracker.add(artifact(out, "latents.bin"))
    cache.save(path)
    print(f"cached {len(cache)} latents at {path}")


def cmd_train_diffusion(cfg: RunConfig, args, out: Path, tracker: OutputTracker):
    records, volumes, labels = load_corpus(out, cfg, "train-diffusion")
    (train_records, _, _), _ = train_test_split(records, volumes, labels, cfg)
    cache_path = _require(artifact(out, "latents.bin"), "train-diffusion",
                          "cache-latents")
    clip, vocab = load_clip(out, cfg, "train-diffusion")
    cache = LatentCache.load(cache_path)
    by_id = {r["id"]: r["text"] for r in train_records}
    try:
        texts = [by_id[i] for i in cache.ids]
    except KeyError as exc:
        raise StageDependencyError("train-diffusion",
                                   f"latent for unknown corpus id {exc}",
                                   "cache-latents") from exc
    with torch.no_grad():
        contexts = encode_reports(texts, vocab, clip.text_encoder)
        null = _null_embedding(clip, vocab)

    seed = stage_seed(cfg.seed, "diffusion")
    torch.manual_seed(seed)
    denoiser = build_denoiser(cfg)
    schedule = build_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    train_config = DiffusionTrainConfig(
        epochs=cfg.diffusion_epochs, batch_size=cfg.diffusion_batch_size,
        learning_rate=cfg.diffusion_lr, lr_power=cfg.lr_power,
        p_drop=cfg.p_drop, use_latent_mean=cfg.use_latent_mean, seed=seed)
    history = train_diffusion(denoiser, cache, contexts, null, schedule,
                              train_config)
    ckpt = tracker.add(artifact(out, "denoiser.pt"))
    save_checkpoint(ckpt, "denoiser", denoiser_descriptor(cfg),
                    denoiser.state_dict(), config_snapshot(cfg))
    print(f"diffusion: {len(history)} epochs, final loss {history[-1]:.4f}")


def _null_embedding(clip: ClipModel, vocab: Vocabulary) -> torch.Tensor:
    from .textenc import null_condition_embedding
    return null_condition_embedding(vocab, clip.text_encoder)


def _generate_batch(texts: list[str], clip, vocab, vae, denoiser, cfg: RunConfig,
                    generator: torch.Generator, scale: float | None = None
                    ) -> torch.Tensor:
    """Batched text-conditioned generation, returned as an (N, g, g, g) tensor."""
    schedule = build_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    guidance = GuidanceConfig(
        scale=cfg.guidance_scale if scale is None else scale,
        p_drop=cfg.p_drop, eta=cfg.eta)
    g = cfg.grid_size
    chunks = []
    for i in range(0, len(texts), cfg.eval_batch_size):
        vols = generate_volumes(texts[i:i + cfg.eval_batch_size], clip, vocab,
                                vae, denoiser, schedule, guidance, generator,
                                volume_shape=(g, g, g))
        chunks.append(torch.stack(
            [torch.as_tensor(v.voxels, dtype=_torch_dtype(cfg)) for v in vols]))
    return torch.cat(chunks)


def cmd_generate(cfg: RunConfig, args, out: Path, tracker: OutputTracker):
    clip, vocab = load_clip(out, cfg, "generate")
    vae = load_vae(out, cfg, "generate")
    denoiser = load_denoiser(out, cfg, "generate")

    if args.prompt:
        texts = list(args.prompt)
    else:
        manifest = args.manifest or (corpus_dir(out) / "manifest.jsonl")
        records = read_manifest(_require(Path(manifest), "generate", "make-data"))
        texts = [r["text"] for r in records]
        if args.limit:
            texts = texts[: args.limit]
    if not texts:
        raise ConfigError(["generate: no prompts given"])

    target = tracker.add(out / "generated")
    vol_dir = target / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    generator = torch.Generator().manual_seed(stage_seed(cfg.seed, "generate"))
    schedule = build_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    guidance = GuidanceConfig(scale=cfg.guidance_scale, p_drop=cfg.p_drop,
                              eta=cfg.eta)
    g = cfg.grid_size
    manifest_path = target / "manifest.jsonl"
    with open(manifest_path, "w") as f:
        for i in range(0, len(texts), cfg.eval_batch_size):
            batch = texts[i:i + cfg.eval_batch_size]
            vols = generate_volumes(batch, clip, vocab, vae, denoiser,
                                    schedule, guidance, generator,
                                    volume_shape=(g, g, g))
            for j, (text, vol) in enumerate(zip(batch, vols)):
                rel = os.path.join("volumes", f"{i + j:06d}.vox")
                save_volume(vol, target / rel)
                f.write(json.dumps({
                    "id": f"{i + j:06d}", "volume": rel, "text": text,
                    "guidance_scale": cfg.guidance_scale, "seed": cfg.seed,
                }) + "\n")
    print(f"generated {len(texts)} volumes under {target}")


def cmd_eval_zeroshot(cfg: RunConfig, args, out: Path, tracker: OutputTracker):
    clip, vocab = load_clip(out, cfg, "eval-zeroshot")
    records, volumes, labels = load_corpus(out, cfg, "eval-zeroshot")
    _, (test_records, test_volumes, test_labels) = train_test_split(
        records, volumes, labels, cfg)
    with torch.no_grad():
        h_x = torch.cat([clip.vision_encoder(test_volumes[i:i + cfg.eval_batch_size])
                         for i in range(0, len(test_records), cfg.eval_batch_size)])
    pairs = default_prompt_pairs(class_names(cfg.num_classes))
    probs = zero_shot_classify(h_x, pairs, clip, vocab)
    row = metric_row(probs, test_labels)
    accuracy = float(np.mean((probs > 0.5).astype(int) == test_labels))
    null_mean, null_std = permutation_null(probs, test_labels, "auc_macro",
                                           trials=cfg.permutation_trials,
                                           seed=cfg.seed)
    report = {"metrics": row, "accuracy": accuracy,
              "null_auc_macro": {"mean": null_mean, "std": null_std},
              "num_test": len(test_records)}
    path = tracker.add(out / "eval" / "zeroshot.json")
    _write_json(path, report)
    print(f"zero-shot auc_macro {row['auc_macro']:.3f} "
          f"(null {null_mean:.3f} ± {null_std:.3f})")


def cmd_eval_retrieval(cfg: RunConfig, args, out: Path, tracker: OutputTracker):
    clip, vocab = load_clip(out, cfg, "eval-retrieval")
    records, volumes, labels = load_corpus(out, cfg, "eval-retrieval")
    _, (test_records, test_volumes, test_labels) = train_test_split(
        records, volumes, labels, cfg)
    texts = [r["text"] for r in test_records]
    with torch.no_grad():
        h_x = torch.cat([clip.vision_encoder(test_volumes[i:i + cfg.eval_batch_size])
                         for i in range(0, len(texts), cfg.eval_batch_size)])
        h_r = encode_reports(texts, vocab, clip.text_encoder)
    rankings = [rank_gallery(h_r[i], h_x) for i in range(len(texts))]
    relevance = relevance_sets(test_labels, test_labels, exclude_self=False)
    k = cfg.retrieval_k
    report = {
        "gallery_size": len(texts),
        "k": k,
        "recall_at_k": recall_at_k(rankings, list(range(len(texts))), k),
        "map_at_k": map_at_k(rankings, relevance, k),
        "random_recall_baseline": k / len(texts),
    }
    path = tracker.add(out / "eval" / "retrieval.json")
    _write_json(path, report)
    print(f"recall@{k} {report['recall_at_k']:.3f} "
          f"(random {report['random_recall_baseline']:.3f})")


def _train_factual(cfg: RunConfig, train_volumes, train_labels) -> object:
    seed = stage_seed(cfg.seed, "classifier")
    config = BackboneTrainConfig(epochs=cfg.classifier_epochs,
                                 batch_size=cfg.eval_batch_size, seed=seed)
    return train_factual_classifier(
        train_volumes, torch.as_tensor(train_labels, dtype=torch.float32),
        cfg.num_classes, config)


def cmd_eval_factual(cfg: RunConfig, args, out: Path, tracker: OutputTracker):
    clip, vocab = load_clip(out, cfg, "eval-factual")
    vae = load_vae(out, cfg, "eval-factual")
    denoiser = load_denoiser(out, cfg, "eval-factual")
    records, volumes, labels = load_corpus(out, cfg, "eval-factual")
    (train_records, train_volumes, train_labels), \
        (test_records, test_volumes, test_labels) = train_test_split(
            records, volumes, labels, cfg)
    classifier = _train_factual(cfg, train_volumes, train_labels)
    texts = [r["text"] for r in test_records]

    gen = torch.Generator().manual_seed(stage_seed(cfg.seed, "generate"))
    generated = _generate_batch(texts, clip, vocab, vae, denoiser, cfg, gen)
    gen_uncond = torch.Generator().manual_seed(stage_seed(cfg.seed, "generate"))
    uncond = _generate_batch(texts, clip, vocab, vae, denoiser, cfg,
                             gen_uncond, scale=0.0)

    # same reports through a never-aligned (randomly initialized) text encoder
    torch.manual_seed(stage_seed(cfg.seed, "unaligned"))
    unaligned_clip = build_clip(cfg, len(vocab.tokens()))
    unaligned_clip.vision_encoder = clip.vision_encoder
    unaligned_clip.eval()
    gen_ablate = torch.Generator().manual_seed(stage_seed(cfg.seed, "generate"))
    ablated = _generate_batch(texts, unaligned_clip, vocab, vae, denoiser,
                              cfg, gen_ablate)

    rows = {}
    rows["real"] = metric_row(classify(classifier, test_volumes), test_labels)
    gen_scores = classify(classifier, generated)
    rows["generated"] = metric_row(gen_scores, test_labels)
    rows["unconditional_control"] = metric_row(
        classify(classifier, uncond), test_labels)
    rows["unaligned_text_encoder"] = metric_row(
        classify(classifier, ablated), test_labels)
    null_mean, null_std = permutation_null(gen_scores, test_labels, "auc_macro",
                                           trials=cfg.permutation_trials,
                                           seed=cfg.seed)
    report = {"rows": rows,
              "null_auc_macro": {"mean": null_mean, "std": null_std}}
    path = tracker.add(out / "eval" / "factual.json")
    _write_json(path, report)
    print(f"factual auc_macro: generated {rows['generated']['auc_macro']:.3f}, "
          f"uncond {rows['unconditional_control']['auc_macro']:.3f}, "
          f"real {rows['real']['auc_macro']:.3f}")


def cmd_sweep_guidance(cfg: RunConfig, args, out: Path, tracker: OutputTracker):
    clip, vocab = load_clip(out, cfg, "sweep-guidance")
    vae = load_vae(out, cfg, "sweep-guidance")
    denoiser = load_denoiser(out, cfg, "sweep-guidance")
    records, volumes, labels = load_corpus(out, cfg, "sweep-guidance")
    (_, train_volumes, train_labels), (test_records, _, test_labels) = \
        train_test_split(records, volumes, labels, cfg)
    classifier = _train_factual(cfg, train_volumes, train_labels)
    texts = [r["text"] for r in test_records]
    scales = [float(s) for s in args.scales.split(",")]

    rows = []
    for w in scales:
        gen = torch.Generator().manual_seed(stage_seed(cfg.seed, "generate"))
        generated = _generate_batch(texts, clip, vocab, vae, denoiser, cfg,
                                    gen, scale=w)
        scores = classify(classifier, generated)
        row = {"w": w}
        row.update(metric_row(scores, test_labels))
        rows.append(row)
    path = tracker.add(out / "eval" / "guidance.json")
    _write_json(path, {"rows": rows})
    for row in rows:
        print(f"w={row['w']:g}: precision_macro {row['precision_macro']:.3f} "
              f"auc_macro {row['auc_macro']:.3f}")


def cmd_eval_fid(cfg: RunConfig, args, out: Path, tracker: OutputTracker):
    records, volumes, labels = load_corpus(out, cfg, "eval-fid")
    (train_records, train_volumes, train_labels), \
        (_, test_volumes, _) = train_test_split(records, volumes, labels, cfg)
    gen_manifest = _require(out / "generated" / "manifest.jsonl",
                            "eval-fid", "generate")
    gen_records = read_manifest(gen_manifest)
    gen_volumes = [load_volume(out / "generated" / r["volume"]).voxels
                   for r in gen_records]

    seed = stage_seed(cfg.seed, "backbone")
    backbone_config = BackboneTrainConfig(epochs=cfg.classifier_epochs,
                                          batch_size=cfg.eval_batch_size,
                                          seed=seed)
    slices, slice_labels = [], []
    for vol, lab in zip(train_volumes, train_labels):
        for s in extract_slices(vol.numpy(), "axial", stride=4):
            slices.append(s)
            slice_labels.append(lab)
    backbone_2d = train_backbone_2d(
        torch.as_tensor(np.stack(slices), dtype=torch.float32),
        torch.as_tensor(np.stack(slice_labels), dtype=torch.float32),
        cfg.num_classes, backbone_config)
    backbone_3d = train_backbone_3d(
        train_volumes.to(torch.float32),
        torch.as_tensor(train_labels, dtype=torch.float32),
        cfg.num_classes, backbone_config)

    real = [v.numpy().astype(np.float32) for v in test_volumes]
    gen = [np.asarray(v, dtype=np.float32) for v in gen_volumes]
    report = {
        "fid_2_5d": fid_2_5d(real, gen, lambda s: features_2d(backbone_2d, s)),
        "fid_3d": fid_3d(real, gen, lambda v: features_3d(backbone_3d, v)),
        "num_real": len(real), "num_generated": len(gen),
    }
    path = tracker.add(out / "eval" / "fid.json")
    _write_json(path, report)
    print(f"fid_3d {report['fid_3d']:.3f}, "
          f"fid_2.5d avg {report['fid_2_5d']['average']:.3f}")


def cmd_data_utility(cfg: RunConfig, args, out: Path, tracker: OutputTracker):
    clip, vocab = load_clip(out, cfg, "data-utility")
    vae = load_vae(out, cfg, "data-utility")
    denoiser = load_denoiser(out, cfg, "data-utility")
    records, volumes, labels = load_corpus(out, cfg, "data-utility")
    (train_records, train_volumes, train_labels), \
        (_, test_volumes, test_labels) = train_test_split(
            records, volumes, labels, cfg)
    n = min(cfg.utility_size, len(train_records))
    texts = [r["text"] for r in train_records[:n]]
    gen = torch.Generator().manual_seed(stage_seed(cfg.seed, "utility"))
    synthetic = _generate_batch(texts, clip, vocab, vae, denoiser, cfg, gen)
    synth_labels = torch.as_tensor(train_labels[:n], dtype=torch.float32)

    config = BackboneTrainConfig(epochs=cfg.classifier_epochs,
                                 batch_size=cfg.eval_batch_size,
                                 seed=stage_seed(cfg.seed, "utility"))
    result = data_utility_experiment(
        train_volumes[:n].to(torch.float32),
        torch.as_tensor(train_labels[:n], dtype=torch.float32),
        synthetic.to(torch.float32), synth_labels,
        test_volumes.to(torch.float32), test_labels, config)
    synth_scores = classify(
        train_factual_classifier(synthetic.to(torch.float32), synth_labels,
                                 cfg.num_classes, config),
        test_volumes.to(torch.float32))
    null_mean, null_std = permutation_null(synth_scores, test_labels,
                                           "auc_macro",
                                           trials=cfg.permutation_trials,
                                           seed=cfg.seed)
    report = {"rows": result.rows,
              "null_auc_macro": {"mean": null_mean, "std": null_std}}
    path = tracker.add(out / "eval" / "data_utility.json")
    _write_json(path, report)
    for name, row in result.rows.items():
        print(f"{name}: auc_macro {row['auc_macro']:.3f}")


def _montage(slices: list[np.ndarray]) -> np.ndarray:
    cols = int(np.ceil(np.sqrt(len(slices))))
    rows = int(np.ceil(len(slices) / cols))
    h, w = slices[0].shape
    canvas = np.zeros((rows * h, cols * w), dtype=np.float64)
    for i, s in enumerate(slices):
        r, c = divmod(i, cols)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = s
    return canvas


def _write_pgm(path: Path, image: np.ndarray) -> None:
    lo, hi = float(image.min()), float(image.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = ((image - lo) * scale).round().astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def cmd_render_slices(cfg, args, out: Path, tracker: OutputTracker):
    vol = load_volume(args.volume)
    planes = args.planes.split(",")
    target = out / "renders"
    target.mkdir(parents=True, exist_ok=True)
    stem = Path(args.volume).stem
    for plane in planes:
        slices = extract_slices(vol.voxels, plane, stride=args.stride)
        path = tracker.add(target / f"{stem}_{plane}.pgm")
        _write_pgm(path, _montage(slices))
        print(f"wrote {path}")


COMMANDS = {
    "make-data": cmd_make_data,
    "train-clip": cmd_train_clip,
    "train-vae": cmd_train_vae,
    "cache-latents": cmd_cache_latents,
    "train-diffusion": cmd_train_diffusion,
    "generate": cmd_generate,
    "eval-zeroshot": cmd_eval_zeroshot,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-factual": cmd_eval_factual,
    "eval-fid": cmd_eval_fid,
    "sweep-guidance": cmd_sweep_guidance,
    "data-utility": cmd_data_utility,
    "render-slices": cmd_render_slices,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelgen",
        description="Text-conditioned 3D volume generation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=(name != "render-slices"),
                       help="flat key=value config file")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")
        if name == "generate":
            p.add_argument("--prompt", action="append", default=[],
                           help="report text to condition on (repeatable)")
            p.add_argument("--manifest", default=None,
                           help="take prompts from a corpus manifest")
            p.add_argument("--limit", type=int, default=0,
                           help="generate only the first N manifest prompts")
        if name == "sweep-guidance":
            p.add_argument("--scales", default="0,1,2.5,5,10",
                           help="comma-separated guidance scales")
        if name == "render-slices":
            p.add_argument("--volume", required=True, help="volume file to render")
            p.add_argument("--planes", default="axial,coronal,sagittal")
            p.add_argument("--stride", type=int, default=4)
    return parser


def _resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config, args.override)
    else:
        raw = apply_overrides({"seed": "0"}, args.override)
        cfg = build_config(raw)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0

    try:
        cfg = _resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.resolved.txt", "w") as f:
        f.write(resolved_text(cfg))

    tracker = OutputTracker()
    try:
        COMMANDS[args.command](cfg, args, out, tracker)
    except (ConfigError, StageDependencyError, CheckpointError,
            FileNotFoundError) as exc:
        tracker.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:
        tracker.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
