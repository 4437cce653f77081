"""Evaluation routines over trained checkpoints: sample generation, toy
IS/FID over oracle features, attribute coverage, reconstruction quality,
latent-distribution diagnostics, and the cycle-ablation runner."""

import os

import numpy as np
import torch

from . import metrics
from .data import CAPTION_TEMPLATES, N_COMBOS
from .inversion import encode_images, train_inversion
from .oracle import (combined_probs_batched, extract_features_batched, predict_labels_batched)
from .textalign import caption_batch, infonce_l2, retrieval_accuracy
from .utils import torch_generator


def generate_images(generator, n, seed, batch_size=256, tag="eval-gen"):
    rng = torch_generator(seed, tag)
    outs = []
    with torch.no_grad():
        for i in range(0, n, batch_size):
            z = torch.randn(min(batch_size, n - i), generator.d_z, generator=rng)
            outs.append(generator(z))
    return torch.cat(outs)


def toy_scores(oracle_clf, real_images, fake_images, is_splits=10):
    """(toy_fid, toy_is_mean, toy_is_std) using oracle features/probabilities."""
    real_feats = extract_features_batched(oracle_clf, real_images).numpy()
    fake_feats = extract_features_batched(oracle_clf, fake_images).numpy()
    fid_value = metrics.fid(metrics.summarize_features(real_feats),
                            metrics.summarize_features(fake_feats))
    probs = combined_probs_batched(oracle_clf, fake_images).numpy()
    usable = (len(probs) // is_splits) * is_splits
    is_mean, is_std = metrics.inception_score(probs[:usable], splits=is_splits)
    return fid_value, is_mean, is_std


def combo_coverage(oracle_clf, images):
    """Number of the 48 attribute cells hit by oracle-classified images."""
    labels = predict_labels_batched(oracle_clf, images).numpy()
    combos = ((labels[:, 0] * 4 + labels[:, 1]) * 2 + labels[:, 2]) * 2 + labels[:, 3]
    return int(len(np.unique(combos))), N_COMBOS


def reconstruction_psnrs(encoder, generator, images, batch_size=256):
    values = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = images[i:i + batch_size]
            rec = generator.synthesize(encoder(x))
            for a, b in zip(x, rec):
                values.append(metrics.psnr(a.numpy(), b.numpy()))
    return np.array(values)


def w_cycle_error(encoder, generator, n, seed, batch_size=256):
    """Mean per-element squared error between sampled styles and their
    re-encoded values."""
    rng = torch_generator(seed, "cycle-eval")
    errs = []
    with torch.no_grad():
        for i in range(0, n, batch_size):
            z = torch.randn(min(batch_size, n - i), generator.d_z, generator=rng)
            w = generator.map_latent(z)
            w_prime = encoder(generator.synthesize(w))
            errs.append((w - w_prime).square().mean(dim=1))
    return float(torch.cat(errs).mean())


def latent_mmd(encoder, generator, real_images, n, seed, bandwidth=0.0):
    """MMD^2 between freshly mapped styles and inverted codes of real images."""
    rng = torch_generator(seed, "mmd-eval")
    with torch.no_grad():
        z = torch.randn(n, generator.d_z, generator=rng)
        w = generator.map_latent(z).numpy()
    codes = encode_images(encoder, real_images[:n]).numpy()
    sigma = bandwidth if bandwidth > 0 else metrics.median_bandwidth(w, codes)
    return metrics.mmd2(w, codes, sigma), sigma


def retrieval_eval(text_encoder, image_encoder, subset, seed, temperature=1.0, batch_size=64):
    """Mean top-1/top-5 caption-to-code retrieval over held-out batches."""
    images = torch.from_numpy(subset.images)
    codes = encode_images(image_encoder, images)
    rng = torch_generator(seed, "retrieval-eval")
    n_batches = max(1, len(subset) // batch_size)
    top1, top5, losses = [], [], []
    with torch.no_grad():
        for _ in range(n_batches):
            idx = torch.randint(0, len(subset), (batch_size,), generator=rng)
            tids = torch.randint(0, len(CAPTION_TEMPLATES), (batch_size,), generator=rng)
            tokens = caption_batch([subset.records[i] for i in idx], subset.vocab, tids)
            t = text_encoder(tokens)
            acc = retrieval_accuracy(t, codes[idx])
            losses.append(infonce_l2(t, codes[idx], temperature).item())
            top1.append(acc[1])
            top5.append(acc[5])
    return {"top1": float(np.mean(top1)), "top5": float(np.mean(top5)),
            "loss": float(np.mean(losses)), "n_batches": n_batches}


def run_cycle_ablation(gan_ckpt_path, dataset, cfg, out_dir, cfg_hash, feature_fn):
    """Short stage-2 trainings with and without cycle terms over several
    seeds; returns a list of row dicts (seed, cycle_enabled, w_recon_mse,
    mmd2, bandwidth)."""
    from .gan import sampling_generator
    from .checkpoint import load_checkpoint
    from .inversion import build_encoder_from

    rows = []
    base_seed = cfg.seed
    gen = sampling_generator(load_checkpoint(gan_ckpt_path))
    gen.requires_grad_(False)
    val_images = torch.from_numpy(dataset.subset("val").images)
    n_eval = min(cfg.eval.mmd_samples, len(val_images))
    for offset in range(cfg.eval.ablate_seeds):
        for cycle in (True, False):
            run_cfg = _with_ablation_overrides(cfg, cycle)
            tag = f"seed{base_seed + offset}_{'cycle' if cycle else 'nocycle'}"
            run_dir = os.path.join(str(out_dir), tag)
            ckpt_path = train_inversion(gan_ckpt_path, dataset, run_cfg, run_dir, cfg_hash,
                                        feature_fn, seed=base_seed + offset)
            encoder = build_encoder_from(load_checkpoint(ckpt_path))
            w_err = w_cycle_error(encoder, gen, n_eval, base_seed + offset)
            mmd_val, sigma = latent_mmd(encoder, gen, val_images, n_eval, base_seed + offset,
                                        cfg.eval.mmd_bandwidth)
            rows.append({"seed": base_seed + offset, "cycle_enabled": int(cycle),
                         "w_recon_mse": w_err, "mmd2": mmd_val, "bandwidth": sigma})
    return rows


def _with_ablation_overrides(cfg, cycle_enabled):
    import copy

    run_cfg = copy.deepcopy(cfg)
    run_cfg.encoder.cycle_enabled = cycle_enabled
    run_cfg.encoder.steps = cfg.eval.ablate_steps
    run_cfg.encoder.sample_interval = 0
    return run_cfg
