"""Command-line pipeline driver.

Subcommands cover the three training stages, dataset generation, the oracle
classifier, evaluation, the cycle-ablation study, and the two inference
modes. One YAML config parameterizes everything; every artifact lands under
the output directory and is recorded in manifest.json together with the
config hash that produced it.
"""

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import evals
from .checkpoint import append_latents, load_checkpoint
from .config import config_hash, config_to_dict, load_config
from .data import DatasetConfig, ShapesDataset, generate_dataset
from .errors import ConfigError, MissingCheckpointError, NumericalError
from .gan import sampling_generator, train_gan
from .guidedopt import generate_from_text, manipulate_image
from .inversion import build_encoder_from, encode_images, train_inversion
from .metrics import project_latents
from .oracle import OracleFeatures, build_oracle_from, predict_labels_batched, train_oracle
from .textalign import build_text_encoder_from, train_alignment
from .utils import CsvLogger, apply_determinism, load_image, save_image, torch_generator

SUBCOMMANDS = ("gen-data", "train-oracle", "train-gan", "train-encoder", "train-align",
               "generate", "manipulate", "eval", "ablate-cycle")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_CHECKPOINT = 2
EXIT_CONFIG = 3
EXIT_NUMERICAL = 4


def build_parser():
    parser = argparse.ArgumentParser(prog="cigan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file (defaults apply when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-path config override, e.g. gan.steps=100")
        p.add_argument("--out", help="output directory (CIGAN_OUT env var overrides)")

    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        common(p)
        if name in ("train-encoder", "train-align", "generate", "manipulate", "eval", "ablate-cycle"):
            p.add_argument("--gan-ckpt", help="stage-1 checkpoint (default <out>/stage1/ckpt.cigc)")
        if name in ("train-align", "generate", "manipulate", "eval"):
            p.add_argument("--encoder-ckpt", help="stage-2 checkpoint (default <out>/stage2/ckpt.cigc)")
        if name in ("generate", "manipulate", "eval"):
            p.add_argument("--align-ckpt", help="stage-3 checkpoint (default <out>/stage3/ckpt.cigc)")
        if name in ("train-encoder", "manipulate", "eval", "ablate-cycle"):
            p.add_argument("--oracle-ckpt", help="oracle checkpoint (default <out>/oracle/ckpt.cigc)")
        if name == "train-gan":
            p.add_argument("--resume", help="continue training from this checkpoint")
        if name in ("generate", "manipulate"):
            p.add_argument("--text", required=True, help="caption to realize")
            p.add_argument("--name", default=None, help="basename for emitted artifacts")
        if name == "generate":
            p.add_argument("--seed", type=int, default=None, help="seed for the initial latent")
        if name == "manipulate":
            p.add_argument("--sample-id", type=int, default=None,
                           help="test-split record to manipulate")
            p.add_argument("--image", default=None, help="PNG to manipulate instead of a record")
        if name == "ablate-cycle":
            p.add_argument("--seeds", type=int, default=None, help="number of seeds per arm")
    return parser


class Paths:
    def __init__(self, out_dir):
        self.out = str(out_dir)
        self.data_dir = os.path.join(self.out, "data")
        self.dataset = os.path.join(self.data_dir, "dataset.cig")
        self.vocab = os.path.join(self.data_dir, "vocab.txt")
        self.oracle = os.path.join(self.out, "oracle", "ckpt.cigc")
        self.gan = os.path.join(self.out, "stage1", "ckpt.cigc")
        self.encoder = os.path.join(self.out, "stage2", "ckpt.cigc")
        self.align = os.path.join(self.out, "stage3", "ckpt.cigc")
        self.manifest = os.path.join(self.out, "manifest.json")
        self.lock = os.path.join(self.out, ".lock")


def require(path, what):
    if not path or not os.path.exists(path):
        raise MissingCheckpointError(f"{what} not found at {path!r}; run the upstream stage first")
    return path


def load_dataset(paths):
    require(paths.dataset, "dataset file")
    require(paths.vocab, "vocab file")
    return ShapesDataset.load(paths.dataset, paths.vocab)


class Lock:
    """Advisory single-writer lock on the output directory."""

    def __init__(self, path):
        self.path = path
        self.acquired = False

    def __enter__(self):
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output directory is locked by another run ({self.path}); "
                              "remove the lock file if that run is dead") from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        self.acquired = True
        return self

    def __exit__(self, *exc):
        if self.acquired and os.path.exists(self.path):
            os.remove(self.path)


def update_manifest(paths, entry):
    manifest = []
    if os.path.exists(paths.manifest):
        with open(paths.manifest, encoding="utf-8") as f:
            manifest = json.load(f)
    manifest.append(entry)
    with open(paths.manifest, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_gen_data(args, cfg, paths, cfg_hash_):
    dcfg = DatasetConfig(cfg.data.n_samples, cfg.data.resolution,
                         tuple(cfg.data.split_fractions), cfg.seed)
    dataset_path, vocab_path = generate_dataset(dcfg, paths.data_dir)
    print(f"wrote {dataset_path} ({cfg.data.n_samples} records) and {vocab_path}")
    return {"checkpoint": "", "metrics": dataset_path}


def cmd_train_oracle(args, cfg, paths, cfg_hash_):
    dataset = load_dataset(paths)
    path = train_oracle(dataset, cfg, os.path.join(paths.out, "oracle"), cfg_hash_)
    ck = load_checkpoint(path)
    print(f"oracle trained for {ck.step} epochs; "
          f"val accuracy {ck.extra['val_accuracy']} -> {path}")
    return {"checkpoint": path, "metrics": ""}


def cmd_train_gan(args, cfg, paths, cfg_hash_):
    dataset = load_dataset(paths)
    resume = getattr(args, "resume", None)
    if resume:
        require(resume, "resume checkpoint")
    path = train_gan(dataset, cfg, os.path.join(paths.out, "stage1"), cfg_hash_, resume=resume)
    print(f"stage-1 checkpoint -> {path}")
    return {"checkpoint": path, "metrics": os.path.join(paths.out, "stage1", "loss.csv")}


def cmd_train_encoder(args, cfg, paths, cfg_hash_):
    gan_ckpt = require(args.gan_ckpt or paths.gan, "stage-1 checkpoint")
    oracle_ckpt = require(args.oracle_ckpt or paths.oracle, "oracle checkpoint")
    dataset = load_dataset(paths)
    feature_fn = OracleFeatures(build_oracle_from(load_checkpoint(oracle_ckpt)), trained=True)
    path = train_inversion(gan_ckpt, dataset, cfg, os.path.join(paths.out, "stage2"),
                           cfg_hash_, feature_fn)
    print(f"stage-2 checkpoint -> {path}")
    return {"checkpoint": path, "metrics": os.path.join(paths.out, "stage2", "loss.csv")}


def cmd_train_align(args, cfg, paths, cfg_hash_):
    encoder_ckpt = require(args.encoder_ckpt or paths.encoder, "stage-2 checkpoint")
    dataset = load_dataset(paths)
    path = train_alignment(encoder_ckpt, dataset, cfg, os.path.join(paths.out, "stage3"), cfg_hash_)
    print(f"stage-3 checkpoint -> {path}")
    return {"checkpoint": path, "metrics": os.path.join(paths.out, "stage3", "retrieval.csv")}


def _write_trace(trace, path):
    log = CsvLogger(path, ["step", "objective", "l2_term", "percep_term"])
    obj, l2, percep = trace.stacked()
    for step in range(obj.shape[0]):
        log.append({"step": step, "objective": obj[step, 0].item(),
                    "l2_term": l2[step, 0].item(), "percep_term": percep[step, 0].item()})


def cmd_generate(args, cfg, paths, cfg_hash_):
    gan_ckpt = require(args.gan_ckpt or paths.gan, "stage-1 checkpoint")
    align_ckpt = require(args.align_ckpt or paths.align, "stage-3 checkpoint")
    dataset = load_dataset(paths)
    generator = sampling_generator(load_checkpoint(gan_ckpt))
    text_encoder = build_text_encoder_from(load_checkpoint(align_ckpt))
    seed = args.seed if args.seed is not None else cfg.seed
    image, w_opt, trace = generate_from_text(
        args.text, dataset.vocab, text_encoder, generator, cfg.optimize, seed=seed,
        warn=lambda msg: print(f"warning: {msg}", file=sys.stderr))
    out_dir = os.path.join(paths.out, "generate")
    os.makedirs(out_dir, exist_ok=True)
    name = args.name or f"gen_{seed:04d}"
    png = os.path.join(out_dir, f"{name}.png")
    save_image(image.numpy(), png)
    _write_trace(trace, os.path.join(out_dir, f"{name}_trace.csv"))
    append_latents(os.path.join(out_dir, "wopt.cigw"), w_opt.numpy()[None, :])
    print(f"generated {png}")
    return {"checkpoint": "", "metrics": png}


def cmd_manipulate(args, cfg, paths, cfg_hash_):
    gan_ckpt = require(args.gan_ckpt or paths.gan, "stage-1 checkpoint")
    encoder_ckpt = require(args.encoder_ckpt or paths.encoder, "stage-2 checkpoint")
    align_ckpt = require(args.align_ckpt or paths.align, "stage-3 checkpoint")
    oracle_ckpt = require(args.oracle_ckpt or paths.oracle, "oracle checkpoint")
    dataset = load_dataset(paths)
    if (args.sample_id is None) == (args.image is None):
        raise ConfigError("manipulate needs exactly one of --sample-id or --image")
    if args.image is not None:
        x = torch.from_numpy(load_image(args.image, dataset.resolution))
        name = args.name or os.path.splitext(os.path.basename(args.image))[0] + "_edit"
    else:
        test = dataset.subset("test")
        match = [r for r in test.records if r.sample_id == args.sample_id]
        if not match:
            raise ConfigError(f"sample id {args.sample_id} is not in the test split")
        x = torch.from_numpy(match[0].image)
        name = args.name or f"edit_{args.sample_id:06d}"
    generator = sampling_generator(load_checkpoint(gan_ckpt))
    image_encoder = build_encoder_from(load_checkpoint(encoder_ckpt))
    text_encoder = build_text_encoder_from(load_checkpoint(align_ckpt))
    feature_fn = OracleFeatures(build_oracle_from(load_checkpoint(oracle_ckpt)), trained=True)
    image, w_opt, trace = manipulate_image(
        x, args.text, dataset.vocab, text_encoder, image_encoder, generator, feature_fn,
        cfg.optimize, warn=lambda msg: print(f"warning: {msg}", file=sys.stderr))
    out_dir = os.path.join(paths.out, "manipulate")
    os.makedirs(out_dir, exist_ok=True)
    png = os.path.join(out_dir, f"{name}.png")
    save_image(image.numpy(), png)
    save_image(x.numpy(), os.path.join(out_dir, f"{name}_input.png"))
    _write_trace(trace, os.path.join(out_dir, f"{name}_trace.csv"))
    append_latents(os.path.join(out_dir, "wopt.cigw"), w_opt.numpy()[None, :])
    print(f"manipulated {png}")
    return {"checkpoint": "", "metrics": png}


def cmd_eval(args, cfg, paths, cfg_hash_):
    gan_ckpt = require(args.gan_ckpt or paths.gan, "stage-1 checkpoint")
    oracle_ckpt = require(args.oracle_ckpt or paths.oracle, "oracle checkpoint")
    dataset = load_dataset(paths)
    oracle_clf = build_oracle_from(load_checkpoint(oracle_ckpt))
    generator = sampling_generator(load_checkpoint(gan_ckpt))
    generator.requires_grad_(False)

    out_dir = os.path.join(paths.out, "eval")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    if os.path.exists(csv_path):
        os.remove(csv_path)
    log = CsvLogger(csv_path, ["metric", "value", "std", "n", "config_hash"])

    def emit(metric, value, std=0.0, n=0):
        log.append({"metric": metric, "value": float(value), "std": float(std),
                    "n": n, "config_hash": cfg_hash_})
        print(f"{metric}: {value:.6g}" + (f" +- {std:.4g}" if std else ""))

    n_eval = cfg.eval.n_samples
    real = torch.from_numpy(dataset.subset("train").images[:n_eval])
    fake = evals.generate_images(generator, n_eval, cfg.seed)
    fid_value, is_mean, is_std = evals.toy_scores(oracle_clf, real, fake, cfg.eval.is_splits)
    emit("toy_fid", fid_value, n=n_eval)
    emit("toy_is", is_mean, std=is_std, n=n_eval)
    covered, total = evals.combo_coverage(oracle_clf, fake)
    emit("combo_coverage", covered, n=total)

    encoder_ckpt = args.encoder_ckpt or paths.encoder
    if os.path.exists(encoder_ckpt):
        encoder = build_encoder_from(load_checkpoint(encoder_ckpt))
        test = dataset.subset("test")
        test_images = torch.from_numpy(test.images[:500])
        psnrs = evals.reconstruction_psnrs(encoder, generator, test_images)
        emit("psnr_median", float(np.median(psnrs)), n=len(psnrs))
        n_mmd = min(cfg.eval.mmd_samples, len(test))
        emit("w_recon_mse", evals.w_cycle_error(encoder, generator, n_mmd, cfg.seed), n=n_mmd)
        mmd_val, sigma = evals.latent_mmd(encoder, generator, torch.from_numpy(test.images),
                                          n_mmd, cfg.seed, cfg.eval.mmd_bandwidth)
        emit("mmd2_w", mmd_val, n=n_mmd)
        # 2-D projection export of sampled vs inverted codes
        rng = torch_generator(cfg.seed, "eval-proj")
        with torch.no_grad():
            w = generator.map_latent(torch.randn(n_mmd, generator.d_z, generator=rng)).numpy()
        codes = encode_images(encoder, torch.from_numpy(test.images[:n_mmd])).numpy()
        pa, pb = project_latents(w, codes)
        proj_path = os.path.join(out_dir, "projection.csv")
        if os.path.exists(proj_path):
            os.remove(proj_path)
        proj = CsvLogger(proj_path, ["set_tag", "pc1", "pc2"])
        for row in pa:
            proj.append({"set_tag": "sampled", "pc1": float(row[0]), "pc2": float(row[1])})
        for row in pb:
            proj.append({"set_tag": "inverted", "pc1": float(row[0]), "pc2": float(row[1])})

        align_ckpt = args.align_ckpt or paths.align
        if os.path.exists(align_ckpt):
            ck = load_checkpoint(align_ckpt)
            text_encoder = build_text_encoder_from(ck)
            res = evals.retrieval_eval(text_encoder, encoder, dataset.subset("test"),
                                       cfg.seed, ck.extra.get("temperature", 1.0))
            emit("retrieval_top1", res["top1"], n=res["n_batches"])
            emit("retrieval_top5", res["top5"], n=res["n_batches"])
    return {"checkpoint": "", "metrics": csv_path}


def cmd_ablate_cycle(args, cfg, paths, cfg_hash_):
    gan_ckpt = require(args.gan_ckpt or paths.gan, "stage-1 checkpoint")
    oracle_ckpt = require(args.oracle_ckpt or paths.oracle, "oracle checkpoint")
    dataset = load_dataset(paths)
    if args.seeds is not None:
        cfg.eval.ablate_seeds = args.seeds
    feature_fn = OracleFeatures(build_oracle_from(load_checkpoint(oracle_ckpt)), trained=True)
    out_dir = os.path.join(paths.out, "ablate")
    rows = evals.run_cycle_ablation(gan_ckpt, dataset, cfg, out_dir, cfg_hash_, feature_fn)
    csv_path = os.path.join(out_dir, "metrics.csv")
    if os.path.exists(csv_path):
        os.remove(csv_path)
    log = CsvLogger(csv_path, ["seed", "cycle_enabled", "w_recon_mse", "mmd2", "bandwidth"])
    for row in rows:
        log.append(row)
        print(f"seed {row['seed']} cycle={row['cycle_enabled']}: "
              f"w_recon_mse={row['w_recon_mse']:.5f} mmd2={row['mmd2']:.5f}")
    return {"checkpoint": "", "metrics": csv_path}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-oracle": cmd_train_oracle,
    "train-gan": cmd_train_gan,
    "train-encoder": cmd_train_encoder,
    "train-align": cmd_train_align,
    "generate": cmd_generate,
    "manipulate": cmd_manipulate,
    "eval": cmd_eval,
    "ablate-cycle": cmd_ablate_cycle,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.out:
            cfg.out_dir = args.out
        env_out = os.environ.get("CIGAN_OUT")
        if env_out:
            cfg.out_dir = env_out
        apply_determinism(cfg.deterministic)
        cfg_hash_ = config_hash(cfg)
        paths = Paths(cfg.out_dir)
        os.makedirs(paths.out, exist_ok=True)
        with Lock(paths.lock):
            artifacts = HANDLERS[args.command](args, cfg, paths, cfg_hash_)
            update_manifest(paths, {"subcommand": args.command, "config_hash": cfg_hash_,
                                    "checkpoint": artifacts.get("checkpoint", ""),
                                    "metrics": artifacts.get("metrics", "")})
        return EXIT_OK
    except MissingCheckpointError as e:
        _error_record(e, EXIT_MISSING_CHECKPOINT)
        return EXIT_MISSING_CHECKPOINT
    except ConfigError as e:
        _error_record(e, EXIT_CONFIG)
        return EXIT_CONFIG
    except NumericalError as e:
        _error_record(e, EXIT_NUMERICAL)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as e:
        _error_record(e, EXIT_ERROR)
        return EXIT_ERROR


def _error_record(exc, code):
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
