"""Caption encoder aligned to inverted latent codes: a single-layer LSTM maps
token sequences into the generator's style space and is trained with an
InfoNCE objective whose similarities are negated L2 distances."""

import os

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import CAPTION_TEMPLATES, caption_of, tokenize
from .errors import NumericalError
from .inversion import build_encoder_from, encode_images
from .utils import CsvLogger, torch_generator

DIST_EPS = 1e-12


class TextEncoder(nn.Module):
    """Embedding -> one-layer LSTM -> linear projection into style space."""

    def __init__(self, vocab_size, d_w=64, d_embed=64):
        super().__init__()
        self.vocab_size = vocab_size
        self.d_w = d_w
        self.embed = nn.Embedding(vocab_size, d_embed, padding_idx=0)
        self.lstm = nn.LSTM(d_embed, d_w, num_layers=1, batch_first=True)
        self.proj = nn.Linear(d_w, d_w)

    def forward(self, tokens, lengths=None):
        """tokens: (N, L) padded with id 0, or a 1-D sequence. The output is
        the projected hidden state at each sequence's last real token, so
        padded rows match unpadded per-sequence calls."""
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
        if lengths is None:
            lengths = (tokens != 0).sum(dim=1)
        if (lengths < 1).any():
            raise ValueError("text encoder requires nonempty token sequences")
        out, _ = self.lstm(self.embed(tokens))
        gather = (lengths - 1).view(-1, 1, 1).expand(-1, 1, out.shape[-1])
        final = out.gather(1, gather).squeeze(1)
        t = self.proj(final)
        return t.squeeze(0) if squeeze else t


def pairwise_l2(a, b):
    """(N, M) matrix of eps-stabilized Euclidean distances between rows."""
    diff = a[:, None, :] - b[None, :, :]
    return torch.sqrt(diff.square().sum(dim=-1) + DIST_EPS)


def infonce_l2(text_feats, codes, temperature=1.0):
    """-mean_i log softmax_j(-||t_j - w'_i|| / tau) at j = i: paired distances
    shrink while unpaired ones grow."""
    if text_feats.shape != codes.shape or text_feats.dim() != 2:
        raise ValueError("text features and codes must be matching (N, d) batches")
    n = text_feats.shape[0]
    if n == 0:
        raise ValueError("alignment batch must be nonempty")
    dists = pairwise_l2(text_feats, codes)  # [j, i]
    logits = -dists / temperature
    log_softmax = logits - torch.logsumexp(logits, dim=0, keepdim=True)
    return -log_softmax.diagonal().mean()


def retrieval_accuracy(text_feats, codes, ks=(1, 5)):
    """Fraction of codes whose own caption is among the k nearest texts."""
    with torch.no_grad():
        dists = pairwise_l2(text_feats, codes)
        order = dists.argsort(dim=0)
        n = text_feats.shape[0]
        target = torch.arange(n)
        out = {}
        for k in ks:
            hit = (order[:k, :] == target[None, :]).any(dim=0)
            out[k] = hit.float().mean().item()
    return out


def build_text_encoder_from(ckpt) -> TextEncoder:
    enc = TextEncoder(**ckpt.extra["text_arch"])
    enc.load_state_dict(ckpt.get_state_dict("text_encoder"))
    enc.requires_grad_(False)
    enc.eval()
    return enc


def caption_batch(records, vocab, template_ids, device=None):
    """Tokenize one caption per record (template chosen per record) into a
    padded (N, L) id tensor."""
    seqs = [tokenize(" ".join(caption_of(r.spec, int(t))), vocab)
            for r, t in zip(records, template_ids)]
    length = max(len(s) for s in seqs)
    out = torch.zeros(len(seqs), length, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.tensor(s, dtype=torch.long)
    return out


def train_alignment(encoder_ckpt_path, dataset, cfg, out_dir, cfg_hash):
    """Stage-3 training: only the text encoder learns; inversion targets are
    computed once with the frozen image encoder and cached. Captions are
    re-templated every epoch. Emits retrieval.csv (step, loss, top1, top5)."""
    os.makedirs(str(out_dir), exist_ok=True)
    acfg = cfg.align
    enc_ckpt = load_checkpoint(encoder_ckpt_path)
    img_encoder = build_encoder_from(enc_ckpt)
    img_encoder.requires_grad_(False)
    train = dataset.subset("train")
    images = torch.from_numpy(train.images)
    codes = encode_images(img_encoder, images)  # frozen; identical every epoch
    n_templates = len(CAPTION_TEMPLATES)

    torch.manual_seed(torch_generator(cfg.seed, "align-init").initial_seed())
    text_enc = TextEncoder(len(dataset.vocab), cfg.model.d_w, cfg.model.d_embed)
    opt = torch.optim.Adam(text_enc.parameters(), lr=acfg.lr)
    rng = torch_generator(cfg.seed, "align-train")
    log = CsvLogger(os.path.join(str(out_dir), "retrieval.csv"), ["step", "loss", "top1", "top5"])

    steps_per_epoch = max(1, len(train) // acfg.batch_size)
    template_ids = torch.randint(0, n_templates, (len(train),), generator=rng)

    for step in range(1, acfg.steps + 1):
        if (step - 1) % steps_per_epoch == 0 and step > 1:
            template_ids = torch.randint(0, n_templates, (len(train),), generator=rng)
        idx = torch.randint(0, len(train), (acfg.batch_size,), generator=rng)
        tokens = caption_batch([train.records[i] for i in idx], dataset.vocab, template_ids[idx])
        t = text_enc(tokens)
        loss = infonce_l2(t, codes[idx], acfg.temperature)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite alignment loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % acfg.log_interval == 0 or step == acfg.steps:
            acc = retrieval_accuracy(t.detach(), codes[idx])
            log.append({"step": step, "loss": loss.item(), "top1": acc[1], "top5": acc[5]})

    ck = Checkpoint(stage=3, step=acfg.steps, config_hash=cfg_hash,
                    extra={"text_arch": {"vocab_size": len(dataset.vocab),
                                         "d_w": cfg.model.d_w, "d_embed": cfg.model.d_embed},
                           "temperature": acfg.temperature,
                           "encoder_checkpoint": str(encoder_ckpt_path)})
    ck.put_state_dict("text_encoder", text_enc.state_dict())
    ck.put_rng("train", rng)
    path = os.path.join(str(out_dir), "ckpt.cigc")
    save_checkpoint(ck, path)
    return path
