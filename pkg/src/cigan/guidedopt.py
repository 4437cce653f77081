"""Inference-time latent optimization: push a style vector toward a caption
embedding (optionally anchored to an original image through the feature
extractor), then decode the optimized vector with the generator."""

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import NumericalError
from .textalign import DIST_EPS

MAX_BACKTRACKS = 12
ADAM_EPS = 1e-8
UNK_WARN_FRACTION = 0.5


@dataclass
class OptimizationConfig:
    mode: str = "generate"  # or "manipulate"
    steps: int = 200
    step_size: float = 0.05
    lambda_percep: float = 1.0  # manipulate mode only
    backtracking: bool = True
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.mode not in ("generate", "manipulate"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lambda_percep < 0:
            raise ValueError("lambda_percep must be >= 0")


@dataclass
class OptimizationTrace:
    """Per-step objective history including the initial state (steps + 1 rows);
    each entry is a vector over the batch."""
    objective: list = field(default_factory=list)
    l2_term: list = field(default_factory=list)
    percep_term: list = field(default_factory=list)

    def append(self, obj, l2, percep):
        self.objective.append(obj.detach().clone())
        self.l2_term.append(l2.detach().clone())
        self.percep_term.append(percep.detach().clone())

    def __len__(self):
        return len(self.objective)

    def stacked(self):
        return (torch.stack(self.objective), torch.stack(self.l2_term),
                torch.stack(self.percep_term))


def _stable_dist(a, b):
    return torch.sqrt((a - b).square().sum(dim=-1) + DIST_EPS)


def optimize_latent(w_init, t, config: OptimizationConfig, x_orig=None,
                    generator=None, feature_fn=None):
    """Minimize ||t - w|| (+ lambda_p ||F(x_orig) - F(G(w))|| in manipulate
    mode) over w with adaptive per-coordinate moments.

    With backtracking enabled, a proposed step is halved until the objective
    does not increase (per sample), so the recorded objective sequence is
    non-increasing. Accepts single vectors or (B, d) batches; returns
    (w_opt, OptimizationTrace).
    """
    use_percep = config.mode == "manipulate" and config.lambda_percep > 0
    if config.mode == "manipulate" and x_orig is None:
        raise ValueError("manipulate mode requires the original image")
    if use_percep and (generator is None or feature_fn is None):
        raise ValueError("manipulate mode requires the generator and feature extractor")

    squeeze = w_init.dim() == 1
    w = (w_init.unsqueeze(0) if squeeze else w_init).detach().clone()
    tt = (t.unsqueeze(0) if squeeze else t).detach()
    n = w.shape[0]

    anchor = None
    if use_percep:
        x = x_orig.unsqueeze(0) if x_orig.dim() == 3 else x_orig
        with torch.no_grad():
            anchor = feature_fn(x)

    def objective(wv):
        l2 = _stable_dist(tt, wv)
        if use_percep:
            percep = _stable_dist(anchor, feature_fn(generator.synthesize(wv)))
        else:
            percep = torch.zeros_like(l2)
        return l2 + config.lambda_percep * percep, l2, percep

    trace = OptimizationTrace()
    with torch.no_grad():
        obj, l2, percep = objective(w)
    trace.append(obj, l2, percep)

    m = torch.zeros_like(w)
    v = torch.zeros_like(w)
    for k in range(1, config.steps + 1):
        w_var = w.detach().requires_grad_(True)
        obj_now, _, _ = objective(w_var)
        (grad,) = torch.autograd.grad(obj_now.sum(), w_var)
        m = config.beta1 * m + (1 - config.beta1) * grad
        v = config.beta2 * v + (1 - config.beta2) * grad.square()
        m_hat = m / (1 - config.beta1 ** k)
        v_hat = v / (1 - config.beta2 ** k)
        direction = m_hat / (v_hat.sqrt() + ADAM_EPS)

        step_sizes = torch.full((n, 1), config.step_size, dtype=w.dtype)
        proposal = w - step_sizes * direction
        with torch.no_grad():
            obj_new, l2_new, percep_new = objective(proposal)
        if config.backtracking:
            for _ in range(MAX_BACKTRACKS):
                worse = obj_new > trace.objective[-1]
                if not worse.any():
                    break
                step_sizes = torch.where(worse[:, None], step_sizes / 2.0, step_sizes)
                candidate = w - step_sizes * direction
                proposal = torch.where(worse[:, None], candidate, proposal)
                with torch.no_grad():
                    obj_new, l2_new, percep_new = objective(proposal)
            worse = obj_new > trace.objective[-1]
            if worse.any():  # keep the current point where no step helps
                proposal = torch.where(worse[:, None], w, proposal)
                obj_new = torch.where(worse, trace.objective[-1], obj_new)
                l2_new = torch.where(worse, trace.l2_term[-1], l2_new)
                percep_new = torch.where(worse, trace.percep_term[-1], percep_new)
        w = proposal.detach()
        if not torch.isfinite(obj_new).all():
            raise NumericalError(f"non-finite objective during latent optimization at step {k}")
        trace.append(obj_new, l2_new, percep_new)

    w_final = w.squeeze(0) if squeeze else w
    return w_final, trace


def count_unknown_fraction(token_ids, unk_id):
    if len(token_ids) == 0:
        return 1.0
    return sum(1 for t in token_ids if t == unk_id) / len(token_ids)


def generate_from_text(text, vocab, text_encoder, generator, config, seed=0, warn=None):
    """Sample an initial style vector from the mapping network, optimize it
    toward the caption embedding (pure L2), and decode. Returns
    (image, w_opt, trace)."""
    from .data import tokenize
    from .utils import torch_generator

    ids = tokenize(text, vocab)
    if not ids:
        raise ValueError("empty caption")
    if count_unknown_fraction(ids, vocab.unk_id) > UNK_WARN_FRACTION and warn is not None:
        warn(f"more than half of the caption tokens are out of vocabulary: {text!r}")
    with torch.no_grad():
        t = text_encoder(torch.tensor(ids, dtype=torch.long))
        z = torch.randn(generator.d_z, generator=torch_generator(seed, "guided-init"))
        w_init = generator.map_latent(z)
    cfg = OptimizationConfig(mode="generate", steps=config.steps, step_size=config.step_size,
                             lambda_percep=0.0, backtracking=config.backtracking,
                             beta1=config.beta1, beta2=config.beta2)
    w_opt, trace = optimize_latent(w_init, t, cfg)
    with torch.no_grad():
        image = generator.synthesize(w_opt)
    return image, w_opt, trace


def manipulate_image(x, text, vocab, text_encoder, image_encoder, generator, feature_fn,
                     config, warn=None):
    """Invert the image, optimize its latent toward the caption embedding with
    a perceptual anchor to the original, and decode. Returns
    (image, w_opt, trace)."""
    from .data import tokenize

    ids = tokenize(text, vocab)
    if not ids:
        raise ValueError("empty caption")
    if count_unknown_fraction(ids, vocab.unk_id) > UNK_WARN_FRACTION and warn is not None:
        warn(f"more than half of the caption tokens are out of vocabulary: {text!r}")
    with torch.no_grad():
        t = text_encoder(torch.tensor(ids, dtype=torch.long))
        w_init = image_encoder(x)
    cfg = OptimizationConfig(mode="manipulate", steps=config.steps, step_size=config.step_size,
                             lambda_percep=config.lambda_percep, backtracking=config.backtracking,
                             beta1=config.beta1, beta2=config.beta2)
    w_opt, trace = optimize_latent(w_init, t, cfg, x_orig=x, generator=generator,
                                   feature_fn=feature_fn)
    with torch.no_grad():
        image = generator.synthesize(w_opt)
    return image, w_opt, trace
