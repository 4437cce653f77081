"""Attribute classifier on the shapes dataset. Once trained to near-perfect
held-out accuracy it serves as ground truth for semantic evaluation, as the
feature extractor for perceptual losses, and as the feature/probability
network behind the toy IS/FID metrics."""

import os

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, save_checkpoint
from .data import BACKGROUNDS, COLORS, SHAPES, SIZES
from .errors import ConfigError, NumericalError
from .nets import EqualizedConv2d, EqualizedLinear, lrelu
from .utils import CsvLogger, torch_generator

HEAD_SIZES = {"shape": len(SHAPES), "color": len(COLORS),
              "size": len(SIZES), "background": len(BACKGROUNDS)}
HEAD_ORDER = ("shape", "color", "size", "background")
N_CLASSES = 48  # product of the four head sizes


class AttributeClassifier(nn.Module):
    """Small convolutional trunk with one classification head per attribute;
    the penultimate layer doubles as the feature embedding."""

    def __init__(self, resolution=32, d_feature=128):
        super().__init__()
        self.resolution = resolution
        self.d_feature = d_feature
        chans = [3, 24, 48, 64] if resolution == 32 else [3, 16, 24, 48, 64]
        self.convs = nn.ModuleList(
            EqualizedConv2d(chans[i], chans[i + 1], 3, stride=2, padding=1)
            for i in range(len(chans) - 1))
        self.fc = EqualizedLinear(chans[-1] * 16, d_feature)
        self.heads = nn.ModuleDict(
            {name: EqualizedLinear(d_feature, k) for name, k in HEAD_SIZES.items()})

    def features(self, x):
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1:] != (3, self.resolution, self.resolution):
            raise ValueError(f"expected (N, 3, {self.resolution}, {self.resolution}) images, got {tuple(x.shape)}")
        for conv in self.convs:
            x = lrelu(conv(x))
        feat = lrelu(self.fc(x.flatten(1)))
        return feat.squeeze(0) if squeeze else feat

    def forward(self, x):
        feat = self.features(x)
        return {name: head(feat) for name, head in self.heads.items()}

    def head_probs(self, x):
        logits = self(x)
        return {name: F.softmax(lg, dim=-1) for name, lg in logits.items()}

    def predict_labels(self, x):
        """(N, 4) argmax labels in shape/color/size/background order."""
        logits = self(x)
        return torch.stack([logits[name].argmax(dim=-1) for name in HEAD_ORDER], dim=-1)

    def combined_probs(self, x):
        """(N, 48) joint class probabilities as the product of head posteriors."""
        probs = self.head_probs(x)
        joint = probs["shape"][:, :, None, None, None] \
            * probs["color"][:, None, :, None, None] \
            * probs["size"][:, None, None, :, None] \
            * probs["background"][:, None, None, None, :]
        joint = joint.flatten(1)
        return joint / joint.sum(dim=1, keepdim=True)


class OracleFeatures:
    """Callable feature extractor over a trained (frozen) classifier."""

    def __init__(self, classifier: AttributeClassifier, trained: bool):
        if not trained:
            raise ConfigError("the attribute classifier must be trained before use as a feature extractor")
        self.classifier = classifier
        classifier.requires_grad_(False)

    def __call__(self, x):
        return self.classifier.features(x)


def build_oracle_from(ckpt) -> AttributeClassifier:
    clf = AttributeClassifier(**ckpt.extra["oracle_arch"])
    clf.load_state_dict(ckpt.get_state_dict("oracle"))
    if not ckpt.extra.get("trained", False):
        raise ConfigError("oracle checkpoint is untrained")
    clf.requires_grad_(False)
    clf.eval()
    return clf


def classify_attributes(classifier, images):
    """Predicted labels (N, 4) plus per-head confidence tensors."""
    with torch.no_grad():
        probs = classifier.head_probs(images if images.dim() == 4 else images.unsqueeze(0))
        labels = torch.stack([probs[name].argmax(dim=-1) for name in HEAD_ORDER], dim=-1)
    return labels, probs


def predict_labels_batched(classifier, images, batch_size=512):
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(classifier.predict_labels(images[i:i + batch_size]))
    return torch.cat(outs)


def extract_features_batched(classifier, images, batch_size=512):
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(classifier.features(images[i:i + batch_size]))
    return torch.cat(outs)


def combined_probs_batched(classifier, images, batch_size=512):
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(classifier.combined_probs(images[i:i + batch_size]))
    return torch.cat(outs)


def _accuracy(classifier, images, labels, batch_size=512):
    correct = torch.zeros(4)
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            pred = classifier.predict_labels(images[i:i + batch_size])
            correct += (pred == labels[i:i + batch_size]).sum(dim=0)
    return correct / len(images)


def train_oracle(dataset, cfg, out_dir, cfg_hash):
    """Train until every head reaches the target held-out accuracy; raises a
    calibration failure if max_epochs passes without reaching it."""
    os.makedirs(str(out_dir), exist_ok=True)
    ocfg = cfg.oracle
    train = dataset.subset("train")
    val = dataset.subset("val")
    images = torch.from_numpy(train.images)
    labels = torch.from_numpy(train.labels)
    val_images = torch.from_numpy(val.images)
    val_labels = torch.from_numpy(val.labels)

    torch.manual_seed(torch_generator(cfg.seed, "oracle-init").initial_seed())
    clf = AttributeClassifier(cfg.data.resolution, cfg.model.d_feature)
    opt = torch.optim.Adam(clf.parameters(), lr=ocfg.lr)
    rng = torch_generator(cfg.seed, "oracle-train")
    log = CsvLogger(os.path.join(str(out_dir), "train.csv"),
                    ["epoch", "loss", "acc_shape", "acc_color", "acc_size", "acc_background"])

    accs = _accuracy(clf, val_images, val_labels)
    reached = bool((accs >= ocfg.target_accuracy).all())
    epoch = 0
    while not reached and epoch < ocfg.max_epochs:
        epoch += 1
        order = torch.randperm(len(images), generator=rng)
        epoch_loss = 0.0
        for i in range(0, len(order), ocfg.batch_size):
            idx = order[i:i + ocfg.batch_size]
            logits = clf(images[idx])
            loss = sum(F.cross_entropy(logits[name], labels[idx][:, j])
                       for j, name in enumerate(HEAD_ORDER))
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite oracle loss in epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
        accs = _accuracy(clf, val_images, val_labels)
        log.append({"epoch": epoch, "loss": epoch_loss / len(images),
                    **{f"acc_{n}": accs[j].item() for j, n in enumerate(HEAD_ORDER)}})
        reached = bool((accs >= ocfg.target_accuracy).all())

    if not reached and ocfg.max_epochs > 0:
        raise NumericalError(
            f"oracle failed to reach accuracy {ocfg.target_accuracy} on all heads "
            f"after {ocfg.max_epochs} epochs (got {[round(a.item(), 4) for a in accs]})")

    ck = Checkpoint(stage=0, step=epoch, config_hash=cfg_hash,
                    extra={"oracle_arch": {"resolution": cfg.data.resolution,
                                           "d_feature": cfg.model.d_feature},
                           "trained": reached,
                           "val_accuracy": {n: accs[j].item() for j, n in enumerate(HEAD_ORDER)}})
    ck.put_state_dict("oracle", clf.state_dict())
    ck.put_rng("train", rng)
    path = os.path.join(str(out_dir), "ckpt.cigc")
    save_checkpoint(ck, path)
    return path
