"""End-to-end orchestration: train the generative models on the train view,
build the inference classifier from real seen plus synthetic features, fit a
rejector, score the test view.

The train/test holdout is derived from the checkpoint's training seed, so an
evaluation is reproducible from (checkpoint, dataset, manifest, eval config)
alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from . import metrics as mx
from . import networks as nets
from . import openset as om
from . import protocol as proto
from . import sampling as smp
from . import vacwgan as vw
from .errors import ValidationError
from .sampling import UNKNOWN_LABEL


@dataclass
class EvalConfig:
    rejector: str = "openmax"  # "softmax" | "openmax"
    tail_size: int = 5
    alpha_top: int | None = None
    syn_per_class: int = 150
    unknown_gen: bool = False
    n_unknown_embeddings: int | None = None  # default: |unseen|
    unknown_per_embedding: int | None = None  # default: syn_per_class
    radius_multiplier: float = 3.0
    sigma_scale: float | None = None
    classifier_iterations: int = 500
    classifier_lr: float = 5e-2
    classifier_batch: int = 64
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.rejector not in ("softmax", "openmax"):
            raise ValidationError("rejector must be softmax or openmax")
        if self.tail_size < 2:
            raise ValidationError("tail_size must be >= 2")
        if self.syn_per_class < 1:
            raise ValidationError("syn_per_class must be >= 1")


def train_models(dataset: proto.Dataset, manifest: proto.SplitManifest,
                 config: vw.TrainConfig, test_fraction: float = 0.2):
    """Fit the generative models on the manifest's seen training data."""
    train_view, _ = proto.apply_manifest(dataset, manifest,
                                         test_fraction=test_fraction,
                                         seed=config.seed)
    seen = sorted(manifest.seen)
    index = {name: i for i, name in enumerate(seen)}
    embeddings = np.vstack([train_view.embeddings[name] for name in seen])
    labels = np.array([index[l] for l in train_view.labels], dtype=np.int64)
    models, history = vw.train(train_view.features, labels, embeddings, config)
    return models, history


@dataclass
class ClassifierBundle:
    classifier: nets.LinearParams
    class_ids: list[str]  # softmax bins, UNKNOWN last when unknown_gen
    features: np.ndarray  # the training set it was fitted on
    labels: list[str]
    unknown_embeddings: list[smp.UnknownEmbedding]


def build_inference_classifier(models: nets.ModelBundle, train_view: proto.TrainView,
                               manifest: proto.SplitManifest,
                               cfg: EvalConfig) -> ClassifierBundle:
    """Real seen features + synthetic unseen (+ synthetic unknown) -> softmax."""
    unseen = sorted(manifest.unseen)
    unseen_embeddings = {c: train_view.embeddings[c] for c in unseen}
    syn_x, syn_y = vw.synthesize_features(models, unseen_embeddings,
                                          cfg.syn_per_class, seed=cfg.seed + 1)
    features = [train_view.features, syn_x]
    labels = list(train_view.labels) + list(syn_y)
    class_ids = sorted(manifest.seen) + unseen
    unknowns: list[smp.UnknownEmbedding] = []
    if cfg.unknown_gen:
        regions = smp.fit_class_regions(models, train_view.embeddings,
                                        sigma_scale=cfg.sigma_scale)
        n_unknown = cfg.n_unknown_embeddings or len(unseen)
        unknowns = smp.complementary_sample(regions, n_unknown,
                                            cfg.radius_multiplier,
                                            seed=cfg.seed + 2)
        per = cfg.unknown_per_embedding or cfg.syn_per_class
        unk_x, unk_y = smp.generate_unknown_features(models, unknowns, per,
                                                     seed=cfg.seed + 3)
        if unk_x.shape[0]:
            features.append(unk_x)
            labels.extend(unk_y)
            class_ids = class_ids + [UNKNOWN_LABEL]

    x = np.vstack(features)
    index = {c: i for i, c in enumerate(class_ids)}
    y = np.array([index[l] for l in labels], dtype=np.int64)
    rng = np.random.default_rng(cfg.seed + 4)
    clf = vw.fit_softmax_classifier(x, y, len(class_ids),
                                    cfg.classifier_iterations, cfg.classifier_lr,
                                    cfg.classifier_batch, rng)
    return ClassifierBundle(classifier=clf, class_ids=class_ids,
                            features=x, labels=labels,
                            unknown_embeddings=unknowns)


def correct_training_activations(bundle: ClassifierBundle) -> dict[str, np.ndarray]:
    """Logits of correctly classified training rows, keyed by class.

    Classes without at least two correct rows fall back to all their rows so
    a tail can still be fitted.
    """
    logits = nets.classifier_logits(bundle.classifier, ad.constant(bundle.features)).value
    predicted = np.argmax(logits, axis=1)
    labels = np.asarray([bundle.class_ids.index(l) for l in bundle.labels])
    out: dict[str, np.ndarray] = {}
    for idx, class_id in enumerate(bundle.class_ids):
        rows = np.flatnonzero((labels == idx) & (predicted == idx))
        if rows.size < 2:
            rows = np.flatnonzero(labels == idx)
        out[class_id] = logits[rows]
    return out


def _predict(bundle: ClassifierBundle, test_features: np.ndarray, cfg: EvalConfig,
             calibrations: list[om.ClassCalibration] | None) -> list[str]:
    logits = nets.classifier_logits(bundle.classifier, ad.constant(test_features)).value
    preds: list[str] = []
    if cfg.rejector == "softmax":
        for row in logits:
            name = bundle.class_ids[om.softmax_predict(row)]
            preds.append(om.REJECT if name == UNKNOWN_LABEL else name)
    else:
        assert calibrations is not None
        order = [c.class_id for c in calibrations]
        col = [bundle.class_ids.index(c) for c in order]
        for row in logits:
            pred = om.openmax_predict(row[col], calibrations, alpha_top=cfg.alpha_top)
            name = pred.decision
            if name == UNKNOWN_LABEL:
                name = om.REJECT
            preds.append(name)
    return preds


def evaluate(models: nets.ModelBundle, dataset: proto.Dataset,
             manifest: proto.SplitManifest, cfg: EvalConfig) -> mx.EvalReport:
    """Score one rejector configuration on the manifest's test view."""
    cfg.validate()
    train_view, test_view = proto.apply_manifest(dataset, manifest,
                                                 test_fraction=cfg.test_fraction,
                                                 seed=models.seed)
    bundle = build_inference_classifier(models, train_view, manifest, cfg)
    calibrations = None
    if cfg.rejector == "openmax":
        acts = correct_training_activations(bundle)
        calibrations = om.compute_calibrations(acts, cfg.tail_size)
    preds = _predict(bundle, test_view.features, cfg, calibrations)
    ledger = mx.tally(preds, test_view.truths, manifest)
    return mx.build_report(ledger, manifest)


def tail_size_sweep(models: nets.ModelBundle, dataset: proto.Dataset,
                    manifest: proto.SplitManifest, cfg: EvalConfig,
                    lo: int = 2, hi: int = 10) -> list[tuple[int, mx.EvalReport]]:
    """One calibrated-rejector report per tail size; the expensive synthesis
    and classifier fit are shared across the sweep."""
    cfg = replace(cfg, rejector="openmax")
    cfg.validate()
    train_view, test_view = proto.apply_manifest(dataset, manifest,
                                                 test_fraction=cfg.test_fraction,
                                                 seed=models.seed)
    bundle = build_inference_classifier(models, train_view, manifest, cfg)
    acts = correct_training_activations(bundle)
    out = []
    for tail in om.tail_size_range(lo, hi):
        calibrations = om.compute_calibrations(acts, tail)
        preds = _predict(bundle, test_view.features, cfg, calibrations)
        ledger = mx.tally(preds, test_view.truths, manifest)
        out.append((tail, mx.build_report(ledger, manifest)))
    return out


def config_record(train_config: vw.TrainConfig | None = None,
                  eval_config: EvalConfig | None = None, **extra) -> dict:
    """Effective-config record serialized next to every command output."""
    record: dict = dict(extra)
    if train_config is not None:
        record["train"] = asdict(train_config)
    if eval_config is not None:
        record["eval"] = asdict(eval_config)
    return record


def desk_reference_train_config(seed: int = 0) -> vw.TrainConfig:
    """Desk-scale reference configuration (width divisor 64, tuned rates)."""
    return vw.TrainConfig(
        critic_steps=5,
        batch_size=32,
        iterations=1500,
        width_divisor=64,
        seed=seed,
        lr=5e-4,
        critic_lr=4e-3,
        gp_weight=1.0,
        cls_weight=0.5,
        pretrain_iterations=200,
    )
