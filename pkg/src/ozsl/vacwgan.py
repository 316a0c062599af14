"""Adversarial feature-generation objective and its training loop.

The critic ascends the Wasserstein surrogate minus a gradient penalty; the
generator and the conditioning sampler descend the fake-score term plus a
classification regularizer computed by a frozen, pretrained linear softmax.
Per outer iteration the critic takes `critic_steps` updates, then the
generator and the sampler take one update each.

The gradient penalty is applied to critic updates only by default.  A
config flag also adds it to the generator/sampler objectives; for a
single-hidden-layer critic the interpolate route is piecewise constant, so
that term contributes no gradient to G or S almost everywhere, and the flag
mainly changes the reported loss values.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import networks as nets
from .errors import NonFiniteError, TrainingError, ValidationError
from .matio import as_matrix


@dataclass
class TrainConfig:
    critic_steps: int = 5
    batch_size: int = 64
    iterations: int = 1000
    gp_weight: float = 10.0
    cls_weight: float = 0.01
    seed: int = 0
    width_divisor: int = 64
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    gp_in_generator: bool = False
    finetune_classifier: bool = False
    mean_match_weight: float = 0.0
    containment_weight: float = 1.0
    log_sigma_bound: float = 1.5
    mu_bound_factor: float = 3.0
    critic_lr: float | None = None
    ema_decay: float = 0.99
    normalize_features: bool = True
    pretrain_iterations: int = 300
    pretrain_lr: float = 5e-2
    pretrain_batch: int = 64
    sampler_warmup_iterations: int = 400
    sampler_warmup_lr: float = 1e-2

    def validate(self) -> None:
        if self.critic_steps < 1:
            raise ValidationError("critic_steps must be >= 1")
        if self.gp_weight < 0 or self.cls_weight < 0 or self.containment_weight < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValidationError("batch_size must be >= 1 and iterations >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValidationError("ema_decay must lie in [0, 1)")


@dataclass
class LossBreakdown:
    step: int
    wasserstein: float
    gradient_penalty: float
    classification: float
    elapsed_s: float  # wall clock, kept in memory only; emitted logs stay deterministic

    def record(self) -> dict:
        return {
            "step": self.step,
            "wasserstein": self.wasserstein,
            "gp": self.gradient_penalty,
            "cls": self.classification,
        }


# ---------------------------------------------------------------------------
# loss terms


def wgan_loss(critic: nets.MlpParams, x, x_fake, s, critic_nodes=None) -> ad.Node:
    """E[D(x, s)] - E[D(x_fake, s)]; the critic maximizes this."""
    x = as_matrix(x)
    x_fake = as_matrix(x_fake)
    s = as_matrix(s)
    if x.shape[0] == 0 or x_fake.shape[0] == 0:
        raise ValidationError("empty batch")
    if x.shape[0] != s.shape[0] or x_fake.shape[0] != s.shape[0]:
        raise ValidationError("conditioning rows must align with both batches")
    real = ad.mean_all(nets.critic_forward(critic, ad.constant(x), ad.constant(s), critic_nodes))
    fake = ad.mean_all(nets.critic_forward(critic, ad.constant(x_fake), ad.constant(s), critic_nodes))
    return ad.sub(real, fake)


_NORM_EPS = 1e-12  # keeps sqrt in-domain when an interpolate gradient is exactly zero


def gradient_penalty(critic: nets.MlpParams, x, x_fake, s, t, critic_nodes=None) -> ad.Node:
    """E[(||grad_v D(v, s)||_2 - 1)^2] at v = t*x + (1-t)*x_fake, per-sample t.

    The gradient is taken with respect to the interpolated feature input
    only, never the conditioning.  The result stays differentiable with
    respect to the critic parameters (double backprop).
    """
    x = as_matrix(x)
    x_fake = as_matrix(x_fake, *x.shape)
    s = as_matrix(s, rows=x.shape[0])
    t = as_matrix(t, x.shape[0], 1)
    interp = ad.param(t * x + (1.0 - t) * x_fake)
    scores = nets.critic_forward(critic, interp, ad.constant(s), critic_nodes)
    grad_v = ad.backward(ad.sum_all(scores), [interp])[interp]
    norm = ad.sqrt(ad.add_scalar(ad.row_sums(ad.square(grad_v)), _NORM_EPS))
    return ad.mean_all(ad.square(ad.add_scalar(norm, -1.0)))


def classification_loss(classifier: nets.LinearParams, x_fake: ad.Node, labels,
                        classifier_nodes=None) -> ad.Node:
    """Mean negative log-likelihood of the labels under the softmax classifier."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = classifier.W.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValidationError("label outside the classifier's class set")
    onehot = np.zeros((labels.size, n_classes))
    onehot[np.arange(labels.size), labels] = 1.0
    logits = nets.classifier_logits(classifier, x_fake, classifier_nodes)
    return ad.softmax_cross_entropy(logits, ad.constant(onehot))


# ---------------------------------------------------------------------------
# classifier pretraining (real seen features)


def fit_softmax_classifier(features, labels, n_classes: int, iterations: int,
                           lr: float, batch_size: int,
                           rng: np.random.Generator) -> nets.LinearParams:
    """Minibatch cross-entropy fit of a linear softmax classifier."""
    features = as_matrix(features)
    labels = np.asarray(labels, dtype=np.int64)
    clf = nets.init_linear(rng, features.shape[1], n_classes)
    state = nets.AdamState(lr=lr, beta1=0.9, beta2=0.999)
    n = features.shape[0]
    for _ in range(iterations):
        idx = rng.integers(0, n, size=min(batch_size, n))
        nodes = {k: ad.param(v) for k, v in clf.arrays().items()}
        loss = classification_loss(clf, ad.constant(features[idx]), labels[idx], nodes)
        grads = ad.backward(loss, nodes.values())
        nets.adam_step(state, clf.arrays(), {k: grads[nodes[k]].value for k in nodes})
    return clf


def pretrain_classifier(features, labels, n_classes: int, cfg: TrainConfig,
                        rng: np.random.Generator) -> nets.LinearParams:
    return fit_softmax_classifier(features, labels, n_classes,
                                  cfg.pretrain_iterations, cfg.pretrain_lr,
                                  cfg.pretrain_batch, rng)


def warm_up_sampler(models: nets.ModelBundle, class_embeddings: np.ndarray,
                    cfg: TrainConfig, rng: np.random.Generator) -> None:
    """Regress the sampler toward the identity transform of the (normalized)
    embedding space with small variance, so the conditioning separates
    classes before adversarial training starts.  An untouched random sampler
    contracts the embedding geometry and the generator cannot bootstrap the
    class signal out of the noise."""
    emb = ad.constant(class_embeddings)
    lss_target = ad.constant(np.full_like(class_embeddings, -2.0))
    state = nets.AdamState(lr=cfg.sampler_warmup_lr, beta1=0.9, beta2=0.999)
    for _ in range(cfg.sampler_warmup_iterations):
        nodes = {k: ad.param(v) for k, v in models.sampler.arrays().items()}
        mu, lss = nets.sampler_forward(models.sampler, emb, nodes)
        loss = ad.add(ad.mean_all(ad.square(ad.sub(mu, emb))),
                      ad.mean_all(ad.square(ad.sub(lss, lss_target))))
        grads = ad.backward(loss, nodes.values())
        nets.adam_step(state, models.sampler.arrays(), {k: grads[nodes[k]].value for k in nodes})


# ---------------------------------------------------------------------------
# conditioning draw (value level, no graph)


def draw_conditioning(sampler: nets.MlpParams, embeddings: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
    """Reparameterized conditioning draw; expects scale-normalized embeddings."""
    mu, lss = nets.sampler_forward(sampler, ad.constant(embeddings))
    u = rng.standard_normal(mu.value.shape)
    return nets.reparameterized_sample(mu, lss, u).value


def conditioning_for(models: nets.ModelBundle, raw_embeddings,
                     rng: np.random.Generator) -> np.ndarray:
    """Conditioning draw from raw (unnormalized) class embeddings."""
    emb = as_matrix(raw_embeddings) / models.embedding_scale
    return draw_conditioning(models.sampler, emb, rng)


# ---------------------------------------------------------------------------
# training


def _index_by_class(labels: np.ndarray, n_classes: int) -> list[np.ndarray]:
    return [np.flatnonzero(labels == c) for c in range(n_classes)]


def _mean_match_loss(x_fake: ad.Node, y: np.ndarray, class_means: np.ndarray) -> ad.Node:
    """Squared distance between batch per-class fake means and the training
    set's class means (feature matching on first moments)."""
    terms = None
    classes = np.unique(y)
    for c in classes:
        rows = np.flatnonzero(y == c)
        sel = np.zeros((1, y.size))
        sel[0, rows] = 1.0 / rows.size
        fake_mean = ad.matmul(ad.constant(sel), x_fake)
        gap = ad.sum_all(ad.square(ad.sub(fake_mean, ad.constant(class_means[c:c + 1]))))
        terms = gap if terms is None else ad.add(terms, gap)
    return ad.scale(terms, 1.0 / classes.size)


def _sample_batch(rng, by_class, batch_size):
    """Uniform over classes, then uniform within the chosen class."""
    picks = np.empty(batch_size, dtype=np.int64)
    classes = rng.integers(0, len(by_class), size=batch_size)
    for i, c in enumerate(classes):
        rows = by_class[c]
        picks[i] = rows[rng.integers(0, rows.size)]
    return picks


def train(features, labels, class_embeddings, config: TrainConfig):
    """Fit sampler, generator and critic on seen triplets.

    `features` is (n, F); `labels` holds indices into the rows of
    `class_embeddings` (K, E), which covers the seen classes only.
    Returns the trained ModelBundle and the per-iteration loss history.

    Training runs on scale-normalized features (non-negativity is kept, the
    scale is undone at synthesis time) and the generator/sampler weights kept
    at the end are an exponential moving average over the run, which removes
    the end-state oscillation of the adversarial game.
    """
    config.validate()
    features = as_matrix(features)
    class_embeddings = as_matrix(class_embeddings)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = class_embeddings.shape[0]
    if labels.size != features.shape[0]:
        raise ValidationError("labels must align with feature rows")
    if labels.size == 0:
        raise ValidationError("empty training set")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValidationError("label outside the embedding table")

    feature_scale = 1.0
    embedding_scale = 1.0
    if config.normalize_features:
        spread = float(features.std())
        if spread > 0.0:
            feature_scale = spread
            features = features / feature_scale
        emb_spread = float(class_embeddings.std())
        if emb_spread > 0.0:
            embedding_scale = emb_spread
            class_embeddings = class_embeddings / embedding_scale

    rng = np.random.default_rng(config.seed)
    models = nets.init_models(
        embedding_dim=class_embeddings.shape[1],
        feature_dim=features.shape[1],
        n_classes=n_classes,
        width_divisor=config.width_divisor,
        seed=config.seed,
    )
    models.feature_scale = feature_scale
    models.embedding_scale = embedding_scale
    if config.sampler_warmup_iterations > 0:
        warm_up_sampler(models, class_embeddings, config, rng)
    models.classifier = pretrain_classifier(features, labels, n_classes, config, rng)
    frozen_classifier = not config.finetune_classifier

    critic_lr = config.critic_lr if config.critic_lr is not None else config.lr
    opt = {
        "critic": nets.AdamState(lr=critic_lr, beta1=config.beta1, beta2=config.beta2),
        "generator": nets.AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2),
        "sampler": nets.AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2),
        "classifier": nets.AdamState(lr=config.pretrain_lr, beta1=0.9),
    }
    by_class = _index_by_class(labels, n_classes)
    for c, rows in enumerate(by_class):
        if rows.size == 0:
            raise ValidationError(f"seen class index {c} has no training instances")
    class_means = np.vstack([features[rows].mean(axis=0) for rows in by_class])

    ema = _EmaTracker(config.ema_decay, models)
    history: list[LossBreakdown] = []
    started = time.monotonic()
    step = 0
    try:
        for it in range(config.iterations):
            wass = gp = 0.0
            for _ in range(config.critic_steps):
                wass, gp = _critic_update(models, opt["critic"], features, labels,
                                          class_embeddings, by_class, config, rng)
                models.step += 1
            cls = _generator_update(models, opt["generator"], features, labels,
                                    class_embeddings, by_class, config, rng, class_means)
            _sampler_update(models, opt["sampler"], features, labels,
                            class_embeddings, by_class, config, rng, class_means)
            if not frozen_classifier:
                _classifier_update(models, opt["classifier"], class_embeddings,
                                   by_class, labels, config, rng)
            ema.update(models)
            step = it + 1
            history.append(LossBreakdown(step, wass, gp, cls, time.monotonic() - started))
    except (NonFiniteError, TrainingError) as exc:
        snapshot = history[-1].record() if history else {}
        raise TrainingError(
            f"training aborted at outer step {step + 1}: {exc}; last record {snapshot}"
        ) from exc
    ema.write_back(models)
    return models, history


class _EmaTracker:
    """Exponential moving average of generator and sampler parameters."""

    def __init__(self, decay: float, models: nets.ModelBundle):
        self.decay = decay
        self.shadow = None
        if decay > 0.0:
            self.shadow = {
                net: {k: v.copy() for k, v in getattr(models, net).arrays().items()}
                for net in ("generator", "sampler")
            }

    def update(self, models: nets.ModelBundle) -> None:
        if self.shadow is None:
            return
        for net, arrays in self.shadow.items():
            current = getattr(models, net).arrays()
            for k, avg in arrays.items():
                avg *= self.decay
                avg += (1.0 - self.decay) * current[k]

    def write_back(self, models: nets.ModelBundle) -> None:
        if self.shadow is None:
            return
        for net, arrays in self.shadow.items():
            target = getattr(models, net)
            for k, avg in arrays.items():
                target.arrays()[k][...] = avg


def _batch_arrays(features, labels, class_embeddings, by_class, config, rng):
    idx = _sample_batch(rng, by_class, config.batch_size)
    return features[idx], labels[idx], class_embeddings[labels[idx]]


def _critic_update(models, state, features, labels, class_embeddings, by_class, config, rng):
    x, y, c_y = _batch_arrays(features, labels, class_embeddings, by_class, config, rng)
    s = draw_conditioning(models.sampler, c_y, rng)
    z = rng.standard_normal(s.shape)
    x_fake = nets.generator_forward(models.generator, ad.constant(s), ad.constant(z)).value
    t = rng.uniform(0.0, 1.0, size=(x.shape[0], 1))

    nodes = {k: ad.param(v) for k, v in models.critic.arrays().items()}
    wass = wgan_loss(models.critic, x, x_fake, s, nodes)
    gp = gradient_penalty(models.critic, x, x_fake, s, t, nodes)
    loss = ad.add(ad.scale(wass, -1.0), ad.scale(gp, config.gp_weight))
    grads = ad.backward(loss, nodes.values())
    nets.adam_step(state, models.critic.arrays(), {k: grads[nodes[k]].value for k in nodes})
    return float(wass.value[0, 0]), float(gp.value[0, 0])


def _generator_update(models, state, features, labels, class_embeddings, by_class, config, rng,
                      class_means=None):
    x, y, c_y = _batch_arrays(features, labels, class_embeddings, by_class, config, rng)
    s = draw_conditioning(models.sampler, c_y, rng)
    z = rng.standard_normal(s.shape)

    nodes = {k: ad.param(v) for k, v in models.generator.arrays().items()}
    x_fake = nets.generator_forward(models.generator, ad.constant(s), ad.constant(z), nodes)
    fake_term = ad.scale(ad.mean_all(nets.critic_forward(models.critic, x_fake, ad.constant(s))), -1.0)
    cls = classification_loss(models.classifier, x_fake, y)
    loss = ad.add(fake_term, ad.scale(cls, config.cls_weight))
    if config.mean_match_weight > 0.0 and class_means is not None:
        loss = ad.add(loss, ad.scale(_mean_match_loss(x_fake, y, class_means),
                                     config.mean_match_weight))
    if config.gp_in_generator:
        t = rng.uniform(0.0, 1.0, size=(x.shape[0], 1))
        loss = ad.add(loss, ad.scale(gradient_penalty(models.critic, x, x_fake.value, s, t),
                                     config.gp_weight))
    grads = ad.backward(loss, nodes.values())
    nets.adam_step(state, models.generator.arrays(), {k: grads[nodes[k]].value for k in nodes})
    return float(cls.value[0, 0])


def _sampler_update(models, state, features, labels, class_embeddings, by_class, config, rng,
                    class_means=None):
    x, y, c_y = _batch_arrays(features, labels, class_embeddings, by_class, config, rng)
    u = rng.standard_normal((c_y.shape[0], class_embeddings.shape[1]))
    z = rng.standard_normal((c_y.shape[0], class_embeddings.shape[1]))

    nodes = {k: ad.param(v) for k, v in models.sampler.arrays().items()}
    mu, lss = nets.sampler_forward(models.sampler, ad.constant(c_y), nodes)
    s = nets.reparameterized_sample(mu, lss, u)
    x_fake = nets.generator_forward(models.generator, s, ad.constant(z))
    fake_term = ad.scale(ad.mean_all(nets.critic_forward(models.critic, x_fake, s)), -1.0)
    cls = classification_loss(models.classifier, x_fake, y)
    loss = ad.add(fake_term, ad.scale(cls, config.cls_weight))
    if config.mean_match_weight > 0.0 and class_means is not None:
        loss = ad.add(loss, ad.scale(_mean_match_loss(x_fake, y, class_means),
                                     config.mean_match_weight))
    if config.containment_weight > 0.0:
        # nothing in the objective bounds the emitted statistics; without a
        # containment box either head can run away through the critic's
        # conditioning slot and destabilize the whole game
        mu_bound = config.mu_bound_factor * max(1.0, np.abs(class_embeddings).max())
        box = ad.add(
            ad.mean_all(ad.square(ad.relu(ad.add_scalar(ad.square(lss), -config.log_sigma_bound ** 2)))),
            ad.mean_all(ad.square(ad.relu(ad.add_scalar(ad.square(mu), -mu_bound ** 2)))),
        )
        loss = ad.add(loss, ad.scale(box, config.containment_weight))
    if config.gp_in_generator:
        t = rng.uniform(0.0, 1.0, size=(x.shape[0], 1))
        loss = ad.add(loss, ad.scale(gradient_penalty(models.critic, x, x_fake.value, s.value, t),
                                     config.gp_weight))
    grads = ad.backward(loss, nodes.values())
    nets.adam_step(state, models.sampler.arrays(), {k: grads[nodes[k]].value for k in nodes})


def _classifier_update(models, state, class_embeddings, by_class, labels, config, rng):
    # optional fine-tuning path; the default keeps the classifier frozen
    y = labels[_sample_batch(rng, by_class, config.batch_size)]
    c_y = class_embeddings[y]
    s = draw_conditioning(models.sampler, c_y, rng)
    z = rng.standard_normal(s.shape)
    x_fake = nets.generator_forward(models.generator, ad.constant(s), ad.constant(z)).value
    nodes = {k: ad.param(v) for k, v in models.classifier.arrays().items()}
    loss = classification_loss(models.classifier, ad.constant(x_fake), y, nodes)
    grads = ad.backward(loss, nodes.values())
    nets.adam_step(state, models.classifier.arrays(), {k: grads[nodes[k]].value for k in nodes})


# ---------------------------------------------------------------------------
# synthesis


def synthesize_features(models: nets.ModelBundle, embeddings: dict[str, np.ndarray],
                        n_per_class: int, seed: int = 0):
    """Generate `n_per_class` labeled features for every class in `embeddings`.

    Output rows are canonically ordered by (class id, sample index) so the
    result is reproducible regardless of how classes were supplied.
    """
    if n_per_class < 0:
        raise ValidationError("n_per_class must be >= 0")
    class_ids = sorted(embeddings.keys())
    rng = np.random.default_rng(seed)
    chunks = []
    out_labels: list[str] = []
    for cid in class_ids:
        emb = as_matrix(embeddings[cid], rows=1, cols=models.embedding_dim)
        if n_per_class == 0:
            continue
        reps = np.repeat(emb, n_per_class, axis=0)
        s = conditioning_for(models, reps, rng)
        z = rng.standard_normal(s.shape)
        x = nets.generator_forward(models.generator, ad.constant(s), ad.constant(z)).value
        chunks.append(x * models.feature_scale)
        out_labels.extend([cid] * n_per_class)
    if not chunks:
        return np.zeros((0, models.feature_dim)), []
    return np.vstack(chunks), out_labels
