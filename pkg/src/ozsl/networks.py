"""The four parametric models and their optimizer.

Generator, critic and conditioning sampler are single-hidden-layer MLPs
with leaky-rectifier hidden units (hidden sizes 4096 / 4096 / 2048 at full
width, shrunk by an integer width divisor for desk-scale runs).  The
classifier used for the classification regularizer and for final inference
is a plain linear softmax model.

The sampler maps a class embedding to (mu, log(sqrt(sigma))); sigma is
recovered as exp(.)**2 so it is positive by construction.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, TrainingError, ValidationError
from .matio import as_matrix, read_matrix, write_matrix

FULL_HIDDEN_GENERATOR = 4096
FULL_HIDDEN_CRITIC = 4096
FULL_HIDDEN_SAMPLER = 2048
FULL_FEATURE_DIM = 2048

LEAKY_SLOPE = 0.2


@dataclass
class MlpParams:
    """Single-hidden-layer perceptron: in -> hidden (leaky) -> out."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    slope: float = LEAKY_SLOPE

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


@dataclass
class LinearParams:
    W: np.ndarray
    b: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_mlp(rng, in_dim: int, hidden: int, out_dim: int, slope: float = LEAKY_SLOPE) -> MlpParams:
    return MlpParams(
        W1=xavier_uniform(rng, in_dim, hidden),
        b1=np.zeros((1, hidden)),
        W2=xavier_uniform(rng, hidden, out_dim),
        b2=np.zeros((1, out_dim)),
        slope=slope,
    )


def init_linear(rng, in_dim: int, out_dim: int) -> LinearParams:
    return LinearParams(W=xavier_uniform(rng, in_dim, out_dim), b=np.zeros((1, out_dim)))


def parameter_count(in_dim: int, hidden: int, out_dim: int) -> int:
    """Parameters of one MLP as a pure function of its dimensions."""
    return in_dim * hidden + hidden + hidden * out_dim + out_dim


def scaled_hidden(full: int, width_divisor: int) -> int:
    if width_divisor < 1:
        raise ValidationError(f"width divisor must be >= 1, got {width_divisor}")
    return max(1, full // width_divisor)


# ---------------------------------------------------------------------------
# forward passes (graph-building; pass ad.param leaves to train)


def mlp_forward(p: MlpParams, x: ad.Node, params: dict[str, ad.Node] | None = None) -> ad.Node:
    """Hidden leaky-rectifier layer plus linear output.

    `params` supplies graph leaves for the weights when training; inference
    wraps current values as constants.
    """
    if params is None:
        params = {k: ad.constant(v) for k, v in p.arrays().items()}
    h = ad.leaky_relu(ad.add_bias(ad.matmul(x, params["W1"]), params["b1"]), p.slope)
    return ad.add_bias(ad.matmul(h, params["W2"]), params["b2"])


def sampler_forward(p: MlpParams, c: ad.Node, params=None) -> tuple[ad.Node, ad.Node]:
    """Class embedding -> (mu, log_sqrt_sigma), both embedding-sized."""
    out = mlp_forward(p, c, params)
    dim = out.value.shape[1]
    if dim % 2 != 0:
        raise DimensionError("sampler output must split into two equal halves")
    half = dim // 2
    return ad.slice_cols(out, 0, half), ad.slice_cols(out, half, dim)


def reparameterized_sample(mu: ad.Node, log_sqrt_sigma: ad.Node, u: np.ndarray) -> ad.Node:
    """s = mu + sigma * u with sigma = exp(log_sqrt_sigma)**2, u ~ N(0, I)."""
    u = as_matrix(u, *mu.value.shape)
    sigma = ad.square(ad.exp(log_sqrt_sigma))
    return ad.add(mu, ad.mul(sigma, ad.constant(u)))


def generator_forward(p: MlpParams, s: ad.Node, z: ad.Node, params=None) -> ad.Node:
    """Conditioning sample concatenated with same-sized noise -> rectified features."""
    if s.value.shape[1] != z.value.shape[1]:
        raise DimensionError(f"noise dim {z.value.shape[1]} != conditioning dim {s.value.shape[1]}")
    return ad.relu(mlp_forward(p, ad.concat_cols(s, z), params))


def critic_forward(p: MlpParams, x: ad.Node, c: ad.Node, params=None) -> ad.Node:
    """Feature/conditioning pair -> unconstrained per-row score (n x 1)."""
    return mlp_forward(p, ad.concat_cols(x, c), params)


def classifier_logits(p: LinearParams, x: ad.Node, params=None) -> ad.Node:
    if params is None:
        params = {k: ad.constant(v) for k, v in p.arrays().items()}
    return ad.add_bias(ad.matmul(x, params["W"]), params["b"])


def classifier_probs(p: LinearParams, features: np.ndarray) -> np.ndarray:
    """Value-level softmax probabilities (rows sum to one)."""
    logits = classifier_logits(p, ad.constant(as_matrix(features)))
    return ad.softmax_rows(logits.value)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, applied to the arrays in place."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"adam: grad shape {g.shape} != param shape {p.shape} for {name}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if not np.isfinite(p).all():
            raise TrainingError(f"non-finite parameter after adam step: {name}")


# ---------------------------------------------------------------------------
# model bundle and checkpoints


@dataclass
class ModelBundle:
    """Sampler, generator, critic and (pretrained) classifier plus their dims.

    `feature_scale` records the scale-only normalization applied to the
    training features (synthesis multiplies it back in); `embedding_scale`
    the one applied to class embeddings entering the sampler.
    """

    sampler: MlpParams
    generator: MlpParams
    critic: MlpParams
    classifier: LinearParams
    embedding_dim: int
    feature_dim: int
    width_divisor: int
    seed: int
    step: int = 0
    feature_scale: float = 1.0
    embedding_scale: float = 1.0


def init_models(embedding_dim: int, feature_dim: int, n_classes: int,
                width_divisor: int = 1, seed: int = 0) -> ModelBundle:
    rng = np.random.default_rng(seed)
    h_s = scaled_hidden(FULL_HIDDEN_SAMPLER, width_divisor)
    h_g = scaled_hidden(FULL_HIDDEN_GENERATOR, width_divisor)
    h_d = scaled_hidden(FULL_HIDDEN_CRITIC, width_divisor)
    generator = init_mlp(rng, 2 * embedding_dim, h_g, feature_dim)
    generator.b2 += 0.5  # rectified output must start alive or its gradient is zero forever
    sampler = init_mlp(rng, embedding_dim, h_s, 2 * embedding_dim)
    # start with small conditioning variance so the mean head carries the
    # class signal from the first step; sigma = exp(-2)^2 ~ 0.02
    sampler.b2[0, embedding_dim:] = -2.0
    return ModelBundle(
        sampler=sampler,
        generator=generator,
        critic=init_mlp(rng, feature_dim + embedding_dim, h_d, 1),
        classifier=init_linear(rng, feature_dim, n_classes),
        embedding_dim=embedding_dim,
        feature_dim=feature_dim,
        width_divisor=width_divisor,
        seed=seed,
    )


_SECTIONS = ("sampler", "generator", "critic", "classifier")
CHECKPOINT_MAGIC = "OZSLCKP1"


def checkpoint_bytes(models: ModelBundle) -> bytes:
    """Named sections of OZSLMAT1 matrices behind a one-line JSON header."""
    sections = {name: sorted(getattr(models, name).arrays().keys()) for name in _SECTIONS}
    header = {
        "magic": CHECKPOINT_MAGIC,
        "meta": {
            "embedding_dim": models.embedding_dim,
            "feature_dim": models.feature_dim,
            "width_divisor": models.width_divisor,
            "seed": models.seed,
            "step": models.step,
            "feature_scale": models.feature_scale,
            "embedding_scale": models.embedding_scale,
        },
        "sections": sections,
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    for name in _SECTIONS:
        arrays = getattr(models, name).arrays()
        for key in sections[name]:
            write_matrix(buf, arrays[key])
    return buf.getvalue()


def save_checkpoint(path, models: ModelBundle) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(models))


def load_checkpoint(path) -> ModelBundle:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path}: bad checkpoint header") from exc
        if header.get("magic") != CHECKPOINT_MAGIC:
            raise ValidationError(f"{path}: not a checkpoint file")
        mats: dict[str, dict[str, np.ndarray]] = {}
        for name in _SECTIONS:
            mats[name] = {}
            for key in header["sections"][name]:
                mats[name][key] = read_matrix(fh)
    meta = header["meta"]
    models = ModelBundle(
        sampler=MlpParams(**{k: mats["sampler"][k] for k in ("W1", "b1", "W2", "b2")}),
        generator=MlpParams(**{k: mats["generator"][k] for k in ("W1", "b1", "W2", "b2")}),
        critic=MlpParams(**{k: mats["critic"][k] for k in ("W1", "b1", "W2", "b2")}),
        classifier=LinearParams(W=mats["classifier"]["W"], b=mats["classifier"]["b"]),
        embedding_dim=int(meta["embedding_dim"]),
        feature_dim=int(meta["feature_dim"]),
        width_divisor=int(meta["width_divisor"]),
        seed=int(meta["seed"]),
        step=int(meta["step"]),
        feature_scale=float(meta.get("feature_scale", 1.0)),
        embedding_scale=float(meta.get("embedding_scale", 1.0)),
    )
    return models
