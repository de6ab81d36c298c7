"""The attribute filter: encoder, product quantizer, conditioned decoder,
frozen speaker head and adversarial head, plus the five training losses."""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass, field, asdict

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Parameter, Linear, MLP, kaiming_uniform
from .seeding import stream

SEX_TO_INDEX = {"m": 0, "f": 1}


@dataclass
class FilterConfig:
    input_dim: int = 192
    encoder_hidden: tuple = (512, 512, 128)
    decoder_hidden: tuple = (512, 512, 512)
    num_codebooks: int = 64
    codewords_per_book: int = 128
    codeword_dim: int = 4
    quantizer_output_dim: int = 256
    conditioning_dim: int = 4
    dropout: float = 0.1
    temperature: float = 1.0
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 1.0
    delta: float = 0.0
    epsilon: float = 0.0
    attribute_kind: str = "sex"
    mi_neighbors: int = 4
    aam_margin: float = 0.2
    aam_scale: float = 30.0
    grl_lambda: float = 1.0
    adversarial_hidden: tuple = (128, 128, 128)

    def __post_init__(self):
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)
        self.adversarial_hidden = tuple(self.adversarial_hidden)
        dims = (self.input_dim, *self.encoder_hidden, *self.decoder_hidden,
                self.num_codebooks, self.codewords_per_book, self.codeword_dim,
                self.quantizer_output_dim, self.conditioning_dim)
        if any(d <= 0 for d in dims):
            raise ValueError("all dimensions must be positive")
        if self.attribute_kind not in ("sex", "age"):
            raise ValueError("attribute_kind must be 'sex' or 'age'")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if min(self.alpha, self.beta, self.gamma, self.delta, self.epsilon) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def c_attr(self):
        return 2 if self.attribute_kind == "sex" else 1

    @property
    def latent_dim(self):
        return self.num_codebooks * self.codeword_dim

    @property
    def encoder_out_dim(self):
        return self.encoder_hidden[-1]

    def to_dict(self):
        d = asdict(self)
        for k in ("encoder_hidden", "decoder_hidden", "adversarial_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class SpeakerHead:
    """Frozen linear speaker-classification head scored with the AAM loss.

    Rows are kept L2-normalised; after pretraining the weight is frozen and
    never receives updates.
    """

    def __init__(self, speaker_ids, feature_dim, rng):
        self.speaker_ids = list(speaker_ids)
        self.index = {s: i for i, s in enumerate(self.speaker_ids)}
        n = len(self.speaker_ids)
        w = kaiming_uniform(rng, feature_dim, (n, feature_dim))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        self.weight = Parameter(w, "speaker_head.weight")

    def speaker_indices(self, speaker_ids):
        try:
            return np.array([self.index[s] for s in speaker_ids])
        except KeyError as exc:
            raise KeyError(f"unknown speaker id {exc.args[0]!r}") from exc

    def renormalize(self):
        self.weight.values /= np.linalg.norm(self.weight.values, axis=1, keepdims=True)

    def freeze(self):
        self.weight.freeze()
        return self

    def cosines(self, features):
        """Cosine similarity of features [N,d] against every head row."""
        return ad.matmul(ad.l2_normalize(features),
                         ad.transpose(ad.l2_normalize(self.weight)))

    def loss_aam(self, features, speaker_idx, margin, scale):
        """Additive angular margin loss, -mean log softmax of the scaled
        margin-shifted cosine logits."""
        speaker_idx = np.asarray(speaker_idx)
        cos_all = self.cosines(features)
        cos_y = ad.gather_cols(cos_all, speaker_idx[:, None])
        theta = ad.arccos(ad.clip(cos_y, -1.0 + 1e-7, 1.0 - 1e-7))
        cos_margin = ad.cos(theta + Tensor(np.float64(margin)))
        onehot = np.zeros(cos_all.shape)
        onehot[np.arange(len(speaker_idx)), speaker_idx] = 1.0
        logits = ad.add(cos_all, ad.mul(Tensor(onehot), ad.sub(cos_margin, cos_y)))
        return ad.cross_entropy(ad.scale(logits, scale), speaker_idx)


class AdversarialHead:
    """Input batch-norm plus 3 hidden blocks of 128 predicting the attribute
    from the quantized latent behind a gradient reversal layer."""

    def __init__(self, input_dim, c_attr, hidden, rng):
        self.mlp = MLP(input_dim, hidden, c_attr, rng, "adversarial", input_bn=True)

    def __call__(self, z_q, training):
        return self.mlp(z_q, training)

    def parameters(self):
        return self.mlp.parameters()

    def buffers(self):
        return self.mlp.buffers()


class AttributeClassifier:
    """External / attacker attribute classifier: 2 hidden blocks of 128.

    For the continuous attribute the single output regresses the
    standardised age; ``label_mean``/``label_std`` keep the training-label
    statistics so predictions can be mapped back to years.
    """

    def __init__(self, input_dim, attribute_kind, rng, dropout=0.3, hidden=(128, 128)):
        if attribute_kind not in ("sex", "age"):
            raise ValueError("attribute_kind must be 'sex' or 'age'")
        self.attribute_kind = attribute_kind
        self.c_attr = 2 if attribute_kind == "sex" else 1
        self.dropout = dropout
        self.mlp = MLP(input_dim, tuple(hidden), self.c_attr, rng, "classifier",
                       dropout=dropout)
        self.label_mean = 0.0
        self.label_std = 1.0

    def forward(self, x, training, rng=None):
        return self.mlp(x, training, rng)

    def logits(self, vectors):
        """Eval-mode logits as a plain array."""
        return self.forward(Tensor(np.asarray(vectors, dtype=np.float64)),
                            training=False).values

    def predict_labels(self, vectors):
        if self.attribute_kind != "sex":
            raise ValueError("label prediction is for the discrete attribute")
        return self.logits(vectors).argmax(axis=1)

    def scores(self, vectors):
        """Positive-class log-odds for the discrete attribute."""
        l = self.logits(vectors)
        return l[:, 1] - l[:, 0]

    def predict_values(self, vectors):
        """Destandardised regression outputs for the continuous attribute."""
        if self.attribute_kind != "age":
            raise ValueError("value prediction is for the continuous attribute")
        return self.logits(vectors)[:, 0] * self.label_std + self.label_mean

    def parameters(self):
        return self.mlp.parameters()

    def buffers(self):
        return self.mlp.buffers()


class FilterModel:
    """Encoder -> product quantizer -> attribute-conditioned decoder."""

    def __init__(self, config, seed):
        self.config = config
        self.seed = seed
        c = config

        enc_rng = stream(seed, "encoder")
        self.encoder = []
        prev = c.input_dim
        for i, width in enumerate(c.encoder_hidden):
            self.encoder.append(Linear(prev, width, enc_rng, f"encoder.{i}"))
            prev = width

        q_rng = stream(seed, "quantizer")
        self.logit_proj = Linear(c.encoder_out_dim,
                                 c.num_codebooks * c.codewords_per_book,
                                 q_rng, "quantizer.logits")
        self.codebook = Parameter(
            kaiming_uniform(q_rng, c.codeword_dim,
                            (c.num_codebooks, c.codewords_per_book, c.codeword_dim)),
            "quantizer.codebook")
        self.out_proj = Linear(c.latent_dim, c.quantizer_output_dim,
                               q_rng, "quantizer.out")

        self.h_attr = Linear(c.c_attr, c.conditioning_dim,
                             stream(seed, "conditioning"), "conditioning")

        dec_rng = stream(seed, "decoder")
        self.decoder = []
        prev = c.quantizer_output_dim + c.conditioning_dim
        for i, width in enumerate(c.decoder_hidden):
            self.decoder.append(Linear(prev, width, dec_rng, f"decoder.{i}"))
            prev = width
        self.decoder_out = Linear(prev, c.input_dim, dec_rng, "decoder.out")

        self.adversarial = None
        if c.delta != 0.0:
            self.adversarial = AdversarialHead(
                c.quantizer_output_dim, c.c_attr, c.adversarial_hidden,
                stream(seed, "adversarial"))

        self.speaker_head = None
        self.age_mean = 0.0
        self.age_std = 1.0

    # -- forward pieces ----------------------------------------------------

    def encode(self, x, training=False, rng=None):
        if x.shape[1] != self.config.input_dim:
            raise ValueError(f"expected input dim {self.config.input_dim}, "
                             f"got {x.shape[1]}")
        h = x
        for layer in self.encoder:
            h = ad.leaky_relu(layer(h))
            if training and self.config.dropout > 0:
                h = ad.dropout(h, self.config.dropout, rng, training)
        return h

    def quantize(self, z, training=False, rng=None):
        """Sampled straight-through selection in training, argmax in eval.

        Returns (z_q [N,q], soft_probs [N,G,V]).
        """
        c = self.config
        n = z.shape[0]
        logits = ad.reshape(self.logit_proj(z),
                            (n, c.num_codebooks, c.codewords_per_book))
        if training:
            selections, soft = ad.gumbel_softmax_st(
                logits, c.temperature, rng, hard=True)
        else:
            soft = ad.softmax(logits, axis=-1)
            idx = logits.values.argmax(axis=-1)
            hard = np.zeros(logits.shape)
            np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
            selections = Tensor(hard)
        codes = ad.codebook_select(selections, self.codebook)
        flat = ad.reshape(codes, (n, c.latent_dim))
        return self.out_proj(flat), soft

    def condition_and_decode(self, z_q, attr_logits, training=False, rng=None):
        if attr_logits.shape[1] != self.config.c_attr:
            raise ValueError(f"expected {self.config.c_attr} conditioning logits, "
                             f"got {attr_logits.shape[1]}")
        cond = self.h_attr(attr_logits)
        h = ad.concat([z_q, cond], axis=1)
        for layer in self.decoder:
            h = ad.leaky_relu(layer(h))
            if training and self.config.dropout > 0:
                h = ad.dropout(h, self.config.dropout, rng, training)
        return self.decoder_out(h)

    def transform(self, vectors, attr_logits):
        """Full deterministic eval pass on plain arrays."""
        x = Tensor(np.asarray(vectors, dtype=np.float64))
        z = self.encode(x)
        z_q, _ = self.quantize(z)
        x_hat = self.condition_and_decode(z_q, Tensor(np.asarray(attr_logits, float)))
        return x_hat.values

    # -- parameter bookkeeping ----------------------------------------------

    def parameters(self):
        """Trainable parameters (the frozen speaker head is excluded)."""
        params = []
        for layer in self.encoder:
            params += layer.parameters()
        params += self.logit_proj.parameters()
        params.append(self.codebook)
        params += self.out_proj.parameters()
        params += self.h_attr.parameters()
        for layer in self.decoder:
            params += layer.parameters()
        params += self.decoder_out.parameters()
        if self.adversarial is not None:
            params += self.adversarial.parameters()
        return params

    def named_tensors(self):
        """(name, array) pairs for every parameter and buffer, stable order."""
        out = [(p.name, p.values) for p in self.parameters()]
        if self.adversarial is not None:
            out += self.adversarial.buffers()
        if self.speaker_head is not None:
            out.append((self.speaker_head.weight.name, self.speaker_head.weight.values))
        return out


# ---------------------------------------------------------------------------
# losses


def loss_reconstruction(x, x_hat):
    """Batch mean of the squared l2 reconstruction error."""
    return ad.mse(x_hat, x)


def loss_diversity(soft_probs):
    """Mean over codebooks/codewords of p_bar log p_bar for the per-batch
    average selection probabilities; 0 log 0 taken as 0."""
    g, v = soft_probs.shape[1], soft_probs.shape[2]
    p_bar = ad.mean(soft_probs, axis=0)
    return ad.scale(ad.sum_(ad.xlogx(p_bar)), 1.0 / (g * v))


def loss_adversarial(z_q, labels, head, attribute_kind, grl_lambda, training,
                     rng=None):
    """Cross-entropy (discrete) or squared error (continuous) of the
    adversarial head on the reversed-gradient latent."""
    reversed_latent = ad.grad_reverse(z_q, grl_lambda)
    pred = head(reversed_latent, training)
    if attribute_kind == "sex":
        return ad.cross_entropy(pred, np.asarray(labels, dtype=np.int64))
    target = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    return ad.mse(pred, target)


def loss_total(components, weights):
    """Weighted sum alpha*rec + beta*div + gamma*aam + delta*adv + eps*mi;
    zero-weight components may be absent."""
    order = ("reconstruction", "diversity", "aam", "adversarial", "mi")
    total = None
    for name in order:
        w = weights.get(name, 0.0)
        if w == 0.0:
            continue
        if name not in components:
            raise ValueError(f"loss component {name!r} has weight {w} but was not computed")
        term = ad.scale(components[name], w)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("all loss weights are zero")
    return total
