"""Recognizer architecture: a subsampling bidirectional recurrent encoder with
a grapheme CTC head on the last layer, a phoneme CTC head on a lower layer, a
location-aware attention decoder, and an affine language classifier over the
utterance mean of the penultimate encoder layer.

The convolutional front end is replaced by stack-and-project frame stacking
(same time reduction, much smaller op set), and the recurrent cell is a
single-gate gated unit rather than an LSTM.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import ctc

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PASR1\n"

# Reserved grapheme ids; the CTC blank is always the last index (size of the
# respective vocabulary) for both grapheme and phoneme heads.
SOS, EOS, UNK = 0, 1, 2
SPECIALS = ("<sos>", "<eos>", "<unk>")


@dataclass
class ModelConfig:
    feature_dim: int
    encoder_layers: int
    hidden_size: int
    subsample_factor: int
    decoder_embed_size: int
    attention_dim: int
    attention_conv_width: int
    grapheme_vocab_size: int
    phoneme_vocab_size: int
    num_pretrain_languages: int
    attention_conv_channels: int = 4
    phoneme_head_layer: int = -1  # -1 resolves to the penultimate layer

    def __post_init__(self):
        if self.encoder_layers < 2:
            raise ValueError("encoder_layers must be >= 2 (a penultimate layer must exist)")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "phoneme_head_layer" and v < 1:
                raise ValueError(f"{f.name} must be >= 1, got {v}")
        if self.attention_conv_width % 2 != 1:
            raise ValueError("attention_conv_width must be odd")
        if self.phoneme_head_layer == -1:
            self.phoneme_head_layer = self.encoder_layers - 2
        if not (0 <= self.phoneme_head_layer < self.encoder_layers):
            raise ValueError("phoneme_head_layer out of range")


def desk_config(grapheme_vocab_size, phoneme_vocab_size, num_pretrain_languages,
                feature_dim=8):
    """The small configuration used for tests and bundled experiments.

    The location conv must see at least one full inter-token hop: with
    subsample factor 4 and ~10-frame phonemes, consecutive outputs sit 2-4
    encoder frames apart, so the window spans +-3.
    """
    return ModelConfig(
        feature_dim=feature_dim,
        encoder_layers=2,
        hidden_size=32,
        subsample_factor=4,
        decoder_embed_size=16,
        attention_dim=32,
        attention_conv_width=7,
        grapheme_vocab_size=grapheme_vocab_size,
        phoneme_vocab_size=phoneme_vocab_size,
        num_pretrain_languages=num_pretrain_languages,
    )


def full_scale_config(grapheme_vocab_size, phoneme_vocab_size, num_pretrain_languages):
    """The full-scale preset (4x768 encoder, 1-layer decoder); not used in tests."""
    return ModelConfig(
        feature_dim=80,
        encoder_layers=4,
        hidden_size=768,
        subsample_factor=4,
        decoder_embed_size=768,
        attention_dim=768,
        attention_conv_width=101,
        grapheme_vocab_size=grapheme_vocab_size,
        phoneme_vocab_size=phoneme_vocab_size,
        num_pretrain_languages=num_pretrain_languages,
        attention_conv_channels=10,
    )


class ModelParams:
    """Ordered name -> float64 ndarray container for every trainable tensor."""

    def __init__(self, tensors):
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def bind(self, graph):
        """Register every tensor as a parameter node of the graph."""
        return {name: graph.parameter(name, value) for name, value in self.tensors.items()}

    # Tensor groups used by the two-phase update and by adaptation freezing.
    def classifier_names(self):
        return [n for n in self.tensors if n.startswith("lang.")]

    def phoneme_head_names(self):
        return [n for n in self.tensors if n.startswith("ctc_p.")]

    def encoder_names(self):
        return [n for n in self.tensors if n.startswith("enc.")]

    def recognition_names(self, use_phoneme=True):
        out = [n for n in self.tensors if not n.startswith("lang.")]
        if not use_phoneme:
            out = [n for n in out if not n.startswith("ctc_p.")]
        return out

    def adversarial_names(self):
        return [n for n in self.tensors if n.startswith(("enc.", "lang."))]


def init_params(config, seed):
    """Deterministic parameter initialization for a config.

    Matrices are uniform +-1/sqrt(fan_in), biases zero, and the language
    classifier starts at exactly zero so its initial posterior is uniform.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x70415352)))
    tensors = {}

    def mat(name, rows, cols, fan=None):
        s = 1.0 / np.sqrt(fan if fan is not None else rows)
        tensors[name] = rng.uniform(-s, s, size=(rows, cols))

    def vec(name, n, scale=0.0):
        tensors[name] = (rng.uniform(-scale, scale, size=n) if scale else np.zeros(n))

    h = config.hidden_size
    for layer in range(config.encoder_layers):
        d_in = config.feature_dim * config.subsample_factor if layer == 0 else h
        for d in ("f", "b"):
            p = f"enc.l{layer}.{d}"
            mat(f"{p}.wz", d_in, h)
            mat(f"{p}.uz", h, h)
            vec(f"{p}.bz", h)
            mat(f"{p}.wh", d_in, h)
            mat(f"{p}.uh", h, h)
            vec(f"{p}.bh", h)
        mat(f"enc.l{layer}.proj.w", 2 * h, h)
        vec(f"enc.l{layer}.proj.b", h)

    g, e = config.grapheme_vocab_size, config.decoder_embed_size
    tensors["dec.embed"] = rng.uniform(-0.3, 0.3, size=(g, e))
    d_in = e + h
    mat("dec.wz", d_in, h)
    mat("dec.uz", h, h)
    vec("dec.bz", h)
    mat("dec.wh", d_in, h)
    mat("dec.uh", h, h)
    vec("dec.bh", h)

    a, c = config.attention_dim, config.attention_conv_channels
    mat("att.w_dec", h, a)
    mat("att.w_enc", h, a)
    mat("att.w_feat", c, a)
    tensors["att.v"] = rng.uniform(-1, 1, size=a) / np.sqrt(a)
    # one-hot "mass c frames back" basis so location features are usable
    # immediately; channels beyond the window fall back to random taps
    conv = np.zeros((c, config.attention_conv_width))
    mid = config.attention_conv_width // 2
    for ch in range(c):
        if mid - ch >= 0:
            conv[ch, mid - ch] = 1.0
        else:
            conv[ch] = rng.uniform(-1, 1, size=config.attention_conv_width)
    tensors["att.conv"] = conv

    mat("out.w", 2 * h, g)
    vec("out.b", g)
    mat("ctc_g.w", h, g + 1)
    vec("ctc_g.b", g + 1)
    mat("ctc_p.w", h, config.phoneme_vocab_size + 1)
    vec("ctc_p.b", config.phoneme_vocab_size + 1)
    tensors["lang.w"] = np.zeros((h, config.num_pretrain_languages))
    tensors["lang.b"] = np.zeros(config.num_pretrain_languages)
    return ModelParams(tensors)


class EncoderStates:
    """Per-layer hidden state sequences, each (T', H)."""

    def __init__(self, layers, length, total_layers):
        self.layers = layers
        self.length = length
        self.total_layers = total_layers

    @property
    def final(self):
        if len(self.layers) < self.total_layers:
            raise ValueError("final layer was not computed (truncated encode)")
        return self.layers[self.total_layers - 1]

    @property
    def penultimate(self):
        return self.layers[self.total_layers - 2]


def stack_frames(features, factor):
    """Concatenate groups of `factor` consecutive frames, zero-padding the tail."""
    feats = np.asarray(features, dtype=np.float64)
    t, f = feats.shape
    t_out = -(-t // factor)
    padded = np.zeros((t_out * factor, f))
    padded[:t] = feats
    return padded.reshape(t_out, f * factor)


def _cell_step(xz_row, xh_row, h_prev, uz, uh):
    """Single-gate gated recurrent cell: h = z*h_prev + (1-z)*tanh(...)."""
    z = ad.sigmoid(ad.add(xz_row, ad.matmul(h_prev, uz)))
    cand = ad.tanh(ad.add(xh_row, ad.matmul(h_prev, uh)))
    return ad.add(ad.mul(z, h_prev), ad.mul(ad.scale(z, -1.0, 1.0), cand))


def _recurrent_sweep(graph, x, prefix, bound, reverse):
    t_len = x.value.shape[0]
    h = graph.constant(np.zeros(bound[f"{prefix}.uz"].value.shape[0]))
    xz = ad.add(ad.matmul(x, bound[f"{prefix}.wz"]), bound[f"{prefix}.bz"])
    xh = ad.add(ad.matmul(x, bound[f"{prefix}.wh"]), bound[f"{prefix}.bh"])
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    out = [None] * t_len
    for t in order:
        h = _cell_step(ad.row(xz, t), ad.row(xh, t), h, bound[f"{prefix}.uz"], bound[f"{prefix}.uh"])
        out[t] = h
    return ad.stack_rows(out)


def encode(bound, config, features, graph, upto_layer=None):
    """Frame-stack then run the bidirectional recurrent stack.

    `upto_layer` (inclusive) truncates the stack; the adversarial pass only
    needs layers up to the penultimate one.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError(f"features must be (T, F) with T >= 1, got {feats.shape}")
    if feats.shape[1] != config.feature_dim:
        raise ValueError(f"feature dim {feats.shape[1]} != configured {config.feature_dim}")
    last = config.encoder_layers - 1 if upto_layer is None else upto_layer
    x = graph.constant(stack_frames(feats, config.subsample_factor))
    t_prime = x.value.shape[0]
    layers = []
    for layer in range(last + 1):
        fwd = _recurrent_sweep(graph, x, f"enc.l{layer}.f", bound, reverse=False)
        bwd = _recurrent_sweep(graph, x, f"enc.l{layer}.b", bound, reverse=True)
        both = ad.concat_last(fwd, bwd)
        x = ad.tanh(ad.add(ad.matmul(both, bound[f"enc.l{layer}.proj.w"]),
                           bound[f"enc.l{layer}.proj.b"]))
        layers.append(x)
    return EncoderStates(layers, t_prime, config.encoder_layers)


def attend(bound, decoder_state, final_states, prev_alignment):
    """Location-aware attention step.

    score_t = v . tanh(W s + V h_t + U f_t) with f the 1-D convolution of the
    previous alignment; returns (context, alignment).
    """
    f = ad.conv1d_same(bound["att.conv"], prev_alignment)
    pre = ad.add(ad.matmul(final_states, bound["att.w_enc"]),
                 ad.matmul(decoder_state, bound["att.w_dec"]))
    pre = ad.add(pre, ad.matmul(f, bound["att.w_feat"]))
    scores = ad.matmul(ad.tanh(pre), bound["att.v"])
    alignment = ad.softmax_rows(scores)
    if abs(float(alignment.value.sum()) - 1.0) > 1e-9:
        raise AssertionError("attention alignment does not sum to 1")
    context = ad.matmul(alignment, final_states)
    return context, alignment


def _decoder_step(bound, prev_emb, s_prev, align_prev, final_states):
    context, alignment = attend(bound, s_prev, final_states, align_prev)
    x = ad.concat_last(prev_emb, context)
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, bound["dec.wz"]), bound["dec.bz"]),
                          ad.matmul(s_prev, bound["dec.uz"])))
    cand = ad.tanh(ad.add(ad.add(ad.matmul(x, bound["dec.wh"]), bound["dec.bh"]),
                          ad.matmul(s_prev, bound["dec.uh"])))
    s = ad.add(ad.mul(z, s_prev), ad.mul(ad.scale(z, -1.0, 1.0), cand))
    logits = ad.add(ad.matmul(ad.concat_last(s, context), bound["out.w"]), bound["out.b"])
    return s, alignment, logits


def _initial_decoder_state(graph, config, t_prime):
    s = graph.constant(np.zeros(config.hidden_size))
    align = graph.constant(np.full(t_prime, 1.0 / t_prime))
    return s, align


def decoder_nll(bound, config, enc, target, graph):
    """Teacher-forced mean cross-entropy over the target graphemes plus EOS."""
    target = list(target)
    in_ids = [SOS] + target
    out_ids = target + [EOS]
    embs = ad.embedding(bound["dec.embed"], in_ids)
    s, align = _initial_decoder_state(graph, config, enc.length)
    logit_rows = []
    for t in range(len(in_ids)):
        s, align, logits = _decoder_step(bound, ad.row(embs, t), s, align, enc.final)
        logit_rows.append(logits)
    logp = ad.log_softmax_rows(ad.stack_rows(logit_rows))
    return ad.neg(ad.reduce_mean(ad.gather_rows(logp, out_ids)))


def _ctc_head_loss(states, w, b, label, what):
    logits = ad.add(ad.matmul(states, w), b)
    loss = ctc.ctc_loss_node(ad.log_softmax_rows(logits), label)
    if loss is None:
        logger.warning("infeasible %s CTC alignment (T'=%d, U=%d); utterance skipped",
                       what, states.value.shape[0], len(label))
    return loss


def grapheme_ctc_loss(bound, enc, target):
    """-log CTC likelihood of the graphemes under the final-layer head, or None."""
    return _ctc_head_loss(enc.final, bound["ctc_g.w"], bound["ctc_g.b"], target, "grapheme")


def phoneme_ctc_loss(bound, config, enc, phonemes):
    """Phoneme CTC head; reads the configured lower encoder layer, or None."""
    states = enc.layers[config.phoneme_head_layer]
    return _ctc_head_loss(states, bound["ctc_p.w"], bound["ctc_p.b"], phonemes, "phoneme")


def language_logits(bound, enc, reverse_lambda=None):
    """Affine language scores from the time-mean of penultimate states.

    During adversarial steps the gradient-reversal scaling is applied to the
    pooled mean, not inside the classifier.
    """
    pooled = ad.mean_time(enc.penultimate)
    if reverse_lambda is not None:
        pooled = ad.grad_reverse(pooled, reverse_lambda)
    return ad.add(ad.matmul(pooled, bound["lang.w"]), bound["lang.b"])


@dataclass
class DecodeResult:
    ids: list
    log_prob: float
    score: float  # length-normalized
    hit_cap: bool


def _decode_values(params, config, features, beam_size):
    graph = ad.Graph()
    bound = params.bind(graph)
    enc = encode(bound, config, features, graph)
    max_len = 2 * enc.length
    s0, align0 = _initial_decoder_state(graph, config, enc.length)
    # hypothesis: (ids, logp, s, align, finished)
    beams = [([], 0.0, s0, align0, False)]
    done = []
    for _ in range(max_len):
        expansions = []
        for ids, lp, s, align, fin in beams:
            if fin:
                continue
            prev = ids[-1] if ids else SOS
            emb = ad.embedding(bound["dec.embed"], [prev])
            s2, align2, logits = _decoder_step(bound, ad.row(emb, 0), s, align, enc.final)
            logp = ad.log_softmax_rows(logits).value
            order = np.argsort(-logp)[:beam_size]
            for sym in order:
                sym = int(sym)
                if sym == SOS:
                    continue
                expansions.append((ids + [sym], lp + float(logp[sym]), s2, align2, sym == EOS))
        if not expansions:
            break
        expansions.sort(key=lambda h: (-h[1], h[0]))
        beams = []
        for h in expansions:
            if h[4]:
                done.append(h)
            else:
                beams.append(h)
            if len(beams) >= beam_size:
                break

    def normalized(h):
        return h[1] / max(1, len(h[0]))

    if done:
        best = max(done, key=normalized)
        ids = best[0][:-1]  # strip EOS
        return DecodeResult(ids, best[1], normalized(best), False)
    best = max(beams, key=normalized)
    return DecodeResult(best[0], best[1], normalized(best), True)


def beam_decode(params, config, features, beam_size=4):
    """Length-normalized attention beam search; beam_size=1 is greedy.

    For wider beams the greedy hypothesis is always kept as a candidate so the
    returned score never falls below the greedy score.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    result = _decode_values(params, config, features, beam_size)
    if result.hit_cap:
        logger.warning("beam decode hit the 2*T' length cap without EOS")
    if beam_size == 1:
        return result
    greedy = _decode_values(params, config, features, 1)
    return result if result.score >= greedy.score else greedy


def save_checkpoint(path, params, config):
    """Write magic, a text header (config then tensor shapes), then raw
    little-endian float64 data in header order."""
    lines = []
    for f in fields(config):
        lines.append(f"config {f.name} {getattr(config, f.name)}")
    for name, arr in params.tensors.items():
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {dims}")
    header = "\n".join(lines) + "\ndata\n"
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(header.encode("utf-8"))
        for arr in params.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        cfg_kv = {}
        shapes = []
        while True:
            line = b""
            while not line.endswith(b"\n"):
                c = fh.read(1)
                if not c:
                    raise ValueError(f"{path}: truncated header")
                line += c
            text = line.decode("utf-8").rstrip("\n")
            if text == "data":
                break
            kind, rest = text.split(" ", 1)
            if kind == "config":
                key, value = rest.split(" ")
                cfg_kv[key] = int(value)
            elif kind == "tensor":
                parts = rest.split(" ")
                shapes.append((parts[0], tuple(int(d) for d in parts[1:])))
            else:
                raise ValueError(f"{path}: unknown header line {text!r}")
        config = ModelConfig(**cfg_kv)
        tensors = {}
        for name, shape in shapes:
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise ValueError(f"{path}: truncated data for tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return ModelParams(tensors), config


def checkpoint_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
