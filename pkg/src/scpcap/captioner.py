"""The captioning model: visual encoder, concept predictor, W-GCN and decoder."""

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS_ID, EOS_ID, PAD_ID
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, causal_mask
from .wgcn import WGCN, GraphMode, build_adjacency, build_adjacency_ablation, stack_graphs


class Arm(str, enum.Enum):
    BASELINE = "baseline"  # decoder attends to visual features only
    CP = "cp"  # + predicted concept features, unstructured
    CP_WGCN = "cp_wgcn"  # + W-GCN over the predicted concepts


class DecodeMode(str, enum.Enum):
    GREEDY = "greedy"
    BEAM = "beam"


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    ffn_dim: int = 128
    use_ffn: bool = True
    n_enc_layers: int = 2
    n_concept_layers: int = 2
    n_dec_layers: int = 2
    query_count: int = 17
    gcn_layers: int = 2
    feature_dim: int = 32
    vocab_size: int = 128
    concept_vocab_size: int = 64
    max_caption_len: int = 16
    beta: float = 1.0
    top_k: int = 17
    beam_size: int = 3
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    asl_clip: float = 0.05
    arm: str = Arm.CP_WGCN.value
    graph_mode: str = GraphMode.THRESHOLD.value
    gt_concepts: bool = False
    seed: int = 0

    @classmethod
    def full_scale(cls, **overrides):
        base = dict(d_model=512, heads=8, ffn_dim=2048, n_enc_layers=3, n_concept_layers=6,
                    n_dec_layers=6, query_count=17, gcn_layers=2, feature_dim=2048,
                    concept_vocab_size=906, beta=1.0, beam_size=3)
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        for name in ("d_model", "heads", "ffn_dim", "n_enc_layers", "n_concept_layers",
                     "n_dec_layers", "query_count", "gcn_layers", "feature_dim", "vocab_size",
                     "concept_vocab_size", "max_caption_len", "top_k", "beam_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        Arm(self.arm)
        GraphMode(self.graph_mode)
        return self

    @property
    def k_nodes(self):
        return min(self.top_k, self.concept_vocab_size)

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in sorted(dataclasses.asdict(self).items()))

    @classmethod
    def from_text(cls, text, base=None):
        values = dataclasses.asdict(base) if base is not None else {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            values[key] = parse_value(types[key], raw.strip())
        return cls(**values)


def parse_value(typ, raw):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return {"int": int, "float": float, "str": str}[typ](raw)


@dataclass
class CaptionSample:
    features: np.ndarray  # [S, feature_dim]
    caption: list  # token ids with BOS ... EOS
    concept_labels: np.ndarray  # multi-hot over the concept vocabulary
    text: str = field(default="", compare=False)


class Batch(NamedTuple):
    features: np.ndarray  # [B, S, d_feat]
    tokens: np.ndarray  # [B, T] BOS ... EOS PAD ...
    labels: np.ndarray  # [B, K]


def collate(samples):
    s = {x.features.shape for x in samples}
    if len(s) != 1:
        raise ValueError(f"samples in a batch need equal feature shapes, got {sorted(s)}")
    t = max(len(x.caption) for x in samples)
    tokens = np.full((len(samples), t), PAD_ID, dtype=np.int64)
    for i, x in enumerate(samples):
        tokens[i, :len(x.caption)] = x.caption
    return Batch(np.stack([x.features for x in samples]), tokens,
                 np.stack([x.concept_labels for x in samples]))


class Losses(NamedTuple):
    total: Tensor
    cap: Tensor
    concept: Tensor
    logits: Tensor


class EncoderBlock(Module):
    def __init__(self, rng, cfg):
        self.attn = MultiHeadAttention(rng, cfg.d_model, cfg.heads)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(rng, cfg.d_model, cfg.ffn_dim) if cfg.use_ffn else None
        self.norm2 = LayerNorm(cfg.d_model) if cfg.use_ffn else None

    def __call__(self, x, memory=None):
        kv = x if memory is None else memory
        x = self.norm1(x + self.attn(x, kv, kv))
        if self.ffn is not None:
            x = self.norm2(x + self.ffn(x))
        return x


class DecoderBlock(Module):
    def __init__(self, rng, cfg, with_concepts):
        d = cfg.d_model
        self.self_attn = MultiHeadAttention(rng, d, cfg.heads)
        self.norm1 = LayerNorm(d)
        self.visual_attn = MultiHeadAttention(rng, d, cfg.heads)
        self.concept_attn = MultiHeadAttention(rng, d, cfg.heads) if with_concepts else None
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(rng, d, cfg.ffn_dim) if cfg.use_ffn else None
        self.norm3 = LayerNorm(d) if cfg.use_ffn else None

    def __call__(self, x, visual, concepts, mask):
        x = self.norm1(x + self.self_attn(x, x, x, mask))
        h = self.visual_attn(x, visual, visual)
        if concepts is not None:
            h = h + self.concept_attn(x, concepts, concepts)
        x = self.norm2(x + h)
        if self.ffn is not None:
            x = self.norm3(x + self.ffn(x))
        return x


class Captioner(Module):
    """The full model. ``concept_ids`` maps concept positions to vocabulary ids."""

    def __init__(self, cfg, concept_ids):
        cfg.validate()
        if len(concept_ids) != cfg.concept_vocab_size:
            raise ValueError("concept_ids length must equal concept_vocab_size")
        self.cfg = cfg
        self.arm = Arm(cfg.arm)
        self.concept_ids = np.asarray(concept_ids, dtype=np.int64)
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        uses_concepts = self.arm is not Arm.BASELINE

        self.feat_proj = Linear(rng, cfg.feature_dim, d)
        self.encoder = [EncoderBlock(rng, cfg) for _ in range(cfg.n_enc_layers)]
        if uses_concepts:
            self.queries = Tensor(rng.uniform(-1, 1, size=(cfg.query_count, d)), requires_grad=True)
            self.concept_blocks = [EncoderBlock(rng, cfg) for _ in range(cfg.n_concept_layers)]
            self.concept_hidden = Linear(rng, d, d)
            self.concept_out = Linear(rng, d, cfg.concept_vocab_size)
        self.word_emb = Tensor(rng.normal(size=(cfg.vocab_size, d)), requires_grad=True)
        self.pos_emb = Tensor(rng.normal(size=(cfg.max_caption_len, d)), requires_grad=True)
        if self.arm is Arm.CP_WGCN:
            self.wgcn = WGCN(rng, d, cfg.gcn_layers, cfg.graph_mode)
        self.decoder = [DecoderBlock(rng, cfg, uses_concepts) for _ in range(cfg.n_dec_layers)]
        self.head = Linear(rng, d, cfg.vocab_size)

    # -- visual encoder ----------------------------------------------------

    def visual_encode(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.cfg.feature_dim:
            raise ValueError(f"feature dim {features.shape[-1]} != config {self.cfg.feature_dim}")
        if features.shape[-2] < 1:
            raise ValueError("empty feature grid")
        x = self.feat_proj(Tensor(features))
        for block in self.encoder:
            x = block(x)
        return x

    # -- concept prediction ------------------------------------------------

    def concept_states(self, v_tilde):
        h = self.queries
        for block in self.concept_blocks:
            h = block(h, memory=v_tilde)
        return h

    def concept_scores(self, h):
        """Per-query concept probabilities, [..., Q, K]."""
        return ad.sigmoid(self.concept_out(ad.relu(self.concept_hidden(h))))

    def predict_concepts(self, v_tilde):
        """Concept probabilities [..., K] (max over queries) plus the query states and scores."""
        h = self.concept_states(v_tilde)
        scores = self.concept_scores(h)
        return ad.tmax(scores, axis=-2), h, scores

    def concept_nodes(self, probs, h, scores, labels=None):
        """Pick top-k concepts per sample and build their node features.

        Returns node features [B, k, d] and the selected vocabulary ids [B, k].
        Node feature = word embedding + state of the query that scored it highest.
        """
        p = np.asarray(probs.data)
        if labels is not None:
            p = np.asarray(labels) + 1e-3 * p
        k = self.cfg.k_nodes
        pos = np.stack([select_positions(row, k) for row in p])
        words = self.concept_ids[pos]
        best_q = np.argmax(scores.data, axis=-2)  # [B, K]
        qidx = np.take_along_axis(best_q, pos, axis=-1)
        rows = np.arange(p.shape[0])[:, None]
        if h.ndim == 2:  # no visual batch dim (queries only)
            hq = ad.index(h, qidx)
        else:
            hq = ad.index(h, (rows, qidx))
        return ad.embedding(self.word_emb, words) + hq, words

    def graphs_for(self, words, lexicon):
        mode = GraphMode(self.cfg.graph_mode)
        graphs = []
        for row in words:
            nodes = [int(w) for w in row]
            if mode is GraphMode.THRESHOLD:
                graphs.append(build_adjacency(nodes, lexicon))
            else:
                seed = np.random.SeedSequence([self.cfg.seed, *nodes])
                graphs.append(build_adjacency_ablation(nodes, mode, int(seed.generate_state(1)[0])))
        return stack_graphs(graphs)

    def structured_concepts(self, v_tilde, lexicon, labels=None):
        """Returns (c_tilde or None, concept probabilities or None)."""
        if self.arm is Arm.BASELINE:
            return None, None
        probs, h, scores = self.predict_concepts(v_tilde)
        nodes, words = self.concept_nodes(probs, h, scores, labels if self.cfg.gt_concepts else None)
        if self.arm is Arm.CP:
            return nodes, probs
        adjacency, tags = self.graphs_for(words, lexicon)
        return self.wgcn(nodes, adjacency, tags), probs

    # -- decoder -----------------------------------------------------------

    def decode(self, tokens, v_tilde, c_tilde):
        """Logits [B, T, V] for every position of ``tokens`` [B, T] under a causal mask."""
        tokens = np.asarray(tokens, dtype=np.int64)
        t = tokens.shape[-1]
        if t == 0:
            raise ValueError("empty prefix")
        if t > self.cfg.max_caption_len:
            raise ValueError(f"prefix length {t} exceeds max_caption_len {self.cfg.max_caption_len}")
        x = ad.embedding(self.word_emb, tokens) + self.pos_emb[:t]
        mask = causal_mask(t)
        for block in self.decoder:
            x = block(x, v_tilde, c_tilde, mask)
        return self.head(x)

    def decode_step(self, prefix, v_tilde, c_tilde):
        """Next-token logits [B, V] after ``prefix`` [B, T] (BOS first)."""
        prefix = np.atleast_2d(np.asarray(prefix, dtype=np.int64))
        if prefix.shape[-1] == 0:
            raise ValueError("empty prefix")
        if (prefix[:, 0] != BOS_ID).any():
            raise ValueError("prefix must start with BOS")
        return self.decode(prefix, v_tilde, c_tilde)[:, -1, :]

    # -- training ----------------------------------------------------------

    def forward_train(self, batch, lexicon):
        cfg = self.cfg
        v_tilde = self.visual_encode(batch.features)
        c_tilde, probs = self.structured_concepts(v_tilde, lexicon, batch.labels)
        logits = self.decode(batch.tokens[:, :-1], v_tilde, c_tilde)
        cap = caption_loss(logits, batch.tokens[:, 1:])
        if probs is None:
            concept = Tensor(np.array(0.0))
        else:
            concept = ad.asymmetric_loss(probs, batch.labels, cfg.gamma_pos, cfg.gamma_neg, cfg.asl_clip)
        return Losses(total_loss(cap, concept, cfg.beta), cap, concept, logits)

    # -- inference ---------------------------------------------------------

    def prepare(self, features, lexicon):
        """Encode one sample's features; returns (v_tilde, c_tilde) with batch dim 1."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 2:
            features = features[None]
        v = self.visual_encode(features)
        c, _ = self.structured_concepts(v, lexicon)
        return v, c

    def next_log_probs(self, prefixes, v_tilde, c_tilde):
        """Log-probabilities over the vocabulary, PAD and BOS excluded."""
        logits = self.decode_step(prefixes, v_tilde, c_tilde).data.copy()
        logits[:, [PAD_ID, BOS_ID]] = -np.inf
        m = logits.max(axis=-1, keepdims=True)
        return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def select_positions(probs, k):
    """Indices of the k largest probabilities; ties go to the lower index."""
    probs = np.asarray(probs)
    order = np.lexsort((np.arange(len(probs)), -probs))
    return order[:k]


def select_concepts(probs, cv, top_k):
    """Vocabulary ids of the ``top_k`` most probable concepts."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    pos = select_positions(np.asarray(getattr(probs, "data", probs)), min(top_k, len(cv)))
    return [cv.concept_ids[i] for i in pos]


def caption_loss(logits, targets):
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"caption_loss: logits {logits.shape} vs targets {targets.shape}")
    return ad.cross_entropy(logits, targets, pad_id=PAD_ID)


def total_loss(cap_loss, concept_loss, beta):
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return cap_loss + concept_loss * beta


def token_accuracy(logits, targets):
    """(correct, counted) over non-PAD targets."""
    targets = np.asarray(targets)
    keep = targets != PAD_ID
    pred = np.argmax(np.asarray(getattr(logits, "data", logits)), axis=-1)
    return int(((pred == targets) & keep).sum()), int(keep.sum())


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

@dataclass
class BeamHypothesis:
    tokens: list
    log_prob: float = 0.0
    finished: bool = False

    def score(self):
        """Length-normalized log-probability (BOS not counted)."""
        n = max(len(self.tokens) - 1, 1)
        return self.log_prob / n


def greedy_search(step_fn, max_new_tokens, bos=BOS_ID, eos=EOS_ID):
    tokens = [bos]
    log_prob = 0.0
    for _ in range(max_new_tokens):
        lp = step_fn([tokens])[0]
        nxt = int(np.argmax(lp))
        tokens.append(nxt)
        log_prob += float(lp[nxt])
        if nxt == eos:
            break
    return BeamHypothesis(tokens, log_prob, tokens[-1] == eos)


def beam_search(step_fn, beam_size, max_new_tokens, bos=BOS_ID, eos=EOS_ID):
    """Keep the ``beam_size`` best partial hypotheses by total log-probability.

    Candidates ending in EOS are retired; the search ends when no live
    hypothesis remains or the length limit is hit. The result is the retired
    hypothesis with the best length-normalized score. ``step_fn`` maps a list
    of prefixes to an [n, V] array of next-token log-probabilities.
    """
    alive = [BeamHypothesis([bos])]
    done = []
    for _ in range(max_new_tokens):
        lp = step_fn([h.tokens for h in alive])
        cands = []
        for hi, h in enumerate(alive):
            for tok in np.flatnonzero(np.isfinite(lp[hi])):
                cands.append((h.log_prob + float(lp[hi, tok]), hi, int(tok)))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        alive_next = []
        for total, hi, tok in cands[:beam_size]:
            hyp = BeamHypothesis(alive[hi].tokens + [tok], total, tok == eos)
            (done if hyp.finished else alive_next).append(hyp)
        alive = alive_next
        if not alive:
            break
    done.extend(alive)
    best = done[0]
    for h in done[1:]:
        if h.score() > best.score():
            best = h
    return best


def generate(features, model, lexicon, mode=DecodeMode.GREEDY, beam_size=None, max_len=None):
    """Token ids after BOS, ending in EOS unless the length limit is reached."""
    mode = DecodeMode(mode)
    max_len = max_len or model.cfg.max_caption_len
    with ad.no_grad():
        v, c = model.prepare(features, lexicon)

        def step(prefixes):
            return model.next_log_probs(np.array(prefixes), v, c)

        if mode is DecodeMode.GREEDY:
            hyp = greedy_search(step, max_len - 1)
        else:
            hyp = beam_search(step, beam_size or model.cfg.beam_size, max_len - 1)
    return hyp.tokens[1:]


def generate_batch(features, model, lexicon, max_len=None):
    """Greedy decoding of a batch [B, S, d_feat] in parallel."""
    max_len = max_len or model.cfg.max_caption_len
    features = np.asarray(features, dtype=np.float64)
    b = features.shape[0]
    with ad.no_grad():
        v = model.visual_encode(features)
        c, _ = model.structured_concepts(v, lexicon)
        tokens = np.full((b, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(b, bool)
        for _ in range(max_len - 1):
            logits = model.decode_step(tokens, v, c).data.copy()
            logits[:, [PAD_ID, BOS_ID]] = -np.inf
            nxt = np.where(done, PAD_ID, np.argmax(logits, axis=-1))
            tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
            done |= nxt == EOS_ID
            if done.all():
                break
    out = []
    for row in tokens[:, 1:]:
        row = list(row)
        out.append(row[:row.index(EOS_ID) + 1] if EOS_ID in row else row)
    return out
