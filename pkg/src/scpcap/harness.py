"""Synthetic data with planted concept structure, training, evaluation and ablations."""

import csv
import io
import json
import logging
import math
import statistics
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .captioner import (Arm, Captioner, CaptionSample, ModelConfig, collate, generate_batch,
                        token_accuracy)
from .corpus import (BOS_ID, EOS_ID, PAD_ID, build_concept_vocab, build_lexicon,
                     count_cooccurrence, extract_concept_labels, tokenize, Vocabulary)
from .optim import clip_grad_norm, make_optimizer
from .wgcn import GraphMode

log = logging.getLogger(__name__)

SUBJECTS = ["baby", "girl", "boy", "dog", "cat", "man", "woman", "horse", "bird", "child",
            "lady", "puppy", "kitten", "player", "cow", "sheep"]
ADJECTIVES = ["little", "young", "happy", "small", "old", "big", "brown", "white", "black",
              "tall", "cute", "tired"]
VERBS = ["drinking", "eating", "holding", "chasing", "carrying", "watching", "throwing",
         "pulling", "catching", "kicking"]
OBJECTS = ["milk", "water", "food", "ball", "book", "apple", "kite", "cake", "frisbee",
           "stick", "juice", "toy", "box", "rope"]

# Order-sensitive caption templates. Every pair of consecutive slot words is a
# dependency the lexicon should find.
TEMPLATES = [
    "a {adj} {subj} is {verb} {obj}",
    "a {subj} is {verb} {obj}",
    "a {adj} {subj} with {obj}",
    "{obj} near a {adj} {subj}",
    "the {subj} is {verb}",
    "the {adj} {subj} {verb} the {obj}",
]
_OBJECT_PRIOR = (0.6, 0.3, 0.1)


@dataclass(frozen=True)
class SyntheticSpec:
    n_concepts: int = 40
    n_templates: int = 4
    n_samples: int = 200
    feature_dim: int = 32
    grid_size: int = 9
    noise_std: float = 0.3
    n_distractors: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 1 <= self.n_templates <= len(TEMPLATES):
            raise ValueError(f"n_templates must be in 1..{len(TEMPLATES)}")
        if self.n_distractors < 0:
            raise ValueError("n_distractors must be >= 0")
        if self.grid_size < 5 + self.n_distractors:
            raise ValueError("grid_size must be >= 5 + n_distractors (4 concepts, layout, distractors)")
        if self.n_concepts < 8:
            raise ValueError("n_concepts must be >= 8")


@dataclass
class SyntheticDataset:
    records: list  # (features [S, d], caption str)
    planted: list  # content words of each caption, in caption order
    adjacent_pairs: set  # consecutive content-word pairs occurring in the captions
    prototypes: dict = field(repr=False)

    @property
    def corpus(self):
        return [caption for _, caption in self.records]

    def to_jsonl(self):
        return "".join(json.dumps({"features": f.tolist(), "caption": c}) + "\n"
                       for f, c in self.records)


def _role_pools(n_concepts):
    n_subj = max(2, round(n_concepts * 0.35))
    n_adj = max(2, round(n_concepts * 0.2))
    n_verb = max(2, round(n_concepts * 0.2))
    n_obj = max(2, n_concepts - n_subj - n_adj - n_verb)
    return (SUBJECTS[:n_subj], ADJECTIVES[:n_adj], VERBS[:n_verb], OBJECTS[:n_obj])


def generate_dataset(spec):
    """Deterministic synthetic captioning data.

    Each concept word has a fixed random prototype. A sample picks a template,
    fills its slots (adjectives attach to a few subjects, each verb prefers
    three objects with a skewed prior), and places the slot words' prototypes
    plus a template-layout prototype at distinct random grid cells over
    Gaussian noise. Distractors are extra object or adjective prototypes in
    the scene that the caption does not mention: objects the verb never takes
    and adjectives the subject never carries.
    """
    rng = np.random.default_rng(spec.seed)
    subjects, adjectives, verbs, objects = _role_pools(spec.n_concepts)
    words = subjects + adjectives + verbs + objects
    protos = {w: rng.normal(size=spec.feature_dim) for w in words}
    layouts = [rng.normal(size=spec.feature_dim) for _ in range(spec.n_templates)]
    adj_for = {s: list(rng.choice(adjectives, size=min(3, len(adjectives)), replace=False))
               for s in subjects}
    obj_for = {v: list(rng.choice(objects, size=min(3, len(objects)), replace=False)) for v in verbs}

    records, planted, pairs = [], [], set()
    for _ in range(spec.n_samples):
        t = int(rng.integers(spec.n_templates))
        subj = subjects[rng.integers(len(subjects))]
        adj = adj_for[subj][rng.integers(len(adj_for[subj]))]
        verb = verbs[rng.integers(len(verbs))]
        choices = obj_for[verb]
        prior = np.array(_OBJECT_PRIOR[:len(choices)])
        obj = choices[rng.choice(len(choices), p=prior / prior.sum())]
        slots = dict(subj=subj, adj=adj, verb=verb, obj=obj)
        caption = TEMPLATES[t].format(**slots)
        content = [w for w in caption.split() if w in protos]
        for a, b in zip(caption.split(), caption.split()[1:]):
            if a in protos and b in protos:
                pairs.add((a, b))
        extra = []
        if spec.n_distractors:
            pool = [o for o in objects if o not in obj_for[verb]] + \
                   [a for a in adjectives if a not in adj_for[subj]]
            pool = [w for w in pool if w not in content]
            extra = [pool[i] for i in rng.choice(len(pool), size=spec.n_distractors, replace=False)]
        cells = rng.choice(spec.grid_size, size=len(content) + len(extra) + 1, replace=False)
        feats = rng.normal(scale=spec.noise_std, size=(spec.grid_size, spec.feature_dim)) \
            if spec.noise_std > 0 else np.zeros((spec.grid_size, spec.feature_dim))
        for w, cell in zip(content + extra, cells[:-1]):
            feats[cell] += protos[w]
        feats[cells[-1]] += layouts[t]
        records.append((feats, caption))
        planted.append(content)
    return SyntheticDataset(records, planted, pairs, protos)


def load_jsonl(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                records.append((np.asarray(obj["features"], dtype=np.float64), obj["caption"]))
            except KeyError as exc:
                raise ValueError(f"{path}:{n}: missing field {exc}") from None
    return records


@dataclass
class Resources:
    """Everything derived from the training captions."""
    vocab: Vocabulary
    cv: object
    table: object
    lexicon: object


def build_resources(captions, window=3, threshold=0.5, min_freq=1):
    sentences = [tokenize(c) for c in captions]
    vocab = Vocabulary.build(sentences)
    cv = build_concept_vocab(sentences, min_freq, vocab)
    table = count_cooccurrence(sentences, window, vocab)
    return Resources(vocab, cv, table, build_lexicon(table, threshold))


def make_samples(records, vocab, cv, max_len=None):
    out = []
    for feats, caption in records:
        ids = vocab.encode(tokenize(caption))
        if max_len is not None and len(ids) > max_len:
            raise ValueError(f"caption longer than max_caption_len={max_len}: {caption!r}")
        out.append(CaptionSample(np.asarray(feats, dtype=np.float64), ids,
                                 extract_concept_labels(ids, cv), caption))
    return out


def config_for(resources, samples, **overrides):
    base = dict(vocab_size=len(resources.vocab), concept_vocab_size=len(resources.cv),
                feature_dim=samples[0].features.shape[-1])
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class TrainingError(RuntimeError):
    pass


LOG_FIELDS = ("epoch", "total_loss", "cap_loss", "concept_loss", "token_acc")


def _batches(n, batch_size, rng, shapes):
    order = rng.permutation(n)
    buckets = {}
    for i in order:
        buckets.setdefault(shapes[i], []).append(int(i))
    for idx in buckets.values():
        for s in range(0, len(idx), batch_size):
            yield idx[s:s + batch_size]


def train(model, samples, lexicon, epochs, lr, optimizer="adam", batch_size=32, seed=0,
          clip=5.0, stop=None):
    """Mini-batch training; returns one log row (dict) per epoch.

    ``stop(row)`` may end training early after any epoch.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    params = model.parameters()
    opt = make_optimizer(optimizer, params, lr)
    rng = np.random.default_rng(seed)
    shapes = [s.features.shape for s in samples]
    rows = []
    for epoch in range(1, epochs + 1):
        sums = np.zeros(3)
        correct = counted = 0
        for idx in _batches(len(samples), batch_size, rng, shapes):
            batch = collate([samples[i] for i in idx])
            model.zero_grad()
            try:
                losses = model.forward_train(batch, lexicon)
            except ad.NonFiniteError as exc:
                raise TrainingError(f"non-finite value in forward pass at epoch {epoch}: {exc}") from exc
            vals = np.array([losses.total.item(), losses.cap.item(), losses.concept.item()])
            if not np.all(np.isfinite(vals)):
                raise TrainingError(f"NaN loss at epoch {epoch}: {vals}")
            ad.backward(losses.total)
            clip_grad_norm(params, clip)
            opt.step()
            sums += vals * len(idx)
            c, n = token_accuracy(losses.logits, batch.tokens[:, 1:])
            correct += c
            counted += n
        means = sums / len(samples)
        row = dict(epoch=epoch, total_loss=means[0], cap_loss=means[1], concept_loss=means[2],
                   token_acc=correct / max(counted, 1))
        rows.append(row)
        log.info("epoch %d total %.4f cap %.4f concept %.4f acc %.4f", epoch, *means, row["token_acc"])
        if stop is not None and stop(row):
            break
    return rows


def format_log(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow([r["epoch"]] + [f"{r[k]:.10g}" for k in LOG_FIELDS[1:]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    token_accuracy: float
    exact_match: float
    bleu1: float
    concept_f1: float
    losses: dict = field(default_factory=dict)


def _words(ids):
    return [i for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID)]


def bleu1(candidates, references):
    """Corpus BLEU-1: clipped unigram precision times the brevity penalty."""
    matched = cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cc, rc = Counter(cand), Counter(ref)
        matched += sum(min(n, rc[w]) for w, n in cc.items())
        cand_len += len(cand)
        ref_len += len(ref)
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * matched / cand_len


def concept_f1(probs, labels, threshold=0.5):
    """Micro-averaged multi-label F1 of ``probs >= threshold`` against ``labels``."""
    pred = np.asarray(probs) >= threshold
    gold = np.asarray(labels) > 0.5
    tp = int((pred & gold).sum())
    denom = int(pred.sum()) + int(gold.sum())
    return 1.0 if denom == 0 else 2 * tp / denom


def evaluate(model, samples, lexicon, batch_size=64):
    if not samples:
        raise ValueError("empty dataset")
    shapes = [s.features.shape for s in samples]
    correct = counted = 0
    sums = np.zeros(3)
    exact = 0
    cands, refs, probs_all, labels_all = [], [], [], []
    with ad.no_grad():
        groups = {}
        for i, shp in enumerate(shapes):
            groups.setdefault(shp, []).append(i)
        for idx_all in groups.values():
            for s in range(0, len(idx_all), batch_size):
                chunk = [samples[i] for i in idx_all[s:s + batch_size]]
                batch = collate(chunk)
                losses = model.forward_train(batch, lexicon)
                c, n = token_accuracy(losses.logits, batch.tokens[:, 1:])
                correct += c
                counted += n
                sums += np.array([losses.total.item(), losses.cap.item(), losses.concept.item()]) * len(chunk)
                if model.arm is not Arm.BASELINE:
                    v = model.visual_encode(batch.features)
                    probs_all.append(model.predict_concepts(v)[0].data)
                    labels_all.append(batch.labels)
                outs = generate_batch(batch.features, model, lexicon)
                for sample, out in zip(chunk, outs):
                    exact += int(out == list(sample.caption[1:]))
                    cands.append(_words(out))
                    refs.append(_words(sample.caption))
    n = len(samples)
    f1 = concept_f1(np.concatenate(probs_all), np.concatenate(labels_all)) if probs_all else 0.0
    return EvalReport(correct / max(counted, 1), exact / n, bleu1(cands, refs), f1,
                      dict(zip(("total", "cap", "concept"), (sums / n).tolist())))


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArmSpec:
    name: str
    arm: str
    graph_mode: str = GraphMode.THRESHOLD.value
    threshold: float = 0.5


def parse_arm(name):
    key = name.strip().lower().replace("-", "_")
    if key in ("baseline", "cp", "cp_wgcn"):
        return ArmSpec(name, key)
    if key in (GraphMode.RANDOM.value, GraphMode.ONE_FOR_ALL.value, "1_for_all", GraphMode.MLP.value):
        mode = GraphMode.ONE_FOR_ALL.value if key == "1_for_all" else key
        return ArmSpec(name, Arm.CP_WGCN.value, mode)
    if key.startswith("threshold_"):
        return ArmSpec(name, Arm.CP_WGCN.value, GraphMode.THRESHOLD.value, float(key.split("_", 1)[1]))
    raise ValueError(f"unknown ablation arm {name!r}")


@dataclass
class AblationSettings:
    epochs: int = 60
    lr: float = 2e-3
    batch_size: int = 32
    n_eval: int = 200
    window: int = 3
    min_freq: int = 1
    threads: int = 1
    model: dict = field(default_factory=dict)


REPORT_METRICS = ("exact_match", "token_accuracy", "bleu1", "concept_f1")


def run_arm(arm, seed, train_samples, eval_samples, resources, settings):
    lexicon = resources.lexicon
    if arm.graph_mode == GraphMode.THRESHOLD.value and arm.threshold != lexicon.threshold:
        lexicon = build_lexicon(resources.table, arm.threshold)
    cfg = config_for(resources, train_samples, **{**settings.model, "arm": arm.arm,
                                                  "graph_mode": arm.graph_mode, "seed": seed})
    model = Captioner(cfg, resources.cv.concept_ids)
    rows = train(model, train_samples, lexicon, settings.epochs, settings.lr,
                 batch_size=settings.batch_size, seed=seed)
    report = evaluate(model, eval_samples, lexicon)
    report.losses["final_train_total"] = rows[-1]["total_loss"]
    return model, report


def run_ablation(spec, arms, seeds, settings=None):
    """Train every (arm, seed) pair on the same data; returns {arm name: [EvalReport per seed]}.

    Models are evaluated on ``settings.n_eval`` held-out samples drawn from the
    same generator after the training samples.
    """
    settings = settings or AblationSettings()
    arms = [parse_arm(a) if isinstance(a, str) else a for a in arms]
    if not arms or not seeds:
        raise ValueError("need at least one arm and one seed")
    full = generate_dataset(replace(spec, n_samples=spec.n_samples + settings.n_eval))
    train_rec, eval_rec = full.records[:spec.n_samples], full.records[spec.n_samples:]
    resources = build_resources([c for _, c in train_rec], settings.window, 0.5, settings.min_freq)
    max_len = settings.model.get("max_caption_len", ModelConfig.max_caption_len)
    train_samples = make_samples(train_rec, resources.vocab, resources.cv, max_len)
    eval_samples = make_samples(eval_rec, resources.vocab, resources.cv, max_len)

    jobs = [(a, s) for a in arms for s in seeds]

    def work(job):
        return run_arm(job[0], job[1], train_samples, eval_samples, resources, settings)[1]

    if settings.threads > 1:
        with ThreadPoolExecutor(settings.threads) as pool:
            reports = list(pool.map(work, jobs))
    else:
        reports = [work(j) for j in jobs]
    out = {a.name: [] for a in arms}
    for (a, _), r in zip(jobs, reports):
        out[a.name].append(r)
    return out


def summarize(results):
    """{arm: {metric: (mean, std)}} with sample standard deviation."""
    out = {}
    for arm, reports in results.items():
        out[arm] = {}
        for m in REPORT_METRICS:
            vals = [getattr(r, m) for r in reports]
            out[arm][m] = (statistics.fmean(vals), statistics.stdev(vals) if len(vals) > 1 else 0.0)
    return out


def format_ablation(results, seeds):
    """TSV with one row per (arm, seed) and one aggregate row (seed ``all``) per arm."""
    header = ["arm", "seed"] + [c for m in REPORT_METRICS for c in (m, m + "_std")]
    lines = ["\t".join(header)]
    for arm, reports in results.items():
        for seed, r in zip(seeds, reports):
            lines.append("\t".join([arm, str(seed)] + [f"{x:.6f}" for m in REPORT_METRICS
                                                       for x in (getattr(r, m), 0.0)]))
    for arm, stats in summarize(results).items():
        lines.append("\t".join([arm, "all"] + [f"{x:.6f}" for m in REPORT_METRICS for x in stats[m]]))
    return "\n".join(lines) + "\n"
