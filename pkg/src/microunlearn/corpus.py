"""Synthetic concept-tagged QA corpus: generation, splits, block schedule.

Each example is a fixed-length token question plus a short answer, labelled
with a subject. Knowledge is planted as key-token -> answer-token mappings:

* L1/L2 examples probe shared mappings (the same key gives the same answer in
  every subject), so they are reinforced corpus-wide and labelled with
  non-target subjects.
* L3 examples probe a non-target subject's private key pool.
* L4 examples probe the target subject's private key pool; the target subject
  (by convention the first subject name, "surgery") is the unlearning target,
  so the forget split is exactly the L4-keyed slice.

Vocabulary is partitioned contiguously by level. Pool sizes follow a
sqrt-smoothed version of the example mix so that per-key repetition decreases
from L1 to L4, which gives deeper levels thinner memorization margins.

Serialized dataset format (line-delimited text, documented here and in the
README): first line ``# microunlearn-dataset v1 vocab=<V> split=<tag>``, then
one record per line with comma-separated decimal fields
``id,subject,n_question,q_1,...,q_k,a_1,...,a_m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .hierarchy import ConceptMap, Level

SUBJECT_NAMES = (
    "surgery",
    "cardiology",
    "pediatrics",
    "neurology",
    "dermatology",
    "radiology",
    "psychiatry",
    "oncology",
)


class InvalidProportions(ValueError):
    """Level mix does not describe a 4-way probability split."""


class VocabTooSmall(ValueError):
    """Vocabulary cannot host the per-level pools."""


class UnknownSubject(ValueError):
    """Requested subject does not occur in the dataset."""


class EmptyForgetSet(ValueError):
    """Cannot schedule unlearning without forget examples."""


@dataclass(frozen=True)
class Example:
    """One QA record: question tokens, answer tokens, subject label, id."""

    id: int
    subject: str
    question_tokens: Tuple[int, ...]
    answer_tokens: Tuple[int, ...]

    def __post_init__(self):
        if len(self.answer_tokens) == 0:
            raise ValueError("answer_tokens must be non-empty")

    @property
    def tokens(self) -> Tuple[int, ...]:
        return self.question_tokens + self.answer_tokens


@dataclass(frozen=True)
class Dataset:
    """Ordered collection of examples over a fixed vocabulary."""

    examples: Tuple[Example, ...]
    vocab_size: int
    split_tag: str = "full"

    def __len__(self) -> int:
        return len(self.examples)

    def subjects(self) -> Tuple[str, ...]:
        seen: List[str] = []
        for e in self.examples:
            if e.subject not in seen:
                seen.append(e.subject)
        return tuple(seen)

    def by_id(self) -> Dict[int, Example]:
        return {e.id: e for e in self.examples}


@dataclass(frozen=True)
class BlockSchedule:
    """Sequential unlearning blocks of (forget ids, retain ids)."""

    blocks: Tuple[Tuple[Tuple[int, ...], Tuple[int, ...]], ...]
    retain_ratio_m: int


def loss_mask(e: Example) -> np.ndarray:
    """Boolean mask over question ++ answer positions, true on answers."""
    return np.array(
        [False] * len(e.question_tokens) + [True] * len(e.answer_tokens), dtype=bool
    )


def _validate_mix(level_mix: Sequence[float]) -> Tuple[float, float, float, float]:
    mix = tuple(float(p) for p in level_mix)
    if len(mix) != 4:
        raise InvalidProportions(f"level_mix needs 4 entries, got {len(mix)}")
    if any(p < 0 for p in mix):
        raise InvalidProportions(f"negative proportion in {mix}")
    if abs(sum(mix) - 1.0) > 1e-9:
        raise InvalidProportions(f"level_mix sums to {sum(mix)}, expected 1")
    return mix


def _largest_remainder(total: int, weights: Sequence[float]) -> List[int]:
    """Integer allocation of ``total`` proportional to ``weights``."""
    raw = [total * w for w in weights]
    counts = [int(math.floor(r)) for r in raw]
    short = total - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in order[:short]:
        counts[i] += 1
    return counts


def _key_answer_split(
    pool: Sequence[int],
    rng: np.random.Generator,
    max_keys: int = 16,
    key_fraction: int = 4,
) -> Tuple[List[int], List[int], List[int]]:
    """Split a level pool into disjoint (keys, answers, spare) sub-pools.

    Keys are the tokens whose presence determines an answer; answer tokens
    never appear inside questions, and spare tokens serve as pure filler
    noise. Keeping the three roles disjoint is what makes the key->answer
    mapping learnable from varying filler.
    """
    pool = list(pool)
    if len(pool) < 4:
        raise VocabTooSmall(f"level pool of {len(pool)} tokens cannot host keys+answers")
    n_keys = max(2, min(max_keys, len(pool) // key_fraction, len(pool) // 2))
    keys = pool[:n_keys]
    answers = pool[n_keys : 2 * n_keys]
    spare = pool[2 * n_keys :]
    return keys, answers, spare


def _association(
    keys: Sequence[int], answers: Sequence[int], rng: np.random.Generator
) -> Dict[int, int]:
    """Seeded bijection from key tokens to answer tokens."""
    shuffled = [int(t) for t in rng.permutation(np.array(answers))]
    return dict(zip(keys, shuffled))


def generate_synthetic(
    vocab_size: int,
    n_subjects: int,
    n_examples: int,
    level_mix: Sequence[float],
    seed: int,
    question_len: int = 6,
    answer_len: int = 1,
    target_general_share: float = 0.05,
) -> Tuple[Dataset, ConceptMap]:
    """Generate a deterministic concept-tagged corpus and its token map.

    ``target_general_share`` is the fraction of shared (L1/L2) questions
    labelled with the target subject; keeping it small makes the target's
    corpus mostly private knowledge while still entangling it with shared
    mappings, which is what the gradient projection has to protect.

    Returns the full (unpartitioned) dataset with ``split_tag='full'`` and a
    ConceptMap whose token part covers every vocabulary id.
    """
    mix = _validate_mix(level_mix)
    if n_subjects < 2:
        raise ValueError("need at least 2 subjects (one target, one retained)")
    if n_subjects > len(SUBJECT_NAMES):
        raise ValueError(f"at most {len(SUBJECT_NAMES)} subjects supported")
    if vocab_size < 4 * n_subjects:
        raise VocabTooSmall(f"vocab_size {vocab_size} < 4 * n_subjects")
    if question_len < 2:
        raise ValueError("question_len must be >= 2 (filler + key)")
    if answer_len < 1:
        raise ValueError("answer_len must be >= 1")
    if not (0.0 <= target_general_share < 1.0):
        raise ValueError("target_general_share must be in [0, 1)")

    subjects = SUBJECT_NAMES[:n_subjects]
    target = subjects[0]
    others = subjects[1:]

    # Vocabulary partition: sqrt-smoothed so high levels get relatively more
    # tokens per example, lowering per-key repetition as level grows.
    weights = [math.sqrt(p) for p in mix]
    wsum = sum(weights) or 1.0
    weights = [w / wsum for w in weights]
    pool_sizes = _largest_remainder(vocab_size, weights)
    minimum = [4, 4, 4 * max(1, len(others)), 4]
    for lv_idx in range(4):
        if mix[lv_idx] > 0 and pool_sizes[lv_idx] < minimum[lv_idx]:
            raise VocabTooSmall(
                f"level L{lv_idx + 1} pool of {pool_sizes[lv_idx]} tokens is too "
                f"small for vocab_size {vocab_size}"
            )

    bounds = np.cumsum([0] + pool_sizes)
    ranges = [list(range(bounds[i], bounds[i + 1])) for i in range(4)]
    token_level = {}
    for lv_idx, toks in enumerate(ranges):
        for t in toks:
            token_level[t] = Level(lv_idx + 1)

    rng = np.random.default_rng(np.random.SeedSequence(seed))

    # Carve disjoint key/answer/filler roles out of each level range; shared
    # associations for L1/L2, per-subject private key pools carved out of L3
    # (non-target subjects) and L4 (target subject).
    assoc: Dict[int, int] = {}
    keys_l1: List[int] = []
    keys_l2: List[int] = []
    spare_l1, spare_l2 = list(ranges[0]), list(ranges[1])
    if mix[0] > 0:
        keys_l1, answers_l1, spare_l1 = _key_answer_split(ranges[0], rng)
        assoc.update(_association(keys_l1, answers_l1, rng))
    if mix[1] > 0:
        keys_l2, answers_l2, spare_l2 = _key_answer_split(ranges[1], rng)
        assoc.update(_association(keys_l2, answers_l2, rng))
    subject_keys: Dict[str, List[int]] = {}
    if mix[2] > 0:
        chunks = np.array_split(np.array(ranges[2]), len(others))
        for name, chunk in zip(others, chunks):
            # Wider key pools at L3: fewer repetitions per key, so specialty
            # knowledge is memorized with thinner margins than L1/L2.
            keys, answers, _ = _key_answer_split(
                [int(t) for t in chunk], rng, max_keys=10, key_fraction=2
            )
            subject_keys[name] = keys
            assoc.update(_association(keys, answers, rng))
    if mix[3] > 0:
        keys, answers, _ = _key_answer_split(ranges[3], rng)
        subject_keys[target] = keys
        assoc.update(_association(keys, answers, rng))

    counts = _largest_remainder(n_examples, mix)
    # Filler is pure noise drawn from spare tokens, so no question carries a
    # second answer-bearing key. Specialty questions additionally cite one
    # lower-level "anchor" key as context (a specialty question referencing a
    # general clinical concept), which entangles target knowledge with shared
    # vocabulary without changing the answer.
    filler_l1 = spare_l1
    filler_shared = spare_l1 + spare_l2
    if (mix[0] > 0 and not filler_l1) or not filler_shared:
        raise VocabTooSmall("no filler tokens left after key/answer allocation")

    def make_example(
        eid: int,
        subject: str,
        key: int,
        filler_pool: Sequence[int],
        anchor_pool: Sequence[int] = (),
    ):
        n_filler = question_len - 1
        parts = []
        if anchor_pool and question_len >= 3:
            parts.append(int(anchor_pool[rng.integers(len(anchor_pool))]))
            n_filler -= 1
        filler = rng.choice(np.array(filler_pool), size=n_filler, replace=True)
        question = np.array(parts + [int(t) for t in filler] + [key])
        question = question[rng.permutation(question_len)]
        first = assoc[key]
        answer = [first]
        if answer_len > 1:
            pool = sorted(
                {a for k, a in assoc.items() if token_level[k] == token_level[key]}
            )
            base = pool.index(first)
            for j in range(1, answer_len):
                answer.append(pool[(base + j) % len(pool)])
        return Example(
            id=eid,
            subject=subject,
            question_tokens=tuple(int(t) for t in question),
            answer_tokens=tuple(answer),
        )

    examples: List[Example] = []
    eid = 0
    # L1/L2: shared knowledge. The target subject asks a small share of these
    # questions; retained subjects split the rest evenly.
    subject_probs = [target_general_share] + [
        (1.0 - target_general_share) / len(others)
    ] * len(others)
    for lv_idx, level_keys in ((0, keys_l1), (1, keys_l2)):
        filler_pool = filler_l1 if lv_idx == 0 else filler_shared
        for _ in range(counts[lv_idx]):
            key = int(level_keys[rng.integers(len(level_keys))])
            subject = subjects[int(rng.choice(len(subjects), p=subject_probs))]
            examples.append(make_example(eid, subject, key, filler_pool))
            eid += 1
    # L3: private to each retained subject, round-robin.
    for k in range(counts[2]):
        subject = others[k % len(others)]
        keys = subject_keys[subject]
        key = int(keys[rng.integers(len(keys))])
        examples.append(make_example(eid, subject, key, filler_shared))
        eid += 1
    # L4: private to the target subject. Each question cites one shared
    # clinical anchor, entangling the target's records with a handful of
    # retained L2 rows (what the projection then has to protect).
    anchor_keys = tuple(keys_l2[: min(4, len(keys_l2))]) if keys_l2 else ()
    for _ in range(counts[3]):
        keys = subject_keys[target]
        key = int(keys[rng.integers(len(keys))])
        examples.append(make_example(eid, target, key, filler_shared, anchor_keys))
        eid += 1

    order = rng.permutation(len(examples))
    shuffled = tuple(
        replace(examples[int(i)], id=new_id) for new_id, i in enumerate(order)
    )
    dataset = Dataset(examples=shuffled, vocab_size=vocab_size, split_tag="full")
    return dataset, ConceptMap(token_level=token_level)


def partition_dataset(
    d: Dataset,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    concept_map: ConceptMap | None = None,
) -> Tuple[Dataset, Dataset, Dataset]:
    """Shuffle and slice into train/validation/test datasets.

    With a concept map the split is stratified by (subject, level), so every
    split carries a proportional slice of each knowledge stratum; sizes stay
    within rounding of the ratios either way.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be 3 non-negative values summing to 1: {ratios}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    if concept_map is None:
        strata = {None: list(range(len(d.examples)))}
    else:
        strata = {}
        for i, e in enumerate(d.examples):
            strata.setdefault((e.subject, example_level(e, concept_map)), []).append(i)

    idx_train: List[int] = []
    idx_val: List[int] = []
    idx_test: List[int] = []
    for key in sorted(strata, key=str):
        members = strata[key]
        order = [members[int(i)] for i in rng.permutation(len(members))]
        counts = _largest_remainder(len(order), ratios)
        idx_train += order[: counts[0]]
        idx_val += order[counts[0] : counts[0] + counts[1]]
        idx_test += order[counts[0] + counts[1] :]

    def take(idx, tag):
        return Dataset(
            examples=tuple(d.examples[i] for i in sorted(idx)),
            vocab_size=d.vocab_size,
            split_tag=tag,
        )

    return take(idx_train, "train"), take(idx_val, "validation"), take(idx_test, "test")


def split_by_subject(d: Dataset, target_subject: str) -> Tuple[Dataset, Dataset]:
    """Partition into (forget, retain) by exact subject match."""
    if target_subject not in {e.subject for e in d.examples}:
        raise UnknownSubject(f"subject {target_subject!r} not in dataset")
    forget = tuple(e for e in d.examples if e.subject == target_subject)
    retain = tuple(e for e in d.examples if e.subject != target_subject)
    return (
        Dataset(examples=forget, vocab_size=d.vocab_size, split_tag=d.split_tag),
        Dataset(examples=retain, vocab_size=d.vocab_size, split_tag=d.split_tag),
    )


def schedule_blocks(
    d_f: Dataset,
    d_r: Dataset,
    block_size: int,
    m: int,
    seed: int,
) -> BlockSchedule:
    """Chunk the forget set into blocks, pairing m:1 retain examples.

    Retain examples are drawn seeded-random without replacement until the
    retain pool is exhausted, then with replacement.
    """
    if len(d_f) == 0:
        raise EmptyForgetSet("forget set is empty")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    if m < 1:
        raise ValueError("retain ratio m must be >= 1")
    if len(d_r) == 0:
        raise ValueError("retain set is empty; cannot pair retain examples")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    forget_ids = [e.id for e in d_f.examples]
    forget_ids = [forget_ids[int(i)] for i in rng.permutation(len(forget_ids))]
    retain_ids = [e.id for e in d_r.examples]
    retain_queue = [retain_ids[int(i)] for i in rng.permutation(len(retain_ids))]
    qpos = 0

    blocks = []
    for start in range(0, len(forget_ids), block_size):
        chunk = forget_ids[start : start + block_size]
        n_retain = max(1, math.ceil(len(chunk) / m))
        picked = []
        for _ in range(n_retain):
            if qpos < len(retain_queue):
                picked.append(retain_queue[qpos])
                qpos += 1
            else:
                picked.append(retain_ids[int(rng.integers(len(retain_ids)))])
        blocks.append((tuple(chunk), tuple(picked)))
    return BlockSchedule(blocks=tuple(blocks), retain_ratio_m=m)


def example_level(e: Example, concept_map: ConceptMap) -> Level:
    """Concept level of an example: the highest token level it touches."""
    return max(concept_map.token_level[t] for t in e.tokens)


def holdout_examples(
    d: Dataset,
    concept_map: ConceptMap,
    subject: str,
    n: int,
    seed: int,
    level: Level | None = None,
) -> Tuple[Example, ...]:
    """Fresh examples from one subject's distribution, unseen in ``d``.

    Reconstructs the subject's key pool and answer associations from the
    dataset itself, then samples new filler combinations, rejecting any
    question that already occurs. Used as the non-member pool for membership
    inference. ``level`` restricts the pool to examples of one concept level
    (the private records), which also guarantees an unambiguous key per
    question.
    """
    subj_examples = [e for e in d.examples if e.subject == subject]
    if not subj_examples:
        raise UnknownSubject(f"subject {subject!r} not in dataset")
    if level is not None:
        subj_examples = [
            e for e in subj_examples if example_level(e, concept_map) == level
        ]
        if not subj_examples:
            raise ValueError(f"subject {subject!r} has no level-{level.name} examples")
    assoc: Dict[int, Tuple[int, ...]] = {}
    qlen = len(subj_examples[0].question_tokens)
    filler_seen: set[int] = set()
    for e in subj_examples:
        lv = example_level(e, concept_map)
        keys = [t for t in e.question_tokens if concept_map.token_level[t] == lv]
        if len(set(keys)) != 1:
            raise ValueError(
                f"example {e.id} has no unique top-level key; cannot resample"
            )
        assoc[keys[0]] = e.answer_tokens
        filler_seen.update(t for t in e.question_tokens if t != keys[0])
    # Match the member distribution: filler comes from the tokens actually
    # used as filler by this subject's questions.
    filler_pool = sorted(filler_seen)
    seen_questions = {e.question_tokens for e in d.examples}
    keys = sorted(assoc)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    out: List[Example] = []
    next_id = max(e.id for e in d.examples) + 1
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * n:
            raise RuntimeError("could not sample enough unseen questions")
        key = keys[int(rng.integers(len(keys)))]
        filler = rng.choice(np.array(filler_pool), size=qlen - 1, replace=True)
        question = np.append(filler.astype(int), key)
        question = tuple(int(t) for t in question[rng.permutation(qlen)])
        if question in seen_questions:
            continue
        seen_questions.add(question)
        out.append(
            Example(
                id=next_id,
                subject=subject,
                question_tokens=question,
                answer_tokens=assoc[key],
            )
        )
        next_id += 1
    return tuple(out)


def save_dataset(d: Dataset, path) -> None:
    """Write the line-delimited text form (format in module docstring)."""
    lines = [f"# microunlearn-dataset v1 vocab={d.vocab_size} split={d.split_tag}"]
    for e in d.examples:
        fields = (
            [str(e.id), e.subject, str(len(e.question_tokens))]
            + [str(t) for t in e.question_tokens]
            + [str(t) for t in e.answer_tokens]
        )
        lines.append(",".join(fields))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    """Inverse of :func:`save_dataset`."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0]
    if not header.startswith("# microunlearn-dataset v1 "):
        raise ValueError(f"unrecognized dataset header: {header!r}")
    meta = dict(part.split("=", 1) for part in header.split()[3:])
    examples = []
    for ln in lines[1:]:
        parts = ln.split(",")
        eid, subject, nq = int(parts[0]), parts[1], int(parts[2])
        toks = [int(t) for t in parts[3:]]
        examples.append(
            Example(
                id=eid,
                subject=subject,
                question_tokens=tuple(toks[:nq]),
                answer_tokens=tuple(toks[nq:]),
            )
        )
    return Dataset(
        examples=tuple(examples),
        vocab_size=int(meta["vocab"]),
        split_tag=meta["split"],
    )
