"""Tiny trainable language model with exact reverse-mode gradients.

Architecture (deliberately attention-free so every gradient is hand
checkable): token embeddings are mean-pooled over the strict prefix of each
position, pushed through one or more dense tanh blocks, and projected to
next-token logits by an output matrix. Loss is mean cross-entropy over masked
(answer) positions only.

Every weight matrix (embedding, each block, output) is a frozen base plus a
low-rank adapter ``W' = W + scaling * B @ A``. Adapters are the only
trainable parameters. The embedding adapter trains B only (A stays a fixed
random basis), which keeps the embedding gradient row-separable: scaling the
gradient of effective-embedding row t scales exactly row t of dB. Block and
output adapters train both factors.

Checkpoint format: a single ``.npz`` archive holding every tensor keyed by
its group id plus a JSON manifest entry ``__manifest__`` listing
``(group-id, shape, frozen-flag)``; round-trips are bit-exact.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .corpus import Dataset, Example, loss_mask

EMBEDDING = "embedding"
OUTPUT = "output"


def block_name(i: int) -> str:
    return f"block_{i}"


class InvalidDimension(ValueError):
    """Model dimensions are unusable (e.g. rank 0 or rank > d_model)."""


class EmptyMask(ValueError):
    """Loss mask selects no positions."""


class StaleCache(ValueError):
    """Backward called with a cache from a different model state."""


class ShapeMismatch(ValueError):
    """Update tensor shape does not match its parameter."""


class FrozenGroupTouched(ValueError):
    """Update addressed a frozen (backbone) parameter group."""


class EmptyDataset(ValueError):
    """Operation requires at least one example."""


@dataclass(frozen=True)
class LoraAdapter:
    """Low-rank delta for one weight matrix: ``delta = scaling * B @ A``."""

    name: str
    B: np.ndarray
    A: np.ndarray
    rank: int
    scaling: float
    train_a: bool = True

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B @ self.A)


@dataclass(frozen=True)
class ModelState:
    """Immutable-by-convention model snapshot.

    ``embedding``, ``blocks`` and ``output`` are the frozen backbone;
    ``adapters`` hold all trainable parameters.
    """

    vocab_size: int
    d_model: int
    n_blocks: int
    lora_rank: int
    lora_scaling: float
    embedding: np.ndarray
    blocks: Tuple[np.ndarray, ...]
    output: np.ndarray
    adapters: Mapping[str, LoraAdapter]

    # -- effective weights ------------------------------------------------
    def effective_embedding(self) -> np.ndarray:
        return self.embedding + self.adapters[EMBEDDING].delta()

    def effective_block(self, i: int) -> np.ndarray:
        return self.blocks[i] + self.adapters[block_name(i)].delta()

    def effective_output(self) -> np.ndarray:
        return self.output + self.adapters[OUTPUT].delta()

    # -- parameter bookkeeping --------------------------------------------
    def matrix_names(self) -> Tuple[str, ...]:
        return (EMBEDDING, *(block_name(i) for i in range(self.n_blocks)), OUTPUT)

    def trainable_ids(self) -> Tuple[str, ...]:
        ids: List[str] = []
        for name in self.matrix_names():
            ids.append(f"{name}.B")
            if self.adapters[name].train_a:
                ids.append(f"{name}.A")
        return tuple(ids)

    def trainable_arrays(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for name in self.matrix_names():
            ad = self.adapters[name]
            out[f"{name}.B"] = ad.B
            if ad.train_a:
                out[f"{name}.A"] = ad.A
        return out

    def factor_ids_of_matrix(self, name: str) -> Tuple[str, ...]:
        ad = self.adapters[name]
        return (f"{name}.B", f"{name}.A") if ad.train_a else (f"{name}.B",)

    def trainable_param_count(self) -> int:
        return int(sum(a.size for a in self.trainable_arrays().values()))

    def total_param_count(self) -> int:
        frozen = self.embedding.size + self.output.size
        frozen += sum(b.size for b in self.blocks)
        frozen += sum(
            ad.A.size for ad in self.adapters.values() if not ad.train_a
        )
        return int(frozen + self.trainable_param_count())


@dataclass(frozen=True)
class GradientBundle:
    """Gradients of one loss evaluation.

    ``per_group`` maps trainable factor ids to gradient tensors whose shapes
    match the parameters exactly. ``per_token_embedding`` maps each vocabulary
    id occurring in the input to the gradient of the loss w.r.t. that token's
    effective embedding row; absent ids have zero gradient.
    """

    per_group: Mapping[str, np.ndarray]
    per_token_embedding: Mapping[int, np.ndarray]
    loss_value: float


@dataclass
class ForwardCache:
    """Activations retained for the exact backward pass."""

    model: ModelState
    X: np.ndarray  # (B, n) int token ids
    mask: np.ndarray  # (B, n) bool
    targets: np.ndarray  # (B, n) int
    contexts: np.ndarray  # (B, n, d) prefix means
    hiddens: Tuple[np.ndarray, ...]  # per block, (B, n, d)
    probs: np.ndarray  # (B, n, V) softmax
    position_nll: np.ndarray  # (B, n) masked positions only, else 0
    per_example_loss: np.ndarray  # (B,)


def init_model(
    vocab_size: int,
    d_model: int,
    n_blocks: int,
    lora_rank: int,
    seed: int,
    lora_scaling: float | None = None,
) -> ModelState:
    """Seeded initialization: random backbone, zero-B adapters (delta = 0)."""
    if d_model < 4:
        raise InvalidDimension(f"d_model must be >= 4, got {d_model}")
    if lora_rank < 1 or lora_rank > d_model:
        raise InvalidDimension(f"lora_rank must be in [1, d_model], got {lora_rank}")
    if n_blocks < 1:
        raise InvalidDimension(f"n_blocks must be >= 1, got {n_blocks}")
    if vocab_size < 2:
        raise InvalidDimension(f"vocab_size must be >= 2, got {vocab_size}")
    if lora_scaling is None:
        lora_scaling = 16.0 / lora_rank
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    sd = 1.0 / np.sqrt(d_model)
    embedding = rng.normal(0.0, 1.0, size=(vocab_size, d_model)) * sd * 3.0
    blocks = tuple(
        rng.normal(0.0, 1.0, size=(d_model, d_model)) * sd * 1.5
        for _ in range(n_blocks)
    )
    output = rng.normal(0.0, 1.0, size=(vocab_size, d_model)) * sd

    def adapter(name: str, rows: int, cols: int, train_a: bool) -> LoraAdapter:
        return LoraAdapter(
            name=name,
            B=np.zeros((rows, lora_rank)),
            A=rng.normal(0.0, 1.0, size=(lora_rank, cols)) / np.sqrt(lora_rank),
            rank=lora_rank,
            scaling=lora_scaling,
            train_a=train_a,
        )

    adapters = {EMBEDDING: adapter(EMBEDDING, vocab_size, d_model, train_a=False)}
    for i in range(n_blocks):
        adapters[block_name(i)] = adapter(block_name(i), d_model, d_model, True)
    adapters[OUTPUT] = adapter(OUTPUT, vocab_size, d_model, True)
    return ModelState(
        vocab_size=vocab_size,
        d_model=d_model,
        n_blocks=n_blocks,
        lora_rank=lora_rank,
        lora_scaling=lora_scaling,
        embedding=embedding,
        blocks=blocks,
        output=output,
        adapters=adapters,
    )


# ---------------------------------------------------------------------------
# forward / backward


def _forward_arrays(
    m: ModelState,
    X: np.ndarray,
    mask: np.ndarray,
    targets: np.ndarray,
) -> ForwardCache:
    if X.ndim != 2:
        raise ValueError("X must be (batch, positions)")
    if X.shape != mask.shape or X.shape != targets.shape:
        raise ShapeMismatch("X, mask and targets must share a shape")
    if np.any(X < 0) or np.any(X >= m.vocab_size):
        raise ValueError("token id outside vocabulary")
    if np.any(mask.sum(axis=1) == 0):
        raise EmptyMask("a sequence has an all-false loss mask")

    B, n = X.shape
    We = m.effective_embedding()
    emb = We[X]  # (B, n, d)
    # Strict-prefix means: contexts[:, 0] = 0, contexts[:, p] = mean(emb[:, :p]).
    csum = np.cumsum(emb, axis=1)
    contexts = np.zeros_like(emb)
    if n > 1:
        denom = np.arange(1, n, dtype=float)[None, :, None]
        contexts[:, 1:, :] = csum[:, :-1, :] / denom

    h = contexts
    hiddens: List[np.ndarray] = []
    for i in range(m.n_blocks):
        h = np.tanh(h @ m.effective_block(i).T)
        hiddens.append(h)
    logits = h @ m.effective_output().T  # (B, n, V)

    zmax = logits.max(axis=2, keepdims=True)
    expz = np.exp(logits - zmax)
    probs = expz / expz.sum(axis=2, keepdims=True)
    logz = np.log(expz.sum(axis=2)) + zmax[:, :, 0]
    target_logit = np.take_along_axis(logits, targets[:, :, None], axis=2)[:, :, 0]
    nll = (logz - target_logit) * mask
    per_example_loss = nll.sum(axis=1) / mask.sum(axis=1)
    return ForwardCache(
        model=m,
        X=X,
        mask=mask,
        targets=targets,
        contexts=contexts,
        hiddens=tuple(hiddens),
        probs=probs,
        position_nll=nll,
        per_example_loss=per_example_loss,
    )


def _backward_arrays(cache: ForwardCache):
    """Matrix-space gradients (d loss / d effective weight) for a cache.

    Returns (dWe, dWblocks, dWout) where the loss is the mean over examples
    of each example's mean masked cross-entropy.
    """
    m = cache.model
    X, mask, targets = cache.X, cache.mask, cache.targets
    B, n = X.shape
    weights = np.zeros((B, n))
    weights[mask] = 1.0
    weights /= mask.sum(axis=1, keepdims=True)
    weights /= B

    dlogits = cache.probs * weights[:, :, None]
    rows = np.arange(B)[:, None], np.arange(n)[None, :]
    onehot_sub = np.zeros_like(dlogits)
    np.put_along_axis(onehot_sub, targets[:, :, None], weights[:, :, None], axis=2)
    dlogits -= onehot_sub

    h_last = cache.hiddens[-1]
    dWout = np.einsum("bpv,bpd->vd", dlogits, h_last)
    dh = dlogits @ m.effective_output()  # (B, n, d)

    dWblocks: List[np.ndarray] = [None] * m.n_blocks  # type: ignore[list-item]
    for i in reversed(range(m.n_blocks)):
        h_i = cache.hiddens[i]
        h_in = cache.contexts if i == 0 else cache.hiddens[i - 1]
        dz = dh * (1.0 - h_i * h_i)
        dWblocks[i] = np.einsum("bpd,bpe->de", dz, h_in)
        dh = dz @ m.effective_block(i)

    # Prefix-mean backprop: contexts[:, p] = sum_{i<p} emb[:, i] / p.
    dcontexts = dh
    scaled = np.zeros_like(dcontexts)
    if n > 1:
        denom = np.arange(1, n, dtype=float)[None, :, None]
        scaled[:, 1:, :] = dcontexts[:, 1:, :] / denom
    # demb[:, i] = sum_{p > i} scaled[:, p]
    rev = np.cumsum(scaled[:, ::-1, :], axis=1)[:, ::-1, :]
    demb = np.zeros_like(scaled)
    demb[:, :-1, :] = rev[:, 1:, :]

    dWe = np.zeros((m.vocab_size, m.d_model))
    np.add.at(dWe, X.reshape(-1), demb.reshape(-1, m.d_model))
    return dWe, dWblocks, dWout


def _bundle_from_matrix_grads(
    m: ModelState,
    dWe: np.ndarray,
    dWblocks: Sequence[np.ndarray],
    dWout: np.ndarray,
    present_tokens: Sequence[int],
    loss_value: float,
) -> GradientBundle:
    """Chain matrix-space gradients into adapter-factor gradients."""
    per_group: Dict[str, np.ndarray] = {}
    emb_ad = m.adapters[EMBEDDING]
    per_group[f"{EMBEDDING}.B"] = emb_ad.scaling * (dWe @ emb_ad.A.T)
    for i in range(m.n_blocks):
        ad = m.adapters[block_name(i)]
        per_group[f"{block_name(i)}.B"] = ad.scaling * (dWblocks[i] @ ad.A.T)
        per_group[f"{block_name(i)}.A"] = ad.scaling * (ad.B.T @ dWblocks[i])
    out_ad = m.adapters[OUTPUT]
    per_group[f"{OUTPUT}.B"] = out_ad.scaling * (dWout @ out_ad.A.T)
    per_group[f"{OUTPUT}.A"] = out_ad.scaling * (out_ad.B.T @ dWout)
    per_token = {int(t): dWe[int(t)].copy() for t in sorted(set(present_tokens))}
    return GradientBundle(
        per_group=per_group,
        per_token_embedding=per_token,
        loss_value=float(loss_value),
    )


def forward_loss(
    m: ModelState,
    tokens: Sequence[int],
    mask: Sequence[bool],
    targets: Sequence[int] | None = None,
) -> Tuple[float, ForwardCache]:
    """Masked next-token loss for one sequence.

    The prediction at position p conditions on tokens[:p]; the target at p is
    tokens[p] unless an explicit ``targets`` sequence is given. Targets at
    unmasked positions never influence the loss.
    """
    X = np.asarray(tokens, dtype=int)[None, :]
    msk = np.asarray(mask, dtype=bool)[None, :]
    if X.shape != msk.shape:
        raise ShapeMismatch("mask length must equal sequence length")
    tgt = X if targets is None else np.asarray(targets, dtype=int)[None, :]
    cache = _forward_arrays(m, X, msk, tgt)
    return float(cache.per_example_loss[0]), cache


def backward(m: ModelState, cache: ForwardCache) -> GradientBundle:
    """Exact gradients for all trainable groups plus per-token embedding rows."""
    if cache.model is not m:
        raise StaleCache("cache was produced by a different model state")
    dWe, dWblocks, dWout = _backward_arrays(cache)
    loss = float(cache.per_example_loss.mean())
    return _bundle_from_matrix_grads(
        m, dWe, dWblocks, dWout, cache.X.reshape(-1).tolist(), loss
    )


def batch_arrays(examples: Sequence[Example]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack uniform-length examples into (X, mask) arrays."""
    lengths = {len(e.tokens) for e in examples}
    qlens = {len(e.question_tokens) for e in examples}
    if len(lengths) != 1 or len(qlens) != 1:
        raise ShapeMismatch("batching requires uniform question/answer lengths")
    X = np.array([e.tokens for e in examples], dtype=int)
    mask = np.array([loss_mask(e) for e in examples], dtype=bool)
    return X, mask


def batch_gradient(m: ModelState, examples: Sequence[Example]) -> GradientBundle:
    """Gradient of the mean per-example loss over a batch."""
    if len(examples) == 0:
        raise EmptyDataset("empty batch")
    X, mask = batch_arrays(examples)
    cache = _forward_arrays(m, X, mask, X)
    return backward(m, cache)


def per_example_losses(m: ModelState, examples: Sequence[Example]) -> np.ndarray:
    """Vector of masked losses, one per example."""
    if len(examples) == 0:
        raise EmptyDataset("no examples")
    X, mask = batch_arrays(examples)
    cache = _forward_arrays(m, X, mask, X)
    return cache.per_example_loss.copy()


def apply_update(m: ModelState, delta: Mapping[str, np.ndarray]) -> ModelState:
    """Add ``delta`` to trainable factors, returning a new state.

    Backbone matrices (and the frozen embedding A factor) are rejected.
    """
    frozen_ids = set(m.matrix_names()) | {f"{EMBEDDING}.A"}
    trainable = m.trainable_arrays()
    for gid, arr in delta.items():
        if gid in frozen_ids:
            raise FrozenGroupTouched(f"group {gid!r} is frozen")
        if gid not in trainable:
            raise ValueError(f"unknown parameter group {gid!r}")
        if np.shape(arr) != trainable[gid].shape:
            raise ShapeMismatch(
                f"group {gid!r}: got {np.shape(arr)}, want {trainable[gid].shape}"
            )
    adapters: Dict[str, LoraAdapter] = {}
    for name in m.matrix_names():
        ad = m.adapters[name]
        new_b = ad.B
        new_a = ad.A
        if f"{name}.B" in delta:
            new_b = ad.B + delta[f"{name}.B"]
        if ad.train_a and f"{name}.A" in delta:
            new_a = ad.A + delta[f"{name}.A"]
        adapters[name] = LoraAdapter(
            name=name,
            B=new_b,
            A=new_a,
            rank=ad.rank,
            scaling=ad.scaling,
            train_a=ad.train_a,
        )
    return ModelState(
        vocab_size=m.vocab_size,
        d_model=m.d_model,
        n_blocks=m.n_blocks,
        lora_rank=m.lora_rank,
        lora_scaling=m.lora_scaling,
        embedding=m.embedding,
        blocks=m.blocks,
        output=m.output,
        adapters=adapters,
    )


def predictions(m: ModelState, examples: Sequence[Example]) -> np.ndarray:
    """Boolean per-example correctness: argmax matches every answer token."""
    if len(examples) == 0:
        raise EmptyDataset("no examples")
    X, mask = batch_arrays(examples)
    cache = _forward_arrays(m, X, mask, X)
    pred = cache.probs.argmax(axis=2)
    hits = (pred == X) | ~mask
    return hits.all(axis=1)


def accuracy(m: ModelState, d: Dataset | Sequence[Example]) -> float:
    """Fraction of examples answered exactly right."""
    examples = d.examples if isinstance(d, Dataset) else tuple(d)
    if len(examples) == 0:
        raise EmptyDataset("dataset is empty")
    return float(predictions(m, examples).mean())


# ---------------------------------------------------------------------------
# Original-model construction (full-parameter fit)


@dataclass(frozen=True)
class FitInfo:
    epochs: int
    train_accuracy: float
    final_loss: float
    wall_seconds: float


def fit_dataset(
    m: ModelState,
    train: Dataset,
    lr: float = 1.0,
    batch_size: int = 64,
    max_epochs: int = 400,
    min_epochs: int = 0,
    target_accuracy: float = 0.97,
    seed: int = 0,
    check_every: int = 5,
) -> Tuple[ModelState, FitInfo]:
    """Fit the backbone to the corpus by plain SGD (the original model).

    This is the stand-in for pretraining: it updates the frozen-base matrices
    directly while adapters stay at zero delta. All subsequent unlearning
    updates touch adapters only, so the backbone produced here stays frozen
    for the rest of the model's life.
    """
    if len(train) == 0:
        raise EmptyDataset("training dataset is empty")
    t0 = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    E = m.embedding.copy()
    Ws = [w.copy() for w in m.blocks]
    Wo = m.output.copy()
    examples = train.examples
    X_all, mask_all = batch_arrays(examples)
    n = len(examples)

    def current() -> ModelState:
        return ModelState(
            vocab_size=m.vocab_size,
            d_model=m.d_model,
            n_blocks=m.n_blocks,
            lora_rank=m.lora_rank,
            lora_scaling=m.lora_scaling,
            embedding=E.copy(),
            blocks=tuple(w.copy() for w in Ws),
            output=Wo.copy(),
            adapters=m.adapters,
        )

    acc = 0.0
    loss = float("nan")
    epochs_run = 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            snap = current()
            cache = _forward_arrays(snap, X_all[idx], mask_all[idx], X_all[idx])
            dWe, dWblocks, dWout = _backward_arrays(cache)
            E -= lr * dWe
            for i in range(m.n_blocks):
                Ws[i] -= lr * dWblocks[i]
            Wo -= lr * dWout
            loss = float(cache.per_example_loss.mean())
        epochs_run = epoch
        if epoch >= min_epochs and (epoch % check_every == 0 or epoch == max_epochs):
            acc = accuracy(current(), train)
            if acc >= target_accuracy:
                break
    fitted = current()
    if epochs_run % check_every != 0:
        acc = accuracy(fitted, train)
    return fitted, FitInfo(
        epochs=epochs_run,
        train_accuracy=acc,
        final_loss=loss,
        wall_seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(m: ModelState, path) -> None:
    """Dump every tensor plus a manifest into one .npz archive."""
    arrays: Dict[str, np.ndarray] = {EMBEDDING: m.embedding, OUTPUT: m.output}
    for i, w in enumerate(m.blocks):
        arrays[block_name(i)] = w
    manifest = []
    for name in m.matrix_names():
        manifest.append({"group": name, "shape": list(arrays[name].shape), "frozen": True})
    for name in m.matrix_names():
        ad = m.adapters[name]
        arrays[f"{name}.B"] = ad.B
        arrays[f"{name}.A"] = ad.A
        manifest.append({"group": f"{name}.B", "shape": list(ad.B.shape), "frozen": False})
        manifest.append(
            {"group": f"{name}.A", "shape": list(ad.A.shape), "frozen": not ad.train_a}
        )
    meta = {
        "vocab_size": m.vocab_size,
        "d_model": m.d_model,
        "n_blocks": m.n_blocks,
        "lora_rank": m.lora_rank,
        "lora_scaling": m.lora_scaling,
        "manifest": manifest,
    }
    arrays["__manifest__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_checkpoint(path) -> ModelState:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__manifest__"]).decode("utf-8"))
        n_blocks = int(meta["n_blocks"])
        adapters: Dict[str, LoraAdapter] = {}
        names = [EMBEDDING] + [block_name(i) for i in range(n_blocks)] + [OUTPUT]
        frozen_a = {
            entry["group"]: entry["frozen"]
            for entry in meta["manifest"]
            if entry["group"].endswith(".A")
        }
        for name in names:
            adapters[name] = LoraAdapter(
                name=name,
                B=data[f"{name}.B"],
                A=data[f"{name}.A"],
                rank=int(meta["lora_rank"]),
                scaling=float(meta["lora_scaling"]),
                train_a=not frozen_a[f"{name}.A"],
            )
        return ModelState(
            vocab_size=int(meta["vocab_size"]),
            d_model=int(meta["d_model"]),
            n_blocks=n_blocks,
            lora_rank=int(meta["lora_rank"]),
            lora_scaling=float(meta["lora_scaling"]),
            embedding=data[EMBEDDING],
            blocks=tuple(data[block_name(i)] for i in range(n_blocks)),
            output=data[OUTPUT],
            adapters=adapters,
        )
