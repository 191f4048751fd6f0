"""Self-supervised training of a small encoder with cycle losses."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cycles import VARIANTS, CycleBuilder, TemperatureConfig, ViewEmbeddings, view_similarities
from .loss import MarginConfig, batch_loss
from .masking import MaskBuilder
from .scenes import DatasetError, SceneDataset, ViewObservations

log = logging.getLogger(__name__)

SAMPLERS = ("standard", "time-divergent")
PARAMS = ("w1", "b1", "w2", "b2")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    hidden: int = 64
    embed_dim: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    variants: tuple = VARIANTS
    pairwise: bool = True
    masking: bool = True
    sampler: str = "time-divergent"
    standard_dt: int = 1
    tau0: float = 3.0
    m_plus: float = 0.7
    m_empty: float = 0.3
    m_unmasked: float = 0.5
    mask_mode: str = "literal"
    seed: int = 0

    def __post_init__(self):
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown cycle variant(s): {', '.join(bad)}")
        if not self.variants and not self.pairwise:
            raise ValueError("no cycles selected")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        self.margins()

    def margins(self) -> MarginConfig:
        return MarginConfig(self.m_plus, self.m_empty, self.m_unmasked, self.mask_mode)

    def temperature(self) -> TemperatureConfig:
        return TemperatureConfig(self.tau0)

    def digest(self) -> str:
        text = repr(sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------- encoder

@dataclass
class Encoder:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, obs_dim: int, hidden: int = 64, embed_dim: int = 32, seed=0) -> "Encoder":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return cls(
            rng.standard_normal((obs_dim, hidden)) / math.sqrt(obs_dim),
            np.zeros((1, hidden)),
            rng.standard_normal((hidden, embed_dim)) / math.sqrt(hidden),
            np.zeros((1, embed_dim)),
        )

    @property
    def obs_dim(self) -> int:
        return self.w1.shape[0]

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAMS}

    def copy(self) -> "Encoder":
        return Encoder(*(getattr(self, n).copy() for n in PARAMS))

    def embed(self, obs) -> np.ndarray:
        """Forward pass without a tape."""
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape[1] != self.obs_dim:
            raise ad.ShapeError(f"observations have {obs.shape[1]} columns, encoder expects {self.obs_dim}")
        h = np.tanh(obs @ self.w1 + self.b1)
        out = h @ self.w2 + self.b2
        return out / np.sqrt((out ** 2).sum(axis=1, keepdims=True) + 1e-12)


def encode(enc_leaves: dict, obs) -> ad.DiffMatrix:
    """Differentiable forward pass; ``enc_leaves`` maps parameter name to a tape leaf."""
    obs = obs if isinstance(obs, ad.DiffMatrix) else ad.constant(obs)
    if obs.cols != enc_leaves["w1"].rows:
        raise ad.ShapeError(f"observations have {obs.cols} columns, encoder expects {enc_leaves['w1'].rows}")
    h = ad.tanh(ad.add_row(ad.matmul(obs, enc_leaves["w1"]), enc_leaves["b1"]))
    out = ad.add_row(ad.matmul(h, enc_leaves["w2"]), enc_leaves["b2"])
    return ad.row_normalize(out)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: dict, **kw) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **kw)

    def apply(self, params: dict, grads: dict) -> None:
        """One Adam update, in place."""
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.step
        c2 = 1 - b2 ** self.step
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= self.learning_rate * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.epsilon)


# ---------------------------------------------------------------- batches and sampling

def assemble_batch(ds: SceneDataset, scene: int, t: int, dt: int) -> list[ViewObservations] | None:
    """The C views at t followed by the C views at t + dt, or None when unusable."""
    first, second = ds.frame(scene, t), ds.frame(scene, t + dt)
    if first is None or second is None:
        log.info("skip batch scene=%s t=%s dt=%s: timestep missing", scene, t, dt)
        return None
    views = list(first.views) + list(second.views)
    if any(len(v) == 0 for v in views):
        log.info("skip batch scene=%s t=%s dt=%s: empty view", scene, t, dt)
        return None
    return views


BALANCE_WINDOWS = (3, 5, 10)


def window_deviation(order: list, window: int) -> float:
    """Largest |count - share * window| over all full windows and keys."""
    total = len(order)
    share = {k: order.count(k) / total for k in set(order)}
    worst = 0.0
    for start in range(total - window + 1):
        chunk = order[start:start + window]
        for k, p in share.items():
            worst = max(worst, abs(chunk.count(k) - p * window))
    return worst


def _largest_remainder(keys, counts, total, priority) -> list:
    used = dict.fromkeys(keys, 0)
    order = []
    for step in range(1, total + 1):
        best = max(
            (k for k in keys if used[k] < counts[k]),
            key=lambda k: (counts[k] * step / total - used[k], -priority[k]),
        )
        used[best] += 1
        order.append(best)
    return order


def window_balanced_order(counts: dict, rng, windows=BALANCE_WINDOWS, budget: int | None = None):
    """Depth-first search for an order whose every window stays within 1 of its share.

    Children are tried in largest-deficit order, so balanced inputs finish
    without backtracking. Returns the order, False when the search space is
    exhausted (no such order exists) or None when ``budget`` nodes run out.
    """
    keys = [k for k in sorted(counts) if counts[k] > 0]
    total = sum(counts[k] for k in keys)
    if total == 0:
        return []
    priority = {k: int(r) for k, r in zip(keys, rng.permutation(len(keys)))}
    slack = {w: {k: (counts[k] * w / total - 1 - 1e-9, counts[k] * w / total + 1 + 1e-9) for k in keys}
             for w in windows}
    budget = 50 * total if budget is None else budget
    used = dict.fromkeys(keys, 0)
    order: list = []
    in_window = {w: dict.fromkeys(keys, 0) for w in windows}

    def push(k):
        n = len(order)
        for w in windows:
            in_window[w][k] += 1
            if n >= w:
                in_window[w][order[n - w]] -= 1
        order.append(k)
        used[k] += 1

    def pop():
        k = order.pop()
        used[k] -= 1
        n = len(order)
        for w in windows:
            in_window[w][k] -= 1
            if n >= w:
                in_window[w][order[n - w]] += 1

    def fits() -> bool:
        n = len(order)
        left = total - n
        for w in windows:
            full, part = divmod(left, w)
            for k in keys:
                lo, hi = slack[w][k]
                if n >= w and not lo <= in_window[w][k] <= hi:
                    return False
                # the rest splits into disjoint windows that each need their share
                need = full * math.ceil(lo)
                room = full * math.floor(hi) + min(part, math.floor(hi))
                if not need <= counts[k] - used[k] <= room:
                    return False
        return True

    def children():
        step = len(order) + 1
        live = [k for k in keys if used[k] < counts[k]]
        return sorted(live, key=lambda k: (-(counts[k] * step / total - used[k]), priority[k]))

    stack = [iter(children())]
    nodes = 0
    while stack:
        k = next(stack[-1], None)
        if k is None:
            stack.pop()
            if order:
                pop()
            continue
        nodes += 1
        if nodes > budget:
            return None
        push(k)
        if not fits():
            pop()
            continue
        if len(order) == total:
            return list(order)
        stack.append(iter(children()))
    return False


def balanced_order(counts: dict, rng) -> list:
    """Interleave keys so every window of 3, 5 or 10 tracks the global proportions.

    Searches for an order whose per-window counts stay within 1 of
    ``share * window``. Some count vectors admit no such order (for example
    2, 4 and 13); then the largest-remainder order is used, which keeps
    every prefix close to its share instead.
    """
    keys = [k for k in sorted(counts) if counts[k] > 0]
    total = sum(counts[k] for k in keys)
    order = window_balanced_order(counts, rng)
    if order:
        return order
    if total:
        log.warning("no window-balanced order for counts %s; using largest-remainder order", counts)
    priority = {k: int(r) for k, r in zip(keys, rng.permutation(len(keys)))}
    return _largest_remainder(keys, counts, total, priority)


def time_divergent_schedule(ds: SceneDataset, epoch: int, seed=0) -> list[tuple[int, int, int]]:
    """(scene, t, dt) batches for one epoch with dt equal to the epoch number.

    dt is clamped to the longest scene length minus one; start times whose
    partner t + dt falls outside the scene are dropped.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    rng = np.random.default_rng([seed, epoch, 1])
    longest = max(len(ds.timesteps(s)) for s in ds.scenes())
    dt = min(epoch, longest - 1)
    starts = {}
    for s in ds.scenes():
        ts = set(ds.timesteps(s))
        valid = [t for t in sorted(ts) if t + dt in ts]
        starts[s] = [valid[i] for i in rng.permutation(len(valid))]
    order = balanced_order({s: len(v) for s, v in starts.items()}, rng)
    cursor = dict.fromkeys(starts, 0)
    batches = []
    for s in order:
        batches.append((s, starts[s][cursor[s]], dt))
        cursor[s] += 1
    return batches


def standard_schedule(ds: SceneDataset, epoch: int, seed=0, dt: int = 1) -> list[tuple[int, int, int]]:
    """Fixed dt, uniformly shuffled over all scenes."""
    rng = np.random.default_rng([seed, epoch, 2])
    batches = []
    for s in ds.scenes():
        ts = set(ds.timesteps(s))
        batches += [(s, t, dt) for t in sorted(ts) if t + dt in ts]
    return [batches[i] for i in rng.permutation(len(batches))]


def schedule(ds: SceneDataset, epoch: int, cfg: TrainConfig) -> list[tuple[int, int, int]]:
    if cfg.sampler == "time-divergent":
        return time_divergent_schedule(ds, epoch, cfg.seed)
    return standard_schedule(ds, epoch, cfg.seed, cfg.standard_dt)


# ---------------------------------------------------------------- loss over a batch

def cycles_with_masks(embeddings: list[ViewEmbeddings], cfg: TrainConfig, tau: float | None = None):
    """Every selected cycle over the views paired with its pseudo-mask.

    Cycles anchored at a view with a single detection have no off-diagonal
    competitor and are left out.
    """
    sims = view_similarities(embeddings)
    builder = CycleBuilder(sims, cfg.temperature(), tau)
    cycles = builder.all_cycles(range(len(embeddings)), cfg.variants, cfg.pairwise)
    cycles = [c for c in cycles if c.n >= 2]
    if not cfg.masking:
        return [(c, None) for c in cycles]
    masks = MaskBuilder({k: s.value for k, s in sims.items()}, cfg.temperature(), tau)
    out = []
    for c in cycles:
        mask = masks.pair(*c.triple) if c.variant == "pairwise" else masks.triple(*c.triple)
        out.append((c, mask))
    return out


def embedding_batch_loss(embeddings: list[ViewEmbeddings], cfg: TrainConfig, tau: float | None = None) -> ad.DiffMatrix:
    pairs = cycles_with_masks(embeddings, cfg, tau)
    return batch_loss(pairs, cfg.margins(), cfg.masking)


def batch_forward(enc: Encoder, views: list[ViewObservations], cfg: TrainConfig):
    """Record encoder and loss on a fresh tape; returns (loss, leaves)."""
    tape = ad.Tape()
    leaves = {name: tape.leaf(p, name) for name, p in enc.params().items()}
    obs = np.concatenate([v.features for v in views], axis=0)
    emb = encode(leaves, obs)
    embeddings, start = [], 0
    for idx, v in enumerate(views):
        stop = start + len(v)
        embeddings.append(ViewEmbeddings(idx, ad.take_rows(emb, start, stop)))
        start = stop
    return embedding_batch_loss(embeddings, cfg), leaves


def batch_gradients(enc: Encoder, views, cfg: TrainConfig):
    loss, leaves = batch_forward(enc, views, cfg)
    grads = ad.backward(loss)
    return loss.item(), {name: grads[leaf.node] for name, leaf in leaves.items()}


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    encoder: Encoder
    epoch_losses: list = field(default_factory=list)
    skipped: int = 0
    steps: int = 0


def train(ds: SceneDataset, cfg: TrainConfig = TrainConfig(), encoder: Encoder | None = None,
          callback=None) -> TrainResult:
    """Run the self-supervised loop; deterministic given (dataset, cfg)."""
    if not ds.scenes():
        raise DatasetError("training needs at least one scene")
    rng = np.random.default_rng([cfg.seed, 0])
    enc = encoder.copy() if encoder is not None else Encoder.init(ds.obs_dim, cfg.hidden, cfg.embed_dim, rng)
    params = enc.params()
    opt = OptimizerState.for_params(params, learning_rate=cfg.learning_rate, beta1=cfg.beta1,
                                    beta2=cfg.beta2, epsilon=cfg.epsilon)
    result = TrainResult(enc)
    for epoch in range(cfg.epochs):
        losses = []
        for scene, t, dt in schedule(ds, epoch, cfg):
            views = assemble_batch(ds, scene, t, dt)
            if views is None:
                result.skipped += 1
                continue
            value, grads = batch_gradients(enc, views, cfg)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, scene {scene}, t {t}: {value}")
            opt.apply(params, grads)
            losses.append(value)
            result.steps += 1
        mean = float(np.mean(losses)) if losses else float("nan")
        result.epoch_losses.append(mean)
        log.info("epoch %d: %d batches, mean loss %.5f", epoch, len(losses), mean)
        if callback is not None:
            callback(epoch, enc, mean)
    return result


# ---------------------------------------------------------------- checkpoints

MAGIC = "partialcycle-checkpoint 1"


def save_checkpoint(enc: Encoder, path, cfg: TrainConfig | None = None, seed: int | None = None) -> None:
    """Text header (shapes, config hash, seed) then the parameters as float64 text."""
    lines = [MAGIC]
    for name in PARAMS:
        r, c = getattr(enc, name).shape
        lines.append(f"shape {name} {r} {c}")
    lines.append(f"config_hash {cfg.digest() if cfg else '-'}")
    lines.append(f"seed {seed if seed is not None else (cfg.seed if cfg else '-')}")
    lines.append("params")
    for name in PARAMS:
        lines += [repr(float(x)) for x in getattr(enc, name).ravel()]
    Path(path).write_text("\n".join(lines) + "\n")


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[Encoder, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    shapes, header = {}, {}
    pos = 1
    while pos < len(lines) and lines[pos] != "params":
        parts = lines[pos].split()
        if parts[0] == "shape":
            shapes[parts[1]] = (int(parts[2]), int(parts[3]))
        else:
            header[parts[0]] = " ".join(parts[1:])
        pos += 1
    values = np.array([float(x) for x in lines[pos + 1:]], dtype=np.float64)
    arrays, off = [], 0
    for name in PARAMS:
        if name not in shapes:
            raise CheckpointError(f"{path}: missing shape for {name}")
        r, c = shapes[name]
        if off + r * c > len(values):
            raise CheckpointError(f"{path}: parameter block too short")
        arrays.append(values[off: off + r * c].reshape(r, c))
        off += r * c
    if off != len(values):
        raise CheckpointError(f"{path}: parameter block has {len(values) - off} extra values")
    return Encoder(*arrays), header


def config_from_dict(d: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown training keys: {sorted(unknown)}")
    return TrainConfig(**d)

