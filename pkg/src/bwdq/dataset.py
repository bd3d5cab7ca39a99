"""Offline transition data: container, BWDS binary format, JSON-lines interchange,
and the two empirical sampling distributions (dataset pairs and
state/random-action pairs).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError, InvalidArgument

MAGIC = b"BWDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIIdQQ")


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    next_action: np.ndarray | None
    terminal: bool

    def __eq__(self, other):
        if not isinstance(other, Transition):
            return NotImplemented
        same_next = (self.next_action is None) == (other.next_action is None)
        if same_next and self.next_action is not None:
            same_next = _bits_equal(self.next_action, other.next_action)
        return (same_next
                and _bits_equal(self.state, other.state)
                and _bits_equal(self.action, other.action)
                and _bits_equal(np.float64(self.reward), np.float64(other.reward))
                and _bits_equal(self.next_state, other.next_state)
                and bool(self.terminal) == bool(other.terminal))


def _bits_equal(a, b) -> bool:
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    has_next: np.ndarray
    terminals: np.ndarray


@dataclass
class Dataset:
    """Column-stored transitions.

    ``next_actions`` rows where ``has_next`` is False are zero and carry no
    meaning. ``traj_starts`` holds the first index of every trajectory.
    """

    obs_dim: int
    act_dim: int
    discount: float
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    has_next: np.ndarray
    terminals: np.ndarray
    traj_starts: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.obs_dim < 1 or self.act_dim < 1:
            raise InvalidArgument("obs_dim and act_dim must be positive")
        if not 0.0 < self.discount < 1.0:
            raise InvalidArgument(f"discount must lie in (0, 1), got {self.discount}")
        n = len(self.rewards)
        self.states = np.asarray(self.states, dtype=np.float64).reshape(n, self.obs_dim)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(n, self.act_dim)
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(n)
        self.next_states = np.asarray(self.next_states, dtype=np.float64).reshape(n, self.obs_dim)
        self.next_actions = np.asarray(self.next_actions, dtype=np.float64).reshape(n, self.act_dim)
        self.has_next = np.asarray(self.has_next, dtype=bool).reshape(n)
        self.terminals = np.asarray(self.terminals, dtype=bool).reshape(n)
        self.traj_starts = np.asarray(self.traj_starts, dtype=np.int64).reshape(-1)
        if np.any(np.abs(self.actions) > 1.0) or np.any(np.abs(self.next_actions[self.has_next]) > 1.0):
            raise InvalidArgument("actions must lie in [-1, 1]")
        _validate_starts(self.traj_starts, n)
        self.meta = {str(k): str(v) for k, v in self.meta.items()}

    def __len__(self) -> int:
        return len(self.rewards)

    def __getitem__(self, i: int) -> Transition:
        return Transition(
            self.states[i].copy(), self.actions[i].copy(), float(self.rewards[i]),
            self.next_states[i].copy(),
            self.next_actions[i].copy() if self.has_next[i] else None,
            bool(self.terminals[i]),
        )

    @property
    def transitions(self) -> list[Transition]:
        return [self[i] for i in range(len(self))]

    @property
    def trajectory_bounds(self) -> list[range]:
        ends = list(self.traj_starts[1:]) + [len(self)]
        return [range(int(a), int(b)) for a, b in zip(self.traj_starts, ends)]

    def batch(self, idx: np.ndarray) -> Batch:
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx],
                     self.next_actions[idx], self.has_next[idx], self.terminals[idx])

    def subset(self, idx) -> "Dataset":
        """Rows ``idx`` with their stored next actions; each row becomes its own trajectory."""
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.obs_dim, self.act_dim, self.discount, *self.batch(idx),
                       traj_starts=np.arange(len(idx)), meta=dict(self.meta, subsampled=str(len(idx))))

    @classmethod
    def from_transitions(cls, transitions, obs_dim: int, act_dim: int, discount: float,
                         trajectory_bounds=None, meta=None) -> "Dataset":
        transitions = list(transitions)
        n = len(transitions)
        if trajectory_bounds is None:
            starts = np.array([0] if n else [], dtype=np.int64)
        else:
            starts = starts_from_bounds(trajectory_bounds, n)
        has_next = np.array([t.next_action is not None for t in transitions], dtype=bool)
        zeros = np.zeros(act_dim)
        return cls(
            obs_dim, act_dim, discount,
            states=np.array([t.state for t in transitions], dtype=np.float64).reshape(n, obs_dim),
            actions=np.array([t.action for t in transitions], dtype=np.float64).reshape(n, act_dim),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_states=np.array([t.next_state for t in transitions], dtype=np.float64).reshape(n, obs_dim),
            next_actions=np.array([zeros if t.next_action is None else t.next_action for t in transitions],
                                  dtype=np.float64).reshape(n, act_dim),
            has_next=has_next,
            terminals=np.array([t.terminal for t in transitions], dtype=bool),
            traj_starts=starts,
            meta=meta or {},
        )

    def same_transitions(self, other: "Dataset") -> bool:
        """Bitwise equality of headers, trajectory layout, and every transition."""
        if (self.obs_dim, self.act_dim, len(self)) != (other.obs_dim, other.act_dim, len(other)):
            return False
        if not _bits_equal(np.float64(self.discount), np.float64(other.discount)):
            return False
        na = np.where(self.has_next[:, None], self.next_actions, 0.0)
        nb = np.where(other.has_next[:, None], other.next_actions, 0.0)
        return (np.array_equal(self.traj_starts, other.traj_starts)
                and np.array_equal(self.has_next, other.has_next)
                and np.array_equal(self.terminals, other.terminals)
                and all(_bits_equal(a, b) for a, b in [
                    (self.states, other.states), (self.actions, other.actions),
                    (self.rewards, other.rewards), (self.next_states, other.next_states), (na, nb)]))


def _validate_starts(starts: np.ndarray, n: int) -> None:
    if n == 0:
        if len(starts):
            raise InvalidArgument("empty dataset cannot have trajectories")
        return
    if len(starts) == 0 or starts[0] != 0:
        raise InvalidArgument("trajectory bounds must start at index 0")
    if np.any(np.diff(starts) <= 0) or starts[-1] >= n:
        raise InvalidArgument("trajectory bounds must be strictly increasing and inside the dataset")


def starts_from_bounds(bounds, n: int) -> np.ndarray:
    """Convert ``[(start, stop), ...]`` ranges that must partition ``range(n)``."""
    pairs = sorted((int(r.start), int(r.stop)) if isinstance(r, range) else (int(r[0]), int(r[1]))
                   for r in bounds)
    pos = 0
    for a, b in pairs:
        if a < pos:
            raise InvalidArgument(f"overlapping trajectory bounds at index {a}")
        if a > pos:
            raise InvalidArgument(f"trajectory bounds leave a gap at index {pos}")
        if b <= a:
            raise InvalidArgument(f"empty trajectory bound ({a}, {b})")
        pos = b
    if pos != n:
        raise InvalidArgument(f"trajectory bounds cover {pos} of {n} transitions")
    return np.array([a for a, _ in pairs], dtype=np.int64)


def concatenate(parts: list[Dataset], meta=None) -> Dataset:
    if not parts:
        raise InvalidArgument("nothing to concatenate")
    first = parts[0]
    offsets = np.cumsum([0] + [len(p) for p in parts[:-1]])
    return Dataset(
        first.obs_dim, first.act_dim, first.discount,
        np.concatenate([p.states for p in parts]), np.concatenate([p.actions for p in parts]),
        np.concatenate([p.rewards for p in parts]), np.concatenate([p.next_states for p in parts]),
        np.concatenate([p.next_actions for p in parts]), np.concatenate([p.has_next for p in parts]),
        np.concatenate([p.terminals for p in parts]),
        np.concatenate([p.traj_starts + o for p, o in zip(parts, offsets)]),
        meta=meta if meta is not None else dict(first.meta),
    )


def fill_next_actions(dataset: Dataset, bounds=None) -> Dataset:
    """Link each transition to the action taken at the following step of its trajectory."""
    n = len(dataset)
    starts = dataset.traj_starts if bounds is None else starts_from_bounds(bounds, n)
    _validate_starts(starts, n)
    last = np.zeros(n, dtype=bool)
    if n:
        last[np.append(starts[1:] - 1, n - 1)] = True
    next_actions = np.zeros_like(dataset.actions)
    next_actions[:-1] = dataset.actions[1:]
    next_actions[last] = 0.0
    return Dataset(dataset.obs_dim, dataset.act_dim, dataset.discount, dataset.states, dataset.actions,
                   dataset.rewards, dataset.next_states, next_actions, ~last, dataset.terminals,
                   starts, meta=dict(dataset.meta))


# -- sampling -------------------------------------------------------------------------------------


@dataclass
class RandomPolicy:
    """Clipped isotropic normal; the reference "worst" behavior."""

    act_dim: int
    std: float = 1.0
    clip_low: float = -1.0
    clip_high: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.act_dim < 1 or self.std < 0 or self.clip_low > self.clip_high:
            raise InvalidArgument("bad random policy parameters")

    def sample(self, rng: np.random.Generator, n: int | tuple = ()) -> np.ndarray:
        shape = (n,) if isinstance(n, int) else tuple(n)
        a = rng.standard_normal(shape + (self.act_dim,))
        a *= self.std
        return np.clip(a, self.clip_low, self.clip_high, out=a)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def sample_indices(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if len(dataset) == 0:
        raise InvalidArgument("cannot sample from an empty dataset")
    if batch_size < 1:
        raise InvalidArgument("batch_size must be positive")
    return rng.integers(0, len(dataset), size=batch_size)


def sample_batch(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform with replacement."""
    return dataset.batch(sample_indices(dataset, batch_size, rng))


def sample_random_pair(dataset: Dataset, policy: RandomPolicy, rng: np.random.Generator,
                       n: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """``n`` draws from the state-marginal x random-action distribution."""
    if policy.act_dim != dataset.act_dim:
        raise InvalidArgument("random policy and dataset disagree on act_dim")
    idx = sample_indices(dataset, n, rng)
    return dataset.states[idx], policy.sample(rng, n)


def holdout_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic disjoint (train, holdout) index arrays."""
    if not 0.0 < fraction < 1.0:
        raise InvalidArgument("holdout fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(n * fraction))
    return np.sort(perm[k:]), np.sort(perm[:k])


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return (states - self.mean) / self.std

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_standardizer(states: np.ndarray) -> Standardizer:
    mean = states.mean(axis=0)
    std = states.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return Standardizer(mean, std)


# -- BWDS binary format ---------------------------------------------------------------------------


def to_bytes(dataset: Dataset) -> bytes:
    n = len(dataset)
    parts = [_HEADER.pack(MAGIC, VERSION, dataset.obs_dim, dataset.act_dim, float(dataset.discount),
                          n, len(dataset.traj_starts)),
             dataset.traj_starts.astype("<u8").tobytes()]
    # fixed-width prefix of each record, then optional next action
    head = np.concatenate([dataset.states, dataset.actions, dataset.rewards[:, None],
                           dataset.next_states], axis=1).astype("<f8")
    flags = np.stack([dataset.terminals, dataset.has_next], axis=1).astype(np.uint8)
    nxt = dataset.next_actions.astype("<f8")
    for i in range(n):
        parts.append(head[i].tobytes())
        parts.append(flags[i].tobytes())
        if dataset.has_next[i]:
            parts.append(nxt[i].tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> Dataset:
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", len(data))
    magic, version, obs_dim, act_dim, discount, n, n_traj = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if obs_dim < 1 or act_dim < 1:
        raise FormatError("obs_dim and act_dim must be positive", 8)
    if not 0.0 < discount < 1.0:
        raise FormatError(f"discount {discount} outside (0, 1)", 16)
    off = _HEADER.size
    if n_traj > n or len(data) < off + 8 * n_traj:
        raise FormatError("truncated or inconsistent trajectory table", min(len(data), off))
    starts = np.frombuffer(data, dtype="<u8", count=n_traj, offset=off).astype(np.int64)
    off += 8 * n_traj
    head_len = 2 * obs_dim + act_dim + 1
    head = np.empty((n, head_len))
    flags = np.empty((n, 2), dtype=np.uint8)
    nxt = np.zeros((n, act_dim))
    for i in range(n):
        end = off + 8 * head_len + 2
        if end > len(data):
            raise FormatError(f"truncated transition {i}", len(data))
        head[i] = np.frombuffer(data, dtype="<f8", count=head_len, offset=off)
        flags[i] = np.frombuffer(data, dtype=np.uint8, count=2, offset=end - 2)
        if flags[i, 0] > 1 or flags[i, 1] > 1:
            raise FormatError(f"invalid flag byte in transition {i}", end - 2)
        off = end
        if flags[i, 1]:
            if off + 8 * act_dim > len(data):
                raise FormatError(f"truncated next action in transition {i}", len(data))
            nxt[i] = np.frombuffer(data, dtype="<f8", count=act_dim, offset=off)
            off += 8 * act_dim
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes", off)
    s = 0
    cols = []
    for w in (obs_dim, act_dim, 1, obs_dim):
        cols.append(head[:, s:s + w])
        s += w
    try:
        return Dataset(obs_dim, act_dim, discount, cols[0], cols[1], cols[2][:, 0], cols[3], nxt,
                       flags[:, 1].astype(bool), flags[:, 0].astype(bool), starts)
    except InvalidArgument as e:
        raise FormatError(f"invalid dataset contents: {e}", _HEADER.size) from e


def save(dataset: Dataset, path) -> None:
    Path(path).write_bytes(to_bytes(dataset))


def load(path) -> Dataset:
    return from_bytes(Path(path).read_bytes())


# -- JSON lines -----------------------------------------------------------------------------------


def save_jsonl(dataset: Dataset, path) -> None:
    header = {"format": "BWDS-jsonl", "version": VERSION, "obs_dim": dataset.obs_dim,
              "act_dim": dataset.act_dim, "discount": dataset.discount,
              "trajectory_starts": dataset.traj_starts.tolist(), "meta": dataset.meta}
    lines = [json.dumps(header, sort_keys=True)]
    for i in range(len(dataset)):
        rec = {"state": dataset.states[i].tolist(), "action": dataset.actions[i].tolist(),
               "reward": float(dataset.rewards[i]), "next_state": dataset.next_states[i].tolist(),
               "next_action": dataset.next_actions[i].tolist() if dataset.has_next[i] else None,
               "terminal": bool(dataset.terminals[i])}
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_jsonl(path) -> Dataset:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError("empty JSON-lines file", 0)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FormatError(f"bad header line: {e}", 0) from e
    if header.get("format") != "BWDS-jsonl":
        raise FormatError("missing BWDS-jsonl header", 0)
    obs_dim, act_dim = header["obs_dim"], header["act_dim"]
    transitions = []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        r = json.loads(ln)
        transitions.append(Transition(np.asarray(r["state"], dtype=np.float64),
                                      np.asarray(r["action"], dtype=np.float64), float(r["reward"]),
                                      np.asarray(r["next_state"], dtype=np.float64),
                                      None if r["next_action"] is None else np.asarray(r["next_action"]),
                                      bool(r["terminal"])))
    ds = Dataset.from_transitions(transitions, obs_dim, act_dim, header["discount"], meta=header.get("meta"))
    ds.traj_starts = np.asarray(header["trajectory_starts"], dtype=np.int64)
    _validate_starts(ds.traj_starts, len(ds))
    return ds
