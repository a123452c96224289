"""Checkpoint store and experience-replay sampling strategies."""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

from .errors import CheckpointIoError, EmptyStore, IndexGap
from .numerics import SeededRng
from .policy import Policy, PolicySpec, read_checkpoint, save_params

MANIFEST = "manifest.txt"


class ErdStrategy(enum.Enum):
    INITIAL = "init"      # always the pre-alignment model
    LAST = "last"         # most recently saved checkpoint
    UNIFORM = "uniform"   # random checkpoint replay over all saved ones

    @classmethod
    def parse(cls, text) -> "ErdStrategy":
        if isinstance(text, cls):
            return text
        aliases = {"0": "init", "initial": "init", "k-1": "last", "rcr": "uniform"}
        key = str(text).strip().lower()
        return cls(aliases.get(key, key))


@dataclass(frozen=True)
class Entry:
    k: int
    path: Path
    crc: int


class CheckpointStore:
    """Append-only list of checkpoints under ``<root>/`` plus a text manifest.

    Each manifest line reads ``<k> <filename> <crc32 as 8 hex digits>``.
    Loaded policies are cached for the two most recently used indices.
    """

    cache_size = 2

    def __init__(self, root, strategy=ErdStrategy.UNIFORM, spec: PolicySpec | None = None):
        self.root = Path(root)
        self.strategy = ErdStrategy.parse(strategy)
        self.spec = spec
        self.entries: list[Entry] = []
        self._cache: OrderedDict[int, Policy] = OrderedDict()
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CheckpointIoError(f"cannot create {self.root}: {exc}") from exc

    def __len__(self):
        return len(self.entries)

    @property
    def indices(self):
        return [e.k for e in self.entries]

    def append(self, policy: Policy, k: int, seed: int = 0) -> Entry:
        if k != len(self.entries):
            raise IndexGap(f"expected checkpoint index {len(self.entries)}, got {k}")
        if self.spec is None:
            self.spec = policy.spec
        path = self.root / f"{k}.sspockpt"
        crc = save_params(policy, path, iteration=k, seed=seed)
        entry = Entry(k, path, crc)
        self.entries.append(entry)
        try:
            with open(self.root / MANIFEST, "a", encoding="ascii") as fh:
                fh.write(f"{k} {path.name} {crc:08x}\n")
        except OSError as exc:
            raise CheckpointIoError(f"cannot update manifest: {exc}") from exc
        self._remember(k, policy)
        return entry

    def load(self, k: int) -> Policy:
        if k in self._cache:
            self._cache.move_to_end(k)
            return self._cache[k]
        policy, _, _ = read_checkpoint(self.entries[k].path, self.spec)
        self._remember(k, policy)
        return policy

    def _remember(self, k, policy):
        self._cache[k] = policy
        self._cache.move_to_end(k)
        while len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)

    def sample_index(self, rng: SeededRng) -> int:
        n = len(self.entries)
        if n == 0:
            raise EmptyStore("no checkpoints to replay")
        if self.strategy is ErdStrategy.INITIAL:
            return 0
        if self.strategy is ErdStrategy.LAST:
            return n - 1
        return rng.integers(n)

    def sample_checkpoint(self, rng: SeededRng) -> tuple[int, Policy]:
        k = self.sample_index(rng)
        return k, self.load(k)

    @classmethod
    def open(cls, root, strategy=ErdStrategy.UNIFORM, spec: PolicySpec | None = None) -> "CheckpointStore":
        """Reattach to an existing directory by reading its manifest."""
        store = cls(root, strategy, spec)
        manifest = store.root / MANIFEST
        if manifest.exists():
            for line in manifest.read_text(encoding="ascii").splitlines():
                if not line.strip():
                    continue
                k, name, crc = line.split()
                if int(k) != len(store.entries):
                    raise IndexGap(f"manifest jumps to index {k}")
                store.entries.append(Entry(int(k), store.root / name, int(crc, 16)))
        return store
