"""Concurrent in-memory key-value store.

Keys are spread over a power-of-two number of buckets by a seeded 64-bit
xxHash; each bucket holds an unbalanced binary search tree ordered by raw
key bytes and is guarded by its own lock. No operation ever holds more
than one bucket lock, so the store cannot deadlock.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass

import xxhash

DEFAULT_BUCKETS = 65536
DEFAULT_SEED = 0
MAX_KEY_LEN = 0xFFFF
DEFAULT_VALUE_CAP = 16 * 1024 * 1024

INSERTED = "inserted"
REPLACED = "replaced"
DELETED = "deleted"
NOT_FOUND = "not-found"


class StoreError(ValueError):
    pass


class KeyTooLong(StoreError):
    pass


class ValueTooLarge(StoreError):
    pass


def key_hash(key: bytes, seed: int = DEFAULT_SEED) -> int:
    return xxhash.xxh64_intdigest(key, seed)


class _Node:
    __slots__ = ("key", "value", "left", "right")

    def __init__(self, key, value):
        self.key = key
        self.value = value
        self.left = None
        self.right = None


@dataclass(frozen=True)
class StoreStats:
    record_count: int
    bucket_count: int
    per_bucket_max: int


class Store:
    """Hash table of binary trees with one lock per bucket.

    ``value_cap`` bounds the size of stored values; it defaults to 16 MiB
    and can be raised up to 2**32 - 1.
    """

    def __init__(self, bucket_count: int = DEFAULT_BUCKETS, seed: int = DEFAULT_SEED,
                 value_cap: int = DEFAULT_VALUE_CAP):
        if bucket_count <= 0 or bucket_count & (bucket_count - 1):
            raise ValueError("bucket_count must be a positive power of two")
        if not 0 <= value_cap <= 0xFFFFFFFF:
            raise ValueError("value_cap must fit in 32 bits")
        self.bucket_count = bucket_count
        self.seed = seed
        self.value_cap = value_cap
        self._mask = bucket_count - 1
        self._roots: list[_Node | None] = [None] * bucket_count
        self._counts = [0] * bucket_count
        self._locks = [threading.Lock() for _ in range(bucket_count)]

    def bucket_of(self, key: bytes) -> int:
        return xxhash.xxh64_intdigest(key, self.seed) & self._mask

    def _check_key(self, key):
        n = len(key)
        if n == 0:
            raise StoreError("key must be non-empty")
        if n > MAX_KEY_LEN:
            raise KeyTooLong(f"key length {n} exceeds {MAX_KEY_LEN}")

    def put(self, key: bytes, value: bytes) -> str:
        self._check_key(key)
        if len(value) > self.value_cap:
            raise ValueTooLarge(f"value length {len(value)} exceeds cap {self.value_cap}")
        key = bytes(key)
        value = bytes(value)
        b = xxhash.xxh64_intdigest(key, self.seed) & self._mask
        with self._locks[b]:
            node = self._roots[b]
            if node is None:
                self._roots[b] = _Node(key, value)
                self._counts[b] += 1
                return INSERTED
            while True:
                if key == node.key:
                    node.value = value
                    return REPLACED
                if key < node.key:
                    if node.left is None:
                        node.left = _Node(key, value)
                        break
                    node = node.left
                else:
                    if node.right is None:
                        node.right = _Node(key, value)
                        break
                    node = node.right
            self._counts[b] += 1
            return INSERTED

    def get(self, key: bytes) -> bytes | None:
        """Return the stored value, or ``None`` when the key is absent."""
        self._check_key(key)
        b = xxhash.xxh64_intdigest(key, self.seed) & self._mask
        with self._locks[b]:
            node = self._roots[b]
            while node is not None:
                if key == node.key:
                    return node.value
                node = node.left if key < node.key else node.right
        return None

    def delete(self, key: bytes) -> str:
        self._check_key(key)
        b = xxhash.xxh64_intdigest(key, self.seed) & self._mask
        with self._locks[b]:
            parent = None
            node = self._roots[b]
            while node is not None and node.key != key:
                parent = node
                node = node.left if key < node.key else node.right
            if node is None:
                return NOT_FOUND
            if node.left is not None and node.right is not None:
                # splice in the in-order successor
                sparent = node
                succ = node.right
                while succ.left is not None:
                    sparent = succ
                    succ = succ.left
                node.key, node.value = succ.key, succ.value
                if sparent is node:
                    sparent.right = succ.right
                else:
                    sparent.left = succ.right
            else:
                child = node.left if node.left is not None else node.right
                if parent is None:
                    self._roots[b] = child
                elif parent.left is node:
                    parent.left = child
                else:
                    parent.right = child
            self._counts[b] -= 1
            return DELETED

    def clear(self) -> None:
        for b in range(self.bucket_count):
            with self._locks[b]:
                self._roots[b] = None
                self._counts[b] = 0

    def stats(self) -> StoreStats:
        counts = list(self._counts)
        return StoreStats(sum(counts), self.bucket_count, max(counts))

    def __len__(self):
        return sum(self._counts)

    def bucket_keys(self, bucket: int) -> list[bytes]:
        """In-order key listing of one bucket (for invariant checks)."""
        out = []
        with self._locks[bucket]:
            stack = []
            node = self._roots[bucket]
            while stack or node is not None:
                while node is not None:
                    stack.append(node)
                    node = node.left
                node = stack.pop()
                out.append(node.key)
                node = node.right
        return out

    def bucket_lock(self, bucket: int) -> threading.Lock:
        return self._locks[bucket]
