"""Namespace-consistent thread identities and fork-time parent links.

A containerised thread has one ID per PID namespace it lives in. Probes in
the root namespace see root IDs for the running thread but namespace-local
IDs from inside the container; the registry maps every ``(namespace, local
tid)`` pair back to the root-namespace ID so parent links stay consistent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Optional

from .counters import Counters

# inode of the initial PID namespace on stock kernels
ROOT_PID_NS = 0xEFFFFFFC


class GenealogyError(RuntimeError):
    pass


@dataclass(slots=True)
class ThreadRecord:
    """One thread as seen at creation: its IDs in every namespace level.

    ``ns_ids[0]`` is ``(ROOT_PID_NS, root_tid)``; ``ns_ids[level]`` is the
    innermost namespace.
    """

    root_tid: int
    ns_ids: tuple[tuple[int, int], ...]
    level: int
    parent_root_tid: Optional[int] = None
    alive: bool = True

    def __post_init__(self) -> None:
        if len(self.ns_ids) != self.level + 1:
            raise GenealogyError(
                f"thread {self.root_tid}: {len(self.ns_ids)} namespace ids for level {self.level}"
            )
        if self.ns_ids[0] != (ROOT_PID_NS, self.root_tid):
            raise GenealogyError(
                f"thread {self.root_tid}: first namespace entry must be the root namespace"
            )

    @classmethod
    def in_root(cls, root_tid: int, parent_root_tid: Optional[int] = None) -> ThreadRecord:
        return cls(root_tid, ((ROOT_PID_NS, root_tid),), 0, parent_root_tid)

    @property
    def local_tid(self) -> int:
        return self.ns_ids[-1][1]


class _Node:
    __slots__ = ("record", "children")

    def __init__(self, record: ThreadRecord) -> None:
        self.record = record
        self.children: set[int] = set()


class ThreadRegistry:
    """Registry of threads keyed by root tid, with a per-namespace index.

    Not thread-safe: one consumer (the engine) applies events in order.
    """

    def __init__(self, counters: Optional[Counters] = None) -> None:
        self.counters = counters if counters is not None else Counters()
        self._nodes: dict[int, _Node] = {}
        self._by_ns: dict[tuple[int, int], int] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    def __contains__(self, root_tid: int) -> bool:
        return root_tid in self._nodes

    def records(self) -> Iterator[ThreadRecord]:
        return (n.record for n in list(self._nodes.values()))

    def get(self, root_tid: int) -> Optional[ThreadRecord]:
        node = self._nodes.get(root_tid)
        return None if node is None else node.record

    def register_thread(self, rec: ThreadRecord) -> None:
        nodes = self._nodes
        by_ns = self._by_ns
        tid = rec.root_tid
        old = nodes.get(tid)
        if old is not None:
            if old.record.alive:
                raise GenealogyError(f"thread {tid} is already registered and alive")
            # PID reuse: the previous incarnation's children must not
            # walk into the new thread
            self._drop(tid)
        for key in rec.ns_ids:
            if key in by_ns:
                raise GenealogyError(
                    f"namespace id {key} already held by live thread {by_ns[key]}"
                )
        parent = rec.parent_root_tid
        if parent is not None:
            pnode = nodes.get(parent)
            if pnode is None:
                self.counters.incr("unknown_parent")
                rec.parent_root_tid = None
            else:
                # every stored parent link names a registered thread and tid
                # is not registered, so nothing can already descend from it
                pnode.children.add(tid)
        rec.alive = True
        nodes[tid] = _Node(rec)
        for key in rec.ns_ids:
            by_ns[key] = tid

    def resolve(self, ns_handle: int, local_tid: int) -> Optional[int]:
        return self._by_ns.get((ns_handle, local_tid))

    def parent_of(self, root_tid: int) -> Optional[int]:
        node = self._nodes.get(root_tid)
        return None if node is None else node.record.parent_root_tid

    def ancestors(self, root_tid: int, limit: int) -> Iterator[int]:
        """Yield up to ``limit`` ancestors of ``root_tid``, nearest first."""
        cur = self.parent_of(root_tid)
        while cur is not None and limit > 0:
            yield cur
            cur = self.parent_of(cur)
            limit -= 1

    def mark_exit(self, root_tid: int) -> None:
        node = self._nodes.get(root_tid)
        if node is None or not node.record.alive:
            self.counters.incr("unknown_exit")
            return
        node.record.alive = False
        for key in node.record.ns_ids:
            if self._by_ns.get(key) == root_tid:
                del self._by_ns[key]

    def collect(self, root_tid: int, pinned: Callable[[int], bool]) -> int:
        """Drop ``root_tid`` if it is dead, unpinned and childless; then retry
        its parent. Returns the number of records removed.

        ``pinned`` reports whether a thread still owns state (a stored
        context) that keeps its record needed for ancestor walks.
        """
        removed = 0
        cur: Optional[int] = root_tid
        while cur is not None:
            node = self._nodes.get(cur)
            if node is None or node.record.alive or node.children or pinned(cur):
                break
            parent = node.record.parent_root_tid
            self._drop(cur)
            removed += 1
            cur = parent
        return removed

    def _drop(self, tid: int) -> None:
        node = self._nodes.pop(tid)
        for child in node.children:
            child_node = self._nodes.get(child)
            if child_node is not None:
                child_node.record.parent_root_tid = None
        parent = node.record.parent_root_tid
        if parent is not None and parent in self._nodes:
            self._nodes[parent].children.discard(tid)
        for key in node.record.ns_ids:
            if self._by_ns.get(key) == tid:
                del self._by_ns[key]
