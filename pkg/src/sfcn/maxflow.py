"""Max-flow / min-cut with the Boykov-Kolmogorov search-tree algorithm.

Capacities are floats. Terminal links are stored per node as a single signed
residual (positive: from the source, negative: to the sink), with the common
part of both links pushed immediately, as in the reference implementation.
"""

from __future__ import annotations

from collections import deque

TERMINAL = -1
ORPHAN = -2
INF = float("inf")

SOURCE = 0
SINK = 1


class Graph:
    def __init__(self, n_nodes: int = 0):
        self.tr_cap: list[float] = []
        self.first: list[int] = []
        self.head: list[int] = []
        self.next: list[int] = []
        self.r_cap: list[float] = []
        self.flow = 0.0
        self._parent: list | None = None
        self._is_sink: list[bool] | None = None
        if n_nodes:
            self.add_nodes(n_nodes)

    @property
    def n_nodes(self) -> int:
        return len(self.tr_cap)

    def add_nodes(self, count: int) -> int:
        start = len(self.tr_cap)
        self.tr_cap.extend([0.0] * count)
        self.first.extend([-1] * count)
        return start

    def add_edge(self, i: int, j: int, cap: float, rev_cap: float) -> None:
        if i == j:
            raise ValueError("self-loop")
        if cap < 0 or rev_cap < 0:
            raise ValueError("negative capacity")
        a = len(self.head)
        self.head += [j, i]
        self.r_cap += [cap, rev_cap]
        self.next += [self.first[i], self.first[j]]
        self.first[i] = a
        self.first[j] = a + 1

    def add_tweights(self, i: int, cap_source: float, cap_sink: float) -> None:
        if cap_source < 0 or cap_sink < 0:
            raise ValueError("negative terminal capacity")
        delta = self.tr_cap[i]
        if delta > 0:
            cap_source += delta
        else:
            cap_sink -= delta
        self.flow += min(cap_source, cap_sink)
        self.tr_cap[i] = cap_source - cap_sink

    def _arcs(self, i: int):
        a = self.first[i]
        nxt = self.next
        while a != -1:
            yield a
            a = nxt[a]

    def maxflow(self) -> float:
        n = self.n_nodes
        head, r_cap, tr_cap = self.head, self.r_cap, self.tr_cap
        parent: list = [None] * n
        is_sink = [False] * n
        ts = [0] * n
        dist = [0] * n
        active: deque[int] = deque()
        queued = [False] * n
        orphans: deque[int] = deque()
        time = 0

        def activate(v):
            if not queued[v]:
                queued[v] = True
                active.append(v)

        for v in range(n):
            if tr_cap[v] > 0:
                parent[v], is_sink[v] = TERMINAL, False
            elif tr_cap[v] < 0:
                parent[v], is_sink[v] = TERMINAL, True
            else:
                continue
            dist[v] = 1
            activate(v)

        current = None
        while True:
            i = current
            if i is not None and parent[i] is None:
                i = None
            if i is None:
                while active:
                    v = active.popleft()
                    queued[v] = False
                    if parent[v] is not None:
                        i = v
                        break
                if i is None:
                    break
            current = None

            # growth
            found = -1
            if not is_sink[i]:
                for a in self._arcs(i):
                    if r_cap[a] > 0:
                        j = head[a]
                        if parent[j] is None:
                            is_sink[j] = False
                            parent[j] = a ^ 1
                            ts[j], dist[j] = ts[i], dist[i] + 1
                            activate(j)
                        elif is_sink[j]:
                            found = a
                            break
                        elif ts[j] <= ts[i] and dist[j] > dist[i]:
                            parent[j] = a ^ 1
                            ts[j], dist[j] = ts[i], dist[i] + 1
            else:
                for a in self._arcs(i):
                    if r_cap[a ^ 1] > 0:
                        j = head[a]
                        if parent[j] is None:
                            is_sink[j] = True
                            parent[j] = a ^ 1
                            ts[j], dist[j] = ts[i], dist[i] + 1
                            activate(j)
                        elif not is_sink[j]:
                            found = a ^ 1
                            break
                        elif ts[j] <= ts[i] and dist[j] > dist[i]:
                            parent[j] = a ^ 1
                            ts[j], dist[j] = ts[i], dist[i] + 1

            time += 1
            if found < 0:
                continue
            current = i

            # augmentation along source tree -> found arc -> sink tree
            a = found
            bottleneck = r_cap[a]
            v = head[a ^ 1]
            while parent[v] != TERMINAL:
                pa = parent[v]
                bottleneck = min(bottleneck, r_cap[pa ^ 1])
                v = head[pa]
            bottleneck = min(bottleneck, tr_cap[v])
            v = head[a]
            while parent[v] != TERMINAL:
                pa = parent[v]
                bottleneck = min(bottleneck, r_cap[pa])
                v = head[pa]
            bottleneck = min(bottleneck, -tr_cap[v])

            r_cap[a ^ 1] += bottleneck
            r_cap[a] -= bottleneck
            v = head[a ^ 1]
            while parent[v] != TERMINAL:
                pa = parent[v]
                r_cap[pa] += bottleneck
                r_cap[pa ^ 1] -= bottleneck
                if r_cap[pa ^ 1] <= 0:
                    r_cap[pa ^ 1] = 0.0
                    parent[v] = ORPHAN
                    orphans.appendleft(v)
                v = head[pa]
            tr_cap[v] -= bottleneck
            if tr_cap[v] <= 0:
                tr_cap[v] = 0.0
                parent[v] = ORPHAN
                orphans.appendleft(v)
            v = head[a]
            while parent[v] != TERMINAL:
                pa = parent[v]
                r_cap[pa ^ 1] += bottleneck
                r_cap[pa] -= bottleneck
                if r_cap[pa] <= 0:
                    r_cap[pa] = 0.0
                    parent[v] = ORPHAN
                    orphans.appendleft(v)
                v = head[pa]
            tr_cap[v] += bottleneck
            if tr_cap[v] >= 0:
                tr_cap[v] = 0.0
                parent[v] = ORPHAN
                orphans.appendleft(v)
            self.flow += bottleneck

            # adoption
            time += 1
            while orphans:
                o = orphans.popleft()
                sink_side = is_sink[o]
                best, best_d = -1, INF
                for a0 in self._arcs(o):
                    if (r_cap[a0] if sink_side else r_cap[a0 ^ 1]) <= 0:
                        continue
                    j = head[a0]
                    if is_sink[j] != sink_side or parent[j] is None:
                        continue
                    d = 0
                    k = j
                    while True:
                        if ts[k] == time:
                            d += dist[k]
                            break
                        pa = parent[k]
                        d += 1
                        if pa == TERMINAL:
                            ts[k], dist[k] = time, 1
                            break
                        if pa == ORPHAN:
                            d = INF
                            break
                        k = head[pa]
                    if d < INF:
                        if d < best_d:
                            best, best_d = a0, d
                        k = j
                        while ts[k] != time:
                            ts[k], dist[k] = time, d
                            d -= 1
                            k = head[parent[k]]
                if best >= 0:
                    parent[o] = best
                    ts[o], dist[o] = time, best_d + 1
                    continue
                for a0 in self._arcs(o):
                    j = head[a0]
                    if is_sink[j] != sink_side or parent[j] is None:
                        continue
                    if (r_cap[a0] if sink_side else r_cap[a0 ^ 1]) > 0:
                        activate(j)
                    pj = parent[j]
                    if pj not in (TERMINAL, ORPHAN) and head[pj] == o:
                        parent[j] = ORPHAN
                        orphans.append(j)
                parent[o] = None

        self._parent, self._is_sink = parent, is_sink
        return self.flow

    def segment(self, i: int) -> int:
        """SOURCE if ``i`` ends in the source tree, else SINK."""
        if self._parent is None:
            raise RuntimeError("call maxflow() first")
        if self._parent[i] is not None and not self._is_sink[i]:
            return SOURCE
        return SINK
