"""Track building, view-graph, superpixel sampling and the track-graph.

Superpixels are a uniform grid over keypoint coordinates (SLIC needs pixel
data, which we do not ingest); externally computed labels are honored when
present on the view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import IndexOutOfRange
from .geometry import View


@dataclass(frozen=True)
class Match:
    view_i: int
    view_j: int
    pairs: tuple  # tuple of (kp index in i, kp index in j)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((int(a), int(b)) for a, b in self.pairs))


@dataclass(frozen=True)
class Track:
    id: int
    observations: tuple  # tuple of (view id, keypoint index), one per view

    @property
    def length(self) -> int:
        return len(self.observations)

    def keypoint_in(self, view_id: int) -> int | None:
        for v, k in self.observations:
            if v == view_id:
                return k
        return None


@dataclass
class ViewGraph:
    nodes: list
    # (i, j) -> dict(w, r_i, r_j, n_common, relative_geometry)
    edges: dict = field(default_factory=dict)

    def weight(self, i: int, j: int) -> float:
        key = (min(i, j), max(i, j))
        e = self.edges.get(key)
        return 0.0 if e is None else e["w"]

    def neighbors(self, i: int):
        for (a, b), e in self.edges.items():
            if a == i:
                yield b, e
            elif b == i:
                yield a, e


@dataclass
class TrackGraph:
    nodes: list  # sampled track ids
    edges: dict  # (tid_a, tid_b) with tid_a < tid_b -> multiplicity

    def adjacency(self) -> dict:
        adj: dict = {n: {} for n in self.nodes}
        for (a, b), w in self.edges.items():
            adj[a][b] = w
            adj[b][a] = w
        return adj


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        root = x
        while self.parent.setdefault(root, root) != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller key wins so component ids are stable across runs
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def build_tracks(views: list[View], matches: list[Match]) -> list[Track]:
    """Union-find transitive closure of keypoint correspondences.

    Components containing two keypoints of the same view are discarded
    entirely; surviving components with >= 2 observations become tracks,
    ordered (and numbered) by their smallest (view, keypoint) member.
    """
    view_by_id = {v.id: v for v in views}
    uf = _UnionFind()
    for m in matches:
        if m.view_i not in view_by_id or m.view_j not in view_by_id:
            raise IndexOutOfRange(f"match references unknown view {(m.view_i, m.view_j)}")
        ni = view_by_id[m.view_i].n_keypoints
        nj = view_by_id[m.view_j].n_keypoints
        for a, b in m.pairs:
            if not (0 <= a < ni) or not (0 <= b < nj):
                raise IndexOutOfRange(
                    f"keypoint index out of range in match ({m.view_i},{m.view_j})"
                )
            uf.union((m.view_i, a), (m.view_j, b))

    components: dict = {}
    for node in list(uf.parent):
        components.setdefault(uf.find(node), []).append(node)

    tracks = []
    for members in components.values():
        if len(members) < 2:
            continue
        views_seen = [v for v, _ in members]
        if len(set(views_seen)) != len(views_seen):
            continue  # intra-view conflict: drop the whole component
        tracks.append(tuple(sorted(members)))
    tracks.sort()
    return [Track(i, obs) for i, obs in enumerate(tracks)]


def build_view_graph(views: list[View], matches: list[Match]) -> ViewGraph:
    """Edge weight = mean of the two shared-observation ratios."""
    view_by_id = {v.id: v for v in views}
    common: dict = {}
    for m in matches:
        i, j = m.view_i, m.view_j
        key = (min(i, j), max(i, j))
        common[key] = common.get(key, 0) + len(m.pairs)

    graph = ViewGraph(nodes=sorted(view_by_id))
    for (i, j), n in sorted(common.items()):
        if n == 0:
            continue
        r_i = n / view_by_id[i].n_keypoints
        r_j = n / view_by_id[j].n_keypoints
        graph.edges[(i, j)] = {
            "w": (r_i + r_j) / 2.0,
            "r_i": r_i,
            "r_j": r_j,
            "n_common": n,
            "relative_geometry": None,
        }
    return graph


def assign_superpixels(view: View, cell_size: float = 64.0) -> View:
    """Grid label = floor(x/cell) + ncols * floor(y/cell). No-op when the view
    already carries labels."""
    if view.superpixel_label is not None:
        return view
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    kp = view.keypoints
    if kp.shape[0] == 0:
        return View(view.id, view.intrinsics, kp, np.zeros(0, dtype=int))
    ncols = max(1, math.ceil(float(np.max(kp[:, 0])) / cell_size))
    col = np.floor(kp[:, 0] / cell_size).astype(int)
    row = np.floor(kp[:, 1] / cell_size).astype(int)
    labels = col + ncols * row
    v = View(view.id, view.intrinsics, kp, labels)
    object.__setattr__(v, "_grid_ncols", ncols)
    return v


def _cell_of(view: View, label: int) -> tuple[int, int]:
    ncols = getattr(view, "_grid_ncols", None)
    if ncols is None:
        # externally supplied labels: treat each label as its own cell with no
        # grid neighbors; adjacency then reduces to same-label co-location
        return (label, 0)
    return (label % ncols, label // ncols)


def labels_adjacent(view: View, la: int, lb: int) -> bool:
    """8-neighborhood adjacency of grid cells (same cell counts)."""
    ca, cb = _cell_of(view, la), _cell_of(view, lb)
    return abs(ca[0] - cb[0]) <= 1 and abs(ca[1] - cb[1]) <= 1


def sample_tracks(
    views: list[View],
    tracks: list[Track],
    view_graph: ViewGraph,
    tau_w: float = 0.15,
) -> list[int]:
    """One track per superpixel, longest first.

    Observations supported only by view-graph edges of weight < tau_w do not
    count toward track length. Views are visited in ascending id order,
    superpixels in ascending label order; the longest unsampled track in a
    superpixel is sampled (ties to the smaller id) and its superpixels in
    other views are skipped.
    """
    view_by_id = {v.id: v for v in views}

    # reliable length: observations in views with at least one edge of weight
    # >= tau_w to another view observing the same track
    reliable_len = {}
    for tr in tracks:
        obs_views = [v for v, _ in tr.observations]
        n = 0
        for v in obs_views:
            ok = False
            for u in obs_views:
                if u != v and view_graph.weight(u, v) >= tau_w:
                    ok = True
                    break
            if ok:
                n += 1
        reliable_len[tr.id] = n

    # (view id, superpixel label) -> track ids present
    cell_tracks: dict = {}
    track_cells: dict = {tr.id: [] for tr in tracks}
    for tr in tracks:
        for v, k in tr.observations:
            view = view_by_id[v]
            if view.superpixel_label is None:
                raise ValueError(f"view {v} has no superpixel labels")
            lab = int(view.superpixel_label[k])
            cell_tracks.setdefault((v, lab), []).append(tr.id)
            track_cells[tr.id].append((v, lab))

    sampled: list[int] = []
    sampled_set: set = set()
    skipped: set = set()
    for v in sorted(view_by_id):
        labels = sorted({lab for (vv, lab) in cell_tracks if vv == v})
        for lab in labels:
            if (v, lab) in skipped:
                continue
            candidates = [
                t for t in cell_tracks[(v, lab)] if t not in sampled_set and reliable_len[t] > 0
            ]
            if not candidates:
                continue
            best = min(candidates, key=lambda t: (-reliable_len[t], t))
            sampled.append(best)
            sampled_set.add(best)
            for cell in track_cells[best]:
                skipped.add(cell)
    return sampled


def build_track_graph(sampled: list[int], tracks: list[Track], views: list[View]) -> TrackGraph:
    """Link sampled tracks whose keypoints fall in the same or 8-adjacent
    superpixels of a shared view; edge weight is the number of such views."""
    view_by_id = {v.id: v for v in views}
    track_by_id = {tr.id: tr for tr in tracks}
    sampled_set = set(sampled)

    edges: dict = {}
    per_view: dict = {}
    for tid in sampled:
        for v, k in track_by_id[tid].observations:
            per_view.setdefault(v, []).append((tid, k))

    for v, entries in per_view.items():
        view = view_by_id[v]
        # bucket by cell for locality; compare only nearby cells
        by_cell: dict = {}
        for tid, k in entries:
            lab = int(view.superpixel_label[k])
            by_cell.setdefault(_cell_of(view, lab), []).append(tid)
        for (cx, cy), tids in by_cell.items():
            for (ox, oy) in ((0, 0), (1, 0), (0, 1), (1, 1), (1, -1)):
                other = by_cell.get((cx + ox, cy + oy))
                if other is None:
                    continue
                if (ox, oy) == (0, 0):
                    pairs = [(a, b) for idx, a in enumerate(tids) for b in tids[idx + 1:]]
                else:
                    pairs = [(a, b) for a in tids for b in other]
                for a, b in pairs:
                    if a == b:
                        continue
                    key = (min(a, b), max(a, b))
                    edges[key] = edges.get(key, 0) + 1
    return TrackGraph(nodes=sorted(sampled_set), edges=edges)
