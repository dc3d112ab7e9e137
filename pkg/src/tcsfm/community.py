"""Louvain partitioning of the track-graph and per-segment image clusters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyGraph
from .geometry import View
from .tracks import Track, TrackGraph

_GAIN_EPS = 1e-12


@dataclass
class CommunityLabeling:
    label: dict  # track id -> community id in [0, n_communities)
    n_communities: int

    def members(self) -> dict:
        out: dict = {c: [] for c in range(self.n_communities)}
        for tid, c in self.label.items():
            out[c].append(tid)
        return out


@dataclass
class ImageCluster:
    segment: int
    view_ids: list
    tracks_per_view: dict  # view id -> count of visible segment tracks


def modularity(graph: TrackGraph, labeling: CommunityLabeling, resolution: float = 1.0) -> float:
    """Newman-Girvan modularity with edge multiplicities as weights."""
    if not graph.edges:
        raise EmptyGraph("modularity of an edgeless graph is undefined")
    adj = graph.adjacency()
    degree = {n: float(sum(adj[n].values())) for n in graph.nodes}
    two_m = sum(degree.values())
    internal: dict = {}
    for (a, b), w in graph.edges.items():
        if labeling.label[a] == labeling.label[b]:
            c = labeling.label[a]
            internal[c] = internal.get(c, 0.0) + w
    deg_sum: dict = {}
    for n in graph.nodes:
        c = labeling.label[n]
        deg_sum[c] = deg_sum.get(c, 0.0) + degree[n]
    q = 0.0
    for c, dsum in deg_sum.items():
        q += internal.get(c, 0.0) / (two_m / 2.0) - resolution * (dsum / two_m) ** 2
    return q


def _local_moves(adj, degree, two_m, comm, order, resolution):
    """One phase of greedy moves; returns True if any node changed community."""
    comm_deg: dict = {}
    for n, c in comm.items():
        comm_deg[c] = comm_deg.get(c, 0.0) + degree[n]
    improved = False
    moved = True
    while moved:
        moved = False
        for n in order:
            c_old = comm[n]
            k_n = degree[n]
            comm_deg[c_old] -= k_n
            # weight from n to each neighboring community
            links: dict = {}
            for nb, w in adj[n].items():
                links[comm[nb]] = links.get(comm[nb], 0.0) + w
            best_c, best_gain = c_old, links.get(c_old, 0.0) - resolution * comm_deg[c_old] * k_n / two_m
            for c_new in sorted(links):
                if c_new == c_old:
                    continue
                gain = links[c_new] - resolution * comm_deg.get(c_new, 0.0) * k_n / two_m
                if gain > best_gain + _GAIN_EPS:
                    best_c, best_gain = c_new, gain
            comm[n] = best_c
            comm_deg[best_c] = comm_deg.get(best_c, 0.0) + k_n
            if best_c != c_old:
                moved = True
                improved = True
    return improved


def detect_communities(
    graph: TrackGraph, seed: int = 0, resolution: float = 1.0
) -> CommunityLabeling:
    """Two-phase Louvain with a seeded node visit order.

    Singleton connected components (isolated nodes) stay singleton
    communities. Labels are renumbered to contiguous integers ordered by the
    smallest member track id.
    """
    if not graph.nodes:
        raise EmptyGraph("empty track-graph")
    rng = np.random.default_rng(seed)

    # current aggregated graph: node -> {neighbor: weight}; node -> member tracks
    adj = {n: dict(nb) for n, nb in graph.adjacency().items()}
    members = {n: [n] for n in graph.nodes}
    self_loops = {n: 0.0 for n in graph.nodes}

    while True:
        nodes = sorted(adj)
        degree = {n: sum(adj[n].values()) + self_loops[n] for n in nodes}
        two_m = sum(degree.values())
        if two_m <= 0:
            break
        comm = {n: n for n in nodes}
        order = list(nodes)
        rng.shuffle(order)
        improved = _local_moves(adj, degree, two_m, comm, order, resolution)
        if not improved:
            break
        # aggregation phase
        groups: dict = {}
        for n, c in comm.items():
            groups.setdefault(c, []).append(n)
        new_adj: dict = {}
        new_members: dict = {}
        new_loops: dict = {}
        rep = {c: min(g) for c, g in groups.items()}
        for c, g in groups.items():
            r = rep[c]
            new_members[r] = sorted(m for n in g for m in members[n])
            # internal edges appear once from each endpoint; keep both so the
            # self-loop carries 2x the internal weight, matching degree bookkeeping
            loop = sum(self_loops[n] for n in g)
            nbrs: dict = {}
            for n in g:
                for nb, w in adj[n].items():
                    cn = rep[comm[nb]]
                    if cn == r:
                        loop += w
                    else:
                        nbrs[cn] = nbrs.get(cn, 0.0) + w
            new_loops[r] = loop
            new_adj[r] = nbrs
        adj, members, self_loops = new_adj, new_members, new_loops
        if len(adj) == len(nodes):
            break

    comms = sorted(members.values(), key=lambda g: g[0])
    label = {}
    for idx, g in enumerate(comms):
        for tid in g:
            label[tid] = idx
    return CommunityLabeling(label=label, n_communities=len(comms))


def extend_labels(
    labeling: CommunityLabeling,
    sampled: list[int],
    tracks: list[Track],
    views: list[View],
) -> dict:
    """Propagate community labels from sampled tracks to all tracks.

    A superpixel inherits the community of its sampled track; an unsampled
    track takes the majority community over the superpixels of its
    observations (ties to the smaller community id). Tracks with no labeled
    superpixel are left out of the result.
    """
    view_by_id = {v.id: v for v in views}
    track_by_id = {tr.id: tr for tr in tracks}
    cell_comm: dict = {}
    for tid in sampled:
        c = labeling.label[tid]
        for v, k in track_by_id[tid].observations:
            lab = int(view_by_id[v].superpixel_label[k])
            cell_comm.setdefault((v, lab), c)

    full: dict = dict(labeling.label)
    for tr in tracks:
        if tr.id in full:
            continue
        votes: dict = {}
        for v, k in tr.observations:
            lab = int(view_by_id[v].superpixel_label[k])
            c = cell_comm.get((v, lab))
            if c is not None:
                votes[c] = votes.get(c, 0) + 1
        if votes:
            full[tr.id] = min(votes, key=lambda c: (-votes[c], c))
    return full


def image_clusters(
    track_label: dict,
    tracks: list[Track],
    views: list[View],
    n_communities: int,
    min_tracks_per_view: int = 30,
) -> list[ImageCluster]:
    """A view joins a segment's cluster iff it observes at least
    min_tracks_per_view tracks of that segment; views may join several."""
    track_by_id = {tr.id: tr for tr in tracks}
    counts: dict = {}  # (segment, view) -> count
    for tid, c in track_label.items():
        tr = track_by_id.get(tid)
        if tr is None:
            continue
        for v, _ in tr.observations:
            counts[(c, v)] = counts.get((c, v), 0) + 1

    clusters = []
    for seg in range(n_communities):
        tv = {v: n for (c, v), n in counts.items() if c == seg and n >= min_tracks_per_view}
        if tv:
            clusters.append(
                ImageCluster(segment=seg, view_ids=sorted(tv), tracks_per_view=tv)
            )
    return clusters
