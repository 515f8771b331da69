"""Cooperative firefighting on a bipartite firefighter/home graph."""
from __future__ import annotations

import numpy as np

from dvf.gmdp import StepResult
from dvf.graph import BipartiteLayout, bipartite_firefight

SPREAD_NEIGHBOUR = 0.8
SPREAD_SELF = 0.4


def merge_layouts(layouts):
    """Disjoint union of several layouts; firefighter and home ids are offset."""
    ff = homes = 0
    links, instance = [], []
    for b, lay in enumerate(layouts):
        links.append(lay.links + np.array([ff, homes]))
        instance.append(np.full(lay.n_firefighters, b))
        ff += lay.n_firefighters
        homes += lay.n_homes
    out = BipartiteLayout(ff, homes, np.concatenate(links))
    out.graph.instance = np.concatenate(instance)
    return out


def home_adjacency(layout):
    """Homes sharing a firefighter, as a boolean matrix without the diagonal."""
    inc = np.zeros((layout.n_firefighters, layout.n_homes))
    inc[layout.links[:, 0], layout.links[:, 1]] = 1.0
    adj = (inc.T @ inc) > 0
    np.fill_diagonal(adj, False)
    return adj


def suppress(fire, homes, n_homes):
    """One firefighter lowers a level by one; two or more put the fire out."""
    count = np.bincount(homes, minlength=n_homes)
    out = fire.copy()
    out[count == 1] = np.maximum(out[count == 1] - 1, 0)
    out[count >= 2] = 0
    return out


def spread(fire_before, fire_after, adjacency, u, f_max):
    """Stochastic growth driven by the uniform draws ``u`` (one per home).

    A home grows with probability 0.8 when an adjacent home was burning at
    the start of the step, otherwise with probability 0.4 if it is itself
    still burning.
    """
    neighbour_burning = adjacency @ (fire_before > 0) > 0
    grow = np.where(neighbour_burning, u < SPREAD_NEIGHBOUR, (fire_after > 0) & (u < SPREAD_SELF))
    return np.minimum(fire_after + grow, f_max)


def local_rewards(layout, fire):
    """``R_i = sum_{h in N_i} -f_h / |N_h|``, before the ``|V|/|H|`` rescaling."""
    share = np.bincount(layout.links[:, 1], minlength=layout.n_homes).astype(float)
    contrib = -fire[layout.links[:, 1]] / share[layout.links[:, 1]]
    return np.bincount(layout.links[:, 0], weights=contrib, minlength=layout.n_firefighters)


class FirefightEnv:
    """Firefighters pick one adjacent home per step.

    Observation of firefighter ``i`` (width 3): mean and max fire level of
    its homes over ``f_max``, and its home count over 10. Per candidate
    home features (width 3): fire level over ``f_max``, whether an adjacent
    home burns, and ``1/|N_h|``. Rewards are the rescaled ``R~_i`` so their
    mean is minus the average fire level.
    """

    obs_dim = 3
    cand_dim = 3

    def __init__(self, layout, f_max=5):
        if f_max < 1:
            raise ValueError("f_max must be at least 1")
        self.layout = layout
        self.graph = layout.graph
        self.n = layout.n_firefighters
        self.f_max = int(f_max)
        self.adjacency = home_adjacency(layout)
        self.owners = layout.links[:, 0]
        self.cand_homes = layout.links[:, 1]
        self.share = np.bincount(self.cand_homes, minlength=layout.n_homes).astype(float)
        self.scale = self.n / layout.n_homes
        self.fire = np.zeros(layout.n_homes, dtype=np.int64)

    @classmethod
    def random(cls, rng, n_firefighters=20, n_homes=40, edge_prob=0.15, f_max=5):
        return cls(bipartite_firefight(n_firefighters, n_homes, edge_prob, rng), f_max)

    def reset(self, rng):
        self.fire = rng.integers(0, self.f_max + 1, size=self.layout.n_homes)
        return self.observations()

    def observations(self):
        f = self.fire[self.cand_homes] / self.f_max
        count = np.bincount(self.owners, minlength=self.n)
        mean = np.bincount(self.owners, weights=f, minlength=self.n) / count
        mx = np.zeros(self.n)
        np.maximum.at(mx, self.owners, f)
        return np.stack([mean, mx, count / 10.0], axis=1)

    def observe(self, i):
        return self.observations()[i]

    def candidates(self):
        """``(owners, features)`` for the categorical head."""
        burning_nb = (self.adjacency @ (self.fire > 0)) > 0
        h = self.cand_homes
        feats = np.stack([self.fire[h] / self.f_max, burning_nb[h].astype(float), 1.0 / self.share[h]], axis=1)
        return self.owners, feats

    def homes_from_choice(self, choice):
        return self.cand_homes[np.asarray(choice, np.int64)]

    def step(self, homes, rng):
        homes = np.asarray(homes, np.int64)
        if homes.shape != (self.n,):
            raise ValueError(f"expected {self.n} actions")
        inc = np.zeros((self.n, self.layout.n_homes), dtype=bool)
        inc[self.owners, self.cand_homes] = True
        if not inc[np.arange(self.n), homes].all():
            raise ValueError("firefighter moved to a home it is not adjacent to")
        before = self.fire
        after = suppress(before, homes, self.layout.n_homes)
        self.fire = spread(before, after, self.adjacency, rng.random(self.layout.n_homes), self.f_max)
        rewards = self.scale * local_rewards(self.layout, self.fire)
        info = {"fire_level": float(self.fire.mean()), "global_reward": float(rewards.mean())}
        return StepResult(rewards, self.observations(), False, info)
