"""Benchmark environments and a config-driven factory for batched instances."""
from __future__ import annotations

import json

import numpy as np

from dvf.envs.colouring import ColourEnv, brute_force_optimum, colour_reward, greedy_colour_step
from dvf.envs.firefight import FirefightEnv, merge_layouts
from dvf.envs.radio import EdgeRadioEnv, RadioEnv, RadioParams, bgrw_normalise, bgrw_step, edge_rewards
from dvf.graph import bipartite_firefight, disjoint_union, generate

ENV_DEFAULTS = {
    "colouring": {"graph": "erdos_renyi", "n": 60, "mean_degree": 3.0, "m": 2, "c": 3, "p_m": 0.4},
    "firefight": {"n_firefighters": 20, "n_homes": 40, "edge_prob": 0.15, "f_max": 5},
    "radio": {"mode": "sq", "n_min": 20, "n_max": 50, "threshold": 0.25, "p_m": 0.01, "channel_scale": 1e-5},
    "radio_edge": {"mode": "sq", "n_min": 20, "n_max": 50, "threshold": 0.25, "p_m": 0.01, "channel_scale": 1e-5},
}


def env_params(kind, overrides=None):
    """Defaults for ``kind`` updated with ``overrides``; unknown keys are rejected."""
    if kind not in ENV_DEFAULTS:
        raise ValueError(f"unknown environment {kind!r}")
    params = dict(ENV_DEFAULTS[kind])
    for key, value in (overrides or {}).items():
        if key not in params:
            raise KeyError(f"env.{key}: unknown parameter for {kind}")
        params[key] = value
    if kind.startswith("radio") and params["mode"] == "ee" and "n_min" not in (overrides or {}):
        params["n_min"] = 10
    return params


def make_env(kind, params, rng, batch=1):
    """Fresh environment over ``batch`` independent instances merged into one graph."""
    p = env_params(kind, params)
    if kind == "colouring":
        graphs = [generate(p["graph"], rng, n=p["n"], mean_degree=p["mean_degree"], m=p["m"]) for _ in range(batch)]
        return ColourEnv(disjoint_union(graphs), c=p["c"], p_m=p["p_m"])
    if kind == "firefight":
        layouts = [bipartite_firefight(p["n_firefighters"], p["n_homes"], p["edge_prob"], rng) for _ in range(batch)]
        return FirefightEnv(merge_layouts(layouts), f_max=p["f_max"])
    graphs = [generate("geometric", rng, n_min=p["n_min"], n_max=p["n_max"], threshold=p["threshold"])
              for _ in range(batch)]
    radio = RadioEnv(disjoint_union(graphs),
                     RadioParams(mode=p["mode"], p_m=p["p_m"], channel_scale=p["channel_scale"]))
    return radio if kind == "radio" else EdgeRadioEnv(radio)


def _plain(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (tuple, list)):
        return [_plain(v) for v in x]
    return x


def write_trace(path, transitions):
    """Episode trace as JSON lines: one object per step with actions, rewards and info."""
    with open(path, "w") as fh:
        for t, tr in enumerate(transitions):
            row = {"t": t, "actions": _plain(tr.actions), "rewards": _plain(tr.rewards), "info": _plain(tr.info)}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


__all__ = [
    "ColourEnv", "EdgeRadioEnv", "FirefightEnv", "RadioEnv", "RadioParams", "ENV_DEFAULTS",
    "bgrw_normalise", "bgrw_step", "brute_force_optimum", "colour_reward", "edge_rewards",
    "env_params", "greedy_colour_step", "make_env", "merge_layouts", "write_trace",
]
