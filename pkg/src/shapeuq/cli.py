"""Command-line pipeline orchestration.

Subcommands: synth | train | fit | sample | reconstruct | calibrate |
certainty | partial.  Every command reads a JSON config (flags override
config fields, which override defaults), validates it against the command's
schema (unknown keys rejected), writes its artifacts at deterministic paths
under --out-dir, and echoes the resolved config plus input content hashes
into run.json so the run can be re-executed bit-identically.

Exit codes: 0 success, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import os
import sys
import zlib

import numpy as np

from . import __version__, atlas, diagnostics, geometry, network as nets, posterior, synthetic
from .network import NumericalError

RUN_FILE = "run.json"


class ConfigError(ValueError):
    pass


def subseed(seed, name):
    """Derive a named integer sub-stream seed from the root seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


def _git_blob_sha1(path):
    data = open(path, "rb").read()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


REQUIRED = object()

SCHEMAS = {
    "synth": {
        "seed": 0,
        "n_shapes": 40,
        "n_heldout": 4,
        "points_per_shape": 1000,
        "surface_noise": [0.025, 0.0025],
        "axes_lo": None,
        "axes_hi": None,
        "center_lo": None,
        "center_hi": None,
        "cloud_points": 200,
        "cloud_zetas": [0.0],
        "cloud_surfaces": None,
    },
    "train": {
        "seed": 0,
        "manifest": REQUIRED,
        "latent_dim": 64,
        "depth": 5,
        "width": 256,
        "epochs": 2000,
        "learning_rate": 0.005,
        "lr_schedule": None,
        "inv_sigma2": 1.8e-8,
        "alpha": 1.9e-6,
        "batch_points": 0,
        "latent_init_scale": 0.01,
    },
    "fit": {
        "seed": 0,
        "model": REQUIRED,
        "cloud": REQUIRED,
        "zeta2": 1.0,
        "prior": "zero",
        "iters": 500,
        "lr": 0.05,
        "restarts": 1,
        "surfaces": None,
        "resolution": 128,
        "bounds": [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]],
    },
    "sample": {
        "seed": 0,
        "model": REQUIRED,
        "cloud": REQUIRED,
        "method": "nuts",
        "chains": 20,
        "zeta2": 1.0,
        "prior": "zero",
        "init": "map",
        "map_iters": 500,
        "map_lr": 0.05,
        "step_size": 1.0,
        "leapfrog_steps": 10,
        "n_warmup": 100,
        "n_samples": 500,
        "target_accept": 0.8,
        "max_tree_depth": 10,
        "zeta2_bounds": [posterior.ZETA2_MIN, 10.0],
    },
    "reconstruct": {
        "seed": 0,
        "model": REQUIRED,
        "latent": REQUIRED,
        "estimator": "mmse",
        "surfaces": None,
        "resolution": 128,
        "bounds": [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]],
    },
    "calibrate": {
        "seed": 0,
        "model": REQUIRED,
        "chains": REQUIRED,
        "meshes": REQUIRED,
        "family": None,
        "shape": None,
        "gt_meshes": None,
        "levels": 20,
        "node_subsample": 0,
    },
    "certainty": {
        "seed": 0,
        "model": REQUIRED,
        "chains": REQUIRED,
        "surface": 1,
        "resolution": 64,
        "bounds": [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]],
        "tol": None,
        "threshold": REQUIRED,
    },
    "partial": {
        "seed": 0,
        "model": REQUIRED,
        "family": REQUIRED,
        "shape": REQUIRED,
        "surface": 1,
        "budgets": [40, 80, 120, 160, 200],
        "dense_points": 4000,
        "zeta2": 1.0,
        "prior": "fitted",
        "method": "nuts",
        "chains": 4,
        "n_warmup": 100,
        "n_samples": 200,
        "step_size": 1.0,
        "leapfrog_steps": 10,
        "target_accept": 0.8,
        "max_tree_depth": 10,
        "mesh_resolution": 48,
        "node_subsample": 800,
    },
}

_PATH_KEYS = ("manifest", "model", "cloud", "latent", "family")


def resolve_config(command, config_path, overrides):
    """Merge defaults <- config file <- flag overrides; reject unknown keys."""
    schema = SCHEMAS[command]
    loaded = {}
    if config_path:
        if not os.path.exists(config_path):
            raise ConfigError(f"config file not found: {config_path}")
        with open(config_path) as fh:
            doc = json.load(fh)
        if isinstance(doc, dict) and "command" in doc and "config" in doc:
            if doc["command"] != command:
                raise ConfigError(
                    f"run.json was produced by '{doc['command']}', not '{command}'"
                )
            loaded = dict(doc["config"])
        else:
            loaded = dict(doc)
    for key in loaded:
        if key not in schema:
            raise ConfigError(f"unknown config field '{key}' for command '{command}'")
    resolved = {}
    for key, default in schema.items():
        if key in overrides and overrides[key] is not None:
            resolved[key] = overrides[key]
        elif key in loaded:
            resolved[key] = loaded[key]
        elif default is REQUIRED:
            raise ConfigError(f"missing required config field '{key}' for '{command}'")
        else:
            resolved[key] = default
    return resolved


def _require_file(path, what):
    if not isinstance(path, str) or not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _chain_paths(spec):
    """A chains entry may be a list of files or a glob pattern."""
    if isinstance(spec, str):
        paths = sorted(glob.glob(spec))
    else:
        paths = list(spec)
    if not paths:
        raise ConfigError(f"no chain files matched: {spec}")
    for p in paths:
        _require_file(p, "chain file")
    return paths


def write_run_json(out_dir, command, config):
    inputs = {}
    for key in _PATH_KEYS:
        val = config.get(key)
        if isinstance(val, str) and os.path.exists(val):
            inputs[val] = _git_blob_sha1(val)
    for key in ("chains", "meshes", "gt_meshes"):
        val = config.get(key)
        paths = []
        if isinstance(val, str):
            paths = sorted(glob.glob(val))
        elif isinstance(val, list):
            paths = [v for v in val if isinstance(v, str)]
        elif isinstance(val, dict):
            paths = [v for v in val.values() if isinstance(v, str)]
        for p in paths:
            if os.path.exists(p):
                inputs[p] = _git_blob_sha1(p)
    doc = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "versions": {
            "shapeuq": __version__,
            "numpy": np.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
    }
    with open(os.path.join(out_dir, RUN_FILE), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# shared loading helpers


def _load_checkpoint(path):
    net, header, latents = nets.load_model(_require_file(path, "model file"))
    return net, header, latents


def _prior_from_config(config, header, latents, net):
    """Prior (mu, sigma~^2): zero/paper-scale by default, or fitted from codes."""
    mode = config.get("prior", "zero")
    if mode == "fitted":
        if latents is None:
            raise ConfigError("prior='fitted' needs a checkpoint with a latent table")
        mu, s2 = atlas.fit_prior(atlas.LatentTable(latents, list(range(len(latents)))))
        if s2 <= 0:
            raise ConfigError("fitted prior variance is zero; use prior='zero'")
        return mu, s2
    if mode == "zero":
        inv_sigma2 = header.get("meta", {}).get("inv_sigma2", 1.8e-8)
        return np.zeros(net.latent_dim), 1.0 / inv_sigma2
    raise ConfigError(f"unknown prior mode '{mode}'")


def _surfaces(config, net):
    surfaces = config.get("surfaces")
    if surfaces is None:
        return list(range(1, net.surface_count + 1))
    surfaces = [int(s) for s in surfaces]
    for s in surfaces:
        if not 1 <= s <= net.surface_count:
            raise ConfigError(f"surface index {s} outside 1..{net.surface_count}")
    return surfaces


def _pooled_latents(chain_files, latent_dim):
    pools = []
    for path in chain_files:
        samples, _ = posterior.load_chain(path)
        if samples.shape[1] < latent_dim:
            raise ConfigError(f"chain {path} has fewer columns than latent_dim")
        pools.append(samples[:, :latent_dim])
    return np.vstack(pools)


def _field_at_nodes(net, nodes, latents, surface, chunk_rows=200_000):
    """SDF channel at every node for every latent sample: (n_nodes, n_samples)."""
    n_nodes = nodes.shape[0]
    out = np.empty((n_nodes, latents.shape[0]))
    block = max(1, chunk_rows // max(n_nodes, 1))
    for lo in range(0, latents.shape[0], block):
        zs = latents[lo : lo + block]
        stacked = np.concatenate(
            [
                np.tile(nodes, (zs.shape[0], 1)),
                np.repeat(zs, n_nodes, axis=0),
            ],
            axis=1,
        )
        vals, _ = nets._forward_core(net.weights, net.biases, stacked)
        out[:, lo : lo + block] = vals[:, surface - 1].reshape(zs.shape[0], n_nodes).T
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(config, out_dir):
    if config["axes_lo"] is None:
        params = synthetic.default_family_params(seed=subseed(config["seed"], "family"))
    else:
        params = synthetic.EllipsoidFamilyParams(
            center_lo=np.array(config["center_lo"]),
            center_hi=np.array(config["center_hi"]),
            axes_lo=np.array(config["axes_lo"]),
            axes_hi=np.array(config["axes_hi"]),
            seed=subseed(config["seed"], "family"),
        )
    n_total = config["n_shapes"] + config["n_heldout"]
    pairs = synthetic.generate_family(
        params,
        n_total,
        points_per_shape=config["points_per_shape"],
        surface_noise=tuple(config["surface_noise"]),
    )
    shapes = [shape for shape, _ in pairs]
    train = [ts for _, ts in pairs[: config["n_shapes"]]]
    heldout = [ts for _, ts in pairs[config["n_shapes"] :]]
    atlas.save_training_set(os.path.join(out_dir, "train"), train)
    if heldout:
        atlas.save_training_set(os.path.join(out_dir, "heldout"), heldout)
    synthetic.save_family(os.path.join(out_dir, "family.json"), shapes, params)

    # observation clouds for every held-out shape, one per noise level
    clouds = []
    cloud_surfaces = config["cloud_surfaces"] or list(range(1, params.surface_count + 1))
    for t in heldout:
        for zi, zeta in enumerate(config["cloud_zetas"]):
            per_surface = max(1, int(config["cloud_points"]) // len(cloud_surfaces))
            obs = []
            for s in cloud_surfaces:
                obs.extend(
                    synthetic.surface_cloud(
                        shapes[t.id], s, per_surface, float(zeta),
                        seed=subseed(config["seed"], f"cloud_{t.id}_{zi}_{s}"),
                    )
                )
            fname = f"cloud_shape{t.id:04d}_z{zi}.csv"
            geometry.save_point_cloud(os.path.join(out_dir, fname), obs)
            clouds.append({"shape": t.id, "zeta": float(zeta), "file": fname})
    with open(os.path.join(out_dir, "split.json"), "w") as fh:
        json.dump(
            {
                "train": [t.id for t in train],
                "heldout": [t.id for t in heldout],
                "clouds": clouds,
            },
            fh,
            indent=1,
            sort_keys=True,
        )
        fh.write("\n")


def cmd_train(config, out_dir):
    shapes = atlas.load_training_set(_require_file(config["manifest"], "manifest"))
    schedule = config["lr_schedule"]
    cfg = atlas.TrainConfig(
        epochs=config["epochs"],
        learning_rate=config["learning_rate"],
        lr_schedule=None if schedule is None else [tuple(e) for e in schedule],
        inv_sigma2=config["inv_sigma2"],
        alpha=config["alpha"],
        batch_points=config["batch_points"],
        seed=subseed(config["seed"], "train"),
        latent_dim=config["latent_dim"],
        depth=config["depth"],
        width=config["width"],
        latent_init_scale=config["latent_init_scale"],
    )
    net, table, history = atlas.train_atlas(shapes, cfg)
    mu, s2 = atlas.fit_prior(table) if len(shapes) >= 2 else (np.zeros(net.latent_dim), 0.0)
    nets.save_model(
        os.path.join(out_dir, "checkpoint.model"),
        net,
        seed=config["seed"],
        latents=table.codes,
        meta={
            "inv_sigma2": config["inv_sigma2"],
            "alpha": config["alpha"],
            "shape_ids": table.ids,
            "fitted_mu": mu.tolist(),
            "fitted_sigma_tilde2": s2,
        },
    )
    with open(os.path.join(out_dir, "loss_history.csv"), "w") as fh:
        fh.write("epoch,loss\n")
        for e, v in enumerate(history):
            fh.write(f"{e},{v:.17g}\n")


def _spec_from_config(config, net, header, latents, zeta2):
    cloud = geometry.load_point_cloud(_require_file(config["cloud"], "point cloud"))
    mu, sigma2 = _prior_from_config(config, header, latents, net)
    bounds = tuple(config.get("zeta2_bounds", (posterior.ZETA2_MIN, 10.0)))
    return posterior.PosteriorSpec(
        net=net, cloud=cloud, zeta2=zeta2, mu=mu, sigma_tilde2=sigma2, zeta2_prior_bounds=bounds
    )


def _extract_meshes(net, z, surfaces, resolution, bounds, out_dir, prefix):
    paths = []
    for s in surfaces:
        mesh = geometry.extract_zero_level(net, z, s, resolution=resolution, bounds=tuple(map(tuple, bounds)))
        path = os.path.join(out_dir, f"{prefix}_s{s}.obj")
        geometry.save_obj(path, mesh)
        paths.append(path)
    return paths


def cmd_fit(config, out_dir):
    net, header, latents = _load_checkpoint(config["model"])
    spec = _spec_from_config(config, net, header, latents, float(config["zeta2"]))
    rng = np.random.default_rng(subseed(config["seed"], "init"))
    restarts = max(1, int(config["restarts"]))
    results = []
    for r in range(restarts):
        if r == 0:
            init = np.zeros(net.latent_dim)
        else:
            init = spec.mu + np.sqrt(spec.sigma_tilde2) * rng.standard_normal(net.latent_dim)
        z = posterior.map_estimate(spec, init, iters=config["iters"], lr=config["lr"])
        val, _, _ = posterior.neg_log_posterior(spec, z)
        results.append({"restart": r, "value": val, "latent": z.tolist()})
    best = min(results, key=lambda r: r["value"])
    with open(os.path.join(out_dir, "map_latent.json"), "w") as fh:
        json.dump({"best": best, "restarts": results}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _extract_meshes(
        net,
        np.array(best["latent"]),
        _surfaces(config, net),
        config["resolution"],
        config["bounds"],
        out_dir,
        "map_mesh",
    )


def cmd_sample(config, out_dir):
    net, header, latents = _load_checkpoint(config["model"])
    method = config["method"]
    if method not in ("hmc", "nuts", "laplace"):
        raise ConfigError("method must be one of hmc, nuts, laplace")
    inferred = config["zeta2"] == "inferred"
    zeta2 = "inferred" if inferred else float(config["zeta2"])
    if config["n_samples"] < 1:
        raise ConfigError("n_samples must be >= 1")
    spec = _spec_from_config(config, net, header, latents, zeta2)
    n_chains = int(config["chains"])
    rng = np.random.default_rng(subseed(config["seed"], "init"))

    def _prior_draw():
        return spec.mu + np.sqrt(spec.sigma_tilde2) * rng.standard_normal(net.latent_dim)

    stats = {"method": method, "chains": []}
    chain_files = []

    if method == "laplace":
        if inferred:
            raise ConfigError("laplace sampling requires a fixed zeta2")
        modes = []
        for r in range(n_chains):
            init = np.zeros(net.latent_dim) if r == 0 else _prior_draw()
            z_map = posterior.map_estimate(
                spec, init, iters=config["map_iters"], lr=config["map_lr"]
            )
            lap = posterior.laplace_approx(spec, z_map)
            draws = lap.draw(config["n_samples"], seed=subseed(config["seed"], f"laplace_{r}"))
            chain = posterior.Chain(
                samples=draws,
                accept_stats=np.ones(config["n_samples"]),
                energies=np.zeros(config["n_samples"]),
                latent_dim=net.latent_dim,
            )
            path = os.path.join(out_dir, f"chain_{r:02d}.csv")
            posterior.save_chain(path, chain)
            chain_files.append(path)
            modes.append({"mean": z_map.tolist()})
            stats["chains"].append(
                {
                    "acceptance_rate": 1.0,
                    "divergences": 0,
                    "depth_saturations": 0,
                    "wall_time_s": 0.0,
                    "fun_evals": config["map_iters"] + 2 * net.latent_dim + 1,
                    "ess_mean": float(config["n_samples"]),
                }
            )
        stats["modes"] = modes
    else:
        cfg = posterior.HMCConfig(
            step_size=config["step_size"],
            leapfrog_steps=config["leapfrog_steps"],
            n_warmup=config["n_warmup"],
            n_samples=config["n_samples"],
            target_accept=config["target_accept"],
            max_tree_depth=config["max_tree_depth"],
            seed=subseed(config["seed"], "chain"),
        )
        if config["init"] == "map" and not inferred:
            z0 = posterior.map_estimate(
                spec, np.zeros(net.latent_dim), iters=config["map_iters"], lr=config["map_lr"]
            )
            inits = np.tile(z0, (n_chains, 1))
        elif config["init"] == "prior" or (config["init"] == "map" and inferred):
            inits = np.array([_prior_draw() for _ in range(n_chains)])
        elif config["init"] == "zero":
            inits = np.zeros((n_chains, net.latent_dim))
        else:
            raise ConfigError(f"unknown init mode '{config['init']}'")
        chains = posterior.sample_chains(
            spec,
            cfg,
            method="joint" if inferred else method,
            init=inits,
            n_chains=n_chains,
            threads=config.get("_threads", 1),
        )
        for i, chain in enumerate(chains):
            path = os.path.join(out_dir, f"chain_{i:02d}.csv")
            posterior.save_chain(path, chain)
            chain_files.append(path)
            stats["chains"].append(
                {
                    "acceptance_rate": chain.acceptance_rate,
                    "divergences": len(chain.divergences),
                    "depth_saturations": chain.depth_saturations,
                    "wall_time_s": chain.wall_time_s,
                    "fun_evals": chain.fun_evals,
                    "step_size": chain.step_size,
                    "ess_mean": diagnostics.chain_ess(chain.samples),
                }
            )

    per_chain_ess = [c["ess_mean"] for c in stats["chains"]]
    stats["ess_mean_over_chains"] = float(np.mean(per_chain_ess))
    stats["ess_pooled"] = float(np.sum(per_chain_ess))
    stats["config"] = config
    with open(os.path.join(out_dir, "sampler_stats.json"), "w") as fh:
        json.dump(stats, fh, indent=1, sort_keys=True)
        fh.write("\n")


def cmd_reconstruct(config, out_dir):
    net, header, latents = _load_checkpoint(config["model"])
    latent_src = _require_file(config["latent"], "latent source")
    if latent_src.endswith(".json"):
        with open(latent_src) as fh:
            doc = json.load(fh)
        z = np.array(doc["best"]["latent"] if "best" in doc else doc["latent"], dtype=float)
    else:
        samples, _ = posterior.load_chain(latent_src)
        if config["estimator"] != "mmse":
            raise ConfigError("estimator must be 'mmse' for chain inputs")
        z = posterior.mmse(samples)[: net.latent_dim]
    _extract_meshes(
        net, z, _surfaces(config, net), config["resolution"], config["bounds"], out_dir, "recon_mesh"
    )


def _fstar_for_nodes(config, nodes, surface):
    if config.get("family") is not None:
        shapes = synthetic.load_family(_require_file(config["family"], "family file"))
        sid = config.get("shape")
        if sid is None or not 0 <= int(sid) < len(shapes):
            raise ConfigError("calibrate/partial needs a valid 'shape' id for the family oracle")
        return synthetic.analytic_sdf_batch(shapes[int(sid)], nodes, surface)
    gt = config.get("gt_meshes")
    if gt is None:
        raise ConfigError("need either 'family'+'shape' or 'gt_meshes' for ground truth")
    path = gt.get(str(surface)) if isinstance(gt, dict) else None
    mesh = geometry.load_obj(_require_file(path, f"ground-truth mesh for surface {surface}"))
    return geometry.mesh_sdf_batch(nodes, mesh)


def cmd_calibrate(config, out_dir):
    net, header, latents = _load_checkpoint(config["model"])
    chain_files = _chain_paths(config["chains"])
    pooled = _pooled_latents(chain_files, net.latent_dim)
    meshes = config["meshes"]
    if isinstance(meshes, dict):
        mesh_entries = [(int(s), p) for s, p in sorted(meshes.items())]
    else:
        mesh_entries = [(int(e["surface"]), e["file"]) for e in meshes]
    rng = np.random.default_rng(subseed(config["seed"], "nodes"))
    nodes_all = []
    for surface, path in mesh_entries:
        mesh = geometry.load_obj(_require_file(path, "evaluation mesh"))
        if mesh.vertices.shape[0] == 0:
            raise ConfigError(f"evaluation mesh has no vertices: {path}")
        nodes = mesh.vertices
        sub = int(config["node_subsample"])
        if 0 < sub < nodes.shape[0]:
            nodes = nodes[rng.choice(nodes.shape[0], size=sub, replace=False)]
        values = _field_at_nodes(net, nodes, pooled, surface)
        fstar = _fstar_for_nodes(config, nodes, surface)
        nodes_all.extend(
            diagnostics.NodeDistribution(x=nodes[i], values=values[i], f_star=fstar[i])
            for i in range(nodes.shape[0])
        )
    levels = diagnostics.default_levels(int(config["levels"]))
    report = diagnostics.ece(nodes_all, levels)
    diagnostics.save_calibration(
        os.path.join(out_dir, "calibration.csv"),
        report,
        json_path=os.path.join(out_dir, "calibration_summary.json"),
        extra={"n_samples": int(pooled.shape[0]), "chains": len(chain_files)},
    )
    diagnostics.save_node_stats(
        os.path.join(out_dir, "node_stats.csv"), diagnostics.node_stats(nodes_all)
    )


def cmd_certainty(config, out_dir):
    net, header, latents = _load_checkpoint(config["model"])
    pooled = _pooled_latents(_chain_paths(config["chains"]), net.latent_dim)
    surface = int(config["surface"])
    if not 1 <= surface <= net.surface_count:
        raise ConfigError(f"surface index {surface} outside 1..{net.surface_count}")
    counts, mask = geometry.certainty_map(
        net,
        pooled,
        surface,
        resolution=config["resolution"],
        bounds=tuple(map(tuple, config["bounds"])),
        tol=config["tol"],
        threshold=int(config["threshold"]),
    )
    geometry.save_voxel_grid(os.path.join(out_dir, "certainty_counts.voxel"), counts)
    geometry.save_voxel_grid(os.path.join(out_dir, "certainty_mask.voxel"), mask)


def cmd_partial(config, out_dir):
    net, header, latents = _load_checkpoint(config["model"])
    shapes = synthetic.load_family(_require_file(config["family"], "family file"))
    sid = int(config["shape"])
    if not 0 <= sid < len(shapes):
        raise ConfigError(f"shape id {sid} outside the family")
    shape = shapes[sid]
    surface = int(config["surface"])
    mu, sigma2 = _prior_from_config(config, header, latents, net)
    rng = np.random.default_rng(subseed(config["seed"], "cloud"))

    # dense surface point pool, then expanding-y budgets
    dirs = rng.standard_normal((int(config["dense_points"]), 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dense = shape.centers[surface - 1] + shape.axes[surface - 1] * dirs
    y_min, y_max = dense[:, 1].min(), dense[:, 1].max()

    budgets = [int(b) for b in config["budgets"]]
    summary = []
    node_rng = np.random.default_rng(subseed(config["seed"], "nodes"))
    for ell, m_budget in enumerate(budgets, start=1):
        frac = ell / len(budgets)
        cut = y_min + frac * (y_max - y_min)
        pool = dense[dense[:, 1] <= cut]
        if pool.shape[0] < m_budget:
            raise ConfigError(
                f"dense pool too small for budget {m_budget}; raise dense_points"
            )
        pick = rng.choice(pool.shape[0], size=m_budget, replace=False)
        cloud = [geometry.PointObservation(x=p, s=0.0, j=surface) for p in pool[pick]]
        spec = posterior.PosteriorSpec(
            net=net, cloud=cloud, zeta2=float(config["zeta2"]), mu=mu, sigma_tilde2=sigma2
        )
        cfg = posterior.HMCConfig(
            step_size=config["step_size"],
            leapfrog_steps=config["leapfrog_steps"],
            n_warmup=config["n_warmup"],
            n_samples=config["n_samples"],
            target_accept=config["target_accept"],
            max_tree_depth=config["max_tree_depth"],
            seed=subseed(config["seed"], f"chain_m{m_budget}"),
        )
        z0 = posterior.map_estimate(spec, np.zeros(net.latent_dim), iters=300, lr=0.05)
        chains = posterior.sample_chains(
            spec,
            cfg,
            method=config["method"],
            init=z0,
            n_chains=int(config["chains"]),
            threads=config.get("_threads", 1),
        )
        pooled = np.vstack([c.latents for c in chains])
        z_hat = posterior.mmse(pooled)
        mesh = geometry.extract_zero_level(
            net, z_hat, surface, resolution=int(config["mesh_resolution"])
        )
        if mesh.is_empty:
            raise NumericalError(f"empty reconstruction at budget {m_budget}")
        nodes = mesh.vertices
        sub = int(config["node_subsample"])
        if 0 < sub < nodes.shape[0]:
            nodes = nodes[node_rng.choice(nodes.shape[0], size=sub, replace=False)]
        values = _field_at_nodes(net, nodes, pooled, surface)
        fstar = synthetic.analytic_sdf_batch(shape, nodes, surface)
        node_list = [
            diagnostics.NodeDistribution(x=nodes[i], values=values[i], f_star=fstar[i])
            for i in range(nodes.shape[0])
        ]
        stats = diagnostics.node_stats(node_list)
        diagnostics.save_node_stats(os.path.join(out_dir, f"partial_m{m_budget}.csv"), stats)
        summary.append(
            {
                "budget": m_budget,
                "median_std": float(np.median(stats["std"])),
                "median_abs_dist": float(np.median(stats["abs_dist"])),
                "mean_abs_dist": float(np.mean(stats["abs_dist"])),
            }
        )
    with open(os.path.join(out_dir, "partial_summary.json"), "w") as fh:
        json.dump({"budgets": summary}, fh, indent=1, sort_keys=True)
        fh.write("\n")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "fit": cmd_fit,
    "sample": cmd_sample,
    "reconstruct": cmd_reconstruct,
    "calibrate": cmd_calibrate,
    "certainty": cmd_certainty,
    "partial": cmd_partial,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="shapeuq",
        description="Uncertainty-aware implicit shape reconstruction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config (or a run.json)")
        p.add_argument("--seed", type=int, default=None, help="root seed override")
        p.add_argument("--out-dir", default=".", help="artifact directory")
        p.add_argument("--threads", type=int, default=1, help="chain worker limit")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args.command, args.config, {"seed": args.seed})
    except (ConfigError, json.JSONDecodeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    os.makedirs(args.out_dir, exist_ok=True)
    try:
        config["_threads"] = args.threads
        run_config = {k: v for k, v in config.items() if not k.startswith("_")}
        COMMANDS[args.command](config, args.out_dir)
        write_run_json(args.out_dir, args.command, run_config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
