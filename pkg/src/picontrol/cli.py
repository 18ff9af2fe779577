"""Command-line surface: reproducible experiment pipelines and artifacts.

Each command reads one JSON config (deep-merged over per-profile
defaults), derives every random draw from a single seed, takes an
exclusive lock on its output directory, and writes byte-stable
artifacts: CSV for datasets, trajectories and histories, JSON for
manifests, checkpoints and reports.  Wall-clock times are printed to
stdout but never written into artifacts, so reruns with the same config
and seed reproduce every output file exactly.

Verbs: gen-data, train, eval, simulate, gradcheck, export-costmap.
Exit codes: 0 success, 1 validation error, 2 numeric failure,
3 memory-budget refusal.
"""

import argparse
import contextlib
import copy
import csv
import json
import math
import os
import sys
import time

import numpy as np

from .controller import ModelSet, PathIntegralPlanner, pi_net_backward, pi_net_forward
from .core import (ConsistencyError, MemoryBudgetError, NumericError,
                   ParameterError, ParamVector, PIHyperParams, RngStream,
                   ShapeError, unpack_params)
from .envs import (benchmark_runs, pendulum_teacher_models,
                   sample_linear_teacher, write_trajectory_csv)
from .experts import ILQRPlanner, ILQRSettings, LQRPlanner, LQRProblem, sequence_cost
from .models import (MODEL_TYPES, ControlCostWeight, MLPCost, MLPDynamics,
                     PendulumTeacherCost, model_type_name)
from .training import (DEFAULT_MEMORY_BUDGET, MPCSample, OpenLoopSample,
                       OptimizerState, PENDULUM_GOALS, build_linear_dataset,
                       build_pendulum_dataset, check_memory_budget,
                       evaluate_losses, expert_rollouts, init_linear_models,
                       init_pendulum_models, loss_ctrl, loss_dyn,
                       pretrain_dynamics, train_pinet, write_history_csv)

CHECKPOINT_VERSION = 1
MANIFEST_VERSION = 1
SEGMENTS = ("dynamics", "cost", "control_weight")

# Published swing-up benchmark rows, printed next to our numbers for
# comparison: (label, train MSE, test MSE, success rate, mean cost, params).
REFERENCE_RESULTS = (
    ("expert", None, None, 1.0, 404.63, None),
    ("trained sampling controller", 2.22e-3, 1.65e-3, 1.0, 429.69, 242),
    ("frozen-dynamics variant", 1.91e-3, 5.73e-3, 1.0, 982.22, 49),
)

# Sub-stream ids under the command seed; commands never share streams.
STREAM_DATA, STREAM_TRAIN, STREAM_EVAL, STREAM_SIM, STREAM_GRAD = range(5)


# ------------------------------------------------------------- configuration


def default_config(environment, profile):
    """The fully defaulted config tree for one (environment, profile)."""
    common = {
        "experiment_id": f"{environment}-{profile}",
        "environment": environment,
        "seed": 0,
        "memory_budget": DEFAULT_MEMORY_BUDGET,
        "paths": {"dataset": None, "checkpoint": None},
        "gradcheck": {
            "instances": 20, "tolerance": 1e-4, "floor": 1e-7,
            "corrupt": None, "freeze": [], "hidden": 12,
            # Gentle settings: a smooth trajectory softmax at tiny scale,
            # so central differences converge.
            "hyper": {"lambda": 0.5, "nu": 1500.0, "sigma": 0.3,
                      "num_samples": 4, "horizon": 3, "recurrences": 2,
                      "warm_recurrences": None},
        },
        "costmap": {
            "source": "teacher",
            "theta_cells": 101, "theta_dot_cells": 101,
            "theta_range": [-math.pi, math.pi],
            "theta_dot_range": [-2.0 * math.pi, 2.0 * math.pi],
        },
    }
    if environment == "linear":
        paper = profile == "paper"
        horizon = 200 if paper else 50
        common.update({
            "hyper": {"lambda": 0.01, "nu": 1500.0, "sigma": 0.2,
                      "num_samples": 100 if paper else 50,
                      "horizon": horizon,
                      "recurrences": 200 if paper else 50,
                      "warm_recurrences": None},
            "models": {"dt": 0.01},
            "dataset": {"n_train": 950 if paper else 200,
                        "n_test": 50 if paper else 20,
                        "demo_horizon": horizon},
            "training": {"regime": "open_loop", "epochs": 100,
                         "batch_size": 8,
                         "loss_weights": {"ctrl": 1.0, "cost": 0.0},
                         "freeze": [], "lr": 1e-3, "pretrain": None,
                         "resume": False,
                         "target_test_ctrl_ratio": 0.1},
            "evaluation": None,
            "simulate": {"runs": 1, "controller": "expert",
                         "horizon": horizon},
        })
    else:
        paper = profile == "paper"
        common.update({
            "hyper": {"lambda": 0.01, "nu": 1500.0, "sigma": 0.005,
                      "num_samples": 100 if paper else 30,
                      "horizon": 30,
                      "recurrences": 200 if paper else 20,
                      "warm_recurrences": 20 if paper else None},
            "models": {"hidden": 12, "dt": 0.1},
            "dataset": {"n_traj_train": 50 if paper else 4,
                        "n_traj_test": 10 if paper else 1,
                        "duration": 40.0 if paper else 8.0,
                        "expert_horizon": 210},
            "training": {"regime": "mpc",
                         "epochs": 100 if paper else 30,
                         "batch_size": 8,
                         "loss_weights": {"ctrl": 1.0, "cost": 1e-3},
                         "freeze": ["dynamics"], "lr": 1e-3,
                         "pretrain": {"epochs": 500 if paper else 200,
                                      "batch_size": 64, "lr": 1e-3},
                         "resume": False,
                         "target_test_ctrl_ratio": None},
            "evaluation": {"runs": 10 if paper else 3,
                           "duration": 60.0 if paper else 10.0},
            "simulate": {"runs": 1, "controller": "expert",
                         "duration": 10.0},
        })
    return common


def _deep_merge(base, override, prefix=""):
    for key, value in override.items():
        if key not in base:
            raise ParameterError(f"unknown config key {prefix + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _deep_merge(base[key], value, prefix + key + ".")
        else:
            base[key] = value


def _require(condition, message):
    if not condition:
        raise ParameterError(message)


def _validate(cfg):
    env = cfg["environment"]
    _require(env in ("linear", "pendulum"),
             f"environment must be linear or pendulum, got {env!r}")
    hyper_from_cfg(cfg["hyper"])
    tr = cfg["training"]
    _require(tr["regime"] in ("open_loop", "mpc"),
             f"training.regime must be open_loop or mpc, got {tr['regime']!r}")
    _require(set(tr["loss_weights"]) <= {"ctrl", "cost"},
             "training.loss_weights keys must be ctrl/cost")
    _require(set(tr["freeze"]) <= set(SEGMENTS),
             f"training.freeze entries must be among {SEGMENTS}")
    _require(int(tr["epochs"]) >= 0 and int(tr["batch_size"]) >= 1,
             "training.epochs must be >= 0 and batch_size >= 1")
    if tr["pretrain"] is not None:
        _require(set(tr["pretrain"]) <= {"epochs", "batch_size", "lr"},
                 "training.pretrain keys must be epochs/batch_size/lr")
    _require(int(cfg["memory_budget"]) > 0, "memory_budget must be positive")
    for key, value in cfg["dataset"].items():
        _require(float(value) >= 0, f"dataset.{key} must be non-negative")
    gc = cfg["gradcheck"]
    _require(int(gc["instances"]) >= 1, "gradcheck.instances must be >= 1")
    _require(gc["tolerance"] > 0 and gc["floor"] > 0,
             "gradcheck tolerance and floor must be positive")
    _require(gc["corrupt"] is None or gc["corrupt"] in SEGMENTS,
             f"gradcheck.corrupt must be null or one of {SEGMENTS}")
    _require(set(gc["freeze"]) <= set(SEGMENTS),
             f"gradcheck.freeze entries must be among {SEGMENTS}")
    hyper_from_cfg(gc["hyper"])
    cm = cfg["costmap"]
    _require(cm["source"] in ("teacher", "checkpoint"),
             "costmap.source must be teacher or checkpoint")
    _require(int(cm["theta_cells"]) >= 2 and int(cm["theta_dot_cells"]) >= 2,
             "costmap grid needs at least 2 cells per axis")
    sim = cfg["simulate"]
    _require(int(sim["runs"]) >= 1, "simulate.runs must be >= 1")
    _require(sim["controller"] in ("expert", "pi_teacher", "checkpoint"),
             "simulate.controller must be expert, pi_teacher or checkpoint")
    if cfg["evaluation"] is not None:
        _require(int(cfg["evaluation"]["runs"]) >= 1
                 and float(cfg["evaluation"]["duration"]) > 0,
                 "evaluation.runs must be >= 1 and duration positive")


def load_config(path, profile, seed):
    """Merge a config file over the profile defaults and validate it."""
    overrides = {}
    if path is not None:
        with open(path) as fh:
            overrides = json.load(fh)
        _require(isinstance(overrides, dict),
                 f"config file {path} must hold a JSON object")
    environment = overrides.get("environment", "pendulum")
    _require(environment in ("linear", "pendulum"),
             f"environment must be linear or pendulum, got {environment!r}")
    cfg = default_config(environment, profile)
    _deep_merge(cfg, overrides)
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg["seed"] = int(cfg["seed"])
    _validate(cfg)
    cfg["profile"] = profile
    return cfg


def hyper_from_cfg(tree):
    """(PIHyperParams, warm iteration count or None) from a config block."""
    hp = PIHyperParams(lambda_=float(tree["lambda"]), nu=float(tree["nu"]),
                       sigma=float(tree["sigma"]),
                       num_samples=int(tree["num_samples"]),
                       horizon=int(tree["horizon"]),
                       recurrences=int(tree["recurrences"]))
    warm = tree.get("warm_recurrences")
    return hp, (None if warm is None else int(warm))


# ------------------------------------------------------------------ artifacts


def _plain(obj):
    """Recursively convert numpy scalars/arrays for JSON serialization."""
    if isinstance(obj, dict):
        return {key: _plain(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(value) for value in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(value) for value in obj.tolist()]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_json(path, tree):
    # sort_keys + allow_nan=False keep the bytes stable and the values finite
    with open(path, "w") as fh:
        json.dump(_plain(tree), fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


@contextlib.contextmanager
def experiment_lock(out_dir):
    """Exclusive lock on an experiment directory via an O_EXCL lock file."""
    path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ParameterError(
            f"{path} exists: another command is using this directory "
            "(delete the file if it is stale)")
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        os.unlink(path)


def refuse_existing(out_dir, names, force):
    existing = [name for name in names
                if os.path.exists(os.path.join(out_dir, name))]
    if existing and not force:
        raise ParameterError(
            "refusing to overwrite " + ", ".join(sorted(existing))
            + " (pass --force)")


def write_resolved_config(out_dir, command, cfg):
    tree = copy.deepcopy(cfg)
    tree["command"] = command
    write_json(os.path.join(out_dir, f"resolved_config.{command}.json"), tree)


# ------------------------------------------------- model and checkpoint (de)io


def models_to_json(models: ModelSet):
    return {name: {"type": model_type_name(model),
                   "config": _plain(model.config()),
                   "params": model.get_params().tolist()}
            for name, model in models.items()}


def models_from_json(tree):
    built = {}
    for name in SEGMENTS:
        _require(name in tree, f"checkpoint models lack the {name!r} entry")
        entry = tree[name]
        cls = MODEL_TYPES.get(entry["type"])
        _require(cls is not None, f"unknown model type {entry['type']!r}")
        model = cls.from_config(entry["config"])
        model.set_params(np.asarray(entry["params"], dtype=float))
        built[name] = model
    return ModelSet(built["dynamics"], built["cost"], built["control_weight"])


def optimizer_to_json(state: OptimizerState):
    best = state.best_loss
    return {"v": state.v.tolist(), "lr": float(state.lr),
            "epochs_since_improvement": int(state.epochs_since_improvement),
            "best_loss": None if math.isinf(best) else float(best)}


def optimizer_from_json(tree):
    best = tree["best_loss"]
    return OptimizerState(v=np.asarray(tree["v"], dtype=float),
                          lr=float(tree["lr"]),
                          epochs_since_improvement=int(
                              tree["epochs_since_improvement"]),
                          best_loss=math.inf if best is None else float(best))


def write_checkpoint(path, models, hyper_tree, environment, epoch, opt_state):
    write_json(path, {
        "version": CHECKPOINT_VERSION,
        "environment": environment,
        "epoch": int(epoch),
        "hyper": copy.deepcopy(hyper_tree),
        "models": models_to_json(models),
        "optimizer": optimizer_to_json(opt_state),
    })


def load_checkpoint(path):
    tree = read_json(path)
    _require(isinstance(tree, dict) and "version" in tree,
             f"{path} is not a checkpoint file")
    if tree["version"] != CHECKPOINT_VERSION:
        raise ParameterError(
            f"checkpoint version {tree['version']} is not supported "
            f"(this build reads version {CHECKPOINT_VERSION})")
    return tree


# ----------------------------------------------------------------- dataset io


def write_linear_dataset(path, samples):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if not samples:
            return
        n = samples[0].x0.size
        horizon, m = samples[0].useq.shape
        writer.writerow([f"x0_{j}" for j in range(n)]
                        + [f"u_{t}_{j}" for t in range(horizon)
                           for j in range(m)])
        for sample in samples:
            writer.writerow([repr(float(v)) for v in sample.x0]
                            + [repr(float(v)) for v in sample.useq.ravel()])


def read_linear_dataset(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []
    header = rows[0]
    n = sum(1 for name in header if name.startswith("x0_"))
    m = sum(1 for name in header if name.startswith("u_0_"))
    samples = []
    for row in rows[1:]:
        values = np.array([float(v) for v in row])
        samples.append(OpenLoopSample(values[:n], values[n:].reshape(-1, m)))
    return samples


def write_pendulum_dataset(path, samples):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if not samples:
            return
        writer.writerow(["traj", "step", "theta", "theta_dot", "torque",
                         "theta_next", "theta_dot_next"])
        traj = step = 0
        previous = None
        for sample in samples:
            # a new trajectory starts wherever the chain of states breaks
            if previous is not None and not np.array_equal(sample.x, previous):
                traj += 1
                step = 0
            writer.writerow([traj, step]
                            + [repr(float(v)) for v in sample.x]
                            + [repr(float(sample.u[0]))]
                            + [repr(float(v)) for v in sample.x_next])
            previous = sample.x_next
            step += 1


def read_pendulum_dataset(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []
    samples = []
    for row in rows[1:]:
        values = [float(v) for v in row[2:]]
        samples.append(MPCSample(np.array(values[0:2]),
                                 np.array(values[2:3]),
                                 np.array(values[3:5])))
    return samples


DATASET_WRITERS = {"linear": write_linear_dataset,
                   "pendulum": write_pendulum_dataset}
DATASET_READERS = {"linear": read_linear_dataset,
                   "pendulum": read_pendulum_dataset}


def load_dataset(cfg, out_dir):
    """(manifest, train samples, test samples) for the configured dataset."""
    ds_dir = cfg["paths"]["dataset"] or out_dir
    manifest = read_json(os.path.join(ds_dir, "manifest.json"))
    _require(manifest.get("version") == MANIFEST_VERSION,
             f"dataset manifest in {ds_dir} has unsupported version "
             f"{manifest.get('version')}")
    env = cfg["environment"]
    _require(manifest["environment"] == env,
             f"dataset environment {manifest['environment']!r} does not "
             f"match config environment {env!r}")
    reader = DATASET_READERS[env]
    train = reader(os.path.join(ds_dir, "train_data.csv"))
    test = reader(os.path.join(ds_dir, "test_data.csv"))
    return manifest, train, test


# --------------------------------------------------------------- gen-data


def _run_metrics(results, requested):
    """Success rate over requested runs; mean cost over completed ones."""
    successes = sum(1 for r in results if r.success)
    costs = [r.cost for r in results if r.cost is not None]
    return {"success_rate": successes / requested if requested else None,
            "mean_cost": float(np.mean(costs)) if costs else None}


def cmd_gen_data(cfg, out_dir, force):
    env = cfg["environment"]
    artifacts = ["train_data.csv", "test_data.csv", "manifest.json",
                 "resolved_config.gen-data.json"]
    refuse_existing(out_dir, artifacts, force)
    root = RngStream(cfg["seed"]).child(STREAM_DATA)
    ds = cfg["dataset"]
    started = time.time()

    if env == "linear":
        teacher = sample_linear_teacher(root.child(1), cfg["models"]["dt"])
        train, test = build_linear_dataset(teacher, root.child(0),
                                           int(ds["n_train"]),
                                           int(ds["n_test"]),
                                           int(ds["demo_horizon"]))
        dyn, cost, weight = teacher.models()
        weight_matrix = weight.matrix()

        def mean_demo_cost(samples):
            if not samples:
                return None
            totals = [sequence_cost(dyn, cost, weight_matrix,
                                    s.x0, s.useq)[0] for s in samples]
            return float(np.mean(totals))

        manifest = {
            "version": MANIFEST_VERSION,
            "environment": env,
            "seed": cfg["seed"],
            "dataset": ds,
            "sizes": {"n_train": len(train), "n_test": len(test)},
            "teacher": {"models": models_to_json(ModelSet(dyn, cost, weight)),
                        "dt": teacher.dt},
            "expert_metrics": {"mean_demo_cost_train": mean_demo_cost(train),
                               "mean_demo_cost_test": mean_demo_cost(test)},
        }
        summary = (f"wrote {len(train)} train / {len(test)} test "
                   "open-loop samples")
    else:
        train, test, excluded = build_pendulum_dataset(
            root.child(0), int(ds["n_traj_train"]), int(ds["n_traj_test"]),
            float(ds["duration"]), int(ds["expert_horizon"]))
        protocol = cfg["evaluation"]
        runs, _ = expert_rollouts(root.child(2), int(protocol["runs"]),
                                  float(protocol["duration"]),
                                  int(ds["expert_horizon"]))
        metrics = _run_metrics(runs, int(protocol["runs"]))
        dyn, cost, weight = pendulum_teacher_models()
        manifest = {
            "version": MANIFEST_VERSION,
            "environment": env,
            "seed": cfg["seed"],
            "dataset": ds,
            "evaluation": protocol,
            "sizes": {"n_traj_train": int(ds["n_traj_train"]),
                      "n_traj_test": int(ds["n_traj_test"]),
                      "transitions_train": len(train),
                      "transitions_test": len(test),
                      "excluded": excluded},
            "teacher": {"models": models_to_json(ModelSet(dyn, cost, weight)),
                        "expert_horizon": int(ds["expert_horizon"])},
            "expert_metrics": metrics,
        }
        summary = (f"wrote {len(train)} train / {len(test)} test transitions "
                   f"({excluded} divergent runs dropped)")
        rate = metrics["success_rate"]
        print(f"expert evaluation: success rate {rate:.2f}, "
              f"mean cost {metrics['mean_cost']:.6g}")

    writer = DATASET_WRITERS[env]
    writer(os.path.join(out_dir, "train_data.csv"), train)
    writer(os.path.join(out_dir, "test_data.csv"), test)
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    write_resolved_config(out_dir, "gen-data", cfg)
    print(summary)
    print(f"elapsed {time.time() - started:.1f} s")


# ------------------------------------------------------------------- train


def _segment_sizes(models):
    return {name: int(length) for name, _, length in models.pack().layout}


def _print_reference_results():
    print("reference swing-up results:")
    for label, mse_train, mse_test, rate, mean_cost, params in REFERENCE_RESULTS:
        mse = ("MSE n/a" if mse_train is None
               else f"MSE {mse_train:.3g}/{mse_test:.3g}")
        extra = "" if params is None else f", {params} params"
        print(f"  {label}: {mse}, success rate {rate:.0%}, "
              f"cost {mean_cost}{extra}")


def _closed_loop_eval(models_or_expert, manifest, cfg):
    """Closed-loop swing-up metrics under the dataset's recorded protocol."""
    protocol = manifest["evaluation"]
    stream = RngStream(manifest["seed"]).child(STREAM_DATA).child(2)
    runs = int(protocol["runs"])
    duration = float(protocol["duration"])
    if models_or_expert == "expert":
        results, excluded = expert_rollouts(
            stream, runs, duration,
            int(manifest["teacher"]["expert_horizon"]))
    else:
        models, hp, warm = models_or_expert
        planner = PathIntegralPlanner(models, hp, warm_recurrences=warm)
        dyn, cost, weight = pendulum_teacher_models()
        results, excluded = benchmark_runs(planner, stream, runs, duration,
                                           cost_model=cost,
                                           weight_matrix=weight.matrix())
    metrics = _run_metrics(results, runs)
    metrics.update({"runs": runs, "duration": duration, "excluded": excluded})
    return metrics


def cmd_train(cfg, out_dir, force):
    env = cfg["environment"]
    tr = cfg["training"]
    pretraining = env == "pendulum" and tr["pretrain"] and not tr["resume"]
    artifacts = ["checkpoint_best.json", "checkpoint_last.json",
                 "history.csv", "train_report.json",
                 "resolved_config.train.json"]
    if pretraining:
        artifacts.append("pretrain_history.csv")
    refuse_existing(out_dir, artifacts, force)
    manifest, train_set, test_set = load_dataset(cfg, out_dir)
    hp, warm = hyper_from_cfg(cfg["hyper"])
    if env == "linear" and train_set:
        demo_len = train_set[0].useq.shape[0]
        _require(demo_len == hp.horizon,
                 f"dataset demos plan {demo_len} steps but the controller "
                 f"horizon is {hp.horizon}")
    # refuse oversized configs before spending time on evals or pretraining
    probe = (train_set or test_set)
    if probe:
        sample = probe[0]
        if env == "linear":
            state_dim, control_dim = sample.x0.size, sample.useq.shape[1]
        else:
            state_dim, control_dim = sample.x.size, sample.u.size
        check_memory_budget(hp, state_dim, control_dim,
                            int(tr["batch_size"]),
                            budget=int(cfg["memory_budget"]))
    root = RngStream(cfg["seed"]).child(STREAM_TRAIN)
    started = time.time()

    if tr["resume"]:
        ck_path = cfg["paths"]["checkpoint"] or os.path.join(
            out_dir, "checkpoint_last.json")
        ck = load_checkpoint(ck_path)
        _require(ck["environment"] == env,
                 f"checkpoint environment {ck['environment']!r} does not "
                 f"match config environment {env!r}")
        models = models_from_json(ck["models"])
        opt = optimizer_from_json(ck["optimizer"])
        start_epoch = int(ck["epoch"])
    else:
        if env == "linear":
            models = init_linear_models(root.child(0), cfg["models"]["dt"])
        else:
            models = init_pendulum_models(root.child(0),
                                          int(cfg["models"]["hidden"]),
                                          float(cfg["models"]["dt"]))
        opt = OptimizerState(v=np.zeros(models.pack().size),
                             lr=float(tr["lr"]))
        start_epoch = 0

    sizes = _segment_sizes(models)
    total_params = sum(sizes.values())
    pieces = ", ".join(f"{name} {size}" for name, size in sizes.items())
    print(f"trainable parameters: {total_params} ({pieces})")
    if env == "pendulum":
        _print_reference_results()

    pretrain_rows = None
    if pretraining:
        pt = tr["pretrain"]
        pretrain_rows = pretrain_dynamics(
            models.dynamics, train_set, test_set, int(pt["epochs"]),
            int(pt["batch_size"]), float(pt["lr"]), rng=root.child(1),
            wrap=True)
        write_history_csv(os.path.join(out_dir, "pretrain_history.csv"),
                          pretrain_rows)
        print(f"pretrained dynamics: train {pretrain_rows[-1]['train_dyn']:.3e}"
              + ("" if pretrain_rows[-1]["test_dyn"] is None else
                 f", held-out {pretrain_rows[-1]['test_dyn']:.3e}"))

    regime = "open_loop" if env == "linear" else "mpc"
    goals = PENDULUM_GOALS if env == "pendulum" else None
    weights = tr["loss_weights"]
    train_rng = root.child(2)
    target = None
    if tr["target_test_ctrl_ratio"] is not None and test_set:
        # same stream train_pinet uses for its own test snapshots
        initial = evaluate_losses(models, hp, test_set, regime,
                                  train_rng.child(0).child(2), weights,
                                  goals)["ctrl"]
        target = float(tr["target_test_ctrl_ratio"]) * initial
        print(f"early-stop target: test control loss <= {target:.6e}")

    best = {"epoch": None}

    def save_best(epoch, current_models, row):
        best["epoch"] = epoch
        best["row"] = dict(row)
        write_checkpoint(os.path.join(out_dir, "checkpoint_best.json"),
                         current_models, cfg["hyper"], env, epoch, opt)

    history = train_pinet(models, hp, train_set, test_set, regime,
                          int(tr["epochs"]), int(tr["batch_size"]),
                          freeze=tuple(tr["freeze"]), loss_weights=weights,
                          goals=goals, rng=train_rng, lr=float(tr["lr"]),
                          memory_budget=int(cfg["memory_budget"]),
                          target_test_ctrl=target, on_best=save_best,
                          opt_state=opt, start_epoch=start_epoch)

    write_history_csv(os.path.join(out_dir, "history.csv"), history)
    final_epoch = int(history[-1]["epoch"])
    write_checkpoint(os.path.join(out_dir, "checkpoint_last.json"),
                     models, cfg["hyper"], env, final_epoch, opt)

    report = {
        "version": 1,
        "environment": env,
        "parameter_count": total_params,
        "parameter_segments": sizes,
        "epochs_run": final_epoch - start_epoch,
        "final_epoch": final_epoch,
        "best_epoch": best["epoch"],
        "initial": dict(history[0]),
        "final": dict(history[-1]),
        "best": best.get("row"),
        "pretrain_final": None if pretrain_rows is None
                          else dict(pretrain_rows[-1]),
        "closed_loop": None,
    }
    if env == "pendulum" and manifest.get("evaluation"):
        report["closed_loop"] = _closed_loop_eval((models, hp, warm),
                                                  manifest, cfg)
        cl = report["closed_loop"]
        print(f"closed loop: success rate {cl['success_rate']:.2f}, "
              f"mean cost {_fmt(cl['mean_cost'])}")
    write_json(os.path.join(out_dir, "train_report.json"), report)
    write_resolved_config(out_dir, "train", cfg)
    row = history[-1]
    print(f"final epoch {final_epoch}: train total {_fmt(row['train_total'])},"
          f" test total {_fmt(row['test_total'])}")
    print(f"elapsed {time.time() - started:.1f} s")


def _fmt(value):
    return "n/a" if value is None else f"{value:.6g}"


# -------------------------------------------------------------------- eval


def cmd_eval(cfg, out_dir, force):
    env = cfg["environment"]
    refuse_existing(out_dir, ["eval_report.json", "resolved_config.eval.json"],
                    force)
    manifest, train_set, test_set = load_dataset(cfg, out_dir)
    started = time.time()
    ck_ref = cfg["paths"]["checkpoint"] or os.path.join(out_dir,
                                                        "checkpoint_best.json")
    expert = ck_ref == "expert"
    report = {"version": 1, "environment": env,
              "checkpoint": "expert" if expert else os.path.basename(ck_ref),
              "dataset_sizes": {"train": len(train_set),
                                "test": len(test_set)},
              "mse": None, "closed_loop": None, "demo_cost": None,
              "parameter_count": None, "parameter_segments": None}

    if expert:
        if env == "linear":
            teacher = models_from_json(manifest["teacher"]["models"])
            weight_matrix = teacher.weight.matrix()

            def mean_demo_cost(samples):
                if not samples:
                    return None
                totals = [sequence_cost(teacher.dynamics, teacher.cost,
                                        weight_matrix, s.x0, s.useq)[0]
                          for s in samples]
                return float(np.mean(totals))

            report["demo_cost"] = {
                "mean_demo_cost_train": mean_demo_cost(train_set),
                "mean_demo_cost_test": mean_demo_cost(test_set)}
        else:
            report["closed_loop"] = _closed_loop_eval("expert", manifest, cfg)
    else:
        ck = load_checkpoint(ck_ref)
        _require(ck["environment"] == env,
                 f"checkpoint environment {ck['environment']!r} does not "
                 f"match config environment {env!r}")
        models = models_from_json(ck["models"])
        hp, warm = hyper_from_cfg(ck["hyper"])
        if env == "linear" and train_set:
            demo_len = train_set[0].useq.shape[0]
            _require(demo_len == hp.horizon,
                     f"dataset demos plan {demo_len} steps but the "
                     f"checkpoint horizon is {hp.horizon}")
        sizes = _segment_sizes(models)
        report["parameter_count"] = sum(sizes.values())
        report["parameter_segments"] = sizes
        regime = "open_loop" if env == "linear" else "mpc"
        weights = {"ctrl": 1.0, "cost": 0.0}
        stream = RngStream(manifest["seed"]).child(STREAM_DATA).child(3)
        mse = {
            "train_ctrl": evaluate_losses(models, hp, train_set, regime,
                                          stream.child(0), weights)["ctrl"],
            "test_ctrl": evaluate_losses(models, hp, test_set, regime,
                                         stream.child(1), weights)["ctrl"],
        }
        if env == "pendulum":
            mse["train_dyn"] = (loss_dyn(models.dynamics, train_set, wrap=True)
                                if train_set else None)
            mse["test_dyn"] = (loss_dyn(models.dynamics, test_set, wrap=True)
                               if test_set else None)
            report["closed_loop"] = _closed_loop_eval((models, hp, warm),
                                                      manifest, cfg)
        report["mse"] = mse

    write_json(os.path.join(out_dir, "eval_report.json"), report)
    write_resolved_config(out_dir, "eval", cfg)
    if report["mse"] is not None:
        print("MSE: " + ", ".join(f"{key} {_fmt(value)}"
                                  for key, value in report["mse"].items()))
    if report["demo_cost"] is not None:
        print("demo cost: " + ", ".join(
            f"{key} {_fmt(value)}"
            for key, value in report["demo_cost"].items()))
    if report["closed_loop"] is not None:
        cl = report["closed_loop"]
        print(f"closed loop ({cl['runs']} runs x {cl['duration']} s): "
              f"success rate {cl['success_rate']:.2f}, "
              f"mean cost {_fmt(cl['mean_cost'])}")
    if report["parameter_count"] is not None:
        print(f"trainable parameters: {report['parameter_count']}")
    print(f"elapsed {time.time() - started:.1f} s")


# ---------------------------------------------------------------- simulate


def _pendulum_planner(cfg, out_dir, controller):
    if controller == "expert":
        dyn, cost, weight = pendulum_teacher_models()
        return ILQRPlanner(dyn, cost, weight.matrix(),
                           int(cfg["dataset"]["expert_horizon"]),
                           ILQRSettings(max_iterations=100))
    if controller == "pi_teacher":
        dyn, cost, weight = pendulum_teacher_models()
        hp, warm = hyper_from_cfg(cfg["hyper"])
        return PathIntegralPlanner(ModelSet(dyn, cost, weight), hp,
                                   warm_recurrences=warm)
    ck_path = cfg["paths"]["checkpoint"] or os.path.join(
        out_dir, "checkpoint_best.json")
    ck = load_checkpoint(ck_path)
    _require(ck["environment"] == "pendulum",
             "simulate needs a pendulum checkpoint")
    hp, warm = hyper_from_cfg(ck["hyper"])
    return PathIntegralPlanner(models_from_json(ck["models"]), hp,
                               warm_recurrences=warm)


def cmd_simulate(cfg, out_dir, force):
    env = cfg["environment"]
    sim = cfg["simulate"]
    runs = int(sim["runs"])
    run_files = [f"run_{i:03d}.csv" for i in range(runs)]
    refuse_existing(out_dir, run_files + ["simulate_report.json",
                                          "resolved_config.simulate.json"],
                    force)
    root = RngStream(cfg["seed"]).child(STREAM_SIM)
    started = time.time()

    if env == "pendulum":
        planner = _pendulum_planner(cfg, out_dir, sim["controller"])
        results, excluded = benchmark_runs(planner, root, runs,
                                           float(sim["duration"]))
        _, teacher_cost, _ = pendulum_teacher_models()
        for i, result in enumerate(results):
            write_trajectory_csv(os.path.join(out_dir, run_files[i]),
                                 result.states, result.controls, dt=0.1,
                                 cost_model=teacher_cost)
        metrics = _run_metrics(results, runs)
        metrics.update({"excluded": excluded,
                        "per_run": [{"success": bool(r.success),
                                     "cost": r.cost} for r in results]})
    else:
        teacher = sample_linear_teacher(root.child(1), cfg["models"]["dt"])
        dyn, cost, weight = teacher.models()
        weight_matrix = weight.matrix()
        horizon = int(sim["horizon"])
        controller = sim["controller"]
        if controller == "expert":
            planner = LQRPlanner(LQRProblem(teacher.F, teacher.G, teacher.Q,
                                            teacher.R, horizon))
        elif controller == "pi_teacher":
            hp, warm = hyper_from_cfg(cfg["hyper"])
            planner = PathIntegralPlanner(ModelSet(dyn, cost, weight), hp,
                                          warm_recurrences=warm)
        else:
            ck_path = cfg["paths"]["checkpoint"] or os.path.join(
                out_dir, "checkpoint_best.json")
            ck = load_checkpoint(ck_path)
            _require(ck["environment"] == "linear",
                     "simulate needs a linear checkpoint")
            hp, warm = hyper_from_cfg(ck["hyper"])
            planner = PathIntegralPlanner(models_from_json(ck["models"]), hp,
                                          warm_recurrences=warm)
        per_run = []
        for i in range(runs):
            x0 = root.child(i).generator().normal(size=4)
            useq = planner.plan(x0, rng=root.child(1000 + i))
            total, states = sequence_cost(dyn, cost, weight_matrix, x0, useq)
            write_trajectory_csv(os.path.join(out_dir, run_files[i]),
                                 states, useq, dt=teacher.dt,
                                 cost_model=cost)
            per_run.append({"cost": float(total)})
        metrics = {"mean_cost": float(np.mean([r["cost"] for r in per_run])),
                   "per_run": per_run}

    report = {"version": 1, "environment": env,
              "controller": sim["controller"], "metrics": metrics}
    write_json(os.path.join(out_dir, "simulate_report.json"), report)
    write_resolved_config(out_dir, "simulate", cfg)
    if env == "pendulum":
        print(f"{runs} runs: success rate {metrics['success_rate']:.2f}, "
              f"mean cost {_fmt(metrics['mean_cost'])} "
              f"({metrics['excluded']} divergent)")
    else:
        print(f"{runs} runs: mean cost {_fmt(metrics['mean_cost'])}")
    print(f"elapsed {time.time() - started:.1f} s")


# --------------------------------------------------------------- gradcheck


def _fd_gradient(models, hp, x0, demo, noise_stream, coords):
    """Richardson-extrapolated central differences of the imitation loss.

    Plain central differences at step 1e-5 leave ~1e-10 of roundoff in each
    estimate, which swamps coordinates whose true gradient sits near the
    reporting floor.  Extrapolating two central stencils at a wider step
    keeps truncation negligible while shrinking the roundoff term.
    """
    base = models.pack()
    layout = base.layout
    fd = np.zeros(base.size)
    eps = 1e-4

    def loss_at(vec):
        unpack_params(ParamVector(layout, vec), models.items())
        out, _ = pi_net_forward(x0, None, models, hp, noise_stream,
                                record=False)
        return loss_ctrl(out, demo)

    def central(j, step):
        hi = base.values.copy()
        lo = base.values.copy()
        hi[j] += step
        lo[j] -= step
        return (loss_at(hi) - loss_at(lo)) / (2.0 * step)

    try:
        for j in coords:
            wide = central(j, eps)
            narrow = central(j, eps / 2.0)
            fd[j] = (4.0 * narrow - wide) / 3.0
    finally:
        unpack_params(base, models.items())
    return fd


def cmd_gradcheck(cfg, out_dir, force):
    gc = cfg["gradcheck"]
    refuse_existing(out_dir, ["gradcheck_report.json",
                              "resolved_config.gradcheck.json"], force)
    hp, _ = hyper_from_cfg(gc["hyper"])
    hidden = int(gc["hidden"])
    frozen = tuple(gc["freeze"])
    root = RngStream(cfg["seed"]).child(STREAM_GRAD)
    started = time.time()

    segments = {}
    frozen_abs = {name: 0.0 for name in frozen}
    for i in range(int(gc["instances"])):
        inst = root.child(i)
        models = ModelSet(
            MLPDynamics(hidden=hidden, dt=0.1, init_rng=inst.child(0)),
            MLPCost(hidden=hidden, outputs=hidden, init_rng=inst.child(1)),
            ControlCostWeight(1))
        models.weight.set_params(
            0.3 * inst.child(2).generator().standard_normal(1))
        x0 = inst.child(3).generator().normal(size=2)
        demo = inst.child(4).generator().normal(size=(hp.horizon, 1))
        noise_stream = inst.child(5)

        useq, tape = pi_net_forward(x0, None, models, hp, noise_stream,
                                    record=True)
        cotangent = (2.0 / demo.size) * (useq - demo)
        grad = pi_net_backward(tape, cotangent, models)
        if gc["corrupt"] is not None:
            # negative-control knob: scales one segment's reverse pass
            grad.segment(gc["corrupt"])[:] *= 1.001
        for name in frozen:
            grad.segment(name)[:] = 0.0

        layout = grad.layout
        live = [(name, offset, length) for name, offset, length in layout
                if name not in frozen]
        coords = [j for _, offset, length in live
                  for j in range(offset, offset + length)]
        fd = _fd_gradient(models, hp, x0, demo, noise_stream, coords)
        floor = float(gc["floor"])
        tolerance = float(gc["tolerance"])
        for name, offset, length in live:
            seg_est = grad.values[offset:offset + length]
            seg_ref = fd[offset:offset + length]
            diff = np.abs(seg_est - seg_ref)
            rel = diff / np.maximum(np.abs(seg_ref), floor)
            # a disagreement below the oracle's own roundoff scale counts
            # as agreement, however small the reference coordinate is
            violation = (rel > tolerance) & (diff > floor * 1e-2)
            entry = segments.setdefault(
                name, {"max_rel_err": -1.0, "violations": 0, "failed": False})
            entry["violations"] += int(np.count_nonzero(violation))
            # once a segment has violations, the worst-coordinate fields
            # stay locked onto violating coordinates
            pool = np.where(violation, rel, -np.inf) if violation.any() else rel
            worst = int(np.argmax(pool))
            promote = (violation.any() and not entry["failed"])
            improve = (violation.any() == entry["failed"]
                       and rel[worst] > entry["max_rel_err"])
            if promote or improve:
                entry.update({"max_rel_err": float(rel[worst]),
                              "worst_coordinate": worst,
                              "worst_instance": i,
                              "estimate": float(seg_est[worst]),
                              "reference": float(seg_ref[worst]),
                              "failed": bool(violation.any())})

    passed = not any(entry["failed"] for entry in segments.values())
    report = {"version": 1,
              "instances": int(gc["instances"]),
              "tolerance": tolerance,
              "floor": float(gc["floor"]),
              "corrupt": gc["corrupt"],
              "segments": segments,
              "frozen_max_abs_gradient": frozen_abs,
              "passed": passed}
    write_json(os.path.join(out_dir, "gradcheck_report.json"), report)
    write_resolved_config(out_dir, "gradcheck", cfg)

    for name, entry in segments.items():
        print(f"segment {name}: max rel err {entry['max_rel_err']:.3e} "
              f"(coordinate {entry['worst_coordinate']}, "
              f"instance {entry['worst_instance']})")
    for name, peak in frozen_abs.items():
        print(f"segment {name}: frozen, max |gradient| {peak!r}")
    print(f"elapsed {time.time() - started:.1f} s")
    if not passed:
        failing = {name: entry for name, entry in segments.items()
                   if entry["failed"]}
        detail = "; ".join(
            f"{name} coordinate {entry['worst_coordinate']} on instance "
            f"{entry['worst_instance']}: {entry['estimate']!r} vs reference "
            f"{entry['reference']!r}" for name, entry in failing.items())
        raise NumericError(
            f"gradient check failed at tolerance {tolerance}: {detail}")
    print("gradient check passed")


# ----------------------------------------------------------- export-costmap


def _grid_axis(lo, hi, cells):
    """Evenly spaced axis whose symmetric midpoints come out exactly zero.

    ``np.linspace`` accumulates ``start + i * step``, which puts ~1e-16 of
    noise at the centre of a symmetric range.  The two-point interpolation
    form cancels exactly there and still pins both endpoints.
    """
    if cells == 1:
        return np.array([lo])
    idx = np.arange(cells, dtype=float)
    return (lo * (cells - 1 - idx) + hi * idx) / (cells - 1)


def cmd_export_costmap(cfg, out_dir, force):
    _require(cfg["environment"] == "pendulum",
             "cost maps are defined for the pendulum environment")
    cm = cfg["costmap"]
    refuse_existing(out_dir, ["costmap.csv",
                              "resolved_config.export-costmap.json"], force)
    started = time.time()
    if cm["source"] == "teacher":
        cost = PendulumTeacherCost()
    else:
        ck_path = cfg["paths"]["checkpoint"] or os.path.join(
            out_dir, "checkpoint_best.json")
        ck = load_checkpoint(ck_path)
        _require(ck["environment"] == "pendulum",
                 "cost maps need a pendulum checkpoint")
        cost = models_from_json(ck["models"]).cost

    thetas = _grid_axis(float(cm["theta_range"][0]),
                        float(cm["theta_range"][1]), int(cm["theta_cells"]))
    dots = _grid_axis(float(cm["theta_dot_range"][0]),
                      float(cm["theta_dot_range"][1]),
                      int(cm["theta_dot_cells"]))
    grid_theta, grid_dot = np.meshgrid(thetas, dots, indexing="ij")
    states = np.column_stack([grid_theta.ravel(), grid_dot.ravel()])
    values = cost.running(states)

    with open(os.path.join(out_dir, "costmap.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["theta", "theta_dot", "cost"])
        for row, value in zip(states, values):
            writer.writerow([repr(float(row[0])), repr(float(row[1])),
                             repr(float(value))])
    write_resolved_config(out_dir, "export-costmap", cfg)
    print(f"wrote {states.shape[0]} grid rows "
          f"({int(cm['theta_cells'])} x {int(cm['theta_dot_cells'])})")
    print(f"elapsed {time.time() - started:.1f} s")


# -------------------------------------------------------------------- main


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "gradcheck": cmd_gradcheck,
    "export-costmap": cmd_export_costmap,
}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default; keep 2 reserved for numeric failures
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser():
    parser = _Parser(prog="picontrol",
                     description="Reproducible experiments for the "
                                 "differentiable sampling controller.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate expert demonstrations and a manifest",
        "train": "pretrain (if configured) and train the controller",
        "eval": "dataset losses and closed-loop metrics for a checkpoint",
        "simulate": "closed-loop or planned rollouts written as CSV",
        "gradcheck": "compare the reverse pass against finite differences",
        "export-costmap": "evaluate a cost model over a state grid",
    }
    for name, text in helps.items():
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", metavar="PATH", default=None,
                         help="JSON config merged over the profile defaults")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the config seed")
        cmd.add_argument("--out", metavar="DIR", default=None,
                         help="output directory (default runs/<experiment-id>)")
        cmd.add_argument("--force", action="store_true",
                         help="overwrite existing artifacts")
        cmd.add_argument("--profile", choices=("desk", "paper"),
                         default="desk",
                         help="default-scale preset the config merges over")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.profile, args.seed)
        out_dir = args.out or os.path.join("runs", cfg["experiment_id"])
        os.makedirs(out_dir, exist_ok=True)
        with experiment_lock(out_dir):
            COMMANDS[args.command](cfg, out_dir, args.force)
    except MemoryBudgetError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (ParameterError, ShapeError, ConsistencyError, OSError,
            ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
