"""Experiment orchestration: config files, multi-seed runs, summary tables.

Config files are flat structured text with dotted keys::

    dataset = sem_synthetic
    seeds = 0, 1, 2
    ood_cases = 0.10, 0.20, 0.30, 0.40, 0.50
    methods = perinvfl, fedavg
    hyper.T = 100
    hyper.lambda = 90
    arch.hidden_dims = 16, 16

Each (method, seed, ood_case) run trains its own federation and writes one
CSV; the summary table (rows = methods, columns = OOD cases plus Average,
cells "mean (+-std)" in percent over seeds) is recomputable from those CSVs.
Given fixed seeds the whole pipeline is a pure function of the config: reruns
produce byte-identical outputs. Independent runs may execute in parallel
(thread count from PERINVFL_THREADS, defaulting to available parallelism).
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import Theorem1Report, load_theorem1_spec, theorem1_gap
from .data import (
    ClientData,
    SemSpec,
    build_sem_federation,
    default_federation_spec,
    default_sem_federation_spec,
    parse_idx,
    partition_clients,
    Environment,
    GenParams,
    Tensor,
)
from .federation import DivergenceError, Hyperparams, METHODS, final_test_accuracy, train
from .metrics import MetricsLog
from .models import ModelArch, init_params, risk
from .numerics import finite_diff_grad, grad, relative_grad_error
from .objectives import irm_loss, local_objective

DATASETS = ("sem_synthetic", "rc_mnist", "rc_fmnist")
DEFAULT_OOD_CASES = (0.10, 0.20, 0.30, 0.40, 0.50)
THREADS_ENV_VAR = "PERINVFL_THREADS"


class ConfigError(Exception):
    def __init__(self, problems: Sequence[str]):
        super().__init__("invalid config: " + "; ".join(problems))
        self.problems = list(problems)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "sem_synthetic"
    output_dir: str = "out"
    seeds: tuple[int, ...] = (0, 1, 2)
    ood_cases: tuple[float, ...] = DEFAULT_OOD_CASES
    methods: tuple[str, ...] = ()
    hyper: Hyperparams = field(default_factory=Hyperparams)
    hidden_dims: tuple[int, ...] = (16, 16)
    num_classes: int = 2
    sem: dict = field(default_factory=dict)
    federation: dict = field(default_factory=dict)
    data_paths: dict = field(default_factory=dict)

    def run_methods(self) -> tuple[str, ...]:
        return self.methods if self.methods else (self.hyper.method,)


def _parse_scalar(text: str):
    text = text.strip()
    if text == "":
        return None
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _parse_value(text: str):
    if "," in text:
        return tuple(_parse_scalar(part) for part in text.split(",") if part.strip() != "")
    return _parse_scalar(text)


def _as_tuple(value):
    if value is None:
        return ()
    return value if isinstance(value, tuple) else (value,)


_HYPER_KEYS = {
    "T": "T", "R": "R", "S": "S", "beta": "beta", "eta": "eta", "gamma": "gamma",
    "alpha": "alpha", "lambda": "lam", "method": "method",
    "lambda_warmup_rounds": "lambda_warmup_rounds", "dro_step": "dro_step",
    "batch_size": "batch_size", "eval_every": "eval_every",
}


def parse_config(path) -> ExperimentConfig:
    """Parse and validate a config file; raises ConfigError listing bad keys."""
    entries: dict[str, object] = {}
    problems: list[str] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                problems.append(f"line {lineno}: expected 'key = value'")
                continue
            key, _, value = line.partition("=")
            entries[key.strip()] = _parse_value(value)
    return config_from_entries(entries, problems)


def config_from_entries(entries: dict, problems: list[str] | None = None) -> ExperimentConfig:
    problems = list(problems or [])
    hyper_kwargs = {}
    sem: dict = {}
    federation: dict = {}
    data_paths: dict = {}
    top: dict = {}
    for key, value in entries.items():
        if key.startswith("hyper."):
            name = key[len("hyper."):]
            if name not in _HYPER_KEYS:
                problems.append(f"unknown hyperparameter key {key!r}")
            else:
                hyper_kwargs[_HYPER_KEYS[name]] = value
        elif key.startswith("arch."):
            name = key[len("arch."):]
            if name == "hidden_dims":
                top["hidden_dims"] = _as_tuple(value)
            elif name == "num_classes":
                top["num_classes"] = value
            else:
                problems.append(f"unknown arch key {key!r}")
        elif key.startswith("sem."):
            sem[key[len("sem."):]] = value
        elif key.startswith("federation."):
            federation[key[len("federation."):]] = value
        elif key.startswith("data."):
            data_paths[key[len("data."):]] = value
        elif key in ("dataset", "output_dir", "seeds", "ood_cases", "methods"):
            top[key] = value
        else:
            problems.append(f"unknown key {key!r}")

    dataset = top.get("dataset", "sem_synthetic")
    if dataset not in DATASETS:
        problems.append(f"dataset must be one of {DATASETS}, got {dataset!r}")
    seeds = _as_tuple(top.get("seeds", (0, 1, 2)))
    if not seeds or not all(isinstance(s, int) for s in seeds):
        problems.append("seeds must be a non-empty list of integers")
    ood_cases = tuple(float(c) for c in _as_tuple(top.get("ood_cases", DEFAULT_OOD_CASES)))
    if not ood_cases or not all(0.0 <= c <= 1.0 for c in ood_cases):
        problems.append("ood_cases must be probabilities in [0, 1]")
    methods = tuple(_as_tuple(top.get("methods", ())))
    for m in methods:
        if m not in METHODS:
            problems.append(f"unknown method {m!r} in methods")
    try:
        hyper = Hyperparams(**hyper_kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"hyper: {exc}")
        hyper = Hyperparams()
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        dataset=dataset,
        output_dir=str(top.get("output_dir", "out")),
        seeds=tuple(int(s) for s in seeds),
        ood_cases=ood_cases,
        methods=methods,
        hyper=hyper,
        hidden_dims=tuple(int(d) for d in top.get("hidden_dims", (16, 16))),
        num_classes=int(top.get("num_classes", 2)),
        sem=sem,
        federation=federation,
        data_paths=data_paths,
    )


# ---------------------------------------------------------------------------
# Federation builders
# ---------------------------------------------------------------------------


def _sem_rho(angles_deg: Sequence[float], dim_h: int) -> list[tuple[float, ...]]:
    rhos = []
    for angle in angles_deg:
        rad = math.radians(float(angle))
        rho = [math.cos(rad), math.sin(rad)] + [0.0] * (dim_h - 2)
        rhos.append(tuple(rho[:dim_h]))
    return rhos


def build_federation(
    config: ExperimentConfig, ood_case: float, seed: int
) -> tuple[list[ClientData], ModelArch]:
    """Materialize clients and the model architecture for one run."""
    if config.dataset == "sem_synthetic":
        sem = config.sem
        dim_h = int(sem.get("dim_h", 2))
        dim_z = int(sem.get("dim_z", 2))
        angles = _as_tuple(sem.get("rho_angles_deg", (0.0, 35.0, -35.0, 70.0)))
        p_train = _as_tuple(config.federation.get("p_train", (0.95, 0.90, 0.85, 0.80)))
        spec = default_sem_federation_spec(
            p_train=p_train,
            contexts_per_client=int(config.federation.get("contexts_per_client", 2)),
            p_gap=float(config.federation.get("p_gap", 0.45)),
            p_test=float(ood_case),
            n_train=int(sem.get("n_train", 1200)),
            n_test=int(sem.get("n_test", 2000)),
        )
        rhos = _sem_rho(angles, dim_h)
        if len(rhos) < spec.num_clients:
            rhos = rhos * spec.num_clients
        sem_specs = [
            SemSpec(
                dim_h=dim_h,
                dim_z=dim_z,
                rho=rhos[i],
                noise_std=float(sem.get("noise_std", 0.5)),
                spurious_strength=float(sem.get("spurious_strength", 2.0)),
                mixing=int(sem.get("mixing_seed", 7)),
                spec_id=f"client{i}",
            )
            for i in range(spec.num_clients)
        ]
        clients = build_sem_federation(spec, sem_specs, seed)
        arch = ModelArch(dim_h + dim_z, config.hidden_dims, config.num_classes)
        return clients, arch

    # colored/rotated digit datasets from IDX files
    paths = config.data_paths
    missing = [k for k in ("images", "labels") if k not in paths]
    if missing:
        raise ConfigError([f"dataset {config.dataset} requires data.{k}" for k in missing])
    images = parse_idx(Path(paths["images"]).read_bytes())
    labels = parse_idx(Path(paths["labels"]).read_bytes())
    pool = int(paths.get("train_pool", 50000))
    spec = default_federation_spec(
        p_train=_as_tuple(config.federation.get("p_train", (0.95, 0.90, 0.85, 0.80))),
        rotations=_as_tuple(config.federation.get("rotations", (0, 90, 180, 270))),
        p_test=float(ood_case),
        n_train=int(config.federation.get("n_train", 12500)),
        n_test=int(config.federation.get("n_test", 2500)),
        noise_rate=float(config.federation.get("noise_rate", 0.25)),
    )
    clients = partition_clients(
        spec,
        images.data[:pool],
        labels[:pool],
        images.data[pool:],
        labels[pool:],
        seed,
    )
    input_dim = clients[0].train_envs[0].inputs.shape[1]
    arch = ModelArch(input_dim, config.hidden_dims, config.num_classes)
    return clients, arch


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------


@dataclass
class RunOutcome:
    method: str
    seed: int
    ood_case: float
    accuracy: float  # mean-over-clients final test accuracy, NaN if diverged
    diverged: bool
    csv_path: str


@dataclass
class ExperimentReport:
    outcomes: list[RunOutcome]
    summary: dict
    summary_path: str
    json_path: str

    @property
    def any_divergence(self) -> bool:
        return any(o.diverged for o in self.outcomes)


def run_name(method: str, seed: int, case: float) -> str:
    return f"run_{method}_seed{seed}_case{case:.2f}.csv"


def _worker_count() -> int:
    value = os.environ.get(THREADS_ENV_VAR)
    if value:
        return max(1, int(value))
    return os.cpu_count() or 1


def _one_run(config: ExperimentConfig, method: str, seed: int, case: float, out_dir: Path) -> RunOutcome:
    clients, arch = build_federation(config, case, seed)
    hyper = replace(config.hyper, method=method)
    log = MetricsLog()
    diverged = False
    acc = float("nan")
    try:
        result = train(clients, arch, hyper, seed, log=log)
        acc = final_test_accuracy(result, arch, clients)
    except DivergenceError:
        diverged = True
    path = out_dir / run_name(method, seed, case)
    log.to_csv(path)
    return RunOutcome(method, seed, case, acc, diverged, str(path))


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Train every (method, seed, ood_case) combination and write reports.

    A diverging run is recorded and the experiment continues; its summary
    cells show nan.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [
        (method, seed, case)
        for method in config.run_methods()
        for seed in config.seeds
        for case in config.ood_cases
    ]
    workers = min(_worker_count(), len(jobs))
    outcomes: dict[tuple, RunOutcome] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                job: pool.submit(_one_run, config, *job, out_dir) for job in jobs
            }
            for job, fut in futures.items():
                outcomes[job] = fut.result()
    else:
        for job in jobs:
            outcomes[job] = _one_run(config, *job, out_dir)

    ordered = [outcomes[job] for job in jobs]
    summary = summarize_outcomes(ordered, config.run_methods(), config.ood_cases)
    summary_path = out_dir / "summary.txt"
    json_path = out_dir / "summary.json"
    summary_path.write_text(render_summary_table(summary))
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return ExperimentReport(ordered, summary, str(summary_path), str(json_path))


def summarize_outcomes(
    outcomes: Sequence[RunOutcome], methods: Sequence[str], cases: Sequence[float]
) -> dict:
    """Per-method per-case mean/std (percent) over seeds, plus the Average column.

    The Average mean is the mean of the case means and its std is the
    across-case standard deviation of those means.
    """
    table: dict = {"cases": [f"{c:.2f}" for c in cases], "methods": {}}
    for method in methods:
        row = {}
        case_means = []
        for case in cases:
            accs = [o.accuracy * 100.0 for o in outcomes if o.method == method and o.ood_case == case]
            mean = float(np.mean(accs)) if accs else float("nan")
            std = float(np.std(accs)) if accs else float("nan")
            row[f"{case:.2f}"] = {"mean": mean, "std": std}
            case_means.append(mean)
        row["Average"] = {
            "mean": float(np.mean(case_means)),
            "std": float(np.std(case_means)),
        }
        table["methods"][method] = row
    return table


def render_summary_table(summary: dict) -> str:
    cases = summary["cases"]
    headers = ["method"] + [f"p_test={c}" for c in cases] + ["Average"]
    lines = []
    rows = []
    for method, row in summary["methods"].items():
        cells = [method]
        for key in cases + ["Average"]:
            cell = row[key]
            cells.append(f"{cell['mean']:.2f} (±{cell['std']:.2f})")
        rows.append(cells)
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines.append(fmt(headers))
    lines.append(fmt(["-" * w for w in widths]))
    for cells in rows:
        lines.append(fmt(cells))
    return "\n".join(lines) + "\n"


def rebuild_report(out_dir) -> dict:
    """Recompute the summary from the raw per-run CSVs in a directory."""
    out_dir = Path(out_dir)
    csvs = sorted(out_dir.glob("run_*_seed*_case*.csv"))
    outcomes = []
    for path in csvs:
        stem = path.stem  # run_<method>_seed<seed>_case<case>
        body = stem[len("run_"):]
        head, _, case_part = body.rpartition("_case")
        method, _, seed_part = head.rpartition("_seed")
        log = MetricsLog.from_csv(path)
        rows = log.select(split="test", metric="accuracy")
        if rows:
            last_round = max(r.round for r in rows)
            finals = [r.value for r in rows if r.round == last_round]
            acc = sum(finals) / len(finals)
        else:
            acc = float("nan")
        outcomes.append(
            RunOutcome(method, int(seed_part), float(case_part), acc, not rows, str(path))
        )
    methods = sorted({o.method for o in outcomes})
    cases = sorted({o.ood_case for o in outcomes})
    return summarize_outcomes(outcomes, methods, cases)


# ---------------------------------------------------------------------------
# Gradient audit
# ---------------------------------------------------------------------------


@dataclass
class GradientCheckReport:
    passed: bool
    max_errors: dict[str, float]
    failures: list[str]
    tolerance: float
    trials: int


def check_gradients(
    n_trials: int = 20, seed: int = 0, tolerance: float = 1e-4, corrupt: str | None = None
) -> GradientCheckReport:
    """Reverse-mode vs central finite differences on randomized tiny instances.

    Covers the plain risk, the invariance loss, and the dual-regularized local
    objective. `corrupt` deliberately offsets one objective's reverse-mode
    gradient (fault-injection hook for tests).
    """
    arch = ModelArch(input_dim=3, hidden_dims=(8,), num_classes=2)
    max_errors = {"risk": 0.0, "irm_loss": 0.0, "local_objective": 0.0}
    for trial in range(n_trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, trial]))
        envs = []
        for e in range(2):
            inputs = rng.standard_normal((8, arch.input_dim))
            labels = rng.integers(0, arch.num_classes, 8)
            envs.append(Environment(f"audit{trial}-{e}", Tensor(inputs), labels, GenParams()))
        params = init_params(arch, int(rng.integers(0, 2**31)))
        anchor = params.replace_data(params.data + 0.1 * rng.standard_normal(params.size))
        objectives = {
            "risk": lambda p: risk(p, arch, envs[0]),
            "irm_loss": lambda p: irm_loss(p, arch, envs, 1.5),
            "local_objective": lambda p: local_objective(p, anchor, arch, envs, 1.5, 0.7),
        }
        for name, objective in objectives.items():
            g = grad(objective, params)
            if corrupt == name:
                g = g.replace_data(g.data + 1e-2)
            fd = finite_diff_grad(objective, params, 1e-5)
            err = relative_grad_error(g, fd)
            max_errors[name] = max(max_errors[name], err)
    failures = [name for name, err in max_errors.items() if err > tolerance]
    return GradientCheckReport(not failures, max_errors, failures, tolerance, n_trials)


# ---------------------------------------------------------------------------
# Information-gap verification
# ---------------------------------------------------------------------------


def verify_theorem1(spec_file) -> Theorem1Report:
    specs, joint = load_theorem1_spec(spec_file)
    return theorem1_gap(specs, joint)
