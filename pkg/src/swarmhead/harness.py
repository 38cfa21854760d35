"""Config-driven experiment suites and report files.

Every suite returns a :class:`ReportBundle` whose aggregate rows are
recomputed from its per-trial records, and writes JSON and RFC-4180 CSV
into one output directory.  Wall-clock timings go to the log only, so
repeated runs with the same config produce byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import gassl as gs
from . import mc_gassl as mc
from . import sim
from .nn import params_from_json

log = logging.getLogger(__name__)

PROBLEMS = ("P1", "P2", "meta", "purity")


@dataclass
class ExperimentConfig:
    problem: str = "P1"
    ifs: list = field(default_factory=lambda: ["f1"])
    kappa: dict = field(default_factory=dict)  # overrides of the default strategy constants
    m1: list = field(default_factory=lambda: [10])  # P1 follower counts
    scenarios: list = field(default_factory=list)  # P2: {"ifs", "M", "N"} or {"ifs", "cluster_sizes"}
    trials: int = 20
    seed: int = 0
    seeds: list | None = None  # explicit trial seeds; default seed .. seed + trials - 1
    sim: dict = field(default_factory=dict)  # init_swarm keywords: s_h, sigma_h, ball_radius
    gassl: dict = field(default_factory=dict)  # GasslHyper overrides
    mc: dict = field(default_factory=dict)  # McHyper overrides
    meta_checkpoint: str | None = None
    meta: bool = True  # run meta_train when no checkpoint is given
    meta_seed: int = 0
    purity: dict = field(default_factory=lambda: {"M": 3, "N": 30, "box": 40.0, "settle": 8})
    out: str = "runs/experiment"

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"problem must be one of {PROBLEMS}")
        if int(self.trials) < 1:
            raise ValueError("trials must be >= 1")
        self.ifs = [self.ifs] if isinstance(self.ifs, str) else list(self.ifs)
        for k in self.ifs:
            if k not in sim.IFS_KINDS:
                raise ValueError(f"unknown follow strategy {k!r}")
        for s in self.scenarios:
            if s.get("ifs", "f1") not in sim.IFS_KINDS:
                raise ValueError(f"unknown follow strategy {s.get('ifs')!r}")
        gs.GasslHyper(**self.gassl)
        mc.McHyper(**self.mc)

    @classmethod
    def from_json(cls, payload):
        if isinstance(payload, (str, Path)) and Path(payload).exists():
            payload = Path(payload).read_text()
        data = json.loads(payload) if isinstance(payload, str) else dict(payload)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self):
        return asdict(self)

    def trial_seeds(self):
        if self.seeds is not None:
            return [int(s) for s in self.seeds][: self.trials]
        return [self.seed + k for k in range(self.trials)]

    def strategy(self, kind, noise_seed):
        return sim.IfsSpec.table(kind, noise_seed=noise_seed, **self.kappa)

    def gassl_hyper(self, **kw):
        return gs.GasslHyper(**{**self.gassl, **kw})

    def mc_hyper(self, **kw):
        return mc.McHyper(**{**self.mc, **kw})


def split_sizes(M, N):
    """Follower counts for M clusters totalling N UAVs, as even as possible."""
    followers = N - M
    if M < 1 or followers < 2 * M:
        raise ValueError(f"N={N} cannot hold {M} clusters of >= 2 followers")
    base, extra = divmod(followers, M)
    return [base + (k < extra) for k in range(M)]


# ------------------------------------------------------------------ reports

@dataclass
class ReportBundle:
    problem: str
    config: dict
    trials: list  # per-trial records (JSON-ready dicts)
    summary: list = field(default_factory=list)  # aggregate rows
    tables: dict = field(default_factory=dict)  # name -> list of row dicts, emitted as CSV
    artifacts: dict = field(default_factory=dict)  # relative path -> text

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", self.config)
        _write_json(out / "trials.json", self.trials)
        _write_json(out / "summary.json", self.summary)
        (out / "summary.csv").write_text(rows_to_csv(self.summary), newline="")
        for name, rows in self.tables.items():
            (out / f"{name}.csv").write_text(rows_to_csv(rows), newline="")
        for rel, text in self.artifacts.items():
            path = out / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, newline="")
        return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n")


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return v


def rows_to_csv(rows) -> str:
    """RFC-4180 text (CRLF line ends) for a list of dicts with shared keys."""
    buf = io.StringIO(newline="")
    if not rows:
        return ""
    w = csv.writer(buf, lineterminator="\r\n")
    keys = list(rows[0])
    w.writerow(keys)
    for r in rows:
        w.writerow([_cell(r[k]) for k in keys])
    return buf.getvalue()


def matrix_csv(matrix, row_labels, col_labels, corner="observer") -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow([corner, *[int(c) for c in col_labels]])
    for lab, row in zip(row_labels, np.asarray(matrix)):
        w.writerow([int(lab), *(repr(float(x)) for x in row)])
    return buf.getvalue()


# ------------------------------------------------------------------ P1

def p1_trial(config: ExperimentConfig, kind, m1, seed):
    """One single-cluster detection; returns (record, attention artifact)."""
    state = sim.init_swarm([m1], ifs=config.strategy(kind, seed), seed=seed, **config.sim)
    sim.advance(state, sim.T_OB)
    obs = sim.observe(state)
    hyper = config.gassl_hyper(seed=seed)
    run = gs.train_single_cluster(obs, hyper)
    cands = gs.elect_candidates(run.vote, hyper.top_k)
    head = int(state.live_huavs[0])
    ledger = sim.DetectionLedger(heads=[head], n_total=state.n)
    ledger.record(cands, state.clock)
    ledger.verify()
    record = {
        "ifs": kind, "m1": m1, "seed": seed, "n": state.n, "head": head,
        "candidates": cands, "J_s": sim.objective_single(cands, head),
        "detected": head in cands, "vote": run.vote.to_json(), "ledger": ledger.to_json(),
    }
    artifact = {"members": obs.members.tolist(), "voters": obs.members[run.vote.voters].tolist(),
                "head": head, "attention": run.attention.tolist()}
    return record, artifact


def summarize_p1(trials):
    rows = []
    cells = sorted({(t["ifs"], t["m1"]) for t in trials})
    for kind, m1 in cells:
        js = [t["J_s"] for t in trials if t["ifs"] == kind and t["m1"] == m1]
        rows.append({"ifs": kind, "m1": m1, "trials": len(js),
                     "mean_J_s": float(np.mean(js)), "detection_rate": float(1.0 + np.mean(js))})
    return rows


def run_p1_suite(config: ExperimentConfig) -> ReportBundle:
    """Detection rate 1 + mean J_s per (strategy, m1) cell."""
    if config.problem != "P1":
        raise ValueError("run_p1_suite needs problem = P1")
    if not config.ifs or not config.m1:
        raise ValueError("P1 config needs at least one strategy and one m1")
    trials, artifacts = [], {}
    for kind in config.ifs:
        for m1 in config.m1:
            t0 = time.perf_counter()
            for seed in config.trial_seeds():
                rec, art = p1_trial(config, kind, int(m1), seed)
                trials.append(rec)
                artifacts[f"runs/{kind}_m{m1}/seed{seed}/attention.json"] = json.dumps(art, sort_keys=True) + "\n"
            log.info("P1 %s m1=%s: %.1fs", kind, m1, time.perf_counter() - t0)
    return ReportBundle("P1", config.to_json(), trials, summarize_p1(trials), artifacts=artifacts)


# ------------------------------------------------------------------ heat maps

def heatmap_tables(artifact) -> dict:
    """CSV texts: averaged weights plus one matrix per head (rows = observers)."""
    att = np.asarray(artifact["attention"], dtype=np.float64)  # (voters, T0+1, n)
    members, voters = artifact["members"], artifact["voters"]
    out = {"weights.csv": matrix_csv(att.mean(axis=1), voters, members)}
    for h in range(att.shape[1]):
        out[f"head_{h + 1}.csv"] = matrix_csv(att[:, h], voters, members)
    rows = []
    for k, o in enumerate(voters):
        for h in range(att.shape[1]):
            for j, target in enumerate(members):
                rows.append({"observer": int(o), "target": int(target), "head": h + 1,
                             "value": float(att[k, h, j])})
    out["attention_long.csv"] = rows_to_csv(rows)
    return out


def emit_attention_heatmap(run, out_dir=None) -> dict:
    """Heat-map CSVs for one GASSL run.

    ``run`` is a run directory holding ``attention.json``, the artifact dict
    itself, or a directory tree of runs (each one gets a ``heatmap/``
    folder).  Returns {path: text}.
    """
    if isinstance(run, dict):
        tables = heatmap_tables(run)
        if out_dir is not None:
            _dump(tables, Path(out_dir))
        return tables
    root = Path(run)
    found = [root / "attention.json"] if (root / "attention.json").exists() else sorted(root.rglob("attention.json"))
    if not found:
        raise FileNotFoundError(f"no attention.json under {root}")
    written = {}
    for path in found:
        tables = heatmap_tables(json.loads(path.read_text()))
        target = Path(out_dir) / path.parent.relative_to(root) if out_dir else path.parent / "heatmap"
        written.update({str(target / k): v for k, v in tables.items()})
        _dump(tables, target)
    return written


def _dump(tables, target: Path):
    target.mkdir(parents=True, exist_ok=True)
    for name, text in tables.items():
        (target / name).write_text(text, newline="")


# ------------------------------------------------------------------ meta / P2

def meta_checkpoint(config: ExperimentConfig):
    """(W*, trace or None) from the configured checkpoint or a fresh meta run."""
    if config.meta_checkpoint:
        payload = json.loads(Path(config.meta_checkpoint).read_text())
        return params_from_json(payload.get("params", payload)), None
    if not config.meta:
        raise ValueError("no meta checkpoint given and meta training disabled")
    hyper = config.mc_hyper()
    data = mc.MetaDataset.generate(hyper, seed=config.meta_seed)
    return mc.meta_train(data, hyper, seed=config.meta_seed)


def run_meta(config: ExperimentConfig) -> ReportBundle:
    W, trace = meta_checkpoint(config)
    rows = [{"episode": k + 1, "support_loss": float(s), "query_loss": float(q)}
            for k, (s, q) in enumerate(zip(trace.support_loss, trace.query_loss))] if trace else []
    ckpt = {"params": W.to_json(), "mc": asdict(config.mc_hyper()), "meta_seed": config.meta_seed}
    bundle = ReportBundle("meta", config.to_json(), rows, summarize_meta(rows), tables={"meta_trace": rows})
    bundle.artifacts["meta_checkpoint.json"] = json.dumps(ckpt, sort_keys=True) + "\n"
    return bundle


def summarize_meta(rows):
    if not rows:
        return []
    q = [r["query_loss"] for r in rows]
    w = max(1, min(10, len(q) // 2))
    return [{"episodes": len(q), "initial_query_mean": float(np.mean(q[:w])),
             "final_query_mean": float(np.mean(q[-w:]))}]


def scenario_sizes(s):
    if "cluster_sizes" in s:
        return [int(m) for m in s["cluster_sizes"]]
    return split_sizes(int(s["M"]), int(s["N"]))


def p2_trial(config: ExperimentConfig, scenario, seed, W):
    kind = scenario.get("ifs", "f1")
    sizes = scenario_sizes(scenario)
    state = sim.init_swarm(sizes, ifs=config.strategy(kind, seed), seed=seed, **config.sim)
    hyper = config.mc_hyper(seed=seed)
    gh = config.gassl_hyper(**({} if "max_observers" in config.gassl else {"max_observers": mc.ROUND_MAX_OBSERVERS}))
    ledger = mc.run_detection(state, hyper, W, gassl_hyper=gh, seed=seed)
    ledger.verify()
    red = ledger.redundant_total()
    rec = {"ifs": kind, "M": len(sizes), "N": state.n, "seed": seed, "complete": ledger.complete,
           "rounds": ledger.R, "redundant": red, "redundancy": red / state.n,
           "destroyed_fraction": (len(ledger.heads) + red) / state.n,
           "J_m": sim.objective_multi(ledger, state.n)[0] if ledger.complete else None}
    return rec, ledger


def summarize_p2(trials):
    rows = []
    for key in sorted({(t["ifs"], t["M"], t["N"]) for t in trials}):
        ts = [t for t in trials if (t["ifs"], t["M"], t["N"]) == key]
        rows.append({"ifs": key[0], "M": key[1], "N": key[2], "seeds": len(ts),
                     "success_rate": float(np.mean([t["complete"] for t in ts])),
                     "mean_rounds": float(np.mean([t["rounds"] for t in ts])),
                     "mean_redundancy": float(np.mean([t["redundancy"] for t in ts])),
                     "mean_destroyed_fraction": float(np.mean([t["destroyed_fraction"] for t in ts]))})
    return rows


def run_p2_suite(config: ExperimentConfig, W=None) -> ReportBundle:
    """Round-loop detection per scenario and seed; the summary doubles as the grid table."""
    if config.problem != "P2":
        raise ValueError("run_p2_suite needs problem = P2")
    if not config.scenarios:
        raise ValueError("empty scenario grid")
    if W is None:
        W, _ = meta_checkpoint(config)
    trials, artifacts = [], {}
    for s in config.scenarios:
        for seed in config.trial_seeds():
            t0 = time.perf_counter()
            rec, ledger = p2_trial(config, s, seed, W)
            trials.append(rec)
            artifacts[f"ledgers/{rec['ifs']}_M{rec['M']}_N{rec['N']}_seed{seed}.json"] = \
                json.dumps(ledger.to_json(), sort_keys=True, allow_nan=True) + "\n"
            log.info("P2 %s seed %d: R=%d complete=%s (%.1fs)", rec["ifs"], seed, rec["rounds"],
                     rec["complete"], time.perf_counter() - t0)
    summary = summarize_p2(trials)
    return ReportBundle("P2", config.to_json(), trials, summary, tables={"grid": summary}, artifacts=artifacts)


# ------------------------------------------------------------------ purity

def purity_trial(config: ExperimentConfig, kind, seed, W):
    p = config.purity
    sizes = split_sizes(int(p.get("M", 3)), int(p.get("N", 30)))
    data = mc.labeled_swarm(config.strategy(kind, seed), sizes, seed, box=float(p.get("box", 40.0)),
                            settle=int(p.get("settle", 8)), sigma_h=config.sim.get("sigma_h", 0.3))
    hyper = config.mc_hyper()
    k = len(sizes)
    gru = mc.cluster_kmeans(data.features(W, hyper), k, seed, hyper.kmeans_restarts)
    raw = mc.cluster_kmeans(data.raw, k, seed, hyper.kmeans_restarts)
    return {"ifs": kind, "seed": seed, "M": k, "N": len(data.labels),
            "purity_gru": sim.clustering_purity(gru, data.labels),
            "purity_raw": sim.clustering_purity(raw, data.labels)}


def summarize_purity(trials):
    rows = []
    for kind in sorted({t["ifs"] for t in trials}):
        ts = [t for t in trials if t["ifs"] == kind]
        rows.append({"ifs": kind, "seeds": len(ts),
                     "mean_purity_gru": float(np.mean([t["purity_gru"] for t in ts])),
                     "mean_purity_raw": float(np.mean([t["purity_raw"] for t in ts]))})
    return rows


def compare_purity_baselines(config: ExperimentConfig, W=None) -> ReportBundle:
    """K-Means purity on encoder features vs raw flattened (p ; V) windows.

    Both use the true cluster count, so only the feature space differs.
    """
    if W is None:
        W, _ = meta_checkpoint(config)
    trials = [purity_trial(config, kind, seed, W) for kind in config.ifs for seed in config.trial_seeds()]
    summary = summarize_purity(trials)
    return ReportBundle("purity", config.to_json(), trials, summary, tables={"purity": summary})


def recompute_summary(bundle: ReportBundle):
    """Aggregate rows rebuilt from the bundle's trials."""
    return {"P1": summarize_p1, "P2": summarize_p2, "purity": summarize_purity,
            "meta": summarize_meta}[bundle.problem](bundle.trials)
