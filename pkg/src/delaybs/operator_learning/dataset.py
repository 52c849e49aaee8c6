"""Supervised records ``(tau, x, u) -> U`` harvested from closed-loop runs.

Records keep the state at simulation resolution so that every label can be
recomputed exactly by the analytic law; :meth:`Dataset.tensor` resamples
to the ``3 x m x m`` network input on demand.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from ..coefficients import D1, D2, make_delay
from ..controller import AnalyticController
from ..errors import CorruptFile, DelayBSError, FormatVersionMismatch, ScenarioFailure
from ..simulator import SimConfig, simulate

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@lru_cache(maxsize=64)
def resample_matrix(n_from, n_to):
    """Linear-interpolation matrix from ``n_from`` to ``n_to`` uniform nodes on [0, 1].

    The returned array is shared between callers and must not be modified.
    """
    if n_from < 2 or n_to < 2:
        raise ValueError("need at least two nodes")
    dst = np.linspace(0.0, 1.0, n_to)
    pos = np.clip(dst * (n_from - 1), 0, n_from - 1)
    i0 = np.minimum(np.floor(pos + 1e-12).astype(int), n_from - 2)
    fr = np.clip(pos - i0, 0.0, 1.0)
    R = np.zeros((n_to, n_from))
    R[np.arange(n_to), i0] += 1 - fr
    R[np.arange(n_to), i0 + 1] += fr
    R[np.abs(R) < 1e-15] = 0.0
    R.setflags(write=False)
    return R


def to_channels(tau, x, u, m):
    """Stack ``(B, n)``, ``(B, n)``, ``(B, n, nr)`` into ``(B, 3, m, m)``.

    ``tau`` and ``x`` are constant along ``r``.
    """
    tau = np.atleast_2d(tau)
    x = np.atleast_2d(x)
    if u.ndim == 2:
        u = u[None]
    Rs = resample_matrix(x.shape[1], m)
    Rr = resample_matrix(u.shape[2], m)
    tm = tau @ Rs.T
    xm = x @ Rs.T
    um = Rs @ u @ Rr.T
    out = np.empty((x.shape[0], 3, m, m))
    out[:, 0] = tm[:, :, None]
    out[:, 1] = xm[:, :, None]
    out[:, 2] = um
    return out


@dataclass
class Dataset:
    tau: np.ndarray  # (N, n)
    x: np.ndarray  # (N, n)
    u: np.ndarray  # (N, n, nr)
    U: np.ndarray  # (N,)
    scenario: np.ndarray  # (N,) index into ``scenarios``
    scenarios: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.U.size)

    @property
    def n(self):
        return self.x.shape[1]

    @property
    def nr(self):
        return self.u.shape[2]

    def region_counts(self):
        out = {D1: 0, D2: 0}
        for sc in self.scenarios:
            out[sc["region"]] = out.get(sc["region"], 0) + 1
        return out

    def tensor(self, m, idx=None):
        sl = slice(None) if idx is None else idx
        return to_channels(self.tau[sl], self.x[sl], self.u[sl], m)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.tau[idx], self.x[idx], self.u[idx], self.U[idx], self.scenario[idx], self.scenarios, dict(self.meta))

    def split(self, frac_test=0.1, seed=0, by_scenario=True):
        """Train/test split; by default whole scenarios are held out."""
        rng = np.random.default_rng(seed)
        if by_scenario:
            ids = np.unique(self.scenario)
            rng.shuffle(ids)
            k = max(1, int(round(frac_test * ids.size))) if ids.size > 1 else 0
            test = np.isin(self.scenario, ids[:k])
        else:
            perm = rng.permutation(len(self))
            test = np.zeros(len(self), bool)
            test[perm[: int(round(frac_test * len(self)))]] = True
        return self.subset(np.flatnonzero(~test)), self.subset(np.flatnonzero(test))

    def delay(self, k):
        """Nominal delay of scenario ``k`` rebuilt from its parameters."""
        sc = self.scenarios[k]
        return make_delay(sc["family"], sc["params"], self.n, validate=False)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            header = {
                "format_version": FORMAT_VERSION,
                "kind": "delaybs-dataset",
                "n": self.n,
                "nr": self.nr,
                "records": len(self),
                "scenarios": self.scenarios,
                "meta": self.meta,
            }
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for i in range(len(self)):
                rec = {
                    "scenario": int(self.scenario[i]),
                    "U": float(self.U[i]),
                    "tau": self.tau[i].tolist(),
                    "x": self.x[i].tolist(),
                    "u": self.u[i].tolist(),
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def read_jsonl(cls, path):
        try:
            with open(path) as fh:
                header = json.loads(fh.readline())
                if header.get("format_version") != FORMAT_VERSION:
                    raise FormatVersionMismatch(
                        f"dataset format {header.get('format_version')} != {FORMAT_VERSION}"
                    )
                recs = [json.loads(line) for line in fh if line.strip()]
        except json.JSONDecodeError as e:
            raise CorruptFile(f"{path}: {e}") from e
        if len(recs) != header["records"]:
            raise CorruptFile(f"{path}: expected {header['records']} records, found {len(recs)}")
        n, nr = header["n"], header["nr"]
        if recs:
            tau = np.array([r["tau"] for r in recs], dtype=float)
            x = np.array([r["x"] for r in recs], dtype=float)
            u = np.array([r["u"] for r in recs], dtype=float)
        else:
            tau, x, u = np.zeros((0, n)), np.zeros((0, n)), np.zeros((0, n, nr))
        if tau.shape[1:] != (n,) or u.shape[1:] != (n, nr):
            raise CorruptFile(f"{path}: record shapes do not match the header")
        U = np.array([r["U"] for r in recs], dtype=float)
        sc = np.array([r["scenario"] for r in recs], dtype=int)
        return cls(tau, x, u, U, sc, header["scenarios"], header["meta"])


def empty_dataset(n, nr):
    return Dataset(np.zeros((0, n)), np.zeros((0, n)), np.zeros((0, n, nr)), np.zeros(0), np.zeros(0, int))


def concat(parts, scenarios, meta):
    return Dataset(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        np.concatenate([p[3] for p in parts]),
        np.concatenate([p[4] for p in parts]),
        scenarios,
        meta,
    )


class _Scaled:
    """Applies ``gain * ctrl`` while exposing the exact value as ``last``."""

    def __init__(self, ctrl, gain):
        self.ctrl = ctrl
        self.gain = gain
        self.last = 0.0

    def __call__(self, tau_samples, x, u):
        self.last = float(self.ctrl(tau_samples, x, u))
        return self.gain * self.last


def _run_scenario(k, coeffs, scenario, config, stride, gains=()):
    tau, x0 = scenario.tau, scenario.x0
    try:
        ctrl = AnalyticController(coeffs.on_grid(config.n), make_delay(tau.family, tau.params, config.n), nr=config.nr)
    except DelayBSError as e:
        raise ScenarioFailure(f"scenario {k}: {e}") from e
    rec = ([], [], [], [])
    steps = config.steps
    cap = [None]

    def recorder(label):
        def on_step(i, t, ts, x, u, U):
            # the value computed at the horizon is never applied to a step
            if i < steps and i % stride == 0:
                U = label()
                a = max(np.abs(x).max(), np.abs(u).max())
                if cap[0] is None:
                    cap[0] = a
                # linear in (x, u): rescaling keeps the label exact
                w = cap[0] / a if a > cap[0] else 1.0
                rec[0].append(np.array(ts, dtype=float))
                rec[1].append(w * x)
                rec[2].append(w * u)
                rec[3].append(w * U)

        return on_step

    base = replace(config, snapshot_stride=10**9)
    exact = _Scaled(ctrl, 1.0)
    tr = simulate(coeffs, tau, x0, replace(base, controller=exact), on_step=recorder(lambda: exact.last))
    if tr.diverged:
        raise ScenarioFailure(f"scenario {k}: closed loop diverged")
    for gain in gains:
        # off-manifold states an imperfect controller visits; blow-up only truncates
        pert = _Scaled(ctrl, gain)
        simulate(coeffs, tau, x0, replace(base, controller=pert), on_step=recorder(lambda: pert.last))
    cnt = len(rec[3])
    return (np.array(rec[0]), np.array(rec[1]), np.array(rec[2]), np.array(rec[3]), np.full(cnt, k))


def generate_dataset(sampler, counts, configs, coeffs, strides=1, workers=1, gain_range=None, gain_runs=1):
    """Closed-loop records for ``counts = {region: pairs}``.

    ``configs`` and ``strides`` are either single values or mappings keyed by
    region.  All scenarios are drawn from ``sampler`` up front (in region
    order D1 then D2) so the result does not depend on ``workers``.  A
    scenario whose kernel fails is logged and skipped.

    With ``gain_range = (lo, hi)`` every pair is simulated ``gain_runs`` more
    times with its control multiplied by gains drawn from ``U(lo, hi)``.  Those records
    still carry the exact control value as label; records larger than the
    pair's initial state are scaled down onto it, which is exact because the
    law is linear in ``(x, u)``.
    """
    def per_region(v, region):
        return v[region] if isinstance(v, dict) else v

    jobs = []
    for region in (D1, D2):
        for _ in range(int(counts.get(region, 0))):
            jobs.append((region, sampler.sample_scenario(region)))
    grng = np.random.default_rng([int(sampler.seed), 1])
    gains = [[] for _ in jobs]
    if gain_range is not None:
        lo, hi = map(float, gain_range)
        if not 0 <= lo <= hi:
            raise ValueError(f"gain_range must satisfy 0 <= lo <= hi, got {gain_range}")
        if int(gain_runs) < 1:
            raise ValueError(f"gain_runs must be >= 1, got {gain_runs}")
        gains = grng.uniform(lo, hi, (len(jobs), int(gain_runs))).tolist()
    metas = []
    tasks = []
    for k, (region, sc) in enumerate(jobs):
        cfg = per_region(configs, region)
        if not isinstance(cfg, SimConfig):
            cfg = SimConfig(**cfg)
        stride = int(per_region(strides, region))
        metas.append(
            {
                "region": region,
                "family": sc.tau.family,
                "params": sc.tau.params,
                "x0_params": sc.x0_params,
                "dt": cfg.dt,
                "T": cfg.T,
                "stride": stride,
                "gains": gains[k],
            }
        )
        tasks.append((k, coeffs, sc, cfg, stride, gains[k]))

    def run(task):
        try:
            return _run_scenario(*task)
        except ScenarioFailure as e:
            log.warning("%s; skipped", e)
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    parts = [r for r in results if r is not None and r[3].size]
    for k, r in enumerate(results):
        metas[k]["skipped"] = r is None
    meta = {
        "seed": sampler.seed,
        "counts": {k: int(v) for k, v in counts.items()},
        "gain_range": None if gain_range is None else [float(g) for g in gain_range],
        "gain_runs": int(gain_runs) if gain_range is not None else 0,
    }
    if not parts:
        n = tasks[0][3].n if tasks else sampler.n
        ds = empty_dataset(n, n)
        ds.scenarios, ds.meta = metas, meta
        return ds
    return concat(parts, metas, meta)


def label_audit(dataset, coeffs, rtol=1e-6, atol=1e-12):
    """Fraction of records whose label the analytic law reproduces."""
    ok = 0
    worst = 0.0
    for k in np.unique(dataset.scenario):
        idx = np.flatnonzero(dataset.scenario == k)
        ctrl = AnalyticController(coeffs.on_grid(dataset.n), dataset.delay(k), nr=dataset.nr)
        for i in idx:
            U = ctrl(dataset.tau[i], dataset.x[i], dataset.u[i])
            err = abs(U - dataset.U[i])
            worst = max(worst, err / max(abs(dataset.U[i]), atol))
            ok += err <= rtol * abs(dataset.U[i]) + atol
    return ok / max(len(dataset), 1), worst
