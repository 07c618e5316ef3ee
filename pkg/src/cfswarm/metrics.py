"""Counterfactual evaluation metrics over the test episodes.

All prediction-quality metrics run over every treatment arm of the test
set's counterfactual rollouts.  Outcome steps are evaluated on the window
the outcome array exposes from the end of burn-in onward (indices T_b-2 ..
T-1, the momentum values at world steps T_b .. T+1); covariates over the
free-run steps T_b .. T-1.  Effect metrics compare final-step effect
estimates per arm; the rooted PEHE and the absolute ATE error are computed
per arm and averaged over arms.  Standard errors come from per-episode
statistics (for the arm-averaged quantities, the SE of the per-episode
aggregate).
"""

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .boids import SimConfig
from .data import CounterfactualSet, Dataset, ground_truth_ite
from .errors import ContractError, DimensionError
from .model import CrnModel, predict_ite
from .optim import ParamStore


@dataclass
class MetricsReport:
    l_outcome: float
    l_outcome_se: float
    l_covariates: float
    l_covariates_se: float
    pehe_sqrt: float
    pehe_sqrt_se: float
    ate_abs_err: float
    ate_abs_err_se: float
    timing_err: float
    timing_err_se: float
    cf_uplift: float
    cf_uplift_se: float
    n_episodes: int = 0
    variant: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _se(per_episode: np.ndarray) -> float:
    n = per_episode.size
    if n < 2:
        return 0.0
    return float(per_episode.std(ddof=1) / np.sqrt(n))


def effect_errors(tau_hat: np.ndarray, tau_true: np.ndarray):
    """Per-arm rooted PEHE and absolute ATE error for (n, A) estimates.

    pehe[a] = sqrt(mean_i (tau_hat - tau_true)^2); ate[a] = |mean_i diff|.
    """
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    tau_true = np.asarray(tau_true, dtype=np.float64)
    if tau_hat.shape != tau_true.shape or tau_hat.ndim != 2:
        raise DimensionError("effect arrays must be identically shaped (n, A)")
    err = tau_hat - tau_true
    return np.sqrt((err ** 2).mean(axis=0)), np.abs(err.mean(axis=0))


def outcome_window(cfg: SimConfig) -> np.ndarray:
    """Outcome indices scored by the report (burn-in end through T+1)."""
    return np.arange(cfg.burn_in - 2, cfg.n_steps)


def covariate_window(cfg: SimConfig) -> np.ndarray:
    """World steps whose covariates are model predictions."""
    return np.arange(cfg.burn_in, cfg.n_steps)


def compute_metrics(cf: CounterfactualSet, factual_outcome: np.ndarray,
                    y_pred: np.ndarray, x_loc_pred: np.ndarray,
                    x_g_pred: np.ndarray, best_pred: np.ndarray,
                    cfg: SimConfig, variant: str = ""):
    """Assemble the report from prediction arrays.

    y_pred (n, A, T) aligns with cf.outcome; x_loc_pred (n, A, T, K, 5) and
    x_g_pred (n, A, T, 1) hold at index t the prediction for step t+1;
    best_pred (n,) holds predicted best intervention steps.  Returns
    (MetricsReport, per-episode dict).
    """
    n, n_arms, n_steps = cf.outcome.shape
    if y_pred.shape != (n, n_arms, n_steps):
        raise DimensionError("y_pred must match the counterfactual outcomes")
    ow = outcome_window(cfg)
    cw = covariate_window(cfg)

    # outcome error over evaluated steps and every arm
    abs_err = np.abs(y_pred[:, :, ow] - cf.outcome[:, :, ow])
    ep_outcome = abs_err.mean(axis=(1, 2))

    # covariate error: per-step euclidean distance, RMS-normalized per
    # variable so widths are comparable across covariate dimensionalities
    k = cf.x_local.shape[3]
    n_var = k * 5 + 1
    d_loc = (x_loc_pred[:, :, cw - 1] - cf.x_local[:, :, cw])
    d_g = (x_g_pred[:, :, cw - 1] - cf.x_global[:, :, cw])
    sq = (d_loc ** 2).sum(axis=(3, 4)) + (d_g ** 2).sum(axis=3)
    ep_cov = np.sqrt(sq / n_var).mean(axis=(1, 2))

    # effect metrics on final-step estimates
    tau_true, best_true = ground_truth_ite(cf)
    y_final = y_pred[:, :, -1]
    tau_hat = y_final[:, :-1] - y_final[:, -1:]
    pehe_per_arm, ate_per_arm = effect_errors(tau_hat, tau_true)
    err = tau_hat - tau_true
    ep_pehe = np.sqrt((err ** 2).mean(axis=1))
    ep_ate = err.mean(axis=1)

    ep_timing = np.abs(best_pred.astype(np.float64) - best_true)

    base = factual_outcome[:, cfg.burn_in - 1]
    ep_uplift = y_pred[:, :, ow].max(axis=(1, 2)) - base

    report = MetricsReport(
        l_outcome=float(ep_outcome.mean()), l_outcome_se=_se(ep_outcome),
        l_covariates=float(ep_cov.mean()), l_covariates_se=_se(ep_cov),
        pehe_sqrt=float(pehe_per_arm.mean()), pehe_sqrt_se=_se(ep_pehe),
        ate_abs_err=float(ate_per_arm.mean()), ate_abs_err_se=_se(ep_ate),
        timing_err=float(ep_timing.mean()), timing_err_se=_se(ep_timing),
        cf_uplift=float(ep_uplift.mean()), cf_uplift_se=_se(ep_uplift),
        n_episodes=n, variant=variant)
    per_episode = {"l_outcome": ep_outcome, "l_covariates": ep_cov,
                   "pehe_sqrt": ep_pehe, "ate_err": ep_ate,
                   "timing_err": ep_timing, "cf_uplift": ep_uplift,
                   "tau_hat": tau_hat, "tau_true": tau_true,
                   "best_pred": best_pred, "best_true": best_true}
    return report, per_episode


def evaluate(model: CrnModel, store: ParamStore, dataset: Dataset,
             mc_samples: int = 0, seed: int = 0, chunk: int = 32,
             dump_dir: str | None = None):
    """Run counterfactual predictions over the test set and score them.

    Read-only with respect to the parameters.  When dump_dir is given, the
    raw prediction arrays are written as float64 blobs with a manifest so
    every report field can be recomputed offline, alongside report.json and
    per_episode.csv.
    """
    cf = dataset.cf
    if cf.outcome.shape[0] == 0:
        raise ContractError("evaluation needs a counterfactual set")
    cfg = model.cfg
    arms = [a for a in cf.arms if a >= 0]
    prefix_x = cf.x_local[:, -1].astype(np.float64)
    prefix_g = cf.x_global[:, -1].astype(np.float64)
    pred = predict_ite(model, store, prefix_x, prefix_g, arms=arms,
                       mc_samples=mc_samples, seed=seed, chunk=chunk,
                       trace=True)
    report, per_episode = compute_metrics(
        cf, dataset.test.outcome.astype(np.float64), pred["y_all"],
        pred["x_loc_hat"], pred["x_g_hat"], pred["best_timing"], cfg,
        variant=model.variant.value)
    if dump_dir is not None:
        write_eval_dump(Path(dump_dir), report, per_episode, pred, cf)
    return report, per_episode, pred


def write_eval_dump(out: Path, report: MetricsReport, per_episode: dict,
                    pred: dict, cf: CounterfactualSet) -> None:
    out.mkdir(parents=True, exist_ok=True)
    blobs = {
        "y_pred": pred["y_all"], "a_pred": pred["a_all"],
        "x_loc_pred": pred["x_loc_hat"], "x_g_pred": pred["x_g_hat"],
        "tau_hat": per_episode["tau_hat"], "tau_true": per_episode["tau_true"],
        "best_pred": per_episode["best_pred"].astype(np.float64),
        "best_true": per_episode["best_true"].astype(np.float64),
        "y_true": cf.outcome.astype(np.float64),
        "x_loc_true": cf.x_local.astype(np.float64),
        "x_g_true": cf.x_global.astype(np.float64),
    }
    lines = ["[dump]", "format = eval-dump-v1",
             f"arms = {' '.join(str(a) for a in cf.arms)}"]
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        (out / f"{name}.bin").write_bytes(arr.tobytes())
        lines.append(f"{name} = {' '.join(str(s) for s in arr.shape)}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")

    (out / "report.json").write_text(report.to_json() + "\n")
    scalar_keys = [k for k in per_episode
                   if per_episode[k].ndim == 1]
    with open(out / "per_episode.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode"] + scalar_keys)
        for i in range(report.n_episodes):
            writer.writerow([i] + [repr(float(per_episode[k][i]))
                                   for k in scalar_keys])


def read_eval_dump(path: Path) -> dict:
    """Load a dump written by write_eval_dump; inverse for offline checks."""
    path = Path(path)
    arrays = {}
    arms = None
    for line in (path / "manifest.txt").read_text().splitlines():
        if "=" not in line or line.startswith("["):
            continue
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key == "format":
            if val != "eval-dump-v1":
                raise ContractError(f"unknown dump format {val!r}")
        elif key == "arms":
            arms = [int(v) for v in val.split()]
        else:
            shape = tuple(int(v) for v in val.split())
            raw = (path / f"{key}.bin").read_bytes()
            arrays[key] = np.frombuffer(raw, dtype="<f8").reshape(shape)
    arrays["arms"] = arms
    return arrays
