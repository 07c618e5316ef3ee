"""Dataset assembly: factual splits, counterfactual test rollouts and the
on-disk format (text manifest plus little-endian float32 blobs).

Counterfactual sets share the factual episode's seed, so all arms agree
bitwise before the earliest intervention step.  Ground-truth effects compare
each treated arm's final outcome against the never-treated arm.
"""

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from .boids import SimConfig, TrajectorySample, simulate
from .errors import ConfigError, ContractError, DimensionError
from .rng import Rng, derive_seed

NEVER_TREATED = -1


def _quantize(arr: np.ndarray) -> np.ndarray:
    """Round trip through float32 so in-memory data equals the file format."""
    return arr.astype("<f4").astype(np.float64)


@dataclass
class Split:
    """Stacked factual episodes."""

    x_local: np.ndarray    # (n, T, K, 5)
    x_global: np.ndarray   # (n, T, 1)
    treatment: np.ndarray  # (n, T) uint8
    outcome: np.ndarray    # (n, T)
    intervention: np.ndarray  # (n,) int32, NEVER_TREATED when untreated

    @property
    def n(self) -> int:
        return self.x_local.shape[0]


@dataclass
class CounterfactualSet:
    """All treatment arms of the test episodes.

    Arm order is each intervention step ascending, then never-treated last.
    """

    arms: list[int]        # intervention steps; NEVER_TREATED sentinel last
    x_local: np.ndarray    # (n, A, T, K, 5)
    x_global: np.ndarray   # (n, A, T, 1)
    treatment: np.ndarray  # (n, A, T) uint8
    outcome: np.ndarray    # (n, A, T)

    @property
    def n(self) -> int:
        return self.x_local.shape[0]


@dataclass
class Dataset:
    cfg: SimConfig
    seed: int
    train: Split
    val: Split
    test: Split
    cf: CounterfactualSet
    untreated_fraction: float = 1.0 / 3.0


def _stack(samples: list[TrajectorySample]) -> Split:
    return Split(
        x_local=_quantize(np.stack([s.x_local for s in samples])),
        x_global=_quantize(np.stack([s.x_global for s in samples])),
        treatment=np.stack([s.treatment for s in samples]),
        outcome=_quantize(np.stack([s.outcome for s in samples])),
        intervention=np.array(
            [NEVER_TREATED if s.intervention_step is None else s.intervention_step
             for s in samples], dtype=np.int32),
    )


def _factual_split(cfg: SimConfig, seed: int, name: str, n: int,
                   untreated_fraction: float) -> Split:
    steps = cfg.intervention_steps
    assign = Rng(derive_seed(seed, f"assign/{name}"))
    samples = []
    for i in range(n):
        u = assign.uniforms(2)
        if u[0] < untreated_fraction:
            t_prime = None
        else:
            t_prime = steps[min(int(u[1] * len(steps)), len(steps) - 1)]
        episode_seed = derive_seed(seed, f"episode/{name}", i)
        samples.append(simulate(cfg, episode_seed, t_prime))
    return _stack(samples)


def _counterfactual_set(cfg: SimConfig, seed: int, n: int) -> CounterfactualSet:
    arms = cfg.intervention_steps + [NEVER_TREATED]
    per_arm = {arm: [] for arm in arms}
    for i in range(n):
        episode_seed = derive_seed(seed, "episode/test", i)
        for arm in arms:
            t_prime = None if arm == NEVER_TREATED else arm
            per_arm[arm].append(simulate(cfg, episode_seed, t_prime))
    stacked = [_stack(per_arm[arm]) for arm in arms]
    return CounterfactualSet(
        arms=arms,
        x_local=np.stack([s.x_local for s in stacked], axis=1),
        x_global=np.stack([s.x_global for s in stacked], axis=1),
        treatment=np.stack([s.treatment for s in stacked], axis=1),
        outcome=np.stack([s.outcome for s in stacked], axis=1),
    )


def generate_dataset(cfg: SimConfig, n_train: int, n_val: int, n_test: int,
                     seed: int, untreated_fraction: float = 1.0 / 3.0) -> Dataset:
    """Simulate every split plus the test counterfactual arms.

    Episode seeds are derived from (seed, split, index), so any subset can be
    regenerated independently and sharding cannot change results.
    """
    cfg.validate()
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError("every split needs at least one episode")
    if not (0.0 <= untreated_fraction < 1.0):
        raise ConfigError("untreated_fraction must lie in [0, 1)")
    return Dataset(
        cfg=cfg,
        seed=seed,
        train=_factual_split(cfg, seed, "train", n_train, untreated_fraction),
        val=_factual_split(cfg, seed, "val", n_val, untreated_fraction),
        test=_factual_split(cfg, seed, "test", n_test, untreated_fraction),
        cf=_counterfactual_set(cfg, seed, n_test),
        untreated_fraction=untreated_fraction,
    )


def ground_truth_ite(cf: CounterfactualSet):
    """Per-episode effect of each timing on the final outcome.

    Returns (tau, best_timing): tau[i, a] is the treated arm's last outcome
    minus the never-treated arm's, and best_timing[i] is the intervention
    step whose final outcome is largest (earliest wins ties).
    """
    if cf.arms[-1] != NEVER_TREATED:
        raise ContractError("expected the never-treated arm last")
    final = cf.outcome[:, :, -1]
    tau = final[:, :-1] - final[:, -1:]
    treated_steps = np.array(cf.arms[:-1])
    best = treated_steps[np.argmax(final[:, :-1], axis=1)]
    return tau, best


# ---------------------------------------------------------------------------
# on-disk format

_SPLIT_FIELDS = ("x_local", "x_global", "treatment", "outcome", "intervention")
_CF_FIELDS = ("x_local", "x_global", "treatment", "outcome")


def _dtype_for(name: str) -> str:
    # spellings must stay free of "|", the manifest field separator
    if name == "treatment":
        return "u1"
    if name == "intervention":
        return "<i4"
    return "<f4"


def save_dataset(ds: Dataset, out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    parser = configparser.ConfigParser()
    parser["meta"] = {
        "format": "trajset-v1",
        "seed": str(ds.seed),
        "untreated_fraction": repr(ds.untreated_fraction),
        "arms": ",".join(str(a) for a in ds.cf.arms),
    }
    parser["sim"] = ds.cfg.echo()
    parser["files"] = {}
    written = []

    def put(stem: str, name: str, arr: np.ndarray):
        fname = f"{stem}_{name}.bin"
        path = os.path.join(out_dir, fname)
        arr.astype(_dtype_for(name)).tofile(path)
        shape = ",".join(str(s) for s in arr.shape)
        parser["files"][f"{stem}_{name}"] = f"{fname}|{_dtype_for(name)}|{shape}"
        written.append(path)

    for stem, split in (("train", ds.train), ("val", ds.val), ("test", ds.test)):
        for name in _SPLIT_FIELDS:
            put(stem, name, getattr(split, name))
    for name in _CF_FIELDS:
        put("cf", name, getattr(ds.cf, name))

    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w", encoding="utf-8") as fh:
        parser.write(fh)
    written.append(manifest)
    return written


def _read_field(out_dir, parser, key):
    try:
        fname, dtype, shape_txt = parser["files"][key].split("|")
    except KeyError as exc:
        raise ContractError(f"dataset manifest missing field {key!r}") from exc
    shape = tuple(int(s) for s in shape_txt.split(","))
    path = os.path.join(out_dir, fname)
    arr = np.fromfile(path, dtype=dtype)
    if arr.size != int(np.prod(shape)):
        raise DimensionError(f"field {key!r} does not match its declared shape")
    arr = arr.reshape(shape)
    if dtype == "<f4":
        arr = arr.astype(np.float64)
    elif dtype == "<i4":
        arr = arr.astype(np.int32)
    return arr


def sim_config_from_echo(echo: dict) -> SimConfig:
    import ast

    kwargs = {}
    for f in SimConfig.__dataclass_fields__:
        if f not in echo:
            raise ConfigError(f"dataset manifest missing sim field {f!r}")
        kwargs[f] = ast.literal_eval(echo[f])
    return SimConfig(**kwargs).validate()


def load_dataset(out_dir: str) -> Dataset:
    manifest = os.path.join(out_dir, "manifest.txt")
    if not os.path.exists(manifest):
        raise ContractError(f"no dataset manifest under {out_dir!r}")
    parser = configparser.ConfigParser()
    parser.read(manifest)
    if parser["meta"].get("format") != "trajset-v1":
        raise ContractError("unrecognized dataset format")
    cfg = sim_config_from_echo(dict(parser["sim"]))
    arms = [int(a) for a in parser["meta"]["arms"].split(",")]

    def split(stem):
        return Split(*[_read_field(out_dir, parser, f"{stem}_{n}")
                       for n in _SPLIT_FIELDS])

    cf = CounterfactualSet(arms, *[_read_field(out_dir, parser, f"cf_{n}")
                                   for n in _CF_FIELDS])
    return Dataset(
        cfg=cfg,
        seed=int(parser["meta"]["seed"]),
        train=split("train"),
        val=split("val"),
        test=split("test"),
        cf=cf,
        untreated_fraction=float(parser["meta"]["untreated_fraction"]),
    )
