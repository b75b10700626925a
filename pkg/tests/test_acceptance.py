"""Acceptance suite: one test per criterion, at its stated tolerance.

Each test prints a PASS/FAIL line in the terminal summary (see conftest).
Distributed criteria run real studies under the launcher with real
processes and sockets; desk-scale parameters keep the whole suite within
a few minutes.
"""

import functools
import hashlib
import time
from pathlib import Path

import numpy as np

from ensda.checkpoint import read_snapshot
from ensda.config import KillSpec, StudyConfig, write_study_config
from ensda.enkf import ObservationSet, enkf_update
from ensda.launcher import EXIT_BUDGET, EXIT_DONE, run_study
from ensda.metrics import read_events
from ensda.models import init_ensemble, make_model
from ensda.observations import TwinObservationSource, observation_indices
from ensda.reference import run_reference_study
from ensda.scheduling import optimal_makespan, simulate_schedule

from .conftest import record_acceptance


def acceptance(number, name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException:
                record_acceptance(number, name, False)
                raise
            record_acceptance(number, name, True, detail or "")

        return wrapper

    return deco


def launch(tmp_path, config):
    path = tmp_path / "study.cfg"
    write_study_config(config, path)
    return run_study(config, path)


def final_file_digest(config):
    return hashlib.sha256(Path(config.ensemble_out).read_bytes()).hexdigest()


@acceptance(1, "EnKF oracle equivalence (scalar, M=10^4, 3 std errors, < 5 s)")
def test_criterion_1_enkf_oracle():
    rng = np.random.default_rng(424242)
    members = 10_000
    prior = rng.normal(1.0, 2.0, members).reshape(1, members)
    obs = ObservationSet(y=np.array([0.4]), indices=np.array([0]), r_diag=np.array([1.0]))
    t0 = time.perf_counter()
    post = enkf_update(prior, obs, cycle=0, seed=777)
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0, f"update took {elapsed:.2f} s"

    # exact Kalman posterior for the empirical Gaussian prior
    mean_b = prior.mean()
    var_b = prior.var(ddof=1)
    gain = var_b / (var_b + 1.0)
    mean_post = mean_b + gain * (0.4 - mean_b)
    var_post = (1.0 - gain) * var_b
    se_mean = np.sqrt(var_post / members)
    se_var = var_post * np.sqrt(2.0 / (members - 1))
    dm = abs(post.mean() - mean_post)
    dv = abs(post.var(ddof=1) - var_post)
    assert dm <= 3 * se_mean, f"mean off by {dm / se_mean:.2f} standard errors"
    assert dv <= 3 * se_var, f"variance off by {dv / se_var:.2f} standard errors"
    return f"{elapsed:.2f} s, z_mean={dm / se_mean:.2f}, z_var={dv / se_var:.2f}"


@acceptance(2, "twin-experiment skill (Lorenz-96, RMSE < 0.5 x free run, < 60 s)")
def test_criterion_2_twin_skill():
    t0 = time.perf_counter()
    config = StudyConfig(
        model="lorenz96", n_dynamic=40, n_assimilated=40, members=32, cycles=50,
        nsteps=2, spinup_steps=500, seed=2026, init_noise=1.0, obs_count=20,
        obs_sigma=1.0,
    )
    model = make_model(config.model_spec())
    base = model.propagate_pure(model.initial_state(), config.spinup_steps)
    members = {m.member_id: m.values for m in init_ensemble(base, 32, 1.0, config.seed)}
    free = dict(members)
    source = TwinObservationSource(config, base)

    rmse_assim, rmse_free = [], []
    ids = sorted(members)
    for cycle in range(config.cycles):
        members = {i: model.propagate_pure(members[i], config.nsteps) for i in ids}
        free = {i: model.propagate_pure(free[i], config.nsteps) for i in ids}
        obs = source.observe(cycle)
        matrix = np.column_stack([members[i] for i in ids])
        analysis = enkf_update(matrix, obs, cycle=cycle, seed=config.seed, member_ids=ids)
        members = {i: analysis[:, c] for c, i in enumerate(ids)}
        truth = source.truth
        rmse_assim.append(np.sqrt(np.mean((np.mean(list(members.values()), 0) - truth) ** 2)))
        rmse_free.append(np.sqrt(np.mean((np.mean(list(free.values()), 0) - truth) ** 2)))

    skill = np.mean(rmse_assim[25:])
    baseline = np.mean(rmse_free[25:])
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    assert skill < 0.5 * baseline, f"RMSE {skill:.3f} vs free {baseline:.3f}"
    return f"RMSE {skill:.2f} vs free {baseline:.2f} in {elapsed:.1f} s"


@acceptance(3, "update walltime fits a + b*M^2 with R^2 >= 0.9 (N=10^4, K=288)")
def test_criterion_3_update_scaling():
    n, k = 10_000, 288
    rng = np.random.default_rng(3)
    obs = ObservationSet(
        y=rng.normal(size=k), indices=observation_indices(n, k), r_diag=np.ones(k)
    )
    sizes = (8, 16, 32, 64, 128)
    medians = []
    for m in sizes:
        ensemble = rng.normal(size=(n, m))
        reps = []
        for _ in range(5):
            t0 = time.perf_counter()
            enkf_update(ensemble, obs, cycle=0, seed=1)
            reps.append(time.perf_counter() - t0)
        medians.append(float(np.median(reps)))
    x = np.array(sizes, dtype=float) ** 2
    y = np.array(medians)
    slope, intercept = np.polyfit(x, y, 1)
    residuals = y - (intercept + slope * x)
    r2 = 1.0 - (residuals**2).sum() / ((y - y.mean()) ** 2).sum()
    assert r2 >= 0.9, f"R^2 = {r2:.3f}"
    assert slope > 0
    return f"R^2 = {r2:.3f}, walltimes {[round(t * 1e3, 1) for t in medians]} ms"


@acceptance(4, "Graham bound on 200 random instances (<= 10 members, <= 3 runners)")
def test_criterion_4_graham_bound():
    rng = np.random.default_rng(1966)
    worst = 0.0
    for _ in range(200):
        tasks = int(rng.integers(1, 11))
        machines = int(rng.integers(1, 4))
        durations = rng.uniform(0.05, 10.0, size=tasks).tolist()
        greedy = simulate_schedule(durations, machines).makespan
        best = optimal_makespan(durations, machines)
        bound = (2.0 - 1.0 / machines) * best
        assert greedy <= bound + 1e-9, f"{greedy} > {bound} on {durations} x{machines}"
        worst = max(worst, greedy / best)
    return f"worst greedy/optimal ratio {worst:.3f}"


@acceptance(5, "propagation efficiency >= 85% at 8 members/runner, >= 93% at 16")
def test_criterion_5_efficiency(tmp_path, port_block):
    t_start = time.perf_counter()

    def prop_walltime(runners):
        run_dir = tmp_path / f"eff{runners}"
        run_dir.mkdir()
        config = StudyConfig(
            model="varcost", n_dynamic=512, n_assimilated=512,
            varcost_base_ms=150.0, varcost_spread_ms=100.0,
            members=128, cycles=3, nsteps=1, seed=909, obs_count=25,
            runners=runners, base_port=port_block(20), launcher_port=port_block(2),
            runner_timeout_s=30.0, server_timeout_s=8.0, connect_timeout_s=60.0,
            checkpoint_dir=str(run_dir / "ckpt"),
            metrics_path=str(run_dir / "metrics.jsonl"),
            ensemble_out=str(run_dir / "final.bin"),
        )
        assert launch(run_dir, config) == EXIT_DONE
        events = read_events(config.metrics_path)
        walls = [
            e["wall_ms"]
            for e in events
            if e["event"] == "phase" and e["phase"] == "propagate" and e["cycle"] >= 1
        ]
        assert len(walls) == 2
        return float(np.mean(walls))

    baseline = prop_walltime(1)
    t16 = prop_walltime(16)
    t8 = prop_walltime(8)
    eff16 = baseline / (16 * t16)
    eff8 = baseline / (8 * t8)
    elapsed = time.perf_counter() - t_start
    assert elapsed < 600.0
    assert eff16 >= 0.85, f"8 members/runner efficiency {eff16:.3f}"
    assert eff8 >= 0.93, f"16 members/runner efficiency {eff8:.3f}"
    return f"eff(16 runners)={eff16:.2%}, eff(8 runners)={eff8:.2%}, {elapsed:.0f} s"


@acceptance(6, "assignment invariance: identical final ensembles across 8 configurations")
def test_criterion_6_assignment_invariance(tmp_path, port_block):
    digests = {}
    for runners in (1, 2, 4, 8):
        for inject in (False, True):
            run_dir = tmp_path / f"inv_{runners}_{int(inject)}"
            run_dir.mkdir()
            config = StudyConfig(
                model="lorenz96", n_dynamic=48, n_assimilated=40, members=16,
                cycles=5, nsteps=3000, seed=606, obs_count=20, obs_sigma=1.0,
                runners=runners, base_port=port_block(8), launcher_port=port_block(2),
                runner_timeout_s=30.0, server_timeout_s=8.0, connect_timeout_s=60.0,
                max_member_restarts=10, max_restarts=40,
                kill_runners=[KillSpec(cycle=3, count=2, delay_ms=100)] if inject else [],
                checkpoint_dir=str(run_dir / "ckpt"),
                metrics_path=str(run_dir / "metrics.jsonl"),
                ensemble_out=str(run_dir / "final.bin"),
            )
            assert launch(run_dir, config) == EXIT_DONE, (runners, inject)
            digests[(runners, inject)] = final_file_digest(config)
            if inject:
                events = read_events(config.metrics_path)
                assert any(e["event"] == "kill_injected" for e in events), (runners, inject)
    unique = set(digests.values())
    assert len(unique) == 1, f"hashes diverged: {digests}"
    return f"8/8 identical ({next(iter(unique))[:12]})"


@acceptance(7, "fault tolerance: kill 4 of 9 runners, fleet recovers, result matches oracle")
def test_criterion_7_fault_tolerance(tmp_path, port_block):
    config = StudyConfig(
        model="varcost", n_dynamic=256, n_assimilated=256,
        varcost_base_ms=700.0, varcost_spread_ms=0.0,
        members=30, cycles=4, nsteps=1, seed=303, obs_count=25,
        runners=9, base_port=port_block(12), launcher_port=port_block(2),
        runner_timeout_s=6.0, server_timeout_s=8.0, connect_timeout_s=60.0,
        max_member_restarts=10, max_restarts=40,
        kill_runners=[KillSpec(cycle=2, count=4, delay_ms=150)],
        checkpoint_dir=str(tmp_path / "ckpt"),
        metrics_path=str(tmp_path / "metrics.jsonl"),
        ensemble_out=str(tmp_path / "final.bin"),
    )
    assert launch(tmp_path, config) == EXIT_DONE
    events = read_events(config.metrics_path)

    kills = [e for e in events if e["event"] == "kill_injected"]
    assert len(kills) == 4
    kill_t = max(e["t_ms"] for e in kills)
    killed = {e["runner"] for e in kills}

    # replacements joined within 2 x runner_timeout of the kill
    joined = [
        e for e in events
        if e["event"] == "runner_ready" and e["runner"] not in killed and e["t_ms"] > kill_t
    ]
    assert len(joined) >= 4, f"only {len(joined)} replacements joined"
    for e in joined[:4]:
        assert e["t_ms"] - kill_t <= 2 * config.runner_timeout_s * 1000

    # by the next propagation phase the fleet is back to 9 active runners
    next_cycle_runners = {
        e["runner"] for e in events if e["event"] == "assign" and e["cycle"] == 3
    }
    assert len(next_cycle_runners) == 9, f"cycle 3 used {len(next_cycle_runners)} runners"

    expected = run_reference_study(config)
    snap = read_snapshot(config.ensemble_out, config.semantic_hash())
    for member in snap.members:
        assert np.array_equal(member.values, expected[member.member_id])
    return f"{len(joined)} replacements, cycle-3 fleet of {len(next_cycle_runners)}"


@acceptance(8, "server crash recovery: SIGKILL after a cycle, restore, identical result")
def test_criterion_8_server_recovery(tmp_path, port_block):
    config = StudyConfig(
        model="varcost", n_dynamic=256, n_assimilated=256,
        varcost_base_ms=300.0, varcost_spread_ms=0.0,
        members=8, cycles=4, nsteps=1, seed=202, obs_count=16,
        runners=2, base_port=port_block(8), launcher_port=port_block(2),
        runner_timeout_s=10.0, server_timeout_s=3.0, connect_timeout_s=60.0,
        kill_server_cycle=1, kill_server_delay_ms=100,
        checkpoint_dir=str(tmp_path / "ckpt"),
        metrics_path=str(tmp_path / "metrics.jsonl"),
        ensemble_out=str(tmp_path / "final.bin"),
    )
    assert launch(tmp_path, config) == EXIT_DONE  # zero user interaction
    events = read_events(config.metrics_path)
    assert any(e["event"] == "server_restart" for e in events)
    assert any(e["event"] == "server_start" and e["restored"] for e in events)
    expected = run_reference_study(config)
    snap = read_snapshot(config.ensemble_out, config.semantic_hash())
    for member in snap.members:
        assert np.array_equal(member.values, expected[member.member_id])
    return "restored from checkpoint, final ensemble identical"


@acceptance(9, "restart budget: member policy fires without stopping; budget exhaustion aborts")
def test_criterion_9_restart_budget(tmp_path, port_block):
    # (a) always-NaN member exhausts its restarts and is dropped; study completes
    drop_dir = tmp_path / "drop"
    drop_dir.mkdir()
    config = StudyConfig(
        model="lorenz96", n_dynamic=24, n_assimilated=16, members=6, cycles=2,
        nsteps=5, seed=101, obs_count=8, nan_member=2,
        member_failure_policy="drop", max_member_restarts=1,
        runners=2, base_port=port_block(8), launcher_port=port_block(2),
        runner_timeout_s=6.0, server_timeout_s=6.0, connect_timeout_s=60.0,
        max_restarts=30,
        checkpoint_dir=str(drop_dir / "ckpt"),
        metrics_path=str(drop_dir / "metrics.jsonl"),
        ensemble_out=str(drop_dir / "final.bin"),
    )
    assert launch(drop_dir, config) == EXIT_DONE
    snap = read_snapshot(config.ensemble_out, config.semantic_hash())
    assert len(snap.members) == 5
    assert 2 not in {m.member_id for m in snap.members}
    events = read_events(config.metrics_path)
    assert any(e["event"] == "member_dropped" and e["member"] == 2 for e in events)

    # (b) replace policy keeps the ensemble at full size
    rep_dir = tmp_path / "replace"
    rep_dir.mkdir()
    config_rep = StudyConfig(
        model="lorenz96", n_dynamic=24, n_assimilated=16, members=6, cycles=2,
        nsteps=5, seed=101, obs_count=8, nan_member=2,
        member_failure_policy="replace", max_member_restarts=1,
        runners=2, base_port=port_block(8), launcher_port=port_block(2),
        runner_timeout_s=6.0, server_timeout_s=6.0, connect_timeout_s=60.0,
        max_restarts=30,
        checkpoint_dir=str(rep_dir / "ckpt"),
        metrics_path=str(rep_dir / "metrics.jsonl"),
        ensemble_out=str(rep_dir / "final.bin"),
    )
    assert launch(rep_dir, config_rep) == EXIT_DONE
    snap = read_snapshot(config_rep.ensemble_out, config_rep.semantic_hash())
    assert len(snap.members) == 6
    assert all(np.all(np.isfinite(m.values)) for m in snap.members)

    # (c) too small a global budget aborts with the informative message
    abort_dir = tmp_path / "abort"
    abort_dir.mkdir()
    config_abort = StudyConfig(
        model="lorenz96", n_dynamic=24, n_assimilated=16, members=6, cycles=2,
        nsteps=5, seed=101, obs_count=8, nan_member=2,
        member_failure_policy="drop", max_member_restarts=50,
        runners=2, base_port=port_block(8), launcher_port=port_block(2),
        runner_timeout_s=6.0, server_timeout_s=6.0, connect_timeout_s=60.0,
        max_restarts=2,
        checkpoint_dir=str(abort_dir / "ckpt"),
        metrics_path=str(abort_dir / "metrics.jsonl"),
        ensemble_out=str(abort_dir / "final.bin"),
    )
    assert launch(abort_dir, config_abort) == EXIT_BUDGET
    events = read_events(config_abort.metrics_path)
    assert any(e["event"] == "abort" and e["reason"] == "restart_budget" for e in events)
    return "drop kept 5/6, replace kept 6/6 finite, budget abort exit 4"
