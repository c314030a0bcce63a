import logging
import math
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from ris_flow.errors import DomainError, NumericError, OracleFailure
from ris_flow.file_output import ensure_output_dir, save_validation_report, write_csv, write_json
from ris_flow.flowsim import (
    Policy,
    build_policy,
    default_rays,
    default_scale_max,
    estimate_region,
    first_unstable_scale,
    moving_average,
    run,
    stability_metric,
    sweep_policies,
    trend_test,
)
from ris_flow.fluid import FluidState, drift_check, fluid_boundary, fluid_integrate, make_rate_map, select_epsilon
from ris_flow.models import ExperimentSpec
from ris_flow.phase_opt import PhaseSolution, optimize
from ris_flow.scenario_loader import Experiment, load_experiment
from ris_flow.validation import run_validation
from utils import log_to_run_file

logger = logging.getLogger(__name__)

# Fallback margin when the arrival rates lie outside the estimated fluid boundary
OUTSIDE_EPSILON = 1e-2


def _prepare(spec: ExperimentSpec, run_id: Optional[str]) -> Experiment:
    ensure_output_dir(spec.output_dir)
    return load_experiment(spec, run_id=run_id)


def _design_phases(experiment: Experiment, stats, run_id: Optional[str]) -> PhaseSolution:
    return optimize(
        stats.R,
        mode=experiment.settings.phase.mode,
        options=experiment.phase_options,
        rng=np.random.default_rng(experiment.scenario.seed),
        symmetric=stats.symmetric,
        run_id=run_id,
    )


def cmd_optimize(spec: ExperimentSpec, run_id: Optional[str] = None) -> Dict[str, Any]:
    """Design the RIS phases of the configured scenario and save them as JSON."""
    experiment = _prepare(spec, run_id)
    stats = experiment.build_stats()
    solution = _design_phases(experiment, stats, run_id)

    payload = solution.to_dict()
    payload.update({
        'scenario': experiment.scenario.name,
        'ris_elements': experiment.scenario.ris_elements,
        'symmetric_correlation': stats.symmetric,
    })
    path = write_json(payload, spec.output_dir, 'optimize', experiment.config_hash, experiment.seed, run_id)
    return {'solution': solution, 'paths': [path], 'summary': payload}


def cmd_simulate(spec: ExperimentSpec, run_id: Optional[str] = None) -> Dict[str, Any]:
    """Simulate the flow-level system and save the trace and its verdict.

    The trace CSV holds slot, X_1..X_K, sum and moving_avg; the summary JSON
    holds the stability metric and the trend of the last part of the moving
    average.
    """
    experiment = _prepare(spec, run_id)
    settings, scenario = experiment.settings, experiment.scenario
    sim = settings.simulation
    stats = experiment.build_stats()

    policy = build_policy(
        sim.policy,
        scenario,
        stats,
        options=experiment.phase_options,
        mode=settings.phase.mode,
        all_active_transmit=sim.all_active_transmit,
        run_id=run_id,
    )
    log_to_run_file(run_id, "simulating", f"Simulating {sim.slots} slots under '{sim.policy}' at lambda={scenario.arrival_rates.tolist()}")
    trace = run(scenario, policy, sim.slots, stats, seed=experiment.seed, record_every=sim.record_every, run_id=run_id)

    averaged = moving_average(trace, sim.window)['sum']
    frame = trace.to_frame()
    if len(averaged) == len(frame):
        frame['moving_avg'] = averaged.to_numpy()
    else:
        frame['moving_avg'] = float(averaged.iloc[-1])

    trend = None
    try:
        trend = trend_test(averaged, fraction=sim.trend_fraction, threshold=settings.region.threshold, z=sim.trend_z)
    except DomainError as e:
        logger.warning(f"⚠️ No trend verdict: {e}")

    summary = {
        'policy': policy.kind,
        'eta': policy.eta,
        'gamma_certified': policy.solution.gamma_certified if policy.solution else None,
        'arrival_rates': scenario.arrival_rates,
        'slots': sim.slots,
        'window': sim.window,
        'stability_metric': stability_metric(trace),
        'final_flows': trace.X[-1],
        'arrivals': trace.arrivals[-1],
        'departures': trace.departures[-1],
        'trend': None if trend is None else {
            'slope': trend.slope,
            'stderr': trend.stderr,
            'n_points': trend.n_points,
            'diverging': trend.diverging,
        },
        'verdict': 'unknown' if trend is None else ('diverging' if trend.diverging else 'converging'),
    }
    paths = [
        write_csv(frame, spec.output_dir, 'simulate', experiment.config_hash, experiment.seed, run_id),
        write_json(summary, spec.output_dir, 'simulate_summary', experiment.config_hash, experiment.seed, run_id),
    ]
    return {'trace': trace, 'frame': frame, 'trend': trend, 'paths': paths, 'summary': summary}


def _build_policies(experiment: Experiment, stats, kinds, run_id: Optional[str]) -> List[Policy]:
    """One policy per kind; the optimized and TDMA policies share one phase design."""
    settings = experiment.settings
    solution = None
    policies = []
    for kind in kinds:
        policy = build_policy(
            kind,
            experiment.scenario,
            stats,
            options=experiment.phase_options,
            mode=settings.phase.mode,
            all_active_transmit=settings.simulation.all_active_transmit,
            solution=solution if kind in ('optimized', 'tdma') else None,
            run_id=run_id,
        )
        if kind in ('optimized', 'tdma'):
            solution = policy.solution
        policies.append(policy)
    return policies


def _region_frame(points, num_locations: int) -> pd.DataFrame:
    columns = ['policy', 'ray'] + [f'd_{k + 1}' for k in range(num_locations)] + ['scale', 'bracketed', 'trials']
    columns += [f'lambda_{k + 1}' for k in range(num_locations)]
    rows = []
    for ray, point in points:
        row = {'policy': point.policy, 'ray': ray, 'scale': point.scale, 'bracketed': point.bracketed, 'trials': point.trials}
        for k in range(num_locations):
            row[f'd_{k + 1}'] = point.direction[k]
            row[f'lambda_{k + 1}'] = point.arrival_rates[k]
        rows.append(row)
    return pd.DataFrame(rows, columns=columns)


def cmd_region(spec: ExperimentSpec, run_id: Optional[str] = None) -> Dict[str, Any]:
    """Estimate the stability boundary of every configured policy along every configured ray.

    All policies run with the same seed, so their trials see the same
    arrival sequences.
    """
    experiment = _prepare(spec, run_id)
    settings, scenario = experiment.settings, experiment.scenario
    region = settings.region
    stats = experiment.build_stats()

    rays = default_rays(scenario.num_locations) if region.rays is None else region.rays
    points = []
    if not rays:
        logger.warning("⚠️ No rays configured; writing an empty boundary file")
    else:
        for policy in _build_policies(experiment, stats, region.policies, run_id):
            found = estimate_region(
                scenario,
                stats,
                policy,
                rays,
                horizon=region.slots,
                threshold=region.threshold,
                seed=experiment.seed,
                window=region.window,
                fraction=region.trend_fraction,
                tol=region.tol,
                scale_max=region.scale_max,
                workers=region.workers,
                run_id=run_id,
            )
            points.extend(enumerate(found))

    frame = _region_frame(points, scenario.num_locations)
    path = write_csv(frame, spec.output_dir, 'region', experiment.config_hash, experiment.seed, run_id)
    return {'points': [p for _, p in points], 'frame': frame, 'paths': [path]}


def cmd_sweep(spec: ExperimentSpec, run_id: Optional[str] = None) -> Dict[str, Any]:
    """Stability metric against load for every configured policy.

    The loads are ``points`` equally spaced scales up to ``scale_max`` along
    the sweep direction. The CSV holds one row per (scale, policy) and the
    summary JSON the first diverging scale of each policy.
    """
    experiment = _prepare(spec, run_id)
    settings, scenario = experiment.settings, experiment.scenario
    sweep = settings.sweep
    stats = experiment.build_stats()
    K = scenario.num_locations

    policies = _build_policies(experiment, stats, sweep.policies, run_id)
    direction = np.ones(K) if sweep.direction is None else np.asarray(sweep.direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    if sweep.scale_max is not None:
        scale_max = sweep.scale_max
    else:
        reference = next((p for p in policies if p.kind != 'random'), policies[0])
        scale_max = default_scale_max(reference, scenario, stats, direction)
    scales = np.linspace(scale_max / sweep.points, scale_max, sweep.points)

    points = sweep_policies(scenario, stats, policies, direction, scales, horizon=sweep.slots, seed=experiment.seed,
                            window=sweep.window, fraction=sweep.trend_fraction, threshold=sweep.threshold,
                            run_id=run_id)

    rows = []
    for point in points:
        row = {'policy': point.policy, 'scale': point.scale}
        for k in range(K):
            row[f'lambda_{k + 1}'] = point.arrival_rates[k]
        row.update({'metric': point.metric, 'slope': point.slope, 'diverging': point.diverging})
        rows.append(row)
    columns = ['policy', 'scale'] + [f'lambda_{k + 1}' for k in range(K)] + ['metric', 'slope', 'diverging']
    frame = pd.DataFrame(rows, columns=columns)

    first_unstable = {p.kind: first_unstable_scale(points, p.kind) for p in policies}
    for kind, scale in first_unstable.items():
        msg = f"Sweep '{kind}': first diverging scale {scale:.4g}" if math.isfinite(scale) else f"Sweep '{kind}': stable on the whole grid"
        logger.info(f"📈 {msg}")
        log_to_run_file(run_id, "metrics", msg)

    summary = {
        'policies': [p.kind for p in policies],
        'direction': direction,
        'scales': scales,
        'slots': sweep.slots,
        'first_unstable_scale': first_unstable,
    }
    paths = [
        write_csv(frame, spec.output_dir, 'sweep', experiment.config_hash, experiment.seed, run_id),
        write_json(summary, spec.output_dir, 'sweep_summary', experiment.config_hash, experiment.seed, run_id),
    ]
    return {'points': points, 'frame': frame, 'paths': paths, 'summary': summary}


def cmd_fluid(spec: ExperimentSpec, run_id: Optional[str] = None) -> Dict[str, Any]:
    """Integrate the fluid model at the configured arrival rates and check the Lyapunov drift."""
    experiment = _prepare(spec, run_id)
    settings, scenario = experiment.settings, experiment.scenario
    fluid = settings.fluid
    stats = experiment.build_stats()

    policy = build_policy(fluid.policy, scenario, stats, options=experiment.phase_options,
                          mode=settings.phase.mode, run_id=run_id)
    gamma = fluid.gamma if fluid.gamma is not None else policy.solution.gamma_certified
    rate_map = make_rate_map(scenario, stats, policy.eta, fluid.policy)

    lam = scenario.arrival_rates
    K = scenario.num_locations
    direction = lam / np.linalg.norm(lam) if np.any(lam > 0) else np.ones(K) / math.sqrt(K)
    state = FluidState(Y=np.asarray(fluid.initial, dtype=float)) if fluid.initial else FluidState.normalized(direction)
    mass = float(state.Y.sum())
    slowest = float(np.min(rate_map(np.ones(K, dtype=bool))))
    if fluid.horizon is None and slowest <= 0:
        raise NumericError("A location has zero service rate; set fluid.horizon or raise the link budget")
    horizon = fluid.horizon or 10.0 * mass / slowest
    if horizon / fluid.dt > fluid.max_steps:
        raise NumericError(
            f"Fluid horizon {horizon:.4g} slots at dt={fluid.dt:.4g} exceeds fluid.max_steps={fluid.max_steps}; "
            "the service rates are probably tiny (check the noise power)"
        )

    boundary = fluid_boundary(rate_map, direction, 4.0 * float(np.linalg.norm(rate_map(np.zeros(K, dtype=bool)))),
                              horizon, max(fluid.dt, horizon / 2000.0))
    epsilon = fluid.epsilon
    if epsilon is None:
        try:
            epsilon = select_epsilon(lam, gamma, boundary, direction)
        except DomainError as e:
            logger.warning(f"⚠️ {e}; using epsilon={OUTSIDE_EPSILON}")
            epsilon = OUTSIDE_EPSILON

    trajectory = fluid_integrate(state, lam, rate_map, horizon, fluid.dt, max_steps=fluid.max_steps)
    report = drift_check(trajectory, lam, gamma, epsilon, run_id=run_id)

    summary = report.to_dict()
    summary.update({
        'policy': fluid.policy,
        'arrival_rates': lam,
        'boundary_scale': boundary,
        'horizon': horizon,
        'dt': fluid.dt,
        'initial': state.Y,
    })
    paths = [
        write_csv(trajectory.to_frame(), spec.output_dir, 'fluid', experiment.config_hash, experiment.seed, run_id),
        write_json(summary, spec.output_dir, 'fluid_report', experiment.config_hash, experiment.seed, run_id),
    ]
    return {'trajectory': trajectory, 'report': report, 'paths': paths, 'summary': summary}


def cmd_validate(spec: ExperimentSpec, run_id: Optional[str] = None) -> Dict[str, Any]:
    """Run the oracle suite and save the report.

    Raises:
        OracleFailure: If any oracle measured outside its tolerance; the report is written first.
    """
    experiment = _prepare(spec, run_id)
    section = experiment.settings.validate_
    results = run_validation(section, experiment.seed, run_id=run_id)
    rows = [r.to_dict() for r in results]

    paths = list(save_validation_report(rows, spec.output_dir, experiment.config_hash, experiment.seed,
                                        section.budget, run_id).values())
    summary = {'budget': section.budget, 'results': rows, 'passed': all(r.passed for r in results)}
    paths.append(write_json(summary, spec.output_dir, 'validate', experiment.config_hash, experiment.seed, run_id))

    failed: List[str] = [r.name for r in results if not r.passed]
    if failed:
        raise OracleFailure(f"{len(failed)} oracle(s) failed: {', '.join(failed)}")
    return {'results': results, 'paths': paths, 'summary': summary}


COMMANDS: Dict[str, Callable[[ExperimentSpec, Optional[str]], Dict[str, Any]]] = {
    'optimize': cmd_optimize,
    'simulate': cmd_simulate,
    'region': cmd_region,
    'sweep': cmd_sweep,
    'fluid': cmd_fluid,
    'validate': cmd_validate,
}
