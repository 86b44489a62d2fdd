"""
Command handlers, one per subcommand.
Each handler validates its arguments, echoes the effective configuration to
the output directory, delegates to the engine and returns a JSON-ready
summary that the entry point prints.
"""
import logging
from argparse import Namespace
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
from pydantic import ValidationError

from .. import storage
from ..config import settings
from ..dynamics import (
    Trajectory,
    criticality_residual,
    estimate_decay_rate,
    harmonic_energy,
    harmonic_field,
    harmonic_regime,
    integrate_rk45,
    kuramoto_energy,
    kuramoto_field,
    kuramoto_rhs,
    laplacian,
    order_parameter,
    phase_velocity_limit,
    sl_field,
    sl_regime,
    sync_spread,
)
from ..errors import FitRejectedError, NumericalError, OscillatorError, UsageError, WindowError
from ..graph import GraphBatch, SparseGraph, make_sbm, make_splits
from ..models import OscillatorGNN
from ..schemas import CouplingConfig, HarmonicParams, ModelConfig, SLParams, StepConfig
from ..solvers import explicit_sl_step, imex_sl_step, symplectic_step
from ..tensor import ComplexMatrix, RealTensor
from ..trainer import depth_sweep, evaluate, gradient_check, robustness_sweep, run_experiment, t_score
from ..utils.reproducibility import make_rng
from .dependencies import (
    config_error,
    load_experiment_config,
    parse_floats,
    parse_graph_spec,
    parse_ints,
    random_graph,
    resolve_bundle,
    run_directory,
)

logger = logging.getLogger(__name__)

SOLVERS_BY_SYSTEM = {
    "sl": ("rk45", "imex", "euler"),
    "kuramoto": ("rk45", "euler"),
    "harmonic": ("rk45", "symplectic"),
}
GRADCHECK_TOLERANCE = 1e-4


def _args_payload(args: Namespace) -> Dict[str, Any]:
    return {k: v for k, v in sorted(vars(args).items()) if k != "handler"}


# ---------------------------------------------------------------------------
# simulate

def _sample_times(tmax: float, dt: float) -> np.ndarray:
    steps = int(round(tmax / dt))
    return np.arange(steps + 1) * dt


def _simulate_sl(args: Namespace, g: Optional[SparseGraph], n: int, times: np.ndarray, rng) -> tuple:
    values = parse_floats(args.params, (4, 5))
    p = SLParams(alpha=values[0], beta=values[1], omega=values[2], gamma=values[3], kappa=values[4] if len(values) == 5 else 1.0)
    z0 = args.r0 * np.exp(1j * rng.uniform(-np.pi, np.pi, size=n))
    field = sl_field(p, g)
    if args.solver == "rk45":
        traj = integrate_rk45(field, z0, (0.0, times[-1]), settings.rk45_rtol, settings.rk45_atol, t_eval=times, growth_limit=settings.growth_limit)
    else:
        cfg = StepConfig(dt=args.dt, newton_tol=settings.newton_tol, newton_max_iter=settings.newton_max_iter, cubic_method=args.cubic_method)
        deg = g.degree() if g is not None else np.zeros(n)
        states = [z0]
        z = z0
        for _ in range(times.shape[0] - 1):
            coupling = p.kappa * (g.matvec(z) - deg * z) if g is not None else np.zeros_like(z)
            if args.solver == "imex":
                step = imex_sl_step(ComplexMatrix.from_numpy(z[:, None]), ComplexMatrix.from_numpy(coupling[:, None]), p, cfg)
                z = step.to_numpy()[:, 0]
            else:
                z = explicit_sl_step(z, coupling, p, args.dt)
            states.append(z)
        traj = Trajectory(times, np.array(states))

    analysis: Dict[str, Any] = {"regime": sl_regime(p.alpha, p.beta, args.r0), "limit_radius": p.limit_radius}
    try:
        analysis["decay"] = estimate_decay_rate(traj).model_dump()
    except (FitRejectedError, WindowError) as exc:
        analysis["decay"] = {"rejected": exc.message}
    try:
        analysis["phase_velocity_limit"] = phase_velocity_limit(traj)
    except WindowError as exc:
        analysis["phase_velocity_limit"] = None
        logger.warning("Phase velocity not estimated: %s", exc.message)
    final = traj.states[-1]
    analysis["final_magnitude_mean"] = float(np.abs(final).mean())
    analysis["sync_spread"] = sync_spread(final)
    analysis["order_parameter"] = order_parameter(np.angle(final))
    if g is not None:
        try:
            analysis["criticality"] = criticality_residual(ComplexMatrix.from_numpy(final[:, None]), p, g).model_dump()
        except OscillatorError as exc:
            analysis["criticality"] = {"rejected": exc.message}
    return traj, analysis


def _simulate_kuramoto(args: Namespace, g: Optional[SparseGraph], n: int, times: np.ndarray, rng) -> tuple:
    omega = parse_floats(args.params, (1,))[0]
    phi0 = rng.uniform(-np.pi, np.pi, size=n)
    A = g.to_dense() if g is not None else np.zeros((n, n))
    if args.solver == "rk45":
        traj = integrate_rk45(kuramoto_field(omega, A, n), phi0, (0.0, times[-1]), settings.rk45_rtol, settings.rk45_atol, t_eval=times)
    else:
        states = [phi0]
        phi = phi0
        for _ in range(times.shape[0] - 1):
            phi = phi + args.dt * kuramoto_rhs(phi, omega, A)
            states.append(phi)
        traj = Trajectory(times, np.array(states))
    energy = np.array([kuramoto_energy(s, omega, A) for s in traj.states])
    analysis = {
        "energy_initial": float(energy[0]),
        "energy_final": float(energy[-1]),
        "energy_max_increase": float(max(0.0, np.diff(energy).max())) if energy.shape[0] > 1 else 0.0,
        "order_parameter": order_parameter(traj.states[-1]),
        "sync_spread": sync_spread(np.exp(1j * traj.states[-1])),
    }
    return traj, analysis


def _simulate_harmonic(args: Namespace, g: Optional[SparseGraph], n: int, times: np.ndarray, rng) -> tuple:
    zeta, omega0 = parse_floats(args.params, (2,))
    hp = HarmonicParams(zeta=zeta, omega0=omega0)
    A = g.to_dense() if g is not None else np.zeros((n, n))
    x0 = rng.standard_normal(n)
    v0 = np.zeros(n)
    c = hp.damping
    if args.solver == "rk45":
        traj = integrate_rk45(harmonic_field(A, c, n, omega0), np.concatenate([x0, v0]), (0.0, times[-1]), settings.rk45_rtol, settings.rk45_atol, t_eval=times)
    else:
        L = laplacian(A)
        X, Y = RealTensor(x0[:, None]), RealTensor(v0[:, None])
        states = [np.concatenate([x0, v0])]
        for _ in range(times.shape[0] - 1):
            force = RealTensor(-(L @ X.data))
            X, Y = symplectic_step(X, Y, force, c, omega0 ** 2, args.dt)
            states.append(np.concatenate([X.data[:, 0], Y.data[:, 0]]))
        traj = Trajectory(times, np.array(states))
    energy = np.array([harmonic_energy(s[:n], s[n:], A, omega0) for s in traj.states])
    analysis = {
        "regime": harmonic_regime(zeta),
        "damping": c,
        "energy_initial": float(energy[0]),
        "energy_final": float(energy[-1]),
        "energy_drift": float(np.abs(energy - energy[0]).max()),
        "sync_spread": sync_spread(traj.states[-1][:n]),
    }
    return traj, analysis


def cmd_simulate(args: Namespace) -> Dict[str, Any]:
    """Integrate one oscillator system and write trajectory.csv and analysis.json."""
    if args.solver not in SOLVERS_BY_SYSTEM[args.system]:
        raise UsageError(
            f"solver {args.solver!r} is not available for system {args.system!r}",
            system=args.system,
            solver=args.solver,
            allowed=list(SOLVERS_BY_SYSTEM[args.system]),
        )
    if args.dt <= 0 or args.tmax <= 0:
        raise UsageError("--dt and --tmax must be positive")
    with run_directory(args.out, _args_payload(args)) as root:
        g = parse_graph_spec(args.graph)
        n = g.n if g is not None else args.nodes
        times = _sample_times(args.tmax, args.dt)
        rng = make_rng(args.seed, "simulate", args.system)
        runner = {"sl": _simulate_sl, "kuramoto": _simulate_kuramoto, "harmonic": _simulate_harmonic}[args.system]
        try:
            traj, analysis = runner(args, g, n, times, rng)
        except ValidationError as exc:
            raise config_error(exc, "oscillator parameters") from None
        analysis.update({"system": args.system, "solver": args.solver, "nodes": n, "samples": int(traj.times.shape[0]),
                         "accepted_steps": traj.accepted, "rejected_steps": traj.rejected, "diverged": traj.diverged})
        storage.write_trajectory(root / "trajectory.csv", traj, args.system)
        storage.write_json(root / "analysis.json", analysis)
        logger.info("Simulated %s with %s over %d samples", args.system, args.solver, traj.times.shape[0])
    return analysis


# ---------------------------------------------------------------------------
# training family

def cmd_train(args: Namespace) -> Dict[str, Any]:
    exp = load_experiment_config(args.config, args.set)
    with run_directory(args.out, exp.model_dump()) as root:
        bundle, masks = resolve_bundle(exp)
        model, report = run_experiment(exp, bundle, masks)
        storage.save_checkpoint(model, root / "checkpoint")
        storage.write_json(root / "metrics.json", report)
        logger.info("Test metric %.3f after %d epochs (best epoch %d)", report.test_metric, report.epochs_run, report.best_epoch)
    return report.reproducible_view()


def cmd_eval(args: Namespace) -> Dict[str, Any]:
    exp = load_experiment_config(args.config, args.set)
    with run_directory(args.out, {**exp.model_dump(), "checkpoint": args.checkpoint}) as root:
        model = storage.load_checkpoint(args.checkpoint)
        bundle, masks = resolve_bundle(exp)
        test_loss, test_metric = evaluate(model, bundle, masks.test)
        val_loss, val_metric = evaluate(model, bundle, masks.val)
        result = {"test_loss": test_loss, "test_metric": test_metric, "val_loss": val_loss, "val_metric": val_metric}
        storage.write_json(root / "eval.json", result)
    return result


def cmd_gradcheck(args: Namespace) -> Dict[str, Any]:
    """Compare tape gradients with central differences on a small random graph."""
    with run_directory(args.out, _args_payload(args)) as root:
        rng = make_rng(args.seed, "gradcheck")
        g = random_graph(args.nodes, 0.3, rng)
        features = RealTensor(rng.standard_normal((args.nodes, args.features)))
        labels = rng.integers(0, args.classes, size=args.nodes)
        try:
            cfg = ModelConfig(
                family=args.family,
                coupling=CouplingConfig(kind=args.coupling, hidden_dim=args.hidden, heads=args.heads, attn_dim=args.attn_dim),
                layers=args.layers,
                dt=args.dt,
                hidden_dim=args.hidden,
                train_oscillator=args.train_oscillator,
            )
        except ValidationError as exc:
            raise config_error(exc, "model") from None
        model = OscillatorGNN(cfg, args.features, args.classes, seed=args.seed)
        errors = gradient_check(model, GraphBatch(g, features), labels, "node-class")
        worst = max(errors.values())
        result = {"family": args.family, "coupling": args.coupling, "max_relative_error": worst, "per_parameter": errors}
        storage.write_json(root / "gradcheck.json", result)
    if worst >= GRADCHECK_TOLERANCE:
        raise NumericalError(f"gradient check failed: max relative error {worst:.3e}", max_relative_error=worst)
    return result


def cmd_sweep_depth(args: Namespace) -> Dict[str, Any]:
    exp = load_experiment_config(args.config, args.set)
    depths = parse_ints(args.depths, "--depths")
    with run_directory(args.out, {**exp.model_dump(), "depths": depths}) as root:
        bundle, masks = resolve_bundle(exp)
        rows = depth_sweep(exp, bundle, masks, depths)
        storage.write_models_csv(root / "depth_sweep.csv", rows)
    return {"rows": [r.model_dump() for r in rows]}


def cmd_perturb(args: Namespace) -> Dict[str, Any]:
    exp = load_experiment_config(args.config, args.set)
    levels = parse_ints(args.edges, "--edges")
    if any(level < 0 for level in levels):
        raise UsageError("fake-edge counts must be nonnegative")
    with run_directory(args.out, {**exp.model_dump(), "edges": levels, "trials": args.trials, "jobs": args.jobs}) as root:
        bundle, masks = resolve_bundle(exp)
        rows = robustness_sweep(exp, bundle, masks, levels, args.trials, exp.seed, jobs=args.jobs)
        storage.write_models_csv(root / "robustness.csv", rows)
    return {"rows": [r.model_dump() for r in rows]}


def cmd_ttest(args: Namespace) -> Dict[str, Any]:
    with run_directory(args.out, _args_payload(args)) as root:
        result = t_score(args.mu1, args.s1, args.mu2, args.s2, args.n)
        storage.write_json(root / "ttest.json", result)
    return result.model_dump()


def cmd_make_sbm(args: Namespace) -> Dict[str, Any]:
    """Write a synthetic SBM bundle with a seeded split."""
    with run_directory(args.out, _args_payload(args)) as root:
        bundle = make_sbm(args.blocks, args.nodes_per_block, args.p_in, args.p_out, args.noise, seed=args.seed)
        masks = make_splits(bundle, args.train_per_class, args.val_count, args.seed)
        bundle = replace(bundle, masks=masks)
        storage.write_bundle(bundle, root / "bundle")
        train, val, test = masks.sizes()
    return {"bundle": str(Path(root) / "bundle"), "nodes": bundle.graph.n, "edges": bundle.graph.num_edges, "train": train, "val": val, "test": test}
