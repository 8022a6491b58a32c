"""Config parsing, snapshot/diagnostics emission, profiles, heatmaps, CLI.

File formats:
  config     flat ``key = value`` UTF-8 text, ``#`` comments
  snapshots  CSV ``x,y,phi,mu`` with 17 significant digits (binary64
             round-trip exact), LF line endings, one row per node in mesh
             node order
  images     binary PGM (P5), maxval 255
Exit codes: 0 success, 1 config error, 2 solver failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from dataclasses import dataclass, replace

import numpy as np

from .kernel import KernelSpec
from .mesh import Domain2D, Mesh, build_uniform_mesh
from .potential import MobilityParams, PotentialParams, convexity_margin, separation_threshold
from .sim import Diagnostics, SimConfig, SimulationError, run
from .solver import SolverError


class ConfigError(ValueError):
    pass


@dataclass
class Snapshot:
    """Nodal state at one accepted step (time is not persisted in the CSV)."""

    step: int
    time: float
    phi: np.ndarray
    mu: np.ndarray


@dataclass
class LineProfile:
    """Samples of phi along the mesh column nearest a requested abscissa."""

    x0: float
    samples: list  # (y, phi) pairs sorted by y


_FLOAT_KEYS = {
    "domain.xmin", "domain.xmax", "domain.ymin", "domain.ymax",
    "pot.epsilon", "pot.phibar", "mob.alpha", "mob.M", "kernel.cutoff",
    "time.dt_safety", "time.t_end", "ic.mean", "ic.amplitude", "solver.tol",
}
_INT_KEYS = {"mesh.nx", "mesh.ny", "ic.seed", "solver.max_iters", "output.every"}
_BOOL_KEYS = {"ic.symmetric"}
_STR_KEYS = {"output.dir"}
_ALL_KEYS = _FLOAT_KEYS | _INT_KEYS | _BOOL_KEYS | _STR_KEYS


def _parse_value(key, raw, lineno):
    try:
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _INT_KEYS:
            return int(raw)
        if key in _BOOL_KEYS:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return raw
    except ValueError as e:
        raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from None


def load_config(path) -> SimConfig:
    """Parse a flat key = value file; missing keys take the reference defaults."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {body!r}")
            key, raw = (part.strip() for part in body.split("=", 1))
            if key not in _ALL_KEYS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _parse_value(key, raw, lineno)
    return build_config(values)


def build_config(values: dict) -> SimConfig:
    """Assemble a SimConfig from parsed key/value pairs, validating invariants."""
    defaults = SimConfig()

    def get(key, fallback):
        return values.get(key, fallback)

    def invariant(cond, key, msg):
        if not cond:
            raise ConfigError(f"{key}: {msg}")

    eps = get("pot.epsilon", defaults.pot.epsilon)
    phibar = get("pot.phibar", defaults.pot.phibar)
    invariant(eps > 0, "pot.epsilon", "must be positive")
    invariant(0 < phibar < 1, "pot.phibar", "must lie in (0, 1)")
    alpha = get("mob.alpha", defaults.mob.alpha)
    friction = get("mob.M", defaults.mob.friction)
    invariant(alpha >= 0, "mob.alpha", "must be >= 0")
    invariant(friction > 0, "mob.M", "must be positive")
    cutoff = get("kernel.cutoff", defaults.kernel.cutoff)
    invariant(cutoff >= 0, "kernel.cutoff", "must be >= 0")
    xmin = get("domain.xmin", defaults.domain.xmin)
    xmax = get("domain.xmax", defaults.domain.xmax)
    ymin = get("domain.ymin", defaults.domain.ymin)
    ymax = get("domain.ymax", defaults.domain.ymax)
    invariant(xmax > xmin, "domain.xmax", "must exceed domain.xmin")
    invariant(ymax > ymin, "domain.ymax", "must exceed domain.ymin")
    nx = get("mesh.nx", defaults.nx)
    ny = get("mesh.ny", defaults.ny)
    invariant(nx >= 1, "mesh.nx", "must be >= 1")
    invariant(ny >= 1, "mesh.ny", "must be >= 1")
    dt_safety = get("time.dt_safety", defaults.dt_safety)
    t_end = get("time.t_end", defaults.t_end)
    invariant(dt_safety > 0, "time.dt_safety", "must be positive")
    invariant(t_end > 0, "time.t_end", "must be positive")
    ic_mean = get("ic.mean", defaults.ic_mean)
    ic_amp = get("ic.amplitude", defaults.ic_amplitude)
    symmetric = get("ic.symmetric", defaults.ic_symmetric)
    lo = ic_mean - ic_amp if symmetric else ic_mean
    invariant(ic_amp >= 0, "ic.amplitude", "must be >= 0")
    invariant(0 <= lo and ic_mean + ic_amp < 1,
              "ic.mean", "mean +/- amplitude must lie inside [0, 1)")
    tol = get("solver.tol", defaults.solver_tol)
    max_iters = get("solver.max_iters", defaults.solver_max_iters)
    invariant(tol > 0, "solver.tol", "must be positive")
    invariant(max_iters >= 1, "solver.max_iters", "must be >= 1")
    every = get("output.every", defaults.snapshot_every)
    invariant(every >= 1, "output.every", "must be >= 1")

    return SimConfig(
        pot=PotentialParams(phibar=phibar, epsilon=eps),
        mob=MobilityParams(alpha=alpha, friction=friction),
        kernel=KernelSpec(epsilon=eps, cutoff=cutoff),
        domain=Domain2D(xmin, xmax, ymin, ymax),
        nx=nx, ny=ny,
        dt_safety=dt_safety, t_end=t_end,
        ic_mean=ic_mean, ic_amplitude=ic_amp, ic_symmetric=symmetric,
        rng_seed=get("ic.seed", defaults.rng_seed),
        solver_tol=tol, solver_max_iters=max_iters,
        snapshot_every=every,
        output_dir=get("output.dir", defaults.output_dir),
    )


def config_to_text(cfg: SimConfig) -> str:
    """Serialize a config so that parsing the text reproduces it."""
    lines = [
        f"domain.xmin = {cfg.domain.xmin:.17g}",
        f"domain.xmax = {cfg.domain.xmax:.17g}",
        f"domain.ymin = {cfg.domain.ymin:.17g}",
        f"domain.ymax = {cfg.domain.ymax:.17g}",
        f"mesh.nx = {cfg.nx}",
        f"mesh.ny = {cfg.ny}",
        f"pot.epsilon = {cfg.pot.epsilon:.17g}",
        f"pot.phibar = {cfg.pot.phibar:.17g}",
        f"mob.alpha = {cfg.mob.alpha:.17g}",
        f"mob.M = {cfg.mob.friction:.17g}",
        f"kernel.cutoff = {cfg.kernel.cutoff:.17g}",
        f"time.dt_safety = {cfg.dt_safety:.17g}",
        f"time.t_end = {cfg.t_end:.17g}",
        f"ic.mean = {cfg.ic_mean:.17g}",
        f"ic.amplitude = {cfg.ic_amplitude:.17g}",
        f"ic.symmetric = {'true' if cfg.ic_symmetric else 'false'}",
        f"ic.seed = {cfg.rng_seed}",
        f"solver.tol = {cfg.solver_tol:.17g}",
        f"solver.max_iters = {cfg.solver_max_iters}",
        f"output.dir = {cfg.output_dir}",
        f"output.every = {cfg.snapshot_every}",
    ]
    return "\n".join(lines) + "\n"


def save_config(cfg: SimConfig, path) -> None:
    _atomic_write_text(path, config_to_text(cfg))


def _atomic_write_text(path, text):
    _atomic_write_bytes(path, text.encode("utf-8"))


def _atomic_write_bytes(path, payload):
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    try:
        fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp_", suffix="~")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            os.unlink(tmp)
            raise
    except OSError as e:
        raise OSError(f"failed writing {path}: {e}") from e


def write_snapshot_csv(snap: Snapshot, mesh: Mesh, path) -> None:
    """One row per node in node order, 17 significant digits per value."""
    lines = ["x,y,phi,mu"]
    xs, ys = mesh.nodes[:, 0], mesh.nodes[:, 1]
    for j in range(mesh.n_nodes):
        lines.append(f"{xs[j]:.17g},{ys[j]:.17g},{snap.phi[j]:.17g},{snap.mu[j]:.17g}")
    _atomic_write_text(path, "\n".join(lines) + "\n")


def read_snapshot_csv(path):
    """Read a snapshot CSV back; returns (Snapshot, nx, ny, Domain2D).

    Step and time are not persisted in the format and come back as zero.
    """
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 4:
        raise OSError(f"{path}: expected 4 columns x,y,phi,mu")
    x, y, phi, mu = data.T
    xs = np.unique(x)
    ys = np.unique(y)
    nx, ny = xs.size - 1, ys.size - 1
    if x.size != xs.size * ys.size:
        raise OSError(f"{path}: nodes do not form a full grid")
    dom = Domain2D(float(xs[0]), float(xs[-1]), float(ys[0]), float(ys[-1]))
    return Snapshot(step=0, time=0.0, phi=phi, mu=mu), nx, ny, dom


def extract_profile(snap: Snapshot, mesh: Mesh, x0: float) -> LineProfile:
    """Samples of phi along the mesh column nearest x0, sorted by y."""
    dom = mesh.domain
    if not dom.xmin <= x0 <= dom.xmax:
        raise ValueError(f"x0={x0} outside domain [{dom.xmin}, {dom.xmax}]")
    col = int(round((x0 - dom.xmin) / mesh.hx))
    col = min(max(col, 0), mesh.nx)
    ids = np.arange(mesh.ny + 1) * (mesh.nx + 1) + col
    ys = mesh.nodes[ids, 1]
    return LineProfile(
        x0=float(mesh.nodes[col, 0]),
        samples=[(float(yv), float(snap.phi[i])) for yv, i in zip(ys, ids)],
    )


def emit_heatmap(snap: Snapshot, mesh: Mesh, path) -> None:
    """Binary PGM of phi, rows top-to-bottom in decreasing y, round-half-up."""
    grid = snap.phi.reshape(mesh.ny + 1, mesh.nx + 1)
    pixels = np.floor(255.0 * np.clip(grid, 0.0, 1.0) + 0.5).astype(np.uint8)
    pixels = pixels[::-1]
    header = f"P5\n{mesh.nx + 1} {mesh.ny + 1}\n255\n".encode("ascii")
    _atomic_write_bytes(path, header + pixels.tobytes())


def write_diagnostics_csv(diag: Diagnostics, path) -> None:
    lines = ["step,time,dt,lyapunov,mass,min_phi,max_phi,iters"]
    for step, t, dt, lyap, mass, mn, mx, iters in diag.rows():
        lines.append(f"{step},{t:.17g},{dt:.17g},{lyap:.17g},{mass:.17g},"
                     f"{mn:.17g},{mx:.17g},{iters}")
    _atomic_write_text(path, "\n".join(lines) + "\n")


def _apply_overrides(cfg: SimConfig, args) -> SimConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, rng_seed=args.seed)
    if getattr(args, "out_dir", None) is not None:
        cfg = replace(cfg, output_dir=args.out_dir)
    if getattr(args, "alpha", None) is not None:
        if args.alpha < 0:
            raise ConfigError("--alpha: must be >= 0")
        cfg = replace(cfg, mob=MobilityParams(alpha=args.alpha,
                                              friction=cfg.mob.friction))
    return cfg


def _cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    os.makedirs(cfg.output_dir, exist_ok=True)
    mesh = build_uniform_mesh(cfg.domain, cfg.nx, cfg.ny)

    def sink(step, t, phi, mu):
        snap = Snapshot(step=step, time=t, phi=phi, mu=mu)
        write_snapshot_csv(snap, mesh,
                           os.path.join(cfg.output_dir, f"snapshot_{step:06d}.csv"))

    try:
        diag = run(cfg, snapshot_sink=sink)
    except SimulationError as err:
        write_diagnostics_csv(err.diagnostics,
                              os.path.join(cfg.output_dir, "diagnostics.csv"))
        print(f"error: {err}", file=sys.stderr)
        return 2
    write_diagnostics_csv(diag, os.path.join(cfg.output_dir, "diagnostics.csv"))
    print(f"completed {diag.step[-1]} steps to t = {diag.time[-1]:.6g}; "
          f"final energy {diag.lyapunov[-1]:.8g}; output in {cfg.output_dir}")
    return 0


def _cmd_check(args) -> int:
    from .kernel import assemble_kernel_matrices

    cfg = _apply_overrides(load_config(args.config), args)
    mesh = build_uniform_mesh(cfg.domain, cfg.nx, cfg.ny)
    km = assemble_kernel_matrices(mesh, cfg.kernel)
    jstar1 = km.J1 / mesh.lumped_mass
    lhs = cfg.pot.epsilon * float(jstar1.min())
    sep = separation_threshold(cfg.pot)
    margin = convexity_margin(cfg.pot)
    print(f"eps * inf(J*1)_h     = {lhs:.6f}")
    print(f"(1 - phibar) / eps   = {sep:.6f}")
    print(f"convexity threshold  = {margin:.6f}")
    ok = lhs > sep > margin
    print("condition eps*inf(J*1)_h > (1-phibar)/eps > threshold: "
          + ("satisfied" if ok else "VIOLATED"))
    return 0


def _cmd_profile(args) -> int:
    snap, nx, ny, dom = read_snapshot_csv(args.snapshot)
    mesh = build_uniform_mesh(dom, nx, ny)
    prof = extract_profile(snap, mesh, args.x)
    print(f"# x0 = {prof.x0:.17g}")
    print("y,phi")
    for yv, pv in prof.samples:
        print(f"{yv:.17g},{pv:.17g}")
    return 0


def _cmd_heatmap(args) -> int:
    snap, nx, ny, dom = read_snapshot_csv(args.snapshot)
    mesh = build_uniform_mesh(dom, nx, ny)
    out = args.out or os.path.splitext(args.snapshot)[0] + ".pgm"
    emit_heatmap(snap, mesh, out)
    print(out)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nlch",
        description="Non-local Cahn-Hilliard simulator (degenerate mobility, "
                    "single-well potential)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a full simulation")
    p_run.add_argument("config")
    p_check = sub.add_parser(
        "check", help="assemble the kernel matrices and print the "
                      "kernel-condition comparison")
    p_check.add_argument("config")
    for p in (p_run, p_check):
        p.add_argument("--seed", type=int, default=None,
                       help="override ic.seed")
        p.add_argument("--out-dir", default=None, help="override output.dir")
        p.add_argument("--alpha", type=float, default=None,
                       help="override mob.alpha")

    p_prof = sub.add_parser("profile", help="extract a vertical line profile "
                                            "from a snapshot CSV")
    p_prof.add_argument("snapshot")
    p_prof.add_argument("--x", type=float, required=True,
                        help="abscissa of the vertical line")

    p_heat = sub.add_parser("heatmap", help="render a snapshot CSV as a "
                                            "grayscale PGM")
    p_heat.add_argument("snapshot")
    p_heat.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "check": _cmd_check,
                "profile": _cmd_profile, "heatmap": _cmd_heatmap}
    try:
        return handlers[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except (SimulationError, SolverError) as err:
        print(f"solver error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
