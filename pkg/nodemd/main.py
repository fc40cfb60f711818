"""
nodemd - node-aware ghost exchange for neural-network molecular dynamics.
Main CLI interface.
"""

import csv
import logging
import sys
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

from . import __version__
from .config import NodeMDConfig, config_from_dict, parse_config
from .engine import RunResult, Simulation, ThermoRecord, rdf_frames
from .errors import ConfigError, ExitCodes, NodeMDError, ValidationFailure
from .geometry import RankTopology, SimBox, ghost_count_model
from .netsim import RegistrationPolicy, build_cluster
from .potential import init_params, save_params
from .schemes import Scheme, benchmark_exchange, plan_exchange
from .structures import Structure, iter_xyz, uniform_cloud
from .tsgemm import PrecisionMode
from .validation import BENCH_FACTORS, BENCH_TOPOLOGY, SuiteSettings, ValidationReport, run_all


app = typer.Typer(
    name="nodemd",
    help="Molecular dynamics with a neural-network potential on a virtual multi-node cluster",
    add_completion=False,
)
console = Console()

THERMO_COLUMNS = [
    "step",
    "total_energy",
    "potential_energy",
    "kinetic_energy",
    "temperature",
    "comm_time_us",
    "messages",
]
BENCH_COLUMNS = [
    "scheme",
    "subbox_spec",
    "rounds",
    "peer_count",
    "messages_per_rank",
    "bytes",
    "virtual_time_us",
    "registered_regions",
]


def setup_logging(log_level: str = "INFO") -> None:
    """Setup logging configuration."""
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format="%(name)s - %(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _exit_on_error(e: BaseException, verbose: bool) -> None:
    """Print ``e`` and exit with the code of its class."""
    if isinstance(e, KeyboardInterrupt):
        console.print("\n[bold red]Interrupted by user[/bold red]")
        sys.exit(ExitCodes.INTERRUPTED)
    if verbose and isinstance(e, NodeMDError):
        console.print_json(data=e.info().to_dict(), default=str)
    if isinstance(e, ConfigError):
        console.print(f"\n[bold red]Config error[/bold red] [dim]({e.code})[/dim]: {e}")
        sys.exit(ExitCodes.CONFIG)
    if isinstance(e, ValidationFailure):
        console.print(f"\n[bold red]Validation failed:[/bold red] {e}")
        sys.exit(ExitCodes.VALIDATION)
    if isinstance(e, NodeMDError):
        console.print(f"\n[bold red]Error[/bold red] [dim]({e.code})[/dim]: {e}")
    else:
        console.print(f"\n[bold red]Error:[/bold red] {str(e)}")
    if verbose:
        console.print_exception()
    sys.exit(ExitCodes.RUNTIME)


def _load_structure(cfg: NodeMDConfig, base_dir: Path) -> Structure:
    structure = cfg.build_structure(base_dir)
    if structure.species != cfg.species:
        raise ConfigError(
            f"structure species {structure.species} differ from configured {cfg.species}",
            path="system.species",
        )
    return structure


@app.command()
def run(
    config_file: Path = typer.Argument(..., exists=True, dir_okay=False, readable=True, help="JSON config file"),
    steps: Optional[int] = typer.Option(None, "--steps", "-n", help="Override run.steps"),
    scheme: Optional[str] = typer.Option(None, "--scheme", "-s", help="Override run.scheme"),
    precision: Optional[PrecisionMode] = typer.Option(None, "--precision", "-p", help="Override potential.precision"),
    output_dir: Path = typer.Option(Path("."), "--output-dir", "-o", help="Directory for CSV and trajectory output"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Enable verbose logging"),
) -> None:
    """
    Run NVE molecular dynamics over the virtual cluster.

    Example:
        nodemd run configs/copper.json --steps 20 --scheme p2p
    """
    setup_logging("DEBUG" if verbose else "INFO")
    try:
        cfg = parse_config(config_file)
        overrides = {}
        if steps is not None:
            overrides["steps"] = steps
        if scheme is not None:
            overrides["scheme"] = scheme
        if precision is not None:
            overrides["potential.precision"] = precision.value
        if overrides:
            cfg = _apply_overrides(cfg, overrides)
        base_dir = config_file.parent
        structure = _load_structure(cfg, base_dir)
        params = cfg.build_params(base_dir)
        run_cfg = cfg.run_config()
        out = cfg.run.output
        if out.trajectory:
            run_cfg.trajectory = str(output_dir / out.trajectory)

        console.print(
            Panel.fit(
                "[bold cyan]nodemd run[/bold cyan]\n"
                f"System: [yellow]{structure.natoms}[/yellow] atoms ({', '.join(structure.species)}), "
                f"box {tuple(round(v, 3) for v in structure.box.lengths)}\n"
                f"Scheme: [blue]{run_cfg.scheme}[/blue] | leaders {run_cfg.leaders} | "
                f"load balance {run_cfg.load_balance}\n"
                f"Ranks: [magenta]{cfg.rank_topology().nranks}[/magenta] on "
                f"{cfg.rank_topology().nnodes} nodes | precision {params.precision.value}",
                border_style="cyan",
            )
        )

        sim = Simulation(structure, params, cfg.cutoff_spec(), cfg.rank_topology(), run_cfg, cfg.cost_model())
        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TextColumn("[progress.percentage]{task.percentage:>3.0f}%"),
            TimeElapsedColumn(),
            console=console,
        ) as progress:
            task = progress.add_task("[yellow]Integrating...", total=max(run_cfg.steps, 1))

            def on_thermo(rec: ThermoRecord) -> None:
                progress.update(task, completed=rec.step)

            result = sim.run(on_thermo)
            progress.update(task, completed=max(run_cfg.steps, 1))

        thermo_path = _write_csv(
            output_dir / out.thermo_csv,
            THERMO_COLUMNS,
            ([getattr(rec, c) for c in THERMO_COLUMNS] for rec in result.thermo),
        )
        metrics_path = _write_csv(output_dir / out.metrics_csv, ["metric", "value"], _metric_rows(result))
        _display_run(result)
        console.print(f"\n[bold green]Thermo saved to:[/bold green] [yellow]{thermo_path}[/yellow]")
        console.print(f"[bold green]Metrics saved to:[/bold green] [yellow]{metrics_path}[/yellow]")
        if run_cfg.trajectory and run_cfg.dump_every:
            console.print(f"[bold green]Trajectory saved to:[/bold green] [yellow]{run_cfg.trajectory}[/yellow]")

    except (Exception, KeyboardInterrupt) as e:
        _exit_on_error(e, verbose)


def _apply_overrides(cfg: NodeMDConfig, overrides: dict) -> NodeMDConfig:
    data = cfg.model_dump(mode="json")
    for key, value in overrides.items():
        section, _, field_name = key.rpartition(".")
        data[section or "run"][field_name] = value
    return config_from_dict(data)


def _metric_rows(result: RunResult) -> List[List]:
    rows = [[k, v] for k, v in result.metrics.to_dict().items()]
    rows.append(["rebuilds", len(result.rebuild_steps)])
    if result.balance is not None:
        rows.extend([k, v] for k, v in result.balance.to_dict().items())
    for r, t in enumerate(result.metrics.rank_time_us):
        rows.append([f"rank_time_us.{r}", float(t)])
    return rows


def _display_run(result: RunResult) -> None:
    """Display run results in formatted tables."""
    table = Table(title="Run Summary", show_header=True, header_style="bold magenta")
    table.add_column("Metric", style="cyan", no_wrap=True)
    table.add_column("Value", style="green")

    first, last = result.thermo[0], result.thermo[-1]
    drift = abs(last.total_energy - first.total_energy) / abs(first.total_energy) if first.total_energy else 0.0
    m = result.metrics
    table.add_row("Steps", str(last.step))
    table.add_row("Total energy", f"{last.total_energy:.8f} eV")
    table.add_row("Temperature", f"{last.temperature:.2f} K")
    table.add_row("Relative energy drift", f"{drift:.3e}")
    table.add_row("Rebuilds", str(len(result.rebuild_steps)))
    table.add_row("Messages", str(m.messages))
    table.add_row("Intra-node copies", str(m.copies))
    table.add_row("Bytes moved", f"{m.total_bytes:,}")
    table.add_row("Virtual comm time", f"{m.virtual_time_us:.1f} us")
    console.print(table)

    if result.balance is not None:
        b = result.balance
        bal = Table(title="Evaluated Atoms per Rank", show_header=True, header_style="bold magenta")
        for col in ("Min", "Avg", "Max", "SDMR"):
            bal.add_column(col, style="green")
        bal.add_row(f"{b.natom.minimum:.0f}", f"{b.natom.average:.2f}", f"{b.natom.maximum:.0f}", f"{b.natom.sdmr:.2f}")
        console.print(bal)


@app.command("bench-comm")
def bench_comm(
    config_file: Path = typer.Argument(..., exists=True, dir_okay=False, readable=True, help="JSON config file"),
    output: Path = typer.Option(Path("bench_comm.csv"), "--output", "-o", help="CSV output path"),
    atoms_per_rank: int = typer.Option(4, "--atoms-per-rank", min=0, help="Uniform random atoms per rank"),
    registration: RegistrationPolicy = typer.Option(
        RegistrationPolicy.PER_NEIGHBOR, "--registration", help="Buffer registration policy"
    ),
    seed: int = typer.Option(0, "--seed", help="Random seed for atom positions"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Enable verbose logging"),
) -> None:
    """
    One forward and reverse exchange per scheme on a 4x6x4-node cluster for three sub-box sizes.
    """
    setup_logging("DEBUG" if verbose else "WARNING")
    try:
        cfg = parse_config(config_file)
        topo = RankTopology(*BENCH_TOPOLOGY)
        cutoff = cfg.cutoff_spec().list_cutoff
        cluster = build_cluster(topo, cfg.cost_model())
        rows = []
        with Progress(SpinnerColumn(), TextColumn("{task.description}"), console=console) as progress:
            task = progress.add_task("Exchanging...", total=len(BENCH_FACTORS) * len(Scheme))
            for spec, factors in BENCH_FACTORS.items():
                box = SimBox(tuple(g * f * cutoff for g, f in zip(topo.rank_grid, factors)))
                cloud = uniform_cloud(atoms_per_rank * topo.nranks, box, seed=seed)
                for scheme in Scheme:
                    progress.update(task, description=f"{spec} {scheme.value}")
                    plan = plan_exchange(
                        scheme, topo, box, cutoff, leaders=cfg.run.leaders, load_balance=cfg.run.load_balance
                    )
                    b = benchmark_exchange(plan, cluster, cloud.positions, cloud.types, registration)
                    rows.append(
                        [
                            scheme.value,
                            spec,
                            b.rounds,
                            b.peer_count,
                            b.messages_per_rank,
                            b.bytes,
                            round(b.virtual_time_us, 6),
                            b.registered_regions,
                        ]
                    )
                    progress.advance(task)

        _write_csv(output, BENCH_COLUMNS, rows)
        table = Table(title="Exchange Benchmark", show_header=True, header_style="bold magenta")
        for col in BENCH_COLUMNS:
            table.add_column(col, style="cyan" if col in ("scheme", "subbox_spec") else "green")
        for row in rows:
            table.add_row(*[f"{v:g}" if isinstance(v, float) else str(v) for v in row])
        console.print(table)
        console.print(f"\n[bold green]Output saved to:[/bold green] [yellow]{output}[/yellow]")

    except (Exception, KeyboardInterrupt) as e:
        _exit_on_error(e, verbose)


@app.command("ghost-model")
def ghost_model(
    a: float = typer.Option(1.0, "--a", help="Sub-box side"),
    r: float = typer.Option(2.0, "--r", help="Cutoff radius"),
) -> None:
    """Ghost counts per rank at unit density, original vs load-balanced organization."""
    try:
        g = ghost_count_model(a, r)
        half = ghost_count_model(0.5 * r, r)
    except NodeMDError as e:
        console.print(f"[bold red]Error:[/bold red] {e}")
        raise typer.Exit(ExitCodes.USAGE)
    console.print(f"nghost_bs = {g.nghost_bs:g}")
    console.print(f"nghost_lb = {g.nghost_lb:g}")
    console.print(f"ratio = {g.ratio:.4f}")
    console.print(f"[dim]a = 0.5 r: ratio = {half.ratio:.4f}[/dim]")


@app.command()
def validate(
    config_file: Path = typer.Argument(..., exists=True, dir_okay=False, readable=True, help="JSON config file"),
    seeds: Optional[int] = typer.Option(None, "--seeds", min=1, help="Seeded systems per suite"),
    quick: bool = typer.Option(False, "--quick", help="A few seeds per suite instead of the full sample sizes"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Enable verbose logging"),
) -> None:
    """
    Run every oracle suite: ghost sets, scheme equivalence, gradients, invariances and more.
    """
    setup_logging("DEBUG" if verbose else "WARNING")
    try:
        cfg = parse_config(config_file)
        base_dir = config_file.parent
        settings = SuiteSettings.quick() if quick else SuiteSettings()
        if seeds is not None:
            settings = settings.with_seed_count(seeds)
        with Progress(SpinnerColumn(), TextColumn("{task.description}"), console=console) as progress:
            task = progress.add_task("Validating...", total=None)
            report = run_all(
                cfg.build_params(base_dir),
                cfg.cutoff_spec(),
                cfg.rank_topology(),
                settings,
                on_suite=lambda name: progress.update(task, description=f"Suite {name}"),
            )
        _display_validation(report)
        report.raise_on_failure()
        console.print(f"\n[bold green]All {len(report.checks)} checks passed[/bold green]")

    except (Exception, KeyboardInterrupt) as e:
        _exit_on_error(e, verbose)


def _display_validation(report: ValidationReport) -> None:
    table = Table(title="Validation", show_header=True, header_style="bold magenta")
    table.add_column("Suite", style="cyan", no_wrap=True)
    table.add_column("Passed", style="green")
    table.add_column("Worst", style="yellow")
    suites = {}
    for c in report.checks:
        suites.setdefault(c.suite, []).append(c)
    for name, checks in suites.items():
        passed = sum(c.passed for c in checks)
        style = "green" if passed == len(checks) else "bold red"
        worst = max(checks, key=lambda c: (not c.passed, abs(c.value)))
        table.add_row(name, f"[{style}]{passed}/{len(checks)}[/{style}]", f"{worst.value:.3g}")
    console.print(table)
    for c in report.failures:
        console.print(f"[red]FAIL[/red] {c.suite}/{c.name}: value {c.value:.6g}, limit {c.threshold:.6g} {c.detail}")


@app.command()
def rdf(
    trajectory: Path = typer.Argument(..., exists=True, dir_okay=False, readable=True, help="Extended-XYZ trajectory"),
    rmax: float = typer.Option(..., "--rmax", help="Largest pair distance (A)"),
    bins: int = typer.Option(100, "--bins", min=1, help="Histogram bins"),
    pair: Optional[str] = typer.Option(None, "--pair", help="Species pair, e.g. O-H"),
    output: Path = typer.Option(Path("rdf.csv"), "--output", "-o", help="CSV output path"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Enable verbose logging"),
) -> None:
    """Frame-averaged radial distribution function of a trajectory."""
    setup_logging("DEBUG" if verbose else "WARNING")
    try:
        frames = list(iter_xyz(trajectory))
        types_pair = None
        if pair is not None:
            species = frames[-1].species if frames else ()
            names = pair.split("-")
            if len(names) != 2 or any(n not in species for n in names):
                raise ConfigError(f"pair '{pair}' must name two of {species}", path="--pair")
            types_pair = (species.index(names[0]), species.index(names[1]))
        result = rdf_frames(frames, rmax, bins, types_pair)
        _write_csv(output, ["r", "g"], result.rows())
        peak = int(np.argmax(result.g))
        console.print(
            f"{len(frames)} frame(s), first peak at r = {result.r[peak]:.3f} A (g = {result.g[peak]:.3f})"
        )
        console.print(f"[bold green]Output saved to:[/bold green] [yellow]{output}[/yellow]")

    except (Exception, KeyboardInterrupt) as e:
        _exit_on_error(e, verbose)


@app.command("init-params")
def init_params_cmd(
    output: Path = typer.Argument(..., help="Parameter file to write"),
    seed: int = typer.Option(1, "--seed", help="Random seed"),
    ntypes: int = typer.Option(1, "--ntypes", min=1, help="Number of atom types"),
    embed_widths: str = typer.Option("8,16,16", "--embed-widths", help="Comma-separated embedding widths"),
    fit_widths: str = typer.Option("240,240,240", "--fit-widths", help="Comma-separated fitting widths"),
    m2: int = typer.Option(4, "--m2", min=1, help="Descriptor columns kept from the embedding"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Enable verbose logging"),
) -> None:
    """Write a freshly initialized model parameter file."""
    setup_logging("DEBUG" if verbose else "WARNING")
    try:
        params = init_params(
            seed,
            ntypes,
            embed_widths=_widths(embed_widths),
            fit_widths=_widths(fit_widths),
            m2=m2,
        )
        save_params(params, output)
        console.print(f"[bold green]Model saved to:[/bold green] [yellow]{output}[/yellow]")
    except (Exception, KeyboardInterrupt) as e:
        _exit_on_error(e, verbose)


def _widths(text: str) -> List[int]:
    try:
        widths = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"widths must be comma-separated integers, got '{text}'") from None
    if not widths or any(w < 1 for w in widths):
        raise ConfigError(f"widths must be positive, got '{text}'")
    return widths


@app.command()
def info() -> None:
    """Display schemes, defaults and example usage."""
    console.print(Panel.fit("[bold cyan]nodemd Info[/bold cyan]", border_style="cyan"))

    schemes_table = Table(title="Exchange Schemes", show_header=True, header_style="bold magenta")
    schemes_table.add_column("Scheme", style="cyan")
    schemes_table.add_column("Senders", style="yellow")
    schemes_table.add_column("Pattern", style="green")
    schemes_table.add_row("three-stage", "every rank", "shifts along x, y, z, forwarding earlier rounds")
    schemes_table.add_row("p2p", "every rank", "direct sends to all ranks in layer range")
    schemes_table.add_row("node-based", "1, 2 or 4 leaders", "gather, node-box halo exchange, scatter")
    console.print(schemes_table)

    defaults = Table(title="System Defaults", show_header=True, header_style="bold magenta")
    defaults.add_column("System", style="cyan")
    defaults.add_column("rc (A)", style="yellow")
    defaults.add_column("sel", style="green")
    defaults.add_column("dt (fs)", style="blue")
    defaults.add_row("copper", "8.0", "Cu 512", "1.0")
    defaults.add_row("water", "6.0", "O 46, H 92", "0.5")
    console.print(defaults)

    console.print("\n[bold cyan]Precision Modes:[/bold cyan]")
    console.print("  " + ", ".join(m.value for m in PrecisionMode))

    console.print("\n[bold cyan]Example Usage:[/bold cyan]")
    console.print("  nodemd run configs/copper.json --steps 100")
    console.print("  nodemd bench-comm configs/copper.json -o bench.csv")
    console.print("  nodemd ghost-model --a 1 --r 2")
    console.print("  nodemd validate configs/water.json")
    console.print("  nodemd rdf traj.xyz --rmax 6 --bins 120 --pair O-H")


@app.command()
def version() -> None:
    """Display version information."""
    console.print("[bold cyan]nodemd[/bold cyan]")
    console.print(f"Version: {__version__}")
    console.print("Backend: numpy")


def main() -> None:
    """Main entry point."""
    app()


if __name__ == "__main__":
    main()
