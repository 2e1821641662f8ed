"""
envelope-em command-line front end
Main entry point
"""
import argparse
import configparser
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Set

import numpy as np

from envelope_em.config.settings import Settings
from envelope_em.data.dataset_model import ObservedDataset
from envelope_em.data.fit_model import EmOptions, PredictorFamily
from envelope_em.data.table_manager import load_table, save_table
from envelope_em.errors import EnvelopeError, InvalidConfig
from envelope_em.services import report_service
from envelope_em.services.em_service import em_envelope_fit
from envelope_em.services.inference_service import asymptotic_se, bootstrap_se
from envelope_em.services.selection_service import select_u
from envelope_em.services.simulation_service import (
    ERROR_FAMILIES,
    PREDICTOR_FAMILIES,
    PRESETS,
    SELECTION_MODES,
    ScenarioSpec,
    get_preset,
    run_scenario,
    simulate_dataset,
)
from envelope_em.utils.logger import setup_logging
from envelope_em.utils.validators import (
    OUTPUT_FORMATS,
    PREDICTOR_MODELS,
    SELECTION_METHODS,
    parse_column_list,
    validate_choice,
    validate_positive,
    validate_u,
)

logger = logging.getLogger(__name__)

CONFIG_SECTION = "run"


def _flag(value: Any) -> bool:
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise InvalidConfig(f"expected a boolean, got {value!r}")


def _integer(value: Any) -> int:
    try:
        return int(str(value).strip())
    except ValueError:
        raise InvalidConfig(f"expected an integer, got {value!r}")


def _real(value: Any) -> float:
    try:
        return float(str(value).strip())
    except ValueError:
        raise InvalidConfig(f"expected a number, got {value!r}")


# Parsers for config-file values, keyed by argparse dest
CONVERTERS: Dict[str, Callable[[Any], Any]] = {
    "u": validate_u,
    "tol": _real,
    "max_iter": _integer,
    "threads": _integer,
    "seed": _integer,
    "bootstrap_reps": _integer,
    "threshold": _real,
    "bernoulli_scale": _real,
    "warm_start": _flag,
    "inference": _flag,
    "reps": _integer,
    "n": _integer,
    "r": _integer,
    "p": _integer,
    "omega_scale": _real,
    "omega0_scale": _real,
    "x_missing_rate": _real,
    "y_missing_rate": _real,
    "replicate": _integer,
}

# Never read from a config file
COMMAND_ONLY = {"command", "config", "log_level"}


@dataclass
class RunConfig:
    """Fully resolved options of one invocation"""
    command: str
    data: Optional[str] = None
    predictors: List[str] = field(default_factory=list)
    responses: List[str] = field(default_factory=list)
    u: Optional[int] = None
    select: str = "bicq"
    predictor_model: str = "normal"
    bernoulli_scale: float = 1.0
    tol: float = 1e-6
    max_iter: int = 500
    bootstrap_reps: int = 200
    threshold: float = 0.95
    inference: bool = False
    warm_start: bool = False
    seed: int = 0
    seed_drawn: bool = False
    threads: int = 0
    output: Optional[str] = None
    report: Optional[str] = None
    format: str = "json"
    scenario: Optional[str] = None
    replicate: int = 0
    overrides: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_jobs(self) -> int:
        return Settings.n_jobs(self.threads)

    def em_options(self) -> EmOptions:
        return EmOptions(tol=self.tol, max_iter=self.max_iter, u=self.u,
                         predictor_model=PredictorFamily.parse(self.predictor_model),
                         bernoulli_scale=self.bernoulli_scale, warm_start=self.warm_start)

    def to_dict(self):
        """Settings that shape the numbers; paths and thread count are left out"""
        return {
            "predictors": self.predictors,
            "responses": self.responses,
            "u": "auto" if self.u is None else self.u,
            "select": self.select,
            "predictor_model": self.predictor_model,
            "bernoulli_scale": self.bernoulli_scale,
            "tol": self.tol,
            "max_iter": self.max_iter,
            "bootstrap_reps": self.bootstrap_reps,
            "threshold": self.threshold,
            "inference": self.inference,
            "warm_start": self.warm_start,
        }


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="INI file: a [run] section plus optional per-command sections; flags win")
    parser.add_argument("--seed", type=int, help="master seed (drawn from entropy and recorded when absent)")
    parser.add_argument("--threads", type=int, help="worker threads, 0 = all cores")
    parser.add_argument("--output", "-o", help="output path (stdout when absent)")
    parser.add_argument("--format", choices=OUTPUT_FORMATS, help="report format")
    parser.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")


def _add_estimation(parser: argparse.ArgumentParser, select_flag: bool = True):
    parser.add_argument("--data", help="comma- or tab-delimited table with a header row")
    parser.add_argument("--predictors", help="comma-separated predictor columns")
    parser.add_argument("--responses", help="comma-separated response columns")
    if select_flag:
        parser.add_argument("--u", help="envelope dimension or 'auto'")
    parser.add_argument("--select", choices=SELECTION_METHODS, help="dimension selection method")
    parser.add_argument("--predictor-model", dest="predictor_model", choices=PREDICTOR_MODELS)
    parser.add_argument("--bernoulli-scale", dest="bernoulli_scale", type=float,
                        help="support point c of the two-point predictor")
    parser.add_argument("--tol", type=float)
    parser.add_argument("--max-iter", dest="max_iter", type=int)
    parser.add_argument("--bootstrap-reps", dest="bootstrap_reps", type=int)
    parser.add_argument("--threshold", type=float, help="bootstrap selection threshold on mean q2")
    parser.add_argument("--warm-start", dest="warm_start", action="store_true", default=None,
                        help="start EM from complete-case moments")


def _add_scenario(parser: argparse.ArgumentParser, harness: bool = True):
    parser.add_argument("--scenario", choices=sorted(PRESETS) + ["custom"], help="preset design")
    for name, kind in (("n", int), ("r", int), ("p", int), ("u", int)):
        parser.add_argument(f"--{name}", type=kind)
    parser.add_argument("--error-family", dest="error_family", choices=ERROR_FAMILIES)
    parser.add_argument("--predictor-family", dest="predictor_family", choices=PREDICTOR_FAMILIES)
    parser.add_argument("--omega-scale", dest="omega_scale", type=float)
    parser.add_argument("--omega0-scale", dest="omega0_scale", type=float)
    parser.add_argument("--x-missing-rate", dest="x_missing_rate", type=float)
    parser.add_argument("--y-missing-rate", dest="y_missing_rate", type=float)
    if harness:
        parser.add_argument("--reps", type=int, help="Monte Carlo replicates")
        parser.add_argument("--selection", choices=SELECTION_MODES, help="how envelope estimators pick u")
        parser.add_argument("--bootstrap-reps", dest="bootstrap_reps", type=int)
        parser.add_argument("--tol", type=float)
        parser.add_argument("--max-iter", dest="max_iter", type=int)
    else:
        parser.add_argument("--replicate", type=int, help="replicate index within the scenario")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="envelope-em",
        description="Envelope estimation for multivariate regression with missing data")
    commands = parser.add_subparsers(dest="command", required=True)

    fit = commands.add_parser("fit", help="fit the envelope model by EM")
    _add_estimation(fit)
    fit.add_argument("--inference", action="store_true", default=None, help="bootstrap standard errors")
    _add_common(fit)

    select = commands.add_parser("select", help="choose the envelope dimension")
    _add_estimation(select, select_flag=False)
    _add_common(select)

    simulate = commands.add_parser("simulate", help="run a Monte Carlo scenario")
    _add_scenario(simulate)
    simulate.add_argument("--report", help="also write the JSON report here, whatever --format says")
    _add_common(simulate)

    sample = commands.add_parser("sample", help="write one simulated masked dataset")
    _add_scenario(sample, harness=False)
    _add_common(sample)
    return parser


def command_keys(command: str) -> Set[str]:
    """argparse dests a subcommand defines, minus the ones never read from a file"""
    return set(vars(build_parser().parse_args([command]))) - COMMAND_ONLY


def read_config_file(path: str, command: str) -> Dict[str, Any]:
    """
    Settings for one command from an INI file

    [run] is shared by every command: a key some other command defines is
    skipped, a key no command defines is an error. A [<command>] section
    overrides [run] and may only hold that command's keys.

    Raises:
        InvalidConfig for an unreadable file or an unknown key
    """
    config = configparser.ConfigParser()
    try:
        read = config.read(path, encoding="utf-8")
    except configparser.Error as error:
        raise InvalidConfig(f"cannot parse config file {path}: {error}")
    if not read:
        raise InvalidConfig(f"config file not found: {path}")
    allowed = command_keys(command)
    known = set().union(*(command_keys(name) for name in COMMANDS))
    values = {}
    for section, strict in ((CONFIG_SECTION, False), (command, True)):
        if not config.has_section(section):
            continue
        for key, raw in config.items(section):
            dest = key.replace("-", "_")
            if dest not in allowed:
                if strict or dest not in known:
                    raise InvalidConfig(f"unknown key {key!r} in [{section}] of {path}")
                logger.debug(f"Skipping [{section}] key {key!r}: not used by {command}")
                continue
            values[dest] = CONVERTERS.get(dest, str.strip)(raw)
    logger.debug(f"Read {len(values)} setting(s) for {command} from {path}")
    return values


def _scenario_overrides(
command: str, given: Dict[str, Any]) -> Dict[str, Any]:
    if command not in ("simulate", "sample"):
        return {}
    overrides = {key: given[key] for key in ScenarioSpec.__dataclass_fields__
                 if given.get(key) is not None and key != "seed"}
    if "bootstrap_reps" in given:
        overrides["selection_reps"] = given["bootstrap_reps"]
    return overrides


def _draw_seed() -> int:
    return int(np.random.SeedSequence().generate_state(1)[0])


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Flag > config file > Settings"""
    given = {key: value for key, value in vars(args).items() if value is not None}
    if args.config:
        file_values = read_config_file(args.config, args.command)
        given = {**file_values, **given}
    if isinstance(given.get("u"), str):
        given["u"] = validate_u(given["u"])

    seed = given.get("seed")
    cfg = RunConfig(
        command=args.command,
        data=given.get("data"),
        predictors=parse_column_list(given.get("predictors")),
        responses=parse_column_list(given.get("responses")),
        u=given.get("u"),
        select=validate_choice(given.get("select"), SELECTION_METHODS, "select", "bicq"),
        predictor_model=validate_choice(given.get("predictor_model"), PREDICTOR_MODELS, "predictor_model", "normal"),
        bernoulli_scale=validate_positive(given.get("bernoulli_scale", 1.0), "bernoulli_scale"),
        tol=validate_positive(given.get("tol", Settings.TOL), "tol"),
        max_iter=validate_positive(given.get("max_iter", Settings.MAX_ITER), "max_iter", integer=True),
        bootstrap_reps=validate_positive(given.get("bootstrap_reps", Settings.BOOTSTRAP_REPS), "bootstrap_reps",
                                         integer=True),
        threshold=given.get("threshold", Settings.SELECTION_THRESHOLD),
        inference=bool(given.get("inference", False)),
        warm_start=bool(given.get("warm_start", False)),
        seed=_draw_seed() if seed is None else seed,
        seed_drawn=seed is None,
        threads=given.get("threads", Settings.THREADS),
        output=given.get("output"),
        report=given.get("report"),
        format=validate_choice(given.get("format"), OUTPUT_FORMATS, "format", Settings.OUTPUT_FORMAT),
        scenario=given.get("scenario"),
        replicate=given.get("replicate", 0),
        overrides=_scenario_overrides(args.command, given),
    )
    if not 0 < cfg.threshold < 1:
        raise InvalidConfig(f"threshold must lie in (0, 1), got {cfg.threshold}")
    if cfg.threads < 0:
        raise InvalidConfig(f"threads must be >= 0, got {cfg.threads}")
    if cfg.seed_drawn:
        logger.info(f"No --seed given; drew seed {cfg.seed}")
    return cfg


def _load_dataset(cfg: RunConfig) -> ObservedDataset:
    if not cfg.data:
        raise InvalidConfig("--data is required")
    if not cfg.predictors or not cfg.responses:
        raise InvalidConfig("--predictors and --responses are required")
    if cfg.predictor_model == "bernoulli" and len(cfg.predictors) != 1:
        raise InvalidConfig("the bernoulli predictor model needs exactly one predictor column")
    ds = load_table(cfg.data, cfg.predictors, cfg.responses)
    if cfg.u is not None and cfg.u > ds.r:
        raise InvalidConfig(f"u={cfg.u} exceeds the number of responses r={ds.r}")
    return ds


def _render(document: Dict[str, Any], table: Callable[[], str], cfg: RunConfig):
    text = report_service.to_json(document) if cfg.format == "json" else table()
    report_service.write_output(text, cfg.output)


def cmd_fit(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    opts = cfg.em_options()
    selection = None
    if cfg.u is None:
        selection = select_u(ds, opts, method=cfg.select, reps=cfg.bootstrap_reps, threshold=cfg.threshold,
                             seed=cfg.seed, n_jobs=cfg.n_jobs)
        opts = opts.with_u(selection.chosen_u)
        fit = selection.fits.get(selection.chosen_u) or em_envelope_fit(ds, opts)
    else:
        fit = em_envelope_fit(ds, opts)
    logger.info(f"Fitted {fit.label} on {ds.n} rows")

    bootstrap = asymptotic = None
    if cfg.inference:
        boot_opts = dataclasses.replace(opts, track_loglik=False)
        bootstrap = bootstrap_se(ds, boot_opts, reps=cfg.bootstrap_reps, seed=cfg.seed, n_jobs=cfg.n_jobs)
        asymptotic = asymptotic_se(fit, ds, boot_opts, reps=cfg.bootstrap_reps, seed=cfg.seed, n_jobs=cfg.n_jobs)

    document = report_service.fit_document(fit, selection=selection, bootstrap=bootstrap, data=ds.to_dict(),
                                           seed=cfg.seed, config=cfg.to_dict(), asymptotic=asymptotic)
    _render(document, lambda: report_service.fit_table(fit, ds.response_names, ds.predictor_names,
                                                       bootstrap=bootstrap, asymptotic=asymptotic), cfg)
    return 0


def cmd_select(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    report = select_u(ds, cfg.em_options(), method=cfg.select, reps=cfg.bootstrap_reps,
                      threshold=cfg.threshold, seed=cfg.seed, n_jobs=cfg.n_jobs)
    document = report_service.selection_document(report, data=ds.to_dict(), seed=cfg.seed, config=cfg.to_dict())
    _render(document, lambda: report_service.selection_table(report), cfg)
    return 0


def scenario_from_config(cfg: RunConfig) -> ScenarioSpec:
    overrides = {**cfg.overrides, "seed": cfg.seed}
    if cfg.scenario and cfg.scenario != "custom":
        return get_preset(cfg.scenario, **overrides)
    return ScenarioSpec(name="custom", **overrides)


def cmd_simulate(cfg: RunConfig) -> int:
    spec = scenario_from_config(cfg)
    result = run_scenario(spec, n_jobs=cfg.n_jobs)
    document = report_service.scenario_document(result, seed=cfg.seed)
    if cfg.report:
        report_service.write_output(report_service.to_json(document), cfg.report)
    _render(document, lambda: report_service.scenario_table(result), cfg)
    return 0


def cmd_sample(cfg: RunConfig) -> int:
    if not cfg.output:
        raise InvalidConfig("sample needs --output for the data file")
    spec = scenario_from_config(cfg)
    sample = simulate_dataset(spec, replicate=cfg.replicate)
    save_table(sample.dataset, cfg.output)
    return 0


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "fit": cmd_fit,
    "select": cmd_select,
    "simulate": cmd_simulate,
    "sample": cmd_sample,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        cfg = resolve_config(args)
        return COMMANDS[cfg.command](cfg)
    except EnvelopeError as error:
        logger.error(f"{_command_name(args)} failed: {error.code}")
        sys.stderr.write(f"error[{error.code}]: {error}\n")
        return error.exit_status
    except ValueError as error:
        logger.error(f"{_command_name(args)} rejected its input: {error}")
        sys.stderr.write(f"error[InvalidConfig]: {error}\n")
        return InvalidConfig.exit_status


def _command_name(args: argparse.Namespace) -> str:
    return getattr(args, "command", "envelope-em")


if __name__ == "__main__":
    sys.exit(main())
