#!/usr/bin/env python
import argparse
import enum
import json
import os
import sys
import warnings

_showwarning = warnings.showwarning  # store this

from . import debug, set_debug, get_debug, log, __version__


class ConfigError(ValueError):
    pass


class ExitStatus(enum.IntEnum):
    SUCCESS = 0
    VIOLATIONS = 1
    ERROR = 2


class Config:
    """
    Options come from the documented template (config_example.py), then the
    user file (Python or JSON), with --override statements applied before
    and after the user file.
    """

    def __init__(self, configpath=None):
        debug(f"roofshift ({__version__})")
        debug(f"config path: '{configpath}'")
        self._configpath = configpath
        self._config = {"_configpath": self._configpath}

        templatepath = os.path.join(os.path.dirname(__file__), "config_example.py")
        with open(templatepath, "rt") as file:
            self._template = file.read()

    def _write_template(self, outpath=None):
        if outpath is None:
            outpath = self._configpath

        txt = self._template.replace("__VERSION__", __version__)

        if os.path.exists(outpath):
            raise ConfigError(
                f"Path '{outpath}' exists. Specify a different path or move the existing file"
            )

        dirname = os.path.dirname(outpath)
        if dirname:
            os.makedirs(dirname, exist_ok=True)

        with open(outpath, "wt") as file:
            file.write(txt)

        debug(f"Wrote template config to {outpath}")

    def _read_json(self):
        try:
            with open(self._configpath, "rt") as file:
                values = json.load(file)
        except json.JSONDecodeError as E:
            raise ConfigError(f"{self._configpath}:{E.lineno}:{E.colno}: {E.msg}")
        if not isinstance(values, dict):
            raise ConfigError(f"{self._configpath}: top level must be an object")

        unknown = sorted(k for k in values if k not in self._config)
        if unknown:
            raise ConfigError(f"Unknown option(s) in '{self._configpath}': {unknown}")
        return values

    def parse(self, override=""):
        self._config["log"] = self._config["print"] = log
        self._config["debug"] = debug
        if self._configpath:
            self._config["__file__"] = os.path.abspath(self._configpath)
            self._config["__dir__"] = os.path.dirname(self._config["__file__"])
        self._config["__CPU_COUNT__"] = os.cpu_count()

        exec(self._template, self._config)

        if not self._configpath:
            exec(override, self._config)
        elif self._configpath.lower().endswith(".json"):
            exec(override, self._config)
            self._config.update(self._read_json())
            exec(override, self._config)
        else:
            if not os.path.exists(self._configpath):
                raise ConfigError(f"config file '{self._configpath}' does not exist")
            with open(self._configpath, "rt") as file:
                text = file.read()
            # Add the override text before and after in case it sets functionality
            exec(override + "\n\n" + text + "\n\n" + override, self._config)

        # clean up all of the junk
        _tmp = {}
        exec("", _tmp)
        for key in _tmp:
            self._config.pop(key, None)
        for key in ["log", "print", "debug"]:
            self._config.pop(key, None)

        self.validate()

    def validate(self):
        reqs = {
            "footprint_kind": ("rectangle", "l_shape"),
            "score_model": ("iou_linked", "uniform"),
            "train_fusion": ("max_norm", "mean", "max_component"),
            "split": ("train", "val", "test", "unsplit"),
            "azimuth_per_building": (True, False),
            "train_baseline": (True, False),
        }
        for key, options in reqs.items():
            val = self._config[key]
            if val not in options:
                raise ConfigError(f"'{key}' must be in {options}. Specified '{val}'")

        self._config["jobs"] = int(max([self._config["jobs"] or 1, 1]))

        # The dataclasses own the range checks
        from .evaluation import EvalConfig
        from .offset_learning import TrainConfig
        from .synth import NoiseConfig, SceneConfig

        for cls in (SceneConfig, NoiseConfig, EvalConfig, TrainConfig):
            try:
                cls.from_config(self)
            except (ValueError, TypeError) as E:
                raise ConfigError(f"Invalid {cls.__name__} setting: {E}")

    def __repr__(self):
        return "".join(
            [
                "Config(",
                ", ".join(
                    f"{k}={repr(v)}"
                    for k, v in self._config.items()
                    if not k.startswith("_")
                ),
                ")",
            ]
        )

    def __getattr__(self, attr):
        try:
            return self._config[attr]
        except KeyError:
            raise AttributeError(attr)

    def __setattr__(self, attr, value):
        if attr.startswith("_"):
            return super(Config, self).__setattr__(attr, value)

        self._config[attr] = value


DESCRIPTION = "Roof-to-footprint offset tools for off-nadir building extraction"
EPILOG = """\
See the roofshift config file template (`roofshift new config.py`) for
all settings. Exit status: 0 success, 1 validation violations, 2 error.
"""


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma separated numbers. Got '{text}'")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--debug", action="store_true", help="Debug messages will be printed"
    )
    common.add_argument(
        "--override",
        action="append",
        default=list(),
        metavar="'OPTION = VALUE'",
        help=(
            "Override any config option for this call only. Must be specified as "
            "'OPTION = VALUE', where VALUE should be properly shell escaped. "
            "Can specify multiple times."
        ),
    )

    parser = argparse.ArgumentParser(
        description=DESCRIPTION,
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument(
        "--version", action="version", version="roofshift-" + __version__
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    new = sub.add_parser("new", parents=[common], help="Write a new config template")
    new.add_argument("configpath", help="Where to write the template")

    val = sub.add_parser(
        "validate", parents=[common], help="Check annotations against construction rules"
    )
    val.add_argument("--dataset", required=True, help="Annotation JSON")
    val.add_argument(
        "--tol", type=float, default=1e-6, help="Tolerance in pixels. Default %(default)s"
    )

    der = sub.add_parser(
        "derive", parents=[common], help="Fill in missing footprints and building boxes"
    )
    der.add_argument("--dataset", required=True, help="Annotation JSON")
    der.add_argument("--out", required=True, help="Where to write the completed JSON")

    ev = sub.add_parser("evaluate", parents=[common], help="Score predictions")
    ev.add_argument("--gt", required=True, help="Ground-truth annotation JSON")
    ev.add_argument("--pred", required=True, help="Prediction JSON (with scores)")
    ev.add_argument("--out", required=True, help="Report JSON path")
    ev.add_argument("--csv", help="Optional one-row-per-track CSV path")
    ev.add_argument("--config", help="Config file (.py or .json)")
    ev.add_argument(
        "--boundary-d",
        type=float,
        help="Boundary band radius in pixels. Default 0.02 x image diagonal",
    )
    ev.add_argument("--iou", type=float, help="Mask IoU threshold. Default 0.5")
    ev.add_argument("--jobs", type=int, help="Images evaluated concurrently")

    syn = sub.add_parser("synth", parents=[common], help="Generate a synthetic scene")
    syn.add_argument("--config", required=True, help="Scene config (.py or .json)")
    syn.add_argument("--out", required=True, help="Ground-truth JSON path")
    syn.add_argument("--pred-out", help="Also write perturbed predictions here")
    syn.add_argument("--noise", help="Noise config (.py or .json) applied on top")
    syn.add_argument("--seed", type=int, required=True, help="Scene and noise seed")

    tt = sub.add_parser(
        "train-toy", parents=[common], help="Train the toy offset regressor"
    )
    tt.add_argument("--config", help="Config file (.py or .json)")
    tt.add_argument(
        "--angles", type=_float_list, help="Comma separated degrees. Default 0,90,180,270"
    )
    tt.add_argument(
        "--fusion", choices=("max_norm", "mean", "max_component"), help="Fusion strategy"
    )
    tt.add_argument("--steps", type=int, help="Training steps")
    tt.add_argument("--seed", type=int, required=True, help="Training seed")
    tt.add_argument("--out", help="Checkpoint path for the trained parameters")
    tt.add_argument("--report", help="EPE report JSON path")
    tt.add_argument(
        "--no-baseline",
        action="store_true",
        help="Do not also train the single-angle baseline",
    )
    return parser


def _noise_overrides(path):
    """The noise file is read like a config but only its noise keys are kept"""
    noise = Config(path)
    noise.parse()
    keys = (
        "vertex_jitter_sigma",
        "offset_noise_sigma",
        "drop_rate",
        "spurious_rate",
        "score_model",
        "noise_seed",
    )
    return "\n".join(f"{key} = {getattr(noise, key)!r}" for key in keys)


def load_config(args):
    configpath = getattr(args, "config", None)
    overrides = list(args.override)
    if getattr(args, "noise", None):
        overrides.insert(0, _noise_overrides(args.noise))
    if getattr(args, "seed", None) is not None:
        overrides.insert(0, f"seed = {args.seed!r}")
    for item in args.override:
        log(f"CLI Override: {item}")

    config = Config(configpath)
    config.parse(override="\n".join(overrides))
    if getattr(args, "jobs", None):
        config.jobs = int(max(args.jobs, 1))
    debug("config:", config)
    return config


def _dump_log(args):
    out = getattr(args, "out", None) or getattr(args, "report", None)
    if not out:
        return
    path = os.path.join(os.path.dirname(os.path.abspath(out)), "roofshift_error.log")
    try:
        log.dump(path, everything=True)
        print(f"ERROR. Dumping logs (with debug) to '{path}'", file=sys.stderr)
    except OSError:
        pass


def run(argv=None):
    """Run one command. Returns an ExitStatus, never calls sys.exit"""
    from .main import RoofShift

    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]

    try:
        args = parser.parse_args(argv)
    except SystemExit as E:  # argparse reports usage errors (and --help) this way
        return ExitStatus.SUCCESS if not E.code else ExitStatus.ERROR

    if args.debug:
        set_debug(True)
        warnings.showwarning = _showwarning  # restore
    else:
        set_debug(False)
        warnings.showwarning = showwarning  # Monkey patch for CLI usage

    debug("argv:", argv)
    debug("CLI config:", args)

    try:
        if args.command == "new":
            Config(args.configpath)._write_template()
            log(f"Config file written to '{args.configpath}'")
            return ExitStatus.SUCCESS

        config = load_config(args)
        return ExitStatus(RoofShift(config).run(args))

    except (ValueError, OSError) as E:
        _dump_log(args)
        if get_debug():
            raise
        msg = E.strerror if isinstance(E, OSError) and E.strerror else str(E)
        if isinstance(E, OSError) and E.filename:
            msg = f"{msg}: '{E.filename}'"
        print(f"ERROR: {msg}", file=sys.stderr)
        return ExitStatus.ERROR


def cli(argv=None):
    sys.exit(int(run(argv)))


def showwarning(*args, **kwargs):
    log("WARNING", str(args[0]), file=sys.stderr)
