# lidar-probe-init/src/lidar_probe_init/config.py
"""
Pipeline configuration.

Configuration files are JSON or YAML mappings mirroring ``PipelineConfig``.
Every level is checked strictly: an unknown key is rejected with its dotted
path, e.g. ``registration.fitness_treshold``. Values that are missing keep
their defaults.

Precedence, lowest first: defaults, the ``--config`` file, dataset
``session.json`` overrides, explicit command-line flags.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any, Dict, Optional, Tuple, Type, TypeVar, cast

import yaml

from lidar_probe_init.calibration import SolverConfig
from lidar_probe_init.exceptions import InvalidConfigurationError, RejectedInputError
from lidar_probe_init.formats import dumps_json
from lidar_probe_init.metrics import ERROR_BANDS, ICC_FORMS
from lidar_probe_init.preprocess import PreprocessConfig
from lidar_probe_init.reconstruction import ReconstructionConfig
from lidar_probe_init.registration import RegistrationConfig

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class MetricsConfig:
    """
    Attributes:
        coverage_tolerance: Distance counted as covered, meters.
        error_bands: Band edges of the surface-error breakdown, meters.
        icc_form: "ICC(1,1)" or "ICC(2,1)".
        histogram_bin_width: Residual histogram bin width, meters.
        histogram_half_range: Residual histogram half range, meters.
        marker_pick_distance: Largest accepted distance between the nominal
            marker apex and the picked cloud point, meters.
    """

    coverage_tolerance: float = 0.008
    error_bands: Tuple[float, ...] = ERROR_BANDS
    icc_form: str = "ICC(1,1)"
    histogram_bin_width: float = 0.0005
    histogram_half_range: float = 0.006
    marker_pick_distance: float = 0.005

    def __post_init__(self):
        self.error_bands = tuple(float(e) for e in self.error_bands)
        if self.icc_form not in ICC_FORMS:
            logger.error(f"Unknown ICC form {self.icc_form}")
            raise InvalidConfigurationError(f"icc_form must be one of {ICC_FORMS}")
        if not self.error_bands or any(
            b <= a for a, b in zip(self.error_bands, self.error_bands[1:])
        ):
            raise InvalidConfigurationError("error_bands must be increasing")
        for name in (
            "coverage_tolerance",
            "histogram_bin_width",
            "histogram_half_range",
            "marker_pick_distance",
        ):
            if not getattr(self, name) > 0:
                raise InvalidConfigurationError(f"{name} must be positive")


@dataclass
class ReproduceConfig:
    """
    Studies run by ``reproduce``.

    Attributes:
        calibration_study: Run the noise sweep of calibration recovery.
        surface_study: Run the sensor-configuration surface-error study.
        repeatability_study: Run the repeated-trial probe placement study.
        noise_levels_mm: Range noise levels of the calibration study.
        calibration_repetitions: Seeded repetitions per noise level.
        subjects: Phantom subjects of the repeatability study.
        trials: Re-seeded trials per subject.
        quick: Reduce repetitions and resolution for smoke runs.
    """

    calibration_study: bool = True
    surface_study: bool = True
    repeatability_study: bool = True
    noise_levels_mm: Tuple[float, ...] = (0.0, 0.5, 1.0, 1.5, 2.0)
    calibration_repetitions: int = 5
    subjects: int = 5
    trials: int = 3
    quick: bool = False

    def __post_init__(self):
        self.noise_levels_mm = tuple(float(n) for n in self.noise_levels_mm)
        if any(n < 0 for n in self.noise_levels_mm):
            raise InvalidConfigurationError("noise_levels_mm must be non-negative")
        if self.calibration_repetitions < 1:
            raise InvalidConfigurationError("calibration_repetitions must be at least 1")
        if self.subjects < 2 or self.trials < 2:
            logger.error(f"Repeatability needs 2x2 trials, got {self.subjects}x{self.trials}")
            raise InvalidConfigurationError("subjects and trials must be at least 2")


@dataclass
class PipelineConfig:
    """
    Settings of every stage.

    Attributes:
        seed: Root seed; it replaces the seeds of the nested configs.
        threads: Worker cap of parallel stages.
        debug_dir: Directory for intermediate clouds, or None.
    """

    seed: int = 69
    threads: int = 1
    debug_dir: Optional[str] = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    reconstruction: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    reproduce: ReproduceConfig = field(default_factory=ReproduceConfig)

    def __post_init__(self):
        if self.threads < 1:
            logger.error(f"Invalid thread count {self.threads}")
            raise InvalidConfigurationError("threads must be at least 1")
        self.apply_seed(self.seed)

    def apply_seed(self, seed: int) -> None:
        if int(seed) < 0:
            raise InvalidConfigurationError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.solver.seed = self.seed
        self.registration.seed = self.seed

    def provenance(self) -> Dict[str, Any]:
        """Settings that shape outputs; worker count and debug dumps do not."""
        payload = asdict(self)
        payload.pop("threads")
        payload.pop("debug_dir")
        return payload

    def canonical_json(self) -> str:
        return dumps_json(self.provenance())


def _dotted(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _convert(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_convert(v) for v in value)
    return value


def from_mapping(cls: Type[T], mapping: Any, path: str = "") -> T:
    """
    Build a dataclass from a mapping, recursing into nested dataclasses.

    Raises:
        InvalidConfigurationError: On unknown keys, wrong shapes or values
            the dataclass rejects; the message carries the dotted key path.
    """
    if not isinstance(mapping, dict):
        logger.error(f"Configuration node '{path or '<root>'}' is not a mapping")
        raise InvalidConfigurationError(f"{path or '<root>'} must be a mapping")
    known = {f.name: f for f in fields(cast(Any, cls))}
    unknown = sorted(set(mapping) - set(known))
    if unknown:
        key = _dotted(path, str(unknown[0]))
        logger.error(f"Unknown configuration key {key}")
        raise InvalidConfigurationError(f"Unknown configuration key: {key}")
    kwargs = {}
    for name, value in mapping.items():
        nested = known[name].type
        if is_dataclass(nested):
            kwargs[name] = from_mapping(cast(Type[Any], nested), value, _dotted(path, name))
        else:
            kwargs[name] = _convert(value)
    try:
        return cls(**kwargs)
    except InvalidConfigurationError as e:
        raise InvalidConfigurationError(f"{path or '<root>'}: {e}") from e
    except (TypeError, ValueError, IndexError) as e:
        logger.error(f"Invalid value under {path or '<root>'}: {e}")
        raise InvalidConfigurationError(f"{path or '<root>'}: {e}") from e


def load_config(file_path: str) -> Dict[str, Any]:
    """
    Load a configuration mapping from a JSON or YAML file.

    Args:
        file_path: ``.json`` files are parsed as JSON, anything else as YAML.

    Returns:
        The mapping, empty for an empty file.

    Raises:
        RejectedInputError: If the file is missing.
        InvalidConfigurationError: If it does not parse to a mapping.
    """
    logger.info(f"Loading configuration from {file_path}")
    if not os.path.isfile(file_path):
        logger.error(f"Configuration file '{file_path}' not found.")
        raise RejectedInputError(f"Configuration file not found: {file_path}")
    with open(file_path, "r") as f:
        try:
            if file_path.lower().endswith(".json"):
                payload = json.load(f)
            else:
                payload = yaml.safe_load(f)
        except (json.JSONDecodeError, yaml.YAMLError) as e:
            logger.error(f"Error parsing the configuration file: {e}")
            raise InvalidConfigurationError(f"Cannot parse {file_path}: {e}") from e
    if payload is None:
        return {}
    if not isinstance(payload, dict):
        raise InvalidConfigurationError(f"{file_path} must contain a mapping")
    return cast(Dict[str, Any], payload)


def build_config(file_path: Optional[str] = None) -> PipelineConfig:
    """Defaults, overlaid with ``file_path`` when given."""
    if file_path is None:
        return PipelineConfig()
    return from_mapping(PipelineConfig, load_config(file_path))
