import os
import json
import hashlib
import math
from dataclasses import dataclass, asdict, fields, replace

from utils.errors import ConfigError

PLANNER_KINDS = ('frontier', 'coverage')
HUMAN_SELECTION_KINDS = ('ours', 'random', 'unc_rand', 'rand_unc', 'reg_imp', 'dense')
PSEUDO_SELECTION_KINDS = ('ours', 'random', 'dist_align', 'none', 'dense')

# Fields that do not change results and are left out of the config hash
NON_HASHED_FIELDS = ('seed', 'run_root', 'workers')


@dataclass(frozen=True)
class MissionConfig:
    """All tunables of a campaign. Lengths are meters, times seconds."""

    # world
    world_size: int = 128
    cell_size: float = 1.0
    num_classes: int = 5
    world_path: str = ''
    flat_world: bool = False
    sensor_noise: float = 0.05

    # camera / flight
    image_size: int = 40
    footprint: float = 20.0
    altitude: float = 30.0
    speed: float = 0.1
    start_x: float = -1.0
    start_y: float = -1.0

    # missions
    budget: float = 1800.0
    missions: int = 10

    # planner
    planner: str = 'frontier'
    c_u: float = 0.5
    lowres: int = 32
    candidate_spacing: float = 0.0
    pseudo_spacing: float = 0.0
    voxel_size: float = 0.0

    # label selection
    human_selection: str = 'ours'
    pseudo_selection: str = 'ours'
    alpha: int = 10
    beta: float = 5.0
    radius: int = 1
    mc_samples: int = 20
    annotator_dir: str = ''

    # surrogate model / training
    hidden: int = 32
    dropout: float = 0.5
    patch_radius: int = 2
    batch_size: int = 8
    peak_lr: float = 0.05
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.1

    # evaluation
    eval_grid: int = 4

    seed: int = 0
    workers: int = 1
    run_root: str = ''

    @property
    def effective_voxel_size(self):
        return self.voxel_size if self.voxel_size > 0 else self.cell_size

    @property
    def effective_candidate_spacing(self):
        return self.candidate_spacing if self.candidate_spacing > 0 else self.footprint / 2.0

    @property
    def effective_pseudo_spacing(self):
        return self.pseudo_spacing if self.pseudo_spacing > 0 else self.footprint

    @property
    def uses_alpha(self):
        """Dense human labels with dense or no pseudo labels make α irrelevant."""
        return not (self.human_selection == 'dense' and self.pseudo_selection in ('dense', 'none'))

    def validate(self):
        """Raise ConfigError on the first violated invariant; return self otherwise."""
        checks = [
            (self.budget > 0, f"budget must be > 0, got {self.budget}"),
            (self.missions >= 1, f"missions must be >= 1, got {self.missions}"),
            (self.speed > 0, f"speed must be > 0, got {self.speed}"),
            (self.alpha >= 1, f"alpha must be >= 1, got {self.alpha}"),
            (0 < self.beta <= 100, f"beta must be in (0, 100], got {self.beta}"),
            (self.radius >= 1, f"radius must be >= 1, got {self.radius}"),
            (self.c_u >= 0, f"c_u must be >= 0, got {self.c_u}"),
            (self.mc_samples >= 1, f"mc_samples must be >= 1, got {self.mc_samples}"),
            (self.lowres >= 1, f"lowres must be >= 1, got {self.lowres}"),
            (self.image_size >= 2, f"image_size must be >= 2, got {self.image_size}"),
            (self.footprint > 0, f"footprint must be > 0, got {self.footprint}"),
            (self.altitude > 0, f"altitude must be > 0, got {self.altitude}"),
            (self.world_size >= 1, f"world_size must be >= 1, got {self.world_size}"),
            (self.cell_size > 0, f"cell_size must be > 0, got {self.cell_size}"),
            (self.num_classes >= 1, f"num_classes must be >= 1, got {self.num_classes}"),
            (0 <= self.sensor_noise <= 1, f"sensor_noise must be in [0, 1], got {self.sensor_noise}"),
            (self.planner in PLANNER_KINDS, f"unknown planner '{self.planner}', expected one of {PLANNER_KINDS}"),
            (self.human_selection in HUMAN_SELECTION_KINDS,
             f"unknown human selection '{self.human_selection}', expected one of {HUMAN_SELECTION_KINDS}"),
            (self.pseudo_selection in PSEUDO_SELECTION_KINDS,
             f"unknown pseudo selection '{self.pseudo_selection}', expected one of {PSEUDO_SELECTION_KINDS}"),
            (0 <= self.dropout < 1, f"dropout must be in [0, 1), got {self.dropout}"),
            (self.hidden >= 1, f"hidden must be >= 1, got {self.hidden}"),
            (self.patch_radius >= 0, f"patch_radius must be >= 0, got {self.patch_radius}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (self.peak_lr > 0, f"peak_lr must be > 0, got {self.peak_lr}"),
            (self.max_epochs >= 1, f"max_epochs must be >= 1, got {self.max_epochs}"),
            (self.patience >= 1, f"patience must be >= 1, got {self.patience}"),
            (0 <= self.val_fraction <= 0.5, f"val_fraction must be in [0, 0.5], got {self.val_fraction}"),
            (self.eval_grid >= 1, f"eval_grid must be >= 1, got {self.eval_grid}"),
            (self.workers >= 1, f"workers must be >= 1, got {self.workers}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        if self.annotator_dir and not os.path.isdir(self.annotator_dir):
            raise ConfigError(f"annotator label directory not found: {self.annotator_dir}")

        pool = math.ceil(self.beta / 100.0 * self.image_size * self.image_size)
        if self.uses_alpha and self.alpha > pool:
            raise ConfigError(
                f"alpha={self.alpha} exceeds the top-beta pool of {pool} pixels "
                f"(beta={self.beta}%, image {self.image_size}x{self.image_size})"
            )
        return self

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        payload = {k: v for k, v in self.to_dict().items() if k not in NON_HASHED_FIELDS}
        canonical = json.dumps(payload, sort_keys=True)
        return hashlib.sha1(canonical.encode('utf-8')).hexdigest()[:10]

    def run_name(self):
        return f"{self.config_hash()}_seed{self.seed}"

    def with_overrides(self, **overrides):
        overrides = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(overrides) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return replace(self, **overrides)

    @classmethod
    def from_dict(cls, data):
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        values = {}
        for name, value in data.items():
            default = getattr(cls, name)
            try:
                values[name] = type(default)(value) if not isinstance(default, bool) else _to_bool(value)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid value for '{name}': {value!r} ({e})")
        return cls(**values)

    @classmethod
    def load_json(cls, path):
        try:
            with open(path, 'r') as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"could not read config file {path}: {e}")
        return cls.from_dict(data)

    def save_json(self, path):
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def _to_bool(value):
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        lowered = value.strip().lower()
        if lowered in ('1', 'true', 'yes', 'on'):
            return True
        if lowered in ('0', 'false', 'no', 'off', ''):
            return False
        raise ValueError(f"not a boolean: {value}")
    return bool(value)
