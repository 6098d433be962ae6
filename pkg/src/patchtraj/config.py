"""Run configuration: dataclasses with lossless JSON round-trip."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

STRATEGY_CHOICES = ("baseline", "sas", "mkml", "all")


def _from_mapping(cls, data: dict, context: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


@dataclass
class RoiConfig:
    name: str
    label: int = 1
    edge_threshold: float = None  # None = auto (mean - std of nonzero densities)
    patch_side: int = 5
    max_landmarks: int = None  # None = keep all
    sas_K: int = 2
    sas_transfer: str = "quotient_mapped"
    mkml_K: int = 1
    mkml_c: int = 3
    mkml_m: int = 3
    mkml_transfer: str = "plain_average"

    def __post_init__(self):
        if self.patch_side % 2 != 1 or self.patch_side < 1:
            raise ValueError(f"patch_side must be odd and positive, got {self.patch_side}")
        if self.edge_threshold is not None and not 0.0 <= self.edge_threshold <= 1.0:
            raise ValueError(f"edge_threshold {self.edge_threshold} outside [0, 1]")
        for k in (self.sas_K, self.mkml_K):
            if k < 1:
                raise ValueError("K values must be at least 1")
        if self.mkml_c < 1 or self.mkml_m < 1:
            raise ValueError("mkml_c and mkml_m must be at least 1")


@dataclass
class SvrConfig:
    C: float = 1.0
    epsilon: float = 0.001
    tol: float = 1e-6  # dual KKT tolerance
    max_sweeps: int = 4000

    def __post_init__(self):
        if self.C <= 0 or self.epsilon < 0:
            raise ValueError("svr requires C > 0 and epsilon >= 0")
        if self.tol <= 0 or self.max_sweeps < 1:
            raise ValueError("svr requires tol > 0 and max_sweeps >= 1")


@dataclass
class SvmConfig:
    grid_log2_min: int = -6
    grid_log2_max: int = 15
    folds: int = 5
    standardize: bool = True
    tuning: str = "per_landmark"  # or "shared" (one C per ROI arm per fold)

    def __post_init__(self):
        if self.grid_log2_min > self.grid_log2_max:
            raise ValueError("grid_log2_min must not exceed grid_log2_max")
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if self.tuning not in ("per_landmark", "shared"):
            raise ValueError(f"unknown tuning mode {self.tuning!r}")

    def grid(self):
        return [2.0 ** e for e in range(self.grid_log2_min, self.grid_log2_max + 1)]


@dataclass
class MkmlRunConfig:
    beta: float = 1.0
    gamma: float = 1.0
    rho: float = 0.1
    max_iters: int = 30
    tol: float = 1e-5
    sigma_lo: float = 1.0
    sigma_hi: float = 2.0
    normalize_kernels: bool = True
    knn_k: int = None  # None = ~10% of cohort

    def __post_init__(self):
        if min(self.beta, self.gamma, self.rho) <= 0 or self.tol <= 0:
            raise ValueError("beta, gamma, rho, tol must be positive")


@dataclass
class PipelineConfig:
    manifest: str
    out_dir: str = "out"
    seed: int = 0
    threads: int = 1
    strategy: str = "all"
    rois: list = field(default_factory=list)
    svr: SvrConfig = field(default_factory=SvrConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    mkml: MkmlRunConfig = field(default_factory=MkmlRunConfig)
    alpha_cap: float = 10.0
    alpha_floor: float = 1e-3
    sobel_mode: str = "3d"
    followup_features: str = "predicted"  # "ground_truth" for the ablation arm
    intensity_max: float = 1.0

    def __post_init__(self):
        if self.strategy not in STRATEGY_CHOICES:
            raise ValueError(f"strategy must be one of {STRATEGY_CHOICES}")
        if self.sobel_mode not in ("3d", "2d"):
            raise ValueError("sobel_mode must be '3d' or '2d'")
        if self.followup_features not in ("predicted", "ground_truth"):
            raise ValueError("followup_features must be 'predicted' or 'ground_truth'")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if not self.rois:
            raise ValueError("at least one ROI must be configured")
        if not 0 < self.alpha_floor <= self.alpha_cap:
            raise ValueError("need 0 < alpha_floor <= alpha_cap")

    def arms(self):
        if self.strategy == "all":
            return ["baseline", "sas", "mkml"]
        return [self.strategy]

    def to_dict(self) -> dict:
        d = asdict(self)
        for roi in d["rois"]:
            if roi["edge_threshold"] is None:
                roi["edge_threshold"] = "auto"
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        rois = []
        for i, roi in enumerate(data.pop("rois", [])):
            roi = dict(roi)
            if roi.get("edge_threshold") == "auto":
                roi["edge_threshold"] = None
            rois.append(_from_mapping(RoiConfig, roi, f"rois[{i}]"))
        sub = {
            "svr": (SvrConfig, data.pop("svr", {})),
            "svm": (SvmConfig, data.pop("svm", {})),
            "mkml": (MkmlRunConfig, data.pop("mkml", {})),
        }
        kwargs = {}
        for name, (subcls, payload) in sub.items():
            kwargs[name] = (
                payload if isinstance(payload, subcls) else _from_mapping(subcls, payload, name)
            )
        cfg = _from_mapping(cls, {**data, "rois": rois, **kwargs}, "config")
        return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return PipelineConfig.from_dict(data)


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")


def paper_roi_configs() -> list:
    """The four ROI setups used in the reference protocol.

    Edge-density thresholds 0.19 / 0.18 / 0.15, kernel counts 3 / 3 / 5 / 7,
    cluster counts with 2 for the right hippocampus, and the per-ROI K
    values for each strategy, all with 11x11x11 patches.
    """
    return [
        RoiConfig(name="left_ventricle", edge_threshold=0.19, patch_side=11,
                  sas_K=2, mkml_K=1, mkml_c=3, mkml_m=3),
        RoiConfig(name="right_ventricle", edge_threshold=0.18, patch_side=11,
                  sas_K=3, mkml_K=1, mkml_c=3, mkml_m=3),
        RoiConfig(name="left_hippocampus", edge_threshold=0.15, patch_side=11,
                  sas_K=1, mkml_K=1, mkml_c=3, mkml_m=7),
        RoiConfig(name="right_hippocampus", edge_threshold=0.15, patch_side=11,
                  sas_K=2, mkml_K=1, mkml_c=2, mkml_m=5),
    ]


def default_synthetic_config(manifest: str, out_dir: str = "out", seed: int = 0,
                             threads: int = 1) -> PipelineConfig:
    """Desk-scale defaults for the 60-subject synthetic cohort."""
    return PipelineConfig(
        manifest=manifest,
        out_dir=out_dir,
        seed=seed,
        threads=threads,
        rois=[
            RoiConfig(
                name="roi",
                label=1,
                edge_threshold=None,
                patch_side=3,
                max_landmarks=8,
                sas_K=2,
                mkml_K=1,
                mkml_c=3,
                mkml_m=3,
            )
        ],
        # desk-scale budget: capped SVR sweeps (top-K rankings are
        # insensitive to the KKT tail) and fewer manifold iterations
        svr=SvrConfig(tol=1e-3, max_sweeps=150),
        mkml=MkmlRunConfig(max_iters=20),
    )
