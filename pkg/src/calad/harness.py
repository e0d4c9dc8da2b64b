"""Reproducible experiment runner: split, train, post-hoc calibrate,
evaluate with and without input perturbation, and emit reports.

One run evaluates the configured method next to its fully trained
baseline. The baseline is trained on the full normal training data with
its own normalization statistics; a calibrated method trains its base
scorer on the 3:1 training split, uses split statistics, and fits the
calibrator on the calibration split against synthetic anomalies from the
configured source. Calibration metrics are always measured on normal test
data plus an equal-sized held-out pool of the synthetic anomalies, never
on the real test anomalies. Everything is fully determined by the config
and its seed list.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import reports
from .calibration import (OptimizerConfig, ece, fit_beta, fit_head, fit_platt,
                          fitting_digest, mce, reliability, save_calibrator)
from .datasets import gaussian_ring, textured_tiles
from .errors import ConfigError, DataError
from .losses import clamp_probability, logit, sigmoid
from .metrics import aupro, pixel_auroc
from .perturbation import PerturbConfig, evaluate_pair, perturb_batch
from .scorer import (LossPipeline, MlpSpec, ScorerState, TrainConfig,
                     forward, init_scorer, init_svdd_center, train)
from .segmentation import SsimConfig, fcdd_heatmap, gaussian_upsample
from .spectral import SpectralConfig, synthesize_batch
from .tensorio import load_tensor

DATA_SEED = 54172  # builtin datasets are fixed; run seeds vary everything else

METHOD_LABELS = {
    ("none", "oe"): "Fully Trained",
    ("none", "spectral"): "Fully Trained",
    ("head", "oe"): "CalHead OE",
    ("head", "spectral"): "CalHead Spectral",
    ("platt", "oe"): "Platt OE",
    ("platt", "spectral"): "Platt Spectral",
    ("beta", "oe"): "β OE",
    ("beta", "spectral"): "β Spectral",
}

BUILTIN_DATASETS = ("builtin:gauss2d", "builtin:gauss2d-basin", "builtin:tiles")


@dataclass(frozen=True)
class ExperimentConfig:
    normal: str = "builtin:gauss2d"
    oe_dir: Optional[str] = None
    masks_dir: Optional[str] = None
    loss: str = "svdd"
    calibrator: str = "none"
    anomaly_source: str = "spectral"
    split_ratio: float = 0.75
    seeds: tuple = (0, 1, 2, 3, 4)
    epsilon: float = 1.4e-3
    bins: int = 15
    out_dir: str = "runs"
    epochs: int = 40
    learning_rate: float = 1e-4
    batch_size: int = 128
    milestones: tuple = ()

    def __post_init__(self):
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"split ratio must lie in (0, 1), got {self.split_ratio}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.calibrator not in ("none", "platt", "beta", "head"):
            raise ConfigError(f"unknown calibrator {self.calibrator!r}")
        if self.anomaly_source not in ("oe", "spectral"):
            raise ConfigError(f"unknown anomaly source {self.anomaly_source!r}")
        if self.loss not in ("svdd", "hsc", "logistic", "ssim", "fcdd"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.anomaly_source == "oe" and self.oe_dir is None:
            raise ConfigError("anomaly source 'oe' requires an OE data directory")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be nonnegative")

    @property
    def method_label(self) -> str:
        return METHOD_LABELS[(self.calibrator, self.anomaly_source)]

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["seeds"] = list(self.seeds)
        doc["milestones"] = list(self.milestones)
        return doc


_CONFIG_FIELDS = set(ExperimentConfig.__dataclass_fields__)


def load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    unknown = set(doc) - _CONFIG_FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return doc


def merge_config(cli_fields: dict, file_fields: dict) -> ExperimentConfig:
    """Combine flag and config-file settings.

    A key set by both sides to different values is a conflict and an
    error, never a silent override.
    """
    merged = dict(file_fields)
    for key, value in cli_fields.items():
        if value is None:
            continue
        if key in file_fields:
            file_value = file_fields[key]
            norm = tuple(value) if isinstance(value, (list, tuple)) else value
            norm_f = tuple(file_value) if isinstance(file_value, (list, tuple)) else file_value
            if norm != norm_f:
                raise ConfigError(
                    f"config conflict on {key!r}: flag says {value!r}, "
                    f"file says {file_value!r}")
        merged[key] = value
    for key in ("seeds", "milestones"):
        if key in merged:
            merged[key] = tuple(merged[key])
    return ExperimentConfig(**merged)


def split(data, ratio: float, seed: int):
    """Seeded shuffle split into (train, calibration); disjoint, exhaustive."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    data = np.asarray(data)
    n = len(data)
    n_train = int(round(n * ratio))
    if n_train == 0 or n_train == n:
        raise DataError(f"split of {n} items at ratio {ratio} gives an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    return data[perm[:n_train]], data[perm[n_train:]]


def fit_normalizer(train):
    """Per-feature mean and std over the training data, std floored."""
    x = np.asarray(train, dtype=float)
    mu = x.mean(axis=0)
    sd = np.maximum(x.std(axis=0), 1e-8)
    return mu, sd


def normalize(data, stats):
    mu, sd = stats
    return (np.asarray(data, dtype=float) - mu) / sd


def prepare_resize(shape_in, shape_out):
    """Resize-then-crop protocol stub.

    Desk-scale tiles need no resizing, so only shape agreement is
    validated here; an actual resize request is rejected.
    """
    if tuple(shape_in) == tuple(shape_out):
        return tuple(shape_out)
    raise DataError(
        f"resizing {tuple(shape_in)} -> {tuple(shape_out)} is not supported at "
        "desk scale; provide inputs at the target shape")


# -- data loading -------------------------------------------------------


def _load_dataset(cfg: ExperimentConfig):
    name = cfg.normal
    if name == "builtin:gauss2d":
        return {"kind": "detection", "class_id": "gauss2d",
                "data": gaussian_ring(DATA_SEED)}
    if name == "builtin:gauss2d-basin":
        return {"kind": "detection", "class_id": "gauss2d-basin",
                "data": gaussian_ring(DATA_SEED, basin=True)}
    if name == "builtin:tiles":
        return {"kind": "tiles", "class_id": "tiles",
                "data": textured_tiles(DATA_SEED)}
    path = Path(name)
    if path.is_dir():
        return _dir_dataset(path, cfg.masks_dir)
    if path.suffix == ".csv" and path.exists():
        rows = np.loadtxt(path, delimiter=",", ndmin=2)
        n_test = max(1, len(rows) // 5)
        return {"kind": "detection", "class_id": path.stem,
                "data": _csv_detection(rows, n_test)}
    raise DataError(f"cannot read normal data from {name!r}; expected a CSV file, "
                    f"a directory of raw tensors, or one of {BUILTIN_DATASETS}")


def _dir_dataset(normal_dir: Path, masks_dir):
    """Training images from a raw-tensor directory; with a masks directory,
    the test set is its <name>.calt images paired with <name>.pgm masks."""
    from .datasets import TileData
    from .tensorio import read_pgm

    train_files = sorted(normal_dir.glob("*.calt"))
    if not train_files:
        raise DataError(f"no raw-tensor files under {normal_dir}")
    train = np.stack([load_tensor(f) for f in train_files])
    if train.ndim == 3:  # (n, h, w) -> single channel
        train = train[:, None]
    if masks_dir is None:
        raise DataError(
            f"{normal_dir} holds image tensors; provide a masks directory with "
            "the test images and their PGM masks")
    masks_path = Path(masks_dir)
    test_files = sorted(masks_path.glob("*.calt"))
    if not test_files:
        raise DataError(f"no test images under {masks_dir}")
    test_imgs, masks = [], []
    for f in test_files:
        img = load_tensor(f)
        test_imgs.append(img if img.ndim == 3 else img[None])
        mask_file = f.with_suffix(".pgm")
        if not mask_file.exists():
            raise DataError(f"missing mask {mask_file}")
        masks.append(read_pgm(mask_file))
    shape = train.shape[-2:]
    for img, mask in zip(test_imgs, masks):
        prepare_resize(img.shape[-2:], shape)
        prepare_resize(mask.shape, shape)
    data = TileData(train_images=train, test_images=np.stack(test_imgs),
                    test_masks=np.stack(masks),
                    oe_pool=np.empty((0,) + train.shape[1:]))
    return {"kind": "tiles", "class_id": normal_dir.name, "data": data}


def _csv_detection(rows, n_test):
    from .datasets import DetectionData

    # the last fifth is held out as test normals; ring anomalies are synthesized
    rng = np.random.default_rng(DATA_SEED)
    train, test = rows[:-n_test], rows[-n_test:]
    scale = np.abs(train).max() * 2.0 + 1.0
    angles = rng.uniform(0, 2 * np.pi, n_test)
    anoms = scale * np.column_stack([np.cos(angles), np.sin(angles)])[:, :rows.shape[1]]
    if anoms.shape[1] < rows.shape[1]:
        anoms = np.pad(anoms, ((0, 0), (0, rows.shape[1] - anoms.shape[1])))
    return DetectionData(train_normal=train, test_normal=test,
                         test_anomalous=anoms, oe_pool=anoms * 0.8)


def _load_oe_dir(oe_dir) -> np.ndarray:
    """Flat sample pool from a directory of raw-tensor files.

    Rank 1 and rank 3 tensors are single samples (a feature vector, an
    image); rank 2 and rank 4 are batches of them.
    """
    files = sorted(Path(oe_dir).glob("*.calt"))
    if not files:
        raise DataError(f"no raw-tensor files under {oe_dir}")
    parts = []
    for f in files:
        arr = load_tensor(f)
        if arr.ndim in (1, 3):
            parts.append(arr.reshape(1, -1))
        elif arr.ndim in (2, 4):
            parts.append(arr.reshape(len(arr), -1))
        else:
            raise DataError(f"{f}: unsupported tensor rank {arr.ndim}")
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise DataError(f"OE pool mixes sample widths {sorted(widths)}")
    return np.concatenate(parts)


# -- synthetic anomaly pools ---------------------------------------------


def _spectral_tabular(n: int, d: int, seed: int, box_lo, box_hi) -> np.ndarray:
    """Spectral pixels reshaped into d-wide rows, mapped onto an expanded
    bounding box of the (normalized) training data."""
    side = 16
    per_image = (side * side) // d
    n_images = int(np.ceil(n / per_image))
    images, _ = synthesize_batch(SpectralConfig(side, side, seed=seed), n_images)
    flat = images.reshape(n_images, -1)[:, : per_image * d].reshape(-1, d)[:n]
    lo = np.asarray(box_lo, dtype=float)
    hi = np.asarray(box_hi, dtype=float)
    pad = 0.5 * (hi - lo)
    return (lo - pad) + flat * (hi - lo + 2 * pad)


def _anomaly_pools(cfg: ExperimentConfig, dataset, seed: int, stats,
                   n_each: int, image_shape=None):
    """Three disjoint normalized pools: training, calibration, evaluation."""
    if cfg.anomaly_source == "oe":
        if cfg.oe_dir is not None:
            pool = _load_oe_dir(cfg.oe_dir)
        else:
            raw = dataset["data"].oe_pool
            pool = raw.reshape(len(raw), -1)
        if len(pool) < 3:
            raise DataError("OE pool must hold at least three samples")
        perm = np.random.default_rng(seed + 101).permutation(len(pool))
        thirds = np.array_split(perm, 3)
        parts = [normalize(pool[t], stats) for t in thirds]
        return {"train": parts[0], "calib": parts[1], "eval": parts[2]}
    # spectral
    if image_shape is not None:
        h, w = image_shape
        pools = {}
        for i, key in enumerate(("train", "calib", "eval")):
            images, _ = synthesize_batch(
                SpectralConfig(h, w, seed=seed * 3 + 211 + i), n_each)
            pools[key] = normalize(images.reshape(n_each, -1), stats)
        return pools
    mu, sd = stats
    d = len(np.atleast_1d(mu))
    box_lo = np.full(d, -2.5)
    box_hi = np.full(d, 2.5)
    return {key: _spectral_tabular(n_each, d, seed * 3 + 211 + i, box_lo, box_hi)
            for i, key in enumerate(("train", "calib", "eval"))}


# -- model construction ---------------------------------------------------


def _scorer_spec(loss: str, d: int, image_shape=None) -> MlpSpec:
    if loss == "svdd":
        # enough embedding width and gain that squared distances spread the
        # induced probability estimates across reliability bins
        return MlpSpec((d, 64, 64, 32), activation="tanh", use_bias=False,
                       init_gain=2.0)
    if loss == "hsc":
        return MlpSpec((d, 32, 16, 8), activation="tanh", use_bias=True)
    if loss == "logistic":
        return MlpSpec((d, 32, 16, 1), activation="tanh", use_bias=True)
    if loss == "ssim":
        return MlpSpec((d, 64, d), activation="tanh", use_bias=True)
    if loss == "fcdd":
        return MlpSpec((d, 64, 64), activation="tanh", use_bias=True)
    raise ConfigError(f"unknown loss {loss!r}")


def _train_base(cfg: ExperimentConfig, x_train, anoms_train, seed: int,
                image_shape=None, ssim_cfg=None):
    d = x_train.shape[1]
    spec = _scorer_spec(cfg.loss, d, image_shape)
    state = init_scorer(spec, seed=seed)
    supervised = cfg.loss in ("hsc", "logistic", "fcdd")
    if supervised:
        data = np.concatenate([x_train, anoms_train])
        labels = np.concatenate([np.zeros(len(x_train)), np.ones(len(anoms_train))])
    else:
        data, labels = x_train, None
    tc = TrainConfig(loss=cfg.loss, learning_rate=cfg.learning_rate,
                     milestones=cfg.milestones, epochs=cfg.epochs,
                     batch_size=cfg.batch_size, seed=seed)
    center = None
    if cfg.loss == "svdd":
        center = init_svdd_center(state, x_train)
    trained = train(state, data, labels, tc, center=center,
                    ssim_cfg=ssim_cfg, image_shape=image_shape)
    return trained, center


def _features(state: ScorerState, x, loss: str):
    """Frozen features feeding the calibration head."""
    if loss == "logistic":
        trunk = _truncate(state)
        return forward(trunk, x)
    if loss == "ssim":
        trunk = _truncate(state)
        return forward(trunk, x)
    return forward(state, x)


def _truncate(state: ScorerState) -> ScorerState:
    spec = MlpSpec(state.spec.widths[:-1], activation=state.spec.activation,
                   use_bias=state.spec.use_bias)
    return ScorerState(spec, [w.copy() for w in state.weights[:-1]],
                       [None if b is None else b.copy() for b in state.biases[:-1]],
                       [True] * (state.n_layers - 1))


def _head_pipeline(state: ScorerState, loss: str, head_params) -> LossPipeline:
    if loss in ("logistic", "ssim"):
        trunk = _truncate(state)
    else:
        trunk = state.copy()
        trunk.frozen = [True] * trunk.n_layers
    return LossPipeline(trunk, "logistic", head=head_params)


def _build_pipeline(cfg, state, center, calibrator, image_shape, ssim_cfg):
    return LossPipeline(state, cfg.loss, center=center, calibrator=calibrator,
                        ssim_cfg=ssim_cfg, image_shape=image_shape)


# -- evaluation ------------------------------------------------------------


def _calibrated_estimates(pipeline: LossPipeline, x) -> np.ndarray:
    _, eta = pipeline.calibrated(x)
    return eta


def _detection_row(cfg, method, class_id, pipeline, x_test, y_test,
                   x_eval_normal, x_eval_anom, bins):
    pair = evaluate_pair(pipeline, x_test, y_test,
                         PerturbConfig(epsilon=cfg.epsilon, target_label=0))
    xe = np.concatenate([x_eval_normal, x_eval_anom])
    ye = np.concatenate([np.zeros(len(x_eval_normal)), np.ones(len(x_eval_anom))])
    eta = _calibrated_estimates(pipeline, xe)
    hist = reliability(eta, ye, bins)
    row = {
        "class_id": class_id,
        "method": method,
        "auroc": pair.auroc_before,
        "auroc_perturbed": pair.auroc_after,
        "mce": mce(hist),
        "ece": ece(hist),
    }
    return row, hist, pair.deltas


def _tile_heatmaps(pipeline: LossPipeline, x, image_shape):
    h, w = image_shape
    maps = []
    if pipeline.loss_name == "ssim":
        for row in np.atleast_2d(x):
            _, res = pipeline._ssim_estimate(row)
            maps.append(res.estimates)
        return np.stack(maps)
    # fcdd: feature map -> pseudo-Huber heatmap -> Gaussian upsample
    out = forward(pipeline.state, np.atleast_2d(x))
    side = int(np.sqrt(out.shape[1]))
    stride = h // side
    for row in out:
        amap = fcdd_heatmap(row.reshape(side, side))
        maps.append(gaussian_upsample(amap, h, w, sigma=float(stride)))
    return np.stack(maps)


def _pixel_estimates(pipeline: LossPipeline, heatmaps):
    if pipeline.loss_name == "ssim":
        est = heatmaps
    else:
        est = -np.expm1(-heatmaps)
    if pipeline.calibrator is None:
        return est
    z = logit(clamp_probability(est))
    zc, _ = pipeline._calibrated_logit(z)
    return sigmoid(zc)


def _tiles_row(cfg, method, class_id, pipeline, x_test, y_test, masks,
               x_eval_normal, x_eval_anom, image_shape, bins):
    pair = evaluate_pair(pipeline, x_test, y_test,
                         PerturbConfig(epsilon=cfg.epsilon, target_label=0))
    maps_before = _tile_heatmaps(pipeline, x_test, image_shape)
    x_tilde = perturb_batch(pipeline, x_test,
                            PerturbConfig(epsilon=cfg.epsilon, target_label=0))
    maps_after = _tile_heatmaps(pipeline, x_tilde, image_shape)
    # per-pixel calibration metrics on normal test tiles plus synthetic tiles
    n_eval = min(len(x_eval_normal), len(x_eval_anom))
    eval_x = np.concatenate([x_eval_normal[:n_eval], x_eval_anom[:n_eval]])
    eval_maps = _tile_heatmaps(pipeline, eval_x, image_shape)
    eval_eta = _pixel_estimates(pipeline, eval_maps).reshape(2 * n_eval, -1)
    eval_y = np.concatenate([np.zeros((n_eval, eval_eta.shape[1])),
                             np.ones((n_eval, eval_eta.shape[1]))])
    hist = reliability(eval_eta.ravel(), eval_y.ravel(), bins)
    row = {
        "class_id": class_id,
        "method": method,
        "auroc": pair.auroc_before,
        "auroc_perturbed": pair.auroc_after,
        "mce": mce(hist),
        "ece": ece(hist),
        "aupro": aupro(list(maps_before), list(masks)),
        "aupro_perturbed": aupro(list(maps_after), list(masks)),
        "pixel_auroc": pixel_auroc(list(maps_before), list(masks)),
        "pixel_auroc_perturbed": pixel_auroc(list(maps_after), list(masks)),
    }
    return row, hist, pair.deltas


# -- the runner -------------------------------------------------------------


@dataclass
class RunResult:
    summary_rows: list
    per_seed_rows: list
    out_dir: Path
    histograms: dict = field(default_factory=dict)
    calibrators: dict = field(default_factory=dict)


def _run_seed(cfg: ExperimentConfig, dataset, seed: int):
    kind = dataset["kind"]
    data = dataset["data"]
    class_id = dataset["class_id"]
    image_shape = None
    ssim_cfg = None
    if kind == "tiles":
        image_shape = data.train_images.shape[-2:]
        normal_raw = data.train_images.reshape(len(data.train_images), -1)
        test_n_raw = [img.reshape(-1) for img in
                      data.test_images[data.test_masks.sum(axis=(1, 2)) == 0]]
        test_a_raw = [img.reshape(-1) for img in
                      data.test_images[data.test_masks.sum(axis=(1, 2)) > 0]]
        test_raw = np.concatenate([np.stack(test_n_raw), np.stack(test_a_raw)])
        masks = np.concatenate(
            [data.test_masks[data.test_masks.sum(axis=(1, 2)) == 0],
             data.test_masks[data.test_masks.sum(axis=(1, 2)) > 0]])
        y_test = np.concatenate([np.zeros(len(test_n_raw)), np.ones(len(test_a_raw))])
    else:
        normal_raw = data.train_normal
        test_raw = np.concatenate([data.test_normal, data.test_anomalous])
        y_test = np.concatenate([np.zeros(len(data.test_normal)),
                                 np.ones(len(data.test_anomalous))])
        masks = None

    rows, hists, cals, deltas, extras = [], {}, {}, {}, {}

    # fully trained baseline: full normal data and full-data statistics
    stats_full = fit_normalizer(normal_raw)
    pools_full = _anomaly_pools(cfg, dataset, seed, stats_full,
                                n_each=max(64, len(normal_raw) // 2),
                                image_shape=image_shape)
    if kind == "tiles":
        ssim_cfg = SsimConfig(pad_value=float(normalize(normal_raw, stats_full).mean()))
    x_train_full = normalize(normal_raw, stats_full)
    x_test_full = normalize(test_raw, stats_full)
    state_full, center_full = _train_base(cfg, x_train_full, pools_full["train"],
                                          seed, image_shape, ssim_cfg)
    base_pipe = _build_pipeline(cfg, state_full, center_full, None,
                                image_shape, ssim_cfg)
    n_eval = min(len(x_test_full[y_test == 0]), len(pools_full["eval"]))
    # the calibration head is a detection-only method, so its runs keep the
    # detection row schema even on mask-bearing data
    localization = kind == "tiles" and cfg.calibrator != "head"
    if localization:
        row, hist, dl = _tiles_row(cfg, "Fully Trained", class_id, base_pipe,
                                   x_test_full, y_test, masks,
                                   x_test_full[y_test == 0][:n_eval],
                                   pools_full["eval"][:n_eval],
                                   image_shape, cfg.bins)
    else:
        row, hist, dl = _detection_row(cfg, "Fully Trained", class_id, base_pipe,
                                       x_test_full, y_test,
                                       x_test_full[y_test == 0][:n_eval],
                                       pools_full["eval"][:n_eval], cfg.bins)
    rows.append(row)
    hists["Fully Trained"] = hist
    deltas["Fully Trained"] = dl
    extras["Fully Trained"] = {"pipeline": base_pipe, "x_test": x_test_full,
                               "image_shape": image_shape}

    if cfg.calibrator != "none":
        # calibrated method: 3:1 split, split statistics, post-hoc fit
        train_split, calib_split = split(normal_raw, cfg.split_ratio, seed)
        stats = fit_normalizer(train_split)
        pools = _anomaly_pools(cfg, dataset, seed, stats,
                               n_each=max(64, len(calib_split)),
                               image_shape=image_shape)
        if kind == "tiles":
            ssim_cfg = SsimConfig(pad_value=float(normalize(train_split, stats).mean()))
        x_tr = normalize(train_split, stats)
        x_cal = normalize(calib_split, stats)
        x_test = normalize(test_raw, stats)
        state, center = _train_base(cfg, x_tr, pools["train"], seed,
                                    image_shape, ssim_cfg)
        base_for_cal = _build_pipeline(cfg, state, center, None,
                                       image_shape, ssim_cfg)
        n_cal = min(len(x_cal), len(pools["calib"]))
        cal_x = np.concatenate([x_cal[:n_cal], pools["calib"][:n_cal]])
        cal_y = np.concatenate([np.zeros(n_cal), np.ones(n_cal)])
        opt = OptimizerConfig(seed=seed)
        if kind == "tiles" and cfg.calibrator in ("platt", "beta"):
            # per-pixel calibration pools the pixel logits of the tiles
            cal_maps = _tile_heatmaps(base_for_cal, cal_x, image_shape)
            cal_est = _pixel_estimates(base_for_cal, cal_maps).reshape(len(cal_x), -1)
            cal_logits = logit(clamp_probability(cal_est)).ravel()
            cal_pixel_y = np.repeat(cal_y, cal_est.shape[1])
            if cfg.calibrator == "platt":
                calibrator = fit_platt(cal_logits, cal_pixel_y, opt)
            else:
                calibrator = fit_beta(sigmoid(cal_logits), cal_pixel_y, opt)
            digest = fitting_digest(cal_logits, cal_pixel_y)
        elif cfg.calibrator == "platt":
            z = base_for_cal.logits(cal_x)
            calibrator = fit_platt(z, cal_y, opt)
            digest = fitting_digest(z, cal_y)
        elif cfg.calibrator == "beta":
            e = base_for_cal.estimates(cal_x)
            calibrator = fit_beta(e, cal_y, opt)
            digest = fitting_digest(e, cal_y)
        else:  # head
            feats = _features(state, cal_x, cfg.loss)
            calibrator = fit_head(feats, cal_y, opt)
            digest = fitting_digest(feats, cal_y)
        cals[cfg.method_label] = (calibrator, digest)
        if cfg.calibrator == "head":
            pipe = _head_pipeline(state, cfg.loss, calibrator)
        else:
            pipe = _build_pipeline(cfg, state, center, calibrator,
                                   image_shape, ssim_cfg)
        n_eval = min(len(x_test[y_test == 0]), len(pools["eval"]))
        if localization:
            row, hist, dl = _tiles_row(cfg, cfg.method_label, class_id, pipe,
                                       x_test, y_test, masks,
                                       x_test[y_test == 0][:n_eval],
                                       pools["eval"][:n_eval],
                                       image_shape, cfg.bins)
        else:
            row, hist, dl = _detection_row(cfg, cfg.method_label, class_id, pipe,
                                           x_test, y_test,
                                           x_test[y_test == 0][:n_eval],
                                           pools["eval"][:n_eval], cfg.bins)
        rows.append(row)
        hists[cfg.method_label] = hist
        deltas[cfg.method_label] = dl
        extras[cfg.method_label] = {"pipeline": pipe, "x_test": x_test,
                                    "image_shape": image_shape}

    return rows, hists, cals, deltas, extras


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Run every seed, aggregate, and write all artifacts to cfg.out_dir."""
    dataset = _load_dataset(cfg)
    localization = dataset["kind"] == "tiles" and cfg.calibrator != "head"
    per_seed, histograms, calibrators, first_extras = [], {}, {}, {}
    all_deltas = {}
    for seed in cfg.seeds:
        rows, hists, cals, deltas, extras = _run_seed(cfg, dataset, seed)
        for row in rows:
            per_seed.append({"seed": seed, **row})
        if not histograms:
            histograms.update(hists)
            calibrators.update(cals)  # first seed's fits back the figures
            first_extras.update(extras)
        for method, dl in deltas.items():
            all_deltas[(seed, method)] = dl

    methods = []
    for row in per_seed:
        if row["method"] not in methods:
            methods.append(row["method"])
    summary = []
    metric_keys = [k for k in per_seed[0] if k not in ("seed", "class_id", "method")]
    for method in methods:
        rows = [r for r in per_seed if r["method"] == method]
        agg = {"class_id": rows[0]["class_id"], "method": method}
        for key in metric_keys:
            agg[key] = float(np.mean([r[key] for r in rows]))
        summary.append(agg)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emit_reports(cfg, summary, per_seed, histograms, calibrators,
                 all_deltas, out_dir, localization)
    _emit_artifacts(cfg, first_extras, out_dir, localization)
    return RunResult(summary_rows=summary, per_seed_rows=per_seed,
                     out_dir=out_dir, histograms=histograms,
                     calibrators=calibrators)


def _emit_artifacts(cfg, extras, out_dir: Path, localization: bool) -> None:
    """First-seed scorer checkpoints and, for localization runs, heatmaps."""
    from .scorer import save_scorer
    from .tensorio import save_tensor

    for method, extra in extras.items():
        slug = method.replace(" ", "_").replace("β", "beta").lower()
        pipeline = extra["pipeline"]
        save_scorer(out_dir / f"scorer_{slug}_seed{cfg.seeds[0]}",
                    pipeline.state,
                    {"seed": cfg.seeds[0], "epoch": cfg.epochs, "loss": cfg.loss})
        if localization:
            maps = _tile_heatmaps(pipeline, extra["x_test"], extra["image_shape"])
            save_tensor(out_dir / f"heatmaps_{slug}_seed{cfg.seeds[0]}.calt", maps)


CONVENTIONS = {
    "aupro": "per-region overlap vs FPR, all thresholds, trapezoid to the cap, "
             "normalized by the cap",
    "aupro_fpr_cap": 0.3,
    "region_connectivity": 4,
    "tie_handling": "midranks",
    "perturbation_label": 0,
    "upsample_geometry": "stride = out/in, kernel 4*stride+1, sigma = stride",
}


def emit_reports(cfg, summary, per_seed, histograms, calibrators, deltas,
                 out_dir: Path, localization: bool) -> None:
    from . import __version__

    reports.write_rows_csv(out_dir / "summary.csv", summary, localization)
    reports.write_rows_csv(out_dir / "per_seed.csv", per_seed, localization)
    conventions = dict(CONVENTIONS)
    conventions["bins"] = cfg.bins
    conventions["library_version"] = __version__
    reports.write_manifest(out_dir / "manifest.json", cfg.to_dict(), conventions)
    for method, hist in histograms.items():
        slug = method.replace(" ", "_").replace("β", "beta").lower()
        svg = reports.reliability_diagram_svg(hist, ece(hist), mce(hist), method)
        (out_dir / f"reliability_{slug}.svg").write_text(svg)
    for method, (params, digest) in calibrators.items():
        slug = method.replace(" ", "_").replace("β", "beta").lower()
        svg = reports.calibrator_curve_svg(params, method)
        (out_dir / f"calibrator_{slug}.svg").write_text(svg)
        save_calibrator(out_dir / f"calibrator_{slug}.txt", params,
                        cfg.seeds[0], digest)
    for (seed, method), dl in deltas.items():
        slug = method.replace(" ", "_").replace("β", "beta").lower()
        reports.write_deltas_csv(out_dir / f"deltas_{slug}_seed{seed}.csv", dl)
