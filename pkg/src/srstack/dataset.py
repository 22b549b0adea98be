"""Dataset generation and on-disk layout.

Each example is: a groomed low-resolution stack (dedup + cloud filter +
fill-to-length), its teacher label set (optionally parallax-displaced and
deliberately misaligned by a planted integer pixel shift), and bookkeeping
(true count, height availability, incidence used). Arrays live in one
bundle file; the manifest is a JSON sidecar. Everything derives from the
master seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import scene as sc
from . import stack as st
from .arrayio import canonical_json, config_hash, load_arrays, save_arrays

DATASET_VERSION = 1
MANIFEST_NAME = "manifest.json"
ARRAYS_NAME = "arrays.bin"


@dataclass(frozen=True)
class DatasetConfig:
    n_examples: int = 32
    master_seed: int = 0
    scene: sc.SceneConfig = field(default_factory=sc.SceneConfig)
    stack: st.StackSimConfig = field(default_factory=st.StackSimConfig)
    splat: sc.SplatSpec = field(default_factory=sc.SplatSpec)
    stored_frames: int = 12
    raw_frames: int = 18
    resolution_hr_m: float = 0.5
    margin_px: tuple[int, int] = (8, 8)
    has_height_fraction: float = 0.2
    parallax_fraction: float = 0.25
    parallax_zenith_range: tuple[float, float] = (5.0, 15.0)
    label_shift_px_max: int = 4

    def __post_init__(self):
        if self.n_examples < 1:
            raise ValueError("need at least one example")
        if self.stored_frames % 2:
            raise ValueError("stored_frames must be even")
        for name in ("has_height_fraction", "parallax_fraction"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability")

    @property
    def upscale(self) -> int:
        return int(round(self.stack.grid_resolution_m / self.resolution_hr_m))


@dataclass(frozen=True)
class ExampleRecord:
    scene_seed: int
    true_count: int
    has_height: bool
    parallax_incidence_deg: tuple[float, float]
    label_shift_px: tuple[int, int]


@dataclass
class DatasetManifest:
    version: int
    example_count: int
    config: dict
    config_hash: str
    records: list[ExampleRecord]


def _example_rng(master_seed: int, index: int, salt: int) -> np.random.Generator:
    return np.random.default_rng((master_seed, index, salt))


def generate_example(cfg: DatasetConfig, index: int):
    """One (stack, label, record) triple, fully determined by (master_seed, index)."""
    rng = _example_rng(cfg.master_seed, index, 0xD5)
    scene_seed = int(rng.integers(0, 2**31 - 1))
    scn = sc.sample_scene(scene_seed, cfg.scene)

    has_height = bool(rng.random() < cfg.has_height_fraction)
    if rng.random() < cfg.parallax_fraction:
        incidence = (float(rng.uniform(0.0, 360.0)), float(rng.uniform(*cfg.parallax_zenith_range)))
    else:
        incidence = (0.0, 0.0)
    k = cfg.label_shift_px_max
    shift_px = (int(rng.integers(-k, k + 1)), int(rng.integers(-k, k + 1)))

    # the sensor sees the true scene; the label is rendered misaligned
    # (planted integer shift) and through the label's viewing angle
    lr_source = sc.rasterize_labels(scn, cfg.resolution_hr_m, cfg.margin_px, cfg.splat)
    label_scene = sc.translate(scn, shift_px[0] * cfg.resolution_hr_m, shift_px[1] * cfg.resolution_hr_m)
    label = sc.rasterize_labels(label_scene, cfg.resolution_hr_m, cfg.margin_px, cfg.splat)
    if incidence[1] > 0.0:
        label = sc.apply_parallax(label, label_scene, incidence)

    frames = st.simulate_stack(
        lr_source, scn, cfg.raw_frames, seed=int(rng.integers(0, 2**31 - 1)),
        config=cfg.stack, hr_incidence_deg=incidence,
    )
    groomed = st.pad_truncate_stack(
        st.filter_opaque_clouds(st.dedup_frames(frames)),
        cfg.stored_frames,
        seed=0,
        p=0.0,
        grid_resolution_m=cfg.stack.grid_resolution_m,
        native_resolution_m=cfg.stack.native_resolution_m,
    )
    record = ExampleRecord(scene_seed, sc.true_count(scn), has_height, incidence, shift_px)
    return groomed, label, record


# ---------------------------------------------------------------------------
# Disk layout


def _stack_to_arrays(stack: st.LowResStack, prefix: str) -> dict[str, np.ndarray]:
    bands = np.stack([f.bands for f in stack.frames])
    scalars = np.stack([f.meta.scalars() for f in stack.frames])
    ids = np.array(
        [[f.meta.datatake_id, f.meta.processing_baseline] for f in stack.frames], dtype=np.int64
    )
    return {f"{prefix}/bands": bands, f"{prefix}/meta": scalars, f"{prefix}/ids": ids}


def _stack_from_arrays(arrays: dict, prefix: str, grid_res: float, native_res: float) -> st.LowResStack:
    bands = arrays[f"{prefix}/bands"]
    scalars = arrays[f"{prefix}/meta"]
    ids = arrays[f"{prefix}/ids"]
    frames = []
    h, w = bands.shape[1:3]
    for k in range(bands.shape[0]):
        kwargs = dict(zip(st.METADATA_ORDER, (float(v) for v in scalars[k])))
        meta = st.FrameMeta(
            **kwargs,
            datatake_id=int(ids[k, 0]),
            processing_baseline=int(ids[k, 1]),
            opaque_cloud=np.zeros((h, w), dtype=bool),
        )
        frames.append(st.Frame(np.asarray(bands[k]), meta))
    return st.LowResStack(frames, grid_res, native_res)


class Dataset:
    """Loaded dataset: manifest plus lazy views into the arrays bundle."""

    def __init__(self, manifest: DatasetManifest, arrays: dict[str, np.ndarray]):
        self.manifest = manifest
        self._arrays = arrays
        cfgd = manifest.config
        self.grid_res = cfgd["stack"]["grid_resolution_m"]
        self.native_res = cfgd["stack"]["native_resolution_m"]
        self.resolution_hr_m = cfgd["resolution_hr_m"]
        self.margin_px = tuple(cfgd["margin_px"])
        self.splat = sc.SplatSpec(**cfgd["splat"])
        self.scene_config = sc.SceneConfig(**{
            k: tuple(v) if isinstance(v, list) else v for k, v in cfgd["scene"].items()
        })

    def __len__(self):
        return self.manifest.example_count

    def record(self, i: int) -> ExampleRecord:
        return self.manifest.records[i]

    def get_stack(self, i: int) -> st.LowResStack:
        return _stack_from_arrays(self._arrays, f"ex{i:05d}", self.grid_res, self.native_res)

    def get_label(self, i: int) -> sc.HighResLabelSet:
        stacked = np.asarray(self._arrays[f"ex{i:05d}/label"])
        chans = {name: stacked[:, :, j].copy() for j, name in enumerate(sc.CHANNEL_ORDER)}
        return sc.HighResLabelSet(self.resolution_hr_m, self.margin_px, **chans, splat=self.splat)

    def get_ortho_label(self, i: int) -> sc.HighResLabelSet:
        """Re-rasterize the unshifted, zero-zenith truth from the scene seed."""
        scn = sc.sample_scene(self.record(i).scene_seed, self.scene_config)
        return sc.rasterize_labels(scn, self.resolution_hr_m, self.margin_px, self.splat)


def write_dataset(out_dir, cfg: DatasetConfig, progress=None) -> DatasetManifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    records = []
    for i in range(cfg.n_examples):
        stack, label, record = generate_example(cfg, i)
        arrays.update(_stack_to_arrays(stack, f"ex{i:05d}"))
        arrays[f"ex{i:05d}/label"] = label.stack().astype(np.float32)
        records.append(record)
        if progress:
            progress(i + 1, cfg.n_examples)

    cfg_dict = asdict(cfg)
    manifest = DatasetManifest(
        version=DATASET_VERSION,
        example_count=cfg.n_examples,
        config=cfg_dict,
        config_hash=config_hash(cfg_dict),
        records=records,
    )
    tmp_arrays = out_dir / (ARRAYS_NAME + ".tmp")
    try:
        save_arrays(tmp_arrays, arrays, meta={"config_hash": manifest.config_hash})
        tmp_arrays.replace(out_dir / ARRAYS_NAME)
        payload = {
            "version": manifest.version,
            "example_count": manifest.example_count,
            "config": manifest.config,
            "config_hash": manifest.config_hash,
            "records": [asdict(r) for r in records],
        }
        (out_dir / MANIFEST_NAME).write_text(canonical_json(payload) + "\n")
    except BaseException:
        tmp_arrays.unlink(missing_ok=True)
        raise
    return manifest


def load_dataset(path) -> Dataset:
    path = Path(path)
    payload = json.loads((path / MANIFEST_NAME).read_text())
    if payload["version"] != DATASET_VERSION:
        raise ValueError(f"dataset version {payload['version']} unsupported")
    records = [
        ExampleRecord(
            r["scene_seed"],
            r["true_count"],
            r["has_height"],
            tuple(r["parallax_incidence_deg"]),
            tuple(r["label_shift_px"]),
        )
        for r in payload["records"]
    ]
    manifest = DatasetManifest(
        payload["version"], payload["example_count"], payload["config"], payload["config_hash"], records
    )
    arrays, meta = load_arrays(path / ARRAYS_NAME, mmap=True)
    if meta.get("config_hash") != manifest.config_hash:
        raise ValueError("arrays bundle does not match the manifest")
    return Dataset(manifest, arrays)
