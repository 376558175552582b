"""Evaluation harness: datasets, run records, report tables and experiment loops."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import re
import threading
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
from PIL import Image as PILImage
from torch import Tensor

from i2a.models import Classifier, classify
from i2a.perceptual import FeatureExtractor, is_feasible, lpips_distance

log = logging.getLogger(__name__)

SCHEMA = {"schema": "i2a.run-records", "version": 1}


# ---------------------------------------------------------------- images


def load_image(path, size: Optional[tuple[int, int]] = (256, 256), dtype=torch.float32) -> Tensor:
    """Read an image as ``H x W x 3`` floats in ``[0, 1]``, plainly resized (no crop)."""
    img = PILImage.open(path).convert("RGB")
    if size is not None:
        img = img.resize((size[1], size[0]), PILImage.BICUBIC)
    return torch.from_numpy(np.asarray(img, dtype=np.float64) / 255.0).to(dtype)


def to_png_bytes(image: Tensor) -> bytes:
    arr = (image.detach().clamp(0, 1).cpu().double().numpy() * 255.0).round().astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    buf = io.BytesIO()
    PILImage.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def save_png(image: Tensor, path) -> None:
    Path(path).write_bytes(to_png_bytes(image))


def slugify(text: str, max_len: int = 48) -> str:
    slug = re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")
    return slug[:max_len] or "prompt"


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetItem:
    image_id: str
    label: int
    path: Optional[str] = None
    image: Optional[Tensor] = None
    caption: Optional[str] = None
    category: Optional[str] = None


@dataclass
class Dataset:
    items: list[DatasetItem]
    label_map: dict[int, str] = field(default_factory=dict)
    size: Optional[tuple[int, int]] = (256, 256)
    dtype: torch.dtype = torch.float32

    def __post_init__(self):
        ids = [it.image_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("image ids must be unique")

    def __len__(self):
        return len(self.items)

    def image(self, item: DatasetItem) -> Tensor:
        if item.image is not None:
            return item.image
        return load_image(item.path, self.size, self.dtype)

    def check_labels(self, num_classes: int) -> None:
        for it in self.items:
            if not 0 <= it.label < num_classes:
                raise ValueError(f"{it.image_id}: label {it.label} outside [0, {num_classes})")

    @classmethod
    def from_manifest(cls, path, size=(256, 256), dtype=torch.float32) -> "Dataset":
        """CSV or JSON-lines manifest with ``image_id, path, label[, caption, category]``.

        Relative paths resolve against the manifest's directory.
        """
        path = Path(path)
        if path.suffix == ".jsonl":
            rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        else:
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
        items = []
        for row in rows:
            img_path = Path(row["path"])
            if not img_path.is_absolute():
                img_path = path.parent / img_path
            items.append(DatasetItem(
                image_id=str(row.get("image_id") or img_path.stem),
                label=int(row["label"]),
                path=str(img_path),
                caption=row.get("caption") or None,
                category=row.get("category") or None,
            ))
        return cls(items, size=size, dtype=dtype)


def make_synthetic_dataset(n: int = 50, size: int = 16, num_classes: int = 3, seed: int = 0,
                           amplitude: float = 0.02, noise: float = 0.05, dtype=torch.float64) -> Dataset:
    """Images of mid-gray noise where class ``k`` is a faint tint of channel ``k`` (mod C)."""
    gen = torch.Generator().manual_seed(seed)
    items = []
    for i in range(n):
        label = i % num_classes
        img = 0.5 + noise * torch.randn(size, size, 3, generator=gen, dtype=torch.float64)
        img[:, :, label % 3] += amplitude
        items.append(DatasetItem(f"syn{seed}-{i:04d}", label, image=img.clamp(0, 1).to(dtype),
                                 caption="a gray noise texture", category=f"class{label}"))
    return Dataset(items, {k: f"class{k}" for k in range(num_classes)}, size=None, dtype=dtype)


def train_toy_classifier(dataset: Dataset, num_classes: int = 3, epochs: int = 200, seed: int = 0,
                         lr: float = 0.05) -> Classifier:
    """Fit a :class:`SmallConvNet` on the (in-memory) dataset; deterministic for a seed."""
    from i2a.models import SmallConvNet, TorchClassifier

    torch.manual_seed(seed)
    images = torch.stack([dataset.image(it) for it in dataset.items]).permute(0, 3, 1, 2)
    labels = torch.tensor([it.label for it in dataset.items])
    net = SmallConvNet(images.shape[1], num_classes).to(images.dtype)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(net(images - 0.5), labels)
        loss.backward()
        opt.step()
    return TorchClassifier(net, mean=[0.5] * images.shape[1], std=[1.0] * images.shape[1])


# ---------------------------------------------------------------- records


@dataclass
class RunRecord:
    image_id: str
    prompt: str
    attack: str
    source_model: str
    target_model: str
    label: int
    predicted: int
    success: bool
    lpips: float
    constraint_met: bool
    iterations: int
    seed: int
    wall_time: float = 0.0
    projected: bool = False
    error: Optional[str] = None

    @property
    def correct(self) -> bool:
        return self.error is None and self.predicted == self.label

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def write_records(records: Sequence[RunRecord], path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(SCHEMA) + "\n")
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(path) -> list[RunRecord]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("schema") != SCHEMA["schema"]:
        raise ValueError(f"{path} is not a run-record file")
    if header.get("version") != SCHEMA["version"]:
        raise ValueError(f"unsupported record schema version {header.get('version')}")
    return [RunRecord(**json.loads(line)) for line in lines[1:] if line.strip()]


def image_seed(global_seed: int, image_id: str) -> int:
    """Seed derived from the run seed and the image id, independent of scheduling order."""
    digest = hashlib.sha256(f"{global_seed}:{image_id}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


# ---------------------------------------------------------------- reports


@dataclass
class GroupStats:
    total: int
    correct: int
    failures: int
    lpips_sum: float
    errors: int

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct / self.total if self.total else float("nan")

    @property
    def failure_rate(self) -> float:
        return 100.0 * self.failures / self.total if self.total else float("nan")

    @property
    def mean_lpips(self) -> float:
        return self.lpips_sum / self.total if self.total else float("nan")


def group_stats(records: Iterable[RunRecord]) -> GroupStats:
    ok = [r for r in records if r.error is None]
    errors = 0
    for r in records:
        errors += r.error is not None
    return GroupStats(
        total=len(ok),
        correct=sum(r.predicted == r.label for r in ok),
        failures=sum(not r.constraint_met for r in ok),
        lpips_sum=float(sum(r.lpips for r in ok)),
        errors=errors,
    )


@dataclass
class ReportTable:
    """Aggregates of a set of run records.

    ``rows`` hold one entry per ``(attack, source, target, prompt)`` group plus a
    ``prompt="*"`` row per ``(attack, source, target)`` averaging the prompts'
    accuracies.
    """

    rows: list[dict]
    records: list[RunRecord] = field(default_factory=list)
    #: (image_id, prompt, source) -> adversarial image, when kept
    images: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Sequence[RunRecord], extra: Optional[Mapping] = None) -> "ReportTable":
        groups = defaultdict(list)
        for r in records:
            groups[(r.attack, r.source_model, r.target_model, r.prompt)].append(r)
        rows = []
        per_model = defaultdict(list)
        for key in sorted(groups):
            st = group_stats(groups[key])
            row = dict(zip(("attack", "source", "target", "prompt"), key))
            row.update(n=st.total, errors=st.errors, accuracy=st.accuracy, failure_rate=st.failure_rate,
                       mean_lpips=st.mean_lpips)
            row.update(extra or {})
            rows.append(row)
            per_model[key[:3]].append(row)
        for key, prompt_rows in sorted(per_model.items()):
            if len(prompt_rows) < 2:
                continue
            st = group_stats([r for r in records if (r.attack, r.source_model, r.target_model) == key])
            row = dict(zip(("attack", "source", "target"), key), prompt="*")
            row.update(n=st.total, errors=st.errors,
                       accuracy=float(np.mean([r["accuracy"] for r in prompt_rows])),
                       failure_rate=st.failure_rate, mean_lpips=st.mean_lpips)
            row.update(extra or {})
            rows.append(row)
        return cls(rows, list(records))

    def lookup(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def accuracy(self, **match) -> float:
        """Accuracy over every record matching the given record fields."""
        recs = [r for r in self.records if all(getattr(r, k) == v for k, v in match.items())]
        return group_stats(recs).accuracy

    def failure_rate(self, **match) -> float:
        recs = [r for r in self.records if all(getattr(r, k) == v for k, v in match.items())]
        return group_stats(recs).failure_rate

    def transfer_matrix(self, attack: Optional[str] = None) -> tuple[list[str], list[str], np.ndarray]:
        recs = [r for r in self.records if attack is None or r.attack == attack]
        sources = sorted({r.source_model for r in recs})
        targets = sorted({r.target_model for r in recs})
        mat = np.full((len(sources), len(targets)), np.nan)
        for i, s in enumerate(sources):
            for j, t in enumerate(targets):
                sel = [r for r in recs if r.source_model == s and r.target_model == t]
                if sel:
                    mat[i, j] = group_stats(sel).accuracy
        return sources, targets, mat

    def write_csv(self, path) -> None:
        keys = []
        for row in self.rows:
            keys += [k for k in row if k not in keys]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(self.rows)

    @property
    def has_errors(self) -> bool:
        return any(r.error is not None for r in self.records)


# ---------------------------------------------------------------- evaluation


def _prompt_texts(prompts):
    """Normalize prompts to strings; a mapping gives per-image prompt lists keyed by image-id."""
    if isinstance(prompts, Mapping):
        return {k: _prompt_texts(v) for k, v in prompts.items()}
    if isinstance(prompts, str) or hasattr(prompts, "text"):
        prompts = [prompts]
    return [getattr(p, "text", p) for p in prompts]


class _PerWorker:
    """Hands each worker thread its own copy of a non-shareable adapter."""

    def __init__(self, obj):
        self.obj = obj
        self.shared = getattr(obj, "shareable", True)
        self._local = threading.local()

    def get(self):
        if self.shared:
            return self.obj
        if not hasattr(self._local, "obj"):
            self._local.obj = copy.deepcopy(self.obj)
        return self._local.obj


@dataclass
class EvalSettings:
    """Run-level knobs shared by the evaluation loops."""

    seed: int = 0
    gamma: float = 0.3
    workers: int = 1
    out_dir: Optional[Path] = None
    save_images: bool = True
    keep_images: bool = False


def _craft(attack, x, label, classifier, prompt, seed):
    out = attack(x, label, classifier, instruction=prompt, seed=seed)
    image = getattr(out, "adversarial", out)
    return image.detach(), int(getattr(out, "iterations", getattr(attack, "max_iters", 0)) or 0), \
        bool(getattr(out, "projected", False))


def _run_pairs(dataset: Dataset, prompts, job: Callable, workers: int) -> list:
    if isinstance(prompts, Mapping):
        pairs = [(item, p) for item in dataset.items for p in prompts.get(item.image_id, ())]
    else:
        pairs = [(item, p) for item in dataset.items for p in prompts]
    if workers <= 1:
        results = [job(item, p) for item, p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda ip: job(*ip), pairs))
    return [r for group in results for r in group]


def evaluate_transfer(
    dataset: Dataset,
    attack,
    prompts,
    source_models: Mapping[str, Classifier],
    target_models: Mapping[str, Classifier],
    phi: FeatureExtractor,
    settings: EvalSettings = EvalSettings(),
    attack_name: Optional[str] = None,
) -> ReportTable:
    """Craft on every source model and score the results on every target model."""
    prompts = _prompt_texts(prompts)
    name = attack_name or getattr(attack, "name", type(attack).__name__.lower())
    sources = {k: _PerWorker(v) for k, v in source_models.items()}
    targets = {k: _PerWorker(v) for k, v in target_models.items()}
    attack_slot = _PerWorker(attack)
    phi_slot = _PerWorker(phi)
    write_images = settings.out_dir is not None and settings.save_images
    kept = {}

    def job(item: DatasetItem, prompt: str) -> list[RunRecord]:
        seed = image_seed(settings.seed, item.image_id)
        records = []
        try:
            x = dataset.image(item)
        except Exception as exc:  # noqa: BLE001 - recorded, run continues
            log.exception("failed to load %s", item.image_id)
            return [_error_record(item, prompt, name, s, t, seed, exc) for s in sources for t in targets]
        for src_name, src in sources.items():
            start = time.perf_counter()
            try:
                x_adv, iterations, projected = _craft(attack_slot.get(), x, item.label, src.get(), prompt, seed)
                d = float(lpips_distance(x_adv, x.to(x_adv.dtype), phi_slot.get()))
            except Exception as exc:  # noqa: BLE001 - recorded, run continues
                log.exception("attack failed on %s / %r / %s", item.image_id, prompt, src_name)
                records += [_error_record(item, prompt, name, src_name, t, seed, exc) for t in targets]
                continue
            elapsed = time.perf_counter() - start
            if settings.keep_images:
                kept[(item.image_id, prompt, src_name)] = x_adv
            if write_images:
                tag = "" if len(sources) == 1 else f"__{src_name}"
                save_png(x_adv, settings.out_dir / f"{item.image_id}__{slugify(prompt)}{tag}.png")
            for tgt_name, tgt in targets.items():
                try:
                    pred = classify(tgt.get(), x_adv)
                except Exception as exc:  # noqa: BLE001
                    records.append(_error_record(item, prompt, name, src_name, tgt_name, seed, exc))
                    continue
                records.append(RunRecord(
                    image_id=item.image_id, prompt=prompt, attack=name, source_model=src_name,
                    target_model=tgt_name, label=item.label, predicted=pred, success=pred != item.label,
                    lpips=d, constraint_met=is_feasible(d, settings.gamma), iterations=iterations,
                    seed=seed, wall_time=elapsed, projected=projected,
                ))
        return records

    if settings.out_dir is not None:
        Path(settings.out_dir).mkdir(parents=True, exist_ok=True)
    records = _run_pairs(dataset, prompts, job, settings.workers)
    table = ReportTable.from_records(records)
    table.images = dict(sorted(kept.items()))
    return table


def _error_record(item, prompt, attack, source, target, seed, exc) -> RunRecord:
    return RunRecord(item.image_id, prompt, attack, source, target, item.label, -1, False,
                     float("nan"), False, 0, seed, error=f"{type(exc).__name__}: {exc}")


def evaluate_whitebox(
    dataset: Dataset,
    attack,
    prompts,
    classifier: Classifier,
    phi: FeatureExtractor,
    settings: EvalSettings = EvalSettings(),
    model_name: str = "model",
    attack_name: Optional[str] = None,
) -> ReportTable:
    """Attack and evaluate with the same classifier, per image and prompt."""
    return evaluate_transfer(dataset, attack, prompts, {model_name: classifier}, {model_name: classifier},
                             phi, settings, attack_name)


ABLATIONS = ("lambda", "gamma", "alpha_beta")


def ablate(
    parameter: str,
    values: Sequence,
    dataset: Dataset,
    make_attack: Callable,
    base_config,
    prompts,
    classifier: Classifier,
    phi: FeatureExtractor,
    settings: EvalSettings = EvalSettings(),
    fid: Optional[Callable[[list[Tensor], list[Tensor]], float]] = None,
) -> ReportTable:
    """Sweep ``lambda``, ``gamma`` or the ``alpha_beta`` switches.

    ``make_attack(config)`` builds the attack for one swept config. For the
    switches each value is a pair ``(optimize_alpha, optimize_beta)``. ``fid``
    is an optional callable over (clean, adversarial) image lists.
    """
    if parameter not in ABLATIONS:
        raise ValueError(f"unknown ablation {parameter!r}; expected one of {ABLATIONS}")
    rows, all_records = [], []
    for value in values:
        if parameter == "lambda":
            config = base_config.replace(lam=float(value))
        elif parameter == "gamma":
            config = base_config.replace(gamma=float(value))
        else:
            a, b = value
            config = base_config.replace(optimize_alpha=bool(a), optimize_beta=bool(b))
        run_settings = dataclasses.replace(settings, gamma=config.gamma, out_dir=None, keep_images=fid is not None)
        table = evaluate_whitebox(dataset, make_attack(config), prompts, classifier, phi, run_settings)
        st = group_stats(table.records)
        row = {"parameter": parameter, "value": value if parameter != "alpha_beta" else f"{int(value[0])}{int(value[1])}",
               "n": st.total, "errors": st.errors, "accuracy": st.accuracy, "failure_rate": st.failure_rate,
               "mean_lpips": st.mean_lpips}
        if fid is not None:
            by_id = {it.image_id: it for it in dataset.items}
            keys = list(table.images)
            row["fid"] = float(fid([dataset.image(by_id[k[0]]) for k in keys], [table.images[k] for k in keys]))
        rows.append(row)
        all_records += table.records
    return ReportTable(rows, all_records)
