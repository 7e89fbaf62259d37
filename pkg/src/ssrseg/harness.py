"""Training, evaluation, gradient checking and scale-map export."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import VolumeSample, load_dataset, read_container, write_container
from .errors import ConfigError, ContractError, LoadError
from .gradcheck import finite_diff_check_batched
from .losses import TERMS, LossWeights, metrics, total_loss
from .model import ModelConfig, SSRNet, build_model, inference
from .tensor import Tensor, no_grad, resize_linear

log = logging.getLogger(__name__)

CONFIG_RECORD = "__config__"
CHECKPOINT = "checkpoint.ssv"
REPORT = "report.json"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: str = ""
    holdout: int = 50
    levels: int = 3
    width: int = 8
    dilation_rates: Tuple[int, ...] = (1, 2, 3, 5)
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    lambda1: float = 0.8
    lambda2: float = 0.2
    xi: float = 1e-5
    sdc: bool = True
    dsr: bool = True
    fa: bool = True
    sa: bool = True
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 500
    batch_size: int = 2
    threshold: float = 0.5
    output: str = "run"

    def __post_init__(self):
        object.__setattr__(self, "dilation_rates", tuple(int(r) for r in self.dilation_rates))
        if (self.fa or self.sa) and not self.dsr:
            raise ConfigError("invalid flags: fa or sa requires dsr (affinity needs both branches)")
        if self.sa and not self.sdc:
            raise ConfigError("invalid flags: sa requires sdc (scale affinity needs scale maps)")
        if self.steps < 0 or self.batch_size < 1 or self.holdout < 0:
            raise ConfigError("steps and holdout must be >= 0 and batch_size >= 1")
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("optimizer settings out of range")
        self.loss_weights()  # validates the weights

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            width=self.width, levels=self.levels, dilation_rates=self.dilation_rates, sdc=self.sdc, dsr=self.dsr
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            alpha=self.alpha if self.dsr else 0.0,
            beta=self.beta if self.fa else 0.0,
            gamma=self.gamma if self.sa else 0.0,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            xi=self.xi,
        )


def _parse_value(raw: str, kind, key: str):
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == Tuple[int, ...]:
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        return text
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r}") from None


def parse_config(text: str, **overrides) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    kinds = {f.name: f.type for f in fields(RunConfig)}
    kinds = {k: {"int": int, "float": float, "bool": bool, "str": str}.get(v, v) for k, v in kinds.items()}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(raw, kinds[key], key)
    values.update(overrides)
    return RunConfig(**values)


def load_config(path, **overrides) -> RunConfig:
    return parse_config(Path(path).read_text(), **overrides)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------
class Adam:
    """Adaptive moment estimation with bias-corrected first and second moments."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
def save_checkpoint(path, model: SSRNet) -> Path:
    meta = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    records = [(CONFIG_RECORD, np.frombuffer(meta, dtype=np.uint8))]
    records += [(name, p.data) for name, p in model.named_parameters()]
    return write_container(path, records)


def load_checkpoint(path, cfg: Optional[ModelConfig] = None) -> SSRNet:
    records = read_container(path)
    if cfg is None:
        if CONFIG_RECORD not in records:
            raise LoadError(f"{path} has no {CONFIG_RECORD} record and no model config was given")
        cfg = ModelConfig.from_dict(json.loads(records[CONFIG_RECORD].tobytes().decode()))
    records.pop(CONFIG_RECORD, None)
    return SSRNet(cfg).load_state_dict(records)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------
@dataclass
class MetricReport:
    strata: Dict[str, Dict[str, float]] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    overall: Dict[str, float] = field(default_factory=dict)
    samples: List[Dict] = field(default_factory=list)
    loss_curve: Dict[str, List[float]] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def empty(self) -> bool:
        return not self.samples

    def to_dict(self, timing: bool = False) -> Dict:
        d = {
            "empty": self.empty,
            "overall": self.overall,
            "strata": self.strata,
            "counts": self.counts,
            "samples": self.samples,
            "loss_curve": self.loss_curve,
        }
        if timing:
            d["seconds"] = self.seconds
        return d

    def summary(self) -> str:
        def fmt(m):
            return " ".join(f"{k}={m[k]:.6g}" for k in ("dsc", "iou", "mae"))

        if self.empty:
            return "empty dataset: 0 samples"
        lines = [f"overall  n={len(self.samples)}  {fmt(self.overall)}"]
        for label, m in self.strata.items():
            lines.append(f"stratum {label}  n={self.counts[label]}  {fmt(m)}")
        if self.seconds:
            lines.append(f"seconds {self.seconds:.6g}")
        return "\n".join(lines)


def aggregate(per_sample: Sequence[Dict]) -> MetricReport:
    """Per-stratum means and the sample-weighted overall mean."""
    report = MetricReport(samples=list(per_sample))
    if not per_sample:
        return report
    keys = ("dsc", "iou", "mae")
    groups: Dict[str, List[Dict]] = {}
    for s in per_sample:
        groups.setdefault(s["stratum"], []).append(s)
    for label in sorted(groups):
        rows = groups[label]
        report.counts[label] = len(rows)
        report.strata[label] = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    report.overall = {k: float(np.mean([r[k] for r in per_sample])) for k in keys}
    return report


def evaluate_samples(model: SSRNet, items, threshold: float = 0.5) -> MetricReport:
    rows = []
    for entry, sample in items:
        x = Tensor(sample.lr_image[None].astype(model.cfg.np_dtype))
        prob = inference(model, x).data[0]
        m = metrics(prob, sample.hr_mask, threshold)
        rows.append({"file": entry.filename, "stratum": entry.stratum, "diameter": entry.diameter, **m})
    return aggregate(rows)


def split_dataset(items, holdout: int):
    if holdout >= len(items):
        raise ConfigError(f"holdout={holdout} leaves no training samples out of {len(items)}")
    cut = len(items) - holdout
    return items[:cut], items[cut:]


def evaluate(checkpoint, dataset, threshold: float = 0.5, holdout: Optional[int] = None, split: str = "all"):
    """Metrics of a checkpoint on a dataset directory (optionally only its train or holdout split)."""
    model = load_checkpoint(checkpoint)
    items = load_dataset(dataset)
    if items and split != "all":
        train_items, test_items = split_dataset(items, holdout or 0)
        items = train_items if split == "train" else test_items
    return evaluate_samples(model, items, threshold)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
def _batch(items, indices, dtype):
    lr = np.stack([items[i][1].lr_image for i in indices]).astype(dtype)
    hr = np.stack([items[i][1].hr_image for i in indices]).astype(dtype)
    mask = np.stack([items[i][1].hr_mask for i in indices]).astype(dtype)
    return Tensor(lr), Tensor(hr), Tensor(mask)


@dataclass
class TrainResult:
    model: SSRNet
    report: MetricReport
    train_items: list
    test_items: list
    checkpoint: Optional[Path] = None


def train(cfg: RunConfig, items=None, write: bool = True) -> TrainResult:
    """Train from ``cfg`` and report metrics on the held-out tail of the dataset.

    Sample order comes from a generator seeded with ``cfg.seed``; nothing
    else is random, so equal configs produce bit-identical checkpoints.
    """
    start = time.perf_counter()
    if items is None:
        items = load_dataset(cfg.dataset)
    if not items:
        raise ConfigError(f"dataset {cfg.dataset!r} is empty")
    train_items, test_items = split_dataset(items, cfg.holdout)

    model = build_model(cfg.model_config(), cfg.seed)
    weights = cfg.loss_weights()
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    dtype = model.cfg.np_dtype
    curve: Dict[str, List[float]] = {k: [] for k in TERMS + ("total",)}

    order: List[int] = []
    for step in range(cfg.steps):
        if len(order) < cfg.batch_size:
            order.extend(rng.permutation(len(train_items)).tolist())
        idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
        lr_img, hr_img, hr_mask = _batch(train_items, idx, dtype)
        opt.zero_grad()
        bundle = model(lr_img)
        loss, breakdown = total_loss(bundle, hr_img, hr_mask, weights)
        loss.backward()
        opt.step()
        for k, v in breakdown.items():
            curve[k].append(v)
        if step % 50 == 0 or step == cfg.steps - 1:
            log.info("step %d %s", step, " ".join(f"{k}={v:.6g}" for k, v in breakdown.items()))

    report = evaluate_samples(model, test_items, cfg.threshold)
    report.loss_curve = curve
    report.seconds = time.perf_counter() - start
    result = TrainResult(model, report, train_items, test_items)
    if write:
        out = Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = save_checkpoint(out / CHECKPOINT, model)
        (out / REPORT).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
        (out / "config.txt").write_text(format_config(cfg))
        (out / "timing.json").write_text(json.dumps({"seconds": report.seconds}))
    return result


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------
@dataclass
class GradcheckResult:
    max_error: float
    passed: bool
    n_params: int
    seconds: float
    worst: List[Tuple[str, float]] = field(default_factory=list)


def gradcheck(
    width: int = 2,
    extent: int = 8,
    levels: int = 3,
    weights: LossWeights = LossWeights(),
    seed: int = 0,
    step: float = 2e-5,
    tolerance: float = 1e-3,
    chunk: int = 64,
    widen_noisy: bool = True,
) -> GradcheckResult:
    """Finite-difference check of the full combined objective over every parameter (float64)."""
    start = time.perf_counter()
    cfg = ModelConfig(width=width, levels=levels, dtype="float64")
    model = build_model(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    lr = Tensor(rng.uniform(0.0, 1.0, (1, 1, extent, extent, extent)))
    hr_img = Tensor(rng.uniform(0.0, 1.0, (1, 1, 2 * extent, 2 * extent, 2 * extent)))
    hr_mask = Tensor((rng.uniform(size=hr_img.shape) < 0.3).astype(np.float64))
    params = model.parameters()

    def objective():
        return total_loss(model(lr), hr_img, hr_mask, weights, reduction="none")[0]

    per_param: List[float] = []
    err = finite_diff_check_batched(objective, params, step, chunk, per_param, widen_noisy)
    worst = sorted(zip(per_param, (n for n, _ in model.named_parameters())), reverse=True)[:5]
    n = sum(p.size for p in params)
    return GradcheckResult(err, err < tolerance, n, time.perf_counter() - start, [(n, e) for e, n in worst])


# ---------------------------------------------------------------------------
# scale-map export
# ---------------------------------------------------------------------------
def _write_pgm(path: Path, image: np.ndarray):
    img = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def scale_maps(model: SSRNet, lr_image: np.ndarray):
    """Run the full dual-path forward and return [(branch, block, rate, map array (D,H,W))]."""
    if not model.cfg.sdc:
        raise ConfigError("checkpoint was trained without SDC blocks; there are no scale maps")
    x = Tensor(np.asarray(lr_image, dtype=model.cfg.np_dtype)[None])
    with no_grad():
        model(x)
    out = []
    for branch in ("seg", "sr"):
        for b, block in enumerate(model.sdc_blocks(branch)):
            for rate, s in zip(block.rates, block.last_maps):
                out.append((branch, b, rate, s.data[0, 0]))
    return out


def dump_scale_maps(checkpoint, sample, outdir) -> List[Path]:
    """Write every scale map as an f32 container and a PGM of its central slice, plus ``index.tsv``."""
    model = load_checkpoint(checkpoint)
    if isinstance(sample, VolumeSample):
        lr = sample.lr_image
    else:
        lr = read_container(sample)["lr_image"]
    maps = scale_maps(model, lr)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    index, written = [], []
    for branch, block, rate, arr in maps:
        stem = f"{branch}_block{block}_dr{rate}"
        path = write_container(outdir / f"{stem}.ssv", {"scale_map": arr.astype(np.float32)})
        _write_pgm(outdir / f"{stem}.pgm", arr[arr.shape[0] // 2])
        index.append(f"{path.name}\t{branch}\t{block}\t{rate}\n")
        written.append(path)
    (outdir / "index.tsv").write_text("".join(index))
    return written


def foreground_map_mean(model: SSRNet, sample: VolumeSample, branch: str = "seg", block: int = -1) -> float:
    """Mean of the largest-dilation map of one SDC block over the sample's HR lesion voxels."""
    maps = [m for m in scale_maps(model, sample.lr_image) if m[0] == branch]
    blocks = sorted({m[1] for m in maps})
    chosen = blocks[block]
    rate, arr = max((m[2], m[3]) for m in maps if m[1] == chosen)
    hr = resize_linear(Tensor(arr[None, None].astype(np.float64)), sample.hr_mask.shape[1:]).data[0, 0]
    fg = sample.hr_mask[0].astype(bool)
    return float(hr[fg].mean()) if fg.any() else float("nan")
