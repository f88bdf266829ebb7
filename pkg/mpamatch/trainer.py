"""
Training loop, evaluation and checkpoints.

One step runs the labeled batch and the weak view of the unlabeled batch through the
model together (with a feature-perturbed copy of the encoder grid), the two strong views
in a second pass, then combines the supervised, dual-stream consistency and prototype
losses. Every random draw is derived from (seed, epoch, step), so a run resumed from an
epoch-boundary checkpoint replays the uninterrupted run exactly.
"""

import json
import logging
import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import torch
from PIL import Image
from tqdm import tqdm

from mpamatch._version import __version__
from mpamatch.augment import (
    apply_transform,
    make_unlabeled_views,
    mix_labels,
    resize_mask,
    weak_augment,
    write_records,
)
from mpamatch.datasets import SegmentationBatch, SegmentationDataset, SegmentationSample, load_manifest, split
from mpamatch.exceptions import ConfigError, DataError, MPAMatchError
from mpamatch.losses import (
    pal_loss,
    pcl_loss,
    supervised_loss_from_logits,
    total_loss,
    unlabeled_loss,
)
from mpamatch.metrics import ConfusionMatrix, write_report
from mpamatch.models import (
    AugmentationRecord,
    ClassPromptSet,
    DatasetManifest,
    FitResult,
    LossReport,
    MetricReport,
    RunConfig,
)
from mpamatch.prefetch import PrefetchLoader
from mpamatch.protovis import (
    PrototypeBank,
    ProtoHead,
    assign,
    binarize,
    flatten_pixels,
    fuse,
    init_prototypes,
    prototype_logits,
    similarity,
    unflatten_pixels,
    update_bank,
)
from mpamatch.prototext import TextPrototypes, build_text_encoder, embed_descriptions, load_prompt_sets
from mpamatch.segmodel import SegmentationModel, set_seed

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


def derive_seed(*parts: int) -> int:
    """Independent 32-bit seed for a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    """base * (1 - step / total) ** power, and 0 once step reaches total."""
    if total_steps <= 0 or step >= total_steps:
        return 0.0
    return base_lr * (1.0 - step / total_steps) ** power


@dataclass
class TrainState:
    """Everything a training loop owns and a checkpoint restores."""

    config: RunConfig
    model: SegmentationModel
    optimizer: torch.optim.Optimizer
    class_names: list[str]
    text: TextPrototypes | None = None
    visual_head: ProtoHead | None = None
    text_head: ProtoHead | None = None
    bank: PrototypeBank | None = None
    step: int = 0
    epoch: int = 0
    planned_steps: int = 0
    best_mdice: float = -1.0
    history: list[dict[str, Any]] = field(default_factory=list)
    prompt_hashes: dict[str, str] = field(default_factory=dict)

    @property
    def num_prototypes(self) -> int:
        return self.config.model.proto.num_prototypes

    def prototypes_ready(self) -> bool:
        """True once every enabled prototype branch can be scored."""
        if self.visual_head is not None and self.bank is None:
            return False
        return self.bank is not None or self.text is not None

    def current_lr(self) -> float:
        """Scheduled rate of the next step; the base rate until fit plans the run."""
        opt = self.config.optimizer
        if opt.schedule == "constant" or self.planned_steps <= 0:
            return opt.lr
        return poly_lr(opt.lr, self.step, self.planned_steps, opt.power)

    def modules(self) -> list[torch.nn.Module]:
        return [m for m in (self.model, self.text, self.visual_head, self.text_head) if m is not None]


def build_state(
    config: RunConfig,
    class_names: list[str] | None = None,
    prompt_sets: list[ClassPromptSet] | None = None,
    text_base: torch.Tensor | None = None,
) -> TrainState:
    """
    Seed everything and construct the model, prototype heads, text branch and optimizer.

    The text branch embeds prompt_sets (read from config.model.text.prompt_root when not
    given); text_base skips embedding entirely, as when restoring a checkpoint.
    """
    set_seed(config.seed)
    class_names = list(class_names or config.data.class_names)
    model_cfg = config.model
    num_classes = model_cfg.decoder.num_classes
    k, embed_dim = model_cfg.proto.num_prototypes, model_cfg.proto.embed_dim

    model = SegmentationModel(model_cfg.encoder, model_cfg.decoder, embed_dim)
    visual_head = ProtoHead(embed_dim, num_classes * k, num_classes) if model_cfg.proto.enabled else None

    text = text_head = None
    prompt_hashes: dict[str, str] = {}
    if model_cfg.text.enabled:
        if text_base is None:
            if prompt_sets is None:
                prompt_sets, prompt_hashes = load_prompt_sets(
                    model_cfg.text.prompt_root, model_cfg.text.tag, class_names, k
                )
            encoder = build_text_encoder(model_cfg.text, config.seed)
            text_base = embed_descriptions(prompt_sets, encoder)
        text = TextPrototypes(
            text_base,
            embed_dim,
            coop_tokens=model_cfg.text.coop_tokens,
            freeze_base=model_cfg.text.freeze_base,
            projection_init=model_cfg.text.projection_init,
            similarity=model_cfg.proto.similarity,
            seed=config.seed,
        )
        text_head = ProtoHead(embed_dim, num_classes * k, num_classes)

    params = [p for m in (model, text, visual_head, text_head) if m is not None for p in m.parameters()]
    optimizer = torch.optim.SGD(
        [p for p in params if p.requires_grad],
        lr=config.optimizer.lr,
        momentum=config.optimizer.momentum,
        weight_decay=config.optimizer.weight_decay,
    )
    return TrainState(
        config=config,
        model=model,
        optimizer=optimizer,
        class_names=class_names,
        text=text,
        visual_head=visual_head,
        text_head=text_head,
        prompt_hashes=prompt_hashes,
    )


@torch.no_grad()
def initialize_bank(state: TrainState, dataset: SegmentationDataset) -> PrototypeBank:
    """Embed every labeled image and run k-means per class on a seeded pixel subsample."""
    proto = state.config.model.proto
    num_classes = state.config.model.decoder.num_classes
    state.model.eval()
    per_class: list[list[torch.Tensor]] = [[] for _ in range(num_classes)]
    for index in range(len(dataset)):
        sample = dataset[index]
        if sample.mask is None:
            continue
        pixels = flatten_pixels(state.model(sample.image.unsqueeze(0)).embeddings)
        labels = sample.mask.reshape(-1)
        for c in range(num_classes):
            per_class[c].append(pixels[labels == c])

    generator = torch.Generator().manual_seed(derive_seed(state.config.seed, 0xB4))
    embeddings = []
    for rows in per_class:
        stacked = torch.cat(rows) if rows else torch.empty(0, proto.embed_dim)
        if len(stacked) > proto.init_pixels_per_class:
            keep = torch.randperm(len(stacked), generator=generator)[: proto.init_pixels_per_class]
            stacked = stacked[keep.sort().values]
        embeddings.append(stacked)

    bank = init_prototypes(
        embeddings,
        proto.num_prototypes,
        seed=state.config.seed,
        similarity=proto.similarity,
        momentum=proto.momentum,
        class_names=state.class_names,
    )
    logger.info("Initialized prototype bank %s from %d labeled images", tuple(bank.prototypes.shape), len(dataset))
    return bank


class UnlabeledBatch(NamedTuple):
    weak: torch.Tensor
    strong1: torch.Tensor
    strong2: torch.Tensor
    partner_weak: torch.Tensor
    records: list[AugmentationRecord]


class StepJob(NamedTuple):
    epoch: int
    index: int
    labeled: tuple[int, ...]
    unlabeled: tuple[int, ...]
    partners: tuple[int, ...]


class StepInputs(NamedTuple):
    job: StepJob
    labeled: SegmentationBatch
    unlabeled: UnlabeledBatch | None


def schedule_epoch(epoch: int, num_labeled: int, num_unlabeled: int, batch_size: int, seed: int) -> list[StepJob]:
    """
    Step plan of one epoch: a seeded permutation of the labeled stream, paired 1:1 with
    unlabeled samples (and CutMix partners) drawn from seeded permutations that cycle.
    """
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(num_labeled)
    steps = math.ceil(num_labeled / batch_size)

    def cycled(n: int) -> np.ndarray:
        need = steps * batch_size
        return np.concatenate([rng.permutation(n) for _ in range(math.ceil(need / n))])[:need]

    unlabeled = cycled(num_unlabeled) if num_unlabeled else np.empty(0, dtype=np.int64)
    partners = cycled(num_unlabeled) if num_unlabeled else np.empty(0, dtype=np.int64)
    jobs = []
    for i in range(steps):
        chunk = order[i * batch_size : (i + 1) * batch_size]
        lo, hi = i * batch_size, i * batch_size + len(chunk)
        jobs.append(
            StepJob(
                epoch,
                i,
                tuple(int(x) for x in chunk),
                tuple(int(x) for x in unlabeled[lo:hi]),
                tuple(int(x) for x in partners[lo:hi]),
            )
        )
    return jobs


def prepare_step(
    job: StepJob,
    labeled: SegmentationDataset,
    unlabeled: SegmentationDataset | None,
    config: RunConfig,
) -> StepInputs:
    """Load and augment the inputs of one step; safe to run in the prefetch thread."""
    size = config.model.encoder.input_size
    aug = config.augment
    samples = []
    for j, index in enumerate(job.labeled):
        sample = labeled[index]
        view, transform = weak_augment(
            sample.image, size, derive_seed(config.seed, job.epoch, job.index, 0, j), aug.flip_prob
        )
        samples.append(SegmentationSample(view, apply_transform(sample.mask, transform, is_mask=True), sample.id))
    labeled_batch = SegmentationBatch.collate(samples, labeled=True)

    unlabeled_batch = None
    if unlabeled is not None and job.unlabeled:
        views = []
        for j, (index, partner_index) in enumerate(zip(job.unlabeled, job.partners)):
            sample, partner = unlabeled[index], unlabeled[partner_index]
            views.append(
                make_unlabeled_views(
                    sample.image,
                    partner.image,
                    size,
                    derive_seed(config.seed, job.epoch, job.index, 1, j),
                    aug,
                    sample_id=sample.id,
                    partner_id=partner.id,
                )
            )
        unlabeled_batch = UnlabeledBatch(
            torch.stack([v.weak for v in views]),
            torch.stack([v.strong1 for v in views]),
            torch.stack([v.strong2 for v in views]),
            torch.stack([v.partner_weak for v in views]),
            [v.record for v in views],
        )
    return StepInputs(job, labeled_batch, unlabeled_batch)


class _BranchLosses(NamedTuple):
    pal: torch.Tensor
    pcl: torch.Tensor
    head: torch.Tensor
    assignment: Any


def _branch_losses(
    features: torch.Tensor,
    labels: torch.Tensor,
    valid: torch.Tensor,
    prototypes: PrototypeBank | torch.Tensor,
    head: ProtoHead,
    labeled_pixels: int,
    labeled_masks: torch.Tensor,
    state: TrainState,
) -> _BranchLosses:
    """PAL, PCL and the prototype-head supervised loss of one prototype branch."""
    weights = state.config.loss
    mode = state.config.model.proto.similarity
    k = state.num_prototypes
    target = prototypes.detach() if isinstance(prototypes, torch.Tensor) else prototypes
    assignment = assign(features.detach(), labels, target, valid, mode)
    sim = similarity(features, prototypes, mode)
    pal = pal_loss(sim, assignment.flat, weights.temperature, assignment.valid).value
    pcl = pcl_loss(sim, assignment.flat, k, weights.temperature, assignment.valid).value

    batch, height, width = labeled_masks.shape
    attended = fuse(features[:labeled_pixels], prototypes)
    logits = unflatten_pixels(head(attended, sim[:labeled_pixels]), batch, height, width)
    head_loss = supervised_loss_from_logits(logits, labeled_masks, weights.eps).total
    return _BranchLosses(pal, pcl, head_loss, assignment)


def train_step(
    state: TrainState,
    labeled: SegmentationBatch,
    unlabeled: UnlabeledBatch | None = None,
    use_prototypes: bool | None = None,
) -> tuple[TrainState, LossReport]:
    """
    One optimizer step over a labeled batch and an optional unlabeled batch.

    Prototype losses run when use_prototypes is True (default: whenever the branches are
    ready). The visual bank is EMA-updated after the optimizer step.

    Raises:
        NumericAbort: If a loss component is non-finite
    """
    config = state.config
    weights = config.loss
    if labeled.masks is None:
        raise DataError("train_step needs a labeled batch with masks")
    if use_prototypes is None:
        use_prototypes = state.prototypes_ready()
    for module in state.modules():
        module.train()

    lr = state.current_lr()
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    images, masks = labeled.images, labeled.masks
    n_lab = images.shape[0]
    generator = torch.Generator().manual_seed(derive_seed(config.seed, state.epoch, state.step, 2))

    unlabel, retention = None, 0.0
    if unlabeled is not None:
        with torch.no_grad():
            p_partner = torch.softmax(state.model(unlabeled.partner_weak).logits, dim=1)
        out = state.model(torch.cat([images, unlabeled.weak]), fp_rate=config.augment.feature_dropout, generator=generator)
        logits_x, logits_w = out.logits[:n_lab], out.logits[n_lab:]
        p_w = torch.softmax(logits_w, dim=1)
        p_fp = torch.softmax(out.logits_fp[n_lab:], dim=1)
        p_s1, p_s2 = torch.softmax(state.model(torch.cat([unlabeled.strong1, unlabeled.strong2])).logits, dim=1).chunk(2)
        detached = p_w.detach()
        target_s1 = torch.stack(
            [mix_labels(detached[b], p_partner[b], r.cutmix[0]) for b, r in enumerate(unlabeled.records)]
        )
        target_s2 = torch.stack(
            [mix_labels(detached[b], p_partner[b], r.cutmix[1]) for b, r in enumerate(unlabeled.records)]
        )
        unlabel, retention = unlabeled_loss(p_w, p_fp, p_s1, p_s2, weights, target_s1, target_s2)
        embeddings = out.embeddings
    else:
        out = state.model(images)
        logits_x = out.logits
        embeddings = out.embeddings
        detached = None

    label = supervised_loss_from_logits(logits_x, masks, weights.eps)

    proto_terms: dict[str, torch.Tensor | None] = {}
    visual_assignment = features = None
    if use_prototypes:
        features = flatten_pixels(embeddings)
        labels = masks.reshape(-1)
        valid = torch.ones_like(labels, dtype=torch.bool)
        if detached is not None:
            confidence, pseudo = detached.max(dim=1)
            labels = torch.cat([labels, pseudo.reshape(-1)])
            valid = torch.cat([valid, (confidence >= weights.tau).reshape(-1)])
        labeled_pixels = masks.numel()
        heads = []
        if state.bank is not None and state.visual_head is not None:
            visual = _branch_losses(
                features, labels, valid, state.bank, state.visual_head, labeled_pixels, masks, state
            )
            proto_terms["pal_visual"], proto_terms["pcl_visual"] = visual.pal, visual.pcl
            heads.append(visual.head)
            visual_assignment = visual.assignment
        if state.text is not None and state.text_head is not None:
            text = _branch_losses(
                features, labels, valid, state.text(), state.text_head, labeled_pixels, masks, state
            )
            proto_terms["pal_text"], proto_terms["pcl_text"] = text.pal, text.pcl
            heads.append(text.head)
        if heads:
            proto_terms["proto_head"] = sum(heads) / len(heads)

    loss, report = total_loss(label, weights, unlabel, retention, step=state.step, **proto_terms)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()

    if visual_assignment is not None and state.bank is not None and features is not None:
        state.bank = update_bank(state.bank, features.detach(), visual_assignment)

    report = report.model_copy(update={"epoch": state.epoch, "lr": lr})
    state.step += 1
    return state, report


def plan_steps(config: RunConfig, num_labeled: int) -> int:
    """Optimizer steps of a whole run: epochs x ceil(labeled / batch), capped by max_steps."""
    planned = config.epochs * math.ceil(num_labeled / config.batch_size)
    return planned if config.max_steps is None else min(planned, config.max_steps)


def _prototype_probabilities(state: TrainState, embeddings: torch.Tensor) -> torch.Tensor | None:
    if state.bank is not None and state.visual_head is not None:
        branch = prototype_logits(embeddings, state.bank, state.visual_head, state.config.model.proto.similarity)
    elif state.text is not None and state.text_head is not None:
        branch = prototype_logits(embeddings, state.text(), state.text_head, state.config.model.proto.similarity)
    else:
        return None
    return torch.softmax(branch.logits, dim=1)


def _inverse_palette(manifest: DatasetManifest) -> dict[int, int]:
    inverse: dict[int, int] = {}
    for value, cls in sorted(manifest.palette.items()):
        inverse.setdefault(cls, value)
    return inverse


def _overlay(image: torch.Tensor, mask: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    base = (image.permute(1, 2, 0).numpy() * 255.0).astype(np.float32)
    colors = np.array([[0, 0, 0], [0, 200, 80], [230, 60, 60], [60, 120, 230], [240, 200, 40]], dtype=np.float32)
    tint = colors[mask % len(colors)]
    blended = np.where(mask[..., None] > 0, (1 - alpha) * base + alpha * tint, base)
    return blended.clip(0, 255).astype(np.uint8)


@torch.no_grad()
def evaluate(
    state: TrainState,
    manifest: DatasetManifest,
    split_name: str = "test",
    export_dir: str | Path | None = None,
    include_background: bool = True,
) -> MetricReport:
    """
    Score the model on one split at model input resolution.

    With export_dir, predicted masks (palette values, source resolution) and overlays are
    written to export_dir/masks and export_dir/overlays.

    Raises:
        DataError: If the split is empty
    """
    config = state.config
    dataset = SegmentationDataset(manifest, split_name, config.model.encoder.input_size, config.data.cache_size)
    if len(dataset) == 0:
        raise DataError(f"Split '{split_name}' of {manifest.name} is empty")
    for module in state.modules():
        module.eval()

    if export_dir is not None:
        export_dir = Path(export_dir)
        (export_dir / "masks").mkdir(parents=True, exist_ok=True)
        (export_dir / "overlays").mkdir(parents=True, exist_ok=True)
    inverse = _inverse_palette(manifest)

    cm = ConfusionMatrix(config.model.decoder.num_classes, state.class_names)
    for index in range(len(dataset)):
        sample = dataset[index]
        if sample.mask is None:
            raise DataError(f"Cannot evaluate '{sample.id}': no mask")
        out = state.model(sample.image.unsqueeze(0))
        probs = torch.softmax(out.logits, dim=1)
        if config.model.proto.head_mode == "average":
            extra = _prototype_probabilities(state, out.embeddings)
            if extra is not None:
                probs = 0.5 * (probs + extra)
        prediction = binarize(probs[0].permute(1, 2, 0), config.model.proto.mask_threshold)
        cm.accumulate(prediction, sample.mask)

        if export_dir is not None:
            source = resize_mask(prediction, dataset.source_size(index)).numpy()
            values = np.vectorize(inverse.get)(source).astype(np.uint16 if max(inverse.values()) > 255 else np.uint8)
            Image.fromarray(values).save(export_dir / "masks" / f"{sample.id}.png")
            Image.fromarray(_overlay(sample.image, prediction.numpy())).save(export_dir / "overlays" / f"{sample.id}.png")

    report = cm.summarize(include_background)
    logger.info(
        "Evaluated %d images of '%s': mDice %.4f mIoU %.4f mCPA %.4f",
        len(dataset),
        split_name,
        report.mdice,
        report.miou,
        report.mcpa,
    )
    return report


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Write model, heads, text branch, bank, optimizer and progress to one file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bank = None
    if state.bank is not None:
        bank = torch.frombuffer(bytearray(state.bank.to_bytes()), dtype=torch.uint8)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": __version__,
        "config": state.config.model_dump(mode="json"),
        "config_hash": state.config.config_hash(),
        "model_hash": state.config.model_hash(),
        "class_names": state.class_names,
        "model": state.model.state_dict(),
        "text": state.text.state_dict() if state.text is not None else None,
        "visual_head": state.visual_head.state_dict() if state.visual_head is not None else None,
        "text_head": state.text_head.state_dict() if state.text_head is not None else None,
        "bank": bank,
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "best_mdice": state.best_mdice,
        "history": state.history,
        "prompt_hashes": state.prompt_hashes,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, config: RunConfig | None = None) -> TrainState:
    """
    Rebuild a TrainState from a checkpoint.

    Args:
        path: Checkpoint file
        config: Run configuration to resume under; defaults to the stored one. Its
            model geometry must match the checkpoint.

    Raises:
        ConfigError: If the file is unreadable or the geometry differs
    """
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as e:
        raise ConfigError(f"Cannot load checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        found = payload.get("format") if isinstance(payload, dict) else type(payload).__name__
        raise ConfigError(f"Unsupported checkpoint format {found!r}")
    stored = RunConfig.from_dict(payload["config"])
    config = config or stored
    if config.model_hash() != payload["model_hash"]:
        raise ConfigError(f"Checkpoint {path} was trained with a different model geometry")

    text_base = payload["text"]["base"] if payload["text"] is not None else None
    state = build_state(config, payload["class_names"], text_base=text_base)
    state.model.load_state_dict(payload["model"])
    if state.text is not None and payload["text"] is not None:
        state.text.load_state_dict(payload["text"])
    if state.visual_head is not None and payload["visual_head"] is not None:
        state.visual_head.load_state_dict(payload["visual_head"])
    if state.text_head is not None and payload["text_head"] is not None:
        state.text_head.load_state_dict(payload["text_head"])
    if payload["bank"] is not None:
        state.bank = PrototypeBank.from_bytes(payload["bank"].numpy().tobytes())
    state.optimizer.load_state_dict(payload["optimizer"])
    state.epoch = int(payload["epoch"])
    state.step = int(payload["step"])
    state.best_mdice = float(payload["best_mdice"])
    state.history = list(payload["history"])
    state.prompt_hashes = dict(payload["prompt_hashes"])
    return state


def _prepare_manifest(config: RunConfig, manifest: DatasetManifest | None) -> DatasetManifest:
    if manifest is None:
        if not config.data.manifest:
            raise DataError("No dataset manifest configured (data.manifest)")
        manifest = load_manifest(config.data.manifest)
    if not manifest.by_split("train_labeled"):
        manifest = split(manifest, config.data.labeled_fraction, config.seed, config.data.test_fraction)
    if manifest.num_classes != config.model.decoder.num_classes:
        raise ConfigError(
            f"Dataset has {manifest.num_classes} classes, model is configured for {config.model.decoder.num_classes}"
        )
    return manifest


def _write_run_info(state: TrainState, manifest: DatasetManifest, output_dir: Path) -> None:
    text = state.config.model.text
    info = {
        "version": __version__,
        "config": state.config.model_dump(mode="json"),
        "config_hash": state.config.config_hash(),
        "model_hash": state.config.model_hash(),
        "manifest_hash": manifest.manifest_hash(),
        "splits": manifest.counts(),
        "prompt_tag": text.tag if text.enabled else None,
        "num_prototypes": state.num_prototypes,
        "coop_tokens": text.coop_tokens if text.enabled else None,
        "prompt_hashes": state.prompt_hashes,
    }
    (output_dir / "run.json").write_text(json.dumps(info, indent=2), encoding="utf-8")


def _record_epoch(state: TrainState, report: MetricReport, retention: float, output_dir: Path) -> None:
    entry = {"epoch": state.epoch, "step": state.step, "mean_retention": retention, **report.model_dump(mode="json")}
    state.history.append(entry)
    (output_dir / "metrics.json").write_text(json.dumps(state.history, indent=2), encoding="utf-8")


def fit(
    config: RunConfig,
    manifest: DatasetManifest | None = None,
    resume: str | Path | None = None,
) -> FitResult:
    """
    Train for config.epochs (or config.max_steps), evaluating on config.eval_split after
    every epoch and keeping best.pt (highest mDice) and last.pt in config.output_dir.

    epochs=0 evaluates the freshly initialized model.

    Raises:
        ConfigError: Invalid prompts, adapters or checkpoint
        DataError: Missing, empty or unsplittable dataset
        NumericAbort: Non-finite loss during training
    """
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    manifest = _prepare_manifest(config, manifest)
    size = config.model.encoder.input_size
    labeled = SegmentationDataset(manifest, "train_labeled", size, config.data.cache_size)
    unlabeled_ds = SegmentationDataset(manifest, "train_unlabeled", size, config.data.cache_size)
    if len(labeled) == 0:
        raise DataError("No labeled training images")
    if not manifest.by_split(config.eval_split):
        raise DataError(f"Evaluation split '{config.eval_split}' is empty")
    unlabeled = unlabeled_ds if len(unlabeled_ds) else None

    state = load_checkpoint(resume, config) if resume else build_state(config)
    planned = plan_steps(config, len(labeled))
    state.planned_steps = planned

    log_path = output_dir / "log.jsonl"
    if not resume:
        log_path.write_text("", encoding="utf-8")
        (output_dir / "augment.jsonl").unlink(missing_ok=True)
    _write_run_info(state, manifest, output_dir)
    logger.info(
        "Training %s: %d labeled, %d unlabeled, %d planned steps", manifest.name, len(labeled), len(unlabeled_ds), planned
    )

    best = output_dir / "best.pt"
    last = output_dir / "last.pt"
    retentions: list[float] = []

    if config.epochs == 0:
        report = evaluate(state, manifest, config.eval_split)
        _record_epoch(state, report, 0.0, output_dir)
        state.best_mdice = report.mdice
        save_checkpoint(state, last)
        save_checkpoint(state, best)

    proto_cfg = config.model.proto
    wants_prototypes = proto_cfg.enabled or config.model.text.enabled
    epochs = tqdm(range(state.epoch, config.epochs), desc="epochs", disable=not config.progress, initial=state.epoch)
    for epoch in epochs:
        if state.step >= planned:
            break
        state.epoch = epoch
        use_prototypes = wants_prototypes and epoch >= proto_cfg.warmup_epochs
        if use_prototypes and proto_cfg.enabled and state.bank is None:
            state.bank = initialize_bank(state, labeled)

        jobs = schedule_epoch(epoch, len(labeled), len(unlabeled_ds), config.batch_size, config.seed)
        remaining = planned - state.step
        loader = PrefetchLoader(
            jobs[:remaining],
            lambda job: prepare_step(job, labeled, unlabeled, config),
            depth=config.data.prefetch,
        )
        epoch_retention: list[float] = []
        with open(log_path, "a", encoding="utf-8") as log:
            for inputs in loader:
                try:
                    state, report = train_step(state, inputs.labeled, inputs.unlabeled, use_prototypes)
                except MPAMatchError:
                    loader.stop()
                    raise
                log.write(report.model_dump_json() + "\n")
                if inputs.unlabeled is not None:
                    epoch_retention.append(report.retention)
                    if config.augment.dump_records:
                        write_records(output_dir / "augment.jsonl", inputs.unlabeled.records)

        retention = float(np.mean(epoch_retention)) if epoch_retention else 0.0
        retentions.extend(epoch_retention)
        report = evaluate(state, manifest, config.eval_split)
        state.epoch = epoch + 1
        _record_epoch(state, report, retention, output_dir)
        logger.info("Epoch %d/%d: mDice %.4f retention %.3f", epoch + 1, config.epochs, report.mdice, retention)
        if report.mdice > state.best_mdice:
            state.best_mdice = report.mdice
            save_checkpoint(state, best)
        save_checkpoint(state, last)

    if config.export_masks and best.exists():
        export_state = load_checkpoint(best, config)
        export_report = evaluate(export_state, manifest, config.eval_split, output_dir / "predictions")
        write_report(export_report, output_dir / "predictions" / "report.json")

    return FitResult(
        best_checkpoint=str(best) if best.exists() else None,
        last_checkpoint=str(last) if last.exists() else None,
        best_mdice=max(state.best_mdice, 0.0),
        history=state.history,
        mean_retention=float(np.mean(retentions)) if retentions else 0.0,
        steps=state.step,
    )


def evaluate_checkpoint(
    checkpoint: str | Path,
    manifest: DatasetManifest | str | Path | None = None,
    split_name: str = "test",
    export_dir: str | Path | None = None,
    include_background: bool = True,
) -> MetricReport:
    """Load a checkpoint and evaluate it; the manifest defaults to the one in its config."""
    state = load_checkpoint(checkpoint)
    if manifest is None or isinstance(manifest, (str, Path)):
        manifest = _prepare_manifest(
            state.config if manifest is None else state.config.with_overrides({"data.manifest": str(manifest)}),
            None,
        )
    elif not manifest.by_split("train_labeled"):
        manifest = _prepare_manifest(state.config, manifest)
    return evaluate(state, manifest, split_name, export_dir, include_background)

