"""Two-stage training loop.

Each iteration runs a support stage and a query stage. The support stage
takes one (or more) plain gradient steps from the current parameters,
producing adapted parameters; the query stage evaluates the mixed loss
through the adapted parameters and applies that gradient back to the
original parameters (first-order update: the gradient at the adapted
point is used as-is, no second-order terms). Disabling the query stage
collapses the loop to ordinary single-stage SGD, and disabling the
pairing branch reduces the objective to the contrastive loss alone.

All randomness is derived from the config seed by stream: batch
sampling, per-clip augmentation, pair mixing, and negative selection
never share draws, so toggling one component cannot shift another.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .contrastive import ContrastiveConfig, FeatureBank, nce_loss, select_negatives
from .encoder import EncoderConfig, encode, init_encoder
from .meta_branch import HEAD_BIAS, HEAD_WEIGHT, bce_loss, classify, fcm_pairs, init_head
from .seeding import derive_seed, rng_for
from .synth import VIEW_RES, VIEW_RGB, Clip, CorpusSplit, make_view_pair

__all__ = [
    "TrainConfig",
    "BranchLosses",
    "RunRecord",
    "meta_loss",
    "compute_branch_losses",
    "inner_update",
    "meta_update",
    "train",
    "baseline_train",
    "first_order_meta_grad",
    "exact_meta_grad",
]

META_ORDERS = ("first-order", "exact-check")


@dataclass(frozen=True)
class TrainConfig:
    """Everything the training loop needs besides the data and encoder.

    ``lr_inner`` drives the support-stage step, ``lr_meta`` the update of
    the original parameters (and the single-stage step when the query
    stage is disabled). ``alpha`` mixes the pairing-branch loss into the
    objective; it only matters while ``use_bl`` is on. ``k`` zero means
    "all eligible negatives".
    """

    alpha: float = 0.2
    lr_inner: float = 0.1
    lr_meta: float = 0.1
    batch_size: int = 8
    epochs: int = 20
    iters_per_epoch: int = 0
    tau: float = 0.1
    k: int = 0
    meta_order: str = "first-order"
    seed: int = 0
    use_bl: bool = True
    use_meta_stages: bool = True
    bank_mode: str = "in-batch"
    bank_capacity: int = 512
    symmetric_nce: bool = True
    pair_policy: str = "derangement"
    mirrored_pairs: bool = False
    inner_steps: int = 1
    freeze_head_inner: bool = False
    eval_every: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lr_inner < 0.0 or self.lr_meta < 0.0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.iters_per_epoch < 0:
            raise ValueError(f"iters_per_epoch must be >= 0, got {self.iters_per_epoch}")
        if self.meta_order not in META_ORDERS:
            raise ValueError(f"meta_order must be one of {META_ORDERS}, got {self.meta_order!r}")
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.eval_every < 0:
            raise ValueError(f"eval_every must be >= 0, got {self.eval_every}")
        # delegate tau/k/bank_mode validation
        self.contrastive()

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(tau=self.tau, k=self.k, bank_mode=self.bank_mode)


@dataclass
class BranchLosses:
    """Both branch losses of one batch plus the embeddings that fed them."""

    l_contrast: ad.Node
    l_cls: ad.Node | None
    rgb_embeddings: list[tuple[int, ad.Node]]
    res_embeddings: list[tuple[int, ad.Node]]


def meta_loss(l_cls: ad.Node, l_contrast: ad.Node, alpha: float) -> ad.Node:
    """Mixed objective: alpha * pairing loss + (1 - alpha) * contrastive loss."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return ad.add(ad.mul(ad.as_node(l_cls), alpha), ad.mul(ad.as_node(l_contrast), 1.0 - alpha))


def _selection_bank(batch_rgb: list[tuple[int, ad.Node]],
                    batch_res: list[tuple[int, ad.Node]],
                    persistent: FeatureBank | None) -> FeatureBank:
    """The bank negatives are drawn from for one stage.

    In-batch mode: just the live batch embeddings, so gradients flow into
    negatives. Persistent mode: a snapshot of the persistent store plus
    the current batch, all detached; the store itself is mutated only
    between iterations.
    """
    if persistent is None:
        bank = FeatureBank(capacity=2 * len(batch_rgb))
        for clip_id, node in batch_rgb:
            bank.add(clip_id, VIEW_RGB, node)
        for clip_id, node in batch_res:
            bank.add(clip_id, VIEW_RES, node)
        return bank
    bank = FeatureBank(capacity=persistent.capacity + 2 * len(batch_rgb))
    for (clip_id, view_tag) in persistent.keys():
        bank.add(clip_id, view_tag, persistent._entries[(clip_id, view_tag)])
    for clip_id, node in batch_rgb:
        bank.add(clip_id, VIEW_RGB, node.detached())
    for clip_id, node in batch_res:
        bank.add(clip_id, VIEW_RES, node.detached())
    return bank


def compute_branch_losses(params: ad.ParamSet, enc_config: EncoderConfig,
                          clips: list[Clip] | tuple[Clip, ...], cfg: TrainConfig,
                          seed: int, bank: FeatureBank | None = None,
                          with_pairs: bool | None = None) -> BranchLosses:
    """Encode a batch once and compute both branch losses from it.

    One augmentation and one encoding per (clip, view) feed the
    contrastive loss and the pairing loss alike. ``with_pairs`` defaults
    to ``cfg.use_bl``; when false the pairing branch is skipped entirely
    and ``l_cls`` is None.
    """
    clips = list(clips)
    if len(clips) < 2:
        raise ValueError(f"need at least 2 clips in a batch, got {len(clips)}")
    if with_pairs is None:
        with_pairs = cfg.use_bl
    rgb_embeddings: list[tuple[int, ad.Node]] = []
    res_embeddings: list[tuple[int, ad.Node]] = []
    for clip in clips:
        pair = make_view_pair(clip, derive_seed(seed, "aug", clip.clip_id))
        rgb_embeddings.append((clip.clip_id, encode(params, enc_config, pair.rgb_view, VIEW_RGB)))
        res_embeddings.append((clip.clip_id, encode(params, enc_config, pair.res_view, VIEW_RES)))

    k = cfg.k if cfg.k > 0 else len(clips) - 1
    stage_bank = _selection_bank(rgb_embeddings, res_embeddings,
                                 bank if cfg.bank_mode == "persistent" else None)
    directions = [(VIEW_RGB, rgb_embeddings, res_embeddings)]
    if cfg.symmetric_nce:
        directions.append((VIEW_RES, res_embeddings, rgb_embeddings))
    per_direction: list[ad.Node] = []
    for direction_index, (anchor_tag, anchors, positives) in enumerate(directions):
        positive_by_id = dict(positives)
        terms = []
        for clip_id, anchor in anchors:
            negatives = select_negatives(stage_bank, clip_id, anchor_tag, k,
                                         derive_seed(seed, "neg", direction_index, clip_id))
            terms.append(nce_loss(anchor, positive_by_id[clip_id], negatives, cfg.tau))
        per_direction.append(ad.reduce_mean(ad.stack(terms)))
    if len(per_direction) == 2:
        l_contrast = ad.mul(ad.add(per_direction[0], per_direction[1]), 0.5)
    else:
        l_contrast = per_direction[0]

    l_cls = None
    if with_pairs:
        pairs = fcm_pairs(rgb_embeddings, res_embeddings, derive_seed(seed, "fcm"),
                          policy=cfg.pair_policy, mirrored=cfg.mirrored_pairs)
        probs = [classify(params, pair.feature) for pair in pairs]
        l_cls = bce_loss(probs, [pair.label for pair in pairs])
    return BranchLosses(l_contrast=l_contrast, l_cls=l_cls,
                        rgb_embeddings=rgb_embeddings, res_embeddings=res_embeddings)


def _objective(branch: BranchLosses, cfg: TrainConfig) -> ad.Node:
    if cfg.use_bl:
        return meta_loss(branch.l_cls, branch.l_contrast, cfg.alpha)
    return branch.l_contrast


def _stage_losses(branch: BranchLosses, objective: ad.Node, tag: str) -> dict[str, float]:
    row = {f"l_contrast_{tag}": branch.l_contrast.item()}
    if branch.l_cls is not None:
        row[f"l_cls_{tag}"] = branch.l_cls.item()
    row[f"l_meta_{tag}"] = objective.item()
    return row


def inner_update(params: ad.ParamSet, enc_config: EncoderConfig,
                 support_batch: list[Clip] | tuple[Clip, ...], cfg: TrainConfig,
                 seed: int, bank: FeatureBank | None = None
                 ) -> tuple[ad.ParamSet, dict[str, float], BranchLosses]:
    """Support stage: adapted parameters after ``cfg.inner_steps`` steps.

    Returns the adapted set (with provenance recorded so an exact
    meta-gradient can replay the stage), the support losses at the
    pre-update parameters, and the first step's branch outputs.
    """
    theta = params
    logged: dict[str, float] | None = None
    first_branch: BranchLosses | None = None
    for step in range(cfg.inner_steps):
        branch = compute_branch_losses(theta, enc_config, support_batch, cfg,
                                       derive_seed(seed, "step", step), bank)
        objective = _objective(branch, cfg)
        if logged is None:
            logged = _stage_losses(branch, objective, "sup")
            first_branch = branch
        grads = ad.backward(objective, theta)
        if cfg.freeze_head_inner:
            for name in (HEAD_WEIGHT, HEAD_BIAS):
                if name in grads:
                    grads[name] = np.zeros_like(grads[name])
        theta = ad.sgd_step(theta, grads, cfg.lr_inner)
    theta.provenance = {"seed": seed, "support_batch": tuple(support_batch)}
    return theta, logged, first_branch


def meta_update(params: ad.ParamSet, adapted: ad.ParamSet, enc_config: EncoderConfig,
                query_batch: list[Clip] | tuple[Clip, ...], cfg: TrainConfig,
                seed: int, bank: FeatureBank | None = None
                ) -> tuple[ad.ParamSet, dict[str, float], BranchLosses]:
    """Query stage: evaluate through the adapted parameters, step the originals.

    First-order by default: the gradient taken at the adapted point is
    applied directly to ``params``. With ``meta_order = "exact-check"``
    the full derivative through the support stage is computed by central
    differences instead (slow; for verification runs only).
    """
    branch = compute_branch_losses(adapted, enc_config, query_batch, cfg, seed, bank)
    objective = _objective(branch, cfg)
    if cfg.meta_order == "first-order":
        grads = ad.backward(objective, adapted)
    else:
        if adapted.provenance is None:
            raise ValueError("exact-check meta update needs adapted parameters from inner_update")
        grads = exact_meta_grad(params, enc_config,
                                list(adapted.provenance["support_batch"]), list(query_batch),
                                cfg, adapted.provenance["seed"], seed)
    new_params = ad.sgd_step(params, grads, cfg.lr_meta)
    return new_params, _stage_losses(branch, objective, "qry"), branch


def first_order_meta_grad(params: ad.ParamSet, enc_config: EncoderConfig,
                          support_batch: list[Clip], query_batch: list[Clip],
                          cfg: TrainConfig, inner_seed: int, query_seed: int
                          ) -> dict[str, np.ndarray]:
    """The gradient the first-order update applies, without stepping."""
    adapted, _, _ = inner_update(params, enc_config, support_batch, cfg, inner_seed)
    branch = compute_branch_losses(adapted, enc_config, query_batch, cfg, query_seed)
    return ad.backward(_objective(branch, cfg), adapted)


def exact_meta_grad(params: ad.ParamSet, enc_config: EncoderConfig,
                    support_batch: list[Clip], query_batch: list[Clip],
                    cfg: TrainConfig, inner_seed: int, query_seed: int,
                    eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of the full two-stage objective.

    Perturbs the original parameters, replays the support-stage update
    with identical seeds, and evaluates the query loss through the
    resulting adapted parameters. This is the reference the first-order
    approximation is checked against.
    """

    def composite(candidate: ad.ParamSet) -> float:
        adapted, _, _ = inner_update(candidate, enc_config, support_batch, cfg, inner_seed)
        branch = compute_branch_losses(adapted, enc_config, query_batch, cfg, query_seed)
        return _objective(branch, cfg).item()

    return ad.numeric_grad(composite, params, eps)


# ---------------------------------------------------------------------------
# run records and the outer loop


@dataclass
class RunRecord:
    """Everything one training run produced, minus the weights."""

    config: dict
    seed: int
    columns: tuple[str, ...]
    iterations: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    wall_time_s: float = 0.0

    def loss_log_text(self) -> str:
        """Line-per-iteration log with the resolved config in the header."""
        lines = [f"# {key} = {_fmt(self.config[key])}" for key in sorted(self.config)]
        lines.append("\t".join(("iteration", "epoch") + self.columns))
        for row in self.iterations:
            cells = [str(row["iteration"]), str(row["epoch"])]
            cells += [_fmt(row[name]) for name in self.columns]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _loss_columns(cfg: TrainConfig) -> tuple[str, ...]:
    tags = ["sup", "qry"] if cfg.use_meta_stages else ["sup"]
    columns: list[str] = []
    for tag in tags:
        columns.append(f"l_contrast_{tag}")
        if cfg.use_bl:
            columns.append(f"l_cls_{tag}")
        columns.append(f"l_meta_{tag}")
    return tuple(columns)


def _sample_batch(clips: tuple[Clip, ...], size: int, rng: np.random.Generator) -> list[Clip]:
    if size > len(clips):
        raise ValueError(f"batch size {size} exceeds split size {len(clips)}")
    chosen = rng.choice(len(clips), size=size, replace=False)
    return [clips[int(i)] for i in chosen]


def _auto_iters(cfg: TrainConfig, split: CorpusSplit) -> int:
    """Iterations per epoch: enough batches to cover the corpus once.

    The count is mode-independent so two-stage and single-stage runs of
    the same config apply the same number of parameter updates per epoch;
    a two-stage iteration simply consumes a support batch on top of the
    update-driving query batch.
    """
    if cfg.iters_per_epoch > 0:
        return cfg.iters_per_epoch
    pool = len(split.support) + len(split.query)
    return max(1, pool // cfg.batch_size)


def _deposit(bank: FeatureBank | None, branches: list[BranchLosses]) -> None:
    """Between-iteration bank refresh with detached embeddings."""
    if bank is None:
        return
    for branch in branches:
        for clip_id, node in branch.rgb_embeddings:
            bank.add(clip_id, VIEW_RGB, node.detached())
        for clip_id, node in branch.res_embeddings:
            bank.add(clip_id, VIEW_RES, node.detached())


def train(cfg: TrainConfig, enc_config: EncoderConfig, split: CorpusSplit
          ) -> tuple[ad.ParamSet, RunRecord]:
    """Run the full loop and return final parameters plus the run record."""
    started = time.perf_counter()
    seed = cfg.seed
    params = ad.ParamSet.merged(
        init_encoder(enc_config, derive_seed(seed, "init-encoder")),
        init_head(enc_config.embed_dim, derive_seed(seed, "init-head")),
    )
    bank = FeatureBank(cfg.bank_capacity) if cfg.bank_mode == "persistent" else None
    iters = _auto_iters(cfg, split)
    pool = split.support + split.query
    if cfg.use_meta_stages:
        if cfg.batch_size > min(len(split.support), len(split.query)):
            raise ValueError(
                f"batch size {cfg.batch_size} exceeds a split "
                f"(support {len(split.support)}, query {len(split.query)})"
            )
    elif cfg.batch_size > len(pool):
        raise ValueError(f"batch size {cfg.batch_size} exceeds the {len(pool)}-clip pool")

    record = RunRecord(config=config_echo(cfg, enc_config), seed=seed,
                       columns=_loss_columns(cfg))
    iteration = 0
    for epoch in range(cfg.epochs):
        for it in range(iters):
            if cfg.use_meta_stages:
                support_batch = _sample_batch(split.support, cfg.batch_size,
                                              rng_for(seed, "batch", 0, epoch, it))
                adapted, sup_losses, sup_branch = inner_update(
                    params, enc_config, support_batch, cfg,
                    derive_seed(seed, "stage", 0, epoch, it), bank)
                query_batch = _sample_batch(split.query, cfg.batch_size,
                                            rng_for(seed, "batch", 1, epoch, it))
                params, qry_losses, qry_branch = meta_update(
                    params, adapted, enc_config, query_batch, cfg,
                    derive_seed(seed, "stage", 1, epoch, it), bank)
                row = {**sup_losses, **qry_losses}
                _deposit(bank, [sup_branch, qry_branch])
            else:
                batch = _sample_batch(pool, cfg.batch_size,
                                      rng_for(seed, "batch", 0, epoch, it))
                branch = compute_branch_losses(params, enc_config, batch, cfg,
                                               derive_seed(seed, "stage", 0, epoch, it), bank)
                objective = _objective(branch, cfg)
                grads = ad.backward(objective, params)
                params = ad.sgd_step(params, grads, cfg.lr_meta)
                row = _stage_losses(branch, objective, "sup")
                _deposit(bank, [branch])
            bad = [name for name, value in row.items() if not np.isfinite(value)]
            if bad:
                raise ValueError(f"non-finite loss at iteration {iteration}: {bad}")
            record.iterations.append({"iteration": iteration, "epoch": epoch, **row})
            iteration += 1
        if cfg.eval_every > 0 and (epoch + 1) % cfg.eval_every == 0:
            record.evals.append({"epoch": epoch, **_eval_snapshot(params, enc_config, split)})
    record.wall_time_s = time.perf_counter() - started
    return params, record


def baseline_train(cfg: TrainConfig, enc_config: EncoderConfig, split: CorpusSplit
                   ) -> tuple[ad.ParamSet, RunRecord]:
    """Single-stage SGD on the contrastive loss over support plus query."""
    return train(replace(cfg, alpha=0.0, use_bl=False, use_meta_stages=False),
                 enc_config, split)


def _eval_snapshot(params: ad.ParamSet, enc_config: EncoderConfig,
                   split: CorpusSplit) -> dict[str, float]:
    from .evaluation import evaluate_split

    report = evaluate_split(params, enc_config, split)
    snapshot = {"probe_top1": report.probe_top1}
    for k, acc in report.retrieval.items():
        snapshot[f"retrieval_top{k}"] = acc
    return snapshot


def config_echo(cfg: TrainConfig, enc_config: EncoderConfig) -> dict:
    echo = {f"train.{key}": value for key, value in asdict(cfg).items()}
    enc = asdict(enc_config)
    enc["input_dims"] = "x".join(str(d) for d in enc_config.input_dims)
    echo.update({f"encoder.{key}": value for key, value in enc.items()})
    return echo
