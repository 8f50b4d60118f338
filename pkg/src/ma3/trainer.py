"""The min-max episodic training loop.

Per training step, from one shared forward pass:

1. the adversary predicts warp parameters for every support image,
2. STN dropout replaces a fraction of the predicted matrices with the exact
   identity (those images bypass resampling entirely, which keeps the
   degenerate dropout=1.0 run bit-identical to the no-augmentation
   baseline),
3. support images are warped; query images are never touched,
4. the classifier loss L is computed on the queries given the warped
   support,
5. the classifier descends L; the adversary ascends L - lambda * sum of
   identity deviations of the (post-dropout) matrices.  Both gradients come
   from the same forward pass; the classifier update is applied first.

Determinism: every stochastic choice draws from a named stream derived from
the master seed (data, classifier init, adversary init, dropout, random
augmentation, validation episodes).  Streams are only consumed by the modes
that need them, so e.g. the baseline and the adversarial run sample
identical episode sequences.  Two runs with the same config produce
identical metrics streams; evaluation never mutates any state.

Wall-clock timing is kept on the in-memory record only; the canonical
metrics JSONL contains no volatile fields so reruns are byte-identical.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .adversary import (
    AdversaryBounds,
    deltas_to_affine_backward,
    deltas_to_affine_batch,
    params_to_affine_backward,
    params_to_affine_batch,
    predict_params_backward,
    predict_params_batch,
    stn_dropout,
)
from .data import ClassDataset, Episode, SplitSpec, sample_episode
from .errors import ConfigError, NonFiniteLossError
from .fewshot import (
    compute_prototypes,
    cosine_backward,
    cosine_loss,
    episode_accuracy,
    protonet_backward,
    protonet_loss,
    prototypes_backward,
)
from .geometry import identity_reg_loss
from .nn import Adam, AdversaryNet, EmbeddingNet
from .sampler import affine_grid_batch, grid_grad_to_affine, warp_backward_batch, warp_forward

MODES = ("baseline", "standard-aug", "ma3", "ma3-lambda0")

# Fixed tags for the named RNG streams derived from the master seed.
_STREAM_DATA = 1
_STREAM_CLS_INIT = 2
_STREAM_ADV_INIT = 3
_STREAM_DROPOUT = 4
_STREAM_AUG = 5
_STREAM_VAL = 6
_STREAM_EVAL = 7

_IDENTITY = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def stream_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


@dataclass
class TrainConfig:
    """Every run-defining scalar.  Defaults suit the desk-scale synthetic
    task; the directory-dataset defaults live in the CLI config layer."""

    n_way: int = 5
    k_shot: int = 1
    q_query: int = 5
    episodes: int = 1000
    eval_every: int = 0  # 0 = never validate mid-run
    val_episodes: int = 200
    lam: float = 1.0
    dropout_rate: float = 0.5
    theta0: float = math.pi
    eps_s: float = 0.1
    trans_frac: float = 0.1
    lr_cls: float = 1e-3
    lr_adv: float = 1e-3
    lr_halflife: int = 2000
    blocks: int = 2
    filters: int = 32
    h_dim: int = 64
    adv_filters: int = 16
    adversary_form: str = "pose"  # "pose" (theta, s, px, py) or "delta" (six entries)
    delta_max: float = 0.2
    head: str = "euclid"  # or "cosine"
    cosine_tau: float = 10.0
    seed: int = 0
    precision: str = "float64"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1], got {self.dropout_rate}")
        if self.episodes <= 0:
            raise ConfigError(f"episodes must be > 0, got {self.episodes}")
        if self.lr_cls <= 0 or self.lr_adv <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.head not in ("euclid", "cosine"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.adversary_form not in ("pose", "delta"):
            raise ConfigError(f"unknown adversary_form {self.adversary_form!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32|float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)


@dataclass
class MetricsRecord:
    episode: int
    loss: float
    reg_sum: float
    adv_objective: float
    train_acc: float
    lam: float
    seed: int
    val_acc: float | None = None
    wall_ms: float = 0.0


def metrics_json_line(rec: MetricsRecord) -> str:
    """Canonical serialization; excludes wall-clock so identical runs yield
    byte-identical files."""
    d = asdict(rec)
    d.pop("wall_ms")
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def write_metrics(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(metrics_json_line(rec) + "\n")


def _head_forward(head, tau, query_emb, labels, protos):
    if head == "euclid":
        loss, probs, cache = protonet_loss(query_emb, labels, protos)
        return loss, probs, ("euclid", cache)
    loss, probs, cache = cosine_loss(query_emb, labels, protos, tau=tau)
    return loss, probs, ("cosine", cache)


def _head_backward(tagged_cache):
    kind, cache = tagged_cache
    return protonet_backward(cache) if kind == "euclid" else cosine_backward(cache)


class EpisodeTrainer:
    """Owns the nets, optimizers and RNG streams of one training run."""

    def __init__(self, config: TrainConfig, dataset: ClassDataset, splits: SplitSpec, mode: str):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.config = config
        self.dataset = dataset
        self.splits = splits
        self.mode = mode
        self.lam = 0.0 if mode == "ma3-lambda0" else config.lam
        self.adversarial = mode in ("ma3", "ma3-lambda0")
        dataset.check_episode_capacity(config.k_shot, config.q_query)

        H, W = dataset.image_hw
        self.bounds = AdversaryBounds.for_image(
            H, W, theta0=config.theta0, eps_s=config.eps_s, trans_frac=config.trans_frac
        )
        dtype = config.dtype
        self.cls_net = EmbeddingNet(
            (H, W),
            blocks=config.blocks,
            filters=config.filters,
            h_dim=config.h_dim,
            rng=stream_rng(config.seed, _STREAM_CLS_INIT),
            dtype=dtype,
        )
        self.cls_opt = Adam(self.cls_net.params, lr=config.lr_cls)
        self.adv_net = None
        self.adv_opt = None
        if self.adversarial:
            n_out = 4 if config.adversary_form == "pose" else 6
            self.adv_net = AdversaryNet(
                (H, W),
                filters=config.adv_filters,
                n_out=n_out,
                rng=stream_rng(config.seed, _STREAM_ADV_INIT),
                dtype=dtype,
            )
            self.adv_opt = Adam(self.adv_net.params, lr=config.lr_adv)
        self.rng_data = stream_rng(config.seed, _STREAM_DATA)
        self.rng_dropout = stream_rng(config.seed, _STREAM_DROPOUT)
        self.rng_aug = stream_rng(config.seed, _STREAM_AUG)
        self.episode_idx = 0
        self.probe = None  # test hook: called with the step's tensors

    # ------------------------------------------------------------ episodes

    def sample_train_episode(self) -> Episode:
        c = self.config
        return sample_episode(
            self.dataset, self.splits.train, c.n_way, c.k_shot, c.q_query, self.rng_data
        )

    # ---------------------------------------------------------------- step

    def _predict_support_matrices(self, sx):
        """Mode-specific support matrices.  Returns (A0, caches) where A0 is
        pre-dropout; caches is None when no gradient path exists."""
        c = self.config
        n = sx.shape[0]
        H, W = self.dataset.image_hw
        if self.mode == "baseline":
            return None, None
        if self.mode == "standard-aug":
            u = self.rng_aug.uniform(0.0, 1.0, size=(n, 4)).astype(sx.dtype)
            params = np.empty_like(u)
            params[:, 0] = (2.0 * u[:, 0] - 1.0) * self.bounds.theta0
            params[:, 1] = 1.0 + (2.0 * u[:, 1] - 1.0) * self.bounds.eps_s
            params[:, 2] = (2.0 * u[:, 2] - 1.0) * self.bounds.T
            params[:, 3] = (2.0 * u[:, 3] - 1.0) * self.bounds.T
            A0, _ = params_to_affine_batch(params, H, W)
            return A0, None
        if c.adversary_form == "pose":
            params, pcache = predict_params_batch(self.adv_net, sx, self.bounds)
            A0, acache = params_to_affine_batch(params, H, W)
            return A0, ("pose", pcache, acache)
        raw, net_cache = self.adv_net.forward(sx)
        A0, dcache = deltas_to_affine_batch(raw, c.delta_max)
        return A0, ("delta", net_cache, dcache)

    def _adversary_param_grads(self, dA, caches):
        """Chain a per-matrix gradient back to adversary parameter grads."""
        kind = caches[0]
        if kind == "pose":
            _, pcache, acache = caches
            dparams = params_to_affine_backward(dA, acache)
            _, grads = predict_params_backward(self.adv_net, dparams, pcache)
            return grads
        _, net_cache, dcache = caches
        draw = deltas_to_affine_backward(dA, dcache)
        _, grads = self.adv_net.backward(draw, net_cache)
        return grads

    def step(self, episode: Episode, update_cls: bool = True, update_adv: bool = True) -> MetricsRecord:
        t0 = time.perf_counter()
        c = self.config
        dtype = c.dtype
        H, W = self.dataset.image_hw
        n = episode.support_x.shape[0]
        sx = episode.support_x[:, None].astype(dtype)
        qx = episode.query_x[:, None].astype(dtype)

        # (1) predict matrices, (2) dropout, (3) warp support only.
        A0, adv_caches = self._predict_support_matrices(sx)
        reg_sum = 0.0
        warp_cache = None
        keep = None
        if A0 is None:
            warped = sx
        else:
            A, dropped = stn_dropout(A0, c.dropout_rate, self.rng_dropout)
            if self.adversarial:
                # dropped matrices are constants; everything else keeps its
                # gradient path even if it happens to equal the identity
                keep = ~dropped
            else:
                keep = ~dropped & ~(A == _IDENTITY.astype(A.dtype)).all(axis=(1, 2))
            warped = sx.copy()
            if keep.any():
                grids = affine_grid_batch(A[keep], H, W)
                out, warp_cache = warp_forward(sx[keep], grids)
                warped[keep] = out
            reg_sum = float(sum(identity_reg_loss(m) for m in A))

        # (4) classifier loss on the untouched queries.
        x_all = np.concatenate([warped, qx], axis=0)
        emb, cls_cache = self.cls_net.forward(x_all, train=True)
        sup_emb, qry_emb = emb[:n], emb[n:]
        protos = compute_prototypes(sup_emb, episode.support_y, c.n_way)
        loss, probs, head_cache = _head_forward(c.head, c.cosine_tau, qry_emb, episode.query_y, protos)
        if not np.isfinite(loss):
            raise NonFiniteLossError(
                self.episode_idx, f"non-finite loss at episode {self.episode_idx}: {loss}"
            )
        train_acc = episode_accuracy(probs, episode.query_y)
        adv_objective = float(loss - self.lam * reg_sum)

        if self.probe is not None:
            self.probe(
                {"support": warped, "query": qx, "matrices": A0, "loss": loss, "keep": keep}
            )

        # Shared backward: gradients for both players from this one pass.
        dquery, dprotos = _head_backward(head_cache)
        dsup = prototypes_backward(dprotos, episode.support_y, c.n_way)
        demb = np.concatenate([dsup, dquery], axis=0)
        dx_all, cls_grads = self.cls_net.backward(demb, cls_cache)

        adv_grads = None
        if self.adversarial and update_adv:
            dA = np.zeros_like(A0)
            if keep is not None and keep.any():
                _, dgrids = warp_backward_batch(dx_all[:n][keep], warp_cache)
                dA[keep] = grid_grad_to_affine(dgrids)
            # Ascend loss - lam * reg  ==  descend -loss + lam * reg.
            seed_dA = -dA
            if keep is not None:
                seed_dA[keep] += self.lam * 2.0 * (A0[keep] - _IDENTITY.astype(A0.dtype))
            adv_grads = self._adversary_param_grads(seed_dA, adv_caches)

        # (5) classifier step first, (6) then the adversary's ascent step.
        if update_cls:
            lr = c.lr_cls * 0.5 ** (self.episode_idx // c.lr_halflife)
            self.cls_opt.step(self.cls_net.params, cls_grads, lr=lr)
        if adv_grads is not None:
            self.adv_opt.step(self.adv_net.params, adv_grads, lr=c.lr_adv)

        rec = MetricsRecord(
            episode=self.episode_idx,
            loss=float(loss),
            reg_sum=reg_sum,
            adv_objective=adv_objective,
            train_acc=train_acc,
            lam=self.lam,
            seed=c.seed,
            wall_ms=(time.perf_counter() - t0) * 1e3,
        )
        self.episode_idx += 1
        return rec

    # ---------------------------------------------------------- validation

    def validate(self) -> float | None:
        """Accuracy on freshly sampled validation episodes; same episodes at
        every call (paired comparisons across training)."""
        c = self.config
        if len(self.splits.val) == 0:
            return None
        rng = stream_rng(c.seed, _STREAM_VAL)
        episodes = [
            sample_episode(self.dataset, self.splits.val, c.n_way, c.k_shot, c.q_query, rng)
            for _ in range(c.val_episodes)
        ]
        mean, _ = evaluate(self.cls_net, episodes, head=c.head, tau=c.cosine_tau)
        return mean


def evaluate(cls_net: EmbeddingNet, episodes, head: str = "euclid", tau: float = 10.0):
    """Mean episode accuracy with a 95% normal-approximation half-width.

    The augmenter is disabled: no warping of support or queries, batch norm
    uses running statistics, and nothing is updated.
    """
    if len(episodes) == 0:
        raise ValueError("need >= 1 evaluation episode")
    accs = []
    for ep in episodes:
        sx = ep.support_x[:, None].astype(cls_net.dtype)
        qx = ep.query_x[:, None].astype(cls_net.dtype)
        emb, _ = cls_net.forward(np.concatenate([sx, qx], axis=0), train=False)
        n = sx.shape[0]
        protos = compute_prototypes(emb[:n], ep.support_y, ep.n_way)
        _, probs, _ = _head_forward(head, tau, emb[n:], ep.query_y, protos)
        accs.append(episode_accuracy(probs, ep.query_y))
    accs = np.asarray(accs)
    mean = float(accs.mean())
    if len(accs) < 2:
        return mean, 0.0
    half = float(1.96 * accs.std(ddof=1) / math.sqrt(len(accs)))
    return mean, half


def sample_eval_episodes(
    dataset: ClassDataset, split, config: TrainConfig, n_episodes: int, seed: int | None = None
):
    """Deterministic evaluation episodes from the dedicated stream."""
    rng = stream_rng(config.seed if seed is None else seed, _STREAM_EVAL)
    return [
        sample_episode(dataset, split, config.n_way, config.k_shot, config.q_query, rng)
        for _ in range(n_episodes)
    ]


def run_training(
    config: TrainConfig,
    dataset: ClassDataset,
    splits: SplitSpec,
    mode: str,
    on_checkpoint=None,
    on_record=None,
) -> tuple:
    """Train for config.episodes episodes; returns (trainer, records).

    `on_record(rec)` fires per completed episode (after any validation), so
    callers can stream the metrics file; `on_checkpoint(trainer, episode)`
    fires every eval_every episodes and once more at the end.
    """
    trainer = EpisodeTrainer(config, dataset, splits, mode)
    records = []
    for ep in range(config.episodes):
        rec = trainer.step(trainer.sample_train_episode())
        if config.eval_every and (ep + 1) % config.eval_every == 0:
            rec.val_acc = trainer.validate()
            if on_checkpoint is not None:
                on_checkpoint(trainer, ep + 1)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    if on_checkpoint is not None:
        on_checkpoint(trainer, config.episodes)
    return trainer, records


def run_baseline(config: TrainConfig, dataset: ClassDataset, splits: SplitSpec, mode: str = "none"):
    """Comparison runs: `none` trains without any augmentation;
    `standard_aug` warps support with uniformly random in-bounds parameters."""
    cli_mode = {"none": "baseline", "standard_aug": "standard-aug"}.get(mode)
    if cli_mode is None:
        raise ConfigError(f"unknown baseline mode {mode!r}")
    return run_training(config, dataset, splits, cli_mode)


def lambda_search(
    config: TrainConfig,
    dataset: ClassDataset,
    splits: SplitSpec,
    coarse_grid=(1e-3, 1e-2, 1e-1, 1.0, 10.0),
):
    """Two-stage search: the coarse log-scale grid, then 5 linearly spaced
    values spanning the best coarse value's neighboring interval.  Returns
    (best_lambda, rows); ties go to the smaller lambda.
    """
    if len(coarse_grid) == 0:
        raise ConfigError("lambda grid must be nonempty")
    if len(splits.val) == 0:
        raise ConfigError("lambda search needs a validation split")

    evaluated: dict[float, float] = {}

    def run_for(lam: float) -> float:
        lam = float(lam)
        if lam not in evaluated:
            cfg = replace(config, lam=lam)
            trainer, _ = run_training(cfg, dataset, splits, "ma3")
            evaluated[lam] = trainer.validate()
        return evaluated[lam]

    rows = []
    for lam in coarse_grid:
        rows.append({"stage": 1, "lam": float(lam), "val_acc": run_for(lam)})
    best_idx = min(range(len(rows)), key=lambda i: (-rows[i]["val_acc"], rows[i]["lam"]))
    if len(coarse_grid) > 1:
        lo = float(coarse_grid[max(best_idx - 1, 0)])
        hi = float(coarse_grid[min(best_idx + 1, len(coarse_grid) - 1)])
        for lam in np.linspace(lo, hi, 5):
            rows.append({"stage": 2, "lam": float(lam), "val_acc": run_for(lam)})
    best = min(rows, key=lambda r: (-r["val_acc"], r["lam"]))
    return best["lam"], rows
