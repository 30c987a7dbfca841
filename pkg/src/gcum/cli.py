"""Command-line entry point: reproducible runs from one JSON config.

Commands: ``gen-data``, ``train``, ``eval``, ``grad-check``, ``ablate``.
Every run is a pure function of (config, seed); every artifact written to
disk embeds the config echo and the tool version.

Exit codes: 0 ok, 2 config error, 3 I/O or artifact format error,
4 missing checkpoint, 5 non-finite loss, 6 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

# Thread cap; must land in the environment before numpy starts its pools,
# which is why it sits above the imports.  Already-set variables win.
_threads = os.environ.get("GCUM_THREADS")
if _threads and _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from . import diffcore as dc
from .diffcore import Tensor
from . import gla, grce
from . import losses as losses_mod
from .encoders import (
    STAGE1_TRAINABLE,
    STAGE2_TRAINABLE,
    CheckpointError,
    ModelConfig,
    init_model_state,
    save_checkpoint,
    state_from_checkpoint,
)
from .evaluation import evaluate, format_ablation_table, run_ablation
from .mvs import Mask, MvsConfig, full_mask
from .synthdata import (
    Dataset,
    DatasetFormatError,
    GenConfig,
    dataset_to_doc,
    generate_dataset,
    load_dataset,
    split_train_test,
)
from .trainer import TrainConfig, train_stage1, train_stage2

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CHECKPOINT = 4
EXIT_NONFINITE = 5
EXIT_GRADCHECK = 6


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# Run configuration

# Training defaults here are the desk-scale recipe: the schedule keeps the
# reference shape (warmup 1/8 of the run, two factor-0.1 drops) but the
# rates are raised and the run compressed, since the reference rates are
# sized for large pretrained backbones and move nothing at this scale.
_TRAIN_DEFAULTS = dict(
    warmup_epochs=10,
    lr_start=1e-3,
    lr_peak=3e-2,
    decay_epochs=(30, 50),
    decay_factor=0.1,
    total_epochs=80,
    batch_size=8,
    p_groups=4,
    q_views=2,
    momentum=0.8,
    weight_decay=1e-4,
    scale_factor=0.25,
)

_DATA_DEFAULTS = dict(
    n_group_identities=40,
    members_min=2,
    n_cameras=2,
    views_per_group_per_camera=2,
    membership_dropout_prob=0.3,
    layout_permutation=True,
    appearance_noise_std=0.1,
    camera_bias_std=0.2,
    train_fraction=0.7,
)

_TOP_KEYS = {"seed", "dim", "d_a", "M0", "K", "tokens_per_identity",
             "mvs", "gla", "losses", "train", "data"}
_MVS_KEYS = {"enabled", "mu", "sigma", "p0", "pmax"}
_GLA_KEYS = {"enabled"}
_LOSS_KEYS = {"alpha", "epsilon"}
_TRAIN_KEYS = set(_TRAIN_DEFAULTS)
_DATA_KEYS = set(_DATA_DEFAULTS)


def _check_keys(doc: dict, allowed: set, where: str) -> None:
    if not isinstance(doc, dict):
        raise ValueError(f"{where} must be a JSON object")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ValueError(f"unknown {where} keys: {', '.join(unknown)}")


@dataclass(frozen=True)
class RunConfig:
    """One experiment: data, model widths, module toggles, training recipe.

    ``M0`` is the largest group size anywhere in the run and ``K`` the
    number of identity slots in the group text description; both feed the
    generator and the model so the two cannot drift apart.
    """

    seed: int = 0
    dim: int = 48
    d_a: int = 32
    m0: int = 6                       # JSON key "M0"
    k_slots: int = 6                  # JSON key "K"
    tokens_per_identity: int = 4
    gla_enabled: bool = True
    mvs_enabled: bool = True
    mvs: MvsConfig = field(default_factory=MvsConfig)
    alpha: float = 0.3
    epsilon: float = 0.1
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**_TRAIN_DEFAULTS))
    n_group_identities: int = 40
    members_min: int = 2
    n_cameras: int = 2
    views_per_group_per_camera: int = 2
    membership_dropout_prob: float = 0.3
    layout_permutation: bool = True
    appearance_noise_std: float = 0.1
    camera_bias_std: float = 0.2
    train_fraction: float = 0.7

    def validate(self) -> None:
        if self.m0 < 2:
            raise ValueError("M0 must be at least 2: groups need two members")
        if self.k_slots < self.m0:
            raise ValueError("K must cover M0 identity slots")
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError("train_fraction must lie strictly between 0 and 1")
        if not (0.0 <= self.epsilon < 1.0):
            raise ValueError("label smoothing epsilon must lie in [0, 1)")
        if self.alpha < 0:
            raise ValueError("triplet margin alpha must be non-negative")
        self.mvs.validate()
        self.gen_config().validate()
        self.model_base().validate()
        self.train_config(1).validate()

    # resolved component configs -------------------------------------------

    def gen_config(self) -> GenConfig:
        return GenConfig(
            n_group_identities=self.n_group_identities,
            members_min=self.members_min,
            members_max=self.m0,
            n_cameras=self.n_cameras,
            views_per_group_per_camera=self.views_per_group_per_camera,
            membership_dropout_prob=self.membership_dropout_prob,
            layout_permutation=self.layout_permutation,
            appearance_noise_std=self.appearance_noise_std,
            camera_bias_std=self.camera_bias_std,
            d_a=self.d_a,
        )

    def model_base(self) -> ModelConfig:
        # identity and class counts are placeholders until a dataset is known
        return ModelConfig(
            dim=self.dim,
            d_a=self.d_a,
            max_members=self.m0,
            group_slots=self.k_slots,
            tokens_per_identity=self.tokens_per_identity,
            n_person_ids=1,
            n_group_classes=1,
        )

    def model_config(self, ds: Dataset, n_group_classes: int) -> ModelConfig:
        return replace(
            self.model_base(),
            n_person_ids=max(ds.person_ids()) + 1,
            n_group_classes=n_group_classes,
        )

    def train_config(self, stage: int) -> TrainConfig:
        return TrainConfig(seed=self.seed, stage=stage, **self._train_fields())

    def _train_fields(self) -> dict:
        return {k: getattr(self.train, k) for k in _TRAIN_KEYS}

    # JSON round trip --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "dim": self.dim,
            "d_a": self.d_a,
            "M0": self.m0,
            "K": self.k_slots,
            "tokens_per_identity": self.tokens_per_identity,
            "mvs": {
                "enabled": self.mvs_enabled,
                "mu": self.mvs.mu,
                "sigma": self.mvs.sigma,
                "p0": self.mvs.p0,
                "pmax": self.mvs.pmax,
            },
            "gla": {"enabled": self.gla_enabled},
            "losses": {"alpha": self.alpha, "epsilon": self.epsilon},
            "train": {
                k: (list(v) if isinstance(v := getattr(self.train, k), tuple) else v)
                for k in sorted(_TRAIN_KEYS)
            },
            "data": {
                "n_group_identities": self.n_group_identities,
                "members_min": self.members_min,
                "n_cameras": self.n_cameras,
                "views_per_group_per_camera": self.views_per_group_per_camera,
                "membership_dropout_prob": self.membership_dropout_prob,
                "layout_permutation": self.layout_permutation,
                "appearance_noise_std": self.appearance_noise_std,
                "camera_bias_std": self.camera_bias_std,
                "train_fraction": self.train_fraction,
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        _check_keys(doc, _TOP_KEYS, "config")
        mvs_doc = dict(doc.get("mvs", {}))
        _check_keys(mvs_doc, _MVS_KEYS, "config.mvs")
        gla_doc = dict(doc.get("gla", {}))
        _check_keys(gla_doc, _GLA_KEYS, "config.gla")
        loss_doc = dict(doc.get("losses", {}))
        _check_keys(loss_doc, _LOSS_KEYS, "config.losses")
        train_doc = dict(doc.get("train", {}))
        _check_keys(train_doc, _TRAIN_KEYS, "config.train")
        data_doc = dict(doc.get("data", {}))
        _check_keys(data_doc, _DATA_KEYS, "config.data")

        mvs_defaults = MvsConfig()
        mvs_cfg = MvsConfig(
            mu=float(mvs_doc.get("mu", mvs_defaults.mu)),
            sigma=float(mvs_doc.get("sigma", mvs_defaults.sigma)),
            p0=float(mvs_doc.get("p0", mvs_defaults.p0)),
            pmax=float(mvs_doc.get("pmax", mvs_defaults.pmax)),
        )
        train_fields = dict(_TRAIN_DEFAULTS)
        train_fields.update(train_doc)
        train_fields["decay_epochs"] = tuple(int(e) for e in train_fields["decay_epochs"])
        data_fields = dict(_DATA_DEFAULTS)
        data_fields.update(data_doc)

        cfg = cls(
            seed=int(doc.get("seed", 0)),
            dim=int(doc.get("dim", 48)),
            d_a=int(doc.get("d_a", 32)),
            m0=int(doc.get("M0", 6)),
            k_slots=int(doc.get("K", 6)),
            tokens_per_identity=int(doc.get("tokens_per_identity", 4)),
            gla_enabled=bool(gla_doc.get("enabled", True)),
            mvs_enabled=bool(mvs_doc.get("enabled", True)),
            mvs=mvs_cfg,
            alpha=float(loss_doc.get("alpha", 0.3)),
            epsilon=float(loss_doc.get("epsilon", 0.1)),
            train=TrainConfig(**train_fields),
            n_group_identities=int(data_fields["n_group_identities"]),
            members_min=int(data_fields["members_min"]),
            n_cameras=int(data_fields["n_cameras"]),
            views_per_group_per_camera=int(data_fields["views_per_group_per_camera"]),
            membership_dropout_prob=float(data_fields["membership_dropout_prob"]),
            layout_permutation=bool(data_fields["layout_permutation"]),
            appearance_noise_std=float(data_fields["appearance_noise_std"]),
            camera_bias_std=float(data_fields["camera_bias_std"]),
            train_fraction=float(data_fields["train_fraction"]),
        )
        cfg.validate()
        return cfg


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot read config {path}: {e}") from e
    try:
        doc = json.loads(text)
        return RunConfig.from_dict(doc)
    except (ValueError, TypeError) as e:
        raise CliError(EXIT_CONFIG, f"bad config {path}: {e}") from e


# --------------------------------------------------------------------------
# Gradient verification harness

_CHECKED_LOSSES = ("stage1_contrastive", "identity", "triplet", "image_text", "stage2_total")


def run_grad_checks(seed: int, *, step: float = 1e-5, tolerance: float = 1e-4) -> dict:
    """Finite-difference sweep of every loss against its trainable set.

    Runs on a deliberately tiny instance (three 3-member groups, width 4)
    so the entry-by-entry sweep stays fast.  Masks are fixed: alternating
    samples drop their last member, which exercises the dropped-row paths
    while the full-mask samples cover every count-matrix row.
    """
    gen = GenConfig(
        n_group_identities=3,
        members_min=3,
        members_max=3,
        membership_dropout_prob=0.0,
        appearance_noise_std=0.2,
        camera_bias_std=0.1,
        d_a=4,
    )
    ds = generate_dataset(gen, seed=seed)
    model_cfg = ModelConfig(
        dim=4,
        d_a=4,
        max_members=3,
        group_slots=3,
        tokens_per_identity=2,
        n_person_ids=max(ds.person_ids()) + 1,
        n_group_classes=len(ds.group_ids()),
    )
    state = init_model_state(model_cfg, seed=seed + 1)
    # At the 0.02-std init the loss is nearly flat through the refinement
    # head, so its finite differences drown in roundoff.  Move those
    # parameters to O(1) magnitudes: the check must run where gradients
    # are measurable.
    bump = np.random.default_rng(seed + 2)
    state = state.with_params({
        name: Tensor(bump.normal(scale=0.5, size=state.params[name].shape),
                     requires_grad=True, _copy=False)
        for name in STAGE2_TRAINABLE
    })
    rosters = ds.group_rosters()

    by_group: dict[int, list] = {}
    for s in ds.samples:
        by_group.setdefault(s.group_id, []).append(s)
    gids = sorted(by_group)[:2]
    samples = [by_group[g][v] for g in gids for v in range(2)]
    masks = [
        full_mask(len(s.members)) if i % 2 else Mask(tuple([1] * (len(s.members) - 1) + [0]))
        for i, s in enumerate(samples)
    ]
    labels = [s.group_id for s in samples]
    class_index = {g: i for i, g in enumerate(gids)}
    text_rows = dc.constant(gla.class_text_features(state, gids, rosters).values)

    def _mean(terms):
        acc = terms[0]
        for t in terms[1:]:
            acc = dc.add(acc, t)
        return dc.scale(acc, 1.0 / len(terms))

    def _refined(st):
        rows = []
        for s, m in zip(samples, masks):
            v, feats, _ = grce.group_visual(s, st, m, quantity=True)
            rows.append(grce.refine(v, feats, st))
        return rows

    def stage1_fn(st):
        return gla.stage1_batch_loss(samples, masks, st, rosters)[0]

    def id_fn(st):
        rows = _refined(st)
        return _mean([losses_mod.id_loss(r, st, class_index[g], 0.1)
                      for r, g in zip(rows, labels)])

    def tri_fn(st):
        # margin large enough that every mined hinge stays active, keeping
        # the loss differentiable at the evaluation point
        return losses_mod.triplet_loss(dc.stack(_refined(st)),
                                       [class_index[g] for g in labels], alpha=0.5)

    def i2tce_fn(st):
        rows = _refined(st)
        return _mean([
            losses_mod.i2tce_loss(r, text_rows, class_index[g], st.params["temp.inv"], 0.1)
            for r, g in zip(rows, labels)
        ])

    def stage2_fn(st):
        return losses_mod.stage2_batch_loss(
            samples, masks, st, class_index, text_rows, alpha=0.5, epsilon=0.1
        )[0]

    checks = {
        "stage1_contrastive": (STAGE1_TRAINABLE, stage1_fn),
        "identity": (STAGE2_TRAINABLE, id_fn),
        "triplet": (STAGE2_TRAINABLE, tri_fn),
        "image_text": (STAGE2_TRAINABLE, i2tce_fn),
        "stage2_total": (STAGE2_TRAINABLE, stage2_fn),
    }
    reports = {}
    for name in _CHECKED_LOSSES:
        trainable, fn = checks[name]
        state.set_trainable(trainable)
        reports[name] = dc.grad_check(fn, state, step=step, tolerance=tolerance)
    return reports


# --------------------------------------------------------------------------
# Commands


def _load_data(path: str) -> Dataset:
    try:
        return load_dataset(path)
    except FileNotFoundError as e:
        raise CliError(EXIT_IO, f"dataset not found: {path}") from e


def _load_checkpoint_state(path: str):
    try:
        return state_from_checkpoint(path)
    except FileNotFoundError as e:
        raise CliError(EXIT_CHECKPOINT, f"checkpoint not found: {path}") from e


def _write_json(path: str, doc: dict) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(doc, separators=(",", ":")))
            fh.write("\n")
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write {path}: {e}") from e


def _check_data_matches_config(cfg: RunConfig, ds: Dataset) -> None:
    if ds.d_a != cfg.d_a:
        raise CliError(EXIT_CONFIG, f"config d_a={cfg.d_a} but dataset has d_a={ds.d_a}")
    largest = max(len(s.members) for s in ds.samples)
    if largest > cfg.m0:
        raise CliError(EXIT_CONFIG, f"dataset has {largest}-member views but config M0={cfg.m0}")
    widest = max(len(r) for r in ds.group_rosters().values())
    if widest > cfg.k_slots:
        raise CliError(EXIT_CONFIG, f"dataset has {widest}-member rosters but config K={cfg.k_slots}")


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    ds = generate_dataset(cfg.gen_config(), cfg.seed)
    doc = dataset_to_doc(ds)
    doc["tool_version"] = __version__
    doc["run_config"] = cfg.to_dict()
    _write_json(args.out, doc)
    cams = sorted({s.camera_id for s in ds.samples})
    print(f"wrote {args.out}: {len(ds.group_ids())} groups, "
          f"{len(ds.samples)} views, {len(cams)} cameras, "
          f"{len(ds.person_ids())} persons")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    ds = _load_data(args.data)
    _check_data_matches_config(cfg, ds)
    train_gids, _ = split_train_test(ds, cfg.train_fraction)
    train_samples = [s for s in ds.samples if s.group_id in set(train_gids)]
    rosters = ds.group_rosters()
    mvs_cfg = cfg.mvs if cfg.mvs_enabled else None
    model_cfg = cfg.model_config(ds, n_group_classes=len(train_gids))

    if args.stage == 1:
        if not cfg.gla_enabled:
            raise CliError(EXIT_CONFIG, "stage 1 trains the prompt vocabulary; gla.enabled is false")
        state = init_model_state(model_cfg, cfg.seed)
        state, history = train_stage1(
            state, train_samples, rosters, cfg.train_config(1), mvs=mvs_cfg
        )
        modules = {"gla": True, "mvs": cfg.mvs_enabled, "grce": False}
    else:
        if not args.init_checkpoint:
            raise CliError(EXIT_CHECKPOINT, "stage 2 needs --init-checkpoint from a stage-1 run")
        state, meta = _load_checkpoint_state(args.init_checkpoint)
        if meta["model"] != model_cfg.to_dict():
            raise CliError(EXIT_CONFIG, "init checkpoint was trained under a different model config")
        use_text = bool(meta.get("modules", {}).get("gla", True))
        state, history = train_stage2(
            state, train_samples, rosters, cfg.train_config(2),
            mvs=mvs_cfg, use_text=use_text, alpha=cfg.alpha, epsilon=cfg.epsilon,
        )
        modules = {"gla": use_text, "mvs": cfg.mvs_enabled, "grce": True}

    meta_out = {
        "model": model_cfg.to_dict(),
        "run": cfg.to_dict(),
        "stage": args.stage,
        "modules": modules,
    }
    try:
        save_checkpoint(args.out, state.params, meta_out)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write checkpoint {args.out}: {e}") from e

    log_path = args.out + ".log.jsonl"
    header = {"format": "gcum-train-log", "version": 1, "tool_version": __version__,
              "stage": args.stage, "config": cfg.to_dict()}
    try:
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, separators=(",", ":")) + "\n")
            for record in history:
                fh.write(json.dumps(record, separators=(",", ":")) + "\n")
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write training log {log_path}: {e}") from e

    if history:
        print(f"stage {args.stage} done: {len(history)} epochs, "
              f"final loss {history[-1]['loss_total']:.6f}; wrote {args.out}")
    else:
        print(f"stage {args.stage} done: 0 epochs (untrained); wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state, meta = _load_checkpoint_state(args.checkpoint)
    ds = _load_data(args.data)
    run_echo = meta.get("run")
    modules = meta.get("modules")
    if run_echo is None or modules is None:
        raise CliError(EXIT_IO, f"checkpoint sidecar for {args.checkpoint} lacks run metadata")
    fraction = float(run_echo["data"]["train_fraction"])
    _, test_gids = split_train_test(ds, fraction)
    test_samples = [s for s in ds.samples if s.group_id in set(test_gids)]
    report = evaluate(
        state, test_samples, args.query_camera,
        refined=bool(modules["grce"]), quantity=bool(modules["mvs"]),
    )
    print(json.dumps(report.to_dict()))
    if args.out:
        _write_json(args.out, {
            "format": "gcum-eval-report",
            "version": 1,
            "tool_version": __version__,
            "config": run_echo,
            "query_camera": args.query_camera,
            "modules": modules,
            "report": report.to_dict(),
        })
    return EXIT_OK


def cmd_grad_check(args) -> int:
    reports = run_grad_checks(args.seed, step=args.step, tolerance=args.tolerance)
    failed = False
    for name in _CHECKED_LOSSES:
        rep = reports[name]
        status = "ok" if rep.ok else "FAIL"
        print(f"{name}: max_rel_error={rep.max_rel_error:.3e} {status}")
        failed = failed or not rep.ok
    if failed:
        print("gradient check failed", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    ds = generate_dataset(cfg.gen_config(), cfg.seed)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    rows = run_ablation(
        ds, cfg.model_base(), cfg.train_config(1), seeds,
        mvs_cfg=cfg.mvs, alpha=cfg.alpha, epsilon=cfg.epsilon,
        train_fraction=cfg.train_fraction, query_camera=args.query_camera,
    )
    print(format_ablation_table(rows))
    if args.out:
        _write_json(args.out, {
            "format": "gcum-ablation",
            "version": 1,
            "tool_version": __version__,
            "config": cfg.to_dict(),
            "seeds": seeds,
            "rows": rows,
        })
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcum",
        description="group re-identification over synthetic appearance embeddings",
    )
    parser.add_argument("--version", action="version", version=f"gcum {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset and write it as JSON")
    p.add_argument("--config", default=None, help="JSON run config (defaults apply if omitted)")
    p.add_argument("--out", required=True, help="output dataset path")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage and write a checkpoint")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="dataset JSON from gen-data")
    p.add_argument("--init-checkpoint", default=None, help="stage-1 checkpoint (stage 2 only)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--query-camera", type=int, default=0)
    p.add_argument("--out", default=None, help="also write the report JSON here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grad-check", help="verify gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("ablate", help="train and evaluate all module combinations")
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", type=int, default=3, help="number of run seeds to average")
    p.add_argument("--query-camera", type=int, default=0)
    p.add_argument("--out", default=None, help="also write the table as JSON here")
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except dc.NonFiniteError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except (DatasetFormatError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
